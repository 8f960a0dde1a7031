use chrono::{Datelike, NaiveDate};
use flowscale_climate::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2003, 1, 1).unwrap()
}

// Fine fields are a per-month pattern plus one spatially uniform anomaly per
// day, which bilinear disaggregation reproduces exactly.
fn self_consistent(days: usize, seed: u64) -> (GridDataset, GridDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (6, 9);
    let dates = daily_calendar(start(), days);
    let mut values = Vec::new();
    for d in &dates {
        let a: f64 = rng.random_range(-4.0..4.0);
        values.extend((0..h * w).map(|p| (p as f64 * 0.37 + d.month() as f64).sin() * 3.0 + a));
    }
    let high = GridDataset::new(Variable::MaxTemperature, "degC", dates, h, w, values).unwrap();
    let low = block_downsample(&high, 3, DownsampleMode::Mean).unwrap();
    (low, high)
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

fn std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

#[test]
fn closed_loop_reproduces_truth() {
    let (low, high) = self_consistent(120, 1);
    let m = bcsd_fit(&low, &high, 20, DisaggregationMode::Additive).unwrap();
    let out = m.apply(&low).unwrap();
    assert_eq!((out.height, out.width), (high.height, high.width));
    for (a, b) in out.values.iter().zip(&high.values) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn median_input_gives_median_field() {
    let (low, high) = self_consistent(31, 2);
    let m = bcsd_fit(&low, &high, 31, DisaggregationMode::Additive).unwrap();
    let median = |ds: &GridDataset, c: usize| {
        let mut s = ds.series(c);
        s.sort_by(f64::total_cmp);
        quantile_sorted(&s, 0.5)
    };
    let input: Vec<f64> = (0..low.cells()).map(|c| median(&low, c)).collect();
    let one = low.subset(0..1).unwrap().with_values(input).unwrap();
    let out = m.apply(&one).unwrap();
    for c in 0..high.cells() {
        assert!((out.values[c] - median(&high, c)).abs() < 1e-9);
    }
}

#[test]
fn additive_bias_recovered_on_heldout_year() {
    let (low, high, _) = synth_bias_scenario(&BiasScenario::default()).unwrap();
    let split = low.dates.iter().position(|d| d.year() == 2005).unwrap();
    let n = low.len();
    let m = bcsd_fit(&low.subset(0..split).unwrap(), &high.subset(0..split).unwrap(), 100, DisaggregationMode::Additive).unwrap();
    let out = m.apply(&low.subset(split..n).unwrap()).unwrap();
    let truth = high.subset(split..n).unwrap();
    let (e, s) = (rmse(&out.values, &truth.values), std(&truth.values));
    assert!(e < 0.05 * s, "rmse {e} std {s}");
    // without correction the bias dominates
    let naive = bilinear_check(&low.subset(split..n).unwrap(), 4);
    assert!(rmse(&naive, &truth.values) > 0.05 * s);
}

fn bilinear_check(low: &GridDataset, f: usize) -> Vec<f64> {
    (0..low.len()).flat_map(|t| bilinear_upsample(low.field(t), low.height, low.width, f)).collect()
}

#[test]
fn multiplicative_bias_recovered_without_negatives() {
    let cfg = BiasScenario { variable: Variable::Precipitation, seed: 4, ..BiasScenario::default() };
    let (low, high, factors) = synth_bias_scenario(&cfg).unwrap();
    let split = low.dates.iter().position(|d| d.year() == 2005).unwrap();
    let n = low.len();
    let m = bcsd_fit(&low.subset(0..split).unwrap(), &high.subset(0..split).unwrap(), 100, DisaggregationMode::Multiplicative).unwrap();
    let out = m.apply(&low.subset(split..n).unwrap()).unwrap();
    let truth = high.subset(split..n).unwrap();
    assert!(out.values.iter().all(|&v| v >= 0.0));
    let (e, s) = (rmse(&out.values, &truth.values), std(&truth.values));
    assert!(e < 0.05 * s, "rmse {e} std {s}");
    // the upper part of every map divides by that cell's factor
    for mm in m.months.values() {
        for (q, k) in mm.maps.iter().zip(&factors) {
            let v = q.source[90];
            assert!((q.map(v) * k / v - 1.0).abs() < 0.01);
        }
    }
}

#[test]
fn unseen_month_and_shape_errors() {
    let (low, high) = self_consistent(59, 3);
    let m = bcsd_fit(&low, &high, 100, DisaggregationMode::Additive).unwrap();
    let (later, _) = self_consistent(70, 3);
    assert!(matches!(m.apply(&later), Err(ClimateError::Calendar(_))));
    assert!(bcsd_fit(&low, &high, 1, DisaggregationMode::Additive).is_err());
    assert!(bcsd_fit(&low.subset(0..10).unwrap(), &high, 10, DisaggregationMode::Additive).is_err());
    assert!(m.apply(&high).is_err());
}

#[test]
fn model_file_roundtrip() {
    let (low, high) = self_consistent(40, 5);
    let m = bcsd_fit(&low, &high, 10, DisaggregationMode::Additive).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bcsd");
    m.save(&path).unwrap();
    let back = BcsdModel::load(&path).unwrap();
    assert_eq!(back, m);
    let ckpt = flowscale_tensor::Checkpoint::decode(&std::fs::read(&path).unwrap()).unwrap();
    assert!(ckpt.header.contains("\"format\":\"bcsd\""));
}

proptest! {
    #[test]
    fn maps_are_monotone_and_preserve_rank(seed in 0u64..500, dry in 0.0f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let days = 62;
        let dates = daily_calendar(start(), days);
        let mut draw = |mult: f64| -> Vec<f64> {
            (0..days * 4).map(|_| if rng.random_bool(dry) { 0.0 } else { rng.random_range(0.0..10.0) * mult }).collect()
        };
        let low = GridDataset::new(Variable::Precipitation, "mm", dates.clone(), 2, 2, draw(1.0)).unwrap();
        let fine = GridDataset::new(Variable::Precipitation, "mm", dates, 2, 2, draw(1.7)).unwrap();
        let m = bcsd_fit(&low, &fine, 25, DisaggregationMode::Multiplicative).unwrap();
        for mm in m.months.values() {
            for q in &mm.maps {
                let mut prev = f64::NEG_INFINITY;
                for i in 0..=400 {
                    let y = q.map(-2.0 + i as f64 * 0.04);
                    prop_assert!(y >= prev);
                    prev = y;
                }
            }
        }
        let corrected = m.correct(&low).unwrap();
        for c in 0..4 {
            let (a, b) = (low.series(c), corrected.series(c));
            for i in 0..days {
                for j in 0..days {
                    if low.dates[i].month() == low.dates[j].month() && a[i] < a[j] {
                        prop_assert!(b[i] <= b[j]);
                    }
                }
            }
        }
    }
}
