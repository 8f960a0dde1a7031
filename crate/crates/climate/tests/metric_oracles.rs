use chrono::{Datelike, NaiveDate};
use flowscale_climate::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(variable: Variable, start: NaiveDate, cells: (usize, usize), values: Vec<f64>) -> GridDataset {
    let n = values.len() / (cells.0 * cells.1);
    GridDataset::new(variable, "u", daily_calendar(start, n), cells.0, cells.1, values).unwrap()
}

fn day(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

// Longest run of days satisfying `pred`, by checking every interval.
fn longest_run(v: &[f64], pred: impl Fn(f64) -> bool) -> usize {
    let mut best = 0;
    for i in 0..v.len() {
        for j in i..v.len() {
            if v[i..=j].iter().all(|&x| pred(x)) {
                best = best.max(j - i + 1);
            }
        }
    }
    best
}

fn brute_rx5d(v: &[f64]) -> Option<f64> {
    if v.len() < 5 {
        return None;
    }
    let mut best = f64::NEG_INFINITY;
    for i in 0..=v.len() - 5 {
        let mut s = 0.0;
        for k in 0..5 {
            s += v[i + k];
        }
        if s > best {
            best = s;
        }
    }
    Some(best)
}

#[test]
fn sparse_worked_example() {
    let start = day(2000, 1, 1);
    let truth = dataset(Variable::Precipitation, start, (1, 1), vec![0.0, 5.0, 0.0, 3.0]);
    let pred = dataset(Variable::Precipitation, start, (1, 1), vec![0.0, 4.0, 2.0, 3.0]);
    let s = sparse_stats(&pred, &truth, 1.0).unwrap();
    assert!((s.sparse_bias - 1.0 / 3.0).abs() < 1e-12);
    assert!((s.sparse_rmse - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(s.excluded_cells, 0);
}

#[test]
fn sparse_excludes_all_dry_cell() {
    let start = day(2000, 1, 1);
    let truth = dataset(Variable::Precipitation, start, (1, 2), vec![0.0, 2.0, 0.0, 4.0]);
    let pred = dataset(Variable::Precipitation, start, (1, 2), vec![0.0, 3.0, 0.0, 4.0]);
    let s = sparse_stats(&pred, &truth, 1.0).unwrap();
    assert_eq!(s.excluded_cells, 1);
    assert!((s.sparse_bias - 0.5).abs() < 1e-12);
    let zeros = dataset(Variable::Precipitation, start, (1, 1), vec![0.0; 3]);
    assert!(sparse_stats(&zeros, &zeros, 1.0).is_err());
}

#[test]
fn precip_worked_example() {
    let p = precip_month(&[0.0, 2.0, 3.0, 0.0, 0.0, 0.0, 5.0, 1.5], 1.0);
    assert_eq!((p.cwd, p.cdd), (2, 3));
    assert_eq!(p.rx1d, 5.0);
    assert_eq!(p.rx5d, Some(8.0));
    assert_eq!(p.sdii, 2.875);
}

#[test]
fn precip_degenerate_months() {
    let dry = precip_month(&[0.0; 30], 1.0);
    assert_eq!((dry.cdd, dry.cwd, dry.rx1d, dry.sdii, dry.wet_days), (30, 0, 0.0, 0.0, 0));
    let mut one = vec![0.0; 30];
    one[12] = 10.0;
    let p = precip_month(&one, 1.0);
    assert_eq!((p.cwd, p.rx1d, p.sdii), (1, 10.0, 10.0));
}

#[test]
fn temperature_examples() {
    let ds = dataset(Variable::MaxTemperature, day(2003, 5, 1), (1, 1), vec![18.0, 25.0, 21.0]);
    let r = climdex_temperature(&ds).unwrap();
    assert_eq!(r.series(ClimdexIndex::TXx).unwrap(), &[Some(25.0)]);
    assert_eq!(r.series(ClimdexIndex::TXn).unwrap(), &[Some(18.0)]);
    let flat = dataset(Variable::MaxTemperature, day(2003, 4, 1), (1, 1), vec![20.0; 30]);
    let r = climdex_temperature(&flat).unwrap();
    assert_eq!(r.series(ClimdexIndex::TXx).unwrap(), r.series(ClimdexIndex::TXn).unwrap());
}

#[test]
fn hundred_random_months_match_direct_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let start = day(2001, 1, 1);
    let end = day(2009, 5, 1);
    let n = (end - start).num_days() as usize;
    let dates = daily_calendar(start, n);
    assert_eq!(dates.iter().filter(|d| d.day() == 1).count(), 100);
    // quarter-unit amounts keep every sum exact regardless of order
    let precip: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.45) { 0.0 } else { rng.random_range(0..60) as f64 * 0.25 }).collect();
    let temps: Vec<f64> = (0..n).map(|_| rng.random_range(-40.0..45.0)).collect();
    let p = climdex_precipitation(&dataset(Variable::Precipitation, start, (1, 1), precip.clone()), 1.0).unwrap();
    let t = climdex_temperature(&dataset(Variable::MaxTemperature, start, (1, 1), temps.clone())).unwrap();
    assert_eq!(p.months.len(), 100);

    let mut i = 0;
    for (m, ym) in p.months.iter().enumerate() {
        let len = dates[i..].iter().take_while(|d| d.year() == ym.year && d.month() == ym.month).count();
        let v = &precip[i..i + len];
        let tv = &temps[i..i + len];
        let wet: Vec<f64> = v.iter().copied().filter(|&x| x >= 1.0).collect();
        let sdii = if wet.is_empty() { 0.0 } else { wet.iter().sum::<f64>() / wet.len() as f64 };
        assert_eq!(p.series(ClimdexIndex::CDD).unwrap()[m], Some(longest_run(v, |x| x < 1.0) as f64), "{ym}");
        assert_eq!(p.series(ClimdexIndex::CWD).unwrap()[m], Some(longest_run(v, |x| x >= 1.0) as f64), "{ym}");
        assert_eq!(p.series(ClimdexIndex::Rx1d).unwrap()[m], Some(v.iter().copied().fold(0.0, f64::max)));
        assert_eq!(p.series(ClimdexIndex::Rx5d).unwrap()[m], brute_rx5d(v));
        assert_eq!(p.series(ClimdexIndex::SDII).unwrap()[m], Some(sdii));
        let hi = tv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = tv.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(t.series(ClimdexIndex::TXx).unwrap()[m], Some(hi));
        assert_eq!(t.series(ClimdexIndex::TXn).unwrap()[m], Some(lo));
        i += len;
    }
    assert_eq!(i, n);
}

#[test]
fn pointwise_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let start = day(2010, 6, 1);
    let pred: Vec<f64> = (0..30).map(|_| rng.random_range(-5.0..5.0)).collect();
    let truth: Vec<f64> = (0..30).map(|_| rng.random_range(-5.0..5.0)).collect();
    let m = pointwise_stats(
        &dataset(Variable::MaxTemperature, start, (1, 3), pred.clone()),
        &dataset(Variable::MaxTemperature, start, (1, 3), truth.clone()),
    )
    .unwrap();
    let (mut rmse, mut bias, mut r) = (0.0, 0.0, 0.0);
    for c in 0..3 {
        let p: Vec<f64> = (0..10).map(|t| pred[t * 3 + c]).collect();
        let q: Vec<f64> = (0..10).map(|t| truth[t * 3 + c]).collect();
        rmse += (p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 10.0).sqrt();
        bias += p.iter().zip(&q).map(|(a, b)| a - b).sum::<f64>() / 10.0;
        let (mp, mq) = (p.iter().sum::<f64>() / 10.0, q.iter().sum::<f64>() / 10.0);
        let cov: f64 = p.iter().zip(&q).map(|(a, b)| (a - mp) * (b - mq)).sum();
        let vp: f64 = p.iter().map(|a| (a - mp) * (a - mp)).sum();
        let vq: f64 = q.iter().map(|b| (b - mq) * (b - mq)).sum();
        r += cov / (vp * vq).sqrt();
    }
    assert!((m.rmse - rmse / 3.0).abs() < 1e-12);
    assert!((m.bias - bias / 3.0).abs() < 1e-12);
    assert!((m.pearson_r.unwrap() - r / 3.0).abs() < 1e-12);
}

#[test]
fn pointwise_constant_shift_and_identity() {
    let start = day(2010, 1, 1);
    let truth: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin() * 4.0).collect();
    let t = dataset(Variable::MaxTemperature, start, (2, 1), truth.clone());
    let shifted = dataset(Variable::MaxTemperature, start, (2, 1), truth.iter().map(|v| v + 2.0).collect());
    let m = pointwise_stats(&shifted, &t).unwrap();
    assert!((m.bias - 2.0).abs() < 1e-12 && (m.rmse - 2.0).abs() < 1e-12);
    assert!((m.pearson_r.unwrap() - 1.0).abs() < 1e-12);
    let same = pointwise_stats(&t, &t).unwrap();
    assert_eq!((same.rmse, same.bias), (0.0, 0.0));
}

#[test]
fn compare_correlation_matches_direct_pearson() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = day(2001, 1, 1);
    let n = (day(2003, 1, 1) - start).num_days() as usize;
    let truth: Vec<f64> = (0..n * 2).map(|_| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..20.0) }).collect();
    let pred: Vec<f64> = truth.iter().map(|v| (v * 0.8 + rng.random_range(0.0..3.0)).max(0.0)).collect();
    let rt = climdex_precipitation(&dataset(Variable::Precipitation, start, (1, 2), truth), 1.0).unwrap();
    let rp = climdex_precipitation(&dataset(Variable::Precipitation, start, (1, 2), pred), 1.0).unwrap();
    assert_eq!(rt.months.len(), 24);
    let cmp = climdex_compare(&rp, &rt, CompareMode::Correlation, Aggregation::Pooled).unwrap();
    for c in &cmp {
        let a: Vec<f64> = rp.series(c.index).unwrap().iter().map(|v| v.unwrap()).collect();
        let b: Vec<f64> = rt.series(c.index).unwrap().iter().map(|v| v.unwrap()).collect();
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        assert!((c.value - cov / (va * vb).sqrt()).abs() < 1e-12, "{:?}", c.index);
    }
    let own = climdex_compare(&rt, &rt, CompareMode::Correlation, Aggregation::Pooled).unwrap();
    assert!(own.iter().all(|c| (c.value - 1.0).abs() < 1e-12));
}

#[test]
fn compare_bias_of_unit_shift() {
    let start = day(2001, 1, 1);
    let truth: Vec<f64> = (0..120).map(|i| 15.0 + (i as f64 * 0.3).cos() * 5.0).collect();
    let rt = climdex_temperature(&dataset(Variable::MaxTemperature, start, (1, 1), truth.clone())).unwrap();
    let rp = climdex_temperature(&dataset(Variable::MaxTemperature, start, (1, 1), truth.iter().map(|v| v + 1.0).collect())).unwrap();
    for c in climdex_compare(&rp, &rt, CompareMode::Bias, Aggregation::Pooled).unwrap() {
        assert!((c.value - 1.0).abs() < 1e-12);
        assert!(c.spread.unwrap() < 1e-12);
    }
}

#[test]
fn p98_of_uniform_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let values: Vec<f64> = (0..1000).map(|_| rng.random_range(1.0..10.0)).collect();
    let c = climatology_quantiles(&values, 1.0).unwrap();
    // uniform on [1, 10): the 98th percentile is 1 + 0.98 · 9
    assert!((c.p98 - 9.82).abs() < 0.15, "{}", c.p98);
    assert_eq!(climatology_quantiles(&[2.0, 4.0, 0.0], 1.0).unwrap().p50, 3.0);
    assert!(climatology_quantiles(&[0.0, 0.5], 1.0).is_err());
}

proptest! {
    #[test]
    fn precip_index_bounds(v in prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..30.0], 5..32)) {
        let p = precip_month(&v, 1.0);
        prop_assert!(p.cdd <= v.len() && p.cwd <= v.len());
        prop_assert!(p.rx5d.unwrap() >= p.rx1d && p.rx1d >= 0.0);
        if p.wet_days > 0 {
            prop_assert!(p.sdii >= 1.0);
        }
    }

    #[test]
    fn translation_leaves_rmse_and_r(shift in -50.0f64..50.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = day(2005, 1, 1);
        let a: Vec<f64> = (0..24).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..24).map(|_| rng.random_range(-3.0..3.0)).collect();
        let ds = |v: &[f64], s: f64| dataset(Variable::MaxTemperature, start, (1, 2), v.iter().map(|x| x + s).collect());
        let m0 = pointwise_stats(&ds(&a, 0.0), &ds(&b, 0.0)).unwrap();
        let m1 = pointwise_stats(&ds(&a, shift), &ds(&b, shift)).unwrap();
        prop_assert!((m0.rmse - m1.rmse).abs() < 1e-9);
        prop_assert!((m0.bias - m1.bias).abs() < 1e-9);
        prop_assert!((m0.pearson_r.unwrap() - m1.pearson_r.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn sparse_approaches_pointwise(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = day(2005, 1, 1);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..5.0)).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random_range(0.01..5.0)).collect();
        let pa = dataset(Variable::Precipitation, start, (1, 2), a);
        let pb = dataset(Variable::Precipitation, start, (1, 2), b);
        let s = sparse_stats(&pa, &pb, 1e-6).unwrap();
        let m = pointwise_stats(&pa, &pb).unwrap();
        prop_assert!((s.sparse_rmse - m.rmse).abs() < 1e-12);
        prop_assert!((s.sparse_bias - m.bias).abs() < 1e-12);
    }
}
