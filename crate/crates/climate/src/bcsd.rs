//! Bias-correction spatial disaggregation.
//!
//! Fitting pairs a coarse input with a fine target on the same calendar. The
//! target is block-averaged to the coarse grid, and for each coarse cell and
//! calendar month an empirical quantile map from input values to aggregated
//! target values is stored. Applying the model quantile-maps each coarse
//! value, turns it into an anomaly (additive mode) or ratio (multiplicative
//! mode) against the coarse monthly climatology, interpolates that field
//! bilinearly to the fine grid and recombines it with the fine monthly
//! climatology.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use flowscale_tensor::{Checkpoint, ParameterStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClimateError, Result};
use crate::grid::{block_downsample, daily_calendar, DownsampleMode, GridDataset, Variable};
use crate::metrics::quantile_sorted;

pub const BCSD_FORMAT: &str = "bcsd";
const BCSD_VERSION: u32 = 1;
pub const DEFAULT_QUANTILES: usize = 100;
/// Upper bound on disaggregated ratios.
pub const RATIO_CAP: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DisaggregationMode {
    Additive,
    Multiplicative,
}

impl DisaggregationMode {
    pub fn for_variable(v: Variable) -> Self {
        match v {
            Variable::MaxTemperature => DisaggregationMode::Additive,
            Variable::Precipitation => DisaggregationMode::Multiplicative,
        }
    }
}

/// Paired quantiles of one coarse cell in one calendar month.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantileMap {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

fn end_slope(s0: f64, s1: f64, t0: f64, t1: f64) -> f64 {
    if s1 > s0 {
        (t1 - t0) / (s1 - s0)
    } else {
        1.0
    }
}

impl QuantileMap {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Piecewise-linear in `v`, extended linearly past both ends with the
    /// slope of the end segment. A value equal to a run of tied source
    /// quantiles maps to the mean of their targets.
    pub fn map(&self, v: f64) -> f64 {
        let (s, t) = (&self.source, &self.target);
        let n = s.len();
        if n == 1 {
            return t[0] + (v - s[0]);
        }
        if v < s[0] {
            return t[0] + end_slope(s[0], s[1], t[0], t[1]) * (v - s[0]);
        }
        if v > s[n - 1] {
            return t[n - 1] + end_slope(s[n - 2], s[n - 1], t[n - 2], t[n - 1]) * (v - s[n - 1]);
        }
        let lo = s.partition_point(|&q| q < v);
        let hi = s.partition_point(|&q| q <= v);
        if lo < hi {
            return t[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
        }
        let frac = (v - s[lo - 1]) / (s[lo] - s[lo - 1]);
        t[lo - 1] + frac * (t[lo] - t[lo - 1])
    }
}

/// Everything fitted for one calendar month.
#[derive(Clone, Debug, PartialEq)]
pub struct MonthModel {
    /// One map per coarse cell.
    pub maps: Vec<QuantileMap>,
    pub coarse_climatology: Vec<f64>,
    pub fine_climatology: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcsdModel {
    pub variable: Variable,
    pub mode: DisaggregationMode,
    pub factor: usize,
    pub coarse: (usize, usize),
    pub fine: (usize, usize),
    /// Keyed by calendar month, 1 to 12.
    pub months: BTreeMap<u32, MonthModel>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    variable: Variable,
    mode: DisaggregationMode,
    factor: usize,
    coarse: (usize, usize),
    fine: (usize, usize),
    months: Vec<u32>,
}

fn quantiles(values: &mut [f64], n_q: usize) -> Vec<f64> {
    values.sort_by(f64::total_cmp);
    (0..n_q).map(|i| quantile_sorted(values, i as f64 / (n_q - 1) as f64)).collect()
}

fn monthly_means(ds: &GridDataset, days: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; ds.cells()];
    for &t in days {
        for (o, v) in out.iter_mut().zip(ds.field(t)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= days.len() as f64);
    out
}

/// Fit on paired `low` (coarse) and `high` (fine) datasets sharing a
/// calendar. A month with fewer than `n_q` days uses as many quantiles as it
/// has days.
pub fn bcsd_fit(low: &GridDataset, high: &GridDataset, n_q: usize, mode: DisaggregationMode) -> Result<BcsdModel> {
    if n_q < 2 {
        return Err(ClimateError::Insufficient(format!("need at least 2 quantiles, got {n_q}")));
    }
    if low.dates != high.dates {
        return Err(ClimateError::Calendar("coarse and fine datasets must share one calendar".into()));
    }
    if low.variable != high.variable {
        return Err(ClimateError::Format(format!("variables differ: {:?} vs {:?}", low.variable, high.variable)));
    }
    if low.height == 0 || high.height % low.height != 0 || high.width % low.width != 0 || high.height / low.height != high.width / low.width {
        return Err(ClimateError::Shape(format!(
            "fine grid {}×{} is not an integer refinement of {}×{}",
            high.height, high.width, low.height, low.width
        )));
    }
    if mode == DisaggregationMode::Multiplicative && low.values.iter().chain(&high.values).any(|&v| v < 0.0) {
        return Err(ClimateError::Domain("multiplicative disaggregation needs nonnegative fields".into()));
    }
    let factor = high.height / low.height;
    let aggregated = block_downsample(high, factor, DownsampleMode::Mean)?;
    let mut by_month: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (t, d) in low.dates.iter().enumerate() {
        by_month.entry(d.month()).or_default().push(t);
    }
    let mut months = BTreeMap::new();
    for (month, days) in by_month {
        if days.len() < 2 {
            return Err(ClimateError::Insufficient(format!("month {month} has {} day(s)", days.len())));
        }
        let q = if days.len() < n_q {
            log::warn!("month {month}: {} days, using {} quantiles instead of {n_q}", days.len(), days.len());
            days.len()
        } else {
            n_q
        };
        let maps = (0..low.cells())
            .map(|c| {
                let mut src: Vec<f64> = days.iter().map(|&t| low.field(t)[c]).collect();
                let mut dst: Vec<f64> = days.iter().map(|&t| aggregated.field(t)[c]).collect();
                QuantileMap { source: quantiles(&mut src, q), target: quantiles(&mut dst, q) }
            })
            .collect();
        months.insert(
            month,
            MonthModel { maps, coarse_climatology: monthly_means(&aggregated, &days), fine_climatology: monthly_means(high, &days) },
        );
    }
    Ok(BcsdModel { variable: low.variable, mode, factor, coarse: (low.height, low.width), fine: (high.height, high.width), months })
}

/// Bilinear interpolation between coarse cell centres, holding the edge
/// values constant beyond the outermost centres.
pub fn bilinear_upsample(field: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let coord = |i: usize, n: usize| -> (usize, usize, f64) {
        let u = ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = (u.floor() as usize).min(n.saturating_sub(2));
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut out = Vec::with_capacity(h * w * factor * factor);
    for y in 0..h * factor {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..w * factor {
            let (x0, x1, fx) = coord(x, w);
            let top = field[y0 * w + x0] * (1.0 - fx) + field[y0 * w + x1] * fx;
            let bottom = field[y1 * w + x0] * (1.0 - fx) + field[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

impl BcsdModel {
    fn check_input(&self, low: &GridDataset) -> Result<()> {
        if low.variable != self.variable {
            return Err(ClimateError::Format(format!("model is for {:?}, input is {:?}", self.variable, low.variable)));
        }
        if (low.height, low.width) != self.coarse {
            return Err(ClimateError::Shape(format!("model expects a {:?} grid, input is {}×{}", self.coarse, low.height, low.width)));
        }
        if let Some(d) = low.dates.iter().find(|d| !self.months.contains_key(&d.month())) {
            return Err(ClimateError::Calendar(format!("{d}: month {} was not seen during fitting", d.month())));
        }
        Ok(())
    }

    fn clamp(&self, v: f64) -> f64 {
        match self.mode {
            DisaggregationMode::Additive => v,
            DisaggregationMode::Multiplicative => v.max(0.0),
        }
    }

    /// Quantile-mapped input on the coarse grid.
    pub fn correct(&self, low: &GridDataset) -> Result<GridDataset> {
        self.check_input(low)?;
        let mut values = Vec::with_capacity(low.values.len());
        for (t, d) in low.dates.iter().enumerate() {
            let m = &self.months[&d.month()];
            values.extend(low.field(t).iter().zip(&m.maps).map(|(&v, q)| self.clamp(q.map(v))));
        }
        low.with_values(values)
    }

    pub fn apply(&self, low: &GridDataset) -> Result<GridDataset> {
        let corrected = self.correct(low)?;
        let (h, w) = self.coarse;
        let mut values = Vec::with_capacity(low.len() * self.fine.0 * self.fine.1);
        for (t, d) in low.dates.iter().enumerate() {
            let m = &self.months[&d.month()];
            let field = corrected.field(t);
            let deviation: Vec<f64> = match self.mode {
                DisaggregationMode::Additive => field.iter().zip(&m.coarse_climatology).map(|(v, c)| v - c).collect(),
                DisaggregationMode::Multiplicative => field
                    .iter()
                    .zip(&m.coarse_climatology)
                    .map(|(&v, &c)| if c > 0.0 { (v / c).min(RATIO_CAP) } else if v == 0.0 { 1.0 } else { RATIO_CAP })
                    .collect(),
            };
            let fine = bilinear_upsample(&deviation, h, w, self.factor);
            values.extend(fine.iter().zip(&m.fine_climatology).map(|(&dv, &c)| match self.mode {
                DisaggregationMode::Additive => c + dv,
                DisaggregationMode::Multiplicative => c * dv,
            }));
        }
        Ok(GridDataset {
            height: self.fine.0,
            width: self.fine.1,
            values,
            bounds: None,
            resolution: Some("bcsd".into()),
            ..low.clone()
        })
    }

    /// Parameter entries are `month{MM}/source`, `month{MM}/target` (each
    /// `[cells, n_q]`), `month{MM}/coarse_climatology` and
    /// `month{MM}/fine_climatology`.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = Header {
            format: BCSD_FORMAT.into(),
            version: BCSD_VERSION,
            variable: self.variable,
            mode: self.mode,
            factor: self.factor,
            coarse: self.coarse,
            fine: self.fine,
            months: self.months.keys().copied().collect(),
        };
        let mut store = ParameterStore::new();
        for (month, m) in &self.months {
            let cells = m.maps.len();
            let q = m.maps.first().map_or(0, QuantileMap::len);
            let flat = |f: fn(&QuantileMap) -> &Vec<f64>| m.maps.iter().flat_map(|qm| f(qm).iter().copied()).collect::<Vec<_>>();
            store.insert(format!("month{month:02}/source"), Tensor::new(vec![cells, q], flat(|qm| &qm.source))?)?;
            store.insert(format!("month{month:02}/target"), Tensor::new(vec![cells, q], flat(|qm| &qm.target))?)?;
            store.insert(format!("month{month:02}/coarse_climatology"), Tensor::from_vec(m.coarse_climatology.clone())?)?;
            store.insert(format!("month{month:02}/fine_climatology"), Tensor::from_vec(m.fine_climatology.clone())?)?;
        }
        let header = serde_json::to_string(&header).map_err(|e| ClimateError::Format(e.to_string()))?;
        Ok(Checkpoint { header, store })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let header: Header = serde_json::from_str(&ckpt.header).map_err(|e| ClimateError::Format(format!("bcsd header: {e}")))?;
        if header.format != BCSD_FORMAT || header.version != BCSD_VERSION {
            return Err(ClimateError::Format(format!("not a bcsd model (format {:?}, version {})", header.format, header.version)));
        }
        let coarse_cells = header.coarse.0 * header.coarse.1;
        let fine_cells = header.fine.0 * header.fine.1;
        let get = |name: String| ckpt.store.get(&name).ok_or_else(|| ClimateError::Format(format!("bcsd model lacks `{name}`")));
        let mut months = BTreeMap::new();
        for month in header.months {
            let src = get(format!("month{month:02}/source"))?;
            let dst = get(format!("month{month:02}/target"))?;
            let cc = get(format!("month{month:02}/coarse_climatology"))?;
            let fc = get(format!("month{month:02}/fine_climatology"))?;
            if src.shape() != dst.shape() || src.shape().len() != 2 || src.shape()[0] != coarse_cells || src.shape()[1] == 0 {
                return Err(ClimateError::Format(format!("month {month}: quantile tables have shapes {:?} and {:?}", src.shape(), dst.shape())));
            }
            if cc.numel() != coarse_cells || fc.numel() != fine_cells {
                return Err(ClimateError::Format(format!("month {month}: climatology sizes do not match the grids")));
            }
            let q = src.shape()[1];
            let maps = (0..coarse_cells)
                .map(|c| QuantileMap { source: src.data()[c * q..(c + 1) * q].to_vec(), target: dst.data()[c * q..(c + 1) * q].to_vec() })
                .collect();
            months.insert(month, MonthModel { maps, coarse_climatology: cc.data().to_vec(), fine_climatology: fc.data().to_vec() });
        }
        Ok(BcsdModel { variable: header.variable, mode: header.mode, factor: header.factor, coarse: header.coarse, fine: header.fine, months })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(|e| ClimateError::io(path, e))?);
        self.to_checkpoint()?.write_to(&mut w)?;
        w.flush().map_err(|e| ClimateError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let r = BufReader::new(File::open(path).map_err(|e| ClimateError::io(path, e))?);
        BcsdModel::from_checkpoint(&Checkpoint::read_from(r)?)
    }
}

/// Synthetic pairs with a known coarse-scale distortion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasScenario {
    pub height: usize,
    pub width: usize,
    pub factor: usize,
    pub days: usize,
    pub variable: Variable,
    pub seed: u64,
    pub start: NaiveDate,
}

impl Default for BiasScenario {
    fn default() -> Self {
        BiasScenario {
            height: 16,
            width: 16,
            factor: 4,
            days: 1826,
            variable: Variable::MaxTemperature,
            seed: 0,
            start: NaiveDate::from_ymd_opt(2001, 1, 1).expect("valid date"),
        }
    }
}

/// Fine fields are a seasonal climatology plus a smooth daily anomaly
/// (temperature) or times a smooth daily ratio with dry days (precipitation).
/// The coarse input is the block mean shifted by a per-cell offset in
/// `[1, 5]` or scaled by a per-cell factor in `[1.5, 3]`. Returns
/// `(coarse input, fine truth, per-cell distortion)`.
pub fn synth_bias_scenario(cfg: &BiasScenario) -> Result<(GridDataset, GridDataset, Vec<f64>)> {
    if cfg.factor == 0 || cfg.height % cfg.factor != 0 || cfg.width % cfg.factor != 0 || cfg.days == 0 {
        return Err(ClimateError::Shape(format!("{}×{} over {} days with factor {}", cfg.height, cfg.width, cfg.days, cfg.factor)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let dates = daily_calendar(cfg.start, cfg.days);
    let ramp = |x: usize| (x as f64 - (w as f64 - 1.0) / 2.0) / w as f64;
    let pattern: Vec<f64> = (0..h * w).map(|p| ((p / w) as f64 / 3.0).sin() + ((p % w) as f64 / 4.0).cos()).collect();
    let mut values = Vec::with_capacity(cfg.days * h * w);
    for d in &dates {
        let season = (std::f64::consts::TAU * (d.month() as f64 - 4.0) / 12.0).sin();
        match cfg.variable {
            Variable::MaxTemperature => {
                let a: f64 = rng.random_range(-5.0..5.0);
                let b: f64 = rng.random_range(-0.5..0.5);
                values.extend((0..h * w).map(|p| 20.0 + 3.0 * pattern[p] + 12.0 * season * (1.0 + 0.2 * pattern[p]) + a + b * ramp(p % w)));
            }
            Variable::Precipitation => {
                let r: f64 = if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.2..1.8) };
                let s: f64 = rng.random_range(-1.0..1.0);
                values.extend((0..h * w).map(|p| (3.0 + pattern[p]) * (1.0 + 0.5 * season) * r * (1.0 + 0.1 * s * ramp(p % w))));
            }
        }
    }
    let units = match cfg.variable {
        Variable::MaxTemperature => "degC",
        Variable::Precipitation => "mm/day",
    };
    let high = GridDataset::new(cfg.variable, units, dates, h, w, values)?;
    let coarse = block_downsample(&high, cfg.factor, DownsampleMode::Mean)?;
    let distortion: Vec<f64> = match cfg.variable {
        Variable::MaxTemperature => (0..coarse.cells()).map(|_| rng.random_range(1.0..5.0)).collect(),
        Variable::Precipitation => (0..coarse.cells()).map(|_| rng.random_range(1.5..3.0)).collect(),
    };
    let cells = coarse.cells();
    let low = coarse.with_values(
        coarse
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| match cfg.variable {
                Variable::MaxTemperature => v + distortion[i % cells],
                Variable::Precipitation => v * distortion[i % cells],
            })
            .collect(),
    )?;
    Ok((low, high, distortion))
}
