//! Pointwise, sparse, Climdex and climatology statistics.
//!
//! Pointwise statistics are computed per cell over time and then averaged
//! over cells. Climdex indices are monthly, per cell; months are calendar
//! months of a contiguous daily series.

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{ClimateError, Result};
use crate::grid::{GridDataset, Variable};

/// ETCCDI wet-day threshold in mm/day.
pub const WET_DAY_THRESHOLD: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub bias: f64,
    /// Mean per-cell correlation, `None` when every cell has zero variance.
    pub pearson_r: Option<f64>,
    /// Cells left out of the correlation average.
    pub excluded_cells: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(MeanStd { mean, std })
    }
}

/// Per-fold metrics and their spread across folds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub folds: Vec<Metrics>,
    pub rmse: MeanStd,
    pub bias: MeanStd,
    pub pearson_r: Option<MeanStd>,
}

impl MetricReport {
    pub fn from_folds(folds: Vec<Metrics>) -> Result<Self> {
        let pick = |f: fn(&Metrics) -> f64| folds.iter().map(f).collect::<Vec<_>>();
        let rmse = MeanStd::of(&pick(|m| m.rmse)).ok_or_else(|| ClimateError::Insufficient("no folds".into()))?;
        let bias = MeanStd::of(&pick(|m| m.bias)).expect("nonempty");
        let rs: Vec<f64> = folds.iter().filter_map(|m| m.pearson_r).collect();
        Ok(MetricReport { rmse, bias, pearson_r: MeanStd::of(&rs), folds })
    }
}

/// Pearson correlation, `None` when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn pointwise_stats(pred: &GridDataset, truth: &GridDataset) -> Result<Metrics> {
    pred.same_grid(truth)?;
    let cells = truth.cells();
    let n = truth.len() as f64;
    let (mut rmse, mut bias, mut r_sum, mut r_count) = (0.0, 0.0, 0.0, 0usize);
    for cell in 0..cells {
        let p = pred.series(cell);
        let t = truth.series(cell);
        let mut se = 0.0;
        let mut e = 0.0;
        for (a, b) in p.iter().zip(&t) {
            se += (a - b).powi(2);
            e += a - b;
        }
        rmse += (se / n).sqrt();
        bias += e / n;
        if let Some(r) = pearson(&p, &t) {
            r_sum += r;
            r_count += 1;
        }
    }
    Ok(Metrics {
        rmse: rmse / cells as f64,
        bias: bias / cells as f64,
        pearson_r: (r_count > 0).then(|| r_sum / r_count as f64),
        excluded_cells: cells - r_count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseStats {
    pub sparse_rmse: f64,
    pub sparse_bias: f64,
    /// Cells where every step was dry in both series.
    pub excluded_cells: usize,
}

/// Errors over the steps where at least one of prediction and truth reaches
/// `threshold`, per cell, averaged over the cells that have any.
pub fn sparse_stats(pred: &GridDataset, truth: &GridDataset, threshold: f64) -> Result<SparseStats> {
    if !(threshold >= 0.0) {
        return Err(ClimateError::Domain(format!("sparse threshold {threshold} must be nonnegative")));
    }
    pred.same_grid(truth)?;
    let cells = truth.cells();
    let (mut rmse, mut bias, mut used) = (0.0, 0.0, 0usize);
    for cell in 0..cells {
        let (mut se, mut e, mut kept) = (0.0, 0.0, 0usize);
        for (a, b) in pred.series(cell).iter().zip(truth.series(cell)) {
            if *a < threshold && b < threshold {
                continue;
            }
            se += (a - b).powi(2);
            e += a - b;
            kept += 1;
        }
        if kept == 0 {
            continue;
        }
        rmse += (se / kept as f64).sqrt();
        bias += e / kept as f64;
        used += 1;
    }
    if used == 0 {
        return Err(ClimateError::Insufficient(format!("every cell is below {threshold} in both series")));
    }
    Ok(SparseStats { sparse_rmse: rmse / used as f64, sparse_bias: bias / used as f64, excluded_cells: cells - used })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl std::fmt::Display for YearMonth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

/// Consecutive runs of steps sharing a calendar month. The calendar must be
/// a contiguous daily sequence.
pub fn month_groups(dates: &[NaiveDate]) -> Result<Vec<(YearMonth, std::ops::Range<usize>)>> {
    if dates.is_empty() {
        return Err(ClimateError::Calendar("empty calendar".into()));
    }
    if let Some(w) = dates.windows(2).find(|w| w[0].succ_opt() != Some(w[1])) {
        return Err(ClimateError::Calendar(format!("calendar is not daily and contiguous at {} → {}", w[0], w[1])));
    }
    let mut out: Vec<(YearMonth, std::ops::Range<usize>)> = Vec::new();
    for (i, d) in dates.iter().enumerate() {
        let key = YearMonth { year: d.year(), month: d.month() };
        match out.last_mut() {
            Some((k, r)) if *k == key => r.end = i + 1,
            _ => out.push((key, i..i + 1)),
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ClimdexIndex {
    TXx,
    TXn,
    CDD,
    CWD,
    Rx1d,
    Rx5d,
    SDII,
}

impl ClimdexIndex {
    pub const TEMPERATURE: [ClimdexIndex; 2] = [ClimdexIndex::TXx, ClimdexIndex::TXn];
    pub const PRECIPITATION: [ClimdexIndex; 5] =
        [ClimdexIndex::CDD, ClimdexIndex::CWD, ClimdexIndex::Rx1d, ClimdexIndex::Rx5d, ClimdexIndex::SDII];

    pub fn name(self) -> &'static str {
        match self {
            ClimdexIndex::TXx => "TXx",
            ClimdexIndex::TXn => "TXn",
            ClimdexIndex::CDD => "CDD",
            ClimdexIndex::CWD => "CWD",
            ClimdexIndex::Rx1d => "Rx1d",
            ClimdexIndex::Rx5d => "Rx5d",
            ClimdexIndex::SDII => "SDII",
        }
    }
}

/// Indices for one month of one cell's precipitation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrecipIndices {
    pub cdd: usize,
    pub cwd: usize,
    pub rx1d: f64,
    /// `None` for months shorter than five days.
    pub rx5d: Option<f64>,
    /// Zero when the month has no wet day.
    pub sdii: f64,
    pub wet_days: usize,
}

/// Longest dry and wet runs, maximum 1- and 5-day totals within the month
/// and mean wet-day amount. Wet means at or above `wet_threshold`.
pub fn precip_month(values: &[f64], wet_threshold: f64) -> PrecipIndices {
    let (mut cdd, mut cwd, mut dry_run, mut wet_run) = (0, 0, 0, 0);
    let (mut wet_total, mut wet_days) = (0.0, 0);
    for &v in values {
        if v >= wet_threshold {
            wet_run += 1;
            dry_run = 0;
            wet_total += v;
            wet_days += 1;
        } else {
            dry_run += 1;
            wet_run = 0;
        }
        cdd = cdd.max(dry_run);
        cwd = cwd.max(wet_run);
    }
    let rx1d = values.iter().copied().fold(0.0, f64::max);
    let rx5d = (values.len() >= 5).then(|| values.windows(5).map(|w| w.iter().sum::<f64>()).fold(f64::NEG_INFINITY, f64::max));
    PrecipIndices { cdd, cwd, rx1d, rx5d, sdii: if wet_days > 0 { wet_total / wet_days as f64 } else { 0.0 }, wet_days }
}

/// Monthly index values per cell, `values[index][month · cells + cell]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClimdexReport {
    pub variable: Variable,
    pub months: Vec<YearMonth>,
    pub cells: usize,
    pub indices: Vec<ClimdexIndex>,
    /// `None` where an index is undefined: Rx5d in months under five days.
    pub values: Vec<Vec<Option<f64>>>,
    /// `(month, cell)` pairs whose SDII is 0 because no day was wet.
    pub dry_months: Vec<(usize, usize)>,
}

impl ClimdexReport {
    pub fn series(&self, index: ClimdexIndex) -> Option<&[Option<f64>]> {
        self.indices.iter().position(|&i| i == index).map(|k| self.values[k].as_slice())
    }

    /// Spatial mean per month, over cells where the index is defined.
    pub fn spatial_mean(&self, index: ClimdexIndex) -> Option<Vec<Option<f64>>> {
        let s = self.series(index)?;
        Some(
            s.chunks(self.cells)
                .map(|month| {
                    let defined: Vec<f64> = month.iter().flatten().copied().collect();
                    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
                })
                .collect(),
        )
    }
}

/// Monthly maximum and minimum of daily maximum temperature.
pub fn climdex_temperature(ds: &GridDataset) -> Result<ClimdexReport> {
    if ds.variable != Variable::MaxTemperature {
        return Err(ClimateError::Domain("temperature indices need a max-temperature dataset".into()));
    }
    let groups = month_groups(&ds.dates)?;
    let cells = ds.cells();
    let (mut txx, mut txn) = (Vec::new(), Vec::new());
    for (_, range) in &groups {
        for cell in 0..cells {
            let vals = range.clone().map(|t| ds.values[t * cells + cell]);
            let (hi, lo) = vals.fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), v| (hi.max(v), lo.min(v)));
            txx.push(Some(hi));
            txn.push(Some(lo));
        }
    }
    Ok(ClimdexReport {
        variable: Variable::MaxTemperature,
        months: groups.into_iter().map(|(m, _)| m).collect(),
        cells,
        indices: ClimdexIndex::TEMPERATURE.to_vec(),
        values: vec![txx, txn],
        dry_months: Vec::new(),
    })
}

pub fn climdex_precipitation(ds: &GridDataset, wet_threshold: f64) -> Result<ClimdexReport> {
    if ds.variable != Variable::Precipitation {
        return Err(ClimateError::Domain("precipitation indices need a precipitation dataset".into()));
    }
    if !(wet_threshold > 0.0) {
        return Err(ClimateError::Domain(format!("wet-day threshold {wet_threshold} must be positive")));
    }
    let groups = month_groups(&ds.dates)?;
    let cells = ds.cells();
    let mut values = vec![Vec::with_capacity(groups.len() * cells); 5];
    let mut dry_months = Vec::new();
    for (m, (_, range)) in groups.iter().enumerate() {
        if range.len() < 5 {
            log::warn!("month {} has {} days, Rx5d undefined", groups[m].0, range.len());
        }
        for cell in 0..cells {
            let series: Vec<f64> = range.clone().map(|t| ds.values[t * cells + cell]).collect();
            let p = precip_month(&series, wet_threshold);
            if p.wet_days == 0 {
                dry_months.push((m, cell));
            }
            values[0].push(Some(p.cdd as f64));
            values[1].push(Some(p.cwd as f64));
            values[2].push(Some(p.rx1d));
            values[3].push(p.rx5d);
            values[4].push(Some(p.sdii));
        }
    }
    Ok(ClimdexReport {
        variable: Variable::Precipitation,
        months: groups.into_iter().map(|(m, _)| m).collect(),
        cells,
        indices: ClimdexIndex::PRECIPITATION.to_vec(),
        values,
        dry_months,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompareMode {
    /// Mean over months of the monthly bias, with its spread over months.
    Bias,
    /// Pearson correlation between predicted and observed index values.
    Correlation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Every (month, cell) pair enters the statistic.
    #[default]
    Pooled,
    /// Cells are averaged into one value per month first.
    SpatialMean,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexComparison {
    pub index: ClimdexIndex,
    pub value: f64,
    /// Standard deviation of the monthly bias across months; bias mode only.
    pub spread: Option<f64>,
    /// Values entering the statistic.
    pub count: usize,
}

pub fn climdex_compare(pred: &ClimdexReport, truth: &ClimdexReport, mode: CompareMode, aggregation: Aggregation) -> Result<Vec<IndexComparison>> {
    if pred.months != truth.months || pred.cells != truth.cells || pred.indices != truth.indices {
        return Err(ClimateError::Calendar("Climdex reports cover different months, cells or indices".into()));
    }
    let months = truth.months.len();
    if mode == CompareMode::Correlation && months < 3 {
        return Err(ClimateError::Insufficient(format!("correlation needs at least 3 months, got {months}")));
    }
    let mut out = Vec::new();
    for &index in &truth.indices {
        let (p, t) = match aggregation {
            Aggregation::Pooled => (pred.series(index).expect("index").to_vec(), truth.series(index).expect("index").to_vec()),
            Aggregation::SpatialMean => (pred.spatial_mean(index).expect("index"), truth.spatial_mean(index).expect("index")),
        };
        let per_month = p.len() / months;
        let pairs: Vec<(usize, f64, f64)> = p
            .iter()
            .zip(&t)
            .enumerate()
            .filter_map(|(i, (a, b))| Some((i / per_month, (*a)?, (*b)?)))
            .collect();
        if pairs.is_empty() {
            log::warn!("{} is undefined in every month", index.name());
            continue;
        }
        let cmp = match mode {
            CompareMode::Bias => {
                let mut sums = vec![(0.0, 0usize); months];
                for &(m, a, b) in &pairs {
                    sums[m].0 += a - b;
                    sums[m].1 += 1;
                }
                let monthly: Vec<f64> = sums.iter().filter(|s| s.1 > 0).map(|s| s.0 / s.1 as f64).collect();
                let ms = MeanStd::of(&monthly).expect("nonempty");
                IndexComparison { index, value: ms.mean, spread: Some(ms.std), count: pairs.len() }
            }
            CompareMode::Correlation => {
                let a: Vec<f64> = pairs.iter().map(|p| p.1).collect();
                let b: Vec<f64> = pairs.iter().map(|p| p.2).collect();
                let r = pearson(&a, &b).ok_or_else(|| ClimateError::Insufficient(format!("{} is constant, correlation undefined", index.name())))?;
                IndexComparison { index, value: r, spread: None, count: pairs.len() }
            }
        };
        out.push(cmp);
    }
    Ok(out)
}

/// Linear interpolation between order statistics of sorted data (type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Climatology {
    /// Over all days and cells.
    pub mean: f64,
    /// Wet-day percentiles.
    pub p50: f64,
    pub p98: f64,
    pub p02: f64,
    pub wet_days: usize,
}

pub fn climatology_quantiles(values: &[f64], wet_threshold: f64) -> Result<Climatology> {
    if values.is_empty() {
        return Err(ClimateError::Insufficient("empty series".into()));
    }
    let mut wet: Vec<f64> = values.iter().copied().filter(|&v| v >= wet_threshold).collect();
    if wet.is_empty() {
        return Err(ClimateError::Insufficient(format!("no wet days at threshold {wet_threshold}")));
    }
    wet.sort_by(f64::total_cmp);
    Ok(Climatology {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        p50: quantile_sorted(&wet, 0.5),
        p98: quantile_sorted(&wet, 0.98),
        p02: quantile_sorted(&wet, 0.02),
        wet_days: wet.len(),
    })
}

pub fn climatology(ds: &GridDataset, wet_threshold: f64) -> Result<Climatology> {
    if ds.variable != Variable::Precipitation {
        return Err(ClimateError::Domain("wet-day climatology needs a precipitation dataset".into()));
    }
    climatology_quantiles(&ds.values, wet_threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::daily_calendar;

    fn series(variable: Variable, values: &[f64]) -> GridDataset {
        let start = NaiveDate::from_ymd_opt(2001, 3, 1).unwrap();
        GridDataset::new(variable, "u", daily_calendar(start, values.len()), 1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_sparse_example() {
        let truth = series(Variable::Precipitation, &[0.0, 5.0, 0.0, 3.0]);
        let pred = series(Variable::Precipitation, &[0.0, 4.0, 2.0, 3.0]);
        let s = sparse_stats(&pred, &truth, 1.0).unwrap();
        assert!((s.sparse_bias - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.sparse_rmse - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let dry = series(Variable::Precipitation, &[0.0; 4]);
        assert!(sparse_stats(&dry, &dry, 1.0).is_err());
    }

    #[test]
    fn worked_precip_month() {
        let p = precip_month(&[0.0, 2.0, 3.0, 0.0, 0.0, 0.0, 5.0, 1.5], 1.0);
        assert_eq!((p.cwd, p.cdd), (2, 3));
        assert_eq!(p.rx1d, 5.0);
        assert_eq!(p.rx5d, Some(8.0));
        assert_eq!(p.sdii, 2.875);
    }

    #[test]
    fn all_dry_and_single_wet_months() {
        let p = precip_month(&[0.0; 30], 1.0);
        assert_eq!((p.cdd, p.cwd, p.rx1d, p.sdii, p.wet_days), (30, 0, 0.0, 0.0, 0));
        let mut v = vec![0.0; 30];
        v[12] = 10.0;
        let p = precip_month(&v, 1.0);
        assert_eq!((p.cwd, p.rx1d, p.sdii), (1, 10.0, 10.0));
        assert_eq!(precip_month(&[3.0; 4], 1.0).rx5d, None);
    }

    #[test]
    fn temperature_extremes() {
        let r = climdex_temperature(&series(Variable::MaxTemperature, &[18.0, 25.0, 21.0])).unwrap();
        assert_eq!(r.series(ClimdexIndex::TXx).unwrap(), &[Some(25.0)]);
        assert_eq!(r.series(ClimdexIndex::TXn).unwrap(), &[Some(18.0)]);
    }

    #[test]
    fn constant_shift() {
        let t: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let truth = series(Variable::MaxTemperature, &t);
        let pred = series(Variable::MaxTemperature, &t.iter().map(|v| v + 2.0).collect::<Vec<_>>());
        let m = pointwise_stats(&pred, &truth).unwrap();
        assert!((m.rmse - 2.0).abs() < 1e-12 && (m.bias - 2.0).abs() < 1e-12);
        assert!((m.pearson_r.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn months_split_on_calendar() {
        let start = NaiveDate::from_ymd_opt(2000, 1, 30).unwrap();
        let g = month_groups(&daily_calendar(start, 33)).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g[0].1, 0..2);
        assert_eq!(g[1], (YearMonth { year: 2000, month: 2 }, 2..31));
        let gap = [start, NaiveDate::from_ymd_opt(2000, 2, 2).unwrap()];
        assert!(month_groups(&gap).is_err());
    }

    #[test]
    fn type7_quantiles() {
        let c = climatology_quantiles(&[0.0, 2.0, 0.5, 4.0], 1.0).unwrap();
        assert_eq!(c.p50, 3.0);
        assert_eq!(c.mean, 6.5 / 4.0);
        assert!(climatology_quantiles(&[0.0, 0.2], 1.0).is_err());
    }

    #[test]
    fn bias_compare_of_shifted_reports() {
        let t: Vec<f64> = (0..90).map(|i| 20.0 + (i as f64 * 0.3).cos()).collect();
        let truth = climdex_temperature(&series(Variable::MaxTemperature, &t)).unwrap();
        let pred = climdex_temperature(&series(Variable::MaxTemperature, &t.iter().map(|v| v + 1.0).collect::<Vec<_>>())).unwrap();
        for c in climdex_compare(&pred, &truth, CompareMode::Bias, Aggregation::Pooled).unwrap() {
            assert!((c.value - 1.0).abs() < 1e-12 && c.spread.unwrap() < 1e-12);
        }
        for c in climdex_compare(&truth, &truth, CompareMode::Correlation, Aggregation::SpatialMean).unwrap() {
            assert!((c.value - 1.0).abs() < 1e-12);
        }
    }
}
