//! Time-indexed stacks of 2-D single-variable fields.
//!
//! # FGRD files
//!
//! All integers little-endian:
//!
//! | field      | encoding                                         |
//! |------------|--------------------------------------------------|
//! | magic      | `b"FGRD"`                                        |
//! | version    | u16, always 1                                    |
//! | variable   | u8: 0 max temperature, 1 precipitation           |
//! | units      | u16 byte length + UTF-8                          |
//! | extents    | u32 time, u32 height, u32 width                  |
//! | calendar   | one u32 per step, `year·10000 + month·100 + day` |
//! | payload    | binary32 values, row-major, time-major           |
//!
//! Values are held as f64 in memory and rounded to f32 on write.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ClimateError, Result};

const MAGIC: &[u8; 4] = b"FGRD";
const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variable {
    MaxTemperature,
    Precipitation,
}

impl Variable {
    pub fn id(self) -> u8 {
        match self {
            Variable::MaxTemperature => 0,
            Variable::Precipitation => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Variable::MaxTemperature),
            1 => Ok(Variable::Precipitation),
            other => Err(ClimateError::Format(format!("unknown variable id {other}"))),
        }
    }
}

/// Geographic extent in degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridDataset {
    pub variable: Variable,
    pub units: String,
    /// One strictly increasing date per time step.
    pub dates: Vec<NaiveDate>,
    pub height: usize,
    pub width: usize,
    /// `time × height × width`, row-major.
    pub values: Vec<f64>,
    /// Not stored in FGRD files.
    pub bounds: Option<Bounds>,
    /// Not stored in FGRD files.
    pub resolution: Option<String>,
}

pub fn pack_date(d: NaiveDate) -> Result<u32> {
    let y = d.year();
    if !(0..=429_495).contains(&y) {
        return Err(ClimateError::Format(format!("year {y} cannot be packed")));
    }
    Ok(y as u32 * 10000 + d.month() * 100 + d.day())
}

pub fn unpack_date(v: u32) -> Result<NaiveDate> {
    NaiveDate::from_ymd_opt((v / 10000) as i32, (v / 100) % 100, v % 100)
        .ok_or_else(|| ClimateError::Format(format!("invalid packed date {v}")))
}

/// `n` consecutive days from `start`.
pub fn daily_calendar(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    start.iter_days().take(n).collect()
}

impl GridDataset {
    pub fn new(variable: Variable, units: impl Into<String>, dates: Vec<NaiveDate>, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let ds = GridDataset { variable, units: units.into(), dates, height, width, values, bounds: None, resolution: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.dates.is_empty() {
            return Err(ClimateError::Shape(format!(
                "empty dataset: {} steps of {}×{}",
                self.dates.len(),
                self.height,
                self.width
            )));
        }
        let expected = self.dates.len() * self.height * self.width;
        if self.values.len() != expected {
            return Err(ClimateError::Shape(format!("{} values for {expected} cells", self.values.len())));
        }
        if let Some(w) = self.dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(ClimateError::Calendar(format!("dates not strictly increasing at {} → {}", w[0], w[1])));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(ClimateError::Domain(format!("non-finite value at flat index {i}")));
        }
        if self.variable == Variable::Precipitation {
            if let Some(i) = self.values.iter().position(|v| *v < 0.0) {
                return Err(ClimateError::Domain(format!("negative precipitation {} at flat index {i}", self.values[i])));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn field(&self, t: usize) -> &[f64] {
        let c = self.cells();
        &self.values[t * c..(t + 1) * c]
    }

    /// Series of one cell over time.
    pub fn series(&self, cell: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.values[t * self.cells() + cell]).collect()
    }

    /// Steps in `range`, keeping metadata.
    pub fn subset(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(ClimateError::Shape(format!("time range {range:?} outside 0..{}", self.len())));
        }
        let c = self.cells();
        Ok(GridDataset {
            dates: self.dates[range.clone()].to_vec(),
            values: self.values[range.start * c..range.end * c].to_vec(),
            ..self.clone()
        })
    }

    /// Same layout, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        let ds = GridDataset { values, ..self.clone() };
        ds.validate()?;
        Ok(ds)
    }

    pub fn same_grid(&self, other: &GridDataset) -> Result<()> {
        if self.height != other.height || self.width != other.width || self.len() != other.len() {
            return Err(ClimateError::Shape(format!(
                "{}×{}×{} vs {}×{}×{}",
                self.len(),
                self.height,
                self.width,
                other.len(),
                other.height,
                other.width
            )));
        }
        if self.dates != other.dates {
            return Err(ClimateError::Calendar("calendars differ".into()));
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let units = self.units.as_bytes();
        let units_len = u16::try_from(units.len()).map_err(|_| ClimateError::Format("unit string too long".into()))?;
        let extent = |v: usize| u32::try_from(v).map_err(|_| ClimateError::Format(format!("extent {v} exceeds u32")));
        let mut out = Vec::with_capacity(4 + 2 + 1 + 2 + units.len() + 12 + 4 * self.len() + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.variable.id());
        out.extend_from_slice(&units_len.to_le_bytes());
        out.extend_from_slice(units);
        for v in [self.len(), self.height, self.width] {
            out.extend_from_slice(&extent(v)?.to_le_bytes());
        }
        for d in &self.dates {
            out.extend_from_slice(&pack_date(*d)?.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ClimateError::Format("bad magic, not an FGRD file".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(ClimateError::Format(format!("unsupported FGRD version {version}")));
        }
        let variable = Variable::from_id(r.take(1)?[0])?;
        let ulen = r.u16()? as usize;
        let units = std::str::from_utf8(r.take(ulen)?)
            .map_err(|_| ClimateError::Format("unit string is not UTF-8".into()))?
            .to_string();
        let (t, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let dates = (0..t).map(|_| unpack_date(r.u32()?)).collect::<Result<Vec<_>>>()?;
        let n = t
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| ClimateError::Format("extents overflow".into()))?;
        if bytes.len() - r.pos != 4 * n {
            return Err(ClimateError::Format(format!(
                "payload holds {} bytes, extents need {}",
                bytes.len() - r.pos,
                4 * n
            )));
        }
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let v = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            if v.is_nan() {
                return Err(ClimateError::Format(format!("NaN in payload at flat index {i}")));
            }
            values.push(v as f64);
        }
        let ds = GridDataset { variable, units, dates, height: h, width: w, values, bounds: None, resolution: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        let mut w = BufWriter::new(File::create(path).map_err(|e| ClimateError::io(path, e))?);
        w.write_all(&bytes).map_err(|e| ClimateError::io(path, e))?;
        w.flush().map_err(|e| ClimateError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        BufReader::new(File::open(path).map_err(|e| ClimateError::io(path, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| ClimateError::io(path, e))?;
        GridDataset::decode(&bytes)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ClimateError::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn scaled_resolution(tag: &Option<String>, op: &str, factor: usize) -> Option<String> {
    tag.as_ref().map(|r| format!("{r} {op}{factor}"))
}

/// Replicate every cell into a `factor × factor` block.
pub fn nearest_upsample(ds: &GridDataset, factor: usize) -> Result<GridDataset> {
    if factor == 0 {
        return Err(ClimateError::Shape("upsampling factor must be positive".into()));
    }
    let (h, w) = (
        ds.height.checked_mul(factor).ok_or_else(|| ClimateError::Shape("height overflows".into()))?,
        ds.width.checked_mul(factor).ok_or_else(|| ClimateError::Shape("width overflows".into()))?,
    );
    let total = h
        .checked_mul(w)
        .and_then(|c| c.checked_mul(ds.len()))
        .filter(|&t| t <= isize::MAX as usize / 8)
        .ok_or_else(|| ClimateError::Shape(format!("{h}×{w} grid of {} steps is too large", ds.len())))?;
    let mut values = Vec::with_capacity(total);
    for t in 0..ds.len() {
        let f = ds.field(t);
        for y in 0..h {
            for x in 0..w {
                values.push(f[(y / factor) * ds.width + x / factor]);
            }
        }
    }
    Ok(GridDataset { height: h, width: w, values, resolution: scaled_resolution(&ds.resolution, "/", factor), ..ds.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DownsampleMode {
    /// Top-left cell of each block.
    Sample,
    Mean,
}

pub fn block_downsample(ds: &GridDataset, factor: usize, mode: DownsampleMode) -> Result<GridDataset> {
    if factor == 0 || ds.height % factor != 0 || ds.width % factor != 0 {
        return Err(ClimateError::Shape(format!("{}×{} is not divisible by {factor}", ds.height, ds.width)));
    }
    let (h, w) = (ds.height / factor, ds.width / factor);
    let mut values = Vec::with_capacity(ds.len() * h * w);
    for t in 0..ds.len() {
        let f = ds.field(t);
        for by in 0..h {
            for bx in 0..w {
                values.push(match mode {
                    DownsampleMode::Sample => f[by * factor * ds.width + bx * factor],
                    DownsampleMode::Mean => {
                        let mut s = 0.0;
                        for y in by * factor..(by + 1) * factor {
                            for x in bx * factor..(bx + 1) * factor {
                                s += f[y * ds.width + x];
                            }
                        }
                        s / (factor * factor) as f64
                    }
                });
            }
        }
    }
    Ok(GridDataset { height: h, width: w, values, resolution: scaled_resolution(&ds.resolution, "×", factor), ..ds.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// `(v - mean) / std`.
    TemperatureStandardize,
    /// `(ln(1 + v) - mean) / std`.
    PrecipLog1pStandardize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub scheme: Scheme,
    pub mean: f64,
    pub std: f64,
}

impl NormalizationParams {
    /// Statistics over the steps in `fit_range` only.
    pub fn fit(ds: &GridDataset, scheme: Scheme, fit_range: Range<usize>) -> Result<Self> {
        if scheme == Scheme::PrecipLog1pStandardize && ds.variable != Variable::Precipitation {
            return Err(ClimateError::Domain("log1p scheme needs a precipitation variable".into()));
        }
        let sub = ds.subset(fit_range)?;
        let t: Vec<f64> = sub.values.iter().map(|&v| pre_transform(scheme, v)).collect();
        let n = t.len() as f64;
        let mean = t.iter().sum::<f64>() / n;
        let std = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(std > 0.0) {
            return Err(ClimateError::Domain("zero standard deviation, cannot standardize".into()));
        }
        Ok(NormalizationParams { scheme, mean, std })
    }

    pub fn apply(&self, v: f64) -> f64 {
        (pre_transform(self.scheme, v) - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        let u = v * self.std + self.mean;
        match self.scheme {
            Scheme::TemperatureStandardize => u,
            Scheme::PrecipLog1pStandardize => u.exp_m1().max(0.0),
        }
    }

    pub fn apply_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.apply(v)).collect()
    }

    pub fn invert_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.invert(v)).collect()
    }
}

fn pre_transform(scheme: Scheme, v: f64) -> f64 {
    match scheme {
        Scheme::TemperatureStandardize => v,
        Scheme::PrecipLog1pStandardize => v.ln_1p(),
    }
}

/// Normalized values (fit over every step) and the constants to invert them.
pub fn normalize(ds: &GridDataset, scheme: Scheme) -> Result<(Vec<f64>, NormalizationParams)> {
    let p = NormalizationParams::fit(ds, scheme, 0..ds.len())?;
    Ok((p.apply_all(&ds.values), p))
}

/// Back to physical units as a dataset on the template's grid and calendar.
pub fn denormalize(template: &GridDataset, values: &[f64], params: &NormalizationParams) -> Result<GridDataset> {
    template.with_values(params.invert_all(values))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvFold {
    pub train: Range<usize>,
    pub validation: Range<usize>,
}

/// Time-series folds over the final `holdout` steps: fold `i` validates on
/// `[n - holdout + i·val_len, +val_len)` and trains on the `train_window`
/// steps just before it.
pub fn cv_folds(n_time: usize, holdout: usize, val_len: usize, train_window: usize, k: usize) -> Result<Vec<CvFold>> {
    if k == 0 || val_len == 0 || train_window == 0 {
        return Err(ClimateError::Shape("fold count, validation length and window must be positive".into()));
    }
    if k.checked_mul(val_len) != Some(holdout) {
        return Err(ClimateError::Shape(format!("holdout {holdout} is not {k} folds of {val_len}")));
    }
    if train_window.checked_add(holdout).is_none_or(|v| v > n_time) {
        return Err(ClimateError::Shape(format!("window {train_window} plus holdout {holdout} exceeds {n_time} steps")));
    }
    Ok((0..k)
        .map(|i| {
            let start = n_time - holdout + i * val_len;
            CvFold { train: start - train_window..start, validation: start..start + val_len }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// High-to-low resolution ratio.
    pub factor: usize,
    pub samples: usize,
    pub min_bumps: usize,
    pub max_bumps: usize,
    /// Bump standard deviation range in high-resolution cells.
    pub min_width: f64,
    pub max_width: f64,
    pub min_amplitude: f64,
    pub max_amplitude: f64,
    pub variable: Variable,
    /// Probability that a precipitation cell is dry. Ignored for temperature.
    pub dry_fraction: f64,
    pub seed: u64,
    pub start: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 16,
            width: 16,
            factor: 4,
            samples: 2000,
            min_bumps: 1,
            max_bumps: 3,
            min_width: 1.5,
            max_width: 3.0,
            min_amplitude: 0.5,
            max_amplitude: 1.5,
            variable: Variable::MaxTemperature,
            dry_fraction: 0.3,
            seed: 0,
            start: NaiveDate::from_ymd_opt(2000, 1, 1).expect("valid date"),
        }
    }
}

/// Synthetic pairs: high-resolution sums of Gaussian bumps and their
/// block-mean low-resolution counterparts. Returns `(low, high, pairing)`,
/// where `pairing[t]` is the high-resolution step paired with low step `t`.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<(GridDataset, GridDataset, Vec<usize>)> {
    if cfg.factor == 0 || cfg.height % cfg.factor != 0 || cfg.width % cfg.factor != 0 {
        return Err(ClimateError::Shape(format!("{}×{} is not divisible by {}", cfg.height, cfg.width, cfg.factor)));
    }
    if cfg.samples == 0 || cfg.min_bumps > cfg.max_bumps || cfg.min_width <= 0.0 || cfg.min_width > cfg.max_width || cfg.min_amplitude > cfg.max_amplitude {
        return Err(ClimateError::Shape("invalid synthetic configuration ranges".into()));
    }
    if !(0.0..=1.0).contains(&cfg.dry_fraction) {
        return Err(ClimateError::Shape(format!("dry fraction {} outside [0, 1]", cfg.dry_fraction)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut values = Vec::with_capacity(cfg.samples * h * w);
    for _ in 0..cfg.samples {
        let mut field = vec![0.0; h * w];
        let bumps = rng.random_range(cfg.min_bumps..=cfg.max_bumps);
        for _ in 0..bumps {
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let s = rng.random_range(cfg.min_width..=cfg.max_width);
            let a = rng.random_range(cfg.min_amplitude..=cfg.max_amplitude);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    field[y * w + x] += a * (-d2 / (2.0 * s * s)).exp();
                }
            }
        }
        if cfg.variable == Variable::Precipitation {
            for v in &mut field {
                if rng.random::<f64>() < cfg.dry_fraction {
                    *v = 0.0;
                }
            }
        }
        values.extend(field);
    }
    let units = match cfg.variable {
        Variable::MaxTemperature => "degC",
        Variable::Precipitation => "mm/day",
    };
    let mut high = GridDataset::new(cfg.variable, units, daily_calendar(cfg.start, cfg.samples), h, w, values)?;
    high.resolution = Some("high".into());
    let low = block_downsample(&high, cfg.factor, DownsampleMode::Mean)?;
    let low = GridDataset { resolution: Some("low".into()), ..low };
    Ok((low, high, (0..cfg.samples).collect()))
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    time: usize,
    row: usize,
    col: usize,
    value: f64,
}

/// Assemble a dataset from `time,row,col,value` rows; every cell of every
/// step must appear exactly once.
pub fn from_csv<R: Read>(r: R, variable: Variable, units: &str, start: NaiveDate) -> Result<GridDataset> {
    let mut rows = Vec::new();
    for row in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r).deserialize() {
        let row: CsvRow = row.map_err(|e| ClimateError::Format(format!("csv: {e}")))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(ClimateError::Format("csv has no rows".into()));
    }
    let t = rows.iter().map(|r| r.time).max().expect("nonempty") + 1;
    let h = rows.iter().map(|r| r.row).max().expect("nonempty") + 1;
    let w = rows.iter().map(|r| r.col).max().expect("nonempty") + 1;
    let mut values = vec![None; t * h * w];
    for r in rows {
        let slot = &mut values[(r.time * h + r.row) * w + r.col];
        if slot.replace(r.value).is_some() {
            return Err(ClimateError::Format(format!("duplicate cell time {} row {} col {}", r.time, r.row, r.col)));
        }
    }
    let values = values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| ClimateError::Format(format!("missing cell at flat index {i}"))))
        .collect::<Result<Vec<_>>>()?;
    GridDataset::new(variable, units, daily_calendar(start, t), h, w, values)
}
