//! The subcommands, callable without the argument parser.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use flowscale_align::{
    interpolate, read_history, sample_conditional, sample_unconditional, train, write_history, AlignFlowModel, CrossDirection,
    InterpolationSpec, LossRecord, ModelSpec, SamplingSpec,
};
use flowscale_climate::{
    bcsd_fit, climdex_compare, climdex_precipitation, climdex_temperature, daily_calendar, from_csv, nearest_upsample,
    pointwise_stats, sparse_stats, synth_bias_scenario, synth_dataset, Aggregation, BcsdModel, BiasScenario, ClimateError,
    ClimdexReport, CompareMode, DisaggregationMode, GridDataset, MetricReport, Metrics, NormalizationParams, SynthConfig,
    Variable, DEFAULT_QUANTILES, WET_DAY_THRESHOLD,
};
use flowscale_flow::FlowSpec;
use flowscale_tensor::Tensor;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{default_scheme, resolve_output, RunConfig, PRECIP_DEQUANT_NOISE};
use crate::error::{CliError, Result};

/// Items pushed through a flow at once.
const CHUNK: usize = 64;

/// How one domain maps between physical fields and flow inputs. Stored in
/// the checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMeta {
    pub variable: Variable,
    pub units: String,
    /// Grid of the files this domain is read from.
    pub height: usize,
    pub width: usize,
    /// Nearest-neighbour factor onto the flow grid.
    pub upsample: usize,
    pub norm: NormalizationParams,
    /// Training noise amplitude; inputs are shifted by half of it.
    pub noise: f64,
    /// First training date, `YYYY-MM-DD`.
    pub start: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub x: DomainMeta,
    pub y: DomainMeta,
}

impl RunMetadata {
    pub fn of(model: &AlignFlowModel) -> Result<Self> {
        serde_json::from_value(model.metadata.clone())
            .map_err(|e| CliError::Data(format!("checkpoint carries no run metadata (was it written by `flowscale train`?): {e}")))
    }
}

impl DomainMeta {
    fn start_date(&self) -> Result<NaiveDate> {
        NaiveDate::parse_from_str(&self.start, "%Y-%m-%d").map_err(|e| CliError::Data(format!("bad start date {:?}: {e}", self.start)))
    }

    /// Normalized flow inputs `[N, 1, H, W]`, shifted by `shift`.
    pub fn to_tensor(&self, ds: &GridDataset, shift: f64) -> Result<Tensor> {
        if ds.variable != self.variable {
            return Err(CliError::Data(format!("expected {:?} data, got {:?}", self.variable, ds.variable)));
        }
        if (ds.height, ds.width) != (self.height, self.width) {
            return Err(CliError::Data(format!(
                "expected a {}×{} grid, got {}×{}",
                self.height, self.width, ds.height, ds.width
            )));
        }
        let up = if self.upsample > 1 { nearest_upsample(ds, self.upsample)? } else { ds.clone() };
        let values = up.values.iter().map(|&v| self.norm.apply(v) + shift).collect();
        Ok(Tensor::new(vec![up.len(), 1, up.height, up.width], values).map_err(|e| CliError::Data(e.to_string()))?)
    }

    /// Physical fields on the flow grid from normalized `[N, 1, H, W]`.
    pub fn to_dataset(&self, t: &Tensor, dates: Vec<NaiveDate>) -> Result<GridDataset> {
        let s = t.shape();
        let values = self.norm.invert_all(t.data());
        Ok(GridDataset::new(self.variable, self.units.clone(), dates, s[2], s[3], values)?)
    }

    pub fn input_shift(&self) -> f64 {
        self.noise / 2.0
    }
}

fn read_grid(path: &Path) -> Result<GridDataset> {
    Ok(GridDataset::read(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(ClimateError::io(path, e).to_string())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn save_model(model: &AlignFlowModel, path: &Path) -> Result<()> {
    model.save(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn load_model(path: &Path) -> Result<AlignFlowModel> {
    AlignFlowModel::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Integer factor taking the X grid onto the Y grid.
fn grid_factor(x: &GridDataset, y: &GridDataset) -> Result<usize> {
    if y.height % x.height != 0 || y.width % x.width != 0 || y.height / x.height != y.width / x.width {
        return Err(CliError::Data(format!(
            "X grid {}×{} does not refine evenly onto Y grid {}×{}",
            x.height, x.width, y.height, y.width
        )));
    }
    Ok(y.height / x.height)
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    inputs: Vec<InputFile>,
    seed: u64,
    completed_steps: u64,
}

#[derive(Debug, Serialize)]
struct InputFile {
    path: PathBuf,
    bytes: u64,
}

fn describe_inputs(paths: &[&Path]) -> Vec<InputFile> {
    paths
        .iter()
        .map(|p| InputFile { path: p.to_path_buf(), bytes: fs::metadata(p).map(|m| m.len()).unwrap_or(0) })
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub model_path: PathBuf,
    pub history_path: PathBuf,
    pub records: usize,
}

/// Train per the config at `config_path`. With `resume`, continue from that
/// checkpoint and keep the history rows before its step.
pub fn cmd_train(config_path: &Path, seed: Option<u64>, resume: Option<&Path>) -> Result<TrainOutcome> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let x_all = read_grid(&cfg.data.x)?;
    let y_all = read_grid(&cfg.data.y)?;
    let factor = grid_factor(&x_all, &y_all)?;
    if !cfg.noise_given.0 && x_all.variable == Variable::Precipitation {
        cfg.train.noise_x = PRECIP_DEQUANT_NOISE;
    }
    if !cfg.noise_given.1 && y_all.variable == Variable::Precipitation {
        cfg.train.noise_y = PRECIP_DEQUANT_NOISE;
    }

    let fold = cfg.cv.as_ref().map(|cv| cv.fold_ranges(x_all.len())).transpose()?;
    let pick = |explicit: &Option<std::ops::Range<usize>>, n: usize| {
        let r = explicit.clone().or_else(|| fold.as_ref().map(|f| f.0.clone())).unwrap_or(0..n);
        if r.end > n {
            return Err(CliError::Data(format!("training range {r:?} exceeds the {n} steps on file")));
        }
        Ok(r)
    };
    let x_range = pick(&cfg.data.x_range, x_all.len())?;
    let y_range = pick(&cfg.data.y_range, y_all.len())?;
    let scheme_x = cfg.data.scheme_x.unwrap_or_else(|| default_scheme(x_all.variable));
    let scheme_y = cfg.data.scheme_y.unwrap_or_else(|| default_scheme(y_all.variable));
    let x_train = x_all.subset(x_range.clone())?;
    let y_train = y_all.subset(y_range.clone())?;
    let meta = RunMetadata {
        x: DomainMeta {
            variable: x_all.variable,
            units: x_all.units.clone(),
            height: x_all.height,
            width: x_all.width,
            upsample: factor,
            norm: NormalizationParams::fit(&x_train, scheme_x, 0..x_train.len())?,
            noise: cfg.train.noise_x,
            start: x_train.dates[0].to_string(),
        },
        y: DomainMeta {
            variable: y_all.variable,
            units: y_all.units.clone(),
            height: y_all.height,
            width: y_all.width,
            upsample: 1,
            norm: NormalizationParams::fit(&y_train, scheme_y, 0..y_train.len())?,
            noise: cfg.train.noise_y,
            start: y_train.dates[0].to_string(),
        },
    };
    let data_x = meta.x.to_tensor(&x_train, 0.0)?;
    let data_y = meta.y.to_tensor(&y_train, 0.0)?;

    let flow = FlowSpec {
        channels: 1,
        height: y_all.height,
        width: y_all.width,
        levels: cfg.model.levels,
        steps: cfg.model.steps,
        hidden: cfg.model.hidden,
        multiscale: true,
    };
    let mut model = match resume {
        Some(path) => {
            let m = load_model(path)?;
            if m.flow_x.input != [1, y_all.height, y_all.width] {
                return Err(CliError::Config(format!("{} was trained on a different grid", path.display())));
            }
            if RunMetadata::of(&m)? != meta {
                return Err(CliError::Config(format!("{} was trained on different data or normalization", path.display())));
            }
            m
        }
        None => {
            let spec = ModelSpec { flow, critic_widths: cfg.model.critic_widths.clone(), shared_init: cfg.model.shared_init };
            AlignFlowModel::new(&spec, cfg.train.seed)?
        }
    };
    model.metadata = serde_json::to_value(&meta).map_err(|e| CliError::Data(e.to_string()))?;

    let out = resolve_output(&cfg.output_dir);
    create_dir(&out)?;
    let history_path = out.join("history.csv");
    let mut history: Vec<LossRecord> = Vec::new();
    if resume.is_some() && history_path.exists() {
        let f = File::open(&history_path).map_err(|e| io_error(&history_path, e))?;
        history = read_history(BufReader::new(f))?;
        history.retain(|r| r.step < model.step);
    }

    // the snapshot pins everything the defaults and overrides decided
    let mut resolved = cfg.clone();
    resolved.data.x = fs::canonicalize(&cfg.data.x).map_err(|e| io_error(&cfg.data.x, e))?;
    resolved.data.y = fs::canonicalize(&cfg.data.y).map_err(|e| io_error(&cfg.data.y, e))?;
    resolved.data.x_range = Some(x_range);
    resolved.data.y_range = Some(y_range);
    resolved.data.scheme_x = Some(scheme_x);
    resolved.data.scheme_y = Some(scheme_y);
    resolved.output_dir = fs::canonicalize(&out).map_err(|e| io_error(&out, e))?;
    write_json(&out.join("config.resolved.json"), &resolved)?;

    if cfg.checkpoint_every > 0 {
        create_dir(&out.join("checkpoints"))?;
    }
    let ckpt_dir = out.join("checkpoints");
    let result = train(&mut model, &data_x, &data_y, &cfg.train, |m, r| {
        history.push(r.clone());
        if cfg.log_every > 0 && (r.step + 1) % cfg.log_every == 0 {
            info!(
                "step {} mle {:.4} {:.4} adv {:.4} {:.4} critic {:.4} {:.4}",
                r.step + 1,
                r.mle_x,
                r.mle_y,
                r.adv_gen_x,
                r.adv_gen_y,
                r.critic_x,
                r.critic_y
            );
        }
        if cfg.checkpoint_every > 0 && m.step % cfg.checkpoint_every == 0 {
            m.save(ckpt_dir.join(format!("step-{}.ckpt", m.step)))?;
        }
        Ok(())
    });
    let f = File::create(&history_path).map_err(|e| io_error(&history_path, e))?;
    write_history(BufWriter::new(f), &history)?;
    result?;

    let model_path = out.join("model.ckpt");
    save_model(&model, &model_path)?;
    let inputs = describe_inputs(&[&resolved.data.x, &resolved.data.y]);
    let provenance = Provenance {
        tool: "flowscale",
        version: env!("CARGO_PKG_VERSION"),
        command: "train",
        inputs,
        seed: cfg.train.seed,
        completed_steps: model.step,
    };
    write_json(&out.join("provenance.json"), &provenance)?;

    if let Some((_, validation)) = fold {
        validate_fold(&model, &meta, &x_all, &y_all, validation, &out)?;
    }
    Ok(TrainOutcome { output_dir: out, model_path, history_path, records: history.len() })
}

/// Downscale the fold's validation steps and score them when Y covers the
/// same dates.
fn validate_fold(
    model: &AlignFlowModel,
    meta: &RunMetadata,
    x: &GridDataset,
    y: &GridDataset,
    validation: std::ops::Range<usize>,
    out: &Path,
) -> Result<()> {
    let x_val = x.subset(validation.clone())?;
    let pred = cross_map_dataset(model, meta, &x_val)?;
    pred.write(out.join("validation_pred.fgrd"))?;
    if let Ok(truth) = y.subset(validation) {
        if truth.dates == pred.dates {
            let report = evaluate_one("validation", &pred, &truth)?;
            write_json(&out.join("validation_metrics.json"), &report)?;
        }
    }
    Ok(())
}

/// Maximum-likelihood X→Y prediction for every step of `x`.
pub fn cross_map_dataset(model: &AlignFlowModel, meta: &RunMetadata, x: &GridDataset) -> Result<GridDataset> {
    let input = meta.x.to_tensor(x, meta.x.input_shift())?;
    let n = input.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let chunk = input.slice_axis(0, start, CHUNK.min(n - start)).map_err(|e| CliError::Data(e.to_string()))?;
        parts.push(model.cross_map(&chunk, CrossDirection::XToY)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let out = Tensor::concat(&refs, 0).map_err(|e| CliError::Data(e.to_string()))?;
    meta.y.to_dataset(&out, x.dates.clone())
}

/// Downscale `input`. With `σ = 0` and one sample the output is the
/// maximum-likelihood prediction at `output`; otherwise sample `k` of every
/// step goes to `<stem>-<k>.fgrd`.
pub fn cmd_downscale(model_path: &Path, input: &Path, output: &Path, temperature: f64, samples: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if samples == 0 {
        return Err(CliError::Config("at least one sample is required".into()));
    }
    if !(temperature >= 0.0) {
        return Err(CliError::Config(format!("temperature must be nonnegative, got {temperature}")));
    }
    let model = load_model(model_path)?;
    let meta = RunMetadata::of(&model)?;
    let x = read_grid(input)?;
    let output = resolve_output(output);
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    if temperature == 0.0 && samples == 1 {
        cross_map_dataset(&model, &meta, &x)?.write(&output)?;
        return Ok(vec![output]);
    }
    let inputs = meta.x.to_tensor(&x, meta.x.input_shift())?;
    let mut per_sample: Vec<Vec<Tensor>> = vec![Vec::with_capacity(x.len()); samples];
    for t in 0..x.len() {
        let item = inputs.slice_axis(0, t, 1).map_err(|e| CliError::Data(e.to_string()))?;
        let spec = SamplingSpec { count: samples, temperature, seed: seed.wrapping_add(t as u64) };
        for (k, s) in sample_conditional(&model, &item, CrossDirection::XToY, &spec)?.into_iter().enumerate() {
            per_sample[k].push(s);
        }
    }
    let stem = output.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "sample".into());
    let ext = output.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "fgrd".into());
    let width = samples.to_string().len();
    let mut paths = Vec::new();
    for (k, fields) in per_sample.iter().enumerate() {
        let refs: Vec<&Tensor> = fields.iter().collect();
        let stacked = Tensor::concat(&refs, 0).map_err(|e| CliError::Data(e.to_string()))?;
        let path = output.with_file_name(format!("{stem}-{k:0width$}.{ext}"));
        meta.y.to_dataset(&stacked, x.dates.clone())?.write(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// `count` joint samples written as `samples_x.fgrd` and `samples_y.fgrd`.
/// X samples stay on the flow grid.
pub fn cmd_sample(model_path: &Path, count: usize, seed: u64, temperature: f64, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    let model = load_model(model_path)?;
    let meta = RunMetadata::of(&model)?;
    let (x, y) = sample_unconditional(&model, &SamplingSpec { count, temperature, seed })?;
    let out = resolve_output(out_dir);
    create_dir(&out)?;
    let (px, py) = (out.join("samples_x.fgrd"), out.join("samples_y.fgrd"));
    meta.x.to_dataset(&x, daily_calendar(meta.x.start_date()?, count))?.write(&px)?;
    meta.y.to_dataset(&y, daily_calendar(meta.y.start_date()?, count))?.write(&py)?;
    Ok((px, py))
}

/// Latent interpolation between steps `from` and `to` of a Y-domain file,
/// written as `interp_y.fgrd` and `interp_x.fgrd` with `steps` frames each.
pub fn cmd_interpolate(model_path: &Path, data: &Path, from: usize, to: usize, steps: usize, out_dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if steps < 2 {
        return Err(CliError::Config("interpolation needs at least 2 steps".into()));
    }
    let model = load_model(model_path)?;
    let meta = RunMetadata::of(&model)?;
    let y = read_grid(data)?;
    if from >= y.len() || to >= y.len() {
        return Err(CliError::Data(format!("endpoints {from}, {to} outside the {} steps of {}", y.len(), data.display())));
    }
    let shift = meta.y.input_shift();
    let y1 = meta.y.to_tensor(&y.subset(from..from + 1)?, shift)?;
    let y2 = meta.y.to_tensor(&y.subset(to..to + 1)?, shift)?;
    let frames = interpolate(&model, &y1, &y2, &InterpolationSpec::evenly(steps))?;
    let stack = |f: fn(&flowscale_align::InterpolationFrame) -> &Tensor| {
        let parts: Vec<&Tensor> = frames.iter().map(f).collect();
        Tensor::concat(&parts, 0).map_err(|e| CliError::Data(e.to_string()))
    };
    // frames are shifted back so endpoints reproduce the input fields
    let unshift = |t: Tensor| t.map(|v| v - shift);
    let dates = daily_calendar(y.dates[from], steps);
    let out = resolve_output(out_dir);
    create_dir(&out)?;
    let (py, px) = (out.join("interp_y.fgrd"), out.join("interp_x.fgrd"));
    meta.y.to_dataset(&unshift(stack(|f| &f.y)?), dates.clone())?.write(&py)?;
    let xs = stack(|f| &f.x)?.map(|v| v - meta.x.input_shift());
    meta.x.to_dataset(&xs, dates)?.write(&px)?;
    Ok((py, px))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub prediction: String,
    /// Sparse RMSE and bias for precipitation.
    pub rmse: f64,
    pub bias: f64,
    pub corr: Option<f64>,
    pub excluded_cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClimdexRow {
    pub prediction: String,
    pub index: String,
    pub bias: f64,
    pub bias_spread: f64,
    /// `None` with fewer than 3 months or a constant index.
    pub corr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MonthlyRow {
    pub month: String,
    pub index: String,
    pub source: String,
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub variable: Variable,
    pub sparse: bool,
    pub metrics: Vec<MetricRow>,
    /// Mean and spread over predictions.
    pub summary: Option<MetricReport>,
    pub climdex: Vec<ClimdexRow>,
    /// Spatial-mean monthly index series of truth and every prediction.
    pub monthly: Vec<MonthlyRow>,
}

fn climdex(ds: &GridDataset) -> Result<ClimdexReport> {
    Ok(match ds.variable {
        Variable::MaxTemperature => climdex_temperature(ds)?,
        Variable::Precipitation => climdex_precipitation(ds, WET_DAY_THRESHOLD)?,
    })
}

fn monthly_rows(name: &str, report: &ClimdexReport) -> Vec<MonthlyRow> {
    let mut rows = Vec::new();
    for &index in &report.indices {
        let series = report.spatial_mean(index).expect("index present");
        for (m, v) in report.months.iter().zip(series) {
            rows.push(MonthlyRow { month: format!("{:04}-{:02}", m.year, m.month), index: index.name().into(), source: name.into(), value: v });
        }
    }
    rows
}

fn evaluate_one(name: &str, pred: &GridDataset, truth: &GridDataset) -> Result<EvalReport> {
    let mut report = EvalReport {
        variable: truth.variable,
        sparse: truth.variable == Variable::Precipitation,
        metrics: Vec::new(),
        summary: None,
        climdex: Vec::new(),
        monthly: Vec::new(),
    };
    add_prediction(&mut report, name, pred, truth)?;
    Ok(report)
}

fn add_prediction(report: &mut EvalReport, name: &str, pred: &GridDataset, truth: &GridDataset) -> Result<Metrics> {
    pred.same_grid(truth)?;
    let point = pointwise_stats(pred, truth)?;
    let m = if report.sparse {
        let s = sparse_stats(pred, truth, WET_DAY_THRESHOLD)?;
        Metrics { rmse: s.sparse_rmse, bias: s.sparse_bias, pearson_r: point.pearson_r, excluded_cells: s.excluded_cells }
    } else {
        point
    };
    report.metrics.push(MetricRow { prediction: name.into(), rmse: m.rmse, bias: m.bias, corr: m.pearson_r, excluded_cells: m.excluded_cells });
    let (cp, ct) = (climdex(pred)?, climdex(truth)?);
    let bias = climdex_compare(&cp, &ct, CompareMode::Bias, Aggregation::Pooled)?;
    let corr = match climdex_compare(&cp, &ct, CompareMode::Correlation, Aggregation::Pooled) {
        Ok(c) => c,
        Err(ClimateError::Insufficient(msg)) => {
            log::warn!("{name}: {msg}");
            Vec::new()
        }
        Err(e) => return Err(e.into()),
    };
    for b in bias {
        let c = corr.iter().find(|c| c.index == b.index).map(|c| c.value);
        report.climdex.push(ClimdexRow {
            prediction: name.into(),
            index: b.index.name().into(),
            bias: b.value,
            bias_spread: b.spread.unwrap_or(0.0),
            corr: c,
        });
    }
    if report.monthly.is_empty() {
        report.monthly.extend(monthly_rows("truth", &ct));
    }
    report.monthly.extend(monthly_rows(name, &cp));
    Ok(m)
}

/// The steps of `truth` carrying `pred`'s calendar.
fn aligned_truth(pred: &GridDataset, truth: &GridDataset, name: &str) -> Result<GridDataset> {
    let start = truth
        .dates
        .iter()
        .position(|d| *d == pred.dates[0])
        .ok_or_else(|| CliError::Data(format!("{name}: starts on {}, not covered by the truth calendar", pred.dates[0])))?;
    let sub = truth
        .subset(start..start + pred.len())
        .map_err(|_| CliError::Data(format!("{name}: runs past the end of the truth calendar")))?;
    if sub.dates != pred.dates {
        return Err(CliError::Data(format!("{name}: calendar does not match the truth calendar")));
    }
    Ok(sub)
}

pub fn evaluate(preds: &[PathBuf], truth: &Path) -> Result<EvalReport> {
    let truth = read_grid(truth)?;
    let mut report = EvalReport {
        variable: truth.variable,
        sparse: truth.variable == Variable::Precipitation,
        metrics: Vec::new(),
        summary: None,
        climdex: Vec::new(),
        monthly: Vec::new(),
    };
    let mut folds = Vec::new();
    for p in preds {
        let pred = read_grid(p)?;
        if pred.variable != truth.variable {
            return Err(CliError::Data(format!("{}: {:?} prediction for {:?} truth", p.display(), pred.variable, truth.variable)));
        }
        let name = p.display().to_string();
        let t = aligned_truth(&pred, &truth, &name)?;
        folds.push(add_prediction(&mut report, &name, &pred, &t)?);
    }
    report.summary = Some(MetricReport::from_folds(folds)?);
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    Json,
    Both,
}

/// Report files under `prefix`:
/// - `.metrics.csv`: `prediction,rmse,bias,corr,excluded_cells`, then `mean` and `std` rows
/// - `.climdex.csv`: `prediction,index,bias,bias_spread,corr`
/// - `.monthly.csv`: `month,index,source,value`
/// - `.json`: the whole report
pub fn cmd_evaluate(preds: &[PathBuf], truth: &Path, format: ReportFormat, prefix: &Path) -> Result<Vec<PathBuf>> {
    if preds.is_empty() {
        return Err(CliError::Config("no predictions given".into()));
    }
    let report = evaluate(preds, truth)?;
    let prefix = resolve_output(prefix);
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let with = |suffix: &str| PathBuf::from(format!("{}{suffix}", prefix.display()));
    let mut written = Vec::new();
    if format != ReportFormat::Json {
        let mut rows = report.metrics.clone();
        if let Some(s) = &report.summary {
            let corr = |f: fn(&flowscale_climate::MeanStd) -> f64| s.pearson_r.as_ref().map(f);
            rows.push(MetricRow { prediction: "mean".into(), rmse: s.rmse.mean, bias: s.bias.mean, corr: corr(|m| m.mean), excluded_cells: 0 });
            rows.push(MetricRow { prediction: "std".into(), rmse: s.rmse.std, bias: s.bias.std, corr: corr(|m| m.std), excluded_cells: 0 });
        }
        written.push(write_csv(&with(".metrics.csv"), &rows)?);
        written.push(write_csv(&with(".climdex.csv"), &report.climdex)?);
        written.push(write_csv(&with(".monthly.csv"), &report.monthly)?);
    }
    if format != ReportFormat::Csv {
        let path = with(".json");
        write_json(&path, &report)?;
        written.push(path);
    }
    for r in &report.metrics {
        let corr = r.corr.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into());
        println!("{}\trmse {:.4}\tbias {:.4}\tcorr {corr}", r.prediction, r.rmse, r.bias);
    }
    Ok(written)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<PathBuf> {
    let fail = |e: csv::Error| CliError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| io_error(path, e))?;
    Ok(path.to_path_buf())
}

pub fn cmd_bcsd_fit(low: &Path, high: &Path, quantiles: usize, mode: Option<DisaggregationMode>, output: &Path) -> Result<PathBuf> {
    let low = read_grid(low)?;
    let high = read_grid(high)?;
    let mode = mode.unwrap_or_else(|| DisaggregationMode::for_variable(low.variable));
    let model = bcsd_fit(&low, &high, quantiles, mode)?;
    let output = resolve_output(output);
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    model.save(&output)?;
    Ok(output)
}

pub fn cmd_bcsd_apply(model: &Path, input: &Path, output: &Path) -> Result<PathBuf> {
    let model = BcsdModel::load(model)?;
    let low = read_grid(input)?;
    let out = model.apply(&low)?;
    let output = resolve_output(output);
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    out.write(&output)?;
    Ok(output)
}

pub const DEFAULT_BCSD_QUANTILES: usize = DEFAULT_QUANTILES;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Gaussian bumps and their block means.
    Bumps,
    /// Distorted coarse fields and fine truth for the quantile-mapping baseline.
    Bias,
}

#[derive(Debug, Default)]
pub struct SynthOverrides {
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub variable: Option<Variable>,
}

/// Write `low.fgrd` and `high.fgrd` (and `distortion.json` for bias data).
pub fn cmd_synth(kind: SynthKind, config: Option<&Path>, overrides: &SynthOverrides, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let text = config
        .map(|p| fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))))
        .transpose()?;
    let parse_err = |e: serde_json::Error| CliError::Config(format!("synthetic config: {e}"));
    let out = resolve_output(out_dir);
    create_dir(&out)?;
    let (low, high) = (out.join("low.fgrd"), out.join("high.fgrd"));
    let mut written = vec![low.clone(), high.clone()];
    match kind {
        SynthKind::Bumps => {
            let mut cfg: SynthConfig = text.map(|t| serde_json::from_str(&t)).transpose().map_err(parse_err)?.unwrap_or_default();
            cfg.seed = overrides.seed.unwrap_or(cfg.seed);
            cfg.samples = overrides.samples.unwrap_or(cfg.samples);
            cfg.variable = overrides.variable.unwrap_or(cfg.variable);
            let (l, h, _) = synth_dataset(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
            l.write(&low)?;
            h.write(&high)?;
        }
        SynthKind::Bias => {
            let mut cfg: BiasScenario = text.map(|t| serde_json::from_str(&t)).transpose().map_err(parse_err)?.unwrap_or_default();
            cfg.seed = overrides.seed.unwrap_or(cfg.seed);
            cfg.days = overrides.samples.unwrap_or(cfg.days);
            cfg.variable = overrides.variable.unwrap_or(cfg.variable);
            let (l, h, distortion) = synth_bias_scenario(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
            l.write(&low)?;
            h.write(&high)?;
            let path = out.join("distortion.json");
            write_json(&path, &distortion)?;
            written.push(path);
        }
    }
    Ok(written)
}

pub fn cmd_convert_csv(input: &Path, variable: Variable, units: Option<&str>, start: NaiveDate, output: &Path) -> Result<PathBuf> {
    let f = File::open(input).map_err(|e| io_error(input, e))?;
    let units = units.unwrap_or(match variable {
        Variable::MaxTemperature => "degC",
        Variable::Precipitation => "mm/day",
    });
    let ds = from_csv(BufReader::new(f), variable, units, start)?;
    let output = resolve_output(output);
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    ds.write(&output)?;
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowscale_climate::Scheme;

    fn meta() -> DomainMeta {
        DomainMeta {
            variable: Variable::MaxTemperature,
            units: "degC".into(),
            height: 2,
            width: 2,
            upsample: 2,
            norm: NormalizationParams { scheme: Scheme::TemperatureStandardize, mean: 10.0, std: 2.0 },
            noise: 0.1,
            start: "2001-03-04".into(),
        }
    }

    fn grid(values: Vec<f64>) -> GridDataset {
        let n = values.len() / 4;
        GridDataset::new(Variable::MaxTemperature, "degC", daily_calendar(NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(), n), 2, 2, values).unwrap()
    }

    #[test]
    fn domain_tensor_upsamples_normalizes_and_shifts() {
        let m = meta();
        let t = m.to_tensor(&grid(vec![10.0, 12.0, 8.0, 14.0]), m.input_shift()).unwrap();
        assert_eq!(t.shape(), &[1, 1, 4, 4]);
        assert_eq!(&t.data()[..4], &[0.05, 0.05, 1.05, 1.05]);
        assert_eq!(&t.data()[12..], &[-0.95, -0.95, 2.05, 2.05]);
        let back = m.to_dataset(&t.map(|v| v - 0.05), grid(vec![0.0; 4]).dates).unwrap();
        assert_eq!((back.height, back.width), (4, 4));
        assert!((back.values[15] - 14.0).abs() < 1e-12);
        assert_eq!(m.start_date().unwrap(), NaiveDate::from_ymd_opt(2001, 3, 4).unwrap());
    }

    #[test]
    fn domain_tensor_checks_grid_and_variable() {
        let m = meta();
        let wrong = GridDataset::new(Variable::MaxTemperature, "degC", grid(vec![0.0; 4]).dates, 1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(m.to_tensor(&wrong, 0.0), Err(CliError::Data(_))));
        let rain = GridDataset { variable: Variable::Precipitation, ..grid(vec![1.0; 4]) };
        assert!(m.to_tensor(&rain, 0.0).is_err());
    }

    #[test]
    fn truth_alignment() {
        let truth = grid((0..24).map(f64::from).collect());
        let pred = truth.subset(2..5).unwrap();
        assert_eq!(aligned_truth(&pred, &truth, "p").unwrap(), pred);
        let late = GridDataset { dates: daily_calendar(NaiveDate::from_ymd_opt(2001, 1, 5).unwrap(), 3), ..pred.clone() };
        assert!(matches!(aligned_truth(&late, &truth, "p"), Err(CliError::Data(_))));
        let early = GridDataset { dates: daily_calendar(NaiveDate::from_ymd_opt(2000, 12, 1).unwrap(), 3), ..pred };
        assert!(aligned_truth(&early, &truth, "p").is_err());
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let (_, high, _) = synth_dataset(&SynthConfig { samples: 70, ..SynthConfig::default() }).unwrap();
        let r = evaluate_one("self", &high, &high).unwrap();
        assert_eq!((r.metrics[0].rmse, r.metrics[0].bias), (0.0, 0.0));
        assert!((r.metrics[0].corr.unwrap() - 1.0).abs() < 1e-12);
        for c in &r.climdex {
            assert_eq!(c.bias, 0.0);
            assert!((c.corr.unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
