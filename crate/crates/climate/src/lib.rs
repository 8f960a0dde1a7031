//! Gridded climate datasets, downscaling evaluation metrics and the
//! quantile-mapping baseline.

pub mod bcsd;
pub mod error;
pub mod grid;
pub mod metrics;

pub use bcsd::{bcsd_fit, bilinear_upsample, synth_bias_scenario, BcsdModel, BiasScenario, DisaggregationMode, MonthModel, QuantileMap, DEFAULT_QUANTILES, RATIO_CAP};
pub use error::{ClimateError, Result};
pub use grid::{
    block_downsample, cv_folds, daily_calendar, denormalize, from_csv, nearest_upsample, normalize, synth_dataset, Bounds,
    CvFold, DownsampleMode, GridDataset, NormalizationParams, Scheme, SynthConfig, Variable,
};
pub use metrics::{
    climatology, climatology_quantiles, climdex_compare, climdex_precipitation, climdex_temperature, month_groups, pearson,
    pointwise_stats, precip_month, quantile_sorted, sparse_stats, Aggregation, Climatology, ClimdexIndex, ClimdexReport,
    CompareMode, IndexComparison, MeanStd, MetricReport, Metrics, PrecipIndices, SparseStats, YearMonth, WET_DAY_THRESHOLD,
};
