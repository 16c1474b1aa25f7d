//! End-to-end glue: raw grids and labels to a dataset, and a dataset to a
//! trained, evaluated model.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_dataset, climatology_windowed, label_extremes, regional_mean, synth_generate, zscore_anomalies,
    DailyGridSeries, Dataset, SynthData, MIDWEST_LAT, MIDWEST_LON,
};
use crate::metrics::MetricsReport;
use crate::model::{Model, ModelConfig};
use crate::training::{predict, train, EpochRecord, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Half-width in days of the climatology pooling window; 0 uses only
    /// the exact calendar day.
    pub climatology_window: usize,
    pub percentile: f64,
    /// Region averaged for labelling, degrees north and east.
    pub region_lat: (f64, f64),
    pub region_lon: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            climatology_window: 0,
            percentile: 0.95,
            region_lat: MIDWEST_LAT,
            region_lon: MIDWEST_LON,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.percentile) {
            return Err(Error::Config(format!("percentile {} outside [0, 1]", self.percentile)));
        }
        Ok(())
    }
}

/// Everything a training run needs besides its data, as read from a TOML
/// config file with `[model]`, `[train]` and `[data]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }
}

/// Z-score anomalies of both variables against their own climatologies,
/// stacked into a dataset labelled by date.
pub fn anomaly_dataset(
    slp: &DailyGridSeries,
    gph: &DailyGridSeries,
    label_dates: &[NaiveDate],
    labels: &[u8],
    window: usize,
) -> Result<Dataset> {
    let z_slp = zscore_anomalies(slp, &climatology_windowed(slp, window))?;
    let z_gph = zscore_anomalies(gph, &climatology_windowed(gph, window))?;
    build_dataset(&z_slp, &z_gph, label_dates, labels)
}

/// Labels from the regional mean of a gridded precipitation series.
pub fn precip_labels(precip: &DailyGridSeries, cfg: &DataConfig) -> Result<crate::data::Labels> {
    let series = regional_mean(precip, cfg.region_lat, cfg.region_lon)?;
    label_extremes(&series, cfg.percentile)
}

/// Generates synthetic data and turns it into a labelled dataset.
pub fn synth_dataset(seed: u64, days: usize, signal: f64, cfg: &DataConfig) -> Result<(SynthData, Dataset)> {
    let synth = synth_generate(seed, days, signal)?;
    let labels = precip_labels(&synth.precip, cfg)?;
    let ds = anomaly_dataset(
        &synth.slp,
        &synth.gph,
        synth.slp.dates(),
        &labels.labels,
        cfg.climatology_window,
    )?;
    Ok((synth, ds))
}

/// Evaluation loss is unweighted cross-entropy.
pub fn evaluate(model: &Model, samples: &[crate::data::GridSample], percentile: f64) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    let (probs, loss) = predict(model, samples, [1.0, 1.0])?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    MetricsReport::from_scores(&probs, &labels, loss, percentile)
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub report: MetricsReport,
}

/// Trains a fresh model (initialised from `train.seed`) on the training
/// split and evaluates it on the test split.
pub fn train_and_evaluate(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    percentile: f64,
) -> Result<RunOutcome> {
    let mut model = Model::init(model_cfg.clone(), train_cfg.seed)?;
    let log = train(&mut model, dataset, train_cfg)?;
    let report = evaluate(&model, dataset.test(), percentile)?;
    Ok(RunOutcome { model, log, report })
}
