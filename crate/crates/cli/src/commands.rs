use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use saconv::checkpoint::Checkpoint;
use saconv::data::{
    label_extremes, read_grid, read_labels_csv, read_precip_csv, regional_mean, synth_generate, write_atomic,
    write_grid, write_labels_csv, write_precip_csv, write_truth_csv, Dataset, GridSample, LabelRow,
};
use saconv::gradcheck::{gradcheck as run_gradcheck, DEFAULT_EPS};
use saconv::metrics::{ensembles_to_csv, percentile_sweep, MetricsReport};
use saconv::model::{Arch, Model};
use saconv::pipeline::{anomaly_dataset, evaluate as evaluate_samples, synth_dataset, DataConfig, ExperimentConfig};
use saconv::training::train_with;
use saconv::{Error, Result};
use serde::Serialize;

use crate::manifest::{io_error, RunManifest};

pub const SLP_FILE: &str = "slp.grid";
pub const GPH_FILE: &str = "gph.grid";
pub const PRECIP_GRID_FILE: &str = "precip.grid";
pub const PRECIP_FILE: &str = "precip.csv";
pub const TRUTH_FILE: &str = "truth.csv";
pub const LABELS_FILE: &str = "labels.csv";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            ExperimentConfig::from_toml(&text).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("{}: {msg}", p.display())),
                other => other,
            })
        }
        None => Ok(ExperimentConfig::default()),
    }
}

pub fn synth(seed: u64, days: usize, signal: f64, out: &Path) -> Result<()> {
    let data = synth_generate(seed, days, signal)?;
    create_dir(out)?;
    write_grid(&out.join(SLP_FILE), &data.slp)?;
    write_grid(&out.join(GPH_FILE), &data.gph)?;
    write_grid(&out.join(PRECIP_GRID_FILE), &data.precip)?;
    let regional = regional_mean(&data.precip, saconv::data::MIDWEST_LAT, saconv::data::MIDWEST_LON)?;
    write_precip_csv(&out.join(PRECIP_FILE), data.precip.dates(), &regional)?;
    write_truth_csv(&out.join(TRUTH_FILE), data.slp.dates(), &data.truth)?;
    let planted = data.truth.iter().filter(|&&t| t == 1).count();
    println!("wrote {days} days ({planted} planted events) to {}", out.display());
    Ok(())
}

pub fn label(precip: &Path, percentile: f64, out: &Path) -> Result<()> {
    let (dates, values) = read_precip_csv(precip)?;
    let labels = label_extremes(&values, percentile)?;
    let rows: Vec<LabelRow> = dates
        .iter()
        .zip(&labels.labels)
        .map(|(&date, &label)| LabelRow {
            date,
            label,
            threshold_percentile: percentile,
            threshold: Some(labels.threshold),
        })
        .collect();
    write_labels_csv(out, &rows)?;
    println!(
        "threshold {} at percentile {percentile}: {} of {} days labelled extreme",
        labels.threshold,
        labels.positives(),
        rows.len()
    );
    Ok(())
}

/// Raw grids and labels of a data directory turned into anomaly samples.
fn load_dataset(dir: &Path, data_cfg: &DataConfig) -> Result<Dataset> {
    let slp = read_grid(&dir.join(SLP_FILE))?;
    let gph = read_grid(&dir.join(GPH_FILE))?;
    let rows = read_labels_csv(&dir.join(LABELS_FILE))?;
    let dates: Vec<_> = rows.iter().map(|r| r.date).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    anomaly_dataset(&slp, &gph, &dates, &labels, data_cfg.climatology_window)
}

fn percentile_of_labels(dir: &Path) -> Result<f64> {
    let rows = read_labels_csv(&dir.join(LABELS_FILE))?;
    Ok(rows.first().map_or(f64::NAN, |r| r.threshold_percentile))
}

pub fn train(data: &Path, config: Option<&Path>, arch: Option<Arch>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(arch) = arch {
        cfg.model = cfg.model.with_arch(arch);
    }
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let config_text = cfg.to_toml();
    let inputs: Vec<PathBuf> = [SLP_FILE, GPH_FILE, LABELS_FILE].iter().map(|f| data.join(f)).collect();
    let mut manifest = RunManifest::start(out, "train", &config_text, cfg.train.seed, &inputs)?;

    let dataset = load_dataset(data, &cfg.data)?;
    let mut model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let log = train_with(&mut model, dataset.train(), &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  lr {:.5}  loss {:.5}  train acc {:.4}",
            r.epoch, r.lr, r.loss, r.train_accuracy
        );
    })?;

    let ckpt = Checkpoint {
        model,
        data: cfg.data.clone(),
        seed: cfg.train.seed,
        epochs: cfg.train.epochs,
    };
    let log_text: String = log.iter().map(|r| r.to_line() + "\n").collect();
    manifest.artifact(CONFIG_FILE, config_text.as_bytes())?;
    manifest.artifact(CHECKPOINT_FILE, &ckpt.to_bytes())?;
    manifest.artifact(LOG_FILE, log_text.as_bytes())?;
    manifest.finish()?;
    let last = log.last().expect("at least one epoch");
    println!(
        "trained {} for {} epochs: loss {:.5}, train accuracy {:.4}; wrote {}",
        cfg.model.arch(),
        last.epoch,
        last.loss,
        last.train_accuracy,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationOutput<'a> {
    split: &'a str,
    samples: usize,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

pub fn evaluate(checkpoint: &Path, data: &Path, split: Split, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let slp = read_grid(&data.join(SLP_FILE))?;
    let c = &ckpt.model.config;
    if [slp.lats().len(), slp.lons().len()] != [c.input_h, c.input_w] {
        return Err(Error::Version(format!(
            "checkpoint {} expects {}x{} grids, data has {}x{}",
            checkpoint.display(),
            c.input_h,
            c.input_w,
            slp.lats().len(),
            slp.lons().len()
        )));
    }
    let dataset = load_dataset(data, &ckpt.data)?;
    let samples: &[GridSample] = match split {
        Split::Train => dataset.train(),
        Split::Test => dataset.test(),
        Split::All => &dataset.samples,
    };
    let report = evaluate_samples(&ckpt.model, samples, percentile_of_labels(data)?)?;
    create_dir(out)?;
    let split_name = format!("{split:?}").to_lowercase();
    let json = serde_json::to_string_pretty(&EvaluationOutput {
        split: &split_name,
        samples: samples.len(),
        report: &report,
    })
    .expect("report serialises");
    write_atomic(&out.join("report.json"), json.as_bytes())?;
    write_atomic(&out.join("confusion.txt"), report.confusion.render().as_bytes())?;
    write_atomic(&out.join("confusion.csv"), report.confusion.to_csv().as_bytes())?;
    println!("{json}");
    print!("{}", report.confusion.render());
    Ok(())
}

/// Parses `lo:hi` (inclusive, steps of 0.01) or `a,b,c`.
pub fn parse_percentiles(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::Config(format!("cannot read percentiles `{spec}`; use lo:hi or a comma list"));
    let list: Vec<f64> = if let Some((lo, hi)) = spec.split_once(':') {
        let hundredths = |s: &str| -> Result<i64> {
            let v: f64 = s.trim().parse().map_err(|_| bad())?;
            let h = (v * 100.0).round();
            if (h - v * 100.0).abs() > 1e-9 {
                return Err(Error::Config(format!("range endpoint {v} is not a whole percentile")));
            }
            Ok(h as i64)
        };
        let (lo, hi) = (hundredths(lo)?, hundredths(hi)?);
        if lo > hi {
            return Err(bad());
        }
        (lo..=hi).map(|h| h as f64 / 100.0).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if list.is_empty() || list.iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::Config(format!("percentiles `{spec}` must lie in [0, 1]")));
    }
    Ok(list)
}

fn percentile_key(m: f64) -> String {
    let h = m * 100.0;
    if (h - h.round()).abs() < 1e-9 {
        format!("p{}", h.round() as i64)
    } else {
        format!("p{h}")
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    threshold_percentile: f64,
    seed: u64,
    positives: usize,
    #[serde(flatten)]
    report: &'a MetricsReport,
}

pub fn sweep(
    data: &Path,
    config: Option<&Path>,
    arch: Option<Arch>,
    runs: usize,
    percentiles: &str,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(arch) = arch {
        cfg.model = cfg.model.with_arch(arch);
    }
    cfg.validate()?;
    let thresholds = parse_percentiles(percentiles)?;
    let config_text = cfg.to_toml();
    let inputs: Vec<PathBuf> = [SLP_FILE, GPH_FILE, PRECIP_FILE].iter().map(|f| data.join(f)).collect();
    let mut manifest = RunManifest::start(out, "sweep", &config_text, seed, &inputs)?;

    let slp = read_grid(&data.join(SLP_FILE))?;
    let gph = read_grid(&data.join(GPH_FILE))?;
    let (dates, precip) = read_precip_csv(&data.join(PRECIP_FILE))?;
    let base = anomaly_dataset(&slp, &gph, &dates, &vec![0; dates.len()], cfg.data.climatology_window)?;

    let mut run_lines = String::new();
    let ensembles = percentile_sweep(
        &thresholds,
        runs,
        seed,
        |m| {
            let labels = label_extremes(&precip, m)?;
            eprintln!("{}: threshold {:.4}, {} positives", percentile_key(m), labels.threshold, labels.positives());
            base.relabel(&labels.labels)
        },
        |ds, m, run_seed| {
            let mut train_cfg = cfg.train.clone();
            train_cfg.seed = run_seed;
            let mut model = Model::init(cfg.model.clone(), run_seed)?;
            train_with(&mut model, ds.train(), &train_cfg, |_| {})?;
            let report = evaluate_samples(&model, ds.test(), m)?;
            eprintln!(
                "{} seed {run_seed}: accuracy {:.4}, auc {}",
                percentile_key(m),
                report.accuracy,
                report.auc.map_or("undefined".into(), |a| format!("{a:.4}"))
            );
            let record = RunRecord {
                threshold_percentile: m,
                seed: run_seed,
                positives: Dataset::class_counts(&ds.samples)[1],
                report: &report,
            };
            run_lines.push_str(&serde_json::to_string(&record).expect("record serialises"));
            run_lines.push('\n');
            Ok(report)
        },
    )?;

    manifest.artifact(CONFIG_FILE, config_text.as_bytes())?;
    manifest.artifact("runs.jsonl", run_lines.as_bytes())?;
    for e in &ensembles {
        manifest.artifact(&format!("{}.json", percentile_key(e.threshold_percentile)), e.to_json().as_bytes())?;
    }
    let summary = ensembles_to_csv(&ensembles);
    manifest.artifact("summary.csv", summary.as_bytes())?;
    manifest.finish()?;
    print!("{summary}");
    Ok(())
}

pub fn gradcheck(config: Option<&Path>, seed: u64, tolerance: f64) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let model = Model::init(cfg.model.clone(), seed)?;
    // a day with a planted event, normalised against a pooled climatology
    let data_cfg = DataConfig {
        climatology_window: cfg.data.climatology_window.max(15),
        ..cfg.data.clone()
    };
    let (synth, ds) = synth_dataset(seed, 40, 2.0, &data_cfg)?;
    let day = synth.truth.iter().position(|&t| t == 1).unwrap_or(0);
    let sample = &ds.samples[day];
    if sample.anomalies.shape() != [cfg.model.input_h, cfg.model.input_w, cfg.model.input_d] {
        return Err(Error::Config(format!(
            "gradient check runs on 15x35x2 synthetic grids; the model expects {}x{}x{}",
            cfg.model.input_h, cfg.model.input_w, cfg.model.input_d
        )));
    }
    let report = run_gradcheck(&model, &sample.anomalies, sample.label, DEFAULT_EPS, tolerance)?;
    println!(
        "{} parameters ({} scalars), eps {}, tolerance {tolerance}, loss {:.6}",
        report.params.len(),
        model.params.num_scalars(),
        report.eps,
        report.loss
    );
    for (layer, p) in report.worst_per_layer() {
        println!(
            "{layer:<14} worst {:.3e}  ({} [{}]: analytic {:.6e}, numeric {:.6e})",
            p.max_rel_error, p.name, p.worst_index, p.analytic, p.numeric
        );
    }
    if report.passed() {
        println!("gradient check passed: max relative error {:.3e}", report.max_rel_error());
        Ok(())
    } else {
        let bad: Vec<String> = report
            .violations()
            .iter()
            .map(|p| format!("{} ({:.3e})", p.name, p.max_rel_error))
            .collect();
        Err(Error::Contract(format!(
            "gradient check failed at tolerance {tolerance}: {}",
            bad.join(", ")
        )))
    }
}
