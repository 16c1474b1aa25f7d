//! Classifier evaluation: confusion counts, derived rates, ROC AUC and
//! mean +/- SEM aggregation across repeated runs.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Probability at or above which a sample is classified as extreme.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// Class 1 (extreme) is the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Two-by-two text table, actual classes as rows.
    pub fn render(&self) -> String {
        format!(
            "              pred normal  pred extreme\n\
             actual normal  {:>11}  {:>12}\n\
             actual extreme {:>11}  {:>12}\n",
            self.tn, self.fp, self.fn_, self.tp
        )
    }

    pub fn to_csv(&self) -> String {
        format!(
            "actual,pred_normal,pred_extreme\nnormal,{},{}\nextreme,{},{}\n",
            self.tn, self.fp, self.fn_, self.tp
        )
    }
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if preds.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Input("confusion matrix of zero samples".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &y) in preds.iter().zip(labels) {
        match (p, y) {
            (1, 1) => cm.tp += 1,
            (0, 0) => cm.tn += 1,
            (1, 0) => cm.fp += 1,
            (0, 1) => cm.fn_ += 1,
            _ => return Err(Error::Input(format!("class values must be 0 or 1, got ({p}, {y})"))),
        }
    }
    Ok(cm)
}

/// A rate that is `None` when its denominator is zero.
pub type Rate = Option<f64>;

fn ratio(num: usize, den: usize) -> Rate {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    pub accuracy: f64,
    pub precision: Rate,
    pub recall: Rate,
    pub f1: Rate,
}

pub fn derive_metrics(cm: &ConfusionMatrix) -> Result<DerivedMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("no samples in confusion matrix".into()));
    }
    let precision = ratio(cm.tp, cm.tp + cm.fp);
    let recall = ratio(cm.tp, cm.tp + cm.fn_);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    Ok(DerivedMetrics {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        precision,
        recall,
        f1,
    })
}

/// Area under the ROC curve as the Mann-Whitney statistic: the share of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input("AUC needs both classes present".into()));
    }
    // Sort once, then sweep groups of tied scores. Counts are kept as
    // integers (in half-pair units) so the result equals pairwise counting.
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut neg_below = 0u64;
    let mut half_wins = 0u64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        half_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    Ok(half_wins as f64 / (2 * n_pos as u64 * n_neg as u64) as f64)
}

/// One evaluated model, keyed like the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "Loss")]
    pub loss: f64,
    #[serde(rename = "Accuracy")]
    pub accuracy: f64,
    #[serde(rename = "Precision")]
    pub precision: Rate,
    #[serde(rename = "Recall")]
    pub recall: Rate,
    #[serde(rename = "AUC")]
    pub auc: Rate,
    #[serde(rename = "F1_Score")]
    pub f1: Rate,
    pub confusion: ConfusionMatrix,
    pub threshold_percentile: f64,
}

impl MetricsReport {
    /// Builds a report from class-1 probabilities.
    pub fn from_scores(scores: &[f64], labels: &[u8], loss: f64, threshold_percentile: f64) -> Result<Self> {
        let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= DECISION_THRESHOLD)).collect();
        let cm = confusion(&preds, labels)?;
        let d = derive_metrics(&cm)?;
        let single_class = labels.iter().all(|&l| l == labels[0]);
        let auc = if single_class { None } else { Some(roc_auc(scores, labels)?) };
        Ok(MetricsReport {
            loss,
            accuracy: d.accuracy,
            precision: d.precision,
            recall: d.recall,
            auc,
            f1: d.f1,
            confusion: cm,
            threshold_percentile,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }

    fn column_values(&self) -> [Rate; 6] {
        [
            Some(self.loss),
            Some(self.accuracy),
            self.precision,
            self.recall,
            self.auc,
            self.f1,
        ]
    }
}

/// Column names of the results table, in order.
pub const TABLE_COLUMNS: [&str; 6] = ["Loss", "Accuracy", "Precision", "Recall", "AUC", "F1_Score"];

/// Mean and standard error of one metric over the runs where it was defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: Option<f64>,
    pub sem: Option<f64>,
    /// Runs contributing (runs with an undefined value are skipped).
    pub n: usize,
}

impl MeanSem {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return MeanSem { mean: None, sem: None, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sem = if n < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            var.sqrt() / (n as f64).sqrt()
        };
        MeanSem {
            mean: Some(mean),
            sem: Some(sem),
            n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    #[serde(rename = "Loss")]
    pub loss: MeanSem,
    #[serde(rename = "Accuracy")]
    pub accuracy: MeanSem,
    #[serde(rename = "Precision")]
    pub precision: MeanSem,
    #[serde(rename = "Recall")]
    pub recall: MeanSem,
    #[serde(rename = "AUC")]
    pub auc: MeanSem,
    #[serde(rename = "F1_Score")]
    pub f1: MeanSem,
    pub threshold_percentile: f64,
    pub runs: usize,
    /// True when only one run was aggregated, so every SEM is a placeholder 0.
    pub single_run: bool,
}

impl EnsembleReport {
    pub fn columns(&self) -> [&MeanSem; 6] {
        [&self.loss, &self.accuracy, &self.precision, &self.recall, &self.auc, &self.f1]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["threshold_percentile".to_string(), "runs".to_string()];
        for c in TABLE_COLUMNS {
            cols.push(format!("{c}_mean"));
            cols.push(format!("{c}_sem"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        let mut cells = vec![self.threshold_percentile.to_string(), self.runs.to_string()];
        for c in self.columns() {
            cells.push(fmt(c.mean));
            cells.push(fmt(c.sem));
        }
        cells.join(",")
    }
}

/// Table-style CSV with one row per ensemble.
pub fn ensembles_to_csv(reports: &[EnsembleReport]) -> String {
    let mut out = EnsembleReport::csv_header();
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn aggregate(runs: &[MetricsReport]) -> Result<EnsembleReport> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Input("cannot aggregate zero runs".into()))?;
    if let Some(r) = runs.iter().find(|r| r.threshold_percentile != first.threshold_percentile) {
        return Err(Error::Input(format!(
            "runs mix threshold percentiles {} and {}",
            first.threshold_percentile, r.threshold_percentile
        )));
    }
    let column = |k: usize| {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.column_values()[k]).collect();
        MeanSem::of(&vals)
    };
    Ok(EnsembleReport {
        loss: column(0),
        accuracy: column(1),
        precision: column(2),
        recall: column(3),
        auc: column(4),
        f1: column(5),
        threshold_percentile: first.threshold_percentile,
        runs: runs.len(),
        single_run: runs.len() == 1,
    })
}

/// Default sweep thresholds: the 91st to 95th percentiles.
pub const SWEEP_PERCENTILES: [f64; 5] = [0.91, 0.92, 0.93, 0.94, 0.95];

/// Seed of run `run` under `master_seed`.
pub fn run_seed(master_seed: u64, run: usize) -> u64 {
    master_seed.wrapping_add(run as u64)
}

/// For each threshold, relabels via `relabel`, then trains and evaluates
/// `runs` models through `train_eval(labels_for_threshold, seed)` and
/// aggregates them.
pub fn percentile_sweep<L>(
    thresholds: &[f64],
    runs: usize,
    master_seed: u64,
    mut relabel: impl FnMut(f64) -> Result<L>,
    mut train_eval: impl FnMut(&L, f64, u64) -> Result<MetricsReport>,
) -> Result<Vec<EnsembleReport>> {
    if runs == 0 {
        return Err(Error::Input("a sweep needs at least one run per threshold".into()));
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &m in thresholds {
        let labels = relabel(m)?;
        let mut reports = Vec::with_capacity(runs);
        for run in 0..runs {
            reports.push(train_eval(&labels, m, run_seed(master_seed, run))?);
        }
        out.push(aggregate(&reports)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn confusion_examples() {
        let labels = [1, 0, 1, 0, 0, 1, 0, 1, 0, 0];
        let cm = confusion(&labels, &labels).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 4, tn: 6, fp: 0, fn_: 0 });
        let inverted: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let cm = confusion(&inverted, &labels).unwrap();
        assert_eq!((cm.tp, cm.tn), (0, 0));
        let cm = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(cm, ConfusionMatrix { tp: 1, tn: 1, fp: 1, fn_: 1 });
        assert!(confusion(&[1], &[1, 0]).is_err());
        assert!(confusion(&[], &[]).is_err());
    }

    #[test]
    fn derived_metric_examples() {
        let d = derive_metrics(&ConfusionMatrix { tp: 9, tn: 87, fp: 3, fn_: 1 }).unwrap();
        assert!((d.accuracy - 0.96).abs() < 1e-15);
        assert!((d.precision.unwrap() - 0.75).abs() < 1e-15);
        assert!((d.recall.unwrap() - 0.9).abs() < 1e-15);
        // 2 * 0.75 * 0.9 / 1.65
        assert!((d.f1.unwrap() - 1.35 / 1.65).abs() < 1e-15);
        assert!((d.f1.unwrap() - 0.8182).abs() < 1e-4);

        let d = derive_metrics(&ConfusionMatrix { tp: 5, tn: 5, fp: 0, fn_: 0 }).unwrap();
        assert_eq!((d.accuracy, d.precision, d.recall, d.f1), (1.0, Some(1.0), Some(1.0), Some(1.0)));

        let d = derive_metrics(&ConfusionMatrix { tp: 0, tn: 5, fp: 0, fn_: 3 }).unwrap();
        assert_eq!(d.precision, None);
        assert_eq!(d.recall, Some(0.0));
        assert_eq!(d.f1, None);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[1, 0, 1, 0, 0, 0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.95], &[1, 1, 0, 0]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
        assert!(roc_auc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_counting() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0;
        while checked < 500 {
            let n = rng.gen_range(2..=100);
            // coarse scores force plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 19.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            if labels.iter().all(|&l| l == labels[0]) {
                continue;
            }
            assert_eq!(roc_auc(&scores, &labels).unwrap(), auc_oracle(&scores, &labels));
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_increasing_transform(
            pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..60)
        ) {
            let (scores, labels): (Vec<f64>, Vec<u8>) = pairs.into_iter().unzip();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&transformed, &labels).unwrap());
        }

        #[test]
        fn accuracy_reconstructs_counts(tp in 0usize..50, tn in 0usize..50, fp in 0usize..50, fn_ in 0usize..50) {
            let cm = ConfusionMatrix { tp, tn, fp, fn_ };
            prop_assume!(cm.total() > 0);
            let d = derive_metrics(&cm).unwrap();
            prop_assert_eq!((d.accuracy * cm.total() as f64).round() as usize, tp + tn);
            prop_assert!((d.accuracy * cm.total() as f64 - (tp + tn) as f64).abs() < 1e-9);
        }
    }

    fn report(acc: f64, m: f64) -> MetricsReport {
        MetricsReport {
            loss: 0.3,
            accuracy: acc,
            precision: Some(0.5),
            recall: None,
            auc: Some(0.9),
            f1: None,
            confusion: ConfusionMatrix::default(),
            threshold_percentile: m,
        }
    }

    #[test]
    fn aggregate_examples() {
        let e = aggregate(&[report(0.8, 0.95), report(0.8, 0.95)]).unwrap();
        assert_eq!(e.accuracy.mean, Some(0.8));
        assert_eq!(e.accuracy.sem, Some(0.0));
        assert_eq!(e.recall, MeanSem { mean: None, sem: None, n: 0 });

        let e = aggregate(&[report(1.0, 0.95), report(2.0, 0.95), report(3.0, 0.95)]).unwrap();
        assert_eq!(e.accuracy.mean, Some(2.0));
        assert!((e.accuracy.sem.unwrap() - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert!((e.accuracy.sem.unwrap() - 0.5774).abs() < 1e-4);

        let e = aggregate(&[report(0.7, 0.93)]).unwrap();
        assert!(e.single_run);
        assert_eq!((e.accuracy.mean, e.accuracy.sem), (Some(0.7), Some(0.0)));

        assert!(aggregate(&[report(0.7, 0.93), report(0.7, 0.95)]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn report_keys_follow_table_columns() {
        let json: serde_json::Value = serde_json::from_str(&report(0.9, 0.95).to_json()).unwrap();
        for c in TABLE_COLUMNS {
            assert!(json.get(c).is_some(), "missing {c}");
        }
        assert!(json["Recall"].is_null());
        let e = aggregate(&[report(0.9, 0.95)]).unwrap();
        let csv = ensembles_to_csv(&[e]);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "threshold_percentile,runs,Loss_mean,Loss_sem,Accuracy_mean,Accuracy_sem,Precision_mean,Precision_sem,\
             Recall_mean,Recall_sem,AUC_mean,AUC_sem,F1_Score_mean,F1_Score_sem"
        );
        assert!(lines.next().unwrap().contains("undefined"));
    }

    #[test]
    fn sweep_counts_trainings() {
        let mut calls = 0;
        let precip: Vec<f64> = (1..=200).map(f64::from).collect();
        let mut positives = Vec::new();
        let out = percentile_sweep(
            &SWEEP_PERCENTILES,
            5,
            100,
            |m| crate::data::label_extremes(&precip, m),
            |labels, m, seed| {
                calls += 1;
                assert!((100..105).contains(&seed));
                positives.push(labels.positives());
                Ok(report(0.9, m))
            },
        )
        .unwrap();
        assert_eq!(calls, 25);
        assert_eq!(out.len(), 5);
        assert!(positives.windows(2).all(|w| w[0] >= w[1]));
    }
}
