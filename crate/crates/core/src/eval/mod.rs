//! Classification metrics, nested cross-validation and model comparison.

pub mod nested;
pub mod ttest;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::model::ModelError;
use crate::store::manifest::{Eye, Label};

pub use nested::{run_nested_cv, CnnLearner, EvalItem, Learner, NestedCvOptions, NestedCvOutcome};
pub use ttest::{calibrated_t_test, inc_beta, ln_gamma, student_t_two_sided, TTestResult};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC needs both classes; got {n_ad} AD and {n_cn} CN")]
    SingleClass { n_ad: usize, n_cn: usize },
    #[error("leakage: subject {subject_id} is in both training and test sets (run {run}, fold {fold})")]
    Leakage {
        subject_id: String,
        run: usize,
        fold: usize,
    },
    #[error("plan does not match the data: {0}")]
    PlanMismatch(String),
    #[error("{0}")]
    Invalid(String),
    #[error("predictions file: {0}")]
    Parse(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One held-out scan score.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub run: usize,
    pub outer_fold: usize,
    pub subject_id: String,
    pub eye: Eye,
    pub instance: u8,
    pub label: Label,
    /// Probability of AD.
    pub score: f64,
}

/// Mann-Whitney AUC: the fraction of (AD, CN) pairs ranked correctly,
/// ties counting one half. Sort-based, `O(n log n)`.
pub fn auc(preds: &[Prediction]) -> Result<f64, EvalError> {
    let scored: Vec<(f64, bool)> = preds.iter().map(|p| (p.score, p.label == Label::Ad)).collect();
    auc_scores(&scored)
}

/// [`auc`] on `(score, is_positive)` pairs.
pub fn auc_scores(scored: &[(f64, bool)]) -> Result<f64, EvalError> {
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass {
            n_ad: n_pos,
            n_cn: n_neg,
        });
    }
    if scored.iter().any(|s| s.0.is_nan()) {
        return Err(EvalError::Invalid("NaN score".into()));
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // walk tie groups in ascending order; each positive beats every
    // negative strictly below it and half of those tied with it
    let mut wins = 0.0;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        let group = &sorted[i..j];
        let pos = group.iter().filter(|s| s.1).count();
        let neg = group.len() - pos;
        wins += pos as f64 * (neg_below as f64 + 0.5 * neg as f64);
        neg_below += neg;
        i = j;
    }
    Ok(wins / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub f1: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Some ratio had a zero denominator and was reported as 0.
    pub zero_denominator: bool,
}

/// Confusion-matrix metrics with AD positive; `score >= threshold` is AD.
pub fn threshold_metrics(preds: &[Prediction], threshold: f64) -> ThresholdMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for p in preds {
        match (p.score >= threshold, p.label == Label::Ad) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    confusion_metrics(tp, fp, tn, fn_)
}

pub fn confusion_metrics(tp: usize, fp: usize, tn: usize, fn_: usize) -> ThresholdMetrics {
    let mut flag = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            flag = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let sensitivity = ratio(tp, tp + fn_);
    let specificity = ratio(tn, tn + fp);
    let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
    ThresholdMetrics {
        f1,
        precision,
        sensitivity,
        specificity,
        zero_denominator: flag,
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Per-run pooled AUCs and run-averaged threshold metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub name: String,
    pub run_aucs: Vec<f64>,
    pub mean_auc: f64,
    /// Sample standard deviation over runs (0 for a single run).
    pub std_auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub zero_denominator: bool,
}

impl MetricsReport {
    /// Groups predictions by run; each run's held-out folds are pooled.
    pub fn from_predictions(
        name: &str,
        preds: &[Prediction],
        threshold: f64,
    ) -> Result<Self, EvalError> {
        let mut by_run: BTreeMap<usize, Vec<Prediction>> = BTreeMap::new();
        for p in preds {
            by_run.entry(p.run).or_default().push(p.clone());
        }
        if by_run.is_empty() {
            return Err(EvalError::Invalid("no predictions".into()));
        }
        let mut aucs = Vec::new();
        let mut metrics = Vec::new();
        for run in by_run.values() {
            aucs.push(auc(run)?);
            metrics.push(threshold_metrics(run, threshold));
        }
        let (mean_auc, std_auc) = mean_std(&aucs);
        let avg = |f: fn(&ThresholdMetrics) -> f64| mean_std(&metrics.iter().map(f).collect::<Vec<_>>()).0;
        Ok(Self {
            name: name.to_string(),
            mean_auc,
            std_auc,
            run_aucs: aucs,
            f1: avg(|m| m.f1),
            precision: avg(|m| m.precision),
            sensitivity: avg(|m| m.sensitivity),
            specificity: avg(|m| m.specificity),
            zero_denominator: metrics.iter().any(|m| m.zero_denominator),
        })
    }
}

/// Fixed-width comparison table. The first report is the reference; every
/// other row gets the ordinary paired p-value (`p`) and the calibrated one
/// (`corr. p`) against it.
pub fn report_table(reports: &[MetricsReport], rho: f64, df: f64) -> Result<String, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Invalid("report needs at least one model".into()));
    }
    let with_p = reports.len() > 1;
    let mut out = String::new();
    let _ = write!(
        out,
        "{:<16} {:>15} {:>8} {:>9} {:>11} {:>11}",
        "model", "mAUC", "f1", "precision", "sensitivity", "specificity"
    );
    if with_p {
        let _ = write!(out, " {:>8} {:>8}", "p", "corr. p");
    }
    out.push('\n');
    let reference = &reports[0];
    for (i, r) in reports.iter().enumerate() {
        let auc = format!("{:.3} ± {:.3}", r.mean_auc, r.std_auc);
        let _ = write!(
            out,
            "{:<16} {:>15} {:>8.3} {:>9.3} {:>11.3} {:>11.3}",
            r.name, auc, r.f1, r.precision, r.sensitivity, r.specificity
        );
        if with_p {
            if i == 0 {
                let _ = write!(out, " {:>8} {:>8}", "-", "-");
            } else {
                let n = r.run_aucs.len();
                let plain = calibrated_t_test(&r.run_aucs, &reference.run_aucs, 0.0, (n as f64 - 1.0).max(1.0))?;
                let corr = calibrated_t_test(&r.run_aucs, &reference.run_aucs, rho, df)?;
                let _ = write!(out, " {:>8.4} {:>8.4}", plain.p_value, corr.p_value);
            }
        }
        out.push('\n');
    }
    if with_p {
        let _ = writeln!(
            out,
            "paired over runs against {}; corrected with rho={} df={}",
            reference.name, rho, df
        );
    }
    Ok(out)
}

const PRED_HEADER: [&str; 7] = ["run", "outer_fold", "subject_id", "eye", "instance", "label", "score"];

/// `run,outer_fold,subject_id,eye,instance,label,score` with label 1 = AD.
pub fn predictions_to_csv(preds: &[Prediction]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(PRED_HEADER).expect("in-memory write");
    for p in preds {
        w.write_record([
            p.run.to_string(),
            p.outer_fold.to_string(),
            p.subject_id.clone(),
            p.eye.to_string(),
            p.instance.to_string(),
            p.label.as_index().to_string(),
            p.score.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>, EvalError> {
    let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != PRED_HEADER {
        return Err(EvalError::Parse(format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let bad = |what: &str| EvalError::Parse(format!("row {}: bad {what}", i + 1));
        let label = match &row[5] {
            "1" => Label::Ad,
            "0" => Label::Cn,
            _ => return Err(bad("label")),
        };
        let score: f64 = row[6].parse().map_err(|_| bad("score"))?;
        if !(0.0..=1.0).contains(&score) {
            return Err(bad("score"));
        }
        out.push(Prediction {
            run: row[0].parse().map_err(|_| bad("run"))?,
            outer_fold: row[1].parse().map_err(|_| bad("outer_fold"))?,
            subject_id: row[2].to_string(),
            eye: row[3].parse().map_err(|_| bad("eye"))?,
            instance: row[4].parse().map_err(|_| bad("instance"))?,
            label,
            score,
        });
    }
    Ok(out)
}

pub fn write_predictions(path: impl AsRef<Path>, preds: &[Prediction]) -> Result<(), EvalError> {
    std::fs::write(path, predictions_to_csv(preds))?;
    Ok(())
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>, EvalError> {
    parse_predictions(&std::fs::read_to_string(path)?)
}
