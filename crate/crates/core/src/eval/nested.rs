//! Repeated nested cross-validation over a subject-level fold plan.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use rayon::prelude::*;

use super::{auc_scores, EvalError, MetricsReport, Prediction};
use crate::cohort::{FoldPlan, RunPlan};
use crate::model::{predict_proba, train, ParamSet, Sample, TrainConfig};
use crate::preprocess::Composite;
use crate::store::manifest::SubjectRecord;
use crate::store::{streams, sub_seed, Rng, RunConfig};

/// A scan with its manifest row.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub record: SubjectRecord,
    pub sample: Sample,
}

/// Something that can be fitted at a learning rate and then score scans.
pub trait Learner: Sync {
    type Model: Send;

    fn fit(&self, train: &[&Sample], lr: f64, rng: &mut Rng) -> Result<Self::Model, EvalError>;

    /// AD probabilities in `[0, 1]`, evaluation mode (no augmentation).
    fn predict(&self, model: &Self::Model, test: &[&Sample]) -> Result<Vec<f64>, EvalError>;
}

/// The convolutional classifier trained with the run configuration.
pub struct CnnLearner {
    pub config: RunConfig,
}

const PREDICT_CHUNK: usize = 16;

impl Learner for CnnLearner {
    type Model = ParamSet;

    fn fit(&self, samples: &[&Sample], lr: f64, rng: &mut Rng) -> Result<ParamSet, EvalError> {
        Ok(train(&TrainConfig::from_run(&self.config, lr), samples, rng)?)
    }

    fn predict(&self, model: &ParamSet, test: &[&Sample]) -> Result<Vec<f64>, EvalError> {
        let mut out = Vec::with_capacity(test.len());
        for chunk in test.chunks(PREDICT_CHUNK) {
            let comps: Vec<&Composite> = chunk.iter().map(|s| &s.composite).collect();
            out.extend(predict_proba(model, &comps)?);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct NestedCvOptions {
    pub name: String,
    pub lr_grid: Vec<f64>,
    pub seed: u64,
    pub threshold: f64,
    /// Worker threads; 0 or 1 runs sequentially. Results do not depend on it.
    pub parallel: usize,
}

#[derive(Debug)]
pub struct FoldResult<M> {
    pub run: usize,
    pub fold: usize,
    pub selected_lr: f64,
    /// Mean inner-fold AUC per grid entry; empty when the grid has one entry.
    pub inner_aucs: Vec<(f64, f64)>,
    pub model: M,
    /// Held-out predictions of this fold.
    pub predictions: Vec<Prediction>,
}

#[derive(Debug)]
pub struct NestedCvOutcome<M> {
    pub report: MetricsReport,
    /// Ordered by (run, fold, subject, eye, instance).
    pub predictions: Vec<Prediction>,
    pub folds: Vec<FoldResult<M>>,
}

/// Checks that every fold of every run keeps test subjects out of
/// training and that inner folds partition the outer-training subjects.
pub fn check_plan(plan: &FoldPlan) -> Result<(), EvalError> {
    for (r, run) in plan.runs.iter().enumerate() {
        check_run(run, r)?;
    }
    Ok(())
}

fn check_run(run: &RunPlan, r: usize) -> Result<(), EvalError> {
    let mut seen = BTreeSet::new();
    for fold in &run.outer {
        for s in fold {
            if !seen.insert(s) {
                return Err(EvalError::PlanMismatch(format!(
                    "subject {s} appears in two outer folds of run {r}"
                )));
            }
        }
    }
    if run.inner.len() != run.outer.len() {
        return Err(EvalError::PlanMismatch(format!("run {r}: inner/outer fold counts differ")));
    }
    for k in 0..run.outer.len() {
        let test: BTreeSet<&String> = run.outer[k].iter().collect();
        let train: BTreeSet<String> = run.train_subjects(k).into_iter().collect();
        if let Some(s) = train.iter().find(|s| test.contains(s)) {
            return Err(EvalError::Leakage {
                subject_id: s.clone(),
                run: r,
                fold: k,
            });
        }
        let mut inner = BTreeSet::new();
        for f in &run.inner[k] {
            for s in f {
                if test.contains(s) {
                    return Err(EvalError::Leakage {
                        subject_id: s.clone(),
                        run: r,
                        fold: k,
                    });
                }
                if !inner.insert(s.clone()) {
                    return Err(EvalError::PlanMismatch(format!(
                        "subject {s} in two inner folds (run {r}, fold {k})"
                    )));
                }
            }
        }
        if inner != train {
            return Err(EvalError::PlanMismatch(format!(
                "inner folds of run {r} fold {k} do not cover its training subjects"
            )));
        }
    }
    Ok(())
}

fn gather<'a>(
    subjects: &[String],
    index: &BTreeMap<&str, Vec<usize>>,
    items: &'a [EvalItem],
) -> Vec<&'a EvalItem> {
    subjects
        .iter()
        .flat_map(|s| index.get(s.as_str()).into_iter().flatten())
        .map(|&i| &items[i])
        .collect()
}

fn samples<'a>(items: &[&'a EvalItem]) -> Vec<&'a Sample> {
    items.iter().map(|i| &i.sample).collect()
}

fn fold_auc<L: Learner>(
    learner: &L,
    train: &[&EvalItem],
    test: &[&EvalItem],
    lr: f64,
    rng: &mut Rng,
) -> Result<f64, EvalError> {
    let model = learner.fit(&samples(train), lr, rng)?;
    let scores = learner.predict(&model, &samples(test))?;
    let scored: Vec<(f64, bool)> = scores
        .iter()
        .zip(test)
        .map(|(&s, it)| (s, it.record.label == crate::store::Label::Ad))
        .collect();
    auc_scores(&scored)
}

#[allow(clippy::too_many_arguments)]
fn run_fold<L: Learner>(
    learner: &L,
    plan: &FoldPlan,
    r: usize,
    k: usize,
    index: &BTreeMap<&str, Vec<usize>>,
    items: &[EvalItem],
    opts: &NestedCvOptions,
) -> Result<FoldResult<L::Model>, EvalError> {
    let run = &plan.runs[r];
    let fold_seed = sub_seed(opts.seed, streams::TRAIN, (r * plan.n_outer() + k) as u64);
    let test = gather(run.test_subjects(k), index, items);
    let train_ids = run.train_subjects(k);
    let train = gather(&train_ids, index, items);
    let test_ids: BTreeSet<&str> = run.test_subjects(k).iter().map(String::as_str).collect();
    if let Some(it) = train.iter().find(|it| test_ids.contains(it.record.subject_id.as_str())) {
        return Err(EvalError::Leakage {
            subject_id: it.record.subject_id.clone(),
            run: r,
            fold: k,
        });
    }

    let mut inner_aucs = Vec::new();
    let selected_lr = if opts.lr_grid.len() == 1 {
        opts.lr_grid[0]
    } else {
        let inner = &run.inner[k];
        for (g, &lr) in opts.lr_grid.iter().enumerate() {
            let mut total = 0.0;
            for j in 0..inner.len() {
                let inner_train_ids: Vec<String> = inner
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != j)
                    .flat_map(|(_, f)| f.iter().cloned())
                    .collect();
                let inner_train = gather(&inner_train_ids, index, items);
                let inner_test = gather(&inner[j], index, items);
                let stream = 1 + (g * inner.len() + j) as u64;
                let mut rng = Rng::new(sub_seed(fold_seed, streams::TRAIN, stream));
                total += fold_auc(learner, &inner_train, &inner_test, lr, &mut rng)?;
            }
            inner_aucs.push((lr, total / inner.len() as f64));
        }
        // highest mean AUC, ties to the lowest rate
        let mut best = inner_aucs[0];
        for &(lr, a) in &inner_aucs[1..] {
            if a > best.1 || (a == best.1 && lr < best.0) {
                best = (lr, a);
            }
        }
        best.0
    };

    let mut rng = Rng::new(sub_seed(fold_seed, streams::TRAIN, 0));
    let model = learner.fit(&samples(&train), selected_lr, &mut rng)?;
    let scores = learner.predict(&model, &samples(&test))?;
    let mut predictions = Vec::with_capacity(test.len());
    for (it, score) in test.iter().zip(scores) {
        if !(0.0..=1.0).contains(&score) {
            return Err(EvalError::Invalid(format!("score {score} outside [0, 1]")));
        }
        predictions.push(Prediction {
            run: r,
            outer_fold: k,
            subject_id: it.record.subject_id.clone(),
            eye: it.record.eye,
            instance: it.record.instance,
            label: it.record.label,
            score,
        });
    }
    info!(
        "{}: run {r} fold {k} lr {selected_lr} ({} train, {} test)",
        opts.name,
        train.len(),
        test.len()
    );
    Ok(FoldResult {
        run: r,
        fold: k,
        selected_lr,
        inner_aucs,
        model,
        predictions,
    })
}

/// For each run and outer fold: pick the learning rate with the best mean
/// inner-fold AUC, retrain on the whole outer-training set, score the
/// held-out fold. Held-out folds are pooled per run.
pub fn run_nested_cv<L: Learner>(
    plan: &FoldPlan,
    items: &[EvalItem],
    learner: &L,
    opts: &NestedCvOptions,
) -> Result<NestedCvOutcome<L::Model>, EvalError> {
    if opts.lr_grid.is_empty() {
        return Err(EvalError::Invalid("empty learning-rate grid".into()));
    }
    if plan.runs.is_empty() {
        return Err(EvalError::Invalid("plan has no runs".into()));
    }
    check_plan(plan)?;
    let mut index: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        index.entry(it.record.subject_id.as_str()).or_default().push(i);
    }
    for (r, run) in plan.runs.iter().enumerate() {
        let planned: BTreeSet<&str> = run.outer.iter().flatten().map(String::as_str).collect();
        let present: BTreeSet<&str> = index.keys().copied().collect();
        if planned != present {
            let missing = planned.symmetric_difference(&present).next().copied().unwrap_or("");
            return Err(EvalError::PlanMismatch(format!(
                "run {r}: subject {missing} is in only one of plan and data"
            )));
        }
    }

    let tasks: Vec<(usize, usize)> = (0..plan.runs.len())
        .flat_map(|r| (0..plan.runs[r].outer.len()).map(move |k| (r, k)))
        .collect();
    let work = |&(r, k): &(usize, usize)| run_fold(learner, plan, r, k, &index, items, opts);
    let results: Vec<Result<FoldResult<L::Model>, EvalError>> = if opts.parallel > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .map_err(|e| EvalError::Invalid(format!("thread pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(work).collect())
    } else {
        tasks.iter().map(work).collect()
    };
    let folds = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut predictions: Vec<Prediction> = folds.iter().flat_map(|f| f.predictions.clone()).collect();
    predictions.sort_by(|a, b| {
        (a.run, a.outer_fold, &a.subject_id, a.eye, a.instance)
            .cmp(&(b.run, b.outer_fold, &b.subject_id, b.eye, b.instance))
    });
    let report = MetricsReport::from_predictions(&opts.name, &predictions, opts.threshold)?;
    Ok(NestedCvOutcome {
        report,
        predictions,
        folds,
    })
}
