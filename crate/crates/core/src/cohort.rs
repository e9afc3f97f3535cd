//! Cohort curation and subject-level fold planning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::store::manifest::{Label, Manifest, ManifestError, Sex, SubjectRecord};
use crate::store::{streams, sub_seed, Rng};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("no AD scans remain after applying the {year_cap}-year cap")]
    EmptyCohort { year_cap: f64 },
    #[error("no eligible control for AD subject {subject_id} (sex {sex}, instance {instance}, age {age}) within {max_tolerance} years")]
    Unmatched {
        subject_id: String,
        sex: Sex,
        instance: u8,
        age: u32,
        max_tolerance: u32,
    },
    #[error("infeasible split: {0}")]
    InfeasibleSplit(String),
    #[error("subject {0} has scans with different labels")]
    MixedLabels(String),
    #[error("fold plan parse error on line {line}: {message}")]
    PlanParse { line: usize, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSpec {
    pub year_cap: f64,
    /// Starting age tolerance; escalates one year at a time up to
    /// `max_age_tolerance`.
    pub age_tolerance: u32,
    pub max_age_tolerance: u32,
    pub match_seed: u64,
    /// Controls selected per AD subject.
    pub controls_per_case: usize,
}

impl Default for CohortSpec {
    fn default() -> Self {
        Self {
            year_cap: 4.0,
            age_tolerance: 0,
            max_age_tolerance: 2,
            match_seed: 0,
            controls_per_case: 1,
        }
    }
}

impl CohortSpec {
    /// Parses `key=value` lines with keys `year_cap`, `age_tolerance`,
    /// `max_age_tolerance`, `match_seed`, `controls_per_case`.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut spec = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
            let v = v.trim();
            let bad = |e: &dyn std::fmt::Display| format!("line {}: {}: {e}", i + 1, k.trim());
            match k.trim() {
                "year_cap" => spec.year_cap = v.parse().map_err(|e| bad(&e))?,
                "age_tolerance" => spec.age_tolerance = v.parse().map_err(|e| bad(&e))?,
                "max_age_tolerance" => spec.max_age_tolerance = v.parse().map_err(|e| bad(&e))?,
                "match_seed" => spec.match_seed = v.parse().map_err(|e| bad(&e))?,
                "controls_per_case" => spec.controls_per_case = v.parse().map_err(|e| bad(&e))?,
                other => return Err(format!("line {}: unknown key `{other}`", i + 1)),
            }
        }
        if !(spec.year_cap > 0.0) {
            return Err("year_cap must be positive".into());
        }
        Ok(spec)
    }
}

/// Keeps AD scans with `years_to_diagnosis <= year_cap`; controls pass
/// through.
pub fn select_ad(m: &Manifest, spec: &CohortSpec) -> Result<Manifest, CohortError> {
    let records: Vec<SubjectRecord> = m
        .records
        .iter()
        .filter(|r| match (r.label, r.years_to_diagnosis) {
            (Label::Ad, Some(y)) => y <= spec.year_cap,
            _ => true,
        })
        .cloned()
        .collect();
    if !records.iter().any(|r| r.label == Label::Ad) {
        return Err(CohortError::EmptyCohort {
            year_cap: spec.year_cap,
        });
    }
    Ok(Manifest::new(records)?)
}

/// Demographics used for matching: taken from the subject's first row in
/// (eye, instance) order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectInfo {
    pub subject_id: String,
    pub label: Label,
    pub age: u32,
    pub sex: Sex,
    pub instance: u8,
    pub n_scans: usize,
}

/// One entry per subject, sorted by subject id.
pub fn subjects(m: &Manifest) -> Result<Vec<SubjectInfo>, CohortError> {
    let mut grouped: BTreeMap<&str, Vec<&SubjectRecord>> = BTreeMap::new();
    for r in &m.records {
        grouped.entry(&r.subject_id).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(id, mut rows)| {
            rows.sort_by_key(|r| (r.eye, r.instance));
            if rows.iter().any(|r| r.label != rows[0].label) {
                return Err(CohortError::MixedLabels(id.to_string()));
            }
            Ok(SubjectInfo {
                subject_id: id.to_string(),
                label: rows[0].label,
                age: rows[0].age,
                sex: rows[0].sex,
                instance: rows[0].instance,
                n_scans: rows.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MatchedCohort {
    pub manifest: Manifest,
    /// `(ad_subject, control_subject, tolerance_used)`.
    pub pairs: Vec<(String, String, u32)>,
    pub warnings: Vec<String>,
}

/// Selects `controls_per_case` distinct CN subjects per AD subject with the
/// same sex and instance and an age within the (escalating) tolerance,
/// uniformly at random among the eligible.
pub fn match_controls(
    m: &Manifest,
    spec: &CohortSpec,
    rng: &mut Rng,
) -> Result<MatchedCohort, CohortError> {
    let all = subjects(m)?;
    let cases: Vec<&SubjectInfo> = all.iter().filter(|s| s.label == Label::Ad).collect();
    let mut pool: Vec<&SubjectInfo> = all.iter().filter(|s| s.label == Label::Cn).collect();
    let mut pairs = Vec::new();
    let mut warnings = Vec::new();

    for case in &cases {
        for _ in 0..spec.controls_per_case {
            let mut chosen = None;
            for tol in spec.age_tolerance..=spec.max_age_tolerance.max(spec.age_tolerance) {
                let eligible: Vec<usize> = pool
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| {
                        c.sex == case.sex
                            && c.instance == case.instance
                            && c.age.abs_diff(case.age) <= tol
                    })
                    .map(|(i, _)| i)
                    .collect();
                if !eligible.is_empty() {
                    if tol > spec.age_tolerance {
                        let msg = format!(
                            "subject {}: age tolerance escalated to {tol} years",
                            case.subject_id
                        );
                        log::warn!("{msg}");
                        warnings.push(msg);
                    }
                    chosen = Some((eligible[rng.below(eligible.len())], tol));
                    break;
                }
            }
            let (idx, tol) = chosen.ok_or_else(|| CohortError::Unmatched {
                subject_id: case.subject_id.clone(),
                sex: case.sex,
                instance: case.instance,
                age: case.age,
                max_tolerance: spec.max_age_tolerance,
            })?;
            let control = pool.remove(idx);
            pairs.push((case.subject_id.clone(), control.subject_id.clone(), tol));
        }
    }

    let keep: BTreeSet<&str> = cases
        .iter()
        .map(|c| c.subject_id.as_str())
        .chain(pairs.iter().map(|p| p.1.as_str()))
        .collect();
    let records = m
        .records
        .iter()
        .filter(|r| keep.contains(r.subject_id.as_str()))
        .cloned()
        .collect();
    Ok(MatchedCohort {
        manifest: Manifest::new(records)?,
        pairs,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunPlan {
    /// Subject ids of each outer fold, sorted.
    pub outer: Vec<Vec<String>>,
    /// `inner[k]` partitions the subjects outside outer fold `k`.
    pub inner: Vec<Vec<Vec<String>>>,
}

impl RunPlan {
    pub fn test_subjects(&self, k: usize) -> &[String] {
        &self.outer[k]
    }

    /// Subjects outside outer fold `k`, sorted.
    pub fn train_subjects(&self, k: usize) -> Vec<String> {
        let mut out: Vec<String> = self
            .outer
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != k)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        out.sort();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    /// Run `r` was split with `Rng::new(sub_seed(seed, streams::FOLDS, r))`.
    pub seed: u64,
    pub runs: Vec<RunPlan>,
}

impl FoldPlan {
    pub fn n_outer(&self) -> usize {
        self.runs.first().map_or(0, |r| r.outer.len())
    }

    /// Text form: a `# seed=` comment, a header, then one line per
    /// (run, outer fold, subject) with the subject's inner fold or `TEST`.
    pub fn to_text(&self) -> String {
        let mut out = format!("# seed={}\nrun,outer_fold,subject_id,assignment\n", self.seed);
        for (r, run) in self.runs.iter().enumerate() {
            for k in 0..run.outer.len() {
                let mut lines: Vec<(String, String)> = run.outer[k]
                    .iter()
                    .map(|s| (s.clone(), "TEST".to_string()))
                    .collect();
                for (j, fold) in run.inner[k].iter().enumerate() {
                    lines.extend(fold.iter().map(|s| (s.clone(), j.to_string())));
                }
                lines.sort();
                for (s, a) in lines {
                    let _ = writeln!(out, "{r},{k},{s},{a}");
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CohortError> {
        let mut seed = 0;
        // run -> outer -> (tests, inner -> subjects)
        let mut acc: BTreeMap<usize, BTreeMap<usize, (Vec<String>, BTreeMap<usize, Vec<String>>)>> =
            BTreeMap::new();
        let mut header_seen = false;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            let err = |message: String| CohortError::PlanParse { line: i + 1, message };
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed=") {
                    seed = v.parse().map_err(|_| err(format!("bad seed `{v}`")))?;
                }
                continue;
            }
            if !header_seen {
                if line != "run,outer_fold,subject_id,assignment" {
                    return Err(err(format!("unexpected header `{line}`")));
                }
                header_seen = true;
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 4 {
                return Err(err("expected 4 fields".into()));
            }
            let run: usize = parts[0].parse().map_err(|_| err("bad run".into()))?;
            let outer: usize = parts[1].parse().map_err(|_| err("bad outer fold".into()))?;
            let entry = acc.entry(run).or_default().entry(outer).or_default();
            match parts[3] {
                "TEST" => entry.0.push(parts[2].to_string()),
                j => {
                    let j: usize = j.parse().map_err(|_| err(format!("bad assignment `{j}`")))?;
                    entry.1.entry(j).or_default().push(parts[2].to_string());
                }
            }
        }
        let runs = acc
            .into_values()
            .map(|folds| {
                let mut outer = Vec::new();
                let mut inner = Vec::new();
                for (mut tests, inners) in folds.into_values() {
                    tests.sort();
                    outer.push(tests);
                    inner.push(
                        inners
                            .into_values()
                            .map(|mut v| {
                                v.sort();
                                v
                            })
                            .collect(),
                    );
                }
                RunPlan { outer, inner }
            })
            .collect();
        Ok(FoldPlan { seed, runs })
    }
}

/// Deals `ids` round-robin into `n` folds starting at fold `start`.
fn deal(ids: &[String], n: usize, start: usize, folds: &mut [Vec<String>]) {
    for (i, id) in ids.iter().enumerate() {
        folds[(start + i) % n].push(id.clone());
    }
}

/// Label-stratified split of `ids` into `n` folds.
fn stratified_split(
    ad: &[String],
    cn: &[String],
    n: usize,
    rng: &mut Rng,
) -> Vec<Vec<String>> {
    let ad = rng.shuffled(ad);
    let cn = rng.shuffled(cn);
    let mut folds = vec![Vec::new(); n];
    deal(&ad, n, 0, &mut folds);
    deal(&cn, n, ad.len() % n, &mut folds);
    folds.iter_mut().for_each(|f| f.sort());
    folds
}

/// Repeated stratified subject-level nested splits. Subjects are sorted by
/// id before shuffling, so the result does not depend on row order.
pub fn plan_folds(
    m: &Manifest,
    n_runs: usize,
    n_outer: usize,
    n_inner: usize,
    rng: &mut Rng,
) -> Result<FoldPlan, CohortError> {
    if n_outer < 2 || n_inner < 2 || n_runs == 0 {
        return Err(CohortError::InfeasibleSplit(format!(
            "need n_runs >= 1, n_outer >= 2, n_inner >= 2 (got {n_runs}, {n_outer}, {n_inner})"
        )));
    }
    let subs = subjects(m)?;
    let ad: Vec<String> = subs.iter().filter(|s| s.label == Label::Ad).map(|s| s.subject_id.clone()).collect();
    let cn: Vec<String> = subs.iter().filter(|s| s.label == Label::Cn).map(|s| s.subject_id.clone()).collect();
    let min_class = ad.len().min(cn.len());
    if min_class < n_outer {
        return Err(CohortError::InfeasibleSplit(format!(
            "{} AD and {} CN subjects cannot fill {n_outer} outer folds",
            ad.len(),
            cn.len()
        )));
    }
    // smallest outer-training class count must fill the inner folds
    if min_class - min_class.div_ceil(n_outer) < n_inner {
        return Err(CohortError::InfeasibleSplit(format!(
            "too few subjects per class for {n_inner} inner folds"
        )));
    }
    let label_of: HashMap<&str, Label> = subs.iter().map(|s| (s.subject_id.as_str(), s.label)).collect();
    let seed = rand::RngCore::next_u64(rng);
    let mut runs = Vec::with_capacity(n_runs);
    for r in 0..n_runs {
        let mut run_rng = Rng::new(sub_seed(seed, streams::FOLDS, r as u64));
        let outer = stratified_split(&ad, &cn, n_outer, &mut run_rng);
        let mut inner = Vec::with_capacity(n_outer);
        for k in 0..n_outer {
            let (tr_ad, tr_cn): (Vec<String>, Vec<String>) = outer
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != k)
                .flat_map(|(_, f)| f.iter().cloned())
                .partition(|s| label_of[s.as_str()] == Label::Ad);
            let mut tr_ad = tr_ad;
            let mut tr_cn = tr_cn;
            tr_ad.sort();
            tr_cn.sort();
            inner.push(stratified_split(&tr_ad, &tr_cn, n_inner, &mut run_rng));
        }
        runs.push(RunPlan { outer, inner });
    }
    Ok(FoldPlan { seed, runs })
}
