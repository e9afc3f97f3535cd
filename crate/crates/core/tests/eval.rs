use octad_core::cohort::{plan_folds, FoldPlan};
use octad_core::eval::nested::check_plan;
use octad_core::eval::{
    auc, calibrated_t_test, confusion_metrics, inc_beta, ln_gamma, parse_predictions,
    predictions_to_csv, report_table, run_nested_cv, student_t_two_sided, threshold_metrics,
    EvalError, EvalItem, Learner, MetricsReport, NestedCvOptions, Prediction,
};
use octad_core::model::Sample;
use octad_core::phantom::Segmentation;
use octad_core::preprocess::Composite;
use octad_core::store::{Eye, Label, Manifest, Rng, Sex, SubjectRecord};
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};
use statrs::function::beta::beta_reg;

fn pred(label: Label, score: f64) -> Prediction {
    Prediction {
        run: 0,
        outer_fold: 0,
        subject_id: "S".into(),
        eye: Eye::L,
        instance: 0,
        label,
        score,
    }
}

fn preds(ad: &[f64], cn: &[f64]) -> Vec<Prediction> {
    ad.iter()
        .map(|&s| pred(Label::Ad, s))
        .chain(cn.iter().map(|&s| pred(Label::Cn, s)))
        .collect()
}

fn brute_force_auc(p: &[Prediction]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for a in p.iter().filter(|x| x.label == Label::Ad) {
        for c in p.iter().filter(|x| x.label == Label::Cn) {
            pairs += 1.0;
            if a.score > c.score {
                wins += 1.0;
            } else if a.score == c.score {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&preds(&[0.9, 0.8], &[0.1, 0.2])).unwrap(), 1.0);
    assert_eq!(auc(&preds(&[0.5, 0.5], &[0.5, 0.5, 0.5])).unwrap(), 0.5);
    assert_eq!(auc(&preds(&[0.9, 0.4], &[0.5, 0.3])).unwrap(), 0.75);
    assert!(matches!(
        auc(&preds(&[0.9, 0.4], &[])),
        Err(EvalError::SingleClass { n_ad: 2, n_cn: 0 })
    ));
}

#[test]
fn threshold_examples() {
    let all_right = threshold_metrics(&preds(&[0.9, 0.6], &[0.1, 0.4]), 0.5);
    assert_eq!(
        (all_right.f1, all_right.precision, all_right.sensitivity, all_right.specificity),
        (1.0, 1.0, 1.0, 1.0)
    );
    let all_cn = threshold_metrics(&preds(&[0.2, 0.1], &[0.1, 0.4]), 0.5);
    assert_eq!((all_cn.sensitivity, all_cn.specificity), (0.0, 1.0));
    assert!(all_cn.zero_denominator);

    let m = confusion_metrics(2, 1, 2, 1);
    for v in [m.precision, m.sensitivity, m.f1, m.specificity] {
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
    }
    assert!(!m.zero_denominator);
    // score exactly at the threshold counts as AD
    let edge = threshold_metrics(&preds(&[0.5], &[0.49]), 0.5);
    assert_eq!(edge.sensitivity, 1.0);
}

proptest! {
    #[test]
    fn auc_matches_pair_counting(
        scores in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
    ) {
        let p: Vec<Prediction> = scores
            .iter()
            .map(|&(s, ad)| pred(if ad { Label::Ad } else { Label::Cn }, s as f64 / 19.0))
            .collect();
        let n_ad = p.iter().filter(|x| x.label == Label::Ad).count();
        prop_assume!(n_ad > 0 && n_ad < p.len());
        prop_assert_eq!(auc(&p).unwrap(), brute_force_auc(&p));
    }

    #[test]
    fn auc_invariant_under_monotone_maps(
        scores in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..100)
    ) {
        let p: Vec<Prediction> = scores
            .iter()
            .map(|&(s, ad)| pred(if ad { Label::Ad } else { Label::Cn }, s))
            .collect();
        let n_ad = p.iter().filter(|x| x.label == Label::Ad).count();
        prop_assume!(n_ad > 0 && n_ad < p.len());
        let mapped: Vec<Prediction> = p
            .iter()
            .map(|x| Prediction { score: 1.0 / (1.0 + (-8.0 * x.score + 3.0).exp()), ..x.clone() })
            .collect();
        prop_assert_eq!(auc(&p).unwrap(), auc(&mapped).unwrap());
    }

    #[test]
    fn t_test_antisymmetric(
        a in prop::collection::vec(0.3f64..1.0, 5),
        b in prop::collection::vec(0.3f64..1.0, 5),
    ) {
        let ab = calibrated_t_test(&a, &b, 0.25, 4.0).unwrap();
        let ba = calibrated_t_test(&b, &a, 0.25, 4.0).unwrap();
        prop_assert!((ab.t_statistic + ba.t_statistic).abs() < 1e-12);
        prop_assert!((ab.p_value - ba.p_value).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }
}

/// Direct evaluation of the calibrated statistic.
fn direct_t(d: &[f64], rho: f64) -> f64 {
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    mean / ((1.0 / n + rho) * var).sqrt()
}

/// Closed-form Student-t CDF for 4 degrees of freedom.
fn t4_cdf(t: f64) -> f64 {
    let q = 1.0 + t * t / 4.0;
    0.5 + 0.375 * t / q.sqrt() * (1.0 - t * t / (12.0 * q))
}

#[test]
fn t_test_worked_example() {
    let d = [0.05, 0.02, -0.01, 0.04, 0.03];
    let b = [0.6; 5];
    let a: Vec<f64> = d.iter().zip(&b).map(|(x, y)| x + y).collect();
    let r = calibrated_t_test(&a, &b, 0.25, 4.0).unwrap();
    let d_exact: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let t = direct_t(&d_exact, 0.25);
    assert!((r.t_statistic - t).abs() < 1e-10);
    let p_closed = 2.0 * (1.0 - t4_cdf(t.abs()));
    assert!((r.p_value - p_closed).abs() < 1e-10, "{} vs {p_closed}", r.p_value);
    let oracle = StudentsT::new(0.0, 1.0, 4.0).unwrap();
    assert!((r.p_value - 2.0 * oracle.sf(t.abs())).abs() < 1e-10);
    assert_eq!((r.df, r.variance_correction, r.degenerate), (4.0, 0.25, false));
}

#[test]
fn t_test_reduces_to_paired_test() {
    let a = [0.71, 0.66, 0.74, 0.69, 0.70];
    let b = [0.65, 0.67, 0.70, 0.61, 0.66];
    let r = calibrated_t_test(&a, &b, 0.0, 4.0).unwrap();
    // ordinary paired t: mean(d) / (sd(d) / sqrt(n))
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let t = mean / (sd / n.sqrt());
    assert!((r.t_statistic - t).abs() < 1e-10);
    let oracle = StudentsT::new(0.0, 1.0, 4.0).unwrap();
    assert!((r.p_value - 2.0 * oracle.sf(t.abs())).abs() < 1e-10);
}

#[test]
fn t_test_degenerate_cases() {
    let a = [0.7, 0.6, 0.8, 0.65, 0.75];
    let same = calibrated_t_test(&a, &a, 0.25, 4.0).unwrap();
    assert_eq!((same.t_statistic, same.p_value, same.degenerate), (0.0, 1.0, false));

    let b: Vec<f64> = a.iter().map(|x| x - 0.1).collect();
    let shifted = calibrated_t_test(&a, &b, 0.25, 4.0).unwrap();
    assert!(shifted.degenerate);
    assert_eq!(shifted.p_value, 0.0);
    assert!(shifted.t_statistic.is_infinite() && shifted.t_statistic > 0.0);

    assert!(calibrated_t_test(&[0.5], &[0.4], 0.25, 4.0).is_err());
    assert!(calibrated_t_test(&[0.5, 0.6], &[0.4], 0.25, 4.0).is_err());
}

#[test]
fn special_functions_match_statrs() {
    let mut rng = Rng::new(77);
    for _ in 0..2000 {
        let a = rng.uniform(0.2, 30.0);
        let b = rng.uniform(0.2, 30.0);
        let x = rng.next_f64();
        let ours = inc_beta(a, b, x);
        let theirs = beta_reg(a, b, x);
        assert!((ours - theirs).abs() < 1e-10, "I_{x}({a}, {b}): {ours} vs {theirs}");
    }
    for df in [1.0, 2.0, 3.5, 4.0, 9.0, 30.0] {
        let oracle = StudentsT::new(0.0, 1.0, df).unwrap();
        for i in 0..200 {
            let t = i as f64 * 0.05;
            let p = student_t_two_sided(t, df);
            assert!((p - 2.0 * oracle.sf(t)).abs() < 1e-10, "df {df} t {t}");
        }
    }
    // ln Γ(n) = ln((n-1)!)
    let mut fact = 1.0_f64;
    for n in 1..20 {
        assert!((ln_gamma(n as f64) - fact.ln()).abs() < 1e-12);
        fact *= n as f64;
    }
    assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
}

#[test]
fn report_table_shapes() {
    let r = |name: &str, aucs: Vec<f64>| MetricsReport {
        name: name.into(),
        mean_auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
        std_auc: 0.01,
        run_aucs: aucs,
        f1: 0.5,
        precision: 0.5,
        sensitivity: 0.5,
        specificity: 0.5,
        zero_denominator: false,
    };
    let one = report_table(&[r("composite", vec![0.9; 5])], 0.25, 4.0).unwrap();
    assert_eq!(one.lines().count(), 2);
    assert!(!one.contains("corr. p"));

    let two = [
        r("composite", vec![0.90, 0.92, 0.88, 0.91, 0.93]),
        r("raw3", vec![0.70, 0.75, 0.71, 0.69, 0.74]),
    ];
    let text = report_table(&two, 0.25, 4.0).unwrap();
    assert!(text.lines().next().unwrap().contains("corr. p"));
    let row = text.lines().nth(2).unwrap();
    assert!(row.starts_with("raw3"));
    assert!(!row.trim_end().ends_with('-'));
    assert!(text.contains("rho=0.25 df=4"));
    assert_eq!(text, report_table(&two, 0.25, 4.0).unwrap());
    assert!(report_table(&[], 0.25, 4.0).is_err());
}

#[test]
fn predictions_csv_round_trip() {
    let p = vec![
        Prediction {
            run: 1,
            outer_fold: 3,
            subject_id: "S0007".into(),
            eye: Eye::R,
            instance: 1,
            label: Label::Ad,
            score: 0.123456789012345,
        },
        pred(Label::Cn, 0.0),
    ];
    let text = predictions_to_csv(&p);
    assert!(text.starts_with("run,outer_fold,subject_id,eye,instance,label,score\n"));
    assert!(text.contains("1,3,S0007,R,1,1,0.123456789012345"));
    assert_eq!(parse_predictions(&text).unwrap(), p);
    assert!(parse_predictions("run,fold\n").is_err());
    assert!(parse_predictions(&text.replace("0.123456789012345", "1.5")).is_err());
}

// ---- nested cross-validation with cheap learners ----

fn tiny_composite() -> Composite {
    let seg = Segmentation::flat(std::array::from_fn(|j| j as f64 * 0.1), 2);
    Composite::from_channels([vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]], 2, 2, seg)
}

/// A balanced cohort of `n_subjects` per class, some with both eyes.
fn cohort(n_subjects: usize, seed: u64) -> (Manifest, Vec<EvalItem>) {
    let mut rng = Rng::new(seed);
    let mut records = Vec::new();
    for i in 0..2 * n_subjects {
        let label = if i % 2 == 0 { Label::Ad } else { Label::Cn };
        let eyes: &[Eye] = if rng.bernoulli(0.5) { &[Eye::L, Eye::R] } else { &[Eye::L] };
        for &eye in eyes {
            records.push(SubjectRecord {
                subject_id: format!("S{i:03}"),
                eye,
                age: 60,
                sex: Sex::F,
                instance: 0,
                years_to_diagnosis: (label == Label::Ad).then_some(2.0),
                label,
                image_path: String::new(),
            });
        }
    }
    let items = records
        .iter()
        .map(|r| EvalItem {
            record: r.clone(),
            sample: Sample {
                composite: tiny_composite(),
                label: r.label,
                years_to_diagnosis: r.years_to_diagnosis,
            },
        })
        .collect();
    (Manifest::new(records).unwrap(), items)
}

/// Scores equal the label.
struct OracleLearner;

impl Learner for OracleLearner {
    type Model = ();
    fn fit(&self, _: &[&Sample], _: f64, _: &mut Rng) -> Result<(), EvalError> {
        Ok(())
    }
    fn predict(&self, _: &(), test: &[&Sample]) -> Result<Vec<f64>, EvalError> {
        Ok(test.iter().map(|s| s.label.as_index() as f64).collect())
    }
}

/// Uniform random scores from a seed drawn at fit time.
struct CoinLearner;

impl Learner for CoinLearner {
    type Model = u64;
    fn fit(&self, _: &[&Sample], _: f64, rng: &mut Rng) -> Result<u64, EvalError> {
        Ok(rand::RngCore::next_u64(rng))
    }
    fn predict(&self, seed: &u64, test: &[&Sample]) -> Result<Vec<f64>, EvalError> {
        let mut rng = Rng::new(*seed);
        Ok(test.iter().map(|_| rng.next_f64()).collect())
    }
}

/// Perfect at `good_lr`, random otherwise.
struct PickyLearner {
    good_lr: f64,
}

impl Learner for PickyLearner {
    type Model = (bool, u64);
    fn fit(&self, _: &[&Sample], lr: f64, rng: &mut Rng) -> Result<(bool, u64), EvalError> {
        Ok((lr == self.good_lr, rand::RngCore::next_u64(rng)))
    }
    fn predict(&self, m: &(bool, u64), test: &[&Sample]) -> Result<Vec<f64>, EvalError> {
        let mut rng = Rng::new(m.1);
        Ok(test
            .iter()
            .map(|s| if m.0 { s.label.as_index() as f64 } else { rng.next_f64() })
            .collect())
    }
}

fn options(grid: Vec<f64>, parallel: usize) -> NestedCvOptions {
    NestedCvOptions {
        name: "test".into(),
        lr_grid: grid,
        seed: 5,
        threshold: 0.5,
        parallel,
    }
}

fn plan_for(m: &Manifest, seed: u64) -> FoldPlan {
    plan_folds(m, 5, 5, 3, &mut Rng::new(seed)).unwrap()
}

#[test]
fn oracle_learner_scores_perfectly() {
    let (m, items) = cohort(20, 1);
    let plan = plan_for(&m, 2);
    let out = run_nested_cv(&plan, &items, &OracleLearner, &options(vec![1e-3, 1e-4], 1)).unwrap();
    assert_eq!(out.report.run_aucs.len(), 5);
    assert_eq!(out.report.mean_auc, 1.0);
    assert_eq!(out.report.std_auc, 0.0);
    // every scan predicted exactly once per run
    assert_eq!(out.predictions.len(), 5 * items.len());
    assert_eq!(out.folds.len(), 25);
    // all grid entries tie; the lowest rate wins
    assert!(out.folds.iter().all(|f| f.selected_lr == 1e-4));
}

#[test]
fn random_learner_is_near_chance() {
    let (m, items) = cohort(20, 3);
    let plan = plan_for(&m, 4);
    let out = run_nested_cv(&plan, &items, &CoinLearner, &options(vec![1e-3], 1)).unwrap();
    assert!((0.35..=0.65).contains(&out.report.mean_auc), "{}", out.report.mean_auc);
    assert!(out.folds.iter().all(|f| f.inner_aucs.is_empty()));
}

#[test]
fn inner_loop_finds_the_good_rate() {
    let (m, items) = cohort(20, 5);
    let plan = plan_for(&m, 6);
    let learner = PickyLearner { good_lr: 1e-4 };
    let out = run_nested_cv(&plan, &items, &learner, &options(vec![1e-3, 1e-4, 2.7e-5], 1)).unwrap();
    assert!(out.folds.iter().all(|f| f.selected_lr == 1e-4));
    assert!(out.folds.iter().all(|f| f.inner_aucs.len() == 3));
    assert_eq!(out.report.mean_auc, 1.0);
}

#[test]
fn parallel_matches_sequential() {
    let (m, items) = cohort(15, 7);
    let plan = plan_for(&m, 8);
    let seq = run_nested_cv(&plan, &items, &CoinLearner, &options(vec![1e-3, 1e-4], 1)).unwrap();
    let par = run_nested_cv(&plan, &items, &CoinLearner, &options(vec![1e-3, 1e-4], 4)).unwrap();
    assert_eq!(seq.predictions, par.predictions);
    assert_eq!(seq.report, par.report);
}

#[test]
fn leakage_aborts() {
    let (m, items) = cohort(15, 9);
    let mut plan = plan_for(&m, 10);
    let moved = plan.runs[2].outer[1][0].clone();
    plan.runs[2].inner[1][0].push(moved.clone());
    let err = run_nested_cv(&plan, &items, &OracleLearner, &options(vec![1e-3], 1)).unwrap_err();
    match err {
        EvalError::Leakage { subject_id, run, fold } => {
            assert_eq!((subject_id, run, fold), (moved, 2, 1));
        }
        other => panic!("expected leakage, got {other}"),
    }
}

#[test]
fn plans_never_leak() {
    for seed in 0..20 {
        let (m, _) = cohort(12, seed);
        let plan = plan_for(&m, seed + 100);
        check_plan(&plan).unwrap();
    }
}

#[test]
fn plan_must_match_data() {
    let (m, mut items) = cohort(15, 11);
    let plan = plan_for(&m, 12);
    let dropped = items[0].record.subject_id.clone();
    items.retain(|i| i.record.subject_id != dropped);
    assert!(matches!(
        run_nested_cv(&plan, &items, &OracleLearner, &options(vec![1e-3], 1)),
        Err(EvalError::PlanMismatch(_))
    ));
}

#[test]
fn report_from_predictions_groups_runs() {
    let mut p = Vec::new();
    for run in 0..3 {
        for (i, &(label, s)) in [(Label::Ad, 0.9), (Label::Cn, 0.2), (Label::Ad, 0.4), (Label::Cn, 0.5)]
            .iter()
            .enumerate()
        {
            p.push(Prediction {
                run,
                outer_fold: i % 2,
                subject_id: format!("S{i}"),
                eye: Eye::L,
                instance: 0,
                label,
                score: if run == 2 && i == 2 { 0.95 } else { s },
            });
        }
    }
    let r = MetricsReport::from_predictions("m", &p, 0.5).unwrap();
    assert_eq!(r.run_aucs, vec![0.75, 0.75, 1.0]);
    assert!((r.mean_auc - 2.5 / 3.0).abs() < 1e-15);
    let expected_sd = ((2.0 * (0.75f64 - 2.5 / 3.0).powi(2) + (1.0f64 - 2.5 / 3.0).powi(2)) / 2.0).sqrt();
    assert!((r.std_auc - expected_sd).abs() < 1e-15);
}
