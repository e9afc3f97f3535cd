//! End-to-end experiment: phantom cohort, preprocessing, fold planning,
//! nested cross-validation and Grad-CAM overlap.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::cohort::{plan_folds, select_ad, CohortSpec, FoldPlan};
use crate::eval::{
    report_table, run_nested_cv, write_predictions, CnnLearner, EvalItem, MetricsReport,
    NestedCvOptions, Prediction,
};
use crate::explain::{
    aggregate_top, class_overlap_table, grad_cam, layer_regions, overlap_counts, threshold_mask,
    ClassOverlapTable, ExplainedScan, SaliencyMap,
};
use crate::model::{ParamSet, Sample};
use crate::phantom::{generate_cohort, BScan, CohortScan, PhantomSpec, SignalMode};
use crate::preprocess::{preprocess, Composite};
use crate::store::tensor::{write_tensor, TensorFile, TensorError};
use crate::store::{streams, Label, Manifest, Rng, RunConfig, SubjectRecord};
use crate::Error;

/// Tensor file format revision written by this crate.
pub const FORMAT_VERSION: &str = "OCT1";

/// Phantom anatomy and class signal for a run configuration.
pub fn phantom_template(cfg: &RunConfig) -> PhantomSpec {
    let mut spec = PhantomSpec::with_geometry(cfg.phantom_height(), cfg.image_size);
    let p = &cfg.phantom;
    spec.speckle_sigma = p.speckle_sigma;
    spec.subfield_halfwidth = cfg.subfield_halfwidth;
    spec.signal.thinning_fraction = p.thinning_fraction;
    spec.signal.target_layer = p.target_layer;
    spec.signal.region = p.region;
    spec.signal.mode = p.signal_mode;
    if p.geometry_only {
        // the neighbour absorbs the thinning and shares the target's
        // intensity, so pixel statistics carry no class information
        spec.signal.mode = SignalMode::Compensated;
        let k = p.target_layer;
        if k + 1 < spec.layer_base_intensity.len() {
            spec.layer_base_intensity[k + 1] = spec.layer_base_intensity[k];
        }
    }
    spec
}

pub fn generate_phantom_cohort(cfg: &RunConfig) -> Result<Vec<CohortScan>, Error> {
    let template = phantom_template(cfg);
    let mut rng = Rng::for_stream(cfg.seed, streams::PHANTOM);
    Ok(generate_cohort(cfg.n_ad, cfg.n_cn, &template, cfg.year_cap, &mut rng)?)
}

fn item(record: SubjectRecord, composite: Composite) -> EvalItem {
    EvalItem {
        sample: Sample {
            composite,
            label: record.label,
            years_to_diagnosis: record.years_to_diagnosis,
        },
        record,
    }
}

pub fn preprocess_scan(scan: &BScan, cfg: &RunConfig) -> Result<Composite, Error> {
    Ok(preprocess(scan, cfg.image_size, cfg.channel_mode, &cfg.mask_gains)?)
}

/// Loads and preprocesses every scan of a manifest; image paths resolve
/// against the manifest's directory.
pub fn load_items(manifest_path: &Path, manifest: &Manifest, cfg: &RunConfig) -> Result<Vec<EvalItem>, Error> {
    let base = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest
        .records
        .iter()
        .map(|r| {
            let scan = BScan::load(base.join(&r.image_path))?;
            Ok(item(r.clone(), preprocess_scan(&scan, cfg)?))
        })
        .collect()
}

/// Composite file for a manifest row: `composites/<image stem>.oct`.
pub fn composite_path(out: &Path, record: &SubjectRecord) -> PathBuf {
    let stem = Path::new(&record.image_path)
        .file_name()
        .map(|s| s.to_owned())
        .unwrap_or_default();
    out.join("composites").join(stem)
}

pub fn write_composite(path: &Path, c: &Composite) -> Result<(), TensorError> {
    write_tensor(path, &c.to_tensor())?;
    write_tensor(crate::phantom::seg_path(path), &c.contours.to_tensor())
}

pub fn plan_for(manifest: &Manifest, cfg: &RunConfig) -> Result<FoldPlan, Error> {
    let mut rng = Rng::for_stream(cfg.seed, streams::FOLDS);
    Ok(plan_folds(manifest, cfg.n_runs, cfg.n_outer, cfg.n_inner, &mut rng)?)
}

pub fn nested_options(cfg: &RunConfig, parallel: usize) -> NestedCvOptions {
    NestedCvOptions {
        name: cfg.channel_mode.to_string(),
        lr_grid: cfg.lr_grid.clone(),
        seed: cfg.seed,
        threshold: 0.5,
        parallel,
    }
}

/// Grad-CAM overlap of each scan against its own class.
#[derive(Debug, Clone)]
pub struct ExplainOutcome {
    pub scans: Vec<ExplainedScan>,
    pub maps: Vec<SaliencyMap>,
    pub table: ClassOverlapTable,
}

pub fn explain_scans(
    params: &[(&ParamSet, &EvalItem, f64)],
    cfg: &RunConfig,
) -> Result<ExplainOutcome, Error> {
    let mut scans = Vec::with_capacity(params.len());
    let mut maps = Vec::with_capacity(params.len());
    for &(p, it, score) in params {
        let c = &it.sample.composite;
        let map = grad_cam(p, c, it.record.label.as_index())?;
        let regions = layer_regions(&c.contours, c.height, c.width, cfg.subfield_halfwidth)?;
        let mask = threshold_mask(&map, cfg.threshold_saliency);
        scans.push(ExplainedScan {
            label: it.record.label,
            predicted: if score >= 0.5 { Label::Ad } else { Label::Cn },
            counts: overlap_counts(&mask, &regions)?,
        });
        maps.push(map);
    }
    let table = class_overlap_table(&scans, cfg.overlap_pooled);
    Ok(ExplainOutcome { scans, maps, table })
}

/// Top-percent aggregate per class as `(cn, ad)`; a class without maps
/// yields `None`.
pub fn class_aggregates(out: &ExplainOutcome, percent: f64) -> Result<[Option<Vec<f32>>; 2], Error> {
    let mut res = [None, None];
    for label in [Label::Cn, Label::Ad] {
        let sel: Vec<&SaliencyMap> = out
            .scans
            .iter()
            .zip(&out.maps)
            .filter(|(s, _)| s.label == label)
            .map(|(_, m)| m)
            .collect();
        if !sel.is_empty() {
            res[label.as_index()] = Some(aggregate_top(&sel, percent)?);
        }
    }
    Ok(res)
}

#[derive(Debug)]
pub struct RunAllOutcome {
    pub report: MetricsReport,
    pub predictions: Vec<Prediction>,
    pub overlaps: ClassOverlapTable,
    pub report_text: String,
    pub overlaps_text: String,
}

/// Header shared by text outputs: format revision, seed and the full
/// configuration.
pub fn config_echo(cfg: &RunConfig) -> String {
    let mut out = format!("# format={FORMAT_VERSION} seed={}\n", cfg.seed);
    for line in cfg.to_text().lines() {
        let _ = writeln!(out, "# {line}");
    }
    out
}

/// Runs the whole experiment and writes `report.txt`, `predictions.csv`,
/// `overlaps.txt`, plus `manifest.csv`, `plan.txt` and per-class saliency
/// aggregates under `out`.
pub fn run_all(cfg: &RunConfig, out: &Path, parallel: usize) -> Result<RunAllOutcome, Error> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    info!("generating {} AD + {} CN phantom scans", cfg.n_ad, cfg.n_cn);
    let cohort = generate_phantom_cohort(cfg)?;
    let manifest = Manifest::new(cohort.iter().map(|c| c.record.clone()).collect())?;
    let spec = CohortSpec {
        year_cap: cfg.year_cap,
        ..CohortSpec::default()
    };
    let manifest = select_ad(&manifest, &spec)?;
    manifest.write(out.join("manifest.csv"))?;

    let items: Vec<EvalItem> = cohort
        .iter()
        .filter(|c| manifest.records.iter().any(|r| r.key() == c.record.key()))
        .map(|c| Ok(item(c.record.clone(), preprocess_scan(&c.scan, cfg)?)))
        .collect::<Result<_, Error>>()?;

    let plan = plan_for(&manifest, cfg)?;
    fs::write(out.join("plan.txt"), plan.to_text())?;

    let learner = CnnLearner { config: cfg.clone() };
    let cv = run_nested_cv(&plan, &items, &learner, &nested_options(cfg, parallel))?;
    write_predictions(out.join("predictions.csv"), &cv.predictions)?;

    // every scan is held out exactly once in the first run
    let mut explained = Vec::new();
    for fold in cv.folds.iter().filter(|f| f.run == 0) {
        for p in &fold.predictions {
            let it = items
                .iter()
                .find(|it| {
                    it.record.subject_id == p.subject_id
                        && it.record.eye == p.eye
                        && it.record.instance == p.instance
                })
                .expect("prediction refers to a loaded scan");
            explained.push((&fold.model, it, p.score));
        }
    }
    let ex = explain_scans(&explained, cfg)?;
    for (label, agg) in [Label::Cn, Label::Ad].iter().zip(class_aggregates(&ex, cfg.top_percent)?) {
        if let Some(agg) = agg {
            let t = TensorFile::from_f32(vec![cfg.image_size, cfg.image_size], agg)?;
            write_tensor(out.join(format!("saliency_top_{label}.oct")), &t)?;
        }
    }

    let mut report_text = config_echo(cfg);
    report_text.push_str(&report_table(std::slice::from_ref(&cv.report), cfg.ttest_rho, cfg.effective_df())?);
    let aucs: Vec<String> = cv.report.run_aucs.iter().map(|a| format!("{a:.6}")).collect();
    let _ = writeln!(report_text, "run AUCs: {}", aucs.join(" "));
    for f in &cv.folds {
        let _ = writeln!(report_text, "run {} fold {}: lr {}", f.run, f.fold, f.selected_lr);
    }
    if cv.report.zero_denominator {
        report_text.push_str("note: some threshold metrics had zero denominators and are reported as 0\n");
    }
    fs::write(out.join("report.txt"), &report_text)?;

    let mut overlaps_text = config_echo(cfg);
    let _ = writeln!(overlaps_text, "# tau={} explained run=0", cfg.threshold_saliency);
    overlaps_text.push_str(&ex.table.to_text());
    fs::write(out.join("overlaps.txt"), &overlaps_text)?;

    Ok(RunAllOutcome {
        report: cv.report,
        predictions: cv.predictions,
        overlaps: ex.table,
        report_text,
        overlaps_text,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_only_template_hides_intensity_signal() {
        let mut cfg = RunConfig::fast();
        cfg.phantom.geometry_only = true;
        let spec = phantom_template(&cfg);
        let k = cfg.phantom.target_layer;
        assert_eq!(spec.signal.mode, SignalMode::Compensated);
        assert_eq!(spec.layer_base_intensity[k], spec.layer_base_intensity[k + 1]);
        assert_eq!((spec.height, spec.width), (81, 64));
        assert_eq!(spec.signal.thinning_fraction, 0.4);
    }

    #[test]
    fn echo_is_commented_config() {
        let cfg = RunConfig::default();
        let echo = config_echo(&cfg);
        assert!(echo.starts_with("# format=OCT1 seed=2024\n"));
        assert!(echo.lines().all(|l| l.starts_with("# ")));
        let body: String = echo.lines().skip(1).map(|l| format!("{}\n", &l[2..])).collect();
        assert_eq!(RunConfig::parse(&body).unwrap(), cfg);
    }

    #[test]
    fn composite_paths_follow_image_names() {
        let r = SubjectRecord {
            subject_id: "S1".into(),
            eye: crate::store::Eye::L,
            age: 60,
            sex: crate::store::Sex::F,
            instance: 0,
            years_to_diagnosis: None,
            label: Label::Cn,
            image_path: "images/S1_L_0.oct".into(),
        };
        assert_eq!(composite_path(Path::new("out"), &r), Path::new("out/composites/S1_L_0.oct"));
    }
}
