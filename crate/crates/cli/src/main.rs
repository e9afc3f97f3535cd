//! `octad`: command-line driver for the OCT phantom pipeline.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use octad_core::cohort::{match_controls, select_ad, CohortSpec, FoldPlan};
use octad_core::eval::{
    calibrated_t_test, read_predictions, report_table, run_nested_cv, write_predictions,
    CnnLearner, EvalItem, MetricsReport,
};
use octad_core::explain::outcome_tag;
use octad_core::model::{load_params, save_params, train, Sample, TrainConfig};
use octad_core::phantom::write_cohort;
use octad_core::pipeline::{
    class_aggregates, composite_path, config_echo, explain_scans, generate_phantom_cohort,
    load_items, nested_options, plan_for, run_all, write_composite, FORMAT_VERSION,
};
use octad_core::preprocess::ChannelMode;
use octad_core::store::tensor::{write_tensor, TensorFile};
use octad_core::store::{streams, sub_seed, Manifest, Rng, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "octad", version, about = "Synthetic OCT early-AD pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key=value` run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Desk-scale profile: 64x64 inputs, 30 epochs, averaging from epoch 24
    #[arg(long)]
    fast: bool,
    /// Channel mode: composite, raw3, mask3 or contour3
    #[arg(long)]
    mode: Option<ChannelMode>,
    /// Saliency threshold
    #[arg(long)]
    tau: Option<f64>,
    /// Comma-separated learning-rate grid
    #[arg(long)]
    grid: Option<String>,
    /// Worker threads (default: number of outer folds)
    #[arg(long)]
    parallel: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom cohort (images and manifest.csv)
    Phantom {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rectify, strip, crop and assemble composites
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply the year cap, match controls and plan folds
    Cohort {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the outer-training subjects of one run and fold
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long, default_value_t = 0)]
        outer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Nested cross-validation over a fold plan
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrated paired t-test between two predictions files
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 2, required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Grad-CAM layer overlap for the test fold of one run and fold
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long, default_value_t = 0)]
        outer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics table for one or more predictions files
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full experiment: phantom, preprocessing, folds, training, evaluation, explanation
    RunAll {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Core(octad_core::Error),
}

impl From<octad_core::Error> for Failure {
    fn from(e: octad_core::Error) -> Self {
        Failure::Core(e)
    }
}

macro_rules! core_err {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::Core(e.into())
            }
        }
    )*};
}

core_err!(
    std::io::Error,
    octad_core::store::ConfigError,
    octad_core::store::ManifestError,
    octad_core::store::TensorError,
    octad_core::phantom::PhantomError,
    octad_core::cohort::CohortError,
    octad_core::model::ModelError,
    octad_core::eval::EvalError,
    octad_core::explain::ExplainError
);

type Result<T> = std::result::Result<T, Failure>;

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let base = if c.fast { RunConfig::fast() } else { RunConfig::default() };
    let mut cfg = match &c.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            base.merge_text(&text)?
        }
        None => base,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(m) = c.mode {
        cfg.channel_mode = m;
    }
    if let Some(t) = c.tau {
        cfg.threshold_saliency = t;
    }
    if let Some(g) = &c.grid {
        cfg.set("lr_grid", g)?;
    }
    cfg.validate()?;
    info!("format {FORMAT_VERSION}, seed {}", cfg.seed);
    for line in cfg.to_text().lines() {
        info!("config {line}");
    }
    Ok(cfg)
}

fn parallelism(c: &Common, cfg: &RunConfig) -> usize {
    c.parallel.unwrap_or(cfg.n_outer)
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("manifest {} not found", path.display())));
    }
    Ok(Manifest::read(path)?)
}

fn read_plan(path: &Path) -> Result<FoldPlan> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read plan {}: {e}", path.display())))?;
    Ok(FoldPlan::parse(&text)?)
}

fn check_fold(plan: &FoldPlan, run: usize, outer: usize) -> Result<()> {
    if run >= plan.runs.len() || outer >= plan.n_outer() {
        return Err(Failure::Usage(format!(
            "run {run} / outer fold {outer} not in plan ({} runs x {} folds)",
            plan.runs.len(),
            plan.n_outer()
        )));
    }
    Ok(())
}

fn select<'a>(items: &'a [EvalItem], subjects: &[String]) -> Vec<&'a EvalItem> {
    items
        .iter()
        .filter(|it| subjects.binary_search(&it.record.subject_id).is_ok())
        .collect()
}

fn load_reports(paths: &[PathBuf], threshold: f64) -> Result<Vec<MetricsReport>> {
    paths
        .iter()
        .map(|p| {
            let preds = read_predictions(p)?;
            let name = p
                .parent()
                .and_then(|d| d.file_name())
                .or_else(|| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(MetricsReport::from_predictions(&name, &preds, threshold)?)
        })
        .collect()
}

fn emit(text: &str, out: Option<&Path>, file: &str) -> Result<()> {
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(file), text)?;
    }
    Ok(())
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Phantom { common, out } => {
            let cfg = resolve_config(&common)?;
            let cohort = generate_phantom_cohort(&cfg)?;
            let m = write_cohort(&out, &cohort)?;
            info!("wrote {} scans to {}", m.len(), out.display());
        }
        Command::Preprocess { common, manifest, out } => {
            let cfg = resolve_config(&common)?;
            let m = read_manifest(&manifest)?;
            let items = load_items(&manifest, &m, &cfg)?;
            fs::create_dir_all(out.join("composites"))?;
            for it in &items {
                write_composite(&composite_path(&out, &it.record), &it.sample.composite)?;
            }
            info!("wrote {} composites ({})", items.len(), cfg.channel_mode);
        }
        Command::Cohort { common, manifest, out } => {
            let cfg = resolve_config(&common)?;
            let m = read_manifest(&manifest)?;
            let spec = CohortSpec {
                year_cap: cfg.year_cap,
                match_seed: sub_seed(cfg.seed, streams::COHORT, 0),
                ..CohortSpec::default()
            };
            let capped = select_ad(&m, &spec)?;
            let matched = match_controls(&capped, &spec, &mut Rng::new(spec.match_seed))?;
            let mut cohort = matched.manifest;
            // image paths stay valid relative to the new manifest
            let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
            let base = fs::canonicalize(&base).unwrap_or(base);
            for r in &mut cohort.records {
                r.image_path = base.join(&r.image_path).display().to_string();
            }
            fs::create_dir_all(&out)?;
            cohort.write(out.join("manifest.csv"))?;
            let plan = plan_for(&cohort, &cfg)?;
            fs::write(out.join("plan.txt"), plan.to_text())?;
            let mut log = String::from("ad_subject,control_subject,age_tolerance\n");
            for (a, c, t) in &matched.pairs {
                let _ = writeln!(log, "{a},{c},{t}");
            }
            fs::write(out.join("matching.csv"), log)?;
            info!("{} matched pairs, {} warnings", matched.pairs.len(), matched.warnings.len());
        }
        Command::Train { common, manifest, plan, run, outer, out } => {
            let cfg = resolve_config(&common)?;
            let m = read_manifest(&manifest)?;
            let plan = read_plan(&plan)?;
            check_fold(&plan, run, outer)?;
            let items = load_items(&manifest, &m, &cfg)?;
            let train_items = select(&items, &plan.runs[run].train_subjects(outer));
            let samples: Vec<&Sample> = train_items.iter().map(|it| &it.sample).collect();
            let fold = (run * plan.n_outer() + outer) as u64;
            let mut rng = Rng::new(sub_seed(sub_seed(cfg.seed, streams::TRAIN, fold), streams::TRAIN, 0));
            let params = train(&TrainConfig::from_run(&cfg, cfg.learning_rate), &samples, &mut rng)?;
            save_params(&params, &out)?;
            info!("trained on {} scans, saved to {}", samples.len(), out.display());
        }
        Command::Evaluate { common, manifest, plan, out } => {
            let cfg = resolve_config(&common)?;
            let m = read_manifest(&manifest)?;
            let plan = read_plan(&plan)?;
            let items = load_items(&manifest, &m, &cfg)?;
            let learner = CnnLearner { config: cfg.clone() };
            let cv = run_nested_cv(&plan, &items, &learner, &nested_options(&cfg, parallelism(&common, &cfg)))?;
            fs::create_dir_all(&out)?;
            write_predictions(out.join("predictions.csv"), &cv.predictions)?;
            let mut text = config_echo(&cfg);
            text.push_str(&report_table(&[cv.report], cfg.ttest_rho, cfg.effective_df())?);
            emit(&text, Some(&out), "report.txt")?;
        }
        Command::Compare { common, reports, out } => {
            let cfg = resolve_config(&common)?;
            let r = load_reports(&reports, 0.5)?;
            let t = calibrated_t_test(&r[1].run_aucs, &r[0].run_aucs, cfg.ttest_rho, cfg.effective_df())?;
            let mut text = report_table(&r, cfg.ttest_rho, cfg.effective_df())?;
            let _ = writeln!(
                text,
                "t={:.6} p={:.6} df={} rho={}{}",
                t.t_statistic,
                t.p_value,
                t.df,
                t.variance_correction,
                if t.degenerate { " (zero variance)" } else { "" }
            );
            emit(&text, out.as_deref(), "comparison.txt")?;
        }
        Command::Explain { common, manifest, plan, params, run, outer, out } => {
            let cfg = resolve_config(&common)?;
            let m = read_manifest(&manifest)?;
            let plan = read_plan(&plan)?;
            check_fold(&plan, run, outer)?;
            let p = load_params(&params)?;
            let items = load_items(&manifest, &m, &cfg)?;
            let test = select(&items, plan.runs[run].test_subjects(outer));
            let learner = CnnLearner { config: cfg.clone() };
            let samples: Vec<&Sample> = test.iter().map(|it| &it.sample).collect();
            let scores = octad_core::eval::Learner::predict(&learner, &p, &samples)?;
            let inputs: Vec<_> = test.iter().zip(&scores).map(|(it, &s)| (&p, *it, s)).collect();
            let ex = explain_scans(&inputs, &cfg)?;
            fs::create_dir_all(out.join("saliency"))?;
            for ((it, map), scan) in test.iter().zip(&ex.maps).zip(&ex.scans) {
                let name = format!(
                    "{}_{}_{}_{}.oct",
                    it.record.subject_id,
                    it.record.eye,
                    it.record.instance,
                    outcome_tag(scan.label, scan.predicted)
                );
                let t = TensorFile::from_f32(vec![map.height, map.width], map.values.clone())?;
                write_tensor(out.join("saliency").join(name), &t)?;
            }
            for (label, agg) in ["CN", "AD"].iter().zip(class_aggregates(&ex, cfg.top_percent)?) {
                if let Some(agg) = agg {
                    let t = TensorFile::from_f32(vec![cfg.image_size, cfg.image_size], agg)?;
                    write_tensor(out.join(format!("saliency_top_{label}.oct")), &t)?;
                }
            }
            let mut text = config_echo(&cfg);
            let _ = writeln!(text, "# tau={} run={run} outer={outer}", cfg.threshold_saliency);
            text.push_str(&ex.table.to_text());
            emit(&text, Some(&out), "overlaps.txt")?;
        }
        Command::Report { common, reports, out } => {
            let cfg = resolve_config(&common)?;
            let r = load_reports(&reports, 0.5)?;
            let text = report_table(&r, cfg.ttest_rho, cfg.effective_df())?;
            emit(&text, out.as_deref(), "report.txt")?;
        }
        Command::RunAll { common, out } => {
            let cfg = resolve_config(&common)?;
            let outcome = run_all(&cfg, &out, parallelism(&common, &cfg))?;
            print!("{}", report_table(&[outcome.report], cfg.ttest_rho, cfg.effective_df())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun `octad --help` for usage.");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
