use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
n_ad=10
n_cn=16
n_runs=2
n_outer=3
n_inner=2
epochs=2
swa_start_epoch=1
lr_grid=0.001
";

fn octad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octad"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("run octad")
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.cfg");
    fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(octad(&["--help"]).status.code(), Some(0));
    assert_eq!(octad(&["--version"]).status.code(), Some(0));
    let help = String::from_utf8_lossy(&octad(&["--help"]).stdout).into_owned();
    for verb in ["phantom", "preprocess", "cohort", "train", "evaluate", "compare", "explain", "report", "run-all"] {
        assert!(help.contains(verb), "{verb} missing from help");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(octad(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(octad(&["run-all"]).status.code(), Some(1));
    assert_eq!(octad(&["evaluate", "--mode", "rgb", "--manifest", "m", "--plan", "p", "--out", "o"]).status.code(), Some(1));
}

#[test]
fn missing_manifest_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = octad(&[
        "evaluate",
        "--manifest",
        &s(&dir.path().join("nope.csv")),
        "--plan",
        &s(&dir.path().join("plan.txt")),
        "--out",
        &s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(err.contains("not found") && err.contains("--help"), "{err}");
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "learning_rat=0.1\n").unwrap();
    let out = octad(&["phantom", "--config", &s(&cfg), "--out", &s(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rat"));

    fs::write(&cfg, "swa_start_epoch=500\n").unwrap();
    let out = octad(&["phantom", "--config", &s(&cfg), "--out", &s(&dir.path().join("p"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn malformed_plan_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let ph = d.join("phantom");
    assert!(octad(&["phantom", "--fast", "--config", &cfg, "--out", &s(&ph)]).status.success());
    let plan = d.join("plan.txt");
    fs::write(&plan, "run,outer_fold,subject_id,assignment\n0,0,S1\n").unwrap();
    let out = octad(&[
        "evaluate", "--fast", "--config", &cfg,
        "--manifest", &s(&ph.join("manifest.csv")),
        "--plan", &s(&plan),
        "--out", &s(&d.join("e")),
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
}

#[test]
fn verbs_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let common = ["--fast", "--config", cfg.as_str()];
    let run = |verb: &str, extra: &[&str]| {
        let mut args = vec![verb];
        args.extend_from_slice(&common);
        args.extend_from_slice(extra);
        let o = octad(&args);
        assert!(o.status.success(), "{verb}: {}", stderr(&o));
        o
    };

    let ph = d.join("phantom");
    run("phantom", &["--out", &s(&ph)]);
    assert!(ph.join("manifest.csv").is_file());

    let co = d.join("cohort");
    run("cohort", &["--manifest", &s(&ph.join("manifest.csv")), "--out", &s(&co)]);
    let manifest = s(&co.join("manifest.csv"));
    let plan = s(&co.join("plan.txt"));
    assert!(fs::read_to_string(co.join("matching.csv")).unwrap().lines().count() > 1);

    let pre = d.join("pre");
    run("preprocess", &["--manifest", &manifest, "--out", &s(&pre)]);
    assert!(fs::read_dir(pre.join("composites")).unwrap().count() > 0);

    let params = d.join("params");
    run("train", &["--manifest", &manifest, "--plan", &plan, "--run", "1", "--outer", "2", "--out", &s(&params)]);
    assert!(params.join("index.txt").is_file());

    let ex = d.join("explain");
    run("explain", &[
        "--manifest", &manifest, "--plan", &plan, "--params", &s(&params),
        "--run", "1", "--outer", "2", "--tau", "0.7", "--out", &s(&ex),
    ]);
    let overlaps = fs::read_to_string(ex.join("overlaps.txt")).unwrap();
    assert!(overlaps.contains("IS/OSJ") && overlaps.contains("Macula") && overlaps.contains("tau=0.7"));
    assert!(fs::read_dir(ex.join("saliency")).unwrap().count() > 0);

    let bad_fold = octad(&[
        "explain", "--fast", "--config", &cfg, "--manifest", &manifest, "--plan", &plan,
        "--params", &s(&params), "--run", "7", "--out", &s(&ex),
    ]);
    assert_eq!(bad_fold.status.code(), Some(1));

    let (ea, eb) = (d.join("eval_a"), d.join("eval_b"));
    run("evaluate", &["--manifest", &manifest, "--plan", &plan, "--out", &s(&ea)]);
    run("evaluate", &["--manifest", &manifest, "--plan", &plan, "--mode", "raw3", "--seed", "9", "--out", &s(&eb)]);
    let report = fs::read_to_string(ea.join("report.txt")).unwrap();
    assert!(report.contains("mAUC") && report.contains("format=OCT1"));

    let pa = s(&ea.join("predictions.csv"));
    let pb = s(&eb.join("predictions.csv"));
    let o = run("report", &["--reports", &pa, &pb]);
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(table.contains("eval_a") && table.contains("eval_b") && table.contains("corr. p"), "{table}");

    let o = run("compare", &["--reports", &pa, &pb]);
    let cmp = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(cmp.contains("p=") && cmp.contains("df=1"), "{cmp}");
}

#[test]
fn run_all_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let (a, b) = (d.join("a"), d.join("b"));
    for (out, par) in [(&a, "1"), (&b, "3")] {
        let o = octad(&["run-all", "--fast", "--config", &cfg, "--parallel", par, "--out", &s(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["predictions.csv", "report.txt", "overlaps.txt", "manifest.csv", "plan.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = d.join("c");
    let o = octad(&["run-all", "--fast", "--config", &cfg, "--seed", "77", "--out", &s(&c)]);
    assert!(o.status.success());
    assert_ne!(fs::read(a.join("predictions.csv")).unwrap(), fs::read(c.join("predictions.csv")).unwrap());
}
