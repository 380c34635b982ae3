//! End-to-end tests driving the installed binary: the full pipeline from
//! corpus generation through evaluation, exit-code contracts, config
//! precedence, report schemas, and determinism across --jobs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_distilkit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn distilkit")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "expected success for {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_code(args: &[&str], code: i32) -> String {
    let out = run(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "expected exit {code} for {args:?}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stderr).unwrap()
}

fn p(path: &Path) -> String {
    path.to_str().unwrap().to_string()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Generates a manifest, initializes a small model, and trains it enough to
/// act as a teacher for downstream commands. Returns (manifest, checkpoint).
fn trained_fixture(dir: &Path, count: usize, steps: &str) -> (PathBuf, PathBuf) {
    let manifest = dir.join("train.jsonl");
    let init = dir.join("init.dwtk");
    let model = dir.join("model.dwtk");
    run_ok(&["gen-manifest", "--out", &p(&manifest), "--count", &count.to_string(), "--seed", "5"]);
    run_ok(&[
        "init-model",
        "--out",
        &p(&init),
        "--seed",
        "3",
        "--enc-layers",
        "1",
        "--dec-layers",
        "2",
    ]);
    run_ok(&[
        "pretrain",
        "--manifest",
        &p(&manifest),
        "--model",
        &p(&init),
        "--out",
        &p(&model),
        "--steps",
        steps,
        "--peak-lr",
        "0.01",
    ]);
    (manifest, model)
}

#[test]
fn full_pipeline_runs_and_reports_parse() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (manifest, teacher) = trained_fixture(d, 24, "120");

    let pseudo = d.join("pseudo.jsonl");
    run_ok(&[
        "pseudo-label",
        "--manifest",
        &p(&manifest),
        "--model",
        &p(&teacher),
        "--out",
        &p(&pseudo),
    ]);
    for line in std::fs::read_to_string(&pseudo).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v.get("pseudo_text").is_some(), "pseudo field missing: {line}");
        assert!(v["pl_wer"].as_f64().unwrap() >= 0.0);
    }

    let kept = d.join("kept.jsonl");
    let freport = d.join("filter.csv");
    run_ok(&[
        "filter",
        "--manifest",
        &p(&pseudo),
        "--lambda",
        "100",
        "--out",
        &p(&kept),
        "--report",
        &p(&freport),
    ]);
    let fjson = read_json(&freport.with_extension("json"));
    assert_eq!(fjson["rows"][0]["lambda"], 100.0);

    let student = d.join("student.dwtk");
    let loss_log = d.join("loss.csv");
    run_ok(&[
        "distill",
        "--manifest",
        &p(&kept),
        "--teacher",
        &p(&teacher),
        "--out",
        &p(&student),
        "--dec-layers",
        "2",
        "--steps",
        "40",
        "--warmup-steps",
        "10",
        "--loss-log",
        &p(&loss_log),
    ]);
    let log = std::fs::read_to_string(&loss_log).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "# schema=distilkit.v1");
    assert_eq!(lines.next().unwrap(), "step,lr,ce,pl,kl,mse,total,grad_norm");
    assert_eq!(log.lines().count(), 2 + 40);

    let report = d.join("eval.csv");
    let stdout = run_ok(&[
        "eval",
        "--model",
        &p(&student),
        "--id-manifest",
        &p(&manifest),
        "--report",
        &p(&report),
    ]);
    assert!(stdout.starts_with("# schema=distilkit.v1"));
    let ejson = read_json(&report.with_extension("json"));
    assert_eq!(ejson["schema"], "distilkit.v1");
    let rows = ejson["rows"].as_array().unwrap();
    assert!(rows.iter().any(|r| r["split"] == "aggregate" && r["dataset"] == "overall"));
    for row in rows {
        let wer = row["wer"].as_f64().unwrap();
        let sum = row["ier"].as_f64().unwrap()
            + row["ser"].as_f64().unwrap()
            + row["der"].as_f64().unwrap();
        assert!((wer - sum).abs() < 1e-12);
    }

    // Atomicity: no temp files left anywhere in the work dir.
    for entry in std::fs::read_dir(d).unwrap() {
        let name = entry.unwrap().file_name();
        assert!(!name.to_string_lossy().ends_with(".tmp"), "leftover {name:?}");
    }
}

#[test]
fn validation_failures_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // Unknown flag: clap usage error.
    run_code(&["eval", "--frobnicate"], 2);

    // Bad flag combination.
    let out = d.join("m.jsonl");
    let err = run_code(
        &["gen-manifest", "--out", &p(&out), "--count", "4", "--vocab", "32"],
        2,
    );
    assert!(err.contains("features-dir"), "unexpected: {err}");

    // Manifest entry with both a task and a features path.
    let bad = d.join("bad.jsonl");
    std::fs::write(
        &bad,
        "{\"id\":\"x\",\"text\":\"t2\",\"features\":\"x.dwft\",\"task\":{\"kind\":\"copy\",\"seed\":1,\"len\":1}}\n",
    )
    .unwrap();
    let init = d.join("i.dwtk");
    run_ok(&["init-model", "--out", &p(&init), "--seed", "1", "--width", "16", "--heads", "2"]);
    let err = run_code(
        &["pseudo-label", "--manifest", &p(&bad), "--model", &p(&init), "--out", &p(&out)],
        2,
    );
    assert!(err.contains("both features and task"), "unexpected: {err}");

    // Corrupt checkpoint magic.
    let junk = d.join("junk.dwtk");
    std::fs::write(&junk, b"NOTME\x00\x00\x00\x00").unwrap();
    let good = d.join("g.jsonl");
    run_ok(&["gen-manifest", "--out", &p(&good), "--count", "2", "--seed", "1"]);
    let err = run_code(
        &["pseudo-label", "--manifest", &p(&good), "--model", &p(&junk), "--out", &p(&out)],
        2,
    );
    assert!(err.contains("magic"), "unexpected: {err}");

    // Invalid loss weight.
    let err = run_code(
        &[
            "pretrain",
            "--manifest",
            &p(&good),
            "--model",
            &p(&init),
            "--out",
            &p(&out),
            "--peak-lr=-1",
        ],
        2,
    );
    assert!(err.contains("peak_lr"), "unexpected: {err}");
}

#[test]
fn missing_input_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ghost = dir.path().join("nope.jsonl");
    let out = dir.path().join("o.jsonl");
    let init = dir.path().join("i.dwtk");
    run_ok(&["init-model", "--out", &p(&init), "--seed", "1", "--width", "16", "--heads", "2"]);
    run_code(
        &["pseudo-label", "--manifest", &p(&ghost), "--model", &p(&init), "--out", &p(&out)],
        1,
    );
}

#[test]
fn config_file_flag_precedence_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = d.join("m.jsonl");
    run_ok(&["gen-manifest", "--out", &p(&manifest), "--count", "4", "--seed", "2"]);
    let init = d.join("i.dwtk");
    run_ok(&["init-model", "--out", &p(&init), "--seed", "1", "--enc-layers", "1", "--dec-layers", "2"]);

    let cfg = d.join("run.cfg");
    std::fs::write(&cfg, "steps = 7\npeak_lr = 0.005\n# comment\nbatch_size = 2\nwarmup_steps = 2\n").unwrap();

    // File value used when no flag; flag wins when both given.
    let out = d.join("a.dwtk");
    let stdout = run_ok(&[
        "pretrain",
        "--manifest",
        &p(&manifest),
        "--model",
        &p(&init),
        "--out",
        &p(&out),
        "--config",
        &p(&cfg),
        "--steps",
        "9",
    ]);
    let summary: serde_json::Value = serde_json::from_str(stdout.lines().last().unwrap()).unwrap();
    assert_eq!(summary["config"]["steps"], 9);
    assert_eq!(summary["config"]["peak_lr"], 0.005);
    assert_eq!(summary["config"]["batch_size"], 2);
    assert_eq!(summary["steps_run"], 9);

    // Unknown and duplicate keys are validation errors.
    std::fs::write(&cfg, "stepz = 7\n").unwrap();
    let err = run_code(
        &[
            "pretrain",
            "--manifest",
            &p(&manifest),
            "--model",
            &p(&init),
            "--out",
            &p(&out),
            "--config",
            &p(&cfg),
        ],
        2,
    );
    assert!(err.contains("stepz"), "unexpected: {err}");
    std::fs::write(&cfg, "steps = 7\nsteps = 8\n").unwrap();
    let err = run_code(
        &[
            "pretrain",
            "--manifest",
            &p(&manifest),
            "--model",
            &p(&init),
            "--out",
            &p(&out),
            "--config",
            &p(&cfg),
        ],
        2,
    );
    assert!(err.contains("duplicate"), "unexpected: {err}");
}

#[test]
fn pseudo_label_deterministic_across_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (manifest, model) = trained_fixture(d, 16, "60");
    let out1 = d.join("p1.jsonl");
    let out4 = d.join("p4.jsonl");
    run_ok(&[
        "pseudo-label",
        "--manifest",
        &p(&manifest),
        "--model",
        &p(&model),
        "--out",
        &p(&out1),
        "--jobs",
        "1",
    ]);
    run_ok(&[
        "pseudo-label",
        "--manifest",
        &p(&manifest),
        "--model",
        &p(&model),
        "--out",
        &p(&out4),
        "--jobs",
        "4",
    ]);
    assert_eq!(std::fs::read(&out1).unwrap(), std::fs::read(&out4).unwrap());
}

#[test]
fn eval_metrics_invariant_across_jobs_and_hyps_recompute() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (manifest, model) = trained_fixture(d, 16, "60");
    let mut reports = Vec::new();
    for jobs in ["1", "4"] {
        let report = d.join(format!("e{jobs}.csv"));
        let hyps = d.join(format!("h{jobs}.jsonl"));
        run_ok(&[
            "eval",
            "--model",
            &p(&model),
            "--id-manifest",
            &p(&manifest),
            "--report",
            &p(&report),
            "--dump-hyps",
            &p(&hyps),
            "--jobs",
            jobs,
        ]);
        reports.push((read_json(&report.with_extension("json")), hyps));
    }
    // Hypotheses are byte-identical; metric columns match (timings may not).
    assert_eq!(
        std::fs::read(&reports[0].1).unwrap(),
        std::fs::read(&reports[1].1).unwrap()
    );
    for (a, b) in reports[0].0["rows"]
        .as_array()
        .unwrap()
        .iter()
        .zip(reports[1].0["rows"].as_array().unwrap())
    {
        for col in ["dataset", "split", "samples", "wer", "ier", "ser", "der", "dup5"] {
            assert_eq!(a[col], b[col], "column {col}");
        }
    }

    // Dumped hypotheses recompute to the reported corpus WER.
    let mut errors = 0usize;
    let mut ref_words = 0usize;
    for line in std::fs::read_to_string(&reports[0].1).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let r = v["ref"].as_str().unwrap();
        let h = v["hyp"].as_str().unwrap();
        let rn: Vec<String> = r.split_whitespace().map(str::to_string).collect();
        let hn: Vec<String> = h.split_whitespace().map(str::to_string).collect();
        let counts = distilkit_core::metrics::align(&rn, &hn);
        errors += counts.distance();
        ref_words += counts.ref_len;
    }
    let reported = reports[0].0["rows"][0]["wer"].as_f64().unwrap();
    let recomputed = errors as f64 / ref_words as f64;
    assert!((reported - recomputed).abs() < 1e-12, "{reported} vs {recomputed}");
}

#[test]
fn custom_geometry_needs_feature_files_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = d.join("m.jsonl");
    run_ok(&[
        "gen-manifest",
        "--out",
        &p(&manifest),
        "--count",
        "6",
        "--seed",
        "9",
        "--features-dir",
        "feats",
        "--vocab",
        "32",
        "--width",
        "16",
    ]);
    assert!(d.join("feats").is_dir());
    for line in std::fs::read_to_string(&manifest).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let rel = v["features"].as_str().expect("features path");
        assert!(d.join(rel).is_file(), "missing feature file {rel}");
    }

    let init = d.join("i.dwtk");
    run_ok(&[
        "init-model",
        "--out",
        &p(&init),
        "--seed",
        "4",
        "--width",
        "16",
        "--heads",
        "2",
        "--vocab",
        "32",
    ]);
    let report = d.join("e.csv");
    run_ok(&["eval", "--model", &p(&init), "--id-manifest", &p(&manifest), "--report", &p(&report)]);
    let rows = read_json(&report.with_extension("json"));
    assert_eq!(rows["rows"][0]["samples"], 6);
}

#[test]
fn specdec_bench_reports_identity_and_noise_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (manifest, teacher) = trained_fixture(d, 12, "120");

    // Distill a small assistant so the bench has two distinct models.
    let assistant = d.join("asst.dwtk");
    let pseudo = d.join("ps.jsonl");
    run_ok(&[
        "pseudo-label",
        "--manifest",
        &p(&manifest),
        "--model",
        &p(&teacher),
        "--out",
        &p(&pseudo),
    ]);
    run_ok(&[
        "distill",
        "--manifest",
        &p(&pseudo),
        "--teacher",
        &p(&teacher),
        "--out",
        &p(&assistant),
        "--dec-layers",
        "2",
        "--steps",
        "40",
        "--warmup-steps",
        "10",
    ]);

    let report = d.join("sd.csv");
    run_ok(&[
        "specdec-bench",
        "--main",
        &p(&teacher),
        "--assistant",
        &p(&assistant),
        "--manifest",
        &p(&manifest),
        "--report",
        &p(&report),
        "--reps",
        "5",
        "--batch-sizes",
        "1,4",
    ]);
    let sd = read_json(&report.with_extension("json"));
    let rows = sd["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(row["identical"], true);
        assert_eq!(row["baseline"], "main-greedy-sequential");
        assert!(row["relative_latency"].as_f64().unwrap() > 0.0);
        assert!(row["acceptance_rate"].as_f64().unwrap() <= 1.0);
    }

    // Noise sweep's no-noise row equals a plain eval.
    let nreport = d.join("noise.csv");
    run_ok(&[
        "noise-sweep",
        "--manifest",
        &p(&manifest),
        "--model",
        &p(&teacher),
        "--snrs",
        "inf,0",
        "--report",
        &p(&nreport),
    ]);
    let ereport = d.join("ev.csv");
    run_ok(&["eval", "--model", &p(&teacher), "--id-manifest", &p(&manifest), "--report", &p(&ereport)]);
    let noise = read_json(&nreport.with_extension("json"));
    let eval = read_json(&ereport.with_extension("json"));
    let inf_row = &noise["rows"][0];
    assert_eq!(inf_row["snr_db"], "inf");
    assert_eq!(inf_row["wer"], eval["rows"][0]["wer"]);
}

#[test]
fn sweep_reports_parse_back() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (manifest, teacher) = trained_fixture(d, 12, "120");
    let pseudo = d.join("ps.jsonl");
    run_ok(&[
        "pseudo-label",
        "--manifest",
        &p(&manifest),
        "--model",
        &p(&teacher),
        "--out",
        &p(&pseudo),
    ]);
    let report = d.join("sw.csv");
    run_ok(&[
        "sweep",
        "--kind",
        "threshold",
        "--manifest",
        &p(&pseudo),
        "--teacher",
        &p(&teacher),
        "--eval-manifest",
        &p(&manifest),
        "--lambdas",
        "100,10",
        "--steps",
        "20",
        "--warmup-steps",
        "5",
        "--report",
        &p(&report),
    ]);
    let sw = read_json(&report.with_extension("json"));
    let rows = sw["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["lambda"], 100.0);
    assert_eq!(rows[1]["lambda"], 10.0);
    for row in rows {
        assert!(row["wer"].as_f64().is_some());
        assert!(row["train_samples"].as_u64().unwrap() <= 12);
    }
    assert_eq!(sw["config"]["settings"]["steps"], 20);
}
