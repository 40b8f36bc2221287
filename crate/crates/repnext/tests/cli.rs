//! End-to-end tests of the installed binary: every subcommand, both output
//! formats, and the exit-code contract (0 success, 1 verification/data
//! failure, 2 usage/config error).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use repnext::model::weights::{load_tensor, save_tensor};
use repnext::model::ModelConfig;
use repnext::tensor::{max_abs_diff, Shape, SplitMix64, Tensor};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_repnext"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is UTF-8")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is UTF-8")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Writes the small all-features config used across these tests and
/// returns its path.
fn tiny_config_file(dir: &Path) -> PathBuf {
    let mut config = ModelConfig::preset("m1").unwrap();
    config.variant = "tiny".to_string();
    config.stage_widths = [8, 8, 16, 16];
    config.stage_depths = [1, 1, 2, 1];
    config.classes = 10;
    let path = dir.join("tiny.json");
    config.save_file(&path).unwrap();
    path
}

#[test]
fn trace_prints_stage_pyramid() {
    let out = run(&["trace", "--preset", "m1"]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout_of(&out);
    assert!(text.contains("stage 1: (48, 56, 56)"), "{text}");
    assert!(text.contains("stage 2: (96, 28, 28)"), "{text}");
    assert!(text.contains("stage 3: (192, 14, 14)"), "{text}");
    assert!(text.contains("stage 4: (384, 7, 7)"), "{text}");
    assert!(text.contains("output: (1, 1000, 1, 1)"), "{text}");
}

#[test]
fn trace_json_is_machine_readable() {
    let out = run(&["trace", "--preset", "m1", "--format", "json"]);
    assert_eq!(exit_code(&out), 0);
    let value: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(value["variant"], "m1");
    assert_eq!(value["form"], "training");
    let stages = value["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 4);
    assert_eq!(stages[0]["channels"], 48);
    assert_eq!(stages[0]["h"], 56);
    assert_eq!(stages[3]["h"], 7);
    assert_eq!(value["output"][1], 1000);
}

#[test]
fn trace_rejects_indivisible_input() {
    let out = run(&["trace", "--preset", "m1", "--input", "1,3,225,225"]);
    assert_eq!(exit_code(&out), 2);
    assert!(
        stderr_of(&out).contains("spatial size must be divisible by 32"),
        "{}",
        stderr_of(&out)
    );
}

#[test]
fn config_source_is_required_and_exclusive() {
    let out = run(&["trace"]);
    assert_eq!(exit_code(&out), 2);
    let out = run(&["trace", "--preset", "m1", "--config", "/nonexistent.json"]);
    assert_eq!(exit_code(&out), 2);
    let out = run(&["count", "--preset", "not-a-preset"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("unknown preset"));
}

#[test]
fn build_fuse_refuse_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config_file(dir.path());
    let weights = dir.path().join("w.rpnx");
    let fused = dir.path().join("w-fused.rpnx");

    let out = run(&[
        "build",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "5",
        "--out",
        weights.to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    let built: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(built["form"], "training");
    assert_eq!(built["dtype"], "double");

    let out = run(&[
        "fuse",
        "--config",
        config.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--out",
        fused.to_str().unwrap(),
        "--input",
        "1,3,32,32",
        "--format",
        "json",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    let report: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    let params_before = report["params_before"].as_u64().unwrap();
    let params_after = report["params_after"].as_u64().unwrap();
    let macs_before = report["macs_before"].as_u64().unwrap();
    let macs_after = report["macs_after"].as_u64().unwrap();
    assert!(params_after < params_before);
    assert!(macs_after < macs_before);

    // Fusing an already-fused file is a data error, not a success.
    let out = run(&[
        "fuse",
        "--config",
        config.to_str().unwrap(),
        "--weights",
        fused.to_str().unwrap(),
        "--out",
        dir.path().join("again.rpnx").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr_of(&out).contains("already in fused form"));
}

#[test]
fn fuse_missing_weights_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config_file(dir.path());
    let out = run(&[
        "fuse",
        "--config",
        config.to_str().unwrap(),
        "--weights",
        dir.path().join("missing.rpnx").to_str().unwrap(),
        "--out",
        dir.path().join("out.rpnx").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn verify_passes_and_respects_zero_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config_file(dir.path());
    let out = run(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--trials",
        "3",
        "--seed",
        "13",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("unit=fold_bn"));
    assert!(text.contains("audit pass=true"));

    // tol=0 cannot hold for floating-point fusion; the report must still
    // carry the measured max_abs.
    let out = run(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--trials",
        "2",
        "--tol",
        "0",
    ]);
    assert_eq!(exit_code(&out), 1);
    let text = stdout_of(&out);
    assert!(text.contains("audit pass=false"));
    assert!(text.contains("max_abs="));

    // Negative tolerance is a usage error.
    let out = run(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--tol",
        "-1",
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn verify_json_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config_file(dir.path());
    let args = [
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--trials",
        "3",
        "--seed",
        "99",
        "--format",
        "json",
    ];
    let first = run(&args);
    let second = run(&args);
    assert_eq!(exit_code(&first), 0);
    assert_eq!(first.stdout, second.stdout);
    let value: serde_json::Value = serde_json::from_str(&stdout_of(&first)).unwrap();
    assert_eq!(value["pass"], true);
    assert_eq!(value["seed"], 99);
}

#[test]
fn count_analytic_matches_enumerated() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config_file(dir.path());
    let out = run(&[
        "count",
        "--config",
        config.to_str().unwrap(),
        "--input",
        "1,3,32,32",
        "--format",
        "json",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    let value: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    for form in ["training", "fused"] {
        let report = &value[form];
        for row in report["rows"].as_array().unwrap() {
            assert_eq!(
                row["params_analytic"], row["params_enumerated"],
                "{form} row {row}"
            );
            assert_eq!(
                row["macs_analytic"], row["macs_counted"],
                "{form} row {row}"
            );
        }
        assert_eq!(
            report["total"]["params_analytic"],
            report["total"]["params_enumerated"]
        );
    }
    // Fused strictly cheaper.
    let training_params = value["training"]["total"]["params_analytic"].as_u64().unwrap();
    let fused_params = value["fused"]["total"]["params_analytic"].as_u64().unwrap();
    assert!(fused_params < training_params);
    // Tiny config is not a published variant, so no reference block.
    assert!(value["reference"].is_null());
}

#[test]
fn count_reports_reference_totals_for_presets() {
    let out = run(&[
        "count",
        "--preset",
        "m1",
        "--input",
        "1,3,32,32",
        "--format",
        "json",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    let value: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
    let reference = &value["reference"];
    assert_eq!(reference["params_m"], 4.8);
    assert_eq!(reference["gmacs"], 0.8);
    let measured = reference["measured_params_m"].as_f64().unwrap();
    assert!((measured - 4.8).abs() / 4.8 <= 0.15, "measured {measured}M");
}

#[test]
fn count_rejects_bad_shape() {
    let out = run(&["count", "--preset", "m1", "--input", "1,3,30,30"]);
    assert_eq!(exit_code(&out), 2);
    let out = run(&["count", "--preset", "m1", "--input", "1,3,32"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn bench_emits_exact_csv_contract() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config_file(dir.path());
    let out = run(&[
        "bench",
        "--config",
        config.to_str().unwrap(),
        "--input",
        "1,3,32,32",
        "--repeats",
        "3",
        "--warmup",
        "1",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
    let text = stdout_of(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert_eq!(lines[0], "form,params,macs,median_ms,p10_ms,p90_ms");
    assert!(lines[1].starts_with("training,"));
    assert!(lines[2].starts_with("fused,"));
    // Param/MAC columns are deterministic; timing columns just need to be
    // positive numbers.
    for line in &lines[1..] {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 6);
        assert!(cols[1].parse::<u64>().unwrap() > 0);
        assert!(cols[2].parse::<u64>().unwrap() > 0);
        for ms in &cols[3..] {
            assert!(ms.parse::<f64>().unwrap() > 0.0);
        }
    }
    let training_params: u64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    let fused_params: u64 = lines[2].split(',').nth(1).unwrap().parse().unwrap();
    assert!(fused_params < training_params);
}

#[test]
fn bench_rejects_zero_repeats() {
    let out = run(&["bench", "--preset", "m1", "--repeats", "0"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn run_roundtrip_training_vs_fused() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config_file(dir.path());
    let weights = dir.path().join("w.rpnx");
    let fused_weights = dir.path().join("w-fused.rpnx");
    let input = dir.path().join("x.rpnx");

    assert_eq!(
        exit_code(&run(&[
            "build",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "21",
            "--out",
            weights.to_str().unwrap(),
        ])),
        0
    );
    assert_eq!(
        exit_code(&run(&[
            "fuse",
            "--config",
            config.to_str().unwrap(),
            "--weights",
            weights.to_str().unwrap(),
            "--out",
            fused_weights.to_str().unwrap(),
            "--input",
            "1,3,32,32",
        ])),
        0
    );

    let mut rng = SplitMix64::new(88);
    let x: Tensor<f64> = Tensor::random(Shape::new(1, 3, 32, 32), &mut rng);
    save_tensor(&input, "input", &x).unwrap();

    let logits_training = dir.path().join("logits-training.rpnx");
    let logits_fused = dir.path().join("logits-fused.rpnx");
    for (weight_file, logits) in [(&weights, &logits_training), (&fused_weights, &logits_fused)] {
        let out = run(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--weights",
            weight_file.to_str().unwrap(),
            "--input",
            input.to_str().unwrap(),
            "--out",
            logits.to_str().unwrap(),
            "--topk",
            "3",
            "--format",
            "json",
        ]);
        assert_eq!(exit_code(&out), 0, "{}", stderr_of(&out));
        let value: serde_json::Value = serde_json::from_str(&stdout_of(&out)).unwrap();
        assert_eq!(value["output"][1], 10);
        assert_eq!(value["topk"][0].as_array().unwrap().len(), 3);
    }

    let (_, a) = load_tensor(&logits_training).unwrap();
    let (_, b) = load_tensor(&logits_fused).unwrap();
    let diff = max_abs_diff(&a.into_double(), &b.into_double()).unwrap();
    assert!(diff <= 1e-8, "training vs fused logits diff {diff:e}");
}

#[test]
fn run_is_deterministic_for_zero_input() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config_file(dir.path());
    let weights = dir.path().join("w.rpnx");
    assert_eq!(
        exit_code(&run(&[
            "build",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "4",
            "--out",
            weights.to_str().unwrap(),
        ])),
        0
    );
    let input = dir.path().join("zero.rpnx");
    save_tensor(&input, "input", &Tensor::<f64>::zeros(Shape::new(1, 3, 32, 32))).unwrap();
    let args = |out: &Path| {
        vec![
            "run".to_string(),
            "--config".to_string(),
            config.to_str().unwrap().to_string(),
            "--weights".to_string(),
            weights.to_str().unwrap().to_string(),
            "--input".to_string(),
            input.to_str().unwrap().to_string(),
            "--out".to_string(),
            out.to_str().unwrap().to_string(),
        ]
    };
    let out1 = dir.path().join("a.rpnx");
    let out2 = dir.path().join("b.rpnx");
    let run1 = bin().args(args(&out1)).output().unwrap();
    let run2 = bin().args(args(&out2)).output().unwrap();
    assert_eq!(exit_code(&run1), 0);
    // Output paths differ, so compare the top-k line, not the full stdout.
    let topk1 = stdout_of(&run1).lines().next().unwrap().to_string();
    let topk2 = stdout_of(&run2).lines().next().unwrap().to_string();
    assert_eq!(topk1, topk2);
    assert_eq!(
        std::fs::read(&out1).unwrap(),
        std::fs::read(&out2).unwrap()
    );
}

#[test]
fn run_rejects_wrong_channel_count() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config_file(dir.path());
    let weights = dir.path().join("w.rpnx");
    assert_eq!(
        exit_code(&run(&[
            "build",
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "4",
            "--out",
            weights.to_str().unwrap(),
        ])),
        0
    );
    let input = dir.path().join("bad.rpnx");
    save_tensor(&input, "input", &Tensor::<f64>::zeros(Shape::new(1, 4, 32, 32))).unwrap();
    let out = run(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        dir.path().join("logits.rpnx").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1, "{}", stderr_of(&out));
}

#[test]
fn csv_format_is_bench_only() {
    let out = run(&["trace", "--preset", "m1", "--format", "csv"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr_of(&out).contains("bench"));
}
