//! End-to-end CLI flows: generate determinism, eval reproducing the recorded
//! best-validation metric, multi-seed summaries and plot export.

use std::path::Path;
use std::process::Command;

fn tpconv() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tpconv"))
}

fn generate(dir: &Path, toml: &str, out: &Path) {
    let cfg = dir.join("gen.toml");
    std::fs::write(&cfg, toml).unwrap();
    let status = tpconv()
        .args(["generate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn generate_same_seed_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let toml = "kind = \"interpolation\"\n[synthetic]\nn_samples = 50\nseed = 9\n";
    let (a, b) = (dir.path().join("a.ndjson"), dir.path().join("b.ndjson"));
    generate(dir.path(), toml, &a);
    generate(dir.path(), toml, &b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join("a.truth.ndjson")).unwrap(),
        std::fs::read(dir.path().join("b.truth.ndjson")).unwrap()
    );
    // default config writes the paper-scale dataset: 1000 lines
    let big = dir.path().join("big.ndjson");
    generate(dir.path(), "kind = \"interpolation\"\n", &big);
    let lines = std::fs::read_to_string(&big).unwrap().lines().count();
    assert_eq!(lines, 1000);
}

#[test]
fn eval_reproduces_recorded_best_val_and_summarizes_seed_runs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.ndjson");
    generate(
        dir.path(),
        "kind = \"classification\"\n[two_freq]\nn_samples = 120\nseed = 2\n",
        &data,
    );
    let cfg = dir.path().join("train.toml");
    std::fs::write(
        &cfg,
        "[model]\ntpc_p = 4\nconv_channels = [8]\nlatent_dim = 8\nhead_hidden = 8\n[train]\nmax_epochs = 4\npatience = 4\nbatch_size = 32\n",
    )
    .unwrap();
    let runs = dir.path().join("runs");
    for seed in ["0", "1"] {
        let status = tpconv()
            .args(["train", "--task", "cls", "--seed", seed])
            .arg("--data")
            .arg(&data)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(runs.join(format!("s{seed}")))
            .status()
            .unwrap();
        assert!(status.success());
    }

    // single-run eval must reproduce the manifest's best val loss exactly
    let out = tpconv()
        .args(["eval", "--checkpoint"])
        .arg(runs.join("s0"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let recorded = json["recorded_best_val_loss"].as_f64().unwrap();
    let evaluated = json["metrics"]["val_loss"].as_f64().unwrap();
    assert!(
        (recorded - evaluated).abs() < 1e-12,
        "recorded {recorded} vs evaluated {evaluated}"
    );

    // directory of seed-runs: mean and std per metric
    let out = tpconv()
        .args(["eval", "--checkpoint"])
        .arg(&runs)
        .output()
        .unwrap();
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 2);
    let auc = &json["summary"]["test_auc"];
    assert!(auc["mean"].is_number() && auc["std"].is_number());
    assert_eq!(auc["runs"].as_array().unwrap().len(), 2);

    // a dataset whose shape disagrees with the checkpoint -> exit 2
    let other = dir.path().join("other.ndjson");
    generate(
        dir.path(),
        "kind = \"classification\"\n[two_freq]\nn_samples = 120\nn_observed = 30\nseed = 2\n",
        &other,
    );
    let out = tpconv()
        .args(["eval", "--checkpoint"])
        .arg(runs.join("s0"))
        .arg("--data")
        .arg(&other)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn export_plot_emits_expected_array_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth.ndjson");
    generate(
        dir.path(),
        "kind = \"interpolation\"\n[synthetic]\nn_samples = 80\nseed = 4\n",
        &data,
    );
    let cfg = dir.path().join("train.toml");
    std::fs::write(
        &cfg,
        "[model]\ntpc_p = 4\nlatent_dim = 8\n[train]\nmax_epochs = 3\npatience = 3\nbatch_size = 32\n",
    )
    .unwrap();
    let runs = dir.path().join("runs");
    for (name, funcs) in [("sin", "\"sin\""), ("exp", "\"exp\"")] {
        let run_cfg = dir.path().join(format!("{name}.toml"));
        std::fs::write(
            &run_cfg,
            format!(
                "[model]\ntpc_p = 4\nlatent_dim = 8\nfunctions = [{funcs}]\n[train]\nmax_epochs = 3\npatience = 3\nbatch_size = 32\n"
            ),
        )
        .unwrap();
        let status = tpconv()
            .args(["train", "--task", "interp", "--seed", "0"])
            .arg("--data")
            .arg(&data)
            .arg("--config")
            .arg(&run_cfg)
            .arg("--out")
            .arg(runs.join(name))
            .status()
            .unwrap();
        assert!(status.success());
    }
    // a classification run sharing the parent directory must be skipped
    let cls_data = dir.path().join("cls.ndjson");
    generate(
        dir.path(),
        "kind = \"classification\"\n[two_freq]\nn_samples = 40\nseed = 1\n",
        &cls_data,
    );
    let cls_cfg = dir.path().join("cls.toml");
    std::fs::write(
        &cls_cfg,
        "[model]\ntpc_p = 2\nconv_channels = [4]\nlatent_dim = 4\nhead_hidden = 4\n[train]\nmax_epochs = 1\npatience = 1\nbatch_size = 16\n",
    )
    .unwrap();
    assert!(tpconv()
        .args(["train", "--task", "cls", "--seed", "0"])
        .arg("--data")
        .arg(&cls_data)
        .arg("--config")
        .arg(&cls_cfg)
        .arg("--out")
        .arg(runs.join("cls"))
        .status()
        .unwrap()
        .success());

    let plot = dir.path().join("plot.json");
    let run_export = |out: &Path| {
        let status = tpconv()
            .args(["export-plot", "--seed", "3"])
            .arg("--run")
            .arg(&runs)
            .arg("--data")
            .arg(&data)
            .arg("--truth")
            .arg(dir.path().join("synth.truth.ndjson"))
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    run_export(&plot);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plot).unwrap()).unwrap();
    let samples = json["samples"].as_array().unwrap();
    assert_eq!(samples.len(), 3);
    for s in samples {
        assert_eq!(s["grid_times"].as_array().unwrap().len(), 100);
        assert_eq!(s["truth"].as_array().unwrap().len(), 100);
        assert_eq!(s["observed_times"].as_array().unwrap().len(), 20);
        assert_eq!(s["observed_values"].as_array().unwrap().len(), 20);
        let recon = s["reconstructions"].as_object().unwrap();
        assert_eq!(recon.len(), 2);
        assert_eq!(recon["sin"].as_array().unwrap().len(), 20);
        assert_eq!(recon["exp"].as_array().unwrap().len(), 20);
    }
    // deterministic sample selection under a fixed seed
    let plot2 = dir.path().join("plot2.json");
    run_export(&plot2);
    let a: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plot).unwrap()).unwrap();
    let b: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&plot2).unwrap()).unwrap();
    assert_eq!(a["samples"], b["samples"]);
}

#[test]
fn observed_fraction_sweep_reports_heldout_mse() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.ndjson");
    generate(
        dir.path(),
        "kind = \"interpolation\"\n[synthetic]\nn_samples = 100\nseed = 8\n",
        &data,
    );
    let cfg = dir.path().join("train.toml");
    std::fs::write(
        &cfg,
        "[model]\ntpc_p = 4\nlatent_dim = 8\n[train]\nmax_epochs = 4\npatience = 4\nbatch_size = 32\n",
    )
    .unwrap();
    let out = tpconv()
        .args([
            "train",
            "--task",
            "interp",
            "--seed",
            "0",
            "--observed-fraction",
            "0.5",
        ])
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let heldout = json["test_metrics"]["test_mse_heldout"].as_f64().unwrap();
    assert!(heldout.is_finite() && heldout > 0.0);
    // half of the 20 observed points feed the model, half are targets; the
    // manifest echoes the resolved fraction
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run").join("manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(
        manifest["config"]["train"]["observed_fraction"].as_f64(),
        Some(0.5)
    );
}

#[test]
fn ablate_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.ndjson");
    generate(
        dir.path(),
        "kind = \"interpolation\"\n[synthetic]\nn_samples = 60\nseed = 6\n",
        &data,
    );
    let cfg = dir.path().join("train.toml");
    std::fs::write(
        &cfg,
        "[model]\ntpc_p = 2\nlatent_dim = 4\n[train]\nmax_epochs = 2\npatience = 2\nbatch_size = 32\n",
    )
    .unwrap();
    let run = |out: &Path| {
        let status = tpconv()
            .args([
                "ablate",
                "--task",
                "interp",
                "--functions",
                "sin",
                "--seeds",
                "1",
                "--seed",
                "0",
            ])
            .arg("--data")
            .arg(&data)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    run(&a);
    run(&b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    // one function set, one seed -> exactly one result row after the header
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("sin,0,test_loss,"));
}
