//! The five subcommands: generate, train, eval, ablate and export-plot.

use crate::config::{
    load_toml, parse_function_set, task_from_flag, DatasetKind, GenerateConfig, RunConfig,
};
use crate::manifest::{discover_runs, hash_file, read_manifest, unix_now};
use crate::run::{evaluate_run, execute_training, prepare_data};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use tpconv_core::data::{
    batchify, generate_synthetic, generate_synthetic_classification, read_ndjson, write_ndjson,
    SeriesRecord,
};
use tpconv_core::error::{Error, Result};
use tpconv_core::models::{interpolation_forward, load_checkpoint, Task};
use tpconv_core::rng::Rng;
use tpconv_core::train::mean_std;

#[derive(Serialize)]
struct DatasetMeta {
    kind: DatasetKind,
    seed: u64,
    config: GenerateConfig,
    time_map: tpconv_core::data::TimeMap,
    records: usize,
    data_sha1: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth_path: Option<String>,
}

/// `tpconv generate`: synthetic dataset + metadata sidecar (+ ground-truth
/// NDJSON for the interpolation dataset).
pub fn cmd_generate(cfg_path: Option<&Path>, out_path: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: GenerateConfig = load_toml(cfg_path)?;
    if let Some(s) = seed {
        cfg.synthetic.seed = s;
        cfg.two_freq.seed = s;
    }
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let (records, truth_path) = match cfg.kind {
        DatasetKind::Interpolation => {
            let mut rng = Rng::from_seed(cfg.synthetic.seed);
            let (obs, truth) = generate_synthetic(&cfg.synthetic, &mut rng)?;
            let truth_path = sibling(out_path, "truth.ndjson");
            write_ndjson(&truth, &truth_path)?;
            (obs, Some(truth_path))
        }
        DatasetKind::Classification => {
            let mut rng = Rng::from_seed(cfg.two_freq.seed);
            let recs = generate_synthetic_classification(&cfg.two_freq, &mut rng)?;
            (recs, None)
        }
    };
    write_ndjson(&records, out_path)?;
    let meta = DatasetMeta {
        kind: cfg.kind,
        seed: match cfg.kind {
            DatasetKind::Interpolation => cfg.synthetic.seed,
            DatasetKind::Classification => cfg.two_freq.seed,
        },
        config: cfg,
        // generator times are already normalized units in [0, 1]
        time_map: tpconv_core::data::TimeMap {
            t_min: 0.0,
            t_max: 1.0,
        },
        records: records.len(),
        data_sha1: hash_file(out_path)?,
        truth_path: truth_path.as_ref().map(|p| p.display().to_string()),
    };
    let meta_path = sibling(out_path, "meta.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).map_err(|e| Error::parse(e.to_string()))?,
    )?;
    println!(
        "wrote {} records to {} (meta: {})",
        records.len(),
        out_path.display(),
        meta_path.display()
    );
    Ok(())
}

/// data.ndjson -> data.<ext> next to it, stripping one .ndjson suffix.
fn sibling(out_path: &Path, ext: &str) -> PathBuf {
    let stem = out_path
        .file_name()
        .map(|n| n.to_string_lossy().trim_end_matches(".ndjson").to_string())
        .unwrap_or_else(|| "data".to_string());
    out_path.with_file_name(format!("{stem}.{ext}"))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    task_flag: &str,
    data_path: &Path,
    cfg_path: Option<&Path>,
    out_dir: &Path,
    seed: Option<u64>,
    threads: Option<usize>,
    observed_fraction: Option<f64>,
) -> Result<()> {
    let task = task_from_flag(task_flag)?;
    let mut cfg: RunConfig = load_toml(cfg_path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(t) = threads {
        cfg.train.threads = t;
    }
    if let Some(f) = observed_fraction {
        cfg.train.observed_fraction = Some(f);
    }
    cfg.train.validate()?;
    let run = execute_training(task, data_path, &cfg, out_dir)?;
    let summary = serde_json::json!({
        "out_dir": out_dir.display().to_string(),
        "epochs_run": run.result.history.len(),
        "best_epoch": run.result.best_epoch,
        "best_val_loss": run.result.best_val_loss,
        "test_metrics": run.metrics,
    });
    println!("{}", serde_json::to_string_pretty(&summary).unwrap());
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, data: Option<&Path>, threads: usize) -> Result<()> {
    let runs = discover_runs(checkpoint)?;
    let mut per_run = Vec::new();
    for run_dir in &runs {
        let (manifest, metrics) = evaluate_run(run_dir, data, threads)?;
        per_run.push((run_dir.clone(), manifest, metrics));
    }
    if per_run.len() == 1 {
        let (dir, manifest, metrics) = &per_run[0];
        let out = serde_json::json!({
            "run": dir.display().to_string(),
            "task": manifest.task,
            "seed": manifest.seed,
            "recorded_best_val_loss": manifest.best_val_loss,
            "metrics": metrics,
        });
        println!("{}", serde_json::to_string_pretty(&out).unwrap());
        return Ok(());
    }
    // a directory of seed-runs: report per-run metrics plus mean +/- std
    let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (_, _, metrics) in &per_run {
        for (k, v) in metrics {
            by_metric.entry(k.clone()).or_default().push(*v);
        }
    }
    let summary: BTreeMap<String, serde_json::Value> = by_metric
        .iter()
        .map(|(k, vals)| {
            let (mean, std) = mean_std(vals);
            (
                k.clone(),
                serde_json::json!({"mean": mean, "std": std, "runs": vals}),
            )
        })
        .collect();
    let out = serde_json::json!({
        "runs": per_run.iter().map(|(d, m, metrics)| serde_json::json!({
            "run": d.display().to_string(),
            "seed": m.seed,
            "metrics": metrics,
        })).collect::<Vec<_>>(),
        "summary": summary,
    });
    println!("{}", serde_json::to_string_pretty(&out).unwrap());
    Ok(())
}

/// Primary comparison metric of an ablation run for the given task.
fn ablation_metric(task: Task) -> &'static str {
    match task {
        Task::Interpolation => "test_loss",
        Task::Classification => "test_auc",
        Task::PerStepClassification => "test_accuracy",
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_ablate(
    task_flag: &str,
    data_path: &Path,
    cfg_path: Option<&Path>,
    functions: &str,
    out_csv: &Path,
    n_seeds: usize,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<()> {
    let task = task_from_flag(task_flag)?;
    let base_cfg: RunConfig = load_toml(cfg_path)?;
    let sets: Vec<&str> = functions
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if sets.is_empty() {
        return Err(Error::config("no function sets given".to_string()));
    }
    // validate every set up front so a typo fails before hours of training
    for set in &sets {
        parse_function_set(set)?;
    }
    if n_seeds == 0 {
        return Err(Error::config("need at least one seed".to_string()));
    }
    if let Some(parent) = out_csv.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let base_seed = seed.unwrap_or(base_cfg.train.seed);
    let metric_name = ablation_metric(task);
    let mut csv = String::from("function_set,seed,metric,value\n");
    let mut summary: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    let work_root = out_csv.with_extension("runs");
    for set in &sets {
        let mut values = Vec::with_capacity(n_seeds);
        for i in 0..n_seeds {
            let run_seed = base_seed + i as u64;
            let mut cfg = base_cfg.clone();
            cfg.model.functions = set.split('+').map(|s| s.trim().to_string()).collect();
            cfg.train.seed = run_seed;
            if let Some(t) = threads {
                cfg.train.threads = t;
            }
            let out_dir = work_root.join(format!("{}_seed{run_seed}", set.replace('+', "_")));
            let run = execute_training(task, data_path, &cfg, &out_dir)?;
            let value = *run.metrics.get(metric_name).ok_or_else(|| {
                Error::config(format!("metric {metric_name} missing from run output"))
            })?;
            csv.push_str(&format!("{set},{run_seed},{metric_name},{value}\n"));
            values.push(value);
            eprintln!("ablate: {set} seed {run_seed}: {metric_name} = {value:.6}");
        }
        let (mean, std) = mean_std(&values);
        summary.insert(
            set.to_string(),
            serde_json::json!({
                "metric": metric_name,
                "mean": mean,
                "std": std,
                "values": values,
            }),
        );
    }
    std::fs::write(out_csv, csv)?;
    let summary_path = out_csv.with_extension("summary.json");
    std::fs::write(
        &summary_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "task": task,
            "metric": metric_name,
            "seeds": n_seeds,
            "base_seed": base_seed,
            "function_sets": summary,
        }))
        .unwrap(),
    )?;
    println!("wrote {} and {}", out_csv.display(), summary_path.display());
    Ok(())
}

#[derive(Serialize)]
struct PlotSample {
    id: String,
    grid_times: Vec<f64>,
    truth: Vec<f64>,
    observed_times: Vec<f64>,
    observed_values: Vec<f64>,
    /// reconstruction at the observed positions, keyed by the run's
    /// time-function set
    reconstructions: BTreeMap<String, Vec<f64>>,
}

/// `tpconv export-plot`: reconstruction data for a few test samples, one
/// reconstruction series per discovered run. Rendering is left to external
/// tools.
pub fn cmd_export_plot(
    run_root: &Path,
    data_path: &Path,
    truth_path: &Path,
    out_path: &Path,
    n_samples: usize,
    seed: u64,
) -> Result<()> {
    // other tasks may share the parent directory; only interpolation runs
    // can reconstruct
    let runs: Vec<PathBuf> = discover_runs(run_root)?
        .into_iter()
        .filter(|dir| {
            read_manifest(&dir.join("manifest.json"))
                .map(|m| m.task == Task::Interpolation)
                .unwrap_or(false)
        })
        .collect();
    if runs.is_empty() {
        return Err(Error::config(format!(
            "no interpolation runs under {}",
            run_root.display()
        )));
    }
    let first_manifest = read_manifest(&runs[0].join("manifest.json"))?;
    // reproduce the split of the first run to find its test records
    let data = prepare_data(
        data_path,
        first_manifest.task,
        &first_manifest.config,
        first_manifest.seed,
    )?;
    if data.test.is_empty() {
        return Err(Error::config("no test records to export".to_string()));
    }
    let truth_records = read_ndjson(truth_path)?;
    let truth_by_id: BTreeMap<&str, &SeriesRecord> =
        truth_records.iter().map(|r| (r.id.as_str(), r)).collect();

    let mut rng = Rng::from_seed(seed);
    let n_samples = n_samples.min(data.test.len());
    let picked = rng.sample_indices(data.test.len(), n_samples);

    let mut samples: Vec<PlotSample> = picked
        .iter()
        .map(|&i| {
            let rec = &data.test[i];
            let truth = truth_by_id.get(rec.id.as_str()).ok_or_else(|| {
                Error::validation(format!("no ground-truth record for id {}", rec.id))
            })?;
            // observed times in raw units for plotting against the truth grid
            let raw_times: Vec<f64> = rec.times.iter().map(|&t| data.time_map.invert(t)).collect();
            Ok(PlotSample {
                id: rec.id.clone(),
                grid_times: truth.times.clone(),
                truth: truth.values[0].clone(),
                observed_times: raw_times,
                observed_values: rec.values[0].clone(),
                reconstructions: BTreeMap::new(),
            })
        })
        .collect::<Result<_>>()?;

    for run_dir in &runs {
        let manifest = read_manifest(&run_dir.join("manifest.json"))?;
        let checkpoint = run_dir.join("checkpoint.json");
        if !checkpoint.is_file() {
            return Err(Error::config(format!(
                "missing checkpoint {}",
                checkpoint.display()
            )));
        }
        let model = load_checkpoint(&checkpoint)?;
        let label = manifest.config.model.functions.join("+");
        for (slot, &i) in samples.iter_mut().zip(&picked) {
            let rec = data.test[i].clone();
            let n_obs = rec.len();
            let batch = &batchify(&[rec], 1, Some(model.cfg.seq_len))?[0];
            let (xhat, _) = interpolation_forward(batch, &model)?;
            slot.reconstructions
                .insert(label.clone(), xhat.data()[..n_obs].to_vec());
        }
    }

    let out = serde_json::json!({
        "generated_unix": unix_now(),
        "runs": runs.iter().map(|r| r.display().to_string()).collect::<Vec<_>>(),
        "samples": samples,
    });
    std::fs::write(
        out_path,
        serde_json::to_string_pretty(&out).map_err(|e| Error::parse(e.to_string()))?,
    )?;
    println!("wrote {}", out_path.display());
    Ok(())
}
