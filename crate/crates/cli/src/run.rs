//! The shared training/evaluation pipeline behind `train`, `eval` and
//! `ablate`: dataset preparation, model construction, the run itself and
//! metric computation.

use crate::config::RunConfig;
use crate::manifest::{hash_file, unix_now, write_manifest, RunManifest};
use std::collections::BTreeMap;
use std::path::Path;
use tpconv_core::data::{normalize_times, read_ndjson, split, SeriesRecord, TimeMap};
use tpconv_core::error::{Error, Result};
use tpconv_core::models::{load_checkpoint, save_checkpoint, ModelConfig, Task, TpcnnModel};
use tpconv_core::rng::Rng;
use tpconv_core::train::{
    classifier_scores, evaluate_accuracy, evaluate_auc, evaluate_loss_mt, evaluate_mse,
    subsample_observed, train_loop, TrainResult,
};

// sub-seeds so split, init and shuffling draw from independent streams
const SPLIT_SEED_TAG: u64 = 0x5f17;
const INIT_SEED_TAG: u64 = 0x1217;
const SUBSAMPLE_SEED_TAG: u64 = 0xf2ac;

/// Train/val/test record sets after normalization, splitting and the
/// optional observed-fraction subsampling.
pub struct PreparedData {
    pub train: Vec<SeriesRecord>,
    pub val: Vec<SeriesRecord>,
    pub test: Vec<SeriesRecord>,
    /// held-out targets per split, present only in the observed-fraction
    /// sweep (inputs then live in train/val/test)
    pub targets: Option<[Vec<SeriesRecord>; 3]>,
    pub time_map: TimeMap,
    pub seq_len: usize,
    pub channels: usize,
    pub num_classes: usize,
}

pub fn prepare_data(
    data_path: &Path,
    task: Task,
    cfg: &RunConfig,
    seed: u64,
) -> Result<PreparedData> {
    let mut records = read_ndjson(data_path)?;
    if records.is_empty() {
        return Err(Error::validation(format!(
            "{}: dataset is empty",
            data_path.display()
        )));
    }
    let channels = records[0].channels();
    match task {
        Task::Classification => {
            if records.iter().any(|r| r.label.is_none()) {
                return Err(Error::validation(
                    "classification task, but records are missing the label field".to_string(),
                ));
            }
        }
        Task::PerStepClassification => {
            if records.iter().any(|r| r.step_labels.is_none()) {
                return Err(Error::validation(
                    "per-step classification task, but records are missing step_labels".to_string(),
                ));
            }
        }
        Task::Interpolation => {}
    }
    let time_map = if cfg.data.normalize_times {
        normalize_times(&mut records)
    } else {
        TimeMap {
            t_min: 0.0,
            t_max: 1.0,
        }
    };
    let num_classes = if cfg.model.num_classes > 0 {
        cfg.model.num_classes
    } else {
        match task {
            Task::Classification => records.iter().filter_map(|r| r.label).max().unwrap_or(0) + 1,
            Task::PerStepClassification => {
                records
                    .iter()
                    .filter_map(|r| r.step_labels.as_ref())
                    .flat_map(|sl| sl.iter().copied())
                    .max()
                    .unwrap_or(0)
                    .max(1)
                    + 1
            }
            Task::Interpolation => 0,
        }
    };
    let seq_len = if cfg.model.seq_len > 0 {
        cfg.model.seq_len
    } else {
        records.iter().map(|r| r.len()).max().unwrap()
    };
    let mut split_rng = Rng::from_seed(seed ^ SPLIT_SEED_TAG);
    let mut parts = split(&records, &cfg.data.split, &mut split_rng)?;
    if parts.len() != 3 {
        return Err(Error::config(format!(
            "expected 3 split fractions (train/val/test), got {}",
            parts.len()
        )));
    }
    let test = parts.pop().unwrap();
    let val = parts.pop().unwrap();
    let train = parts.pop().unwrap();

    let (train, val, test, targets) = match (task, cfg.train.observed_fraction) {
        (Task::Interpolation, Some(fraction)) => {
            let mut rng = Rng::from_seed(seed ^ SUBSAMPLE_SEED_TAG);
            let (tr_in, tr_tgt) = subsample_observed(&train, fraction, &mut rng)?;
            let (va_in, va_tgt) = subsample_observed(&val, fraction, &mut rng)?;
            let (te_in, te_tgt) = subsample_observed(&test, fraction, &mut rng)?;
            (tr_in, va_in, te_in, Some([tr_tgt, va_tgt, te_tgt]))
        }
        _ => (train, val, test, None),
    };

    Ok(PreparedData {
        train,
        val,
        test,
        targets,
        time_map,
        seq_len,
        channels,
        num_classes,
    })
}

pub fn build_model(
    task: Task,
    cfg: &RunConfig,
    data: &PreparedData,
    seed: u64,
) -> Result<TpcnnModel> {
    let model_cfg = ModelConfig {
        task,
        m: data.channels,
        seq_len: data.seq_len,
        tpc_p: cfg.model.tpc_p,
        tpc_z: cfg.model.tpc_z,
        functions: cfg.model.parse_functions()?,
        sigma: cfg.model.sigma,
        aggregation: cfg.model.aggregation,
        conv_channels: cfg
            .model
            .conv_channels
            .clone()
            .unwrap_or_else(|| tpconv_core::models::default_conv_channels(task)),
        conv_ksize: cfg.model.conv_ksize,
        latent_dim: cfg.model.latent_dim,
        head_hidden: cfg.model.head_hidden,
        num_classes: data.num_classes,
    };
    let mut rng = Rng::from_seed(seed ^ INIT_SEED_TAG);
    TpcnnModel::init(model_cfg, &mut rng)
}

/// Test-split metrics for a trained model, keyed by metric name.
pub fn test_metrics(
    model: &TpcnnModel,
    data: &PreparedData,
    cfg: &RunConfig,
) -> Result<BTreeMap<String, f64>> {
    let mut metrics = BTreeMap::new();
    let bs = cfg.train.batch_size;
    let threads = cfg.train.threads;
    metrics.insert(
        "test_loss".to_string(),
        evaluate_loss_mt(model, &data.test, bs, threads)?,
    );
    match model.cfg.task {
        Task::Interpolation => {
            if let Some(targets) = &data.targets {
                metrics.insert(
                    "test_mse_heldout".to_string(),
                    evaluate_mse(model, &data.test, &targets[2], bs)?,
                );
            }
        }
        Task::Classification => {
            metrics.insert(
                "test_accuracy".to_string(),
                evaluate_accuracy(model, &data.test, bs)?,
            );
            if model.cfg.num_classes == 2 {
                let scores = classifier_scores(model, &data.test, bs)?;
                let labels: Vec<usize> = data.test.iter().map(|r| r.label.unwrap()).collect();
                metrics.insert("test_auc".to_string(), evaluate_auc(&scores, &labels)?);
            }
        }
        Task::PerStepClassification => {
            metrics.insert(
                "test_accuracy".to_string(),
                evaluate_accuracy(model, &data.test, bs)?,
            );
        }
    }
    Ok(metrics)
}

/// Validation loss of a checkpoint on its recorded split; used by `eval` to
/// reproduce the training run's best-val metric.
pub fn val_loss(model: &TpcnnModel, data: &PreparedData, cfg: &RunConfig) -> Result<f64> {
    evaluate_loss_mt(model, &data.val, cfg.train.batch_size, cfg.train.threads)
}

/// metrics.csv: one row per epoch per split, losses only (no wall-clock, so
/// identical runs produce identical bytes).
pub fn metrics_csv(history: &[tpconv_core::train::EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,metric,value\n");
    for e in history {
        out.push_str(&format!("{},train,loss,{}\n", e.epoch, e.train_loss));
        out.push_str(&format!("{},val,loss,{}\n", e.epoch, e.val_loss));
    }
    out
}

pub struct CompletedRun {
    pub result: TrainResult,
    pub metrics: BTreeMap<String, f64>,
}

/// Full train-and-persist pipeline shared by `train` and `ablate`. Writes
/// checkpoint.json, metrics.csv and manifest.json into `out_dir`. On
/// divergence the last good checkpoint and partial metrics are still
/// persisted before the error is returned.
pub fn execute_training(
    task: Task,
    data_path: &Path,
    cfg: &RunConfig,
    out_dir: &Path,
) -> Result<CompletedRun> {
    let start_unix = unix_now();
    std::fs::create_dir_all(out_dir)?;
    let data = prepare_data(data_path, task, cfg, cfg.train.seed)?;
    let model = build_model(task, cfg, &data, cfg.train.seed)?;
    let checkpoint_path = out_dir.join("checkpoint.json");
    let metrics_path = out_dir.join("metrics.csv");

    let result = match train_loop(model, &data.train, &data.val, &cfg.train) {
        Ok(r) => r,
        Err(abort) => {
            if let Some((last_good, history)) = abort.last_good {
                save_checkpoint(&last_good, &checkpoint_path)?;
                std::fs::write(&metrics_path, metrics_csv(&history))?;
            }
            return Err(abort.error);
        }
    };

    save_checkpoint(&result.model, &checkpoint_path)?;
    std::fs::write(&metrics_path, metrics_csv(&result.history))?;
    let metrics = test_metrics(&result.model, &data, cfg)?;

    let manifest = RunManifest {
        version: 1,
        command: "train".to_string(),
        task,
        seed: cfg.train.seed,
        threads: cfg.train.threads,
        config: cfg.clone(),
        data_path: data_path.display().to_string(),
        data_sha1: hash_file(data_path)?,
        time_map: data.time_map,
        seq_len: data.seq_len,
        channels: data.channels,
        num_classes: data.num_classes,
        start_unix,
        end_unix: unix_now(),
        epochs_run: result.history.len(),
        best_epoch: result.best_epoch,
        best_val_loss: result.best_val_loss,
        epoch_seconds: result.history.iter().map(|e| e.seconds).collect(),
        test_metrics: metrics.clone(),
        outputs: BTreeMap::from([
            (
                "checkpoint".to_string(),
                checkpoint_path.display().to_string(),
            ),
            ("metrics".to_string(), metrics_path.display().to_string()),
        ]),
    };
    write_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(CompletedRun { result, metrics })
}

/// Loads a run directory (manifest + checkpoint) and recomputes its metrics
/// on the recorded split of `data_path` (defaults to the manifest's path).
pub fn evaluate_run(
    run_dir: &Path,
    data_override: Option<&Path>,
    threads: usize,
) -> Result<(RunManifest, BTreeMap<String, f64>)> {
    let manifest = crate::manifest::read_manifest(&run_dir.join("manifest.json"))?;
    let checkpoint = run_dir.join("checkpoint.json");
    if !checkpoint.is_file() {
        return Err(Error::config(format!(
            "missing checkpoint {}",
            checkpoint.display()
        )));
    }
    let model = load_checkpoint(&checkpoint)?;
    let mut cfg = manifest.config.clone();
    cfg.train.threads = threads.max(1);
    let data_path = data_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| manifest.data_path.clone().into());
    let data = prepare_data(&data_path, manifest.task, &cfg, manifest.seed)?;
    if data.seq_len != model.cfg.seq_len || data.channels != model.cfg.m {
        return Err(Error::validation(format!(
            "dataset shape (L={}, m={}) does not match checkpoint (L={}, m={})",
            data.seq_len, data.channels, model.cfg.seq_len, model.cfg.m
        )));
    }
    let mut metrics = test_metrics(&model, &data, &cfg)?;
    metrics.insert("val_loss".to_string(), val_loss(&model, &data, &cfg)?);
    Ok((manifest, metrics))
}
