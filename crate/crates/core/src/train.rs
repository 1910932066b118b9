//! Losses, the Adam optimizer, observed-point subsampling, the training
//! loop with early stopping, and evaluation metrics.

use crate::data::{batchify, SeriesRecord};
use crate::error::{Error, Result};
use crate::models::{
    assemble_grads, classify, classify_backward, classify_per_step, classify_per_step_backward,
    decode_backward, encode, encode_backward, interpolation_forward, Task, TpcnnModel,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tpc::IrregularBatch;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping patience on validation loss; 0 trains exactly one epoch.
    pub patience: usize,
    pub seed: u64,
    /// Interpolation sweep: fraction of observed points given as input, the
    /// rest becoming evaluation targets.
    pub observed_fraction: Option<f64>,
    /// Worker threads for batch-level evaluation parallelism. Results are
    /// bit-identical for any value; 1 disables threading entirely.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            observed_fraction: None,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config(
                "batch_size and max_epochs must be positive".to_string(),
            ));
        }
        if let Some(f) = self.observed_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::config(format!(
                    "observed_fraction must be in (0, 1], got {f}"
                )));
            }
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// First/second moment estimates mirroring the model's parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn for_model(model: &TpcnnModel) -> Self {
        let zeros: Vec<Tensor> = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Standard bias-corrected Adam update over the canonical parameter list.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    names: &[String],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::usage(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if !g.is_finite() {
            let name = names.get(i).map(String::as_str).unwrap_or("<unnamed>");
            return Err(Error::numerics(format!(
                "non-finite gradient for parameter {name}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((param, grad), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..grad.len() {
            let g = grad.data()[k];
            let mk = cfg.beta1 * m.data()[k] + (1.0 - cfg.beta1) * g;
            let vk = cfg.beta2 * v.data()[k] + (1.0 - cfg.beta2) * g * g;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let update = cfg.lr * (mk / bc1) / ((vk / bc2).sqrt() + cfg.eps);
            param.data_mut()[k] -= update;
        }
    }
    Ok(())
}

/// Mean squared error over the observed entries of the batch:
/// (1/|O|) * sum (x - xhat)^2. Errors if nothing is observed.
pub fn mse_interpolation_loss(xhat: &Tensor, batch: &IrregularBatch) -> Result<f64> {
    Ok(mse_loss_and_grad(xhat, batch)?.0)
}

/// Loss plus dL/dxhat (zero at unobserved entries).
pub fn mse_loss_and_grad(xhat: &Tensor, batch: &IrregularBatch) -> Result<(f64, Tensor)> {
    if xhat.shape() != batch.values.shape() {
        return Err(Error::shape(format!(
            "reconstruction shape {:?} does not match values {:?}",
            xhat.shape(),
            batch.values.shape()
        )));
    }
    let count = batch.observed.data().iter().filter(|&&o| o != 0.0).count();
    if count == 0 {
        return Err(Error::config(
            "MSE loss over a batch with no observed entries".to_string(),
        ));
    }
    let inv = 1.0 / count as f64;
    let mut grad = Tensor::zeros(xhat.shape());
    let mut loss = 0.0;
    for k in 0..xhat.len() {
        if batch.observed.data()[k] != 0.0 {
            let d = batch.values.data()[k] - xhat.data()[k];
            loss += d * d;
            grad.data_mut()[k] = -2.0 * d * inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Squared-error sum and count of `xhat` against the observed entries of a
/// *target* batch (held-out points), for aggregation across batches.
pub fn mse_against_targets(xhat: &Tensor, target: &IrregularBatch) -> Result<(f64, usize)> {
    if xhat.shape() != target.values.shape() {
        return Err(Error::shape(format!(
            "reconstruction shape {:?} does not match target values {:?}",
            xhat.shape(),
            target.values.shape()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for k in 0..xhat.len() {
        if target.observed.data()[k] != 0.0 {
            let d = target.values.data()[k] - xhat.data()[k];
            sum += d * d;
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Negative log-likelihood of the correct labels, summed over the batch.
pub fn nll_classification_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (bsz, c) = (probs.shape()[0], probs.shape()[1]);
    if labels.len() != bsz {
        return Err(Error::shape(format!(
            "{} labels for a batch of {bsz}",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::validation(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        loss -= probs.data()[b * c + y].max(1e-300).ln();
    }
    Ok(loss)
}

/// Gradient of the summed NLL w.r.t. the pre-softmax logits: probs - onehot.
pub fn nll_grad_logits(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (bsz, c) = (probs.shape()[0], probs.shape()[1]);
    if labels.len() != bsz {
        return Err(Error::shape(format!(
            "{} labels for a batch of {bsz}",
            labels.len()
        )));
    }
    let mut grad = probs.clone();
    for (b, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::validation(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        grad.data_mut()[b * c + y] -= 1.0;
    }
    Ok(grad)
}

/// Steps of a batch that have at least one observed channel; only these
/// enter the per-step loss and accuracy.
pub fn step_valid_mask(batch: &IrregularBatch) -> Vec<Vec<bool>> {
    let (bsz, m, l) = (batch.batch_size(), batch.channels(), batch.seq_len());
    (0..bsz)
        .map(|b| {
            (0..l)
                .map(|j| (0..m).any(|li| batch.observed.data()[(b * m + li) * l + j] != 0.0))
                .collect()
        })
        .collect()
}

/// Per-step NLL averaged over valid steps, plus the logits gradient.
pub fn nll_per_step_loss_and_grad(
    probs: &Tensor,
    step_labels: &[Vec<usize>],
    valid: &[Vec<bool>],
) -> Result<(f64, Tensor)> {
    let s = probs.shape();
    let (bsz, l, c) = (s[0], s[1], s[2]);
    if step_labels.len() != bsz || valid.len() != bsz {
        return Err(Error::shape(
            "per-step label/mask batch size mismatch".to_string(),
        ));
    }
    let n_valid: usize = valid.iter().map(|v| v.iter().filter(|&&x| x).count()).sum();
    if n_valid == 0 {
        return Err(Error::config(
            "no valid steps in per-step batch".to_string(),
        ));
    }
    let inv = 1.0 / n_valid as f64;
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0;
    for b in 0..bsz {
        for j in 0..l {
            if !valid[b][j] {
                continue;
            }
            let y = step_labels[b][j];
            if y >= c {
                return Err(Error::validation(format!(
                    "step label {y} out of range for {c} classes"
                )));
            }
            let base = (b * l + j) * c;
            loss -= probs.data()[base + y].max(1e-300).ln();
            for k in 0..c {
                grad.data_mut()[base + k] = probs.data()[base + k] * inv;
            }
            grad.data_mut()[base + y] -= inv;
        }
    }
    Ok((loss * inv, grad))
}

/// Splits each record's observed points into an input subset (a `fraction`
/// of them, at least one held out) and the complementary target subset.
/// Records with fewer than two observed points are skipped with a warning.
pub fn subsample_observed(
    records: &[SeriesRecord],
    fraction: f64,
    rng: &mut Rng,
) -> Result<(Vec<SeriesRecord>, Vec<SeriesRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!(
            "observed fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut inputs = Vec::with_capacity(records.len());
    let mut targets = Vec::with_capacity(records.len());
    for r in records {
        // enumerate observed (channel, step) cells in a fixed order
        let cells: Vec<(usize, usize)> = (0..r.channels())
            .flat_map(|li| (0..r.len()).map(move |j| (li, j)))
            .filter(|&(li, j)| r.observed[li][j] != 0)
            .collect();
        let n = cells.len();
        if n < 2 {
            eprintln!(
                "warning: record {} has {n} observed points, skipping subsample",
                r.id
            );
            continue;
        }
        let n_keep = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
        let keep_idx = rng.sample_indices(n, n_keep);
        let mut keep = vec![false; n];
        for &k in &keep_idx {
            keep[k] = true;
        }
        let mut input = r.clone();
        let mut target = r.clone();
        for (cell, &kept) in cells.iter().zip(&keep) {
            let (li, j) = *cell;
            if kept {
                target.observed[li][j] = 0;
                target.values[li][j] = 0.0;
            } else {
                input.observed[li][j] = 0;
                input.values[li][j] = 0.0;
            }
        }
        inputs.push(input);
        targets.push(target);
    }
    Ok((inputs, targets))
}

/// Forward-only loss of one batch for the model's task: the weighted sum
/// plus its weight, so batches of different sizes aggregate into an exact
/// dataset-level mean. Weights are observed entries (interpolation),
/// samples (classification) or valid steps (per-step).
fn batch_loss_parts(
    model: &TpcnnModel,
    batch: &IrregularBatch,
    chunk: &[SeriesRecord],
) -> Result<(f64, usize)> {
    match model.cfg.task {
        Task::Interpolation => {
            let (xhat, _) = interpolation_forward(batch, model)?;
            let loss = mse_interpolation_loss(&xhat, batch)?;
            let count = batch.observed.data().iter().filter(|&&o| o != 0.0).count();
            Ok((loss * count as f64, count))
        }
        Task::Classification => {
            let labels = chunk_labels(chunk)?;
            let (z, _) = encode(batch, model)?;
            let (probs, _) = classify(&z, model)?;
            Ok((
                nll_classification_loss(&probs, &labels)?,
                batch.batch_size(),
            ))
        }
        Task::PerStepClassification => {
            let labels = chunk_step_labels(chunk, batch.seq_len())?;
            let valid = step_valid_mask(batch);
            let (probs, _) = classify_per_step(batch, model)?;
            let loss = nll_per_step_loss_and_grad(&probs, &labels, &valid)?.0;
            let count: usize = valid.iter().map(|v| v.iter().filter(|&&x| x).count()).sum();
            Ok((loss * count as f64, count))
        }
    }
}

/// Loss and assembled gradients of one batch for the model's task.
pub fn batch_loss_and_grads(
    model: &TpcnnModel,
    batch: &IrregularBatch,
    chunk: &[SeriesRecord],
) -> Result<(f64, Vec<Tensor>)> {
    match model.cfg.task {
        Task::Interpolation => {
            let (xhat, cache) = interpolation_forward(batch, model)?;
            let (loss, grad_xhat) = mse_loss_and_grad(&xhat, batch)?;
            let (g_z, dec) = decode_backward(&cache.decode, &grad_xhat)?;
            let enc = encode_backward(&cache.encode, &g_z)?;
            let grads = assemble_grads(
                model,
                enc.kernels,
                enc.convs,
                Some(enc.proj),
                Some(dec.dec1),
                Some(dec.dec2),
                None,
                None,
            )?;
            Ok((loss, grads))
        }
        Task::Classification => {
            let labels = chunk_labels(chunk)?;
            let (z, enc_cache) = encode(batch, model)?;
            let (probs, head_cache) = classify(&z, model)?;
            let loss = nll_classification_loss(&probs, &labels)?;
            let grad_logits = nll_grad_logits(&probs, &labels)?;
            let (g_z, head) = classify_backward(&head_cache, &grad_logits)?;
            let enc = encode_backward(&enc_cache, &g_z)?;
            let grads = assemble_grads(
                model,
                enc.kernels,
                enc.convs,
                Some(enc.proj),
                None,
                None,
                Some(head.head1),
                Some(head.head2),
            )?;
            Ok((loss, grads))
        }
        Task::PerStepClassification => {
            let labels = chunk_step_labels(chunk, batch.seq_len())?;
            let valid = step_valid_mask(batch);
            let (probs, cache) = classify_per_step(batch, model)?;
            let (loss, grad_logits) = nll_per_step_loss_and_grad(&probs, &labels, &valid)?;
            let g = classify_per_step_backward(&cache, &grad_logits)?;
            let grads = assemble_grads(
                model,
                g.kernels,
                g.convs,
                None,
                None,
                None,
                Some(g.head.head1),
                Some(g.head.head2),
            )?;
            Ok((loss, grads))
        }
    }
}

/// Converts a batch loss in its task-native scale (mean over observed
/// entries, summed NLL, mean over valid steps) into (weighted sum, weight)
/// for dataset-level aggregation.
fn weighted_loss(task: Task, batch: &IrregularBatch, loss: f64) -> (f64, usize) {
    match task {
        Task::Interpolation => {
            let count = batch.observed.data().iter().filter(|&&o| o != 0.0).count();
            (loss * count as f64, count)
        }
        Task::Classification => (loss, batch.batch_size()),
        Task::PerStepClassification => {
            let count: usize = step_valid_mask(batch)
                .iter()
                .map(|v| v.iter().filter(|&&x| x).count())
                .sum();
            (loss * count as f64, count)
        }
    }
}

fn chunk_labels(chunk: &[SeriesRecord]) -> Result<Vec<usize>> {
    chunk
        .iter()
        .map(|r| {
            r.label
                .ok_or_else(|| Error::validation(format!("record {} has no label", r.id)))
        })
        .collect()
}

fn chunk_step_labels(chunk: &[SeriesRecord], pad_len: usize) -> Result<Vec<Vec<usize>>> {
    chunk
        .iter()
        .map(|r| {
            let sl = r
                .step_labels
                .as_ref()
                .ok_or_else(|| Error::validation(format!("record {} has no step_labels", r.id)))?;
            let mut row = vec![usize::MAX; pad_len];
            row[..sl.len()].copy_from_slice(sl);
            Ok(row)
        })
        .collect()
}

/// Runs `f` over every (batch, record chunk) pair with up to `threads`
/// workers, returning results in batch order. Each pair is processed by
/// exactly one worker, so results are identical for any thread count.
fn map_batches<T, F>(
    batches: &[IrregularBatch],
    chunks: &[&[SeriesRecord]],
    threads: usize,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&IrregularBatch, &[SeriesRecord]) -> Result<T> + Sync,
{
    debug_assert_eq!(batches.len(), chunks.len());
    if threads <= 1 || batches.len() <= 1 {
        return batches.iter().zip(chunks).map(|(b, c)| f(b, c)).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<Result<T>>>> = (0..batches.len())
        .map(|_| std::sync::Mutex::new(None))
        .collect();
    std::thread::scope(|scope| {
        for _ in 0..threads.min(batches.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= batches.len() {
                    break;
                }
                *results[i].lock().unwrap() = Some(f(&batches[i], chunks[i]));
            });
        }
    });
    results
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap()
                .expect("worker filled every slot")
        })
        .collect()
}

/// Dataset-mean loss over a record set: MSE per observed entry for
/// interpolation, NLL per sample for classification, NLL per valid step for
/// per-step classification.
pub fn evaluate_loss(
    model: &TpcnnModel,
    records: &[SeriesRecord],
    batch_size: usize,
) -> Result<f64> {
    evaluate_loss_mt(model, records, batch_size, 1)
}

/// [`evaluate_loss`] with batch-level parallelism; bit-identical for any
/// thread count.
pub fn evaluate_loss_mt(
    model: &TpcnnModel,
    records: &[SeriesRecord],
    batch_size: usize,
    threads: usize,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::config(
            "evaluating loss on an empty record set".to_string(),
        ));
    }
    let pad = model.cfg.seq_len;
    let batches = batchify(records, batch_size, Some(pad))?;
    let chunks: Vec<&[SeriesRecord]> = records.chunks(batch_size).collect();
    let per_batch = map_batches(&batches, &chunks, threads, |batch, chunk| {
        batch_loss_parts(model, batch, chunk)
    })?;
    let total: f64 = per_batch.iter().map(|(s, _)| s).sum();
    let weight: usize = per_batch.iter().map(|(_, w)| w).sum();
    if weight == 0 {
        return Err(Error::config("no observed entries to evaluate".to_string()));
    }
    Ok(total / weight as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// wall-clock seconds; excluded from deterministic outputs
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub model: TpcnnModel,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Training failure carrying the last finite-loss checkpoint for salvage.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub last_good: Option<(TpcnnModel, Vec<EpochMetrics>)>,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

/// Shuffled minibatch Adam with early stopping on validation loss. Returns
/// the checkpoint of the best validation epoch and per-epoch metrics.
pub fn train_loop(
    mut model: TpcnnModel,
    train_recs: &[SeriesRecord],
    val_recs: &[SeriesRecord],
    cfg: &TrainConfig,
) -> std::result::Result<TrainResult, TrainAbort> {
    let abort = |error: Error, salvage: Option<(TpcnnModel, Vec<EpochMetrics>)>| TrainAbort {
        error,
        last_good: salvage,
    };
    if let Err(e) = cfg.validate() {
        return Err(abort(e, None));
    }
    if train_recs.is_empty() || val_recs.is_empty() {
        return Err(abort(
            Error::config("training and validation sets must be non-empty".to_string()),
            None,
        ));
    }
    let pad = model.cfg.seq_len;
    let names = model.param_names();
    let mut state = AdamState::for_model(&model);
    let mut rng = Rng::from_seed(cfg.seed);
    let mut history: Vec<EpochMetrics> = Vec::new();
    let mut best: Option<(TpcnnModel, usize, f64)> = None;
    let mut since_best = 0usize;
    let mut shuffled: Vec<SeriesRecord> = train_recs.to_vec();

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        rng.shuffle(&mut shuffled);
        let batches = match batchify(&shuffled, cfg.batch_size, Some(pad)) {
            Ok(b) => b,
            Err(e) => return Err(abort(e, salvage(&best, &history))),
        };
        let mut train_loss = 0.0;
        let mut train_weight = 0usize;
        for (batch, chunk) in batches.iter().zip(shuffled.chunks(cfg.batch_size)) {
            let (loss, grads) = match batch_loss_and_grads(&model, batch, chunk) {
                Ok(x) => x,
                Err(e) => return Err(abort(e, salvage(&best, &history))),
            };
            if !loss.is_finite() {
                return Err(abort(
                    Error::numerics(format!("training loss diverged at epoch {epoch}")),
                    salvage(&best, &history),
                ));
            }
            let (sum, weight) = weighted_loss(model.cfg.task, batch, loss);
            train_loss += sum;
            train_weight += weight;
            let mut params = model.params_mut();
            if let Err(e) = adam_step(&mut params, &grads, &names, &mut state, cfg) {
                drop(params);
                return Err(abort(e, salvage(&best, &history)));
            }
        }
        let train_loss = train_loss / train_weight as f64;
        let val_loss = match evaluate_loss_mt(&model, val_recs, cfg.batch_size, cfg.threads) {
            Ok(v) => v,
            Err(e) => return Err(abort(e, salvage(&best, &history))),
        };
        if !val_loss.is_finite() {
            return Err(abort(
                Error::numerics(format!("validation loss diverged at epoch {epoch}")),
                salvage(&best, &history),
            ));
        }
        history.push(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        match &best {
            Some((_, _, best_val)) if val_loss >= *best_val => since_best += 1,
            _ => {
                best = Some((model.clone(), epoch, val_loss));
                since_best = 0;
            }
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    let (best_model, best_epoch, best_val_loss) = best.expect("at least one epoch ran");
    Ok(TrainResult {
        model: best_model,
        history,
        best_epoch,
        best_val_loss,
    })
}

fn salvage(
    best: &Option<(TpcnnModel, usize, f64)>,
    history: &[EpochMetrics],
) -> Option<(TpcnnModel, Vec<EpochMetrics>)> {
    best.as_ref().map(|(m, _, _)| (m.clone(), history.to_vec()))
}

/// Reconstructs target batches from their paired inputs and averages the
/// squared error over held-out points only. Input and target observed masks
/// must be disjoint.
pub fn evaluate_mse(
    model: &TpcnnModel,
    inputs: &[SeriesRecord],
    targets: &[SeriesRecord],
    batch_size: usize,
) -> Result<f64> {
    if inputs.len() != targets.len() {
        return Err(Error::usage(format!(
            "{} input records vs {} target records",
            inputs.len(),
            targets.len()
        )));
    }
    let pad = model.cfg.seq_len;
    let in_batches = batchify(inputs, batch_size, Some(pad))?;
    let tgt_batches = batchify(targets, batch_size, Some(pad))?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (ib, tb) in in_batches.iter().zip(&tgt_batches) {
        for k in 0..ib.observed.len() {
            if ib.observed.data()[k] != 0.0 && tb.observed.data()[k] != 0.0 {
                return Err(Error::usage(
                    "input and target observed masks overlap; evaluation must use held-out points only"
                        .to_string(),
                ));
            }
        }
        let (xhat, _) = interpolation_forward(ib, model)?;
        let (s, c) = mse_against_targets(&xhat, tb)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(Error::config("no target points to evaluate".to_string()));
    }
    Ok(sum / count as f64)
}

/// Area under the ROC curve by the Mann-Whitney rank statistic with midrank
/// tie handling.
pub fn evaluate_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::config(
            "AUC needs both classes present in the evaluation set".to_string(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // midranks over tied groups, 1-based
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Positive-class probabilities for each record, batch by batch.
pub fn classifier_scores(
    model: &TpcnnModel,
    records: &[SeriesRecord],
    batch_size: usize,
) -> Result<Vec<f64>> {
    if model.cfg.num_classes != 2 {
        return Err(Error::config(format!(
            "score extraction expects a binary classifier, model has {} classes",
            model.cfg.num_classes
        )));
    }
    let pad = model.cfg.seq_len;
    let batches = batchify(records, batch_size, Some(pad))?;
    let mut scores = Vec::with_capacity(records.len());
    for batch in &batches {
        let (z, _) = encode(batch, model)?;
        let (probs, _) = classify(&z, model)?;
        for b in 0..batch.batch_size() {
            scores.push(probs.data()[b * 2 + 1]);
        }
    }
    Ok(scores)
}

/// Whole-sequence classification accuracy by argmax probability.
pub fn evaluate_accuracy(
    model: &TpcnnModel,
    records: &[SeriesRecord],
    batch_size: usize,
) -> Result<f64> {
    let pad = model.cfg.seq_len;
    let batches = batchify(records, batch_size, Some(pad))?;
    let mut correct = 0usize;
    let mut total = 0usize;
    match model.cfg.task {
        Task::Classification => {
            for (batch, chunk) in batches.iter().zip(records.chunks(batch_size)) {
                let labels = chunk_labels(chunk)?;
                let (z, _) = encode(batch, model)?;
                let (probs, _) = classify(&z, model)?;
                let c = model.cfg.num_classes;
                for (b, &y) in labels.iter().enumerate() {
                    let row = &probs.data()[b * c..(b + 1) * c];
                    let pred = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0;
                    correct += usize::from(pred == y);
                    total += 1;
                }
            }
        }
        Task::PerStepClassification => {
            for (batch, chunk) in batches.iter().zip(records.chunks(batch_size)) {
                let labels = chunk_step_labels(chunk, batch.seq_len())?;
                let valid = step_valid_mask(batch);
                let (probs, _) = classify_per_step(batch, model)?;
                let (l, c) = (batch.seq_len(), model.cfg.num_classes);
                for b in 0..batch.batch_size() {
                    for j in 0..l {
                        if !valid[b][j] {
                            continue;
                        }
                        let base = (b * l + j) * c;
                        let row = &probs.data()[base..base + c];
                        let pred = row
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .unwrap()
                            .0;
                        correct += usize::from(pred == labels[b][j]);
                        total += 1;
                    }
                }
            }
        }
        Task::Interpolation => {
            return Err(Error::usage(
                "accuracy is undefined for interpolation models".to_string(),
            ))
        }
    }
    if total == 0 {
        return Err(Error::config("no valid steps to evaluate".to_string()));
    }
    Ok(correct as f64 / total as f64)
}

/// Mean and population standard deviation, the reporting convention for
/// repeated seed runs.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
