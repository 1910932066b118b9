//! Model composition: TPC front end, vanilla conv stack with pooling, latent
//! projection, plus task heads - a decoder for interpolation, an MLP
//! classifier for whole sequences, and a pooling-free per-step classifier.

use crate::blocks::{
    activation, activation_backward, conv1d, conv1d_backward, linear, linear_backward, maxpool1d,
    maxpool1d_backward, softmax, transpose_last_two, ActivationCache, Conv1dCache, Conv1dParams,
    LinearCache, LinearParams, MaxPoolCache,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::timefuncs::{ActivationId, KernelGrads, TimeFunctionId};
use crate::tpc::{tpc_backward, tpc_forward, Aggregation, IrregularBatch, TpcCache, TpcConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Interpolation,
    Classification,
    PerStepClassification,
}

/// Architecture hyperparameters. `seq_len` fixes the padded length every
/// batch must be brought to, since the flatten width and the decoder output
/// both depend on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub task: Task,
    pub m: usize,
    pub seq_len: usize,
    pub tpc_p: usize,
    pub tpc_z: usize,
    pub functions: Vec<TimeFunctionId>,
    pub sigma: ActivationId,
    pub aggregation: Aggregation,
    pub conv_channels: Vec<usize>,
    pub conv_ksize: usize,
    pub latent_dim: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            task: Task::Interpolation,
            m: 1,
            seq_len: 20,
            tpc_p: 32,
            tpc_z: 2,
            functions: vec![TimeFunctionId::Sin],
            sigma: ActivationId::Sigmoid,
            aggregation: Aggregation::Mean,
            conv_channels: Vec::new(),
            conv_ksize: 5,
            latent_dim: 64,
            head_hidden: 128,
            num_classes: 0,
        }
    }
}

/// Default conv stack per task: the interpolation framework is TPC plus
/// linear layers only, while classification stacks vanilla convolutions
/// behind the TPC layer.
pub fn default_conv_channels(task: Task) -> Vec<usize> {
    match task {
        Task::Interpolation => Vec::new(),
        Task::Classification | Task::PerStepClassification => vec![64, 64],
    }
}

fn pool_out_len(l: usize) -> usize {
    l.div_ceil(2)
}

impl ModelConfig {
    pub fn mask_center(&self) -> bool {
        self.task == Task::Interpolation
    }

    /// Sequence length after the encoder's pooling cascade.
    pub fn encoded_len(&self) -> usize {
        let mut l = pool_out_len(self.seq_len);
        for _ in &self.conv_channels {
            l = pool_out_len(l);
        }
        l
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.seq_len == 0 || self.tpc_p == 0 {
            return Err(Error::config(
                "m, seq_len and tpc_p must be positive".to_string(),
            ));
        }
        if self.functions.is_empty() {
            return Err(Error::config(
                "at least one time function is required".to_string(),
            ));
        }
        if self.conv_ksize % 2 == 0 {
            return Err(Error::config("conv_ksize must be odd".to_string()));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be >= 1".to_string()));
        }
        match self.task {
            Task::Classification | Task::PerStepClassification => {
                if self.num_classes < 2 {
                    return Err(Error::config(format!(
                        "classification needs num_classes >= 2, got {}",
                        self.num_classes
                    )));
                }
            }
            Task::Interpolation => {}
        }
        Ok(())
    }
}

/// All trainable state of one TPCNN instance. Which optional components
/// exist is fixed by the task at construction time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TpcnnModel {
    pub cfg: ModelConfig,
    pub tpc: TpcConfig,
    pub convs: Vec<Conv1dParams>,
    /// flatten -> latent, used by interpolation and whole-sequence
    /// classification
    pub proj: Option<LinearParams>,
    /// latent -> 4 * latent rescaling layer of the decoder
    pub dec1: Option<LinearParams>,
    /// 4 * latent -> m * seq_len reconstruction layer
    pub dec2: Option<LinearParams>,
    /// first MLP head layer (input dim depends on the task)
    pub head1: Option<LinearParams>,
    /// second MLP head layer -> num_classes
    pub head2: Option<LinearParams>,
}

impl TpcnnModel {
    pub fn init(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let tpc = TpcConfig::new(
            cfg.m,
            cfg.tpc_z,
            cfg.tpc_p,
            &cfg.functions,
            cfg.sigma,
            cfg.aggregation,
            cfg.mask_center(),
            rng,
        )?;
        let mut convs = Vec::with_capacity(cfg.conv_channels.len());
        let mut in_ch = cfg.tpc_p;
        for &out_ch in &cfg.conv_channels {
            convs.push(Conv1dParams::init(out_ch, in_ch, cfg.conv_ksize, rng)?);
            in_ch = out_ch;
        }
        // with an empty conv stack (the paper's interpolation framework is
        // TPC plus linear layers only) the flatten sees TPC channels directly
        let last_ch = in_ch;
        let (mut proj, mut dec1, mut dec2, mut head1, mut head2) = (None, None, None, None, None);
        match cfg.task {
            Task::Interpolation => {
                proj = Some(LinearParams::init(
                    cfg.latent_dim,
                    last_ch * cfg.encoded_len(),
                    rng,
                )?);
                let hidden = 4 * cfg.latent_dim;
                dec1 = Some(LinearParams::init(hidden, cfg.latent_dim, rng)?);
                dec2 = Some(LinearParams::init(cfg.m * cfg.seq_len, hidden, rng)?);
            }
            Task::Classification => {
                proj = Some(LinearParams::init(
                    cfg.latent_dim,
                    last_ch * cfg.encoded_len(),
                    rng,
                )?);
                head1 = Some(LinearParams::init(cfg.head_hidden, cfg.latent_dim, rng)?);
                head2 = Some(LinearParams::init(cfg.num_classes, cfg.head_hidden, rng)?);
            }
            Task::PerStepClassification => {
                // length must be preserved, so no pooling and no flatten:
                // the head consumes per-position conv features directly
                head1 = Some(LinearParams::init(cfg.head_hidden, last_ch, rng)?);
                head2 = Some(LinearParams::init(cfg.num_classes, cfg.head_hidden, rng)?);
            }
        }
        Ok(TpcnnModel {
            cfg,
            tpc,
            convs,
            proj,
            dec1,
            dec2,
            head1,
            head2,
        })
    }

    /// Stable, complete enumeration of every trainable tensor. The order is
    /// the contract shared by the optimizer, the gradient assembly and the
    /// checkpoint format.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for q in 0..self.tpc.p() {
            for t in ["theta1", "theta2", "theta3", "theta4"] {
                names.push(format!("tpc.kernel{q}.{t}"));
            }
        }
        for i in 0..self.convs.len() {
            names.push(format!("conv{i}.weight"));
            names.push(format!("conv{i}.bias"));
        }
        for (present, base) in [
            (self.proj.is_some(), "proj"),
            (self.dec1.is_some(), "dec1"),
            (self.dec2.is_some(), "dec2"),
            (self.head1.is_some(), "head1"),
            (self.head2.is_some(), "head2"),
        ] {
            if present {
                names.push(format!("{base}.weight"));
                names.push(format!("{base}.bias"));
            }
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for k in &self.tpc.kernels {
            out.extend([&k.theta1, &k.theta2, &k.theta3, &k.theta4]);
        }
        for c in &self.convs {
            out.extend([&c.weight, &c.bias]);
        }
        for p in [&self.proj, &self.dec1, &self.dec2, &self.head1, &self.head2]
            .into_iter()
            .flatten()
        {
            out.extend([&p.weight, &p.bias]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for k in &mut self.tpc.kernels {
            out.extend([&mut k.theta1, &mut k.theta2, &mut k.theta3, &mut k.theta4]);
        }
        for c in &mut self.convs {
            out.extend([&mut c.weight, &mut c.bias]);
        }
        for p in [
            &mut self.proj,
            &mut self.dec1,
            &mut self.dec2,
            &mut self.head1,
            &mut self.head2,
        ]
        .into_iter()
        .flatten()
        {
            out.extend([&mut p.weight, &mut p.bias]);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn check_batch(&self, batch: &IrregularBatch) -> Result<()> {
        if batch.channels() != self.cfg.m {
            return Err(Error::shape(format!(
                "batch has {} channels, model expects {}",
                batch.channels(),
                self.cfg.m
            )));
        }
        if batch.seq_len() != self.cfg.seq_len {
            return Err(Error::shape(format!(
                "batch padded to length {}, model built for {}",
                batch.seq_len(),
                self.cfg.seq_len
            )));
        }
        Ok(())
    }
}

/// Forward intermediates of the pooled encoder.
pub struct EncodeCache {
    tpc: TpcCache,
    pool0: MaxPoolCache,
    convs: Vec<(Conv1dCache, ActivationCache, MaxPoolCache)>,
    flat_shape: Vec<usize>,
    proj: LinearCache,
}

/// Gradients produced by the encoder backward pass.
pub struct EncoderGrads {
    pub kernels: Vec<KernelGrads>,
    /// (weight, bias) per conv layer
    pub convs: Vec<(Tensor, Tensor)>,
    pub proj: (Tensor, Tensor),
}

/// TPC -> pool -> [conv -> relu -> pool]* -> flatten -> linear -> z.
pub fn encode(batch: &IrregularBatch, model: &TpcnnModel) -> Result<(Tensor, EncodeCache)> {
    model.check_batch(batch)?;
    let proj = model.proj.as_ref().ok_or_else(|| {
        Error::usage("model has no latent projection (per-step task?)".to_string())
    })?;
    let (tpc_out, tpc_cache) = tpc_forward(batch, &model.tpc)?;
    let mut x = transpose_last_two(&tpc_out)?; // B x p x L
    let (pooled, pool0) = maxpool1d(&x, 2, 2)?;
    x = pooled;
    let mut conv_caches = Vec::with_capacity(model.convs.len());
    for conv in &model.convs {
        let (y, c_cache) = conv1d(&x, conv)?;
        let (a, a_cache) = activation(&y, ActivationId::Relu);
        let (p, p_cache) = maxpool1d(&a, 2, 2)?;
        conv_caches.push((c_cache, a_cache, p_cache));
        x = p;
    }
    let flat_shape = x.shape().to_vec();
    let flat = x.reshape(&[flat_shape[0], flat_shape[1] * flat_shape[2]])?;
    let (z, proj_cache) = linear(&flat, proj)?;
    Ok((
        z,
        EncodeCache {
            tpc: tpc_cache,
            pool0,
            convs: conv_caches,
            flat_shape,
            proj: proj_cache,
        },
    ))
}

/// Chain rule back through projection, conv stack and TPC. The TPC layer is
/// the model's first layer, so no gradient w.r.t. the input is returned.
pub fn encode_backward(cache: &EncodeCache, grad_z: &Tensor) -> Result<EncoderGrads> {
    let (g_flat, proj_w, proj_b) = linear_backward(&cache.proj, grad_z)?;
    let mut g = g_flat.reshape(&cache.flat_shape)?;
    let mut conv_grads = vec![None; cache.convs.len()];
    for (i, (c_cache, a_cache, p_cache)) in cache.convs.iter().enumerate().rev() {
        g = maxpool1d_backward(p_cache, &g)?;
        g = activation_backward(a_cache, &g)?;
        let (gx, gw, gb) = conv1d_backward(c_cache, &g)?;
        conv_grads[i] = Some((gw, gb));
        g = gx;
    }
    g = maxpool1d_backward(&cache.pool0, &g)?;
    let g = transpose_last_two(&g)?; // back to B x L x p
    let kernels = tpc_backward(&cache.tpc, &g)?;
    Ok(EncoderGrads {
        kernels,
        convs: conv_grads.into_iter().map(Option::unwrap).collect(),
        proj: (proj_w, proj_b),
    })
}

pub struct DecodeCache {
    lin1: LinearCache,
    act: ActivationCache,
    lin2: LinearCache,
    out_shape: Vec<usize>,
}

pub struct DecoderGrads {
    pub dec1: (Tensor, Tensor),
    pub dec2: (Tensor, Tensor),
}

/// Two fully connected layers with a relu between, reshaped to B x m x L.
pub fn decode(z: &Tensor, model: &TpcnnModel) -> Result<(Tensor, DecodeCache)> {
    let (dec1, dec2) = match (&model.dec1, &model.dec2) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::usage(
                "model has no decoder (classification task?)".to_string(),
            ))
        }
    };
    let (y1, lin1) = linear(z, dec1)?;
    let (a1, act) = activation(&y1, ActivationId::Relu);
    let (y2, lin2) = linear(&a1, dec2)?;
    let bsz = z.shape()[0];
    let out_shape = vec![bsz, model.cfg.m, model.cfg.seq_len];
    let xhat = y2.reshape(&out_shape)?;
    Ok((
        xhat,
        DecodeCache {
            lin1,
            act,
            lin2,
            out_shape,
        },
    ))
}

pub fn decode_backward(cache: &DecodeCache, grad_xhat: &Tensor) -> Result<(Tensor, DecoderGrads)> {
    if grad_xhat.shape() != cache.out_shape.as_slice() {
        return Err(Error::usage(format!(
            "decoder gradient shape {:?} does not match forward output {:?}",
            grad_xhat.shape(),
            cache.out_shape
        )));
    }
    let bsz = cache.out_shape[0];
    let flat = grad_xhat.reshape(&[bsz, cache.out_shape[1] * cache.out_shape[2]])?;
    let (g_a1, w2, b2) = linear_backward(&cache.lin2, &flat)?;
    let g_y1 = activation_backward(&cache.act, &g_a1)?;
    let (g_z, w1, b1) = linear_backward(&cache.lin1, &g_y1)?;
    Ok((
        g_z,
        DecoderGrads {
            dec1: (w1, b1),
            dec2: (w2, b2),
        },
    ))
}

pub struct HeadCache {
    lin1: LinearCache,
    act: ActivationCache,
    lin2: LinearCache,
}

pub struct HeadGrads {
    pub head1: (Tensor, Tensor),
    pub head2: (Tensor, Tensor),
}

/// 2-layer MLP with relu, then row softmax.
pub fn classify(z: &Tensor, model: &TpcnnModel) -> Result<(Tensor, HeadCache)> {
    let (head1, head2) = match (&model.head1, &model.head2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::usage("model has no classifier head".to_string())),
    };
    let (y1, lin1) = linear(z, head1)?;
    let (a1, act) = activation(&y1, ActivationId::Relu);
    let (logits, lin2) = linear(&a1, head2)?;
    let probs = softmax(&logits)?;
    Ok((probs, HeadCache { lin1, act, lin2 }))
}

/// Backward from a gradient w.r.t. the pre-softmax logits (softmax plus NLL
/// collapse to probs - onehot upstream, so the head never needs a softmax
/// jacobian).
pub fn classify_backward(cache: &HeadCache, grad_logits: &Tensor) -> Result<(Tensor, HeadGrads)> {
    let (g_a1, w2, b2) = linear_backward(&cache.lin2, grad_logits)?;
    let g_y1 = activation_backward(&cache.act, &g_a1)?;
    let (g_z, w1, b1) = linear_backward(&cache.lin1, &g_y1)?;
    Ok((
        g_z,
        HeadGrads {
            head1: (w1, b1),
            head2: (w2, b2),
        },
    ))
}

pub struct PerStepCache {
    tpc: TpcCache,
    convs: Vec<(Conv1dCache, ActivationCache)>,
    feat_shape: Vec<usize>,
    head: HeadCache,
}

pub struct PerStepGrads {
    pub kernels: Vec<KernelGrads>,
    pub convs: Vec<(Tensor, Tensor)>,
    pub head: HeadGrads,
}

/// Encoder without pooling or flatten; every position's feature vector goes
/// through the MLP head, giving B x L x num_classes probabilities.
pub fn classify_per_step(
    batch: &IrregularBatch,
    model: &TpcnnModel,
) -> Result<(Tensor, PerStepCache)> {
    model.check_batch(batch)?;
    if model.cfg.task != Task::PerStepClassification {
        return Err(Error::usage(format!(
            "classify_per_step on a {:?} model",
            model.cfg.task
        )));
    }
    let (tpc_out, tpc_cache) = tpc_forward(batch, &model.tpc)?;
    let mut x = transpose_last_two(&tpc_out)?; // B x p x L
    let mut conv_caches = Vec::with_capacity(model.convs.len());
    for conv in &model.convs {
        let (y, c_cache) = conv1d(&x, conv)?;
        let (a, a_cache) = activation(&y, ActivationId::Relu);
        conv_caches.push((c_cache, a_cache));
        x = a;
    }
    let feat_shape = x.shape().to_vec(); // B x C x L
    let (bsz, ch, l) = (feat_shape[0], feat_shape[1], feat_shape[2]);
    // rows of per-position features: (B*L) x C
    let rows = transpose_last_two(&x)?.reshape(&[bsz * l, ch])?;
    let (probs_rows, head) = classify_rows(&rows, model)?;
    let c = model.cfg.num_classes;
    let probs = probs_rows.reshape(&[bsz, l, c])?;
    Ok((
        probs,
        PerStepCache {
            tpc: tpc_cache,
            convs: conv_caches,
            feat_shape,
            head,
        },
    ))
}

fn classify_rows(rows: &Tensor, model: &TpcnnModel) -> Result<(Tensor, HeadCache)> {
    let (head1, head2) = match (&model.head1, &model.head2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::usage("model has no classifier head".to_string())),
    };
    let (y1, lin1) = linear(rows, head1)?;
    let (a1, act) = activation(&y1, ActivationId::Relu);
    let (logits, lin2) = linear(&a1, head2)?;
    let probs = softmax(&logits)?;
    Ok((probs, HeadCache { lin1, act, lin2 }))
}

/// Backward from per-step logit gradients (B x L x num_classes).
pub fn classify_per_step_backward(
    cache: &PerStepCache,
    grad_logits: &Tensor,
) -> Result<PerStepGrads> {
    let gs = grad_logits.shape();
    if gs.len() != 3 {
        return Err(Error::usage(format!(
            "per-step gradient must be B x L x C, got {gs:?}"
        )));
    }
    let (bsz, l, c) = (gs[0], gs[1], gs[2]);
    let rows = grad_logits.reshape(&[bsz * l, c])?;
    let (g_rows, head) = classify_backward(&cache.head, &rows)?;
    // rows back to B x C x L
    let ch = cache.feat_shape[1];
    let g_feat = transpose_last_two(&g_rows.reshape(&[bsz, l, ch])?)?;
    let mut g = g_feat;
    let mut conv_grads = vec![None; cache.convs.len()];
    for (i, (c_cache, a_cache)) in cache.convs.iter().enumerate().rev() {
        g = activation_backward(a_cache, &g)?;
        let (gx, gw, gb) = conv1d_backward(c_cache, &g)?;
        conv_grads[i] = Some((gw, gb));
        g = gx;
    }
    let g = transpose_last_two(&g)?;
    let kernels = tpc_backward(&cache.tpc, &g)?;
    Ok(PerStepGrads {
        kernels,
        convs: conv_grads.into_iter().map(Option::unwrap).collect(),
        head,
    })
}

pub struct InterpolationCache {
    pub encode: EncodeCache,
    pub decode: DecodeCache,
}

/// encode then decode, with center masking active inside the TPC layer
/// (fixed at construction for interpolation models).
///
/// Masking makes the TPC feature at position j exactly independent of
/// values[:, :, j]; downstream pooling, flattening and the dense latent mix
/// all positions, so the reconstruction at j is only *mostly* driven by the
/// neighbors. The exact independence property holds (and is tested) at the
/// TPC layer.
pub fn interpolation_forward(
    batch: &IrregularBatch,
    model: &TpcnnModel,
) -> Result<(Tensor, InterpolationCache)> {
    if !model.tpc.mask_center {
        return Err(Error::usage(
            "interpolation_forward requires a model built with center masking".to_string(),
        ));
    }
    let (z, enc) = encode(batch, model)?;
    let (xhat, dec) = decode(&z, model)?;
    Ok((
        xhat,
        InterpolationCache {
            encode: enc,
            decode: dec,
        },
    ))
}

/// Flattens per-component gradients into the canonical parameter order of
/// [`TpcnnModel::params`].
pub fn assemble_grads(
    model: &TpcnnModel,
    kernels: Vec<KernelGrads>,
    convs: Vec<(Tensor, Tensor)>,
    proj: Option<(Tensor, Tensor)>,
    dec1: Option<(Tensor, Tensor)>,
    dec2: Option<(Tensor, Tensor)>,
    head1: Option<(Tensor, Tensor)>,
    head2: Option<(Tensor, Tensor)>,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    if kernels.len() != model.tpc.p() || convs.len() != model.convs.len() {
        return Err(Error::usage(
            "gradient component count mismatch".to_string(),
        ));
    }
    for k in kernels {
        out.extend([k.theta1, k.theta2, k.theta3, k.theta4]);
    }
    for (w, b) in convs {
        out.extend([w, b]);
    }
    for (present, grad, name) in [
        (model.proj.is_some(), proj, "proj"),
        (model.dec1.is_some(), dec1, "dec1"),
        (model.dec2.is_some(), dec2, "dec2"),
        (model.head1.is_some(), head1, "head1"),
        (model.head2.is_some(), head2, "head2"),
    ] {
        match (present, grad) {
            (true, Some((w, b))) => out.extend([w, b]),
            (false, None) => {}
            _ => {
                return Err(Error::usage(format!(
                    "gradient/parameter mismatch for {name}"
                )))
            }
        }
    }
    Ok(out)
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Writes every parameter tensor with its name and a config echo. JSON f64
/// serialization is shortest-round-trip, so reloads are bit-exact.
pub fn save_checkpoint(model: &TpcnnModel, path: &Path) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        config: model.cfg.clone(),
        names: model.param_names(),
        params: model.params().into_iter().cloned().collect(),
    };
    let json = serde_json::to_string(&ckpt)
        .map_err(|e| Error::parse(format!("serializing checkpoint: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TpcnnModel> {
    let json = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&json)
        .map_err(|e| Error::parse(format!("{}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::validation(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    // rebuild the skeleton, then overwrite every tensor by position after
    // checking names and shapes
    let mut rng = Rng::from_seed(0);
    let mut model = TpcnnModel::init(ckpt.config, &mut rng)?;
    let names = model.param_names();
    if names != ckpt.names || ckpt.params.len() != names.len() {
        return Err(Error::validation(
            "checkpoint parameter list does not match the model architecture".to_string(),
        ));
    }
    for ((slot, saved), name) in model.params_mut().into_iter().zip(&ckpt.params).zip(&names) {
        if slot.shape() != saved.shape() {
            return Err(Error::validation(format!(
                "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                saved.shape(),
                slot.shape()
            )));
        }
        *slot = saved.clone();
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{batchify, generate_synthetic, SyntheticConfig};

    fn tiny_cfg(task: Task) -> ModelConfig {
        ModelConfig {
            task,
            m: 2,
            seq_len: 12,
            tpc_p: 3,
            tpc_z: 1,
            functions: vec![TimeFunctionId::Sin, TimeFunctionId::Lin],
            conv_channels: vec![4],
            conv_ksize: 3,
            latent_dim: 5,
            head_hidden: 6,
            num_classes: if task == Task::Interpolation { 0 } else { 3 },
            ..ModelConfig::default()
        }
    }

    fn tiny_batch(rng: &mut Rng, bsz: usize, m: usize, l: usize) -> IrregularBatch {
        let values = crate::rng::rng_normal(rng, 0.0, 1.0, &[bsz, m, l]).unwrap();
        let observed = Tensor::full(&[bsz, m, l], 1.0);
        let mut times = Tensor::zeros(&[bsz, l]);
        for b in 0..bsz {
            let mut t = 0.0;
            for j in 0..l {
                t += rng.uniform(0.01, 0.09);
                times.data_mut()[b * l + j] = t;
            }
        }
        IrregularBatch::new(values, observed, times, vec![l; bsz]).unwrap()
    }

    #[test]
    fn encode_shape_contract() {
        let mut rng = Rng::from_seed(40);
        let model = TpcnnModel::init(tiny_cfg(Task::Interpolation), &mut rng).unwrap();
        let batch = tiny_batch(&mut rng, 4, 2, 12);
        let (z, _) = encode(&batch, &model).unwrap();
        assert_eq!(z.shape(), &[4, 5]);
    }

    #[test]
    fn encode_is_invariant_to_absolute_time_shift() {
        let mut rng = Rng::from_seed(41);
        let model = TpcnnModel::init(tiny_cfg(Task::Interpolation), &mut rng).unwrap();
        let batch = tiny_batch(&mut rng, 2, 2, 12);
        let mut shifted = batch.clone();
        shifted.times = shifted.times.add_scalar(42.0);
        let (a, _) = encode(&batch, &model).unwrap();
        let (b, _) = encode(&shifted, &model).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_shape_and_zero_latent() {
        let mut rng = Rng::from_seed(42);
        let model = TpcnnModel::init(tiny_cfg(Task::Interpolation), &mut rng).unwrap();
        let (xhat, _) = decode(&Tensor::zeros(&[3, 5]), &model).unwrap();
        assert_eq!(xhat.shape(), &[3, 2, 12]);
        // z = 0 leaves only bias terms, identical across the batch
        for b in 1..3 {
            for i in 0..2 * 12 {
                assert_eq!(xhat.data()[b * 24 + i], xhat.data()[i]);
            }
        }
    }

    #[test]
    fn classify_rows_sum_to_one_and_duplicate_rows_match() {
        let mut rng = Rng::from_seed(43);
        let model = TpcnnModel::init(tiny_cfg(Task::Classification), &mut rng).unwrap();
        let mut z = crate::rng::rng_normal(&mut rng, 0.0, 1.0, &[2, 5]).unwrap();
        let row: Vec<f64> = z.data()[..5].to_vec();
        z.data_mut()[5..].copy_from_slice(&row);
        let (probs, _) = classify(&z, &model).unwrap();
        for b in 0..2 {
            let s: f64 = probs.data()[b * 3..(b + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for c in 0..3 {
            assert_eq!(probs.data()[c], probs.data()[3 + c]);
        }
    }

    #[test]
    fn per_step_shapes_and_row_sums() {
        let mut rng = Rng::from_seed(44);
        let model = TpcnnModel::init(tiny_cfg(Task::PerStepClassification), &mut rng).unwrap();
        let batch = tiny_batch(&mut rng, 2, 2, 12);
        let (probs, _) = classify_per_step(&batch, &model).unwrap();
        assert_eq!(probs.shape(), &[2, 12, 3]);
        for b in 0..2 {
            for j in 0..12 {
                let s: f64 = (0..3).map(|c| probs.get(&[b, j, c]).unwrap()).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn interpolation_forward_matches_values_shape() {
        let mut rng = Rng::from_seed(45);
        let model = TpcnnModel::init(tiny_cfg(Task::Interpolation), &mut rng).unwrap();
        let batch = tiny_batch(&mut rng, 3, 2, 12);
        let (xhat, _) = interpolation_forward(&batch, &model).unwrap();
        assert_eq!(xhat.shape(), batch.values.shape());
    }

    #[test]
    fn parameter_enumeration_is_complete_and_live() {
        // perturbing any sampled parameter must change the task output
        let mut rng = Rng::from_seed(46);
        let model = TpcnnModel::init(tiny_cfg(Task::Interpolation), &mut rng).unwrap();
        let batch = tiny_batch(&mut rng, 2, 2, 12);
        let names = model.param_names();
        assert_eq!(names.len(), model.params().len());
        let baseline = interpolation_forward(&batch, &model).unwrap().0;
        for probe in [0usize, 3, 7, names.len() - 3, names.len() - 1] {
            let mut bumped = model.clone();
            bumped.params_mut()[probe].data_mut()[0] += 0.05;
            let out = interpolation_forward(&batch, &bumped).unwrap().0;
            let diff: f64 = out
                .data()
                .iter()
                .zip(baseline.data())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 0.0, "parameter {} ({}) is dead", probe, names[probe]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = Rng::from_seed(47);
        let model = TpcnnModel::init(tiny_cfg(Task::Classification), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(model.cfg, back.cfg);
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(*a, b, "tensor differs after round trip");
        }
        // and the file reloads to identical bytes when re-saved
        let path2 = dir.path().join("model2.ckpt.json");
        save_checkpoint(&back, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn checkpoint_shape_mismatch_is_rejected() {
        let mut rng = Rng::from_seed(48);
        let model = TpcnnModel::init(tiny_cfg(Task::Classification), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        save_checkpoint(&model, &path).unwrap();
        let mut raw: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        raw["config"]["latent_dim"] = serde_json::json!(9);
        std::fs::write(&path, raw.to_string()).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn synthetic_batches_flow_through_default_interpolation_model() {
        let cfg = SyntheticConfig {
            n_samples: 8,
            ..SyntheticConfig::default()
        };
        let (recs, _) = generate_synthetic(&cfg, &mut Rng::from_seed(49)).unwrap();
        let batches = batchify(&recs, 4, Some(20)).unwrap();
        let mut rng = Rng::from_seed(50);
        let model = TpcnnModel::init(ModelConfig::default(), &mut rng).unwrap();
        for b in &batches {
            let (xhat, _) = interpolation_forward(b, &model).unwrap();
            assert_eq!(xhat.shape(), &[4, 1, 20]);
            assert!(xhat.is_finite());
        }
    }
}
