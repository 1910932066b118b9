//! The time-parameterized convolutional layer.
//!
//! For every position j the kernel is materialized from the time differences
//! to the patch center, the patch is reduced by sum or by mean over the
//! actually observed entries, and the p kernel outputs are concatenated into
//! a B x L x p tensor. Padding positions and missing entries contribute
//! neither to the sum nor to the mean divisor.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::timefuncs::{
    kernel_value_grads_into, kernel_value_into, ActivationId, KernelGrads, KernelParams,
    TimeFunctionId,
};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

/// Configuration plus trainable kernels of one TPC layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TpcConfig {
    pub m: usize,
    /// Half-width; the kernel window covers 2z+1 positions.
    pub z: usize,
    pub kernels: Vec<KernelParams>,
    pub aggregation: Aggregation,
    /// Interpolation mode: drop the whole center column of every patch.
    pub mask_center: bool,
}

impl TpcConfig {
    /// Builds p kernels, assigning time functions round-robin from
    /// `functions`.
    pub fn new(
        m: usize,
        z: usize,
        p: usize,
        functions: &[TimeFunctionId],
        sigma: ActivationId,
        aggregation: Aggregation,
        mask_center: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if p == 0 {
            return Err(Error::config("TPC layer needs p >= 1 kernels".to_string()));
        }
        if functions.is_empty() {
            return Err(Error::config("empty time-function list".to_string()));
        }
        if m == 0 {
            return Err(Error::config("channel count m must be >= 1".to_string()));
        }
        let ksize = 2 * z + 1;
        let kernels = (0..p)
            .map(|q| KernelParams::init(m, ksize, functions[q % functions.len()], sigma, rng))
            .collect();
        Ok(TpcConfig {
            m,
            z,
            kernels,
            aggregation,
            mask_center,
        })
    }

    pub fn p(&self) -> usize {
        self.kernels.len()
    }

    pub fn kernel_size(&self) -> usize {
        2 * self.z + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::config("TPC layer needs p >= 1 kernels".to_string()));
        }
        for (q, k) in self.kernels.iter().enumerate() {
            if k.channels() != self.m {
                return Err(Error::shape(format!(
                    "kernel {q} has {} channels, layer expects {}",
                    k.channels(),
                    self.m
                )));
            }
        }
        Ok(())
    }
}

/// Total trainable scalars of the layer: 4 m p, independent of kernel size.
pub fn count_params(cfg: &TpcConfig) -> usize {
    4 * cfg.m * cfg.p()
}

/// A padded batch of irregular multivariate series.
///
/// Missing entries are stored as zero with `observed` zero; positions at or
/// beyond `valid_len[b]` are padding and carry an all-zero observed mask.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IrregularBatch {
    /// B x m x L
    pub values: Tensor,
    /// B x m x L, entries in {0, 1}
    pub observed: Tensor,
    /// B x L, non-decreasing over the valid range of each sample
    pub times: Tensor,
    pub valid_len: Vec<usize>,
}

impl IrregularBatch {
    pub fn new(
        values: Tensor,
        observed: Tensor,
        times: Tensor,
        valid_len: Vec<usize>,
    ) -> Result<Self> {
        let batch = IrregularBatch {
            values,
            observed,
            times,
            valid_len,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn seq_len(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let vs = self.values.shape();
        if vs.len() != 3 {
            return Err(Error::shape(format!(
                "values must be B x m x L, got {vs:?}"
            )));
        }
        let (b, m, l) = (vs[0], vs[1], vs[2]);
        if self.observed.shape() != vs {
            return Err(Error::shape(format!(
                "observed shape {:?} differs from values shape {vs:?}",
                self.observed.shape()
            )));
        }
        if self.times.shape() != [b, l] {
            return Err(Error::shape(format!(
                "times shape {:?} does not match B x L = [{b}, {l}]",
                self.times.shape()
            )));
        }
        if self.valid_len.len() != b {
            return Err(Error::shape(format!(
                "valid_len has {} entries for batch of {b}",
                self.valid_len.len()
            )));
        }
        for (bi, &vl) in self.valid_len.iter().enumerate() {
            if vl > l {
                return Err(Error::validation(format!(
                    "sample {bi}: valid_len {vl} exceeds padded length {l}"
                )));
            }
            for j in 1..vl {
                let (t0, t1) = (
                    self.times.data()[bi * l + j - 1],
                    self.times.data()[bi * l + j],
                );
                if !(t0 <= t1) {
                    return Err(Error::validation(format!(
                        "sample {bi}: times not sorted at {j} ({t0} > {t1})"
                    )));
                }
            }
            for li in 0..m {
                for j in 0..l {
                    let idx = (bi * m + li) * l + j;
                    let obs = self.observed.data()[idx];
                    if obs != 0.0 && obs != 1.0 {
                        return Err(Error::validation(format!(
                            "sample {bi}: observed mask entry is {obs}, expected 0 or 1"
                        )));
                    }
                    if j >= vl && obs != 0.0 {
                        return Err(Error::validation(format!(
                            "sample {bi}: padding position {j} marked observed"
                        )));
                    }
                    if obs == 0.0 && self.values.data()[idx] != 0.0 {
                        return Err(Error::validation(format!(
                            "sample {bi}: missing entry ({li}, {j}) stores a non-zero value"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Materializes the m x (2z+1) kernel centered at observation `j`. Offsets
/// falling outside `times` produce zero columns; the center column is
/// evaluated at dt = 0 exactly.
pub fn materialize_kernel(k: &KernelParams, times: &[f64], j: usize, z: usize) -> Result<Tensor> {
    let len = times.len();
    if j >= len {
        return Err(Error::shape(format!(
            "center index {j} out of range for series of length {len}"
        )));
    }
    let m = k.channels();
    let ksize = 2 * z + 1;
    let mut out = Tensor::zeros(&[m, ksize]);
    let mut col = vec![0.0; m];
    for c in 0..ksize {
        let offset = c as isize - z as isize;
        let jj = j as isize + offset;
        if jj < 0 || jj >= len as isize {
            continue; // zero padding column
        }
        let dt = times[jj as usize] - times[j];
        kernel_value_into(k, dt, &mut col)?;
        for l in 0..m {
            out.data_mut()[l * ksize + c] = col[l];
        }
    }
    Ok(out)
}

/// Forward intermediates for [`tpc_backward`]: the batch, the kernels as
/// they were at forward time, and the per-position observed-term counts.
#[derive(Debug, Clone)]
pub struct TpcCache {
    batch: IrregularBatch,
    kernels: Vec<KernelParams>,
    z: usize,
    aggregation: Aggregation,
    mask_center: bool,
    /// B x L count of included value-terms per patch.
    nu: Vec<u32>,
    out_shape: [usize; 3],
}

impl TpcCache {
    pub fn out_shape(&self) -> &[usize; 3] {
        &self.out_shape
    }
}

/// Forward pass. Output is B x L x p; padding positions output zero, and a
/// patch with zero observed terms outputs zero rather than NaN in mean mode.
pub fn tpc_forward(batch: &IrregularBatch, cfg: &TpcConfig) -> Result<(Tensor, TpcCache)> {
    cfg.validate()?;
    if batch.channels() != cfg.m {
        return Err(Error::shape(format!(
            "batch has {} channels, layer expects {}",
            batch.channels(),
            cfg.m
        )));
    }
    let (bsz, m, l) = (batch.batch_size(), cfg.m, batch.seq_len());
    let p = cfg.p();
    let z = cfg.z as isize;
    let mut out = Tensor::zeros(&[bsz, l, p]);
    let mut nu = vec![0u32; bsz * l];
    let mut col = vec![0.0; m];

    for b in 0..bsz {
        let vl = batch.valid_len[b];
        let trow = &batch.times.data()[b * l..b * l + vl];
        for j in 0..vl {
            // offsets participating in this patch, with their time deltas
            let mut included: Vec<(usize, f64)> = Vec::with_capacity(2 * cfg.z + 1);
            let mut count = 0u32;
            for o in -z..=z {
                if cfg.mask_center && o == 0 {
                    continue;
                }
                let jj = j as isize + o;
                if jj < 0 || jj >= vl as isize {
                    continue;
                }
                let jj = jj as usize;
                let mut any = false;
                for li in 0..m {
                    if batch.observed.data()[(b * m + li) * l + jj] != 0.0 {
                        count += 1;
                        any = true;
                    }
                }
                if any {
                    included.push((jj, trow[jj] - trow[j]));
                }
            }
            nu[b * l + j] = count;
            if count == 0 {
                continue;
            }
            for (q, kernel) in cfg.kernels.iter().enumerate() {
                let mut acc = 0.0;
                for &(jj, dt) in &included {
                    kernel_value_into(kernel, dt, &mut col)?;
                    for li in 0..m {
                        let idx = (b * m + li) * l + jj;
                        if batch.observed.data()[idx] != 0.0 {
                            acc += col[li] * batch.values.data()[idx];
                        }
                    }
                }
                out.data_mut()[(b * l + j) * p + q] = match cfg.aggregation {
                    Aggregation::Sum => acc,
                    Aggregation::Mean => acc / count as f64,
                };
            }
        }
    }

    let cache = TpcCache {
        batch: batch.clone(),
        kernels: cfg.kernels.clone(),
        z: cfg.z,
        aggregation: cfg.aggregation,
        mask_center: cfg.mask_center,
        nu,
        out_shape: [bsz, l, p],
    };
    Ok((out, cache))
}

/// Backward pass: parameter gradients per kernel. TPC is the first layer of
/// every model here, so no input gradient is produced. Skipped terms
/// (missing, masked, padded) contribute zero gradient; mean mode rescales by
/// the same 1/nu used in the forward pass.
pub fn tpc_backward(cache: &TpcCache, grad_out: &Tensor) -> Result<Vec<KernelGrads>> {
    if grad_out.shape() != cache.out_shape {
        return Err(Error::usage(format!(
            "gradient shape {:?} does not match cached forward output shape {:?}; \
             backward must consume the cache of the immediately preceding forward",
            grad_out.shape(),
            cache.out_shape
        )));
    }
    let [bsz, l, p] = cache.out_shape;
    let m = cache.batch.channels();
    let z = cache.z as isize;
    let mut grads: Vec<KernelGrads> = (0..p).map(|_| KernelGrads::zeros(m)).collect();
    let mut upstream = vec![0.0; m];

    for b in 0..bsz {
        let vl = cache.batch.valid_len[b];
        let trow = &cache.batch.times.data()[b * l..b * l + vl];
        for j in 0..vl {
            let count = cache.nu[b * l + j];
            if count == 0 {
                continue;
            }
            let scale = match cache.aggregation {
                Aggregation::Sum => 1.0,
                Aggregation::Mean => 1.0 / count as f64,
            };
            for o in -z..=z {
                if cache.mask_center && o == 0 {
                    continue;
                }
                let jj = j as isize + o;
                if jj < 0 || jj >= vl as isize {
                    continue;
                }
                let jj = jj as usize;
                let mut any = false;
                for li in 0..m {
                    let idx = (b * m + li) * l + jj;
                    upstream[li] = if cache.batch.observed.data()[idx] != 0.0 {
                        any = true;
                        cache.batch.values.data()[idx]
                    } else {
                        0.0
                    };
                }
                if !any {
                    continue;
                }
                let dt = trow[jj] - trow[j];
                for (q, kernel) in cache.kernels.iter().enumerate() {
                    let go = grad_out.data()[(b * l + j) * p + q] * scale;
                    if go == 0.0 {
                        continue;
                    }
                    // dL/dg[l] = go * x[l] for observed entries
                    let scaled: Vec<f64> = upstream.iter().map(|&x| x * go).collect();
                    kernel_value_grads_into(kernel, dt, &scaled, &mut grads[q])?;
                }
            }
        }
    }
    Ok(grads)
}
