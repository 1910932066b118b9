//! Vanilla differentiable building blocks used downstream of the TPC layer:
//! same-length 1-D convolution, max pooling, fully connected layers,
//! elementwise activations and a stable softmax.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::timefuncs::ActivationId;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv1dParams {
    /// out_ch x in_ch x ksize
    pub weight: Tensor,
    /// out_ch
    pub bias: Tensor,
}

impl Conv1dParams {
    pub fn init(out_ch: usize, in_ch: usize, ksize: usize, rng: &mut Rng) -> Result<Self> {
        if ksize % 2 == 0 {
            return Err(Error::config(format!(
                "conv kernel size must be odd, got {ksize}"
            )));
        }
        let bound = 1.0 / ((in_ch * ksize) as f64).sqrt();
        Ok(Conv1dParams {
            weight: crate::rng::rng_uniform(rng, -bound, bound, &[out_ch, in_ch, ksize])?,
            bias: Tensor::zeros(&[out_ch]),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn ksize(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Debug, Clone)]
pub struct Conv1dCache {
    input: Tensor,
    weight: Tensor,
}

/// Same-length 1-D cross-correlation with zero padding of (ksize-1)/2 on
/// both sides: `out[b,oc,j] = bias[oc] + sum_{ic,k} w[oc,ic,k] * x[b,ic,j+k-pad]`.
pub fn conv1d(x: &Tensor, p: &Conv1dParams) -> Result<(Tensor, Conv1dCache)> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::shape(format!(
            "conv1d input must be B x C x L, got {xs:?}"
        )));
    }
    let (bsz, c, l) = (xs[0], xs[1], xs[2]);
    if c != p.in_channels() {
        return Err(Error::shape(format!(
            "conv1d: input has {c} channels, weight expects {}",
            p.in_channels()
        )));
    }
    let (oc, ksize) = (p.out_channels(), p.ksize());
    let pad = (ksize - 1) / 2;
    let mut out = Tensor::zeros(&[bsz, oc, l]);
    for b in 0..bsz {
        for o in 0..oc {
            let orow = &mut out.data_mut()[(b * oc + o) * l..(b * oc + o + 1) * l];
            for v in orow.iter_mut() {
                *v = p.bias.data()[o];
            }
            for ic in 0..c {
                let xrow = &x.data()[(b * c + ic) * l..(b * c + ic + 1) * l];
                let wrow = &p.weight.data()[(o * c + ic) * ksize..(o * c + ic + 1) * ksize];
                for j in 0..l {
                    let mut acc = 0.0;
                    for (k, &w) in wrow.iter().enumerate() {
                        let src = j as isize + k as isize - pad as isize;
                        if src >= 0 && (src as usize) < l {
                            acc += w * xrow[src as usize];
                        }
                    }
                    orow[j] += acc;
                }
            }
        }
    }
    let cache = Conv1dCache {
        input: x.clone(),
        weight: p.weight.clone(),
    };
    Ok((out, cache))
}

/// Gradients w.r.t. input, weight and bias.
pub fn conv1d_backward(cache: &Conv1dCache, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let xs = cache.input.shape();
    let (bsz, c, l) = (xs[0], xs[1], xs[2]);
    let ws = cache.weight.shape();
    let (oc, ksize) = (ws[0], ws[2]);
    if grad_out.shape() != [bsz, oc, l] {
        return Err(Error::usage(format!(
            "conv1d_backward: gradient shape {:?} does not match forward output [{bsz}, {oc}, {l}]",
            grad_out.shape()
        )));
    }
    let pad = (ksize - 1) / 2;
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    let mut gb = Tensor::zeros(&[oc]);
    for b in 0..bsz {
        for o in 0..oc {
            let grow = &grad_out.data()[(b * oc + o) * l..(b * oc + o + 1) * l];
            gb.data_mut()[o] += grow.iter().sum::<f64>();
            for ic in 0..c {
                let xrow = &cache.input.data()[(b * c + ic) * l..(b * c + ic + 1) * l];
                let wrow = &cache.weight.data()[(o * c + ic) * ksize..(o * c + ic + 1) * ksize];
                for j in 0..l {
                    let g = grow[j];
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..ksize {
                        let src = j as isize + k as isize - pad as isize;
                        if src >= 0 && (src as usize) < l {
                            let src = src as usize;
                            gw.data_mut()[(o * c + ic) * ksize + k] += g * xrow[src];
                            gx.data_mut()[(b * c + ic) * l + src] += g * wrow[k];
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    in_shape: Vec<usize>,
    /// flat input index feeding each output element
    argmax: Vec<usize>,
    out_shape: Vec<usize>,
}

/// Window maximum along the last axis; an odd tail window of size < window
/// passes its own maximum through. Ties route to the earliest index.
pub fn maxpool1d(x: &Tensor, window: usize, stride: usize) -> Result<(Tensor, MaxPoolCache)> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::shape(format!(
            "maxpool1d input must be B x C x L, got {xs:?}"
        )));
    }
    if window == 0 || stride == 0 {
        return Err(Error::config(
            "maxpool1d window and stride must be positive".to_string(),
        ));
    }
    let (bsz, c, l) = (xs[0], xs[1], xs[2]);
    let lo = l.div_ceil(stride);
    let mut out = Tensor::zeros(&[bsz, c, lo]);
    let mut argmax = vec![0usize; bsz * c * lo];
    for b in 0..bsz {
        for ch in 0..c {
            let row = &x.data()[(b * c + ch) * l..(b * c + ch + 1) * l];
            for (jo, start) in (0..l).step_by(stride).enumerate() {
                let end = (start + window).min(l);
                let mut best = start;
                for j in start + 1..end {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out.data_mut()[(b * c + ch) * lo + jo] = row[best];
                argmax[(b * c + ch) * lo + jo] = (b * c + ch) * l + best;
            }
        }
    }
    let cache = MaxPoolCache {
        in_shape: xs.to_vec(),
        argmax,
        out_shape: vec![bsz, c, lo],
    };
    Ok((out, cache))
}

pub fn maxpool1d_backward(cache: &MaxPoolCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cache.out_shape.as_slice() {
        return Err(Error::usage(format!(
            "maxpool1d_backward: gradient shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            cache.out_shape
        )));
    }
    let mut gx = Tensor::zeros(&cache.in_shape);
    for (i, &src) in cache.argmax.iter().enumerate() {
        gx.data_mut()[src] += grad_out.data()[i];
    }
    Ok(gx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    /// out x in
    pub weight: Tensor,
    /// out
    pub bias: Tensor,
}

impl LinearParams {
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(LinearParams {
            weight: crate::rng::rng_uniform(rng, -bound, bound, &[out_dim, in_dim])?,
            bias: Tensor::zeros(&[out_dim]),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct LinearCache {
    input: Tensor,
    weight: Tensor,
}

/// Affine map y = x W^T + b for a batch of row vectors.
pub fn linear(x: &Tensor, p: &LinearParams) -> Result<(Tensor, LinearCache)> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::shape(format!(
            "linear input must be B x in, got {xs:?}"
        )));
    }
    let (bsz, din) = (xs[0], xs[1]);
    if din != p.in_dim() {
        return Err(Error::shape(format!(
            "linear: input dim {din} does not match weight in-dim {}",
            p.in_dim()
        )));
    }
    let dout = p.out_dim();
    let mut out = Tensor::zeros(&[bsz, dout]);
    for b in 0..bsz {
        let xrow = &x.data()[b * din..(b + 1) * din];
        let orow = &mut out.data_mut()[b * dout..(b + 1) * dout];
        for o in 0..dout {
            let wrow = &p.weight.data()[o * din..(o + 1) * din];
            let mut acc = p.bias.data()[o];
            for (xv, wv) in xrow.iter().zip(wrow) {
                acc += xv * wv;
            }
            orow[o] = acc;
        }
    }
    Ok((
        out,
        LinearCache {
            input: x.clone(),
            weight: p.weight.clone(),
        },
    ))
}

pub fn linear_backward(cache: &LinearCache, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (bsz, din) = (cache.input.shape()[0], cache.input.shape()[1]);
    let dout = cache.weight.shape()[0];
    if grad_out.shape() != [bsz, dout] {
        return Err(Error::usage(format!(
            "linear_backward: gradient shape {:?} does not match forward output [{bsz}, {dout}]",
            grad_out.shape()
        )));
    }
    let mut gx = Tensor::zeros(&[bsz, din]);
    let mut gw = Tensor::zeros(&[dout, din]);
    let mut gb = Tensor::zeros(&[dout]);
    for b in 0..bsz {
        let xrow = &cache.input.data()[b * din..(b + 1) * din];
        let grow = &grad_out.data()[b * dout..(b + 1) * dout];
        for o in 0..dout {
            let g = grow[o];
            if g == 0.0 {
                continue;
            }
            gb.data_mut()[o] += g;
            let wrow = &cache.weight.data()[o * din..(o + 1) * din];
            let gwrow = &mut gw.data_mut()[o * din..(o + 1) * din];
            for i in 0..din {
                gwrow[i] += g * xrow[i];
                gx.data_mut()[b * din + i] += g * wrow[i];
            }
        }
    }
    Ok((gx, gw, gb))
}

#[derive(Debug, Clone)]
pub struct ActivationCache {
    input: Tensor,
    id: ActivationId,
}

/// Elementwise activation of any tensor shape.
pub fn activation(x: &Tensor, id: ActivationId) -> (Tensor, ActivationCache) {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = id.eval(*v);
    }
    (
        out,
        ActivationCache {
            input: x.clone(),
            id,
        },
    )
}

pub fn activation_backward(cache: &ActivationCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cache.input.shape() {
        return Err(Error::usage(format!(
            "activation_backward: gradient shape {:?} does not match input {:?}",
            grad_out.shape(),
            cache.input.shape()
        )));
    }
    let mut gx = cache.input.clone();
    for (g, up) in gx.data_mut().iter_mut().zip(grad_out.data()) {
        *g = cache.id.deriv(*g) * up;
    }
    Ok(gx)
}

/// Row softmax with max subtraction; rows sum to one and stay strictly
/// positive even for large logits.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 2 {
        return Err(Error::shape(format!(
            "softmax input must be B x C, got {xs:?}"
        )));
    }
    let (bsz, c) = (xs[0], xs[1]);
    let mut out = Tensor::zeros(xs);
    for b in 0..bsz {
        let row = &x.data()[b * c..(b + 1) * c];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let orow = &mut out.data_mut()[b * c..(b + 1) * c];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Ok(out)
}

/// B x L x p -> B x p x L (and back, since the op is an involution on the
/// last two axes).
pub fn transpose_last_two(x: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != 3 {
        return Err(Error::shape(format!(
            "transpose expects a 3-axis tensor, got {xs:?}"
        )));
    }
    let (bsz, a, b) = (xs[0], xs[1], xs[2]);
    let mut out = Tensor::zeros(&[bsz, b, a]);
    for bi in 0..bsz {
        for i in 0..a {
            for j in 0..b {
                out.data_mut()[(bi * b + j) * a + i] = x.data()[(bi * a + i) * b + j];
            }
        }
    }
    Ok(out)
}
