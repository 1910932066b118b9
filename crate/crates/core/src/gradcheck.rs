use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative error that stays stable near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest componentwise relative error between two tensors.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "max_rel_err: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max))
}

/// Central-difference gradient of a scalar-valued function.
///
/// Probes f at x ± h e_i for every coordinate; any non-finite probe value is
/// reported as a numerics error rather than silently propagated.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numerics(format!(
                "finite_diff_grad: non-finite probe at coordinate {i} (f+={fp}, f-={fm})"
            )));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;
