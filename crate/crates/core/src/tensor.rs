use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense f64 tensor with up to 4 axes, row-major storage.
///
/// Tensors are plain values: every operation returns a fresh tensor and
/// never aliases the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub const MAX_AXES: usize = 4;

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_AXES {
            return Err(Error::shape(format!(
                "tensor must have 1..={MAX_AXES} axes, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized axis in shape {shape:?}")));
        }
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; element_count(shape)]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(shape.to_vec(), vec![value; element_count(shape)]).expect("full: invalid shape")
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("from_vec: empty input")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of a multi-index; panics on rank mismatch, errors on
    /// out-of-range coordinates.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::shape(format!(
                "index rank {} does not match tensor rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut flat = 0usize;
        for (axis, (&i, &d)) in index.iter().zip(&self.shape).enumerate() {
            if i >= d {
                return Err(Error::shape(format!(
                    "index {i} out of range for axis {axis} of extent {d}"
                )));
            }
            flat = flat * d + i;
        }
        Ok(flat)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let flat = self.offset(index)?;
        self.data[flat] = value;
        Ok(())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    /// Scalar broadcast: every element times `s`. The only broadcasting the
    /// crate supports is scalar-with-tensor.
    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|&a| a * s).collect();
        Tensor::new(self.shape.clone(), data).expect("scale preserves shape")
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data.iter().map(|&a| a + s).collect();
        Tensor::new(self.shape.clone(), data).expect("add_scalar preserves shape")
    }

    /// Saturates every element into [lo, hi].
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let data = self.data.iter().map(|&a| a.clamp(lo, hi)).collect();
        Tensor::new(self.shape.clone(), data).expect("clamp preserves shape")
    }

    /// In-place axpy: self += alpha * other. Shapes must match.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "axpy: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }
}

/// Standard matrix product with f64 accumulation. `a` is r x k, `b` is k x c.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ashape, bshape) = (a.shape(), b.shape());
    if ashape.len() != 2 || bshape.len() != 2 {
        return Err(Error::shape(format!(
            "matmul expects 2-D operands, got {ashape:?} and {bshape:?}"
        )));
    }
    let (r, k) = (ashape[0], ashape[1]);
    let (k2, c) = (bshape[0], bshape[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {k} vs {k2}"
        )));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for t in 0..k {
            let aik = a.data()[i * k + t];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data()[t * c..(t + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![r, c], out)
}
