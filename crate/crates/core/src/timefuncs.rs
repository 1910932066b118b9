//! The ten basis time functions, activations, and the kernel-value function
//! g(theta, dt) together with its analytic partial derivatives.
//!
//! A kernel element for channel l is
//!
//! ```text
//! g(theta, dt)[l] = theta1[l] * ( sigma( h(theta3[l] * dt + theta4[l]) ) + theta2[l] )
//! ```
//!
//! so each kernel carries exactly four trainable vectors of length m no
//! matter how wide the kernel window is.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Arguments of exp/sinh/cosh are saturated into this window before
/// evaluation; outside it the functions are treated as constant (derivative
/// zero). e^20 ~ 4.9e8 keeps downstream f64 sums finite.
pub const ARG_CLAMP: f64 = 20.0;

/// How close to a tan pole (pi/2 + k*pi) an argument may get before the
/// evaluation is rejected instead of returning a huge or non-finite value.
pub const TAN_POLE_GUARD: f64 = 1e-6;

/// The ten scalar basis functions injecting trend/seasonality bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeFunctionId {
    Lin,
    Sin,
    Cos,
    Tan,
    Exp,
    Sq,
    Cube,
    Sinh,
    Cosh,
    Tanh,
}

pub const ALL_TIME_FUNCTIONS: [TimeFunctionId; 10] = [
    TimeFunctionId::Lin,
    TimeFunctionId::Sin,
    TimeFunctionId::Cos,
    TimeFunctionId::Tan,
    TimeFunctionId::Exp,
    TimeFunctionId::Sq,
    TimeFunctionId::Cube,
    TimeFunctionId::Sinh,
    TimeFunctionId::Cosh,
    TimeFunctionId::Tanh,
];

impl TimeFunctionId {
    pub fn as_str(self) -> &'static str {
        match self {
            TimeFunctionId::Lin => "lin",
            TimeFunctionId::Sin => "sin",
            TimeFunctionId::Cos => "cos",
            TimeFunctionId::Tan => "tan",
            TimeFunctionId::Exp => "exp",
            TimeFunctionId::Sq => "sq",
            TimeFunctionId::Cube => "cube",
            TimeFunctionId::Sinh => "sinh",
            TimeFunctionId::Cosh => "cosh",
            TimeFunctionId::Tanh => "tanh",
        }
    }
}

impl fmt::Display for TimeFunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TimeFunctionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_TIME_FUNCTIONS
            .iter()
            .copied()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown time function '{s}'")))
    }
}

/// Distance from `x` to the nearest pole of tan.
fn tan_pole_distance(x: f64) -> f64 {
    use std::f64::consts::{FRAC_PI_2, PI};
    let k = ((x - FRAC_PI_2) / PI).round();
    (x - (FRAC_PI_2 + k * PI)).abs()
}

/// h_id(x) per the basis definitions. exp/sinh/cosh see a clamped argument;
/// tan rejects arguments within [`TAN_POLE_GUARD`] of a pole rather than
/// returning a silent near-infinity.
pub fn eval_h(id: TimeFunctionId, x: f64) -> Result<f64> {
    Ok(match id {
        TimeFunctionId::Lin => x,
        TimeFunctionId::Sin => x.sin(),
        TimeFunctionId::Cos => x.cos(),
        TimeFunctionId::Tan => {
            if tan_pole_distance(x) < TAN_POLE_GUARD {
                return Err(Error::numerics(format!(
                    "tan argument {x} is within {TAN_POLE_GUARD} of a pole"
                )));
            }
            x.tan()
        }
        TimeFunctionId::Exp => x.clamp(-ARG_CLAMP, ARG_CLAMP).exp(),
        TimeFunctionId::Sq => x * x,
        TimeFunctionId::Cube => x * x * x,
        TimeFunctionId::Sinh => x.clamp(-ARG_CLAMP, ARG_CLAMP).sinh(),
        TimeFunctionId::Cosh => x.clamp(-ARG_CLAMP, ARG_CLAMP).cosh(),
        TimeFunctionId::Tanh => x.tanh(),
    })
}

/// dh/dx. Outside the clamp window of exp/sinh/cosh the function is constant,
/// so the derivative there is zero.
pub fn eval_h_deriv(id: TimeFunctionId, x: f64) -> Result<f64> {
    Ok(match id {
        TimeFunctionId::Lin => 1.0,
        TimeFunctionId::Sin => x.cos(),
        TimeFunctionId::Cos => -x.sin(),
        TimeFunctionId::Tan => {
            if tan_pole_distance(x) < TAN_POLE_GUARD {
                return Err(Error::numerics(format!(
                    "tan argument {x} is within {TAN_POLE_GUARD} of a pole"
                )));
            }
            let c = x.cos();
            1.0 / (c * c)
        }
        TimeFunctionId::Exp => {
            if x.abs() > ARG_CLAMP {
                0.0
            } else {
                x.exp()
            }
        }
        TimeFunctionId::Sq => 2.0 * x,
        TimeFunctionId::Cube => 3.0 * x * x,
        TimeFunctionId::Sinh => {
            if x.abs() > ARG_CLAMP {
                0.0
            } else {
                x.cosh()
            }
        }
        TimeFunctionId::Cosh => {
            if x.abs() > ARG_CLAMP {
                0.0
            } else {
                x.sinh()
            }
        }
        TimeFunctionId::Tanh => {
            let t = x.tanh();
            1.0 - t * t
        }
    })
}

/// Activations usable as the sigma in g. Relu uses subgradient 0 at the kink.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationId {
    Sigmoid,
    Relu,
    Identity,
    Tanh,
}

impl ActivationId {
    pub fn as_str(self) -> &'static str {
        match self {
            ActivationId::Sigmoid => "sigmoid",
            ActivationId::Relu => "relu",
            ActivationId::Identity => "identity",
            ActivationId::Tanh => "tanh",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            ActivationId::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationId::Relu => x.max(0.0),
            ActivationId::Identity => x,
            ActivationId::Tanh => x.tanh(),
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            ActivationId::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            ActivationId::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationId::Identity => 1.0,
            ActivationId::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

impl FromStr for ActivationId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(ActivationId::Sigmoid),
            "relu" => Ok(ActivationId::Relu),
            "identity" => Ok(ActivationId::Identity),
            "tanh" => Ok(ActivationId::Tanh),
            other => Err(Error::config(format!("unknown activation '{other}'"))),
        }
    }
}

/// The trainable parameters of one time-parameterized kernel: four length-m
/// vectors plus the fixed choice of basis function and activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub theta1: Tensor,
    pub theta2: Tensor,
    pub theta3: Tensor,
    pub theta4: Tensor,
    pub h: TimeFunctionId,
    pub sigma: ActivationId,
}

/// Gradients for one kernel, mirroring the four theta vectors.
#[derive(Debug, Clone)]
pub struct KernelGrads {
    pub theta1: Tensor,
    pub theta2: Tensor,
    pub theta3: Tensor,
    pub theta4: Tensor,
}

impl KernelGrads {
    pub fn zeros(m: usize) -> Self {
        KernelGrads {
            theta1: Tensor::zeros(&[m]),
            theta2: Tensor::zeros(&[m]),
            theta3: Tensor::zeros(&[m]),
            theta4: Tensor::zeros(&[m]),
        }
    }
}

impl KernelParams {
    pub fn new(
        theta1: Tensor,
        theta2: Tensor,
        theta3: Tensor,
        theta4: Tensor,
        h: TimeFunctionId,
        sigma: ActivationId,
    ) -> Result<Self> {
        let m = theta1.len();
        for (name, t) in [
            ("theta2", &theta2),
            ("theta3", &theta3),
            ("theta4", &theta4),
        ] {
            if t.len() != m || t.shape().len() != 1 {
                return Err(Error::shape(format!(
                    "{name} must be a length-{m} vector, got shape {:?}",
                    t.shape()
                )));
            }
        }
        if theta1.shape().len() != 1 {
            return Err(Error::shape("theta1 must be a vector".to_string()));
        }
        Ok(KernelParams {
            theta1,
            theta2,
            theta3,
            theta4,
            h,
            sigma,
        })
    }

    /// Channel count m.
    pub fn channels(&self) -> usize {
        self.theta1.len()
    }

    /// Trainable scalar count: always 4m, independent of kernel size.
    pub fn param_count(&self) -> usize {
        4 * self.channels()
    }

    /// Fresh kernel with theta1 fan-in scaled by the kernel window size,
    /// theta2 = 0 and theta4 near 0. The theta3 time-scale draw depends on
    /// the basis function: bounded periodic functions (sin, cos) sample
    /// frequencies up to [`PERIODIC_FREQ_INIT_MAX`] so that seasonal
    /// structure inside a patch is expressible at initialization, while
    /// unbounded functions stay near 1 to keep their outputs tame.
    pub fn init(
        m: usize,
        kernel_size: usize,
        h: TimeFunctionId,
        sigma: ActivationId,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / ((m * kernel_size) as f64).sqrt();
        let theta1 = crate::rng::rng_uniform(rng, -bound, bound, &[m]).expect("bounds valid");
        let theta2 = Tensor::zeros(&[m]);
        let periodic = matches!(h, TimeFunctionId::Sin | TimeFunctionId::Cos);
        let theta3_hi = if periodic {
            PERIODIC_FREQ_INIT_MAX
        } else {
            1.5
        };
        let theta4_hi = if periodic { std::f64::consts::PI } else { 0.1 };
        let theta3 = crate::rng::rng_uniform(rng, 0.5, theta3_hi, &[m]).expect("bounds valid");
        let theta4 =
            crate::rng::rng_uniform(rng, -theta4_hi, theta4_hi, &[m]).expect("bounds valid");
        KernelParams {
            theta1,
            theta2,
            theta3,
            theta4,
            h,
            sigma,
        }
    }
}

/// Upper bound of the theta3 init range for sin/cos kernels. Times are
/// normalized to [0, 1], so this is an angular frequency: 40 rad covers
/// seasonal structure down to ~1/6 of the series span. For these two
/// functions theta4 is a phase and draws uniformly from [-pi, pi].
pub const PERIODIC_FREQ_INIT_MAX: f64 = 40.0;

/// g(theta, dt): the kernel column for time offset `dt`, one entry per
/// channel. `dt` is a scalar shared across channels.
pub fn kernel_value(p: &KernelParams, dt: f64) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[p.channels()]);
    kernel_value_into(p, dt, out.data_mut())?;
    Ok(out)
}

/// Allocation-free form of [`kernel_value`] for inner convolution loops.
pub fn kernel_value_into(p: &KernelParams, dt: f64, out: &mut [f64]) -> Result<()> {
    let m = p.channels();
    debug_assert_eq!(out.len(), m);
    for l in 0..m {
        let u = p.theta3.data()[l] * dt + p.theta4.data()[l];
        let hv = eval_h(p.h, u)?;
        out[l] = p.theta1.data()[l] * (p.sigma.eval(hv) + p.theta2.data()[l]);
    }
    Ok(())
}

/// Chain rule through the closed form of g for a single `dt`, accumulated
/// into `grads`. `upstream[l]` is `dL/dg[l]`.
pub fn kernel_value_grads_into(
    p: &KernelParams,
    dt: f64,
    upstream: &[f64],
    grads: &mut KernelGrads,
) -> Result<()> {
    let m = p.channels();
    debug_assert_eq!(upstream.len(), m);
    for l in 0..m {
        let up = upstream[l];
        if up == 0.0 {
            continue;
        }
        let u = p.theta3.data()[l] * dt + p.theta4.data()[l];
        let hv = eval_h(p.h, u)?;
        let hd = eval_h_deriv(p.h, u)?;
        let sv = p.sigma.eval(hv);
        let sd = p.sigma.deriv(hv);
        let t1 = p.theta1.data()[l];
        let inner = up * t1 * sd * hd;
        grads.theta1.data_mut()[l] += up * (sv + p.theta2.data()[l]);
        grads.theta2.data_mut()[l] += up * t1;
        grads.theta3.data_mut()[l] += inner * dt;
        grads.theta4.data_mut()[l] += inner;
    }
    Ok(())
}

/// Gradients of g w.r.t. the four theta vectors for one `dt`.
pub fn kernel_value_grads(
    p: &KernelParams,
    dt: f64,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let mut g = KernelGrads::zeros(p.channels());
    kernel_value_grads_into(p, dt, upstream.data(), &mut g)?;
    Ok((g.theta1, g.theta2, g.theta3, g.theta4))
}
