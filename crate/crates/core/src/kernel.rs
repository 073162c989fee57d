//! Distance kernels `k(d) ∈ (0, 1]` with `k(0) = 1`.
//!
//! Every kernel is the multiplicative form `exp(B(d))` of an additive attention
//! bias `B(d) ≤ 0`, where `d = |j - i|` is the token distance. The log form is
//! always evaluated in closed form so that large distances stay finite even
//! when the linear value underflows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frequency base of the sinusoidal position vectors used by the Sandwich kernel.
pub const SINUSOID_BASE: f64 = 10_000.0;

/// One distance kernel and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelKind {
    /// `exp(-slope * d)`; the ALiBi kernel.
    Exponential { slope: f64 },
    /// `exp(-slope * d^2)`.
    Gaussian { slope: f64 },
    /// `(1 + r2 * d)^(-r1)`; the KERPLE logarithmic variant.
    KerpleLog { r1: f64, r2: f64 },
    /// `exp(scale * (<p_i, p_j> - dim/2))` over sinusoidal position vectors,
    /// taken through its running minimum so the kernel never rises with distance.
    SandwichSinusoidal { dim: usize, scale: f64 },
    /// `exp(table[min(d, K)] - table[0])` with `K = num_buckets`.
    T5Bucket { num_buckets: usize, table: Vec<f64> },
}

impl KernelKind {
    /// T5 kernel with a zero (bias-free) table.
    pub fn t5_zeros(num_buckets: usize) -> Self {
        KernelKind::T5Bucket {
            num_buckets,
            table: vec![0.0; num_buckets + 1],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelKind::Exponential { .. } => "exponential",
            KernelKind::Gaussian { .. } => "gaussian",
            KernelKind::KerpleLog { .. } => "kerple-log",
            KernelKind::SandwichSinusoidal { .. } => "sandwich",
            KernelKind::T5Bucket { .. } => "t5",
        }
    }

    /// Checks the parameter invariants of the variant.
    pub fn validate(&self) -> Result<()> {
        fn positive(what: &str, v: f64) -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("{what} must be finite and > 0, got {v}")))
            }
        }
        match self {
            KernelKind::Exponential { slope } => positive("exponential slope", *slope),
            KernelKind::Gaussian { slope } => positive("gaussian slope", *slope),
            KernelKind::KerpleLog { r1, r2 } => {
                positive("kerple r1", *r1)?;
                positive("kerple r2", *r2)
            }
            KernelKind::SandwichSinusoidal { dim, scale } => {
                if *dim == 0 || dim % 2 != 0 {
                    return Err(Error::config(format!(
                        "sandwich dim must be a positive even integer, got {dim}"
                    )));
                }
                positive("sandwich scale", *scale)
            }
            KernelKind::T5Bucket { num_buckets, table } => {
                if *num_buckets == 0 {
                    return Err(Error::config("t5 num_buckets must be >= 1"));
                }
                if table.len() != num_buckets + 1 {
                    return Err(Error::config(format!(
                        "t5 table must hold num_buckets + 1 = {} entries, got {}",
                        num_buckets + 1,
                        table.len()
                    )));
                }
                if let Some(bad) = table.iter().find(|v| !v.is_finite()) {
                    return Err(Error::config(format!("t5 table entry {bad} is not finite")));
                }
                Ok(())
            }
        }
    }

    /// Parameters updated by training, in canonical order.
    pub fn learnable_params(&self) -> Vec<f64> {
        match self {
            KernelKind::KerpleLog { r1, r2 } => vec![*r1, *r2],
            KernelKind::T5Bucket { table, .. } => table.clone(),
            _ => Vec::new(),
        }
    }

    pub fn learnable_names(&self) -> Vec<String> {
        match self {
            KernelKind::KerpleLog { .. } => vec!["r1".into(), "r2".into()],
            KernelKind::T5Bucket { table, .. } => {
                (0..table.len()).map(|i| format!("table[{i}]")).collect()
            }
            _ => Vec::new(),
        }
    }

    /// For each learnable parameter, whether it is constrained to be positive.
    pub fn positive_params(&self) -> Vec<bool> {
        match self {
            KernelKind::KerpleLog { .. } => vec![true, true],
            KernelKind::T5Bucket { table, .. } => vec![false; table.len()],
            _ => Vec::new(),
        }
    }

    /// Replaces the learnable parameters (same order as [`Self::learnable_params`]).
    pub fn set_learnable_params(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.learnable_params().len();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "{} expects {expected} learnable parameters, got {}",
                self.name(),
                values.len()
            )));
        }
        match self {
            KernelKind::KerpleLog { r1, r2 } => {
                *r1 = values[0];
                *r2 = values[1];
            }
            KernelKind::T5Bucket { table, .. } => table.copy_from_slice(values),
            _ => {}
        }
        self.validate()
    }
}

/// Partial derivatives of a kernel value with respect to its learnable parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KernelGrad {
    partials: Vec<(String, f64)>,
}

impl KernelGrad {
    /// A zero gradient carrying the parameter names of `kind`.
    pub fn zeros(kind: &KernelKind) -> Self {
        KernelGrad {
            partials: kind.learnable_names().into_iter().map(|n| (n, 0.0)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.partials.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn is_empty(&self) -> bool {
        self.partials.is_empty()
    }

    pub fn len(&self) -> usize {
        self.partials.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.partials.iter().map(|(n, v)| (n.as_str(), *v))
    }

    /// Values in canonical parameter order.
    pub fn values(&self) -> Vec<f64> {
        self.partials.iter().map(|(_, v)| *v).collect()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, v) in &mut self.partials {
            *v *= factor;
        }
    }

    /// `self += factor * other`; both must describe the same parameters.
    pub fn add_scaled(&mut self, other: &KernelGrad, factor: f64) {
        debug_assert_eq!(self.partials.len(), other.partials.len());
        for ((_, a), (_, b)) in self.partials.iter_mut().zip(&other.partials) {
            *a += factor * b;
        }
    }
}

/// `sum_k cos(d * w_k) - dim/2` with `w_k = base^(-2k/dim)`: the centred inner
/// product of two sinusoidal position vectors at distance `d`.
fn sinusoid_inner(dim: usize, d: usize) -> f64 {
    let half = dim / 2;
    let d = d as f64;
    let mut acc = 0.0;
    for k in 0..half {
        let freq = SINUSOID_BASE.powf(-2.0 * k as f64 / dim as f64);
        acc += (d * freq).cos();
    }
    acc - half as f64
}

/// Additive bias `B(d) = log k(d)`, in closed form.
///
/// Assumes `kind` is valid. For the Sandwich kernel this is `O(d * dim)`; use
/// [`log_kernel_series`] when a whole range of distances is needed.
pub fn eval_log_kernel(kind: &KernelKind, d: usize) -> f64 {
    let x = d as f64;
    match kind {
        KernelKind::Exponential { slope } => -slope * x,
        KernelKind::Gaussian { slope } => -slope * x * x,
        KernelKind::KerpleLog { r1, r2 } => -r1 * (r2 * x).ln_1p(),
        KernelKind::SandwichSinusoidal { dim, scale } => {
            let min = (0..=d)
                .map(|t| sinusoid_inner(*dim, t))
                .fold(0.0_f64, f64::min);
            scale * min
        }
        KernelKind::T5Bucket { num_buckets, table } => {
            table[d.min(*num_buckets)] - table[0]
        }
    }
}

/// `[B(0), B(1), ..., B(len - 1)]` for one kernel.
pub fn log_kernel_series(kind: &KernelKind, len: usize) -> Vec<f64> {
    match kind {
        KernelKind::SandwichSinusoidal { dim, scale } => {
            let mut running = 0.0_f64;
            (0..len)
                .map(|d| {
                    running = running.min(sinusoid_inner(*dim, d));
                    scale * running
                })
                .collect()
        }
        _ => (0..len).map(|d| eval_log_kernel(kind, d)).collect(),
    }
}

/// Multiplicative kernel value `k(d) = exp(B(d))`.
///
/// Underflow to zero is allowed; a NaN or infinite result is reported as an
/// overflow naming the kernel and distance.
pub fn eval_kernel(kind: &KernelKind, d: usize) -> Result<f64> {
    kind.validate()?;
    let log = eval_log_kernel(kind, d);
    let value = log.exp();
    if log.is_nan() || !value.is_finite() {
        return Err(Error::KernelOverflow {
            kind: format!("{kind:?}"),
            distance: d,
        });
    }
    Ok(value)
}

/// `∂B(d)/∂θ` for every learnable parameter θ of `kind`.
pub fn grad_log_kernel_params(kind: &KernelKind, d: usize) -> KernelGrad {
    let mut grad = KernelGrad::zeros(kind);
    match kind {
        KernelKind::KerpleLog { r1, r2 } => {
            let x = d as f64;
            grad.partials[0].1 = -(r2 * x).ln_1p();
            grad.partials[1].1 = -r1 * x / (1.0 + r2 * x);
        }
        KernelKind::T5Bucket { num_buckets, .. } => {
            let bucket = d.min(*num_buckets);
            if bucket != 0 {
                grad.partials[bucket].1 = 1.0;
                grad.partials[0].1 = -1.0;
            }
        }
        _ => {}
    }
    grad
}

/// `∂k(d)/∂θ` for every learnable parameter θ of `kind`; empty for kernels
/// without learnable parameters.
pub fn grad_kernel_params(kind: &KernelKind, d: usize) -> KernelGrad {
    let mut grad = grad_log_kernel_params(kind, d);
    grad.scale(eval_log_kernel(kind, d).exp());
    grad
}
