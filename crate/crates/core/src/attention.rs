//! Causal softmax attention with an additive relative bias.
//!
//! Logits are `scale · q_i·k_j + B(i − j)` for `j ≤ i`; positions `j > i` are
//! masked and receive exactly zero weight. Softmax subtracts the row maximum.
//! The backward pass returns gradients for Q, K, V, for every bias distance
//! (summed along the Toeplitz diagonals) and, when the bias pack carries its
//! fusion specs, for the fusion weights and kernel parameters of each head.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::bias::BiasPack;
use crate::error::{Error, Result};
use crate::fusion::{accumulate_fusion_grad, FusionGrad};

/// Largest length accepted by [`check_multiplicative_equivalence`].
pub const EQUIVALENCE_MAX_LEN: usize = 1024;
/// Largest `|scale · q·k|` accepted by [`check_multiplicative_equivalence`].
pub const EQUIVALENCE_MAX_LOGIT: f64 = 40.0;

/// Q, K, V as `H × L × d_h` tensors plus the bias to apply.
#[derive(Debug, Clone)]
pub struct AttentionInput<'a> {
    pub q: Array3<f64>,
    pub k: Array3<f64>,
    pub v: Array3<f64>,
    pub bias: &'a BiasPack,
    pub scale: f64,
}

impl<'a> AttentionInput<'a> {
    /// Input with the default `1/√d_h` scale.
    pub fn new(q: Array3<f64>, k: Array3<f64>, v: Array3<f64>, bias: &'a BiasPack) -> Result<Self> {
        let d_h = q.dim().2;
        let input = AttentionInput {
            q,
            k,
            v,
            bias,
            scale: 1.0 / (d_h.max(1) as f64).sqrt(),
        };
        input.validate()?;
        Ok(input)
    }

    pub fn heads(&self) -> usize {
        self.q.dim().0
    }

    pub fn len(&self) -> usize {
        self.q.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let (h, l, d) = self.q.dim();
        if self.k.dim() != (h, l, d) || self.v.dim() != (h, l, d) {
            return Err(Error::Shape(format!(
                "q {:?}, k {:?}, v {:?} must agree",
                self.q.dim(),
                self.k.dim(),
                self.v.dim()
            )));
        }
        if self.bias.heads() != h {
            return Err(Error::Shape(format!(
                "bias has {} heads, inputs have {h}",
                self.bias.heads()
            )));
        }
        if self.bias.len() < l {
            return Err(Error::Shape(format!(
                "bias covers length {}, inputs have {l}",
                self.bias.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `H × L × d_h`.
    pub out: Array3<f64>,
    /// `H × L × L` row-stochastic weights, zero above the diagonal.
    pub post_softmax: Array3<f64>,
}

fn logits(input: &AttentionInput<'_>, head: usize) -> Array2<f64> {
    let q = input.q.index_axis(Axis(0), head);
    let k = input.k.index_axis(Axis(0), head);
    q.dot(&k.t())
}

pub fn attention_forward(input: &AttentionInput<'_>) -> Result<AttentionOutput> {
    input.validate()?;
    let (heads, len, d_h) = input.q.dim();
    let mut post = Array3::<f64>::zeros((heads, len, len));
    let mut out = Array3::<f64>::zeros((heads, len, d_h));
    for h in 0..heads {
        let bias = input.bias.distance_values(h);
        let mut p = post.index_axis_mut(Axis(0), h);
        let q = input.q.index_axis(Axis(0), h);
        let k = input.k.index_axis(Axis(0), h);
        general_mat_mul(input.scale, &q, &k.t(), 0.0, &mut p);
        let ps = p.as_slice_mut().expect("fresh array");
        for i in 0..len {
            let (prow, masked) = ps[i * len..(i + 1) * len].split_at_mut(i + 1);
            masked.fill(0.0);
            let mut max = f64::NEG_INFINITY;
            for (j, pz) in prow.iter_mut().enumerate() {
                let z = *pz + bias[i - j];
                if !z.is_finite() {
                    return Err(Error::Numeric { head: h, row: i });
                }
                *pz = z;
                max = max.max(z);
            }
            let mut total = 0.0;
            for pz in prow.iter_mut() {
                *pz = (*pz - max).exp();
                total += *pz;
            }
            let inv = 1.0 / total;
            prow.iter_mut().for_each(|pz| *pz *= inv);
        }
        let v = input.v.index_axis(Axis(0), h);
        general_mat_mul(1.0, &p, &v, 0.0, &mut out.index_axis_mut(Axis(0), h));
    }
    Ok(AttentionOutput {
        out,
        post_softmax: post,
    })
}

/// Runs attention through the additive-logit path and through explicit
/// renormalization of `exp(q·k) · exp(B)` in linear space, returning the
/// largest elementwise difference between the two weight tensors.
pub fn check_multiplicative_equivalence(input: &AttentionInput<'_>) -> Result<f64> {
    let additive = attention_forward(input)?;
    let (heads, len, _) = input.q.dim();
    if len > EQUIVALENCE_MAX_LEN {
        return Err(Error::Precondition(format!(
            "length {len} exceeds {EQUIVALENCE_MAX_LEN} for the linear-space path"
        )));
    }
    let mut worst: f64 = 0.0;
    for h in 0..heads {
        let raw = logits(input, h);
        let kernel: Vec<f64> = input.bias.distance_values(h).iter().map(|b| b.exp()).collect();
        for i in 0..len {
            let mut row = vec![0.0; i + 1];
            for j in 0..=i {
                let z = input.scale * raw[[i, j]];
                if z.abs() > EQUIVALENCE_MAX_LOGIT {
                    return Err(Error::Precondition(format!(
                        "|logit| {z} exceeds {EQUIVALENCE_MAX_LOGIT} at head {h}, row {i}"
                    )));
                }
                row[j] = z.exp() * kernel[i - j];
            }
            let total: f64 = row.iter().sum();
            if !(total.is_finite() && total > 0.0) {
                return Err(Error::Precondition(format!(
                    "linear-space row sum {total} at head {h}, row {i}"
                )));
            }
            for j in 0..len {
                let lin = row.get(j).map_or(0.0, |r| r / total);
                worst = worst.max((lin - additive.post_softmax[[h, i, j]]).abs());
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub dq: Array3<f64>,
    pub dk: Array3<f64>,
    pub dv: Array3<f64>,
    /// `H × L`: gradient with respect to the additive bias at each distance.
    pub d_bias: Array2<f64>,
    /// Per head, gradients of the fusion weights and kernel parameters;
    /// empty when the bias pack carries no fusion specs.
    pub bias_params: Vec<FusionGrad>,
}

pub fn attention_backward(
    input: &AttentionInput<'_>,
    output: &AttentionOutput,
    upstream: &Array3<f64>,
) -> Result<AttentionGrads> {
    let mut grads = attention_backward_tensors(input, output, upstream)?;
    grads.bias_params = input
        .bias
        .specs()
        .iter()
        .enumerate()
        .map(|(h, spec)| accumulate_fusion_grad(spec, grads.d_bias.slice(s![h, ..]).as_slice().unwrap()))
        .collect();
    Ok(grads)
}

/// Like [`attention_backward`] but leaves `bias_params` empty, for callers
/// that sum `d_bias` over a batch before differentiating the kernels.
pub(crate) fn attention_backward_tensors(
    input: &AttentionInput<'_>,
    output: &AttentionOutput,
    upstream: &Array3<f64>,
) -> Result<AttentionGrads> {
    input.validate()?;
    let (heads, len, d_h) = input.q.dim();
    if output.out.dim() != (heads, len, d_h)
        || output.post_softmax.dim() != (heads, len, len)
        || upstream.dim() != (heads, len, d_h)
    {
        return Err(Error::Shape(format!(
            "retained forward state {:?}/{:?} or upstream {:?} does not match inputs {:?}",
            output.out.dim(),
            output.post_softmax.dim(),
            upstream.dim(),
            input.q.dim()
        )));
    }
    let mut dq = Array3::zeros((heads, len, d_h));
    let mut dk = Array3::zeros((heads, len, d_h));
    let mut dv = Array3::zeros((heads, len, d_h));
    let mut d_bias = Array2::zeros((heads, len));
    for h in 0..heads {
        let p = output.post_softmax.index_axis(Axis(0), h);
        let d_out = upstream.index_axis(Axis(0), h);
        let v = input.v.index_axis(Axis(0), h);
        dv.index_axis_mut(Axis(0), h).assign(&p.t().dot(&d_out));
        let dp = d_out.dot(&v.t());
        let ds = softmax_backward(p, dp.view());
        let mut db = d_bias.index_axis_mut(Axis(0), h);
        let db = db.as_slice_mut().expect("standard layout");
        for (i, row) in ds.outer_iter().enumerate() {
            let row = row.to_slice().expect("standard layout");
            for (j, g) in row[..=i].iter().enumerate() {
                db[i - j] += g;
            }
        }
        let k = input.k.index_axis(Axis(0), h);
        let q = input.q.index_axis(Axis(0), h);
        dq.index_axis_mut(Axis(0), h)
            .assign(&(ds.dot(&k) * input.scale));
        dk.index_axis_mut(Axis(0), h)
            .assign(&(ds.t().dot(&q) * input.scale));
    }
    Ok(AttentionGrads {
        dq,
        dk,
        dv,
        d_bias,
        bias_params: Vec::new(),
    })
}

/// Gradient of the pre-softmax logits given `p` and `∂L/∂p` (causal rows).
fn softmax_backward(p: ArrayView2<'_, f64>, dp: ArrayView2<'_, f64>) -> Array2<f64> {
    let len = p.nrows();
    let (p, dp) = (p.as_standard_layout(), dp.as_standard_layout());
    let (p, dp) = (p.as_slice().expect("standard layout"), dp.as_slice().expect("standard layout"));
    let mut ds = Array2::zeros((len, len));
    let out_all = ds.as_slice_mut().expect("standard layout");
    for i in 0..len {
        let (pr, dr) = (&p[i * len..=i * len + i], &dp[i * len..=i * len + i]);
        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for ((o, a), b) in out_all[i * len..=i * len + i].iter_mut().zip(pr).zip(dr) {
            *o = a * (b - dot);
        }
    }
    ds
}
