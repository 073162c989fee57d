//! A small causal transformer with exact reverse-mode gradients.
//!
//! Architecture (fixed): token embedding, no absolute positions; `layers`
//! pre-norm residual blocks of biased multi-head attention and a one-hidden-
//! layer GELU (tanh form) feed-forward; final layer norm; untied vocabulary
//! projection. Position information enters only through the per-head
//! distance bias of every attention layer.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward_tensors, attention_forward, AttentionInput, AttentionOutput};
use crate::bias::{BiasMeta, BiasPack};
use crate::error::{Error, Result};
use crate::fusion::{accumulate_fusion_grad, fused_log_series, make_preset, FusionPreset, FusionSpec};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub train_len: usize,
    pub preset: FusionPreset,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::config("vocab must be >= 2"));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.d_ff == 0 {
            return Err(Error::config("layers and d_ff must be >= 1"));
        }
        if self.train_len < 8 {
            return Err(Error::config("train_len must be >= 8"));
        }
        if self.preset.heads() != self.heads {
            return Err(Error::config(format!(
                "preset '{}' has {} heads, model has {}",
                self.preset.name(),
                self.preset.heads(),
                self.heads
            )));
        }
        self.preset.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Dense tensors of the model (also used for their gradients).
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl Weights {
    pub fn zeros_like(other: &Weights) -> Weights {
        let mut w = other.clone();
        for s in w.slices_mut() {
            s.fill(0.0);
        }
        w
    }

    /// Every tensor as a flat slice, in a fixed order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = vec![self.embed.as_slice().unwrap()];
        for l in &self.layers {
            out.extend([
                l.ln1_g.as_slice().unwrap(),
                l.ln1_b.as_slice().unwrap(),
                l.wq.as_slice().unwrap(),
                l.wk.as_slice().unwrap(),
                l.wv.as_slice().unwrap(),
                l.wo.as_slice().unwrap(),
                l.ln2_g.as_slice().unwrap(),
                l.ln2_b.as_slice().unwrap(),
                l.w1.as_slice().unwrap(),
                l.b1.as_slice().unwrap(),
                l.w2.as_slice().unwrap(),
                l.b2.as_slice().unwrap(),
            ]);
        }
        out.extend([
            self.lnf_g.as_slice().unwrap(),
            self.lnf_b.as_slice().unwrap(),
            self.w_out.as_slice().unwrap(),
            self.b_out.as_slice().unwrap(),
        ]);
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.embed.as_slice_mut().unwrap()];
        for l in &mut self.layers {
            out.extend([
                l.ln1_g.as_slice_mut().unwrap(),
                l.ln1_b.as_slice_mut().unwrap(),
                l.wq.as_slice_mut().unwrap(),
                l.wk.as_slice_mut().unwrap(),
                l.wv.as_slice_mut().unwrap(),
                l.wo.as_slice_mut().unwrap(),
                l.ln2_g.as_slice_mut().unwrap(),
                l.ln2_b.as_slice_mut().unwrap(),
                l.w1.as_slice_mut().unwrap(),
                l.b1.as_slice_mut().unwrap(),
                l.w2.as_slice_mut().unwrap(),
                l.b2.as_slice_mut().unwrap(),
            ]);
        }
        out.extend([
            self.lnf_g.as_slice_mut().unwrap(),
            self.lnf_b.as_slice_mut().unwrap(),
            self.w_out.as_slice_mut().unwrap(),
            self.b_out.as_slice_mut().unwrap(),
        ]);
        out
    }

    pub fn num_values(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }
}

/// Model parameters: dense weights plus one fusion spec per (layer, head)
/// whose learnable kernel parameters train alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weights: Weights,
    pub bias: Vec<Vec<FusionSpec>>,
}

/// Gradients of the mean next-token loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Weights,
    /// Same order as [`Params::bias_values`].
    pub bias: Vec<f64>,
}

impl Params {
    /// Deterministic initialization: weights depend only on `cfg.seed` and
    /// the shapes, bias specs only on the preset.
    pub fn init(cfg: &ModelConfig) -> Result<Params> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab);
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut rng))
        };
        let residual = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let embed = normal(v, d, 1.0);
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: normal(d, d, 1.0 / (d as f64).sqrt()),
                wk: normal(d, d, 1.0 / (d as f64).sqrt()),
                wv: normal(d, d, 1.0 / (d as f64).sqrt()),
                wo: normal(d, d, residual / (d as f64).sqrt()),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: normal(d, ff, 1.0 / (d as f64).sqrt()),
                b1: Array1::zeros(ff),
                w2: normal(ff, d, residual / (ff as f64).sqrt()),
                b2: Array1::zeros(d),
            })
            .collect();
        let w_out = normal(d, v, 0.02);
        let weights = Weights {
            embed,
            layers,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            w_out,
            b_out: Array1::zeros(v),
        };
        let head_specs = (0..cfg.heads)
            .map(|h| make_preset(&cfg.preset, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Params {
            weights,
            bias: vec![head_specs; cfg.layers],
        })
    }

    /// Learnable bias parameters in (layer, head, component, parameter) order.
    pub fn bias_values(&self) -> Vec<f64> {
        self.bias
            .iter()
            .flatten()
            .flat_map(|spec| spec.components().iter().flat_map(|c| c.kind.learnable_params()))
            .collect()
    }

    /// Whether each bias value is constrained positive.
    pub fn bias_positive(&self) -> Vec<bool> {
        self.bias
            .iter()
            .flatten()
            .flat_map(|spec| spec.components().iter().flat_map(|c| c.kind.positive_params()))
            .collect()
    }

    pub fn set_bias_values(&mut self, values: &[f64]) -> Result<()> {
        let mut offset = 0;
        for spec in self.bias.iter_mut().flatten() {
            for c in 0..spec.components().len() {
                let n = spec.components()[c].kind.learnable_params().len();
                if n == 0 {
                    continue;
                }
                let chunk = values
                    .get(offset..offset + n)
                    .ok_or_else(|| Error::Shape("too few bias values".into()))?;
                spec.set_kernel_params(c, chunk)?;
                offset += n;
            }
        }
        if offset != values.len() {
            return Err(Error::Shape("too many bias values".into()));
        }
        Ok(())
    }

    /// Bias pack of one layer at sequence length `len`.
    pub fn layer_bias(&self, layer: usize, len: usize) -> Result<BiasPack> {
        let distances = self.bias[layer]
            .iter()
            .map(|spec| fused_log_series(spec, len))
            .collect();
        BiasPack::from_distances(
            distances,
            BiasMeta {
                preset: format!("layer{layer}"),
                schedule: String::new(),
            },
        )
    }
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (rows, d) = x.dim();
    let n = d as f64;
    let (g, b) = (g.as_slice().expect("contiguous"), b.as_slice().expect("contiguous"));
    let x = x.as_standard_layout();
    let mut xhat = Array2::<f64>::zeros((rows, d));
    let mut y = Array2::<f64>::zeros((rows, d));
    let mut inv_std = Array1::<f64>::zeros(rows);
    for (((xr, mut hr), mut yr), is) in x
        .outer_iter()
        .zip(xhat.outer_iter_mut())
        .zip(y.outer_iter_mut())
        .zip(inv_std.iter_mut())
    {
        let xr = xr.to_slice().expect("standard layout");
        let hr = hr.as_slice_mut().expect("standard layout");
        let yr = yr.as_slice_mut().expect("standard layout");
        let mean = xr.iter().sum::<f64>() / n;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        *is = 1.0 / (var + LN_EPS).sqrt();
        for j in 0..d {
            hr[j] = (xr[j] - mean) * *is;
            yr[j] = hr[j] * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `dx` and accumulates `dg`, `db`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    g: &Array1<f64>,
    dg: &mut Array1<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    let (rows, d) = dy.dim();
    let n = d as f64;
    let g = g.as_slice().expect("contiguous");
    let dg = dg.as_slice_mut().expect("contiguous");
    let db = db.as_slice_mut().expect("contiguous");
    let dy = dy.as_standard_layout();
    let mut dx = Array2::<f64>::zeros((rows, d));
    let mut dxhat = vec![0.0; d];
    for (((dyr, hr), mut dxr), is) in dy
        .outer_iter()
        .zip(cache.xhat.outer_iter())
        .zip(dx.outer_iter_mut())
        .zip(cache.inv_std.iter())
    {
        let dyr = dyr.to_slice().expect("standard layout");
        let hr = hr.to_slice().expect("standard layout");
        let dxr = dxr.as_slice_mut().expect("standard layout");
        let (mut mean_d, mut mean_dx) = (0.0, 0.0);
        for j in 0..d {
            dg[j] += dyr[j] * hr[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * hr[j];
        }
        mean_d /= n;
        mean_dx /= n;
        for j in 0..d {
            dxr[j] = (dxhat[j] - mean_d - hr[j] * mean_dx) * is;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[cfg(test)]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

/// `tanh(√(2/π)(x + 0.044715x³))`, through one `exp` (cheaper than libm `tanh`).
fn gelu_tanh(x: f64) -> f64 {
    let y = GELU_C * (x + 0.044715 * x * x * x);
    1.0 - 2.0 / ((2.0 * y).exp() + 1.0)
}

/// Derivative given `t = gelu_tanh(x)`.
fn gelu_grad_with(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
fn gelu_grad(x: f64) -> f64 {
    gelu_grad_with(x, gelu_tanh(x))
}

fn split_heads(m: ArrayView2<'_, f64>, heads: usize) -> Array3<f64> {
    let (len, d) = m.dim();
    let dh = d / heads;
    let mut out = Array3::<f64>::zeros((heads, len, dh));
    let dst = out.as_slice_mut().expect("fresh array");
    for (i, row) in m.outer_iter().enumerate() {
        let row = row.to_slice().expect("rows of a standard-layout matrix");
        for h in 0..heads {
            let at = (h * len + i) * dh;
            dst[at..at + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
        }
    }
    out
}

fn merge_heads(t: &Array3<f64>, mut dst: ndarray::ArrayViewMut2<'_, f64>) {
    let (heads, len, dh) = t.dim();
    let src = t.as_slice().expect("standard layout");
    for i in 0..len {
        let mut row = dst.row_mut(i);
        let row = row.as_slice_mut().expect("rows of a standard-layout matrix");
        for h in 0..heads {
            let at = (h * len + i) * dh;
            row[h * dh..(h + 1) * dh].copy_from_slice(&src[at..at + dh]);
        }
    }
}

struct SeqAttention {
    q: Array3<f64>,
    k: Array3<f64>,
    v: Array3<f64>,
    out: AttentionOutput,
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    attn: Vec<SeqAttention>,
    o: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    /// `tanh` term of the GELU at `u`.
    t: Array2<f64>,
    g: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    packs: Vec<BiasPack>,
    lnf: LnCache,
    hf: Array2<f64>,
}

/// Logits `(B·L) × vocab` for a batch of equal-length input sequences.
fn forward(
    params: &Params,
    cfg: &ModelConfig,
    inputs: &[&[usize]],
    keep: bool,
) -> Result<(Array2<f64>, Option<ForwardCache>)> {
    let batch = inputs.len();
    let len = inputs.first().map_or(0, |s| s.len());
    if batch == 0 || len == 0 || inputs.iter().any(|s| s.len() != len) {
        return Err(Error::Shape("batch must hold equal, non-empty sequences".into()));
    }
    let w = &params.weights;
    let d = cfg.d_model;
    let mut x = Array2::<f64>::zeros((batch * len, d));
    for (b, seq) in inputs.iter().enumerate() {
        for (i, &tok) in seq.iter().enumerate() {
            if tok >= cfg.vocab {
                return Err(Error::Shape(format!("token {tok} outside vocab {}", cfg.vocab)));
            }
            x.row_mut(b * len + i).assign(&w.embed.row(tok));
        }
    }
    let packs = (0..cfg.layers)
        .map(|l| params.layer_bias(l, len))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();
    let mut caches = Vec::with_capacity(if keep { cfg.layers } else { 0 });
    for (lw, pack) in w.layers.iter().zip(&packs) {
        let (h1, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
        let q = h1.dot(&lw.wq);
        let k = h1.dot(&lw.wk);
        let v = h1.dot(&lw.wv);
        let mut o = Array2::<f64>::zeros((batch * len, d));
        let mut attn = Vec::with_capacity(if keep { batch } else { 0 });
        for b in 0..batch {
            let rows = s![b * len..(b + 1) * len, ..];
            let input = AttentionInput {
                q: split_heads(q.slice(rows), cfg.heads),
                k: split_heads(k.slice(rows), cfg.heads),
                v: split_heads(v.slice(rows), cfg.heads),
                bias: pack,
                scale,
            };
            let out = attention_forward(&input)?;
            merge_heads(&out.out, o.slice_mut(rows));
            if keep {
                attn.push(SeqAttention {
                    q: input.q,
                    k: input.k,
                    v: input.v,
                    out,
                });
            }
        }
        x = x + o.dot(&lw.wo);
        let (h2, ln2) = layer_norm(&x, &lw.ln2_g, &lw.ln2_b);
        let u = h2.dot(&lw.w1) + &lw.b1;
        let t = u.mapv(gelu_tanh);
        let g = Zip::from(&u).and(&t).map_collect(|&x, &t| 0.5 * x * (1.0 + t));
        x = x + g.dot(&lw.w2) + &lw.b2;
        if keep {
            caches.push(LayerCache {
                ln1,
                h1,
                attn,
                o,
                ln2,
                h2,
                u,
                t,
                g,
            });
        }
    }
    let (hf, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
    let logits = hf.dot(&w.w_out) + &w.b_out;
    let cache = keep.then_some(ForwardCache {
        layers: caches,
        packs,
        lnf,
        hf,
    });
    Ok((logits, cache))
}

/// Per-position negative log-likelihoods and, optionally, `∂mean/∂logits`.
fn cross_entropy(logits: &Array2<f64>, targets: &[usize], want_grad: bool) -> (Vec<f64>, Option<Array2<f64>>) {
    let n = logits.nrows();
    let mut nll = Vec::with_capacity(n);
    let mut grad = want_grad.then(|| Array2::<f64>::zeros(logits.dim()));
    for (r, row) in logits.outer_iter().enumerate() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + total.ln();
        nll.push(log_z - row[targets[r]]);
        if let Some(g) = grad.as_mut() {
            let mut gr = g.row_mut(r);
            Zip::from(&mut gr).and(&row).for_each(|gv, &z| *gv = (z - log_z).exp() / n as f64);
            gr[targets[r]] -= 1.0 / n as f64;
        }
    }
    (nll, grad)
}

fn split_windows<'a>(windows: &[&'a [usize]], vocab: usize) -> Result<(Vec<&'a [usize]>, Vec<usize>)> {
    let mut inputs = Vec::with_capacity(windows.len());
    let mut targets = Vec::new();
    for w in windows {
        if w.len() < 2 {
            return Err(Error::Shape("windows need at least two tokens".into()));
        }
        if let Some(tok) = w.iter().find(|&&t| t >= vocab) {
            return Err(Error::Shape(format!("token {tok} outside vocab {vocab}")));
        }
        inputs.push(&w[..w.len() - 1]);
        targets.extend_from_slice(&w[1..]);
    }
    Ok((inputs, targets))
}

/// Next-token NLL of every predicted position of every window
/// (each window holds `L + 1` tokens and yields `L` predictions).
pub fn position_nll(params: &Params, cfg: &ModelConfig, windows: &[&[usize]]) -> Result<Vec<f64>> {
    let (inputs, targets) = split_windows(windows, cfg.vocab)?;
    let (logits, _) = forward(params, cfg, &inputs, false)?;
    Ok(cross_entropy(&logits, &targets, false).0)
}

/// Mean next-token NLL over a batch of windows.
pub fn batch_loss(params: &Params, cfg: &ModelConfig, windows: &[&[usize]]) -> Result<f64> {
    let nll = position_nll(params, cfg, windows)?;
    Ok(nll.iter().sum::<f64>() / nll.len() as f64)
}

/// Mean next-token NLL and its exact gradient with respect to every weight
/// and every learnable bias parameter.
pub fn loss_and_grads(
    params: &Params,
    cfg: &ModelConfig,
    windows: &[&[usize]],
) -> Result<(f64, Grads)> {
    let (inputs, targets) = split_windows(windows, cfg.vocab)?;
    let (logits, cache) = forward(params, cfg, &inputs, true)?;
    let cache = cache.expect("cache requested");
    let (nll, dlogits) = cross_entropy(&logits, &targets, true);
    let loss = nll.iter().sum::<f64>() / nll.len() as f64;
    let dlogits = dlogits.expect("gradient requested");

    let w = &params.weights;
    let mut gw = Weights::zeros_like(w);
    gw.w_out = cache.hf.t().dot(&dlogits);
    gw.b_out = dlogits.sum_axis(Axis(0));
    let dhf = dlogits.dot(&w.w_out.t());
    let mut dx = layer_norm_backward(&dhf, &cache.lnf, &w.lnf_g, &mut gw.lnf_g, &mut gw.lnf_b);

    let len = inputs[0].len();
    let heads = cfg.heads;
    let mut bias_grads: Vec<Vec<f64>> = Vec::with_capacity(cfg.layers);
    for l in (0..cfg.layers).rev() {
        let lw = &w.layers[l];
        let lc = &cache.layers[l];
        let gl = &mut gw.layers[l];
        // feed-forward
        gl.w2 = lc.g.t().dot(&dx);
        gl.b2 = dx.sum_axis(Axis(0));
        let mut du = dx.dot(&lw.w2.t());
        Zip::from(&mut du)
            .and(&lc.u)
            .and(&lc.t)
            .for_each(|d, &u, &t| *d *= gelu_grad_with(u, t));
        gl.w1 = lc.h2.t().dot(&du);
        gl.b1 = du.sum_axis(Axis(0));
        let dh2 = du.dot(&lw.w1.t());
        dx += &layer_norm_backward(&dh2, &lc.ln2, &lw.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
        // attention
        gl.wo = lc.o.t().dot(&dx);
        let d_o = dx.dot(&lw.wo.t());
        let mut dq = Array2::<f64>::zeros(d_o.dim());
        let mut dk = Array2::<f64>::zeros(d_o.dim());
        let mut dv = Array2::<f64>::zeros(d_o.dim());
        let mut d_bias = Array2::<f64>::zeros((heads, len));
        let pack = &cache.packs[l];
        for (b, sa) in lc.attn.iter().enumerate() {
            let rows = s![b * len..(b + 1) * len, ..];
            let input = AttentionInput {
                q: sa.q.clone(),
                k: sa.k.clone(),
                v: sa.v.clone(),
                bias: pack,
                scale: 1.0 / (cfg.head_dim() as f64).sqrt(),
            };
            let upstream = split_heads(d_o.slice(rows), heads);
            let g = attention_backward_tensors(&input, &sa.out, &upstream)?;
            merge_heads(&g.dq, dq.slice_mut(rows));
            merge_heads(&g.dk, dk.slice_mut(rows));
            merge_heads(&g.dv, dv.slice_mut(rows));
            d_bias += &g.d_bias;
        }
        let layer_bias: Vec<Vec<f64>> = params.bias[l]
            .iter()
            .enumerate()
            .map(|(h, spec)| {
                let fg = accumulate_fusion_grad(spec, d_bias.row(h).as_slice().unwrap());
                fg.kernels.iter().flat_map(|k| k.values()).collect()
            })
            .collect();
        bias_grads.push(layer_bias.into_iter().flatten().collect());
        gl.wq = lc.h1.t().dot(&dq);
        gl.wk = lc.h1.t().dot(&dk);
        gl.wv = lc.h1.t().dot(&dv);
        let dh1 = dq.dot(&lw.wq.t()) + dk.dot(&lw.wk.t()) + dv.dot(&lw.wv.t());
        dx += &layer_norm_backward(&dh1, &lc.ln1, &lw.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
    }
    for (b, seq) in inputs.iter().enumerate() {
        for (i, &tok) in seq.iter().enumerate() {
            let mut row = gw.embed.row_mut(tok);
            row += &dx.row(b * len + i);
        }
    }
    bias_grads.reverse();
    let bias = bias_grads.into_iter().flatten().collect();
    Ok((loss, Grads { weights: gw, bias }))
}
