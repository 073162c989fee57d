//! Multiple-kernel fusion of distance kernels.
//!
//! A [`FusionSpec`] combines kernels in probability space,
//! `F(d) = Σ wᵢ kᵢ(d)`, and the attention bias is `log F(d)`. The log is taken
//! through a max-shifted log-sum-exp over `log wᵢ + log kᵢ(d)`, so the bias
//! stays finite even where every component underflows in linear space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{eval_log_kernel, grad_log_kernel_params, log_kernel_series, KernelGrad, KernelKind};
use crate::slopes::SlopeVector;

/// Default number of T5 buckets.
pub const DEFAULT_T5_BUCKETS: usize = 32;
/// Default sinusoid dimension of the Sandwich kernel.
pub const DEFAULT_SANDWICH_DIM: usize = 128;

/// Preset names accepted by the CLI and the JSON config.
pub const PRESET_NAMES: [&str; 7] = [
    "alibi",
    "gaussian",
    "kerple-log",
    "sandwich",
    "t5",
    "mep-free",
    "mep-param",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub weight: f64,
    pub kind: KernelKind,
}

/// Weighted list of kernels. Weights are non-negative with at least one
/// positive; with `normalize` set they are rescaled to sum to one before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct FusionSpec {
    components: Vec<Component>,
    normalize: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    components: Vec<Component>,
    #[serde(default)]
    normalize: bool,
}

impl TryFrom<RawSpec> for FusionSpec {
    type Error = Error;
    fn try_from(raw: RawSpec) -> Result<Self> {
        FusionSpec::new(raw.components, raw.normalize)
    }
}

impl From<FusionSpec> for RawSpec {
    fn from(spec: FusionSpec) -> Self {
        RawSpec {
            components: spec.components,
            normalize: spec.normalize,
        }
    }
}

impl FusionSpec {
    pub fn new(components: Vec<Component>, normalize: bool) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::config("fusion needs at least one component"));
        }
        for c in &components {
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::config(format!(
                    "fusion weights must be finite and >= 0, got {}",
                    c.weight
                )));
            }
            c.kind.validate()?;
        }
        if components.iter().all(|c| c.weight == 0.0) {
            return Err(Error::config("fusion weights are all zero"));
        }
        Ok(FusionSpec {
            components,
            normalize,
        })
    }

    /// A single kernel with weight one.
    pub fn single(kind: KernelKind) -> Result<Self> {
        FusionSpec::new(vec![Component { weight: 1.0, kind }], false)
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    /// Weights as used in evaluation (rescaled when `normalize` is set).
    pub fn effective_weights(&self) -> Vec<f64> {
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        self.components
            .iter()
            .map(|c| if self.normalize { c.weight / total } else { c.weight })
            .collect()
    }

    /// Same spec with every weight multiplied by `factor` and normalization off.
    pub fn scaled_weights(&self, factor: f64) -> Result<Self> {
        let components = self
            .components
            .iter()
            .zip(self.effective_weights())
            .map(|(c, w)| Component {
                weight: w * factor,
                kind: c.kind.clone(),
            })
            .collect();
        FusionSpec::new(components, false)
    }

    /// Number of learnable kernel parameters over all components.
    pub fn num_learnable(&self) -> usize {
        self.components.iter().map(|c| c.kind.learnable_params().len()).sum()
    }

    /// Replaces the learnable parameters of component `index`.
    pub fn set_kernel_params(&mut self, index: usize, values: &[f64]) -> Result<()> {
        let comp = self
            .components
            .get_mut(index)
            .ok_or_else(|| Error::Shape(format!("no fusion component {index}")))?;
        comp.kind.set_learnable_params(values)
    }

    /// Replaces the raw weights (normalization flag unchanged).
    pub fn set_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.components.len() {
            return Err(Error::Shape(format!(
                "expected {} weights, got {}",
                self.components.len(),
                weights.len()
            )));
        }
        let mut components = self.components.clone();
        for (c, w) in components.iter_mut().zip(weights) {
            c.weight = *w;
        }
        *self = FusionSpec::new(components, self.normalize)?;
        Ok(())
    }
}

/// `log Σ exp(xᵢ)` over finite and `-inf` terms.
fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn log_weights(spec: &FusionSpec) -> Vec<f64> {
    spec.effective_weights().into_iter().map(f64::ln).collect()
}

/// `Σ wᵢ kᵢ(d)` in linear space.
pub fn fused_kernel(spec: &FusionSpec, d: usize) -> f64 {
    spec.effective_weights()
        .iter()
        .zip(&spec.components)
        .map(|(w, c)| w * eval_log_kernel(&c.kind, d).exp())
        .sum()
}

/// `log Σ wᵢ kᵢ(d)`.
pub fn fused_log_bias(spec: &FusionSpec, d: usize) -> f64 {
    let lw = log_weights(spec);
    let logs: Vec<f64> = spec
        .components
        .iter()
        .zip(&lw)
        .map(|(c, lw)| lw + eval_log_kernel(&c.kind, d))
        .collect();
    log_sum_exp(logs.iter().copied())
}

/// Per-component log-kernel series, each of length `len`.
fn component_series(spec: &FusionSpec, len: usize) -> Vec<Vec<f64>> {
    spec.components
        .iter()
        .map(|c| log_kernel_series(&c.kind, len))
        .collect()
}

/// `[log F(0), ..., log F(len - 1)]`.
pub fn fused_log_series(spec: &FusionSpec, len: usize) -> Vec<f64> {
    let lw = log_weights(spec);
    let series = component_series(spec, len);
    (0..len)
        .map(|d| log_sum_exp(series.iter().zip(&lw).map(|(s, w)| w + s[d])))
        .collect()
}

/// Gradient of `log F(d)` with respect to the fusion weights and each
/// component's learnable kernel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionGrad {
    /// `∂ log F / ∂wᵢ = kᵢ / Σⱼ wⱼ kⱼ`, treating the effective weights as free.
    pub weights: Vec<f64>,
    /// Per component, `wᵢ ∂kᵢ/∂θ / F`.
    pub kernels: Vec<KernelGrad>,
}

impl FusionGrad {
    pub fn zeros(spec: &FusionSpec) -> Self {
        FusionGrad {
            weights: vec![0.0; spec.components.len()],
            kernels: spec.components.iter().map(|c| KernelGrad::zeros(&c.kind)).collect(),
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &FusionGrad, factor: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += factor * b;
        }
        for (a, b) in self.kernels.iter_mut().zip(&other.kernels) {
            a.add_scaled(b, factor);
        }
    }
}

fn grad_from_logs(spec: &FusionSpec, lw: &[f64], logs: &[f64], d: usize) -> FusionGrad {
    let log_total = log_sum_exp(logs.iter().zip(lw).map(|(l, w)| l + w));
    let weights = logs.iter().map(|l| (l - log_total).exp()).collect();
    let kernels = spec
        .components
        .iter()
        .zip(logs.iter().zip(lw))
        .map(|(c, (l, w))| {
            let mut g = grad_log_kernel_params(&c.kind, d);
            // responsibility wᵢ kᵢ / F times ∂ log kᵢ
            g.scale((w + l - log_total).exp());
            g
        })
        .collect();
    FusionGrad { weights, kernels }
}

pub fn grad_fusion(spec: &FusionSpec, d: usize) -> FusionGrad {
    let lw = log_weights(spec);
    let logs: Vec<f64> = spec
        .components
        .iter()
        .map(|c| eval_log_kernel(&c.kind, d))
        .collect();
    grad_from_logs(spec, &lw, &logs, d)
}

/// `Σ_d upstream[d] · ∂ log F(d)/∂θ` over `d = 0..upstream.len()`.
pub fn accumulate_fusion_grad(spec: &FusionSpec, upstream: &[f64]) -> FusionGrad {
    let lw = log_weights(spec);
    let series = component_series(spec, upstream.len());
    let mut acc = FusionGrad::zeros(spec);
    let mut logs = vec![0.0; series.len()];
    for (d, &u) in upstream.iter().enumerate() {
        if u == 0.0 {
            continue;
        }
        for (slot, s) in logs.iter_mut().zip(&series) {
            *slot = s[d];
        }
        acc.add_scaled(&grad_from_logs(spec, &lw, &logs, d), u);
    }
    acc
}

/// Template for one component of a custom fusion; slope-driven kernels take
/// the head's schedule slope times `slope_factor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ComponentTemplate {
    Exponential {
        weight: f64,
        #[serde(default = "one")]
        slope_factor: f64,
    },
    Gaussian {
        weight: f64,
        #[serde(default = "one")]
        slope_factor: f64,
    },
    KerpleLog {
        weight: f64,
        #[serde(default = "one")]
        r1: f64,
        #[serde(default = "one")]
        r2: f64,
    },
    Sandwich {
        weight: f64,
        #[serde(default = "default_sandwich_dim")]
        dim: usize,
        #[serde(default = "one")]
        slope_factor: f64,
    },
    T5 {
        weight: f64,
        #[serde(default = "default_t5_buckets")]
        num_buckets: usize,
    },
}

fn one() -> f64 {
    1.0
}
fn default_sandwich_dim() -> usize {
    DEFAULT_SANDWICH_DIM
}
fn default_t5_buckets() -> usize {
    DEFAULT_T5_BUCKETS
}

impl ComponentTemplate {
    fn instantiate(&self, slope: f64) -> Component {
        let (weight, kind) = match *self {
            ComponentTemplate::Exponential {
                weight,
                slope_factor,
            } => (weight, KernelKind::Exponential { slope: slope * slope_factor }),
            ComponentTemplate::Gaussian {
                weight,
                slope_factor,
            } => (weight, KernelKind::Gaussian { slope: slope * slope_factor }),
            ComponentTemplate::KerpleLog { weight, r1, r2 } => {
                (weight, KernelKind::KerpleLog { r1, r2 })
            }
            ComponentTemplate::Sandwich {
                weight,
                dim,
                slope_factor,
            } => (
                weight,
                KernelKind::SandwichSinusoidal {
                    dim,
                    scale: slope * slope_factor,
                },
            ),
            ComponentTemplate::T5 {
                weight,
                num_buckets,
            } => (weight, KernelKind::t5_zeros(num_buckets)),
        };
        Component { weight, kind }
    }
}

/// Named per-head bias recipes: the fused MEP variants and single-kernel baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FusionPreset {
    /// Exponential kernels at the schedule slopes (ALiBi).
    Alibi { slopes: SlopeVector },
    Gaussian { slopes: SlopeVector },
    KerpleLog { r1: Vec<f64>, r2: Vec<f64> },
    /// Sandwich kernel with per-head scale.
    Sandwich { dim: usize, scales: SlopeVector },
    /// Clamped-bucket bias with zero-initialized tables.
    T5 { num_buckets: usize, heads: usize },
    /// Exponential at `m`, exponential at `m/2` and Gaussian at `m`, weighted 1/3 each.
    MepParamFree { slopes: SlopeVector },
    /// KERPLE-log at `(r1, r2)` and Gaussian at `m`, weighted 1/2 each.
    MepParametric {
        slopes: SlopeVector,
        r1: Vec<f64>,
        r2: Vec<f64>,
    },
    Custom {
        slopes: SlopeVector,
        components: Vec<ComponentTemplate>,
        #[serde(default = "default_true")]
        normalize: bool,
    },
}

fn default_true() -> bool {
    true
}

impl FusionPreset {
    /// Builds a named preset with default parameters for the given slopes.
    pub fn from_name(name: &str, slopes: &SlopeVector) -> Result<Self> {
        let heads = slopes.len();
        let preset = match name {
            "alibi" => FusionPreset::Alibi {
                slopes: slopes.clone(),
            },
            "gaussian" => FusionPreset::Gaussian {
                slopes: slopes.clone(),
            },
            "kerple-log" => FusionPreset::KerpleLog {
                r1: vec![1.0; heads],
                r2: vec![1.0; heads],
            },
            "sandwich" => FusionPreset::Sandwich {
                dim: DEFAULT_SANDWICH_DIM,
                scales: slopes.clone(),
            },
            "t5" => FusionPreset::T5 {
                num_buckets: DEFAULT_T5_BUCKETS,
                heads,
            },
            "mep-free" => FusionPreset::MepParamFree {
                slopes: slopes.clone(),
            },
            "mep-param" => FusionPreset::MepParametric {
                slopes: slopes.clone(),
                r1: vec![1.0; heads],
                r2: vec![1.0; heads],
            },
            other => {
                return Err(Error::config(format!(
                    "unknown preset '{other}'; valid presets: {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        Ok(preset)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionPreset::Alibi { .. } => "alibi",
            FusionPreset::Gaussian { .. } => "gaussian",
            FusionPreset::KerpleLog { .. } => "kerple-log",
            FusionPreset::Sandwich { .. } => "sandwich",
            FusionPreset::T5 { .. } => "t5",
            FusionPreset::MepParamFree { .. } => "mep-free",
            FusionPreset::MepParametric { .. } => "mep-param",
            FusionPreset::Custom { .. } => "custom",
        }
    }

    pub fn heads(&self) -> usize {
        match self {
            FusionPreset::Alibi { slopes }
            | FusionPreset::Gaussian { slopes }
            | FusionPreset::MepParamFree { slopes }
            | FusionPreset::MepParametric { slopes, .. }
            | FusionPreset::Custom { slopes, .. } => slopes.len(),
            FusionPreset::KerpleLog { r1, .. } => r1.len(),
            FusionPreset::Sandwich { scales, .. } => scales.len(),
            FusionPreset::T5 { heads, .. } => *heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let heads = self.heads();
        if heads == 0 {
            return Err(Error::config("preset needs at least one head"));
        }
        let check = |what: &str, v: &[f64]| {
            if v.len() == heads {
                Ok(())
            } else {
                Err(Error::config(format!(
                    "{} preset: {what} has {} entries for {heads} heads",
                    self.name(),
                    v.len()
                )))
            }
        };
        match self {
            FusionPreset::KerpleLog { r1, r2 } => check("r2", r2).and(check("r1", r1)),
            FusionPreset::MepParametric { r1, r2, .. } => check("r1", r1).and(check("r2", r2)),
            FusionPreset::Custom { components, .. } if components.is_empty() => {
                Err(Error::config("custom preset needs at least one component"))
            }
            _ => Ok(()),
        }?;
        for head in 0..heads {
            make_preset(self, head)?;
        }
        Ok(())
    }
}

/// The fusion spec of one head of a preset.
pub fn make_preset(preset: &FusionPreset, head: usize) -> Result<FusionSpec> {
    let heads = preset.heads();
    if head >= heads {
        return Err(Error::config(format!(
            "head {head} out of range for a {heads}-head preset"
        )));
    }
    let at = |v: &[f64]| {
        v.get(head)
            .copied()
            .ok_or_else(|| Error::config(format!("preset vector too short for head {head}")))
    };
    match preset {
        FusionPreset::Alibi { slopes } => FusionSpec::single(KernelKind::Exponential {
            slope: at(slopes.as_slice())?,
        }),
        FusionPreset::Gaussian { slopes } => FusionSpec::single(KernelKind::Gaussian {
            slope: at(slopes.as_slice())?,
        }),
        FusionPreset::KerpleLog { r1, r2 } => FusionSpec::single(KernelKind::KerpleLog {
            r1: at(r1)?,
            r2: at(r2)?,
        }),
        FusionPreset::Sandwich { dim, scales } => {
            FusionSpec::single(KernelKind::SandwichSinusoidal {
                dim: *dim,
                scale: at(scales.as_slice())?,
            })
        }
        FusionPreset::T5 { num_buckets, .. } => FusionSpec::single(KernelKind::t5_zeros(*num_buckets)),
        FusionPreset::MepParamFree { slopes } => {
            let m = at(slopes.as_slice())?;
            let third = 1.0 / 3.0;
            FusionSpec::new(
                vec![
                    Component {
                        weight: third,
                        kind: KernelKind::Exponential { slope: m },
                    },
                    Component {
                        weight: third,
                        kind: KernelKind::Exponential { slope: 0.5 * m },
                    },
                    Component {
                        weight: third,
                        kind: KernelKind::Gaussian { slope: m },
                    },
                ],
                true,
            )
        }
        FusionPreset::MepParametric { slopes, r1, r2 } => FusionSpec::new(
            vec![
                Component {
                    weight: 0.5,
                    kind: KernelKind::KerpleLog {
                        r1: at(r1)?,
                        r2: at(r2)?,
                    },
                },
                Component {
                    weight: 0.5,
                    kind: KernelKind::Gaussian {
                        slope: at(slopes.as_slice())?,
                    },
                },
            ],
            true,
        ),
        FusionPreset::Custom {
            slopes,
            components,
            normalize,
        } => {
            let m = at(slopes.as_slice())?;
            FusionSpec::new(
                components.iter().map(|t| t.instantiate(m)).collect(),
                *normalize,
            )
        }
    }
}
