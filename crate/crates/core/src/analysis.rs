//! Figure-style data: decay curves, heatmaps, smoothness metrics and the
//! derivative comparison between a Gaussian+exponential mixture and a bare
//! exponential kernel.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bias::{bias_csv, BiasForm, BiasPack};
use crate::error::{Error, Result};
use crate::fusion::{fused_kernel, make_preset, FusionPreset};
use crate::io_util::fmt_sig9;

/// Default scan step of [`verify_appendix_inequality`].
pub const DEFAULT_SCAN_STEP: f64 = 0.005;

/// Kernel values sampled at `d = 0, 1, …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    pub label: String,
    pub points: Vec<(usize, f64)>,
}

impl CurveSeries {
    /// Columns `d,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("d,value\n");
        for (d, v) in &self.points {
            let _ = writeln!(out, "{d},{}", fmt_sig9(*v));
        }
        out
    }

    pub fn values(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothnessReport {
    /// `(label, max_d |k(d+1) − k(d)|)`; empty for the appendix scan.
    pub metrics: Vec<(String, f64)>,
    /// Smallest scanned point past which the derivative inequality holds
    /// on the whole scanned range; `None` when it fails at the end.
    pub x0: Option<f64>,
    /// Whether the inequality holds at the scanned point closest to 1.
    pub holds_at_one: Option<bool>,
}

fn check_len(len: usize) -> Result<()> {
    if len < 2 {
        return Err(Error::config(format!("curve length must be >= 2, got {len}")));
    }
    Ok(())
}

fn check_head(preset: &FusionPreset, head: usize) -> Result<()> {
    if head >= preset.heads() {
        return Err(Error::config(format!(
            "head {head} out of range for preset '{}' with {} heads",
            preset.name(),
            preset.heads()
        )));
    }
    Ok(())
}

/// One series per preset: the fused kernel of `head` at `d = 0..len`.
pub fn decay_curves(presets: &[FusionPreset], head: usize, len: usize) -> Result<Vec<CurveSeries>> {
    check_len(len)?;
    presets
        .iter()
        .map(|p| {
            check_head(p, head)?;
            let spec = make_preset(p, head)?;
            Ok(CurveSeries {
                label: p.name().to_string(),
                points: (0..len).map(|d| (d, fused_kernel(&spec, d))).collect(),
            })
        })
        .collect()
}

/// Largest absolute first difference of a series; 0 for fewer than two values.
pub fn max_step(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max)
}

/// Steepest one-step change of each preset's kernel on `d ∈ [0, len)`.
pub fn smoothness_metric(presets: &[FusionPreset], head: usize, len: usize) -> Result<SmoothnessReport> {
    let curves = decay_curves(presets, head, len)?;
    Ok(SmoothnessReport {
        metrics: curves
            .iter()
            .map(|c| (c.label.clone(), max_step(&c.values())))
            .collect(),
        x0: None,
        holds_at_one: None,
    })
}

/// Closed-form derivatives `(k′_MKL(x), k′_e(x))` with
/// `k_e = exp(−|x|/σ₂)`, `k_g = exp(−x²/2σ₁²)`, `k_MKL = (k_g + k_e)/2`.
pub fn appendix_derivatives(sigma1: f64, sigma2: f64, x: f64) -> (f64, f64) {
    let kg = -x / (sigma1 * sigma1) * (-x * x / (2.0 * sigma1 * sigma1)).exp();
    let ke = -x.signum() / sigma2 * (-x.abs() / sigma2).exp();
    (0.5 * kg + 0.5 * ke, ke)
}

/// `|k′_MKL(x)| < |k′_e(x)|`, decided on logarithms so that it stays exact
/// where both derivatives underflow. Undefined (`None`) at `x = 0`.
pub fn appendix_inequality_holds(sigma1: f64, sigma2: f64, x: f64) -> Option<bool> {
    if x == 0.0 {
        return None;
    }
    let a = x.abs();
    // Both terms share the sign of x, so the mixture's magnitude is the
    // average of the magnitudes and the inequality reduces to |k′_g| < |k′_e|.
    let log_g = a.ln() - 2.0 * sigma1.ln() - a * a / (2.0 * sigma1 * sigma1);
    let log_e = -sigma2.ln() - a / sigma2;
    Some(log_g < log_e)
}

/// Scans `x = step, 2·step, … ≤ x_max` and reports the crossover `x₀`.
pub fn verify_appendix_inequality(sigma1: f64, sigma2: f64, x_max: f64, step: f64) -> Result<SmoothnessReport> {
    for (name, v) in [("sigma1", sigma1), ("sigma2", sigma2), ("xmax", x_max), ("step", step)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config(format!("{name} must be positive and finite, got {v}")));
        }
    }
    if step > 0.01 {
        return Err(Error::config(format!("step must be <= 0.01, got {step}")));
    }
    let n = (x_max / step + 1e-9).floor() as usize;
    if n == 0 {
        return Err(Error::config("xmax must be at least one step"));
    }
    let mut last_fail = None;
    let mut holds_at_one = None;
    let one = (1.0 / step).round() as usize;
    for i in 1..=n {
        let x = i as f64 * step;
        let holds = appendix_inequality_holds(sigma1, sigma2, x).expect("x > 0");
        if i == one {
            holds_at_one = Some(holds);
        }
        if !holds {
            last_fail = Some(i);
        }
    }
    let x0 = match last_fail {
        None => Some(0.0),
        Some(i) if i == n => None,
        Some(i) => Some(i as f64 * step),
    };
    Ok(SmoothnessReport {
        metrics: Vec::new(),
        x0,
        holds_at_one,
    })
}

/// Multiplicative view of one head scaled by `scale`, in the bias CSV format.
pub fn heatmap_export(pack: &BiasPack, head: usize, scale: f64) -> Result<String> {
    bias_csv(pack, head, BiasForm::Multiplicative, scale)
}
