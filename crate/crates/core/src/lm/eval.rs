use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::corpus::{generate_corpus, SyntheticTaskSpec};
use super::model::{position_nll, ModelConfig, Params};
use super::train::{train, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionPreset;
use crate::io_util::fmt_sig9;

/// Minimum number of evaluation windows per length.
pub const MIN_EVAL_WINDOWS: usize = 20;
/// Evaluation uses at most this many leading held-out windows per length.
pub const MAX_EVAL_WINDOWS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub preset: String,
    pub eval_len: usize,
    pub seed: u64,
    pub nll: f64,
    pub ppl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// Median and spread (max − min) of the perplexities of one
/// (preset, eval_len) cell across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub preset: String,
    pub eval_len: usize,
    pub seeds: usize,
    pub median_ppl: f64,
    pub spread: f64,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("preset,eval_len,seed,nll,ppl\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.preset,
                r.eval_len,
                r.seed,
                fmt_sig9(r.nll),
                fmt_sig9(r.ppl)
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per (preset, eval_len) in first-appearance order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut keys: Vec<(String, usize)> = Vec::new();
        for r in &self.rows {
            let key = (r.preset.clone(), r.eval_len);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(preset, eval_len)| {
                let mut ppl: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.preset == preset && r.eval_len == eval_len)
                    .map(|r| r.ppl)
                    .collect();
                ppl.sort_by(f64::total_cmp);
                let n = ppl.len();
                let median = if n % 2 == 1 {
                    ppl[n / 2]
                } else {
                    0.5 * (ppl[n / 2 - 1] + ppl[n / 2])
                };
                SummaryRow {
                    preset,
                    eval_len,
                    seeds: n,
                    median_ppl: median,
                    spread: ppl[n - 1] - ppl[0],
                }
            })
            .collect()
    }

    pub fn median(&self, preset: &str, eval_len: usize) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.preset == preset && s.eval_len == eval_len)
            .map(|s| s.median_ppl)
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("preset,eval_len,seeds,median_ppl,spread\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.preset,
            r.eval_len,
            r.seeds,
            fmt_sig9(r.median_ppl),
            fmt_sig9(r.spread)
        );
    }
    out
}

/// Held-out tokens: the last 20% of the corpus.
pub fn held_out(corpus: &[usize]) -> &[usize] {
    &corpus[corpus.len() - corpus.len() / 5..]
}

/// Perplexity of `params` at each evaluation length, measured on
/// non-overlapping windows of `eval_len + 1` tokens from the held-out split
/// (at least [`MIN_EVAL_WINDOWS`], at most [`MAX_EVAL_WINDOWS`]).
/// Each length rebuilds the bias at that length; `eval_len = train_len`
/// goes through the same path.
pub fn evaluate_perplexity(
    params: &Params,
    model: &ModelConfig,
    task: &SyntheticTaskSpec,
    eval_lens: &[usize],
    label: &str,
) -> Result<EvalReport> {
    let corpus = generate_corpus(task, model.vocab);
    let held = held_out(&corpus);
    let mut rows = Vec::with_capacity(eval_lens.len());
    for &len in eval_lens {
        if len < model.train_len {
            return Err(Error::config(format!(
                "eval_len {len} is shorter than train_len {}",
                model.train_len
            )));
        }
        let window = len + 1;
        let count = held.len() / window;
        if count < MIN_EVAL_WINDOWS {
            return Err(Error::InsufficientData {
                required: 5 * MIN_EVAL_WINDOWS * window,
                available: corpus.len(),
            });
        }
        let mut total = 0.0;
        let mut n = 0usize;
        for w in held.chunks_exact(window).take(MAX_EVAL_WINDOWS) {
            let nll = position_nll(params, model, &[w])?;
            total += nll.iter().sum::<f64>();
            n += nll.len();
        }
        let nll = total / n as f64;
        rows.push(EvalRow {
            preset: label.to_string(),
            eval_len: len,
            seed: model.seed,
            nll,
            ppl: nll.exp(),
        });
    }
    Ok(EvalReport { rows })
}

/// A labelled preset to train in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub label: String,
    pub preset: FusionPreset,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub report: EvalReport,
    pub summary: Vec<SummaryRow>,
    /// `(label, seed, per-step losses)` in run order.
    pub curves: Vec<(String, u64, Vec<f64>)>,
}

/// Trains one model per (run, seed) and evaluates it at every length.
///
/// Runs with the same seed share weight initialization, data order and
/// corpus (the task seed is replaced by the run seed); only the bias
/// differs. Runs execute on the current rayon pool; results are merged in
/// (run, seed) order, so the output does not depend on scheduling.
pub fn compare_presets(
    runs: &[RunSpec],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    task: &SyntheticTaskSpec,
    eval_lens: &[usize],
    seeds: &[u64],
) -> Result<Comparison> {
    if runs.is_empty() || seeds.is_empty() {
        return Err(Error::config("compare needs at least one preset and one seed"));
    }
    let jobs: Vec<(&RunSpec, u64)> = runs
        .iter()
        .flat_map(|r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results: Vec<Result<(EvalReport, Vec<f64>)>> = jobs
        .par_iter()
        .map(|(run, seed)| {
            let cfg = ModelConfig {
                preset: run.preset.clone(),
                seed: *seed,
                ..model.clone()
            };
            let task = task.with_seed(*seed);
            let trained = train(&cfg, train_cfg, &task)?;
            let report = evaluate_perplexity(&trained.params, &cfg, &task, eval_lens, &run.label)?;
            Ok((report, trained.losses))
        })
        .collect();
    let mut report = EvalReport::default();
    let mut curves = Vec::with_capacity(jobs.len());
    for ((run, seed), res) in jobs.iter().zip(results) {
        let (r, losses) = res?;
        report.rows.extend(r.rows);
        curves.push((run.label.clone(), *seed, losses));
    }
    let summary = report.summary();
    Ok(Comparison {
        report,
        summary,
        curves,
    })
}

/// Loss curves as CSV with columns `preset,seed,step,loss`.
pub fn loss_curves_csv(curves: &[(String, u64, Vec<f64>)]) -> String {
    let mut out = String::from("preset,seed,step,loss\n");
    for (label, seed, losses) in curves {
        for (step, l) in losses.iter().enumerate() {
            let _ = writeln!(out, "{label},{seed},{step},{}", fmt_sig9(*l));
        }
    }
    out
}
