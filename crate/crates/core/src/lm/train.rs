use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{generate_corpus, SyntheticTaskSpec};
use super::model::{loss_and_grads, ModelConfig, Params};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 16,
            lr: 1e-3,
            optimizer: Optimizer::default(),
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    /// `steps = 0` is accepted and means "initialize only".
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr < 1.0) {
            return Err(Error::config(format!("lr must lie in (0, 1), got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::config("batch must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("grad_clip must be positive"));
            }
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps.is_nan() || eps <= 0.0 {
                return Err(Error::config("adam needs beta1, beta2 in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: Params,
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
    /// Set when the last loss is not below the first one.
    pub non_decreasing: bool,
}

/// Tokens available for training windows: the first 80% of the corpus.
pub fn training_split(corpus: &[usize]) -> &[usize] {
    &corpus[..corpus.len() - corpus.len() / 5]
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

fn step_slice(opt: Optimizer, lr: f64, t: i32, x: &mut [f64], g: &[f64], mo: &mut Moments) {
    match opt {
        Optimizer::Sgd => {
            for (xi, gi) in x.iter_mut().zip(g) {
                *xi -= lr * gi;
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for i in 0..x.len() {
                mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g[i];
                mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g[i] * g[i];
                x[i] -= lr * (mo.m[i] / c1) / ((mo.v[i] / c2).sqrt() + eps);
            }
        }
    }
}

/// Next-token training on random `train_len` windows of the training split.
///
/// Weights are initialized from `model.seed` and the window order is drawn
/// from the same seed, so a run is fully determined by its inputs. Positive
/// kernel parameters are optimized as logarithms and therefore stay positive.
pub fn train(model: &ModelConfig, cfg: &TrainConfig, task: &SyntheticTaskSpec) -> Result<TrainResult> {
    model.validate()?;
    cfg.validate()?;
    task.validate(model.train_len)?;
    let mut params = Params::init(model)?;
    if cfg.steps == 0 {
        return Ok(TrainResult {
            params,
            losses: Vec::new(),
            non_decreasing: false,
        });
    }
    let corpus = generate_corpus(task, model.vocab);
    let data = training_split(&corpus);
    let window = model.train_len + 1;
    if data.len() < window {
        return Err(Error::InsufficientData {
            required: window + window.div_ceil(4),
            available: corpus.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0x7472_6169_6e00);

    let positive = params.bias_positive();
    let mut raw: Vec<f64> = params
        .bias_values()
        .iter()
        .zip(&positive)
        .map(|(v, p)| if *p { v.ln() } else { *v })
        .collect();
    let sizes: Vec<usize> = params.weights.slices().iter().map(|s| s.len()).collect();
    let mut moments: Vec<Moments> = sizes.iter().map(|&n| Moments::new(n)).collect();
    let mut bias_moments = Moments::new(raw.len());

    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let starts: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.random_range(0..=data.len() - window))
            .collect();
        let windows: Vec<&[usize]> = starts.iter().map(|&s| &data[s..s + window]).collect();
        let (loss, mut grads) = loss_and_grads(&params, model, &windows)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(loss);
        let values = params.bias_values();
        for ((g, v), p) in grads.bias.iter_mut().zip(&values).zip(&positive) {
            if *p {
                *g *= v;
            }
        }
        if let Some(clip) = cfg.grad_clip {
            let sq: f64 = grads
                .weights
                .slices()
                .iter()
                .flat_map(|s| s.iter())
                .chain(&grads.bias)
                .map(|g| g * g)
                .sum();
            let norm = sq.sqrt();
            if norm > clip {
                let f = clip / norm;
                for s in grads.weights.slices_mut() {
                    s.iter_mut().for_each(|g| *g *= f);
                }
                grads.bias.iter_mut().for_each(|g| *g *= f);
            }
        }
        let t = (step + 1) as i32;
        for ((x, g), mo) in params
            .weights
            .slices_mut()
            .into_iter()
            .zip(grads.weights.slices())
            .zip(&mut moments)
        {
            step_slice(cfg.optimizer, cfg.lr, t, x, g, mo);
        }
        step_slice(cfg.optimizer, cfg.lr, t, &mut raw, &grads.bias, &mut bias_moments);
        let actual: Vec<f64> = raw
            .iter()
            .zip(&positive)
            .map(|(r, p)| if *p { r.exp() } else { *r })
            .collect();
        params.set_bias_values(&actual)?;
    }
    let non_decreasing = losses.len() >= 2 && losses[losses.len() - 1] >= losses[0];
    Ok(TrainResult {
        params,
        losses,
        non_decreasing,
    })
}
