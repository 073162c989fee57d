//! Synthetic token streams for desk-scale extrapolation runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TaskKind {
    /// A random block of `period` tokens repeated to the corpus length.
    /// With `refresh` set, a fresh block is drawn every `refresh` tokens.
    RepeatCopy {
        period: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        refresh: Option<usize>,
    },
    /// Order-1 or order-2 Markov chain over the vocabulary with a fixed
    /// random transition table.
    MarkovChar {
        order: usize,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub kind: TaskKind,
    pub corpus_tokens: usize,
}

impl SyntheticTaskSpec {
    pub fn seed(&self) -> u64 {
        match self.kind {
            TaskKind::RepeatCopy { seed, .. } | TaskKind::MarkovChar { seed, .. } => seed,
        }
    }

    pub fn with_seed(&self, new_seed: u64) -> Self {
        let mut out = self.clone();
        match &mut out.kind {
            TaskKind::RepeatCopy { seed, .. } | TaskKind::MarkovChar { seed, .. } => {
                *seed = new_seed
            }
        }
        out
    }

    /// Checks the task against the model's training length.
    pub fn validate(&self, train_len: usize) -> Result<()> {
        match self.kind {
            TaskKind::RepeatCopy { period, refresh, .. } => {
                if period < 2 || period > train_len / 2 {
                    return Err(Error::config(format!(
                        "repeat-copy period {period} must lie in [2, train_len/2 = {}]",
                        train_len / 2
                    )));
                }
                if let Some(r) = refresh {
                    if r < period {
                        return Err(Error::config("repeat-copy refresh must be >= period"));
                    }
                }
            }
            TaskKind::MarkovChar { order, .. } => {
                if !(1..=2).contains(&order) {
                    return Err(Error::config(format!(
                        "markov order must be 1 or 2, got {order}"
                    )));
                }
            }
        }
        if self.corpus_tokens == 0 {
            return Err(Error::config("corpus_tokens must be > 0"));
        }
        Ok(())
    }
}

/// Row-stochastic transition table of an order-`order` chain: one row of
/// `vocab` probabilities per context, contexts indexed in base `vocab`.
pub fn markov_table(order: usize, vocab: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_726b_6f76);
    let contexts = vocab.pow(order as u32);
    (0..contexts)
        .map(|_| {
            let raw: Vec<f64> = (0..vocab).map(|_| rng.random::<f64>().powi(3) + 1e-3).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        })
        .collect()
}

fn sample(row: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let mut u: f64 = rng.random();
    for (i, p) in row.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    row.len() - 1
}

/// Deterministic token stream for `spec` over a vocabulary of size `vocab`.
pub fn generate_corpus(spec: &SyntheticTaskSpec, vocab: usize) -> Vec<usize> {
    let n = spec.corpus_tokens;
    match spec.kind {
        TaskKind::RepeatCopy {
            period,
            seed,
            refresh,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut block: Vec<usize> = Vec::new();
            let refresh = refresh.unwrap_or(usize::MAX);
            let mut out = Vec::with_capacity(n);
            let mut since = 0usize;
            while out.len() < n {
                if block.is_empty() || since >= refresh {
                    block = (0..period).map(|_| rng.random_range(0..vocab)).collect();
                    since = 0;
                }
                out.push(block[since % period]);
                since += 1;
            }
            out
        }
        TaskKind::MarkovChar { order, seed } => {
            let table = markov_table(order, vocab, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out: Vec<usize> = (0..order.min(n)).map(|_| rng.random_range(0..vocab)).collect();
            while out.len() < n {
                let ctx = out[out.len() - order..]
                    .iter()
                    .fold(0usize, |acc, t| acc * vocab + t);
                out.push(sample(&table[ctx], &mut rng));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn repeat(period: usize, n: usize, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            kind: TaskKind::RepeatCopy {
                period,
                seed,
                refresh: None,
            },
            corpus_tokens: n,
        }
    }

    #[test]
    fn repeat_copy_pattern() {
        let c = generate_corpus(&repeat(4, 12, 7), 64);
        assert_eq!(c.len(), 12);
        assert_eq!(&c[0..4], &c[4..8]);
        assert_eq!(&c[0..4], &c[8..12]);
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_corpus(&repeat(5, 100, 3), 64),
            generate_corpus(&repeat(5, 100, 3), 64)
        );
        let m = SyntheticTaskSpec {
            kind: TaskKind::MarkovChar { order: 2, seed: 9 },
            corpus_tokens: 500,
        };
        assert_eq!(generate_corpus(&m, 16), generate_corpus(&m, 16));
        assert_ne!(
            generate_corpus(&repeat(5, 100, 3), 64),
            generate_corpus(&repeat(5, 100, 4), 64)
        );
    }

    #[test]
    fn refresh_draws_new_blocks() {
        let spec = SyntheticTaskSpec {
            kind: TaskKind::RepeatCopy {
                period: 4,
                seed: 1,
                refresh: Some(12),
            },
            corpus_tokens: 24,
        };
        let c = generate_corpus(&spec, 64);
        assert_eq!(&c[0..4], &c[8..12]);
        assert_eq!(&c[12..16], &c[20..24]);
        assert_ne!(&c[0..12], &c[12..24]);
    }

    #[test]
    fn markov_bigram_frequencies_match_table() {
        let vocab = 8;
        let spec = SyntheticTaskSpec {
            kind: TaskKind::MarkovChar { order: 1, seed: 11 },
            corpus_tokens: 1_000_000,
        };
        let table = markov_table(1, vocab, 11);
        let tokens = generate_corpus(&spec, vocab);
        let mut counts = vec![vec![0usize; vocab]; vocab];
        for w in tokens.windows(2) {
            counts[w[0]][w[1]] += 1;
        }
        let mut chi2 = 0.0;
        let mut dof = 0;
        for (ctx, row) in counts.iter().enumerate() {
            let total: usize = row.iter().sum();
            for (next, &c) in row.iter().enumerate() {
                let p = table[ctx][next];
                let freq = c as f64 / total as f64;
                assert!((freq - p).abs() < 0.02, "ctx {ctx} next {next}: {freq} vs {p}");
                let expected = p * total as f64;
                chi2 += (c as f64 - expected).powi(2) / expected;
                dof += 1;
            }
            dof -= 1;
        }
        // 56 degrees of freedom; the 0.999 quantile is about 96
        assert!(chi2 < 96.0, "chi2 {chi2} over {dof} dof");
    }

    #[test]
    fn validation() {
        assert!(repeat(1, 10, 0).validate(64).is_err());
        assert!(repeat(33, 10, 0).validate(64).is_err());
        assert!(repeat(32, 10, 0).validate(64).is_ok());
        let m = SyntheticTaskSpec {
            kind: TaskKind::MarkovChar { order: 3, seed: 0 },
            corpus_tokens: 10,
        };
        assert!(m.validate(64).is_err());
    }
}
