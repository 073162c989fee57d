//! Toy causal language model for length-extrapolation experiments.

mod corpus;
mod eval;
mod model;
mod train;

pub use corpus::{generate_corpus, markov_table, SyntheticTaskSpec, TaskKind};
pub use eval::{
    compare_presets, evaluate_perplexity, held_out, loss_curves_csv, summary_csv, Comparison,
    EvalReport, EvalRow, RunSpec, SummaryRow, MAX_EVAL_WINDOWS,
    MIN_EVAL_WINDOWS,
};
pub use model::{
    batch_loss, loss_and_grads, position_nll, Grads, LayerWeights, ModelConfig, Params, Weights,
};
pub use train::{train, training_split, Optimizer, TrainConfig, TrainResult};
