//! JSON experiment configuration and the report files written from it.
//!
//! Every key is optional; omitted keys take the defaults below. Unknown keys
//! are rejected.
//!
//! ```json
//! {
//!   "model":  {"vocab": 64, "d_model": 64, "heads": 8, "layers": 2, "d_ff": 128, "train_len": 64},
//!   "train":  {"steps": 2000, "batch": 16, "lr": 0.001,
//!              "optimizer": {"type": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
//!              "grad_clip": 1.0},
//!   "task":   {"kind": {"type": "repeat-copy", "period": 16, "refresh": 64}, "corpus_tokens": 1000000},
//!   "presets": ["alibi", "mep-free"],
//!   "slopes": "default",
//!   "eval_lens": [64, 128, 256, 512],
//!   "seeds": [1, 2, 3],
//!   "output_dir": "pe-lab-out"
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionPreset;
use crate::io_util::write_atomic;
use crate::lm::{
    compare_presets, loss_curves_csv, summary_csv, Comparison, ModelConfig, RunSpec,
    SyntheticTaskSpec, TaskKind, TrainConfig,
};
use crate::slopes::{slopes_for_heads, SlopeSchedule, SlopeVector};

/// Model shape; the preset and seed are supplied per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub vocab: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub train_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            vocab: 64,
            d_model: 64,
            heads: 8,
            layers: 2,
            d_ff: 128,
            train_len: 64,
        }
    }
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            kind: TaskKind::RepeatCopy {
                period: 16,
                seed: 0,
                refresh: Some(64),
            },
            corpus_tokens: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub task: SyntheticTaskSpec,
    pub presets: Vec<String>,
    /// Slope schedule in the CLI grammar (`default`, `h=9`, `8t2,6t9`).
    pub slopes: String,
    pub eval_lens: Vec<usize>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            task: SyntheticTaskSpec::default(),
            presets: vec!["alibi".into(), "mep-free".into()],
            slopes: "default".into(),
            eval_lens: vec![64, 128, 256, 512],
            seeds: vec![1, 2, 3],
            output_dir: PathBuf::from("pe-lab-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.presets.is_empty() {
            return Err(Error::config("presets must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        if let Some(len) = self.eval_lens.iter().find(|&&l| l < self.model.train_len) {
            return Err(Error::config(format!(
                "eval_len {len} is shorter than train_len {}",
                self.model.train_len
            )));
        }
        self.train.validate()?;
        self.task.validate(self.model.train_len)?;
        for run in self.runs()? {
            self.model_config(&run.preset, 0).validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<SlopeSchedule> {
        SlopeSchedule::parse(&self.slopes, self.model.heads)
    }

    pub fn slope_vector(&self) -> Result<SlopeVector> {
        slopes_for_heads(&self.schedule()?)
    }

    /// One run per listed preset, labelled by preset name.
    pub fn runs(&self) -> Result<Vec<RunSpec>> {
        let slopes = self.slope_vector()?;
        self.presets
            .iter()
            .map(|name| {
                Ok(RunSpec {
                    label: name.clone(),
                    preset: FusionPreset::from_name(name, &slopes)?,
                })
            })
            .collect()
    }

    pub fn model_config(&self, preset: &FusionPreset, seed: u64) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab: m.vocab,
            d_model: m.d_model,
            heads: m.heads,
            layers: m.layers,
            d_ff: m.d_ff,
            train_len: m.train_len,
            preset: preset.clone(),
            seed,
        }
    }

    pub fn compare(&self, runs: &[RunSpec]) -> Result<Comparison> {
        compare_presets(
            runs,
            &self.model_config(&runs[0].preset, 0),
            &self.train,
            &self.task,
            &self.eval_lens,
            &self.seeds,
        )
    }
}

/// Writes `report.csv`, `report.json`, `summary.csv` and `loss_curves.csv`
/// under `dir`, returning the written paths.
pub fn write_comparison(cmp: &Comparison, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        ("report.csv", cmp.report.to_csv()),
        ("report.json", cmp.report.to_json()),
        ("summary.csv", summary_csv(&cmp.summary)),
        ("loss_curves.csv", loss_curves_csv(&cmp.curves)),
    ];
    files
        .into_iter()
        .map(|(name, body)| {
            let path = dir.join(name);
            write_atomic(&path, body.as_bytes())?;
            Ok(path)
        })
        .collect()
}
