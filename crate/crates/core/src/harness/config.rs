use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::GeneratorSpec;
use crate::error::{DashError, Result};
use crate::eval::RecallTask;
use crate::model::ModelSpec;
use crate::optim::LrSchedule;
use crate::search::SearchConfig;
use crate::training::{Stage, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub tokens: usize,
    pub heldout_fraction: f64,
    pub generator: GeneratorSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub heldout_batches: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub recall: RecallTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Distill each searched architecture before measuring held-out KL.
    pub distill: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub out: PathBuf,
}

/// Everything one run needs, read from a TOML file with one section per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds corpus generation and held-out batch selection.
    pub seed: u64,
    pub model: ModelSpec,
    pub corpus: CorpusConfig,
    pub teacher: TrainConfig,
    pub align: TrainConfig,
    pub search: SearchConfig,
    pub distill: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub paths: PathsConfig,
}

fn train(stage: Stage, steps: usize, seq_len: usize, lr_main: f64, lr_attn_op: f64) -> TrainConfig {
    TrainConfig {
        steps,
        seq_len,
        lr_main,
        lr_attn_op,
        schedule: LrSchedule::Cosine,
        ..TrainConfig::new(stage)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelSpec::default();
        let t = model.max_seq_len;
        RunConfig {
            seed: 0,
            corpus: CorpusConfig {
                tokens: 2_000_000,
                heldout_fraction: 0.05,
                generator: GeneratorSpec {
                    vocab: model.vocab,
                    ..GeneratorSpec::default()
                },
            },
            teacher: train(Stage::Teacher, 2000, t, 3e-3, 3e-3),
            align: train(Stage::Align, 1000, t, 3e-3, 3e-3),
            search: SearchConfig {
                seq_len: t,
                ..SearchConfig::default()
            },
            distill: train(Stage::Distill, 2000, t, 1e-3, 3e-4),
            eval: EvalConfig {
                heldout_batches: 16,
                batch: 4,
                seq_len: t,
                recall: RecallTask {
                    pairs: 3,
                    gap: 24,
                    trials: 256,
                    seed: 0,
                },
            },
            sweep: SweepConfig {
                lambdas: vec![0.001, 0.005, 0.02, 0.1],
                seeds: vec![0, 1, 2],
                distill: true,
            },
            paths: PathsConfig {
                out: "runs/default".into(),
            },
            model,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| DashError::Config(e.to_string()))?;
        cfg.assign_stages();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| DashError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    fn assign_stages(&mut self) {
        self.teacher.stage = Stage::Teacher;
        self.align.stage = Stage::Align;
        self.distill.stage = Stage::Distill;
    }

    /// Replaces the base seed and every stage seed.
    pub fn with_seed(mut self, seed: u64) -> RunConfig {
        self.seed = seed;
        self.teacher.seed = seed;
        self.align.seed = seed;
        self.search.seed = seed;
        self.distill.seed = seed;
        self.eval.recall.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.corpus.generator.validate()?;
        let bad = |m: String| Err(DashError::Config(m));
        if self.corpus.generator.vocab != self.model.vocab {
            return bad(format!(
                "corpus vocabulary {} differs from model vocabulary {}",
                self.corpus.generator.vocab, self.model.vocab
            ));
        }
        if !(0.0 < self.corpus.heldout_fraction && self.corpus.heldout_fraction < 1.0) {
            return bad("heldout_fraction must be in (0, 1)".into());
        }
        for (name, t) in [
            ("teacher", &self.teacher),
            ("align", &self.align),
            ("distill", &self.distill),
        ] {
            t.validate()?;
            if t.seq_len > self.model.max_seq_len {
                return bad(format!("{name}.seq_len exceeds model.max_seq_len"));
            }
        }
        self.search.validate()?;
        if self.search.seq_len > self.model.max_seq_len || self.eval.seq_len > self.model.max_seq_len {
            return bad("search/eval seq_len exceeds model.max_seq_len".into());
        }
        if self.eval.recall.prompt_len() > self.model.max_seq_len {
            return bad("recall prompts are longer than model.max_seq_len".into());
        }
        if self.eval.heldout_batches == 0 || self.eval.batch == 0 {
            return bad("eval needs at least one held-out batch".into());
        }
        if self.sweep.lambdas.iter().any(|l| l.is_nan() || *l < 0.0) {
            return bad("sweep lambdas must be non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.distill.stage, Stage::Distill);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RunConfig::default()
            .to_toml()
            .replace("[model]\n", "[model]\nheads_typo = 3\n");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("heads_typo"), "{err}");
        let text = format!("bogus = 1\n{}", RunConfig::default().to_toml());
        assert!(RunConfig::from_toml(&text).is_err());
    }

    #[test]
    fn inconsistent_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.corpus.generator.vocab = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.search.seq_len = 4096;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.model.window = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let cfg = RunConfig::default().with_seed(42);
        assert_eq!(
            [
                cfg.seed,
                cfg.teacher.seed,
                cfg.align.seed,
                cfg.search.seed,
                cfg.distill.seed
            ],
            [42; 5]
        );
    }
}
