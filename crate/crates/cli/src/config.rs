//! Run configuration: one JSON file that fixes every setting of a run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use maskconv::corpus::CorpusSpec;
use maskconv::diffusion::{BartConfig, MaskSchedule};
use maskconv::guidance::{LossWeights, ObjectiveConfig};
use maskconv::model::ModelConfig;
use maskconv::optim::AdamConfig;
use maskconv::sampler::{RatioMode, SamplerConfig};
use maskconv::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub run_dir: PathBuf,
    /// Corpus spec file; the built-in layout when absent.
    pub specs: Option<PathBuf>,
    pub corpus: PathBuf,
    pub corpus_size: usize,
    pub held_out_fraction: f64,
    /// Held-out pairs used by `eval` and `sweep`.
    pub eval_samples: usize,

    pub model: ModelConfig,
    pub epsilon: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub ctp_pos_weight: f64,
    pub content_dropout: f64,
    pub fm_draws: usize,

    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub pretrain_identity: f64,
    pub pretrain_noise: BartConfig,
    pub optimizer: AdamConfig,

    pub sampler: SamplerConfig,
    /// `"auto"` or a fixed positive ratio.
    pub ratio: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let w = LossWeights::default();
        Self {
            seed: 0,
            run_dir: "runs/default".into(),
            specs: None,
            corpus: "runs/default/corpus.jsonl".into(),
            corpus_size: 5000,
            held_out_fraction: 0.1,
            eval_samples: 200,
            model: ModelConfig::default(),
            epsilon: MaskSchedule::default().epsilon(),
            beta1: w.beta1,
            beta2: w.beta2,
            beta3: w.beta3,
            ctp_pos_weight: train.objective.ctp_pos_weight,
            content_dropout: train.objective.content_dropout,
            fm_draws: train.objective.fm_draws,
            pretrain_epochs: train.pretrain_epochs,
            finetune_epochs: train.finetune_epochs,
            batch_size: train.batch_size,
            pretrain_identity: train.pretrain_identity,
            pretrain_noise: train.pretrain_noise,
            optimizer: train.optimizer,
            sampler: SamplerConfig::default(),
            ratio: "auto".into(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config()?.validate()?;
        self.sampler.validate()?;
        self.ratio_mode()?;
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            bail!("held_out_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn objective(&self) -> Result<ObjectiveConfig> {
        Ok(ObjectiveConfig {
            weights: LossWeights {
                dlm: 1.0,
                beta1: self.beta1,
                beta2: self.beta2,
                beta3: self.beta3,
            },
            ctp_pos_weight: self.ctp_pos_weight,
            content_dropout: self.content_dropout,
            fm_draws: self.fm_draws,
            schedule: MaskSchedule::new(self.epsilon)?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            pretrain_epochs: self.pretrain_epochs,
            finetune_epochs: self.finetune_epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            objective: self.objective()?,
            pretrain_noise: self.pretrain_noise,
            pretrain_identity: self.pretrain_identity,
        })
    }

    pub fn ratio_mode(&self) -> Result<RatioMode> {
        Ok(self.ratio.parse()?)
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        match &self.specs {
            Some(p) => Ok(CorpusSpec::load(p)?),
            None => Ok(CorpusSpec::default()),
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir.join("checkpoints")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("final.ckpt")
    }

    /// Writes the resolved configuration into the run directory.
    pub fn write_resolved(&self) -> Result<()> {
        std::fs::create_dir_all(&self.run_dir).with_context(|| format!("creating {}", self.run_dir.display()))?;
        let path = self.run_dir.join("config.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
