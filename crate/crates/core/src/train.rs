//! Two-stage training: pretraining on noised native sequences, then joint
//! fine-tuning on accented/native pairs.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{bart_corrupt, BartConfig};
use crate::error::{Error, Result};
use crate::guidance::{draw, joint_loss, JointReport, LossWeights, ObjectiveConfig, TrainExample};
use crate::model::ModelParams;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng};
use crate::tokens::PairedSample;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub objective: ObjectiveConfig,
    pub pretrain_noise: BartConfig,
    /// Probability that a pretraining source is the clean sequence itself.
    pub pretrain_identity: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 2,
            finetune_epochs: 12,
            batch_size: 16,
            optimizer: AdamConfig::default(),
            objective: ObjectiveConfig::default(),
            pretrain_noise: BartConfig::default(),
            pretrain_identity: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pretrain_identity) {
            return Err(Error::Config("pretrain_identity must lie in [0, 1]".into()));
        }
        self.pretrain_noise.validate()
    }

    /// Stage-one weights: the diffusion term plus CTC only.
    pub fn pretrain_weights(&self) -> LossWeights {
        LossWeights {
            beta1: 0.0,
            beta2: 0.0,
            ..self.objective.weights
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub total: f64,
    pub dlm: f64,
    pub dp: f64,
    pub ctp: f64,
    pub ctc: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "stage,epoch,total,dlm,dp,ctp,ctc,grad_norm,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.stage.name(),
            self.epoch,
            self.total,
            self.dlm,
            self.dp,
            self.ctp,
            self.ctc,
            self.grad_norm,
            self.lr
        )
    }
}

fn pretrain_examples(pairs: &[PairedSample], cfg: &TrainConfig, params: &ModelParams, rng: &mut Rng) -> Result<Vec<TrainExample>> {
    pairs
        .iter()
        .map(|p| {
            let source = if rng.random::<f64>() < cfg.pretrain_identity {
                p.target.clone()
            } else {
                bart_corrupt(&p.target, &cfg.pretrain_noise, params.vocab(), rng)?.0
            };
            let ratio = p.target.len() as f64 / source.len() as f64;
            Ok(TrainExample {
                source,
                target: p.target.clone(),
                labels: None,
                latents: p.latent_labels.clone(),
                ratio,
            })
        })
        .collect()
}

/// Runs both stages in place. `on_epoch` sees every epoch's log and the
/// updated parameters. If a batch produces a non-finite loss or gradient
/// the error is returned before that batch's update, so `params` still holds
/// the last good state.
pub fn train(
    params: &mut ModelParams,
    pairs: &[PairedSample],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let batches_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * (cfg.pretrain_epochs + cfg.finetune_epochs);
    let mut opt = Adam::new(&params.store, cfg.optimizer, total_steps);
    let finetune: Vec<TrainExample> = pairs.iter().map(TrainExample::from_pair).collect();
    let mut logs = Vec::new();
    let schedule = (1..=cfg.pretrain_epochs)
        .map(|e| (Stage::Pretrain, e))
        .chain((1..=cfg.finetune_epochs).map(|e| (Stage::Finetune, e)));
    for (stage, epoch) in schedule {
        let mut rng = rng::stream(seed, &format!("train/{}/{epoch}", stage.name()));
        let mut objective = cfg.objective;
        let examples = match stage {
            Stage::Pretrain => {
                objective.weights = cfg.pretrain_weights();
                pretrain_examples(pairs, cfg, params, &mut rng)?
            }
            Stage::Finetune => finetune.clone(),
        };
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = JointReport::default();
        let mut norm_sum = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let draws = batch
                .iter()
                .map(|ex| draw(ex, &objective, params, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            params.store.zero_grads();
            let report = joint_loss(&batch, &draws, params, &objective)?;
            params.store.check_grads_finite()?;
            lr = opt.lr_at(opt.steps_taken());
            norm_sum += opt.step(&mut params.store);
            sum.total += report.total;
            sum.dlm += report.dlm;
            sum.dp += report.dp;
            sum.ctp += report.ctp;
            sum.ctc += report.ctc;
        }
        let nb = order.len().div_ceil(cfg.batch_size) as f64;
        let log = EpochLog {
            stage,
            epoch,
            total: sum.total / nb,
            dlm: sum.dlm / nb,
            dp: sum.dp / nb,
            ctp: sum.ctp / nb,
            ctc: sum.ctc / nb,
            grad_norm: norm_sum / nb,
            lr,
        };
        log::info!("{} epoch {epoch}: {}", stage.name(), log.csv_row());
        on_epoch(&log, params)?;
        logs.push(log);
    }
    Ok(logs)
}
