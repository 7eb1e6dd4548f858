//! Greedy iterative unmasking with reuse of source tokens.
//!
//! The target starts as a nearest-neighbour resampling of the source in
//! which only reused positions keep their token; everything else is masked
//! and filled in `K` positions per step, most confident first.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Matrix};
use crate::ctp::{score_ctp, CtpScores};
use crate::duration::{predict_ratio, resample_length, DEFAULT_EULER_STEPS};
use crate::error::{Error, Result};
use crate::model::{cfg_combine, ContentFeatures, ModelParams};
use crate::rng::{self, Rng};
use crate::tokens::{TokenSeq, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReuseMode {
    /// Reuse source positions whose score exceeds the threshold.
    Threshold,
    /// Reuse the `⌈p·n⌉` highest-scoring source positions.
    Proportion,
    /// Reuse a uniform random subset of `⌈p·n⌉` source positions.
    Random,
    None,
}

impl std::str::FromStr for ReuseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "threshold" => Ok(Self::Threshold),
            "proportion" => Ok(Self::Proportion),
            "random" => Ok(Self::Random),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown reuse mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub threshold: f64,
    pub cfg_weight: f64,
    pub reuse_mode: ReuseMode,
    pub proportion: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            threshold: 0.5,
            cfg_weight: 1.0,
            reuse_mode: ReuseMode::Threshold,
            proportion: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if !(0.0..=1.0).contains(&self.proportion) {
            return Err(Error::Config(format!("proportion {} outside [0, 1]", self.proportion)));
        }
        if !(self.cfg_weight >= 0.0 && self.cfg_weight.is_finite()) {
            return Err(Error::Config(format!("guidance weight {} must be >= 0", self.cfg_weight)));
        }
        Ok(())
    }
}

/// Initial target and the bookkeeping needed to interpret it.
#[derive(Clone, Debug, PartialEq)]
pub struct InitTarget {
    pub z0: TokenSeq,
    /// Source positions (0-based) selected for reuse.
    pub reuse_set: BTreeSet<usize>,
    /// Source position (0-based) each target position was resampled from.
    pub index_map: Vec<usize>,
}

/// Builds the initial target of length `round(n_src·r)`.
pub fn init_target(
    src: &TokenSeq,
    scores: &CtpScores,
    r: f64,
    cfg: &SamplerConfig,
    vocab: &Vocab,
    rng: &mut Rng,
) -> Result<InitTarget> {
    let n = src.len();
    if scores.0.len() != n {
        return Err(Error::Contract(format!("{} scores for a source of length {n}", scores.0.len())));
    }
    let count = || ((cfg.proportion * n as f64).ceil() as usize).min(n);
    let reuse_set: BTreeSet<usize> = match cfg.reuse_mode {
        ReuseMode::Threshold => (0..n).filter(|&i| scores.0[i] > cfg.threshold).collect(),
        ReuseMode::Proportion => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores.0[b].total_cmp(&scores.0[a]).then(a.cmp(&b)));
            order.into_iter().take(count()).collect()
        }
        ReuseMode::Random => sample(rng, n, count()).into_iter().collect(),
        ReuseMode::None => BTreeSet::new(),
    };
    let (_, map) = resample_length(n, r)?;
    let index_map: Vec<usize> = map.into_iter().map(|i| i - 1).collect();
    let ids = index_map
        .iter()
        .map(|&i| if reuse_set.contains(&i) { src.ids()[i] } else { vocab.mask_id() })
        .collect();
    Ok(InitTarget {
        z0: TokenSeq::new(ids, vocab)?,
        reuse_set,
        index_map,
    })
}

/// Anything that can score every position of a partially masked target.
pub trait TokenPredictor {
    /// `len(z) × V` logits, with or without the source condition.
    fn logits(&self, z: &TokenSeq, conditional: bool) -> Result<Matrix>;
}

/// The trained decoder conditioned on fixed content features.
pub struct ModelPredictor<'a> {
    pub params: &'a ModelParams,
    pub content: &'a ContentFeatures,
}

impl TokenPredictor for ModelPredictor<'_> {
    fn logits(&self, z: &TokenSeq, conditional: bool) -> Result<Matrix> {
        self.params.decode(z, conditional.then_some(self.content))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Step number on the `1..=T` scale.
    pub step: usize,
    pub positions: Vec<usize>,
    pub tokens: Vec<u32>,
    pub confidences: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerTrace {
    /// Target positions that were never masked.
    pub reused: Vec<usize>,
    pub per_step: usize,
    pub effective_steps: usize,
    pub start_step: usize,
    pub steps: Vec<StepRecord>,
}

/// Per-step count `K = ⌈n/T⌉`, effective steps `⌈masked/K⌉` and the first
/// step number `max(1, T − effective + 1)`.
pub fn step_schedule(n_tgt: usize, n_masked: usize, steps: usize) -> (usize, usize, usize) {
    let k = n_tgt.div_ceil(steps).max(1);
    let t_eff = n_masked.div_ceil(k);
    let s0 = (steps + 1).saturating_sub(t_eff).max(1);
    (k, t_eff, s0)
}

/// Fills every masked position of `z0`. Reused positions and positions
/// filled in earlier steps are never revisited.
pub fn greedy_sample(
    z0: &TokenSeq,
    predictor: &dyn TokenPredictor,
    cfg: &SamplerConfig,
    vocab: &Vocab,
) -> Result<(TokenSeq, SamplerTrace)> {
    cfg.validate()?;
    let mask = vocab.mask_id();
    let n = z0.len();
    let mut z = z0.ids().to_vec();
    let mut masked: BTreeSet<usize> = (0..n).filter(|&j| z[j] == mask).collect();
    let (k, t_eff, s0) = step_schedule(n, masked.len(), cfg.steps);
    let mut trace = SamplerTrace {
        reused: (0..n).filter(|j| !masked.contains(j)).collect(),
        per_step: k,
        effective_steps: t_eff,
        start_step: s0,
        steps: Vec::with_capacity(t_eff),
    };
    if masked.is_empty() {
        trace.effective_steps = 0;
        return Ok((z0.clone(), trace));
    }
    for step in s0..=cfg.steps {
        if masked.is_empty() {
            break;
        }
        let current = TokenSeq::new(z.clone(), vocab)?;
        let cond = predictor.logits(&current, true)?;
        let logits = if cfg.cfg_weight > 0.0 {
            cfg_combine(&cond, &predictor.logits(&current, false)?, cfg.cfg_weight)?
        } else {
            cond
        };
        if logits.rows != n || logits.cols != vocab.size() as usize {
            return Err(Error::Contract(format!(
                "predictor returned {}x{} logits for {n} positions over {} tokens",
                logits.rows,
                logits.cols,
                vocab.size()
            )));
        }
        let mut cands: Vec<(usize, u32, f64)> = masked
            .iter()
            .map(|&j| {
                let mut p = logits.row(j).to_vec();
                softmax_in_place(&mut p);
                let (best, conf) = p
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
                (j, best as u32, conf)
            })
            .collect();
        if cands.iter().any(|c| !c.2.is_finite()) {
            return Err(Error::NonFinite(format!("confidences at step {step}")));
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        cands.truncate(k.min(masked.len()));
        cands.sort_by_key(|c| c.0);
        let mut rec = StepRecord {
            step,
            positions: Vec::with_capacity(cands.len()),
            tokens: Vec::with_capacity(cands.len()),
            confidences: Vec::with_capacity(cands.len()),
        };
        for (j, tok, conf) in cands {
            z[j] = tok;
            masked.remove(&j);
            rec.positions.push(j);
            rec.tokens.push(tok);
            rec.confidences.push(conf);
        }
        trace.steps.push(rec);
    }
    debug_assert!(masked.is_empty());
    Ok((TokenSeq::new(z, vocab)?, trace))
}

/// How the target length is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RatioMode {
    /// Sample from the duration predictor.
    Auto,
    Explicit(f64),
}

impl std::str::FromStr for RatioMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Self::Auto);
        }
        s.parse::<f64>()
            .ok()
            .filter(|r| r.is_finite() && *r > 0.0)
            .map(Self::Explicit)
            .ok_or_else(|| Error::Config(format!("ratio must be \"auto\" or a positive number, got {s:?}")))
    }
}

impl std::fmt::Display for RatioMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Auto => write!(f, "auto"),
            Self::Explicit(r) => write!(f, "{r}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversion {
    pub output: TokenSeq,
    pub scores: CtpScores,
    pub ratio: f64,
    pub init: InitTarget,
    pub trace: SamplerTrace,
}

/// Per-source work shared by every sampler setting: content features,
/// common-token scores and the duration ratio.
pub struct Prepared {
    pub source: TokenSeq,
    pub content: ContentFeatures,
    pub scores: CtpScores,
    pub ratio: f64,
}

/// encode → score → ratio. The predicted ratio draws from the
/// `sample/ratio` sub-stream of `seed`.
pub fn prepare(src: &TokenSeq, params: &ModelParams, ratio: RatioMode, seed: u64) -> Result<Prepared> {
    let content = params.encode(src).map_err(|e| e.in_stage("encode"))?;
    let scores = score_ctp(src, &content, params).map_err(|e| e.in_stage("score"))?;
    let ratio = match ratio {
        RatioMode::Explicit(r) => r,
        RatioMode::Auto => {
            let mut rng = rng::stream(seed, "sample/ratio");
            predict_ratio(&content, src, params, DEFAULT_EULER_STEPS, &mut rng)
                .map_err(|e| e.in_stage("ratio"))?
                .value()
        }
    };
    Ok(Prepared {
        source: src.clone(),
        content,
        scores,
        ratio,
    })
}

/// initial target → greedy unmasking on a prepared source. Random reuse
/// draws from the `sample/reuse` sub-stream of `cfg.seed`.
pub fn finish(prep: &Prepared, params: &ModelParams, cfg: &SamplerConfig) -> Result<Conversion> {
    cfg.validate()?;
    let vocab = params.vocab();
    let mut rng = rng::stream(cfg.seed, "sample/reuse");
    let init = init_target(&prep.source, &prep.scores, prep.ratio, cfg, vocab, &mut rng)
        .map_err(|e| e.in_stage("init"))?;
    let predictor = ModelPredictor {
        params,
        content: &prep.content,
    };
    let (output, trace) = greedy_sample(&init.z0, &predictor, cfg, vocab).map_err(|e| e.in_stage("sample"))?;
    Ok(Conversion {
        output,
        scores: prep.scores.clone(),
        ratio: prep.ratio,
        init,
        trace,
    })
}

/// The whole pipeline for one source.
pub fn convert(src: &TokenSeq, params: &ModelParams, cfg: &SamplerConfig, ratio: RatioMode) -> Result<Conversion> {
    cfg.validate()?;
    let prep = prepare(src, params, ratio, cfg.seed)?;
    finish(&prep, params, cfg)
}
