//! CTC guidance on the encoder outputs and the joint training objective
//! `L_DLM + β1·L_DP + β2·L_CTP + β3·L_CTC`.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Graph, Matrix, NodeId};
use crate::ctp::{ctp_loss_node, CtpLabels};
use crate::diffusion::{corrupt, dlm_loss_node, CorruptedSeq, MaskSchedule};
use crate::duration::fm_loss_node;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::Rng;
use crate::tokens::{PairedSample, TokenSeq};

/// Latent symbol sequence; the blank is the id one past the alphabet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LatentLabelSeq {
    labels: Vec<u32>,
    alphabet: u32,
}

impl LatentLabelSeq {
    pub fn new(labels: Vec<u32>, alphabet: u32) -> Result<Self> {
        if let Some(&l) = labels.iter().find(|&&l| l >= alphabet) {
            return Err(Error::Domain(format!("latent label {l} outside alphabet of {alphabet}")));
        }
        Ok(Self { labels, alphabet })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn blank(&self) -> u32 {
        self.alphabet
    }

    /// Minimum number of frames that can emit this sequence: one per label
    /// plus one blank between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        ctc_min_frames(&self.labels)
    }
}

pub fn ctc_min_frames(labels: &[u32]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood and its gradient w.r.t. the logits
/// (`frames × (alphabet + 1)`, blank in the last column).
pub fn ctc_loss_with_grad(logits: &Matrix, labels: &LatentLabelSeq) -> Result<(f64, Matrix)> {
    let (frames, classes) = logits.shape();
    if classes != labels.alphabet as usize + 1 {
        return Err(Error::Contract(format!(
            "{classes} logit columns for an alphabet of {} plus blank",
            labels.alphabet
        )));
    }
    let required = labels.min_frames();
    if frames < required || frames == 0 {
        return Err(Error::CtcInfeasible { frames, required });
    }
    let blank = labels.blank() as usize;
    let mut logp = logits.clone();
    for t in 0..frames {
        let row = logp.row_mut(t);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v -= lse);
    }
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(labels.labels.iter().flat_map(|&l| [l as usize, blank]))
        .collect();
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = logp.get(0, ext[0]);
    if s_len > 1 {
        alpha[1] = logp.get(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = [prev[s], ninf, ninf];
            if s >= 1 {
                terms[1] = prev[s - 1];
            }
            if skip_ok(s) {
                terms[2] = prev[s - 2];
            }
            alpha[t * s_len + s] = log_sum_exp(&terms) + logp.get(t, ext[s]);
        }
    }
    let last = &alpha[(frames - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_sum_exp(&[last[s_len - 1], last[s_len - 2]])
    } else {
        last[0]
    };
    if !log_p.is_finite() {
        return Err(Error::CtcInfeasible { frames, required });
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = |k: usize| beta[(t + 1) * s_len + k] + logp.get(t + 1, ext[k]);
            let mut terms = [next(s), ninf, ninf];
            if s + 1 < s_len {
                terms[1] = next(s + 1);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                terms[2] = next(s + 2);
            }
            beta[t * s_len + s] = log_sum_exp(&terms);
        }
    }

    let mut grad = Matrix::zeros(frames, classes);
    let mut occ = vec![ninf; classes];
    for t in 0..frames {
        occ.iter_mut().for_each(|v| *v = ninf);
        for s in 0..s_len {
            let a = alpha[t * s_len + s] + beta[t * s_len + s];
            let k = ext[s];
            occ[k] = log_sum_exp(&[occ[k], a]);
        }
        let g = grad.row_mut(t);
        for k in 0..classes {
            g[k] = logp.get(t, k).exp() - (occ[k] - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

pub fn ctc_loss(logits: &Matrix, labels: &LatentLabelSeq) -> Result<f64> {
    ctc_loss_with_grad(logits, labels).map(|(l, _)| l)
}

pub fn ctc_loss_node(
    g: &mut Graph,
    logits: NodeId,
    labels: &LatentLabelSeq,
    scale: f64,
) -> Result<(NodeId, f64)> {
    let (loss, mut grad) = ctc_loss_with_grad(g.value(logits), labels)?;
    grad.data.iter_mut().for_each(|v| *v *= scale);
    Ok((g.loss(logits, scale * loss, grad), loss))
}

/// Weights of the joint objective. `dlm` is 1 for real training; other
/// values exist for isolating terms in tests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub dlm: f64,
    /// Duration flow-matching weight.
    pub beta1: f64,
    /// Common-token weight.
    pub beta2: f64,
    /// CTC weight.
    pub beta3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dlm: 1.0,
            beta1: 1.0,
            beta2: 1.0,
            beta3: 0.2,
        }
    }
}

/// One training pair as the objective sees it. During pretraining the
/// source is a noised copy of the target and may contain mask tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub source: TokenSeq,
    pub target: TokenSeq,
    pub labels: Option<CtpLabels>,
    pub latents: Vec<u32>,
    pub ratio: f64,
}

impl TrainExample {
    pub fn from_pair(s: &PairedSample) -> Self {
        Self {
            source: s.source.clone(),
            target: s.target.clone(),
            labels: Some(CtpLabels(s.common_labels.clone())),
            latents: s.latent_labels.clone(),
            ratio: s.ratio().value(),
        }
    }
}

/// Randomness consumed by one example in one step, drawn up front so the
/// objective itself is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub corrupted: CorruptedSeq,
    pub drop_content: bool,
    pub fm_t: Vec<f64>,
    pub fm_u0: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub ctp_pos_weight: f64,
    /// Probability of dropping the content block for the DLM term.
    pub content_dropout: f64,
    /// Flow-matching draws per example.
    pub fm_draws: usize,
    pub schedule: MaskSchedule,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            ctp_pos_weight: 2.0,
            content_dropout: 0.1,
            fm_draws: 4,
            schedule: MaskSchedule::default(),
        }
    }
}

pub fn draw(example: &TrainExample, cfg: &ObjectiveConfig, params: &ModelParams, rng: &mut Rng) -> Result<Draws> {
    let t: f64 = rng.random();
    let corrupted = corrupt(&example.target, t, cfg.schedule, params.vocab(), rng)?;
    let drop_content = rng.random::<f64>() < cfg.content_dropout;
    let fm_t = (0..cfg.fm_draws).map(|_| rng.random::<f64>()).collect();
    let fm_u0 = (0..cfg.fm_draws).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Draws {
        corrupted,
        drop_content,
        fm_t,
        fm_u0,
    })
}

/// Batch-normalized components of the joint objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct JointReport {
    pub total: f64,
    pub dlm: f64,
    pub dp: f64,
    pub ctp: f64,
    pub ctc: f64,
    pub masked_tokens: usize,
    pub ctc_skipped: usize,
}

/// Evaluates the joint objective on a batch and adds its gradient to the
/// parameter gradient buffers in one backward pass per example.
///
/// * DLM: summed `1/λ`-weighted NLL over the batch's total masked count;
/// * DP and CTP: mean over examples (CTP only where labels exist);
/// * CTC: mean over examples whose alignment is feasible.
pub fn joint_loss(
    batch: &[TrainExample],
    draws: &[Draws],
    params: &mut ModelParams,
    cfg: &ObjectiveConfig,
) -> Result<JointReport> {
    if batch.len() != draws.len() {
        return Err(Error::Contract("one draw set per example required".into()));
    }
    let w = cfg.weights;
    let latent = params.config().latent_alphabet;
    let masked_total: usize = draws.iter().map(|d| d.corrupted.masked.len()).sum();
    let labelled = batch.iter().filter(|e| e.labels.is_some()).count();
    let feasible: Vec<Option<LatentLabelSeq>> = batch
        .iter()
        .map(|e| {
            let seq = LatentLabelSeq::new(e.latents.clone(), latent)?;
            Ok((seq.min_frames() <= e.source.len()).then_some(seq))
        })
        .collect::<Result<_>>()?;
    let n_feasible = feasible.iter().filter(|f| f.is_some()).count();
    let mut report = JointReport {
        masked_tokens: masked_total,
        ctc_skipped: batch.len() - n_feasible,
        ..Default::default()
    };
    let mut dlm_sum = 0.0;

    for ((ex, dr), ctc_labels) in batch.iter().zip(draws).zip(&feasible) {
        let mut terms: Vec<(NodeId, f64)> = Vec::new();
        let grads = {
            let mut g = Graph::new(&params.store);
            let emb = params.source_embedding(&mut g, ex.source.ids());
            let content = params.encoder_graph(&mut g, emb);

            if w.dlm != 0.0 && !dr.corrupted.masked.is_empty() {
                let cond = (!dr.drop_content).then_some(content);
                let out = params.decoder_graph(&mut g, cond, dr.corrupted.z.ids());
                let scale = w.dlm / masked_total as f64;
                let (node, term) = dlm_loss_node(&mut g, out.logits, &ex.target, &dr.corrupted, scale)?;
                dlm_sum += term.weighted_nll;
                terms.push((node, 1.0));
            }
            if w.beta1 != 0.0 {
                let pooled = params.dp_pool_graph(&mut g, content, emb);
                let u_t: Vec<f64> = dr
                    .fm_t
                    .iter()
                    .zip(&dr.fm_u0)
                    .map(|(&t, &u0)| (1.0 - t) * u0 + t * ex.ratio)
                    .collect();
                let v = params.dp_velocity_graph(&mut g, pooled, &u_t, &dr.fm_t);
                let scale = w.beta1 / batch.len() as f64;
                let (node, loss) = fm_loss_node(&mut g, v, &dr.fm_u0, &dr.fm_t, ex.ratio, scale)?;
                report.dp += loss / batch.len() as f64;
                terms.push((node, 1.0));
            }
            if let (true, Some(labels)) = (w.beta2 != 0.0, &ex.labels) {
                let logits = params.ctp_graph(&mut g, content, emb);
                let scale = w.beta2 / labelled as f64;
                let (node, loss) = ctp_loss_node(&mut g, logits, labels, cfg.ctp_pos_weight, scale)?;
                report.ctp += loss / labelled as f64;
                terms.push((node, 1.0));
            }
            if let (true, Some(labels)) = (w.beta3 != 0.0, ctc_labels) {
                let logits = params.ctc_graph(&mut g, content);
                let scale = w.beta3 / n_feasible as f64;
                let (node, loss) = ctc_loss_node(&mut g, logits, labels, scale)?;
                report.ctc += loss / n_feasible as f64;
                terms.push((node, 1.0));
            }
            if terms.is_empty() {
                continue;
            }
            let root = g.weighted_sum(&terms);
            g.backward(root)
        };
        params.store.accumulate(&grads);
    }

    if masked_total > 0 {
        report.dlm = dlm_sum / masked_total as f64;
    }
    for (name, v) in [("dlm", report.dlm), ("dp", report.dp), ("ctp", report.ctp), ("ctc", report.ctc)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss")));
        }
    }
    report.total = w.dlm * report.dlm + w.beta1 * report.dp + w.beta2 * report.ctp + w.beta3 * report.ctc;
    Ok(report)
}
