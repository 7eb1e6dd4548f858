//! Absorbing-mask corruption, its reweighted loss, and BART-style source
//! noising for pretraining.

use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Graph, Matrix, NodeId};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokens::{TokenSeq, Vocab};

/// Masking rate `λ(t) = (1 − ε)·t + ε`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSchedule {
    epsilon: f64,
}

impl MaskSchedule {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Domain(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        Ok(Self { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn rate(&self, t: f64) -> f64 {
        (1.0 - self.epsilon) * t + self.epsilon
    }
}

impl Default for MaskSchedule {
    fn default() -> Self {
        Self { epsilon: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedSeq {
    pub z: TokenSeq,
    /// Masked positions, ascending.
    pub masked: Vec<usize>,
    pub lambda: f64,
    pub t: f64,
}

/// Masks each position of `y0` independently with probability `λ(t)`.
pub fn corrupt(
    y0: &TokenSeq,
    t: f64,
    schedule: MaskSchedule,
    vocab: &Vocab,
    rng: &mut Rng,
) -> Result<CorruptedSeq> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("diffusion time {t} outside [0, 1]")));
    }
    let lambda = schedule.rate(t);
    let mut ids = y0.ids().to_vec();
    let mut masked = Vec::new();
    for (i, id) in ids.iter_mut().enumerate() {
        if rng.random::<f64>() < lambda {
            *id = vocab.mask_id();
            masked.push(i);
        }
    }
    Ok(CorruptedSeq {
        z: TokenSeq::new(ids, vocab)?,
        masked,
        lambda,
        t,
    })
}

/// One sample's share of the masked-diffusion loss before batch
/// normalization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DlmTerm {
    /// `(1/λ) · Σ_{i∈M} −log softmax(logits_i)[y0_i]`.
    pub weighted_nll: f64,
    pub masked: usize,
}

/// Loss term and its gradient w.r.t. the full `L × V` logits.
pub fn dlm_loss_with_grad(
    logits: &Matrix,
    y0: &TokenSeq,
    corrupted: &CorruptedSeq,
) -> Result<(DlmTerm, Matrix)> {
    if logits.rows != y0.len() {
        return Err(Error::Contract(format!(
            "{} logit rows for a sequence of length {}",
            logits.rows,
            y0.len()
        )));
    }
    let w = 1.0 / corrupted.lambda;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for &i in &corrupted.masked {
        let row = logits.row(i);
        let target = y0.ids()[i] as usize;
        let lse = log_sum_exp(row);
        total += lse - row[target];
        let g = grad.row_mut(i);
        for (gv, x) in g.iter_mut().zip(row) {
            *gv = w * (x - lse).exp();
        }
        g[target] -= w;
    }
    Ok((
        DlmTerm {
            weighted_nll: w * total,
            masked: corrupted.masked.len(),
        },
        grad,
    ))
}

pub fn dlm_loss(logits: &Matrix, y0: &TokenSeq, corrupted: &CorruptedSeq) -> Result<DlmTerm> {
    dlm_loss_with_grad(logits, y0, corrupted).map(|(t, _)| t)
}

/// Global per-token normalization: summed weighted NLL over the summed
/// masked count. Samples with nothing masked contribute nothing.
pub fn dlm_batch_loss(terms: &[DlmTerm]) -> f64 {
    let count: usize = terms.iter().map(|t| t.masked).sum();
    if count == 0 {
        return 0.0;
    }
    terms.iter().map(|t| t.weighted_nll).sum::<f64>() / count as f64
}

/// Adds `scale · weighted_nll` as a loss node on `logits`.
pub fn dlm_loss_node(
    g: &mut Graph,
    logits: NodeId,
    y0: &TokenSeq,
    corrupted: &CorruptedSeq,
    scale: f64,
) -> Result<(NodeId, DlmTerm)> {
    let (term, mut grad) = dlm_loss_with_grad(g.value(logits), y0, corrupted)?;
    grad.data.iter_mut().for_each(|v| *v *= scale);
    Ok((g.loss(logits, scale * term.weighted_nll, grad), term))
}

/// Rates for BART-style source corruption, as fractions of input positions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BartConfig {
    /// Fraction of positions covered by masked spans.
    pub span_mask: f64,
    /// Mean span length (spans are `1 + Poisson(mean − 1)` long).
    pub span_mean: f64,
    pub delete: f64,
    pub substitute: f64,
}

impl Default for BartConfig {
    fn default() -> Self {
        Self {
            span_mask: 0.3,
            span_mean: 3.0,
            delete: 0.1,
            substitute: 0.1,
        }
    }
}

impl BartConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.span_mask)
            && self.delete >= 0.0
            && self.substitute >= 0.0
            && self.span_mask + self.delete + self.substitute <= 1.0 + 1e-12
            && self.span_mean >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid corruption rates {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BartStats {
    pub span_masked: usize,
    pub deleted: usize,
    pub substituted: usize,
}

impl BartStats {
    pub fn corrupted(&self) -> usize {
        self.span_masked + self.deleted + self.substituted
    }
}

/// BART-style noising: masked spans collapse to a single mask token, other
/// positions are deleted or replaced by a different random content token.
/// At least one token always survives.
pub fn bart_corrupt(
    y: &TokenSeq,
    cfg: &BartConfig,
    vocab: &Vocab,
    rng: &mut Rng,
) -> Result<(TokenSeq, BartStats)> {
    cfg.validate()?;
    let ids = y.ids();
    let f = cfg.span_mask;
    // A span starts with probability q at each event boundary; a renewal
    // argument gives covered fraction q·μ / (q·μ + 1 − q) = f.
    let q = if f > 0.0 {
        f / (cfg.span_mean * (1.0 - f) + f)
    } else {
        0.0
    };
    let p_del = cfg.delete / (1.0 - f);
    let p_sub = cfg.substitute / (1.0 - f);
    let extra = (cfg.span_mean > 1.0)
        .then(|| Poisson::new(cfg.span_mean - 1.0).expect("positive mean"));
    let mut out = Vec::with_capacity(ids.len());
    let mut stats = BartStats::default();
    let mut i = 0;
    while i < ids.len() {
        if q > 0.0 && rng.random::<f64>() < q {
            let len = 1 + extra.as_ref().map_or(0, |p| p.sample(rng) as usize);
            let len = len.min(ids.len() - i);
            out.push(vocab.mask_id());
            stats.span_masked += len;
            i += len;
            continue;
        }
        let r: f64 = rng.random();
        if r < p_del {
            stats.deleted += 1;
        } else if r < p_del + p_sub && vocab.size() > 1 {
            let mut tok = rng.random_range(0..vocab.size() - 1);
            if tok >= ids[i] {
                tok += 1;
            }
            out.push(tok);
            stats.substituted += 1;
        } else {
            out.push(ids[i]);
        }
        i += 1;
    }
    if out.is_empty() {
        out.push(ids[0]);
    }
    Ok((TokenSeq::new(out, vocab)?, stats))
}
