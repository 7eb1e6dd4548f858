//! Common-token labels from the longest common subsequence, and the
//! weighted binary cross-entropy that trains the common-token head.

use crate::autodiff::{Graph, Matrix, NodeId};
use crate::error::{Error, Result};
use crate::model::{sigmoid, ContentFeatures, ModelParams};
use crate::tokens::TokenSeq;

/// Scores are clamped to `[CLAMP, 1 − CLAMP]` before taking logs.
pub const CLAMP: f64 = 1e-6;

/// One bit per source position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtpLabels(pub Vec<u8>);

/// Predicted common-token probabilities, one per source position.
#[derive(Clone, Debug, PartialEq)]
pub struct CtpScores(pub Vec<f64>);

impl CtpLabels {
    pub fn ones(&self) -> usize {
        self.0.iter().map(|&b| b as usize).sum()
    }
}

/// Suffix table: `table[i][j]` is the LCS length of `a[i..]` and `b[j..]`.
struct LcsTable {
    cols: usize,
    cells: Vec<u32>,
}

impl LcsTable {
    fn new(a: &[u32], b: &[u32]) -> Self {
        let cols = b.len() + 1;
        let mut cells = vec![0u32; (a.len() + 1) * cols];
        for i in (0..a.len()).rev() {
            for j in (0..b.len()).rev() {
                cells[i * cols + j] = if a[i] == b[j] {
                    1 + cells[(i + 1) * cols + j + 1]
                } else {
                    cells[(i + 1) * cols + j].max(cells[i * cols + j + 1])
                };
            }
        }
        Self { cols, cells }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> u32 {
        self.cells[i * self.cols + j]
    }
}

/// Matched `(source, target)` index pairs of one LCS.
///
/// The walk skips a source position whenever that keeps the optimum, so
/// matches land as late as possible in the source.
pub fn lcs_matches(src: &[u32], tgt: &[u32]) -> Vec<(usize, usize)> {
    let table = LcsTable::new(src, tgt);
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(table.at(0, 0) as usize);
    while i < src.len() && j < tgt.len() {
        if table.at(i + 1, j) == table.at(i, j) {
            i += 1;
        } else if src[i] == tgt[j] {
            out.push((i, j));
            i += 1;
            j += 1;
        } else {
            j += 1;
        }
    }
    out
}

/// `len` bits with `ones` set in the middle; when the zeros cannot split
/// evenly the extra one goes on the right.
pub fn centered_ones(len: usize, ones: usize) -> Vec<u8> {
    let ones = ones.min(len);
    let left = (len - ones) / 2;
    let mut out = vec![0u8; len];
    out[left..left + ones].iter_mut().for_each(|b| *b = 1);
    out
}

/// Labels for a source run of `src_run_len` identical tokens aligned to a
/// target run of `tgt_run_len` copies of the same token.
pub fn center_align(src_run_len: usize, tgt_run_len: usize) -> Vec<u8> {
    centered_ones(src_run_len, src_run_len.min(tgt_run_len))
}

/// Common-token labels: LCS membership, then within each run of identical
/// source tokens the matched count is re-centred.
pub fn lcs_labels(src: &[u32], tgt: &[u32]) -> CtpLabels {
    let mut bits = vec![0u8; src.len()];
    if src.is_empty() || tgt.is_empty() {
        return CtpLabels(bits);
    }
    for (i, _) in lcs_matches(src, tgt) {
        bits[i] = 1;
    }
    let mut start = 0;
    while start < src.len() {
        let mut end = start + 1;
        while end < src.len() && src[end] == src[start] {
            end += 1;
        }
        if end - start > 1 {
            let k = bits[start..end].iter().filter(|&&b| b == 1).count();
            if k > 0 {
                bits[start..end].copy_from_slice(&centered_ones(end - start, k));
            }
        }
        start = end;
    }
    CtpLabels(bits)
}

/// Mean weighted binary cross-entropy; the positive term is scaled by
/// `pos_weight`.
pub fn ctp_loss(scores: &CtpScores, labels: &CtpLabels, pos_weight: f64) -> Result<f64> {
    if scores.0.len() != labels.0.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.0.len(),
            labels.0.len()
        )));
    }
    if scores.0.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = scores
        .0
        .iter()
        .zip(&labels.0)
        .map(|(&p, &l)| {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            let l = f64::from(l);
            -(pos_weight * l * p.ln() + (1.0 - l) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / scores.0.len() as f64)
}

/// Adds `scale · ctp_loss(σ(logits))` as a loss node on an `n × 1` logit
/// column. Clamped positions receive zero gradient.
pub fn ctp_loss_node(
    g: &mut Graph,
    logits: NodeId,
    labels: &CtpLabels,
    pos_weight: f64,
    scale: f64,
) -> Result<(NodeId, f64)> {
    let x = g.value(logits);
    if x.cols != 1 || x.rows != labels.0.len() {
        return Err(Error::Contract("common-token logits must be one column per label".into()));
    }
    let n = x.rows as f64;
    let probs = CtpScores(x.data.iter().map(|&v| sigmoid(v)).collect());
    let loss = ctp_loss(&probs, labels, pos_weight)?;
    let mut grad = Matrix::zeros(x.rows, 1);
    for (i, (&p, &l)) in probs.0.iter().zip(&labels.0).enumerate() {
        if p > CLAMP && p < 1.0 - CLAMP {
            let l = f64::from(l);
            grad.data[i] = scale * (-pos_weight * l * (1.0 - p) + (1.0 - l) * p) / n;
        }
    }
    Ok((g.loss(logits, scale * loss, grad), loss))
}

/// Scores every source position with the trained common-token head.
pub fn score_ctp(src: &TokenSeq, c: &ContentFeatures, params: &ModelParams) -> Result<CtpScores> {
    params.ctp_scores(src, c).map(CtpScores)
}
