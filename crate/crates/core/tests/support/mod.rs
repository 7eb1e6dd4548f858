//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use maskconv::autodiff::{Matrix, ParamId};
use maskconv::ctp::{lcs_labels, CtpLabels};
use maskconv::diffusion::corrupt;
use maskconv::guidance::{draw, joint_loss, Draws, LossWeights, ObjectiveConfig, TrainExample};
use maskconv::model::{ModelConfig, ModelParams};
use maskconv::sampler::TokenPredictor;
use maskconv::tokens::TokenSeq;
use rand::Rng as _;

/// Collapses a CTC path: merge repeats, then drop blanks.
pub fn ctc_collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// −log Σ over every frame-level path that collapses to `labels`, by
/// enumerating all `classes^frames` paths.
pub fn ctc_brute(logits: &Matrix, labels: &[u32]) -> f64 {
    let (frames, classes) = logits.shape();
    let blank = classes - 1;
    let logp: Vec<Vec<f64>> = (0..frames)
        .map(|t| {
            let row = logits.row(t);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            row.iter().map(|x| x - m - z.ln()).collect()
        })
        .collect();
    let want: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        if ctc_collapse(&path, blank) == want {
            total += path.iter().enumerate().map(|(t, &k)| logp[t][k]).sum::<f64>().exp();
        }
        // Odometer increment.
        let mut i = 0;
        loop {
            if i == frames {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// `(1/λ)·Σ_masked −log p(y0)`, recomputed with a plain softmax.
pub fn dlm_oracle(logits: &Matrix, y0: &[u32], masked: &[usize], lambda: f64) -> f64 {
    masked
        .iter()
        .map(|&i| {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            -(row[y0[i] as usize].exp() / z).ln() / lambda
        })
        .sum()
}

pub fn ctp_oracle(scores: &[f64], labels: &[u8], pos_weight: f64) -> f64 {
    let mut s = 0.0;
    for (&p, &l) in scores.iter().zip(labels) {
        let p = p.max(1e-6).min(1.0 - 1e-6);
        s += if l == 1 { -pos_weight * p.ln() } else { -(1.0 - p).ln() };
    }
    s / scores.len() as f64
}

pub fn fm_oracle(v: f64, u0: f64, r: f64) -> f64 {
    (v + u0 - r).powi(2)
}

/// LCS length by the textbook prefix recurrence.
pub fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn is_subsequence(needle: &[u32], hay: &[u32]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|n| it.any(|h| h == n))
}

/// Asymptotic Kolmogorov p-value for statistic `d` over `n` samples.
pub fn kolmogorov_p(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lam = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let term = 2.0 * (-1f64).powi(k - 1) * (-2.0 * (k as f64 * lam).powi(2)).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

/// Predicts a fixed target with overwhelming confidence at every position,
/// with confidences varying by position so the unmasking order is nontrivial.
pub struct OneHotOracle {
    pub target: Vec<u32>,
    pub vocab: usize,
}

impl TokenPredictor for OneHotOracle {
    fn logits(&self, z: &TokenSeq, conditional: bool) -> maskconv::Result<Matrix> {
        assert_eq!(z.len(), self.target.len());
        let mut m = Matrix::zeros(z.len(), self.vocab);
        for (j, &t) in self.target.iter().enumerate() {
            let gap = if conditional { 5.0 + (j * 7 % 11) as f64 } else { 1.0 };
            m.set(j, t as usize, gap);
        }
        Ok(m)
    }
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        latent_alphabet: 3,
        d_model: 8,
        heads: 2,
        d_ff: 12,
        encoder_layers: 1,
        decoder_layers: 1,
        max_rel_dist: 4,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(seed: u64) -> ModelParams {
    ModelParams::new(tiny_config(), &mut maskconv::rng::seeded(seed)).unwrap()
}

/// Two small examples with fixed draws: one conditional, one with the
/// content block dropped, each with at least one masked position.
pub fn joint_batch(params: &ModelParams, seed: u64) -> (Vec<TrainExample>, Vec<Draws>) {
    let mut r = maskconv::rng::seeded(seed);
    let v = params.vocab().clone();
    let cfg = ObjectiveConfig::default();
    let mut examples = Vec::new();
    let mut draws = Vec::new();
    for k in 0..2 {
        let src: Vec<u32> = (0..7).map(|_| r.random_range(0..8)).collect();
        let tgt: Vec<u32> = (0..6).map(|_| r.random_range(0..8)).collect();
        let ex = TrainExample {
            labels: Some(CtpLabels(lcs_labels(&src, &tgt).0)),
            source: TokenSeq::content(src, &v).unwrap(),
            target: TokenSeq::content(tgt, &v).unwrap(),
            latents: vec![0, 2, 2],
            ratio: 6.0 / 7.0,
        };
        let mut d = draw(&ex, &cfg, params, &mut r).unwrap();
        d.drop_content = k == 1;
        if d.corrupted.masked.is_empty() {
            d.corrupted = corrupt(&ex.target, 1.0, Default::default(), &v, &mut r).unwrap();
        }
        examples.push(ex);
        draws.push(d);
    }
    (examples, draws)
}

pub fn objective(weights: LossWeights) -> ObjectiveConfig {
    ObjectiveConfig {
        weights,
        ..ObjectiveConfig::default()
    }
}

pub fn loss(params: &mut ModelParams, ex: &[TrainExample], dr: &[Draws], cfg: &ObjectiveConfig) -> f64 {
    params.store.zero_grads();
    joint_loss(ex, dr, params, cfg).unwrap().total
}

pub const ONLY: [(&str, LossWeights); 4] = [
    ("dlm", LossWeights { dlm: 1.0, beta1: 0.0, beta2: 0.0, beta3: 0.0 }),
    ("dp", LossWeights { dlm: 0.0, beta1: 1.0, beta2: 0.0, beta3: 0.0 }),
    ("ctp", LossWeights { dlm: 0.0, beta1: 0.0, beta2: 1.0, beta3: 0.0 }),
    ("ctc", LossWeights { dlm: 0.0, beta1: 0.0, beta2: 0.0, beta3: 1.0 }),
];

/// Coordinates spread over tensors: a random tensor, then a random entry.
pub fn coordinates(params: &ModelParams, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let mut r = maskconv::rng::seeded(seed);
    let ids: Vec<ParamId> = params.store.ids().collect();
    (0..n)
        .map(|_| {
            let id = ids[r.random_range(0..ids.len())];
            (id, r.random_range(0..params.store.value(id).data.len()))
        })
        .collect()
}

/// Largest relative error between analytic and central-difference
/// gradients over `n` coordinates; magnitudes below 1e-6 count as 1e-6.
pub fn fd_worst(
    params: &mut ModelParams,
    ex: &[TrainExample],
    dr: &[Draws],
    cfg: &ObjectiveConfig,
    n: usize,
    seed: u64,
) -> f64 {
    loss(params, ex, dr, cfg);
    let coords = coordinates(params, n, seed);
    let analytic: Vec<f64> = coords.iter().map(|&(id, k)| params.store.grad(id).data[k]).collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (&(id, k), a) in coords.iter().zip(analytic) {
        let x = params.store.value(id).data[k];
        params.store.value_mut(id).data[k] = x + h;
        let up = loss(params, ex, dr, cfg);
        params.store.value_mut(id).data[k] = x - h;
        let down = loss(params, ex, dr, cfg);
        params.store.value_mut(id).data[k] = x;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    worst
}
