//! Duration ratios: the flow-matching objective, Euler sampling of the
//! learned velocity field, and nearest-neighbour length resampling.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Matrix, NodeId};
use crate::error::{Error, Result};
use crate::model::{ContentFeatures, ModelParams};
use crate::rng::Rng;
use crate::tokens::{DurationRatio, TokenSeq};

pub const MIN_RATIO: f64 = 0.25;
pub const MAX_RATIO: f64 = 4.0;
pub const DEFAULT_EULER_STEPS: usize = 16;

/// A point on the straight path `u_t = (1 − t)·u0 + t·r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowState {
    pub u: f64,
    pub t: f64,
}

impl FlowState {
    pub fn interpolate(u0: f64, r: f64, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
        }
        Ok(Self {
            u: (1.0 - t) * u0 + t * r,
            t,
        })
    }
}

/// Squared error between a predicted velocity and the path velocity `r − u0`.
pub fn fm_loss(v_pred: f64, u0: f64, r: f64, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("flow time {t} outside [0, 1]")));
    }
    let e = v_pred - (r - u0);
    Ok(e * e)
}

/// Adds `scale · mean_k fm_loss(v_k, u0_k, r, t_k)` on a `k × 1` velocity
/// column.
pub fn fm_loss_node(
    g: &mut Graph,
    velocity: NodeId,
    u0: &[f64],
    t: &[f64],
    r: f64,
    scale: f64,
) -> Result<(NodeId, f64)> {
    let v = g.value(velocity);
    let k = u0.len();
    if v.rows != k || v.cols != 1 || t.len() != k {
        return Err(Error::Contract("velocity column does not match flow draws".into()));
    }
    let mut total = 0.0;
    let mut grad = Matrix::zeros(k, 1);
    for i in 0..k {
        total += fm_loss(v.data[i], u0[i], r, t[i])?;
        grad.data[i] = scale * 2.0 * (v.data[i] - (r - u0[i])) / k as f64;
    }
    let mean = total / k as f64;
    Ok((g.loss(velocity, scale * mean, grad), mean))
}

/// Forward Euler from `t = 0` to `t = 1` in `steps` equal steps.
pub fn euler_integrate(u0: f64, steps: usize, mut velocity: impl FnMut(f64, f64) -> f64) -> Result<f64> {
    if steps == 0 {
        return Err(Error::Domain("Euler integration needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut u = u0;
    for k in 0..steps {
        let v = velocity(u, k as f64 * dt);
        u += dt * v;
        if !u.is_finite() {
            return Err(Error::NonFinite(format!("duration flow state at step {k}")));
        }
    }
    Ok(u)
}

/// Samples a duration ratio: draws `u0 ~ N(0, 1)`, integrates the learned
/// velocity field, and clamps to `[MIN_RATIO, MAX_RATIO]`.
pub fn predict_ratio(
    c: &ContentFeatures,
    src: &TokenSeq,
    params: &ModelParams,
    steps: usize,
    rng: &mut Rng,
) -> Result<DurationRatio> {
    let pooled = params.dp_condition(src, c)?;
    let u0: f64 = StandardNormal.sample(rng);
    let u = euler_integrate(u0, steps, |u, t| params.dp_velocity(&pooled, u, t))?;
    DurationRatio::new(u.clamp(MIN_RATIO, MAX_RATIO))
}

/// `round(x)` with halves away from zero, for `x = num / den ≥ 0`.
fn round_div(num: u64, den: u64) -> u64 {
    (2 * num + den) / (2 * den)
}

/// Target length `round(n_src · r)` (at least 1) and the 1-based source
/// index `round((j − ½)·n_src/n_tgt + ½)` for each target position `j`.
///
/// The index is evaluated exactly as `((2j − 1)·n_src + n_tgt) / (2·n_tgt)`
/// so ties at `.5` always round up.
pub fn resample_length(n_src: usize, r: f64) -> Result<(usize, Vec<usize>)> {
    if n_src == 0 {
        return Err(Error::Domain("source length must be >= 1".into()));
    }
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::Domain(format!("duration ratio must be > 0, got {r}")));
    }
    let mut n_tgt = (n_src as f64 * r).round() as usize;
    if n_tgt == 0 {
        log::warn!("target length rounded to 0 for n_src={n_src}, r={r}; using 1");
        n_tgt = 1;
    }
    let map = (1..=n_tgt as u64)
        .map(|j| {
            let i = round_div((2 * j - 1) * n_src as u64 + n_tgt as u64, 2 * n_tgt as u64);
            (i as usize).clamp(1, n_src)
        })
        .collect();
    Ok((n_tgt, map))
}

/// `v + w1·(v − v_no_a) + w2·(v − v_no_b)`.
pub fn twoway_cfg(v: &[f64], v_no_a: &[f64], v_no_b: &[f64], w1: f64, w2: f64) -> Result<Vec<f64>> {
    if v.len() != v_no_a.len() || v.len() != v_no_b.len() {
        return Err(Error::Contract("two-way guidance inputs differ in length".into()));
    }
    Ok(v.iter()
        .zip(v_no_a)
        .zip(v_no_b)
        .map(|((&x, &a), &b)| x + w1 * (x - a) + w2 * (x - b))
        .collect())
}
