//! Held-out evaluation and reuse/length sweeps.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::duration::{predict_ratio, DEFAULT_EULER_STEPS};
use crate::error::{Error, Result};
use crate::metrics::{auc, edit_distance};
use crate::model::ModelParams;
use crate::rng;
use crate::sampler::{finish, prepare, Conversion, Prepared, RatioMode, ReuseMode, SamplerConfig};
use crate::tokens::PairedSample;

/// Seed used for sample `index` of an evaluation run.
pub fn sample_seed(root: u64, index: usize) -> u64 {
    rng::derive_seed(root, &format!("sample/{index}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Fraction of source marker tokens absent from the output.
    pub marker_removal: f64,
    /// Mean edit distance to the target, per target token.
    pub edit_to_target: f64,
    pub ctp_auc: f64,
    pub dp_mse: f64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "samples,marker_removal,edit_to_target,ctp_auc,dp_mse";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.samples, self.marker_removal, self.edit_to_target, self.ctp_auc, self.dp_mse
        )
    }
}

/// Running totals for one sweep point or evaluation.
#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    n: usize,
    src_markers: usize,
    out_markers: usize,
    edit_tgt: f64,
    edit_src: f64,
    reuse: f64,
}

impl Tally {
    fn add(&mut self, pair: &PairedSample, conv: &Conversion, markers: &BTreeSet<u32>) {
        let out = conv.output.ids();
        let count = |ids: &[u32]| ids.iter().filter(|t| markers.contains(t)).count();
        self.n += 1;
        self.src_markers += count(pair.source.ids());
        self.out_markers += count(out);
        self.edit_tgt += edit_distance(out, pair.target.ids()) as f64 / pair.target.len() as f64;
        self.edit_src += edit_distance(out, pair.source.ids()) as f64 / pair.source.len() as f64;
        self.reuse += conv.trace.reused.len() as f64 / out.len() as f64;
    }

    fn retention(&self) -> f64 {
        if self.src_markers == 0 {
            0.0
        } else {
            self.out_markers as f64 / self.src_markers as f64
        }
    }
}

/// Marker removal and edit distance from the pipeline at `sampler`'s
/// settings, common-token AUC pooled over all positions, and the mean
/// squared error of one sampled duration ratio per pair.
pub fn evaluate(
    params: &ModelParams,
    pairs: &[PairedSample],
    markers: &BTreeSet<u32>,
    sampler: &SamplerConfig,
    ratio: RatioMode,
    seed: u64,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut tally = Tally::default();
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let mut sq_err = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let s = sample_seed(seed, i);
        let prep = prepare(&pair.source, params, ratio, s)?;
        let cfg = SamplerConfig { seed: s, ..*sampler };
        tally.add(pair, &finish(&prep, params, &cfg)?, markers);
        scores.extend_from_slice(&prep.scores.0);
        labels.extend_from_slice(&pair.common_labels);
        let mut r = rng::stream(s, "eval/ratio");
        let r_hat = predict_ratio(&prep.content, &pair.source, params, DEFAULT_EULER_STEPS, &mut r)?;
        sq_err += (r_hat.value() - pair.ratio().value()).powi(2);
    }
    Ok(EvalReport {
        samples: tally.n,
        marker_removal: 1.0 - tally.retention(),
        edit_to_target: tally.edit_tgt / tally.n as f64,
        ctp_auc: auc(&scores, &labels).unwrap_or(f64::NAN),
        dp_mse: sq_err / tally.n as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Tau,
    Proportion,
    Ratio,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(Self::Tau),
            "proportion" => Ok(Self::Proportion),
            "ratio" => Ok(Self::Ratio),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tau => "tau",
            Self::Proportion => "proportion",
            Self::Ratio => "ratio",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    /// `threshold`, `ctp`, `random`, or the reuse mode used on the ratio axis.
    pub series: String,
    pub point: f64,
    pub samples: usize,
    pub marker_retention: f64,
    pub edit_to_target: f64,
    pub edit_to_source: f64,
    pub reuse_fraction: f64,
}

impl SweepRow {
    pub const CSV_HEADER: &'static str =
        "axis,series,point,samples,marker_retention,edit_to_target,edit_to_source,reuse_fraction";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.axis.name(),
            self.series,
            self.point,
            self.samples,
            self.marker_retention,
            self.edit_to_target,
            self.edit_to_source,
            self.reuse_fraction
        )
    }
}

pub const TAU_POINTS: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const PROPORTION_POINTS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const RATIO_POINTS: [f64; 5] = [0.5, 0.75, 1.0, 1.25, 1.5];

fn series_name(mode: ReuseMode) -> &'static str {
    match mode {
        ReuseMode::Threshold => "threshold",
        ReuseMode::Proportion => "ctp",
        ReuseMode::Random => "random",
        ReuseMode::None => "none",
    }
}

/// One row per sweep point (two series on the proportion axis). Sample `i`
/// uses the same seed at every point, so points differ only by the swept
/// setting. On the tau and proportion axes lengths come from `ratio`; on the
/// ratio axis each point fixes the ratio and `base` supplies the reuse mode.
pub fn sweep(
    params: &ModelParams,
    pairs: &[PairedSample],
    markers: &BTreeSet<u32>,
    axis: SweepAxis,
    base: &SamplerConfig,
    ratio: RatioMode,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut settings: Vec<(String, f64, SamplerConfig, Option<f64>)> = Vec::new();
    match axis {
        SweepAxis::Tau => {
            for &t in &TAU_POINTS {
                let cfg = SamplerConfig {
                    reuse_mode: ReuseMode::Threshold,
                    threshold: t,
                    ..*base
                };
                settings.push(("threshold".into(), t, cfg, None));
            }
        }
        SweepAxis::Proportion => {
            for mode in [ReuseMode::Proportion, ReuseMode::Random] {
                for &p in &PROPORTION_POINTS {
                    let cfg = SamplerConfig {
                        reuse_mode: mode,
                        proportion: p,
                        ..*base
                    };
                    settings.push((series_name(mode).into(), p, cfg, None));
                }
            }
        }
        SweepAxis::Ratio => {
            for &r in &RATIO_POINTS {
                settings.push((series_name(base.reuse_mode).into(), r, *base, Some(r)));
            }
        }
    }
    let mut tallies = vec![Tally::default(); settings.len()];
    for (i, pair) in pairs.iter().enumerate() {
        let s = sample_seed(seed, i);
        let shared = match axis {
            SweepAxis::Ratio => None,
            _ => Some(prepare(&pair.source, params, ratio, s)?),
        };
        for (k, (_, _, cfg, fixed)) in settings.iter().enumerate() {
            let own;
            let prep: &Prepared = match (&shared, fixed) {
                (Some(p), _) => p,
                (None, Some(r)) => {
                    own = prepare(&pair.source, params, RatioMode::Explicit(*r), s)?;
                    &own
                }
                (None, None) => unreachable!("ratio points always fix the ratio"),
            };
            let cfg = SamplerConfig { seed: s, ..*cfg };
            tallies[k].add(pair, &finish(prep, params, &cfg)?, markers);
        }
    }
    Ok(settings
        .into_iter()
        .zip(tallies)
        .map(|((series, point, _, _), t)| SweepRow {
            axis,
            series,
            point,
            samples: t.n,
            marker_retention: t.retention(),
            edit_to_target: t.edit_tgt / t.n.max(1) as f64,
            edit_to_source: t.edit_src / t.n.max(1) as f64,
            reuse_fraction: t.reuse / t.n.max(1) as f64,
        })
        .collect())
}
