mod support;

use maskconv::ctp::CtpScores;
use maskconv::rng;
use maskconv::sampler::{convert, greedy_sample, init_target, step_schedule, RatioMode, ReuseMode, SamplerConfig};
use maskconv::tokens::{TokenSeq, Vocab};
use proptest::prelude::*;
use rand::Rng as _;

use support::*;

const V: u32 = 12;

fn setup(r: &mut rng::Rng) -> (TokenSeq, CtpScores, Vec<u32>, f64) {
    let vocab = Vocab::new(V).unwrap();
    let n = r.random_range(1..=40usize);
    let src = TokenSeq::content((0..n).map(|_| r.random_range(0..V)).collect(), &vocab).unwrap();
    let scores = CtpScores((0..n).map(|_| r.random()).collect());
    let ratio = r.random_range(0.3..2.0);
    let n_tgt = ((n as f64 * ratio).round() as usize).max(1);
    let target = (0..n_tgt).map(|_| r.random_range(0..V)).collect();
    (src, scores, target, ratio)
}

#[test]
fn fuzzed_runs_keep_reused_tokens_and_fill_every_mask() {
    let vocab = Vocab::new(V).unwrap();
    let mut r = rng::seeded(81);
    let modes = [ReuseMode::Threshold, ReuseMode::Proportion, ReuseMode::Random, ReuseMode::None];
    for run in 0..1000 {
        let (src, scores, target, ratio) = setup(&mut r);
        let cfg = SamplerConfig {
            steps: r.random_range(1..=40),
            threshold: r.random(),
            proportion: r.random(),
            cfg_weight: r.random_range(0.0..2.0),
            reuse_mode: modes[run % 4],
            seed: run as u64,
        };
        let init = init_target(&src, &scores, ratio, &cfg, &vocab, &mut r).unwrap();
        assert_eq!(init.z0.len(), target.len());
        let oracle = OneHotOracle { target: target.clone(), vocab: V as usize };
        let (out, trace) = greedy_sample(&init.z0, &oracle, &cfg, &vocab).unwrap();
        assert_eq!(out.count_masked(&vocab), 0);
        let mut covered = vec![0usize; out.len()];
        for j in 0..out.len() {
            let z = init.z0.ids()[j];
            if z != vocab.mask_id() {
                assert_eq!(out.ids()[j], z, "reused position {j} overwritten");
                covered[j] += 1;
            } else {
                assert_eq!(out.ids()[j], target[j]);
            }
        }
        let masked0 = init.z0.count_masked(&vocab);
        let (k, t_eff, s0) = step_schedule(out.len(), masked0, cfg.steps);
        assert_eq!(trace.steps.len(), t_eff);
        let mut remaining = masked0;
        for (i, step) in trace.steps.iter().enumerate() {
            assert_eq!(step.step, s0 + i);
            assert_eq!(step.positions.len(), k.min(remaining));
            remaining -= step.positions.len();
            step.positions.iter().for_each(|&p| covered[p] += 1);
        }
        assert_eq!(remaining, 0);
        assert!(covered.iter().all(|&c| c == 1));
    }
}

#[test]
fn oracle_target_recovered_for_any_step_count() {
    let vocab = Vocab::new(V).unwrap();
    let mut r = rng::seeded(82);
    for steps in [1, 4, 32] {
        for _ in 0..50 {
            let (src, scores, target, ratio) = setup(&mut r);
            let cfg = SamplerConfig {
                steps,
                threshold: 1.0,
                ..Default::default()
            };
            let init = init_target(&src, &scores, ratio, &cfg, &vocab, &mut r).unwrap();
            let oracle = OneHotOracle { target: target.clone(), vocab: V as usize };
            let (out, _) = greedy_sample(&init.z0, &oracle, &cfg, &vocab).unwrap();
            assert_eq!(out.ids(), &target[..]);
        }
    }
}

#[test]
fn schedule_for_eight_tokens_over_thirty_two_steps() {
    assert_eq!(step_schedule(8, 8, 32), (1, 8, 25));
}

#[test]
fn pipeline_is_deterministic_and_ratio_plumbed() {
    let params = tiny_model(83);
    let vocab = params.vocab().clone();
    let src = TokenSeq::content(vec![1, 2, 3, 4, 5, 6, 7, 0, 1], &vocab).unwrap();
    let cfg = SamplerConfig {
        steps: 8,
        threshold: 0.5,
        ..Default::default()
    };
    let a = convert(&src, &params, &cfg, RatioMode::Auto).unwrap();
    let b = convert(&src, &params, &cfg, RatioMode::Auto).unwrap();
    assert_eq!(a, b);
    let fixed = convert(&src, &params, &cfg, RatioMode::Explicit(1.0)).unwrap();
    assert_eq!(fixed.output.len(), src.len());
    let (n_auto, _) = maskconv::duration::resample_length(src.len(), a.ratio).unwrap();
    assert_eq!(a.output.len(), n_auto);
}

proptest! {
    #[test]
    fn lower_threshold_reuses_a_superset(
        scores in prop::collection::vec(0.0f64..1.0, 1..30),
        t1 in 0.0f64..=1.0,
        t2 in 0.0f64..=1.0,
    ) {
        let vocab = Vocab::new(V).unwrap();
        let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
        let src = TokenSeq::content((0..scores.len() as u32).map(|i| i % V).collect(), &vocab).unwrap();
        let s = CtpScores(scores);
        let cfg = |t| SamplerConfig { threshold: t, ..Default::default() };
        let mut r = rng::seeded(0);
        let a = init_target(&src, &s, 1.0, &cfg(lo), &vocab, &mut r).unwrap();
        let b = init_target(&src, &s, 1.0, &cfg(hi), &vocab, &mut r).unwrap();
        prop_assert!(a.reuse_set.is_superset(&b.reuse_set));
    }

    #[test]
    fn proportion_reuses_ceiling_count(scores in prop::collection::vec(0.0f64..1.0, 1..30), p in 0.0f64..=1.0) {
        let vocab = Vocab::new(V).unwrap();
        let src = TokenSeq::content(vec![1; scores.len()], &vocab).unwrap();
        let n = scores.len();
        let s = CtpScores(scores);
        for mode in [ReuseMode::Proportion, ReuseMode::Random] {
            let cfg = SamplerConfig { reuse_mode: mode, proportion: p, ..Default::default() };
            let init = init_target(&src, &s, 1.0, &cfg, &vocab, &mut rng::seeded(1)).unwrap();
            prop_assert_eq!(init.reuse_set.len(), ((p * n as f64).ceil() as usize).min(n));
        }
        let cfg = SamplerConfig { reuse_mode: ReuseMode::Proportion, proportion: p, ..Default::default() };
        let init = init_target(&src, &s, 1.0, &cfg, &vocab, &mut rng::seeded(1)).unwrap();
        let min_in = init.reuse_set.iter().map(|&i| s.0[i]).fold(f64::INFINITY, f64::min);
        let max_out = (0..n).filter(|i| !init.reuse_set.contains(i)).map(|i| s.0[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(init.reuse_set.is_empty() || min_in >= max_out);
    }
}
