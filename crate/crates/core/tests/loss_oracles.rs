mod support;

use maskconv::autodiff::Matrix;
use maskconv::ctp::{center_align, ctp_loss, lcs_labels, CtpLabels, CtpScores};
use maskconv::diffusion::{corrupt, dlm_loss, MaskSchedule};
use maskconv::duration::fm_loss;
use maskconv::guidance::{ctc_loss, ctc_min_frames, LatentLabelSeq};
use maskconv::rng;
use maskconv::tokens::{TokenSeq, Vocab};
use proptest::prelude::*;
use rand::Rng as _;

use support::*;

fn random_logits(r: &mut maskconv::rng::Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-3.0..3.0)).collect())
}

#[test]
fn ctc_matches_path_enumeration() {
    let mut r = rng::seeded(11);
    let mut checked = 0;
    while checked < 1000 {
        let alphabet = r.random_range(1..=3u32);
        let frames = r.random_range(1..=6usize);
        let n_labels = r.random_range(0..=3usize);
        let labels: Vec<u32> = (0..n_labels).map(|_| r.random_range(0..alphabet)).collect();
        if ctc_min_frames(&labels) > frames {
            continue;
        }
        let logits = random_logits(&mut r, frames, alphabet as usize + 1);
        let seq = LatentLabelSeq::new(labels.clone(), alphabet).unwrap();
        let got = ctc_loss(&logits, &seq).unwrap();
        let want = ctc_brute(&logits, &labels);
        assert!((got - want).abs() < 1e-8, "{labels:?} over {frames} frames: {got} vs {want}");
        checked += 1;
    }
}

#[test]
fn ctc_is_label_order_sensitive() {
    let mut r = rng::seeded(12);
    let logits = random_logits(&mut r, 6, 4);
    let a = ctc_loss(&logits, &LatentLabelSeq::new(vec![0, 2], 3).unwrap()).unwrap();
    let b = ctc_loss(&logits, &LatentLabelSeq::new(vec![2, 0], 3).unwrap()).unwrap();
    assert!((a - b).abs() > 1e-6);
}

#[test]
fn dlm_matches_recomputation() {
    let mut r = rng::seeded(13);
    let vocab = Vocab::new(6).unwrap();
    for _ in 0..1000 {
        let n = r.random_range(1..=8usize);
        let y0 = TokenSeq::content((0..n).map(|_| r.random_range(0..6)).collect(), &vocab).unwrap();
        let t: f64 = r.random();
        let c = corrupt(&y0, t, MaskSchedule::default(), &vocab, &mut r).unwrap();
        let logits = random_logits(&mut r, n, 6);
        let got = dlm_loss(&logits, &y0, &c).unwrap();
        let want = dlm_oracle(&logits, y0.ids(), &c.masked, (1.0 - 1e-3) * t + 1e-3);
        assert_eq!(got.masked, c.masked.len());
        assert!((got.weighted_nll - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
}

#[test]
fn dlm_uniform_example() {
    let vocab = Vocab::new(4).unwrap();
    let y0 = TokenSeq::content(vec![2], &vocab).unwrap();
    let c = maskconv::diffusion::CorruptedSeq {
        z: TokenSeq::masked(1, &vocab).unwrap(),
        masked: vec![0],
        lambda: 0.5,
        t: 0.5,
    };
    let got = dlm_loss(&Matrix::zeros(1, 4), &y0, &c).unwrap();
    assert!((got.weighted_nll - 2.0 * 4f64.ln()).abs() < 1e-12);
}

#[test]
fn ctp_matches_recomputation() {
    let mut r = rng::seeded(14);
    for _ in 0..1000 {
        let n = r.random_range(1..=10usize);
        let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let w = r.random_range(0.5..3.0);
        let got = ctp_loss(&CtpScores(scores.clone()), &CtpLabels(labels.clone()), w).unwrap();
        assert!((got - ctp_oracle(&scores, &labels, w)).abs() < 1e-12);
    }
}

#[test]
fn fm_matches_recomputation() {
    let mut r = rng::seeded(15);
    for _ in 0..1000 {
        let (v, u0, rr, t) = (
            r.random_range(-3.0..3.0),
            r.random_range(-3.0..3.0),
            r.random_range(0.1..4.0),
            r.random::<f64>(),
        );
        assert!((fm_loss(v, u0, rr, t).unwrap() - fm_oracle(v, u0, rr)).abs() < 1e-12);
    }
}

#[test]
fn lcs_labels_count_equals_lcs_length() {
    let mut r = rng::seeded(16);
    for _ in 0..10_000 {
        let a: Vec<u32> = (0..r.random_range(0..=10)).map(|_| r.random_range(0..4)).collect();
        let b: Vec<u32> = (0..r.random_range(0..=10)).map(|_| r.random_range(0..4)).collect();
        let labels = lcs_labels(&a, &b);
        assert_eq!(labels.ones(), lcs_len(&a, &b), "{a:?} vs {b:?}");
        let kept: Vec<u32> = a.iter().zip(&labels.0).filter(|(_, &l)| l == 1).map(|(&t, _)| t).collect();
        assert!(is_subsequence(&kept, &b), "{a:?} vs {b:?}: {kept:?}");
    }
}

#[test]
fn center_align_reference_case() {
    assert_eq!(center_align(5, 3), vec![0, 1, 1, 1, 0]);
}

proptest! {
    #[test]
    fn center_align_is_balanced(m in 0usize..40, n in 0usize..40) {
        let bits = center_align(m, n);
        prop_assert_eq!(bits.len(), m);
        prop_assert_eq!(bits.iter().filter(|&&b| b == 1).count(), m.min(n));
        let left = bits.iter().take_while(|&&b| b == 0).count();
        let right = bits.iter().rev().take_while(|&&b| b == 0).count();
        if m > n {
            prop_assert!(right == left || right == left + 1);
        }
    }

    #[test]
    fn labels_certify_a_subsequence(
        a in prop::collection::vec(0u32..5, 0..30),
        b in prop::collection::vec(0u32..5, 0..30),
    ) {
        let labels = lcs_labels(&a, &b);
        prop_assert_eq!(labels.0.len(), a.len());
        let kept: Vec<u32> = a.iter().zip(&labels.0).filter(|(_, &l)| l == 1).map(|(&t, _)| t).collect();
        prop_assert!(is_subsequence(&kept, &b));
        prop_assert_eq!(kept.len(), lcs_len(&a, &b));
    }

    #[test]
    fn ctp_loss_is_nonnegative(scores in prop::collection::vec(0.0f64..=1.0, 1..20), w in 0.1f64..5.0) {
        let labels: Vec<u8> = scores.iter().map(|s| u8::from(*s > 0.3)).collect();
        prop_assert!(ctp_loss(&CtpScores(scores.clone()), &CtpLabels(labels), w).unwrap() >= 0.0);
    }
}
