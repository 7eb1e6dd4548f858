//! Acceptance suite: one pass/fail line per criterion.
//!
//! Criteria 1-5 exercise the library against independent oracles. Criteria
//! 6-8 run the real command-line pipeline on the default corpus (generate,
//! train, evaluate, sweep). Criterion 9 reruns every subcommand on a small
//! configuration and compares outputs byte for byte.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use maskconv::autodiff::Matrix;
use maskconv::ctp::{center_align, ctp_loss, lcs_labels, CtpLabels, CtpScores};
use maskconv::diffusion::{corrupt, dlm_loss, MaskSchedule};
use maskconv::duration::fm_loss;
use maskconv::guidance::{ctc_loss, ctc_min_frames, LatentLabelSeq};
use maskconv::rng;
use maskconv::sampler::{greedy_sample, init_target, step_schedule, ReuseMode, SamplerConfig};
use maskconv::tokens::{TokenSeq, Vocab};
use rand::Rng as _;

use support::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_logits(r: &mut rng::Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-3.0..3.0)).collect())
}

fn corruption_statistics() -> Outcome {
    let start = Instant::now();
    let vocab = Vocab::new(8).unwrap();
    let n = 1_000_000;
    let y0 = TokenSeq::content(vec![1; n], &vocab).unwrap();
    let schedule = MaskSchedule::default();
    let mut r = rng::seeded(0);
    let mut worst_sigmas: f64 = 0.0;
    let mut ok = true;
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let lambda = (1.0 - 1e-3) * t + 1e-3;
        let count = corrupt(&y0, t, schedule, &vocab, &mut r).unwrap().masked.len() as f64;
        let sigma = (n as f64 * lambda * (1.0 - lambda)).sqrt();
        let dev = (count - n as f64 * lambda).abs();
        if sigma == 0.0 {
            ok &= dev == 0.0;
        } else {
            worst_sigmas = worst_sigmas.max(dev / sigma);
            ok &= dev <= 3.0 * sigma;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(ok && secs < 10.0, format!("max deviation {worst_sigmas:.2} sigma, {secs:.2}s"))
}

fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let mut r = rng::seeded(2);
    let mut ctc_err: f64 = 0.0;
    let mut cases = 0;
    while cases < 1000 {
        let alphabet = r.random_range(1..=3u32);
        let frames = r.random_range(1..=6usize);
        let labels: Vec<u32> = (0..r.random_range(0..=3usize)).map(|_| r.random_range(0..alphabet)).collect();
        if ctc_min_frames(&labels) > frames {
            continue;
        }
        let logits = random_logits(&mut r, frames, alphabet as usize + 1);
        let got = ctc_loss(&logits, &LatentLabelSeq::new(labels.clone(), alphabet).unwrap()).unwrap();
        ctc_err = ctc_err.max((got - ctc_brute(&logits, &labels)).abs());
        cases += 1;
    }
    let vocab = Vocab::new(6).unwrap();
    let mut dlm_err: f64 = 0.0;
    let mut ctp_err: f64 = 0.0;
    let mut fm_err: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(1..=8usize);
        let y0 = TokenSeq::content((0..n).map(|_| r.random_range(0..6)).collect(), &vocab).unwrap();
        let t: f64 = r.random();
        let c = corrupt(&y0, t, MaskSchedule::default(), &vocab, &mut r).unwrap();
        let logits = random_logits(&mut r, n, 6);
        let got = dlm_loss(&logits, &y0, &c).unwrap().weighted_nll;
        let want = dlm_oracle(&logits, y0.ids(), &c.masked, (1.0 - 1e-3) * t + 1e-3);
        dlm_err = dlm_err.max((got - want).abs() / want.abs().max(1.0));

        let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let got = ctp_loss(&CtpScores(scores.clone()), &CtpLabels(labels.clone()), 2.0).unwrap();
        ctp_err = ctp_err.max((got - ctp_oracle(&scores, &labels, 2.0)).abs());

        let (v, u0, rr) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(0.25..4.0));
        fm_err = fm_err.max((fm_loss(v, u0, rr, r.random()).unwrap() - fm_oracle(v, u0, rr)).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = ctc_err < 1e-8 && dlm_err < 1e-9 && ctp_err < 1e-12 && fm_err < 1e-12 && secs < 60.0;
    outcome(
        ok,
        format!("max |err| ctc {ctc_err:.1e}, dlm {dlm_err:.1e}, ctp {ctp_err:.1e}, fm {fm_err:.1e}; {secs:.2}s"),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut params = tiny_model(3);
    let (ex, dr) = joint_batch(&params, 4);
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, w) in ONLY {
        let worst = fd_worst(&mut params, &ex, &dr, &objective(w), 50, 5);
        ok &= worst < 1e-3;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(ok && secs < 120.0, format!("worst relative error {}; {secs:.2}s", parts.join(", ")))
}

fn lcs_labelling() -> Outcome {
    let start = Instant::now();
    let mut r = rng::seeded(6);
    let mut bad = 0;
    for _ in 0..10_000 {
        let a: Vec<u32> = (0..r.random_range(0..=10)).map(|_| r.random_range(0..4)).collect();
        let b: Vec<u32> = (0..r.random_range(0..=10)).map(|_| r.random_range(0..4)).collect();
        let labels = lcs_labels(&a, &b);
        let kept: Vec<u32> = a.iter().zip(&labels.0).filter(|(_, &l)| l == 1).map(|(&t, _)| t).collect();
        if labels.ones() != lcs_len(&a, &b) || !is_subsequence(&kept, &b) {
            bad += 1;
        }
    }
    let fig = center_align(5, 3);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        bad == 0 && fig == vec![0, 1, 1, 1, 0] && secs < 30.0,
        format!("{bad} mismatches in 10^4 pairs, center_align(5,3) = {fig:?}; {secs:.2}s"),
    )
}

fn sampler_mechanics() -> Outcome {
    let start = Instant::now();
    const V: u32 = 12;
    let vocab = Vocab::new(V).unwrap();
    let mut r = rng::seeded(7);
    let mut recovered = true;
    for steps in [1, 4, 32] {
        for _ in 0..20 {
            let n = r.random_range(1..=40usize);
            let target: Vec<u32> = (0..n).map(|_| r.random_range(0..V)).collect();
            let cfg = SamplerConfig {
                steps,
                threshold: 1.0,
                ..Default::default()
            };
            let oracle = OneHotOracle { target: target.clone(), vocab: V as usize };
            let (out, _) = greedy_sample(&TokenSeq::masked(n, &vocab).unwrap(), &oracle, &cfg, &vocab).unwrap();
            recovered &= out.ids() == &target[..];
        }
    }
    let schedule = step_schedule(8, 8, 32);
    let mut overwritten = 0;
    for run in 0..1000 {
        let n = r.random_range(1..=30usize);
        let src = TokenSeq::content((0..n).map(|_| r.random_range(0..V)).collect(), &vocab).unwrap();
        let scores = CtpScores((0..n).map(|_| r.random()).collect());
        let ratio = r.random_range(0.5..1.5);
        let cfg = SamplerConfig {
            steps: r.random_range(1..=32),
            threshold: r.random(),
            proportion: r.random(),
            reuse_mode: [ReuseMode::Threshold, ReuseMode::Proportion, ReuseMode::Random][run % 3],
            ..Default::default()
        };
        let init = init_target(&src, &scores, ratio, &cfg, &vocab, &mut r).unwrap();
        let target: Vec<u32> = (0..init.z0.len()).map(|_| r.random_range(0..V)).collect();
        let oracle = OneHotOracle { target, vocab: V as usize };
        let (out, _) = greedy_sample(&init.z0, &oracle, &cfg, &vocab).unwrap();
        overwritten += init
            .z0
            .ids()
            .iter()
            .zip(out.ids())
            .filter(|(&z, &o)| z != vocab.mask_id() && z != o)
            .count();
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        recovered && schedule == (1, 8, 25) && overwritten == 0 && secs < 30.0,
        format!(
            "oracle recovered for T in {{1,4,32}}: {recovered}; (K, T_eff, s0) for N=8, T=32: {schedule:?}; \
             {overwritten} reused tokens overwritten in 10^3 runs; {secs:.2}s"
        ),
    )
}

// ---- command-line pipeline -------------------------------------------------

fn maskconv(config: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_maskconv"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .expect("failed to launch maskconv");
    assert!(status.success(), "maskconv {args:?} failed");
}

fn write_config(dir: &Path, extra: serde_json::Value) -> PathBuf {
    let mut cfg = serde_json::json!({
        "run_dir": dir,
        "corpus": dir.join("corpus.jsonl"),
    });
    cfg.as_object_mut().unwrap().extend(extra.as_object().unwrap().clone());
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

/// Rows of a CSV file as column-name → value maps.
fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(String::from).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect()
}

fn num(row: &BTreeMap<String, String>, key: &str) -> f64 {
    row[key].parse().unwrap()
}

struct DefaultRun {
    dir: PathBuf,
    train_secs: f64,
}

fn default_run(root: &Path) -> DefaultRun {
    let dir = root.join("default");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_config(&dir, serde_json::json!({}));
    maskconv(&cfg, &["gen-corpus", "--n", "5000", "--seed", "0"]);
    let start = Instant::now();
    maskconv(&cfg, &["train"]);
    let train_secs = start.elapsed().as_secs_f64();
    maskconv(&cfg, &["eval"]);
    maskconv(&cfg, &["sweep", "--axis", "proportion"]);
    maskconv(&cfg, &["sweep", "--axis", "tau"]);
    DefaultRun { dir, train_secs }
}

fn end_to_end(run: &DefaultRun) -> Outcome {
    let eval = &read_csv(&run.dir.join("eval.csv"))[0];
    let (removal, auc, mse) = (num(eval, "marker_removal"), num(eval, "ctp_auc"), num(eval, "dp_mse"));
    let log = read_csv(&run.dir.join("metrics.csv"));
    let ft: Vec<f64> = log.iter().filter(|r| r["stage"] == "finetune").map(|r| num(r, "total")).collect();
    let drop = 1.0 - ft.last().unwrap() / ft[0];
    let ok = removal >= 0.80 && auc >= 0.85 && mse <= 0.02 && run.train_secs < 1800.0;
    outcome(
        ok,
        format!(
            "marker removal {removal:.3} (>= 0.80), CTP AUC {auc:.3} (>= 0.85), DP MSE {mse:.4} (<= 0.02), \
             training {:.0}s (< 1800), fine-tune loss drop {:.0}%",
            run.train_secs,
            100.0 * drop
        ),
    )
}

fn proportion_trend(run: &DefaultRun) -> Outcome {
    let rows = read_csv(&run.dir.join("sweep_proportion.csv"));
    let series = |name: &str| -> Vec<BTreeMap<String, String>> { rows.iter().filter(|r| r["series"] == name).cloned().collect() };
    let (ctp, random) = (series("ctp"), series("random"));
    let mut failures = Vec::new();
    for (c, r) in ctp.iter().zip(&random) {
        let p = &c["point"];
        if num(c, "edit_to_target") > num(r, "edit_to_target") {
            failures.push(format!("edit@{p}"));
        }
        if num(c, "marker_retention") > num(r, "marker_retention") {
            failures.push(format!("markers@{p}"));
        }
    }
    let samples = num(&ctp[0], "samples");
    let ok = ctp.len() == 9 && random.len() == 9 && samples >= 200.0 && failures.is_empty();
    let gap: f64 = ctp.iter().zip(&random).map(|(c, r)| num(r, "edit_to_target") - num(c, "edit_to_target")).sum::<f64>() / 9.0;
    outcome(
        ok,
        format!(
            "{samples} samples; mean edit-distance advantage of ctp over random {gap:.4}; violations: {}",
            if failures.is_empty() { "none".to_string() } else { failures.join(" ") }
        ),
    )
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            out[k] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    out
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Monotone in `direction` (+1 non-decreasing, −1 non-increasing) up to a
/// single inversion no larger than 1% of the range.
fn nearly_monotone(ys: &[f64], direction: f64) -> bool {
    let range = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let inversions: Vec<f64> = ys
        .windows(2)
        .map(|w| direction * (w[1] - w[0]))
        .filter(|&d| d < 0.0)
        .collect();
    inversions.is_empty() || (inversions.len() == 1 && -inversions[0] <= 0.01 * range)
}

fn threshold_trend(run: &DefaultRun) -> Outcome {
    let rows = read_csv(&run.dir.join("sweep_tau.csv"));
    let tau: Vec<f64> = rows.iter().map(|r| num(r, "point")).collect();
    let to_src: Vec<f64> = rows.iter().map(|r| num(r, "edit_to_source")).collect();
    let to_tgt: Vec<f64> = rows.iter().map(|r| num(r, "edit_to_target")).collect();
    let (rho_src, rho_tgt) = (spearman(&tau, &to_src), spearman(&tau, &to_tgt));
    let samples = num(&rows[0], "samples");
    let ok = rows.len() == 11
        && samples >= 200.0
        && nearly_monotone(&to_src, 1.0)
        && nearly_monotone(&to_tgt, -1.0)
        && rho_src >= 0.9
        && rho_tgt <= -0.9;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    outcome(
        ok,
        format!(
            "edit-to-source [{}] rho {rho_src:.3}; edit-to-target [{}] rho {rho_tgt:.3}",
            fmt(&to_src),
            fmt(&to_tgt)
        ),
    )
}

fn determinism(root: &Path) -> Outcome {
    let dir = root.join("determinism");
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = write_config(
        &dir,
        serde_json::json!({
            "corpus_size": 80,
            "pretrain_epochs": 1,
            "finetune_epochs": 1,
            "eval_samples": 4,
            "model": {"d_model": 16, "heads": 2, "d_ff": 32, "encoder_layers": 1, "decoder_layers": 1},
        }),
    );
    let outputs = [
        "corpus.jsonl",
        "labelled.jsonl",
        "checkpoints/final.ckpt",
        "metrics.csv",
        "converted.jsonl",
        "trace.jsonl",
        "sweep_tau.csv",
        "eval.csv",
        "config.json",
    ];
    let run_all = || {
        let corpus = dir.join("corpus.jsonl");
        let corpus = corpus.to_str().unwrap();
        maskconv(&cfg, &["gen-corpus", "--seed", "3"]);
        maskconv(&cfg, &["label", "--input", corpus, "--out", dir.join("labelled.jsonl").to_str().unwrap()]);
        maskconv(&cfg, &["train", "--seed", "3"]);
        maskconv(
            &cfg,
            &[
                "convert",
                "--input",
                corpus,
                "--out",
                dir.join("converted.jsonl").to_str().unwrap(),
                "--tau",
                "0.5",
                "--seed",
                "3",
                "--trace-out",
                dir.join("trace.jsonl").to_str().unwrap(),
            ],
        );
        maskconv(&cfg, &["sweep", "--axis", "tau"]);
        maskconv(&cfg, &["eval"]);
        outputs.map(|f| std::fs::read(dir.join(f)).unwrap_or_else(|e| panic!("{f}: {e}")))
    };
    let first = run_all();
    let second = run_all();
    let differing: Vec<&str> = outputs.iter().zip(first.iter().zip(&second)).filter(|(_, (a, b))| a != b).map(|(f, _)| *f).collect();
    outcome(
        differing.is_empty(),
        format!(
            "{} outputs of gen-corpus/label/train/convert/sweep/eval compared; differing: {}",
            outputs.len(),
            if differing.is_empty() { "none".to_string() } else { differing.join(", ") }
        ),
    )
}

fn main() {
    let root = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "corruption statistics", corruption_statistics()),
        (2, "loss-oracle equivalence", loss_oracles()),
        (3, "gradient correctness", gradient_checks()),
        (4, "LCS labelling", lcs_labelling()),
        (5, "greedy sampler mechanics", sampler_mechanics()),
    ];
    let run = default_run(root.path());
    results.push((6, "end-to-end desk-scale training", end_to_end(&run)));
    results.push((7, "reuse-proportion trend (ctp vs random)", proportion_trend(&run)));
    results.push((8, "threshold trend", threshold_trend(&run)));
    results.push((9, "determinism", determinism(root.path())));

    println!();
    for (id, name, o) in &results {
        println!("criterion {id} [{}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!("\nacceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
