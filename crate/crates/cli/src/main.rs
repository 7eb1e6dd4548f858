mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use maskconv::corpus::{self, CorpusSpec};
use maskconv::ctp::lcs_labels;
use maskconv::experiments::{evaluate, sample_seed, sweep, EvalReport, SweepAxis, SweepRow};
use maskconv::model::ModelParams;
use maskconv::rng;
use maskconv::sampler::{convert, ReuseMode};
use maskconv::tokens::{read_corpus, write_corpus, PairedSample, TokenSeq};
use maskconv::train::{train, EpochLog};
use maskconv::Error;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "maskconv", version, about = "Token-sequence conversion with masked discrete diffusion")]
struct Cli {
    /// Run configuration (JSON). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    GenCorpus {
        /// Corpus spec file; written with the built-in layout if it does not exist.
        #[arg(long)]
        specs: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute common-token labels of a corpus file.
    Label {
        #[arg(long)]
        input: PathBuf,
        /// Output path; rewrites the input when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain then fine-tune a model on the training split.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert source sequences with a trained model.
    Convert {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Corpus file (the `src` field is used) or one sequence per line
        /// as space-separated ids.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        proportion: Option<f64>,
        #[arg(long)]
        reuse: Option<ReuseMode>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        cfg: Option<f64>,
        /// `auto` or a positive ratio.
        #[arg(long)]
        ratio: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Sweep a reuse or length setting over held-out pairs.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out pairs.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::GenCorpus { specs, n, seed, out } => {
            if let Some(s) = specs {
                if !s.exists() {
                    CorpusSpec::default().save(&s)?;
                    log::info!("wrote default corpus spec to {}", s.display());
                }
                cfg.specs = Some(s);
            }
            cfg.corpus_size = n.unwrap_or(cfg.corpus_size);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.corpus = out.unwrap_or(cfg.corpus);
            cfg.validate()?;
            cfg.write_resolved()?;
            gen_corpus(&cfg)
        }
        Command::Label { input, out } => {
            let spec = cfg.corpus_spec()?;
            let mut samples = read_corpus(&input, &spec.vocab()?)?;
            for s in &mut samples {
                s.common_labels = lcs_labels(s.source.ids(), s.target.ids()).0;
            }
            let out = out.unwrap_or(input);
            write_corpus(&samples, &out)?;
            log::info!("labelled {} pairs into {}", samples.len(), out.display());
            Ok(())
        }
        Command::Train { corpus, seed } => {
            cfg.corpus = corpus.unwrap_or(cfg.corpus);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            cfg.write_resolved()?;
            cmd_train(&cfg)
        }
        Command::Convert {
            checkpoint,
            input,
            out,
            tau,
            proportion,
            reuse,
            steps,
            cfg: w,
            ratio,
            seed,
            trace_out,
        } => {
            let s = &mut cfg.sampler;
            s.threshold = tau.unwrap_or(s.threshold);
            s.proportion = proportion.unwrap_or(s.proportion);
            s.reuse_mode = reuse.unwrap_or(s.reuse_mode);
            s.steps = steps.unwrap_or(s.steps);
            s.cfg_weight = w.unwrap_or(s.cfg_weight);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.ratio = ratio.unwrap_or(cfg.ratio);
            cfg.validate()?;
            cfg.write_resolved()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.final_checkpoint());
            cmd_convert(&cfg, &ckpt, &input, &out, trace_out.as_deref())
        }
        Command::Sweep { axis, checkpoint, out } => {
            cfg.validate()?;
            cfg.write_resolved()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.final_checkpoint());
            let out = out.unwrap_or_else(|| cfg.run_dir.join(format!("sweep_{}.csv", axis.name())));
            cmd_sweep(&cfg, &ckpt, axis, &out)
        }
        Command::Eval { checkpoint, out } => {
            cfg.validate()?;
            cfg.write_resolved()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.final_checkpoint());
            let out = out.unwrap_or_else(|| cfg.run_dir.join("eval.csv"));
            let report = cmd_eval(&cfg, &ckpt, &out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

fn gen_corpus(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.corpus_spec()?;
    let samples = corpus::generate(&spec, cfg.corpus_size, rng::derive_seed(cfg.seed, "corpus"))?;
    if let Some(dir) = cfg.corpus.parent() {
        std::fs::create_dir_all(dir)?;
    }
    write_corpus(&samples, &cfg.corpus)?;
    log::info!("wrote {} pairs to {}", samples.len(), cfg.corpus.display());
    Ok(())
}

fn load_split(cfg: &RunConfig) -> Result<(Vec<PairedSample>, Vec<PairedSample>)> {
    let vocab = cfg.model.vocab()?;
    let all = read_corpus(&cfg.corpus, &vocab)?;
    Ok(corpus::split(all, cfg.held_out_fraction, rng::derive_seed(cfg.seed, "split")))
}

fn eval_pairs(cfg: &RunConfig) -> Result<Vec<PairedSample>> {
    let (_, mut held) = load_split(cfg)?;
    held.truncate(cfg.eval_samples);
    if held.is_empty() {
        bail!("held-out split of {} is empty", cfg.corpus.display());
    }
    Ok(held)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (train_set, held) = load_split(cfg)?;
    log::info!("{} training pairs, {} held out", train_set.len(), held.len());
    let mut init_rng = rng::stream(cfg.seed, "init");
    let mut params = ModelParams::new(cfg.model.clone(), &mut init_rng)?;
    let ckpt_dir = cfg.checkpoint_dir();
    std::fs::create_dir_all(&ckpt_dir)?;
    let metrics_path = cfg.run_dir.join("metrics.csv");
    let mut metrics = BufWriter::new(File::create(&metrics_path)?);
    writeln!(metrics, "{}", EpochLog::CSV_HEADER)?;
    let result = train(&mut params, &train_set, &cfg.train_config()?, rng::derive_seed(cfg.seed, "train"), |log, p| {
        writeln!(metrics, "{}", log.csv_row()).map_err(|e| Error::Config(e.to_string()))?;
        metrics.flush().map_err(|e| Error::Config(e.to_string()))?;
        p.save(ckpt_dir.join("last.ckpt"))
    });
    match result {
        Ok(_) => {
            params.save(cfg.final_checkpoint())?;
            log::info!("wrote {}", cfg.final_checkpoint().display());
            Ok(())
        }
        Err(e @ Error::NonFinite(_)) => {
            let path = ckpt_dir.join("last_good.ckpt");
            params.save(&path)?;
            Err(anyhow::Error::new(e).context(format!("training aborted; last good parameters in {}", path.display())))
        }
        Err(e) => Err(e.into()),
    }
}

fn read_sources(path: &Path, cfg: &RunConfig) -> Result<Vec<TokenSeq>> {
    let vocab = cfg.model.vocab()?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        return Ok(read_corpus(path, &vocab)?.into_iter().map(|s| s.source).collect());
    }
    BufReader::new(text.as_bytes())
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let ids = line?
                .split_whitespace()
                .map(|t| t.parse::<u32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .with_context(|| format!("{}:{}: bad token id", path.display(), i + 1))?;
            Ok(TokenSeq::content(ids, &vocab)?)
        })
        .collect()
}

fn cmd_convert(cfg: &RunConfig, ckpt: &Path, input: &Path, out: &Path, trace_out: Option<&Path>) -> Result<()> {
    let params = ModelParams::load(ckpt)?;
    let sources = read_sources(input, cfg)?;
    let ratio = cfg.ratio_mode()?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    let mut trace_w = trace_out.map(|p| File::create(p).map(BufWriter::new)).transpose()?;
    for (i, src) in sources.iter().enumerate() {
        let sampler = maskconv::sampler::SamplerConfig {
            seed: sample_seed(cfg.seed, i),
            ..cfg.sampler
        };
        let conv = convert(src, &params, &sampler, ratio).with_context(|| format!("converting input {}", i + 1))?;
        let rec = serde_json::json!({
            "src": src.ids(),
            "out": conv.output.ids(),
            "ratio": conv.ratio,
        });
        writeln!(w, "{rec}")?;
        if let Some(tw) = trace_w.as_mut() {
            let rec = serde_json::json!({
                "index": i,
                "scores": conv.scores.0,
                "reuse_set": conv.init.reuse_set,
                "z0": conv.init.z0.ids(),
                "trace": conv.trace,
            });
            writeln!(tw, "{rec}")?;
        }
    }
    w.flush()?;
    if let Some(mut tw) = trace_w {
        tw.flush()?;
    }
    log::info!("converted {} sequences into {}", sources.len(), out.display());
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig, ckpt: &Path, axis: SweepAxis, out: &Path) -> Result<()> {
    let params = ModelParams::load(ckpt)?;
    let pairs = eval_pairs(cfg)?;
    let markers = cfg.corpus_spec()?.markers();
    let rows = sweep(&params, &pairs, &markers, axis, &cfg.sampler, cfg.ratio_mode()?, cfg.seed)?;
    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "{}", SweepRow::CSV_HEADER)?;
    for r in &rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    w.flush()?;
    log::info!("wrote {} sweep rows to {}", rows.len(), out.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<EvalReport> {
    let params = ModelParams::load(ckpt)?;
    let pairs = eval_pairs(cfg)?;
    let markers = cfg.corpus_spec()?.markers();
    let sampler = maskconv::sampler::SamplerConfig {
        reuse_mode: ReuseMode::Threshold,
        threshold: 1.0,
        ..cfg.sampler
    };
    let report = evaluate(&params, &pairs, &markers, &sampler, cfg.ratio_mode()?, cfg.seed)?;
    let mut w = BufWriter::new(File::create(out)?);
    writeln!(w, "{}", EvalReport::CSV_HEADER)?;
    writeln!(w, "{}", report.csv_row())?;
    w.flush()?;
    Ok(report)
}
