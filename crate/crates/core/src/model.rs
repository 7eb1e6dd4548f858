//! The differentiable predictor stack.
//!
//! * a token encoder (pre-norm transformer with additive relative-position
//!   bias) producing [`ContentFeatures`];
//! * a CTC projection head on the content features;
//! * the common-token head and duration-ratio flow head, both reading the
//!   content features concatenated with source token embeddings;
//! * the bidirectional decoder over the packed sequence
//!   `[START] ⊕ content ⊕ [TASK] ⊕ tokens ⊕ [END]` with rotary positions and
//!   a two-block attention mask: content rows never look at the token block.
//!
//! Every forward is expressed on an [`autodiff::Graph`], so the same code
//! serves training and inference.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnMask, AttnSpec, Graph, Matrix, NodeId, ParamId, ParamStore, Rope};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokens::{TokenSeq, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Content vocabulary size `V`.
    pub vocab_size: u32,
    /// Size of the latent (CTC) alphabet, excluding the blank.
    pub latent_alphabet: u32,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Relative distances beyond this share one encoder bias bucket.
    pub max_rel_dist: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            latent_alphabet: 16,
            d_model: 64,
            heads: 4,
            d_ff: 128,
            encoder_layers: 2,
            decoder_layers: 2,
            max_rel_dist: 16,
            rope_base: 10000.0,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab()?;
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if (self.d_model / self.heads) % 2 != 0 {
            return Err(Error::Config("rotary encoding needs an even head dimension".into()));
        }
        if self.latent_alphabet == 0 {
            return Err(Error::Config("latent alphabet must be non-empty".into()));
        }
        Ok(())
    }

    /// Number of CTC output classes (alphabet plus blank).
    pub fn ctc_classes(&self) -> usize {
        self.latent_alphabet as usize + 1
    }
}

/// Number of time features fed to the duration velocity network besides `u`.
const TIME_FREQS: usize = 4;
const DP_FEATURES: usize = 2 + 2 * TIME_FREQS;

/// Encoder outputs, one row per source position.
#[derive(Clone, Debug, PartialEq)]
pub struct ContentFeatures(pub Matrix);

impl ContentFeatures {
    pub fn len(&self) -> usize {
        self.0.rows
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows == 0
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    rel_bias: Option<ParamId>,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_embed: ParamId,
    enc_blocks: Vec<Block>,
    enc_ln_g: ParamId,
    enc_ln_b: ParamId,
    ctc_w: ParamId,
    ctc_b: ParamId,
    ctp_w1: ParamId,
    ctp_b1: ParamId,
    ctp_w2: ParamId,
    ctp_b2: ParamId,
    dp_in_w: ParamId,
    dp_in_b: ParamId,
    dp_query: ParamId,
    dp_w1: ParamId,
    dp_b1: ParamId,
    dp_w2: ParamId,
    dp_b2: ParamId,
    dp_w3: ParamId,
    dp_b3: ParamId,
    dec_embed: ParamId,
    content_w: ParamId,
    content_b: ParamId,
    dec_blocks: Vec<Block>,
    dec_ln_g: ParamId,
    dec_ln_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// Model weights, their gradient buffers, and the configuration that shaped
/// them.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    vocab: Vocab,
    pub store: ParamStore,
    layout: Layout,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        self.store.add(name, Matrix::from_vec(rows, cols, data))
    }

    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize, gain: f64) -> ParamId {
        self.normal(name, fan_in, fan_out, gain / (fan_in as f64).sqrt())
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.add(name, Matrix::filled(rows, cols, v))
    }

    fn block(&mut self, prefix: &str, cfg: &ModelConfig, layers: usize, rel: bool) -> Block {
        let d = cfg.d_model;
        let out_gain = 1.0 / (2.0 * layers as f64).sqrt();
        Block {
            ln1_g: self.constant(format!("{prefix}.ln1.g"), 1, d, 1.0),
            ln1_b: self.constant(format!("{prefix}.ln1.b"), 1, d, 0.0),
            wq: self.linear(format!("{prefix}.attn.wq"), d, d, 1.0),
            wk: self.linear(format!("{prefix}.attn.wk"), d, d, 1.0),
            wv: self.linear(format!("{prefix}.attn.wv"), d, d, 1.0),
            wo: self.linear(format!("{prefix}.attn.wo"), d, d, out_gain),
            rel_bias: rel.then(|| {
                self.constant(format!("{prefix}.attn.rel_bias"), cfg.heads, 2 * cfg.max_rel_dist + 1, 0.0)
            }),
            ln2_g: self.constant(format!("{prefix}.ln2.g"), 1, d, 1.0),
            ln2_b: self.constant(format!("{prefix}.ln2.b"), 1, d, 0.0),
            w1: self.linear(format!("{prefix}.ff.w1"), d, cfg.d_ff, 1.0),
            b1: self.constant(format!("{prefix}.ff.b1"), 1, cfg.d_ff, 0.0),
            w2: self.linear(format!("{prefix}.ff.w2"), cfg.d_ff, d, out_gain),
            b2: self.constant(format!("{prefix}.ff.b2"), 1, d, 0.0),
        }
    }
}

impl ModelParams {
    /// Freshly initialized parameters. Names and registration order are part
    /// of the checkpoint format.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab()?;
        let d = config.d_model;
        let rows = vocab.table_rows();
        let v = config.vocab_size as usize;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng,
        };
        let enc_embed = init.normal("enc.embed".into(), rows, d, 1.0);
        let enc_blocks = (0..config.encoder_layers)
            .map(|i| init.block(&format!("enc.{i}"), &config, config.encoder_layers, true))
            .collect();
        let enc_ln_g = init.constant("enc.ln.g".into(), 1, d, 1.0);
        let enc_ln_b = init.constant("enc.ln.b".into(), 1, d, 0.0);
        let ctc_w = init.linear("ctc.w".into(), d, config.ctc_classes(), 1.0);
        let ctc_b = init.constant("ctc.b".into(), 1, config.ctc_classes(), 0.0);
        let ctp_w1 = init.linear("ctp.w1".into(), 2 * d, d, 1.0);
        let ctp_b1 = init.constant("ctp.b1".into(), 1, d, 0.0);
        let ctp_w2 = init.linear("ctp.w2".into(), d, 1, 1.0);
        let ctp_b2 = init.constant("ctp.b2".into(), 1, 1, 0.0);
        let dp_in_w = init.linear("dp.in.w".into(), 2 * d, d, 1.0);
        let dp_in_b = init.constant("dp.in.b".into(), 1, d, 0.0);
        let dp_query = init.linear("dp.query".into(), d, 1, 1.0);
        let dp_w1 = init.linear("dp.w1".into(), d + DP_FEATURES, d, 1.0);
        let dp_b1 = init.constant("dp.b1".into(), 1, d, 0.0);
        let dp_w2 = init.linear("dp.w2".into(), d, d, 1.0);
        let dp_b2 = init.constant("dp.b2".into(), 1, d, 0.0);
        let dp_w3 = init.linear("dp.w3".into(), d, 1, 1.0);
        let dp_b3 = init.constant("dp.b3".into(), 1, 1, 0.0);
        let dec_embed = init.normal("dec.embed".into(), rows, d, 1.0);
        let content_w = init.linear("dec.content.w".into(), d, d, 1.0);
        let content_b = init.constant("dec.content.b".into(), 1, d, 0.0);
        let dec_blocks = (0..config.decoder_layers)
            .map(|i| init.block(&format!("dec.{i}"), &config, config.decoder_layers, false))
            .collect();
        let dec_ln_g = init.constant("dec.ln.g".into(), 1, d, 1.0);
        let dec_ln_b = init.constant("dec.ln.b".into(), 1, d, 0.0);
        let out_w = init.linear("dec.out.w".into(), d, v, 1.0);
        let out_b = init.constant("dec.out.b".into(), 1, v, 0.0);
        let layout = Layout {
            enc_embed,
            enc_blocks,
            enc_ln_g,
            enc_ln_b,
            ctc_w,
            ctc_b,
            ctp_w1,
            ctp_b1,
            ctp_w2,
            ctp_b2,
            dp_in_w,
            dp_in_b,
            dp_query,
            dp_w1,
            dp_b1,
            dp_w2,
            dp_b2,
            dp_w3,
            dp_b3,
            dec_embed,
            content_w,
            content_b,
            dec_blocks,
            dec_ln_g,
            dec_ln_b,
            out_w,
            out_b,
        };
        Ok(Self {
            config,
            vocab,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn block(
        &self,
        g: &mut Graph,
        x: NodeId,
        b: &Block,
        mask: AttnMask,
        rope: Option<Rope>,
    ) -> NodeId {
        let h = g.layer_norm(x, b.ln1_g, b.ln1_b);
        let q = g.linear(h, b.wq, None);
        let k = g.linear(h, b.wk, None);
        let v = g.linear(h, b.wv, None);
        let rel_bias = b
            .rel_bias
            .map(|id| (g.param(id), self.config.max_rel_dist));
        let a = g.attention(
            q,
            k,
            v,
            AttnSpec {
                heads: self.config.heads,
                mask,
                rope,
                rel_bias,
            },
        );
        let a = g.linear(a, b.wo, None);
        let x = g.add(x, a);
        let h = g.layer_norm(x, b.ln2_g, b.ln2_b);
        let f = g.linear(h, b.w1, Some(b.b1));
        let f = g.gelu(f);
        let f = g.linear(f, b.w2, Some(b.b2));
        g.add(x, f)
    }

    /// Source token embeddings (shared by the encoder and the two heads).
    pub fn source_embedding(&self, g: &mut Graph, src: &[u32]) -> NodeId {
        g.gather(self.layout.enc_embed, src)
    }

    /// Encoder over an embedded source; does not validate token ids.
    pub fn encoder_graph(&self, g: &mut Graph, emb: NodeId) -> NodeId {
        let mut x = emb;
        for b in &self.layout.enc_blocks {
            x = self.block(g, x, b, AttnMask::Full, None);
        }
        g.layer_norm(x, self.layout.enc_ln_g, self.layout.enc_ln_b)
    }

    /// Decoder over `z`, optionally conditioned on content rows.
    pub fn decoder_graph(&self, g: &mut Graph, content: Option<NodeId>, z: &[u32]) -> DecoderNodes {
        let l = &self.layout;
        let v = &self.vocab;
        let mut ids = Vec::with_capacity(z.len() + 2);
        ids.push(v.task_id());
        ids.extend_from_slice(z);
        ids.push(v.end_id());
        let start = g.gather(l.dec_embed, &[v.start_id()]);
        let tail = g.gather(l.dec_embed, &ids);
        let (x, content_len) = match content {
            Some(c) => {
                let rows = g.value(c).rows;
                let proj = g.linear(c, l.content_w, Some(l.content_b));
                (g.concat_rows(&[start, proj, tail]), rows)
            }
            None => (g.concat_rows(&[start, tail]), 0),
        };
        let mask = AttnMask::TwoBlock {
            content_end: 1 + content_len,
        };
        let rope = Rope {
            base: self.config.rope_base,
            positions: Some(decoder_positions(content_len, z.len()).into()),
        };
        let mut x = x;
        for b in &l.dec_blocks {
            x = self.block(g, x, b, mask, Some(rope.clone()));
        }
        let hidden = g.layer_norm(x, l.dec_ln_g, l.dec_ln_b);
        let tokens = g.slice_rows(hidden, 2 + content_len, z.len());
        let logits = g.linear(tokens, l.out_w, Some(l.out_b));
        DecoderNodes {
            hidden,
            content_len,
            logits,
        }
    }

    pub fn ctc_graph(&self, g: &mut Graph, content: NodeId) -> NodeId {
        g.linear(content, self.layout.ctc_w, Some(self.layout.ctc_b))
    }

    /// Per-position common-token logits (`n × 1`).
    pub fn ctp_graph(&self, g: &mut Graph, content: NodeId, emb: NodeId) -> NodeId {
        let l = &self.layout;
        let x = g.concat_cols(content, emb);
        let h = g.linear(x, l.ctp_w1, Some(l.ctp_b1));
        let h = g.gelu(h);
        g.linear(h, l.ctp_w2, Some(l.ctp_b2))
    }

    /// Attentive pooling of content ⊕ embedding into one `1 × d` vector.
    pub fn dp_pool_graph(&self, g: &mut Graph, content: NodeId, emb: NodeId) -> NodeId {
        let l = &self.layout;
        let x = g.concat_cols(content, emb);
        let h = g.linear(x, l.dp_in_w, Some(l.dp_in_b));
        let h = g.gelu(h);
        let scores = g.linear(h, l.dp_query, None);
        let scores = g.scale(scores, 1.0 / (self.config.d_model as f64).sqrt());
        let scores = g.transpose(scores);
        let weights = g.softmax_rows(scores);
        g.matmul(weights, h)
    }

    /// Velocity predictions (`k × 1`) for `k` flow states `(u, t)` sharing
    /// one pooled condition.
    pub fn dp_velocity_graph(&self, g: &mut Graph, pooled: NodeId, u: &[f64], t: &[f64]) -> NodeId {
        assert_eq!(u.len(), t.len());
        let l = &self.layout;
        let k = u.len();
        let ones = g.input(Matrix::filled(k, 1, 1.0));
        let cond = g.matmul(ones, pooled);
        let mut feats = Matrix::zeros(k, DP_FEATURES);
        for i in 0..k {
            feats.row_mut(i).copy_from_slice(&flow_features(u[i], t[i]));
        }
        let feats = g.input(feats);
        let x = g.concat_cols(cond, feats);
        let h = g.linear(x, l.dp_w1, Some(l.dp_b1));
        let h = g.gelu(h);
        let h = g.linear(h, l.dp_w2, Some(l.dp_b2));
        let h = g.gelu(h);
        g.linear(h, l.dp_w3, Some(l.dp_b3))
    }

    fn check_source(&self, src: &TokenSeq) -> Result<()> {
        if let Some(&id) = src.ids().iter().find(|&&id| !self.vocab.is_content(id)) {
            return Err(Error::Contract(format!(
                "source token {id} is not a content token (mask id {})",
                self.vocab.mask_id()
            )));
        }
        Ok(())
    }

    /// Content features for a mask-free source sequence.
    pub fn encode(&self, src: &TokenSeq) -> Result<ContentFeatures> {
        self.check_source(src)?;
        let mut g = Graph::new(&self.store);
        let emb = self.source_embedding(&mut g, src.ids());
        let c = self.encoder_graph(&mut g, emb);
        Ok(ContentFeatures(g.value(c).clone()))
    }

    /// Logits over the content vocabulary for every position of `z`
    /// (`len(z) × V`). `None` runs the unconditional branch.
    pub fn decode(&self, z: &TokenSeq, c: Option<&ContentFeatures>) -> Result<Matrix> {
        Ok(self.decode_probe(z, c)?.0)
    }

    /// Logits plus the final hidden rows of the content block.
    pub fn decode_probe(&self, z: &TokenSeq, c: Option<&ContentFeatures>) -> Result<(Matrix, Matrix)> {
        let d = self.config.d_model;
        if let Some(c) = c {
            if c.0.cols != d {
                return Err(Error::Contract(format!(
                    "content features have {} columns, model expects {d}",
                    c.0.cols
                )));
            }
        }
        let mut g = Graph::new(&self.store);
        let content = c.map(|c| g.input(c.0.clone()));
        let out = self.decoder_graph(&mut g, content, z.ids());
        let hidden = g.value(out.hidden);
        let rows = out.content_len;
        let content_rows =
            Matrix::from_vec(rows, d, hidden.data[d..(1 + rows) * d].to_vec());
        Ok((g.value(out.logits).clone(), content_rows))
    }

    /// Sigmoid scores of the common-token head, one per source position.
    pub fn ctp_scores(&self, src: &TokenSeq, c: &ContentFeatures) -> Result<Vec<f64>> {
        self.check_source(src)?;
        if c.len() != src.len() {
            return Err(Error::Contract("content length differs from source length".into()));
        }
        let mut g = Graph::new(&self.store);
        let emb = self.source_embedding(&mut g, src.ids());
        let content = g.input(c.0.clone());
        let logits = self.ctp_graph(&mut g, content, emb);
        Ok(g.value(logits).data.iter().map(|&x| sigmoid(x)).collect())
    }

    /// Pooled duration condition for a source and its content features.
    pub fn dp_condition(&self, src: &TokenSeq, c: &ContentFeatures) -> Result<Matrix> {
        self.check_source(src)?;
        let mut g = Graph::new(&self.store);
        let emb = self.source_embedding(&mut g, src.ids());
        let content = g.input(c.0.clone());
        let pooled = self.dp_pool_graph(&mut g, content, emb);
        Ok(g.value(pooled).clone())
    }

    /// Learned velocity at `(u, t)` for a pooled condition.
    pub fn dp_velocity(&self, pooled: &Matrix, u: f64, t: f64) -> f64 {
        let mut g = Graph::new(&self.store);
        let p = g.input(pooled.clone());
        let v = self.dp_velocity_graph(&mut g, p, &[u], &[t]);
        g.value(v).data[0]
    }

    /// CTC logits over the latent alphabet plus blank for each source row.
    pub fn ctc_logits(&self, c: &ContentFeatures) -> Matrix {
        let mut g = Graph::new(&self.store);
        let content = g.input(c.0.clone());
        let l = self.ctc_graph(&mut g, content);
        g.value(l).clone()
    }
}

pub struct DecoderNodes {
    pub hidden: NodeId,
    pub content_len: usize,
    pub logits: NodeId,
}

/// Rotary positions for the packed decoder rows. Content row `i` sits at
/// `1 + i`; target row `j` sits at the centre of its share of the content
/// span, so a target token and the source tokens it most likely came from
/// are close in rotary distance whatever the two lengths are. Without
/// content the target rows take positions `1..=n`.
pub fn decoder_positions(content_len: usize, target_len: usize) -> Vec<f64> {
    let span = if content_len == 0 { target_len } else { content_len } as f64;
    let step = span / target_len.max(1) as f64;
    let mut pos = Vec::with_capacity(content_len + target_len + 3);
    pos.push(0.0);
    pos.extend((0..content_len).map(|i| 1.0 + i as f64));
    pos.push(0.0);
    pos.extend((0..target_len).map(|j| 0.5 + (j as f64 + 0.5) * step));
    pos.push(1.0 + span);
    pos
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn flow_features(u: f64, t: f64) -> [f64; DP_FEATURES] {
    let mut f = [0.0; DP_FEATURES];
    f[0] = u;
    f[1] = t;
    for k in 0..TIME_FREQS {
        let w = std::f64::consts::PI * (1 << k) as f64 * t;
        f[2 + 2 * k] = w.sin();
        f[3 + 2 * k] = w.cos();
    }
    f
}

/// `(1 + w) · cond − w · uncond`, elementwise in logit space.
pub fn cfg_combine(cond: &Matrix, uncond: &Matrix, w: f64) -> Result<Matrix> {
    if !(w >= 0.0) {
        return Err(Error::Domain(format!("guidance weight must be >= 0, got {w}")));
    }
    if cond.shape() != uncond.shape() {
        return Err(Error::Contract("guidance inputs differ in shape".into()));
    }
    let data = cond
        .data
        .iter()
        .zip(&uncond.data)
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect();
    Ok(Matrix::from_vec(cond.rows, cond.cols, data))
}

const MAGIC: &[u8; 4] = b"MCKP";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl ModelParams {
    /// Writes the checkpoint: magic, version, JSON model config, then every
    /// named tensor with its shape and little-endian `f64` data.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let cfg = serde_json::to_vec(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.write_all(MAGIC).map_err(io)?;
        write_u32(&mut w, VERSION).map_err(io)?;
        write_u32(&mut w, cfg.len() as u32).map_err(io)?;
        w.write_all(&cfg).map_err(io)?;
        write_u32(&mut w, self.store.len() as u32).map_err(io)?;
        for id in self.store.ids() {
            let name = self.store.name(id).as_bytes();
            let m = self.store.value(id);
            write_u32(&mut w, name.len() as u32).map_err(io)?;
            w.write_all(name).map_err(io)?;
            write_u32(&mut w, m.rows as u32).map_err(io)?;
            write_u32(&mut w, m.cols as u32).map_err(io)?;
            for v in &m.data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r).map_err(io)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut r).map_err(io)? as usize;
        let mut cfg = vec![0u8; len];
        r.read_exact(&mut cfg).map_err(io)?;
        let config: ModelConfig =
            serde_json::from_slice(&cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
        // Layout comes from the config; values are overwritten below.
        let mut params = Self::new(config, &mut crate::rng::seeded(0))?;
        let count = read_u32(&mut r).map_err(io)? as usize;
        if count != params.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {count}",
                params.store.len()
            )));
        }
        for id in params.store.ids().collect::<Vec<_>>() {
            let nlen = read_u32(&mut r).map_err(io)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            if name != params.store.name(id) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} where {} was expected",
                    params.store.name(id)
                )));
            }
            let rows = read_u32(&mut r).map_err(io)? as usize;
            let cols = read_u32(&mut r).map_err(io)? as usize;
            let m = params.store.value_mut(id);
            if (rows, cols) != m.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {name}")));
            }
            let mut buf = [0u8; 8];
            for v in m.data.iter_mut() {
                r.read_exact(&mut buf).map_err(io)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(params)
    }

    /// Random parameter coordinates `(param, flat index)`, for gradient checks.
    pub fn sample_coordinates(&self, n: usize, rng: &mut Rng) -> Vec<(ParamId, usize)> {
        let total = self.store.numel();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut k = rng.random_range(0..total);
            for id in self.store.ids() {
                let len = self.store.value(id).data.len();
                if k < len {
                    out.push((id, k));
                    break;
                }
                k -= len;
            }
        }
        out
    }
}
