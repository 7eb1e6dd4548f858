//! Synthetic paired corpus: native sequences realized from latent symbol
//! strings, and "accented" sources made by substituting accent-prone tokens
//! with marker tokens, lengthening runs, and inserting fillers.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::ctp::{lcs_labels, CtpLabels};
use crate::error::{Error, Result};
use crate::guidance::LatentLabelSeq;
use crate::rng::{self, Rng};
use crate::tokens::{PairedSample, TokenSeq, Vocab};

/// One accent transform. Rates are per run of identical native tokens and
/// are all multiplied by `strength`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccentSpec {
    pub name: String,
    /// `(accent-prone token, marker token)` pairs.
    pub substitution: Vec<(u32, u32)>,
    pub substitution_rate: f64,
    pub lengthen_rate: f64,
    /// Extra copies added to a lengthened run, drawn uniformly from `1..=max_extra`.
    pub max_extra: u32,
    /// Probability of a filler token after a run.
    pub insertion_rate: f64,
    pub strength: f64,
}

impl AccentSpec {
    fn marker_for(&self, token: u32) -> Option<u32> {
        self.substitution.iter().find(|(p, _)| *p == token).map(|&(_, m)| m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab_size: u32,
    pub latent_alphabet: u32,
    /// Native lengths are uniform on `min_len..=max_len`.
    pub min_len: usize,
    pub max_len: usize,
    /// Token string realizing each latent symbol; repeats form runs.
    pub expansions: Vec<Vec<u32>>,
    pub fillers: Vec<u32>,
    pub accents: Vec<AccentSpec>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self::generate(0x5eed)
    }
}

impl CorpusSpec {
    /// The default layout with expansions and substitution maps drawn from
    /// `seed`: natives `0..52`, fillers `52..56`, markers `56..64`, 16 latent
    /// symbols of three distinct tokens each (runs of one or two), eight
    /// accent-prone tokens and three accents.
    pub fn generate(seed: u64) -> Self {
        let mut rng = rng::stream(seed, "corpus-spec");
        let natives: Vec<u32> = (0..52).collect();
        let expansions = (0..16)
            .map(|_| {
                let picks: Vec<u32> = natives.choose_multiple(&mut rng, 3).copied().collect();
                picks
                    .into_iter()
                    .flat_map(|t| {
                        let run = if rng.random::<f64>() < 0.3 { 2 } else { 1 };
                        std::iter::repeat_n(t, run)
                    })
                    .collect()
            })
            .collect::<Vec<Vec<u32>>>();
        // Accent-prone tokens: eight of the natives the expansions use.
        let mut used: Vec<u32> = expansions.iter().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect();
        used.shuffle(&mut rng);
        let prone: Vec<u32> = used[..8].to_vec();
        let markers: Vec<u32> = (56..64).collect();
        let rates = [
            ("a", 0.7, 0.15, 0.05),
            ("b", 0.5, 0.25, 0.05),
            ("c", 0.6, 0.1, 0.1),
        ];
        let accents = rates
            .iter()
            .map(|&(name, sub, len, ins)| {
                let mut m = markers.clone();
                m.shuffle(&mut rng);
                AccentSpec {
                    name: name.to_string(),
                    substitution: prone.iter().copied().zip(m).collect(),
                    substitution_rate: sub,
                    lengthen_rate: len,
                    max_extra: 2,
                    insertion_rate: ins,
                    strength: 1.0,
                }
            })
            .collect();
        Self {
            vocab_size: 64,
            latent_alphabet: 16,
            min_len: 20,
            max_len: 80,
            expansions,
            fillers: (52..56).collect(),
            accents,
        }
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size)
    }

    /// Tokens that can appear in native sequences.
    pub fn native_tokens(&self) -> BTreeSet<u32> {
        self.expansions.iter().flatten().copied().collect()
    }

    /// Every substitution image of every accent.
    pub fn markers(&self) -> BTreeSet<u32> {
        self.accents
            .iter()
            .flat_map(|a| a.substitution.iter().map(|&(_, m)| m))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let vocab = self.vocab()?;
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.expansions.len() != self.latent_alphabet as usize {
            return bad("one expansion per latent symbol required".into());
        }
        if self.expansions.iter().any(|e| e.is_empty()) {
            return bad("empty expansion".into());
        }
        let natives = self.native_tokens();
        let markers = self.markers();
        let all = natives.iter().chain(&markers).chain(&self.fillers);
        if let Some(&t) = all.clone().find(|&&t| !vocab.is_content(t)) {
            return bad(format!("token {t} outside the vocabulary"));
        }
        if let Some(t) = markers.iter().find(|t| natives.contains(t) || self.fillers.contains(t)) {
            return bad(format!("marker {t} is also a native or filler token"));
        }
        if let Some(t) = self.fillers.iter().find(|t| natives.contains(t)) {
            return bad(format!("filler {t} is also a native token"));
        }
        if self.accents.is_empty() {
            return bad("at least one accent required".into());
        }
        for a in &self.accents {
            let rates = [a.substitution_rate, a.lengthen_rate, a.insertion_rate, a.strength];
            if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return bad(format!("accent {}: rates and strength must lie in [0, 1]", a.name));
            }
            if a.insertion_rate > 0.0 && self.fillers.is_empty() {
                return bad(format!("accent {} inserts fillers but none are defined", a.name));
            }
            if a.lengthen_rate > 0.0 && a.max_extra == 0 {
                return bad(format!("accent {}: lengthening needs max_extra >= 1", a.name));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("spec serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Draws a latent string and realizes it, truncated to a length drawn
/// uniformly from `min_len..=max_len`.
pub fn gen_native(spec: &CorpusSpec, rng: &mut Rng) -> Result<(TokenSeq, LatentLabelSeq)> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    let mut tokens = Vec::with_capacity(len + 4);
    let mut latents = Vec::new();
    while tokens.len() < len {
        let s = rng.random_range(0..spec.latent_alphabet);
        latents.push(s);
        tokens.extend_from_slice(&spec.expansions[s as usize]);
    }
    tokens.truncate(len);
    Ok((
        TokenSeq::content(tokens, &spec.vocab()?)?,
        LatentLabelSeq::new(latents, spec.latent_alphabet)?,
    ))
}

fn runs(ids: &[u32]) -> Vec<(u32, usize)> {
    let mut out: Vec<(u32, usize)> = Vec::new();
    for &t in ids {
        match out.last_mut() {
            Some((last, n)) if *last == t => *n += 1,
            _ => out.push((t, 1)),
        }
    }
    out
}

/// Applies `accent` run by run: substitution of the whole run, lengthening
/// by extra copies, then possibly a filler. Returns the source and the
/// 0-based positions that differ from the native realization; for a
/// lengthened run those are its outer positions, split as evenly as
/// possible with the extra one on the right.
pub fn apply_accent(
    native: &TokenSeq,
    accent: &AccentSpec,
    fillers: &[u32],
    vocab: &Vocab,
    rng: &mut Rng,
) -> Result<(TokenSeq, Vec<u32>)> {
    let k = accent.strength;
    let mut out = Vec::with_capacity(native.len() * 3 / 2);
    let mut prov = Vec::new();
    for (token, n) in runs(native.ids()) {
        let marker = accent
            .marker_for(token)
            .filter(|_| rng.random::<f64>() < k * accent.substitution_rate);
        let extra = if rng.random::<f64>() < k * accent.lengthen_rate {
            rng.random_range(1..=accent.max_extra) as usize
        } else {
            0
        };
        let start = out.len();
        let total = n + extra;
        out.extend(std::iter::repeat_n(marker.unwrap_or(token), total));
        if marker.is_some() {
            prov.extend((start..start + total).map(|p| p as u32));
        } else if extra > 0 {
            let left = extra / 2;
            prov.extend((start..start + left).map(|p| p as u32));
            prov.extend((start + left + n..start + total).map(|p| p as u32));
        }
        if rng.random::<f64>() < k * accent.insertion_rate {
            prov.push(out.len() as u32);
            out.push(*fillers.choose(rng).ok_or_else(|| Error::Config("no filler tokens".into()))?);
        }
    }
    Ok((TokenSeq::content(out, vocab)?, prov))
}

/// Common-token labels for a generated pair; positions the transform
/// touched but the LCS still matched are logged.
pub fn annotate(source: &TokenSeq, native: &TokenSeq, provenance: &[u32]) -> CtpLabels {
    let labels = lcs_labels(source.ids(), native.ids());
    let clash = provenance.iter().filter(|&&p| labels.0[p as usize] == 1).count();
    if clash > 0 {
        log::debug!("{clash} transformed positions matched by the LCS");
    }
    labels
}

/// Generates sample `index` from its own stream, so any sample can be
/// regenerated independently of the others.
pub fn gen_sample(spec: &CorpusSpec, seed: u64, index: usize) -> Result<PairedSample> {
    let vocab = spec.vocab()?;
    let mut rng = rng::stream(seed, &format!("corpus/{index}"));
    let accent_id = rng.random_range(0..spec.accents.len());
    let accent = &spec.accents[accent_id];
    let (native, latents) = gen_native(spec, &mut rng)?;
    let (source, prov) = apply_accent(&native, accent, &spec.fillers, &vocab, &mut rng)?;
    let labels = annotate(&source, &native, &prov);
    let mut s = PairedSample::new(source, native, labels.0, latents.labels().to_vec())?;
    s.accent = Some(accent_id as u32);
    s.provenance = Some(prov);
    Ok(s)
}

pub fn generate(spec: &CorpusSpec, n: usize, seed: u64) -> Result<Vec<PairedSample>> {
    spec.validate()?;
    (0..n).map(|i| gen_sample(spec, seed, i)).collect()
}

/// Held-out membership depends only on the latent string, so pairs sharing
/// a latent string never straddle the split.
pub fn is_held_out(latents: &[u32], fraction: f64, seed: u64) -> bool {
    let key: String = latents.iter().map(|l| format!("{l},")).collect();
    let h = rng::derive_seed(seed, &format!("split/{key}"));
    (h as f64 / u64::MAX as f64) < fraction
}

pub fn split(samples: Vec<PairedSample>, fraction: f64, seed: u64) -> (Vec<PairedSample>, Vec<PairedSample>) {
    samples
        .into_iter()
        .partition(|s| !is_held_out(&s.latent_labels, fraction, seed))
}

/// Number of marker tokens in `ids`.
pub fn count_markers(ids: &[u32], markers: &BTreeSet<u32>) -> usize {
    ids.iter().filter(|t| markers.contains(t)).count()
}
