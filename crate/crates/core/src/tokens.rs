//! Vocabulary, token sequences and the JSON-lines corpus format.
//!
//! Content tokens are `0..V`. Four ids above the content range are reserved:
//! `V` is the absorbing mask state, followed by the `[START]`, `[TASK]` and
//! `[END]` markers used to pack decoder inputs. Keeping them contiguous lets
//! one embedding table of `V + 4` rows cover everything.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
}

impl Vocab {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::Domain(format!("vocabulary size {size} < 2")));
        }
        Ok(Self { size })
    }

    /// Number of content tokens `V`.
    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn mask_id(&self) -> u32 {
        self.size
    }

    pub fn start_id(&self) -> u32 {
        self.size + 1
    }

    pub fn task_id(&self) -> u32 {
        self.size + 2
    }

    pub fn end_id(&self) -> u32 {
        self.size + 3
    }

    /// Rows of an embedding table covering content, mask and special ids.
    pub fn table_rows(&self) -> usize {
        self.size as usize + 4
    }

    pub fn is_content(&self, id: u32) -> bool {
        id < self.size
    }
}

/// A non-empty token sequence whose ids are content tokens or the mask id.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    /// Validates ids against `vocab`; the mask id is accepted.
    pub fn new(ids: Vec<u32>, vocab: &Vocab) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Domain("token sequence must be non-empty".into()));
        }
        if let Some(&id) = ids
            .iter()
            .find(|&&id| !vocab.is_content(id) && id != vocab.mask_id())
        {
            return Err(Error::Vocab {
                id,
                size: vocab.size(),
            });
        }
        Ok(Self { ids })
    }

    /// Like [`TokenSeq::new`] but rejects the mask id as well.
    pub fn content(ids: Vec<u32>, vocab: &Vocab) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| !vocab.is_content(id)) {
            return Err(Error::Vocab {
                id,
                size: vocab.size(),
            });
        }
        Self::new(ids, vocab)
    }

    /// `len` copies of the mask id.
    pub fn masked(len: usize, vocab: &Vocab) -> Result<Self> {
        Self::new(vec![vocab.mask_id(); len], vocab)
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// Always false; sequences are non-empty by construction.
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn count_masked(&self, vocab: &Vocab) -> usize {
        self.ids.iter().filter(|&&id| id == vocab.mask_id()).count()
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.ids
    }
}

/// Positive duration ratio `len(target) / len(source)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct DurationRatio(f64);

impl DurationRatio {
    pub fn new(r: f64) -> Result<Self> {
        if !(r.is_finite() && r > 0.0) {
            return Err(Error::Domain(format!("duration ratio must be > 0, got {r}")));
        }
        Ok(Self(r))
    }

    pub fn value(&self) -> f64 {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub source: TokenSeq,
    pub target: TokenSeq,
    /// One bit per source position, set where the source token is shared
    /// with the target.
    pub common_labels: Vec<u8>,
    /// Symbol sequence realized by both sides; supervises the CTC head.
    pub latent_labels: Vec<u32>,
    /// Accent spec id when the sample came from the corpus generator.
    pub accent: Option<u32>,
    /// Source positions (0-based) modified by the accent transform.
    pub provenance: Option<Vec<u32>>,
}

impl PairedSample {
    pub fn new(
        source: TokenSeq,
        target: TokenSeq,
        common_labels: Vec<u8>,
        latent_labels: Vec<u32>,
    ) -> Result<Self> {
        if common_labels.len() != source.len() {
            return Err(Error::Contract(format!(
                "{} labels for a source of length {}",
                common_labels.len(),
                source.len()
            )));
        }
        if common_labels.iter().any(|&b| b > 1) {
            return Err(Error::Contract("common labels must be 0 or 1".into()));
        }
        Ok(Self {
            source,
            target,
            common_labels,
            latent_labels,
            accent: None,
            provenance: None,
        })
    }

    pub fn ratio(&self) -> DurationRatio {
        DurationRatio(self.target.len() as f64 / self.source.len() as f64)
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    src: Vec<u32>,
    tgt: Vec<u32>,
    labels: Vec<u8>,
    latents: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    accent: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Vec<u32>>,
}

impl Record {
    fn from_sample(s: &PairedSample) -> Self {
        Self {
            src: s.source.ids().to_vec(),
            tgt: s.target.ids().to_vec(),
            labels: s.common_labels.clone(),
            latents: s.latent_labels.clone(),
            accent: s.accent,
            provenance: s.provenance.clone(),
        }
    }

    fn into_sample(self, vocab: &Vocab) -> Result<PairedSample> {
        let source = TokenSeq::content(self.src, vocab)?;
        let target = TokenSeq::content(self.tgt, vocab)?;
        let mut sample = PairedSample::new(source, target, self.labels, self.latents)?;
        if let Some(p) = &self.provenance {
            if p.iter().any(|&i| i as usize >= sample.source.len()) {
                return Err(Error::Contract("provenance index past end of source".into()));
            }
        }
        sample.accent = self.accent;
        sample.provenance = self.provenance;
        Ok(sample)
    }
}

/// Reads a JSON-lines corpus, validating every record against `vocab`.
///
/// Blank lines are skipped. Errors carry the 1-based line number.
pub fn read_corpus(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Vec<PairedSample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            msg,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let sample = record.into_sample(vocab).map_err(|e| match e {
            Error::Vocab { .. } => e,
            other => parse_err(other.to_string()),
        })?;
        out.push(sample);
    }
    Ok(out)
}

/// Writes one JSON object per sample with a fixed key order.
pub fn write_corpus(samples: &[PairedSample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(&Record::from_sample(s))
            .map_err(|e| Error::Domain(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
