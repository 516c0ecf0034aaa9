//! Frozen text embeddings, prompt-template ensembling, word vectors and the
//! name-similarity function used by open metrics.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const VILD_TEMPLATES: &str = include_str!("../resources/vild_templates.txt");

/// The 63 ensembling templates, with `{article}` and `{category}` placeholders.
pub fn vild_templates() -> Vec<String> {
    VILD_TEMPLATES.lines().map(str::to_string).collect()
}

pub fn fill_template(template: &str, name: &str) -> String {
    let article = match name.chars().next() {
        Some(c) if "aeiouAEIOU".contains(c) => "an",
        _ => "a",
    };
    template
        .replace("{article}", article)
        .replace("{category}", name)
}

/// A frozen text tower. Implementations never change their parameters.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, text: &str) -> Result<Vec<f64>>;

    /// Digest of all parameters; constant for the lifetime of the encoder.
    fn parameter_digest(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub name: String,
    pub vector: Vec<f64>,
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(v);
    (n > 1e-12 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

/// Average of per-template unit embeddings, re-normalized.
pub fn embed_name_ensembled(
    name: &str,
    templates: &[String],
    encoder: &dyn TextEncoder,
) -> Result<TextEmbedding> {
    if templates.is_empty() {
        return Err(Error::Config("at least one prompt template is required".into()));
    }
    let mut sum = vec![0.0; encoder.dim()];
    for t in templates {
        let v = encoder.encode(&fill_template(t, name))?;
        if v.len() != sum.len() {
            return Err(Error::Encoder(format!(
                "encoder returned {} values, expected {}",
                v.len(),
                sum.len()
            )));
        }
        let unit = normalized(&v)
            .ok_or_else(|| Error::Encoder(format!("zero embedding for {t:?}")))?;
        for (s, u) in sum.iter_mut().zip(unit) {
            *s += u;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / templates.len() as f64).collect();
    let vector = normalized(&mean).ok_or(Error::DegenerateEnsemble)?;
    Ok(TextEmbedding {
        name: name.to_string(),
        vector,
    })
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic character-trigram hashing encoder; stands in for a real text tower.
#[derive(Debug, Clone)]
pub struct HashingEncoder {
    dim: usize,
    seed: u64,
}

impl HashingEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashingEncoder { dim, seed }
    }

    fn gram_vector(&self, gram: &[u8], out: &mut [f64]) {
        let mut h = self.seed;
        for &b in gram {
            h = splitmix(h ^ b as u64);
        }
        for (i, o) in out.iter_mut().enumerate() {
            let r = splitmix(h ^ (i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d));
            *o += (r >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        }
    }
}

impl TextEncoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let padded = format!("  {}  ", text.to_lowercase());
        let bytes = padded.as_bytes();
        let mut v = vec![0.0; self.dim];
        for gram in bytes.windows(3) {
            self.gram_vector(gram, &mut v);
        }
        Ok(v)
    }

    fn parameter_digest(&self) -> String {
        hex::encode(Sha256::digest(format!("hashing:{}:{}", self.dim, self.seed)))
    }
}

/// Lookup-table encoder over a fixed vocabulary of names.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableEncoder {
    pub dim: usize,
    pub table: BTreeMap<String, Vec<f64>>,
}

impl TableEncoder {
    pub fn read(path: &Path) -> Result<Self> {
        let enc: TableEncoder = crate::store::read_json(path)?;
        if let Some((name, v)) = enc.table.iter().find(|(_, v)| v.len() != enc.dim) {
            return Err(Error::parse(
                path,
                format!("{name:?} has {} values, expected {}", v.len(), enc.dim),
            ));
        }
        Ok(enc)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::store::write_json(path, self)
    }
}

impl TextEncoder for TableEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::Encoder(format!("{text:?} not in the embedding table")))
    }

    fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in &self.table {
            h.update(name.as_bytes());
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Similarity between two names, in `[0, 1]`, symmetric, with `S(a, a) = 1`.
pub trait NameSimilarity: Sync {
    fn similarity(&self, a: &str, b: &str) -> f64;
}

/// Name equality; turns open metrics back into standard ones.
#[derive(Debug, Clone, Copy, Default)]
pub struct Indicator;

impl NameSimilarity for Indicator {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        if a == b {
            1.0
        } else {
            0.0
        }
    }
}

impl<F> NameSimilarity for F
where
    F: Fn(&str, &str) -> f64 + Sync,
{
    fn similarity(&self, a: &str, b: &str) -> f64 {
        self(a, b)
    }
}

/// Word vectors in the textual `.vec` format: a `count dim` header, then
/// `word v1 ... vd` per line.
#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    dim: usize,
    vocab: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn from_pairs(dim: usize, pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        WordVectors {
            dim,
            vocab: pairs.into_iter().collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vocab.get(word).map(Vec::as_slice)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.vocab.keys().map(String::as_str)
    }

    /// Mean of the vectors of in-vocabulary words; `None` when no word is known.
    pub fn phrase_vector(&self, phrase: &str) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.dim];
        let mut known = 0usize;
        for word in phrase
            .to_lowercase()
            .split(|c: char| c.is_whitespace() || c == '-' || c == '_' || c == ',')
            .filter(|w| !w.is_empty())
        {
            if let Some(v) = self.vocab.get(word) {
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
                known += 1;
            }
        }
        (known > 0).then(|| sum.into_iter().map(|s| s / known as f64).collect())
    }
}

pub fn load_word_vectors(path: &Path) -> Result<WordVectors> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, message: String| Error::VectorFile {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| bad(1, "empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (count, dim) = match fields.as_slice() {
        [c, d] => (
            c.parse::<usize>()
                .map_err(|_| bad(1, format!("bad row count {c:?}")))?,
            d.parse::<usize>()
                .map_err(|_| bad(1, format!("bad dimension {d:?}")))?,
        ),
        _ => return Err(bad(1, format!("expected header 'count dim', got {header:?}"))),
    };
    let mut vocab = HashMap::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.trim_end().split(' ');
        let word = parts.next().unwrap_or_default().to_string();
        let values: Vec<f64> = parts
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<f64>()
                    .map_err(|_| bad(lineno, format!("malformed value {p:?}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(bad(
                lineno,
                format!("{} values for {word:?}, expected {dim}", values.len()),
            ));
        }
        vocab.insert(word, values);
    }
    if vocab.len() != count {
        log::warn!(
            "{}: header declares {count} rows, read {}",
            path.display(),
            vocab.len()
        );
    }
    Ok(WordVectors { dim, vocab })
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let denom = l2_norm(a) * l2_norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

impl NameSimilarity for WordVectors {
    /// `max(0, cos)` of the phrase vectors; unknown phrases score 0 unless identical.
    fn similarity(&self, a: &str, b: &str) -> f64 {
        if a == b {
            return 1.0;
        }
        match (self.phrase_vector(a), self.phrase_vector(b)) {
            (Some(va), Some(vb)) => cosine(&va, &vb).clamp(0.0, 1.0),
            _ => {
                log::warn!("no known words in {a:?} or {b:?}; similarity set to 0");
                0.0
            }
        }
    }
}
