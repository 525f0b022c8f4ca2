//! Vocabularies and frozen pre-trained word vectors.
//!
//! Encoder and decoder vocabularies are always distinct objects: the decoder
//! vocabulary is built from definition sides only, so output tokens can only
//! be words attested as definientia. Embedding tables are frozen; tokens
//! missing from the pre-trained file (and all reserved tokens) are drawn
//! i.i.d. from N(0, 1).

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("token id {0} out of range")]
    BadId(u32),
}

/// Ordered token list with reserved ids pinned at positions 0-3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from the non-reserved tokens, in order. Duplicates and tokens
    /// colliding with reserved forms are rejected.
    pub fn new<I, S>(tokens: I) -> Result<Self, EmbedError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for tok in tokens {
            let tok = tok.into();
            if index.contains_key(&tok) {
                return Err(EmbedError::Config(format!("duplicate token '{tok}'")));
            }
            index.insert(tok.clone(), all.len() as u32);
            all.push(tok);
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved tokens are always present
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn is_reserved(id: u32) -> bool {
        id < RESERVED.len() as u32
    }

    /// All tokens including the reserved header, in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Token-per-line text format: four reserved lines, then the rest.
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| EmbedError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        f.write_all(out.as_bytes()).map_err(|e| EmbedError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let text = fs::read_to_string(path).map_err(|e| EmbedError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_lines(text.lines())
    }

    pub fn from_lines<'a>(lines: impl Iterator<Item = &'a str>) -> Result<Self, EmbedError> {
        let all: Vec<String> = lines.map(|s| s.to_string()).collect();
        if all.len() < RESERVED.len() {
            return Err(EmbedError::Config("vocabulary file too short".into()));
        }
        for (i, want) in RESERVED.iter().enumerate() {
            if all[i] != *want {
                return Err(EmbedError::Parse {
                    line: i + 1,
                    reason: format!("expected reserved token '{want}', found '{}'", all[i]),
                });
            }
        }
        Self::new(all[RESERVED.len()..].iter().cloned())
    }
}

/// Count tokens in a stream and keep those at or above `min_freq`, in first
/// occurrence order, behind the reserved tokens.
pub fn build_vocab<'a, I>(stream: I, min_freq: usize) -> Result<Vocabulary, EmbedError>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&str> = Vec::new();
    let mut total = 0usize;
    for tok in stream {
        total += 1;
        let c = counts.entry(tok).or_insert(0);
        if *c == 0 {
            order.push(tok);
        }
        *c += 1;
    }
    if total == 0 {
        return Err(EmbedError::Config("empty token stream".into()));
    }
    let kept = order
        .into_iter()
        .filter(|t| counts[t] >= min_freq && !RESERVED.contains(t));
    Vocabulary::new(kept)
}

/// Origin of an embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Pretrained,
    RandomInit,
}

/// |V| x dim matrix of word vectors plus per-token provenance. Frozen
/// tables never receive gradient updates.
#[derive(Debug, Clone)]
pub struct EmbeddingTable<T: Real> {
    pub matrix: Tensor<T>,
    pub frozen: bool,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub pretrained: usize,
    pub random_init: usize,
    pub warnings: Vec<String>,
}

impl<T: Real> EmbeddingTable<T> {
    /// All rows random-init, used when no pre-trained file is given.
    pub fn random(vocab: &Vocabulary, dim: usize, rng: &mut SeededRng) -> Self {
        let n = vocab.len();
        let data = (0..n * dim).map(|_| T::from_f64(rng.normal())).collect();
        EmbeddingTable {
            matrix: Tensor::new(vec![n, dim], data).expect("shape matches data"),
            frozen: true,
            provenance: vec![Provenance::RandomInit; n],
        }
    }

    pub fn row(&self, id: u32) -> Result<&[T], EmbedError> {
        if (id as usize) >= self.matrix.rows() {
            return Err(EmbedError::BadId(id));
        }
        Ok(self.matrix.row(id as usize))
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn provenance(&self, id: u32) -> Option<Provenance> {
        self.provenance.get(id as usize).copied()
    }

    /// SHA-256 over the row-major little-endian f32 image of the table;
    /// used to audit that frozen weights never move.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for v in self.matrix.data() {
            hasher.update((v.to_f64() as f32).to_le_bytes());
        }
        hasher.finalize().into()
    }
}

/// Read a pre-trained vector file: one token per line followed by `dim`
/// space-separated decimal reals. Rows for vocabulary tokens found in the
/// file are copied verbatim; everything else (including reserved tokens)
/// is drawn from N(0, 1).
pub fn load_pretrained<T: Real>(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut SeededRng,
) -> Result<(EmbeddingTable<T>, LoadReport), EmbedError> {
    let file = fs::File::open(path).map_err(|e| EmbedError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = BufReader::new(file);

    let mut found: HashMap<u32, Vec<f64>> = HashMap::new();
    let mut report = LoadReport::default();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| EmbedError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line has a first field");
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(EmbedError::Parse {
                line: lineno,
                reason: format!("expected {dim} components, found {}", values.len()),
            });
        }
        let parsed: Result<Vec<f64>, _> = values.iter().map(|v| v.parse::<f64>()).collect();
        let parsed = parsed.map_err(|e| EmbedError::Parse {
            line: lineno,
            reason: format!("unparseable component: {e}"),
        })?;
        let Some(id) = vocab.id(token) else {
            continue; // token not in this vocabulary
        };
        if Vocabulary::is_reserved(id) {
            continue; // reserved rows are always random-init
        }
        if found.contains_key(&id) {
            report.warnings.push(format!(
                "line {lineno}: duplicate token '{token}', first occurrence wins"
            ));
            continue;
        }
        found.insert(id, parsed);
    }

    let n = vocab.len();
    let mut data = vec![T::zero(); n * dim];
    let mut provenance = vec![Provenance::RandomInit; n];
    for id in 0..n as u32 {
        match found.get(&id) {
            Some(row) => {
                for (j, &v) in row.iter().enumerate() {
                    data[id as usize * dim + j] = T::from_f64(v);
                }
                provenance[id as usize] = Provenance::Pretrained;
                report.pretrained += 1;
            }
            None => {
                for j in 0..dim {
                    data[id as usize * dim + j] = T::from_f64(rng.normal());
                }
                report.random_init += 1;
            }
        }
    }
    Ok((
        EmbeddingTable {
            matrix: Tensor::new(vec![n, dim], data).expect("shape matches data"),
            frozen: true,
            provenance,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn temp_file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::new(["alpha", "beta"]).unwrap();
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<unk>"), Some(UNK));
        assert_eq!(v.id("alpha"), Some(4));
        assert_eq!(v.id_or_unk("missing"), UNK);
    }

    #[test]
    fn build_vocab_threshold() {
        let v = build_vocab(["a", "a", "b"], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
    }

    #[test]
    fn build_vocab_min_freq_one_keeps_all() {
        let v = build_vocab(["x", "y", "x"], 1).unwrap();
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn build_vocab_empty_stream_is_error() {
        assert!(build_vocab([], 1).is_err());
    }

    #[test]
    fn vocab_save_load_roundtrip() {
        let v = Vocabulary::new(["tie", "fool", "penumbra"]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(v, loaded);
        assert_eq!(loaded.id("<eos>"), Some(EOS));
    }

    #[test]
    fn load_full_coverage_copies_rows() {
        let v = Vocabulary::new(["cat", "dog"]).unwrap();
        let f = temp_file("cat 1.0 2.0 3.0\ndog -1.0 0.5 0.25\n");
        let mut rng = SeededRng::new(1);
        let (table, report) = load_pretrained::<f32>(f.path(), &v, 3, &mut rng).unwrap();
        assert_eq!(table.row(v.id("cat").unwrap()).unwrap(), &[1.0, 2.0, 3.0]);
        assert_eq!(table.row(v.id("dog").unwrap()).unwrap(), &[-1.0, 0.5, 0.25]);
        assert_eq!(report.pretrained, 2);
        assert_eq!(report.random_init, 4); // reserved rows
    }

    #[test]
    fn missing_token_is_random_init() {
        let v = Vocabulary::new(["monotreme", "cat"]).unwrap();
        let f = temp_file("cat 1.0 2.0\n");
        let mut rng = SeededRng::new(2);
        let (table, _) = load_pretrained::<f32>(f.path(), &v, 2, &mut rng).unwrap();
        assert_eq!(
            table.provenance(v.id("monotreme").unwrap()),
            Some(Provenance::RandomInit)
        );
        assert_eq!(
            table.provenance(v.id("cat").unwrap()),
            Some(Provenance::Pretrained)
        );
    }

    #[test]
    fn empty_file_rows_match_standard_normal_moments() {
        let words: Vec<String> = (0..1000).map(|i| format!("w{i}")).collect();
        let v = Vocabulary::new(words).unwrap();
        let f = temp_file("");
        let mut rng = SeededRng::new(3);
        let (table, report) = load_pretrained::<f64>(f.path(), &v, 100, &mut rng).unwrap();
        assert_eq!(report.pretrained, 0);
        let data = table.matrix.data();
        assert!(data.len() >= 100_000);
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let std = (data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((std - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let v = Vocabulary::new(["cat"]).unwrap();
        let f = temp_file("cat 1.0 2.0\ncat 1.0 oops\n");
        let mut rng = SeededRng::new(4);
        let err = load_pretrained::<f32>(f.path(), &v, 2, &mut rng).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn wrong_arity_reports_line_number() {
        let v = Vocabulary::new(["cat"]).unwrap();
        let f = temp_file("cat 1.0 2.0 3.0\n");
        let mut rng = SeededRng::new(5);
        let err = load_pretrained::<f32>(f.path(), &v, 2, &mut rng).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn duplicate_token_first_wins_with_warning() {
        let v = Vocabulary::new(["cat"]).unwrap();
        let f = temp_file("cat 1.0 2.0\ncat 9.0 9.0\n");
        let mut rng = SeededRng::new(6);
        let (table, report) = load_pretrained::<f32>(f.path(), &v, 2, &mut rng).unwrap();
        assert_eq!(table.row(v.id("cat").unwrap()).unwrap(), &[1.0, 2.0]);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn content_hash_detects_mutation() {
        let v = Vocabulary::new(["a"]).unwrap();
        let mut rng = SeededRng::new(7);
        let mut table = EmbeddingTable::<f32>::random(&v, 4, &mut rng);
        let h1 = table.content_hash();
        assert_eq!(h1, table.content_hash());
        table.matrix.data_mut()[0] += 1.0;
        assert_ne!(h1, table.content_hash());
    }
}
