//! Caption corpora: style labels, vocabularies, object-word extraction,
//! file loading and batching.
//!
//! Two corpora feed training. The paired factual corpus holds image features
//! with captions; the unpaired corpora hold stylized sentences only. Object
//! words extracted from each caption stand in for the image on the unpaired
//! side.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FACTUAL: &str = "factual";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleLabel {
    pub id: usize,
    pub name: String,
}

impl StyleLabel {
    pub fn is_factual(&self) -> bool {
        self.name == FACTUAL
    }
}

/// The configured style set; ids are dense and exactly one label is factual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSet {
    labels: Vec<StyleLabel>,
}

impl StyleSet {
    pub fn new<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut labels = Vec::with_capacity(names.len());
        for (id, name) in names.iter().enumerate() {
            let name = name.as_ref().trim().to_lowercase();
            if name.is_empty() {
                return Err(Error::InvalidArgument("empty style name".into()));
            }
            if !seen.insert(name.clone()) {
                return Err(Error::InvalidArgument(format!("duplicate style {name:?}")));
            }
            labels.push(StyleLabel { id, name });
        }
        if labels.iter().filter(|l| l.is_factual()).count() != 1 {
            return Err(Error::InvalidArgument(
                "style set must contain exactly one \"factual\" label".into(),
            ));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[StyleLabel] {
        &self.labels
    }

    pub fn get(&self, id: usize) -> Option<&StyleLabel> {
        self.labels.get(id)
    }

    pub fn by_name(&self, name: &str) -> Option<&StyleLabel> {
        let name = name.to_lowercase();
        self.labels.iter().find(|l| l.name == name)
    }

    pub fn factual(&self) -> &StyleLabel {
        self.labels
            .iter()
            .find(|l| l.is_factual())
            .expect("validated on construction")
    }

    pub fn stylized(&self) -> impl Iterator<Item = &StyleLabel> {
        self.labels.iter().filter(|l| !l.is_factual())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyledCaption {
    pub tokens: Vec<String>,
    pub style: StyleLabel,
}

impl StyledCaption {
    pub fn new(tokens: Vec<String>, style: StyleLabel) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("caption has no tokens".into()));
        }
        Ok(Self { tokens, style })
    }

    pub fn from_text(text: &str, style: StyleLabel) -> Result<Self> {
        Self::new(tokenize(text), style)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub image_feature: Vec<f64>,
    pub caption: StyledCaption,
    pub object_words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnpairedSample {
    pub caption: StyledCaption,
    pub object_words: Vec<String>,
}

/// Lowercases, drops punctuation, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct ObjectVocabulary {
    words: Vec<String>,
    index: HashSet<String>,
}

impl From<Vec<String>> for ObjectVocabulary {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<ObjectVocabulary> for Vec<String> {
    fn from(v: ObjectVocabulary) -> Self {
        v.words
    }
}

impl ObjectVocabulary {
    /// Builds the vocabulary; words are lowercased and duplicates dropped.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self::default();
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if !w.is_empty() && vocab.index.insert(w.clone()) {
                vocab.words.push(w);
            }
        }
        vocab
    }

    /// Reads a plain-text list, one word per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_words(text.lines()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains(word)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Caption tokens found in `vocab`, in caption order, first occurrence only.
pub fn extract_object_words(tokens: &[String], vocab: &ObjectVocabulary) -> Vec<String> {
    let mut seen = HashSet::new();
    tokens
        .iter()
        .filter(|t| vocab.contains(t) && seen.insert(t.as_str()))
        .cloned()
        .collect()
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijection between words and indices; indices 0..4 are reserved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordVocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for WordVocabulary {
    fn from(words: Vec<String>) -> Self {
        let skip = words
            .iter()
            .zip(RESERVED)
            .take_while(|(w, r)| w.as_str() == *r)
            .count();
        Self::from_words(&words[skip..])
    }
}

impl From<WordVocabulary> for Vec<String> {
    fn from(v: WordVocabulary) -> Self {
        v.words
    }
}

impl WordVocabulary {
    /// Words with frequency at least `min_count`, sorted by descending
    /// frequency then lexicographically.
    pub fn build<'a, I>(captions: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a StyledCaption>,
    {
        if min_count == 0 {
            return Err(Error::InvalidArgument("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for c in captions {
            for t in &c.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, n)| *n >= min_count && !RESERVED.contains(w))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_words(kept.into_iter().map(|(w, _)| w)))
    }

    /// Reserved tokens followed by `words` in order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in RESERVED {
            vocab.push(w);
        }
        for w in words {
            vocab.push(w.as_ref());
        }
        vocab
    }

    fn push(&mut self, word: &str) {
        if !self.index.contains_key(word) {
            self.index.insert(word.to_owned(), self.words.len());
            self.words.push(word.to_owned());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= RESERVED.len()
    }

    pub fn index_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, index: usize) -> &str {
        self.words.get(index).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.index_of(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|i| self.word(*i).to_owned()).collect()
    }

    /// Non-reserved words, in index order.
    pub fn words(&self) -> &[String] {
        &self.words[RESERVED.len()..]
    }

    /// One word per line, reserved block omitted.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in self.words() {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_words(text.lines().filter(|l| !l.is_empty())))
    }

    /// SHA-256 of the file representation.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}

#[derive(Deserialize)]
struct PairedRecord {
    feature: Vec<f64>,
    caption: String,
}

/// Reads the paired JSONL format `{"feature": [...], "caption": "..."}`.
pub fn load_paired_corpus(
    path: &Path,
    obj_vocab: &ObjectVocabulary,
    factual: &StyleLabel,
    feature_dim: usize,
) -> Result<Vec<PairedSample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.display().to_string(),
        line,
        message,
    };
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairedRecord =
            serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if rec.feature.len() != feature_dim {
            return Err(parse_err(
                line_no,
                format!(
                    "feature has length {}, expected {feature_dim}",
                    rec.feature.len()
                ),
            ));
        }
        if rec.feature.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(line_no, "feature contains non-finite values".into()));
        }
        let caption = StyledCaption::from_text(&rec.caption, factual.clone())
            .map_err(|_| parse_err(line_no, "caption has no tokens".into()))?;
        let object_words = extract_object_words(&caption.tokens, obj_vocab);
        samples.push(PairedSample {
            image_feature: rec.feature,
            caption,
            object_words,
        });
    }
    Ok(samples)
}

/// Reads one stylized caption per line.
pub fn load_unpaired_corpus(
    path: &Path,
    style: &StyleLabel,
    obj_vocab: &ObjectVocabulary,
) -> Result<Vec<UnpairedSample>> {
    if style.is_factual() {
        return Err(Error::InvalidArgument(
            "unpaired corpora must carry a non-factual style".into(),
        ));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let caption =
            StyledCaption::from_text(line, style.clone()).map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: "caption has no tokens".into(),
            })?;
        let object_words = extract_object_words(&caption.tokens, obj_vocab);
        samples.push(UnpairedSample {
            caption,
            object_words,
        });
    }
    Ok(samples)
}

/// A homogeneous batch of indices into the paired or unpaired collection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Batch {
    Paired(Vec<usize>),
    Unpaired(Vec<usize>),
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices().len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices().is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        match self {
            Batch::Paired(v) | Batch::Unpaired(v) => v,
        }
    }

    pub fn is_paired(&self) -> bool {
        matches!(self, Batch::Paired(_))
    }
}

/// One epoch of batches. Each collection is shuffled and chunked separately,
/// then the batch order itself is shuffled; everything is keyed by `seed`.
pub fn make_batches(
    n_paired: usize,
    n_unpaired: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size < 1 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paired: Vec<usize> = (0..n_paired).collect();
    let mut unpaired: Vec<usize> = (0..n_unpaired).collect();
    paired.shuffle(&mut rng);
    unpaired.shuffle(&mut rng);
    let mut batches: Vec<Batch> = paired
        .chunks(batch_size)
        .map(|c| Batch::Paired(c.to_vec()))
        .chain(unpaired.chunks(batch_size).map(|c| Batch::Unpaired(c.to_vec())))
        .collect();
    batches.shuffle(&mut rng);
    Ok(batches)
}
