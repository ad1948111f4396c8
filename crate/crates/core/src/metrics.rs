//! Caption evaluation: BLEU-n, CIDEr, trigram perplexity, bag-of-words style
//! classification, and diversity of style phrases.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU-n with clipped n-gram precision and brevity penalty.
/// The reference length for each candidate is the closest reference length,
/// ties going to the shorter one.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Dimension {
            expected: candidates.len(),
            got: references.len(),
        });
    }
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!("BLEU order must be 1..=4, got {n}")));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Empty("reference set".into()));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|l| (l.abs_diff(cand.len()), *l))
            .expect("non-empty");
        for k in 1..=n {
            let cand_counts = ngrams(cand, k);
            let mut max_ref: Counts = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &cand_counts {
                matched[k - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if c_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(m, t)| (*m as f64 / *t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// CIDEr over n = 1..4: mean over images of the averaged tf-idf cosine
/// between candidate and each reference, times 10. Document frequency counts
/// the images whose references contain the n-gram.
pub fn cider(candidates: &[Vec<String>], references: &[Vec<Vec<String>>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Dimension {
            expected: candidates.len(),
            got: references.len(),
        });
    }
    if candidates.len() < 2 {
        return Err(Error::InvalidArgument("CIDEr needs at least two images".into()));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Empty("reference set".into()));
    }
    let n_images = candidates.len() as f64;
    let mut score = 0.0;
    for n in 1..=4 {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for refs in references {
            let seen: HashSet<&[String]> = refs.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let mut sum_n = 0.0;
        for (cand, refs) in candidates.iter().zip(references) {
            let vc = tfidf(ngrams(cand, n), &df, n_images);
            let per_ref: f64 = refs.iter().map(|r| sparse_cosine(&vc, &tfidf(ngrams(r, n), &df, n_images))).sum();
            sum_n += per_ref / refs.len() as f64;
        }
        score += sum_n / n_images / 4.0;
    }
    Ok(10.0 * score)
}

fn tfidf<'a>(counts: Counts<'a>, df: &HashMap<&[String], usize>, n_images: f64) -> HashMap<&'a [String], f64> {
    let len: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, c)| {
            let idf = n_images.ln() - (df.get(g).copied().unwrap_or(0).max(1) as f64).ln();
            (g, c as f64 / len as f64 * idf)
        })
        .collect()
}

fn sparse_cosine(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>) -> f64 {
    let norm = |v: &HashMap<&[String], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

const LM_BOS: &str = "<s>";
const LM_EOS: &str = "</s>";
const LM_UNK: &str = "<unk>";

/// Conditional token model scored by [`perplexity`].
pub trait LanguageModel {
    /// `P(word | h2 h1)` where `h1` is the previous token; histories at the
    /// sentence start are padded with a begin marker.
    fn prob(&self, h2: &str, h1: &str, word: &str) -> f64;

    /// Log-probability of a sentence including its end marker.
    fn sentence_log_prob(&self, tokens: &[String]) -> f64 {
        let mut h = (LM_BOS.to_string(), LM_BOS.to_string());
        let mut total = 0.0;
        for w in tokens.iter().map(String::as_str).chain([LM_EOS]) {
            total += self.prob(&h.0, &h.1, w).ln();
            h = (h.1, w.to_string());
        }
        total
    }
}

/// Uniform distribution over `size` outcomes.
#[derive(Clone, Copy, Debug)]
pub struct UniformLm {
    pub size: usize,
}

impl LanguageModel for UniformLm {
    fn prob(&self, _: &str, _: &str, _: &str) -> f64 {
        1.0 / self.size as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Add-one on the unigram distribution.
    AddOne,
    None,
}

/// Interpolated trigram model `w3 P3 + w2 P2 + w1 P1`. When a history was
/// never observed its weight is spread over the remaining orders in
/// proportion to their weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrigramLm {
    pub weights: (f64, f64, f64),
    pub smoothing: Smoothing,
    vocab: HashSet<String>,
    unigrams: HashMap<String, usize>,
    bigrams: HashMap<(String, String), usize>,
    trigrams: HashMap<(String, String, String), usize>,
    bigram_ctx: HashMap<String, usize>,
    trigram_ctx: HashMap<(String, String), usize>,
    n_tokens: usize,
}

impl TrigramLm {
    pub const DEFAULT_WEIGHTS: (f64, f64, f64) = (0.2, 0.3, 0.5);

    /// Weights are `(unigram, bigram, trigram)`.
    pub fn train(corpus: &[Vec<String>], weights: (f64, f64, f64), smoothing: Smoothing) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("language-model corpus".into()));
        }
        let (w1, w2, w3) = weights;
        if [w1, w2, w3].iter().any(|w| w.is_nan() || *w < 0.0) || ((w1 + w2 + w3) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("interpolation weights must be non-negative and sum to 1".into()));
        }
        let mut lm = Self {
            weights,
            smoothing,
            vocab: HashSet::from([LM_EOS.to_string(), LM_UNK.to_string()]),
            unigrams: HashMap::new(),
            bigrams: HashMap::new(),
            trigrams: HashMap::new(),
            bigram_ctx: HashMap::new(),
            trigram_ctx: HashMap::new(),
            n_tokens: 0,
        };
        for s in corpus {
            lm.vocab.extend(s.iter().cloned());
        }
        for s in corpus {
            let mut h2 = LM_BOS.to_string();
            let mut h1 = LM_BOS.to_string();
            for w in s.iter().cloned().chain([LM_EOS.to_string()]) {
                *lm.unigrams.entry(w.clone()).or_insert(0) += 1;
                *lm.bigrams.entry((h1.clone(), w.clone())).or_insert(0) += 1;
                *lm.trigrams.entry((h2.clone(), h1.clone(), w.clone())).or_insert(0) += 1;
                *lm.bigram_ctx.entry(h1.clone()).or_insert(0) += 1;
                *lm.trigram_ctx.entry((h2.clone(), h1.clone())).or_insert(0) += 1;
                lm.n_tokens += 1;
                h2 = std::mem::replace(&mut h1, w);
            }
        }
        Ok(lm)
    }

    /// Words scored by the model: training words, the end marker and `<unk>`.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn map<'a>(&self, w: &'a str) -> &'a str {
        if w == LM_BOS || self.vocab.contains(w) {
            w
        } else {
            LM_UNK
        }
    }

    pub fn unigram(&self, word: &str) -> f64 {
        let c = self.unigrams.get(self.map(word)).copied().unwrap_or(0) as f64;
        match self.smoothing {
            Smoothing::AddOne => (c + 1.0) / (self.n_tokens + self.vocab_size()) as f64,
            Smoothing::None => c / self.n_tokens as f64,
        }
    }
}

impl LanguageModel for TrigramLm {
    fn prob(&self, h2: &str, h1: &str, word: &str) -> f64 {
        let (h2, h1, w) = (self.map(h2), self.map(h1), self.map(word));
        let (w1, w2, w3) = self.weights;
        let mut num = w1 * self.unigram(w);
        let mut den = w1;
        if let Some(ctx) = self.bigram_ctx.get(h1) {
            let c = self.bigrams.get(&(h1.to_string(), w.to_string())).copied().unwrap_or(0);
            num += w2 * c as f64 / *ctx as f64;
            den += w2;
        }
        if let Some(ctx) = self.trigram_ctx.get(&(h2.to_string(), h1.to_string())) {
            let c = self
                .trigrams
                .get(&(h2.to_string(), h1.to_string(), w.to_string()))
                .copied()
                .unwrap_or(0);
            num += w3 * c as f64 / *ctx as f64;
            den += w3;
        }
        if den == 0.0 {
            return self.unigram(w);
        }
        num / den
    }
}

/// `exp` of the mean negative log-likelihood per token, end markers included.
pub fn perplexity(lm: &impl LanguageModel, captions: &[Vec<String>]) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::Empty("perplexity corpus".into()));
    }
    let tokens: usize = captions.iter().map(|c| c.len() + 1).sum();
    let log_prob: f64 = captions.iter().map(|c| lm.sentence_log_prob(c)).sum();
    Ok((-log_prob / tokens as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalClassifierConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for EvalClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            l2: 1e-3,
        }
    }
}

/// One binary bag-of-words logistic regression per style (style vs. rest).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStyleClassifier {
    pub styles: Vec<String>,
    words: Vec<String>,
    /// Per style: one weight per word, bias last.
    weights: Vec<Vec<f64>>,
}

impl EvalStyleClassifier {
    /// Full-batch gradient descent on L2-regularized logistic loss over
    /// binary word-presence features.
    pub fn train(captions: &[(Vec<String>, String)], cfg: &EvalClassifierConfig) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Empty("classifier training set".into()));
        }
        let mut styles: Vec<String> = captions.iter().map(|(_, s)| s.clone()).collect();
        styles.sort();
        styles.dedup();
        let mut words: Vec<String> = captions.iter().flat_map(|(t, _)| t.iter().cloned()).collect();
        words.sort();
        words.dedup();
        let mut clf = Self {
            styles,
            words,
            weights: Vec::new(),
        };
        let feats: Vec<Vec<usize>> = captions.iter().map(|(t, _)| clf.features(t)).collect();
        let d = clf.words.len();
        let n = captions.len() as f64;
        for style in &clf.styles {
            let y: Vec<f64> = captions.iter().map(|(_, s)| if s == style { 1.0 } else { 0.0 }).collect();
            let mut w = vec![0.0; d + 1];
            for _ in 0..cfg.epochs {
                let mut g = vec![0.0; d + 1];
                for (f, yi) in feats.iter().zip(&y) {
                    let err = crate::autodiff::sigmoid(score(&w, f)) - yi;
                    for j in f {
                        g[*j] += err;
                    }
                    g[d] += err;
                }
                for j in 0..=d {
                    let reg = if j < d { cfg.l2 * w[j] } else { 0.0 };
                    w[j] -= cfg.lr * (g[j] / n + reg);
                }
            }
            clf.weights.push(w);
        }
        Ok(clf)
    }

    fn features(&self, tokens: &[String]) -> Vec<usize> {
        let mut f: Vec<usize> = tokens
            .iter()
            .filter_map(|t| self.words.binary_search(t).ok())
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    /// Probability from the binary classifier of `style`.
    pub fn prob(&self, tokens: &[String], style: &str) -> Result<f64> {
        let k = self
            .styles
            .iter()
            .position(|s| s == style)
            .ok_or_else(|| Error::InvalidArgument(format!("classifier has no style {style:?}")))?;
        Ok(crate::autodiff::sigmoid(score(&self.weights[k], &self.features(tokens))))
    }

    pub fn fires(&self, tokens: &[String], style: &str) -> Result<bool> {
        Ok(self.prob(tokens, style)? >= 0.5)
    }
}

fn score(w: &[f64], feats: &[usize]) -> f64 {
    w[w.len() - 1] + feats.iter().map(|j| w[*j]).sum::<f64>()
}

/// Fraction of captions for which the intended style's classifier fires.
pub fn cls_accuracy(captions: &[(Vec<String>, String)], clf: &EvalStyleClassifier) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::Empty("captions".into()));
    }
    let mut hits = 0usize;
    for (tokens, style) in captions {
        if clf.fires(tokens, style)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / captions.len() as f64)
}

/// Number of distinct phrases; equality is exact token-sequence match.
pub fn distinct_count(phrases: &[Vec<String>]) -> usize {
    phrases.iter().collect::<HashSet<_>>().len()
}

pub fn distinct_ratio(phrases: &[Vec<String>]) -> Result<f64> {
    if phrases.is_empty() {
        return Err(Error::Empty("phrase set".into()));
    }
    Ok(distinct_count(phrases) as f64 / phrases.len() as f64)
}

/// Entropy in bits of the word-frequency distribution over all phrase tokens.
pub fn word_entropy(phrases: &[Vec<String>]) -> Result<f64> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in phrases.iter().flatten() {
        *counts.entry(w).or_insert(0) += 1;
    }
    let total: usize = counts.values().sum();
    if total == 0 {
        return Err(Error::Empty("phrase set".into()));
    }
    Ok(counts
        .values()
        .map(|c| {
            let p = *c as f64 / total as f64;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Distinct n-grams over all n-gram occurrences, n-grams taken within each
/// phrase and pooled.
pub fn div_n(phrases: &[Vec<String>], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let mut unique: HashSet<&[String]> = HashSet::new();
    let mut total = 0usize;
    for p in phrases.iter().filter(|p| p.len() >= n) {
        for w in p.windows(n) {
            unique.insert(w);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Empty(format!("no phrase has {n} tokens")));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Scenes with fewer samples than this are excluded from the report.
pub const MIN_SCENE_SAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene: String,
    pub samples: usize,
    /// `None` when the scene has too few samples.
    pub scores: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub rows: Vec<SceneRow>,
    /// Mean distinct ratio and word entropy over included scenes.
    pub mean: Option<(f64, f64)>,
}

/// Per-scene distinct ratio and word entropy of the style phrases of the
/// captions mentioning each scene keyword. A caption counts towards every
/// scene it mentions; phrases that come out empty are skipped.
pub fn scene_diversity_report<F>(captions: &[Vec<String>], scenes: &[&str], extract: F) -> SceneReport
where
    F: Fn(&[String]) -> Vec<String>,
{
    let phrases: Vec<Vec<String>> = captions.iter().map(|c| extract(c)).collect();
    let rows: Vec<SceneRow> = scenes
        .iter()
        .map(|scene| {
            let members: Vec<Vec<String>> = captions
                .iter()
                .zip(&phrases)
                .filter(|(c, p)| !p.is_empty() && c.iter().any(|w| w == scene))
                .map(|(_, p)| p.clone())
                .collect();
            let scores = (members.len() >= MIN_SCENE_SAMPLES).then(|| {
                (
                    distinct_ratio(&members).expect("non-empty"),
                    word_entropy(&members).expect("non-empty"),
                )
            });
            SceneRow {
                scene: scene.to_string(),
                samples: members.len(),
                scores,
            }
        })
        .collect();
    let included: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.scores).collect();
    let mean = (!included.is_empty()).then(|| {
        let k = included.len() as f64;
        (
            included.iter().map(|s| s.0).sum::<f64>() / k,
            included.iter().map(|s| s.1).sum::<f64>() / k,
        )
    });
    SceneReport { rows, mean }
}
