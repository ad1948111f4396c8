//! Attention-based style classifier.
//!
//! One network serves two read-outs: its attention weights measure how much
//! each word carries the caption's style (used to cut style phrases out of
//! training captions), and its softmax output scores the style strength of
//! generated captions for the recheck filter.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax, softmax, ParamId, ParamStore, Tape, Var};
use crate::corpus::{StyleLabel, StyledCaption, WordVocabulary, UNK};
use crate::error::{Error, Result};
use crate::nn::{Adam, Embedding, Linear, Lstm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnClassifierConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub attn_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AttnClassifierConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            hidden: 512,
            attn_dim: 128,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Words of a caption selected by attention, in caption order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StylePhrase {
    pub words: Vec<String>,
}

impl StylePhrase {
    pub fn empty() -> Self {
        Self { words: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleScore {
    pub value: f64,
    pub style: StyleLabel,
}

/// Embedding, single-layer LSTM, additive attention and a K-way output layer.
///
/// Attention scores are `v . tanh(W e_t + b)` over the word embeddings
/// `e_t`; the pooled vector is the attention-weighted sum of LSTM states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnStyleClassifier {
    pub store: ParamStore,
    pub vocab: WordVocabulary,
    pub n_styles: usize,
    embedding: Embedding,
    lstm: Lstm,
    attn: Linear,
    attn_v: ParamId,
    out: Linear,
}

struct Forward {
    weights: Vec<f64>,
    logits: Var,
}

impl AttnStyleClassifier {
    pub fn new(vocab: WordVocabulary, n_styles: usize, cfg: &AttnClassifierConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let embedding = Embedding::new(&mut store, "clf.embedding", "clf", vocab.len(), cfg.embed_dim, &mut rng);
        let lstm = Lstm::new(&mut store, "clf.lstm", "clf", cfg.embed_dim, cfg.hidden, &mut rng);
        let attn = Linear::new(&mut store, "clf.attn", "clf", cfg.embed_dim, cfg.attn_dim, &mut rng);
        let bound = 1.0 / (cfg.attn_dim as f64).sqrt();
        let attn_v = store.uniform("clf.attn_v", "clf", cfg.attn_dim, 1, bound, &mut rng);
        let out = Linear::new(&mut store, "clf.out", "clf", cfg.hidden, n_styles, &mut rng);
        Self {
            store,
            vocab,
            n_styles,
            embedding,
            lstm,
            attn,
            attn_v,
            out,
        }
    }

    fn ids(&self, tokens: &[String]) -> Vec<usize> {
        if tokens.is_empty() {
            vec![UNK]
        } else {
            self.vocab.encode(tokens)
        }
    }

    fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Forward {
        let embs: Vec<Var> = ids.iter().map(|i| self.embedding.lookup(tape, *i)).collect();
        let states = self.lstm.run(tape, &embs);
        let v = tape.param(self.attn_v);
        let scores: Vec<Var> = embs
            .iter()
            .map(|e| {
                let k = self.attn.forward(tape, *e);
                let k = tape.tanh(k);
                tape.dot(v, k)
            })
            .collect();
        let scores = tape.concat(&scores);
        let log_w = tape.log_softmax(scores);
        let alpha = tape.exp(log_w);
        let weighted: Vec<Var> = states
            .iter()
            .enumerate()
            .map(|(t, h)| {
                let a = tape.pick(alpha, t);
                tape.scale_by(*h, a)
            })
            .collect();
        let context = tape.add_all(&weighted);
        let logits = self.out.forward(tape, context);
        Forward {
            weights: tape.value(alpha).to_vec(),
            logits,
        }
    }

    pub fn logits(&self, tokens: &[String]) -> Vec<f64> {
        let mut tape = Tape::new(&self.store);
        let f = self.forward(&mut tape, &self.ids(tokens));
        tape.value(f.logits).to_vec()
    }

    /// Softmax distribution over all styles.
    pub fn style_probs(&self, tokens: &[String]) -> Vec<f64> {
        softmax(&self.logits(tokens))
    }

    pub fn predict(&self, tokens: &[String]) -> usize {
        argmax(&self.logits(tokens))
    }

    /// Per-token attention weights; they sum to one.
    pub fn style_intensity(&self, tokens: &[String]) -> Vec<f64> {
        let mut tape = Tape::new(&self.store);
        self.forward(&mut tape, &self.ids(tokens)).weights
    }

    /// Probability the discriminator assigns to `target` for these tokens.
    pub fn style_strength(&self, tokens: &[String], target: &StyleLabel) -> StyleScore {
        let probs = self.style_probs(tokens);
        StyleScore {
            value: probs.get(target.id).copied().unwrap_or(0.0),
            style: target.clone(),
        }
    }

    /// Top-intensity words of a stylized caption; factual captions give the
    /// empty phrase.
    pub fn extract_style_phrase(&self, caption: &StyledCaption, ratio: f64) -> Result<StylePhrase> {
        check_ratio(ratio)?;
        if caption.style.is_factual() {
            return Ok(StylePhrase::empty());
        }
        Ok(self.phrase_of(&caption.tokens, ratio))
    }

    /// Attention-selected phrase regardless of style label.
    pub fn phrase_of(&self, tokens: &[String], ratio: f64) -> StylePhrase {
        if tokens.is_empty() {
            return StylePhrase::empty();
        }
        let weights = self.style_intensity(tokens);
        let keep = select_top(&weights, ratio);
        StylePhrase {
            words: keep.into_iter().map(|i| tokens[i].clone()).collect(),
        }
    }

    pub fn accuracy(&self, captions: &[StyledCaption]) -> f64 {
        if captions.is_empty() {
            return 0.0;
        }
        let hits = captions
            .iter()
            .filter(|c| self.predict(&c.tokens) == c.style.id)
            .count();
        hits as f64 / captions.len() as f64
    }

    fn loss(&self, tape: &mut Tape, caption: &StyledCaption) -> Var {
        let f = self.forward(tape, &self.ids(&caption.tokens));
        let ls = tape.log_softmax(f.logits);
        let p = tape.pick(ls, caption.style.id);
        tape.neg(p)
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "phrase ratio must lie in (0, 1], got {ratio}"
        )));
    }
    Ok(())
}

/// Positions of the `ceil(ratio * len)` largest weights, ties to the earlier
/// position, returned in ascending order.
pub fn select_top(weights: &[f64], ratio: f64) -> Vec<usize> {
    let k = ((ratio * weights.len() as f64).ceil() as usize).clamp(1, weights.len().max(1));
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|a, b| weights[*b].total_cmp(&weights[*a]).then(a.cmp(b)));
    let mut keep: Vec<usize> = order.into_iter().take(k.min(weights.len())).collect();
    keep.sort_unstable();
    keep
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
        .0
}

/// Trains the classifier with Adam on per-caption cross-entropy.
pub fn train_attn_classifier(
    captions: &[StyledCaption],
    vocab: &WordVocabulary,
    n_styles: usize,
    cfg: &AttnClassifierConfig,
) -> Result<AttnStyleClassifier> {
    let mut present: Vec<usize> = captions.iter().map(|c| c.style.id).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(Error::InvalidArgument(
            "style classifier needs captions from at least two styles".into(),
        ));
    }
    if let Some(bad) = present.iter().find(|id| **id >= n_styles) {
        return Err(Error::InvalidArgument(format!("style id {bad} outside 0..{n_styles}")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut model = AttnStyleClassifier::new(vocab.clone(), n_styles, cfg);
    let mut adam = Adam::new(&model.store, cfg.lr).with_clip_norm(Some(5.0));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..captions.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let grads = {
                let mut tape = Tape::new(&model.store);
                let losses: Vec<Var> = chunk.iter().map(|i| model.loss(&mut tape, &captions[*i])).collect();
                let total = tape.mean_of(&losses);
                let value = tape.scalar_value(total);
                if !value.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: "style classifier loss is not finite".into(),
                    });
                }
                tape.backward(total)
            };
            adam.step(&mut model.store, &grads);
        }
    }
    Ok(model)
}

/// Log-probability the classifier assigns to the caption's own style.
pub fn log_likelihood(model: &AttnStyleClassifier, caption: &StyledCaption) -> f64 {
    log_softmax(&model.logits(&caption.tokens))[caption.style.id]
}
