//! Projection of image features and object-word sets into the shared
//! multimodal space, and the contrastive objective that aligns them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::corpus::{WordVocabulary, UNK};
use crate::error::{Error, Result};
use crate::nn::{Embedding, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Image,
    ObjectWords,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedFeature {
    pub vector: Vec<f64>,
    pub source: FeatureSource,
}

impl AlignedFeature {
    pub fn new(vector: Vec<f64>, source: FeatureSource) -> Result<Self> {
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("aligned feature has non-finite entries".into()));
        }
        Ok(Self { vector, source })
    }
}

/// Trainable projection of a precomputed CNN feature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoder {
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dim: usize,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::new(store, "image_encoder", "E_I", feature_dim, embed_dim, rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.proj.input
    }

    fn check(&self, feature: &[f64]) -> Result<()> {
        if feature.len() != self.proj.input {
            return Err(Error::Dimension {
                expected: self.proj.input,
                got: feature.len(),
            });
        }
        if feature.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image feature has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, feature: &[f64]) -> Result<Var> {
        self.check(feature)?;
        let x = tape.constant(feature.to_vec());
        Ok(self.proj.forward(tape, x))
    }

    pub fn encode(&self, store: &ParamStore, feature: &[f64]) -> Result<AlignedFeature> {
        self.check(feature)?;
        AlignedFeature::new(self.proj.apply(store, feature), FeatureSource::Image)
    }
}

/// Mean of object-word embeddings followed by a linear map. The embedding
/// table may be the decoder's caption embedding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEncoder {
    pub embedding: Embedding,
    pub proj: Linear,
}

impl ObjectEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        embedding: Embedding,
        embed_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            embedding,
            proj: Linear::new(store, "object_encoder", "E_O", embedding.dim, embed_dim, rng),
        }
    }

    /// `word_ids` may be empty, in which case the unknown-token embedding is used.
    pub fn forward(&self, tape: &mut Tape, word_ids: &[usize]) -> Var {
        let ids: &[usize] = if word_ids.is_empty() { &[UNK] } else { word_ids };
        let rows: Vec<Var> = ids.iter().map(|i| self.embedding.lookup(tape, *i)).collect();
        let mean = tape.mean_of(&rows);
        self.proj.forward(tape, mean)
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        vocab: &WordVocabulary,
        words: &[String],
    ) -> Result<AlignedFeature> {
        let ids = vocab.encode(words);
        let mut tape = Tape::new(store);
        let out = self.forward(&mut tape, &ids);
        AlignedFeature::new(tape.value(out).to_vec(), FeatureSource::ObjectWords)
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

fn unit(tape: &mut Tape, v: Var) -> Result<Var> {
    let sq = tape.dot(v, v);
    if tape.scalar_value(sq) == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let norm = tape.sqrt(sq);
    let one = tape.scalar(1.0);
    let inv = tape.div(one, norm);
    Ok(tape.scale_by(v, inv))
}

/// Symmetric in-batch InfoNCE over cosine similarities at temperature `tau`.
///
/// Row `i` of the similarity matrix scores image `i` against every object
/// feature in the batch; the loss averages the image-to-object and
/// object-to-image cross-entropies with the diagonal as targets.
pub fn contrastive_loss_on_tape(
    tape: &mut Tape,
    images: &[Var],
    objects: &[Var],
    tau: f64,
) -> Result<Var> {
    let n = images.len();
    if n == 0 || objects.len() != n {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs matched non-empty batches, got {} images and {} object sets",
            n,
            objects.len()
        )));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument("temperature must be positive".into()));
    }
    let img: Vec<Var> = images.iter().map(|v| unit(tape, *v)).collect::<Result<_>>()?;
    let obj: Vec<Var> = objects.iter().map(|v| unit(tape, *v)).collect::<Result<_>>()?;

    let sims: Vec<Vec<Var>> = img
        .iter()
        .map(|a| obj.iter().map(|b| tape.dot(*a, *b)).collect())
        .collect();
    Ok(info_nce_from_similarities(tape, &sims, tau))
}

/// Symmetric InfoNCE given the `n x n` cosine matrix (row = image, column = object).
fn info_nce_from_similarities(tape: &mut Tape, sims: &[Vec<Var>], tau: f64) -> Var {
    let n = sims.len();
    let scaled: Vec<Vec<Var>> = sims
        .iter()
        .map(|row| row.iter().map(|s| tape.scale(*s, 1.0 / tau)).collect())
        .collect();
    let mut terms = Vec::with_capacity(2 * n);
    for (i, row) in scaled.iter().enumerate() {
        let row = tape.concat(row);
        let ls = tape.log_softmax(row);
        terms.push(tape.pick(ls, i));
        let col: Vec<Var> = (0..n).map(|j| scaled[j][i]).collect();
        let col = tape.concat(&col);
        let ls = tape.log_softmax(col);
        terms.push(tape.pick(ls, i));
    }
    let total = tape.add_all(&terms);
    tape.scale(total, -1.0 / (2 * n) as f64)
}

/// The contrastive objective as a function of a precomputed similarity matrix.
pub fn contrastive_loss_from_similarities(sims: &[Vec<f64>], tau: f64) -> Result<f64> {
    let n = sims.len();
    if n == 0 || sims.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidArgument("similarity matrix must be square and non-empty".into()));
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let vars: Vec<Vec<Var>> = sims
        .iter()
        .map(|row| row.iter().map(|s| tape.scalar(*s)).collect())
        .collect();
    let loss = info_nce_from_similarities(&mut tape, &vars, tau);
    Ok(tape.scalar_value(loss))
}

/// Evaluates [`contrastive_loss_on_tape`] on fixed features.
pub fn contrastive_loss(
    image_feats: &[AlignedFeature],
    object_feats: &[AlignedFeature],
    tau: f64,
) -> Result<f64> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let images: Vec<Var> = image_feats
        .iter()
        .map(|f| tape.constant(f.vector.clone()))
        .collect();
    let objects: Vec<Var> = object_feats
        .iter()
        .map(|f| tape.constant(f.vector.clone()))
        .collect();
    let loss = contrastive_loss_on_tape(&mut tape, &images, &objects, tau)?;
    Ok(tape.scalar_value(loss))
}
