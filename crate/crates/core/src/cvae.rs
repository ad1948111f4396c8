//! Conditional VAE over style phrases.
//!
//! The caption encoder maps a style phrase to a diagonal Gaussian posterior.
//! The prior is `N(mu_k, I)` with `mu_k` a linear function of the aligned
//! image or object-word feature. The decoder LSTM consumes the feature, the
//! style embedding and the projected latent as its first three inputs, then
//! `<bos>` and the caption tokens. A softmax-regression classifier on the
//! latent partitions the space by style.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{log_softmax, ParamStore, Tape, Var};
use crate::config::{RunConfig, UnpairedMode};
use crate::corpus::{BOS, EOS};
use crate::embed::{contrastive_loss_on_tape, AlignedFeature, FeatureSource, ImageEncoder, ObjectEncoder};
use crate::error::{Error, Result};
use crate::nn::{Embedding, Linear, Lstm, LstmState};
use crate::phrase::argmax;

/// Bound applied to encoder log-variances.
pub const LOG_VAR_LIMIT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub n_styles: usize,
    pub share_embeddings: bool,
}

impl ModelDims {
    pub fn from_config(cfg: &RunConfig, vocab_size: usize, n_styles: usize) -> Self {
        Self {
            feature_dim: cfg.feature_dim,
            embed_dim: cfg.embed_dim,
            hidden: cfg.hidden,
            latent_dim: cfg.latent_dim,
            vocab_size,
            n_styles,
            share_embeddings: cfg.share_embeddings,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianParams {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn unit(mean: Vec<f64>) -> Self {
        let log_var = vec![0.0; mean.len()];
        Self { mean, log_var }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentOrigin {
    Posterior,
    Prior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSample {
    pub z: Vec<f64>,
    pub origin: LatentOrigin,
}

/// `z = mean + exp(log_var / 2) * noise`.
pub fn reparameterize(g: &GaussianParams, noise: &[f64], origin: LatentOrigin) -> Result<LatentSample> {
    if noise.len() != g.dim() || g.log_var.len() != g.dim() {
        return Err(Error::Dimension {
            expected: g.dim(),
            got: noise.len(),
        });
    }
    let z = g
        .mean
        .iter()
        .zip(&g.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (lv / 2.0).exp() * e)
        .collect();
    Ok(LatentSample { z, origin })
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn sample_latent<R: Rng + ?Sized>(g: &GaussianParams, origin: LatentOrigin, rng: &mut R) -> LatentSample {
    let noise = standard_normal(rng, g.dim());
    reparameterize(g, &noise, origin).expect("noise sized to match")
}

/// Closed-form KL from a diagonal Gaussian posterior to a unit-variance prior.
pub fn kl_divergence(posterior: &GaussianParams, prior: &GaussianParams) -> Result<f64> {
    if prior.log_var.iter().any(|v| *v != 0.0) {
        return Err(Error::InvalidArgument("prior must have unit variance".into()));
    }
    if posterior.dim() != prior.dim() {
        return Err(Error::Dimension {
            expected: prior.dim(),
            got: posterior.dim(),
        });
    }
    Ok(posterior
        .mean
        .iter()
        .zip(&posterior.log_var)
        .zip(&prior.mean)
        .map(|((mq, lv), mp)| -0.5 * lv + 0.5 * (lv.exp() + (mq - mp).powi(2)) - 0.5)
        .sum())
}

fn kl_on_tape(tape: &mut Tape, mean: Var, log_var: Var, prior_mean: Var) -> Var {
    let var = tape.exp(log_var);
    let diff = tape.sub(mean, prior_mean);
    let sq = tape.mul(diff, diff);
    let a = tape.add(var, sq);
    let a = tape.sub(a, log_var);
    let s = tape.sum(a);
    let n = tape.value(mean).len() as f64;
    let half = tape.scale(s, 0.5);
    let offset = tape.scalar(-0.5 * n);
    tape.add(half, offset)
}

/// Negative summed log-probability of `target` followed by `<eos>`.
pub fn cross_entropy_loss(logps: &[Vec<f64>], target: &[usize]) -> Result<f64> {
    if logps.len() != target.len() + 1 {
        return Err(Error::Dimension {
            expected: target.len() + 1,
            got: logps.len(),
        });
    }
    let mut total = 0.0;
    for (step, tok) in logps.iter().zip(target.iter().chain([&EOS])) {
        let lp = step.get(*tok).ok_or(Error::Dimension {
            expected: *tok + 1,
            got: step.len(),
        })?;
        total -= lp;
    }
    Ok(total)
}

/// Caption encoder: phrase embedding, LSTM, and linear heads for the
/// posterior mean and log-variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionEncoder {
    pub embedding: Embedding,
    pub lstm: Lstm,
    pub mean: Linear,
    pub log_var: Linear,
}

impl CaptionEncoder {
    /// Encodes `<bos> phrase <eos>`; returns `(mean, clamped log_var)`.
    pub fn forward(&self, tape: &mut Tape, phrase: &[usize]) -> (Var, Var) {
        let ids: Vec<usize> = std::iter::once(BOS)
            .chain(phrase.iter().copied())
            .chain(std::iter::once(EOS))
            .collect();
        let inputs: Vec<Var> = ids.iter().map(|i| self.embedding.lookup(tape, *i)).collect();
        let states = self.lstm.run(tape, &inputs);
        let last = *states.last().expect("at least bos and eos");
        let mean = self.mean.forward(tape, last);
        let lv = self.log_var.forward(tape, last);
        let lv = tape.clamp(lv, -LOG_VAR_LIMIT, LOG_VAR_LIMIT);
        (mean, lv)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionDecoder {
    pub embedding: Embedding,
    pub style_embedding: Embedding,
    pub latent_proj: Linear,
    pub lstm: Lstm,
    pub out: Linear,
}

impl CaptionDecoder {
    /// Feeds the three conditioning inputs and returns the resulting state.
    pub fn condition(&self, tape: &mut Tape, feature: Var, style: usize, z: Var) -> LstmState {
        let mut state = self.lstm.zero_state(tape);
        state = self.lstm.step(tape, feature, state);
        let s = self.style_embedding.lookup(tape, style);
        state = self.lstm.step(tape, s, state);
        let zp = self.latent_proj.forward(tape, z);
        self.lstm.step(tape, zp, state)
    }

    /// Consumes `token` and returns the new state with next-token log-probs.
    pub fn step(&self, tape: &mut Tape, token: usize, state: LstmState) -> (LstmState, Var) {
        let x = self.embedding.lookup(tape, token);
        let state = self.lstm.step(tape, x, state);
        let logits = self.out.forward(tape, state.h);
        (state, tape.log_softmax(logits))
    }

    /// Log-probabilities for `target` and the closing `<eos>`; the step
    /// consuming `<bos>` predicts the first word.
    pub fn teacher_forced(&self, tape: &mut Tape, feature: Var, style: usize, z: Var, target: &[usize]) -> Vec<Var> {
        let mut state = self.condition(tape, feature, style, z);
        let mut out = Vec::with_capacity(target.len() + 1);
        for tok in std::iter::once(BOS).chain(target.iter().copied()) {
            let (s, lp) = self.step(tape, tok, state);
            state = s;
            out.push(lp);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorNet {
    pub proj: Linear,
}

/// Softmax regression from the latent to style logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStyleClassifier {
    pub proj: Linear,
}

impl LatentStyleClassifier {
    pub fn logits(&self, store: &ParamStore, z: &[f64]) -> Vec<f64> {
        self.proj.apply(store, z)
    }

    pub fn probs(&self, store: &ParamStore, z: &[f64]) -> Vec<f64> {
        crate::autodiff::softmax(&self.logits(store, z))
    }

    pub fn predict(&self, store: &ParamStore, z: &[f64]) -> usize {
        argmax(&self.logits(store, z))
    }

    /// `-log softmax(W z + b)[style]`.
    pub fn loss(&self, store: &ParamStore, z: &[f64], style: usize) -> f64 {
        -log_softmax(&self.logits(store, z))[style]
    }

    fn loss_on_tape(&self, tape: &mut Tape, z: Var, style: usize) -> Var {
        let logits = self.proj.forward(tape, z);
        let ls = tape.log_softmax(logits);
        let p = tape.pick(ls, style);
        tape.neg(p)
    }
}

/// One training caption, already mapped to vocabulary indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainExample {
    /// Present for paired factual samples.
    pub image: Option<Vec<f64>>,
    pub object_ids: Vec<usize>,
    pub style: usize,
    pub target: Vec<usize>,
    pub phrase: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cont: f64,
    pub ce: f64,
    pub kl: f64,
    pub style: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cont: 0.1,
            ce: 1.0,
            kl: 0.02,
            style: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub tau: f64,
    pub contrastive: bool,
}

impl LossSettings {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            weights: LossWeights {
                cont: cfg.lambda_cont,
                ce: cfg.lambda_ce,
                kl: cfg.lambda_kl,
                style: cfg.lambda_style,
            },
            tau: cfg.tau,
            contrastive: cfg.unpaired_mode == UnpairedMode::Contrastive,
        }
    }
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            tau: 0.1,
            contrastive: true,
        }
    }
}

/// Weighted total and its unweighted terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cont: f64,
    pub ce: f64,
    pub kl: f64,
    pub style: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.cont, self.ce, self.kl, self.style]
            .iter()
            .all(|v| v.is_finite())
    }

    pub(crate) fn add_scaled(&mut self, other: &LossBreakdown, w: f64) {
        self.total += w * other.total;
        self.cont += w * other.cont;
        self.ce += w * other.ce;
        self.kl += w * other.kl;
        self.style += w * other.style;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaeModel {
    pub dims: ModelDims,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub objects: ObjectEncoder,
    pub encoder: CaptionEncoder,
    pub decoder: CaptionDecoder,
    pub prior: PriorNet,
    pub classifier: LatentStyleClassifier,
}

impl CvaeModel {
    /// Embeddings start uniform in `[-0.1, 0.1]`; affine and recurrent
    /// weights use `±1/sqrt(fan)` bounds.
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = &dims;
        let image = ImageEncoder::new(&mut store, d.feature_dim, d.embed_dim, &mut rng);
        let word_emb = Embedding::new(&mut store, "W_D", "W_D", d.vocab_size, d.embed_dim, &mut rng);
        let obj_emb = if d.share_embeddings {
            word_emb
        } else {
            Embedding::new(&mut store, "object_embedding", "E_O", d.vocab_size, d.embed_dim, &mut rng)
        };
        let objects = ObjectEncoder::new(&mut store, obj_emb, d.embed_dim, &mut rng);
        let encoder = CaptionEncoder {
            embedding: Embedding::new(&mut store, "W_E", "W_E", d.vocab_size, d.embed_dim, &mut rng),
            lstm: Lstm::new(&mut store, "encoder.lstm", "E_C", d.embed_dim, d.hidden, &mut rng),
            mean: Linear::new(&mut store, "encoder.mean", "E_C", d.hidden, d.latent_dim, &mut rng),
            log_var: Linear::new(&mut store, "encoder.log_var", "E_C", d.hidden, d.latent_dim, &mut rng),
        };
        let decoder = CaptionDecoder {
            embedding: word_emb,
            style_embedding: Embedding::new(&mut store, "W_S", "W_S", d.n_styles, d.embed_dim, &mut rng),
            latent_proj: Linear::new(&mut store, "decoder.latent_proj", "D_C", d.latent_dim, d.embed_dim, &mut rng),
            lstm: Lstm::new(&mut store, "decoder.lstm", "D_C", d.embed_dim, d.hidden, &mut rng),
            out: Linear::new(&mut store, "decoder.out", "D_C", d.hidden, d.vocab_size, &mut rng),
        };
        let prior = PriorNet {
            proj: Linear::new(&mut store, "prior", "prior", d.embed_dim, d.latent_dim, &mut rng),
        };
        let classifier = LatentStyleClassifier {
            proj: Linear::new(&mut store, "C_S", "C_S", d.latent_dim, d.n_styles, &mut rng),
        };
        Self {
            dims,
            store,
            image,
            objects,
            encoder,
            decoder,
            prior,
            classifier,
        }
    }

    pub fn encode_image(&self, feature: &[f64]) -> Result<AlignedFeature> {
        self.image.encode(&self.store, feature)
    }

    pub fn encode_object_ids(&self, ids: &[usize]) -> AlignedFeature {
        let mut tape = Tape::new(&self.store);
        let v = self.objects.forward(&mut tape, ids);
        AlignedFeature {
            vector: tape.value(v).to_vec(),
            source: FeatureSource::ObjectWords,
        }
    }

    /// Posterior parameters for a phrase given as vocabulary indices.
    pub fn encode_posterior(&self, phrase: &[usize]) -> GaussianParams {
        let mut tape = Tape::new(&self.store);
        let (m, lv) = self.encoder.forward(&mut tape, phrase);
        GaussianParams {
            mean: tape.value(m).to_vec(),
            log_var: tape.value(lv).to_vec(),
        }
    }

    /// Unit-variance prior centred on a linear map of the feature.
    pub fn prior_mean(&self, feature: &AlignedFeature) -> Result<GaussianParams> {
        if feature.vector.len() != self.dims.embed_dim {
            return Err(Error::Dimension {
                expected: self.dims.embed_dim,
                got: feature.vector.len(),
            });
        }
        Ok(GaussianParams::unit(self.prior.proj.apply(&self.store, &feature.vector)))
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dims.latent_dim {
            return Err(Error::Dimension {
                expected: self.dims.latent_dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    fn check_style(&self, style: usize) -> Result<()> {
        if style >= self.dims.n_styles {
            return Err(Error::InvalidArgument(format!(
                "style id {style} outside 0..{}",
                self.dims.n_styles
            )));
        }
        Ok(())
    }

    /// Per-step vocabulary log-probabilities, one row per target token plus `<eos>`.
    pub fn decode_teacher_forced(
        &self,
        feature: &AlignedFeature,
        style: usize,
        z: &LatentSample,
        target: &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        self.check_latent(&z.z)?;
        self.check_style(style)?;
        if feature.vector.len() != self.dims.embed_dim {
            return Err(Error::Dimension {
                expected: self.dims.embed_dim,
                got: feature.vector.len(),
            });
        }
        let mut tape = Tape::new(&self.store);
        let f = tape.constant(feature.vector.clone());
        let zv = tape.constant(z.z.clone());
        let steps = self.decoder.teacher_forced(&mut tape, f, style, zv, target);
        Ok(steps.iter().map(|v| tape.value(*v).to_vec()).collect())
    }

    pub fn style_classifier_loss(&self, z: &LatentSample, style: usize) -> Result<f64> {
        self.check_latent(&z.z)?;
        self.check_style(style)?;
        Ok(self.classifier.loss(&self.store, &z.z, style))
    }

    /// Aligned feature used for conditioning: the image route for paired
    /// examples, the object-word route otherwise.
    pub fn condition_feature(&self, ex: &TrainExample) -> Result<AlignedFeature> {
        match &ex.image {
            Some(f) => self.encode_image(f),
            None => Ok(self.encode_object_ids(&ex.object_ids)),
        }
    }

    /// Records the weighted objective for one homogeneous batch.
    ///
    /// Cross-entropy is summed over tokens; every term is averaged over the
    /// batch. The contrastive term is active only for paired batches of at
    /// least two examples.
    pub fn batch_loss_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        batch: &[&TrainExample],
        settings: &LossSettings,
        rng: &mut R,
    ) -> Result<(Var, LossBreakdown)> {
        if batch.is_empty() {
            return Err(Error::Empty("batch".into()));
        }
        let paired = batch.iter().all(|e| e.image.is_some());
        if !paired && batch.iter().any(|e| e.image.is_some()) {
            return Err(Error::InvalidArgument("batch mixes paired and unpaired examples".into()));
        }
        let b = batch.len() as f64;
        let mut features = Vec::with_capacity(batch.len());
        for ex in batch {
            self.check_style(ex.style)?;
            let f = match &ex.image {
                Some(img) => self.image.forward(tape, img)?,
                None => self.objects.forward(tape, &ex.object_ids),
            };
            features.push(f);
        }

        let cont = if paired && batch.len() >= 2 && settings.contrastive {
            let objs: Vec<Var> = batch.iter().map(|e| self.objects.forward(tape, &e.object_ids)).collect();
            Some(contrastive_loss_on_tape(tape, &features, &objs, settings.tau)?)
        } else {
            None
        };

        let mut ce_terms = Vec::new();
        let mut kl_terms = Vec::new();
        let mut style_terms = Vec::new();
        for (ex, f) in batch.iter().zip(&features) {
            let (mean, lv) = self.encoder.forward(tape, &ex.phrase);
            let noise = tape.constant(standard_normal(rng, self.dims.latent_dim));
            let half = tape.scale(lv, 0.5);
            let std = tape.exp(half);
            let spread = tape.mul(std, noise);
            let z = tape.add(mean, spread);

            let prior = self.prior.proj.forward(tape, *f);
            kl_terms.push(kl_on_tape(tape, mean, lv, prior));

            let steps = self.decoder.teacher_forced(tape, *f, ex.style, z, &ex.target);
            for (lp, tok) in steps.iter().zip(ex.target.iter().chain([&EOS])) {
                ce_terms.push(tape.pick(*lp, *tok));
            }
            style_terms.push(self.classifier.loss_on_tape(tape, z, ex.style));
        }
        let ce_sum = tape.add_all(&ce_terms);
        let ce = tape.scale(ce_sum, -1.0 / b);
        let kl_sum = tape.add_all(&kl_terms);
        let kl = tape.scale(kl_sum, 1.0 / b);
        let st_sum = tape.add_all(&style_terms);
        let style = tape.scale(st_sum, 1.0 / b);

        let w = &settings.weights;
        let mut parts = vec![tape.scale(ce, w.ce), tape.scale(kl, w.kl), tape.scale(style, w.style)];
        if let Some(c) = cont {
            parts.push(tape.scale(c, w.cont));
        }
        let total = tape.add_all(&parts);
        let breakdown = LossBreakdown {
            total: tape.scalar_value(total),
            cont: cont.map(|c| tape.scalar_value(c)).unwrap_or(0.0),
            ce: tape.scalar_value(ce),
            kl: tape.scalar_value(kl),
            style: tape.scalar_value(style),
        };
        Ok((total, breakdown))
    }

    /// Evaluates the batch objective without keeping gradients.
    pub fn total_loss<R: Rng + ?Sized>(
        &self,
        batch: &[&TrainExample],
        settings: &LossSettings,
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new(&self.store);
        Ok(self.batch_loss_on_tape(&mut tape, batch, settings, rng)?.1)
    }

    /// Fraction of target tokens (and closing `<eos>`) that are the argmax of
    /// the teacher-forced distribution, with `z` at the posterior mean.
    pub fn teacher_forced_accuracy(&self, examples: &[TrainExample]) -> Result<f64> {
        let mut hits = 0usize;
        let mut total = 0usize;
        for ex in examples {
            let feature = self.condition_feature(ex)?;
            let post = self.encode_posterior(&ex.phrase);
            let z = LatentSample {
                z: post.mean,
                origin: LatentOrigin::Posterior,
            };
            let steps = self.decode_teacher_forced(&feature, ex.style, &z, &ex.target)?;
            for (lp, tok) in steps.iter().zip(ex.target.iter().chain([&EOS])) {
                total += 1;
                if argmax(lp) == *tok {
                    hits += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::Empty("no target tokens".into()));
        }
        Ok(hits as f64 / total as f64)
    }

    /// Mean closed-form KL between posterior and prior over the examples.
    pub fn mean_kl(&self, examples: &[TrainExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("no examples".into()));
        }
        let mut sum = 0.0;
        for ex in examples {
            let prior = self.prior_mean(&self.condition_feature(ex)?)?;
            sum += kl_divergence(&self.encode_posterior(&ex.phrase), &prior)?;
        }
        Ok(sum / examples.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use proptest::prelude::*;
    use rand::Rng;

    fn dims() -> ModelDims {
        ModelDims {
            feature_dim: 10,
            embed_dim: 6,
            hidden: 5,
            latent_dim: 4,
            vocab_size: 12,
            n_styles: 3,
            share_embeddings: true,
        }
    }

    fn examples() -> Vec<TrainExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let feat = |rng: &mut ChaCha8Rng| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        vec![
            TrainExample { image: Some(feat(&mut rng)), object_ids: vec![4, 5], style: 0, target: vec![4, 6, 5], phrase: vec![] },
            TrainExample { image: Some(feat(&mut rng)), object_ids: vec![7], style: 0, target: vec![7, 8], phrase: vec![] },
            TrainExample { image: None, object_ids: vec![4], style: 1, target: vec![4, 9, 10], phrase: vec![9, 10] },
            TrainExample { image: None, object_ids: vec![], style: 2, target: vec![11, 6], phrase: vec![11] },
        ]
    }

    #[test]
    fn posterior_contracts() {
        let model = CvaeModel::new(dims(), 1);
        let a = model.encode_posterior(&[4, 5]);
        assert_eq!(a, model.encode_posterior(&[4, 5]));
        assert_eq!((a.mean.len(), a.log_var.len()), (4, 4));
        let empty = model.encode_posterior(&[]);
        assert!(empty.mean.iter().all(|v| v.is_finite()));

        let mut m = model.clone();
        for lin in [m.encoder.mean, m.encoder.log_var] {
            m.store.get_mut(lin.weight).data.fill(0.0);
        }
        let b = m.encode_posterior(&[4]);
        assert_eq!(b.mean, m.store.get(m.encoder.mean.bias).data);
        assert_eq!(b.log_var, m.store.get(m.encoder.log_var.bias).data);
    }

    #[test]
    fn log_var_is_clamped() {
        let mut m = CvaeModel::new(dims(), 1);
        let lv = m.encoder.log_var;
        m.store.get_mut(lv.weight).data.fill(0.0);
        m.store.get_mut(lv.bias).data = vec![50.0, -50.0, 3.0, 0.0];
        assert_eq!(m.encode_posterior(&[4]).log_var, vec![10.0, -10.0, 3.0, 0.0]);
    }

    #[test]
    fn prior_contracts() {
        let mut m = CvaeModel::new(dims(), 2);
        let f = AlignedFeature::new(vec![0.3, -0.1, 0.2, 0.5, -0.4, 0.9], FeatureSource::Image).unwrap();
        let p = m.prior_mean(&f).unwrap();
        assert!(p.log_var.iter().all(|v| *v == 0.0));
        let w = m.store.get(m.prior.proj.weight).clone();
        let bias = m.store.get(m.prior.proj.bias).clone();
        for r in 0..4 {
            let expected: f64 = bias.data[r] + (0..6).map(|c| w.data[r * 6 + c] * f.vector[c]).sum::<f64>();
            assert!((p.mean[r] - expected).abs() < 1e-12);
        }
        let zero = AlignedFeature::new(vec![0.0; 6], FeatureSource::Image).unwrap();
        let pb = m.prior.proj.bias;
        m.store.get_mut(pb).data.fill(0.0);
        assert_eq!(m.prior_mean(&zero).unwrap().mean, vec![0.0; 4]);
    }

    #[test]
    fn reparameterize_contracts() {
        let g = GaussianParams { mean: vec![1.0, -2.0], log_var: vec![0.7, -1.3] };
        assert_eq!(reparameterize(&g, &[0.0, 0.0], LatentOrigin::Prior).unwrap().z, g.mean);
        let u = GaussianParams::unit(vec![1.0, -2.0]);
        assert_eq!(reparameterize(&u, &[0.5, 0.25], LatentOrigin::Prior).unwrap().z, vec![1.5, -1.75]);
        assert!(reparameterize(&g, &[0.0], LatentOrigin::Prior).is_err());
    }

    #[test]
    fn reparameterize_monte_carlo() {
        let g = GaussianParams { mean: vec![0.5, -1.0, 2.0], log_var: vec![0.0, 1.0, -2.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let draws: Vec<Vec<f64>> = (0..n).map(|_| sample_latent(&g, LatentOrigin::Posterior, &mut rng).z).collect();
        for d in 0..3 {
            let sd = (g.log_var[d] / 2.0).exp();
            let mean = draws.iter().map(|z| z[d]).sum::<f64>() / n as f64;
            let var = draws.iter().map(|z| (z[d] - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((mean - g.mean[d]).abs() < 3.0 * sd / (n as f64).sqrt());
            // Standard error of the sample variance of a Gaussian: var * sqrt(2 / (n - 1)).
            let target = sd * sd;
            assert!((var - target).abs() < 4.0 * target * (2.0 / (n - 1) as f64).sqrt());
        }
    }

    /// Numerical KL by trapezoidal quadrature of q log(q / p).
    fn quadrature_kl(mq: f64, sq: f64, mp: f64) -> f64 {
        let pdf = |x: f64, m: f64, s: f64| (-(x - m).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt());
        let (lo, hi) = (mq - 12.0 * sq, mq + 12.0 * sq);
        let n = 20_000;
        let h = (hi - lo) / n as f64;
        (0..=n)
            .map(|i| {
                let x = lo + i as f64 * h;
                let q = pdf(x, mq, sq);
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                if q > 0.0 { w * q * (q / pdf(x, mp, 1.0)).ln() } else { 0.0 }
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn kl_examples() {
        let p = GaussianParams::unit(vec![0.3]);
        assert!(kl_divergence(&GaussianParams::unit(vec![0.3]), &p).unwrap().abs() < 1e-15);
        assert!((kl_divergence(&GaussianParams::unit(vec![1.3]), &p).unwrap() - 0.5).abs() < 1e-12);
        let wide = GaussianParams { mean: vec![0.3], log_var: vec![(4.0f64).ln()] };
        let kl = kl_divergence(&wide, &p).unwrap();
        assert!((kl - (1.5 - 2f64.ln())).abs() < 1e-12);
        assert!((kl - quadrature_kl(0.3, 2.0, 0.3)).abs() < 1e-6);
        let bad = GaussianParams { mean: vec![0.0], log_var: vec![0.5] };
        assert!(kl_divergence(&wide, &bad).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let v = 7usize;
        let uniform = vec![vec![-(v as f64).ln(); v]; 4];
        let ce = cross_entropy_loss(&uniform, &[3, 4, 5]).unwrap();
        assert!((ce - 4.0 * (v as f64).ln()).abs() < 1e-12);
        let mut onehot = vec![vec![f64::NEG_INFINITY; v]; 3];
        onehot[0][5] = 0.0;
        onehot[1][6] = 0.0;
        onehot[2][EOS] = 0.0;
        assert_eq!(cross_entropy_loss(&onehot, &[5, 6]).unwrap(), 0.0);
        assert!(cross_entropy_loss(&onehot, &[5]).is_err());
    }

    #[test]
    fn cross_entropy_matches_gather_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits: Vec<Vec<f64>> = (0..5).map(|_| (0..9).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let logps: Vec<Vec<f64>> = logits.iter().map(|l| log_softmax(l)).collect();
        let target = [4usize, 8, 0, 6];
        let mut oracle = 0.0;
        for (t, tok) in [4usize, 8, 0, 6, EOS].iter().enumerate() {
            let z: f64 = logits[t].iter().map(|x| x.exp()).sum();
            oracle -= (logits[t][*tok].exp() / z).ln();
        }
        assert!((cross_entropy_loss(&logps, &target).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn style_loss_examples() {
        let mut m = CvaeModel::new(dims(), 4);
        let cs = m.classifier.proj;
        m.store.get_mut(cs.weight).data.fill(0.0);
        m.store.get_mut(cs.bias).data.fill(0.0);
        let z = LatentSample { z: vec![0.4, -0.2, 1.0, 3.0], origin: LatentOrigin::Posterior };
        assert!((m.style_classifier_loss(&z, 1).unwrap() - 3f64.ln()).abs() < 1e-12);
        m.store.get_mut(cs.bias).data = vec![40.0, 0.0, 0.0];
        assert!(m.style_classifier_loss(&z, 0).unwrap() < 1e-15);
    }

    #[test]
    fn style_loss_four_way_scalar_oracle() {
        let dims = ModelDims { n_styles: 4, ..dims() };
        let mut m = CvaeModel::new(dims, 4);
        let cs = m.classifier.proj;
        m.store.get_mut(cs.weight).data.fill(0.0);
        m.store.get_mut(cs.bias).data = vec![2.0, 0.0, 0.0, 0.0];
        let z = LatentSample { z: vec![0.0; 4], origin: LatentOrigin::Prior };
        let e2 = 2f64.exp();
        let oracle = -(e2 / (e2 + 3.0)).ln();
        assert!((m.style_classifier_loss(&z, 0).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 0.3408).abs() < 1e-4);
    }

    #[test]
    fn teacher_forced_shapes_and_normalization() {
        let m = CvaeModel::new(dims(), 5);
        let f = AlignedFeature::new(vec![0.1; 6], FeatureSource::ObjectWords).unwrap();
        let z = LatentSample { z: vec![0.2; 4], origin: LatentOrigin::Prior };
        let steps = m.decode_teacher_forced(&f, 1, &z, &[4, 5, 6]).unwrap();
        assert_eq!(steps.len(), 4);
        for s in &steps {
            assert_eq!(s.len(), 12);
            assert!((s.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(m.decode_teacher_forced(&f, 3, &z, &[4]).is_err());
    }

    #[test]
    fn loss_routing_and_weights() {
        let m = CvaeModel::new(dims(), 6);
        let ex = examples();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let settings = LossSettings::default();
        let paired = m.total_loss(&[&ex[0], &ex[1]], &settings, &mut rng).unwrap();
        assert!(paired.cont > 0.0);
        let unpaired = m.total_loss(&[&ex[2], &ex[3]], &settings, &mut rng).unwrap();
        assert_eq!(unpaired.cont, 0.0);
        let single = m.total_loss(&[&ex[0]], &settings, &mut rng).unwrap();
        assert_eq!(single.cont, 0.0);
        assert!(m.total_loss(&[&ex[0], &ex[2]], &settings, &mut rng).is_err());

        let zero = LossSettings { weights: LossWeights { cont: 0.0, ce: 0.0, kl: 0.0, style: 0.0 }, ..settings };
        assert_eq!(m.total_loss(&[&ex[0], &ex[1]], &zero, &mut rng).unwrap().total, 0.0);

        let lm = LossSettings { contrastive: false, ..settings };
        assert_eq!(m.total_loss(&[&ex[0], &ex[1]], &lm, &mut rng).unwrap().cont, 0.0);
    }

    #[test]
    fn total_matches_weighted_terms() {
        let m = CvaeModel::new(dims(), 6);
        let ex = examples();
        let s = LossSettings::default();
        let b = m.total_loss(&[&ex[0], &ex[1]], &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = s.weights;
        let expected = w.cont * b.cont + w.ce * b.ce + w.kl * b.kl + w.style * b.style;
        assert!((b.total - expected).abs() < 1e-12);
    }

    /// A trailing single-example paired batch contributes cross-entropy and KL
    /// exactly as its own per-sample terms, and no contrastive term.
    #[test]
    fn singleton_batch_matches_per_sample_oracle() {
        let m = CvaeModel::new(dims(), 9);
        let ex = examples();
        let s = LossSettings::default();
        let got = m.total_loss(&[&ex[1]], &s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feature = m.condition_feature(&ex[1]).unwrap();
        let post = m.encode_posterior(&ex[1].phrase);
        let noise = standard_normal(&mut rng, 4);
        let z = reparameterize(&post, &noise, LatentOrigin::Posterior).unwrap();
        let ce = cross_entropy_loss(&m.decode_teacher_forced(&feature, 0, &z, &ex[1].target).unwrap(), &ex[1].target).unwrap();
        let kl = kl_divergence(&post, &m.prior_mean(&feature).unwrap()).unwrap();
        let st = m.style_classifier_loss(&z, 0).unwrap();
        assert_eq!(got.cont, 0.0);
        assert!((got.ce - ce).abs() < 1e-10);
        assert!((got.kl - kl).abs() < 1e-10);
        assert!((got.style - st).abs() < 1e-10);
    }

    #[test]
    fn gradients_cover_every_group() {
        for share in [true, false] {
            let m = CvaeModel::new(ModelDims { share_embeddings: share, ..dims() }, 10);
            let ex = examples();
            let s = LossSettings::default();
            for batch in [[&ex[0], &ex[1]], [&ex[2], &ex[3]]] {
                let report = check_gradients(&m.store, 1e-5, 40, |tape| {
                    let mut rng = ChaCha8Rng::seed_from_u64(12);
                    m.batch_loss_on_tape(tape, &batch, &s, &mut rng).unwrap().0
                });
                for g in &report {
                    assert!(g.rel_error < 1e-4, "{g:?}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn kl_is_non_negative(
            mq in proptest::collection::vec(-3.0f64..3.0, 3),
            lv in proptest::collection::vec(-5.0f64..5.0, 3),
            mp in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let kl = kl_divergence(&GaussianParams { mean: mq, log_var: lv }, &GaussianParams::unit(mp)).unwrap();
            prop_assert!(kl >= -1e-12);
        }
    }
}
