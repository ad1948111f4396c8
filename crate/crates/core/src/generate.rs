//! Inference: style-conditioned reject sampling of prior latents, greedy
//! decoding, and the recheck filter over candidate captions.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::corpus::{StyleLabel, BOS, EOS};
use crate::cvae::{sample_latent, CvaeModel, LatentOrigin, LatentSample};
use crate::embed::AlignedFeature;
use crate::error::{Error, Result};
use crate::phrase::{argmax, StyleScore};
use crate::train::StyleCaptioner;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecheckConfig {
    pub threshold: f64,
    pub n_candidates: usize,
    pub max_reject_attempts: usize,
    pub max_len: usize,
    /// Return the first candidate without consulting scores.
    pub disabled: bool,
}

impl Default for RecheckConfig {
    fn default() -> Self {
        Self::from_config(&RunConfig::default())
    }
}

impl RecheckConfig {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            threshold: cfg.recheck_threshold,
            n_candidates: cfg.n_candidates,
            max_reject_attempts: cfg.max_reject_attempts,
            max_len: cfg.max_len,
            disabled: cfg.disable_recheck,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectOutcome {
    pub sample: LatentSample,
    /// Draws rejected before the returned one (or all of them on fallback).
    pub rejects: usize,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<String>,
    pub latent: LatentSample,
    pub score: StyleScore,
    pub rejects: usize,
}

/// Candidates in generation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.candidates.iter().map(|c| c.score.value).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub caption: Vec<String>,
    pub style_score: f64,
    /// Position of the returned caption in the candidate set.
    pub index: usize,
    /// Rejected latent draws summed over all candidates.
    pub n_rejects: usize,
}

/// Draws `z ~ N(mu_k, I)` until the latent classifier predicts `style`.
/// After `max_reject_attempts` failures the draw with the highest target
/// probability is returned.
pub fn reject_sample_latent(
    model: &CvaeModel,
    feature: &AlignedFeature,
    style: &StyleLabel,
    max_attempts: usize,
    seed: u64,
) -> Result<RejectOutcome> {
    if style.id >= model.dims.n_styles {
        return Err(Error::InvalidArgument(format!("style id {} outside model styles", style.id)));
    }
    let prior = model.prior_mean(feature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, LatentSample)> = None;
    for attempt in 0..max_attempts.max(1) {
        let sample = sample_latent(&prior, LatentOrigin::Prior, &mut rng);
        let probs = model.classifier.probs(&model.store, &sample.z);
        if argmax(&probs) == style.id {
            return Ok(RejectOutcome {
                sample,
                rejects: attempt,
                accepted: true,
            });
        }
        let p = probs[style.id];
        if best.as_ref().is_none_or(|(b, _)| p > *b) {
            best = Some((p, sample));
        }
    }
    let (_, sample) = best.expect("at least one draw");
    Ok(RejectOutcome {
        sample,
        rejects: max_attempts.max(1),
        accepted: false,
    })
}

/// Argmax decoding until `<eos>` or `max_len` tokens; `<eos>` is not returned.
pub fn decode_greedy(
    model: &CvaeModel,
    feature: &AlignedFeature,
    style: usize,
    z: &LatentSample,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    if feature.vector.len() != model.dims.embed_dim {
        return Err(Error::Dimension {
            expected: model.dims.embed_dim,
            got: feature.vector.len(),
        });
    }
    if z.z.len() != model.dims.latent_dim {
        return Err(Error::Dimension {
            expected: model.dims.latent_dim,
            got: z.z.len(),
        });
    }
    if style >= model.dims.n_styles {
        return Err(Error::InvalidArgument(format!("style id {style} outside model styles")));
    }
    let mut tape = Tape::new(&model.store);
    let f = tape.constant(feature.vector.clone());
    let zv = tape.constant(z.z.clone());
    let mut state = model.decoder.condition(&mut tape, f, style, zv);
    let mut token = BOS;
    let mut out = Vec::new();
    while out.len() < max_len {
        let (s, lp) = model.decoder.step(&mut tape, token, state);
        state = s;
        token = argmax(tape.value(lp));
        if token == EOS {
            break;
        }
        out.push(token);
    }
    Ok(out)
}

/// Independent per-candidate sub-seeds derived from the call seed.
fn sub_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// `n_candidates` captions, each decoded from its own reject-sampled latent
/// and scored by the attention classifier for the target style.
pub fn generate_candidates(
    captioner: &StyleCaptioner,
    feature: &AlignedFeature,
    style: &StyleLabel,
    cfg: &RecheckConfig,
    seed: u64,
) -> Result<CandidateSet> {
    let mut candidates = Vec::with_capacity(cfg.n_candidates);
    for sub in sub_seeds(seed, cfg.n_candidates) {
        let outcome = reject_sample_latent(&captioner.model, feature, style, cfg.max_reject_attempts, sub)?;
        let ids = decode_greedy(&captioner.model, feature, style.id, &outcome.sample, cfg.max_len)?;
        let tokens = captioner.vocab.decode(&ids);
        let score = captioner.classifier.style_strength(&tokens, style);
        candidates.push(Candidate {
            tokens,
            latent: outcome.sample,
            score,
            rejects: outcome.rejects,
        });
    }
    Ok(CandidateSet { candidates })
}

/// Index of the first candidate scoring at least `threshold`; otherwise the
/// highest-scoring one, ties going to the earliest.
pub fn recheck_filter(set: &CandidateSet, cfg: &RecheckConfig) -> Result<usize> {
    if set.is_empty() {
        return Err(Error::Empty("candidate set".into()));
    }
    if cfg.disabled {
        return Ok(0);
    }
    let scores = set.scores();
    if let Some(i) = scores.iter().position(|s| *s >= cfg.threshold) {
        return Ok(i);
    }
    Ok(argmax(&scores))
}

pub fn generate_stylized(
    captioner: &StyleCaptioner,
    feature: &AlignedFeature,
    style: &StyleLabel,
    cfg: &RecheckConfig,
    seed: u64,
) -> Result<Generation> {
    let set = generate_candidates(captioner, feature, style, cfg, seed)?;
    let index = recheck_filter(&set, cfg)?;
    let chosen = &set.candidates[index];
    Ok(Generation {
        caption: chosen.tokens.clone(),
        style_score: chosen.score.value,
        index,
        n_rejects: set.candidates.iter().map(|c| c.rejects).sum(),
    })
}

impl StyleCaptioner {
    pub fn style(&self, name: &str) -> Result<&StyleLabel> {
        self.styles
            .by_name(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown style {name:?}")))
    }

    /// Generates one caption for a raw image feature with the configured
    /// recheck settings.
    pub fn caption_image(&self, image: &[f64], style: &StyleLabel, seed: u64) -> Result<Generation> {
        let feature = self.model.encode_image(image)?;
        generate_stylized(self, &feature, style, &RecheckConfig::from_config(&self.config), seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WordVocabulary;
    use crate::cvae::ModelDims;
    use crate::embed::FeatureSource;
    use crate::phrase::{AttnClassifierConfig, AttnStyleClassifier};

    fn dims(n_styles: usize) -> ModelDims {
        ModelDims {
            feature_dim: 6,
            embed_dim: 5,
            hidden: 6,
            latent_dim: 3,
            vocab_size: 9,
            n_styles,
            share_embeddings: true,
        }
    }

    fn feature() -> AlignedFeature {
        AlignedFeature::new(vec![0.2, -0.1, 0.4, 0.0, 0.3], FeatureSource::Image).unwrap()
    }

    fn label(id: usize) -> StyleLabel {
        StyleLabel { id, name: format!("s{id}") }
    }

    fn captioner() -> StyleCaptioner {
        let vocab = WordVocabulary::from_words(["a", "b", "c", "d", "e"]);
        let styles = crate::corpus::StyleSet::new(&["factual", "romantic"]).unwrap();
        let cfg = AttnClassifierConfig { embed_dim: 4, hidden: 4, attn_dim: 3, ..Default::default() };
        StyleCaptioner {
            config: RunConfig { n_candidates: 4, max_len: 6, ..RunConfig::default() },
            styles,
            classifier: AttnStyleClassifier::new(vocab.clone(), 2, &cfg),
            model: CvaeModel::new(dims(2), 3),
            vocab,
            objects: Default::default(),
        }
    }

    fn candidate_set(scores: &[f64]) -> CandidateSet {
        CandidateSet {
            candidates: scores
                .iter()
                .enumerate()
                .map(|(i, s)| Candidate {
                    tokens: vec![format!("w{i}")],
                    latent: LatentSample { z: vec![], origin: LatentOrigin::Prior },
                    score: StyleScore { value: *s, style: label(1) },
                    rejects: 0,
                })
                .collect(),
        }
    }

    #[test]
    fn recheck_rules() {
        let cfg = RecheckConfig::default();
        assert_eq!(recheck_filter(&candidate_set(&[0.3, 0.95, 0.92]), &cfg).unwrap(), 1);
        assert_eq!(recheck_filter(&candidate_set(&[0.3, 0.5, 0.8, 0.1]), &cfg).unwrap(), 2);
        assert_eq!(recheck_filter(&candidate_set(&[0.7, 0.7]), &cfg).unwrap(), 0);
        assert_eq!(recheck_filter(&candidate_set(&[0.01]), &cfg).unwrap(), 0);
        assert_eq!(recheck_filter(&candidate_set(&[0.9]), &cfg).unwrap(), 0);
        assert!(recheck_filter(&candidate_set(&[]), &cfg).is_err());
        let off = RecheckConfig { disabled: true, ..cfg };
        assert_eq!(recheck_filter(&candidate_set(&[0.3, 0.95]), &off).unwrap(), 0);
    }

    #[test]
    fn defaults() {
        let c = RecheckConfig::default();
        assert_eq!((c.threshold, c.n_candidates, c.max_reject_attempts), (0.9, 10, 100));
        assert!(!c.disabled);
    }

    #[test]
    fn single_style_accepts_first_draw() {
        let m = CvaeModel::new(dims(1), 1);
        let out = reject_sample_latent(&m, &feature(), &label(0), 100, 4).unwrap();
        assert!(out.accepted);
        assert_eq!(out.rejects, 0);
    }

    #[test]
    fn accepted_latent_matches_style() {
        let m = CvaeModel::new(dims(3), 2);
        for seed in 0..20 {
            for s in 0..3 {
                let out = reject_sample_latent(&m, &feature(), &label(s), 100, seed).unwrap();
                if out.accepted {
                    assert_eq!(m.classifier.predict(&m.store, &out.sample.z), s);
                }
            }
        }
    }

    #[test]
    fn fallback_picks_most_probable_draw() {
        let mut m = CvaeModel::new(dims(2), 2);
        let cs = m.classifier.proj;
        // Style 1 can never win: its logit trails by 50 plus a z-dependent term.
        m.store.get_mut(cs.weight).data = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        m.store.get_mut(cs.bias).data = vec![50.0, 0.0];
        let out = reject_sample_latent(&m, &feature(), &label(1), 25, 9).unwrap();
        assert!(!out.accepted);
        assert_eq!(out.rejects, 25);
        let prior = m.prior_mean(&feature()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let best = (0..25)
            .map(|_| sample_latent(&prior, LatentOrigin::Prior, &mut rng).z)
            .max_by(|a, b| a[0].total_cmp(&b[0]))
            .unwrap();
        assert_eq!(out.sample.z, best);
    }

    /// With `C_S` deciding on the sign of `z_0`, acceptance of style 1 on the
    /// first draw has probability `Phi(mu_0)`.
    #[test]
    fn half_space_acceptance_rate() {
        let mut m = CvaeModel::new(dims(2), 5);
        let cs = m.classifier.proj;
        m.store.get_mut(cs.weight).data = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        m.store.get_mut(cs.bias).data = vec![0.0, 0.0];
        let mu0 = m.prior_mean(&feature()).unwrap().mean[0];
        let trials = 10_000;
        let first = (0..trials)
            .filter(|s| reject_sample_latent(&m, &feature(), &label(1), 1, *s).unwrap().accepted)
            .count();
        let p = 0.5 * (1.0 + erf(mu0 / std::f64::consts::SQRT_2));
        let rate = first as f64 / trials as f64;
        let sigma = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((rate - p).abs() < 3.0 * sigma, "rate {rate} expected {p}");
    }

    /// Abramowitz-Stegun 7.1.26, absolute error below 1.5e-7.
    fn erf(x: f64) -> f64 {
        let t = 1.0 / (1.0 + 0.3275911 * x.abs());
        let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
        let y = 1.0 - poly * (-x * x).exp();
        if x >= 0.0 { y } else { -y }
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let m = CvaeModel::new(dims(2), 6);
        let z = LatentSample { z: vec![0.3, -0.2, 0.9], origin: LatentOrigin::Prior };
        for max_len in [1, 3, 8] {
            let a = decode_greedy(&m, &feature(), 1, &z, max_len).unwrap();
            assert_eq!(a, decode_greedy(&m, &feature(), 1, &z, max_len).unwrap());
            assert!(a.len() <= max_len);
            assert!(!a.contains(&EOS));
        }
        assert!(decode_greedy(&m, &feature(), 1, &z, 0).is_err());
    }

    #[test]
    fn candidate_contracts() {
        let c = captioner();
        let cfg = RecheckConfig::from_config(&c.config);
        let style = c.styles.by_name("romantic").unwrap().clone();
        let a = generate_candidates(&c, &feature(), &style, &cfg, 11).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, generate_candidates(&c, &feature(), &style, &cfg, 11).unwrap());
        assert!(a.scores().iter().all(|s| (0.0..=1.0).contains(s)));
        let g = generate_stylized(&c, &feature(), &style, &cfg, 11).unwrap();
        assert_eq!(g.caption, a.candidates[recheck_filter(&a, &cfg).unwrap()].tokens);
    }

    #[test]
    fn one_candidate_is_plain_greedy_decode() {
        let c = captioner();
        let cfg = RecheckConfig { n_candidates: 1, ..RecheckConfig::from_config(&c.config) };
        let style = c.styles.by_name("romantic").unwrap().clone();
        let g = generate_stylized(&c, &feature(), &style, &cfg, 5).unwrap();
        let outcome = reject_sample_latent(&c.model, &feature(), &style, cfg.max_reject_attempts, sub_seeds(5, 1)[0]).unwrap();
        let ids = decode_greedy(&c.model, &feature(), style.id, &outcome.sample, cfg.max_len).unwrap();
        assert_eq!(g.caption, c.vocab.decode(&ids));
        assert_eq!(g.index, 0);
    }

    #[test]
    fn disabled_recheck_returns_first() {
        let c = captioner();
        let style = c.styles.by_name("romantic").unwrap().clone();
        let cfg = RecheckConfig { disabled: true, ..RecheckConfig::from_config(&c.config) };
        let set = generate_candidates(&c, &feature(), &style, &cfg, 8).unwrap();
        let g = generate_stylized(&c, &feature(), &style, &cfg, 8).unwrap();
        assert_eq!(g.caption, set.candidates[0].tokens);
    }
}
