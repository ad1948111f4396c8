//! Run configuration and its flat `key = value` text format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::phrase::AttnClassifierConfig;

/// How unpaired stylized sentences are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnpairedMode {
    /// Object-word features aligned with image features by the contrastive term.
    Contrastive,
    /// Ablation: the contrastive term is switched off everywhere.
    LanguageModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    pub share_embeddings: bool,

    pub tau: f64,
    pub lambda_cont: f64,
    pub lambda_ce: f64,
    pub lambda_kl: f64,
    pub lambda_style: f64,

    pub lr: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub min_count: usize,

    pub classifier_embed_dim: usize,
    pub classifier_hidden: usize,
    pub classifier_attn_dim: usize,
    pub classifier_epochs: usize,
    pub classifier_batch_size: usize,
    pub classifier_lr: f64,
    pub phrase_ratio: f64,

    pub recheck_threshold: f64,
    pub n_candidates: usize,
    pub max_reject_attempts: usize,
    pub max_len: usize,

    pub disable_recheck: bool,
    pub unpaired_mode: UnpairedMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            feature_dim: 2048,
            embed_dim: 1024,
            hidden: 1024,
            latent_dim: 100,
            share_embeddings: true,
            tau: 0.1,
            lambda_cont: 0.1,
            lambda_ce: 1.0,
            lambda_kl: 0.02,
            lambda_style: 2.0,
            lr: 5e-5,
            grad_clip: 0.0,
            batch_size: 64,
            epochs: 20,
            seed: 42,
            val_fraction: 0.05,
            min_count: 1,
            classifier_embed_dim: 128,
            classifier_hidden: 512,
            classifier_attn_dim: 128,
            classifier_epochs: 10,
            classifier_batch_size: 32,
            classifier_lr: 1e-3,
            phrase_ratio: 0.3,
            recheck_threshold: 0.9,
            n_candidates: 10,
            max_reject_attempts: 100,
            max_len: 20,
            disable_recheck: false,
            unpaired_mode: UnpairedMode::Contrastive,
        }
    }
}

impl RunConfig {
    /// Small dimensions and a faster learning rate for the bundled toy corpus.
    pub fn toy() -> Self {
        Self {
            embed_dim: 96,
            hidden: 96,
            lr: 5e-3,
            grad_clip: 5.0,
            batch_size: 16,
            epochs: 100,
            seed: 7,
            val_fraction: 0.0,
            classifier_embed_dim: 16,
            classifier_hidden: 16,
            classifier_attn_dim: 8,
            classifier_epochs: 15,
            classifier_batch_size: 16,
            classifier_lr: 1e-2,
            max_len: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.feature_dim == 0 || self.embed_dim == 0 || self.hidden == 0 || self.latent_dim == 0 {
            return bad("dimensions must be positive");
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad("tau must be positive");
        }
        if [self.lambda_cont, self.lambda_ce, self.lambda_kl, self.lambda_style]
            .iter()
            .any(|l| l.is_nan() || *l < 0.0)
        {
            return bad("loss weights must be non-negative");
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.classifier_batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.min_count == 0 {
            return bad("min_count must be at least 1");
        }
        if !(self.phrase_ratio > 0.0 && self.phrase_ratio <= 1.0) {
            return bad("phrase_ratio must lie in (0, 1]");
        }
        if !(self.recheck_threshold > 0.0 && self.recheck_threshold < 1.0) {
            return bad("recheck_threshold must lie in (0, 1)");
        }
        if self.n_candidates == 0 || self.max_reject_attempts == 0 || self.max_len == 0 {
            return bad("n_candidates, max_reject_attempts and max_len must be positive");
        }
        Ok(())
    }

    pub fn classifier_config(&self) -> AttnClassifierConfig {
        AttnClassifierConfig {
            embed_dim: self.classifier_embed_dim,
            hidden: self.classifier_hidden,
            attn_dim: self.classifier_attn_dim,
            epochs: self.classifier_epochs,
            batch_size: self.classifier_batch_size,
            lr: self.classifier_lr,
            seed: self.seed.wrapping_add(0x5eed),
        }
    }

    /// Every field as `key = value`, one per line, sorted by key.
    pub fn to_text(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let Value::Object(map) = value else { unreachable!() };
        let mut out = String::new();
        for (k, v) in map {
            let v = match v {
                Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Parses `key = value` lines on top of `base`; `#` starts a comment.
    pub fn from_text_with_base(text: &str, base: &RunConfig) -> Result<Self> {
        let mut cfg = base.clone();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_with_base(text, &RunConfig::default())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key = value, got {assignment:?}")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let Value::Object(mut map) = serde_json::to_value(&*self).expect("config serializes") else {
            unreachable!()
        };
        let current = map
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))?;
        let parsed = match current {
            Value::Bool(_) => raw
                .parse::<bool>()
                .map(Value::Bool)
                .map_err(|_| Error::Config(format!("{key}: expected true or false"))),
            Value::Number(_) => serde_json::from_str::<Value>(raw)
                .ok()
                .filter(Value::is_number)
                .ok_or_else(|| Error::Config(format!("{key}: expected a number, got {raw:?}"))),
            _ => Ok(Value::String(raw.to_string())),
        }?;
        map.insert(key.to_string(), parsed);
        *self = serde_json::from_value(Value::Object(Map::from_iter(map)))
            .map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.hidden, c.embed_dim, c.latent_dim), (1024, 1024, 100));
        assert_eq!(c.tau, 0.1);
        assert_eq!(
            (c.lambda_cont, c.lambda_ce, c.lambda_kl, c.lambda_style),
            (0.1, 1.0, 0.02, 2.0)
        );
        assert_eq!(c.lr, 5e-5);
        assert_eq!(c.recheck_threshold, 0.9);
        assert_eq!(c.n_candidates, 10);
        assert_eq!(c.phrase_ratio, 0.3);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::toy();
        c.unpaired_mode = UnpairedMode::LanguageModel;
        c.disable_recheck = true;
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_errors() {
        let c = RunConfig::from_text("# comment\nlatent_dim = 8  # trailing\nunpaired_mode = language_model\n").unwrap();
        assert_eq!(c.latent_dim, 8);
        assert_eq!(c.unpaired_mode, UnpairedMode::LanguageModel);
        assert!(RunConfig::from_text("nope = 1").is_err());
        assert!(RunConfig::from_text("latent_dim = abc").is_err());
        assert!(RunConfig::from_text("unpaired_mode = other").is_err());
        assert!(RunConfig::from_text("tau = 0").is_err());
        let mut c = RunConfig::default();
        c.set("seed=9").unwrap();
        assert_eq!(c.seed, 9);
    }
}
