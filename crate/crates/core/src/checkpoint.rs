//! Versioned JSON checkpoints.
//!
//! Floats are written in shortest round-trip form, so loading reproduces every
//! parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ObjectVocabulary;
use crate::error::{Error, Result};
use crate::train::{EpochLog, StyleCaptioner};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    pub vocab_hash: String,
    pub objects_hash: String,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    pub captioner: StyleCaptioner,
}

pub fn objects_hash(objects: &ObjectVocabulary) -> String {
    let mut h = Sha256::new();
    for w in objects.words() {
        h.update(w.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn new(captioner: StyleCaptioner, best_epoch: usize, log: Vec<EpochLog>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            seed: captioner.config.seed,
            vocab_hash: captioner.vocab.content_hash(),
            objects_hash: objects_hash(&captioner.objects),
            best_epoch,
            log,
            captioner,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("not valid JSON: {e}")))?;
        match probe.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported checkpoint version {v}, expected {CHECKPOINT_VERSION}"
                )))
            }
            None => return Err(Error::Checkpoint("missing version tag".into())),
        }
        let ckpt: Checkpoint =
            serde_json::from_value(probe).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.vocab_hash != ckpt.captioner.vocab.content_hash() {
            return Err(Error::Checkpoint("word vocabulary does not match its hash".into()));
        }
        if ckpt.objects_hash != objects_hash(&ckpt.captioner.objects) {
            return Err(Error::Checkpoint("object vocabulary does not match its hash".into()));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::corpus::{StyleSet, WordVocabulary};
    use crate::cvae::{CvaeModel, ModelDims};
    use crate::phrase::{AttnClassifierConfig, AttnStyleClassifier};

    fn sample() -> Checkpoint {
        let vocab = WordVocabulary::from_words(["a", "dog", "love"]);
        let cfg = RunConfig { feature_dim: 4, embed_dim: 3, hidden: 3, latent_dim: 2, ..RunConfig::default() };
        let dims = ModelDims::from_config(&cfg, vocab.len(), 2);
        let captioner = StyleCaptioner {
            classifier: AttnStyleClassifier::new(
                vocab.clone(),
                2,
                &AttnClassifierConfig { embed_dim: 3, hidden: 3, attn_dim: 2, ..Default::default() },
            ),
            model: CvaeModel::new(dims, 3),
            styles: StyleSet::new(&["factual", "romantic"]).unwrap(),
            objects: ObjectVocabulary::from_words(["dog"]),
            vocab,
            config: cfg,
        };
        Checkpoint::new(captioner, 0, vec![])
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
        for ((_, a), (_, b)) in c.captioner.model.store.iter().zip(back.captioner.model.store.iter()) {
            let bits = |p: &crate::autodiff::Param| p.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_tampering() {
        let c = sample();
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["version"] = 99.into();
        let err = Checkpoint::from_json(&v.to_string()).unwrap_err();
        assert_eq!(err.kind(), "checkpoint");

        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["vocab_hash"] = "00".into();
        assert!(Checkpoint::from_json(&v.to_string()).is_err());
        assert!(Checkpoint::from_json("{").is_err());
        assert!(Checkpoint::from_json("{}").is_err());
    }
}
