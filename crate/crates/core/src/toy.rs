//! Synthetic corpus for tests and demos.
//!
//! An image is a (subject, place) pair. Its feature is the sum of two fixed
//! Gaussian prototypes plus noise, and its factual caption is
//! `a <subject> <action> the <place>` with the action tied to the place.
//! Stylized sentences append a three-word phrase drawn from a per-style
//! list; the phrase vocabularies of different styles are disjoint.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{ObjectVocabulary, PairedSample, StyleSet, StyledCaption, UnpairedSample, FACTUAL};
use crate::error::{Error, Result};
use crate::train::TrainingData;

pub const SUBJECTS: [&str; 7] = ["man", "woman", "people", "boy", "girl", "dog", "cat"];

/// `(place, action)`.
pub const PLACES: [(&str, &str); 8] = [
    ("beach", "runs on"),
    ("park", "walks through"),
    ("street", "stands on"),
    ("field", "plays in"),
    ("river", "swims in"),
    ("snow", "jumps through"),
    ("grass", "rests on"),
    ("road", "rides down"),
];

pub const ROMANTIC: [&str; 6] = [
    "madly loving life",
    "dreaming of romance",
    "with tender affection",
    "under starry skies",
    "longing for passion",
    "sharing sweet kisses",
];

pub const HUMOROUS: [&str; 6] = [
    "like goofy clowns",
    "chasing silly bananas",
    "wearing wacky hats",
    "making funny faces",
    "doing crazy dances",
    "telling jolly jokes",
];

pub fn style_phrases(style: &str) -> Option<&'static [&'static str]> {
    match style {
        "romantic" => Some(&ROMANTIC),
        "humorous" => Some(&HUMOROUS),
        _ => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_paired: usize,
    pub n_unpaired_per_style: usize,
    pub n_test: usize,
    pub feature_dim: usize,
    /// Standard deviation of per-coordinate feature noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_paired: 200,
            n_unpaired_per_style: 150,
            n_test: 50,
            feature_dim: 2048,
            noise: 0.3,
            seed: 2024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyImage {
    pub image_id: String,
    pub subject: String,
    pub place: String,
    pub feature: Vec<f64>,
}

impl ToyImage {
    pub fn object_words(&self) -> Vec<String> {
        vec![self.subject.clone(), self.place.clone()]
    }

    pub fn factual_caption(&self) -> Vec<String> {
        factual_tokens(&self.subject, &self.place)
    }

    /// The factual caption followed by each phrase of `style`.
    pub fn references(&self, style: &str) -> Vec<Vec<String>> {
        match style_phrases(style) {
            Some(list) => list
                .iter()
                .map(|p| {
                    let mut t = self.factual_caption();
                    t.extend(p.split_whitespace().map(str::to_owned));
                    t
                })
                .collect(),
            None => vec![self.factual_caption()],
        }
    }
}

fn factual_tokens(subject: &str, place: &str) -> Vec<String> {
    let action = PLACES.iter().find(|(p, _)| *p == place).map(|(_, a)| *a).unwrap_or("is at");
    format!("a {subject} {action} the {place}")
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub config: ToyConfig,
    pub data: TrainingData,
    pub test: Vec<ToyImage>,
    /// Stylized sentences not used for training.
    pub heldout: Vec<UnpairedSample>,
}

struct Prototypes {
    subjects: Vec<Vec<f64>>,
    places: Vec<Vec<f64>>,
}

impl Prototypes {
    fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut draw = || (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>();
        Self {
            subjects: (0..SUBJECTS.len()).map(|_| draw()).collect(),
            places: (0..PLACES.len()).map(|_| draw()).collect(),
        }
    }

    fn image(&self, id: String, noise: f64, rng: &mut ChaCha8Rng) -> ToyImage {
        let s = rng.random_range(0..SUBJECTS.len());
        let p = rng.random_range(0..PLACES.len());
        let feature = self.subjects[s]
            .iter()
            .zip(&self.places[p])
            .map(|(a, b)| a + b + noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        ToyImage {
            image_id: id,
            subject: SUBJECTS[s].to_string(),
            place: PLACES[p].0.to_string(),
            feature,
        }
    }
}

pub fn toy_styles() -> StyleSet {
    StyleSet::new(&[FACTUAL, "romantic", "humorous"]).expect("valid style set")
}

pub fn toy_objects() -> ObjectVocabulary {
    ObjectVocabulary::from_words(SUBJECTS.iter().copied().chain(PLACES.iter().map(|(p, _)| *p)))
}

pub fn generate(cfg: &ToyConfig) -> Result<ToyDataset> {
    if cfg.feature_dim == 0 {
        return Err(Error::InvalidArgument("feature_dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = Prototypes::new(cfg.feature_dim, &mut rng);
    let styles = toy_styles();
    let objects = toy_objects();
    let factual = styles.factual().clone();

    let paired = (0..cfg.n_paired)
        .map(|i| {
            let img = protos.image(format!("train{i:04}"), cfg.noise, &mut rng);
            let caption = StyledCaption::new(img.factual_caption(), factual.clone())?;
            Ok(PairedSample {
                object_words: img.object_words(),
                image_feature: img.feature,
                caption,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let sentences = |n: usize, rng: &mut ChaCha8Rng| -> Result<Vec<UnpairedSample>> {
        let mut out = Vec::new();
        for label in styles.stylized() {
            let phrases = style_phrases(&label.name).expect("toy style");
            for _ in 0..n {
                let subject = *SUBJECTS.choose(rng).expect("non-empty");
                let place = PLACES.choose(rng).expect("non-empty").0;
                let mut tokens = factual_tokens(subject, place);
                tokens.extend(phrases.choose(rng).expect("non-empty").split_whitespace().map(str::to_owned));
                out.push(UnpairedSample {
                    caption: StyledCaption::new(tokens, label.clone())?,
                    object_words: vec![subject.to_string(), place.to_string()],
                });
            }
        }
        Ok(out)
    };
    let unpaired = sentences(cfg.n_unpaired_per_style, &mut rng)?;
    let heldout = sentences(cfg.n_test, &mut rng)?;
    let test = (0..cfg.n_test)
        .map(|i| protos.image(format!("test{i:04}"), cfg.noise, &mut rng))
        .collect();
    Ok(ToyDataset {
        config: cfg.clone(),
        data: TrainingData {
            styles,
            objects,
            paired,
            unpaired,
        },
        test,
        heldout,
    })
}

#[derive(Serialize)]
struct PairedLine<'a> {
    feature: &'a [f64],
    caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureLine {
    pub image_id: String,
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub image_id: String,
    pub style: String,
    pub references: Vec<String>,
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl ToyDataset {
    /// Writes `factual.jsonl`, one `<style>.txt` per stylized style,
    /// `objects.txt`, `test_features.jsonl`, `test_references.jsonl` and
    /// `toy.cfg` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut factual = String::new();
        for s in &self.data.paired {
            let line = PairedLine {
                feature: &s.image_feature,
                caption: s.caption.text(),
            };
            factual.push_str(&serde_json::to_string(&line).expect("serializes"));
            factual.push('\n');
        }
        write(&dir.join("factual.jsonl"), factual)?;
        for label in self.data.styles.stylized() {
            let text: String = self
                .data
                .unpaired
                .iter()
                .filter(|s| s.caption.style == *label)
                .map(|s| s.caption.text() + "\n")
                .collect();
            write(&dir.join(format!("{}.txt", label.name)), text)?;
        }
        write(&dir.join("objects.txt"), self.data.objects.words().join("\n") + "\n")?;

        let mut feats = String::new();
        let mut refs = String::new();
        for img in &self.test {
            let line = FeatureLine {
                image_id: img.image_id.clone(),
                feature: img.feature.clone(),
            };
            feats.push_str(&serde_json::to_string(&line).expect("serializes"));
            feats.push('\n');
            for label in self.data.styles.stylized() {
                let line = ReferenceLine {
                    image_id: img.image_id.clone(),
                    style: label.name.clone(),
                    references: img.references(&label.name).iter().map(|r| r.join(" ")).collect(),
                };
                refs.push_str(&serde_json::to_string(&line).expect("serializes"));
                refs.push('\n');
            }
        }
        write(&dir.join("test_features.jsonl"), feats)?;
        write(&dir.join("test_references.jsonl"), refs)?;
        let cfg = RunConfig {
            feature_dim: self.config.feature_dim,
            ..RunConfig::toy()
        };
        write(&dir.join("toy.cfg"), cfg.to_text())
    }
}
