//! End-to-end training: vocabulary, attention classifier, phrase extraction,
//! then the CVAE with Adam.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::corpus::{make_batches, Batch, ObjectVocabulary, PairedSample, StyleSet, StyledCaption, UnpairedSample, WordVocabulary};
use crate::cvae::{CvaeModel, LossBreakdown, LossSettings, ModelDims, TrainExample};
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::phrase::{train_attn_classifier, AttnStyleClassifier};

/// Mean KL per sample below which a run is flagged as collapsed.
pub const COLLAPSE_THRESHOLD: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct TrainingData {
    pub styles: StyleSet,
    pub objects: ObjectVocabulary,
    pub paired: Vec<PairedSample>,
    pub unpaired: Vec<UnpairedSample>,
}

impl TrainingData {
    pub fn captions(&self) -> impl Iterator<Item = &StyledCaption> {
        self.paired
            .iter()
            .map(|s| &s.caption)
            .chain(self.unpaired.iter().map(|s| &s.caption))
    }
}

/// Everything needed at inference time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleCaptioner {
    pub config: RunConfig,
    pub styles: StyleSet,
    pub vocab: WordVocabulary,
    pub objects: ObjectVocabulary,
    pub classifier: AttnStyleClassifier,
    pub model: CvaeModel,
}

impl StyleCaptioner {
    /// Maps a caption to a training example, extracting its style phrase.
    pub fn example_for(&self, caption: &StyledCaption, image: Option<&[f64]>, object_words: &[String]) -> Result<TrainExample> {
        let phrase = self.classifier.extract_style_phrase(caption, self.config.phrase_ratio)?;
        Ok(TrainExample {
            image: image.map(<[f64]>::to_vec),
            object_ids: self.vocab.encode(object_words),
            style: caption.style.id,
            target: self.vocab.encode(&caption.tokens),
            phrase: self.vocab.encode(&phrase.words),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    pub mean_kl: f64,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub captioner: StyleCaptioner,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub train_examples: Vec<TrainExample>,
    pub val_examples: Vec<TrainExample>,
    pub classifier_accuracy: f64,
    /// Mean KL per training sample for the returned parameters.
    pub mean_kl: f64,
    pub posterior_collapse: bool,
}

/// Splits `n` indices into `(train, val)`; the val share is
/// `floor(n * fraction)` chosen by a seeded shuffle.
fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (n as f64 * fraction).floor() as usize;
    let val = idx.split_off(n - n_val);
    idx.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (idx, val)
}

/// Batch-size weighted mean of the losses over all batches.
fn epoch_loss(
    model: &CvaeModel,
    paired: &[TrainExample],
    unpaired: &[TrainExample],
    settings: &LossSettings,
    batch_size: usize,
    seed: u64,
) -> Result<Option<LossBreakdown>> {
    let total = paired.len() + unpaired.len();
    if total == 0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = LossBreakdown::default();
    for batch in make_batches(paired.len(), unpaired.len(), batch_size, seed)? {
        let items = batch_items(&batch, paired, unpaired);
        let b = model.total_loss(&items, settings, &mut rng)?;
        acc.add_scaled(&b, items.len() as f64 / total as f64);
    }
    Ok(Some(acc))
}

fn batch_items<'a>(batch: &Batch, paired: &'a [TrainExample], unpaired: &'a [TrainExample]) -> Vec<&'a TrainExample> {
    let pool = if batch.is_paired() { paired } else { unpaired };
    batch.indices().iter().map(|i| &pool[*i]).collect()
}

/// Trains the full system. `on_epoch` sees each epoch's log entry and the
/// current parameters; returning `ControlFlow::Break` ends training early.
pub fn train<F>(data: &TrainingData, cfg: &RunConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog, &StyleCaptioner) -> ControlFlow<()>,
{
    cfg.validate()?;
    if data.paired.is_empty() && data.unpaired.is_empty() {
        return Err(Error::Empty("training corpora".into()));
    }
    if let Some(s) = data.paired.iter().find(|s| s.image_feature.len() != cfg.feature_dim) {
        return Err(Error::Dimension {
            expected: cfg.feature_dim,
            got: s.image_feature.len(),
        });
    }
    let vocab = WordVocabulary::build(data.captions(), cfg.min_count)?;
    let captions: Vec<StyledCaption> = data.captions().cloned().collect();
    let classifier = train_attn_classifier(&captions, &vocab, data.styles.len(), &cfg.classifier_config())?;
    let classifier_accuracy = classifier.accuracy(&captions);

    let dims = ModelDims::from_config(cfg, vocab.len(), data.styles.len());
    let mut captioner = StyleCaptioner {
        config: cfg.clone(),
        styles: data.styles.clone(),
        vocab,
        objects: data.objects.clone(),
        classifier,
        model: CvaeModel::new(dims, cfg.seed),
    };

    let paired_all = data
        .paired
        .iter()
        .map(|s| captioner.example_for(&s.caption, Some(&s.image_feature), &s.object_words))
        .collect::<Result<Vec<_>>>()?;
    let unpaired_all = data
        .unpaired
        .iter()
        .map(|s| captioner.example_for(&s.caption, None, &s.object_words))
        .collect::<Result<Vec<_>>>()?;
    let pick = |all: &[TrainExample], idx: &[usize]| idx.iter().map(|i| all[*i].clone()).collect::<Vec<_>>();
    let (p_tr, p_val) = split_indices(paired_all.len(), cfg.val_fraction, cfg.seed ^ 0x51);
    let (u_tr, u_val) = split_indices(unpaired_all.len(), cfg.val_fraction, cfg.seed ^ 0x52);
    let (paired, paired_val) = (pick(&paired_all, &p_tr), pick(&paired_all, &p_val));
    let (unpaired, unpaired_val) = (pick(&unpaired_all, &u_tr), pick(&unpaired_all, &u_val));
    if paired.is_empty() && unpaired.is_empty() {
        return Err(Error::Empty("training split".into()));
    }

    let settings = LossSettings::from_config(cfg);
    let clip = (cfg.grad_clip > 0.0).then_some(cfg.grad_clip);
    let mut adam = Adam::new(&captioner.model.store, cfg.lr).with_clip_norm(clip);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, CvaeModel)> = None;
    let n_train = (paired.len() + unpaired.len()) as f64;
    let train_examples: Vec<TrainExample> = paired.iter().chain(&unpaired).cloned().collect();

    for epoch in 0..cfg.epochs {
        let batches = make_batches(paired.len(), unpaired.len(), cfg.batch_size, cfg.seed.wrapping_add(epoch as u64 * 7919))?;
        let mut acc = LossBreakdown::default();
        for (step, batch) in batches.iter().enumerate() {
            let items = batch_items(batch, &paired, &unpaired);
            let model = &captioner.model;
            let grads = {
                let mut tape = Tape::new(&model.store);
                let (total, breakdown) = model.batch_loss_on_tape(&mut tape, &items, &settings, &mut rng)?;
                if !breakdown.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        detail: format!("{breakdown:?}"),
                    });
                }
                acc.add_scaled(&breakdown, items.len() as f64 / n_train);
                tape.backward(total)
            };
            adam.step(&mut captioner.model.store, &grads);
            if !captioner.model.store.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    detail: "parameters became non-finite".into(),
                });
            }
        }
        let val = epoch_loss(
            &captioner.model,
            &paired_val,
            &unpaired_val,
            &settings,
            cfg.batch_size,
            cfg.seed ^ 0xba1,
        )?;
        let score = val.map(|v| v.total).unwrap_or(acc.total);
        let improved = best.as_ref().is_none_or(|(b, _, _)| score < *b);
        if improved {
            best = Some((score, epoch, captioner.model.clone()));
        }
        let entry = EpochLog {
            epoch,
            train: acc,
            val,
            mean_kl: acc.kl,
            improved,
        };
        let flow = on_epoch(&entry, &captioner);
        log.push(entry);
        if flow.is_break() {
            break;
        }
    }

    let best_epoch = match best {
        Some((_, epoch, model)) => {
            captioner.model = model;
            epoch
        }
        None => 0,
    };
    let mean_kl = captioner.model.mean_kl(&train_examples)?;
    Ok(TrainOutcome {
        captioner,
        log,
        best_epoch,
        train_examples,
        val_examples: paired_val.into_iter().chain(unpaired_val).collect(),
        classifier_accuracy,
        mean_kl,
        posterior_collapse: mean_kl < COLLAPSE_THRESHOLD,
    })
}
