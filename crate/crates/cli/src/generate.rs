use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stylecap::toy::FeatureLine;
use stylecap::StyleCaptioner;

use crate::io::{emit, load_checkpoint, read_jsonl, to_jsonl};
use crate::train::with_suffix;

/// Config keys that may change after training.
pub const INFERENCE_KEYS: [&str; 6] = [
    "recheck_threshold",
    "n_candidates",
    "max_reject_attempts",
    "max_len",
    "disable_recheck",
    "phrase_ratio",
];

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL of `{"image_id": "...", "feature": [...]}`.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub style: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Captions per image.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Override an inference setting, e.g. `--set disable_recheck=true`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output JSONL; the resolved config is echoed to `<out>.cfg`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedLine {
    pub image_id: String,
    pub style: String,
    pub caption: String,
    pub style_score: f64,
    pub n_rejects: usize,
}

pub fn apply_overrides(captioner: &mut StyleCaptioner, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let key = o.split_once('=').map_or(o.as_str(), |(k, _)| k).trim();
        if !INFERENCE_KEYS.contains(&key) {
            bail!(stylecap::Error::Config(format!(
                "{key:?} cannot be changed after training; allowed: {}",
                INFERENCE_KEYS.join(", ")
            )));
        }
        captioner.config.set(o)?;
    }
    captioner.config.validate()?;
    Ok(())
}

/// Captions every feature line `samples` times. Seeds are drawn in order
/// from a generator seeded with `seed`, so output depends only on inputs.
pub fn caption_all(
    captioner: &StyleCaptioner,
    features: &[FeatureLine],
    style: &str,
    samples: usize,
    seed: u64,
) -> Result<Vec<GeneratedLine>> {
    let label = captioner.style(style)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(features.len() * samples);
    for line in features {
        for _ in 0..samples {
            let g = captioner.caption_image(&line.feature, label, seeds.next_u64())?;
            out.push(GeneratedLine {
                image_id: line.image_id.clone(),
                style: label.name.clone(),
                caption: g.caption.join(" "),
                style_score: g.style_score,
                n_rejects: g.n_rejects,
            });
        }
    }
    Ok(out)
}

pub fn run(args: GenerateArgs) -> Result<()> {
    if args.samples == 0 {
        bail!(stylecap::Error::InvalidArgument("samples must be at least 1".into()));
    }
    let mut captioner = load_checkpoint(&args.checkpoint)?.captioner;
    apply_overrides(&mut captioner, &args.overrides)?;
    let features: Vec<FeatureLine> = read_jsonl(&args.features)?;
    let rows = caption_all(&captioner, &features, &args.style, args.samples, args.seed)?;
    emit(Some(&args.out), &to_jsonl(&rows))?;
    let echo = format!(
        "# checkpoint = {}\n# style = {}\n# seed = {}\n# samples = {}\n{}",
        args.checkpoint.display(),
        args.style,
        args.seed,
        args.samples,
        captioner.config.to_text()
    );
    emit(Some(&with_suffix(&args.out, ".cfg")), &echo)
}
