use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::Args;
use stylecap::corpus::{load_paired_corpus, load_unpaired_corpus, FACTUAL};
use stylecap::cvae::LossBreakdown;
use stylecap::{Checkpoint, ObjectVocabulary, RunConfig, StyleSet, TrainingData};

use crate::io::{emit, resolve_config, style_path, to_jsonl};
use crate::ConfigArgs;

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Paired factual corpus, JSONL of `{"feature": [...], "caption": "..."}`.
    #[arg(long)]
    pub paired: PathBuf,
    /// Unpaired stylized corpus as `STYLE=PATH`, one caption per line. Repeatable.
    #[arg(long, value_name = "STYLE=PATH", required = true)]
    pub unpaired: Vec<String>,
    /// Object vocabulary, one word per line.
    #[arg(long)]
    pub objects: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss log as JSONL; defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

fn load_data(args: &TrainArgs, cfg: &RunConfig) -> Result<TrainingData> {
    let unpaired: Vec<(String, PathBuf)> = args.unpaired.iter().map(|a| style_path(a)).collect::<Result<_>>()?;
    if let Some((s, _)) = unpaired.iter().find(|(s, _)| s == FACTUAL) {
        bail!("{s:?} is reserved for the paired corpus");
    }
    let names: Vec<&str> = std::iter::once(FACTUAL).chain(unpaired.iter().map(|(s, _)| s.as_str())).collect();
    let styles = StyleSet::new(&names)?;
    let objects = ObjectVocabulary::load(&args.objects)?;
    let paired = load_paired_corpus(&args.paired, &objects, styles.factual(), cfg.feature_dim)?;
    let mut stylized = Vec::new();
    for (name, path) in &unpaired {
        let label = styles.by_name(name).expect("style was registered");
        stylized.extend(load_unpaired_corpus(path, label, &objects)?);
    }
    Ok(TrainingData {
        styles,
        objects,
        paired,
        unpaired: stylized,
    })
}

fn describe(b: &LossBreakdown) -> String {
    format!(
        "total {:.4} cont {:.4} ce {:.4} kl {:.4} style {:.4}",
        b.total, b.cont, b.ce, b.kl, b.style
    )
}

pub fn run(args: TrainArgs) -> Result<()> {
    let cfg = resolve_config(&args.config, RunConfig::default())?;
    let data = load_data(&args, &cfg)?;
    eprintln!(
        "training on {} paired and {} unpaired captions, styles: {}",
        data.paired.len(),
        data.unpaired.len(),
        data.styles.labels().iter().map(|l| l.name.as_str()).collect::<Vec<_>>().join(", ")
    );
    let outcome = stylecap::train(&data, &cfg, |log, _| {
        let val = log.val.as_ref().map(|v| format!(" | val {}", describe(v))).unwrap_or_default();
        eprintln!("epoch {:>3} {}{val}{}", log.epoch, describe(&log.train), if log.improved { " *" } else { "" });
        ControlFlow::Continue(())
    })?;
    eprintln!(
        "best epoch {}, style classifier accuracy {:.3}, mean KL {:.3}{}",
        outcome.best_epoch,
        outcome.classifier_accuracy,
        outcome.mean_kl,
        if outcome.posterior_collapse { " (posterior collapse)" } else { "" }
    );
    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));
    emit(Some(&log_path), &to_jsonl(&outcome.log))?;
    Checkpoint::new(outcome.captioner, outcome.best_epoch, outcome.log).save(&args.out)?;
    Ok(())
}

pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
