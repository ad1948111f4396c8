use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use stylecap::corpus::{tokenize, StyledCaption};
use stylecap::toy::{self, ToyConfig};

use crate::io::{emit, load_checkpoint, read_lines, style_path};

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Captions, one per line.
    #[arg(long)]
    pub captions: PathBuf,
    /// Fraction of tokens kept; defaults to the checkpoint's setting.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Columns: caption, phrase, space-separated attention weights.
pub fn extract(args: ExtractArgs) -> Result<()> {
    let captioner = load_checkpoint(&args.checkpoint)?.captioner;
    let ratio = args.ratio.unwrap_or(captioner.config.phrase_ratio);
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(stylecap::Error::InvalidArgument(format!("ratio {ratio} outside (0, 1]")).into());
    }
    let mut out = String::from("caption\tphrase\tweights\n");
    for line in read_lines(&args.captions)? {
        let tokens = tokenize(&line);
        if tokens.is_empty() {
            continue;
        }
        let clf = &captioner.classifier;
        let phrase = clf.phrase_of(&tokens, ratio);
        let weights: Vec<String> = clf.style_intensity(&tokens).iter().map(|w| format!("{w:.6}")).collect();
        out.push_str(&format!("{}\t{}\t{}\n", tokens.join(" "), phrase.text(), weights.join(" ")));
    }
    emit(args.out.as_deref(), &out)
}

#[derive(Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labelled captions as `STYLE=PATH`, one caption per line. Repeatable.
    #[arg(long, value_name = "STYLE=PATH", required = true)]
    pub captions: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One row per caption: style label, then the posterior mean.
pub fn dump(args: DumpArgs) -> Result<()> {
    let captioner = load_checkpoint(&args.checkpoint)?.captioner;
    let dim = captioner.model.dims.latent_dim;
    let header: Vec<String> = std::iter::once("style".to_string()).chain((0..dim).map(|i| format!("mu{i}"))).collect();
    let mut out = header.join(",") + "\n";
    for arg in &args.captions {
        let (style, path) = style_path(arg)?;
        let label = captioner.style(&style)?.clone();
        for (i, line) in read_lines(&path)?.iter().enumerate() {
            let caption = StyledCaption::from_text(line, label.clone())
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
            let phrase = captioner
                .classifier
                .extract_style_phrase(&caption, captioner.config.phrase_ratio)?;
            let post = captioner.model.encode_posterior(&captioner.vocab.encode(&phrase.words));
            let values: Vec<String> = post.mean.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{},{}\n", label.name, values.join(",")));
        }
    }
    emit(args.out.as_deref(), &out)
}

#[derive(Args)]
pub struct ToyArgs {
    /// Directory to write into; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = ToyConfig::default().n_paired)]
    pub n_paired: usize,
    #[arg(long, default_value_t = ToyConfig::default().n_unpaired_per_style)]
    pub n_unpaired: usize,
    #[arg(long, default_value_t = ToyConfig::default().n_test)]
    pub n_test: usize,
    #[arg(long, default_value_t = ToyConfig::default().feature_dim)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = ToyConfig::default().seed)]
    pub seed: u64,
}

pub fn toy(args: ToyArgs) -> Result<()> {
    let cfg = ToyConfig {
        n_paired: args.n_paired,
        n_unpaired_per_style: args.n_unpaired,
        n_test: args.n_test,
        feature_dim: args.feature_dim,
        seed: args.seed,
        ..ToyConfig::default()
    };
    toy::generate(&cfg)?.write_to(&args.out)?;
    eprintln!("wrote toy corpus to {}", args.out.display());
    Ok(())
}
