use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use stylecap::{Checkpoint, RunConfig};

use crate::ConfigArgs;

pub fn resolve_config(args: &ConfigArgs, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::from_text_with_base(&text, &base)?
        }
        None => base,
    };
    for o in &args.overrides {
        cfg.set(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Parses every non-blank line of a JSONL file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                stylecap::Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(rows: &[T]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("serializes") + "\n")
        .collect()
}

/// Writes to `path`, or stdout when it is absent or `-`.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) if p != Path::new("-") => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        _ => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Splits `style=path`.
pub fn style_path(arg: &str) -> Result<(String, PathBuf)> {
    match arg.split_once('=') {
        Some((s, p)) if !s.trim().is_empty() && !p.is_empty() => Ok((s.trim().to_lowercase(), PathBuf::from(p))),
        _ => bail!("expected STYLE=PATH, got {arg:?}"),
    }
}

/// Non-blank lines of a text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}
