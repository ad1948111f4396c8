mod evaluate;
mod generate;
mod inspect;
mod io;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "stylecap", version, about = "Stylized image captioning from unpaired stylistic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides, applied in that order.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set lambda_kl=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a captioner and write a checkpoint.
    Train(train::TrainArgs),
    /// Caption image features in a target style.
    Generate(generate::GenerateArgs),
    /// Score generated captions against references and style corpora.
    Evaluate(evaluate::EvaluateArgs),
    /// Print the attention-selected style phrase of each caption as TSV.
    ExtractPhrases(inspect::ExtractArgs),
    /// Print posterior means of caption phrases as CSV.
    DumpLatents(inspect::DumpArgs),
    /// Write the synthetic toy corpus to a directory.
    MakeToyData(inspect::ToyArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => train::run(a),
        Command::Generate(a) => generate::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::ExtractPhrases(a) => inspect::extract(a),
        Command::DumpLatents(a) => inspect::dump(a),
        Command::MakeToyData(a) => inspect::toy(a),
    }
}

/// One JSON object on one line: `{"error": kind, "message": text}`.
fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<stylecap::Error>())
        .map_or("cli", stylecap::Error::kind);
    let message = format!("{err:#}").replace('\n', " ");
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn error_line_reports_core_kind() {
        let err = Err::<(), _>(stylecap::Error::Config("bad".into()))
            .context("loading\nconfig")
            .unwrap_err();
        let v: serde_json::Value = serde_json::from_str(&error_line(&err)).unwrap();
        assert_eq!(v["error"], "config");
        assert!(!v["message"].as_str().unwrap().contains('\n'));
    }

    #[test]
    fn error_line_defaults_to_cli_kind() {
        let v: serde_json::Value = serde_json::from_str(&error_line(&anyhow::anyhow!("nope"))).unwrap();
        assert_eq!(v["error"], "cli");
    }

    #[test]
    fn parser_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
