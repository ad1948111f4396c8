use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;
use stylecap::corpus::{load_paired_corpus, tokenize, FACTUAL};
use stylecap::metrics::{
    bleu, cider, distinct_count, distinct_ratio, div_n, perplexity, scene_diversity_report, word_entropy,
    EvalClassifierConfig, EvalStyleClassifier, SceneReport, Smoothing, TrigramLm,
};
use stylecap::toy::ReferenceLine;
use stylecap::{RunConfig, StyleCaptioner};

use crate::generate::GeneratedLine;
use crate::io::{emit, load_checkpoint, read_jsonl, read_lines, style_path};

#[derive(Args)]
pub struct EvaluateArgs {
    /// Checkpoint that produced the captions; its classifier extracts style phrases.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Generated JSONL.
    #[arg(long)]
    pub generated: PathBuf,
    /// JSONL of `{"image_id", "style", "references": [...]}`.
    #[arg(long)]
    pub references: PathBuf,
    /// Stylized training text as `STYLE=PATH`: fits the trigram model and the
    /// style classifier. Repeatable.
    #[arg(long, value_name = "STYLE=PATH", required = true)]
    pub corpus: Vec<String>,
    /// Paired factual JSONL, used as factual text for the style classifier.
    #[arg(long)]
    pub paired: Option<PathBuf>,
    /// Comma-separated scene keywords for a per-scene diversity table.
    #[arg(long, value_delimiter = ',')]
    pub scenes: Vec<String>,
    /// Write the report as JSON here; the table always goes to stdout.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct StyleRow {
    pub style: String,
    pub n: usize,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub cider: f64,
    pub ppl: Option<f64>,
    pub cls: f64,
    pub distinct: usize,
    pub distinct_ratio: Option<f64>,
    pub word_entropy: Option<f64>,
    pub div1: Option<f64>,
    pub div2: Option<f64>,
    /// Mean distinct captions per image when several samples exist.
    pub distinct_per_image: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub styles: Vec<StyleRow>,
    pub scenes: BTreeMap<String, SceneReport>,
}

fn style_row(
    style: &str,
    gens: &[&GeneratedLine],
    refs: &HashMap<(String, String), Vec<Vec<String>>>,
    lm: Option<&TrigramLm>,
    clf: &EvalStyleClassifier,
    captioner: &StyleCaptioner,
) -> Result<StyleRow> {
    let caps: Vec<Vec<String>> = gens.iter().map(|g| tokenize(&g.caption)).collect();
    let mut references = Vec::with_capacity(gens.len());
    for g in gens {
        let r = refs
            .get(&(g.image_id.clone(), style.to_string()))
            .with_context(|| format!("no {style} references for image {:?}", g.image_id))?;
        references.push(r.clone());
    }
    let phrases: Vec<Vec<String>> = caps
        .iter()
        .map(|c| captioner.classifier.phrase_of(c, captioner.config.phrase_ratio).words)
        .filter(|p| !p.is_empty())
        .collect();
    let some = |f: &dyn Fn(&[Vec<String>]) -> stylecap::Result<f64>| -> Result<Option<f64>> {
        Ok(if phrases.is_empty() { None } else { Some(f(&phrases)?) })
    };
    let mut per_image: BTreeMap<&str, Vec<Vec<String>>> = BTreeMap::new();
    for (g, c) in gens.iter().zip(&caps) {
        per_image.entry(&g.image_id).or_default().push(c.clone());
    }
    let multi: Vec<f64> = per_image
        .values()
        .filter(|v| v.len() > 1)
        .map(|v| distinct_count(v) as f64)
        .collect();
    let labelled: Vec<(Vec<String>, String)> = caps.iter().map(|c| (c.clone(), style.to_string())).collect();
    let hits = labelled
        .iter()
        .map(|(c, s)| clf.fires(c, s))
        .collect::<stylecap::Result<Vec<bool>>>()?;
    Ok(StyleRow {
        style: style.to_string(),
        n: caps.len(),
        bleu1: bleu(&caps, &references, 1)?,
        bleu2: bleu(&caps, &references, 2)?,
        bleu3: bleu(&caps, &references, 3)?,
        bleu4: bleu(&caps, &references, 4)?,
        cider: cider(&caps, &references)?,
        ppl: lm.map(|lm| perplexity(lm, &caps)).transpose()?,
        cls: hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64,
        distinct: distinct_count(&phrases),
        distinct_ratio: some(&|p| distinct_ratio(p))?,
        word_entropy: some(&|p| word_entropy(p))?,
        div1: some(&|p| div_n(p, 1))?,
        div2: some(&|p| div_n(p, 2))?,
        distinct_per_image: (!multi.is_empty()).then(|| multi.iter().sum::<f64>() / multi.len() as f64),
    })
}

pub fn evaluate(args: &EvaluateArgs) -> Result<Report> {
    let captioner = load_checkpoint(&args.checkpoint)?.captioner;
    let generated: Vec<GeneratedLine> = read_jsonl(&args.generated)?;
    if generated.is_empty() {
        bail!(stylecap::Error::Empty("generated captions".into()));
    }
    let refs: HashMap<(String, String), Vec<Vec<String>>> = read_jsonl::<ReferenceLine>(&args.references)?
        .into_iter()
        .map(|r| ((r.image_id, r.style), r.references.iter().map(|s| tokenize(s)).collect()))
        .collect();

    let mut corpora: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for arg in &args.corpus {
        let (style, path) = style_path(arg)?;
        let lines = read_lines(&path)?.into_iter().map(|l| tokenize(&l)).filter(|t| !t.is_empty());
        corpora.entry(style).or_default().extend(lines);
    }
    if let Some(path) = &args.paired {
        let samples = load_paired_corpus(path, &captioner.objects, captioner.styles.factual(), captioner.config.feature_dim)?;
        corpora
            .entry(FACTUAL.to_string())
            .or_default()
            .extend(samples.into_iter().map(|s| s.caption.tokens));
    }
    let labelled: Vec<(Vec<String>, String)> = corpora
        .iter()
        .flat_map(|(s, caps)| caps.iter().map(move |c| (c.clone(), s.clone())))
        .collect();
    let clf = EvalStyleClassifier::train(&labelled, &EvalClassifierConfig::default())?;
    let lms: BTreeMap<&str, TrigramLm> = corpora
        .iter()
        .filter(|(s, _)| s.as_str() != FACTUAL)
        .map(|(s, caps)| Ok((s.as_str(), TrigramLm::train(caps, TrigramLm::DEFAULT_WEIGHTS, Smoothing::AddOne)?)))
        .collect::<stylecap::Result<_>>()?;

    let mut by_style: BTreeMap<&str, Vec<&GeneratedLine>> = BTreeMap::new();
    for g in &generated {
        by_style.entry(&g.style).or_default().push(g);
    }
    let mut styles = Vec::new();
    let mut scenes = BTreeMap::new();
    for (style, gens) in &by_style {
        if !clf.styles.iter().any(|s| s == style) {
            bail!(stylecap::Error::InvalidArgument(format!("no corpus given for style {style:?}")));
        }
        styles.push(style_row(style, gens, &refs, lms.get(style), &clf, &captioner)?);
        if !args.scenes.is_empty() {
            let caps: Vec<Vec<String>> = gens.iter().map(|g| tokenize(&g.caption)).collect();
            let keys: Vec<&str> = args.scenes.iter().map(String::as_str).collect();
            let report = scene_diversity_report(&caps, &keys, |c| {
                captioner.classifier.phrase_of(c, captioner.config.phrase_ratio).words
            });
            scenes.insert(style.to_string(), report);
        }
    }
    let inputs = BTreeMap::from([
        ("checkpoint".to_string(), args.checkpoint.display().to_string()),
        ("generated".to_string(), args.generated.display().to_string()),
        ("references".to_string(), args.references.display().to_string()),
        ("corpus".to_string(), args.corpus.join(" ")),
        (
            "paired".to_string(),
            args.paired.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        ),
    ]);
    Ok(Report {
        config: captioner.config,
        inputs,
        styles,
        scenes,
    })
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.prec$}"))
}

/// Config echo as `#` lines, then aligned metric tables.
pub fn render_table(report: &Report) -> String {
    let mut out = String::new();
    for (k, v) in &report.inputs {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    for line in report.config.to_text().lines() {
        out.push_str(&format!("# {line}\n"));
    }
    let head = [
        "style", "n", "B1", "B2", "B3", "B4", "CIDEr", "ppl", "cls", "distinct", "d_ratio", "entropy", "div1", "div2",
        "per_img",
    ];
    let mut rows: Vec<Vec<String>> = vec![head.iter().map(|s| s.to_string()).collect()];
    for r in &report.styles {
        rows.push(vec![
            r.style.clone(),
            r.n.to_string(),
            format!("{:.1}", 100.0 * r.bleu1),
            format!("{:.1}", 100.0 * r.bleu2),
            format!("{:.1}", 100.0 * r.bleu3),
            format!("{:.1}", 100.0 * r.bleu4),
            format!("{:.1}", 100.0 * r.cider),
            fmt_opt(r.ppl, 2),
            format!("{:.1}", 100.0 * r.cls),
            r.distinct.to_string(),
            fmt_opt(r.distinct_ratio, 3),
            fmt_opt(r.word_entropy, 3),
            fmt_opt(r.div1, 3),
            fmt_opt(r.div2, 3),
            fmt_opt(r.distinct_per_image, 2),
        ]);
    }
    out.push_str(&align(&rows));
    for (style, rep) in &report.scenes {
        out.push_str(&format!("\nscenes ({style})\n"));
        let mut rows = vec![vec!["scene".to_string(), "samples".into(), "d_ratio".into(), "entropy".into()]];
        for r in &rep.rows {
            rows.push(vec![
                r.scene.clone(),
                r.samples.to_string(),
                fmt_opt(r.scores.map(|s| s.0), 3),
                fmt_opt(r.scores.map(|s| s.1), 3),
            ]);
        }
        rows.push(vec![
            "mean".into(),
            String::new(),
            fmt_opt(rep.mean.map(|s| s.0), 3),
            fmt_opt(rep.mean.map(|s| s.1), 3),
        ]);
        out.push_str(&align(&rows));
    }
    out
}

/// Left-aligns the first column and right-aligns the rest.
fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, cell)| if i == 0 { format!("{cell:<w$}", w = widths[i]) } else { format!("{cell:>w$}", w = widths[i]) })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let report = evaluate(&args)?;
    if let Some(path) = &args.json {
        emit(Some(path), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    }
    print!("{}", render_table(&report));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn align_pads_columns() {
        let rows = vec![
            vec!["a".to_string(), "1".into()],
            vec!["long".to_string(), "100".into()],
        ];
        assert_eq!(align(&rows), "a       1\nlong  100\n");
    }
}
