//! Subcommand implementations.

use std::fs;
use std::io::{BufReader, IsTerminal};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use tokenmark::attacks;
use tokenmark::corpus::{read_jsonl, write_jsonl, CorpusRecord, WatermarkSidecar};
use tokenmark::curvefit;
use tokenmark::detector::{annotate, detect, detect_windowed, DetectionResult};
use tokenmark::evalkit::{calibrate_threshold, curve_samples, evaluate};
use tokenmark::generators::Checkpoint;
use tokenmark::lm::TokenSeq;
use tokenmark::pipeline::generate_watermarked;
use tokenmark::rng::mix64;
use tokenmark::trainer::train;

use crate::config::Config;

const TAG_PROMPT: u64 = 0x50524F4D;
const TAG_CONTINUATION: u64 = 0x434F4E54;
const TAG_WATERMARK: u64 = 0x574D474E;

fn derive(base: u64, tag: u64, index: u64) -> u64 {
    mix64(base ^ mix64(tag) ^ mix64(index.wrapping_mul(0x9E3779B97F4A7C15)))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_records(path: &Path) -> Result<Vec<CorpusRecord>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_jsonl(BufReader::new(file))?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Checkpoint::from_json(&text)?)
}

/// Generator pair for detection-style commands: a checkpoint when given,
/// otherwise the config's initialization.
fn nets_from(cfg: &Config, checkpoint: Option<&Path>) -> Result<(tokenmark::generators::GeneratorNet, tokenmark::generators::GeneratorNet)> {
    match checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            Ok((ck.gamma, ck.delta))
        }
        None => Ok(cfg.init_nets()?),
    }
}

pub fn model_build(cfg: &Config, out: Option<&Path>) -> Result<()> {
    let model = cfg.model.build()?;
    let header = serde_json::to_string_pretty(model.spec())?;
    emit(out, &header)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CorpusKind {
    Prompts,
    Human,
    Unwatermarked,
}

pub fn corpus_generate(
    cfg: &Config,
    kind: CorpusKind,
    count: usize,
    length: Option<usize>,
    seed: Option<u64>,
    out: Option<&Path>,
) -> Result<()> {
    let model = cfg.model.build()?;
    let base = seed.unwrap_or(cfg.corpus_seed);
    let gen_len = length.unwrap_or(cfg.generation.gen_len);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let prompt_seed = derive(base, TAG_PROMPT, i as u64);
        let prompt = model.sample_prompt(cfg.generation.prompt_len, prompt_seed)?;
        let record = match kind {
            CorpusKind::Prompts => CorpusRecord::new(&prompt, prompt_seed),
            CorpusKind::Human => {
                let s = derive(base, TAG_CONTINUATION, i as u64);
                CorpusRecord::new(&model.sample_human_surrogate(&prompt, gen_len, s)?, s)
            }
            CorpusKind::Unwatermarked => {
                let s = derive(base, TAG_CONTINUATION, i as u64);
                CorpusRecord::new(&model.sample_unwatermarked(&prompt, gen_len, s)?, s)
            }
        };
        records.push(record);
    }
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &records)?;
    emit(out, String::from_utf8(buf)?.trim_end())
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainSummary {
    steps: usize,
    checkpoints: Vec<usize>,
    selected_step: usize,
    init_val_z: f64,
    init_val_cosine: f64,
    selected_val_z: f64,
    selected_val_cosine: f64,
}

pub fn train_cmd(cfg: &Config, seed: Option<u64>, out_dir: &Path) -> Result<()> {
    let model = cfg.model.build()?;
    let mut tc = cfg.training.config.clone();
    if let Some(s) = seed {
        tc.data_seed = s;
    }
    let n_prompts = cfg.training.n_train_prompts + tc.n_validation;
    let prompts: Vec<TokenSeq> = (0..n_prompts)
        .map(|i| model.sample_prompt(cfg.generation.prompt_len, derive(cfg.corpus_seed, TAG_PROMPT, i as u64)))
        .collect::<tokenmark::Result<_>>()?;
    let (g0, d0) = cfg.init_nets()?;
    let outcome = train(&tc, &model, cfg.key(), &prompts, g0, d0)?;

    fs::create_dir_all(out_dir)?;
    let mut log_text = String::new();
    for entry in &outcome.log {
        log_text.push_str(&serde_json::to_string(entry)?);
        log_text.push('\n');
    }
    write_text(&out_dir.join("train_log.jsonl"), &log_text)?;
    for scored in &outcome.checkpoints {
        let name = format!("checkpoint_{:06}.json", scored.checkpoint.step);
        write_text(&out_dir.join(name), &scored.checkpoint.to_json()?)?;
    }
    let selected = outcome.selected_checkpoint();
    write_text(&out_dir.join("selected.json"), &selected.checkpoint.to_json()?)?;
    let summary = TrainSummary {
        steps: outcome.log.len(),
        checkpoints: outcome.checkpoints.iter().map(|c| c.checkpoint.step).collect(),
        selected_step: selected.checkpoint.step,
        init_val_z: outcome.init_validation.mean_z,
        init_val_cosine: outcome.init_validation.mean_cosine,
        selected_val_z: selected.validation.mean_z,
        selected_val_cosine: selected.validation.mean_cosine,
    };
    write_text(&out_dir.join("train_summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained {} steps; selected checkpoint {} (val z {:.4}, val cosine {:.4})",
        summary.steps, summary.selected_step, summary.selected_val_z, summary.selected_val_cosine
    );
    Ok(())
}

pub fn generate_cmd(
    cfg: &Config,
    checkpoint: Option<&Path>,
    count: usize,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let model = cfg.model.build()?;
    let (g, d) = nets_from(cfg, checkpoint)?;
    let base = seed.unwrap_or(cfg.corpus_seed);
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let prompt = model.sample_prompt(cfg.generation.prompt_len, derive(base, TAG_PROMPT, i as u64))?;
        let s = derive(base, TAG_WATERMARK, i as u64);
        let output = generate_watermarked(&model, &g, &d, cfg.key(), &prompt, cfg.generation.gen_len, s)?;
        records.push(CorpusRecord::new(&output.seq, s));
    }
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &records)?;
    write_text(out, String::from_utf8(buf)?.trim_end())?;
    let sidecar = WatermarkSidecar {
        key_id: cfg.key.key_id.clone(),
        records: count,
        gen_len: cfg.generation.gen_len,
        checkpoint: checkpoint.map(|p| p.display().to_string()),
    };
    let meta_path = out.with_extension("meta.json");
    write_text(&meta_path, &serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

pub fn detect_cmd(
    cfg: &Config,
    checkpoint: Option<&Path>,
    input: &Path,
    threshold: Option<f64>,
    window: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let model = cfg.model.build()?;
    let (g, _) = nets_from(cfg, checkpoint)?;
    let threshold = threshold.unwrap_or(cfg.detection.threshold);
    let window = window.or(cfg.detection.window);
    let records = load_records(input)?;
    if records.is_empty() {
        bail!("no records in {}", input.display());
    }
    let mut results: Vec<DetectionResult> = Vec::with_capacity(records.len());
    for record in &records {
        let seq = record.to_seq()?;
        let result = match window {
            Some(w) => detect_windowed(&seq, &g, model.embeddings(), cfg.key(), w, threshold)?,
            None => detect(&seq, &g, model.embeddings(), cfg.key(), threshold)?,
        };
        results.push(result);
    }

    let mut table = String::from("idx      z  green/scored  verdict\n");
    for (i, r) in results.iter().enumerate() {
        table.push_str(&format!(
            "{i:3} {:8.3}  {:5}/{:<6}  {}{}\n",
            r.z,
            r.green_count,
            r.scored,
            if r.verdict { "WATERMARKED" } else { "clean" },
            if r.low_confidence { " (low confidence)" } else { "" },
        ));
    }
    print!("{table}");
    if let Some(path) = out {
        // Machine-readable report: one JSON object per input record.
        let stripped: Vec<serde_json::Value> = results
            .iter()
            .map(|r| {
                serde_json::json!({
                    "z": r.z,
                    "green_count": r.green_count,
                    "T": r.scored,
                    "threshold": r.threshold,
                    "verdict": r.verdict,
                    "window_offset": r.window_offset,
                })
            })
            .collect();
        write_text(path, &serde_json::to_string_pretty(&stripped)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ColorChoice {
    Auto,
    Always,
    Never,
}

pub fn annotate_cmd(
    cfg: &Config,
    checkpoint: Option<&Path>,
    input: &Path,
    index: usize,
    color: ColorChoice,
) -> Result<()> {
    let model = cfg.model.build()?;
    let (g, d) = nets_from(cfg, checkpoint)?;
    let records = load_records(input)?;
    let record = records
        .get(index)
        .with_context(|| format!("record {index} not in {} ({} records)", input.display(), records.len()))?;
    let seq = record.to_seq()?;
    let rows = annotate(&seq, &g, &d, model.embeddings(), cfg.key())?;
    let use_color = match color {
        ColorChoice::Always => true,
        ColorChoice::Never => false,
        ColorChoice::Auto => std::io::stdout().is_terminal(),
    };
    if use_color {
        let mut line = format!("[{}]", seq.tokens[0]);
        for row in &rows {
            let code = if row.green { "32" } else { "31" };
            line.push_str(&format!(" \x1b[{code}m{}\x1b[0m", row.token));
        }
        println!("{line}");
        println!("green = green-list token, red = red-list token; first token unscored");
        for row in &rows {
            println!(
                "pos {:4} token {:5} {} gamma {:.4} delta {:.4}",
                row.position,
                row.token,
                if row.green { "green" } else { "red  " },
                row.gamma,
                row.delta
            );
        }
    } else {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AttackKind {
    CopyPaste,
    Corrupt,
}

#[allow(clippy::too_many_arguments)]
pub fn attack_cmd(
    cfg: &Config,
    kind: AttackKind,
    input: &Path,
    human: Option<&Path>,
    k: usize,
    rate: f64,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let records = load_records(input)?;
    let base = seed.unwrap_or(cfg.corpus_seed);
    let mut attacked = Vec::with_capacity(records.len());
    match kind {
        AttackKind::CopyPaste => {
            let human_path = human.context("--human is required for copy-paste attacks")?;
            let hosts = load_records(human_path)?;
            if hosts.len() < records.len() {
                bail!(
                    "need at least {} human records, found {}",
                    records.len(),
                    hosts.len()
                );
            }
            for (i, (record, host)) in records.iter().zip(&hosts).enumerate() {
                let seq = attacks::copy_paste(
                    &record.to_seq()?,
                    &host.to_seq()?,
                    k,
                    derive(base, 0x4350, i as u64),
                )?;
                attacked.push(CorpusRecord::new(&seq, record.seed));
            }
        }
        AttackKind::Corrupt => {
            let model = cfg.model.build()?;
            for (i, record) in records.iter().enumerate() {
                let seq = attacks::corrupt(
                    &record.to_seq()?,
                    rate,
                    derive(base, 0x4352, i as u64),
                    &model,
                )?;
                attacked.push(CorpusRecord::new(&seq, record.seed));
            }
        }
    }
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &attacked)?;
    write_text(out, String::from_utf8(buf)?.trim_end())?;
    let meta = serde_json::json!({
        "kind": match kind { AttackKind::CopyPaste => "copy-paste", AttackKind::Corrupt => "corrupt" },
        "k": if matches!(kind, AttackKind::CopyPaste) { Some(k) } else { None },
        "rate": if matches!(kind, AttackKind::Corrupt) { Some(rate) } else { None },
        "seed": base,
        "records": attacked.len(),
    });
    write_text(&out.with_extension("meta.json"), &serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn calibrate_cmd(
    cfg: &Config,
    checkpoint: Option<&Path>,
    input: &Path,
    fpr: f64,
    out: Option<&Path>,
) -> Result<()> {
    let model = cfg.model.build()?;
    let (g, _) = nets_from(cfg, checkpoint)?;
    let records = load_records(input)?;
    if records.is_empty() {
        bail!("no null records in {}", input.display());
    }
    let mut null_z = Vec::with_capacity(records.len());
    for record in &records {
        let seq = record.to_seq()?;
        let r = match cfg.detection.window {
            Some(w) => detect_windowed(&seq, &g, model.embeddings(), cfg.key(), w, 0.0)?,
            None => detect(&seq, &g, model.embeddings(), cfg.key(), 0.0)?,
        };
        null_z.push(r.z);
    }
    let threshold = calibrate_threshold(&null_z, fpr)?;
    let report = serde_json::json!({
        "fpr": fpr,
        "threshold": threshold,
        "n_null": null_z.len(),
        "window": cfg.detection.window,
    });
    emit(out, &serde_json::to_string_pretty(&report)?)
}

pub fn evaluate_cmd(cfg: &Config, checkpoint: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let model = cfg.model.build()?;
    let (g, d) = nets_from(cfg, checkpoint)?;
    let mut ec = cfg.evaluation.clone();
    if let Some(s) = seed {
        ec.eval_seed = s;
    }
    if ec.sentence_dim > model.embed_dim() * 4 {
        bail!("sentence_dim {} is implausibly large for embed_dim {}", ec.sentence_dim, model.embed_dim());
    }
    let report = evaluate(&model, &g, &d, cfg.key(), &ec)?;
    emit(out, &serde_json::to_string_pretty(&report)?)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PointsFile {
    Pairs(Vec<(f64, f64)>),
    Objects(Vec<PointObj>),
}

#[derive(Debug, Deserialize)]
struct PointObj {
    x: f64,
    y: f64,
}

pub fn curves_cmd(input: &Path, out: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let parsed: PointsFile = serde_json::from_str(&text)
        .with_context(|| format!("parsing points from {}", input.display()))?;
    let points: Vec<(f64, f64)> = match parsed {
        PointsFile::Pairs(p) => p,
        PointsFile::Objects(objs) => objs.into_iter().map(|p| (p.x, p.y)).collect(),
    };
    let fit = curvefit::fit_tradeoff(&points)?;
    if let Some(csv_path) = csv {
        let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let samples = curve_samples(&fit, lo, hi, 200);
        let mut text = String::from("x,y\n");
        for (x, y) in samples {
            text.push_str(&format!("{x},{y}\n"));
        }
        write_text(csv_path, &text)?;
    }
    emit(out, &serde_json::to_string_pretty(&fit)?)
}

/// Writes a complete default config for reference.
pub fn init_config(out: Option<&Path>) -> Result<()> {
    let cfg = Config::default();
    emit(out, &serde_json::to_string_pretty(&cfg)?)
}

impl std::fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CorpusKind::Prompts => "prompts",
            CorpusKind::Human => "human",
            CorpusKind::Unwatermarked => "unwatermarked",
        };
        f.write_str(s)
    }
}
