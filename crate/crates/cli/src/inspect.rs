//! Read-only commands over a saved checkpoint: eval, diagnose,
//! export-embeddings.

use std::fs;
use std::path::{Path, PathBuf};

use arnet_core::checkpoint::{CaptionRun, Checkpoint};
use arnet_core::config::ExperimentConfig;
use arnet_core::diagnostics::{embeddings_tsv, TraceMode};
use arnet_core::error::{CheckpointError, Error};
use arnet_core::pmnist::{Permutation, PIXELS};
use serde_json::{json, Value};

use crate::data::{caption_split, detect, pmnist_split, CaptionSplit, Format};
use crate::error::{data, CliError, CliResult, Context};
use crate::evaluate::{accuracy_json, caption_metrics, discrepancy_report, metrics_json, DecodeOptions};

pub struct Loaded {
    pub path: PathBuf,
    pub checkpoint: Checkpoint,
    pub experiment: Option<ExperimentConfig>,
}

pub fn load_checkpoint(path: &Path) -> CliResult<Loaded> {
    let (checkpoint, experiment) = Checkpoint::load(path).at(path.display())?;
    Ok(Loaded {
        path: path.to_path_buf(),
        checkpoint,
        experiment,
    })
}

fn mismatch(found: &str, expected: &str) -> CliError {
    Error::from(CheckpointError::Task {
        found: found.into(),
        expected: expected.into(),
    })
    .into()
}

fn caption_run<'a>(l: &'a Loaded, data_prefix: &Path) -> CliResult<&'a CaptionRun> {
    match (&l.checkpoint, detect(data_prefix)?) {
        (Checkpoint::Caption(c), Format::Corpus) => Ok(c),
        (Checkpoint::Caption(c), Format::Idx) => Err(mismatch(c.task.as_str(), "pmnist (IDX data)")),
        (Checkpoint::Pmnist(_), _) => Err(mismatch("pmnist", "a captioning task")),
    }
}

fn caption_data(l: &Loaded, run: &CaptionRun, prefix: &Path, limit: usize) -> CliResult<CaptionSplit> {
    let max_src_len = l.experiment.as_ref().map_or(300, |e| e.max_src_len);
    caption_split(
        prefix,
        run.src_vocab.as_ref(),
        &run.tgt_vocab,
        max_src_len,
        run.trainer.config.max_len,
        limit,
    )
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub greedy: bool,
    /// Overrides the checkpoint's beam width.
    pub beam_size: Option<usize>,
    pub max_len: Option<usize>,
    pub limit: usize,
    pub permutation_seed: Option<u64>,
    pub captions: Option<PathBuf>,
}

pub fn eval(a: &EvalArgs) -> CliResult<Value> {
    let l = load_checkpoint(&a.checkpoint)?;
    match &l.checkpoint {
        Checkpoint::Pmnist(t) => {
            if detect(&a.data)? != Format::Idx {
                return Err(mismatch("pmnist", "a captioning task (text corpus)"));
            }
            let seed = a.permutation_seed.unwrap_or(t.config.permutation_seed);
            let set = pmnist_split(&a.data, &Permutation::from_seed(seed, PIXELS), a.limit)?;
            let model = Checkpoint::pmnist_eval_model(t);
            let mut out = accuracy_json(model, t.config.permutation_seed, &set)?;
            out["task"] = json!("pmnist");
            out["checkpoint"] = json!(l.path.display().to_string());
            out["data"] = json!(a.data.display().to_string());
            Ok(out)
        }
        Checkpoint::Caption(_) => {
            let run = caption_run(&l, &a.data)?;
            let split = caption_data(&l, run, &a.data, a.limit)?;
            let beam_size = if a.greedy { None } else { Some(a.beam_size.unwrap_or(run.trainer.config.beam_size)) };
            let opts = DecodeOptions {
                beam_size,
                max_len: a.max_len.unwrap_or(run.trainer.config.max_len),
                length_normalize: run.trainer.config.length_normalize,
            };
            if opts.beam_size == Some(0) {
                return Err(CliError::Usage("beam size must be at least 1".into()));
            }
            let (m, hyps) = caption_metrics(run.eval_model(), &split, &run.tgt_vocab, opts)?;
            if let Some(p) = &a.captions {
                let text: String = hyps.iter().map(|h| h.join(" ") + "\n").collect();
                fs::write(p, text).at(p.display())?;
            }
            let mut out = metrics_json(&m);
            out["task"] = json!(run.task.as_str());
            out["checkpoint"] = json!(l.path.display().to_string());
            out["data"] = json!(a.data.display().to_string());
            out["decoder"] = json!(if beam_size.is_some() { "beam" } else { "greedy" });
            out["beam_size"] = json!(beam_size);
            out["max_len"] = json!(opts.max_len);
            Ok(out)
        }
    }
}

pub struct DiagnoseArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub max_len: Option<usize>,
    pub limit: usize,
    pub tsv: Option<PathBuf>,
}

pub fn diagnose(a: &DiagnoseArgs) -> CliResult<Value> {
    let l = load_checkpoint(&a.checkpoint)?;
    let run = caption_run(&l, &a.data)?;
    let split = caption_data(&l, run, &a.data, a.limit)?;
    let max_len = a.max_len.unwrap_or(run.trainer.config.max_len);
    let (report, traces) = discrepancy_report(run.eval_model(), &split, max_len)?;
    if let Some(p) = &a.tsv {
        fs::write(p, embeddings_tsv(&traces)?).at(p.display())?;
    }
    Ok(json!({
        "task": run.task.as_str(),
        "checkpoint": l.path.display().to_string(),
        "data": a.data.display().to_string(),
        "max_len": max_len,
        "d_mc": report.d_mc,
        "d_pw": report.d_pw,
        "pairs": report.pairs,
        "stop_counts": report.stop_counts,
        "embeddings": a.tsv.as_ref().map(|p| p.display().to_string()),
    }))
}

pub struct ExportArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    /// `None` exports both modes.
    pub mode: Option<TraceMode>,
    pub max_len: Option<usize>,
    pub limit: usize,
}

pub fn export(a: &ExportArgs) -> CliResult<Value> {
    let l = load_checkpoint(&a.checkpoint)?;
    let run = caption_run(&l, &a.data)?;
    let split = caption_data(&l, run, &a.data, a.limit)?;
    let max_len = a.max_len.unwrap_or(run.trainer.config.max_len);
    let (_, traces) = discrepancy_report(run.eval_model(), &split, max_len)?;
    let kept: Vec<_> = traces
        .into_iter()
        .filter(|t| a.mode.is_none_or(|m| m == t.mode))
        .collect();
    if kept.is_empty() {
        return Err(data("no traces to export"));
    }
    fs::write(&a.out, embeddings_tsv(&kept)?).at(a.out.display())?;
    Ok(json!({
        "path": a.out.display().to_string(),
        "rows": kept.len(),
        "dim": kept[0].hidden.len(),
        "mode": a.mode.map_or("both", |m| m.as_str()),
    }))
}
