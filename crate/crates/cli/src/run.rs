//! `train` and `sweep-lambda`: per-seed run directories, locking, resume.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use arnet_core::checkpoint::{CaptionRun, Checkpoint};
use arnet_core::config::{ExperimentConfig, TaskKind};
use arnet_core::pmnist::{classify_eval, PmnistRecord, PmnistTrainer};
use arnet_core::seq2seq::{EpochRecord, Stage, Trainer};
use serde_json::{json, Value};

use crate::data::{caption_data, pmnist_data, CaptionData, CaptionSplit, PmnistData};
use crate::error::{data, usage, CliError, CliResult, Context};
use crate::evaluate::{accuracy_json, caption_metrics, discrepancy_report, metrics_json, DecodeOptions};

/// Exclusive ownership of a run directory for the life of the value.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub const FILE: &'static str = "LOCK";

    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).at(dir.display())?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&path).unwrap_or_default();
                Err(data(format!(
                    "{} is locked by another training process (pid {}); remove {} if that process is gone",
                    dir.display(),
                    owner.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(CliError::Data(format!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Where epoch lines and progress messages go.
pub struct Sink<'a> {
    pub out: &'a mut dyn Write,
    pub quiet: bool,
}

impl Sink<'_> {
    pub fn line(&mut self, v: &Value) -> CliResult<()> {
        writeln!(self.out, "{v}")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

struct RunDir {
    dir: PathBuf,
    _lock: DirLock,
}

impl RunDir {
    fn open(dir: PathBuf) -> CliResult<Self> {
        let lock = DirLock::acquire(&dir)?;
        Ok(RunDir { dir, _lock: lock })
    }

    fn latest(&self) -> PathBuf {
        self.dir.join("latest.ckpt")
    }

    fn stage1(&self) -> PathBuf {
        self.dir.join("stage1.ckpt")
    }

    fn final_ckpt(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    fn history(&self) -> PathBuf {
        self.dir.join("history.jsonl")
    }

    fn result(&self) -> PathBuf {
        self.dir.join("result.json")
    }

    /// The saved run to continue from, if any.
    fn existing(&self, resume: bool) -> CliResult<Option<Checkpoint>> {
        let p = self.latest();
        if !p.exists() {
            return Ok(None);
        }
        if !resume {
            return Err(usage(format!(
                "{} already holds a run; pass --resume to continue it or pick another output_dir",
                self.dir.display()
            )));
        }
        let (ck, _) = Checkpoint::load(&p).at(p.display())?;
        Ok(Some(ck))
    }

    fn rewrite_history(&self, lines: &[Value]) -> CliResult<File> {
        let mut f = File::create(self.history())?;
        for l in lines {
            writeln!(f, "{l}")?;
        }
        Ok(f)
    }
}

pub fn seed_dir(output_dir: &Path, seed: u64) -> PathBuf {
    output_dir.join(format!("seed-{seed}"))
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Stage1 => "stage1",
        Stage::Stage2 => "stage2",
    }
}

pub fn caption_line(seed: u64, r: &EpochRecord) -> Value {
    json!({
        "seed": seed,
        "epoch": r.epoch,
        "stage": stage_name(r.stage),
        "stage_epoch": r.stage_epoch,
        "loss": r.loss,
        "L_AR": r.l_ar,
        "val_metric": r.val_metric,
        "val_metric_name": r.val_metric_name,
        "nll_per_token": r.nll_per_token,
        "token_accuracy": r.token_accuracy,
        "p_gold": r.p_gold,
        "lr": r.lr,
        "attention_checks": r.attention_checks,
    })
}

pub fn pmnist_line(seed: u64, r: &PmnistRecord) -> Value {
    json!({
        "seed": seed,
        "epoch": r.epoch,
        "stage": stage_name(r.stage),
        "stage_epoch": r.stage_epoch,
        "loss": r.loss,
        "L_AR": r.l_ar,
        "val_metric": r.val_metric,
        "val_metric_name": "accuracy",
        "train_accuracy": r.train_accuracy,
        "lr": r.lr,
    })
}

fn progress_note(sink: &Sink, seed: u64, line: &Value) {
    sink.note(format!(
        "seed {seed} epoch {} {} loss {:.5} L_AR {:.5} {} {:.5}",
        line["epoch"], line["stage"].as_str().unwrap_or(""), line["loss"].as_f64().unwrap_or(f64::NAN),
        line["L_AR"].as_f64().unwrap_or(f64::NAN),
        line["val_metric_name"].as_str().unwrap_or(""),
        line["val_metric"].as_f64().unwrap_or(f64::NAN),
    ));
}

fn decode_opts(cfg: &ExperimentConfig) -> DecodeOptions {
    DecodeOptions {
        beam_size: Some(cfg.training.beam_size),
        max_len: cfg.training.max_len,
        length_normalize: cfg.training.length_normalize,
    }
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

/// Train every configured seed; returns the result file of each.
pub fn train(cfg: &ExperimentConfig, resume: bool, sink: &mut Sink) -> CliResult<Vec<PathBuf>> {
    let mut results = Vec::new();
    if cfg.task == TaskKind::Pmnist {
        let d = pmnist_data(cfg)?;
        for &seed in &cfg.seeds {
            results.push(train_pmnist_seed(cfg, &d, seed, resume, sink)?);
        }
    } else {
        let d = caption_data(cfg)?;
        for &seed in &cfg.seeds {
            results.push(train_caption_seed(cfg, &d, seed, resume, sink)?);
        }
    }
    Ok(results)
}

fn new_caption_run(cfg: &ExperimentConfig, d: &CaptionData, seed: u64) -> CliResult<CaptionRun> {
    let model = cfg.model_config(d.source, d.tgt_vocab.len());
    Ok(CaptionRun {
        task: cfg.task,
        trainer: Trainer::init(model, cfg.training_config(seed))?,
        src_vocab: d.src_vocab.clone(),
        tgt_vocab: d.tgt_vocab.clone(),
    })
}

fn check_caption_resume(cfg: &ExperimentConfig, d: &CaptionData, seed: u64, ck: Checkpoint) -> CliResult<CaptionRun> {
    ck.expect_task(cfg.task)?;
    let Checkpoint::Caption(run) = ck else {
        return Err(data("checkpoint holds a classifier"));
    };
    let fresh_model = cfg.model_config(d.source, d.tgt_vocab.len());
    if run.trainer.config != cfg.training_config(seed) || run.trainer.model.config != fresh_model {
        return Err(usage("configuration differs from the checkpoint being resumed"));
    }
    if run.tgt_vocab != d.tgt_vocab || run.src_vocab != d.src_vocab {
        return Err(data("training data changed since the checkpoint was written"));
    }
    Ok(*run)
}

fn val_examples(d: &CaptionData) -> &[arnet_core::seq2seq::Example] {
    d.val.as_ref().map(|v| &v.examples[..]).unwrap_or(&[])
}

fn train_caption_seed(
    cfg: &ExperimentConfig,
    d: &CaptionData,
    seed: u64,
    resume: bool,
    sink: &mut Sink,
) -> CliResult<PathBuf> {
    let rd = RunDir::open(seed_dir(&cfg.output_dir, seed))?;
    let mut run = match rd.existing(resume)? {
        Some(ck) => check_caption_resume(cfg, d, seed, ck)?,
        None => new_caption_run(cfg, d, seed)?,
    };
    let lines: Vec<Value> = run.trainer.history.iter().map(|r| caption_line(seed, r)).collect();
    let mut hist = rd.rewrite_history(&lines)?;
    let val = val_examples(d);
    loop {
        let t = &mut run.trainer;
        while t.stage_complete() {
            t.finish_stage()?;
        }
        if t.progress.done {
            break;
        }
        let rec = t.train_epoch(&d.train.examples, val)?;
        if t.progress.stage == Stage::Stage1 && t.stage_complete() {
            Checkpoint::Caption(Box::new(run.clone())).save(&rd.stage1(), Some(cfg))?;
        }
        let t = &mut run.trainer;
        if t.stage_complete() {
            t.finish_stage()?;
        }
        Checkpoint::Caption(Box::new(run.clone())).save(&rd.latest(), Some(cfg))?;
        let line = caption_line(seed, &rec);
        writeln!(hist, "{line}")?;
        progress_note(sink, seed, &line);
        sink.line(&line)?;
    }
    Checkpoint::Caption(Box::new(run.clone())).save(&rd.final_ckpt(), Some(cfg))?;
    let t = &run.trainer;
    let eval_on = if val.is_empty() { &d.train.examples[..] } else { val };
    let (_, val_metric) = t.validation_score(eval_on)?;
    let test = match &d.test {
        Some(s) => Some(metrics_json(&caption_metrics(&t.model, s, &run.tgt_vocab, decode_opts(cfg))?.0)),
        None => None,
    };
    let stage1_epochs = t.history.iter().filter(|r| r.stage == Stage::Stage1).count();
    let result = json!({
        "seed": seed,
        "task": cfg.task.as_str(),
        "epochs": t.progress.global_epoch,
        "stage1_epochs": stage1_epochs,
        "stage2_epochs": t.progress.global_epoch - stage1_epochs,
        "val_metric_name": t.config.stage2_metric,
        "val_metric": val_metric,
        "test": test,
        "checkpoint": path_str(&rd.final_ckpt()),
        "stage1_checkpoint": rd.stage1().exists().then(|| path_str(&rd.stage1())),
        "history": path_str(&rd.history()),
    });
    fs::write(rd.result(), serde_json::to_string_pretty(&result)? + "\n")?;
    Ok(rd.result())
}

fn check_pmnist_resume(cfg: &ExperimentConfig, seed: u64, ck: Checkpoint) -> CliResult<PmnistTrainer> {
    ck.expect_task(TaskKind::Pmnist)?;
    let Checkpoint::Pmnist(t) = ck else {
        return Err(data("checkpoint holds a captioning model"));
    };
    if t.config != cfg.pmnist_config(seed) {
        return Err(usage("configuration differs from the checkpoint being resumed"));
    }
    Ok(*t)
}

fn train_pmnist_seed(
    cfg: &ExperimentConfig,
    d: &PmnistData,
    seed: u64,
    resume: bool,
    sink: &mut Sink,
) -> CliResult<PathBuf> {
    let rd = RunDir::open(seed_dir(&cfg.output_dir, seed))?;
    let mut t = match rd.existing(resume)? {
        Some(ck) => check_pmnist_resume(cfg, seed, ck)?,
        None => PmnistTrainer::new(cfg.pmnist_config(seed))?,
    };
    let lines: Vec<Value> = t.history.iter().map(|r| pmnist_line(seed, r)).collect();
    let mut hist = rd.rewrite_history(&lines)?;
    loop {
        while t.stage_complete() {
            t.finish_stage()?;
        }
        if t.progress.done {
            break;
        }
        let rec = t.train_epoch(&d.train, &d.val)?;
        if t.progress.stage == Stage::Stage1 && t.stage_complete() {
            Checkpoint::Pmnist(Box::new(t.clone())).save(&rd.stage1(), Some(cfg))?;
        }
        if t.stage_complete() {
            t.finish_stage()?;
        }
        Checkpoint::Pmnist(Box::new(t.clone())).save(&rd.latest(), Some(cfg))?;
        let line = pmnist_line(seed, &rec);
        writeln!(hist, "{line}")?;
        progress_note(sink, seed, &line);
        sink.line(&line)?;
    }
    Checkpoint::Pmnist(Box::new(t.clone())).save(&rd.final_ckpt(), Some(cfg))?;
    let val_set = if d.val.items.is_empty() { &d.train } else { &d.val };
    let val_metric = classify_eval(&t.model, t.config.permutation_seed, val_set)?;
    let test = match &d.test {
        Some(s) => Some(accuracy_json(&t.model, t.config.permutation_seed, s)?),
        None => None,
    };
    let stage1_epochs = t.history.iter().filter(|r| r.stage == Stage::Stage1).count();
    let result = json!({
        "seed": seed,
        "task": "pmnist",
        "epochs": t.progress.global_epoch,
        "stage1_epochs": stage1_epochs,
        "stage2_epochs": t.progress.global_epoch - stage1_epochs,
        "val_metric_name": "accuracy",
        "val_metric": val_metric,
        "test": test,
        "checkpoint": path_str(&rd.final_ckpt()),
        "stage1_checkpoint": rd.stage1().exists().then(|| path_str(&rd.stage1())),
        "history": path_str(&rd.history()),
    });
    fs::write(rd.result(), serde_json::to_string_pretty(&result)? + "\n")?;
    Ok(rd.result())
}

fn lambda_label(l: f64) -> String {
    format!("lambda-{l:?}")
}

/// Train stage 1 once per seed, then branch stage 2 for every value in
/// `grid`. Stage 1 never sees the reconstructor, so every branch matches a
/// full run at that weight. Returns one row per (seed, lambda).
pub fn sweep(cfg: &ExperimentConfig, grid: &[f64], sink: &mut Sink) -> CliResult<Vec<Value>> {
    if grid.is_empty() {
        return Err(usage("lambda grid is empty"));
    }
    if let Some(l) = grid.iter().find(|l| !(**l >= 0.0)) {
        return Err(usage(format!("lambda {l} is negative")));
    }
    let dir = cfg.output_dir.join("sweep");
    let _lock = DirLock::acquire(&dir)?;
    let mut rows_file = File::create(dir.join("sweep.jsonl"))?;
    let mut rows = Vec::new();
    let mut emit = |row: Value, sink: &mut Sink| -> CliResult<()> {
        writeln!(rows_file, "{row}")?;
        sink.line(&row)?;
        rows.push(row);
        Ok(())
    };
    if cfg.task == TaskKind::Pmnist {
        let d = pmnist_data(cfg)?;
        for &seed in &cfg.seeds {
            let seed_dir = seed_dir(&dir, seed);
            fs::create_dir_all(&seed_dir)?;
            let mut base = PmnistTrainer::new(cfg.pmnist_config(seed))?;
            while !base.stage_complete() && !base.progress.done {
                let r = base.train_epoch(&d.train, &d.val)?;
                progress_note(sink, seed, &pmnist_line(seed, &r));
            }
            let split_name = if d.test.is_some() { "test" } else { "val" };
            let eval_set = d.test.as_ref().unwrap_or(&d.val);
            for &lambda in grid {
                let mut t = base.clone();
                t.config.lambda = lambda;
                loop {
                    while t.stage_complete() {
                        t.finish_stage()?;
                    }
                    if t.progress.done {
                        break;
                    }
                    let r = t.train_epoch(&d.train, &d.val)?;
                    progress_note(sink, seed, &pmnist_line(seed, &r));
                }
                Checkpoint::Pmnist(Box::new(t.clone()))
                    .save(&seed_dir.join(format!("{}.ckpt", lambda_label(lambda))), Some(cfg))?;
                let val_set = if d.val.items.is_empty() { &d.train } else { &d.val };
                emit(
                    json!({
                        "lambda": lambda,
                        "seed": seed,
                        "epochs": t.progress.global_epoch,
                        "val_metric_name": "accuracy",
                        "val_metric": classify_eval(&t.model, t.config.permutation_seed, val_set)?,
                        "eval_split": split_name,
                        "metrics": accuracy_json(&t.model, t.config.permutation_seed, eval_set)?,
                        "discrepancy": null,
                    }),
                    sink,
                )?;
            }
        }
    } else {
        let d = caption_data(cfg)?;
        let val = val_examples(&d);
        let (split_name, eval_split): (&str, &CaptionSplit) = match (&d.test, &d.val) {
            (Some(t), _) => ("test", t),
            (None, Some(v)) => ("val", v),
            (None, None) => ("train", &d.train),
        };
        for &seed in &cfg.seeds {
            let seed_dir = seed_dir(&dir, seed);
            fs::create_dir_all(&seed_dir)?;
            let mut base = new_caption_run(cfg, &d, seed)?;
            while !base.trainer.stage_complete() && !base.trainer.progress.done {
                let r = base.trainer.train_epoch(&d.train.examples, val)?;
                progress_note(sink, seed, &caption_line(seed, &r));
            }
            for &lambda in grid {
                let mut run = base.clone();
                run.trainer.config.lambda = lambda;
                let t = &mut run.trainer;
                loop {
                    while t.stage_complete() {
                        t.finish_stage()?;
                    }
                    if t.progress.done {
                        break;
                    }
                    let r = t.train_epoch(&d.train.examples, val)?;
                    progress_note(sink, seed, &caption_line(seed, &r));
                }
                Checkpoint::Caption(Box::new(run.clone()))
                    .save(&seed_dir.join(format!("{}.ckpt", lambda_label(lambda))), Some(cfg))?;
                let t = &run.trainer;
                let eval_on = if val.is_empty() { &d.train.examples[..] } else { val };
                let (metrics, _) = caption_metrics(&t.model, eval_split, &run.tgt_vocab, decode_opts(cfg))?;
                let (disc, _) = discrepancy_report(&t.model, eval_split, cfg.training.max_len)?;
                emit(
                    json!({
                        "lambda": lambda,
                        "seed": seed,
                        "epochs": t.progress.global_epoch,
                        "val_metric_name": t.config.stage2_metric,
                        "val_metric": t.validation_score(eval_on)?.1,
                        "eval_split": split_name,
                        "metrics": metrics_json(&metrics),
                        "discrepancy": disc,
                    }),
                    sink,
                )?;
            }
        }
    }
    Ok(rows)
}
