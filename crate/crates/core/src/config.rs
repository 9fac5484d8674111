//! Experiment configuration: flat `key = value` files with `#` comments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::RegularizerMode;
use crate::pmnist::PmnistConfig;
use crate::seq2seq::model::{ArnetMode, InitMode, ModelConfig, SourceKind};
use crate::seq2seq::train::{ScheduledSampling, StopMetric, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Token source sequences, text targets.
    CaptionSeq,
    /// Precomputed feature files as sources.
    CaptionFeat,
    Pmnist,
    /// Token task whose target copies the source.
    CopyToy,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::CaptionSeq => "caption-seq",
            TaskKind::CaptionFeat => "caption-feat",
            TaskKind::Pmnist => "pmnist",
            TaskKind::CopyToy => "copy-toy",
        }
    }

    pub fn is_caption(self) -> bool {
        !matches!(self, TaskKind::Pmnist)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [TaskKind::CaptionSeq, TaskKind::CaptionFeat, TaskKind::Pmnist, TaskKind::CopyToy]
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Model shape settings shared by every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    /// 0 means `emb_dim`.
    pub src_emb_dim: usize,
    /// 0 means `hidden_dim`.
    pub src_hidden_dim: usize,
    pub attention: bool,
    pub attn_dim: usize,
    pub init_mode: InitMode,
    pub arnet_dim: usize,
    pub init_bound: f64,
    pub forget_bias: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            emb_dim: 512,
            hidden_dim: 512,
            src_emb_dim: 0,
            src_hidden_dim: 0,
            attention: true,
            attn_dim: 0,
            init_mode: InitMode::StateInit,
            arnet_dim: 0,
            init_bound: 0.08,
            forget_bias: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    /// Corpus prefix (`<prefix>.src` / `<prefix>.tgt`) or, for pmnist, IDX
    /// prefix (`<prefix>-images-idx3-ubyte` / `<prefix>-labels-idx1-ubyte`).
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub min_count: usize,
    pub max_src_len: usize,
    pub model: ModelSettings,
    pub training: TrainingConfig,
    pub permutation_seed: u64,
    pub val_size: usize,
    /// Cap on training examples read (0 = all).
    pub train_limit: usize,
    pub test_limit: usize,
    pub lambda_grid: Vec<f64>,
    pub schedule: ScheduleSettings,
}

/// Linear scheduled-sampling parameters, kept even while switched off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSettings {
    pub enabled: bool,
    pub start: f64,
    pub slope: f64,
    pub floor: f64,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        ScheduleSettings {
            enabled: false,
            start: 1.0,
            slope: 0.05,
            floor: 0.75,
        }
    }
}

/// Documented keys: `(key, default, meaning)`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("task", "copy-toy", "caption-seq | caption-feat | pmnist | copy-toy"),
    ("train", "(unset)", "training data prefix"),
    ("val", "(unset)", "validation data prefix; pmnist holds out val_size training images instead"),
    ("test", "(unset)", "test data prefix"),
    ("output_dir", "runs", "checkpoints, logs and reports"),
    ("seeds", "1", "comma-separated seeds; one run per seed"),
    ("min_count", "5 (copy-toy: 1)", "vocabulary frequency threshold"),
    ("max_src_len", "300", "source token truncation"),
    ("emb_dim", "512", "decoder embedding size"),
    ("hidden_dim", "512 (pmnist: 128)", "decoder / classifier LSTM size"),
    ("src_emb_dim", "0", "encoder embedding size, 0 = emb_dim"),
    ("src_hidden_dim", "0", "encoder LSTM size, 0 = hidden_dim"),
    ("attention", "true", "attentive decoder cell"),
    ("attn_dim", "0", "attention projection size, 0 = hidden_dim"),
    ("init_mode", "state_init", "state_init | first_input"),
    ("arnet_dim", "0", "reconstructor LSTM size, 0 = hidden_dim"),
    ("init_bound", "0.08", "uniform init range"),
    ("forget_bias", "1.0", "initial forget-gate bias"),
    ("lambda", "0.01", "reconstruction weight"),
    ("lr_stage1", "5e-4 (pmnist: 1e-3)", "stage 1 Adam learning rate"),
    ("lr_stage2", "1e-4 (pmnist: 5e-4)", "stage 2 Adam learning rate"),
    ("batch_size", "64", "examples per update"),
    ("max_len", "32", "caption length limit including BOS"),
    ("beam_size", "3", "beam width at evaluation"),
    ("length_normalize", "true", "rank finished beams by log-prob per token"),
    ("scheduled_sampling", "off", "off | linear"),
    ("ss_start", "1.0", "linear schedule start probability of feeding gold"),
    ("ss_slope", "0.05", "linear schedule decrease per epoch"),
    ("ss_floor", "0.75", "linear schedule floor"),
    ("regularizer", "none", "none | zoneout | recurrent_dropout"),
    ("zoneout_h", "0.1", "zoneout rate on h"),
    ("zoneout_c", "0.1", "zoneout rate on c"),
    ("dropout_rate", "0.1", "recurrent dropout rate on the candidate"),
    ("patience", "10", "early-stopping patience in epochs, 0 disables"),
    ("epochs_stage1", "30", "stage 1 epoch budget"),
    ("epochs_stage2", "20", "stage 2 epoch budget"),
    ("clip_norm", "5.0", "global gradient norm clip, 0 disables"),
    ("stage1_metric", "val_nll", "val_nll | bleu4"),
    ("stage2_metric", "val_nll", "val_nll | bleu4"),
    ("arnet_mode", "joint", "stage 2 reconstructor: joint | detached | off"),
    ("check_attention", "false", "assert attention weights sum to one every step"),
    ("adam_beta1", "0.9", "Adam first-moment decay"),
    ("adam_beta2", "0.999", "Adam second-moment decay"),
    ("adam_eps", "1e-8", "Adam epsilon"),
    ("permutation_seed", "0", "pmnist pixel order"),
    ("val_size", "5000", "pmnist held-out training images"),
    ("train_limit", "0", "read at most this many training examples, 0 = all"),
    ("test_limit", "0", "read at most this many test examples, 0 = all"),
    ("lambda_grid", "0,0.001,0.005,0.01,0.05,0.1", "values for sweep-lambda"),
];

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_task(TaskKind::CopyToy)
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn parse_metric(key: &str, v: &str) -> Result<StopMetric> {
    match v {
        "val_nll" => Ok(StopMetric::ValNll),
        "bleu4" => Ok(StopMetric::Bleu4),
        _ => Err(Error::Config(format!("{key}: expected val_nll or bleu4, got {v:?}"))),
    }
}

/// Split a config file into `(line, key, value)` triples.
pub fn parse_lines(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((i + 1, k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn for_task(task: TaskKind) -> Self {
        let mut training = TrainingConfig::default();
        let mut model = ModelSettings::default();
        if task == TaskKind::Pmnist {
            let p = PmnistConfig::default();
            training.lr_stage1 = p.lr_stage1;
            training.lr_stage2 = p.lr_stage2;
            model.hidden_dim = p.hidden_dim;
        }
        ExperimentConfig {
            task,
            train: None,
            val: None,
            test: None,
            output_dir: PathBuf::from("runs"),
            seeds: vec![training.seed],
            min_count: if task == TaskKind::CopyToy { 1 } else { 5 },
            max_src_len: 300,
            model,
            training,
            permutation_seed: 0,
            val_size: 5000,
            train_limit: 0,
            test_limit: 0,
            lambda_grid: vec![0.0, 0.001, 0.005, 0.01, 0.05, 0.1],
            schedule: ScheduleSettings::default(),
        }
    }

    /// Parse a config file and apply `overrides` on top. Every problem is
    /// reported at once.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut entries: Vec<(String, String, String)> = parse_lines(text)?
            .into_iter()
            .map(|(l, k, v)| (format!("line {l}"), k, v))
            .collect();
        entries.extend(overrides.iter().map(|(k, v)| ("override".to_string(), k.clone(), v.clone())));
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        let mut errs = Vec::new();
        for (at, k, _) in &entries {
            if at != "override" {
                if let Some(prev) = seen.insert(k, at) {
                    errs.push(format!("{at}: duplicate key {k} (first at {prev})"));
                }
            }
        }
        let task = entries
            .iter()
            .rev()
            .find(|(_, k, _)| k == "task")
            .map(|(_, _, v)| v.parse::<TaskKind>())
            .transpose();
        let mut cfg = match task {
            Ok(t) => Self::for_task(t.unwrap_or(TaskKind::CopyToy)),
            Err(e) => {
                errs.push(e.to_string());
                Self::default()
            }
        };
        for (at, k, v) in &entries {
            if let Err(e) = cfg.apply(k, v) {
                errs.push(format!("{at}: {e}"));
            }
        }
        if let Err(e) = cfg.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_text(&text, overrides)
    }

    /// Set one key.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.training;
        let m = &mut self.model;
        match key {
            "task" => self.task = v.parse()?,
            "train" => self.train = Some(v.into()),
            "val" => self.val = Some(v.into()),
            "test" => self.test = Some(v.into()),
            "output_dir" => self.output_dir = v.into(),
            "seeds" => {
                self.seeds = parse_list(key, v)?;
                t.seed = self.seeds[0];
            }
            "min_count" => self.min_count = parse(key, v)?,
            "max_src_len" => self.max_src_len = parse(key, v)?,
            "emb_dim" => m.emb_dim = parse(key, v)?,
            "hidden_dim" => m.hidden_dim = parse(key, v)?,
            "src_emb_dim" => m.src_emb_dim = parse(key, v)?,
            "src_hidden_dim" => m.src_hidden_dim = parse(key, v)?,
            "attention" => m.attention = parse_bool(key, v)?,
            "attn_dim" => m.attn_dim = parse(key, v)?,
            "init_mode" => {
                m.init_mode = match v {
                    "state_init" => InitMode::StateInit,
                    "first_input" => InitMode::FirstInput,
                    _ => return Err(Error::Config(format!("{key}: expected state_init or first_input, got {v:?}"))),
                }
            }
            "arnet_dim" => m.arnet_dim = parse(key, v)?,
            "init_bound" => m.init_bound = parse(key, v)?,
            "forget_bias" => m.forget_bias = parse(key, v)?,
            "lambda" => t.lambda = parse(key, v)?,
            "lr_stage1" => t.lr_stage1 = parse(key, v)?,
            "lr_stage2" => t.lr_stage2 = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_len" => t.max_len = parse(key, v)?,
            "beam_size" => t.beam_size = parse(key, v)?,
            "length_normalize" => t.length_normalize = parse_bool(key, v)?,
            "scheduled_sampling" => {
                self.schedule.enabled = match v {
                    "off" => false,
                    "linear" => true,
                    _ => return Err(Error::Config(format!("{key}: expected off or linear, got {v:?}"))),
                }
            }
            "ss_start" => self.schedule.start = parse(key, v)?,
            "ss_slope" => self.schedule.slope = parse(key, v)?,
            "ss_floor" => self.schedule.floor = parse(key, v)?,
            "regularizer" => {
                t.regularizer.mode = match v {
                    "none" => RegularizerMode::None,
                    "zoneout" => RegularizerMode::Zoneout,
                    "recurrent_dropout" => RegularizerMode::RecurrentDropout,
                    _ => return Err(Error::Config(format!("{key}: expected none, zoneout or recurrent_dropout, got {v:?}"))),
                }
            }
            "zoneout_h" => t.regularizer.zoneout_rate_h = parse(key, v)?,
            "zoneout_c" => t.regularizer.zoneout_rate_c = parse(key, v)?,
            "dropout_rate" => t.regularizer.dropout_rate = parse(key, v)?,
            "patience" => t.early_stop_patience = parse(key, v)?,
            "epochs_stage1" => t.epochs_stage1 = parse(key, v)?,
            "epochs_stage2" => t.epochs_stage2 = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "stage1_metric" => t.stage1_metric = parse_metric(key, v)?,
            "stage2_metric" => t.stage2_metric = parse_metric(key, v)?,
            "arnet_mode" => {
                t.stage2_arnet = match v {
                    "joint" => ArnetMode::Joint,
                    "detached" => ArnetMode::Detached,
                    "off" => ArnetMode::Off,
                    _ => return Err(Error::Config(format!("{key}: expected joint, detached or off, got {v:?}"))),
                }
            }
            "check_attention" => t.check_attention = parse_bool(key, v)?,
            "adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "permutation_seed" => self.permutation_seed = parse(key, v)?,
            "val_size" => self.val_size = parse(key, v)?,
            "train_limit" => self.train_limit = parse(key, v)?,
            "test_limit" => self.test_limit = parse(key, v)?,
            "lambda_grid" => self.lambda_grid = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        let ss = self.schedule;
        self.training.scheduled_sampling = if ss.enabled {
            ScheduledSampling::Linear {
                start: ss.start,
                slope: ss.slope,
                floor: ss.floor,
            }
        } else {
            ScheduledSampling::Off
        };
        Ok(())
    }
}

impl ExperimentConfig {
    /// Check every setting; all problems are reported together.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push("seeds must list at least one seed".to_string());
        }
        let m = &self.model;
        for (k, v) in [("emb_dim", m.emb_dim), ("hidden_dim", m.hidden_dim)] {
            if v == 0 {
                errs.push(format!("{k} must be >= 1"));
            }
        }
        if !(m.init_bound > 0.0) {
            errs.push("init_bound must be positive".into());
        }
        if self.max_src_len == 0 {
            errs.push("max_src_len must be >= 1".into());
        }
        if self.lambda_grid.iter().any(|l| !(*l >= 0.0)) {
            errs.push("lambda_grid values must be >= 0".into());
        }
        let ss = self.schedule;
        if ss.enabled && !(0.0..=1.0).contains(&ss.start) || !(0.0..=1.0).contains(&ss.floor) || !(ss.slope >= 0.0) {
            errs.push("scheduled sampling needs start and floor in [0, 1] and slope >= 0".into());
        }
        if let Err(Error::Config(e)) = self.training.validate() {
            errs.push(e);
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    /// Training settings for one seed.
    pub fn training_config(&self, seed: u64) -> TrainingConfig {
        TrainingConfig {
            seed,
            ..self.training.clone()
        }
    }

    /// Captioning model for the given vocabulary sizes; `source` carries the
    /// source vocabulary size or feature width.
    pub fn model_config(&self, source: SourceSpec, target_vocab: usize) -> ModelConfig {
        let m = &self.model;
        let source = match source {
            SourceSpec::Tokens(v) => SourceKind::Tokens {
                vocab_size: v,
                emb_dim: if m.src_emb_dim == 0 { m.emb_dim } else { m.src_emb_dim },
                hidden_dim: if m.src_hidden_dim == 0 { m.hidden_dim } else { m.src_hidden_dim },
            },
            SourceSpec::Features(dim) => SourceKind::Features { dim },
        };
        ModelConfig {
            source,
            vocab_size: target_vocab,
            emb_dim: m.emb_dim,
            hidden_dim: m.hidden_dim,
            attention: m.attention,
            attn_dim: m.attn_dim,
            init_mode: m.init_mode,
            arnet_dim: m.arnet_dim,
            init_bound: m.init_bound,
            forget_bias: m.forget_bias,
        }
    }

    pub fn pmnist_config(&self, seed: u64) -> PmnistConfig {
        let t = &self.training;
        PmnistConfig {
            hidden_dim: self.model.hidden_dim,
            arnet_dim: self.model.arnet_dim,
            init_bound: self.model.init_bound,
            forget_bias: self.model.forget_bias,
            permutation_seed: self.permutation_seed,
            lambda: t.lambda,
            lr_stage1: t.lr_stage1,
            lr_stage2: t.lr_stage2,
            batch_size: t.batch_size,
            epochs_stage1: t.epochs_stage1,
            epochs_stage2: t.epochs_stage2,
            early_stop_patience: t.early_stop_patience,
            regularizer: t.regularizer,
            arnet: t.stage2_arnet,
            seed,
            clip_norm: t.clip_norm,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            val_size: self.val_size,
        }
    }

    /// Resolve relative data paths against `root`.
    pub fn resolve_data(&mut self, root: &Path) {
        for p in [&mut self.train, &mut self.val, &mut self.test].into_iter().flatten() {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
    }

    /// Canonical `key = value` rendering; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.training;
        let m = &self.model;
        let list = |v: &[String]| v.join(",");
        let mut lines = vec![("task", self.task.to_string())];
        for (k, p) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            if let Some(p) = p {
                lines.push((k, p.display().to_string()));
            }
        }
        let metric = |s: StopMetric| match s {
            StopMetric::ValNll => "val_nll",
            StopMetric::Bleu4 => "bleu4",
        };
        lines.extend([
            ("output_dir", self.output_dir.display().to_string()),
            ("seeds", list(&self.seeds.iter().map(u64::to_string).collect::<Vec<_>>())),
            ("min_count", self.min_count.to_string()),
            ("max_src_len", self.max_src_len.to_string()),
            ("emb_dim", m.emb_dim.to_string()),
            ("hidden_dim", m.hidden_dim.to_string()),
            ("src_emb_dim", m.src_emb_dim.to_string()),
            ("src_hidden_dim", m.src_hidden_dim.to_string()),
            ("attention", m.attention.to_string()),
            ("attn_dim", m.attn_dim.to_string()),
            (
                "init_mode",
                match m.init_mode {
                    InitMode::StateInit => "state_init",
                    InitMode::FirstInput => "first_input",
                }
                .into(),
            ),
            ("arnet_dim", m.arnet_dim.to_string()),
            ("init_bound", format!("{:?}", m.init_bound)),
            ("forget_bias", format!("{:?}", m.forget_bias)),
            ("lambda", format!("{:?}", t.lambda)),
            ("lr_stage1", format!("{:?}", t.lr_stage1)),
            ("lr_stage2", format!("{:?}", t.lr_stage2)),
            ("batch_size", t.batch_size.to_string()),
            ("max_len", t.max_len.to_string()),
            ("beam_size", t.beam_size.to_string()),
            ("length_normalize", t.length_normalize.to_string()),
            ("scheduled_sampling", if self.schedule.enabled { "linear" } else { "off" }.into()),
            ("ss_start", format!("{:?}", self.schedule.start)),
            ("ss_slope", format!("{:?}", self.schedule.slope)),
            ("ss_floor", format!("{:?}", self.schedule.floor)),
            (
                "regularizer",
                match t.regularizer.mode {
                    RegularizerMode::None => "none",
                    RegularizerMode::Zoneout => "zoneout",
                    RegularizerMode::RecurrentDropout => "recurrent_dropout",
                }
                .into(),
            ),
            ("zoneout_h", format!("{:?}", t.regularizer.zoneout_rate_h)),
            ("zoneout_c", format!("{:?}", t.regularizer.zoneout_rate_c)),
            ("dropout_rate", format!("{:?}", t.regularizer.dropout_rate)),
            ("patience", t.early_stop_patience.to_string()),
            ("epochs_stage1", t.epochs_stage1.to_string()),
            ("epochs_stage2", t.epochs_stage2.to_string()),
            ("clip_norm", format!("{:?}", t.clip_norm)),
            ("stage1_metric", metric(t.stage1_metric).into()),
            ("stage2_metric", metric(t.stage2_metric).into()),
            (
                "arnet_mode",
                match t.stage2_arnet {
                    ArnetMode::Joint => "joint",
                    ArnetMode::Detached => "detached",
                    ArnetMode::Off => "off",
                }
                .into(),
            ),
            ("check_attention", t.check_attention.to_string()),
            ("adam_beta1", format!("{:?}", t.adam_beta1)),
            ("adam_beta2", format!("{:?}", t.adam_beta2)),
            ("adam_eps", format!("{:?}", t.adam_eps)),
            ("permutation_seed", self.permutation_seed.to_string()),
            ("val_size", self.val_size.to_string()),
            ("train_limit", self.train_limit.to_string()),
            ("test_limit", self.test_limit.to_string()),
            ("lambda_grid", list(&self.lambda_grid.iter().map(|l| format!("{l:?}")).collect::<Vec<_>>())),
        ]);
        lines.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Source side of a captioning model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceSpec {
    Tokens(usize),
    Features(usize),
}

/// Parse `key=value` command-line overrides.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let text = "# experiment\ntask = caption-seq\nlambda = 0.005  # weight\n\nhidden_dim=64\nseeds = 1, 2,3\n";
        let cfg = ExperimentConfig::from_text(text, &[("lambda".into(), "0.1".into())]).unwrap();
        assert_eq!(cfg.task, TaskKind::CaptionSeq);
        assert_eq!(cfg.training.lambda, 0.1);
        assert_eq!(cfg.model.hidden_dim, 64);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn task_dependent_defaults() {
        let p = ExperimentConfig::from_text("task = pmnist", &[]).unwrap();
        assert_eq!(p.training.lr_stage1, 1e-3);
        assert_eq!(p.model.hidden_dim, 128);
        let c = ExperimentConfig::from_text("task = caption-feat", &[]).unwrap();
        assert_eq!(c.training.lr_stage1, 5e-4);
        assert_eq!(c.training.lr_stage2, 1e-4);
        // an explicit value wins regardless of order
        let q = ExperimentConfig::from_text("lr_stage1 = 0.01\ntask = pmnist", &[]).unwrap();
        assert_eq!(q.training.lr_stage1, 0.01);
    }

    #[test]
    fn reports_every_problem_before_running() {
        let text = "task = caption-seq\nlambda = -1\nbeam_size = 0\nbogus = 3\nhidden_dim = x\nlambda = 0.1";
        let err = ExperimentConfig::from_text(text, &[]).unwrap_err().to_string();
        for needle in ["lambda", "beam_size", "bogus", "hidden_dim", "duplicate"] {
            assert!(err.contains(needle), "{needle} missing from {err}");
        }
        assert!(ExperimentConfig::from_text("no equals sign", &[]).is_err());
        assert!(ExperimentConfig::from_text("task = gru", &[]).is_err());
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        let keys: Vec<String> = parse_lines(&text).unwrap().into_iter().map(|(_, k, _)| k).collect();
        for (k, _, _) in KEYS {
            let mut c = ExperimentConfig::default();
            let sample = match *k {
                "task" => "pmnist",
                "train" | "val" | "test" | "output_dir" => "x",
                "seeds" | "lambda_grid" => "1,2",
                "attention" | "length_normalize" | "check_attention" => "false",
                "init_mode" => "first_input",
                "scheduled_sampling" => "linear",
                "regularizer" => "zoneout",
                "stage1_metric" | "stage2_metric" => "bleu4",
                "arnet_mode" => "detached",
                _ => "1",
            };
            c.apply(k, sample).unwrap_or_else(|e| panic!("{k}: {e}"));
            assert!(keys.iter().any(|x| x == k) || ["train", "val", "test"].contains(k), "{k} not rendered");
        }
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::from_text(
            "task = caption-seq\ntrain = data/train\nscheduled_sampling = linear\nss_floor = 0.6\nregularizer = zoneout\nlambda = 0.005",
            &[],
        )
        .unwrap();
        cfg.apply("seeds", "4,5").unwrap();
        let back = ExperimentConfig::from_text(&cfg.to_text(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(
            back.training.scheduled_sampling,
            ScheduledSampling::Linear {
                start: 1.0,
                slope: 0.05,
                floor: 0.6
            }
        );
    }

    #[test]
    fn lambda_grid_values_all_valid() {
        let cfg = ExperimentConfig::default();
        for l in &cfg.lambda_grid {
            let mut t = cfg.training.clone();
            t.lambda = *l;
            t.validate().unwrap();
        }
        assert_eq!(cfg.lambda_grid.len(), 6);
    }

    #[test]
    fn data_root_resolution() {
        let mut cfg = ExperimentConfig::from_text("train = a/b\ntest = /abs/t", &[]).unwrap();
        cfg.resolve_data(Path::new("/data"));
        assert_eq!(cfg.train.unwrap(), PathBuf::from("/data/a/b"));
        assert_eq!(cfg.test.unwrap(), PathBuf::from("/abs/t"));
    }
}
