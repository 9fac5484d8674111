//! Binary checkpoints.
//!
//! Layout: `ARNETCKPT`, u32 version, u32 record count, then per record a u16
//! name length, the UTF-8 name, a u8 rank, `rank` u32 dimensions and the f64
//! payload, all little-endian and row-major. Run metadata is a JSON document
//! stored as the record `meta.json`: its bytes, space-padded to a multiple of
//! eight, reinterpreted as f64 words.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::arnet::ArnetParams;
use crate::config::{ExperimentConfig, TaskKind};
use crate::error::{CheckpointError, Error, Result};
use crate::params::{Adam, ParamSet};
use crate::pmnist::{Classifier, PmnistConfig, PmnistProgress, PmnistRecord, PmnistTrainer, CLASSES};
use crate::seq2seq::model::{CaptionModel, ModelConfig};
use crate::seq2seq::train::{EpochRecord, Progress, Stage, Trainer, TrainingConfig};
use crate::seq2seq::vocab::Vocabulary;
use crate::tensor::{RngState, RngStream};

pub const MAGIC: &[u8; 9] = b"ARNETCKPT";
pub const VERSION: u32 = 1;
pub const META_RECORD: &str = "meta.json";

/// One named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    records: Vec<Record>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("Archive::push", format!("{shape:?}"), data.len()));
        }
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::invalid(format!("record {name:?} cannot be encoded")));
        }
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate record {name:?}")));
        }
        self.records.push(Record { name, shape, data });
        Ok(())
    }

    /// Add every tensor of `params` under `prefix.`.
    pub fn push_params<P: ParamSet + ?Sized>(&mut self, prefix: &str, params: &P) -> Result<()> {
        for t in params.tensors() {
            self.push(format!("{prefix}.{}", t.name), t.shape, t.data.to_vec())?;
        }
        Ok(())
    }

    /// Whether any record lives under `prefix.`.
    pub fn has_prefix(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.records.iter().any(|r| r.name.starts_with(&p))
    }

    /// Overwrite every tensor of `params` from the records under `prefix.`.
    /// Missing tensors, shape disagreements and unexpected extra records
    /// under the prefix are all errors.
    pub fn load_params<P: ParamSet + ?Sized>(&self, prefix: &str, params: &mut P) -> Result<()> {
        let shapes: Vec<Vec<usize>> = params.tensors().into_iter().map(|t| t.shape).collect();
        let mut seen = BTreeSet::new();
        for ((name, dst), shape) in params.tensors_mut().into_iter().zip(shapes) {
            let full = format!("{prefix}.{name}");
            let rec = self
                .get(&full)
                .ok_or_else(|| CheckpointError::MissingTensor(full.clone()))?;
            if rec.shape != shape {
                return Err(CheckpointError::TensorShape {
                    name: full,
                    found: rec.shape.clone(),
                    expected: shape,
                }
                .into());
            }
            dst.copy_from_slice(&rec.data);
            seen.insert(full);
        }
        let p = format!("{prefix}.");
        if let Some(extra) = self
            .records
            .iter()
            .find(|r| r.name.starts_with(&p) && !seen.contains(&r.name))
        {
            return Err(Error::invalid(format!("unexpected tensor {}", extra.name)));
        }
        Ok(())
    }

    pub fn set_meta<T: Serialize>(&mut self, meta: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec(meta)?;
        while bytes.len() % 8 != 0 {
            bytes.push(b' ');
        }
        let words: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        self.records.retain(|r| r.name != META_RECORD);
        self.push(META_RECORD, vec![words.len()], words)
    }

    pub fn meta<T: DeserializeOwned>(&self) -> Result<T> {
        let rec = self.get(META_RECORD).ok_or(CheckpointError::MissingMeta)?;
        let bytes: Vec<u8> = rec.data.iter().flat_map(|w| w.to_le_bytes()).collect();
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.shape.len() as u8);
            for d in &r.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { buf: bytes, pos: 0 };
        if rd.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                supported: VERSION,
            }
            .into());
        }
        let count = rd.u32()?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let len = rd.u16()? as usize;
            let name = std::str::from_utf8(rd.take(len)?)
                .map_err(|_| Error::invalid("record name is not UTF-8"))?
                .to_string();
            let rank = rd.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = rd.u32()? as usize;
                n = n.checked_mul(d).ok_or(CheckpointError::Truncated)?;
                shape.push(d);
            }
            let raw = rd.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            archive.push(name, shape, data)?;
        }
        if rd.pos != bytes.len() {
            return Err(Error::invalid(format!(
                "{} trailing bytes after the last record",
                bytes.len() - rd.pos
            )));
        }
        Ok(archive)
    }

    /// Write to a sibling temporary file, then rename over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Archive::from_bytes(&fs::read(path)?)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn push_adam(archive: &mut Archive, adam: &Adam) -> Result<()> {
    for (name, (m, v)) in adam.moments() {
        archive.push(format!("adam.m.{name}"), vec![m.len()], m.clone())?;
        archive.push(format!("adam.v.{name}"), vec![v.len()], v.clone())?;
    }
    Ok(())
}

fn load_adam(archive: &Archive, adam: &mut Adam, step: u64) -> Result<()> {
    adam.step = step;
    for r in archive.records() {
        if let Some(name) = r.name.strip_prefix("adam.m.") {
            let v = archive
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| CheckpointError::MissingTensor(format!("adam.v.{name}")))?;
            if v.data.len() != r.data.len() {
                return Err(CheckpointError::TensorShape {
                    name: v.name.clone(),
                    found: v.shape.clone(),
                    expected: r.shape.clone(),
                }
                .into());
            }
            adam.set_moment(name.to_string(), r.data.clone(), v.data.clone());
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TrainerMeta {
    Caption {
        model: ModelConfig,
        training: TrainingConfig,
        progress: Progress,
        history: Vec<EpochRecord>,
        src_vocab: Option<Vocabulary>,
        tgt_vocab: Vocabulary,
        has_best: bool,
        has_stage1: bool,
    },
    Pmnist {
        config: PmnistConfig,
        progress: PmnistProgress,
        history: Vec<PmnistRecord>,
        has_best: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    task: TaskKind,
    stage: Stage,
    permutation_seed: Option<u64>,
    rng: RngState,
    adam_step: u64,
    experiment: Option<ExperimentConfig>,
    trainer: TrainerMeta,
}

/// Captioning run state plus the vocabularies needed to read new data.
#[derive(Debug, Clone)]
pub struct CaptionRun {
    pub task: TaskKind,
    pub trainer: Trainer,
    pub src_vocab: Option<Vocabulary>,
    pub tgt_vocab: Vocabulary,
}

impl CaptionRun {
    /// Best parameters of the current stage if one was recorded, otherwise
    /// the current parameters.
    pub fn eval_model(&self) -> &CaptionModel {
        self.trainer.best.as_ref().unwrap_or(&self.trainer.model)
    }
}

/// A saved training run of either task family.
#[derive(Debug, Clone)]
pub enum Checkpoint {
    Caption(Box<CaptionRun>),
    Pmnist(Box<PmnistTrainer>),
}

impl Checkpoint {
    pub fn task(&self) -> TaskKind {
        match self {
            Checkpoint::Caption(c) => c.task,
            Checkpoint::Pmnist(_) => TaskKind::Pmnist,
        }
    }

    pub fn stage(&self) -> Stage {
        match self {
            Checkpoint::Caption(c) => c.trainer.progress.stage,
            Checkpoint::Pmnist(p) => p.progress.stage,
        }
    }

    /// Classifier counterpart of [`CaptionRun::eval_model`].
    pub fn pmnist_eval_model(t: &PmnistTrainer) -> &Classifier {
        t.best.as_ref().unwrap_or(&t.model)
    }

    pub fn is_done(&self) -> bool {
        match self {
            Checkpoint::Caption(c) => c.trainer.progress.done,
            Checkpoint::Pmnist(p) => p.progress.done,
        }
    }

    /// Fails unless the checkpoint holds a model for `expected`.
    pub fn expect_task(&self, expected: TaskKind) -> Result<()> {
        let found = self.task();
        let compatible = found == expected || (found.is_caption() && expected.is_caption());
        if compatible {
            Ok(())
        } else {
            Err(CheckpointError::Task {
                found: found.to_string(),
                expected: expected.to_string(),
            }
            .into())
        }
    }

    pub fn to_archive(&self, experiment: Option<&ExperimentConfig>) -> Result<Archive> {
        let mut a = Archive::new();
        let (meta, adam) = match self {
            Checkpoint::Caption(c) => {
                let t = &c.trainer;
                if t.progress.stage == Stage::Stage2 && t.model.arnet.is_none() {
                    return Err(Error::invalid("stage-2 model without reconstructor"));
                }
                a.push_params("model", &t.model)?;
                if let Some(b) = &t.best {
                    a.push_params("best", b)?;
                }
                if let Some(s) = &t.stage1_model {
                    a.push_params("stage1", s)?;
                }
                let meta = Meta {
                    format_version: VERSION,
                    task: c.task,
                    stage: t.progress.stage,
                    permutation_seed: None,
                    rng: t.rng.state(),
                    adam_step: t.adam.step,
                    experiment: experiment.cloned(),
                    trainer: TrainerMeta::Caption {
                        model: t.model.config.clone(),
                        training: t.config.clone(),
                        progress: t.progress.clone(),
                        history: t.history.clone(),
                        src_vocab: c.src_vocab.clone(),
                        tgt_vocab: c.tgt_vocab.clone(),
                        has_best: t.best.is_some(),
                        has_stage1: t.stage1_model.is_some(),
                    },
                };
                (meta, &t.adam)
            }
            Checkpoint::Pmnist(t) => {
                if t.progress.stage == Stage::Stage2 && t.model.arnet.is_none() {
                    return Err(Error::invalid("stage-2 model without reconstructor"));
                }
                a.push_params("model", &t.model)?;
                if let Some(b) = &t.best {
                    a.push_params("best", b)?;
                }
                let meta = Meta {
                    format_version: VERSION,
                    task: TaskKind::Pmnist,
                    stage: t.progress.stage,
                    permutation_seed: Some(t.config.permutation_seed),
                    rng: t.rng.state(),
                    adam_step: t.adam.step,
                    experiment: experiment.cloned(),
                    trainer: TrainerMeta::Pmnist {
                        config: t.config.clone(),
                        progress: t.progress.clone(),
                        history: t.history.clone(),
                        has_best: t.best.is_some(),
                    },
                };
                (meta, &t.adam)
            }
        };
        push_adam(&mut a, adam)?;
        a.set_meta(&meta)?;
        Ok(a)
    }

    pub fn to_bytes(&self, experiment: Option<&ExperimentConfig>) -> Result<Vec<u8>> {
        Ok(self.to_archive(experiment)?.to_bytes())
    }

    pub fn save(&self, path: &Path, experiment: Option<&ExperimentConfig>) -> Result<()> {
        write_atomic(path, &self.to_bytes(experiment)?)
    }

    /// Rebuild the run. Returns the embedded experiment config, if any.
    pub fn from_archive(a: &Archive) -> Result<(Checkpoint, Option<ExperimentConfig>)> {
        let meta: Meta = a.meta()?;
        let rng = RngStream::from_state(&meta.rng)?;
        let stage2 = meta.stage == Stage::Stage2;
        if stage2 && !a.has_prefix("model.arnet") {
            return Err(CheckpointError::MissingTensor("model.arnet".into()).into());
        }
        let ckpt = match meta.trainer {
            TrainerMeta::Caption {
                model,
                training,
                progress,
                history,
                src_vocab,
                tgt_vocab,
                has_best,
                has_stage1,
            } => {
                if meta.task == TaskKind::Pmnist {
                    return Err(Error::invalid("pmnist task with a captioning model"));
                }
                let read = |prefix: &str| -> Result<CaptionModel> {
                    let mut m = CaptionModel::init(model.clone(), &mut RngStream::new(0))?;
                    if a.has_prefix(&format!("{prefix}.arnet")) {
                        m.attach_arnet(&mut RngStream::new(0))?;
                    }
                    a.load_params(prefix, &mut m)?;
                    Ok(m)
                };
                let lr = match progress.stage {
                    Stage::Stage1 => training.lr_stage1,
                    Stage::Stage2 => training.lr_stage2,
                };
                let mut adam = Adam::new(training.adam(lr));
                load_adam(a, &mut adam, meta.adam_step)?;
                let trainer = Trainer {
                    model: read("model")?,
                    best: if has_best { Some(read("best")?) } else { None },
                    stage1_model: if has_stage1 { Some(read("stage1")?) } else { None },
                    adam,
                    rng,
                    progress,
                    history,
                    config: training,
                };
                Checkpoint::Caption(Box::new(CaptionRun {
                    task: meta.task,
                    trainer,
                    src_vocab,
                    tgt_vocab,
                }))
            }
            TrainerMeta::Pmnist {
                config,
                progress,
                history,
                has_best,
            } => {
                if meta.task != TaskKind::Pmnist || meta.permutation_seed != Some(config.permutation_seed) {
                    return Err(Error::invalid("inconsistent pmnist metadata"));
                }
                let read = |prefix: &str| -> Result<Classifier> {
                    let mut m = Classifier::init(
                        config.hidden_dim,
                        CLASSES,
                        config.init_bound,
                        config.forget_bias,
                        &mut RngStream::new(0),
                    )?;
                    if a.has_prefix(&format!("{prefix}.arnet")) {
                        let dim = a
                            .get(&format!("{prefix}.arnet.w_fc"))
                            .and_then(|r| r.shape.get(1).copied())
                            .ok_or_else(|| {
                                CheckpointError::MissingTensor(format!("{prefix}.arnet.w_fc"))
                            })?;
                        m.arnet = Some(ArnetParams::zeros(config.hidden_dim, dim));
                    }
                    a.load_params(prefix, &mut m)?;
                    Ok(m)
                };
                let lr = match progress.stage {
                    Stage::Stage1 => config.lr_stage1,
                    Stage::Stage2 => config.lr_stage2,
                };
                let mut adam = Adam::new(config.adam(lr));
                load_adam(a, &mut adam, meta.adam_step)?;
                Checkpoint::Pmnist(Box::new(PmnistTrainer {
                    model: read("model")?,
                    best: if has_best { Some(read("best")?) } else { None },
                    adam,
                    rng,
                    progress,
                    history,
                    config,
                }))
            }
        };
        Ok((ckpt, meta.experiment))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Checkpoint, Option<ExperimentConfig>)> {
        Checkpoint::from_archive(&Archive::from_bytes(bytes)?)
    }

    pub fn load(path: &Path) -> Result<(Checkpoint, Option<ExperimentConfig>)> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}
