//! Two-stage training: negative log-likelihood first, then the joint
//! objective with the reconstructor attached.

use serde::{Deserialize, Serialize};

use super::corpus::Example;
use super::decode::{beam, SearchConfig};
use super::model::{
    batch_gradients, evaluate, ArnetMode, CaptionModel, DecoderSession, ModelConfig, PassOptions, StepOptions,
};
use crate::error::{Error, Result};
use crate::lstm::RegularizerConfig;
use crate::metrics::{bleu, ScoredCorpus};
use crate::params::{clip_global_norm, Adam, AdamConfig};
use crate::tensor::RngStream;

/// Label of the substream that initializes the reconstructor, so attaching
/// it never perturbs the training stream.
pub const ARNET_INIT_STREAM: u64 = 0xA4E7;
/// Substream label for initializing a fresh captioning model from the run seed.
pub const MODEL_INIT_STREAM: u64 = 0x1017;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduledSampling {
    Off,
    /// `p_gold = max(floor, start − slope · epoch)` over global epochs.
    Linear {
        start: f64,
        slope: f64,
        floor: f64,
    },
}

impl ScheduledSampling {
    pub fn p_gold(&self, global_epoch: usize) -> f64 {
        match *self {
            ScheduledSampling::Off => 1.0,
            ScheduledSampling::Linear {
                start,
                slope,
                floor,
            } => (start - slope * global_epoch as f64).max(floor),
        }
    }

    pub fn default_linear() -> Self {
        ScheduledSampling::Linear {
            start: 1.0,
            slope: 0.05,
            floor: 0.75,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    /// Validation negative log-likelihood per token, lower is better.
    ValNll,
    /// Validation corpus BLEU-4 of decoded captions, higher is better.
    Bleu4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    /// Caption length cap including BOS and EOS.
    pub max_len: usize,
    pub beam_size: usize,
    pub scheduled_sampling: ScheduledSampling,
    pub regularizer: RegularizerConfig,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub stage1_metric: StopMetric,
    pub stage2_metric: StopMetric,
    /// How the reconstructor joins stage 2; `Off` continues plain training.
    pub stage2_arnet: ArnetMode,
    pub length_normalize: bool,
    pub check_attention: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 0.01,
            lr_stage1: 5e-4,
            lr_stage2: 1e-4,
            batch_size: 64,
            max_len: 32,
            beam_size: 3,
            scheduled_sampling: ScheduledSampling::Off,
            regularizer: RegularizerConfig::none(),
            early_stop_patience: 10,
            seed: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs_stage1: 30,
            epochs_stage2: 20,
            clip_norm: 5.0,
            stage1_metric: StopMetric::ValNll,
            stage2_metric: StopMetric::ValNll,
            stage2_arnet: ArnetMode::Joint,
            length_normalize: true,
            check_attention: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.lambda >= 0.0) {
            errs.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr_stage1 > 0.0) || !(self.lr_stage2 > 0.0) {
            errs.push("learning rates must be positive".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".to_string());
        }
        if self.beam_size == 0 {
            errs.push("beam_size must be >= 1".to_string());
        }
        if self.max_len < 2 {
            errs.push("max_len must be >= 2".to_string());
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            errs.push("adam betas must be in [0, 1) and eps positive".to_string());
        }
        if !(self.clip_norm >= 0.0) {
            errs.push("clip_norm must be >= 0".to_string());
        }
        if let ScheduledSampling::Linear {
            start,
            slope,
            floor,
        } = self.scheduled_sampling
        {
            if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&floor) || !(slope >= 0.0) {
                errs.push(
                    "scheduled sampling probabilities must be in [0, 1] with slope >= 0"
                        .to_string(),
                );
            }
        }
        if let Err(e) = self.regularizer.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

/// One line of training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Global epoch, counted from 1 across both stages.
    pub epoch: usize,
    pub stage: Stage,
    pub stage_epoch: usize,
    /// Mean joint loss per example.
    pub loss: f64,
    pub nll_per_token: f64,
    /// Mean reconstruction loss per example.
    pub l_ar: f64,
    pub token_accuracy: f64,
    pub val_metric: f64,
    pub val_metric_name: StopMetric,
    pub p_gold: f64,
    pub lr: f64,
    pub attention_checks: usize,
}

/// Patience-based early stopping on a higher-is-better score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EarlyStopping {
    pub best: Option<f64>,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    /// Record `score` for `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        match self.best {
            Some(b) if score <= b => {
                self.bad_epochs += 1;
                false
            }
            _ => {
                self.best = Some(score);
                self.best_epoch = epoch;
                self.bad_epochs = 0;
                true
            }
        }
    }

    pub fn exhausted(&self, patience: usize) -> bool {
        patience > 0 && self.bad_epochs >= patience
    }
}

/// Position within the two-stage schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: Stage,
    pub stage_epoch: usize,
    pub global_epoch: usize,
    pub stopping: EarlyStopping,
    pub done: bool,
}

/// Resumable trainer. Every field is persisted by checkpoints.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainingConfig,
    pub model: CaptionModel,
    pub adam: Adam,
    pub rng: RngStream,
    pub progress: Progress,
    /// Best parameters of the current stage.
    pub best: Option<CaptionModel>,
    pub stage1_model: Option<CaptionModel>,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(model: CaptionModel, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.adam(config.lr_stage1));
        Ok(Trainer {
            rng: RngStream::new(config.seed),
            adam,
            model,
            progress: Progress {
                stage: Stage::Stage1,
                stage_epoch: 0,
                global_epoch: 0,
                stopping: EarlyStopping::default(),
                done: config.epochs_stage1 == 0 && config.epochs_stage2 == 0,
            },
            best: None,
            stage1_model: None,
            history: Vec::new(),
            config,
        })
    }

    /// Fresh model drawn from the run seed's model-init substream.
    pub fn init(model: ModelConfig, config: TrainingConfig) -> Result<Self> {
        let mut rng = RngStream::new(config.seed).fork(MODEL_INIT_STREAM);
        let m = CaptionModel::init(model, &mut rng)?;
        Trainer::new(m, config)
    }

    fn stage_budget(&self) -> usize {
        match self.progress.stage {
            Stage::Stage1 => self.config.epochs_stage1,
            Stage::Stage2 => self.config.epochs_stage2,
        }
    }

    fn arnet_mode(&self) -> ArnetMode {
        match self.progress.stage {
            Stage::Stage1 => ArnetMode::Off,
            Stage::Stage2 => self.config.stage2_arnet,
        }
    }

    /// Validation score, higher is better, plus the raw metric value.
    pub fn validation_score(&self, val: &[Example]) -> Result<(f64, f64)> {
        let metric = match self.progress.stage {
            Stage::Stage1 => self.config.stage1_metric,
            Stage::Stage2 => self.config.stage2_metric,
        };
        match metric {
            StopMetric::ValNll => {
                let v = evaluate(&self.model, val, false)?.nll_per_token();
                Ok((-v, v))
            }
            StopMetric::Bleu4 => {
                let v = decoded_bleu4(&self.model, val, &self.config)?;
                Ok((v, v))
            }
        }
    }

    /// Whether the current stage has used its budget or run out of patience
    /// but has not been closed by [`Trainer::finish_stage`] yet.
    pub fn stage_complete(&self) -> bool {
        !self.progress.done
            && (self.progress.stage_epoch >= self.stage_budget()
                || self
                    .progress
                    .stopping
                    .exhausted(self.config.early_stop_patience))
    }

    /// Run one epoch of the current stage, handling early stopping and the
    /// stage transition.
    pub fn run_epoch(&mut self, train: &[Example], val: &[Example]) -> Result<EpochRecord> {
        while self.stage_complete() {
            self.finish_stage()?;
        }
        let rec = self.train_epoch(train, val)?;
        if self.stage_complete() {
            self.finish_stage()?;
        }
        Ok(rec)
    }

    /// One epoch without closing the stage afterwards.
    pub fn train_epoch(&mut self, train: &[Example], val: &[Example]) -> Result<EpochRecord> {
        if self.progress.done {
            return Err(Error::invalid("training already finished"));
        }
        if self.stage_complete() {
            return Err(Error::invalid("stage complete; call finish_stage first"));
        }
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let val = if val.is_empty() { train } else { val };
        let p_gold = self
            .config
            .scheduled_sampling
            .p_gold(self.progress.global_epoch);
        let opts = StepOptions {
            pass: PassOptions {
                reg: self.config.regularizer.clone(),
                training: true,
                p_gold,
            },
            lambda: self.config.lambda,
            arnet: self.arnet_mode(),
            check_attention: self.config.check_attention,
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        self.rng.shuffle(&mut order);
        let mut totals = super::model::BatchStats::default();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let mut grads = self.model.zeros_like();
            let stats = batch_gradients(&self.model, &batch, &opts, &mut self.rng, &mut grads)?;
            totals.merge(&stats);
            if self.config.clip_norm > 0.0 {
                clip_global_norm(&mut grads, self.config.clip_norm);
            }
            self.adam.update(&mut self.model, &grads, &[])?;
        }
        self.progress.stage_epoch += 1;
        self.progress.global_epoch += 1;
        let (score, raw) = self.validation_score(val)?;
        if self
            .progress
            .stopping
            .observe(self.progress.stage_epoch, score)
        {
            self.best = Some(self.model.clone());
        }
        let n = totals.examples as f64;
        let record = EpochRecord {
            epoch: self.progress.global_epoch,
            stage: self.progress.stage,
            stage_epoch: self.progress.stage_epoch,
            loss: (totals.nll + self.config.lambda * totals.ar) / n,
            nll_per_token: totals.nll_per_token(),
            l_ar: totals.ar / n,
            token_accuracy: totals.token_accuracy(),
            val_metric: raw,
            val_metric_name: match self.progress.stage {
                Stage::Stage1 => self.config.stage1_metric,
                Stage::Stage2 => self.config.stage2_metric,
            },
            p_gold,
            lr: self.adam.config.lr,
            attention_checks: totals.attention_checks,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Restore the stage's best parameters and move on.
    pub fn finish_stage(&mut self) -> Result<()> {
        if let Some(best) = self.best.take() {
            self.model = best;
        }
        match self.progress.stage {
            Stage::Stage1 => {
                self.stage1_model = Some(self.model.clone());
                if self.model.arnet.is_none() {
                    let mut init = self.rng.fork(ARNET_INIT_STREAM);
                    self.model.attach_arnet(&mut init)?;
                }
                self.adam = Adam::new(self.config.adam(self.config.lr_stage2));
                self.progress.stage = Stage::Stage2;
                self.progress.stage_epoch = 0;
                self.progress.stopping = EarlyStopping::default();
                if self.config.epochs_stage2 == 0 {
                    self.progress.done = true;
                }
            }
            Stage::Stage2 => self.progress.done = true,
        }
        Ok(())
    }

    /// Train until both stages are complete, calling `on_epoch` after every
    /// epoch.
    pub fn run<F>(&mut self, train: &[Example], val: &[Example], mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        while self.stage_complete() {
            self.finish_stage()?;
        }
        while !self.progress.done {
            let rec = self.run_epoch(train, val)?;
            on_epoch(self, &rec)?;
        }
        Ok(())
    }
}

/// Corpus BLEU-4 of beam-decoded captions against the gold captions.
pub fn decoded_bleu4(
    model: &CaptionModel,
    examples: &[Example],
    cfg: &TrainingConfig,
) -> Result<f64> {
    let (hyps, refs) = decode_all(
        model,
        examples,
        cfg.beam_size,
        cfg.max_len,
        cfg.length_normalize,
    )?;
    bleu(&ScoredCorpus::single(hyps, refs)?, 4)
}

/// Decoded word ids and gold word ids for every example.
pub fn decode_all(
    model: &CaptionModel,
    examples: &[Example],
    beam_size: usize,
    max_len: usize,
    length_normalize: bool,
) -> Result<(Vec<Vec<u32>>, Vec<Vec<u32>>)> {
    let search = SearchConfig {
        length_normalize,
        ..SearchConfig::new(beam_size, max_len)
    };
    let reg = RegularizerConfig::none();
    let mut hyps = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    for ex in examples {
        let session = DecoderSession::new(model, &ex.source, &reg)?;
        let h = beam(&session, &search)?;
        let words: Vec<u32> = h.tokens[1..]
            .iter()
            .copied()
            .filter(|&t| t != search.eos)
            .collect();
        hyps.push(words);
        refs.push(ex.caption.words().to_vec());
    }
    Ok((hyps, refs))
}

/// Result of [`train_two_stage`].
#[derive(Debug, Clone)]
pub struct TwoStageOutcome {
    pub stage1: CaptionModel,
    pub stage2: CaptionModel,
    pub history: Vec<EpochRecord>,
}

pub fn train_two_stage(
    model: CaptionModel,
    train: &[Example],
    val: &[Example],
    config: TrainingConfig,
) -> Result<TwoStageOutcome> {
    let mut t = Trainer::new(model, config)?;
    t.run(train, val, |_, _| Ok(()))?;
    Ok(TwoStageOutcome {
        stage1: t.stage1_model.clone().unwrap_or_else(|| t.model.clone()),
        stage2: t.model,
        history: t.history,
    })
}
