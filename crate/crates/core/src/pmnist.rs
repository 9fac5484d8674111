//! Permuted sequential MNIST: one pixel per step through a single LSTM,
//! softmax over the final hidden state, optional reconstructor over the
//! encoder's hidden states.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arnet::ArnetParams;
use crate::error::{Error, IdxError, Result};
use crate::lstm::{LstmParams, LstmState, RegularizerConfig};
use crate::params::{
    accumulate, clip_global_norm, prefixed, prefixed_mut, Adam, AdamConfig, ParamSet, TensorView,
};
use crate::seq2seq::model::ArnetMode;
use crate::seq2seq::train::{EarlyStopping, Stage, ARNET_INIT_STREAM};
use crate::tensor::{argmax, init_uniform, softmax_in_place, Matrix, RngStream, Vector};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const PIXELS: usize = 784;
pub const CLASSES: usize = 10;

/// 784 grayscale values in `[0, 1]` and a digit label.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSequence {
    pixels: Vec<f64>,
    label: u8,
}

impl PixelSequence {
    pub fn new(pixels: Vec<f64>, label: u8) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::invalid(format!(
                "pixel sequence has {} values, expected {PIXELS}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        if label as usize >= CLASSES {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        Ok(PixelSequence { pixels, label })
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn label(&self) -> u8 {
        self.label
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(IdxError::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Parse an IDX image file into `(rows, cols, images)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<Vec<u8>>), IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(IdxError::BadMagic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let size = rows * cols;
    let expected = 16 + n * size;
    if bytes.len() != expected {
        return Err(IdxError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    Ok((
        rows,
        cols,
        bytes[16..]
            .chunks(size.max(1))
            .take(n)
            .map(<[u8]>::to_vec)
            .collect(),
    ))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(IdxError::BadMagic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    if bytes.len() != 8 + n {
        return Err(IdxError::Truncated {
            expected: 8 + n,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..].to_vec())
}

pub fn encode_idx_images(rows: usize, cols: usize, images: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IMAGE_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn parse_mnist(images: &[u8], labels: &[u8]) -> Result<Vec<PixelSequence>> {
    let (rows, cols, imgs) = parse_idx_images(images)?;
    if rows * cols != PIXELS {
        return Err(IdxError::Shape { rows, cols }.into());
    }
    let labels = parse_idx_labels(labels)?;
    if imgs.len() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: imgs.len(),
            labels: labels.len(),
        }
        .into());
    }
    imgs.into_iter()
        .zip(labels)
        .map(|(img, l)| PixelSequence::new(img.iter().map(|&b| b as f64 / 255.0).collect(), l))
        .collect()
}

/// Read an image/label IDX pair.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<PixelSequence>> {
    let read =
        |p: &Path| fs::read(p).map_err(|e| Error::Data(format!("reading {}: {e}", p.display())));
    parse_mnist(&read(images_path)?, &read(labels_path)?)
}

/// `{prefix}-images-idx3-ubyte` and `{prefix}-labels-idx1-ubyte`, the names
/// the standard MNIST distribution uses (`train`, `t10k`).
pub fn idx_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with("-images-idx3-ubyte"), with("-labels-idx1-ubyte"))
}

pub fn load_mnist_prefix(prefix: &Path) -> Result<Vec<PixelSequence>> {
    let (i, l) = idx_paths(prefix);
    load_mnist_idx(&i, &l)
}

/// Fixed pixel order over `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    map: Vec<usize>,
    seed: u64,
}

impl Permutation {
    pub fn from_seed(seed: u64, n: usize) -> Self {
        let mut map: Vec<usize> = (0..n).collect();
        RngStream::new(seed).shuffle(&mut map);
        Permutation { map, seed }
    }

    pub fn from_vec(map: Vec<usize>, seed: u64) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::invalid("permutation is not a bijection"));
            }
        }
        Ok(Permutation { map, seed })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            map: (0..n).collect(),
            seed: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        Permutation {
            map: inv,
            seed: self.seed,
        }
    }

    /// `out[i] = values[p(i)]`.
    pub fn permute(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.map.len() {
            return Err(Error::shape("permute", self.map.len(), values.len()));
        }
        Ok(self.map.iter().map(|&j| values[j]).collect())
    }
}

pub fn apply_permutation(seq: &PixelSequence, p: &Permutation) -> Result<PixelSequence> {
    Ok(PixelSequence {
        pixels: p.permute(&seq.pixels)?,
        label: seq.label,
    })
}

/// Sequences already in presentation order, tagged with the permutation seed
/// that produced them.
#[derive(Debug, Clone)]
pub struct PermutedSet {
    pub perm_seed: u64,
    pub items: Vec<PixelSequence>,
}

impl PermutedSet {
    pub fn new(items: &[PixelSequence], p: &Permutation) -> Result<Self> {
        Ok(PermutedSet {
            perm_seed: p.seed(),
            items: items
                .iter()
                .map(|s| apply_permutation(s, p))
                .collect::<Result<_>>()?,
        })
    }
}

/// LSTM over scalar inputs with a softmax read-out of the last state.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub lstm: LstmParams,
    /// `classes × H`.
    pub w_out: Matrix,
    pub b_out: Vector,
    pub arnet: Option<ArnetParams>,
}

impl Classifier {
    pub fn init(
        hidden: usize,
        classes: usize,
        bound: f64,
        forget_bias: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if hidden == 0 || classes < 2 {
            return Err(Error::invalid(
                "classifier needs a hidden size and at least two classes",
            ));
        }
        Ok(Classifier {
            lstm: LstmParams::init(1, hidden, bound, forget_bias, rng)?,
            w_out: init_uniform(classes, hidden, bound, rng)?,
            b_out: Vector::zeros(classes),
            arnet: None,
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.lstm.hidden_dim()
    }

    pub fn zeros_like(&self) -> Self {
        Classifier {
            lstm: self.lstm.zeros_like(),
            w_out: Matrix::zeros(self.w_out.rows(), self.w_out.cols()),
            b_out: Vector::zeros(self.b_out.len()),
            arnet: self.arnet.as_ref().map(ArnetParams::zeros_like),
        }
    }

    /// Class probabilities for one sequence (inference mode).
    pub fn predict(&self, seq: &[f64], reg: &RegularizerConfig) -> Result<Vector> {
        let mut rng = RngStream::new(0);
        let pass = self.forward(seq, reg, &mut rng, false)?;
        Ok(pass.probs)
    }

    pub fn forward(
        &self,
        seq: &[f64],
        reg: &RegularizerConfig,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<ClassifierPass> {
        if seq.is_empty() {
            return Err(Error::invalid("empty input sequence"));
        }
        let xs: Vec<[f64; 1]> = seq.iter().map(|&v| [v]).collect();
        let run = self.lstm.run_sequence(
            &xs,
            &LstmState::zeros(self.hidden_dim()),
            reg,
            rng,
            training,
        )?;
        let last = &run.states[run.states.len() - 1].h;
        let mut probs = self.b_out.clone();
        let mut tmp = Vector::zeros(probs.len());
        self.w_out.matvec_into(last, &mut tmp);
        for (p, t) in probs.iter_mut().zip(tmp.iter()) {
            *p += t;
        }
        softmax_in_place(&mut probs);
        Ok(ClassifierPass { run, probs })
    }
}

pub struct ClassifierPass {
    pub run: crate::lstm::SequenceRun,
    pub probs: Vector,
}

impl ClassifierPass {
    pub fn hiddens(&self) -> Vec<Vector> {
        self.run.states.iter().map(|s| s.h.clone()).collect()
    }
}

impl ParamSet for Classifier {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut v = prefixed("lstm", self.lstm.tensors());
        v.push(TensorView {
            name: "w_out".into(),
            shape: vec![self.w_out.rows(), self.w_out.cols()],
            data: self.w_out.as_slice(),
        });
        v.push(TensorView {
            name: "b_out".into(),
            shape: vec![self.b_out.len()],
            data: &self.b_out,
        });
        if let Some(a) = &self.arnet {
            v.extend(prefixed("arnet", a.tensors()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = prefixed_mut("lstm", self.lstm.tensors_mut());
        v.push(("w_out".into(), self.w_out.as_mut_slice()));
        v.push(("b_out".into(), &mut self.b_out));
        if let Some(a) = &mut self.arnet {
            v.extend(prefixed_mut("arnet", a.tensors_mut()));
        }
        v
    }
}

/// Per-example loss pieces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleLoss {
    pub ce: f64,
    pub ar: f64,
    pub correct: bool,
}

/// Forward and backward for one labelled sequence. Gradients of
/// `scale · (ce + λ Σ L_AR)` accumulate into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn example_gradients(
    model: &Classifier,
    seq: &[f64],
    label: u8,
    reg: &RegularizerConfig,
    arnet: ArnetMode,
    lambda: f64,
    scale: f64,
    rng: &mut RngStream,
    grads: &mut Classifier,
) -> Result<ExampleLoss> {
    if label as usize >= model.b_out.len() {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let pass = model.forward(seq, reg, rng, true)?;
    let h = model.hidden_dim();
    let t_len = pass.run.states.len();
    let ce = -pass.probs[label as usize].ln();
    let mut dlogits: Vector = pass.probs.iter().map(|p| scale * p).collect();
    dlogits[label as usize] -= scale;
    let last = &pass.run.states[t_len - 1].h;
    grads.w_out.add_outer(&dlogits, last);
    for (b, d) in grads.b_out.iter_mut().zip(dlogits.iter()) {
        *b += d;
    }
    let mut dh_last = Vector::zeros(h);
    model.w_out.matvec_t_acc(&dlogits, &mut dh_last);

    let mut ar = 0.0;
    let mut dh_steps: Vec<Vector> = Vec::new();
    if arnet != ArnetMode::Off {
        let a = model
            .arnet
            .as_ref()
            .ok_or_else(|| Error::invalid("reconstructor is not attached"))?;
        let mut ap = a.sequence_pass(&pass.hiddens())?;
        ar = ap.total;
        let w = lambda * scale;
        ap.grads.scale_all(w);
        accumulate(
            grads
                .arnet
                .as_mut()
                .expect("gradient container has reconstructor"),
            &ap.grads,
        );
        if arnet == ArnetMode::Joint {
            for d in &mut ap.dhiddens {
                d.iter_mut().for_each(|v| *v *= w);
            }
            dh_steps = ap.dhiddens;
        }
    }
    model.lstm.backward_sequence(
        &pass.run.caches,
        &dh_steps,
        &dh_last,
        &vec![0.0; h],
        &mut grads.lstm,
    );
    Ok(ExampleLoss {
        ce,
        ar,
        correct: argmax(&pass.probs) == label as usize,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmnistConfig {
    pub hidden_dim: usize,
    /// 0 means the encoder hidden size.
    pub arnet_dim: usize,
    pub init_bound: f64,
    pub forget_bias: f64,
    pub permutation_seed: u64,
    pub lambda: f64,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub early_stop_patience: usize,
    pub regularizer: RegularizerConfig,
    /// Reconstructor participation in stage 2.
    pub arnet: ArnetMode,
    pub seed: u64,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Examples held out from the training set for early stopping.
    pub val_size: usize,
}

impl Default for PmnistConfig {
    fn default() -> Self {
        PmnistConfig {
            hidden_dim: 128,
            arnet_dim: 0,
            init_bound: 0.08,
            forget_bias: 1.0,
            permutation_seed: 0,
            lambda: 0.01,
            lr_stage1: 1e-3,
            lr_stage2: 5e-4,
            batch_size: 64,
            epochs_stage1: 30,
            epochs_stage2: 20,
            early_stop_patience: 10,
            regularizer: RegularizerConfig::none(),
            arnet: ArnetMode::Joint,
            seed: 1,
            clip_norm: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            val_size: 5000,
        }
    }
}

impl PmnistConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.hidden_dim == 0 {
            errs.push("hidden_dim must be >= 1".to_string());
        }
        if !(self.lambda >= 0.0) {
            errs.push("lambda must be >= 0".to_string());
        }
        if !(self.lr_stage1 > 0.0 && self.lr_stage2 > 0.0) {
            errs.push("learning rates must be positive".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be >= 1".to_string());
        }
        if !(self.init_bound > 0.0) {
            errs.push("init_bound must be positive".to_string());
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmnistRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub stage_epoch: usize,
    /// Mean joint loss per example.
    pub loss: f64,
    pub l_ar: f64,
    pub train_accuracy: f64,
    /// Validation accuracy.
    pub val_metric: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmnistProgress {
    pub stage: Stage,
    pub stage_epoch: usize,
    pub global_epoch: usize,
    pub stopping: EarlyStopping,
    pub done: bool,
}

/// Resumable two-stage classifier trainer.
#[derive(Debug, Clone)]
pub struct PmnistTrainer {
    pub config: PmnistConfig,
    pub model: Classifier,
    pub adam: Adam,
    pub rng: RngStream,
    pub progress: PmnistProgress,
    pub best: Option<Classifier>,
    pub history: Vec<PmnistRecord>,
}

impl PmnistTrainer {
    pub fn new(config: PmnistConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed);
        let model = Classifier::init(
            config.hidden_dim,
            CLASSES,
            config.init_bound,
            config.forget_bias,
            &mut rng,
        )?;
        Ok(PmnistTrainer {
            adam: Adam::new(config.adam(config.lr_stage1)),
            rng,
            model,
            progress: PmnistProgress {
                stage: Stage::Stage1,
                stage_epoch: 0,
                global_epoch: 0,
                stopping: EarlyStopping::default(),
                done: config.epochs_stage1 == 0 && config.epochs_stage2 == 0,
            },
            best: None,
            history: Vec::new(),
            config,
        })
    }

    fn budget(&self) -> usize {
        match self.progress.stage {
            Stage::Stage1 => self.config.epochs_stage1,
            Stage::Stage2 => self.config.epochs_stage2,
        }
    }

    /// Whether the current stage has used its budget or run out of patience
    /// but has not been closed by [`PmnistTrainer::finish_stage`] yet.
    pub fn stage_complete(&self) -> bool {
        !self.progress.done
            && (self.progress.stage_epoch >= self.budget()
                || self
                    .progress
                    .stopping
                    .exhausted(self.config.early_stop_patience))
    }

    pub fn run_epoch(&mut self, train: &PermutedSet, val: &PermutedSet) -> Result<PmnistRecord> {
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
    pub fn train_epoch(&mut self, train: &PermutedSet, val: &PermutedSet) -> Result<PmnistRecord> {
        if self.progress.done {
            return Err(Error::invalid("training already finished"));
        }
        if self.stage_complete() {
            return Err(Error::invalid("stage complete; call finish_stage first"));
        }
        if train.items.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if train.perm_seed != self.config.permutation_seed
            || val.perm_seed != self.config.permutation_seed
        {
            return Err(Error::Data(
                "data permutation seed does not match the configuration".into(),
            ));
        }
        let mode = match self.progress.stage {
            Stage::Stage1 => ArnetMode::Off,
            Stage::Stage2 => self.config.arnet,
        };
        let mut order: Vec<usize> = (0..train.items.len()).collect();
        self.rng.shuffle(&mut order);
        let (mut ce, mut ar, mut correct) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let mut grads = self.model.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let ex = &train.items[i];
                let l = example_gradients(
                    &self.model,
                    ex.pixels(),
                    ex.label(),
                    &self.config.regularizer,
                    mode,
                    self.config.lambda,
                    scale,
                    &mut self.rng,
                    &mut grads,
                )?;
                ce += l.ce;
                ar += l.ar;
                correct += l.correct as usize;
            }
            if self.config.clip_norm > 0.0 {
                clip_global_norm(&mut grads, self.config.clip_norm);
            }
            self.adam.update(&mut self.model, &grads, &[])?;
        }
        self.progress.stage_epoch += 1;
        self.progress.global_epoch += 1;
        let eval_set = if val.items.is_empty() { train } else { val };
        let acc = accuracy(&self.model, eval_set, &self.config.regularizer)?;
        if self
            .progress
            .stopping
            .observe(self.progress.stage_epoch, acc)
        {
            self.best = Some(self.model.clone());
        }
        let n = train.items.len() as f64;
        let rec = PmnistRecord {
            epoch: self.progress.global_epoch,
            stage: self.progress.stage,
            stage_epoch: self.progress.stage_epoch,
            loss: (ce + self.config.lambda * ar) / n,
            l_ar: ar / n,
            train_accuracy: correct as f64 / n,
            val_metric: acc,
            lr: self.adam.config.lr,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    pub fn finish_stage(&mut self) -> Result<()> {
        if let Some(b) = self.best.take() {
            self.model = b;
        }
        match self.progress.stage {
            Stage::Stage1 => {
                if self.model.arnet.is_none() {
                    let dim = if self.config.arnet_dim == 0 {
                        self.config.hidden_dim
                    } else {
                        self.config.arnet_dim
                    };
                    let mut init = self.rng.fork(ARNET_INIT_STREAM);
                    self.model.arnet = Some(ArnetParams::init(
                        self.config.hidden_dim,
                        dim,
                        self.config.init_bound,
                        self.config.forget_bias,
                        &mut init,
                    )?);
                }
                self.adam = Adam::new(self.config.adam(self.config.lr_stage2));
                self.progress.stage = Stage::Stage2;
                self.progress.stage_epoch = 0;
                self.progress.stopping = EarlyStopping::default();
                self.progress.done = self.config.epochs_stage2 == 0;
            }
            Stage::Stage2 => self.progress.done = true,
        }
        Ok(())
    }

    pub fn run<F>(&mut self, train: &PermutedSet, val: &PermutedSet, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&PmnistTrainer, &PmnistRecord) -> Result<()>,
    {
        while self.stage_complete() {
            self.finish_stage()?;
        }
        while !self.progress.done {
            let r = self.run_epoch(train, val)?;
            on_epoch(self, &r)?;
        }
        Ok(())
    }
}

fn accuracy(model: &Classifier, data: &PermutedSet, reg: &RegularizerConfig) -> Result<f64> {
    let mut correct = 0usize;
    for ex in &data.items {
        let p = model.predict(ex.pixels(), reg)?;
        correct += (argmax(&p) == ex.label() as usize) as usize;
    }
    Ok(correct as f64 / data.items.len() as f64)
}

/// Split off the last `val_size` examples (capped to leave at least one for
/// training) as a validation set.
pub fn holdout(
    items: &[PixelSequence],
    val_size: usize,
) -> (Vec<PixelSequence>, Vec<PixelSequence>) {
    let v = val_size.min(items.len().saturating_sub(1));
    let cut = items.len() - v;
    (items[..cut].to_vec(), items[cut..].to_vec())
}

/// Two-stage training on raw sequences; the permutation comes from the
/// configuration.
pub fn classify_train(config: PmnistConfig, data: &[PixelSequence]) -> Result<PmnistTrainer> {
    let perm = Permutation::from_seed(config.permutation_seed, PIXELS);
    let (train, val) = holdout(data, config.val_size);
    let train = PermutedSet::new(&train, &perm)?;
    let val = PermutedSet::new(&val, &perm)?;
    let mut t = PmnistTrainer::new(config)?;
    t.run(&train, &val, |_, _| Ok(()))?;
    Ok(t)
}

/// Accuracy of `model` on data permuted with `data_perm_seed`; refuses data
/// prepared under a different permutation than the model was trained with.
pub fn classify_eval(model: &Classifier, model_perm_seed: u64, data: &PermutedSet) -> Result<f64> {
    if data.items.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if data.perm_seed != model_perm_seed {
        return Err(crate::error::CheckpointError::PermutationSeed {
            checkpoint: model_perm_seed,
            data: data.perm_seed,
        }
        .into());
    }
    accuracy(model, data, &RegularizerConfig::none())
}
