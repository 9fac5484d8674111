//! Encoder-decoder captioning model: token or feature encoding, embedding
//! and softmax decoding, teacher-forced passes and their gradients.

use serde::{Deserialize, Serialize};

use super::corpus::{Caption, Example, Source};
use super::vocab::PAD;
use crate::arnet::ArnetParams;
use crate::attention::{
    AttentionMemory, AttentionParams, AttentiveCache, AttentiveLstmParams, EncodedSource,
};
use crate::error::{Error, Result};
use crate::lstm::{
    regularized_step, regularized_step_backward, GateGradBuffer, LstmParams, LstmState,
    RegularizedCache, RegularizerConfig, SequenceRun,
};
use crate::params::{accumulate, prefixed, prefixed_mut, ParamSet, TensorView};
use crate::tensor::{argmax, init_uniform, softmax_in_place, Matrix, RngStream, Vector};

/// How the global source vector conditions the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// `h_0 = tanh(W_h g)`, `c_0 = tanh(W_c g)`.
    #[default]
    StateInit,
    /// Zero state, then one step on `W_img g` before the first word.
    FirstInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceKind {
    Tokens {
        vocab_size: usize,
        emb_dim: usize,
        hidden_dim: usize,
    },
    Features {
        dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub source: SourceKind,
    /// Target vocabulary size `V`.
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub attention: bool,
    /// Attention projection size; 0 means the decoder hidden size.
    pub attn_dim: usize,
    pub init_mode: InitMode,
    /// Reconstructor hidden size; 0 means the decoder hidden size.
    pub arnet_dim: usize,
    pub init_bound: f64,
    pub forget_bias: f64,
}

impl ModelConfig {
    pub fn source_dim(&self) -> usize {
        match self.source {
            SourceKind::Tokens { hidden_dim, .. } => hidden_dim,
            SourceKind::Features { dim } => dim,
        }
    }

    pub fn effective_attn_dim(&self) -> usize {
        if self.attn_dim == 0 {
            self.hidden_dim
        } else {
            self.attn_dim
        }
    }

    pub fn effective_arnet_dim(&self) -> usize {
        if self.arnet_dim == 0 {
            self.hidden_dim
        } else {
            self.arnet_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.emb_dim,
            self.hidden_dim,
            self.source_dim(),
        ];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if let SourceKind::Tokens {
            vocab_size,
            emb_dim,
            ..
        } = self.source
        {
            if vocab_size == 0 || emb_dim == 0 {
                return Err(Error::Config("encoder dimensions must be positive".into()));
            }
        }
        if !(self.init_bound > 0.0) {
            return Err(Error::Config("init_bound must be positive".into()));
        }
        Ok(())
    }
}

/// Embedding plus LSTM over source tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEncoder {
    /// `V_src × emb`.
    pub embed: Matrix,
    pub lstm: LstmParams,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    tokens: Vec<u32>,
    run: SequenceRun,
}

impl TokenEncoder {
    pub fn zeros_like(&self) -> Self {
        TokenEncoder {
            embed: Matrix::zeros(self.embed.rows(), self.embed.cols()),
            lstm: self.lstm.zeros_like(),
        }
    }

    /// `g = h_T`, `s = [h_1..h_T]`.
    pub fn encode(&self, tokens: &[u32]) -> Result<(EncodedSource, EncoderCache)> {
        if tokens.is_empty() {
            return Err(Error::invalid("cannot encode an empty token sequence"));
        }
        let xs = tokens
            .iter()
            .map(|&t| embed_row(&self.embed, t))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = RngStream::new(0);
        let run = self.lstm.run_sequence(
            &xs,
            &LstmState::zeros(self.lstm.hidden_dim()),
            &RegularizerConfig::none(),
            &mut rng,
            false,
        )?;
        let s: Vec<Vector> = run.states.iter().map(|st| st.h.clone()).collect();
        let g = s[s.len() - 1].clone();
        Ok((
            EncodedSource { g, s },
            EncoderCache {
                tokens: tokens.to_vec(),
                run,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &EncoderCache,
        dg: &[f64],
        ds: &[Vector],
        grads: &mut TokenEncoder,
    ) {
        let h = self.lstm.hidden_dim();
        let (dxs, _) =
            self.lstm
                .backward_sequence(&cache.run.caches, ds, dg, &vec![0.0; h], &mut grads.lstm);
        for (t, dx) in cache.tokens.iter().zip(&dxs) {
            for (a, b) in grads.embed.row_mut(*t as usize).iter_mut().zip(dx.iter()) {
                *a += b;
            }
        }
    }
}

impl ParamSet for TokenEncoder {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut v = vec![TensorView {
            name: "embed".into(),
            shape: vec![self.embed.rows(), self.embed.cols()],
            data: self.embed.as_slice(),
        }];
        v.extend(prefixed("lstm", self.lstm.tensors()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = vec![("embed".to_string(), self.embed.as_mut_slice())];
        v.extend(prefixed_mut("lstm", self.lstm.tensors_mut()));
        v
    }
}

/// `encode_tokens(enc, E_enc, tokens)`.
pub fn encode_tokens(lstm: &LstmParams, embed: &Matrix, tokens: &[u32]) -> Result<EncodedSource> {
    let enc = TokenEncoder {
        embed: embed.clone(),
        lstm: lstm.clone(),
    };
    Ok(enc.encode(tokens)?.0)
}

fn embed_row(embed: &Matrix, token: u32) -> Result<&[f64]> {
    if token as usize >= embed.rows() {
        return Err(Error::invalid(format!(
            "token id {token} out of range for vocabulary of {}",
            embed.rows()
        )));
    }
    Ok(embed.row(token as usize))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderCell {
    Plain(LstmParams),
    Attentive {
        cell: AttentiveLstmParams,
        attn: AttentionParams,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum DecoderInit {
    State { w_h: Matrix, w_c: Matrix },
    FirstInput { w_img: Matrix },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    /// `V × emb`.
    pub embed: Matrix,
    pub cell: DecoderCell,
    /// `V × H`.
    pub w_out: Matrix,
    pub b_out: Vector,
    pub init: DecoderInit,
}

#[derive(Debug, Clone)]
enum CellCache {
    Plain(RegularizedCache),
    Attentive(AttentiveCache),
}

impl CellCache {
    fn input(&self) -> &[f64] {
        match self {
            CellCache::Plain(c) => &c.cell.input,
            CellCache::Attentive(c) => &c.cell.cell.input,
        }
    }
}

impl DecoderParams {
    pub fn vocab_size(&self) -> usize {
        self.w_out.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_out.cols()
    }

    pub fn emb_dim(&self) -> usize {
        self.embed.cols()
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        DecoderParams {
            embed: z(&self.embed),
            cell: match &self.cell {
                DecoderCell::Plain(p) => DecoderCell::Plain(p.zeros_like()),
                DecoderCell::Attentive { cell, attn } => DecoderCell::Attentive {
                    cell: cell.zeros_like(),
                    attn: attn.zeros_like(),
                },
            },
            w_out: z(&self.w_out),
            b_out: Vector::zeros(self.b_out.len()),
            init: match &self.init {
                DecoderInit::State { w_h, w_c } => DecoderInit::State {
                    w_h: z(w_h),
                    w_c: z(w_c),
                },
                DecoderInit::FirstInput { w_img } => DecoderInit::FirstInput { w_img: z(w_img) },
            },
        }
    }

    pub fn prepare(&self, src: &EncodedSource) -> Result<Option<AttentionMemory>> {
        match &self.cell {
            DecoderCell::Plain(_) => Ok(None),
            DecoderCell::Attentive { attn, .. } => Ok(Some(attn.prepare(&src.s)?)),
        }
    }

    fn step(
        &self,
        memory: Option<&AttentionMemory>,
        x: &[f64],
        state: &LstmState,
        reg: &RegularizerConfig,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<(LstmState, CellCache)> {
        match &self.cell {
            DecoderCell::Plain(p) => {
                let input = Vector::concat(&[x, &state.h]);
                let (s, c) = regularized_step(
                    &p.weights,
                    &p.bias,
                    p.input_dim(),
                    input,
                    state,
                    reg,
                    rng,
                    training,
                );
                Ok((s, CellCache::Plain(c)))
            }
            DecoderCell::Attentive { cell, attn } => {
                let mem = memory
                    .ok_or_else(|| Error::invalid("attentive decoder needs prepared memory"))?;
                let (s, c) = cell.step_prepared(attn, mem, x, state, reg, rng, training)?;
                Ok((s, CellCache::Attentive(c)))
            }
        }
    }

    /// Decoder state before the first word, plus the cache of the image step
    /// in first-input mode.
    fn initial(
        &self,
        g: &[f64],
        memory: Option<&AttentionMemory>,
        reg: &RegularizerConfig,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<(LstmState, InitCache)> {
        let h = self.hidden_dim();
        match &self.init {
            DecoderInit::State { w_h, w_c } => {
                if g.len() != w_h.cols() {
                    return Err(Error::shape("decoder_init", w_h.cols(), g.len()));
                }
                let mut h0 = Vector::zeros(h);
                let mut c0 = Vector::zeros(h);
                w_h.matvec_into(g, &mut h0);
                w_c.matvec_into(g, &mut c0);
                h0.iter_mut().for_each(|v| *v = v.tanh());
                c0.iter_mut().for_each(|v| *v = v.tanh());
                Ok((LstmState { h: h0, c: c0 }, InitCache::State))
            }
            DecoderInit::FirstInput { w_img } => {
                if g.len() != w_img.cols() {
                    return Err(Error::shape("decoder_init", w_img.cols(), g.len()));
                }
                let mut x = Vector::zeros(w_img.rows());
                w_img.matvec_into(g, &mut x);
                let (s, c) = self.step(memory, &x, &LstmState::zeros(h), reg, rng, training)?;
                Ok((s, InitCache::FirstInput(Box::new(c))))
            }
        }
    }

    fn logits(&self, h: &[f64]) -> Vector {
        let mut out = self.b_out.clone();
        let mut tmp = Vector::zeros(self.vocab_size());
        self.w_out.matvec_into(h, &mut tmp);
        for (o, t) in out.iter_mut().zip(tmp.iter()) {
            *o += t;
        }
        out
    }
}

impl ParamSet for DecoderParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        fn m<'a>(name: &str, m: &'a Matrix) -> TensorView<'a> {
            TensorView {
                name: name.into(),
                shape: vec![m.rows(), m.cols()],
                data: m.as_slice(),
            }
        }
        let mut v = vec![m("embed", &self.embed)];
        match &self.cell {
            DecoderCell::Plain(p) => v.extend(prefixed("cell", p.tensors())),
            DecoderCell::Attentive { cell, attn } => {
                v.extend(prefixed("cell", cell.tensors()));
                v.extend(prefixed("attn", attn.tensors()));
            }
        }
        v.push(m("w_out", &self.w_out));
        v.push(TensorView {
            name: "b_out".into(),
            shape: vec![self.b_out.len()],
            data: &self.b_out,
        });
        match &self.init {
            DecoderInit::State { w_h, w_c } => {
                v.push(m("init.w_h", w_h));
                v.push(m("init.w_c", w_c));
            }
            DecoderInit::FirstInput { w_img } => v.push(m("init.w_img", w_img)),
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = vec![("embed".to_string(), self.embed.as_mut_slice())];
        match &mut self.cell {
            DecoderCell::Plain(p) => v.extend(prefixed_mut("cell", p.tensors_mut())),
            DecoderCell::Attentive { cell, attn } => {
                v.extend(prefixed_mut("cell", cell.tensors_mut()));
                v.extend(prefixed_mut("attn", attn.tensors_mut()));
            }
        }
        v.push(("w_out".into(), self.w_out.as_mut_slice()));
        v.push(("b_out".into(), &mut self.b_out));
        match &mut self.init {
            DecoderInit::State { w_h, w_c } => {
                v.push(("init.w_h".into(), w_h.as_mut_slice()));
                v.push(("init.w_c".into(), w_c.as_mut_slice()));
            }
            DecoderInit::FirstInput { w_img } => {
                v.push(("init.w_img".into(), w_img.as_mut_slice()))
            }
        }
        v
    }
}

#[derive(Debug, Clone)]
enum InitCache {
    State,
    FirstInput(Box<CellCache>),
}

/// How the reconstructor takes part in a pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArnetMode {
    /// Not evaluated.
    #[default]
    Off,
    /// Loss term with gradients into both the reconstructor and the decoder.
    Joint,
    /// Reconstructor trains on the hidden states but sends no gradient back.
    Detached,
}

/// Full captioning model.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionModel {
    pub config: ModelConfig,
    pub encoder: Option<TokenEncoder>,
    pub decoder: DecoderParams,
    pub arnet: Option<ArnetParams>,
}

impl CaptionModel {
    /// Random initialization; the reconstructor is not attached.
    pub fn init(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let b = config.init_bound;
        let fb = config.forget_bias;
        let (h, e, g) = (config.hidden_dim, config.emb_dim, config.source_dim());
        let encoder = match config.source {
            SourceKind::Tokens {
                vocab_size,
                emb_dim,
                hidden_dim,
            } => Some(TokenEncoder {
                embed: init_uniform(vocab_size, emb_dim, b, rng)?,
                lstm: LstmParams::init(emb_dim, hidden_dim, b, fb, rng)?,
            }),
            SourceKind::Features { .. } => None,
        };
        let embed = init_uniform(config.vocab_size, e, b, rng)?;
        let cell = if config.attention {
            DecoderCell::Attentive {
                cell: AttentiveLstmParams::init(e, h, g, b, fb, rng)?,
                attn: AttentionParams::init(g, h, config.effective_attn_dim(), b, rng)?,
            }
        } else {
            DecoderCell::Plain(LstmParams::init(e, h, b, fb, rng)?)
        };
        let w_out = init_uniform(config.vocab_size, h, b, rng)?;
        let init = match config.init_mode {
            InitMode::StateInit => DecoderInit::State {
                w_h: init_uniform(h, g, b, rng)?,
                w_c: init_uniform(h, g, b, rng)?,
            },
            InitMode::FirstInput => DecoderInit::FirstInput {
                w_img: init_uniform(e, g, b, rng)?,
            },
        };
        Ok(CaptionModel {
            decoder: DecoderParams {
                embed,
                cell,
                w_out,
                b_out: Vector::zeros(config.vocab_size),
                init,
            },
            encoder,
            arnet: None,
            config,
        })
    }

    /// Attach a freshly initialized reconstructor drawn from `rng`.
    pub fn attach_arnet(&mut self, rng: &mut RngStream) -> Result<()> {
        self.arnet = Some(ArnetParams::init(
            self.config.hidden_dim,
            self.config.effective_arnet_dim(),
            self.config.init_bound,
            self.config.forget_bias,
            rng,
        )?);
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        CaptionModel {
            config: self.config.clone(),
            encoder: self.encoder.as_ref().map(TokenEncoder::zeros_like),
            decoder: self.decoder.zeros_like(),
            arnet: self.arnet.as_ref().map(ArnetParams::zeros_like),
        }
    }

    pub fn encode(&self, source: &Source) -> Result<(EncodedSource, Option<EncoderCache>)> {
        match (source, &self.encoder) {
            (Source::Tokens(t), Some(enc)) => {
                let (src, cache) = enc.encode(t)?;
                Ok((src, Some(cache)))
            }
            (Source::Features(f), None) => {
                if f.g.len() != self.config.source_dim()
                    || f.local_dim() != self.config.source_dim()
                {
                    return Err(Error::shape("encode", self.config.source_dim(), f.g.len()));
                }
                Ok((f.clone(), None))
            }
            (Source::Tokens(_), None) => Err(Error::invalid("model expects feature sources")),
            (Source::Features(_), Some(_)) => Err(Error::invalid("model expects token sources")),
        }
    }
}

impl ParamSet for CaptionModel {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut v = Vec::new();
        if let Some(e) = &self.encoder {
            v.extend(prefixed("encoder", e.tensors()));
        }
        v.extend(prefixed("decoder", self.decoder.tensors()));
        if let Some(a) = &self.arnet {
            v.extend(prefixed("arnet", a.tensors()));
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = Vec::new();
        if let Some(e) = &mut self.encoder {
            v.extend(prefixed_mut("encoder", e.tensors_mut()));
        }
        v.extend(prefixed_mut("decoder", self.decoder.tensors_mut()));
        if let Some(a) = &mut self.arnet {
            v.extend(prefixed_mut("arnet", a.tensors_mut()));
        }
        v
    }
}

/// Options for one decoder pass over a gold caption.
#[derive(Debug, Clone)]
pub struct PassOptions {
    pub reg: RegularizerConfig,
    pub training: bool,
    /// Probability of feeding the gold token; 1 is pure teacher forcing.
    pub p_gold: f64,
}

impl Default for PassOptions {
    fn default() -> Self {
        PassOptions {
            reg: RegularizerConfig::none(),
            training: false,
            p_gold: 1.0,
        }
    }
}

/// Forward record of a pass over a gold caption.
#[derive(Debug, Clone)]
pub struct DecodeTrace {
    /// `Σ −log p(y_{t+1} | ·)` over predicted positions.
    pub nll: f64,
    /// Decoder hidden state at each predicted position.
    pub hiddens: Vec<Vector>,
    /// Tokens fed at each position.
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    /// Output distribution at each position.
    pub probs: Vec<Vector>,
    pub src: EncodedSource,
    enc_cache: Option<EncoderCache>,
    memory: Option<AttentionMemory>,
    init: InitCache,
    init_state: LstmState,
    caches: Vec<CellCache>,
}

impl DecodeTrace {
    pub fn predicted(&self) -> usize {
        self.targets.len()
    }

    /// Positions where the argmax equals the target.
    pub fn correct(&self) -> usize {
        self.probs
            .iter()
            .zip(&self.targets)
            .filter(|(p, &t)| argmax(p) == t as usize)
            .count()
    }

    /// Attention weights per position, when the decoder attends.
    pub fn attention_weights(&self) -> Vec<&Vector> {
        self.caches
            .iter()
            .filter_map(|c| match c {
                CellCache::Attentive(a) => Some(&a.attend.weights),
                CellCache::Plain(_) => None,
            })
            .collect()
    }
}

/// Return `gold` with probability `p_use_gold`, otherwise `model_token`.
pub fn scheduled_sampling_step(
    p_use_gold: f64,
    gold: u32,
    model_token: u32,
    rng: &mut RngStream,
) -> u32 {
    if rng.bernoulli(p_use_gold) {
        gold
    } else {
        model_token
    }
}

/// `nll + λ · Σ L_AR`.
pub fn joint_loss(nll: f64, total_ar: f64, lambda: f64) -> f64 {
    nll + lambda * total_ar
}

/// Teacher-forced (or scheduled-sampling) pass of `model` over `gold`.
pub fn decode_teacher_forced(
    model: &CaptionModel,
    source: &Source,
    gold: &Caption,
    opts: &PassOptions,
    rng: &mut RngStream,
) -> Result<DecodeTrace> {
    let (src, enc_cache) = model.encode(source)?;
    decode_encoded(model, src, enc_cache, gold, opts, rng)
}

fn decode_encoded(
    model: &CaptionModel,
    src: EncodedSource,
    enc_cache: Option<EncoderCache>,
    gold: &Caption,
    opts: &PassOptions,
    rng: &mut RngStream,
) -> Result<DecodeTrace> {
    let dec = &model.decoder;
    let v = dec.vocab_size();
    let tokens = gold.tokens();
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
        return Err(Error::invalid(format!(
            "token id {bad} out of range for vocabulary of {v}"
        )));
    }
    let memory = dec.prepare(&src)?;
    let (init_state, init) = dec.initial(&src.g, memory.as_ref(), &opts.reg, rng, opts.training)?;
    let n_pred = tokens[1..]
        .iter()
        .position(|&t| t == PAD)
        .unwrap_or(tokens.len() - 1);
    let mut state = init_state.clone();
    let mut trace = DecodeTrace {
        nll: 0.0,
        hiddens: Vec::with_capacity(n_pred),
        inputs: Vec::with_capacity(n_pred),
        targets: Vec::with_capacity(n_pred),
        probs: Vec::with_capacity(n_pred),
        src,
        enc_cache,
        memory: None,
        init,
        init_state,
        caches: Vec::with_capacity(n_pred),
    };
    for k in 0..n_pred {
        let input = if k == 0 || opts.p_gold >= 1.0 {
            tokens[k]
        } else {
            let model_token = rng.categorical(&trace.probs[k - 1]) as u32;
            scheduled_sampling_step(opts.p_gold, tokens[k], model_token, rng)
        };
        let x = dec.embed.row(input as usize);
        let (next, cache) = dec.step(memory.as_ref(), x, &state, &opts.reg, rng, opts.training)?;
        let mut p = dec.logits(&next.h);
        softmax_in_place(&mut p);
        let target = tokens[k + 1];
        trace.nll -= p[target as usize].ln();
        trace.hiddens.push(next.h.clone());
        trace.inputs.push(input);
        trace.targets.push(target);
        trace.probs.push(p);
        trace.caches.push(cache);
        state = next;
    }
    trace.memory = memory;
    Ok(trace)
}

/// Backward of a pass: gradient of `scale · nll` plus the external hidden
/// gradients `dhiddens` (already scaled), accumulated into `grads`.
pub fn backward(
    model: &CaptionModel,
    trace: &DecodeTrace,
    scale: f64,
    dhiddens: Option<&[Vector]>,
    grads: &mut CaptionModel,
) -> Result<()> {
    let dec = &model.decoder;
    let g = &mut grads.decoder;
    let (v, h, e) = (dec.vocab_size(), dec.hidden_dim(), dec.emb_dim());
    let n = trace.targets.len();

    let mut dlogits = Matrix::zeros(n, v);
    let mut hs = Matrix::zeros(n, h);
    let mut dh_ext = vec![Vector::zeros(h); n];
    for k in 0..n {
        let row = dlogits.row_mut(k);
        for (d, p) in row.iter_mut().zip(trace.probs[k].iter()) {
            *d = scale * p;
        }
        row[trace.targets[k] as usize] -= scale;
        hs.row_mut(k).copy_from_slice(&trace.hiddens[k]);
        for (b, d) in g.b_out.iter_mut().zip(dlogits.row(k)) {
            *b += d;
        }
        dec.w_out.matvec_t_acc(dlogits.row(k), &mut dh_ext[k]);
        if let Some(extra) = dhiddens {
            for (a, b) in dh_ext[k].iter_mut().zip(extra[k].iter()) {
                *a += b;
            }
        }
    }
    g.w_out.add_at_b(&dlogits, &hs);

    let n_src = trace.src.s.len();
    let src_dim = trace.src.g.len();
    let mut ds = vec![Vector::zeros(trace.src.local_dim()); n_src];
    let mut dkeys = match &dec.cell {
        DecoderCell::Attentive { attn, .. } => vec![Vector::zeros(attn.attn_dim()); n_src],
        DecoderCell::Plain(_) => Vec::new(),
    };

    let mut steps: Vec<(&CellCache, Option<&Vector>)> = Vec::with_capacity(n + 1);
    if let InitCache::FirstInput(c) = &trace.init {
        steps.push((c, None));
    }
    for k in 0..n {
        steps.push((&trace.caches[k], Some(&dh_ext[k])));
    }

    let mut buffer = GateGradBuffer::new();
    let mut dgates = vec![0.0; 4 * h];
    let mut dh = Vector::zeros(h);
    let mut dc = Vector::zeros(h);
    let mut dxs: Vec<Vector> = Vec::with_capacity(steps.len());
    for (cache, ext) in steps.iter().rev() {
        if let Some(ext) = ext {
            for (a, b) in dh.iter_mut().zip(ext.iter()) {
                *a += b;
            }
        }
        let (dx, dh_prev, dc_prev) = match (cache, &dec.cell, &mut g.cell) {
            (CellCache::Plain(c), DecoderCell::Plain(p), _) => {
                let (dinput, extra, dc_prev) =
                    regularized_step_backward(&p.weights, c, &dh, &dc, &mut dgates);
                let mut dhp: Vector = dinput[e..e + h].into();
                if let Some(x) = extra {
                    for (a, b) in dhp.iter_mut().zip(x.iter()) {
                        *a += b;
                    }
                }
                (Vector::from(&dinput[..e]), dhp, dc_prev)
            }
            (
                CellCache::Attentive(c),
                DecoderCell::Attentive { cell, attn },
                DecoderCell::Attentive { attn: ga, .. },
            ) => {
                let mem = trace.memory.as_ref().expect("attentive trace keeps memory");
                cell.step_backward_prepared(
                    attn,
                    mem,
                    c,
                    &dh,
                    &dc,
                    &mut dgates,
                    ga,
                    &mut dkeys,
                    &mut ds,
                )
            }
            _ => return Err(Error::invalid("trace does not match the decoder cell")),
        };
        buffer.push(&dgates, cache.input());
        dxs.push(dx);
        dh = dh_prev;
        dc = dc_prev;
    }
    dxs.reverse();
    match &mut g.cell {
        DecoderCell::Plain(p) => buffer.flush(&mut p.weights, &mut p.bias),
        DecoderCell::Attentive { cell, .. } => buffer.flush(&mut cell.weights, &mut cell.bias),
    }
    if let (DecoderCell::Attentive { attn, .. }, DecoderCell::Attentive { attn: ga, .. }) =
        (&dec.cell, &mut g.cell)
    {
        let mem = trace.memory.as_ref().expect("attentive trace keeps memory");
        attn.memory_backward(mem, &dkeys, ga, &mut ds);
    }

    let first_word = dxs.len() - n;
    for (k, dx) in dxs[first_word..].iter().enumerate() {
        let row = g.embed.row_mut(trace.inputs[k] as usize);
        for (a, b) in row.iter_mut().zip(dx.iter()) {
            *a += b;
        }
    }

    let mut dg = Vector::zeros(src_dim);
    match (&dec.init, &mut g.init) {
        (
            DecoderInit::State { w_h, w_c },
            DecoderInit::State {
                w_h: gw_h,
                w_c: gw_c,
            },
        ) => {
            let dpre_h: Vector = dh
                .iter()
                .zip(trace.init_state.h.iter())
                .map(|(d, y)| d * (1.0 - y * y))
                .collect();
            let dpre_c: Vector = dc
                .iter()
                .zip(trace.init_state.c.iter())
                .map(|(d, y)| d * (1.0 - y * y))
                .collect();
            gw_h.add_outer(&dpre_h, &trace.src.g);
            gw_c.add_outer(&dpre_c, &trace.src.g);
            w_h.matvec_t_acc(&dpre_h, &mut dg);
            w_c.matvec_t_acc(&dpre_c, &mut dg);
        }
        (DecoderInit::FirstInput { w_img }, DecoderInit::FirstInput { w_img: gw }) => {
            gw.add_outer(&dxs[0], &trace.src.g);
            w_img.matvec_t_acc(&dxs[0], &mut dg);
        }
        _ => {
            return Err(Error::invalid(
                "gradient container does not match the model",
            ))
        }
    }

    if let (Some(enc), Some(cache), Some(genc)) =
        (&model.encoder, &trace.enc_cache, &mut grads.encoder)
    {
        enc.backward(cache, &dg, &ds, genc);
    }
    Ok(())
}

/// Everything a training step needs to know about the objective.
#[derive(Debug, Clone)]
pub struct StepOptions {
    pub pass: PassOptions,
    pub lambda: f64,
    pub arnet: ArnetMode,
    /// Verify every attention weight vector sums to one.
    pub check_attention: bool,
}

/// Largest tolerated deviation of attention weights from a unit sum.
pub const ATTENTION_SUM_TOL: f64 = 1e-9;

fn check_attention(trace: &DecodeTrace) -> Result<usize> {
    let ws = trace.attention_weights();
    for (k, w) in ws.iter().enumerate() {
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > ATTENTION_SUM_TOL {
            return Err(Error::invalid(format!(
                "attention weights at step {k} sum to {sum}"
            )));
        }
    }
    Ok(ws.len())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub examples: usize,
    pub tokens: usize,
    pub correct: usize,
    pub nll: f64,
    pub ar: f64,
    pub attention_checks: usize,
}

impl BatchStats {
    pub fn merge(&mut self, o: &BatchStats) {
        self.attention_checks += o.attention_checks;
        self.examples += o.examples;
        self.tokens += o.tokens;
        self.correct += o.correct;
        self.nll += o.nll;
        self.ar += o.ar;
    }

    pub fn nll_per_token(&self) -> f64 {
        self.nll / self.tokens.max(1) as f64
    }

    pub fn token_accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }
}

/// Gradient of the batch-mean objective `1/B Σ (nll_b + λ Σ L_AR)` over
/// `batch`, accumulated into `grads` in example order.
pub fn batch_gradients(
    model: &CaptionModel,
    batch: &[&Example],
    opts: &StepOptions,
    rng: &mut RngStream,
    grads: &mut CaptionModel,
) -> Result<BatchStats> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut stats = BatchStats::default();
    for ex in batch {
        let trace = decode_teacher_forced(model, &ex.source, &ex.caption, &opts.pass, rng)?;
        let checks = if opts.check_attention {
            check_attention(&trace)?
        } else {
            0
        };
        let mut dh: Option<Vec<Vector>> = None;
        let mut ar = 0.0;
        if opts.arnet != ArnetMode::Off {
            let arnet = model
                .arnet
                .as_ref()
                .ok_or_else(|| Error::invalid("reconstructor is not attached"))?;
            let mut pass = arnet.sequence_pass(&trace.hiddens)?;
            ar = pass.total;
            let w = opts.lambda * scale;
            pass.grads.scale_all(w);
            accumulate(
                grads
                    .arnet
                    .as_mut()
                    .expect("gradient container has reconstructor"),
                &pass.grads,
            );
            if opts.arnet == ArnetMode::Joint {
                for d in &mut pass.dhiddens {
                    d.iter_mut().for_each(|v| *v *= w);
                }
                dh = Some(pass.dhiddens);
            }
        }
        backward(model, &trace, scale, dh.as_deref(), grads)?;
        stats.merge(&BatchStats {
            examples: 1,
            tokens: trace.predicted(),
            correct: trace.correct(),
            nll: trace.nll,
            ar,
            attention_checks: checks,
        });
    }
    Ok(stats)
}

/// Loss statistics without gradients.
pub fn evaluate(
    model: &CaptionModel,
    examples: &[Example],
    with_arnet: bool,
) -> Result<BatchStats> {
    let mut stats = BatchStats::default();
    let mut rng = RngStream::new(0);
    let opts = PassOptions::default();
    for ex in examples {
        let trace = decode_teacher_forced(model, &ex.source, &ex.caption, &opts, &mut rng)?;
        let ar = match (&model.arnet, with_arnet) {
            (Some(a), true) => a.sequence_loss(&trace.hiddens)?,
            _ => 0.0,
        };
        stats.merge(&BatchStats {
            examples: 1,
            tokens: trace.predicted(),
            correct: trace.correct(),
            nll: trace.nll,
            ar,
            attention_checks: 0,
        });
    }
    Ok(stats)
}

/// Decoder bound to one encoded source, for free-running inference.
pub struct DecoderSession<'a> {
    model: &'a CaptionModel,
    memory: Option<AttentionMemory>,
    init: LstmState,
    reg: RegularizerConfig,
}

impl<'a> DecoderSession<'a> {
    pub fn new(model: &'a CaptionModel, source: &Source, reg: &RegularizerConfig) -> Result<Self> {
        let (src, _) = model.encode(source)?;
        Self::from_encoded(model, &src, reg)
    }

    pub fn from_encoded(
        model: &'a CaptionModel,
        src: &EncodedSource,
        reg: &RegularizerConfig,
    ) -> Result<Self> {
        let dec = &model.decoder;
        let memory = dec.prepare(src)?;
        let mut rng = RngStream::new(0);
        let (init, _) = dec.initial(&src.g, memory.as_ref(), reg, &mut rng, false)?;
        Ok(DecoderSession {
            model,
            memory,
            init,
            reg: reg.clone(),
        })
    }

    pub fn initial_state(&self) -> LstmState {
        self.init.clone()
    }

    /// Feed `token`; returns the new state and the output logits.
    pub fn advance(&self, state: &LstmState, token: u32) -> Result<(LstmState, Vector)> {
        let dec = &self.model.decoder;
        let x = embed_row(&dec.embed, token)?;
        let mut rng = RngStream::new(0);
        let (next, _) = dec.step(self.memory.as_ref(), x, state, &self.reg, &mut rng, false)?;
        let logits = dec.logits(&next.h);
        Ok((next, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::extrapolated_gradient_terms;
    use crate::gradsuite::{seq2seq_check, Seq2seqFixture};
    use crate::seq2seq::vocab::{BOS, EOS};

    pub(crate) fn tiny_config(attention: bool, init_mode: InitMode) -> ModelConfig {
        ModelConfig {
            source: SourceKind::Tokens {
                vocab_size: 6,
                emb_dim: 3,
                hidden_dim: 4,
            },
            vocab_size: 5,
            emb_dim: 3,
            hidden_dim: 4,
            attention,
            attn_dim: 3,
            init_mode,
            arnet_dim: 3,
            init_bound: 1.0,
            forget_bias: 0.5,
        }
    }

    fn example() -> Example {
        Example {
            source: Source::Tokens(vec![4, 5, 1]),
            caption: Caption::new(vec![BOS, 3, 4, EOS], 10).unwrap(),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            for (attention, mode) in [
                (false, InitMode::StateInit),
                (true, InitMode::StateInit),
                (false, InitMode::FirstInput),
                (true, InitMode::FirstInput),
            ] {
                for r in seq2seq_check(seed, attention, mode, RegularizerConfig::none()).unwrap() {
                    assert!(r.max_rel_error <= 1e-4, "{seed} {attention} {mode:?} {r:?}");
                }
            }
        }
    }

    #[test]
    fn gradients_with_regularizers() {
        for (seed, attention, reg) in [
            (4, true, RegularizerConfig::zoneout(0.3, 0.2)),
            (5, false, RegularizerConfig::recurrent_dropout(0.3)),
        ] {
            for r in seq2seq_check(seed, attention, InitMode::StateInit, reg).unwrap() {
                assert!(r.max_rel_error <= 1e-4, "{r:?}");
            }
        }
    }

    #[test]
    fn gradients_match_extrapolated_reference() {
        // tiny entries sit below what a single 1e-5 difference can resolve;
        // the extrapolated reference resolves them
        for seed in 0..6u64 {
            let f = Seq2seqFixture::new(seed, seed % 2 == 1, InitMode::StateInit, RegularizerConfig::none()).unwrap();
            let g = f.analytic().unwrap();
            let reference = extrapolated_gradient_terms(&f.model, 1e-3, |m| f.terms(m));
            for (t, r) in g.tensors().iter().zip(&reference) {
                for (a, b) in t.data.iter().zip(r) {
                    assert!((a - b).abs() <= 1e-9 + 1e-6 * b.abs(), "{} {a} {b}", t.name);
                }
            }
        }
    }

    #[test]
    fn uniform_softmax_gives_ln_v() {
        let mut model = CaptionModel::init(
            tiny_config(false, InitMode::StateInit),
            &mut RngStream::new(1),
        )
        .unwrap();
        model.decoder.w_out.fill(0.0);
        let ex = example();
        let t = decode_teacher_forced(
            &model,
            &ex.source,
            &ex.caption,
            &PassOptions::default(),
            &mut RngStream::new(0),
        )
        .unwrap();
        for p in &t.probs {
            assert!(p.iter().all(|&v| v == 0.2));
        }
        assert!((t.nll - 3.0 * 5f64.ln()).abs() < 1e-14);
        // two live classes: the other logits pushed to -inf
        model.decoder.b_out.fill(f64::NEG_INFINITY);
        model.decoder.b_out[3] = 0.0;
        model.decoder.b_out[EOS as usize] = 0.0;
        let gold = Caption::new(vec![BOS, 3, EOS], 5).unwrap();
        let t = decode_teacher_forced(
            &model,
            &ex.source,
            &gold,
            &PassOptions::default(),
            &mut RngStream::new(0),
        )
        .unwrap();
        assert_eq!(t.nll / 2.0, std::f64::consts::LN_2);
    }

    #[test]
    fn engineered_logits_drive_nll_to_zero() {
        let mut model = CaptionModel::init(
            tiny_config(false, InitMode::StateInit),
            &mut RngStream::new(2),
        )
        .unwrap();
        model.decoder.w_out.fill(0.0);
        model.decoder.b_out.fill(-200.0);
        model.decoder.b_out[EOS as usize] = 200.0;
        let gold = Caption::new(vec![BOS, EOS], 5).unwrap();
        let t = decode_teacher_forced(
            &model,
            &Source::Tokens(vec![1]),
            &gold,
            &PassOptions::default(),
            &mut RngStream::new(0),
        )
        .unwrap();
        assert!(t.nll < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_token() {
        let model = CaptionModel::init(
            tiny_config(false, InitMode::StateInit),
            &mut RngStream::new(2),
        )
        .unwrap();
        let gold = Caption::new(vec![BOS, 7, EOS], 5).unwrap();
        assert!(decode_teacher_forced(
            &model,
            &Source::Tokens(vec![1]),
            &gold,
            &PassOptions::default(),
            &mut RngStream::new(0)
        )
        .is_err());
        let ok = Caption::new(vec![BOS, EOS], 5).unwrap();
        assert!(decode_teacher_forced(
            &model,
            &Source::Tokens(vec![9]),
            &ok,
            &PassOptions::default(),
            &mut RngStream::new(0)
        )
        .is_err());
        assert!(decode_teacher_forced(
            &model,
            &Source::Tokens(vec![]),
            &ok,
            &PassOptions::default(),
            &mut RngStream::new(0)
        )
        .is_err());
    }

    #[test]
    fn distributions_normalized() {
        let model = CaptionModel::init(
            tiny_config(true, InitMode::StateInit),
            &mut RngStream::new(3),
        )
        .unwrap();
        let ex = example();
        let t = decode_teacher_forced(
            &model,
            &ex.source,
            &ex.caption,
            &PassOptions::default(),
            &mut RngStream::new(0),
        )
        .unwrap();
        for p in &t.probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        for w in t.attention_weights() {
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        assert!(t.nll >= 0.0);
    }

    #[test]
    fn hiddens_unchanged_by_attached_arnet() {
        let mut rng = RngStream::new(4);
        let model = CaptionModel::init(tiny_config(true, InitMode::StateInit), &mut rng).unwrap();
        let mut with = model.clone();
        with.attach_arnet(&mut rng).unwrap();
        let ex = example();
        let a = decode_teacher_forced(
            &model,
            &ex.source,
            &ex.caption,
            &PassOptions::default(),
            &mut RngStream::new(0),
        )
        .unwrap();
        let b = decode_teacher_forced(
            &with,
            &ex.source,
            &ex.caption,
            &PassOptions::default(),
            &mut RngStream::new(0),
        )
        .unwrap();
        assert_eq!(a.hiddens, b.hiddens);
    }

    #[test]
    fn encoder_single_token_and_zero_params() {
        let mut rng = RngStream::new(5);
        let lstm = LstmParams::init(3, 4, 0.5, 1.0, &mut rng).unwrap();
        let embed = init_uniform(6, 3, 0.5, &mut rng).unwrap();
        let src = encode_tokens(&lstm, &embed, &[2]).unwrap();
        assert_eq!(src.s, vec![src.g.clone()]);
        assert_eq!(src, encode_tokens(&lstm, &embed, &[2]).unwrap());
        let zero = encode_tokens(&lstm.zeros_like(), &embed, &[2, 3]).unwrap();
        assert!(zero.g.iter().all(|&v| v == 0.0));
        assert!(encode_tokens(&lstm, &embed, &[]).is_err());
    }

    #[test]
    fn scheduled_sampling_frequencies() {
        let mut rng = RngStream::new(6);
        assert!((0..1000).all(|_| scheduled_sampling_step(1.0, 1, 2, &mut rng) == 1));
        assert!((0..1000).all(|_| scheduled_sampling_step(0.0, 1, 2, &mut rng) == 2));
        let n = 100_000;
        let gold = (0..n)
            .filter(|_| scheduled_sampling_step(0.75, 1, 2, &mut rng) == 1)
            .count();
        assert!((gold as f64 / n as f64 - 0.75).abs() <= 0.01);
    }

    #[test]
    fn joint_loss_arithmetic() {
        assert_eq!(joint_loss(2.5, 7.0, 0.0), 2.5);
        assert!((joint_loss(2.0, 3.0, 0.01) - 2.03).abs() < 1e-15);
    }

    #[test]
    fn feature_source_model() {
        let cfg = ModelConfig {
            source: SourceKind::Features { dim: 4 },
            ..tiny_config(true, InitMode::StateInit)
        };
        let model = CaptionModel::init(cfg, &mut RngStream::new(7)).unwrap();
        let src = EncodedSource::new(
            vec![0.1, 0.2, 0.3, 0.4].into(),
            vec![vec![1.0, 0.0, 0.0, 0.0].into(); 3],
        )
        .unwrap();
        let ex = Example {
            source: Source::Features(src),
            caption: Caption::new(vec![BOS, 3, EOS], 5).unwrap(),
        };
        let mut grads = model.zeros_like();
        let opts = StepOptions {
            pass: PassOptions::default(),
            lambda: 0.0,
            arnet: ArnetMode::Off,
            check_attention: true,
        };
        batch_gradients(&model, &[&ex], &opts, &mut RngStream::new(0), &mut grads).unwrap();
        assert!(grads.encoder.is_none());
        assert!(decode_teacher_forced(
            &model,
            &Source::Tokens(vec![1]),
            &ex.caption,
            &opts.pass,
            &mut RngStream::new(0)
        )
        .is_err());
    }
}
