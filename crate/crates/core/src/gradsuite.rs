//! Randomized finite-difference trials per module, as run by `arnet gradcheck`.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::arnet::ArnetParams;
use crate::attention::{
    attention_backward, attentive_lstm_step, AttentionParams, AttentiveLstmParams,
};
use crate::error::{Error, Result};
use crate::gradcheck::{
    compare, compare_vectors, numeric_gradient_terms, numeric_input_gradient, TensorReport,
};
use crate::lstm::{LstmParams, LstmState, RegularizerConfig};
use crate::params::ParamSet;
use crate::pmnist::{example_gradients, Classifier};
use crate::seq2seq::corpus::{Caption, Example, Source};
use crate::seq2seq::model::{
    batch_gradients, decode_teacher_forced, ArnetMode, CaptionModel, DecoderCell, InitMode,
    ModelConfig, PassOptions, SourceKind, StepOptions,
};
use crate::seq2seq::vocab::{BOS, EOS};
use crate::tensor::{dot, RngStream, Vector};

pub const FD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Lstm,
    Attention,
    Arnet,
    Seq2seq,
    Pmnist,
}

impl Scope {
    pub const ALL: [Scope; 5] = [
        Scope::Lstm,
        Scope::Attention,
        Scope::Arnet,
        Scope::Seq2seq,
        Scope::Pmnist,
    ];
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Lstm => "lstm",
            Scope::Attention => "attention",
            Scope::Arnet => "arnet",
            Scope::Seq2seq => "seq2seq",
            Scope::Pmnist => "pmnist",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scope::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown gradcheck scope {s:?}")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScopeReport {
    pub scope: Scope,
    pub trials: usize,
    pub tolerance: f64,
    /// Worst entry per tensor over all trials.
    pub tensors: Vec<TensorReport>,
    pub failed_trials: usize,
    pub seconds: f64,
}

impl ScopeReport {
    pub fn passed(&self) -> bool {
        self.failed_trials == 0
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }
}

fn merge_worst(into: &mut Vec<TensorReport>, trial: Vec<TensorReport>) {
    for r in trial {
        match into.iter_mut().find(|t| t.name == r.name) {
            Some(t) => {
                t.entries = t.entries.max(r.entries);
                if r.max_rel_error > t.max_rel_error || r.max_rel_error.is_nan() {
                    t.max_rel_error = r.max_rel_error;
                    t.worst_analytic = r.worst_analytic;
                    t.worst_numeric = r.worst_numeric;
                }
            }
            None => into.push(r),
        }
    }
}

/// Run `trials` randomized checks for `scope`, trial `i` seeded by `seed + i`.
pub fn run_scope(scope: Scope, trials: usize, tolerance: f64, seed: u64) -> Result<ScopeReport> {
    if trials == 0 {
        return Err(Error::invalid("trials must be >= 1"));
    }
    if !(tolerance > 0.0) {
        return Err(Error::invalid("tolerance must be positive"));
    }
    let start = Instant::now();
    let mut tensors = Vec::new();
    let mut failed = 0;
    for i in 0..trials {
        let s = seed.wrapping_add(i as u64);
        let reports = match scope {
            Scope::Lstm => lstm_trial(s)?,
            Scope::Attention => attention_trial(s)?,
            Scope::Arnet => arnet_trial(s)?,
            Scope::Seq2seq => seq2seq_trial(s, i)?,
            Scope::Pmnist => pmnist_trial(s)?,
        };
        if reports.iter().any(|r| !(r.max_rel_error <= tolerance)) {
            failed += 1;
        }
        merge_worst(&mut tensors, reports);
    }
    Ok(ScopeReport {
        scope,
        trials,
        tolerance,
        tensors,
        failed_trials: failed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn rv(n: usize, rng: &mut RngStream) -> Vector {
    (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
}

fn prefix(name: &str, mut reps: Vec<TensorReport>) -> Vec<TensorReport> {
    for r in &mut reps {
        r.name = format!("{name}.{}", r.name);
    }
    reps
}

/// Three steps of an H = 3, D = 2 cell under a random linear read-out of
/// every hidden state and the final cell.
pub fn lstm_trial(seed: u64) -> Result<Vec<TensorReport>> {
    let (d, h, t_len) = (2, 3, 3);
    let mut rng = RngStream::new(seed);
    let p = LstmParams::init(d, h, 1.0, 0.5, &mut rng)?;
    let xs: Vec<Vector> = (0..t_len).map(|_| rv(d, &mut rng)).collect();
    let init = LstmState {
        h: rv(h, &mut rng),
        c: rv(h, &mut rng),
    };
    let rh: Vec<Vector> = (0..t_len).map(|_| rv(h, &mut rng)).collect();
    let rc = rv(h, &mut rng);
    let none = RegularizerConfig::none();
    let terms = |p: &LstmParams, xs: &[Vector], init: &LstmState| -> Vec<f64> {
        let run = p
            .run_sequence(xs, init, &none, &mut RngStream::new(0), false)
            .unwrap();
        let mut out: Vec<f64> = run
            .states
            .iter()
            .zip(&rh)
            .map(|(s, r)| dot(&s.h, r))
            .collect();
        out.push(dot(&run.states[t_len - 1].c, &rc));
        out
    };
    let total =
        |p: &LstmParams, xs: &[Vector], init: &LstmState| terms(p, xs, init).iter().sum::<f64>();

    let run = p.run_sequence(&xs, &init, &none, &mut RngStream::new(0), false)?;
    let mut grads = p.zeros_like();
    let (dxs, dinit) = p.backward_sequence(
        &run.caches,
        &rh[..t_len - 1],
        &rh[t_len - 1],
        &rc,
        &mut grads,
    );
    let mut reps = compare(
        &grads,
        &numeric_gradient_terms(&p, FD_EPS, |q| terms(q, &xs, &init)),
    );
    let flat: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
    let nx = numeric_input_gradient(&flat, FD_EPS, |f| {
        let xs2: Vec<Vector> = f.chunks(d).map(Vector::from).collect();
        total(&p, &xs2, &init)
    });
    let ax: Vec<f64> = dxs.iter().flat_map(|x| x.iter().copied()).collect();
    reps.push(compare_vectors("x", &ax, &nx));
    let nh = numeric_input_gradient(&init.h, FD_EPS, |v| {
        total(
            &p,
            &xs,
            &LstmState {
                h: v.into(),
                c: init.c.clone(),
            },
        )
    });
    reps.push(compare_vectors("h0", &dinit.h, &nh));
    let nc = numeric_input_gradient(&init.c, FD_EPS, |v| {
        total(
            &p,
            &xs,
            &LstmState {
                h: init.h.clone(),
                c: v.into(),
            },
        )
    });
    reps.push(compare_vectors("c0", &dinit.c, &nc));
    Ok(reps)
}

/// One attentive step with H = 3 over two source vectors of width 2 and
/// attention width 2.
pub fn attention_trial(seed: u64) -> Result<Vec<TensorReport>> {
    let mut rng = RngStream::new(seed);
    let p = AttentiveLstmParams::init(2, 3, 2, 1.0, 0.5, &mut rng)?;
    let attn = AttentionParams::init(2, 3, 2, 2.0, &mut rng)?;
    let s = vec![rv(2, &mut rng), rv(2, &mut rng)];
    let x = rv(2, &mut rng);
    let st = LstmState {
        h: rv(3, &mut rng),
        c: rv(3, &mut rng),
    };
    let rh = rv(3, &mut rng);
    let rc = rv(3, &mut rng);
    let terms =
        |p: &AttentiveLstmParams, a: &AttentionParams, s: &[Vector], h: &[f64]| -> Vec<f64> {
            let st2 = LstmState {
                h: h.into(),
                c: st.c.clone(),
            };
            let (o, _, _) = attentive_lstm_step(p, a, &x, s, &st2).unwrap();
            vec![dot(&o.h, &rh), dot(&o.c, &rc)]
        };
    let total = |p: &AttentiveLstmParams, a: &AttentionParams, s: &[Vector], h: &[f64]| {
        terms(p, a, s, h).iter().sum::<f64>()
    };
    let (_, cache, mem) = attentive_lstm_step(&p, &attn, &x, &s, &st)?;
    let g = attention_backward(&p, &attn, &mem, &cache, &rh, &rc)?;
    let mut reps = prefix(
        "cell",
        compare(
            &g.cell,
            &numeric_gradient_terms(&p, FD_EPS, |q| terms(q, &attn, &s, &st.h)),
        ),
    );
    reps.extend(prefix(
        "attn",
        compare(
            &g.attn,
            &numeric_gradient_terms(&attn, FD_EPS, |a| terms(&p, a, &s, &st.h)),
        ),
    ));
    let nh = numeric_input_gradient(&st.h, FD_EPS, |h| total(&p, &attn, &s, h));
    reps.push(compare_vectors("h_prev", &g.dh_prev, &nh));
    let flat: Vec<f64> = s.iter().flat_map(|v| v.iter().copied()).collect();
    let ns = numeric_input_gradient(&flat, FD_EPS, |f| {
        let s2: Vec<Vector> = f.chunks(2).map(Vector::from).collect();
        total(&p, &attn, &s2, &st.h)
    });
    let a: Vec<f64> = g.ds.iter().flat_map(|v| v.iter().copied()).collect();
    reps.push(compare_vectors("s", &a, &ns));
    Ok(reps)
}

/// Reconstructor with H_dec = H_ar = 3 over four decoder states.
pub fn arnet_trial(seed: u64) -> Result<Vec<TensorReport>> {
    let mut rng = RngStream::new(seed);
    let p = ArnetParams::init(3, 3, 1.0, 0.5, &mut rng)?;
    let hs: Vec<Vector> = (0..4).map(|_| rv(3, &mut rng)).collect();
    let pass = p.sequence_pass(&hs)?;
    let mut reps = compare(
        &pass.grads,
        &numeric_gradient_terms(&p, FD_EPS, |q| q.component_losses(&hs).unwrap()),
    );
    let flat: Vec<f64> = hs.iter().flat_map(|v| v.iter().copied()).collect();
    let nh = numeric_input_gradient(&flat, FD_EPS, |f| {
        let hs2: Vec<Vector> = f.chunks(3).map(Vector::from).collect();
        p.sequence_loss(&hs2).unwrap()
    });
    let a: Vec<f64> = pass
        .dhiddens
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect();
    reps.push(compare_vectors("hiddens", &a, &nh));
    Ok(reps)
}

pub fn seq2seq_config(attention: bool, init_mode: InitMode) -> ModelConfig {
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
        init_bound: 1.25,
        forget_bias: 0.5,
    }
}

/// Full captioner (V = 5, H = 4, N = 4) with the reconstructor attached and
/// `λ = 1`; trial `index` picks the decoder variant and regularizer.
pub fn seq2seq_trial(seed: u64, index: usize) -> Result<Vec<TensorReport>> {
    let attention = index % 2 == 1;
    let mode = if index / 2 % 2 == 0 {
        InitMode::StateInit
    } else {
        InitMode::FirstInput
    };
    let reg = match index % 6 {
        4 => RegularizerConfig::zoneout(0.3, 0.2),
        5 => RegularizerConfig::recurrent_dropout(0.3),
        _ => RegularizerConfig::none(),
    };
    seq2seq_check(seed, attention, mode, reg)
}

pub fn seq2seq_check(
    seed: u64,
    attention: bool,
    mode: InitMode,
    reg: RegularizerConfig,
) -> Result<Vec<TensorReport>> {
    let f = Seq2seqFixture::new(seed, attention, mode, reg)?;
    Ok(compare(
        &f.analytic()?,
        &numeric_gradient_terms(&f.model, FD_EPS, |m| f.terms(m)),
    ))
}

/// A captioner with one training example and fixed regularizer masks.
pub struct Seq2seqFixture {
    pub model: CaptionModel,
    pub example: Example,
    pub opts: StepOptions,
    mask_seed: u64,
}

impl Seq2seqFixture {
    pub fn new(seed: u64, attention: bool, mode: InitMode, reg: RegularizerConfig) -> Result<Self> {
        let mut rng = RngStream::new(seed);
        let mut model = CaptionModel::init(seq2seq_config(attention, mode), &mut rng)?;
        model.attach_arnet(&mut rng)?;
        // spread the attention keys so the softmax is far from uniform
        if let DecoderCell::Attentive { attn, .. } = &mut model.decoder.cell {
            attn.w_s.scale(3.0);
        }
        let ex = Example {
            source: Source::Tokens((0..3).map(|_| rng.below(6) as u32).collect()),
            caption: Caption::new(
                vec![BOS, 3 + rng.below(2) as u32, 3 + rng.below(2) as u32, EOS],
                10,
            )?,
        };
        let opts = StepOptions {
            pass: PassOptions {
                reg,
                training: true,
                p_gold: 1.0,
            },
            lambda: 1.0,
            arnet: ArnetMode::Joint,
            check_attention: true,
        };
        Ok(Seq2seqFixture {
            mask_seed: rng.below(1 << 30) as u64,
            model,
            example: ex,
            opts,
        })
    }

    /// Per-term joint loss of `m` on the fixture example.
    pub fn terms(&self, m: &CaptionModel) -> Vec<f64> {
        let ex = &self.example;
        let t = decode_teacher_forced(
            m,
            &ex.source,
            &ex.caption,
            &self.opts.pass,
            &mut RngStream::new(self.mask_seed),
        )
        .unwrap();
        let mut out: Vec<f64> = t
            .probs
            .iter()
            .zip(&t.targets)
            .map(|(p, &y)| -p[y as usize].ln())
            .collect();
        if let Some(a) = &m.arnet {
            out.extend(
                a.component_losses(&t.hiddens)
                    .unwrap()
                    .iter()
                    .map(|v| self.opts.lambda * v),
            );
        }
        out
    }

    pub fn analytic(&self) -> Result<CaptionModel> {
        let mut grads = self.model.zeros_like();
        batch_gradients(
            &self.model,
            &[&self.example],
            &self.opts,
            &mut RngStream::new(self.mask_seed),
            &mut grads,
        )?;
        Ok(grads)
    }
}

/// Width-4 classifier over a 28-pixel sequence with the reconstructor over
/// every encoder state.
pub fn pmnist_trial(seed: u64) -> Result<Vec<TensorReport>> {
    pmnist_check(seed, 28)
}

pub fn pmnist_check(seed: u64, len: usize) -> Result<Vec<TensorReport>> {
    let mut rng = RngStream::new(seed);
    let mut m = Classifier::init(4, 3, 1.0, 0.5, &mut rng)?;
    m.arnet = Some(ArnetParams::init(4, 3, 1.0, 0.5, &mut rng)?);
    let seq: Vec<f64> = (0..len).map(|_| rng.uniform()).collect();
    let label = rng.below(3) as u8;
    let none = RegularizerConfig::none();
    let terms = |q: &Classifier| -> Vec<f64> {
        let pass = q
            .forward(&seq, &none, &mut RngStream::new(0), true)
            .unwrap();
        let mut out = vec![-pass.probs[label as usize].ln()];
        out.extend(
            q.arnet
                .as_ref()
                .unwrap()
                .component_losses(&pass.hiddens())
                .unwrap(),
        );
        out
    };
    let mut grads = m.zeros_like();
    example_gradients(
        &m,
        &seq,
        label,
        &none,
        ArnetMode::Joint,
        1.0,
        1.0,
        &mut RngStream::new(0),
        &mut grads,
    )?;
    Ok(compare(&grads, &numeric_gradient_terms(&m, FD_EPS, terms)))
}

/// Sanity check that the comparison itself notices a wrong gradient: the
/// analytic ARNet gradient with one entry perturbed by `delta`.
pub fn corrupted_arnet_trial(seed: u64, delta: f64) -> Result<Vec<TensorReport>> {
    let mut rng = RngStream::new(seed);
    let p = ArnetParams::init(3, 3, 1.0, 0.5, &mut rng)?;
    let hs: Vec<Vector> = (0..4).map(|_| rv(3, &mut rng)).collect();
    let mut pass = p.sequence_pass(&hs)?;
    pass.grads.tensors_mut()[0].1[0] += delta;
    Ok(compare(
        &pass.grads,
        &numeric_gradient_terms(&p, FD_EPS, |q| q.component_losses(&hs).unwrap()),
    ))
}
