//! Additive soft attention over local source vectors and the attentive LSTM
//! step whose gates read `(x; h_prev; z)`.

use crate::error::{Error, Result};
use crate::lstm::{
    cell_forward, regularized_step, regularized_step_backward, LstmState, RegularizedCache,
    RegularizerConfig,
};
use crate::params::{ParamSet, TensorView};
use crate::tensor::{
    axpy, dot, init_uniform, init_uniform_vector, softmax_in_place, Matrix, RngStream, Vector,
};

/// Score `α(s_i, h) = v · tanh(W_s s_i + W_h h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `A × dim(s)`.
    pub w_s: Matrix,
    /// `A × H`.
    pub w_h: Matrix,
    /// `A`.
    pub v: Vector,
}

impl AttentionParams {
    pub fn zeros(source_dim: usize, hidden_dim: usize, attn_dim: usize) -> Self {
        AttentionParams {
            w_s: Matrix::zeros(attn_dim, source_dim),
            w_h: Matrix::zeros(attn_dim, hidden_dim),
            v: Vector::zeros(attn_dim),
        }
    }

    pub fn init(
        source_dim: usize,
        hidden_dim: usize,
        attn_dim: usize,
        bound: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if attn_dim == 0 {
            return Err(Error::invalid("attention dimension must be at least 1"));
        }
        Ok(AttentionParams {
            w_s: init_uniform(attn_dim, source_dim, bound, rng)?,
            w_h: init_uniform(attn_dim, hidden_dim, bound, rng)?,
            v: init_uniform_vector(attn_dim, bound, rng)?,
        })
    }

    pub fn attn_dim(&self) -> usize {
        self.v.len()
    }

    pub fn source_dim(&self) -> usize {
        self.w_s.cols()
    }

    pub fn zeros_like(&self) -> Self {
        AttentionParams::zeros(self.w_s.cols(), self.w_h.cols(), self.v.len())
    }

    /// Precompute `W_s s_i` for a source; it does not depend on the step.
    pub fn prepare(&self, s: &[Vector]) -> Result<AttentionMemory> {
        if s.is_empty() {
            return Err(Error::invalid("attention needs at least one local vector"));
        }
        let mut keys = Vec::with_capacity(s.len());
        for si in s {
            if si.len() != self.w_s.cols() {
                return Err(Error::shape(
                    "attend",
                    format!("W_s cols {}", self.w_s.cols()),
                    format!("s_i len {}", si.len()),
                ));
            }
            let mut k = Vector::zeros(self.attn_dim());
            self.w_s.matvec_into(si, &mut k);
            keys.push(k);
        }
        Ok(AttentionMemory {
            s: s.to_vec(),
            keys,
        })
    }

    /// Context vector and weights for one step.
    pub fn attend_prepared(
        &self,
        memory: &AttentionMemory,
        h_prev: &[f64],
    ) -> Result<(Vector, AttendCache)> {
        if h_prev.len() != self.w_h.cols() {
            return Err(Error::shape(
                "attend",
                format!("W_h cols {}", self.w_h.cols()),
                format!("h len {}", h_prev.len()),
            ));
        }
        let a = self.attn_dim();
        let mut query = Vector::zeros(a);
        self.w_h.matvec_into(h_prev, &mut query);
        let n = memory.s.len();
        let mut hidden = Vec::with_capacity(n);
        let mut weights = Vector::zeros(n);
        for (i, k) in memory.keys.iter().enumerate() {
            let t: Vector = k
                .iter()
                .zip(query.iter())
                .map(|(x, y)| (x + y).tanh())
                .collect();
            weights[i] = dot(&self.v, &t);
            hidden.push(t);
        }
        softmax_in_place(&mut weights);
        let mut z = Vector::zeros(memory.s[0].len());
        for (w, si) in weights.iter().zip(&memory.s) {
            axpy(*w, si, &mut z);
        }
        Ok((
            z,
            AttendCache {
                weights,
                hidden,
                h_prev: h_prev.into(),
            },
        ))
    }

    /// Backward of [`AttentionParams::attend_prepared`]. Accumulates into
    /// `grads.w_h`, `grads.v`, `dkeys` and `ds`; returns `dh_prev`.
    pub fn attend_backward(
        &self,
        memory: &AttentionMemory,
        cache: &AttendCache,
        dz: &[f64],
        grads: &mut AttentionParams,
        dkeys: &mut [Vector],
        ds: &mut [Vector],
    ) -> Vector {
        let n = memory.s.len();
        let dweights: Vec<f64> = memory.s.iter().map(|si| dot(dz, si)).collect();
        let mean: f64 = cache
            .weights
            .iter()
            .zip(&dweights)
            .map(|(w, d)| w * d)
            .sum();
        let mut dquery = Vector::zeros(self.attn_dim());
        for i in 0..n {
            let w = cache.weights[i];
            axpy(w, dz, &mut ds[i]);
            let dscore = w * (dweights[i] - mean);
            if dscore == 0.0 {
                continue;
            }
            let t = &cache.hidden[i];
            axpy(dscore, t, &mut grads.v);
            for k in 0..t.len() {
                let dpre = dscore * self.v[k] * (1.0 - t[k] * t[k]);
                dkeys[i][k] += dpre;
                dquery[k] += dpre;
            }
        }
        grads.w_h.add_outer(&dquery, &cache.h_prev);
        let mut dh = Vector::zeros(cache.h_prev.len());
        self.w_h.matvec_t_acc(&dquery, &mut dh);
        dh
    }

    /// Push key gradients back through `W_s`.
    pub fn memory_backward(
        &self,
        memory: &AttentionMemory,
        dkeys: &[Vector],
        grads: &mut AttentionParams,
        ds: &mut [Vector],
    ) {
        for ((si, dk), dsi) in memory.s.iter().zip(dkeys).zip(ds.iter_mut()) {
            grads.w_s.add_outer(dk, si);
            self.w_s.matvec_t_acc(dk, dsi);
        }
    }
}

impl ParamSet for AttentionParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            TensorView {
                name: "w_s".into(),
                shape: vec![self.w_s.rows(), self.w_s.cols()],
                data: self.w_s.as_slice(),
            },
            TensorView {
                name: "w_h".into(),
                shape: vec![self.w_h.rows(), self.w_h.cols()],
                data: self.w_h.as_slice(),
            },
            TensorView {
                name: "v".into(),
                shape: vec![self.v.len()],
                data: &self.v,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("w_s".into(), self.w_s.as_mut_slice()),
            ("w_h".into(), self.w_h.as_mut_slice()),
            ("v".into(), &mut self.v),
        ]
    }
}

/// Encoder output: a global summary `g` and local vectors `s_1..s_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSource {
    pub g: Vector,
    pub s: Vec<Vector>,
}

impl EncodedSource {
    pub fn new(g: Vector, s: Vec<Vector>) -> Result<Self> {
        if s.is_empty() {
            return Err(Error::invalid(
                "encoded source needs at least one local vector",
            ));
        }
        let dim = s[0].len();
        if let Some(bad) = s.iter().find(|v| v.len() != dim) {
            return Err(Error::shape("EncodedSource", dim, bad.len()));
        }
        Ok(EncodedSource { g, s })
    }

    pub fn local_dim(&self) -> usize {
        self.s[0].len()
    }
}

/// Local vectors with their step-independent projections.
#[derive(Debug, Clone)]
pub struct AttentionMemory {
    pub s: Vec<Vector>,
    pub keys: Vec<Vector>,
}

#[derive(Debug, Clone)]
pub struct AttendCache {
    pub weights: Vector,
    /// `tanh(W_s s_i + W_h h_prev)` per local vector.
    pub hidden: Vec<Vector>,
    pub h_prev: Vector,
}

/// `attend(params, s, h_prev) -> (z, weights)`.
pub fn attend(params: &AttentionParams, s: &[Vector], h_prev: &[f64]) -> Result<(Vector, Vector)> {
    let mem = params.prepare(s)?;
    let (z, cache) = params.attend_prepared(&mem, h_prev)?;
    Ok((z, cache.weights))
}

/// Gate weights over `(x; h_prev; z)`, same `[i; f; o; g]` row layout as the
/// plain cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentiveLstmParams {
    /// `4H × (D + H + Z)`.
    pub weights: Matrix,
    pub bias: Vector,
    input_dim: usize,
    hidden_dim: usize,
    context_dim: usize,
}

impl AttentiveLstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize, context_dim: usize) -> Self {
        AttentiveLstmParams {
            weights: Matrix::zeros(4 * hidden_dim, input_dim + hidden_dim + context_dim),
            bias: Vector::zeros(4 * hidden_dim),
            input_dim,
            hidden_dim,
            context_dim,
        }
    }

    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        context_dim: usize,
        bound: f64,
        forget_bias: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let weights = init_uniform(
            4 * hidden_dim,
            input_dim + hidden_dim + context_dim,
            bound,
            rng,
        )?;
        let mut bias = Vector::zeros(4 * hidden_dim);
        bias[hidden_dim..2 * hidden_dim]
            .iter_mut()
            .for_each(|b| *b = forget_bias);
        Ok(AttentiveLstmParams {
            weights,
            bias,
            input_dim,
            hidden_dim,
            context_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn zeros_like(&self) -> Self {
        AttentiveLstmParams::zeros(self.input_dim, self.hidden_dim, self.context_dim)
    }

    /// One regularized attentive step over prepared memory.
    #[allow(clippy::too_many_arguments)]
    pub fn step_prepared(
        &self,
        attn: &AttentionParams,
        memory: &AttentionMemory,
        x: &[f64],
        state: &LstmState,
        reg: &RegularizerConfig,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<(LstmState, AttentiveCache)> {
        if x.len() != self.input_dim || state.h.len() != self.hidden_dim {
            return Err(Error::shape(
                "attentive_lstm_step",
                format!("D={} H={}", self.input_dim, self.hidden_dim),
                format!("x {} h {}", x.len(), state.h.len()),
            ));
        }
        if attn.source_dim() != self.context_dim {
            return Err(Error::shape(
                "attentive_lstm_step",
                self.context_dim,
                attn.source_dim(),
            ));
        }
        let (z, attend) = attn.attend_prepared(memory, &state.h)?;
        let input = Vector::concat(&[x, &state.h, &z]);
        let (next, cell) = regularized_step(
            &self.weights,
            &self.bias,
            self.input_dim,
            input,
            state,
            reg,
            rng,
            training,
        );
        Ok((next, AttentiveCache { attend, cell }))
    }

    /// Backward of one attentive step. Accumulates parameter gradients into
    /// `grads`/`attn_grads`, key and source gradients into `dkeys`/`ds`, and
    /// returns `(dx, dh_prev, dc_prev)`. `dgates` is written with the
    /// pre-activation gate gradients; the caller owns the weight-gradient
    /// accumulation for the cell (`dgates ⊗ cache.cell.cell.input`).
    #[allow(clippy::too_many_arguments)]
    pub fn step_backward_prepared(
        &self,
        attn: &AttentionParams,
        memory: &AttentionMemory,
        cache: &AttentiveCache,
        dh: &[f64],
        dc: &[f64],
        dgates: &mut [f64],
        attn_grads: &mut AttentionParams,
        dkeys: &mut [Vector],
        ds: &mut [Vector],
    ) -> (Vector, Vector, Vector) {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let (dinput, extra, dc_prev) =
            regularized_step_backward(&self.weights, &cache.cell, dh, dc, dgates);
        let dz = &dinput[d + h..];
        let dh_attn = attn.attend_backward(memory, &cache.attend, dz, attn_grads, dkeys, ds);
        let mut dh_prev: Vector = dinput[d..d + h].into();
        for (a, b) in dh_prev.iter_mut().zip(dh_attn.iter()) {
            *a += b;
        }
        if let Some(e) = extra {
            for (a, b) in dh_prev.iter_mut().zip(e.iter()) {
                *a += b;
            }
        }
        (dinput[..d].into(), dh_prev, dc_prev)
    }
}

impl ParamSet for AttentiveLstmParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        vec![
            TensorView {
                name: "weights".into(),
                shape: vec![self.weights.rows(), self.weights.cols()],
                data: self.weights.as_slice(),
            },
            TensorView {
                name: "bias".into(),
                shape: vec![self.bias.len()],
                data: &self.bias,
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("weights".into(), self.weights.as_mut_slice()),
            ("bias".into(), &mut self.bias),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AttentiveCache {
    pub attend: AttendCache,
    pub cell: RegularizedCache,
}

/// Gradients of a single attentive step.
#[derive(Debug, Clone)]
pub struct AttentiveStepGrads {
    pub cell: AttentiveLstmParams,
    pub attn: AttentionParams,
    pub dx: Vector,
    pub dh_prev: Vector,
    pub dc_prev: Vector,
    pub ds: Vec<Vector>,
}

/// Unregularized attentive step: attention over `s` from `h_prev`, then the
/// gates over `(x; h_prev; z)`.
pub fn attentive_lstm_step(
    params: &AttentiveLstmParams,
    attn: &AttentionParams,
    x: &[f64],
    s: &[Vector],
    state: &LstmState,
) -> Result<(LstmState, AttentiveCache, AttentionMemory)> {
    let memory = attn.prepare(s)?;
    let mut rng = RngStream::new(0);
    let (next, cache) = params.step_prepared(
        attn,
        &memory,
        x,
        state,
        &RegularizerConfig::none(),
        &mut rng,
        false,
    )?;
    Ok((next, cache, memory))
}

/// Gradients of [`attentive_lstm_step`] for upstream `(dh, dc)`.
pub fn attention_backward(
    params: &AttentiveLstmParams,
    attn: &AttentionParams,
    memory: &AttentionMemory,
    cache: &AttentiveCache,
    dh: &[f64],
    dc: &[f64],
) -> Result<AttentiveStepGrads> {
    if dh.len() != params.hidden_dim || dc.len() != params.hidden_dim {
        return Err(Error::shape(
            "attention_backward",
            params.hidden_dim,
            dh.len(),
        ));
    }
    if cache.cell.cell.input.len() != params.weights.cols() {
        return Err(Error::shape(
            "attention_backward",
            params.weights.cols(),
            cache.cell.cell.input.len(),
        ));
    }
    let mut cell = params.zeros_like();
    let mut attn_grads = attn.zeros_like();
    let n = memory.s.len();
    let mut dkeys = vec![Vector::zeros(attn.attn_dim()); n];
    let mut ds = vec![Vector::zeros(attn.source_dim()); n];
    let mut dgates = vec![0.0; 4 * params.hidden_dim];
    let (dx, dh_prev, dc_prev) = params.step_backward_prepared(
        attn,
        memory,
        cache,
        dh,
        dc,
        &mut dgates,
        &mut attn_grads,
        &mut dkeys,
        &mut ds,
    );
    cell.weights.add_outer(&dgates, &cache.cell.cell.input);
    cell.bias.copy_from_slice(&dgates);
    attn.memory_backward(memory, &dkeys, &mut attn_grads, &mut ds);
    Ok(AttentiveStepGrads {
        cell,
        attn: attn_grads,
        dx,
        dh_prev,
        dc_prev,
        ds,
    })
}

/// Plain forward used by tests to confirm the zero-context reduction.
#[doc(hidden)]
pub fn plain_gates_over(
    params: &AttentiveLstmParams,
    x: &[f64],
    state: &LstmState,
    z: &[f64],
) -> LstmState {
    let input = Vector::concat(&[x, &state.h, z]);
    cell_forward(
        &params.weights,
        &params.bias,
        params.input_dim,
        input,
        &state.c,
        None,
    )
    .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, numeric_input_gradient, rel_error};
    use crate::lstm::LstmParams;
    use proptest::prelude::*;

    fn rv(n: usize, rng: &mut RngStream) -> Vector {
        (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
    }

    #[test]
    fn singleton_attention() {
        let mut rng = RngStream::new(1);
        let p = AttentionParams::init(3, 2, 4, 0.5, &mut rng).unwrap();
        let s1 = rv(3, &mut rng);
        let (z, w) = attend(&p, std::slice::from_ref(&s1), &[0.3, -0.1]).unwrap();
        assert_eq!(&*w, &[1.0]);
        assert_eq!(z, s1);
    }

    #[test]
    fn identical_locals() {
        let mut rng = RngStream::new(2);
        let p = AttentionParams::init(3, 2, 4, 0.5, &mut rng).unwrap();
        let s1 = Vector::from(vec![0.25, -0.5, 0.75]);
        let (z, _) = attend(&p, &[s1.clone(), s1.clone(), s1.clone()], &[0.3, -0.1]).unwrap();
        for (a, b) in z.iter().zip(s1.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn crafted_scores_give_hand_softmax() {
        // A = 1, v = 2, W_s = 1, W_h = 0: score_i = 2 tanh(s_i) = ln i.
        let p = AttentionParams {
            w_s: Matrix::from_rows(&[&[1.0]]).unwrap(),
            w_h: Matrix::zeros(1, 2),
            v: vec![2.0].into(),
        };
        let s: Vec<Vector> = (1..=3)
            .map(|i| vec![((i as f64).ln() / 2.0).atanh()].into())
            .collect();
        let (_, w) = attend(&p, &s, &[0.5, 0.5]).unwrap();
        for (got, want) in w.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-12, "{got} {want}");
        }
    }

    #[test]
    fn empty_source_rejected() {
        let p = AttentionParams::zeros(2, 2, 2);
        assert!(attend(&p, &[], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn zero_context_reduces_to_plain_cell() {
        let mut rng = RngStream::new(3);
        let p = AttentiveLstmParams::init(2, 3, 4, 0.5, 1.0, &mut rng).unwrap();
        let attn = AttentionParams::init(4, 3, 2, 0.5, &mut rng).unwrap();
        let state = LstmState {
            h: rv(3, &mut rng),
            c: rv(3, &mut rng),
        };
        let x = rv(2, &mut rng);
        let (out, _, _) = attentive_lstm_step(&p, &attn, &x, &[Vector::zeros(4)], &state).unwrap();
        // Plain cell with the z columns dropped.
        let mut plain = LstmParams::zeros(2, 3);
        for r in 0..12 {
            plain
                .weights
                .row_mut(r)
                .copy_from_slice(&p.weights.row(r)[..5]);
        }
        plain.bias = p.bias.clone();
        let (want, _) = plain.step(&x, &state).unwrap();
        // Dot-product grouping differs between row widths, hence the 1e-14.
        for (a, b) in out
            .h
            .iter()
            .zip(want.h.iter())
            .chain(out.c.iter().zip(want.c.iter()))
        {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(out, plain_gates_over(&p, &x, &state, &[0.0; 4]));
    }

    #[test]
    fn zero_params_zero_hidden() {
        let p = AttentiveLstmParams::zeros(2, 3, 2);
        let attn = AttentionParams::zeros(2, 3, 2);
        let s = vec![Vector::from(vec![1.0, 2.0]), Vector::from(vec![-1.0, 0.5])];
        let (out, _, _) =
            attentive_lstm_step(&p, &attn, &[0.4, 0.1], &s, &LstmState::zeros(3)).unwrap();
        assert_eq!(&*out.h, &[0.0; 3]);
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let mut rng = RngStream::new(4);
        let p = AttentiveLstmParams::init(2, 3, 2, 0.5, 1.0, &mut rng).unwrap();
        let attn = AttentionParams::init(2, 3, 2, 0.5, &mut rng).unwrap();
        let s = vec![rv(2, &mut rng), rv(2, &mut rng)];
        let (_, cache, mem) =
            attentive_lstm_step(&p, &attn, &[0.1, 0.2], &s, &LstmState::zeros(3)).unwrap();
        let g = attention_backward(&p, &attn, &mem, &cache, &[0.0; 3], &[0.0; 3]).unwrap();
        assert!(g
            .cell
            .tensors()
            .iter()
            .chain(g.attn.tensors().iter())
            .all(|t| t.data.iter().all(|v| *v == 0.0)));
        assert!(g.ds.iter().all(|d| d.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn singleton_source_gradient_is_identity_path() {
        // With n = 1, z = s_1, so ds_1 equals the z-slice of the input gradient.
        let mut rng = RngStream::new(5);
        let p = AttentiveLstmParams::init(2, 3, 2, 0.5, 1.0, &mut rng).unwrap();
        let attn = AttentionParams::init(2, 3, 2, 0.5, &mut rng).unwrap();
        let s = vec![rv(2, &mut rng)];
        let st = LstmState {
            h: rv(3, &mut rng),
            c: rv(3, &mut rng),
        };
        let (_, cache, mem) = attentive_lstm_step(&p, &attn, &[0.1, 0.2], &s, &st).unwrap();
        let dh = rv(3, &mut rng);
        let g = attention_backward(&p, &attn, &mem, &cache, &dh, &[0.0; 3]).unwrap();
        let mut dgates = vec![0.0; 12];
        let (dinput, _) =
            crate::lstm::cell_backward(&p.weights, &cache.cell.cell, &dh, &[0.0; 3], &mut dgates);
        for (a, b) in g.ds[0].iter().zip(&dinput[5..]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(g
            .attn
            .tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn attentive_step_matches_finite_differences() {
        let mut rng = RngStream::new(99);
        for trial in 0..20 {
            let mut prng = RngStream::new(1000 + trial);
            let p = AttentiveLstmParams::init(2, 3, 2, 0.8, 0.5, &mut prng).unwrap();
            let attn = AttentionParams::init(2, 3, 2, 1.0, &mut prng).unwrap();
            let s = vec![rv(2, &mut rng), rv(2, &mut rng)];
            let x = rv(2, &mut rng);
            let st = LstmState {
                h: rv(3, &mut rng),
                c: rv(3, &mut rng),
            };
            let rh = rv(3, &mut rng);
            let rc = rv(3, &mut rng);
            let loss = |p: &AttentiveLstmParams, a: &AttentionParams, s: &[Vector], h: &[f64]| {
                let st2 = LstmState {
                    h: h.into(),
                    c: st.c.clone(),
                };
                let (o, _, _) = attentive_lstm_step(p, a, &x, s, &st2).unwrap();
                dot(&o.h, &rh) + dot(&o.c, &rc)
            };
            let (_, cache, mem) = attentive_lstm_step(&p, &attn, &x, &s, &st).unwrap();
            let g = attention_backward(&p, &attn, &mem, &cache, &rh, &rc).unwrap();
            let num_cell = numeric_gradient(&p, 1e-5, |q| loss(q, &attn, &s, &st.h));
            let num_attn = numeric_gradient(&attn, 1e-5, |a| loss(&p, a, &s, &st.h));
            for (view, n) in g
                .cell
                .tensors()
                .iter()
                .zip(&num_cell)
                .chain(g.attn.tensors().iter().zip(&num_attn))
            {
                for (a, b) in view.data.iter().zip(n) {
                    assert!(
                        rel_error(*a, *b) <= 1e-4,
                        "trial {trial} {} {a} {b}",
                        view.name
                    );
                }
            }
            let nh = numeric_input_gradient(&st.h, 1e-5, |h| loss(&p, &attn, &s, h));
            for (a, b) in g.dh_prev.iter().zip(&nh) {
                assert!(rel_error(*a, *b) <= 1e-4, "dh {a} {b}");
            }
            for i in 0..2 {
                let ns = numeric_input_gradient(&s[i], 1e-5, |si| {
                    let mut s2 = s.clone();
                    s2[i] = si.into();
                    loss(&p, &attn, &s2, &st.h)
                });
                for (a, b) in g.ds[i].iter().zip(&ns) {
                    assert!(rel_error(*a, *b) <= 1e-4, "ds {a} {b}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn weights_normalized_and_context_in_hull(seed in 0u64..500, n in 1usize..6, shift in -5.0f64..5.0) {
            let mut rng = RngStream::new(seed);
            let p = AttentionParams::init(3, 2, 3, 2.0, &mut rng).unwrap();
            let s: Vec<Vector> = (0..n).map(|_| rv(3, &mut rng)).collect();
            let h = rv(2, &mut rng);
            let (z, w) = attend(&p, &s, &h).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            for j in 0..3 {
                let lo = s.iter().map(|v| v[j]).fold(f64::INFINITY, f64::min);
                let hi = s.iter().map(|v| v[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(z[j] >= lo - 1e-12 && z[j] <= hi + 1e-12);
            }
            // Adding a constant to every score leaves the weights unchanged.
            let scores: Vec<f64> = w.iter().map(|x| x.ln()).collect();
            let shifted: Vec<f64> = scores.iter().map(|x| x + shift).collect();
            let w2 = crate::tensor::softmax(&shifted);
            for (a, b) in w.iter().zip(w2.iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
