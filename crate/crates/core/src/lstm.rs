//! LSTM transition with its exact backward pass, plus the zoneout and
//! recurrent-dropout variants.
//!
//! Gate rows of the stacked weight matrix are laid out `[i; f; o; g]`, each
//! block `hidden_dim` rows tall. The column layout is `(x; h_prev)`. This
//! layout is part of the checkpoint format and must not change.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamSet, TensorView};
use crate::tensor::{init_uniform, sigmoid, Matrix, RngStream, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    /// `4H × (D + H)`.
    pub weights: Matrix,
    /// `4H`.
    pub bias: Vector,
    input_dim: usize,
    hidden_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: Vector::zeros(hidden),
            c: Vector::zeros(hidden),
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCache {
    /// Concatenated cell input; `(x; h_prev)` or `(x; h_prev; z)`.
    pub input: Vector,
    pub c_prev: Vector,
    /// Post-activation gates `[i; f; o; g]`.
    pub gates: Vector,
    /// Multiplicative mask on `g` (recurrent dropout), if any.
    pub g_mask: Option<Vector>,
    pub c: Vector,
    pub tanh_c: Vector,
    input_dim: usize,
}

impl StepCache {
    pub fn x(&self) -> &[f64] {
        &self.input[..self.input_dim]
    }

    pub fn h_prev(&self) -> &[f64] {
        let h = self.c.len();
        &self.input[self.input_dim..self.input_dim + h]
    }

    fn hidden(&self) -> usize {
        self.c.len()
    }

    pub fn input_gate(&self) -> &[f64] {
        &self.gates[..self.hidden()]
    }

    pub fn forget_gate(&self) -> &[f64] {
        let h = self.hidden();
        &self.gates[h..2 * h]
    }

    pub fn output_gate(&self) -> &[f64] {
        let h = self.hidden();
        &self.gates[2 * h..3 * h]
    }

    pub fn candidate(&self) -> &[f64] {
        let h = self.hidden();
        &self.gates[3 * h..]
    }
}

/// Gradients of one backward step.
#[derive(Debug, Clone)]
pub struct StepGrads {
    pub params: LstmParams,
    pub dx: Vector,
    pub dh_prev: Vector,
    pub dc_prev: Vector,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            weights: Matrix::zeros(4 * hidden_dim, input_dim + hidden_dim),
            bias: Vector::zeros(4 * hidden_dim),
            input_dim,
            hidden_dim,
        }
    }

    /// Uniform weights in `[-bound, bound]`, zero biases except the forget
    /// gate block, which is set to `forget_bias`.
    pub fn init(
        input_dim: usize,
        hidden_dim: usize,
        bound: f64,
        forget_bias: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let weights = init_uniform(4 * hidden_dim, input_dim + hidden_dim, bound, rng)?;
        let mut bias = Vector::zeros(4 * hidden_dim);
        bias[hidden_dim..2 * hidden_dim]
            .iter_mut()
            .for_each(|b| *b = forget_bias);
        Ok(LstmParams {
            weights,
            bias,
            input_dim,
            hidden_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn zeros_like(&self) -> Self {
        LstmParams::zeros(self.input_dim, self.hidden_dim)
    }

    pub fn step(&self, x: &[f64], state: &LstmState) -> Result<(LstmState, StepCache)> {
        self.check_step(x, state)?;
        let input = Vector::concat(&[x, &state.h]);
        Ok(cell_forward(
            &self.weights,
            &self.bias,
            self.input_dim,
            input,
            &state.c,
            None,
        ))
    }

    pub fn step_backward(&self, cache: &StepCache, dh: &[f64], dc: &[f64]) -> Result<StepGrads> {
        let h = self.hidden_dim;
        if cache.input.len() != self.input_dim + h || cache.c.len() != h {
            return Err(Error::shape(
                "lstm_step_backward",
                format!("params D={} H={h}", self.input_dim),
                format!("cache input {} hidden {}", cache.input.len(), cache.c.len()),
            ));
        }
        if dh.len() != h || dc.len() != h {
            return Err(Error::shape(
                "lstm_step_backward",
                h,
                format!("dh {} dc {}", dh.len(), dc.len()),
            ));
        }
        let mut grads = self.zeros_like();
        let mut dgates = vec![0.0; 4 * h];
        let (dinput, dc_prev) = cell_backward(&self.weights, cache, dh, dc, &mut dgates);
        grads.weights.add_outer(&dgates, &cache.input);
        grads.bias.copy_from_slice(&dgates);
        Ok(StepGrads {
            params: grads,
            dx: dinput[..self.input_dim].into(),
            dh_prev: dinput[self.input_dim..].into(),
            dc_prev,
        })
    }

    fn check_step(&self, x: &[f64], state: &LstmState) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::shape(
                "lstm_step",
                format!("input_dim {}", self.input_dim),
                format!("x len {}", x.len()),
            ));
        }
        if state.h.len() != self.hidden_dim || state.c.len() != self.hidden_dim {
            return Err(Error::shape(
                "lstm_step",
                format!("hidden_dim {}", self.hidden_dim),
                format!("state h {} c {}", state.h.len(), state.c.len()),
            ));
        }
        Ok(())
    }
}

impl ParamSet for LstmParams {
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

/// Forward through the gates for an already-concatenated input.
pub(crate) fn cell_forward(
    weights: &Matrix,
    bias: &[f64],
    input_dim: usize,
    input: Vector,
    c_prev: &[f64],
    g_mask: Option<Vector>,
) -> (LstmState, StepCache) {
    let h = c_prev.len();
    let mut gates = Vector::zeros(4 * h);
    weights.matvec_into(&input, &mut gates);
    for (a, b) in gates.iter_mut().zip(bias) {
        *a += b;
    }
    for a in gates[..3 * h].iter_mut() {
        *a = sigmoid(*a);
    }
    for a in gates[3 * h..].iter_mut() {
        *a = a.tanh();
    }
    let mut c = Vector::zeros(h);
    for j in 0..h {
        let g = match &g_mask {
            Some(m) => gates[3 * h + j] * m[j],
            None => gates[3 * h + j],
        };
        c[j] = gates[h + j] * c_prev[j] + gates[j] * g;
    }
    let tanh_c: Vector = c.iter().map(|v| v.tanh()).collect();
    let hv: Vector = (0..h).map(|j| gates[2 * h + j] * tanh_c[j]).collect();
    let state = LstmState {
        h: hv,
        c: c.clone(),
    };
    let cache = StepCache {
        input,
        c_prev: c_prev.into(),
        gates,
        g_mask,
        c,
        tanh_c,
        input_dim,
    };
    (state, cache)
}

/// Backward through the gates. Writes pre-activation gate gradients into
/// `dgates` and returns `(d input, d c_prev)`. Weight gradients are left to
/// the caller: `dW += dgates ⊗ input`, `db += dgates`.
pub(crate) fn cell_backward(
    weights: &Matrix,
    cache: &StepCache,
    dh: &[f64],
    dc: &[f64],
    dgates: &mut [f64],
) -> (Vector, Vector) {
    let h = cache.c.len();
    let g = &cache.gates;
    let mut dc_prev = Vector::zeros(h);
    for j in 0..h {
        let (i, f, o, cand) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
        let tc = cache.tanh_c[j];
        let dct = dc[j] + dh[j] * o * (1.0 - tc * tc);
        let mask = cache.g_mask.as_ref().map_or(1.0, |m| m[j]);
        let d_i = dct * cand * mask;
        let d_f = dct * cache.c_prev[j];
        let d_o = dh[j] * tc;
        let d_g = dct * i * mask;
        dgates[j] = d_i * i * (1.0 - i);
        dgates[h + j] = d_f * f * (1.0 - f);
        dgates[2 * h + j] = d_o * o * (1.0 - o);
        dgates[3 * h + j] = d_g * (1.0 - cand * cand);
        dc_prev[j] = dct * f;
    }
    let mut dinput = Vector::zeros(cache.input.len());
    weights.matvec_t_acc(dgates, &mut dinput);
    (dinput, dc_prev)
}

/// Collects per-step `(dgates, input)` rows over a sequence so the weight
/// gradient can be formed with one matrix product at the end.
#[derive(Debug, Clone, Default)]
pub struct GateGradBuffer {
    dgates: Vec<f64>,
    inputs: Vec<f64>,
    steps: usize,
}

impl GateGradBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, dgates: &[f64], input: &[f64]) {
        self.dgates.extend_from_slice(dgates);
        self.inputs.extend_from_slice(input);
        self.steps += 1;
    }

    /// Adds the buffered contributions to `dweights` / `dbias` and clears.
    pub fn flush(&mut self, dweights: &mut Matrix, dbias: &mut [f64]) {
        if self.steps == 0 {
            return;
        }
        let gate_dim = dweights.rows();
        let in_dim = dweights.cols();
        let dg = Matrix::from_vec(self.steps, gate_dim, std::mem::take(&mut self.dgates))
            .expect("gate buffer rows");
        let inp = Matrix::from_vec(self.steps, in_dim, std::mem::take(&mut self.inputs))
            .expect("input buffer rows");
        dweights.add_at_b(&dg, &inp);
        for s in 0..self.steps {
            for (b, d) in dbias.iter_mut().zip(dg.row(s)) {
                *b += d;
            }
        }
        self.steps = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerMode {
    #[default]
    None,
    Zoneout,
    RecurrentDropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub mode: RegularizerMode,
    pub zoneout_rate_h: f64,
    pub zoneout_rate_c: f64,
    pub dropout_rate: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            mode: RegularizerMode::None,
            zoneout_rate_h: 0.1,
            zoneout_rate_c: 0.1,
            dropout_rate: 0.1,
        }
    }
}

impl RegularizerConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn zoneout(rate_h: f64, rate_c: f64) -> Self {
        RegularizerConfig {
            mode: RegularizerMode::Zoneout,
            zoneout_rate_h: rate_h,
            zoneout_rate_c: rate_c,
            ..Self::default()
        }
    }

    pub fn recurrent_dropout(rate: f64) -> Self {
        RegularizerConfig {
            mode: RegularizerMode::RecurrentDropout,
            dropout_rate: rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("zoneout_rate_h", self.zoneout_rate_h),
            ("zoneout_rate_c", self.zoneout_rate_c),
            ("dropout_rate", self.dropout_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} must be in [0, 1], got {r}")));
            }
        }
        if self.dropout_rate >= 1.0 && self.mode == RegularizerMode::RecurrentDropout {
            return Err(Error::invalid("recurrent dropout rate must be below 1"));
        }
        Ok(())
    }
}

/// Per-unit zoneout keep-previous masks for `h` and `c`. In training each
/// entry is Bernoulli(rate) in {0, 1}; at inference the entry is the rate
/// itself, giving the expected-value blend.
pub fn zoneout_masks(
    cfg: &RegularizerConfig,
    hidden: usize,
    rng: &mut RngStream,
    training: bool,
) -> (Vector, Vector) {
    if training {
        let mh = (0..hidden)
            .map(|_| {
                if rng.bernoulli(cfg.zoneout_rate_h) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mc = (0..hidden)
            .map(|_| {
                if rng.bernoulli(cfg.zoneout_rate_c) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        (mh, mc)
    } else {
        (
            Vector::filled(hidden, cfg.zoneout_rate_h),
            Vector::filled(hidden, cfg.zoneout_rate_c),
        )
    }
}

fn blend(mask: &[f64], prev: &[f64], new: &[f64]) -> Vector {
    mask.iter()
        .zip(prev.iter().zip(new))
        .map(|(&m, (&p, &n))| {
            if m == 0.0 {
                n
            } else if m == 1.0 {
                p
            } else {
                m * p + (1.0 - m) * n
            }
        })
        .collect()
}

pub fn apply_zoneout(
    prev: &LstmState,
    new: &LstmState,
    cfg: &RegularizerConfig,
    rng: &mut RngStream,
    training: bool,
) -> LstmState {
    let (mh, mc) = zoneout_masks(cfg, new.h.len(), rng, training);
    LstmState {
        h: blend(&mh, &prev.h, &new.h),
        c: blend(&mc, &prev.c, &new.c),
    }
}

/// Inverted-dropout mask: zero with probability `rate`, survivors scaled by
/// `1/(1-rate)`. All ones at inference.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut RngStream, training: bool) -> Result<Vector> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!(
            "dropout rate must be in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(Vector::filled(len, 1.0));
    }
    let keep = 1.0 / (1.0 - rate);
    Ok((0..len)
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect())
}

pub fn apply_recurrent_dropout(
    g: &[f64],
    rate: f64,
    rng: &mut RngStream,
    training: bool,
) -> Result<Vector> {
    let mask = dropout_mask(g.len(), rate, rng, training)?;
    Ok(g.iter().zip(mask.iter()).map(|(a, m)| a * m).collect())
}

/// Cache of a regularized step: the cell cache plus zoneout masks.
#[derive(Debug, Clone)]
pub struct RegularizedCache {
    pub cell: StepCache,
    pub zoneout: Option<(Vector, Vector)>,
}

/// One recurrent step with the configured regularizer applied around the
/// cell. `input` must already hold `(x; h_prev[; z])`.
pub(crate) fn regularized_step(
    weights: &Matrix,
    bias: &[f64],
    input_dim: usize,
    input: Vector,
    prev: &LstmState,
    reg: &RegularizerConfig,
    rng: &mut RngStream,
    training: bool,
) -> (LstmState, RegularizedCache) {
    let hidden = prev.c.len();
    let g_mask = match reg.mode {
        RegularizerMode::RecurrentDropout if training && reg.dropout_rate > 0.0 => {
            Some(dropout_mask(hidden, reg.dropout_rate, rng, true).expect("validated rate"))
        }
        _ => None,
    };
    let (new, cell) = cell_forward(weights, bias, input_dim, input, &prev.c, g_mask);
    if reg.mode == RegularizerMode::Zoneout {
        let (mh, mc) = zoneout_masks(reg, hidden, rng, training);
        let state = LstmState {
            h: blend(&mh, &prev.h, &new.h),
            c: blend(&mc, &prev.c, &new.c),
        };
        (
            state,
            RegularizedCache {
                cell,
                zoneout: Some((mh, mc)),
            },
        )
    } else {
        (
            new,
            RegularizedCache {
                cell,
                zoneout: None,
            },
        )
    }
}

/// Backward of [`regularized_step`]. Returns `(d input, dh_prev extra,
/// dc_prev)`; the `h_prev` slice of `d input` plus the extra term is the full
/// gradient on `h_prev`.
pub(crate) fn regularized_step_backward(
    weights: &Matrix,
    cache: &RegularizedCache,
    dh: &[f64],
    dc: &[f64],
    dgates: &mut [f64],
) -> (Vector, Option<Vector>, Vector) {
    match &cache.zoneout {
        None => {
            let (dinput, dc_prev) = cell_backward(weights, &cache.cell, dh, dc, dgates);
            (dinput, None, dc_prev)
        }
        Some((mh, mc)) => {
            let dh_new: Vec<f64> = dh
                .iter()
                .zip(mh.iter())
                .map(|(d, m)| d * (1.0 - m))
                .collect();
            let dc_new: Vec<f64> = dc
                .iter()
                .zip(mc.iter())
                .map(|(d, m)| d * (1.0 - m))
                .collect();
            let (dinput, mut dc_prev) =
                cell_backward(weights, &cache.cell, &dh_new, &dc_new, dgates);
            let dh_extra: Vector = dh.iter().zip(mh.iter()).map(|(d, m)| d * m).collect();
            for ((dp, d), m) in dc_prev.iter_mut().zip(dc).zip(mc.iter()) {
                *dp += d * m;
            }
            (dinput, Some(dh_extra), dc_prev)
        }
    }
}

/// Forward states and caches of a full sequence.
#[derive(Debug, Clone)]
pub struct SequenceRun {
    /// `h_1..h_T` with their cells.
    pub states: Vec<LstmState>,
    pub caches: Vec<RegularizedCache>,
}

impl LstmParams {
    /// Run the cell over `xs` from `init`, applying `reg`.
    pub fn run_sequence<X: AsRef<[f64]>>(
        &self,
        xs: &[X],
        init: &LstmState,
        reg: &RegularizerConfig,
        rng: &mut RngStream,
        training: bool,
    ) -> Result<SequenceRun> {
        let mut state = init.clone();
        let mut states = Vec::with_capacity(xs.len());
        let mut caches = Vec::with_capacity(xs.len());
        for x in xs {
            let x = x.as_ref();
            self.check_step(x, &state)?;
            let input = Vector::concat(&[x, &state.h]);
            let (next, cache) = regularized_step(
                &self.weights,
                &self.bias,
                self.input_dim,
                input,
                &state,
                reg,
                rng,
                training,
            );
            states.push(next.clone());
            caches.push(cache);
            state = next;
        }
        Ok(SequenceRun { states, caches })
    }

    /// Backpropagation through time over `caches`. `dh_steps[t]` is the
    /// external gradient on `h_{t+1}`; `(dh_last, dc_last)` flows into the
    /// final state. Parameter gradients accumulate into `grads`. Returns the
    /// input gradients and the gradient on the initial state.
    pub fn backward_sequence(
        &self,
        caches: &[RegularizedCache],
        dh_steps: &[Vector],
        dh_last: &[f64],
        dc_last: &[f64],
        grads: &mut LstmParams,
    ) -> (Vec<Vector>, LstmState) {
        let (d, h) = (self.input_dim, self.hidden_dim);
        let mut buffer = GateGradBuffer::new();
        let mut dgates = vec![0.0; 4 * h];
        let mut dh: Vector = dh_last.into();
        let mut dc: Vector = dc_last.into();
        let mut dxs = vec![Vector::zeros(d); caches.len()];
        for t in (0..caches.len()).rev() {
            if let Some(ext) = dh_steps.get(t) {
                for (a, b) in dh.iter_mut().zip(ext.iter()) {
                    *a += b;
                }
            }
            let (dinput, extra, dc_prev) =
                regularized_step_backward(&self.weights, &caches[t], &dh, &dc, &mut dgates);
            buffer.push(&dgates, &caches[t].cell.input);
            dxs[t] = dinput[..d].into();
            dh = dinput[d..].into();
            if let Some(e) = extra {
                for (a, b) in dh.iter_mut().zip(e.iter()) {
                    *a += b;
                }
            }
            dc = dc_prev;
        }
        buffer.flush(&mut grads.weights, &mut grads.bias);
        (dxs, LstmState { h: dh, c: dc })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{numeric_gradient, numeric_input_gradient, rel_error};
    use crate::params::ParamSet;

    fn random_params(d: usize, h: usize, seed: u64) -> LstmParams {
        LstmParams::init(d, h, 0.8, 0.5, &mut RngStream::new(seed)).unwrap()
    }

    fn random_vec(n: usize, rng: &mut RngStream) -> Vector {
        (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
    }

    #[test]
    fn zero_params_zero_state() {
        let p = LstmParams::zeros(2, 3);
        let (s, _) = p.step(&[0.0, 0.0], &LstmState::zeros(3)).unwrap();
        assert_eq!(&*s.h, &[0.0; 3]);
        assert_eq!(&*s.c, &[0.0; 3]);
    }

    #[test]
    fn zero_params_carry_cell() {
        let p = LstmParams::zeros(1, 1);
        let prev = LstmState {
            h: Vector::from(vec![0.0]),
            c: Vector::from(vec![1.0]),
        };
        let (s, _) = p.step(&[0.0], &prev).unwrap();
        assert_eq!(s.c[0], 0.5);
        assert!((s.h[0] - 0.231_058_5).abs() < 1e-7);
        assert_eq!(s.h[0], 0.5 * 0.5f64.tanh());
    }

    #[test]
    fn step_is_pure() {
        let p = random_params(2, 3, 1);
        let st = LstmState {
            h: vec![0.1, -0.2, 0.3].into(),
            c: vec![0.5, 0.0, -1.0].into(),
        };
        let a = p.step(&[0.4, -0.6], &st).unwrap();
        let b = p.step(&[0.4, -0.6], &st).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cache_recomputes_output() {
        let p = random_params(2, 3, 4);
        let st = LstmState {
            h: vec![0.1, -0.2, 0.3].into(),
            c: vec![0.5, 0.0, -1.0].into(),
        };
        let (s, cache) = p.step(&[0.4, -0.6], &st).unwrap();
        assert_eq!(cache.x(), &[0.4, -0.6]);
        assert_eq!(cache.h_prev(), &*st.h);
        for j in 0..3 {
            let c = cache.forget_gate()[j] * cache.c_prev[j]
                + cache.input_gate()[j] * cache.candidate()[j];
            assert_eq!(c, s.c[j]);
            assert_eq!(cache.output_gate()[j] * c.tanh(), s.h[j]);
        }
    }

    #[test]
    fn shape_errors() {
        let p = LstmParams::zeros(2, 3);
        assert!(p.step(&[0.0], &LstmState::zeros(3)).is_err());
        assert!(p.step(&[0.0, 0.0], &LstmState::zeros(2)).is_err());
        let (_, cache) = LstmParams::zeros(3, 3)
            .step(&[0.0; 3], &LstmState::zeros(3))
            .unwrap();
        assert!(p.step_backward(&cache, &[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let p = random_params(2, 3, 2);
        let (_, cache) = p.step(&[0.3, 0.2], &LstmState::zeros(3)).unwrap();
        let g = p.step_backward(&cache, &[0.0; 3], &[0.0; 3]).unwrap();
        assert!(g
            .params
            .tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| *v == 0.0)));
        assert!(g
            .dx
            .iter()
            .chain(g.dh_prev.iter())
            .chain(g.dc_prev.iter())
            .all(|v| *v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = random_params(2, 3, 3);
        let st = LstmState {
            h: vec![0.2, 0.1, -0.4].into(),
            c: vec![0.3, -0.5, 0.9].into(),
        };
        let (_, cache) = p.step(&[0.7, -0.1], &st).unwrap();
        let u = [0.3, -1.2, 0.8];
        let a = 2.5;
        let au: Vec<f64> = u.iter().map(|v| a * v).collect();
        let g1 = p.step_backward(&cache, &u, &[0.0; 3]).unwrap();
        let g2 = p.step_backward(&cache, &au, &[0.0; 3]).unwrap();
        for (x, y) in g1
            .params
            .weights
            .as_slice()
            .iter()
            .zip(g2.params.weights.as_slice())
        {
            assert!((a * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
        for (x, y) in g1.dh_prev.iter().zip(g2.dh_prev.iter()) {
            assert!((a * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn step_backward_matches_finite_differences() {
        let mut rng = RngStream::new(77);
        for trial in 0..20 {
            let p = random_params(2, 3, 100 + trial);
            let x = random_vec(2, &mut rng);
            let st = LstmState {
                h: random_vec(3, &mut rng),
                c: random_vec(3, &mut rng),
            };
            let rh = random_vec(3, &mut rng);
            let rc = random_vec(3, &mut rng);
            let loss = |p: &LstmParams, x: &[f64], h: &[f64], c: &[f64]| {
                let s = LstmState {
                    h: h.into(),
                    c: c.into(),
                };
                let (o, _) = p.step(x, &s).unwrap();
                crate::tensor::dot(&o.h, &rh) + crate::tensor::dot(&o.c, &rc)
            };
            let (_, cache) = p.step(&x, &st).unwrap();
            let g = p.step_backward(&cache, &rh, &rc).unwrap();
            let num = numeric_gradient(&p, 1e-5, |q| loss(q, &x, &st.h, &st.c));
            for (view, n) in g.params.tensors().iter().zip(&num) {
                for (a, b) in view.data.iter().zip(n) {
                    assert!(rel_error(*a, *b) <= 1e-4, "{} {a} {b}", view.name);
                }
            }
            let nx = numeric_input_gradient(&x, 1e-5, |x| loss(&p, x, &st.h, &st.c));
            let nh = numeric_input_gradient(&st.h, 1e-5, |h| loss(&p, &x, h, &st.c));
            let nc = numeric_input_gradient(&st.c, 1e-5, |c| loss(&p, &x, &st.h, c));
            for (a, b) in
                g.dx.iter()
                    .zip(&nx)
                    .chain(g.dh_prev.iter().zip(&nh))
                    .chain(g.dc_prev.iter().zip(&nc))
            {
                assert!(rel_error(*a, *b) <= 1e-4, "{a} {b}");
            }
        }
    }

    #[test]
    fn saturated_gates_hold_cell_constant() {
        let mut p = random_params(2, 2, 9);
        for j in 0..2 {
            p.bias[j] = -50.0;
            p.bias[2 + j] = 50.0;
        }
        let mut rng = RngStream::new(1);
        let mut st = LstmState {
            h: Vector::zeros(2),
            c: vec![0.7, -0.3].into(),
        };
        for _ in 0..20 {
            let x = random_vec(2, &mut rng);
            st = p.step(&x, &st).unwrap().0;
            assert!((st.c[0] - 0.7).abs() < 1e-12 && (st.c[1] + 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_state_bounded() {
        let p = LstmParams::init(3, 4, 3.0, 1.0, &mut RngStream::new(5)).unwrap();
        let mut rng = RngStream::new(6);
        let mut st = LstmState::zeros(4);
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.uniform_range(-10.0, 10.0)).collect();
            st = p.step(&x, &st).unwrap().0;
            assert!(st.h.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn zoneout_degenerate_rates() {
        let prev = LstmState {
            h: vec![1.0, 2.0].into(),
            c: vec![3.0, 4.0].into(),
        };
        let new = LstmState {
            h: vec![-1.0, -2.0].into(),
            c: vec![-3.0, -4.0].into(),
        };
        let mut rng = RngStream::new(0);
        for training in [true, false] {
            let out = apply_zoneout(
                &prev,
                &new,
                &RegularizerConfig::zoneout(0.0, 0.0),
                &mut rng,
                training,
            );
            assert_eq!(out, new);
            let out = apply_zoneout(
                &prev,
                &new,
                &RegularizerConfig::zoneout(1.0, 1.0),
                &mut rng,
                training,
            );
            assert_eq!(out, prev);
        }
    }

    #[test]
    fn zoneout_inference_blends() {
        let prev = LstmState {
            h: vec![1.0].into(),
            c: vec![1.0].into(),
        };
        let new = LstmState {
            h: vec![0.0].into(),
            c: vec![0.0].into(),
        };
        let out = apply_zoneout(
            &prev,
            &new,
            &RegularizerConfig::zoneout(0.25, 0.5),
            &mut RngStream::new(0),
            false,
        );
        assert_eq!(out.h[0], 0.25);
        assert_eq!(out.c[0], 0.5);
    }

    #[test]
    fn zoneout_preserve_frequency() {
        let cfg = RegularizerConfig::zoneout(0.1, 0.1);
        let mut rng = RngStream::new(21);
        let (mut kept, mut total) = (0usize, 0usize);
        for _ in 0..1000 {
            let (mh, _) = zoneout_masks(&cfg, 100, &mut rng, true);
            kept += mh.iter().filter(|m| **m == 1.0).count();
            total += 100;
        }
        let freq = kept as f64 / total as f64;
        assert!((freq - 0.1).abs() < 0.01, "{freq}");
    }

    #[test]
    fn recurrent_dropout_contract() {
        let g = [0.5, -0.25, 1.0];
        let mut rng = RngStream::new(3);
        assert_eq!(
            &*apply_recurrent_dropout(&g, 0.0, &mut rng, true).unwrap(),
            &g
        );
        assert_eq!(
            &*apply_recurrent_dropout(&g, 0.7, &mut rng, false).unwrap(),
            &g
        );
        assert!(apply_recurrent_dropout(&g, 1.0, &mut rng, true).is_err());

        let mut sums = [0.0; 3];
        let n = 100_000;
        for _ in 0..n {
            let out = apply_recurrent_dropout(&g, 0.5, &mut rng, true).unwrap();
            for k in 0..3 {
                sums[k] += out[k];
            }
        }
        for k in 0..3 {
            let mean = sums[k] / n as f64;
            assert!(
                (mean - g[k]).abs() <= 0.02 * g[k].abs(),
                "{mean} vs {}",
                g[k]
            );
        }
    }

    #[test]
    fn regularized_backward_matches_finite_differences() {
        for (k, reg) in [
            RegularizerConfig::zoneout(0.3, 0.6),
            RegularizerConfig::recurrent_dropout(0.4),
        ]
        .iter()
        .enumerate()
        {
            for trial in 0..5 {
                let p = random_params(2, 3, 300 + trial);
                let mut rng = RngStream::new(400 + trial);
                let x = random_vec(2, &mut rng);
                let prev = LstmState {
                    h: random_vec(3, &mut rng),
                    c: random_vec(3, &mut rng),
                };
                let rh = random_vec(3, &mut rng);
                let rc = random_vec(3, &mut rng);
                let mask_seed = 500 + trial + 10 * k as u64;
                let run = |p: &LstmParams, h_prev: &[f64]| {
                    let st = LstmState {
                        h: h_prev.into(),
                        c: prev.c.clone(),
                    };
                    let input = Vector::concat(&[&x, h_prev]);
                    let mut r = RngStream::new(mask_seed);
                    regularized_step(&p.weights, &p.bias, 2, input, &st, reg, &mut r, true)
                };
                let loss = |p: &LstmParams, h_prev: &[f64]| {
                    let (s, _) = run(p, h_prev);
                    crate::tensor::dot(&s.h, &rh) + crate::tensor::dot(&s.c, &rc)
                };
                let (_, cache) = run(&p, &prev.h);
                let mut dg = vec![0.0; 12];
                let (dinput, extra, _) =
                    regularized_step_backward(&p.weights, &cache, &rh, &rc, &mut dg);
                let mut grads = p.zeros_like();
                grads.weights.add_outer(&dg, &cache.cell.input);
                grads.bias.copy_from_slice(&dg);
                let num = numeric_gradient(&p, 1e-5, |q| loss(q, &prev.h));
                for (view, n) in grads.tensors().iter().zip(&num) {
                    for (a, b) in view.data.iter().zip(n) {
                        assert!(rel_error(*a, *b) <= 1e-4, "{a} {b}");
                    }
                }
                let mut dh_prev: Vec<f64> = dinput[2..].to_vec();
                if let Some(e) = extra {
                    for (a, b) in dh_prev.iter_mut().zip(e.iter()) {
                        *a += b;
                    }
                }
                let nh = numeric_input_gradient(&prev.h, 1e-5, |h| loss(&p, h));
                for (a, b) in dh_prev.iter().zip(&nh) {
                    assert!(rel_error(*a, *b) <= 1e-4, "{a} {b}");
                }
            }
        }
    }

    #[test]
    fn gate_buffer_matches_outer_products() {
        let p = random_params(3, 4, 12);
        let mut rng = RngStream::new(13);
        let mut direct = p.zeros_like();
        let mut buffered = p.zeros_like();
        let mut buf = GateGradBuffer::new();
        for _ in 0..6 {
            let dg = random_vec(16, &mut rng);
            let input = random_vec(7, &mut rng);
            direct.weights.add_outer(&dg, &input);
            for (b, d) in direct.bias.iter_mut().zip(dg.iter()) {
                *b += d;
            }
            buf.push(&dg, &input);
        }
        buf.flush(&mut buffered.weights, &mut buffered.bias);
        for (a, b) in direct
            .weights
            .as_slice()
            .iter()
            .zip(buffered.weights.as_slice())
        {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(direct.bias, buffered.bias);
    }
}
