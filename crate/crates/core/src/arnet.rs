//! The auto-reconstructor: an LSTM that reads a hidden-state sequence and,
//! from each present state `h_t`, reconstructs the previous one `h_{t-1}`
//! through a fully connected map. The squared reconstruction error is the
//! regularization term added to the training objective.

use crate::error::{Error, Result};
use crate::lstm::{cell_backward, GateGradBuffer, LstmParams, LstmState, StepCache};
use crate::params::{prefixed, prefixed_mut, ParamSet, TensorView};
use crate::tensor::{init_uniform, Matrix, RngStream, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct ArnetParams {
    /// Input dimension is the observed hidden size, hidden is the ARNet size.
    pub cell: LstmParams,
    /// `H_obs × H_ar`.
    pub w_fc: Matrix,
    /// `H_obs`.
    pub b_fc: Vector,
}

pub type ArnetState = LstmState;

#[derive(Debug, Clone)]
pub struct ArnetCache {
    pub cell: StepCache,
    pub h_ar: Vector,
}

/// Result of running the reconstructor over a full sequence.
#[derive(Debug, Clone)]
pub struct ArnetPass {
    /// `Σ_t L_AR^t`.
    pub total: f64,
    /// One entry per reconstructed pair, `t = 2..N`.
    pub per_step: Vec<f64>,
    /// Gradient of `total` with respect to the reconstructor parameters.
    pub grads: ArnetParams,
    /// Gradient of `total` with respect to each observed hidden state.
    pub dhiddens: Vec<Vector>,
}

impl ArnetParams {
    pub fn zeros(observed_dim: usize, arnet_dim: usize) -> Self {
        ArnetParams {
            cell: LstmParams::zeros(observed_dim, arnet_dim),
            w_fc: Matrix::zeros(observed_dim, arnet_dim),
            b_fc: Vector::zeros(observed_dim),
        }
    }

    pub fn init(
        observed_dim: usize,
        arnet_dim: usize,
        bound: f64,
        forget_bias: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(ArnetParams {
            cell: LstmParams::init(observed_dim, arnet_dim, bound, forget_bias, rng)?,
            w_fc: init_uniform(observed_dim, arnet_dim, bound, rng)?,
            b_fc: Vector::zeros(observed_dim),
        })
    }

    pub fn observed_dim(&self) -> usize {
        self.cell.input_dim()
    }

    pub fn arnet_dim(&self) -> usize {
        self.cell.hidden_dim()
    }

    pub fn zeros_like(&self) -> Self {
        ArnetParams::zeros(self.observed_dim(), self.arnet_dim())
    }

    pub fn initial_state(&self) -> ArnetState {
        LstmState::zeros(self.arnet_dim())
    }

    /// Consume `h_t`, return the next reconstructor state and `ĥ_{t-1}`.
    pub fn step(
        &self,
        h_t: &[f64],
        state: &ArnetState,
    ) -> Result<(ArnetState, Vector, ArnetCache)> {
        let (next, cell) = self.cell.step(h_t, state)?;
        let mut recon = Vector::zeros(self.observed_dim());
        self.w_fc.matvec_into(&next.h, &mut recon);
        for (r, b) in recon.iter_mut().zip(self.b_fc.iter()) {
            *r += b;
        }
        let cache = ArnetCache {
            cell,
            h_ar: next.h.clone(),
        };
        Ok((next, recon, cache))
    }

    /// Forward-only total loss over `hiddens`.
    pub fn sequence_loss(&self, hiddens: &[Vector]) -> Result<f64> {
        let mut state = self.initial_state();
        let mut total = 0.0;
        for t in 1..hiddens.len() {
            let (next, recon, _) = self.step(&hiddens[t], &state)?;
            total += arnet_loss(&recon, &hiddens[t - 1])?;
            state = next;
        }
        Ok(total)
    }

    /// Squared error of every reconstructed component, in step order; sums
    /// to [`Self::sequence_loss`].
    pub fn component_losses(&self, hiddens: &[Vector]) -> Result<Vec<f64>> {
        let mut state = self.initial_state();
        let mut out = Vec::new();
        for t in 1..hiddens.len() {
            let (next, recon, _) = self.step(&hiddens[t], &state)?;
            out.extend(
                recon
                    .iter()
                    .zip(hiddens[t - 1].iter())
                    .map(|(r, h)| (h - r) * (h - r)),
            );
            state = next;
        }
        Ok(out)
    }

    /// Run over `h_1..h_N`: at each `t = 2..N` feed `h_t` and reconstruct
    /// `h_{t-1}`. Fewer than two states yield a zero loss and zero gradients.
    pub fn sequence_pass(&self, hiddens: &[Vector]) -> Result<ArnetPass> {
        let n = hiddens.len();
        let obs = self.observed_dim();
        let har = self.arnet_dim();
        let mut grads = self.zeros_like();
        let mut dhiddens = vec![Vector::zeros(obs); n];
        if n < 2 {
            return Ok(ArnetPass {
                total: 0.0,
                per_step: Vec::new(),
                grads,
                dhiddens,
            });
        }
        let mut state = self.initial_state();
        let mut caches = Vec::with_capacity(n - 1);
        let mut residuals = Vec::with_capacity(n - 1);
        let mut per_step = Vec::with_capacity(n - 1);
        for t in 1..n {
            let (next, recon, cache) = self.step(&hiddens[t], &state)?;
            if hiddens[t - 1].len() != obs {
                return Err(Error::shape(
                    "arnet_sequence_pass",
                    obs,
                    hiddens[t - 1].len(),
                ));
            }
            let r: Vector = recon
                .iter()
                .zip(hiddens[t - 1].iter())
                .map(|(a, b)| a - b)
                .collect();
            per_step.push(r.iter().map(|v| v * v).sum());
            residuals.push(r);
            caches.push(cache);
            state = next;
        }

        let mut buffer = GateGradBuffer::new();
        let mut dgates = vec![0.0; 4 * har];
        let mut dh_next = Vector::zeros(har);
        let mut dc_next = Vector::zeros(har);
        for k in (0..n - 1).rev() {
            let t = k + 1;
            let cache = &caches[k];
            // d/dĥ = 2(ĥ - h), d/dh_target = -2(ĥ - h)
            let drecon: Vector = residuals[k].iter().map(|r| 2.0 * r).collect();
            for (d, r) in dhiddens[t - 1].iter_mut().zip(drecon.iter()) {
                *d -= r;
            }
            grads.w_fc.add_outer(&drecon, &cache.h_ar);
            for (b, r) in grads.b_fc.iter_mut().zip(drecon.iter()) {
                *b += r;
            }
            let mut dh = dh_next.clone();
            self.w_fc.matvec_t_acc(&drecon, &mut dh);
            let (dinput, dc_prev) =
                cell_backward(&self.cell.weights, &cache.cell, &dh, &dc_next, &mut dgates);
            buffer.push(&dgates, &cache.cell.input);
            for (d, v) in dhiddens[t].iter_mut().zip(&dinput[..obs]) {
                *d += v;
            }
            dh_next = dinput[obs..].into();
            dc_next = dc_prev;
        }
        buffer.flush(&mut grads.cell.weights, &mut grads.cell.bias);
        Ok(ArnetPass {
            total: per_step.iter().sum(),
            per_step,
            grads,
            dhiddens,
        })
    }
}

impl ParamSet for ArnetParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut v = prefixed("cell", self.cell.tensors());
        v.push(TensorView {
            name: "w_fc".into(),
            shape: vec![self.w_fc.rows(), self.w_fc.cols()],
            data: self.w_fc.as_slice(),
        });
        v.push(TensorView {
            name: "b_fc".into(),
            shape: vec![self.b_fc.len()],
            data: &self.b_fc,
        });
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v = prefixed_mut("cell", self.cell.tensors_mut());
        v.push(("w_fc".into(), self.w_fc.as_mut_slice()));
        v.push(("b_fc".into(), &mut self.b_fc));
        v
    }
}

/// `‖h_prev − ĥ‖²₂`, summed over components.
pub fn arnet_loss(reconstructed: &[f64], h_prev: &[f64]) -> Result<f64> {
    if reconstructed.len() != h_prev.len() {
        return Err(Error::shape(
            "arnet_loss",
            reconstructed.len(),
            h_prev.len(),
        ));
    }
    Ok(reconstructed
        .iter()
        .zip(h_prev)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}
