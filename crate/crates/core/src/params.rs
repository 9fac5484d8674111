//! Named parameter tensors, gradient utilities and the Adam optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Read-only view of one named parameter tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Anything that owns named parameter tensors. Gradient containers reuse the
/// parameter types, so one visitor serves parameters and gradients alike.
pub trait ParamSet {
    /// Tensors in a fixed, deterministic order.
    fn tensors(&self) -> Vec<TensorView<'_>>;

    /// Mutable access in the same order as [`ParamSet::tensors`].
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn zero(&mut self) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn scale_all(&mut self, s: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, views: Vec<TensorView<'a>>) -> Vec<TensorView<'a>> {
    views
        .into_iter()
        .map(|mut v| {
            v.name = format!("{prefix}.{}", v.name);
            v
        })
        .collect()
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    views: Vec<(String, &'a mut [f64])>,
) -> Vec<(String, &'a mut [f64])> {
    views
        .into_iter()
        .map(|(n, d)| (format!("{prefix}.{n}"), d))
        .collect()
}

/// `dst += src`, tensor by tensor. Both sets must have identical layouts.
pub fn accumulate<P: ParamSet>(dst: &mut P, src: &P) {
    let src = src.tensors();
    for ((_, d), s) in dst.tensors_mut().into_iter().zip(src) {
        for (a, b) in d.iter_mut().zip(s.data) {
            *a += b;
        }
    }
}

pub fn global_norm<P: ParamSet + ?Sized>(grads: &P) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: ParamSet + ?Sized>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        grads.scale_all(max_norm / norm);
    }
    norm
}

/// Hyper-parameters of Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with per-tensor moments keyed by tensor name.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Apply one update. Tensors named in `frozen` (by prefix) are skipped.
    pub fn update<P: ParamSet>(
        &mut self,
        params: &mut P,
        grads: &P,
        frozen: &[&str],
    ) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let gviews = grads.tensors();
        let pviews = params.tensors_mut();
        if gviews.len() != pviews.len() {
            return Err(Error::shape("Adam::update", pviews.len(), gviews.len()));
        }
        for ((name, p), g) in pviews.into_iter().zip(gviews) {
            if frozen.iter().any(|f| name.starts_with(f)) {
                continue;
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> &BTreeMap<String, (Vec<f64>, Vec<f64>)> {
        &self.moments
    }

    pub fn set_moment(&mut self, name: String, m: Vec<f64>, v: Vec<f64>) {
        self.moments.insert(name, (m, v));
    }
}
