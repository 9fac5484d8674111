//! Central finite-difference gradient checking.
//!
//! Numeric gradients here only ever call forward passes, so they stay an
//! independent check on every analytic backward implementation.

use serde::Serialize;

use crate::params::ParamSet;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central differences of `loss` with respect to every parameter entry,
/// one `Vec` per tensor in [`ParamSet::tensors`] order.
pub fn numeric_gradient<P, F>(params: &P, eps: f64, loss: F) -> Vec<Vec<f64>>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> f64,
{
    let mut p = params.clone();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (ti, &n) in sizes.iter().enumerate() {
        let mut grad = vec![0.0; n];
        for (j, g) in grad.iter_mut().enumerate() {
            let orig = p.tensors_mut()[ti].1[j];
            p.tensors_mut()[ti].1[j] = orig + eps;
            let fp = loss(&p);
            p.tensors_mut()[ti].1[j] = orig - eps;
            let fm = loss(&p);
            p.tensors_mut()[ti].1[j] = orig;
            *g = (fp - fm) / (2.0 * eps);
        }
        out.push(grad);
    }
    out
}

/// Central differences of a loss given as a sum of terms. Each term is
/// differenced on its own before summing, which keeps rounding in the large
/// shared part of the sum out of the difference.
pub fn numeric_gradient_terms<P, F>(params: &P, eps: f64, terms: F) -> Vec<Vec<f64>>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Vec<f64>,
{
    let mut p = params.clone();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (ti, &n) in sizes.iter().enumerate() {
        let mut grad = vec![0.0; n];
        for (j, g) in grad.iter_mut().enumerate() {
            let orig = p.tensors_mut()[ti].1[j];
            p.tensors_mut()[ti].1[j] = orig + eps;
            let fp = terms(&p);
            p.tensors_mut()[ti].1[j] = orig - eps;
            let fm = terms(&p);
            p.tensors_mut()[ti].1[j] = orig;
            *g = fp.iter().zip(&fm).map(|(a, b)| a - b).sum::<f64>() / (2.0 * eps);
        }
        out.push(grad);
    }
    out
}

/// Richardson extrapolation of central differences at `eps` and `2 eps`,
/// which cancels the `eps²` truncation term. With `eps` around 1e-3 this is
/// a far more precise reference than a single difference at 1e-5.
pub fn extrapolated_gradient_terms<P, F>(params: &P, eps: f64, terms: F) -> Vec<Vec<f64>>
where
    P: ParamSet + Clone,
    F: Fn(&P) -> Vec<f64>,
{
    let a = numeric_gradient_terms(params, eps, &terms);
    let b = numeric_gradient_terms(params, 2.0 * eps, &terms);
    a.iter()
        .zip(&b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (4.0 * p - q) / 3.0).collect())
        .collect()
}

/// Central differences with respect to a plain input vector.
pub fn numeric_input_gradient<F>(x: &[f64], eps: f64, loss: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut v = x.to_vec();
    (0..x.len())
        .map(|j| {
            let orig = v[j];
            v[j] = orig + eps;
            let fp = loss(&v);
            v[j] = orig - eps;
            let fm = loss(&v);
            v[j] = orig;
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}

/// Worst agreement found for one named tensor.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TensorReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compare analytic gradients against numeric ones, tensor by tensor.
pub fn compare<P: ParamSet>(analytic: &P, numeric: &[Vec<f64>]) -> Vec<TensorReport> {
    analytic
        .tensors()
        .iter()
        .zip(numeric)
        .map(|(view, num)| {
            let mut rep = TensorReport {
                name: view.name.clone(),
                entries: view.data.len(),
                max_rel_error: 0.0,
                worst_analytic: 0.0,
                worst_numeric: 0.0,
            };
            for (a, b) in view.data.iter().zip(num) {
                let e = rel_error(*a, *b);
                if e > rep.max_rel_error || e.is_nan() {
                    rep.max_rel_error = e;
                    rep.worst_analytic = *a;
                    rep.worst_numeric = *b;
                }
            }
            rep
        })
        .collect()
}

pub fn compare_vectors(name: &str, analytic: &[f64], numeric: &[f64]) -> TensorReport {
    let mut rep = TensorReport {
        name: name.to_string(),
        entries: analytic.len(),
        max_rel_error: 0.0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (a, b) in analytic.iter().zip(numeric) {
        let e = rel_error(*a, *b);
        if e > rep.max_rel_error || e.is_nan() {
            rep.max_rel_error = e;
            rep.worst_analytic = *a;
            rep.worst_numeric = *b;
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert_eq!(rel_error(1.0, 1.0), 0.0);
        assert!((rel_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
        assert!((rel_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn extrapolation_removes_cubic_truncation() {
        #[derive(Clone)]
        struct One(Vec<f64>);
        impl ParamSet for One {
            fn tensors(&self) -> Vec<crate::params::TensorView<'_>> {
                vec![crate::params::TensorView {
                    name: "x".into(),
                    shape: vec![1],
                    data: &self.0,
                }]
            }
            fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
                vec![("x".into(), &mut self.0)]
            }
        }
        let p = One(vec![0.7]);
        let f = |q: &One| vec![q.0[0].powi(3)];
        let plain = numeric_gradient_terms(&p, 1e-2, f)[0][0];
        let rich = extrapolated_gradient_terms(&p, 1e-2, f)[0][0];
        let exact = 3.0 * 0.49;
        assert!((plain - exact).abs() > 5e-5);
        assert!((rich - exact).abs() < 1e-12);
    }

    #[test]
    fn numeric_input_gradient_of_quadratic() {
        let g = numeric_input_gradient(&[1.0, -2.0], 1e-5, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }
}
