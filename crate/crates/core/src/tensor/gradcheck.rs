//! Central finite-difference gradient checking.
//!
//! The checker only ever calls the forward function, so it stays independent
//! of the backward rules it verifies.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Relative-error bound.
    pub rel_tol: f64,
    /// Absolute-error bound used when the analytic value is tiny.
    pub abs_tol: f64,
    /// Below this magnitude the absolute bound applies instead of the relative one.
    pub tiny: f64,
    /// Check at most this many components per input, evenly spaced.
    pub max_components: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-4, abs_tol: 1e-7, tiny: 1e-6, max_components: None }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub failures: Vec<GradMismatch>,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub component: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences. Every input is registered as a trainable leaf.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (input, t) in inputs.iter().enumerate() {
        let n = t.len();
        let picks: Vec<usize> = match opts.max_components {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for component in picks {
            let orig = t.data()[component];
            work[input].data_mut()[component] = orig + opts.step;
            let up = eval(&work)?;
            work[input].data_mut()[component] = orig - opts.step;
            let down = eval(&work)?;
            work[input].data_mut()[component] = orig;

            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic[input].data()[component];
            let scale = a.abs().max(numeric.abs());
            let err = (a - numeric).abs();
            let ok = if a.abs() < opts.tiny {
                err < opts.abs_tol || (scale > 0.0 && err / scale < opts.rel_tol)
            } else {
                err / scale < opts.rel_tol
            };
            if a.abs() >= opts.tiny {
                report.max_rel_err = report.max_rel_err.max(err / scale);
            }
            report.checked += 1;
            if !ok {
                report.failures.push(GradMismatch { input, component, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}
