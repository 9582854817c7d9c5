//! Disparity scoring of region pairs and the pair-selection mask.
//!
//! The score of a pair is `H(student) - kappa * msd(student, teacher)`:
//! the student patch's mean per-location channel entropy minus a scaled
//! mean-square distance between the two normalized patches. Low scores mean
//! high disparity. The mask minimizes `sum_i m_i * (score_i + lambda)` over
//! `m in [0, 1]^n`, which separates per entry.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Allowed deviation of a location's channel sum from 1.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisparityScore {
    pub entropy_s: f64,
    pub distance: f64,
    pub mi_proxy: f64,
}

/// Mean over locations of the channel entropy of a `[C, H, W]` patch whose
/// channel vectors are distributions.
pub fn entropy(patch: &Tensor) -> Result<f64> {
    let &[c, h, w] = patch.shape() else {
        return Err(Error::Contract(format!("entropy expects [C, H, W], got {:?}", patch.shape())));
    };
    let hw = h * w;
    if hw == 0 || c == 0 {
        return Ok(0.0);
    }
    let d = patch.data();
    let mut total = 0.0;
    for loc in 0..hw {
        let mut sum = 0.0;
        let mut ent = 0.0;
        for ch in 0..c {
            let p = d[ch * hw + loc];
            sum += p;
            if p > 0.0 {
                ent -= p * p.ln();
            }
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Contract(format!("location {loc} channel sum is {sum}, expected 1")));
        }
        total += ent;
    }
    Ok(total / hw as f64)
}

pub fn disparity_score(student: &Tensor, teacher: &Tensor, kappa: f64) -> Result<DisparityScore> {
    if student.shape() != teacher.shape() {
        return Err(Error::Contract(format!(
            "pair patches differ in shape: {:?} vs {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let entropy_s = entropy(student)?;
    let n = student.len().max(1) as f64;
    let distance = student.data().iter().zip(teacher.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(DisparityScore { entropy_s, distance, mi_proxy: entropy_s - kappa * distance })
}

/// Closed-form minimizer: `m_i = 1` exactly when `score_i + lambda < 0`.
pub fn solve_mask(scores: &[f64], lambda: f64) -> Vec<f64> {
    scores.iter().map(|&s| if s + lambda < 0.0 { 1.0 } else { 0.0 }).collect()
}

/// Projected gradient descent on the relaxed objective, started at 0.5 and
/// hard-thresholded at the end (exactly 0.5 maps to 0).
pub fn solve_mask_gd(scores: &[f64], lambda: f64, steps: usize, lr: f64) -> Vec<f64> {
    let mut m = vec![0.5; scores.len()];
    for _ in 0..steps.max(1) {
        for (mi, &s) in m.iter_mut().zip(scores) {
            *mi = (*mi - lr * (s + lambda)).clamp(0.0, 1.0);
        }
    }
    m.into_iter().map(|v| if v > 0.5 { 1.0 } else { 0.0 }).collect()
}

pub fn mask_objective(scores: &[f64], lambda: f64, m: &[f64]) -> f64 {
    scores.iter().zip(m).map(|(&s, &mi)| mi * s).sum::<f64>() + lambda * m.iter().map(|v| v.abs()).sum::<f64>()
}

pub fn mask_fraction(m: &[f64]) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.iter().sum::<f64>() / m.len() as f64
    }
}
