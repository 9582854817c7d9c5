//! SGD with momentum and a warmup-peak-decay learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Learning rate rises linearly from `start` to `peak` over the first
/// `warmup_frac` of training, then follows a cosine down to `end`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    #[serde(rename = "lr_start")]
    pub start: f64,
    #[serde(rename = "lr_peak")]
    pub peak: f64,
    #[serde(rename = "lr_end")]
    pub end: f64,
    pub warmup_frac: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { start: 0.002, peak: 0.02, end: 2e-7, warmup_frac: 0.3 }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.peak;
        }
        let t = step as f64 / (total - 1) as f64;
        let w = self.warmup_frac.clamp(0.0, 1.0);
        if t < w {
            self.start + (self.peak - self.start) * t / w
        } else {
            let u = if w >= 1.0 { 1.0 } else { (t - w) / (1.0 - w) };
            self.end + 0.5 * (self.peak - self.end) * (1.0 + (std::f64::consts::PI * u).cos())
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        Self { momentum, weight_decay, clip_norm, velocity: BTreeMap::new() }
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) {
        let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let vel = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let decay = if name.ends_with(".b") || name.ends_with(".beta") { 0.0 } else { self.weight_decay };
            for ((w, &gv), v) in p.data_mut().iter_mut().zip(g.data()).zip(vel.iter_mut()) {
                let d = gv * scale + decay * *w;
                *v = self.momentum * *v + d;
                *w -= lr * *v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0, 101), s.start);
        assert!((s.at(30, 101) - s.peak).abs() < 1e-12);
        assert!((s.at(100, 101) - s.end).abs() < 1e-15);
        assert!(s.at(15, 101) > s.start && s.at(15, 101) < s.peak);
        assert!(s.at(60, 101) < s.peak && s.at(60, 101) > s.end);
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut params = BTreeMap::from([("x.w".to_string(), Tensor::full(&[2], 4.0))]);
        let mut opt = Sgd::new(0.9, 0.0, None);
        for _ in 0..200 {
            let g = params["x.w"].map(|v| 2.0 * v);
            opt.step(&mut params, &BTreeMap::from([("x.w".to_string(), g)]), 0.05);
        }
        assert!(params["x.w"].data().iter().all(|v| v.abs() < 1e-3));
    }
}
