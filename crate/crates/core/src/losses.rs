//! Masked feature and logit distillation losses and the combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regions::NormMode;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Softmax temperature of the patch normalization.
    pub tau: f64,
    /// Sparsity penalty of the mask objective.
    pub lambda: f64,
    /// Weight of the feature loss.
    pub alpha_feat: f64,
    /// Weight of the logit loss.
    pub alpha_logit: f64,
    /// Weight of the regression loss.
    pub gamma: f64,
    /// Scale of the distance term in the disparity score.
    pub kappa: f64,
    /// Proposals taken from each model per sample.
    pub top_k: usize,
    /// Peaks scoring below this are not proposals.
    pub min_score: f64,
    pub roi_res: usize,
    /// Include regression differences in the logit loss.
    pub anchor_style_logits: bool,
    /// Square the per-pair feature distance.
    pub squared_feat: bool,
    pub norm: NormMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            tau: 4.0,
            lambda: 0.1,
            alpha_feat: 0.2,
            alpha_logit: 0.2,
            gamma: 0.25,
            kappa: 5.0e4,
            top_k: 16,
            min_score: 0.05,
            roi_res: 7,
            anchor_style_logits: false,
            squared_feat: false,
            norm: NormMode::Channel,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            errs.push(format!("distill.tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("distill.lambda", self.lambda),
            ("distill.alpha_feat", self.alpha_feat),
            ("distill.alpha_logit", self.alpha_logit),
            ("distill.gamma", self.gamma),
            ("distill.kappa", self.kappa),
        ] {
            if !(v >= 0.0) {
                errs.push(format!("{name} must be non-negative, got {v}"));
            }
        }
        if self.top_k == 0 {
            errs.push("distill.top_k must be at least 1".into());
        }
        if self.roi_res == 0 {
            errs.push("distill.roi_res must be at least 1".into());
        }
        errs
    }
}

fn check_mask(pairs: usize, mask: &[f64]) -> Result<()> {
    if pairs != mask.len() {
        return Err(Error::Contract(format!("{pairs} region pairs but {} mask entries", mask.len())));
    }
    Ok(())
}

/// Masked mean over pairs of a per-pair `[P]` distance vector.
fn masked_mean<'t>(per_pair: Var<'t>, mask: &[f64]) -> Result<Var<'t>> {
    let tape = per_pair.tape();
    let m = tape.constant(Tensor::new(&[mask.len()], mask.to_vec())?);
    Ok(per_pair.mul(m)?.sum_all().scale(1.0 / mask.len() as f64))
}

/// `(1/P) sum_i m_i ||s_i - t_i||_2` over `[P, C, r, r]` normalized patches
/// (squared norm when `squared`).
pub fn feature_loss<'t>(student: Var<'t>, teacher: Var<'t>, mask: &[f64], squared: bool) -> Result<Var<'t>> {
    let p = student.shape().first().copied().unwrap_or(0);
    check_mask(p, mask)?;
    if p == 0 {
        return Ok(student.tape().constant(Tensor::scalar(0.0)));
    }
    let diff = student.sub(teacher)?;
    let per_pair = if squared {
        diff.mul(diff)?.sum(&[1, 2, 3])?
    } else {
        diff.l2_norm(&[1, 2, 3])?
    };
    masked_mean(per_pair, mask)
}

/// `(1/P) sum_i m_i (|cls_s - cls_t|_1 + [anchor_style] |reg_s - reg_t|_1)`
/// over `[P, K]` class probabilities and `[P, 6]` regression vectors.
pub fn logit_loss<'t>(
    student_cls: Var<'t>,
    teacher_cls: Var<'t>,
    student_reg: Var<'t>,
    teacher_reg: Var<'t>,
    mask: &[f64],
    anchor_style: bool,
) -> Result<Var<'t>> {
    let p = student_cls.shape().first().copied().unwrap_or(0);
    check_mask(p, mask)?;
    if p == 0 {
        return Ok(student_cls.tape().constant(Tensor::scalar(0.0)));
    }
    let mut per_pair = student_cls.sub(teacher_cls)?.l1_norm(&[1])?;
    if anchor_style {
        per_pair = per_pair.add(student_reg.sub(teacher_reg)?.l1_norm(&[1])?)?;
    }
    masked_mean(per_pair, mask)
}

/// `L_cls + gamma L_reg + alpha_feat L_feat + alpha_logit L_logit`.
pub fn total_loss<'t>(l_cls: Var<'t>, l_reg: Var<'t>, l_feat: Var<'t>, l_logit: Var<'t>, cfg: &DistillConfig) -> Result<Var<'t>> {
    l_cls
        .add(l_reg.scale(cfg.gamma))?
        .add(l_feat.scale(cfg.alpha_feat))?
        .add(l_logit.scale(cfg.alpha_logit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn total_arithmetic() {
        let tape = Tape::new();
        let s = |v| tape.constant(Tensor::scalar(v));
        let cfg = DistillConfig::default();
        let t = total_loss(s(1.0), s(2.0), s(3.0), s(4.0), &cfg).unwrap();
        assert!((t.value().item() - 2.9).abs() < 1e-15);
        let plain = DistillConfig { alpha_feat: 0.0, alpha_logit: 0.0, ..cfg.clone() };
        assert_eq!(total_loss(s(1.0), s(2.0), s(3.0), s(4.0), &plain).unwrap().value().item(), 1.5);
        assert_eq!(total_loss(s(0.0), s(0.0), s(0.0), s(0.0), &cfg).unwrap().value().item(), 0.0);
    }

    #[test]
    fn zero_mask_zero_loss_and_length_check() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64));
        let b = tape.constant(Tensor::zeros(&[2, 3, 2, 2]));
        assert_eq!(feature_loss(a, b, &[0.0, 0.0], false).unwrap().value().item(), 0.0);
        assert!(matches!(feature_loss(a, b, &[1.0], false), Err(Error::Contract(_))));
        let c = tape.leaf(Tensor::ones(&[2, 3]));
        let r = tape.leaf(Tensor::ones(&[2, 6]));
        let r2 = tape.constant(Tensor::zeros(&[2, 6]));
        assert_eq!(logit_loss(c, c, r, r2, &[1.0, 1.0], false).unwrap().value().item(), 0.0);
        assert_eq!(logit_loss(c, c, r, r2, &[1.0, 1.0], true).unwrap().value().item(), 6.0);
    }
}
