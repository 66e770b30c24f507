//! Focal classification loss, DIoU regression loss and video-level
//! cross-entropy, each as a differentiable tensor op plus a scalar form.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};
use crate::eval::iou;

pub const PROB_CLAMP: f64 = 1e-6;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub focal: f64,
    pub diou: f64,
    pub video_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Unit weights.
    pub fn new(focal: f64, diou: f64, video_ce: f64) -> Self {
        LossBreakdown {
            focal,
            diou,
            video_ce,
            total: focal + diou + video_ce,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.focal, self.diou, self.video_ce, self.total].iter().all(|v| v.is_finite())
    }

    pub fn add(&self, other: &LossBreakdown) -> Self {
        LossBreakdown::new(self.focal + other.focal, self.diou + other.diou, self.video_ce + other.video_ce)
    }

    pub fn scale(&self, s: f64) -> Self {
        LossBreakdown::new(self.focal * s, self.diou * s, self.video_ce * s)
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

/// Per-element focal loss from probabilities; `targets` is 0/1 of the same shape.
pub fn focal_elementwise(prob: &Tensor, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Tensor> {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let not_t = targets.affine(-1.0, 1.0)?;
    let p_t = ((&p * targets)? + (p.affine(-1.0, 1.0)? * &not_t)?)?;
    let alpha_t = targets.affine(2.0 * alpha - 1.0, 1.0 - alpha)?;
    let modulator = if gamma == 0.0 {
        p_t.ones_like()?
    } else {
        p_t.affine(-1.0, 1.0)?.powf(gamma)?
    };
    Ok((alpha_t * modulator * p_t.log()?)?.neg()?)
}

/// Sum over non-ignored entries of the focal loss on `sigmoid(logits)`,
/// divided by `max(num_pos, 1)`. `weights` masks ignored anchors with 0.
pub fn focal_loss_tensor(
    logits: &Tensor,
    targets: &Tensor,
    weights: &Tensor,
    num_pos: usize,
    alpha: f64,
    gamma: f64,
) -> Result<Tensor> {
    let per = focal_elementwise(&sigmoid(logits)?, targets, alpha, gamma)?;
    let summed = per.broadcast_mul(weights)?.sum_all()?;
    Ok((summed / num_pos.max(1) as f64)?)
}

/// Per-row DIoU loss for `[P, 2]` segments as `(start, end)`.
pub fn diou_loss_tensor(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (s1, e1) = (pred.narrow(1, 0, 1)?, pred.narrow(1, 1, 1)?);
    let (s2, e2) = (gt.narrow(1, 0, 1)?, gt.narrow(1, 1, 1)?);
    let inter = (e1.minimum(&e2)? - s1.maximum(&s2)?)?.relu()?;
    let union = (((&e1 - &s1)? + (&e2 - &s2)?)? - &inter)?;
    let iou = (inter / union)?;
    let hull = (e1.maximum(&e2)? - s1.minimum(&s2)?)?;
    let d = (((&s1 + &e1)? - (&s2 + &e2)?)? * 0.5)?;
    let penalty = (d.sqr()? / hull.sqr()?)?;
    Ok((iou.affine(-1.0, 1.0)? + penalty)?.squeeze(1)?)
}

/// Softmax cross-entropy of `[K]` logits.
pub fn video_ce_tensor(logits: &Tensor, label: usize) -> Result<Tensor> {
    let k = logits.dim(D::Minus1)?;
    if label >= k {
        return Err(Error::Contract(format!("label {label} out of range for {k} classes")));
    }
    let m = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let log_prob = shifted.broadcast_sub(&lse)?;
    Ok(log_prob.narrow(D::Minus1, label, 1)?.neg()?.sum_all()?)
}

/// `-alpha_t (1 - p_t)^gamma ln p_t` with `p` clamped into `[1e-6, 1 - 1e-6]`.
pub fn focal_loss(prob: f64, target: bool, alpha: f64, gamma: f64) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (p_t, alpha_t) = if target { (p, alpha) } else { (1.0 - p, 1.0 - alpha) };
    -alpha_t * (1.0 - p_t).powf(gamma) * p_t.ln()
}

pub fn diou_loss(pred: (f64, f64), gt: (f64, f64)) -> Result<f64> {
    for s in [pred, gt] {
        if !(s.0.is_finite() && s.1.is_finite()) || s.1 <= s.0 {
            return Err(Error::Contract(format!("degenerate segment [{}, {}]", s.0, s.1)));
        }
    }
    let d = (pred.0 + pred.1) / 2.0 - (gt.0 + gt.1) / 2.0;
    let c = pred.1.max(gt.1) - pred.0.min(gt.0);
    Ok(1.0 - iou(pred, gt) + d * d / (c * c))
}

pub fn video_ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Contract(format!("label {label} out of range for {} classes", logits.len())));
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    Ok(lse - logits[label])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::cpu;
    use candle_core::{DType, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FD_STEP: f64 = 1e-4;
    const GRAD_REL_TOL: f64 = 1e-4;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn focal_examples() {
        assert!(focal_loss(0.999_999, true, 0.25, 2.0) < 1e-12);
        assert!((focal_loss(0.5, true, 0.25, 2.0) - 0.043_322).abs() < 1e-6);
        assert!((focal_loss(0.5, true, 0.25, 2.0) - 0.0625 * 2f64.ln()).abs() < 1e-15);
        // clamping keeps p = 0 finite
        assert!(focal_loss(0.0, true, 0.25, 2.0).is_finite());
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let bce = |p: f64, t: bool| if t { -p.ln() } else { -(1.0 - p).ln() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = rng.random_range(0.01..0.99);
            let t = rng.random_bool(0.5);
            assert!((focal_loss(p, t, 0.5, 0.0) - 0.5 * bce(p, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn diou_examples() {
        assert_eq!(diou_loss((3.0, 7.0), (3.0, 7.0)).unwrap(), 0.0);
        assert!((diou_loss((0.0, 2.0), (2.0, 4.0)).unwrap() - 1.25).abs() < 1e-9);
        assert!((diou_loss((0.0, 10.0), (5.0, 15.0)).unwrap() - 0.777_778).abs() < 1e-6);
        assert!(matches!(diou_loss((1.0, 1.0), (0.0, 2.0)), Err(Error::Contract(_))));
    }

    #[test]
    fn ce_examples() {
        assert!(video_ce_loss(&[20.0, 0.0, 0.0], 0).unwrap() < 1e-8);
        assert!((video_ce_loss(&[0.3; 5], 2).unwrap() - 5f64.ln()).abs() < 1e-12);
        // -ln softmax([1, 2])[0] = ln(1 + e); the 0.313262 value belongs to label 1
        assert!((video_ce_loss(&[1.0, 2.0], 0).unwrap() - 1.313_262).abs() < 1e-6);
        assert!((video_ce_loss(&[1.0, 2.0], 1).unwrap() - 0.313_262).abs() < 1e-6);
        assert!(video_ce_loss(&[1.0], 1).is_err());
    }

    #[test]
    fn tensor_forms_match_scalar_forms() {
        let probs = [0.1, 0.5, 0.9, 0.999_999_9];
        let targets = [1.0, 0.0, 1.0, 0.0];
        let p = Tensor::new(&probs, &cpu()).unwrap();
        let t = Tensor::new(&targets, &cpu()).unwrap();
        let got = focal_elementwise(&p, &t, 0.25, 2.0).unwrap().to_vec1::<f64>().unwrap();
        for i in 0..4 {
            assert!((got[i] - focal_loss(probs[i], targets[i] == 1.0, 0.25, 2.0)).abs() < 1e-12);
        }
        let pred = Tensor::new(&[[0.0, 2.0], [0.0, 10.0]], &cpu()).unwrap();
        let gt = Tensor::new(&[[2.0, 4.0], [5.0, 15.0]], &cpu()).unwrap();
        let d = diou_loss_tensor(&pred, &gt).unwrap().to_vec1::<f64>().unwrap();
        assert!((d[0] - 1.25).abs() < 1e-12);
        assert!((d[1] - (1.0 - 1.0 / 3.0 + 25.0 / 225.0)).abs() < 1e-12);
        let logits = Tensor::new(&[1.0, 2.0], &cpu()).unwrap();
        let ce = video_ce_tensor(&logits, 0).unwrap().to_scalar::<f64>().unwrap();
        assert!((ce - video_ce_loss(&[1.0, 2.0], 0).unwrap()).abs() < 1e-12);
        let big = Tensor::new(&[1000.0f32, 0.0], &cpu()).unwrap();
        assert!(video_ce_tensor(&big, 1).unwrap().to_scalar::<f32>().unwrap().is_finite());
    }

    #[test]
    fn focal_normalizes_by_positive_count() {
        let logits = Tensor::zeros((3, 2), DType::F64, &cpu()).unwrap();
        let targets = Tensor::new(&[[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]], &cpu()).unwrap();
        let w = Tensor::new(&[[1.0], [0.0], [1.0]], &cpu()).unwrap();
        let got = focal_loss_tensor(&logits, &targets, &w, 2, 0.25, 2.0).unwrap().to_scalar::<f64>().unwrap();
        let want = (2.0 * focal_loss(0.5, true, 0.25, 2.0) + 2.0 * focal_loss(0.5, false, 0.25, 2.0)) / 2.0;
        assert!((got - want).abs() < 1e-12);
        let none = focal_loss_tensor(&logits, &targets, &w, 0, 0.25, 2.0).unwrap().to_scalar::<f64>().unwrap();
        assert!((none - 2.0 * want).abs() < 1e-12);
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..100 {
            let x: f64 = rng.random_range(-5.0..5.0);
            let t = rng.random_bool(0.5);
            let gamma = [0.0, 1.0, 2.0, 2.5][case % 4];
            let alpha = rng.random_range(0.1..0.9);
            let f = |x: f64| focal_loss(1.0 / (1.0 + (-x).exp()), t, alpha, gamma);
            let numeric = (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP);
            let var = Var::new(&[x], &cpu()).unwrap();
            let target = Tensor::new(&[if t { 1.0 } else { 0.0 }], &cpu()).unwrap();
            let w = Tensor::new(&[1.0], &cpu()).unwrap();
            let loss = focal_loss_tensor(var.as_tensor(), &target, &w, 1, alpha, gamma).unwrap();
            let grads = loss.backward().unwrap();
            let analytic = grads.get(&var).unwrap().to_vec1::<f64>().unwrap()[0];
            assert!(rel_err(analytic, numeric) < GRAD_REL_TOL, "case {case}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn diou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut checked = 0;
        while checked < 100 {
            let s1: f64 = rng.random_range(0.0..20.0);
            let e1 = s1 + rng.random_range(0.5..10.0);
            let s2: f64 = rng.random_range(0.0..20.0);
            let e2 = s2 + rng.random_range(0.5..10.0);
            // stay off the kinks of min/max/relu
            let edges = [s1, e1, s2, e2];
            let close = (0..4).any(|i| (i + 1..4).any(|j| (edges[i] - edges[j]).abs() < 1e-2));
            if close {
                continue;
            }
            let var = Var::new(&[[s1, e1]], &cpu()).unwrap();
            let gt = Tensor::new(&[[s2, e2]], &cpu()).unwrap();
            let loss = diou_loss_tensor(var.as_tensor(), &gt).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let analytic = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (k, a) in analytic.iter().enumerate() {
                let bump = |h: f64| {
                    let mut p = [s1, e1];
                    p[k] += h;
                    diou_loss((p[0], p[1]), (s2, e2)).unwrap()
                };
                let numeric = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
                assert!(rel_err(*a, numeric) < GRAD_REL_TOL, "{:?} {:?}: {a} vs {numeric}", (s1, e1), (s2, e2));
            }
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn diou_range(s1 in -50.0f64..50.0, l1 in 0.01f64..30.0, s2 in -50.0f64..50.0, l2 in 0.01f64..30.0) {
            let v = diou_loss((s1, s1 + l1), (s2, s2 + l2)).unwrap();
            prop_assert!((0.0..2.0).contains(&v));
            prop_assert_eq!(v == 0.0, s1 == s2 && l1 == l2);
            prop_assert_eq!(diou_loss((s1, s1 + l1), (s1, s1 + l1)).unwrap(), 0.0);
        }

        #[test]
        fn focal_nonnegative_and_decreasing(a in 0.0f64..1.0, b in 0.0f64..1.0, alpha in 0.05f64..0.95, gamma in 0.0f64..4.0, t: bool) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            // as p_t rises the loss cannot rise
            let at = |pt: f64| focal_loss(if t { pt } else { 1.0 - pt }, t, alpha, gamma);
            prop_assert!(at(lo) >= 0.0 && at(hi) >= 0.0);
            prop_assert!(at(hi) <= at(lo) + 1e-12);
        }
    }
}
