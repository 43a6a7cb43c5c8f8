//! Scalar detection losses and the compositions built from them.
//!
//! Every logarithm takes its argument clamped below at [`EPS`], so all losses
//! are finite on their whole domain. Classification is one-vs-all: the ground
//! truth class channel is the positive target and every other channel is a
//! negative target. Background (no object) makes every channel negative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, iou, BoxXYXY};

pub const EPS: f64 = 1e-12;

#[inline]
fn neg_log(x: f64) -> f64 {
    -x.max(EPS).ln()
}

/// Binary cross entropy of probability `p` against a hard label.
pub fn bce(p: f64, positive: bool) -> f64 {
    if positive {
        neg_log(p)
    } else {
        neg_log(1.0 - p)
    }
}

/// Focal loss: `alpha (1-p)^gamma (-log p)` for positives,
/// `(1-alpha) p^gamma (-log(1-p))` for negatives.
pub fn focal(p: f64, positive: bool, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    if positive {
        alpha * (1.0 - p).powf(gamma) * neg_log(p)
    } else {
        (1.0 - alpha) * p.powf(gamma) * neg_log(1.0 - p)
    }
}

/// `-log IoU`, with the IoU clamped to `[EPS, 1]`.
pub fn iou_loss(pred: &BoxXYXY, gt: &BoxXYXY) -> f64 {
    neg_log(iou(pred, gt))
}

pub fn giou_loss(pred: &BoxXYXY, gt: &BoxXYXY) -> f64 {
    1.0 - giou(pred, gt)
}

/// Soft-target BCE between a predicted IoU `q` and the true IoU `t`.
pub fn iou_pred_loss(q: f64, t: f64) -> f64 {
    t * neg_log(q) + (1.0 - t) * neg_log(1.0 - q)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsLoss {
    Bce,
    Focal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocLoss {
    Iou,
    Giou,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Classification loss of the training objective.
    pub cls: ClsLoss,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// Localization loss of the training objective.
    pub loc: LocLoss,
    /// Weight of the localization term inside anchor scores.
    pub lambda_score: f64,
    /// Weight of the localization term in the training objective.
    pub lambda_1: f64,
    /// Weight of the IoU-prediction term in the training objective.
    pub lambda_2: f64,
    /// Multiply the localization loss by the predicted IoU.
    pub aux_weighting: bool,
    /// Score anchors with `cls`/`loc` instead of plain BCE and IoU loss.
    pub score_with_training_losses: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls: ClsLoss::Focal,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            loc: LocLoss::Giou,
            lambda_score: 1.0,
            lambda_1: 1.3,
            lambda_2: 0.5,
            aux_weighting: true,
            score_with_training_losses: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| {
            Err(Error::InvalidConfig(format!("loss.{what} out of range: {v}")))
        };
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return bad("focal_gamma", self.focal_gamma);
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return bad("focal_alpha", self.focal_alpha);
        }
        for (name, v) in [
            ("lambda_score", self.lambda_score),
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, v);
            }
        }
        Ok(())
    }

    fn scoring_kinds(&self) -> (ClsLoss, LocLoss) {
        if self.score_with_training_losses {
            (self.cls, self.loc)
        } else {
            (ClsLoss::Bce, LocLoss::Iou)
        }
    }
}

/// Per-anchor model output: class probabilities, decoded box, predicted IoU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    #[serde(rename = "p")]
    pub probs: Vec<f64>,
    #[serde(rename = "box")]
    pub pred_box: BoxXYXY,
    #[serde(rename = "q")]
    pub iou_pred: f64,
}

impl ModelOutput {
    pub fn binary(p: f64, pred_box: BoxXYXY, iou_pred: f64) -> Self {
        Self {
            probs: vec![p],
            pred_box,
            iou_pred,
        }
    }

    /// Probability of `class`, zero for channels the output does not have.
    pub fn prob(&self, class: usize) -> f64 {
        self.probs.get(class).copied().unwrap_or(0.0)
    }

    /// Highest-probability channel and its probability.
    pub fn top_class(&self) -> Option<(usize, f64)> {
        self.probs
            .iter()
            .copied()
            .enumerate()
            .fold(None, |best, (c, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((c, p)),
            })
    }
}

/// One-vs-all classification loss. `target = None` is background.
pub fn cls_loss(probs: &[f64], target: Option<usize>, kind: ClsLoss, cfg: &LossConfig) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(c, &p)| {
            let positive = target == Some(c);
            match kind {
                ClsLoss::Bce => bce(p, positive),
                ClsLoss::Focal => focal(p, positive, cfg.focal_gamma, cfg.focal_alpha),
            }
        })
        .sum()
}

pub fn loc_loss(pred: &BoxXYXY, gt: &BoxXYXY, kind: LocLoss) -> f64 {
    match kind {
        LocLoss::Iou => iou_loss(pred, gt),
        LocLoss::Giou => giou_loss(pred, gt),
    }
}

/// `L_cls + lambda_score * L_loc`, the negative log of an anchor score.
pub fn score_loss(out: &ModelOutput, gt_box: &BoxXYXY, gt_class: usize, cfg: &LossConfig) -> f64 {
    let (cls_kind, loc_kind) = cfg.scoring_kinds();
    cls_loss(&out.probs, Some(gt_class), cls_kind, cfg)
        + cfg.lambda_score * loc_loss(&out.pred_box, gt_box, loc_kind)
}

/// Anchor score `exp(-(L_cls + lambda_score * L_loc))`, in `(0, 1]`.
pub fn anchor_score(out: &ModelOutput, gt_box: &BoxXYXY, gt_class: usize, cfg: &LossConfig) -> f64 {
    (-score_loss(out, gt_box, gt_class, cfg)).exp()
}

/// Classification loss of an anchor treated as background.
pub fn background_loss(out: &ModelOutput, cfg: &LossConfig) -> f64 {
    let (cls_kind, _) = cfg.scoring_kinds();
    cls_loss(&out.probs, None, cls_kind, cfg)
}

/// Training objective of a positive anchor:
/// `L_cls + lambda_1 * L_loc + lambda_2 * L_iou_pred`.
pub fn total_loss(out: &ModelOutput, gt_box: &BoxXYXY, gt_class: usize, cfg: &LossConfig) -> f64 {
    let cls = cls_loss(&out.probs, Some(gt_class), cfg.cls, cfg);
    let mut loc = loc_loss(&out.pred_box, gt_box, cfg.loc);
    if cfg.aux_weighting {
        loc *= out.iou_pred;
    }
    let pred = iou_pred_loss(out.iou_pred, iou(&out.pred_box, gt_box));
    cls + cfg.lambda_1 * loc + cfg.lambda_2 * pred
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn bce_examples() {
        assert_eq!(bce(1.0, true), 0.0);
        assert!((bce(0.5, true) - LN2).abs() < 1e-12);
        assert!((bce(0.9, false) - std::f64::consts::LN_10).abs() < 1e-6);
        assert!(bce(0.0, true).is_finite());
    }

    #[test]
    fn focal_examples() {
        assert_eq!(focal(1.0, true, 2.0, 0.25), 0.0);
        assert!((focal(0.5, true, 2.0, 0.25) - 0.043322).abs() < 1e-6);
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            for y in [false, true] {
                assert!((focal(p, y, 0.0, 0.5) - 0.5 * bce(p, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn iou_loss_examples() {
        let g = BoxXYXY::new(0., 0., 2., 2.);
        assert_eq!(iou_loss(&g, &g), 0.0);
        let half = BoxXYXY::new(0., 0., 2., 1.);
        assert!((iou_loss(&half, &g) - LN2).abs() < 1e-12);
        let v = iou_loss(&BoxXYXY::new(1., 1., 3., 3.), &g);
        assert!((v - 1.945910).abs() < 1e-6);
        let far = BoxXYXY::new(10., 10., 11., 11.);
        assert!((iou_loss(&far, &g) + EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn iou_pred_loss_examples() {
        assert_eq!(iou_pred_loss(1.0, 1.0), 0.0);
        assert!((iou_pred_loss(0.5, 0.5) - LN2).abs() < 1e-12);
        assert!((iou_pred_loss(0.8, 0.6) - 0.777661).abs() < 1e-6);
    }

    #[test]
    fn iou_pred_loss_minimized_at_target() {
        for ti in 0..=20 {
            let t = ti as f64 / 20.0;
            let (best_q, _) = (0..=10_000)
                .map(|i| i as f64 / 10_000.0)
                .map(|q| (q, iou_pred_loss(q, t)))
                .fold((f64::NAN, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            assert!((best_q - t).abs() <= 1e-4, "t={t} argmin={best_q}");
        }
    }

    #[test]
    fn monotone_in_quality() {
        let mut prev = f64::INFINITY;
        for i in 1..=1000 {
            let v = bce(i as f64 / 1000.0, true);
            assert!(v < prev);
            prev = v;
        }
        let g = BoxXYXY::new(0., 0., 100., 10.);
        let mut prev = f64::INFINITY;
        for w in 1..=100 {
            let v = iou_loss(&BoxXYXY::new(0., 0., w as f64, 10.), &g);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn perfect_output_has_zero_total_loss() {
        let g = BoxXYXY::new(5., 5., 50., 40.);
        let cfg = LossConfig::default();
        assert_eq!(cfg.lambda_1, 1.3);
        assert_eq!(cfg.lambda_2, 0.5);
        let out = ModelOutput::binary(1.0, g, 1.0);
        assert_eq!(total_loss(&out, &g, 0, &cfg), 0.0);
        let multi = ModelOutput {
            probs: vec![0.0, 1.0, 0.0],
            pred_box: g,
            iou_pred: 1.0,
        };
        assert_eq!(total_loss(&multi, &g, 1, &cfg), 0.0);
        assert_eq!(anchor_score(&multi, &g, 1, &cfg), 1.0);
    }

    #[test]
    fn unweighted_total_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LossConfig {
            aux_weighting: false,
            ..LossConfig::default()
        };
        for _ in 0..100 {
            let g = BoxXYXY::new(0., 0., rng.random_range(5.0..50.0), rng.random_range(5.0..50.0));
            let pred = g.translate(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let p: f64 = rng.random_range(0.0..1.0);
            let q: f64 = rng.random_range(0.0..1.0);
            let out = ModelOutput::binary(p, pred, q);
            let direct = cfg.focal_alpha * (1.0 - p).powi(2) * -p.ln()
                + 1.3 * (1.0 - giou(&pred, &g))
                + 0.5 * {
                    let t = iou(&pred, &g);
                    -t * q.ln() - (1.0 - t) * (1.0 - q).ln()
                };
            assert!((total_loss(&out, &g, 0, &cfg) - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn aux_weighting_scales_localization() {
        let g = BoxXYXY::new(0., 0., 10., 10.);
        let out = ModelOutput::binary(0.7, BoxXYXY::new(1., 0., 11., 10.), 0.4);
        let on = LossConfig::default();
        let off = LossConfig { aux_weighting: false, ..on.clone() };
        let loc = giou_loss(&out.pred_box, &g);
        let diff = total_loss(&out, &g, 0, &off) - total_loss(&out, &g, 0, &on);
        assert!((diff - 1.3 * loc * (1.0 - 0.4)).abs() < 1e-12);
    }

    #[test]
    fn anchor_score_is_product_form() {
        let g = BoxXYXY::new(0., 0., 2., 2.);
        let half = BoxXYXY::new(0., 0., 2., 1.);
        let out = ModelOutput::binary(0.5, half, 0.5);
        let mut cfg = LossConfig::default();
        assert!((anchor_score(&out, &g, 0, &cfg) - 0.25).abs() < 1e-12);
        cfg.lambda_score = 2.0;
        assert!((anchor_score(&out, &g, 0, &cfg) - 0.125).abs() < 1e-12);
        assert!((background_loss(&out, &cfg) - LN2).abs() < 1e-12);
    }

    #[test]
    fn scoring_can_use_training_losses() {
        let g = BoxXYXY::new(0., 0., 2., 2.);
        let out = ModelOutput::binary(0.5, BoxXYXY::new(0., 0., 2., 1.), 0.5);
        let cfg = LossConfig {
            score_with_training_losses: true,
            ..LossConfig::default()
        };
        let expected = focal(0.5, true, 2.0, 0.25) + giou_loss(&out.pred_box, &g);
        assert!((score_loss(&out, &g, 0, &cfg) - expected).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        for bad in [
            LossConfig { focal_gamma: -1.0, ..Default::default() },
            LossConfig { focal_alpha: 1.0, ..Default::default() },
            LossConfig { lambda_2: 0.0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    proptest! {
        #[test]
        fn losses_finite_and_nonnegative(p in 0.0f64..=1.0, q in 0.0f64..=1.0, y: bool,
                                        gamma in 0.0f64..5.0, alpha in 0.01f64..0.99) {
            for v in [bce(p, y), focal(p, y, gamma, alpha), iou_pred_loss(q, p)] {
                prop_assert!(v.is_finite());
                prop_assert!(v >= 0.0);
            }
        }
    }
}
