//! Tracking loss: penalty-weighted focal score loss plus box terms.
//!
//! The score map trains against a Gaussian-bumped heatmap with a single
//! exact positive: positives use (1-p)^2 log p, negatives are damped by
//! (1-y)^4. Box terms are teacher-forced: the predicted offsets and sizes
//! are read at the ground-truth cell and compared with a generalized IoU
//! term and a plain L1 term. Total = focal + 2 * giou + 5 * l1.

use crate::error::{Error, Result};
use crate::head::BoxCxCyWh;
use crate::tensor::DenseTensor;

pub const GIOU_EPS: f64 = 1e-9;
pub const FOCAL_ALPHA: f64 = 2.0;
pub const FOCAL_BETA: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub focal: f64,
    pub giou: f64,
    pub l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { focal: 1.0, giou: 2.0, l1: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub focal: f64,
    pub giou: f64,
    pub l1: f64,
    pub total: f64,
}

pub fn combine(focal: f64, giou: f64, l1: f64, w: &LossWeights) -> f64 {
    w.focal * focal + w.giou * giou + w.l1 * l1
}

/// Numerically stable log(sigmoid(x)) = -softplus(-x).
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Focal score loss evaluated from logits; `target` is the heatmap with
/// exact 1.0 at positives. Normalized by the positive count.
pub fn focal_from_logits(logits: &DenseTensor, target: &DenseTensor) -> Result<f64> {
    if logits.shape != target.shape {
        return Err(Error::Shape(format!(
            "focal: logits {:?} vs target {:?}",
            logits.shape, target.shape
        )));
    }
    let mut pos = 0usize;
    let mut sum = 0.0;
    for (l, y) in logits.data.iter().zip(&target.data) {
        let p = crate::neuron::sigmoid(*l);
        let log_p = log_sigmoid(*l);
        let log_1p = log_sigmoid(-*l);
        if *y == 1.0 {
            pos += 1;
            sum -= (1.0 - p).powf(FOCAL_ALPHA) * log_p;
        } else {
            sum -= (1.0 - y).powf(FOCAL_BETA) * p.powf(FOCAL_ALPHA) * log_1p;
        }
    }
    Ok(sum / pos.max(1) as f64)
}

/// Generalized IoU of two center/size boxes.
pub fn giou(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    let iou = inter / (union + GIOU_EPS);
    let cw = ax1.max(bx1) - ax0.min(bx0);
    let ch = ay1.max(by1) - ay0.min(by0);
    let hull = cw * ch;
    iou - (hull - union) / (hull + GIOU_EPS)
}

/// 1 - GIoU, in [0, 2).
pub fn giou_loss(a: &BoxCxCyWh, b: &BoxCxCyWh) -> f64 {
    1.0 - giou(a, b)
}

/// Mean absolute difference over (offset_x, offset_y, w, h).
pub fn l1_loss(pred: &[f64; 4], target: &[f64; 4]) -> f64 {
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / 4.0
}

/// Teacher-forced loss: score logits against the target heatmap, box terms
/// read at the ground-truth cell of the offset/size maps (post-sigmoid).
pub fn track_loss(
    score_logits: &DenseTensor,
    offset: &DenseTensor,
    size: &DenseTensor,
    target: &crate::head::TargetMaps,
    weights: &LossWeights,
) -> Result<LossReport> {
    let n = score_logits.shape[0];
    if score_logits.shape != [n, n] || offset.shape != [2, n, n] || size.shape != [2, n, n] {
        return Err(Error::Shape("loss expects [n,n] logits and [2,n,n] box maps".into()));
    }
    let focal = focal_from_logits(score_logits, &target.heatmap)?;
    let (r, c) = (target.row, target.col);
    let pred_off = [offset.data[r * n + c], offset.data[n * n + r * n + c]];
    let pred_size = [size.data[r * n + c], size.data[n * n + r * n + c]];
    let nf = n as f64;
    let pred_box = BoxCxCyWh {
        cx: (c as f64 + pred_off[0]) / nf,
        cy: (r as f64 + pred_off[1]) / nf,
        w: pred_size[0],
        h: pred_size[1],
    };
    let gt_box = crate::head::decode_targets(target);
    let g = giou_loss(&pred_box, &gt_box);
    let l = l1_loss(
        &[pred_off[0], pred_off[1], pred_size[0], pred_size[1]],
        &[target.offset[0], target.offset[1], target.size[0], target.size[1]],
    );
    Ok(LossReport { focal, giou: g, l1: l, total: combine(focal, g, l, weights) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::encode_targets;

    #[test]
    fn unit_components_combine_to_eight() {
        assert_eq!(combine(1.0, 1.0, 1.0, &LossWeights::default()), 8.0);
    }

    #[test]
    fn giou_of_identical_boxes_is_one() {
        let b = BoxCxCyWh { cx: 0.4, cy: 0.6, w: 0.2, h: 0.3 };
        // the stabilizing epsilon in the ratio denominators caps identity
        // precision around 1e-8 for small boxes
        assert!((giou(&b, &b) - 1.0).abs() < 1e-7);
        assert!(giou_loss(&b, &b) < 1e-7);
    }

    // Corner-touching squares: I = 0, U = 0.5, hull = 1.
    //   giou = 0 - (1 - 0.5)/1 = -0.5, loss = 1.5
    #[test]
    fn giou_hand_case_touching_corners() {
        let a = BoxCxCyWh { cx: 0.25, cy: 0.25, w: 0.5, h: 0.5 };
        let b = BoxCxCyWh { cx: 0.75, cy: 0.75, w: 0.5, h: 0.5 };
        assert!((giou(&a, &b) + 0.5).abs() < 1e-9);
        assert!((giou_loss(&a, &b) - 1.5).abs() < 1e-9);
    }

    // Half-overlapping unit-height strips: A = (0,0)-(0.5,1), B = (0.25,0)-(0.75,1).
    //   I = 0.25, U = 0.75, iou = 1/3; hull = 0.75 so the hull term vanishes.
    #[test]
    fn giou_hand_case_overlapping_strips() {
        let a = BoxCxCyWh { cx: 0.25, cy: 0.5, w: 0.5, h: 1.0 };
        let b = BoxCxCyWh { cx: 0.5, cy: 0.5, w: 0.5, h: 1.0 };
        assert!((giou(&a, &b) - 1.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn giou_is_symmetric_and_bounded() {
        let cases = [
            (BoxCxCyWh { cx: 0.3, cy: 0.3, w: 0.2, h: 0.2 }, BoxCxCyWh { cx: 0.7, cy: 0.7, w: 0.1, h: 0.4 }),
            (BoxCxCyWh { cx: 0.5, cy: 0.5, w: 0.9, h: 0.9 }, BoxCxCyWh { cx: 0.5, cy: 0.5, w: 0.1, h: 0.1 }),
            (BoxCxCyWh { cx: 0.1, cy: 0.9, w: 0.05, h: 0.05 }, BoxCxCyWh { cx: 0.9, cy: 0.1, w: 0.05, h: 0.05 }),
        ];
        for (a, b) in cases {
            assert!((giou(&a, &b) - giou(&b, &a)).abs() < 1e-12);
            let l = giou_loss(&a, &b);
            assert!((0.0..2.0).contains(&l), "loss {l} out of range");
        }
    }

    // Single positive cell with p = 0.5: loss = -(1-0.5)^2 ln 0.5 = 0.25 ln 2.
    #[test]
    fn focal_hand_case_single_positive() {
        let logits = DenseTensor::new(vec![1, 1], vec![0.0]).unwrap();
        let target = DenseTensor::new(vec![1, 1], vec![1.0]).unwrap();
        let f = focal_from_logits(&logits, &target).unwrap();
        assert!((f - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_rewards_confident_correct_predictions() {
        let target = DenseTensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let good = DenseTensor::new(vec![2, 2], vec![8.0, -8.0, -8.0, -8.0]).unwrap();
        let bad = DenseTensor::new(vec![2, 2], vec![-2.0, 2.0, 2.0, 2.0]).unwrap();
        let fg = focal_from_logits(&good, &target).unwrap();
        let fb = focal_from_logits(&bad, &target).unwrap();
        assert!(fg < 1e-3);
        assert!(fb > 10.0 * fg);
    }

    #[test]
    fn focal_negative_damping_follows_the_heatmap() {
        // A near-positive cell (y = 0.9) is damped by (1-y)^4 = 1e-4 relative
        // to a clean negative at the same prediction.
        let logits = DenseTensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let t_soft = DenseTensor::new(vec![1, 2], vec![0.9, 0.0]).unwrap();
        let f = focal_from_logits(&logits, &t_soft).unwrap();
        let p = crate::neuron::sigmoid(1.0);
        let base = -p * p * log_sigmoid(-1.0);
        let expect = 0.1f64.powi(4) * base + base;
        assert!((f - expect).abs() < 1e-12);
    }

    #[test]
    fn l1_hand_case() {
        let l = l1_loss(&[0.5, 0.5, 0.2, 0.2], &[0.25, 0.75, 0.2, 0.4]);
        assert!((l - (0.25 + 0.25 + 0.0 + 0.2) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_has_near_zero_total() {
        let b = BoxCxCyWh { cx: 0.55, cy: 0.4, w: 0.25, h: 0.3 };
        let t = encode_targets(&b, 8).unwrap();
        let n = 8;
        // logits strongly match the heatmap; boxes read exactly the targets
        let logits = DenseTensor::new(
            vec![n, n],
            t.heatmap.data.iter().map(|y| if *y == 1.0 { 12.0 } else { -12.0 }).collect(),
        )
        .unwrap();
        let mut off = vec![0.0; 2 * n * n];
        let mut sz = vec![0.0; 2 * n * n];
        off[t.row * n + t.col] = t.offset[0];
        off[n * n + t.row * n + t.col] = t.offset[1];
        sz[t.row * n + t.col] = t.size[0];
        sz[n * n + t.row * n + t.col] = t.size[1];
        let offset = DenseTensor::new(vec![2, n, n], off).unwrap();
        let size = DenseTensor::new(vec![2, n, n], sz).unwrap();
        let r = track_loss(&logits, &offset, &size, &t, &LossWeights::default()).unwrap();
        assert!(r.giou < 1e-7);
        assert!(r.l1 < 1e-12);
        assert!(r.total < 0.01, "total {}", r.total);
    }

    #[test]
    fn teacher_forcing_reads_the_ground_truth_cell() {
        // Put garbage everywhere except the GT cell; loss must not see it.
        let b = BoxCxCyWh { cx: 0.55, cy: 0.4, w: 0.25, h: 0.3 };
        let t = encode_targets(&b, 4).unwrap();
        let n = 4;
        let logits = DenseTensor::zeros(vec![n, n]);
        let mut off = vec![0.77; 2 * n * n];
        let mut sz = vec![0.13; 2 * n * n];
        off[t.row * n + t.col] = t.offset[0];
        off[n * n + t.row * n + t.col] = t.offset[1];
        sz[t.row * n + t.col] = t.size[0];
        sz[n * n + t.row * n + t.col] = t.size[1];
        let offset = DenseTensor::new(vec![2, n, n], off).unwrap();
        let size = DenseTensor::new(vec![2, n, n], sz).unwrap();
        let r = track_loss(&logits, &offset, &size, &t, &LossWeights::default()).unwrap();
        assert!(r.l1 < 1e-12);
        assert!(r.giou < 1e-7);
    }
}
