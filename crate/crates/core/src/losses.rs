//! Training objectives for the segmentor and the generator.
//!
//! Every loss is a mean over pixels. Cross-entropy terms clamp
//! probabilities to `[PROB_FLOOR, 1 - PROB_FLOOR]` before the log; the
//! gradient is zero where the clamp is active.
//!
//! Each loss has a single-image form operating on the grid types and a
//! batched form over network output tensors that also returns the
//! gradient with respect to that tensor. Both share one kernel, so values
//! agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LesionMask, ProbMap, WeightMap, MIN_WEIGHT};
use crate::nn::Tensor;

pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    /// Whether a gradient w.r.t. network outputs accompanies the value.
    pub has_grad: bool,
}

impl LossValue {
    fn new(value: f64, has_grad: bool) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "loss".into(),
                step: 0,
            });
        }
        Ok(LossValue { value, has_grad })
    }
}

/// How pixels labelled "no tumor" enter the difference-aware loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WceBackground {
    /// Background pixels contribute ordinary cross-entropy with weight 1.
    #[default]
    TwoClass,
    /// Only tumor-labelled pixels contribute (the formula read literally).
    TumorOnly,
}

/// Sum of `w(i) * -ln p_label(i)` over one image; optionally accumulates
/// `d/dp` (unnormalized) into `grad_normal` / `grad_tumor`.
fn ce_sum(
    normal: &[f64],
    tumor: &[f64],
    labels: &[u8],
    weights: Option<&[f64]>,
    background: WceBackground,
    scale: f64,
    mut grad: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let mut sum = 0.0;
    for i in 0..labels.len() {
        let label = labels[i];
        let w = match (label, background) {
            (1, _) => weights.map_or(1.0, |w| w[i]),
            (_, WceBackground::TwoClass) => 1.0,
            (_, WceBackground::TumorOnly) => 0.0,
        };
        if w == 0.0 {
            continue;
        }
        let p = if label == 1 { tumor[i] } else { normal[i] };
        let pc = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        sum += w * -pc.ln();
        if let Some((gn, gt)) = grad.as_mut() {
            if p > PROB_FLOOR && p < 1.0 - PROB_FLOOR {
                let d = -w * scale / p;
                if label == 1 {
                    gt[i] += d;
                } else {
                    gn[i] += d;
                }
            }
        }
    }
    sum
}

fn check_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(a, b));
    }
    Ok(())
}

/// Segmentor cross-entropy against the lesion labels.
pub fn seg_ce_loss(pred: &ProbMap, target: &LesionMask) -> Result<LossValue> {
    check_shape(pred.shape(), target.shape())?;
    let n = target.pixels().len() as f64;
    let s = ce_sum(
        pred.normal(),
        pred.tumor(),
        target.pixels(),
        None,
        WceBackground::TwoClass,
        1.0,
        None,
    );
    LossValue::new(s / n, true)
}

/// Cross-entropy toward "no tumor" everywhere.
pub fn adv_fool_loss(pred: &ProbMap) -> Result<LossValue> {
    let (h, w) = pred.shape();
    seg_ce_loss(pred, &LesionMask::zeros(h, w))
}

/// Mean squared difference between the input and its synthesis.
pub fn residual_loss(x_p: &ImageGrid, x_s: &ImageGrid) -> Result<LossValue> {
    check_shape(x_p.shape(), x_s.shape())?;
    let n = x_p.len() as f64;
    let s: f64 = x_p
        .pixels()
        .iter()
        .zip(x_s.pixels())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    LossValue::new(s / n, true)
}

/// `ls2 + lambda * lr`.
pub fn generator_total(ls2: LossValue, lr: LossValue, lambda: f64) -> Result<LossValue> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be > 0, got {lambda}")));
    }
    LossValue::new(ls2.value + lambda * lr.value, ls2.has_grad && lr.has_grad)
}

/// Weight map from the min-max normalized absolute difference `m`:
/// `w = max(1 - m, 0.1)`. A flat difference map gives `m = 0`.
pub fn difference_weight_map(x_p: &ImageGrid, x_s: &ImageGrid) -> Result<WeightMap> {
    check_shape(x_p.shape(), x_s.shape())?;
    let diff: Vec<f64> = x_p
        .pixels()
        .iter()
        .zip(x_s.pixels())
        .map(|(a, b)| (a - b).abs())
        .collect();
    let (h, w) = x_p.shape();
    WeightMap::new(h, w, weights_from_diff(&diff))
}

fn weights_from_diff(diff: &[f64]) -> Vec<f64> {
    let lo = diff.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    diff.iter()
        .map(|d| {
            let m = if range > 0.0 { (d - lo) / range } else { 0.0 };
            let w = 1.0 - m;
            if w < MIN_WEIGHT {
                MIN_WEIGHT
            } else {
                w
            }
        })
        .collect()
}

/// Difference-aware weighted cross-entropy (two-class form).
pub fn difference_aware_loss(
    pred: &ProbMap,
    target: &LesionMask,
    w: &WeightMap,
) -> Result<LossValue> {
    difference_aware_loss_with(pred, target, w, WceBackground::TwoClass)
}

pub fn difference_aware_loss_with(
    pred: &ProbMap,
    target: &LesionMask,
    w: &WeightMap,
    background: WceBackground,
) -> Result<LossValue> {
    check_shape(pred.shape(), target.shape())?;
    check_shape(pred.shape(), w.shape())?;
    let n = target.pixels().len() as f64;
    let s = ce_sum(
        pred.normal(),
        pred.tumor(),
        target.pixels(),
        Some(w.weights()),
        background,
        1.0,
        None,
    );
    LossValue::new(s / n, true)
}

/// Batched (optionally weighted) cross-entropy over a `[N, 2, H, W]`
/// probability tensor. Returns the mean loss and `dL/dprobs`.
pub fn ce_batch(
    probs: &Tensor,
    targets: &[&LesionMask],
    weights: Option<&[WeightMap]>,
    background: WceBackground,
) -> Result<(f64, Tensor)> {
    let [n, c, h, w] = probs.shape();
    if c != 2 || n != targets.len() {
        return Err(Error::shape((targets.len(), 2), (n, c)));
    }
    if let Some(ws) = weights {
        if ws.len() != n {
            return Err(Error::shape(n, ws.len()));
        }
    }
    let total = (n * h * w) as f64;
    let scale = 1.0 / total;
    let mut grad = Tensor::zeros(probs.shape());
    let mut sum = 0.0;
    let hw = h * w;
    for (s, t) in targets.iter().enumerate() {
        check_shape((h, w), t.shape())?;
        let wmap = match weights {
            Some(ws) => {
                check_shape((h, w), ws[s].shape())?;
                Some(ws[s].weights())
            }
            None => None,
        };
        let (gn, gt) = grad.data_mut()[s * 2 * hw..(s + 1) * 2 * hw].split_at_mut(hw);
        sum += ce_sum(
            probs.plane(s, 0),
            probs.plane(s, 1),
            t.pixels(),
            wmap,
            background,
            scale,
            Some((gn, gt)),
        );
    }
    let value = sum / total;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "cross-entropy".into(),
            step: 0,
        });
    }
    Ok((value, grad))
}

/// Batched mean squared error of `x_s` against `x_p`, with `dL/dx_s`.
pub fn residual_batch(x_s: &Tensor, x_p: &Tensor) -> Result<(f64, Tensor)> {
    if x_s.shape() != x_p.shape() {
        return Err(Error::shape(x_p.shape(), x_s.shape()));
    }
    let n = x_s.len() as f64;
    let mut sum = 0.0;
    let grad: Vec<f64> = x_s
        .data()
        .iter()
        .zip(x_p.data())
        .map(|(s, p)| {
            let d = s - p;
            sum += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((sum / n, Tensor::from_vec(x_s.shape(), grad)))
}

/// Per-image weight maps from batched inputs and syntheses.
pub fn weight_maps_batch(x_p: &Tensor, x_s: &Tensor) -> Result<Vec<WeightMap>> {
    if x_s.shape() != x_p.shape() {
        return Err(Error::shape(x_p.shape(), x_s.shape()));
    }
    (0..x_p.n())
        .map(|s| {
            let diff: Vec<f64> = x_p
                .plane(s, 0)
                .iter()
                .zip(x_s.plane(s, 0))
                .map(|(a, b)| (a - b).abs())
                .collect();
            WeightMap::new(x_p.h(), x_p.w(), weights_from_diff(&diff))
        })
        .collect()
}
