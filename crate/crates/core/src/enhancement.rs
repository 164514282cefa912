//! Lesion-contrast enhancement from (input, synthesis) pairs and the
//! downstream segmentation protocol.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::dice_score;
use crate::grid::{ImageGrid, LesionMask, Sample};
use crate::networks::{Generator, Mode};
use crate::nn::ParamSet;
use crate::segfit::{mean, SegFitConfig, SegFitter};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignMode {
    /// `(1 - alpha) * x_p + alpha * x_s`: moves toward the synthesis.
    /// Evaluated from the nearer endpoint, so `alpha = 0`, `alpha = 1` and
    /// `x_s == x_p` are all exact.
    TowardSynthesis,
    /// `x_p + alpha * (x_p - x_s)`: adds the removed pathology back on top.
    #[default]
    PathologicalResidue,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhanceConfig {
    pub alpha_grid: Vec<f64>,
    pub sign_mode: SignMode,
    pub clamp_output: bool,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        EnhanceConfig {
            alpha_grid: vec![0.0, 0.3, 0.5, 0.7, 1.0],
            sign_mode: SignMode::PathologicalResidue,
            clamp_output: true,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha_grid.is_empty() {
            return Err(Error::InvalidConfig("alpha grid is empty".into()));
        }
        if let Some(a) = self.alpha_grid.iter().find(|a| !(**a >= 0.0 && a.is_finite())) {
            return Err(Error::InvalidConfig(format!("alpha {a} must be finite and >= 0")));
        }
        Ok(())
    }
}

/// Unclamped enhancement values.
pub fn enhance_raw(x_p: &ImageGrid, x_s: &ImageGrid, alpha: f64, mode: SignMode) -> Result<Vec<f64>> {
    x_s.ensure_same_shape(x_p.shape())?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("alpha {alpha} must be finite and >= 0")));
    }
    Ok(x_p
        .pixels()
        .iter()
        .zip(x_s.pixels())
        .map(|(&p, &s)| match mode {
            SignMode::TowardSynthesis if alpha <= 0.5 => p + alpha * (s - p),
            SignMode::TowardSynthesis => s + (1.0 - alpha) * (p - s),
            SignMode::PathologicalResidue => p + alpha * (p - s),
        })
        .collect())
}

/// Enhanced image. Without clamping, values leaving `[0, 1]` are an error
/// since they cannot be carried by an [`ImageGrid`].
pub fn enhance(x_p: &ImageGrid, x_s: &ImageGrid, alpha: f64, cfg: &EnhanceConfig) -> Result<ImageGrid> {
    let raw = enhance_raw(x_p, x_s, alpha, cfg.sign_mode)?;
    if cfg.clamp_output {
        ImageGrid::from_clamped(x_p.height(), x_p.width(), raw)
    } else {
        ImageGrid::new(x_p.height(), x_p.width(), raw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamResult {
    pub alpha: f64,
    pub dice: Vec<f64>,
    pub mean_dice: f64,
    /// `mean_dice` minus the alpha = 0 arm, when that arm was run.
    pub delta_vs_baseline: Option<f64>,
    pub seed: u64,
}

/// Synthesizes and enhances every sample at `alpha`.
pub fn enhance_samples(
    gen: &Generator,
    g: &ParamSet,
    data: &[Sample],
    alpha: f64,
    cfg: &EnhanceConfig,
    batch_size: usize,
) -> Result<Vec<ImageGrid>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let images: Vec<ImageGrid> = chunk.iter().map(|s| s.image.clone()).collect();
        if alpha == 0.0 {
            out.extend(images);
            continue;
        }
        for (x_s, x_p) in gen.forward(g, &images, Mode::Eval)?.iter().zip(&images) {
            out.push(enhance(x_p, x_s, alpha, cfg)?);
        }
    }
    Ok(out)
}

/// Trains a fresh segmentor on enhanced training images and scores it on
/// enhanced test images. At `alpha = 0` this is plain training on the raw
/// images.
pub fn run_downstream(
    train: &[Sample],
    test: &[Sample],
    gen: &Generator,
    g: &ParamSet,
    alpha: f64,
    enhance_cfg: &EnhanceConfig,
    seg_cfg: &SegFitConfig,
) -> Result<DownstreamResult> {
    enhance_cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidInput("downstream needs train and test samples".into()));
    }
    let bs = seg_cfg.batch_size;
    let train_x = enhance_samples(gen, g, train, alpha, enhance_cfg, bs)?;
    let train_y: Vec<LesionMask> = train.iter().map(|s| s.mask.clone()).collect();
    let test_x = enhance_samples(gen, g, test, alpha, enhance_cfg, bs)?;
    let mut fit = SegFitter::new(seg_cfg)?;
    for e in 0..seg_cfg.epochs {
        fit.train_epoch(&train_x, &train_y, e)?;
    }
    let dice = fit
        .predict(&test_x)?
        .iter()
        .zip(test)
        .map(|(p, s)| dice_score(p, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(DownstreamResult {
        alpha,
        mean_dice: mean(&dice),
        dice,
        delta_vs_baseline: None,
        seed: seg_cfg.seed,
    })
}

/// Runs every alpha in the grid and fills in deltas against alpha = 0.
pub fn run_downstream_grid(
    train: &[Sample],
    test: &[Sample],
    gen: &Generator,
    g: &ParamSet,
    enhance_cfg: &EnhanceConfig,
    seg_cfg: &SegFitConfig,
) -> Result<Vec<DownstreamResult>> {
    enhance_cfg.validate()?;
    let mut results = enhance_cfg
        .alpha_grid
        .iter()
        .map(|&a| run_downstream(train, test, gen, g, a, enhance_cfg, seg_cfg))
        .collect::<Result<Vec<_>>>()?;
    if let Some(base) = results.iter().find(|r| r.alpha == 0.0).map(|r| r.mean_dice) {
        for r in &mut results {
            r.delta_vs_baseline = Some(r.mean_dice - base);
        }
    }
    Ok(results)
}
