//! Masked identity metrics, dice, the A-Dice healthiness harness and
//! counterfeit probes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LesionMask, Sample};
use crate::networks::{Generator, Mode, Segmentor, SegmentorSpec};
use crate::nn::{OptimizerKind, ParamSet};
use crate::segfit::{mean, SegFitConfig, SegFitter};

pub const DICE_EPS: f64 = 1e-6;
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const NOISE_STD: f64 = 0.2;

pub fn dice_score(pred: &LesionMask, gt: &LesionMask) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(gt.shape(), pred.shape()));
    }
    let inter = pred
        .pixels()
        .iter()
        .zip(gt.pixels())
        .filter(|(a, b)| **a == 1 && **b == 1)
        .count() as f64;
    Ok((2.0 * inter + DICE_EPS) / (pred.count() as f64 + gt.count() as f64 + DICE_EPS))
}

fn masked(x: &ImageGrid, y: &LesionMask) -> Vec<f64> {
    x.pixels()
        .iter()
        .zip(y.pixels())
        .map(|(v, m)| if *m == 1 { 0.0 } else { *v })
        .collect()
}

fn check_masked_pair(x_p: &ImageGrid, x_s: &ImageGrid, y: &LesionMask) -> Result<()> {
    x_s.ensure_same_shape(x_p.shape())?;
    if y.shape() != x_p.shape() {
        return Err(Error::shape(x_p.shape(), y.shape()));
    }
    if y.is_all_ones() {
        return Err(Error::UndefinedMetric("mask covers the whole image".into()));
    }
    Ok(())
}

/// PSNR (peak 1.0) between the lesion-zeroed images, over all pixels.
/// Zero error reports [`PSNR_CAP`].
pub fn mpsnr(x_p: &ImageGrid, x_s: &ImageGrid, y: &LesionMask) -> Result<f64> {
    check_masked_pair(x_p, x_s, y)?;
    let a = masked(x_p, y);
    let b = masked(x_s, y);
    let mse = a.iter().zip(&b).map(|(p, s)| (p - s) * (p - s)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Single-scale SSIM of the lesion-zeroed images.
pub fn mssim(x_p: &ImageGrid, x_s: &ImageGrid, y: &LesionMask) -> Result<f64> {
    check_masked_pair(x_p, x_s, y)?;
    let (h, w) = x_p.shape();
    ssim(&masked(x_p, y), &masked(x_s, y), h, w)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering with the normalized Gaussian window.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid window positions, dynamic range 1.
pub fn ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape(h * w, a.len().min(b.len())));
    }
    let k = gaussian_window();
    let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(x, y)| x * y).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean absolute error against the healthy reference inside the lesion.
pub fn lesion_error(x: &ImageGrid, healthy: &ImageGrid, y: &LesionMask) -> Result<f64> {
    x.ensure_same_shape(healthy.shape())?;
    let n = y.count();
    if n == 0 {
        return Err(Error::UndefinedMetric("mask has no lesion pixels".into()));
    }
    let s: f64 = (0..y.pixels().len())
        .filter(|&i| y.is_lesion(i))
        .map(|i| (x.pixels()[i] - healthy.pixels()[i]).abs())
        .sum();
    Ok(s / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ADiceConfig {
    pub eval_lr: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub repeats: usize,
    pub seeds: Vec<u64>,
    pub segmentor: SegmentorSpec,
}

impl Default for ADiceConfig {
    fn default() -> Self {
        ADiceConfig {
            eval_lr: 0.1,
            epochs: 20,
            optimizer: OptimizerKind::default(),
            batch_size: 8,
            repeats: 3,
            seeds: vec![0, 1, 2],
            segmentor: SegmentorSpec::default(),
        }
    }
}

impl ADiceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eval_lr > 0.0) {
            return Err(Error::InvalidConfig(format!("eval_lr must be > 0, got {}", self.eval_lr)));
        }
        if self.epochs == 0 || self.repeats == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs, repeats and batch size must be >= 1".into()));
        }
        if self.seeds.len() < self.repeats {
            return Err(Error::InvalidConfig(format!(
                "{} repeats need as many seeds, got {}",
                self.repeats,
                self.seeds.len()
            )));
        }
        Ok(())
    }

    fn fit_config(&self, seed: u64) -> SegFitConfig {
        SegFitConfig {
            segmentor: self.segmentor.clone(),
            optimizer: self.optimizer,
            lr: self.eval_lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ADiceResult {
    /// Mean over repeats.
    pub adice: f64,
    pub per_repeat: Vec<f64>,
    /// Per repeat, the training-set dice after each epoch.
    pub curves: Vec<Vec<f64>>,
}

impl ADiceResult {
    pub fn spread(&self) -> f64 {
        let max = self.per_repeat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.per_repeat.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Mean of a dice curve.
pub fn adice_from_curve(curve: &[f64]) -> Result<f64> {
    if curve.is_empty() {
        return Err(Error::InvalidInput("empty dice curve".into()));
    }
    Ok(mean(curve))
}

/// Fits a fresh segmentor per repeat on `(images, masks)` and records the
/// mean training-set dice after every epoch.
pub fn adice(images: &[ImageGrid], masks: &[LesionMask], cfg: &ADiceConfig) -> Result<ADiceResult> {
    cfg.validate()?;
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::InvalidInput(format!(
            "need aligned, nonempty images and masks ({} vs {})",
            images.len(),
            masks.len()
        )));
    }
    let mut curves = Vec::with_capacity(cfg.repeats);
    for (r, &seed) in cfg.seeds.iter().take(cfg.repeats).enumerate() {
        let mut fit = SegFitter::new(&cfg.fit_config(seed))?;
        let mut curve = Vec::with_capacity(cfg.epochs);
        for e in 0..cfg.epochs {
            fit.train_epoch(images, masks, e)?;
            let d = mean(&fit.dice(images, masks)?);
            if !d.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("dice in repeat {r}"),
                    step: e as u64 + 1,
                });
            }
            curve.push(d);
        }
        log::debug!("a-dice repeat {r} (seed {seed}): {curve:?}");
        curves.push(curve);
    }
    let per_repeat = curves
        .iter()
        .map(|c| adice_from_curve(c))
        .collect::<Result<Vec<_>>>()?;
    Ok(ADiceResult {
        adice: mean(&per_repeat),
        per_repeat,
        curves,
    })
}

fn check_fill_inputs(x: &ImageGrid, y: &LesionMask) -> Result<()> {
    if y.shape() != x.shape() {
        return Err(Error::shape(x.shape(), y.shape()));
    }
    if y.is_all_ones() {
        return Err(Error::InvalidInput("mask covers the whole image".into()));
    }
    Ok(())
}

/// Lesion pixels replaced by the mean of non-lesion anatomy (pixels > 0).
pub fn counterfeit_meanfill(x: &ImageGrid, y: &LesionMask) -> Result<ImageGrid> {
    check_fill_inputs(x, y)?;
    if y.is_all_zeros() {
        return Ok(x.clone());
    }
    let normal: Vec<f64> = x
        .pixels()
        .iter()
        .zip(y.pixels())
        .filter(|(v, m)| **m == 0 && **v > 0.0)
        .map(|(v, _)| *v)
        .collect();
    if normal.is_empty() {
        return Err(Error::InvalidInput("no normal tissue to average".into()));
    }
    let fill = mean(&normal);
    let pixels = x
        .pixels()
        .iter()
        .zip(y.pixels())
        .map(|(v, m)| if *m == 1 { fill } else { *v })
        .collect();
    ImageGrid::new(x.height(), x.width(), pixels)
}

/// Lesion pixels plus Gaussian noise (std [`NOISE_STD`]) before clamping.
pub fn noisefill_unclamped(x: &ImageGrid, y: &LesionMask, seed: u64) -> Result<Vec<f64>> {
    check_fill_inputs(x, y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    Ok(x.pixels()
        .iter()
        .zip(y.pixels())
        .map(|(v, m)| if *m == 1 { v + noise.sample(&mut rng) } else { *v })
        .collect())
}

pub fn counterfeit_noisefill(x: &ImageGrid, y: &LesionMask, seed: u64) -> Result<ImageGrid> {
    let raw = noisefill_unclamped(x, y, seed)?;
    ImageGrid::from_clamped(x.height(), x.width(), raw)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationResult {
    pub dice: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

/// Dice of a trained segmentor's eval-mode predictions on raw images.
pub fn segmentor_generalization(
    seg: &Segmentor,
    params: &ParamSet,
    data: &[Sample],
    batch_size: usize,
) -> Result<GeneralizationResult> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let mut dice = Vec::with_capacity(data.len());
    for chunk in data.chunks(batch_size.max(1)) {
        let images: Vec<ImageGrid> = chunk.iter().map(|s| s.image.clone()).collect();
        for (p, s) in seg.forward(params, &images, Mode::Eval)?.iter().zip(chunk) {
            dice.push(dice_score(&p.argmax_mask(), &s.mask)?);
        }
    }
    let m = mean(&dice);
    let variance = dice.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / dice.len() as f64;
    Ok(GeneralizationResult { dice, mean: m, variance })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub mpsnr: f64,
    pub mssim: f64,
    /// Mean lesion error vs healthy truth before and after synthesis, when
    /// every sample carries a healthy reference.
    pub lesion_error_input: Option<f64>,
    pub lesion_error_synth: Option<f64>,
    pub count: usize,
}

impl IdentityReport {
    /// `1 - synth / input`, the fraction of lesion error removed.
    pub fn lesion_error_reduction(&self) -> Option<f64> {
        match (self.lesion_error_input, self.lesion_error_synth) {
            (Some(i), Some(s)) if i > 0.0 => Some(1.0 - s / i),
            _ => None,
        }
    }
}

/// Synthesizes every sample and averages the masked identity metrics.
pub fn identity_report(
    gen: &Generator,
    params: &ParamSet,
    data: &[Sample],
    batch_size: usize,
) -> Result<IdentityReport> {
    if data.is_empty() {
        return Err(Error::InvalidInput("no samples".into()));
    }
    let (mut psnr, mut ssim_v) = (Vec::new(), Vec::new());
    let (mut err_in, mut err_out) = (Vec::new(), Vec::new());
    let with_truth = data.iter().all(|s| s.healthy_truth.is_some() && s.mask.count() > 0);
    for chunk in data.chunks(batch_size.max(1)) {
        let images: Vec<ImageGrid> = chunk.iter().map(|s| s.image.clone()).collect();
        for (x_s, s) in gen.forward(params, &images, Mode::Eval)?.iter().zip(chunk) {
            psnr.push(mpsnr(&s.image, x_s, &s.mask)?);
            ssim_v.push(mssim(&s.image, x_s, &s.mask)?);
            if with_truth {
                let h = s.healthy_truth.as_ref().expect("checked");
                err_in.push(lesion_error(&s.image, h, &s.mask)?);
                err_out.push(lesion_error(x_s, h, &s.mask)?);
            }
        }
    }
    Ok(IdentityReport {
        mpsnr: mean(&psnr),
        mssim: mean(&ssim_v),
        lesion_error_input: with_truth.then(|| mean(&err_in)),
        lesion_error_synth: with_truth.then(|| mean(&err_out)),
        count: data.len(),
    })
}

/// Summary written by evaluation commands.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mpsnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mssim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adice: Option<f64>,
    #[serde(default)]
    pub adice_repeats: Vec<f64>,
    #[serde(default)]
    pub dice_curves: Vec<Vec<f64>>,
    pub config_hash: String,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_phantom;
    use proptest::prelude::*;

    fn mask(h: usize, w: usize, on: &[usize]) -> LesionMask {
        let mut px = vec![0u8; h * w];
        for &i in on {
            px[i] = 1;
        }
        LesionMask::new(h, w, px).unwrap()
    }

    #[test]
    fn dice_cases() {
        let a = mask(4, 4, &[0, 1, 2]);
        assert!((dice_score(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let b = mask(4, 4, &[5, 6]);
        assert!(dice_score(&a, &b).unwrap() < 1e-6);
        let p = mask(4, 4, &[0, 1, 2, 3]);
        let g = mask(4, 4, &[1, 2, 3, 4, 5, 6]);
        assert!((dice_score(&p, &g).unwrap() - 0.6).abs() < 1e-6);
        assert!(dice_score(&p, &mask(2, 2, &[])).is_err());
    }

    #[test]
    fn mpsnr_cases() {
        let x = ImageGrid::new(2, 2, vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let none = mask(2, 2, &[]);
        assert_eq!(mpsnr(&x, &x, &none).unwrap(), PSNR_CAP);
        let lesion_only = ImageGrid::new(2, 2, vec![0.9, 0.4, 0.6, 0.8]).unwrap();
        assert_eq!(mpsnr(&x, &lesion_only, &mask(2, 2, &[0])).unwrap(), PSNR_CAP);
        let off = ImageGrid::new(2, 2, vec![0.2, 0.5, 0.6, 0.8]).unwrap();
        let mse = (0.5f64 - 0.4).powi(2) / 4.0;
        let expected = 10.0 * (1.0 / mse).log10();
        assert!((mpsnr(&x, &off, &none).unwrap() - expected).abs() < 1e-9);
        assert!((expected - 26.0206).abs() < 1e-3);
        assert!(matches!(
            mpsnr(&x, &x, &mask(2, 2, &[0, 1, 2, 3])),
            Err(Error::UndefinedMetric(_))
        ));
    }

    /// Direct windowed evaluation: weighted statistics per window position.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let n = SSIM_WINDOW;
        let k1: Vec<f64> = (0..n)
            .map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp())
            .collect();
        let mut total = 0.0;
        let mut count = 0.0;
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let (mut ws, mut ma, mut mb) = (0.0, 0.0, 0.0);
                for dy in 0..n {
                    for dx in 0..n {
                        let wt = k1[dy] * k1[dx];
                        ws += wt;
                        ma += wt * a[(y0 + dy) * w + x0 + dx];
                        mb += wt * b[(y0 + dy) * w + x0 + dx];
                    }
                }
                ma /= ws;
                mb /= ws;
                let (mut va, mut vb, mut cv) = (0.0, 0.0, 0.0);
                for dy in 0..n {
                    for dx in 0..n {
                        let wt = k1[dy] * k1[dx] / ws;
                        let da = a[(y0 + dy) * w + x0 + dx] - ma;
                        let db = b[(y0 + dy) * w + x0 + dx] - mb;
                        va += wt * da * da;
                        vb += wt * db * db;
                        cv += wt * da * db;
                    }
                }
                let (c1, c2) = (1e-4, 9e-4);
                total += (2.0 * ma * mb + c1) * (2.0 * cv + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let s = make_phantom(4, (32, 32), 1, 0.4).unwrap().remove(0);
        let h = s.healthy_truth.unwrap();
        let (a, b) = (s.image.pixels(), h.pixels());
        let fast = ssim(a, b, 32, 32).unwrap();
        assert!((fast - ssim_oracle(a, b, 32, 32)).abs() < 1e-10);
    }

    #[test]
    fn mssim_cases() {
        let s = make_phantom(2, (32, 32), 1, 0.5).unwrap().remove(0);
        let none = LesionMask::zeros(32, 32);
        assert!((mssim(&s.image, &s.image, &none).unwrap() - 1.0).abs() < 1e-12);
        let inv = ImageGrid::new(32, 32, s.image.pixels().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(mssim(&s.image, &inv, &none).unwrap() < 0.5);
        let healthy = s.healthy_truth.as_ref().unwrap();
        assert!((mssim(&s.image, healthy, &s.mask).unwrap() - 1.0).abs() < 1e-12);
        let small = ImageGrid::filled(8, 8, 0.5).unwrap();
        assert!(matches!(
            mssim(&small, &small, &LesionMask::zeros(8, 8)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn adice_curve_arithmetic() {
        assert_eq!(adice_from_curve(&[1.0; 20]).unwrap(), 1.0);
        let linear: Vec<f64> = (1..=20).map(|e| e as f64 / 20.0).collect();
        assert!((adice_from_curve(&linear).unwrap() - 0.525).abs() < 1e-12);
    }

    #[test]
    fn adice_config_validation() {
        let mut c = ADiceConfig::default();
        assert!(c.validate().is_ok());
        c.seeds = vec![1];
        assert!(c.validate().is_err());
        let c = ADiceConfig {
            eval_lr: 0.0,
            ..ADiceConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn meanfill_cases() {
        let x = ImageGrid::new(2, 3, vec![0.0, 0.4, 0.4, 0.9, 0.4, 0.0]).unwrap();
        assert!(counterfeit_meanfill(&x, &LesionMask::zeros(2, 3)).unwrap().bit_eq(&x));
        let out = counterfeit_meanfill(&x, &mask(2, 3, &[3])).unwrap();
        for (a, b) in out.pixels().iter().zip([0.0, 0.4, 0.4, 0.4, 0.4, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }

        let s = make_phantom(9, (32, 32), 1, 0.3).unwrap().remove(0);
        let out = counterfeit_meanfill(&s.image, &s.mask).unwrap();
        let (mut sum, mut n) = (0.0, 0.0);
        for i in 0..s.image.len() {
            let v = s.image.pixels()[i];
            if s.mask.pixels()[i] == 0 && v > 0.0 {
                sum += v;
                n += 1.0;
            }
        }
        for i in 0..s.image.len() {
            let expect = if s.mask.is_lesion(i) { sum / n } else { s.image.pixels()[i] };
            assert!((out.pixels()[i] - expect).abs() < 1e-12);
        }
        let dark = ImageGrid::filled(2, 2, 0.0).unwrap();
        assert!(counterfeit_meanfill(&dark, &mask(2, 2, &[0])).is_err());
    }

    #[test]
    fn noisefill_moments_and_determinism() {
        let (h, w) = (101, 100);
        let x = ImageGrid::filled(h, w, 0.5).unwrap();
        let y = mask(h, w, &(0..10_000).collect::<Vec<_>>());
        let raw = noisefill_unclamped(&x, &y, 11).unwrap();
        let lesion: Vec<f64> = raw[..10_000].iter().map(|v| v - 0.5).collect();
        let m = mean(&lesion);
        let sd = (lesion.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 10_000.0).sqrt();
        assert!((sd - 0.2).abs() < 0.01, "{sd}");
        assert!(raw[10_000..].iter().all(|&v| v == 0.5));
        let a = counterfeit_noisefill(&x, &y, 11).unwrap();
        assert!(a.bit_eq(&counterfeit_noisefill(&x, &y, 11).unwrap()));
        let z = LesionMask::zeros(h, w);
        assert!(counterfeit_noisefill(&x, &z, 3).unwrap().bit_eq(&x));
    }

    #[test]
    fn lesion_error_cases() {
        let s = make_phantom(1, (32, 32), 1, 0.5).unwrap().remove(0);
        let h = s.healthy_truth.as_ref().unwrap();
        assert_eq!(lesion_error(h, h, &s.mask).unwrap(), 0.0);
        assert!(lesion_error(&s.image, h, &s.mask).unwrap() > 0.0);
    }

    proptest! {
        #[test]
        fn lesion_only_edits_leave_masked_metrics_unchanged(
            seed in 0u64..200,
            delta in prop::collection::vec(0.0f64..1.0, 256),
        ) {
            let s = make_phantom(seed, (32, 32), 1, 0.4).unwrap().remove(0);
            let x_s = s.healthy_truth.clone().unwrap();
            let mut edited = x_s.pixels().to_vec();
            for (i, v) in edited.iter_mut().enumerate() {
                if s.mask.is_lesion(i) {
                    *v = delta[i % 256];
                }
            }
            let edited = ImageGrid::new(32, 32, edited).unwrap();
            prop_assert_eq!(mpsnr(&s.image, &x_s, &s.mask).unwrap(), mpsnr(&s.image, &edited, &s.mask).unwrap());
            prop_assert_eq!(mssim(&s.image, &x_s, &s.mask).unwrap(), mssim(&s.image, &edited, &s.mask).unwrap());
        }
    }
}
