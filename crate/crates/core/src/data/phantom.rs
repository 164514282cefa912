//! Deterministic brain-like phantoms with known healthy ground truth.
//!
//! Recipe, per sample (all draws from a ChaCha8 stream seeded by the
//! dataset seed, one sub-seed per sample):
//!
//! 1. Anatomy: a rotated ellipse near the centre with semi-axes of
//!    0.32–0.42 of the image size and base intensity 0.30–0.45. Its edge
//!    falls off over ~2 px with a smoothstep and is exactly 0 outside.
//! 2. Three internal structures: soft rotated ellipses adding
//!    -0.12..+0.18 to the base intensity, plus a low-frequency sinusoidal
//!    shading of amplitude 0.03 and optional i.i.d. texture noise.
//!    Healthy intensities are clamped to `[0, 0.9]` and quantized to the
//!    16-bit grid `k / 65535`.
//! 3. Lesions: one or two rotated ellipses whose every pixel lies within
//!    80% of the anatomy radius. Lesion pixels get `amp_k =
//!    round(amp * 65535)` (at least 1 when `amp > 0`) added in integer
//!    space and saturate at 65535, so `image - healthy` is exact.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LesionMask, Sample};

pub const QUANT_LEVELS: f64 = 65535.0;
pub const MIN_PHANTOM_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub lesion_amp: f64,
    /// Lesion semi-axis range as a fraction of `min(height, width)`.
    pub lesion_scale: (f64, f64),
    pub max_lesions: usize,
    /// Standard deviation of per-pixel texture noise inside the anatomy.
    pub texture_std: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            height: 64,
            width: 64,
            count: 1,
            lesion_amp: 0.5,
            lesion_scale: (0.07, 0.13),
            max_lesions: 2,
            texture_std: 0.0,
        }
    }
}

pub fn make_phantom(seed: u64, size: (usize, usize), count: usize, lesion_amp: f64) -> Result<Vec<Sample>> {
    make_phantom_with(&PhantomConfig {
        seed,
        height: size.0,
        width: size.1,
        count,
        lesion_amp,
        ..PhantomConfig::default()
    })
}

pub fn make_phantom_with(cfg: &PhantomConfig) -> Result<Vec<Sample>> {
    if cfg.height < MIN_PHANTOM_SIZE || cfg.width < MIN_PHANTOM_SIZE {
        return Err(Error::InvalidInput(format!(
            "phantom size must be at least {MIN_PHANTOM_SIZE}x{MIN_PHANTOM_SIZE}, got {}x{}",
            cfg.height, cfg.width
        )));
    }
    if cfg.count == 0 {
        return Err(Error::InvalidInput("phantom count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.lesion_amp) {
        return Err(Error::InvalidInput(format!(
            "lesion amplitude {} outside [0, 1]",
            cfg.lesion_amp
        )));
    }
    if cfg.max_lesions == 0 || !(cfg.lesion_scale.0 > 0.0 && cfg.lesion_scale.0 <= cfg.lesion_scale.1) {
        return Err(Error::InvalidConfig("invalid lesion count or scale range".into()));
    }
    if !(cfg.texture_std >= 0.0) {
        return Err(Error::InvalidConfig("texture_std must be >= 0".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count)
        .map(|i| {
            let sub = master.next_u64();
            one_phantom(cfg, i, &mut ChaCha8Rng::seed_from_u64(sub))
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
}

impl Ellipse {
    /// Normalized elliptical radius: `< 1` inside, `1` on the boundary.
    fn radius(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let dy = y - self.cy;
        let dx = x - self.cx;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }

    /// Smoothstep falloff across `edge_px` pixels inside the boundary.
    fn soft(&self, y: f64, x: f64, edge_px: f64) -> f64 {
        let r = self.radius(y, x);
        let t = ((1.0 - r) * self.ry.min(self.rx) / edge_px).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }
}

fn one_phantom(cfg: &PhantomConfig, index: usize, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (h, w) = (cfg.height, cfg.width);
    let (hf, wf) = (h as f64, w as f64);
    let anatomy = Ellipse {
        cy: hf / 2.0 + rng.random_range(-hf / 16.0..hf / 16.0),
        cx: wf / 2.0 + rng.random_range(-wf / 16.0..wf / 16.0),
        ry: rng.random_range(0.32..0.42) * hf,
        rx: rng.random_range(0.32..0.42) * wf,
        theta: rng.random_range(0.0..std::f64::consts::PI),
    };
    let base = rng.random_range(0.30..0.45);
    let structures: Vec<(Ellipse, f64)> = (0..3)
        .map(|_| {
            let r = rng.random_range(0.0..0.55);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            let e = Ellipse {
                cy: anatomy.cy + r * anatomy.ry * a.sin(),
                cx: anatomy.cx + r * anatomy.rx * a.cos(),
                ry: rng.random_range(0.10..0.25) * hf,
                rx: rng.random_range(0.10..0.25) * wf,
                theta: rng.random_range(0.0..std::f64::consts::PI),
            };
            (e, rng.random_range(-0.12..0.18))
        })
        .collect();
    let (fy, fx) = (
        rng.random_range(1.0..3.0) * std::f64::consts::TAU / hf,
        rng.random_range(1.0..3.0) * std::f64::consts::TAU / wf,
    );
    let (py, px) = (
        rng.random_range(0.0..std::f64::consts::TAU),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    let texture = Normal::new(0.0, cfg.texture_std.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut healthy_k = vec![0u16; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let body = anatomy.soft(yf, xf, 2.0);
            // draw texture for every pixel so the stream does not depend on geometry
            let noise = if cfg.texture_std > 0.0 {
                texture.sample(rng)
            } else {
                0.0
            };
            if body <= 0.0 {
                continue;
            }
            let mut v = base + 0.03 * (fy * yf + py).sin() * (fx * xf + px).sin();
            for (e, delta) in &structures {
                v += delta * e.soft(yf, xf, 3.0);
            }
            v += noise;
            let v = (body * v).clamp(0.0, 0.9);
            healthy_k[y * w + x] = (v * QUANT_LEVELS).round() as u16;
        }
    }

    let min_dim = hf.min(wf);
    let n_lesions = rng.random_range(1..=cfg.max_lesions);
    let mut mask = vec![0u8; h * w];
    for _ in 0..n_lesions {
        let lesion = place_lesion(cfg, &anatomy, min_dim, rng)?;
        let (y0, y1, x0, x1) = bbox(&lesion, h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                if lesion.radius(y as f64 + 0.5, x as f64 + 0.5) <= 1.0 {
                    mask[y * w + x] = 1;
                }
            }
        }
    }

    let amp_k = if cfg.lesion_amp > 0.0 {
        ((cfg.lesion_amp * QUANT_LEVELS).round() as u32).max(1)
    } else {
        0
    };
    let image_k: Vec<u16> = healthy_k
        .iter()
        .zip(&mask)
        .map(|(&k, &m)| {
            if m == 1 {
                (k as u32 + amp_k).min(u16::MAX as u32) as u16
            } else {
                k
            }
        })
        .collect();

    let to_grid = |ks: &[u16]| {
        ImageGrid::new(h, w, ks.iter().map(|&k| dequantize(k)).collect()).expect("grid in range")
    };
    Sample::new(
        format!("phantom-{}-{index:04}", cfg.seed),
        to_grid(&image_k),
        LesionMask::new(h, w, mask)?,
        Some(to_grid(&healthy_k)),
    )
}

fn place_lesion(
    cfg: &PhantomConfig,
    anatomy: &Ellipse,
    min_dim: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Ellipse> {
    const ATTEMPTS: usize = 200;
    const INNER: f64 = 0.8;
    let (lo, hi) = cfg.lesion_scale;
    for _ in 0..ATTEMPTS {
        let e = Ellipse {
            cy: anatomy.cy + rng.random_range(-0.7..0.7) * anatomy.ry,
            cx: anatomy.cx + rng.random_range(-0.7..0.7) * anatomy.rx,
            ry: rng.random_range(lo..=hi) * min_dim,
            rx: rng.random_range(lo..=hi) * min_dim,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        let (y0, y1, x0, x1) = bbox(&e, cfg.height, cfg.width);
        let mut any = false;
        let mut inside = true;
        'scan: for y in y0..y1 {
            for x in x0..x1 {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                if e.radius(yf, xf) <= 1.0 {
                    any = true;
                    if anatomy.radius(yf, xf) > INNER {
                        inside = false;
                        break 'scan;
                    }
                }
            }
        }
        if any && inside {
            return Ok(e);
        }
    }
    Err(Error::Generation(format!(
        "no lesion of scale {lo}..{hi} fits inside the anatomy after {ATTEMPTS} attempts"
    )))
}

fn bbox(e: &Ellipse, h: usize, w: usize) -> (usize, usize, usize, usize) {
    let r = e.ry.max(e.rx) + 1.0;
    let clampi = |v: f64, n: usize| v.floor().clamp(0.0, n as f64) as usize;
    (
        clampi(e.cy - r, h),
        clampi(e.cy + r + 1.0, h),
        clampi(e.cx - r, w),
        clampi(e.cx + r + 1.0, w),
    )
}

pub fn dequantize(k: u16) -> f64 {
    k as f64 / QUANT_LEVELS
}

pub fn quantize(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * QUANT_LEVELS).round() as u16
}
