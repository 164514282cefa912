//! Image-domain value types shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Single-channel 2D intensity grid with every pixel in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageGrid {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("image dimensions must be positive".into()));
        }
        if pixels.len() != height * width {
            return Err(Error::shape(height * width, pixels.len()));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel {bad} outside [0, 1]")));
        }
        Ok(ImageGrid {
            height,
            width,
            pixels,
        })
    }

    /// Clamps into `[0, 1]` (NaN becomes 0) instead of rejecting.
    pub fn from_clamped(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        let pixels = pixels
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        ImageGrid::new(height, width, pixels)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        ImageGrid::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn ensure_same_shape(&self, other: (usize, usize)) -> Result<()> {
        if self.shape() != other {
            return Err(Error::shape(self.shape(), other));
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &ImageGrid) -> bool {
        self.shape() == other.shape()
            && self
                .pixels
                .iter()
                .zip(&other.pixels)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Binary lesion annotation: 0 = normal, 1 = pathological.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LesionMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl LesionMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput("mask dimensions must be positive".into()));
        }
        if pixels.len() != height * width {
            return Err(Error::shape(height * width, pixels.len()));
        }
        if pixels.iter().any(|&v| v > 1) {
            return Err(Error::InvalidInput("mask values must be 0 or 1".into()));
        }
        Ok(LesionMask {
            height,
            width,
            pixels,
        })
    }

    /// The all-normal mask (the "healthy" target).
    pub fn zeros(height: usize, width: usize) -> Self {
        LesionMask {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn is_lesion(&self, i: usize) -> bool {
        self.pixels[i] == 1
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_all_ones(&self) -> bool {
        self.pixels.iter().all(|&v| v == 1)
    }

    pub fn is_all_zeros(&self) -> bool {
        self.pixels.iter().all(|&v| v == 0)
    }
}

/// Per-pixel two-class distribution `(no tumor, tumor)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    tumor: Vec<f64>,
    normal: Vec<f64>,
}

pub const SIMPLEX_TOL: f64 = 1e-5;

impl ProbMap {
    pub fn new(height: usize, width: usize, normal: Vec<f64>, tumor: Vec<f64>) -> Result<Self> {
        if normal.len() != height * width || tumor.len() != height * width {
            return Err(Error::shape(height * width, (normal.len(), tumor.len())));
        }
        for (a, b) in normal.iter().zip(&tumor) {
            if !(*a >= 0.0 && *b >= 0.0 && (a + b - 1.0).abs() <= SIMPLEX_TOL) {
                return Err(Error::InvalidInput(format!(
                    "not a probability pair: ({a}, {b})"
                )));
            }
        }
        Ok(ProbMap {
            height,
            width,
            tumor,
            normal,
        })
    }

    /// Builds from tumor probabilities alone.
    pub fn from_tumor(height: usize, width: usize, tumor: Vec<f64>) -> Result<Self> {
        let normal = tumor.iter().map(|p| 1.0 - p).collect();
        ProbMap::new(height, width, normal, tumor)
    }

    /// Sample `n` of a `[N, 2, H, W]` softmax output.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        if t.c() != 2 {
            return Err(Error::shape("2 channels", t.c()));
        }
        ProbMap::new(t.h(), t.w(), t.plane(n, 0).to_vec(), t.plane(n, 1).to_vec())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn tumor(&self) -> &[f64] {
        &self.tumor
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    /// Probability assigned to class `label` at pixel `i`.
    pub fn prob(&self, i: usize, label: u8) -> f64 {
        if label == 1 {
            self.tumor[i]
        } else {
            self.normal[i]
        }
    }

    /// Arg-max over the two classes; ties go to "no tumor".
    pub fn argmax_mask(&self) -> LesionMask {
        let pixels = self
            .tumor
            .iter()
            .zip(&self.normal)
            .map(|(t, n)| u8::from(t > n))
            .collect();
        LesionMask {
            height: self.height,
            width: self.width,
            pixels,
        }
    }
}

/// Per-pixel loss weights in `[0.1, 1.0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    weights: Vec<f64>,
}

pub const MIN_WEIGHT: f64 = 0.1;

impl WeightMap {
    pub fn new(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != height * width {
            return Err(Error::shape(height * width, weights.len()));
        }
        if let Some(bad) = weights.iter().find(|w| !(MIN_WEIGHT..=1.0).contains(*w)) {
            return Err(Error::InvalidInput(format!("weight {bad} outside [0.1, 1]")));
        }
        Ok(WeightMap {
            height,
            width,
            weights,
        })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        WeightMap {
            height,
            width,
            weights: vec![1.0; height * width],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// A training pair plus the phantom-only healthy reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub image: ImageGrid,
    pub mask: LesionMask,
    pub healthy_truth: Option<ImageGrid>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        image: ImageGrid,
        mask: LesionMask,
        healthy_truth: Option<ImageGrid>,
    ) -> Result<Self> {
        let id = id.into();
        if image.shape() != mask.shape() {
            return Err(Error::Load {
                id,
                reason: format!("image {:?} vs mask {:?}", image.shape(), mask.shape()),
            });
        }
        if let Some(h) = &healthy_truth {
            if h.shape() != image.shape() {
                return Err(Error::Load {
                    id,
                    reason: format!("healthy truth {:?} vs image {:?}", h.shape(), image.shape()),
                });
            }
        }
        Ok(Sample {
            id,
            image,
            mask,
            healthy_truth,
        })
    }
}

/// Stacks same-shaped images into a `[N, 1, H, W]` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a ImageGrid>) -> Result<Tensor> {
    let images: Vec<&ImageGrid> = images.into_iter().collect();
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in &images {
        im.ensure_same_shape((h, w))?;
        data.extend_from_slice(im.pixels());
    }
    Ok(Tensor::from_vec([images.len(), 1, h, w], data))
}

/// Splits a `[N, 1, H, W]` tensor back into images, clamping into `[0, 1]`.
pub fn unstack_images(t: &Tensor) -> Result<Vec<ImageGrid>> {
    (0..t.n())
        .map(|n| ImageGrid::from_clamped(t.h(), t.w(), t.plane(n, 0).to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range_and_bad_length() {
        assert!(ImageGrid::new(1, 2, vec![0.0, 1.1]).is_err());
        assert!(ImageGrid::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn mask_must_be_binary() {
        assert!(LesionMask::new(1, 2, vec![0, 2]).is_err());
        let m = LesionMask::new(1, 3, vec![0, 1, 1]).unwrap();
        assert_eq!(m.count(), 2);
    }

    #[test]
    fn probmap_validates_simplex() {
        assert!(ProbMap::new(1, 1, vec![0.6], vec![0.6]).is_err());
        let p = ProbMap::from_tumor(1, 2, vec![0.7, 0.5]).unwrap();
        assert_eq!(p.argmax_mask().pixels(), &[1, 0]);
    }

    #[test]
    fn sample_shape_mismatch_names_the_entry() {
        let im = ImageGrid::filled(2, 2, 0.5).unwrap();
        let err = Sample::new("case-7", im, LesionMask::zeros(2, 3), None).unwrap_err();
        assert!(err.to_string().contains("case-7"));
    }
}
