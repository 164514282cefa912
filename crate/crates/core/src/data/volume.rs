use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::ImageGrid;

/// 3D scalar volume in scanner units, stored slice-major (`[d][h][w]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub id: String,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub spacing: [f64; 3],
    voxels: Vec<f64>,
}

impl Volume {
    pub fn new(
        id: impl Into<String>,
        [depth, height, width]: [usize; 3],
        spacing: [f64; 3],
        voxels: Vec<f64>,
    ) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidInput("volume needs at least one voxel and slice".into()));
        }
        if voxels.len() != depth * height * width {
            return Err(Error::shape(depth * height * width, voxels.len()));
        }
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("volume contains non-finite voxels".into()));
        }
        Ok(Volume {
            id: id.into(),
            depth,
            height,
            width,
            spacing,
            voxels,
        })
    }

    pub fn voxels(&self) -> &[f64] {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.voxels[z * n..(z + 1) * n]
    }

    fn with_voxels(&self, voxels: Vec<f64>) -> Volume {
        Volume {
            voxels,
            ..self.clone()
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.voxels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// Nearest-rank `p`-quantile: the value at 1-based rank `ceil(p * n)` of
/// the ascending sort.
pub fn nearest_rank_quantile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty set".into()));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidInput(format!("quantile fraction {p} outside (0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // tolerate p * n landing a hair above an integer through rounding
    let rank = ((p * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    Ok(sorted[rank - 1])
}

/// Clips every voxel into `[0, q]` where `q` is the volume-wide
/// nearest-rank `p`-quantile.
pub fn clip_percentile(v: &Volume, p: f64) -> Result<Volume> {
    let q = nearest_rank_quantile(&v.voxels, p)?;
    Ok(v.with_voxels(v.voxels.iter().map(|&x| x.min(q).max(0.0)).collect()))
}

pub fn clamp_range(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::InvalidConfig(format!("clamp range [{lo}, {hi}] is empty")));
    }
    Ok(v.with_voxels(v.voxels.iter().map(|&x| x.clamp(lo, hi)).collect()))
}

/// Volume-wide min-max scaling into `[0, 1]`, one grid per slice. A flat
/// volume maps to all zeros.
pub fn normalize_minmax(v: &Volume) -> Vec<ImageGrid> {
    let (lo, hi) = v.min_max();
    let range = hi - lo;
    (0..v.depth)
        .map(|z| {
            let pixels = v
                .slice(z)
                .iter()
                .map(|&x| if range > 0.0 { (x - lo) / range } else { 0.0 })
                .collect();
            ImageGrid::from_clamped(v.height, v.width, pixels).expect("dimensions checked")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vol(values: Vec<f64>) -> Volume {
        let n = values.len();
        Volume::new("v", [1, 1, n], [1.0; 3], values).unwrap()
    }

    /// Smallest observed value `x` with `#{v <= x} >= p * n`.
    fn counting_quantile(values: &[f64], p: f64) -> f64 {
        let n = values.len() as f64;
        let mut best = f64::INFINITY;
        for &x in values {
            let at_or_below = values.iter().filter(|&&v| v <= x).count() as f64;
            if at_or_below >= p * n - 1e-9 && x < best {
                best = x;
            }
        }
        best
    }

    #[test]
    fn constant_volume_unchanged() {
        let v = vol(vec![5.0; 20]);
        assert_eq!(clip_percentile(&v, 0.995).unwrap(), v);
    }

    #[test]
    fn thousand_ramp_clips_above_quantile() {
        let values: Vec<f64> = (0..1000).map(f64::from).collect();
        let q = counting_quantile(&values, 0.995);
        assert_eq!(q, 994.0);
        let out = clip_percentile(&vol(values.clone()), 0.995).unwrap();
        for (a, b) in values.iter().zip(out.voxels()) {
            assert_eq!(*b, a.min(q));
        }
    }

    #[test]
    fn negatives_clamp_to_zero() {
        let out = clip_percentile(&vol(vec![-3.0, 1.0, 2.0, 3.0]), 1.0).unwrap();
        assert_eq!(out.voxels()[0], 0.0);
    }

    #[test]
    fn bad_inputs() {
        assert!(Volume::new("e", [0, 1, 1], [1.0; 3], vec![]).is_err());
        assert!(nearest_rank_quantile(&[], 0.5).is_err());
        assert!(clip_percentile(&vol(vec![1.0]), 0.0).is_err());
        assert!(matches!(
            clamp_range(&vol(vec![1.0]), 3.0, 3.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn clamp_examples() {
        let out = clamp_range(&vol(vec![300.0, -500.0, 0.0]), -200.0, 250.0).unwrap();
        assert_eq!(out.voxels(), &[250.0, -200.0, 0.0]);
    }

    #[test]
    fn normalize_examples() {
        let g = normalize_minmax(&vol(vec![2.0, 4.0, 6.0]));
        assert_eq!(g[0].pixels(), &[0.0, 0.5, 1.0]);
        let g = normalize_minmax(&vol(vec![0.0, 10.0]));
        assert_eq!(g[0].pixels(), &[0.0, 1.0]);
        let g = normalize_minmax(&vol(vec![7.0; 4]));
        assert!(g[0].pixels().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn quantile_matches_counting_oracle(
            values in prop::collection::vec(-50.0f64..50.0, 1..60),
            p in 0.01f64..=1.0,
        ) {
            prop_assert_eq!(nearest_rank_quantile(&values, p).unwrap(), counting_quantile(&values, p));
        }

        #[test]
        fn clip_and_clamp_idempotent(
            values in prop::collection::vec(-300.0f64..400.0, 1..60),
            p in 0.05f64..=1.0,
        ) {
            let v = vol(values);
            let once = clip_percentile(&v, p).unwrap();
            prop_assert_eq!(&clip_percentile(&once, p).unwrap(), &once);
            let once = clamp_range(&v, -200.0, 250.0).unwrap();
            prop_assert_eq!(&clamp_range(&once, -200.0, 250.0).unwrap(), &once);
        }
    }
}
