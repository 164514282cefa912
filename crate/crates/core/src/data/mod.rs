//! Dataset loading, intensity preprocessing and phantom generation.

pub mod container;
pub mod phantom;
pub mod volume;

use std::collections::{HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LesionMask, Sample};

pub use phantom::{make_phantom, make_phantom_with, PhantomConfig};
pub use volume::{clamp_range, clip_percentile, normalize_minmax, Volume};

pub const MR_CLIP_FRACTION: f64 = 0.995;
pub const CT_WINDOW: (f64, f64) = (-200.0, 250.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Modality {
    Mr,
    Ct,
    Phantom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub healthy_truth: Option<PathBuf>,
    pub split: Split,
}

/// JSON manifest. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub modality: Modality,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(modality: Modality, base_dir: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            modality,
            entries: Vec::new(),
            base_dir: base_dir.into(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_slice(&bytes)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Unique ids and resolvable paths.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate manifest id `{}`", e.id)));
            }
            let mut paths = vec![&e.image, &e.mask];
            paths.extend(e.healthy_truth.as_ref());
            for p in paths {
                if !self.resolve(p).exists() {
                    return Err(Error::Load {
                        id: e.id.clone(),
                        reason: format!("path {} does not exist", p.display()),
                    });
                }
            }
        }
        Ok(())
    }

    /// Copy restricted to one split.
    pub fn filter_split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            entries: self
                .entries
                .iter()
                .filter(|e| e.split == split)
                .cloned()
                .collect(),
            ..self.clone()
        }
    }
}

/// Applies the modality's intensity pipeline and slices into grids.
pub fn preprocess(modality: Modality, v: &Volume) -> Result<Vec<ImageGrid>> {
    match modality {
        Modality::Mr => Ok(normalize_minmax(&clip_percentile(v, MR_CLIP_FRACTION)?)),
        Modality::Ct => Ok(normalize_minmax(&clamp_range(v, CT_WINDOW.0, CT_WINDOW.1)?)),
        Modality::Phantom => (0..v.depth)
            .map(|z| {
                ImageGrid::new(v.height, v.width, v.slice(z).to_vec()).map_err(|e| Error::Load {
                    id: v.id.clone(),
                    reason: e.to_string(),
                })
            })
            .collect(),
    }
}

/// Lazily loads samples entry by entry.
pub struct DatasetStream<'a> {
    manifest: &'a DatasetManifest,
    order: Vec<usize>,
    next: usize,
    pending: VecDeque<Sample>,
}

impl Iterator for DatasetStream<'_> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(s) = self.pending.pop_front() {
                return Some(Ok(s));
            }
            let &idx = self.order.get(self.next)?;
            self.next += 1;
            match load_entry(self.manifest, &self.manifest.entries[idx]) {
                Ok(samples) => self.pending.extend(samples),
                Err(e) => return Some(Err(e)),
            }
        }
    }
}

/// Streams samples in manifest order, or shuffled by entry when a seed is
/// given.
pub fn load_dataset(manifest: &DatasetManifest, shuffle_seed: Option<u64>) -> DatasetStream<'_> {
    let mut order: Vec<usize> = (0..manifest.entries.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    DatasetStream {
        manifest,
        order,
        next: 0,
        pending: VecDeque::new(),
    }
}

pub fn load_all(manifest: &DatasetManifest) -> Result<Vec<Sample>> {
    load_dataset(manifest, None).collect()
}

fn load_entry(m: &DatasetManifest, e: &ManifestEntry) -> Result<Vec<Sample>> {
    let wrap = |err: Error| match err {
        Error::Load { .. } => err,
        other => Error::Load {
            id: e.id.clone(),
            reason: other.to_string(),
        },
    };
    let image_vol = container::load_volume(&m.resolve(&e.image)).map_err(wrap)?;
    let images = preprocess(m.modality, &image_vol).map_err(wrap)?;
    let masks = container::load_mask_slices(&m.resolve(&e.mask)).map_err(wrap)?;
    let healthy = match &e.healthy_truth {
        Some(p) => {
            let v = container::load_volume(&m.resolve(p)).map_err(wrap)?;
            Some(preprocess(m.modality, &v).map_err(wrap)?)
        }
        None => None,
    };
    if masks.len() != images.len() {
        return Err(Error::Load {
            id: e.id.clone(),
            reason: format!("{} image slices vs {} mask slices", images.len(), masks.len()),
        });
    }
    if let Some(h) = &healthy {
        if h.len() != images.len() {
            return Err(Error::Load {
                id: e.id.clone(),
                reason: "healthy-truth slice count differs from image".into(),
            });
        }
    }
    let single = images.len() == 1;
    let mut out = Vec::new();
    for (z, (image, mask)) in images.into_iter().zip(masks).enumerate() {
        if !keep_slice(&image, &mask) {
            continue;
        }
        let id = if single {
            e.id.clone()
        } else {
            format!("{}/s{z:03}", e.id)
        };
        let ht = healthy.as_ref().map(|h| h[z].clone());
        out.push(Sample::new(id, image, mask, ht)?);
    }
    Ok(out)
}

/// Slices with neither anatomy nor lesion carry no training signal.
fn keep_slice(image: &ImageGrid, mask: &LesionMask) -> bool {
    image.pixels().iter().any(|&v| v > 0.0) || !mask.is_all_zeros()
}

/// Writes phantom samples as a PHANTOM-modality dataset under `dir`.
/// The final `test_fraction` of samples (rounded down) is tagged `test`.
pub fn save_phantom_dataset(dir: &Path, samples: &[Sample], test_fraction: f64) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig(format!("test fraction {test_fraction} outside [0, 1]")));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n_test = (samples.len() as f64 * test_fraction).floor() as usize;
    let mut manifest = DatasetManifest::new(Modality::Phantom, dir);
    for (i, s) in samples.iter().enumerate() {
        let image = PathBuf::from("images").join(format!("{}.png", s.id));
        let mask = PathBuf::from("masks").join(format!("{}.png", s.id));
        container::save_grid(&dir.join(&image), &s.image)?;
        container::save_mask(&dir.join(&mask), &s.mask)?;
        let healthy_truth = match &s.healthy_truth {
            Some(h) => {
                let p = PathBuf::from("healthy").join(format!("{}.png", s.id));
                container::save_grid(&dir.join(&p), h)?;
                Some(p)
            }
            None => None,
        };
        manifest.entries.push(ManifestEntry {
            id: s.id.clone(),
            image,
            mask,
            healthy_truth,
            split: if i >= samples.len() - n_test {
                Split::Test
            } else {
                Split::Train
            },
        });
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::container::{save_mask, save_volume};

    #[test]
    fn empty_manifest_yields_nothing() {
        let m = DatasetManifest::new(Modality::Mr, ".");
        assert_eq!(load_dataset(&m, None).count(), 0);
    }

    #[test]
    fn phantom_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let samples = make_phantom(5, (32, 32), 4, 0.4).unwrap();
        save_phantom_dataset(dir.path(), &samples, 0.25).unwrap();
        let m = DatasetManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.filter_split(Split::Test).entries.len(), 1);
        let back = load_all(&m).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn shuffled_order_is_seed_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let samples = make_phantom(6, (32, 32), 6, 0.4).unwrap();
        let m = save_phantom_dataset(dir.path(), &samples, 0.0).unwrap();
        let ids = |seed| {
            load_dataset(&m, Some(seed))
                .map(|s| s.unwrap().id)
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(3), ids(3));
        let mut sorted = ids(3);
        sorted.sort();
        assert_eq!(sorted, samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn ct_volume_is_windowed_then_normalized() {
        let dir = tempfile::tempdir().unwrap();
        // 400 and 250 both land on the window top; -1000 on the bottom
        let mut voxels = vec![0.0; 2 * 4 * 4];
        voxels[0] = 400.0;
        voxels[1] = 250.0;
        voxels[2] = -1000.0;
        voxels[3] = 25.0;
        let v = Volume::new("ct1", [2, 4, 4], [1.0; 3], voxels).unwrap();
        save_volume(&dir.path().join("ct1"), &v).unwrap();
        let mdir = dir.path().join("ct1_mask");
        fs::create_dir_all(&mdir).unwrap();
        let mut header: container::VolumeHeader =
            serde_json::from_slice(&fs::read(dir.path().join("ct1").join("volume.json")).unwrap()).unwrap();
        for name in &header.slices {
            save_mask(&mdir.join(name), &LesionMask::zeros(4, 4)).unwrap();
        }
        header.id = "ct1_mask".into();
        fs::write(mdir.join("volume.json"), serde_json::to_vec(&header).unwrap()).unwrap();

        let mut m = DatasetManifest::new(Modality::Ct, dir.path());
        m.entries.push(ManifestEntry {
            id: "ct1".into(),
            image: "ct1".into(),
            mask: "ct1_mask".into(),
            healthy_truth: None,
            split: Split::Train,
        });
        let samples = load_all(&m).unwrap();
        assert_eq!(samples.len(), 2);
        let px = samples[0].image.pixels();
        let tol = 1500.0 / 65535.0 / 450.0;
        assert!((px[0] - 1.0).abs() <= tol);
        assert!((px[1] - 1.0).abs() <= tol);
        assert_eq!(px[2], 0.0);
        assert!((px[3] - 225.0 / 450.0).abs() <= tol);
        for s in &samples {
            assert!(s.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mismatched_mask_reports_entry_id() {
        let dir = tempfile::tempdir().unwrap();
        container::save_grid(&dir.path().join("a.png"), &ImageGrid::filled(4, 4, 0.5).unwrap()).unwrap();
        save_mask(&dir.path().join("a_mask.png"), &LesionMask::zeros(4, 5)).unwrap();
        let mut m = DatasetManifest::new(Modality::Phantom, dir.path());
        m.entries.push(ManifestEntry {
            id: "case-a".into(),
            image: "a.png".into(),
            mask: "a_mask.png".into(),
            healthy_truth: None,
            split: Split::Train,
        });
        let err = load_all(&m).unwrap_err();
        assert!(err.to_string().contains("case-a"), "{err}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let samples = make_phantom(1, (32, 32), 2, 0.4).unwrap();
        let mut m = save_phantom_dataset(dir.path(), &samples, 0.0).unwrap();
        m.entries[1].id = m.entries[0].id.clone();
        assert!(m.validate().is_err());
    }
}
