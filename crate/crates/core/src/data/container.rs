//! Portable on-disk container: 16-bit grayscale PNG slices.
//!
//! A 2D grid in `[0, 1]` is stored as `round(v * 65535)`. A volume is a
//! directory holding `volume.json` (shape, spacing, and the affine
//! `value = offset + scale * k` mapping stored levels back to scanner
//! units) plus one PNG per slice. Masks are 8-bit PNGs where any nonzero
//! level means lesion.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::phantom::{dequantize, quantize, QUANT_LEVELS};
use super::volume::Volume;
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, LesionMask};

pub const VOLUME_HEADER: &str = "volume.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub id: String,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub scale: f64,
    pub offset: f64,
    pub slices: Vec<String>,
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Load {
        id: path.display().to_string(),
        reason: e.to_string(),
    }
}

/// Reads a grayscale PNG as 16-bit levels (8-bit input is widened by 257).
pub fn read_png_levels(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(png_err(path, format!("expected grayscale, got {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let levels = match info.bit_depth {
        png::BitDepth::Sixteen => buf[..2 * w * h]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect(),
        png::BitDepth::Eight => buf[..w * h].iter().map(|&b| b as u16 * 257).collect(),
        other => return Err(png_err(path, format!("unsupported bit depth {other:?}"))),
    };
    Ok((h, w, levels))
}

fn write_png(path: &Path, h: usize, w: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub fn write_png_levels(path: &Path, h: usize, w: usize, levels: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = levels.iter().flat_map(|k| k.to_be_bytes()).collect();
    write_png(path, h, w, png::BitDepth::Sixteen, &bytes)
}

pub fn save_grid(path: &Path, grid: &ImageGrid) -> Result<()> {
    let levels: Vec<u16> = grid.pixels().iter().map(|&v| quantize(v)).collect();
    write_png_levels(path, grid.height(), grid.width(), &levels)
}

pub fn load_grid(path: &Path) -> Result<ImageGrid> {
    let (h, w, levels) = read_png_levels(path)?;
    ImageGrid::new(h, w, levels.into_iter().map(dequantize).collect())
}

pub fn save_mask(path: &Path, mask: &LesionMask) -> Result<()> {
    let bytes: Vec<u8> = mask.pixels().iter().map(|&m| m * 255).collect();
    write_png(path, mask.height(), mask.width(), png::BitDepth::Eight, &bytes)
}

pub fn load_mask(path: &Path) -> Result<LesionMask> {
    let (h, w, levels) = read_png_levels(path)?;
    LesionMask::new(h, w, levels.into_iter().map(|k| u8::from(k > 0)).collect())
}

/// Writes a volume directory. Levels span the volume's min..max range.
pub fn save_volume(dir: &Path, v: &Volume) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (lo, hi) = v.min_max();
    let scale = if hi > lo { (hi - lo) / QUANT_LEVELS } else { 1.0 };
    let mut slices = Vec::with_capacity(v.depth);
    for z in 0..v.depth {
        let name = format!("slice_{z:04}.png");
        let levels: Vec<u16> = v
            .slice(z)
            .iter()
            .map(|&x| ((x - lo) / scale).round().clamp(0.0, QUANT_LEVELS) as u16)
            .collect();
        write_png_levels(&dir.join(&name), v.height, v.width, &levels)?;
        slices.push(name);
    }
    let header = VolumeHeader {
        id: v.id.clone(),
        shape: [v.depth, v.height, v.width],
        spacing: v.spacing,
        scale,
        offset: lo,
        slices,
    };
    let path = dir.join(VOLUME_HEADER);
    fs::write(&path, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&path, e))
}

fn read_header(dir: &Path) -> Result<VolumeHeader> {
    let path = dir.join(VOLUME_HEADER);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Loads a volume directory, or a single PNG as a one-slice volume with
/// values `k / 65535`.
pub fn load_volume(path: &Path) -> Result<Volume> {
    if path.is_dir() {
        let header = read_header(path)?;
        let [d, h, w] = header.shape;
        if header.slices.len() != d {
            return Err(png_err(path, "slice count does not match shape"));
        }
        let mut voxels = Vec::with_capacity(d * h * w);
        for name in &header.slices {
            let p = path.join(name);
            let (sh, sw, levels) = read_png_levels(&p)?;
            if (sh, sw) != (h, w) {
                return Err(png_err(&p, format!("slice is {sh}x{sw}, header says {h}x{w}")));
            }
            voxels.extend(levels.into_iter().map(|k| header.offset + header.scale * k as f64));
        }
        Volume::new(header.id, header.shape, header.spacing, voxels)
    } else {
        let (h, w, levels) = read_png_levels(path)?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Volume::new(id, [1, h, w], [1.0; 3], levels.into_iter().map(dequantize).collect())
    }
}

/// Loads per-slice masks from a mask volume directory or a single PNG.
pub fn load_mask_slices(path: &Path) -> Result<Vec<LesionMask>> {
    if path.is_dir() {
        let header = read_header(path)?;
        header
            .slices
            .iter()
            .map(|name| load_mask(&path.join(name)))
            .collect()
    } else {
        Ok(vec![load_mask(path)?])
    }
}

/// Lists `*.png` files in a directory, sorted by file name.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}
