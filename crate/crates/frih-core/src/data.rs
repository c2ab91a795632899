//! Dataset ingestion: manifest-driven triplets, image I/O, composite synthesis.

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};
use image::imageops::FilterType;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// One training/evaluation triplet: composite, foreground mask, ground truth.
#[derive(Debug, Clone)]
pub struct CompositeSample {
    pub id: String,
    pub tag: String,
    /// 3 x H x W in [0, 1]
    pub composite: Tensor<f32>,
    /// 1-valued where the implanted foreground sits
    pub mask: Mask,
    /// 3 x H x W in [0, 1]
    pub target: Tensor<f32>,
}

impl CompositeSample {
    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.composite.dims3()?;
        let (tc, th, tw) = self.target.dims3()?;
        if c != 3 || tc != 3 {
            return Err(Error::invalid(format!("sample {}: images must have 3 channels", self.id)));
        }
        if (h, w) != (th, tw) || (self.mask.height(), self.mask.width()) != (h, w) {
            return Err(Error::invalid(format!("sample {}: dimension mismatch", self.id)));
        }
        if self.mask.is_empty() {
            return Err(Error::EmptyForeground);
        }
        Ok(())
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.mask.height(), self.mask.width())
    }

    pub fn foreground_ratio(&self) -> f64 {
        self.mask.foreground_ratio()
    }
}

/// One manifest record; paths are stored as written and resolved against
/// the manifest's directory when relative.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub composite: PathBuf,
    pub mask: PathBuf,
    pub target: PathBuf,
    pub tag: String,
}

impl ManifestEntry {
    pub fn id(&self) -> String {
        self.composite.to_string_lossy().into_owned()
    }
}

/// Tab-separated, one record per line: composite, mask, target, tag.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::data(
                    path.display().to_string(),
                    format!("line {}: expected 4 tab-separated columns, got {}", lineno + 1, cols.len()),
                ));
            }
            let entry = ManifestEntry {
                composite: PathBuf::from(cols[0]),
                mask: PathBuf::from(cols[1]),
                target: PathBuf::from(cols[2]),
                tag: cols[3].to_string(),
            };
            if !seen.insert(entry.id()) {
                return Err(Error::data(
                    path.display().to_string(),
                    format!("line {}: duplicate id {}", lineno + 1, entry.id()),
                ));
            }
            entries.push(entry);
        }
        Ok(Manifest { entries, root })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.composite.display(),
                e.mask.display(),
                e.target.display(),
                e.tag
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

fn open_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    match img.color() {
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16 => {
            Err(Error::data(
                path.display().to_string(),
                "grayscale image where 3 channels are required",
            ))
        }
        _ => Ok(img.to_rgb8()),
    }
}

fn open_mask(path: &Path) -> Result<image::GrayImage> {
    let img = image::open(path).map_err(|e| Error::data(path.display().to_string(), e.to_string()))?;
    Ok(img.to_luma8())
}

/// Interleaved u8 RGB -> planar [0,1] float tensor.
pub fn tensor_from_rgb8(img: &image::RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (idx, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + idx] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image dims positive")
}

/// Planar [0,1] float tensor -> interleaved u8 RGB (rounded, clamped).
pub fn rgb8_from_tensor(t: &Tensor<f32>) -> Result<image::RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::invalid("rgb8_from_tensor: need 3 channels"));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (idx, px) in img.pixels_mut().enumerate() {
        for ch in 0..3 {
            px.0[ch] = (t.data()[ch * h * w + idx].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(img)
}

pub fn mask_from_gray(img: &image::GrayImage) -> Mask {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| u8::from(p.0[0] > 127)).collect();
    Mask::new(h, w, data).expect("thresholded values are binary")
}

pub fn gray_from_mask(mask: &Mask) -> image::GrayImage {
    let mut img = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for (idx, px) in img.pixels_mut().enumerate() {
        px.0[0] = mask.data()[idx] * 255;
    }
    img
}

pub fn save_png(img: &image::RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| Error::data(path.display().to_string(), e.to_string()))
}

/// Load one manifest record. Images are bilinearly resized to
/// `resolution` (when given), the mask nearest-neighbor resized and
/// re-thresholded. Returns `None` when the foreground vanishes after
/// resizing — the caller decides whether to warn or fail.
pub fn load_sample(
    manifest: &Manifest,
    entry: &ManifestEntry,
    resolution: Option<usize>,
) -> Result<Option<CompositeSample>> {
    let mut comp = open_rgb(&manifest.resolve(&entry.composite))?;
    let mut target = open_rgb(&manifest.resolve(&entry.target))?;
    let mut mask_img = open_mask(&manifest.resolve(&entry.mask))?;
    if comp.dimensions() != target.dimensions() || comp.dimensions() != mask_img.dimensions() {
        return Err(Error::data(
            entry.id(),
            format!(
                "triplet dimensions disagree: composite {:?}, target {:?}, mask {:?}",
                comp.dimensions(),
                target.dimensions(),
                mask_img.dimensions()
            ),
        ));
    }
    if let Some(r) = resolution {
        let r = r as u32;
        if comp.dimensions() != (r, r) {
            comp = image::imageops::resize(&comp, r, r, FilterType::Triangle);
            target = image::imageops::resize(&target, r, r, FilterType::Triangle);
            mask_img = image::imageops::resize(&mask_img, r, r, FilterType::Nearest);
        }
    }
    let mask = mask_from_gray(&mask_img);
    if mask.is_empty() {
        return Ok(None);
    }
    let sample = CompositeSample {
        id: entry.id(),
        tag: entry.tag.clone(),
        composite: tensor_from_rgb8(&comp),
        mask,
        target: tensor_from_rgb8(&target),
    };
    sample.validate()?;
    Ok(Some(sample))
}

/// Load a whole manifest, skipping entries whose foreground vanished.
/// Order follows the file exactly.
pub fn load_dataset(manifest: &Manifest, resolution: Option<usize>) -> Result<Vec<CompositeSample>> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        match load_sample(manifest, entry, resolution)? {
            Some(s) => out.push(s),
            None => log::warn!("skipping {}: empty foreground after resize", entry.id()),
        }
    }
    Ok(out)
}

/// Per-channel affine plus shared gamma applied to the foreground.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Jitter {
    pub gain: [f32; 3],
    pub bias: [f32; 3],
    pub gamma: f32,
}

impl Jitter {
    pub const IDENTITY: Jitter = Jitter {
        gain: [1.0; 3],
        bias: [0.0; 3],
        gamma: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for c in 0..3 {
            if !(0.5..=1.5).contains(&self.gain[c]) {
                return Err(Error::invalid(format!("jitter gain {} out of [0.5, 1.5]", self.gain[c])));
            }
            if !(-0.2..=0.2).contains(&self.bias[c]) {
                return Err(Error::invalid(format!("jitter bias {} out of [-0.2, 0.2]", self.bias[c])));
            }
        }
        if !(0.5..=2.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("jitter gamma {} out of [0.5, 2.0]", self.gamma)));
        }
        Ok(())
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Jitter {
        Jitter {
            gain: [
                rng.random_range(0.5..=1.5),
                rng.random_range(0.5..=1.5),
                rng.random_range(0.5..=1.5),
            ],
            bias: [
                rng.random_range(-0.2..=0.2),
                rng.random_range(-0.2..=0.2),
                rng.random_range(-0.2..=0.2),
            ],
            gamma: rng.random_range(0.5..=2.0),
        }
    }
}

/// Build an inharmonious composite from a ground-truth image: the foreground
/// channels become clamp((t^gamma) * gain + bias), the background is copied
/// bit-exact. With `jitter` unset the transform is drawn from `seed`.
pub fn synthesize_composite(
    target: &Tensor<f32>,
    mask: &Mask,
    jitter: Option<Jitter>,
    seed: u64,
) -> Result<CompositeSample> {
    let (c, h, w) = target.dims3()?;
    if c != 3 {
        return Err(Error::invalid("synthesize_composite: target must be 3xHxW"));
    }
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::invalid("synthesize_composite: mask dims mismatch"));
    }
    if mask.is_empty() {
        return Err(Error::invalid("synthesize_composite: empty mask"));
    }
    let jitter = match jitter {
        Some(j) => j,
        None => Jitter::sample(&mut ChaCha8Rng::seed_from_u64(seed)),
    };
    jitter.validate()?;

    let mut composite = target.clone();
    let plane = h * w;
    for ch in 0..3 {
        let (gain, bias) = (jitter.gain[ch], jitter.bias[ch]);
        for idx in 0..plane {
            if mask.data()[idx] == 1 {
                let t = target.data()[ch * plane + idx];
                composite.data_mut()[ch * plane + idx] =
                    (t.powf(jitter.gamma) * gain + bias).clamp(0.0, 1.0);
            }
        }
    }
    Ok(CompositeSample {
        id: format!("synth-{seed}"),
        tag: "synth".into(),
        composite,
        mask: mask.clone(),
        target: target.clone(),
    })
}
