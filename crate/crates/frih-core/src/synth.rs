//! Desk-scale synthetic dataset generation.
//!
//! Targets are procedural when no source directory is given: a smooth
//! background gradient with a foreground region carrying one to three flat
//! color blocks, so the clustering stage has real structure to find. The
//! composite jitters the foreground; the target stays the ground truth.

use crate::data::{
    gray_from_mask, rgb8_from_tensor, save_png, synthesize_composite, CompositeSample, Manifest,
    ManifestEntry,
};
use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Build one procedural ground-truth image and its foreground mask.
pub fn procedural_target(resolution: usize, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Mask) {
    let r = resolution;
    // background: axis-aligned two-color gradient, quantized to u8 levels
    let c0: [f32; 3] = [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ];
    let c1: [f32; 3] = [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
    ];
    let horizontal = rng.random_bool(0.5);
    let mut data = vec![0.0f32; 3 * r * r];
    for y in 0..r {
        for x in 0..r {
            let t = if horizontal {
                x as f32 / (r - 1) as f32
            } else {
                y as f32 / (r - 1) as f32
            };
            for ch in 0..3 {
                let v = c0[ch] + (c1[ch] - c0[ch]) * t;
                data[ch * r * r + y * r + x] = (v * 255.0).round() / 255.0;
            }
        }
    }

    // foreground: a rectangle covering roughly 10-45% of the image
    let fw = rng.random_range(r / 3..=2 * r / 3);
    let fh = rng.random_range(r / 3..=2 * r / 3);
    let x0 = rng.random_range(0..=r - fw);
    let y0 = rng.random_range(0..=r - fh);
    let mut mask = Mask::zeros(r, r);
    for y in y0..y0 + fh {
        for x in x0..x0 + fw {
            mask.set(y, x, 1);
        }
    }

    // one to three flat color blocks inside the foreground (vertical bands)
    let blocks = rng.random_range(1..=3usize);
    let mut colors = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        colors.push([
            (rng.random_range(0.05..0.95f32) * 255.0).round() / 255.0,
            (rng.random_range(0.05..0.95f32) * 255.0).round() / 255.0,
            (rng.random_range(0.05..0.95f32) * 255.0).round() / 255.0,
        ]);
    }
    for y in y0..y0 + fh {
        for x in x0..x0 + fw {
            let band = ((x - x0) * blocks / fw).min(blocks - 1);
            for ch in 0..3 {
                data[ch * r * r + y * r + x] = colors[band][ch];
            }
        }
    }
    (
        Tensor::new(vec![3, r, r], data).expect("positive extents"),
        mask,
    )
}

/// Generate `count` triplets into `out_dir` and write `manifest.tsv`.
/// With `source_dir` set, ground truths come from resized images found
/// there (cycled) instead of the procedural generator.
pub fn generate_set(
    out_dir: &Path,
    source_dir: Option<&Path>,
    count: usize,
    resolution: usize,
    seed: u64,
) -> Result<PathBuf> {
    if count == 0 {
        return Err(Error::invalid("synth-data: count must be >= 1"));
    }
    std::fs::create_dir_all(out_dir)?;

    let sources: Vec<PathBuf> = match source_dir {
        None => Vec::new(),
        Some(dir) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::data(dir.display().to_string(), e.to_string()))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|s| s.to_str()),
                        Some("png") | Some("jpg") | Some("jpeg")
                    )
                })
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::data(
                    dir.display().to_string(),
                    "no .png/.jpg images found",
                ));
            }
            files
        }
    };

    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64));
        let (target, mask) = if sources.is_empty() {
            procedural_target(resolution, &mut rng)
        } else {
            let path = &sources[i % sources.len()];
            let img = image::open(path)
                .map_err(|e| Error::data(path.display().to_string(), e.to_string()))?
                .to_rgb8();
            let img = image::imageops::resize(
                &img,
                resolution as u32,
                resolution as u32,
                image::imageops::FilterType::Triangle,
            );
            let target = crate::data::tensor_from_rgb8(&img);
            let (_, m) = procedural_target(resolution, &mut rng);
            (target, m)
        };
        let sample = synthesize_composite(&target, &mask, None, seed.wrapping_add(i as u64))?;

        let stem = format!("{i:05}");
        save_png(
            &rgb8_from_tensor(&sample.composite)?,
            &out_dir.join(format!("{stem}_composite.png")),
        )?;
        gray_from_mask(&mask)
            .save(out_dir.join(format!("{stem}_mask.png")))
            .map_err(|e| Error::data(format!("{stem}_mask.png"), e.to_string()))?;
        save_png(
            &rgb8_from_tensor(&target)?,
            &out_dir.join(format!("{stem}_target.png")),
        )?;
        entries.push(ManifestEntry {
            composite: format!("{stem}_composite.png").into(),
            mask: format!("{stem}_mask.png").into(),
            target: format!("{stem}_target.png").into(),
            tag: "synth".into(),
        });
    }

    let manifest = Manifest {
        entries,
        root: out_dir.to_path_buf(),
    };
    let path = out_dir.join("manifest.tsv");
    manifest.write(&path)?;
    Ok(path)
}

/// In-memory variant used by tests: the same generator without file I/O.
pub fn generate_samples(count: usize, resolution: usize, seed: u64) -> Result<Vec<CompositeSample>> {
    (0..count)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64));
            let (target, mask) = procedural_target(resolution, &mut rng);
            let mut s = synthesize_composite(&target, &mask, None, seed.wrapping_add(i as u64))?;
            s.id = format!("synth-{i:05}");
            Ok(s)
        })
        .collect()
}
