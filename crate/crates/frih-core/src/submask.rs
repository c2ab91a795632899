//! Adaptive submask extraction.
//!
//! Foreground pixels are clustered by their RGB values with a density-peaks
//! scheme: a color's density counts how many other foreground pixels sit
//! within the cutoff distance, its separation is the distance to the nearest
//! denser color, and centers are the high-separation, high-density colors.
//! Identical RGB values are deduplicated and weighted by pixel count, which
//! reproduces the pixel-level sums exactly while keeping the pair loop at
//! O(unique colors squared).
//!
//! All tie-breaks resolve by (higher density, lexicographically smaller RGB)
//! so the partition is a pure function of the pixel multiset.

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};
use rayon::prelude::*;
use std::collections::HashMap;

pub type Rgb = [u8; 3];

/// Hard ceiling on the number of submasks.
pub const MAX_CENTERS: usize = 10;

/// A candidate center must have strictly more than this many neighbors,
/// otherwise it is an isolated outlier.
pub const OUTLIER_DENSITY: u64 = 10;

/// Unique-color budget; above it channels are quantized to 5 bits.
pub const MAX_UNIQUE_COLORS: usize = 4096;

/// One distinct foreground color with its clustering statistics.
#[derive(Debug, Clone)]
pub struct ColorPoint {
    pub rgb: Rgb,
    /// Foreground pixels carrying exactly this RGB.
    pub count: u32,
    /// Weighted neighbor count within the cutoff (self excluded).
    pub rho: u64,
    /// Distance to the nearest denser color, in [0, 1].
    pub delta: f64,
}

/// The K binary submasks partitioning the foreground, plus diagnostics.
#[derive(Debug, Clone)]
pub struct SubmaskSet {
    pub submasks: Vec<Mask>,
    pub centers: Vec<Rgb>,
    pub center_rho: Vec<u64>,
    pub center_delta: Vec<f64>,
    pub dc: f64,
    /// Per-pixel labels: 0 = background, i = submask i (1-based).
    pub labels: Vec<u8>,
}

impl SubmaskSet {
    pub fn k(&self) -> usize {
        self.submasks.len()
    }

    /// Union of all submasks.
    pub fn union(&self) -> Mask {
        let h = self.submasks[0].height();
        let w = self.submasks[0].width();
        let mut data = vec![0u8; h * w];
        for m in &self.submasks {
            for (d, &v) in data.iter_mut().zip(m.data()) {
                *d |= v;
            }
        }
        Mask::new(h, w, data).expect("binary by construction")
    }
}

/// Normalized euclidean distance between two RGB triples, in [0, 1].
pub fn color_distance(a: Rgb, b: Rgb) -> f64 {
    let dr = a[0] as f64 - b[0] as f64;
    let dg = a[1] as f64 - b[1] as f64;
    let db = a[2] as f64 - b[2] as f64;
    (dr * dr + dg * dg + db * db).sqrt() / (255.0 * 3f64.sqrt())
}

/// `b` counts as denser than `a` under the deterministic total order.
fn denser(rho_b: u64, rgb_b: Rgb, rho_a: u64, rgb_a: Rgb) -> bool {
    rho_b > rho_a || (rho_b == rho_a && rgb_b < rgb_a)
}

/// Weighted density per color: pixels of other colors within `dc`, plus the
/// color's own companions (self-pair excluded).
pub fn compute_density(colors: &[(Rgb, u32)], dc: f64) -> Result<Vec<u64>> {
    if colors.is_empty() {
        return Err(Error::invalid("compute_density: empty color list"));
    }
    if !(dc > 0.0 && dc <= 1.0) {
        return Err(Error::invalid(format!("compute_density: d_c {dc} not in (0, 1]")));
    }
    let one = |i: usize| -> u64 {
        let (rgb_i, count_i) = colors[i];
        let mut rho = (count_i - 1) as u64;
        for (j, &(rgb_j, count_j)) in colors.iter().enumerate() {
            if j != i && color_distance(rgb_i, rgb_j) < dc {
                rho += count_j as u64;
            }
        }
        rho
    };
    if colors.len() > 512 {
        Ok((0..colors.len()).into_par_iter().map(one).collect())
    } else {
        Ok((0..colors.len()).map(one).collect())
    }
}

/// Distance from each color to its nearest denser color. The densest color
/// gets its maximum distance to any other color (0 when it is alone).
pub fn compute_delta(colors: &[(Rgb, u32)], rho: &[u64]) -> Vec<f64> {
    let one = |i: usize| -> f64 {
        let (rgb_i, _) = colors[i];
        let mut best: Option<f64> = None;
        let mut max_d = 0.0f64;
        for (j, &(rgb_j, _)) in colors.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = color_distance(rgb_i, rgb_j);
            max_d = max_d.max(d);
            if denser(rho[j], rgb_j, rho[i], rgb_i) {
                best = Some(best.map_or(d, |b: f64| b.min(d)));
            }
        }
        best.unwrap_or(max_d)
    };
    if colors.len() > 512 {
        (0..colors.len()).into_par_iter().map(one).collect()
    } else {
        (0..colors.len()).map(one).collect()
    }
}

/// Pick cluster centers: the up-to-10 distinct colors with the highest
/// separation are candidates, and candidates at or below the outlier density
/// are dropped. Falls back to the single densest color so K >= 1.
pub fn select_centers(points: &[ColorPoint]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .delta
            .partial_cmp(&points[a].delta)
            .unwrap()
            .then(points[b].rho.cmp(&points[a].rho))
            .then(points[a].rgb.cmp(&points[b].rgb))
    });
    let candidates = &order[..order.len().min(MAX_CENTERS)];
    let centers: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&i| points[i].rho > OUTLIER_DENSITY)
        .collect();
    if !centers.is_empty() {
        return centers;
    }
    // Tiny foregrounds can leave no candidate above the density floor.
    let densest = (0..points.len())
        .max_by(|&a, &b| {
            points[a]
                .rho
                .cmp(&points[b].rho)
                .then(points[b].rgb.cmp(&points[a].rgb))
        })
        .expect("non-empty points");
    vec![densest]
}

/// Assign every color to a cluster: centers seed their own, every other
/// color joins its nearest already-assigned denser color.
pub fn assign_clusters(points: &[ColorPoint], centers: &[usize]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[b]
            .rho
            .cmp(&points[a].rho)
            .then(points[a].rgb.cmp(&points[b].rgb))
    });
    let center_slot: HashMap<usize, usize> = centers
        .iter()
        .enumerate()
        .map(|(slot, &idx)| (idx, slot))
        .collect();

    let mut cluster = vec![usize::MAX; points.len()];
    for (pos, &i) in order.iter().enumerate() {
        if let Some(&slot) = center_slot.get(&i) {
            cluster[i] = slot;
            continue;
        }
        // Nearest among the strictly denser (= already processed) colors.
        let mut best_j = usize::MAX;
        let mut best_d = f64::INFINITY;
        for &j in &order[..pos] {
            let d = color_distance(points[i].rgb, points[j].rgb);
            if d < best_d || (d == best_d && best_j != usize::MAX && points[j].rgb < points[best_j].rgb)
            {
                best_d = d;
                best_j = j;
            }
        }
        debug_assert!(best_j != usize::MAX, "first processed color must be a center");
        cluster[i] = cluster[best_j];
    }
    cluster
}

fn quantize5(rgb: Rgb) -> Rgb {
    [rgb[0] & 0xF8, rgb[1] & 0xF8, rgb[2] & 0xF8]
}

fn pixel_rgb(composite: &Tensor<f32>, plane: usize, idx: usize) -> Rgb {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [
        to_u8(composite.data()[idx]),
        to_u8(composite.data()[plane + idx]),
        to_u8(composite.data()[2 * plane + idx]),
    ]
}

/// Run the full pipeline: dedup foreground colors, compute densities and
/// separations, select centers, assign clusters, and materialize submasks.
pub fn extract_submasks(composite: &Tensor<f32>, mask: &Mask, dc: f64) -> Result<SubmaskSet> {
    let (c, h, w) = composite.dims3()?;
    if c != 3 {
        return Err(Error::invalid(format!("extract_submasks: composite must have 3 channels, got {c}")));
    }
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::invalid(format!(
            "extract_submasks: mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            h,
            w
        )));
    }
    if !(dc > 0.0 && dc <= 1.0) {
        return Err(Error::invalid(format!("extract_submasks: d_c {dc} not in (0, 1]")));
    }
    if mask.is_empty() {
        return Err(Error::EmptyForeground);
    }

    let plane = h * w;
    let mut counts: HashMap<Rgb, u32> = HashMap::new();
    for idx in 0..plane {
        if mask.data()[idx] == 1 {
            *counts.entry(pixel_rgb(composite, plane, idx)).or_insert(0) += 1;
        }
    }
    let quantized = counts.len() > MAX_UNIQUE_COLORS;
    if quantized {
        let mut q: HashMap<Rgb, u32> = HashMap::new();
        for (rgb, n) in counts {
            *q.entry(quantize5(rgb)).or_insert(0) += n;
        }
        counts = q;
    }
    let mut colors: Vec<(Rgb, u32)> = counts.into_iter().collect();
    colors.sort_by(|a, b| a.0.cmp(&b.0));

    let rho = compute_density(&colors, dc)?;
    let delta = compute_delta(&colors, &rho);
    let points: Vec<ColorPoint> = colors
        .iter()
        .zip(rho.iter().zip(delta.iter()))
        .map(|(&(rgb, count), (&rho, &delta))| ColorPoint {
            rgb,
            count,
            rho,
            delta,
        })
        .collect();

    let centers = select_centers(&points);
    let cluster = assign_clusters(&points, &centers);

    let color_slot: HashMap<Rgb, usize> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.rgb, cluster[i]))
        .collect();

    let k = centers.len();
    let mut labels = vec![0u8; plane];
    let mut mask_data = vec![vec![0u8; plane]; k];
    for idx in 0..plane {
        if mask.data()[idx] == 1 {
            let mut rgb = pixel_rgb(composite, plane, idx);
            if quantized {
                rgb = quantize5(rgb);
            }
            let slot = color_slot[&rgb];
            labels[idx] = (slot + 1) as u8;
            mask_data[slot][idx] = 1;
        }
    }
    let submasks: Vec<Mask> = mask_data
        .into_iter()
        .map(|d| Mask::new(h, w, d).expect("binary by construction"))
        .collect();

    debug_assert_eq!(
        submasks.iter().map(|m| m.area()).sum::<usize>(),
        mask.area(),
        "submasks must partition the foreground"
    );

    Ok(SubmaskSet {
        centers: centers.iter().map(|&i| points[i].rgb).collect(),
        center_rho: centers.iter().map(|&i| points[i].rho).collect(),
        center_delta: centers.iter().map(|&i| points[i].delta).collect(),
        submasks,
        dc,
        labels,
    })
}
