//! Evaluation metrics and bucketed report aggregation.
//!
//! Pixel values are mapped from the internal [0, 1] domain to the 0-255
//! scale by multiplication, without rounding. PSNR is averaged per image
//! across a set, never recomputed from a mean MSE.

use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};
use serde::{Deserialize, Serialize};

/// PSNR is capped at 100 dB once MSE drops below 255^2 * 1e-10.
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 255.0 * 255.0 * 1e-10;

/// Mean squared difference over all pixels and channels, 0-255 scale.
pub fn mse(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "mse: shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.numel() as f64;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = (a as f64 - b as f64) * 255.0;
            d * d
        })
        .sum();
    Ok(sum / n)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < PSNR_MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        10.0 * (255.0 * 255.0 / mse).log10()
    }
}

pub fn psnr(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?))
}

/// Mean squared difference over foreground pixels only (channel count in
/// the denominator, so a full-image mask reproduces `mse` exactly).
pub fn fmse(pred: &Tensor<f32>, target: &Tensor<f32>, mask: &Mask) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::invalid(format!(
            "fmse: shape mismatch {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (c, h, w) = pred.dims3()?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::invalid("fmse: mask dims mismatch"));
    }
    let area = mask.area();
    if area == 0 {
        return Err(Error::EmptyForeground);
    }
    let plane = h * w;
    let mut sum = 0.0f64;
    for ch in 0..c {
        for idx in 0..plane {
            if mask.data()[idx] == 1 {
                let d = (pred.data()[ch * plane + idx] as f64
                    - target.data()[ch * plane + idx] as f64)
                    * 255.0;
                sum += d * d;
            }
        }
    }
    Ok(sum / (c * area) as f64)
}

/// Foreground-ratio buckets used by the ratio table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RatioBucket {
    #[serde(rename = "0%-5%")]
    UpTo5,
    #[serde(rename = "5%-15%")]
    UpTo15,
    #[serde(rename = "15%-100%")]
    Above15,
}

impl RatioBucket {
    pub fn of(ratio: f64) -> RatioBucket {
        if ratio < 0.05 {
            RatioBucket::UpTo5
        } else if ratio < 0.15 {
            RatioBucket::UpTo15
        } else {
            RatioBucket::Above15
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RatioBucket::UpTo5 => "0%-5%",
            RatioBucket::UpTo15 => "5%-15%",
            RatioBucket::Above15 => "15%-100%",
        }
    }

    pub const ALL: [RatioBucket; 3] = [RatioBucket::UpTo5, RatioBucket::UpTo15, RatioBucket::Above15];
}

/// One evaluated image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub id: String,
    pub tag: String,
    pub foreground_ratio: f64,
    pub mse: f64,
    pub psnr: f64,
    pub fmse: f64,
}

impl MetricsRow {
    pub fn compute(
        id: impl Into<String>,
        tag: impl Into<String>,
        pred: &Tensor<f32>,
        target: &Tensor<f32>,
        mask: &Mask,
    ) -> Result<MetricsRow> {
        let m = mse(pred, target)?;
        Ok(MetricsRow {
            id: id.into(),
            tag: tag.into(),
            foreground_ratio: mask.foreground_ratio(),
            mse: m,
            psnr: psnr_from_mse(m),
            fmse: fmse(pred, target, mask)?,
        })
    }

    pub fn bucket(&self) -> RatioBucket {
        RatioBucket::of(self.foreground_ratio)
    }
}

/// Arithmetic means over a group of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mse: f64,
    pub psnr: f64,
    pub fmse: f64,
}

impl Aggregate {
    fn of(rows: &[&MetricsRow]) -> Aggregate {
        let n = rows.len() as f64;
        Aggregate {
            count: rows.len(),
            mse: rows.iter().map(|r| r.mse).sum::<f64>() / n,
            psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            fmse: rows.iter().map(|r| r.fmse).sum::<f64>() / n,
        }
    }
}

/// Per-image rows plus the two aggregate tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    /// Per sub-dataset tag, sorted by tag, plus an "All" entry at the end.
    pub by_tag: Vec<(String, Aggregate)>,
    /// Per foreground-ratio bucket (only buckets that occur), plus "All".
    pub by_bucket: Vec<(String, Aggregate)>,
    pub all: Aggregate,
}

/// Group rows by sub-dataset tag and by foreground-ratio bucket.
pub fn aggregate_report(rows: Vec<MetricsRow>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(Error::invalid("aggregate_report: no rows"));
    }
    let all = Aggregate::of(&rows.iter().collect::<Vec<_>>());

    let mut tags: Vec<String> = rows.iter().map(|r| r.tag.clone()).collect();
    tags.sort();
    tags.dedup();
    let by_tag = tags
        .into_iter()
        .map(|t| {
            let group: Vec<&MetricsRow> = rows.iter().filter(|r| r.tag == t).collect();
            (t, Aggregate::of(&group))
        })
        .chain(std::iter::once(("All".to_string(), all.clone())))
        .collect();

    let by_bucket = RatioBucket::ALL
        .iter()
        .filter_map(|b| {
            let group: Vec<&MetricsRow> = rows.iter().filter(|r| r.bucket() == *b).collect();
            if group.is_empty() {
                None
            } else {
                Some((b.label().to_string(), Aggregate::of(&group)))
            }
        })
        .chain(std::iter::once(("All".to_string(), all.clone())))
        .collect();

    Ok(MetricsReport {
        rows,
        by_tag,
        by_bucket,
        all,
    })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id\ttag\tforeground_ratio\tmse\tpsnr\tfmse\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.id, r.tag, r.foreground_ratio, r.mse, r.psnr, r.fmse
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f32) -> Tensor<f32> {
        let mut data = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[c * h * w + y * w + x] = f(c, y, x);
                }
            }
        }
        Tensor::new(vec![3, h, w], data).unwrap()
    }

    #[test]
    fn mse_identical_and_shifted() {
        let a = img(8, 8, |_, y, x| ((y + x) % 7) as f32 / 10.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        // +16/255 everywhere -> (16)^2 = 256 on the 0-255 scale
        let b = a.map(|v| v + 16.0 / 255.0);
        assert!((mse(&b, &a).unwrap() - 256.0).abs() < 1e-9);
        let c = Tensor::<f32>::zeros(vec![3, 4, 4]);
        assert!(mse(&a, &c).is_err());
    }

    #[test]
    fn mse_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = img(9, 7, |_, _, _| rng.random_range(0.0..1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = img(9, 7, |_, _, _| rng.random_range(0.0..1.0));
        let got = mse(&a, &b).unwrap();
        let mut sum = 0.0f64;
        let mut n = 0usize;
        for c in 0..3 {
            for y in 0..9 {
                for x in 0..7 {
                    let idx = c * 63 + y * 7 + x;
                    let d = (a.data()[idx] as f64 - b.data()[idx] as f64) * 255.0;
                    sum += d * d;
                    n += 1;
                }
            }
        }
        let expect = sum / n as f64;
        assert!((got - expect).abs() / expect.max(1e-12) < 1e-6);
    }

    #[test]
    fn psnr_cap_zero_point_and_formula() {
        assert_eq!(psnr_from_mse(0.0), 100.0);
        assert_eq!(psnr_from_mse(255.0 * 255.0), 0.0);
        // a pair constructed to have a usable mid-range mse
        let expect = 10.0 * (255.0f64 * 255.0 / 172.47).log10();
        assert!((psnr_from_mse(172.47) - expect).abs() < 1e-12);
        assert!((psnr_from_mse(172.47) - 25.76).abs() < 0.01);
    }

    #[test]
    fn psnr_is_monotone_in_perturbation() {
        let a = img(8, 8, |_, y, x| ((y * 8 + x) % 11) as f32 / 16.0);
        let mut last = f64::INFINITY;
        for mag in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let b = a.map(|v| (v + mag).min(2.0));
            let p = psnr(&b, &a).unwrap();
            assert!(p < last, "psnr must strictly decrease");
            last = p;
        }
    }

    #[test]
    fn fmse_full_mask_equals_mse_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = img(6, 6, |_, _, _| rng.random_range(0.0..1.0));
        let b = img(6, 6, |c, y, x| ((c + y + x) % 5) as f32 / 5.0);
        let full = Mask::filled(6, 6);
        assert_eq!(fmse(&a, &b, &full).unwrap(), mse(&a, &b).unwrap());
    }

    #[test]
    fn fmse_ignores_error_outside_mask() {
        let target = img(8, 8, |_, _, _| 0.5);
        let mut pred = target.clone();
        // error only in the right half
        for c in 0..3 {
            for y in 0..8 {
                for x in 4..8 {
                    pred.data_mut()[c * 64 + y * 8 + x] = 0.9;
                }
            }
        }
        let mut left = Mask::zeros(8, 8);
        for y in 0..8 {
            for x in 0..4 {
                left.set(y, x, 1);
            }
        }
        assert_eq!(fmse(&pred, &target, &left).unwrap(), 0.0);
        let empty = Mask::zeros(8, 8);
        assert!(matches!(
            fmse(&pred, &target, &empty),
            Err(Error::EmptyForeground)
        ));
    }

    #[test]
    fn aggregate_single_row_is_identity() {
        let row = MetricsRow {
            id: "a".into(),
            tag: "HCOCO".into(),
            foreground_ratio: 0.2,
            mse: 10.0,
            psnr: 38.0,
            fmse: 100.0,
        };
        let rep = aggregate_report(vec![row.clone()]).unwrap();
        assert_eq!(rep.all.mse, row.mse);
        assert_eq!(rep.by_tag.len(), 2); // HCOCO + All
        assert_eq!(rep.by_bucket.len(), 2); // 15%-100% + All
    }

    #[test]
    fn aggregate_two_rows_in_distinct_buckets() {
        let mk = |id: &str, ratio: f64, mse: f64| MetricsRow {
            id: id.into(),
            tag: "T".into(),
            foreground_ratio: ratio,
            mse,
            psnr: psnr_from_mse(mse),
            fmse: mse,
        };
        let rep = aggregate_report(vec![mk("a", 0.02, 10.0), mk("b", 0.5, 30.0)]).unwrap();
        assert_eq!(rep.all.mse, 20.0);
        let buckets: Vec<&str> = rep.by_bucket.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(buckets, vec!["0%-5%", "15%-100%", "All"]);
        assert_eq!(rep.by_bucket[0].1.mse, 10.0);
        assert_eq!(rep.by_bucket[1].1.mse, 30.0);
    }

    #[test]
    fn aggregation_matches_group_by_oracle_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tags = ["HCOCO", "HAdobe5k", "HFlickr", "Hday2night"];
        let mut rows = Vec::new();
        for i in 0..1000 {
            let m = rng.random_range(0.0..400.0);
            rows.push(MetricsRow {
                id: format!("r{i}"),
                tag: tags[rng.random_range(0..tags.len())].into(),
                foreground_ratio: rng.random_range(0.001..1.0),
                mse: m,
                psnr: psnr_from_mse(m),
                fmse: m * rng.random_range(1.0..8.0),
            });
        }
        let rep = aggregate_report(rows.clone()).unwrap();

        // independent group-by/mean oracle
        for (tag, agg) in &rep.by_tag {
            let group: Vec<&MetricsRow> = if tag == "All" {
                rows.iter().collect()
            } else {
                rows.iter().filter(|r| &r.tag == tag).collect()
            };
            let mean = |f: fn(&MetricsRow) -> f64| {
                group.iter().map(|r| f(r)).sum::<f64>() / group.len() as f64
            };
            assert!((agg.mse - mean(|r| r.mse)).abs() < 1e-9);
            assert!((agg.psnr - mean(|r| r.psnr)).abs() < 1e-9);
            assert!((agg.fmse - mean(|r| r.fmse)).abs() < 1e-9);
        }

        let mut shuffled = rows.clone();
        shuffled.shuffle(&mut rng);
        let rep2 = aggregate_report(shuffled).unwrap();
        assert_eq!(rep.all, rep2.all);
        for ((n1, a1), (n2, a2)) in rep.by_bucket.iter().zip(&rep2.by_bucket) {
            assert_eq!(n1, n2);
            assert_eq!(a1, a2);
        }
    }
}
