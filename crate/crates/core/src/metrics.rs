//! Dice similarity (DSC) and 95th-percentile Hausdorff distance (HD95).
//!
//! Policies:
//! - boundary pixels are mask pixels with a 4-neighbour outside the mask; the
//!   image border counts as outside;
//! - HD95 is the nearest-rank 95th percentile (`⌈0.95·n⌉`-th order statistic)
//!   of the union of both directed boundary-distance sets;
//! - both masks empty gives DSC 1 / HD95 0; exactly one empty gives DSC 0 /
//!   HD95 equal to the image diagonal `√((h−1)² + (w−1)²)`.

use crate::error::{dim_err, IclError, Result};
use crate::tensor::LabelMap;

/// Binary mask of one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl ClassMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w || h == 0 || w == 0 {
            return Err(dim_err(
                "class mask",
                format!("{h}×{w} grid with {} entries", data.len()),
            ));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_labels(labels: &LabelMap, class: u8) -> Self {
        Self {
            h: labels.h,
            w: labels.w,
            data: labels.data.iter().map(|&c| c == class).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn get(&self, y: isize, x: isize) -> bool {
        y >= 0
            && x >= 0
            && (y as usize) < self.h
            && (x as usize) < self.w
            && self.data[y as usize * self.w + x as usize]
    }

    /// Boundary pixels as `(row, col)`, in row-major order.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.data[y * self.w + x] {
                    continue;
                }
                let (yi, xi) = (y as isize, x as isize);
                if !self.get(yi - 1, xi)
                    || !self.get(yi + 1, xi)
                    || !self.get(yi, xi - 1)
                    || !self.get(yi, xi + 1)
                {
                    out.push((y, x));
                }
            }
        }
        out
    }

    pub fn diagonal(&self) -> f64 {
        let (a, b) = ((self.h - 1) as f64, (self.w - 1) as f64);
        (a * a + b * b).sqrt()
    }
}

fn same_grid(a: &ClassMask, b: &ClassMask) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(dim_err(
            "metric",
            format!("masks are {}×{} and {}×{}", a.h, a.w, b.h, b.w),
        ));
    }
    Ok(())
}

pub fn dsc(pred: &ClassMask, gt: &ClassMask) -> Result<f64> {
    same_grid(pred, gt)?;
    let (p, g) = (pred.count(), gt.count());
    if p == 0 && g == 0 {
        return Ok(1.0);
    }
    let inter = pred
        .data
        .iter()
        .zip(&gt.data)
        .filter(|(a, b)| **a && **b)
        .count();
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

pub fn hd95(pred: &ClassMask, gt: &ClassMask) -> Result<f64> {
    same_grid(pred, gt)?;
    match (pred.is_empty(), gt.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(pred.diagonal()),
        _ => {}
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let to_gt = squared_distance_transform(gt.h, gt.w, &bg);
    let to_pred = squared_distance_transform(pred.h, pred.w, &bp);
    let mut d2: Vec<u64> = bp
        .iter()
        .map(|&(y, x)| to_gt[y * gt.w + x])
        .chain(bg.iter().map(|&(y, x)| to_pred[y * pred.w + x]))
        .collect();
    d2.sort_unstable();
    let rank = (d2.len() * 95).div_ceil(100);
    Ok((d2[rank - 1] as f64).sqrt())
}

const FAR: f64 = 1e18;

/// Exact squared Euclidean distance from every pixel to the nearest seed
/// (separable lower-envelope transform).
fn squared_distance_transform(h: usize, w: usize, seeds: &[(usize, usize)]) -> Vec<u64> {
    let mut f = vec![FAR; h * w];
    for &(y, x) in seeds {
        f[y * w + x] = 0.0;
    }
    let mut col = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = f[y * w + x];
        }
        let d = envelope_1d(&col);
        for y in 0..h {
            f[y * w + x] = d[y];
        }
    }
    let mut out = vec![0u64; h * w];
    for y in 0..h {
        let d = envelope_1d(&f[y * w..(y + 1) * w]);
        for x in 0..w {
            out[y * w + x] = d[x].round() as u64;
        }
    }
    out
}

fn envelope_1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0;
    // Skip leading cells with no finite value.
    let Some(first) = f.iter().position(|&x| x < FAR) else {
        return vec![FAR; n];
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if f[q] >= FAR {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is −∞, so this never steps below zero.
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut d = vec![0.0; n];
    let mut k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        *out = dq * dq + f[p];
    }
    d
}

/// Metrics of one foreground class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class: u8,
    pub dsc: f64,
    pub hd95: f64,
}

/// Per-class metrics averaged over cases, and their mean over foreground
/// classes.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeMetrics {
    pub per_class: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    pub mean_hd95: f64,
}

/// Foreground-class metrics of each case (one 2-D image is one case).
pub fn evaluate_cases(
    pred: &[LabelMap],
    gt: &[LabelMap],
    classes: usize,
) -> Result<Vec<Vec<ClassMetrics>>> {
    if pred.len() != gt.len() {
        return Err(IclError::Argument(format!(
            "{} predicted slices against {} ground-truth slices",
            pred.len(),
            gt.len()
        )));
    }
    pred.iter()
        .zip(gt)
        .map(|(p, g)| {
            if p.h != g.h || p.w != g.w {
                return Err(dim_err(
                    "evaluate",
                    format!("slice {}×{} vs {}×{}", p.h, p.w, g.h, g.w),
                ));
            }
            (1..classes as u8)
                .map(|c| {
                    let (pm, gm) = (ClassMask::from_labels(p, c), ClassMask::from_labels(g, c));
                    Ok(ClassMetrics {
                        class: c,
                        dsc: dsc(&pm, &gm)?,
                        hd95: hd95(&pm, &gm)?,
                    })
                })
                .collect()
        })
        .collect()
}

/// Averages per-case metrics per class, then over foreground classes.
pub fn evaluate_volume(
    pred: &[LabelMap],
    gt: &[LabelMap],
    classes: usize,
) -> Result<VolumeMetrics> {
    if pred.is_empty() {
        return Err(IclError::Argument("no slices to evaluate".into()));
    }
    let cases = evaluate_cases(pred, gt, classes)?;
    let n = cases.len() as f64;
    let per_class: Vec<ClassMetrics> = (1..classes as u8)
        .map(|c| {
            let i = c as usize - 1;
            ClassMetrics {
                class: c,
                dsc: cases.iter().map(|m| m[i].dsc).sum::<f64>() / n,
                hd95: cases.iter().map(|m| m[i].hd95).sum::<f64>() / n,
            }
        })
        .collect();
    let k = per_class.len().max(1) as f64;
    Ok(VolumeMetrics {
        mean_dsc: per_class.iter().map(|m| m.dsc).sum::<f64>() / k,
        mean_hd95: per_class.iter().map(|m| m.hd95).sum::<f64>() / k,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> ClassMask {
        let mut d = vec![false; h * w];
        for &(y, x) in on {
            d[y * w + x] = true;
        }
        ClassMask::new(h, w, d).unwrap()
    }

    #[test]
    fn dsc_cases() {
        let a = mask(4, 4, &[(0, 0), (0, 1), (1, 1)]);
        let b = mask(4, 4, &[(0, 0), (0, 1), (2, 2)]);
        assert!((dsc(&a, &b).unwrap() - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &mask(4, 4, &[(3, 3)])).unwrap(), 0.0);
        assert_eq!(dsc(&mask(4, 4, &[]), &mask(4, 4, &[])).unwrap(), 1.0);
        assert_eq!(dsc(&a, &mask(4, 4, &[])).unwrap(), 0.0);
    }

    #[test]
    fn hd95_single_pixels_at_3_4_offset() {
        let a = mask(10, 10, &[(1, 1)]);
        let b = mask(10, 10, &[(4, 5)]);
        assert_eq!(hd95(&a, &b).unwrap(), 5.0);
    }

    #[test]
    fn hd95_empty_policies() {
        let e = mask(64, 64, &[]);
        let g = mask(64, 64, &[(10, 10)]);
        assert_eq!(hd95(&e, &e).unwrap(), 0.0);
        assert!((hd95(&e, &g).unwrap() - (2.0f64 * 63.0 * 63.0).sqrt()).abs() < 1e-12);
        assert!((hd95(&g, &e).unwrap() - 89.095).abs() < 1e-3);
    }

    #[test]
    fn boundary_excludes_interior() {
        let on: Vec<_> = (0..3)
            .flat_map(|y| (0..3).map(move |x| (y + 1, x + 1)))
            .collect();
        let m = mask(5, 5, &on);
        let b = m.boundary();
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(dsc(&mask(2, 2, &[]), &mask(3, 3, &[])).is_err());
        assert!(hd95(&mask(2, 2, &[]), &mask(3, 3, &[])).is_err());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let seeds = [(0, 0), (5, 7), (9, 2), (3, 3)];
        let (h, w) = (10, 11);
        let dt = squared_distance_transform(h, w, &seeds);
        for y in 0..h {
            for x in 0..w {
                let want = seeds
                    .iter()
                    .map(|&(sy, sx)| {
                        let (dy, dx) = (y as i64 - sy as i64, x as i64 - sx as i64);
                        (dy * dy + dx * dx) as u64
                    })
                    .min()
                    .unwrap();
                assert_eq!(dt[y * w + x], want, "at ({y},{x})");
            }
        }
    }
}
