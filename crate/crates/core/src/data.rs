//! Synthetic cardiac-like phantoms, dataset splits and batch composition.
//!
//! With four classes the label layout follows short-axis cardiac MR: a bright
//! elliptical left-ventricle cavity (3), a dark myocardial ring around it (2)
//! and a bright right-ventricle crescent hugging the ring (1). Background
//! contains a body outline and bright distractor blobs that resemble the
//! blood pools.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{IclError, Result};
use crate::tensor::{LabelMap, Tensor};

pub const SAMPLE_MAGIC: &[u8; 4] = b"ICLS";
pub const SAMPLE_VERSION: u32 = 1;
const MAX_ATTEMPTS: u64 = 100;

/// Seeded RNG for a pair of integers.
pub fn rng_for(a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(a, b))
}

/// SplitMix64-style combination of two integers.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub noise_std: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            classes: 4,
            noise_std: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    /// `[1×H×W]`, values in `[0, 1]`, exactly representable as `f32`.
    pub image: Tensor,
    pub mask: LabelMap,
    pub seed: u64,
}

/// Unlabeled sample: the mask is never materialized.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledSample {
    pub image: Tensor,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    /// `< 1` inside.
    fn level(&self, y: f64, x: f64) -> f64 {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }

    fn grown(&self, by: f64) -> Self {
        Self {
            ry: self.ry + by,
            rx: self.rx + by,
            ..*self
        }
    }
}

fn structure_classes(classes: usize) -> (Option<u8>, Option<u8>, u8) {
    // (right ventricle, myocardium, left ventricle)
    match classes {
        2 => (None, None, 1),
        3 => (None, Some(1), 2),
        _ => (Some(1), Some(2), 3),
    }
}

/// Deterministic phantom for `seed`. Retries up to 100 derived seeds until
/// every class is present.
pub fn generate_sample(seed: u64, config: &PhantomConfig) -> Result<SegSample> {
    if config.classes < 2 || config.classes > u8::MAX as usize {
        return Err(IclError::Config(format!(
            "phantoms need 2..=255 classes, got {}",
            config.classes
        )));
    }
    if config.height < 16 || config.width < 16 {
        return Err(IclError::Config(
            "phantoms need at least 16×16 pixels".into(),
        ));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = rng_for(seed, attempt);
        let (image, mask) = draw(&mut rng, config);
        let complete = (1..config.classes as u8).all(|c| mask.count(c) > 0);
        if complete {
            return Ok(SegSample { image, mask, seed });
        }
    }
    Err(IclError::Data(format!(
        "could not place all {} classes for seed {seed} in {MAX_ATTEMPTS} attempts",
        config.classes
    )))
}

fn draw(rng: &mut ChaCha8Rng, cfg: &PhantomConfig) -> (Tensor, LabelMap) {
    let (h, w) = (cfg.height, cfg.width);
    let unit = h.min(w) as f64 / 64.0;
    let (rv_class, myo_class, lv_class) = structure_classes(cfg.classes);

    let body = Ellipse {
        cy: h as f64 / 2.0 + rng.gen_range(-3.0..3.0) * unit,
        cx: w as f64 / 2.0 + rng.gen_range(-3.0..3.0) * unit,
        ry: rng.gen_range(24.0..30.0) * unit,
        rx: rng.gen_range(26.0..31.0) * unit,
        angle: rng.gen_range(-0.3..0.3),
    };
    let lv = Ellipse {
        cy: body.cy + rng.gen_range(-6.0..6.0) * unit,
        cx: body.cx + rng.gen_range(-4.0..8.0) * unit,
        ry: rng.gen_range(4.5..8.5) * unit,
        rx: rng.gen_range(4.5..8.5) * unit,
        angle: rng.gen_range(0.0..PI),
    };
    let wall = rng.gen_range(2.0..4.0) * unit;
    let myo = lv.grown(wall);
    let rv_dir: f64 = PI + rng.gen_range(-0.7..0.7);
    let rv_r = lv.rx.max(lv.ry) + wall;
    let rv = Ellipse {
        cy: lv.cy + rv_dir.sin() * rv_r * 0.9,
        cx: lv.cx + rv_dir.cos() * rv_r * 0.9,
        ry: rng.gen_range(7.0..12.0) * unit,
        rx: rng.gen_range(4.0..7.0) * unit,
        angle: rv_dir + PI / 2.0 + rng.gen_range(-0.3..0.3),
    };
    let rv_cut = myo.grown(0.8 * unit);

    // Distractors: blood-pool-bright blobs outside the heart.
    let n_blobs = rng.gen_range(1..=3);
    let blobs: Vec<(Ellipse, f64)> = (0..n_blobs)
        .map(|_| {
            let a: f64 = rng.gen_range(0.0..2.0 * PI);
            let d = rng.gen_range(17.0..24.0) * unit;
            (
                Ellipse {
                    cy: body.cy + a.sin() * d,
                    cx: body.cx + a.cos() * d,
                    ry: rng.gen_range(2.0..5.0) * unit,
                    rx: rng.gen_range(2.0..5.0) * unit,
                    angle: rng.gen_range(0.0..PI),
                },
                rng.gen_range(0.55..0.85),
            )
        })
        .collect();

    let bg_level = rng.gen_range(0.05..0.15);
    let tissue = rng.gen_range(0.25..0.4);
    let pool = rng.gen_range(0.65..0.9);
    let rv_level = pool + rng.gen_range(-0.12..0.05);
    let myo_level = rng.gen_range(0.3..0.45);
    let bias_gy = rng.gen_range(-0.15..0.15);
    let bias_gx = rng.gen_range(-0.15..0.15);
    let bias_phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let bias_freq = rng.gen_range(0.5..1.5) * PI / h.max(w) as f64;
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite noise std");

    let mut image = vec![0.0; h * w];
    let mut mask = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut v = bg_level;
            let mut label = 0u8;
            if body.level(yf, xf) < 1.0 {
                v = tissue;
            }
            for (b, level) in &blobs {
                if b.level(yf, xf) < 1.0 && myo.grown(2.0 * unit).level(yf, xf) >= 1.0 {
                    v = *level;
                }
            }
            if let Some(c) = rv_class {
                if rv.level(yf, xf) < 1.0 && rv_cut.level(yf, xf) >= 1.0 {
                    v = rv_level;
                    label = c;
                }
            }
            if myo.level(yf, xf) < 1.0 {
                if let Some(c) = myo_class {
                    v = myo_level;
                    label = c;
                }
            }
            if lv.level(yf, xf) < 1.0 {
                v = pool;
                label = lv_class;
            }
            let bias = bias_gy * (yf / h as f64 - 0.5)
                + bias_gx * (xf / w as f64 - 0.5)
                + 0.05 * (bias_freq * (yf + xf) + bias_phase).sin();
            let n = if cfg.noise_std > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            let value = (v + bias + n).clamp(0.0, 1.0);
            image[y * w + x] = value as f32 as f64;
            mask[y * w + x] = label;
        }
    }
    (
        Tensor::new(&[1, h, w], image).expect("image shape"),
        LabelMap::new(h, w, mask).expect("mask shape"),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitConfig {
    pub master_seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            n_labeled: 4,
            n_unlabeled: 60,
            n_val: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<SegSample>,
    pub unlabeled: Vec<UnlabeledSample>,
    pub val: Vec<SegSample>,
}

/// Distinct sample seeds for the three pools, drawn from the master seed.
pub fn split_seeds(config: &SplitConfig) -> (Vec<u64>, Vec<u64>, Vec<u64>) {
    let total = config.n_labeled + config.n_unlabeled + config.n_val;
    let mut rng = rng_for(config.master_seed, 0x5EED);
    let mut seen = HashSet::with_capacity(total);
    let mut seeds = Vec::with_capacity(total);
    while seeds.len() < total {
        let s: u64 = rng.gen();
        if seen.insert(s) {
            seeds.push(s);
        }
    }
    seeds.shuffle(&mut rng);
    let val = seeds.split_off(config.n_labeled + config.n_unlabeled);
    let unlabeled = seeds.split_off(config.n_labeled);
    (seeds, unlabeled, val)
}

pub fn make_split(config: &SplitConfig, phantom: &PhantomConfig) -> Result<DatasetSplit> {
    let (l, u, v) = split_seeds(config);
    let labeled = l
        .iter()
        .map(|&s| generate_sample(s, phantom))
        .collect::<Result<_>>()?;
    let unlabeled = u
        .iter()
        .map(|&s| {
            generate_sample(s, phantom).map(|x| UnlabeledSample {
                image: x.image,
                seed: s,
            })
        })
        .collect::<Result<_>>()?;
    let val = v
        .iter()
        .map(|&s| generate_sample(s, phantom))
        .collect::<Result<_>>()?;
    Ok(DatasetSplit {
        labeled,
        unlabeled,
        val,
    })
}

/// One of the eight flip/rotation symmetries of the square.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Quarter turns; only 0 or 2 on non-square grids.
    pub quarter_turns: u8,
}

impl Augment {
    pub fn identity() -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            quarter_turns: 0,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, square: bool) -> Self {
        let flip_h = rng.gen();
        let flip_v = rng.gen();
        let turns = rng.gen_range(0..4u8);
        Self {
            flip_h,
            flip_v,
            quarter_turns: if square { turns } else { turns & 2 },
        }
    }

    /// Source index for each destination pixel.
    fn source_index(&self, h: usize, w: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..h * w).collect();
        let (mut ch, mut cw) = (h, w);
        for _ in 0..self.quarter_turns % 4 {
            // Rotate 90° counter-clockwise: dst[y][x] = src[x][cw-1-y].
            let mut next = vec![0; idx.len()];
            let (nh, nw) = (cw, ch);
            for y in 0..nh {
                for x in 0..nw {
                    next[y * nw + x] = idx[x * cw + (cw - 1 - y)];
                }
            }
            idx = next;
            (ch, cw) = (nh, nw);
        }
        if self.flip_h {
            for row in idx.chunks_mut(cw) {
                row.reverse();
            }
        }
        if self.flip_v {
            let rows: Vec<Vec<usize>> = idx.chunks(cw).rev().map(<[usize]>::to_vec).collect();
            idx = rows.concat();
        }
        idx
    }

    pub fn apply(&self, image: &Tensor, mask: Option<&LabelMap>) -> (Tensor, Option<LabelMap>) {
        let s = image.shape();
        let (h, w) = (s[1], s[2]);
        let idx = self.source_index(h, w);
        let (oh, ow) = if self.quarter_turns % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        };
        let img = Tensor::new(&[1, oh, ow], idx.iter().map(|&i| image.data()[i]).collect())
            .expect("same size");
        let m = mask.map(|m| {
            LabelMap::new(oh, ow, idx.iter().map(|&i| m.data[i]).collect()).expect("same size")
        });
        (img, m)
    }
}

/// A training batch: half labeled pairs, half unlabeled images.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub labeled: Vec<(Tensor, LabelMap)>,
    pub unlabeled: Vec<Tensor>,
}

/// Deterministic batch schedule: step `t` of a run is a pure function of
/// `(master_seed, t)`.
#[derive(Clone, Copy, Debug)]
pub struct BatchSampler {
    pub master_seed: u64,
    pub batch_size: usize,
}

impl BatchSampler {
    pub fn new(master_seed: u64, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || !batch_size.is_multiple_of(2) {
            return Err(IclError::Config(format!(
                "batch size {batch_size} must be even and positive"
            )));
        }
        Ok(Self {
            master_seed,
            batch_size,
        })
    }

    fn unlabeled_order(&self, pool: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..pool).collect();
        order.shuffle(&mut rng_for(mix(self.master_seed, 0xE90C), epoch));
        order
    }

    /// Labeled images are drawn with replacement; unlabeled images walk a
    /// fresh permutation per epoch. Every image gets a random flip/rotation.
    pub fn batch(&self, split: &DatasetSplit, step: u64) -> Result<Batch> {
        let half = self.batch_size / 2;
        if split.labeled.is_empty() || split.unlabeled.is_empty() {
            return Err(IclError::Config(
                "batch composition needs non-empty labeled and unlabeled pools".into(),
            ));
        }
        let mut rng = rng_for(mix(self.master_seed, 0xBA7C), step);
        let labeled = (0..half)
            .map(|_| {
                let s = &split.labeled[rng.gen_range(0..split.labeled.len())];
                let aug = Augment::random(&mut rng, s.mask.h == s.mask.w);
                let (img, m) = aug.apply(&s.image, Some(&s.mask));
                (img, m.expect("mask given"))
            })
            .collect();
        let m = split.unlabeled.len() as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        let unlabeled = (0..half as u64)
            .map(|j| {
                let k = step * half as u64 + j;
                let (epoch, pos) = (k / m, (k % m) as usize);
                if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                    cached = Some((epoch, self.unlabeled_order(m as usize, epoch)));
                }
                let idx = cached.as_ref().expect("filled").1[pos];
                let s = &split.unlabeled[idx];
                let sq = s.image.shape()[1] == s.image.shape()[2];
                let aug = Augment::random(&mut rng, sq);
                aug.apply(&s.image, None).0
            })
            .collect();
        Ok(Batch { labeled, unlabeled })
    }

    /// Labeled half only, for runs that ignore unlabeled data.
    pub fn labeled_only(&self, split: &DatasetSplit, step: u64) -> Result<Batch> {
        if split.labeled.is_empty() {
            return Err(IclError::Config("empty labeled pool".into()));
        }
        let mut rng = rng_for(mix(self.master_seed, 0xBA7C), step);
        let labeled = (0..self.batch_size / 2)
            .map(|_| {
                let s = &split.labeled[rng.gen_range(0..split.labeled.len())];
                let aug = Augment::random(&mut rng, s.mask.h == s.mask.w);
                let (img, m) = aug.apply(&s.image, Some(&s.mask));
                (img, m.expect("mask given"))
            })
            .collect();
        Ok(Batch {
            labeled,
            unlabeled: Vec::new(),
        })
    }
}

/// Writes `image` (f32 LE) and `mask` (u8) with the `ICLS` header.
pub fn encode_sample(image: &Tensor, mask: &LabelMap, classes: usize) -> Result<Vec<u8>> {
    let (h, w) = (mask.h, mask.w);
    if image.shape() != [1, h, w] {
        return Err(IclError::Argument(format!(
            "image {:?} does not match a {h}×{w} mask",
            image.shape()
        )));
    }
    let mut out = Vec::with_capacity(20 + 5 * h * w);
    out.extend_from_slice(SAMPLE_MAGIC);
    for v in [SAMPLE_VERSION, h as u32, w as u32, classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&mask.data);
    Ok(out)
}

/// Parses an `ICLS` buffer into `(image, mask, classes)`.
pub fn decode_sample(bytes: &[u8]) -> Result<(Tensor, LabelMap, usize)> {
    let fail = |offset: usize, detail: &str| IclError::Format {
        offset: offset as u64,
        detail: detail.to_string(),
    };
    if bytes.len() < 20 {
        return Err(fail(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != SAMPLE_MAGIC {
        return Err(fail(0, "bad magic, expected ICLS"));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != SAMPLE_VERSION {
        return Err(fail(4, &format!("unsupported version {}", word(0))));
    }
    let (h, w, z) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let need = 20 + 5 * h * w;
    if bytes.len() != need {
        return Err(fail(
            bytes.len().min(need),
            &format!("expected {need} bytes, found {}", bytes.len()),
        ));
    }
    let image: Vec<f64> = bytes[20..20 + 4 * h * w]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let mask = bytes[20 + 4 * h * w..].to_vec();
    if let Some(pos) = mask.iter().position(|&c| c as usize >= z) {
        return Err(fail(20 + 4 * h * w + pos, "label outside class range"));
    }
    Ok((
        Tensor::new(&[1, h, w], image)?,
        LabelMap::new(h, w, mask)?,
        z,
    ))
}

pub fn write_sample(path: &Path, image: &Tensor, mask: &LabelMap, classes: usize) -> Result<()> {
    let bytes = encode_sample(image, mask, classes)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_sample(path: &Path) -> Result<(Tensor, LabelMap, usize)> {
    decode_sample(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sample() {
        let cfg = PhantomConfig::default();
        assert_eq!(
            generate_sample(7, &cfg).unwrap(),
            generate_sample(7, &cfg).unwrap()
        );
        assert_ne!(
            generate_sample(7, &cfg).unwrap().image,
            generate_sample(8, &cfg).unwrap().image
        );
    }

    #[test]
    fn all_classes_present() {
        for classes in [2, 3, 4] {
            let cfg = PhantomConfig {
                classes,
                ..Default::default()
            };
            for seed in 0..20 {
                let s = generate_sample(seed, &cfg).unwrap();
                for c in 0..classes as u8 {
                    assert!(s.mask.count(c) > 0, "class {c} missing, seed {seed}");
                }
                assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn rejects_one_class() {
        let cfg = PhantomConfig {
            classes: 1,
            ..Default::default()
        };
        assert!(generate_sample(0, &cfg).is_err());
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let cfg = SplitConfig::default();
        let (l, u, v) = split_seeds(&cfg);
        assert_eq!((l.len(), u.len(), v.len()), (4, 60, 20));
        let all: HashSet<u64> = l.iter().chain(&u).chain(&v).copied().collect();
        assert_eq!(all.len(), 84);
        assert_eq!(split_seeds(&cfg), (l, u, v));
    }

    #[test]
    fn augment_is_a_permutation() {
        let s = generate_sample(3, &PhantomConfig::default()).unwrap();
        let mut rng = rng_for(1, 2);
        for _ in 0..16 {
            let aug = Augment::random(&mut rng, true);
            let (img, m) = aug.apply(&s.image, Some(&s.mask));
            let m = m.unwrap();
            for c in 0..4 {
                assert_eq!(m.count(c), s.mask.count(c));
            }
            let mut a: Vec<f64> = img.data().to_vec();
            let mut b: Vec<f64> = s.image.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn four_quarter_turns_is_identity() {
        let s = generate_sample(5, &PhantomConfig::default()).unwrap();
        let quarter = Augment {
            flip_h: false,
            flip_v: false,
            quarter_turns: 1,
        };
        let mut img = s.image.clone();
        let mut mask = s.mask.clone();
        for _ in 0..4 {
            let (i, m) = quarter.apply(&img, Some(&mask));
            img = i;
            mask = m.unwrap();
        }
        assert_eq!(img, s.image);
        assert_eq!(mask, s.mask);
        let (once, _) = quarter.apply(&s.image, None);
        assert_ne!(once, s.image);
    }

    #[test]
    fn sample_codec_round_trip_and_rejection() {
        let s = generate_sample(11, &PhantomConfig::default()).unwrap();
        let bytes = encode_sample(&s.image, &s.mask, 4).unwrap();
        let (img, mask, z) = decode_sample(&bytes).unwrap();
        assert_eq!((img, mask, z), (s.image.clone(), s.mask.clone(), 4));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_sample(&bad),
            Err(IclError::Format { offset: 0, .. })
        ));
        assert!(decode_sample(&bytes[..bytes.len() - 1]).is_err());
    }
}
