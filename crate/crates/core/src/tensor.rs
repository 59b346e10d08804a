//! Dense row-major `f64` arrays.
//!
//! A [`Tensor`] is a plain value: shape plus contiguous data. Gradient
//! tracking lives on the [`Tape`](crate::autodiff::Tape), which wraps tensors
//! in graph nodes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, IclError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(IclError::Argument(format!(
                "tensor shape must be non-empty with positive dims, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(
                "tensor",
                format!(
                    "shape {shape:?} needs {n} elements, data has {}",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect()).expect("positive shape")
    }

    /// Entries drawn from `U(-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| rng.gen_range(-bound..=bound))
    }

    pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Self::from_fn(shape, |_| dist.sample(rng))
    }

    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {i} out of bounds for dim {d}");
            acc * d + i
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Integer class labels on an `h×w` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return Err(dim_err(
                "label map",
                format!("{h}×{w} grid needs {} labels, got {}", h * w, data.len()),
            ));
        }
        Ok(Self { h, w, data })
    }

    /// `[classes×h×w]` indicator tensor.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        let plane = self.h * self.w;
        let mut out = vec![0.0; classes * plane];
        for (i, &c) in self.data.iter().enumerate() {
            if c as usize >= classes {
                return Err(IclError::Data(format!("label {c} outside [0, {classes})")));
            }
            out[c as usize * plane + i] = 1.0;
        }
        Tensor::new(&[classes, self.h, self.w], out)
    }

    /// Per-pixel argmax over the class axis of `[Z×h×w]` logits. Ties go to
    /// the lowest class index.
    pub fn argmax(logits: &Tensor) -> Result<Self> {
        let s = logits.shape();
        if s.len() != 3 || s[0] > u8::MAX as usize + 1 {
            return Err(dim_err(
                "argmax",
                format!("expected Z×h×w logits, got {s:?}"),
            ));
        }
        let (z, h, w) = (s[0], s[1], s[2]);
        let plane = h * w;
        let x = logits.data();
        let data = (0..plane)
            .map(|i| {
                let mut best = 0;
                for c in 1..z {
                    if x[c * plane + i] > x[best * plane + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(h, w, data)
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&c| c == class).count()
    }
}
