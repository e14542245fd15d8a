//! Binary pixel masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Input(format!(
                "mask {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn zip(&self, other: &Mask, op: &'static str, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(Error::shape(op, &[self.height, self.width], &[other.height, other.width]));
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, "mask and", |a, b| a && b)
    }

    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, "mask or", |a, b| a || b)
    }

    /// `self ∧ ¬other`
    pub fn and_not(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, "mask and_not", |a, b| a && !b)
    }

    pub fn not(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Dilation by the Chebyshev ball of `radius` (a `(2r+1)²` square),
    /// computed as separate row and column max filters.
    pub fn dilate(&self, radius: usize) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let (h, w) = (self.height, self.width);
        let mut rows = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let lo = x.saturating_sub(radius);
                let hi = (x + radius).min(w - 1);
                rows[y * w + x] = (lo..=hi).any(|xx| self.data[y * w + xx]);
            }
        }
        let mut out = vec![false; h * w];
        for y in 0..h {
            let lo = y.saturating_sub(radius);
            let hi = (y + radius).min(h - 1);
            for x in 0..w {
                out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
            }
        }
        Mask {
            height: h,
            width: w,
            data: out,
        }
    }

    /// `1×H×W` tensor of 0/1 values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![1, self.height, self.width],
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    fn pool(&self, block: usize, f: impl Fn(usize) -> f64) -> Result<Tensor> {
        if block == 0 || !self.height.is_multiple_of(block) || !self.width.is_multiple_of(block) {
            return Err(Error::Input(format!(
                "mask {}×{} cannot be pooled by {block}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / block, self.width / block);
        let mut out = Vec::with_capacity(h * w);
        for by in 0..h {
            for bx in 0..w {
                let mut n = 0;
                for dy in 0..block {
                    for dx in 0..block {
                        n += usize::from(self.get(by * block + dy, bx * block + dx));
                    }
                }
                out.push(f(n));
            }
        }
        Ok(Tensor::from_parts(vec![1, h, w], out))
    }

    /// Fraction of covered pixels per `block×block` cell, `1×(H/b)×(W/b)`.
    pub fn downsample_mean(&self, block: usize) -> Result<Tensor> {
        let area = (block * block) as f64;
        self.pool(block, |n| n as f64 / area)
    }

    /// 1 where any pixel of the cell is covered, `1×(H/b)×(W/b)`.
    pub fn downsample_max(&self, block: usize) -> Result<Tensor> {
        self.pool(block, |n| if n > 0 { 1.0 } else { 0.0 })
    }
}
