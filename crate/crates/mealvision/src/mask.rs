//! Binary pixel masks and run-length encoding.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask data length {len} does not match {width}x{height}")]
    LengthMismatch {
        width: usize,
        height: usize,
        len: usize,
    },
    #[error("run-length counts sum to {sum}, expected {expected}")]
    RleLength { sum: usize, expected: usize },
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Result<Self, MaskError> {
        if data.len() != width * height {
            return Err(MaskError::LengthMismatch {
                width,
                height,
                len: data.len(),
            });
        }
        Ok(Mask {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Mask {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn intersection_area(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    pub fn union_area(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| **a || **b)
            .count()
    }

    /// Intersection over union; 0 when both masks are empty.
    pub fn iou(&self, other: &Mask) -> f64 {
        let union = self.union_area(other);
        if union == 0 {
            return 0.0;
        }
        self.intersection_area(other) as f64 / union as f64
    }

    /// Tight bounding box as (x_min, y_min, x_max, y_max) with exclusive
    /// maxima, or None for an empty mask.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    pub fn flip_lr(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            self.get(self.width - 1 - x, y)
        })
    }

    pub fn flip_ud(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            self.get(x, self.height - 1 - y)
        })
    }

    /// Row-major run-length encoding, alternating runs starting with zeros.
    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0usize;
        for &b in &self.data {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        Rle {
            width: self.width,
            height: self.height,
            counts,
        }
    }
}

/// Run-length encoded mask as stored in annotation files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: usize,
    pub height: usize,
    pub counts: Vec<usize>,
}

impl Rle {
    pub fn decode(&self) -> Result<Mask, MaskError> {
        let expected = self.width * self.height;
        let sum: usize = self.counts.iter().sum();
        if sum != expected {
            return Err(MaskError::RleLength { sum, expected });
        }
        let mut data = Vec::with_capacity(expected);
        let mut value = false;
        for &run in &self.counts {
            data.extend(std::iter::repeat_n(value, run));
            value = !value;
        }
        Mask::from_data(self.width, self.height, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn rle_roundtrip_random_masks() {
        let mut rng = Rng::seed_from_u64(42);
        for _ in 0..50 {
            let w = 1 + rng.below(40);
            let h = 1 + rng.below(40);
            let m = Mask::from_fn(w, h, |_, _| rng.chance(0.3));
            let back = m.to_rle().decode().unwrap();
            assert_eq!(m, back);
        }
    }

    #[test]
    fn rle_of_empty_and_full() {
        let empty = Mask::zeros(4, 3);
        assert_eq!(empty.to_rle().counts, vec![12]);
        let full = Mask::from_fn(4, 3, |_, _| true);
        assert_eq!(full.to_rle().counts, vec![0, 12]);
        assert_eq!(full.to_rle().decode().unwrap(), full);
    }

    #[test]
    fn rle_rejects_bad_counts() {
        let rle = Rle {
            width: 4,
            height: 4,
            counts: vec![3, 2],
        };
        assert!(matches!(rle.decode(), Err(MaskError::RleLength { .. })));
    }

    #[test]
    fn bbox_is_tight() {
        let mut m = Mask::zeros(10, 10);
        m.set(2, 3, true);
        m.set(5, 7, true);
        assert_eq!(m.bbox(), Some((2, 3, 6, 8)));
        assert_eq!(Mask::zeros(3, 3).bbox(), None);
    }

    #[test]
    fn iou_basics() {
        let a = Mask::from_fn(4, 4, |x, y| x < 2 && y < 2);
        let b = Mask::from_fn(4, 4, |x, y| x >= 1 && x < 3 && y < 2);
        // overlap 2, union 6
        assert!((a.iou(&b) - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(Mask::zeros(4, 4).iou(&Mask::zeros(4, 4)), 0.0);
    }

    #[test]
    fn double_flip_is_identity() {
        let mut rng = Rng::seed_from_u64(9);
        let m = Mask::from_fn(13, 7, |_, _| rng.chance(0.4));
        assert_eq!(m.flip_lr().flip_lr(), m);
        assert_eq!(m.flip_ud().flip_ud(), m);
    }
}
