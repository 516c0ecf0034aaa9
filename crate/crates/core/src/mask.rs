//! Dense binary masks stored as packed bit words.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area())
            .finish()
    }
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            words: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        let mut mask = Mask::empty(width, height);
        for i in 0..width * height {
            mask.set_index(i, true);
        }
        mask
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Mask::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }

    pub fn from_bools(width: usize, height: usize, values: &[bool]) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} mask",
                values.len()
            )));
        }
        let mut mask = Mask::empty(width, height);
        for (i, &v) in values.iter().enumerate() {
            if v {
                mask.set_index(i, true);
            }
        }
        Ok(mask)
    }

    /// Axis-aligned rectangle `[x0, x1) x [y0, y1)`.
    pub fn rect(width: usize, height: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Mask::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.get_index(y * self.width + x)
    }

    #[inline]
    pub fn set_index(&mut self, i: usize, value: bool) {
        let bit = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.set_index(y * self.width + x, value);
    }

    pub fn area(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn check_same_shape(&self, other: &Mask) {
        assert!(
            self.width == other.width && self.height == other.height,
            "mask shapes differ: {}x{} vs {}x{}",
            self.width,
            self.height,
            other.width,
            other.height
        );
    }

    pub fn intersection_area(&self, other: &Mask) -> usize {
        self.check_same_shape(other);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_area(&self, other: &Mask) -> usize {
        self.check_same_shape(other);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    /// Intersection over union; two empty masks have IoU 0.
    pub fn iou(&self, other: &Mask) -> f64 {
        let union = self.union_area(other);
        if union == 0 {
            return 0.0;
        }
        self.intersection_area(other) as f64 / union as f64
    }

    pub fn overlaps(&self, other: &Mask) -> bool {
        self.intersection_area(other) > 0
    }

    pub fn iter_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.get_index(i))
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get_index(i)).collect()
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)`, or `None` for an empty mask.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for i in self.iter_indices() {
            let (x, y) = (i % self.width, i / self.width);
            bbox = Some(match bbox {
                None => (x, y, x, y),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
            });
        }
        bbox
    }

    /// Nearest-neighbour resampling to a coarser (or finer) grid.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        Mask::from_fn(width, height, |x, y| {
            let sx = ((2 * x + 1) * self.width / (2 * width)).min(self.width - 1);
            let sy = ((2 * y + 1) * self.height / (2 * height)).min(self.height - 1);
            self.get(sx, sy)
        })
    }

    /// Pixels of the mask with at least one 4-neighbour outside it (or on the image border).
    pub fn inner_contour(&self) -> Mask {
        Mask::from_fn(self.width, self.height, |x, y| {
            if !self.get(x, y) {
                return false;
            }
            let outside = |nx: isize, ny: isize| {
                nx < 0
                    || ny < 0
                    || nx >= self.width as isize
                    || ny >= self.height as isize
                    || !self.get(nx as usize, ny as usize)
            };
            let (x, y) = (x as isize, y as isize);
            outside(x - 1, y) || outside(x + 1, y) || outside(x, y - 1) || outside(x, y + 1)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_overlapping_rects() {
        let a = Mask::rect(8, 8, 0, 0, 4, 4);
        let b = Mask::rect(8, 8, 2, 0, 6, 4);
        assert_eq!(a.area(), 16);
        assert_eq!(a.intersection_area(&b), 8);
        assert_eq!(a.union_area(&b), 24);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(Mask::empty(8, 8).iou(&Mask::empty(8, 8)), 0.0);
    }

    #[test]
    fn bbox_and_contour() {
        let m = Mask::rect(6, 6, 1, 2, 4, 5);
        assert_eq!(m.bbox(), Some((1, 2, 3, 4)));
        let c = m.inner_contour();
        assert_eq!(c.area(), 8);
        assert!(!c.get(2, 3));
        assert_eq!(Mask::empty(3, 3).bbox(), None);
    }

    #[test]
    fn nearest_downsample_keeps_large_regions() {
        let m = Mask::rect(16, 16, 0, 0, 8, 8);
        let d = m.resize_nearest(4, 4);
        assert_eq!(d.area(), 4);
        assert!(d.get(0, 0) && d.get(1, 1) && !d.get(2, 2));
    }
}
