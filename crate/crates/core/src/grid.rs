//! Plain 2-d grids: RGB images, binary masks and real-valued maps.

use alloc::vec;
use alloc::vec::Vec;
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

/// RGB image, planar `[3, h, w]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; 3 * h * w] }
    }

    #[inline]
    pub fn get(&self, c: usize, r: usize, col: usize) -> f32 {
        self.data[(c * self.h + r) * self.w + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f32) {
        self.data[(c * self.h + r) * self.w + col] = v;
    }

    pub fn channel(&self, c: usize) -> Map {
        let p = self.h * self.w;
        Map { h: self.h, w: self.w, data: self.data[c * p..(c + 1) * p].to_vec() }
    }

    /// Luma (Rec. 601 weights).
    pub fn gray(&self) -> Map {
        let p = self.h * self.w;
        let data = (0..p)
            .map(|i| 0.299 * self.data[i] + 0.587 * self.data[p + i] + 0.114 * self.data[2 * p + i])
            .collect();
        Map { h: self.h, w: self.w, data }
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for c in 0..3 {
            for r in 0..self.h {
                for col in 0..self.w {
                    out.set(c, r, col, self.get(c, r, self.w - 1 - col));
                }
            }
        }
        out
    }

    /// Crops the window at `(r0, c0)` of size `ch x cw` and resizes it back
    /// to the full frame bilinearly.
    pub fn crop_resize(&self, r0: usize, c0: usize, ch: usize, cw: usize) -> Self {
        let mut out = Image::new(self.h, self.w);
        for c in 0..3 {
            let m = self.channel(c).crop(r0, c0, ch, cw).resize_bilinear(self.h, self.w);
            let p = self.h * self.w;
            out.data[c * p..(c + 1) * p].copy_from_slice(&m.data);
        }
        out
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }
}

/// Binary `h x w` grid (masks, scribbles, rasterized boxes).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

/// Ground-truth segmentation mask.
pub type GtMask = BinaryGrid;

impl BinaryGrid {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0; h * w] }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![1; h * w] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.w + c] != 0
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.w + c] = v as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v != 0).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// True when every foreground pixel of `self` is foreground in `other`.
    pub fn is_subset_of(&self, other: &BinaryGrid) -> bool {
        self.data.iter().zip(&other.data).all(|(a, b)| *a == 0 || *b != 0)
    }

    pub fn to_map(&self) -> Map {
        Map { h: self.h, w: self.w, data: self.data.iter().map(|v| *v as f32).collect() }
    }

    pub fn hflip(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.h {
            for c in 0..self.w {
                out.set(r, c, self.get(r, self.w - 1 - c));
            }
        }
        out
    }

    /// Same window as [`Image::crop_resize`]; re-binarized at 0.5.
    pub fn crop_resize(&self, r0: usize, c0: usize, ch: usize, cw: usize) -> Self {
        self.to_map().crop(r0, c0, ch, cw).resize_bilinear(self.h, self.w).threshold(0.5)
    }

    /// Number of 4-connected foreground components.
    pub fn components4(&self) -> usize {
        let mut seen = vec![false; self.data.len()];
        let mut n = 0;
        let mut stack = Vec::new();
        for start in 0..self.data.len() {
            if self.data[start] == 0 || seen[start] {
                continue;
            }
            n += 1;
            seen[start] = true;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (r, c) = (i / self.w, i % self.w);
                let mut visit = |rr: usize, cc: usize| {
                    let j = rr * self.w + cc;
                    if self.data[j] != 0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if r > 0 {
                    visit(r - 1, c);
                }
                if r + 1 < self.h {
                    visit(r + 1, c);
                }
                if c > 0 {
                    visit(r, c - 1);
                }
                if c + 1 < self.w {
                    visit(r, c + 1);
                }
            }
        }
        n
    }
}

/// Real-valued `h x w` map, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Map {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w] }
    }

    pub fn full(h: usize, w: usize, v: f32) -> Self {
        Self { h, w, data: vec![v; h * w] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len() as f64
    }

    pub fn threshold(&self, t: f32) -> BinaryGrid {
        BinaryGrid { h: self.h, w: self.w, data: self.data.iter().map(|v| (*v >= t) as u8).collect() }
    }

    pub fn crop(&self, r0: usize, c0: usize, ch: usize, cw: usize) -> Map {
        assert!(r0 + ch <= self.h && c0 + cw <= self.w, "crop out of bounds");
        let mut data = Vec::with_capacity(ch * cw);
        for r in r0..r0 + ch {
            data.extend_from_slice(&self.data[r * self.w + c0..r * self.w + c0 + cw]);
        }
        Map { h: ch, w: cw, data }
    }

    pub fn hflip(&self) -> Map {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.h {
            data.extend(self.data[r * self.w..(r + 1) * self.w].iter().rev());
        }
        Map { h: self.h, w: self.w, data }
    }

    /// Bilinear resize with half-pixel centers and edge clamping.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Map {
        if oh == self.h && ow == self.w {
            return self.clone();
        }
        let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
            let scale = inp as f64 / out as f64;
            (0..out)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let i0 = (src.floor() as usize).min(inp - 1);
                    let i1 = (i0 + 1).min(inp - 1);
                    (i0, i1, (src - i0 as f64).min(1.0) as f32)
                })
                .collect()
        };
        let rows = axis(oh, self.h);
        let cols = axis(ow, self.w);
        let mut data = Vec::with_capacity(oh * ow);
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = self.get(r0, c0) * (1.0 - fc) + self.get(r0, c1) * fc;
                let bot = self.get(r1, c0) * (1.0 - fc) + self.get(r1, c1) * fc;
                data.push(top * (1.0 - fr) + bot * fr);
            }
        }
        Map { h: oh, w: ow, data }
    }

    /// Mean over non-overlapping `f x f` cells.
    pub fn area_downsample(&self, f: usize) -> Map {
        assert!(self.h % f == 0 && self.w % f == 0, "area_downsample: {}x{} by {f}", self.h, self.w);
        let (oh, ow) = (self.h / f, self.w / f);
        let mut data = vec![0.0f32; oh * ow];
        let inv = 1.0 / (f * f) as f32;
        for r in 0..self.h {
            for c in 0..self.w {
                data[(r / f) * ow + c / f] += self.get(r, c) * inv;
            }
        }
        Map { h: oh, w: ow, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_preserves_constants() {
        let m = Map::full(16, 16, 0.37);
        for (h, w) in [(4, 4), (8, 8), (64, 64), (5, 7)] {
            assert!(m.resize_bilinear(h, w).data.iter().all(|v| (*v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn bilinear_downsample_by_two_averages_pairs() {
        // half-pixel centers: output pixel o samples input 2o + 0.5
        let m = Map { h: 1, w: 4, data: vec![0.0, 1.0, 2.0, 3.0] };
        let r = m.resize_bilinear(1, 2);
        assert_eq!(r.data, vec![0.5, 2.5]);
    }

    #[test]
    fn components_counts_separate_blobs() {
        let mut g = BinaryGrid::new(4, 4);
        g.set(0, 0, true);
        g.set(0, 1, true);
        g.set(3, 3, true);
        g.set(2, 2, true); // diagonal only, separate under 4-connectivity
        assert_eq!(g.components4(), 3);
    }
}
