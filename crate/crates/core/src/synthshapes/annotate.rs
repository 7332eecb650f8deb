use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::grid::{BinaryGrid, GtMask};
use crate::rng::Rng;
use crate::{Error, Result};

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub rmin: usize,
    pub cmin: usize,
    pub rmax: usize,
    pub cmax: usize,
}

/// Tight box around the foreground.
pub fn make_bbox(mask: &GtMask) -> Result<BBox> {
    let mut b: Option<BBox> = None;
    for r in 0..mask.h {
        for c in 0..mask.w {
            if !mask.get(r, c) {
                continue;
            }
            b = Some(match b {
                None => BBox { rmin: r, cmin: c, rmax: r, cmax: c },
                Some(b) => BBox {
                    rmin: b.rmin.min(r),
                    cmin: b.cmin.min(c),
                    rmax: b.rmax.max(r),
                    cmax: b.cmax.max(c),
                },
            });
        }
    }
    b.ok_or(Error::EmptyAnnotation)
}

pub fn rasterize_bbox(b: &BBox, h: usize, w: usize) -> BinaryGrid {
    let mut g = BinaryGrid::new(h, w);
    for r in b.rmin..=b.rmax.min(h - 1) {
        for c in b.cmin..=b.cmax.min(w - 1) {
            g.set(r, c, true);
        }
    }
    g
}

const MIN_SCRIBBLE_SOURCE: usize = 20;

/// Scribble length for a mask with `fg` foreground pixels.
pub fn scribble_length(fg: usize) -> usize {
    fg.div_ceil(20).clamp(10, 200)
}

/// Self-avoiding 8-connected walk over the foreground, starting at the
/// foreground pixel nearest the centroid. The walk prefers to keep its
/// heading; when boxed in it resumes from the most recent visited pixel
/// that still has a free neighbour, and stops once no such pixel remains.
pub fn make_scribble(mask: &GtMask, seed: u64) -> Result<BinaryGrid> {
    let fg = mask.count();
    if fg < MIN_SCRIBBLE_SOURCE {
        return Err(Error::EmptyAnnotation);
    }
    let target = scribble_length(fg);
    let (mut sr, mut sc) = (0.0f64, 0.0f64);
    for r in 0..mask.h {
        for c in 0..mask.w {
            if mask.get(r, c) {
                sr += r as f64;
                sc += c as f64;
            }
        }
    }
    let (cr, cc) = (sr / fg as f64, sc / fg as f64);
    let mut start = (0usize, 0usize);
    let mut best = f64::INFINITY;
    for r in 0..mask.h {
        for c in 0..mask.w {
            let d = (r as f64 - cr) * (r as f64 - cr) + (c as f64 - cc) * (c as f64 - cc);
            if mask.get(r, c) && d < best {
                best = d;
                start = (r, c);
            }
        }
    }

    let mut rng = Rng::derived(seed, "scribble", 0);
    let mut out = BinaryGrid::new(mask.h, mask.w);
    out.set(start.0, start.1, true);
    let mut path: Vec<(usize, usize)> = alloc::vec![start];
    let mut heading = {
        let a = rng.uniform_in(0.0, core::f64::consts::TAU);
        (num_traits::Float::sin(a), num_traits::Float::cos(a))
    };
    let mut count = 1;
    while count < target {
        let Some(&(r, c)) = path.last() else { break };
        let mut moves: Vec<((usize, usize), f64)> = Vec::with_capacity(8);
        for dr in -1isize..=1 {
            for dc in -1isize..=1 {
                if dr == 0 && dc == 0 {
                    continue;
                }
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= mask.h as isize || nc >= mask.w as isize {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if mask.get(nr, nc) && !out.get(nr, nc) {
                    let norm = num_traits::Float::sqrt((dr * dr + dc * dc) as f64);
                    let align = (dr as f64 * heading.0 + dc as f64 * heading.1) / norm;
                    moves.push(((nr, nc), num_traits::Float::exp(2.0 * align)));
                }
            }
        }
        if moves.is_empty() {
            path.pop();
            continue;
        }
        let weights: Vec<f64> = moves.iter().map(|m| m.1).collect();
        let (nr, nc) = moves[rng.weighted(&weights)].0;
        let (dr, dc) = (nr as f64 - r as f64, nc as f64 - c as f64);
        let norm = num_traits::Float::sqrt(dr * dr + dc * dc);
        heading = (dr / norm, dc / norm);
        out.set(nr, nc, true);
        path.push((nr, nc));
        count += 1;
    }
    Ok(out)
}
