//! Backbone-independent query channels: a binary Canny map and the
//! absolute Sobel responses.

use alloc::vec;
use alloc::vec::Vec;

use crate::grid::{Image, Map};

/// Canny hysteresis thresholds on the gradient magnitude scaled to `[0, 1]`.
pub const CANNY_HIGH: f32 = 0.10;
pub const CANNY_LOW: f32 = 0.04;

fn clamp_at(m: &Map, r: isize, c: isize) -> f32 {
    let r = r.clamp(0, m.h as isize - 1) as usize;
    let c = c.clamp(0, m.w as isize - 1) as usize;
    m.get(r, c)
}

/// Signed Sobel responses of a map (replicated borders). Written as
/// differences of weighted column and row sums, so mirror-symmetric
/// neighbourhoods cancel exactly.
pub fn sobel(m: &Map) -> (Map, Map) {
    let mut gx = Map::zeros(m.h, m.w);
    let mut gy = Map::zeros(m.h, m.w);
    for r in 0..m.h {
        for c in 0..m.w {
            let (ri, ci) = (r as isize, c as isize);
            let p = |dr: isize, dc: isize| clamp_at(m, ri + dr, ci + dc);
            let right = p(-1, 1) + 2.0 * p(0, 1) + p(1, 1);
            let left = p(-1, -1) + 2.0 * p(0, -1) + p(1, -1);
            let below = p(1, -1) + 2.0 * p(1, 0) + p(1, 1);
            let above = p(-1, -1) + 2.0 * p(-1, 0) + p(-1, 1);
            gx.data[r * m.w + c] = right - left;
            gy.data[r * m.w + c] = below - above;
        }
    }
    (gx, gy)
}

fn gaussian5(m: &Map) -> Map {
    // separable binomial approximation of a sigma = 1 Gaussian
    let k = [1.0f32, 4.0, 6.0, 4.0, 1.0].map(|v| v / 16.0);
    let mut tmp = Map::zeros(m.h, m.w);
    for r in 0..m.h {
        for c in 0..m.w {
            tmp.data[r * m.w + c] = (0..5).map(|j| k[j] * clamp_at(m, r as isize, c as isize + j as isize - 2)).sum();
        }
    }
    let mut out = Map::zeros(m.h, m.w);
    for r in 0..m.h {
        for c in 0..m.w {
            out.data[r * m.w + c] = (0..5).map(|i| k[i] * clamp_at(&tmp, r as isize + i as isize - 2, c as isize)).sum();
        }
    }
    out
}

/// Binary Canny edge map (Gaussian blur, Sobel, non-maximum suppression,
/// hysteresis).
pub fn canny(gray: &Map) -> Map {
    let (h, w) = (gray.h, gray.w);
    let blurred = gaussian5(gray);
    let (gx, gy) = sobel(&blurred);
    let scale = 1.0 / (4.0 * core::f32::consts::SQRT_2);
    let mag: Vec<f32> = gx
        .data
        .iter()
        .zip(&gy.data)
        .map(|(x, y)| num_traits::Float::sqrt(x * x + y * y) * scale)
        .collect();
    let at = |r: isize, c: isize| -> f32 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            mag[r as usize * w + c as usize]
        }
    };
    let mut thin = vec![0.0f32; h * w];
    for r in 0..h {
        for c in 0..w {
            let m = mag[r * w + c];
            if m < CANNY_LOW {
                continue;
            }
            let (x, y) = (gx.data[r * w + c], gy.data[r * w + c]);
            // quantized gradient direction: 0, 45, 90, 135 degrees
            let (dr, dc) = {
                let (ax, ay) = (x.abs(), y.abs());
                if ay <= 0.4142 * ax {
                    (0, 1)
                } else if ax <= 0.4142 * ay {
                    (1, 0)
                } else if (x > 0.0) == (y > 0.0) {
                    (1, 1)
                } else {
                    (1, -1)
                }
            };
            let (ri, ci) = (r as isize, c as isize);
            if m >= at(ri + dr, ci + dc) && m >= at(ri - dr, ci - dc) {
                thin[r * w + c] = m;
            }
        }
    }
    let mut out = vec![0u8; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|i| thin[*i] >= CANNY_HIGH).collect();
    for i in &stack {
        out[*i] = 1;
    }
    while let Some(i) = stack.pop() {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for dr in -1..=1 {
            for dc in -1..=1 {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if out[j] == 0 && thin[j] >= CANNY_LOW {
                    out[j] = 1;
                    stack.push(j);
                }
            }
        }
    }
    Map { h, w, data: out.into_iter().map(|v| v as f32).collect() }
}

/// `[canny, |sobel_x| / 4, |sobel_y| / 4]` of the query's luma, all in `[0, 1]`.
pub fn edge_channels(query: &Image) -> [Map; 3] {
    let gray = query.gray();
    let (gx, gy) = sobel(&gray);
    let norm = |m: Map| Map { h: m.h, w: m.w, data: m.data.iter().map(|v| (v.abs() / 4.0).min(1.0)).collect() };
    [canny(&gray), norm(gx), norm(gy)]
}
