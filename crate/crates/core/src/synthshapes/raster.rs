use super::{ClassDef, ShapeKind, Texture};
use crate::grid::{BinaryGrid, GtMask, Image};
use crate::rng::Rng;
use crate::{Error, Result};
#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;

pub const MAX_ATTEMPTS: usize = 50;
const MIN_FG: f64 = 0.02;
const MAX_FG: f64 = 0.7;

/// Canvas size and distractor settings for [`gen_sample`].
#[derive(Clone, Copy, Debug)]
pub struct GenParams<'a> {
    pub size: usize,
    /// Number of distractor shapes painted before the target.
    pub clutter: usize,
    /// Classes distractors are drawn from; entries sharing the target's
    /// shape are skipped.
    pub distractors: &'a [ClassDef],
}

fn inside(shape: ShapeKind, dr: f64, dc: f64, r: f64) -> bool {
    let d2 = dr * dr + dc * dc;
    match shape {
        ShapeKind::Circle => d2 <= r * r,
        ShapeKind::Square => dr.abs() <= r && dc.abs() <= r,
        ShapeKind::Triangle => dr <= r && dc.abs() <= (dr + r) / 2.0,
        ShapeKind::Star => in_star(dr, dc, r),
        ShapeKind::Cross => {
            let arm = r / 3.0;
            (dr.abs() <= arm && dc.abs() <= r) || (dc.abs() <= arm && dr.abs() <= r)
        }
        ShapeKind::Ring => d2 > r * r / 4.0 && d2 <= r * r,
        ShapeKind::Crescent => {
            let off = dc - 0.5 * r;
            d2 <= r * r && dr * dr + off * off > 0.64 * r * r
        }
        ShapeKind::Diamond => dr.abs() + dc.abs() <= r,
    }
}

/// Five-pointed star, apex up, inner radius 0.55 r (even-odd rule).
fn in_star(dr: f64, dc: f64, r: f64) -> bool {
    let mut pts = [(0.0f64, 0.0f64); 10];
    for (i, p) in pts.iter_mut().enumerate() {
        let rad = if i % 2 == 0 { r } else { 0.55 * r };
        let a = -core::f64::consts::FRAC_PI_2 + i as f64 * core::f64::consts::PI / 5.0;
        *p = (rad * libm_sin(a), rad * libm_cos(a));
    }
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (ri, ci) = pts[i];
        let (rj, cj) = pts[j];
        if (ri > dr) != (rj > dr) && dc < (cj - ci) * (dr - ri) / (rj - ri) + ci {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn libm_sin(x: f64) -> f64 {
    num_traits::Float::sin(x)
}

fn libm_cos(x: f64) -> f64 {
    num_traits::Float::cos(x)
}

/// Binary raster of a shape centred at `(cr, cc)` with radius `r`.
pub fn rasterize_shape(shape: ShapeKind, size: usize, cr: f64, cc: f64, r: f64) -> BinaryGrid {
    let mut g = BinaryGrid::new(size, size);
    for row in 0..size {
        for col in 0..size {
            if inside(shape, row as f64 - cr, col as f64 - cc, r) {
                g.set(row, col, true);
            }
        }
    }
    g
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Paints one textured shape and returns its footprint.
fn paint(img: &mut Image, class: &ClassDef, r_lo: f64, r_hi: f64, rng: &mut Rng) -> BinaryGrid {
    let size = img.h;
    let r = rng.uniform_in(r_lo, r_hi);
    let margin = r + 1.0;
    let cr = rng.uniform_in(margin, size as f64 - margin - 1.0).round();
    let cc = rng.uniform_in(margin, size as f64 - margin - 1.0).round();
    let footprint = rasterize_shape(class.shape, size, cr, cc, r);
    let hue = class.shape.index() as f64 * 45.0 + rng.uniform_in(-6.0, 6.0);
    let color = hsv(hue, 0.75, rng.uniform_in(0.8, 1.0));
    let dark = color.map(|v| v * 0.4);
    let phase = rng.range(0, 6);
    let (pr, pc) = (rng.range(0, 5), rng.range(0, 5));
    for row in 0..size {
        for col in 0..size {
            if !footprint.get(row, col) {
                continue;
            }
            let lit = match class.texture {
                Texture::Solid => true,
                Texture::Stripes => ((row + col + phase) / 3) % 2 == 0,
                Texture::Dots => (row + pr) % 5 < 2 && (col + pc) % 5 < 2,
            };
            let px = if lit { color } else { dark };
            for (ch, v) in px.iter().enumerate() {
                img.set(ch, row, col, *v);
            }
        }
    }
    footprint
}

/// Renders one image of `class` and its mask. Pure in `(class, seed, params)`.
pub fn gen_sample(class: &ClassDef, seed: u64, params: &GenParams<'_>) -> Result<(Image, GtMask)> {
    let pool: alloc::vec::Vec<&ClassDef> = params
        .distractors
        .iter()
        .filter(|d| d.shape != class.shape)
        .collect();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = Rng::derived(seed, "gen_sample", attempt as u64);
        let size = params.size;
        let mut img = Image::new(size, size);
        let bg = rng.uniform_in(0.1, 0.3) as f32;
        img.data.iter_mut().for_each(|v| *v = bg);
        if !pool.is_empty() {
            for _ in 0..params.clutter {
                let d = pool[rng.range(0, pool.len())];
                paint(&mut img, d, 4.0, 9.0, &mut rng);
            }
        }
        let mask = paint(&mut img, class, 8.0, 18.0, &mut rng);
        for v in img.data.iter_mut() {
            *v = (*v + 0.03 * rng.normal() as f32).clamp(0.0, 1.0);
        }
        let frac = mask.fraction();
        if frac > MIN_FG && frac < MAX_FG {
            return Ok((img, mask));
        }
    }
    Err(Error::GenerationExhausted { attempts: MAX_ATTEMPTS })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centred_square_radius_ten_has_441_pixels() {
        // rows and columns 22..=42
        let g = rasterize_shape(ShapeKind::Square, 64, 32.0, 32.0, 10.0);
        assert_eq!(g.count(), 21 * 21);
    }

    #[test]
    fn every_shape_rasterizes_to_one_component() {
        for s in ShapeKind::ALL {
            let g = rasterize_shape(s, 64, 32.0, 32.0, 14.0);
            assert!(g.count() > 82, "{s:?}");
            assert_eq!(g.components4(), 1, "{s:?}");
        }
    }
}
