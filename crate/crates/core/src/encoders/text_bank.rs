use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Encoder;
use crate::baft::masked_average_pool_or_soft;
use crate::grid::Image;
use crate::synthshapes::{ClassDef, Dataset, Split, ATTR_DIM};
use crate::{Error, Result};

/// Minimum images per base class behind each mean prototype.
pub const MIN_IMAGES_PER_CLASS: usize = 64;
/// Ridge strength; base attribute vectors span at most 10 dimensions.
pub const RIDGE: f64 = 1e-3;

/// Per-level linear maps from attribute vectors to prototypes, fitted
/// against one encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextProtoBank {
    pub encoder_name: String,
    pub dims: [usize; 3],
    pub ridge: f64,
    /// Level `l`: `dims[l] x ATTR_DIM`, row-major.
    pub weights: Vec<Vec<f32>>,
    /// Largest `||W a(c) - mean_proto(c)||` over base classes, per level.
    pub max_residual: Vec<f64>,
    /// Root-mean-square residual norm over base classes, per level.
    pub rms_residual: Vec<f64>,
}

/// Solves `x g = b` for every row of `b` (`g` symmetric positive definite, `n x n`).
fn solve_rows(g: &[f64], b: &mut [f64], n: usize) {
    // Cholesky g = L L^T
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            if i == j {
                l[i * n + i] = num_traits::Float::sqrt(g[i * n + i] - s);
            } else {
                l[i * n + j] = (g[i * n + j] - s) / l[j * n + j];
            }
        }
    }
    for row in b.chunks_mut(n) {
        // x L L^T = row  ->  L y = row^T, L^T x^T = y
        let mut y = vec![0.0f64; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * y[k]).sum();
            y[i] = (row[i] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| l[k * n + i] * row[k]).sum();
            row[i] = (y[i] - s) / l[i * n + i];
        }
    }
}

/// Fits the bank on `base` classes: mean masked-average-pooled prototype
/// per class (first `per_class` train images), then ridge least squares.
pub fn fit_text_bank(encoder: &Encoder, data: &Dataset, base: &[usize], per_class: usize) -> Result<TextProtoBank> {
    if per_class < MIN_IMAGES_PER_CLASS {
        return Err(Error::InsufficientData(alloc::format!(
            "{per_class} images per class, need at least {MIN_IMAGES_PER_CLASS}"
        )));
    }
    if base.is_empty() {
        return Err(Error::InsufficientData("no base classes".into()));
    }
    let dims = encoder.dims();
    let mut means: Vec<Vec<Vec<f64>>> = Vec::with_capacity(base.len());
    for &c in base {
        let samples = &data.split(Split::Train)[c];
        if samples.len() < per_class {
            return Err(Error::InsufficientData(alloc::format!(
                "class {c} has {} train images, need {per_class}",
                samples.len()
            )));
        }
        let mut acc: Vec<Vec<f64>> = dims.iter().map(|d| vec![0.0; *d]).collect();
        for chunk in samples[..per_class].chunks(32) {
            let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
            let pyrs = encoder.encode_batch(&images)?;
            for (pyr, s) in pyrs.iter().zip(chunk) {
                for (l, fm) in pyr.levels.iter().enumerate() {
                    let p = masked_average_pool_or_soft(fm, &s.mask)?;
                    for (a, v) in acc[l].iter_mut().zip(&p.data) {
                        *a += *v as f64;
                    }
                }
            }
        }
        for level in acc.iter_mut() {
            level.iter_mut().for_each(|v| *v /= per_class as f64);
        }
        means.push(acc);
    }
    let attrs: Vec<Vec<f64>> =
        base.iter().map(|c| data.classes[*c].attribute_vector.iter().map(|v| *v as f64).collect()).collect();
    let n = ATTR_DIM;
    let mut gram = vec![0.0f64; n * n];
    for a in &attrs {
        for i in 0..n {
            for j in 0..n {
                gram[i * n + j] += a[i] * a[j];
            }
        }
    }
    for i in 0..n {
        gram[i * n + i] += RIDGE;
    }
    let mut weights = Vec::with_capacity(3);
    let mut max_residual = Vec::with_capacity(3);
    let mut rms_residual = Vec::with_capacity(3);
    for (l, d) in dims.iter().enumerate() {
        // rhs = P A^T, d x n
        let mut w = vec![0.0f64; d * n];
        for (m, a) in means.iter().zip(&attrs) {
            for k in 0..*d {
                for j in 0..n {
                    w[k * n + j] += m[l][k] * a[j];
                }
            }
        }
        solve_rows(&gram, &mut w, n);
        let mut worst = 0.0f64;
        let mut sq = 0.0f64;
        for (m, a) in means.iter().zip(&attrs) {
            let r2: f64 = (0..*d)
                .map(|k| {
                    let pred: f64 = (0..n).map(|j| w[k * n + j] * a[j]).sum();
                    (pred - m[l][k]) * (pred - m[l][k])
                })
                .sum();
            worst = worst.max(num_traits::Float::sqrt(r2));
            sq += r2;
        }
        max_residual.push(worst);
        rms_residual.push(num_traits::Float::sqrt(sq / means.len() as f64));
        weights.push(w.into_iter().map(|v| v as f32).collect());
    }
    Ok(TextProtoBank { encoder_name: encoder.id().name.clone(), dims, ridge: RIDGE, weights, max_residual, rms_residual })
}

/// Per-level text prototypes `W_l * attr(class)`. `dims` are the active
/// encoder's level dims; a bank fitted for other dims is rejected.
pub fn text_encode(bank: &TextProtoBank, dims: [usize; 3], class: &ClassDef) -> Result<Vec<Vec<f32>>> {
    if bank.dims != dims {
        return Err(Error::DimMismatch(alloc::format!(
            "text bank fitted for dims {:?} (encoder {}), active encoder has {:?}",
            bank.dims, bank.encoder_name, dims
        )));
    }
    if class.attribute_vector.len() != ATTR_DIM {
        return Err(Error::DimMismatch(alloc::format!("attribute vector of length {}", class.attribute_vector.len())));
    }
    Ok(bank
        .weights
        .iter()
        .zip(dims)
        .map(|(w, d)| {
            (0..d)
                .map(|k| {
                    (0..ATTR_DIM)
                        .map(|j| w[k * ATTR_DIM + j] as f64 * class.attribute_vector[j] as f64)
                        .sum::<f64>() as f32
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_rows_solve() {
        // g = [[4, 2], [2, 3]], x g = b with x = [1, -1] -> b = [2, -1]
        let g = [4.0, 2.0, 2.0, 3.0];
        let mut b = [2.0, -1.0];
        solve_rows(&g, &mut b, 2);
        assert!((b[0] - 1.0).abs() < 1e-12 && (b[1] + 1.0).abs() < 1e-12);
    }
}
