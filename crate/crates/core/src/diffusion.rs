//! Noise schedules, the closed-form forward process, v-parameterization,
//! min-SNR weighting and the DDIM sampler.

use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};
use crate::{Error, Result};

const BETA_MAX: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;
pub const MIN_SNR_GAMMA: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Linear,
    /// Explicit beta table.
    Custom,
}

/// Tables indexed by step `t = 0..=T`; entry 0 is the clean state
/// (`beta = 0`, `alpha_bar = 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidT(steps));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |t: f64| {
                    let a = (t / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * core::f64::consts::FRAC_PI_2;
                    a.cos() * a.cos()
                };
                (1..=steps).map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).min(BETA_MAX)).collect()
            }
            ScheduleKind::Linear => {
                // the usual 1e-4..0.02 ramp is tuned for 1000 steps; rescale
                // so the chain still ends near pure noise at other lengths
                let scale = 1000.0 / steps as f64;
                (0..steps)
                    .map(|i| {
                        let b = 1e-4 + (0.02 - 1e-4) * i as f64 / (steps - 1) as f64;
                        (scale * b).min(BETA_MAX)
                    })
                    .collect()
            }
            ScheduleKind::Custom => return Err(Error::InvalidSchedule("use from_betas for explicit tables".into())),
        };
        let s = Self::from_betas(&betas)?;
        let last = s.alpha_bar[steps];
        if last >= 0.01 {
            return Err(Error::InvalidSchedule(alloc::format!("alpha_bar[T] = {last} is not below 0.01")));
        }
        Ok(Self { kind, ..s })
    }

    /// Schedule from `beta[1..=T]`.
    pub fn from_betas(betas: &[f64]) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidT(0));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidSchedule(alloc::format!("beta {b} outside (0, 1)")));
        }
        let mut beta = vec![0.0];
        beta.extend_from_slice(betas);
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { kind: ScheduleKind::Custom, steps: betas.len(), beta, alpha, alpha_bar })
    }

    pub fn sqrt_ab(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sqrt_1m_ab(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / (1.0 - self.alpha_bar[t])
    }

    /// `min(SNR, gamma) / (SNR + 1)`, the v-space min-SNR weight.
    pub fn min_snr_weight(&self, t: usize, gamma: f64) -> f64 {
        let snr = self.snr(t);
        snr.min(gamma) / (snr + 1.0)
    }
}

pub fn make_schedule(kind: ScheduleKind, steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::new(kind, steps)
}

/// `sqrt(ab) x0 + sqrt(1 - ab) eps`.
pub fn q_sample(x0: &[f32], t: usize, eps: &[f32], s: &NoiseSchedule) -> Vec<f32> {
    let (a, b) = (s.sqrt_ab(t), s.sqrt_1m_ab(t));
    x0.iter().zip(eps).map(|(x, e)| (a * *x as f64 + b * *e as f64) as f32).collect()
}

/// `v = sqrt(ab) eps - sqrt(1 - ab) x0`.
pub fn v_target(x0: &[f32], eps: &[f32], t: usize, s: &NoiseSchedule) -> Vec<f32> {
    let (a, b) = (s.sqrt_ab(t), s.sqrt_1m_ab(t));
    x0.iter().zip(eps).map(|(x, e)| (a * *e as f64 - b * *x as f64) as f32).collect()
}

/// `x0 = sqrt(ab) x_t - sqrt(1 - ab) v`.
pub fn recover_x0(x_t: &[f32], v: &[f32], t: usize, s: &NoiseSchedule) -> Vec<f32> {
    let (a, b) = (s.sqrt_ab(t), s.sqrt_1m_ab(t));
    x_t.iter().zip(v).map(|(x, v)| (a * *x as f64 - b * *v as f64) as f32).collect()
}

/// `eps = sqrt(1 - ab) x_t + sqrt(ab) v`.
pub fn recover_eps(x_t: &[f32], v: &[f32], t: usize, s: &NoiseSchedule) -> Vec<f32> {
    let (a, b) = (s.sqrt_ab(t), s.sqrt_1m_ab(t));
    x_t.iter().zip(v).map(|(x, v)| (b * *x as f64 + a * *v as f64) as f32).collect()
}

/// `weight(t) * mean((v_hat - v)^2)`.
pub fn diffusion_loss(v_hat: &[f32], v: &[f32], t: usize, s: &NoiseSchedule) -> f64 {
    let mse = v_hat.iter().zip(v).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>() / v.len() as f64;
    s.min_snr_weight(t, MIN_SNR_GAMMA) * mse
}

/// One DDIM update from `t` to `t_prev`. `noise` is required when
/// `eta > 0` and ignored otherwise.
pub fn ddim_step(
    x_t: &[f32],
    v_hat: &[f32],
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
    eta: f64,
    noise: Option<&[f32]>,
) -> Result<Vec<f32>> {
    if t_prev >= t || t > s.steps {
        return Err(Error::InvalidStepPair { t, t_prev });
    }
    let x0: Vec<f32> = recover_x0(x_t, v_hat, t, s).into_iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let (ab, abp) = (s.alpha_bar[t], s.alpha_bar[t_prev]);
    // noise consistent with the clamped x0; equals recover_eps when nothing was clamped
    let (sa_t, s1m_t) = (ab.sqrt(), (1.0 - ab).sqrt());
    let eps: Vec<f32> = x_t.iter().zip(&x0).map(|(x, z)| ((*x as f64 - sa_t * *z as f64) / s1m_t) as f32).collect();
    let sigma = eta * ((1.0 - abp) / (1.0 - ab)).sqrt() * (1.0 - ab / abp).max(0.0).sqrt();
    let dir = (1.0 - abp - sigma * sigma).max(0.0).sqrt();
    let sa = abp.sqrt();
    let mut out: Vec<f32> = x0.iter().zip(&eps).map(|(x, e)| (sa * *x as f64 + dir * *e as f64) as f32).collect();
    if sigma > 0.0 {
        let z = noise.ok_or_else(|| Error::InvalidConfig("eta > 0 needs a noise sample".into()))?;
        for (o, z) in out.iter_mut().zip(z) {
            *o += (sigma * *z as f64) as f32;
        }
    }
    Ok(out)
}

/// Uniform-stride visiting order `T = t_0 > t_1 > ... > t_n = 0`.
pub fn ddim_timesteps(steps: usize, n: usize) -> Vec<usize> {
    let n = n.clamp(1, steps);
    let mut ts: Vec<usize> = (0..=n).map(|i| ((steps * (n - i)) as f64 / n as f64).round() as usize).collect();
    ts.dedup();
    ts
}

/// Batched v-predictor. Inputs are `[b, 1, h, w]` noisy masks and one
/// timestep per row; `rows[i]` names the episode row `i` belongs to.
pub trait Denoiser {
    fn predict_v(&self, x_t: &Tensor<f32>, t: &[usize], rows: &[usize]) -> Tensor<f32>;
}

impl<F: Fn(&Tensor<f32>, &[usize], &[usize]) -> Tensor<f32>> Denoiser for F {
    fn predict_v(&self, x_t: &Tensor<f32>, t: &[usize], rows: &[usize]) -> Tensor<f32> {
        self(x_t, t, rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub n_ensemble: usize,
    pub eta: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_steps: 50, n_ensemble: 4, eta: 0.0 }
    }
}

/// Output of [`sample`] for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    /// Ensemble-mean probability map in `[0, 1]`, row-major `h x w`.
    pub prob: Vec<f32>,
    /// Mean over pixels of the across-member variance.
    pub ensemble_variance: f64,
    /// Final member maps, each in `[0, 1]`.
    pub members: Vec<Vec<f32>>,
}

/// Runs `n_ensemble` DDIM trajectories per episode from independent
/// Gaussian starts, all episodes in one batch. Each member's noise comes
/// from `(seeds[e], member)`, so results do not depend on batch layout.
pub fn sample(
    denoiser: &impl Denoiser,
    schedule: &NoiseSchedule,
    size: (usize, usize),
    seeds: &[u64],
    cfg: &SamplerConfig,
) -> Result<Vec<SampleOutput>> {
    let (h, w) = size;
    let p = h * w;
    let m = cfg.n_ensemble.max(1);
    let b = seeds.len() * m;
    let mut rngs: Vec<Rng> = seeds
        .iter()
        .flat_map(|s| (0..m).map(move |k| Rng::derived(*s, "ensemble", k as u64)))
        .collect();
    let mut x: Vec<f32> = Vec::with_capacity(b * p);
    for r in rngs.iter_mut() {
        x.extend(r.normal_vec::<f32>(p));
    }
    let rows: Vec<usize> = (0..b).map(|i| i / m).collect();
    let ts = ddim_timesteps(schedule.steps, cfg.n_steps);
    for pair in ts.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        let xt = Tensor::from_vec(Shape::new(b, 1, h, w), x);
        let v = denoiser.predict_v(&xt, &vec![t; b], &rows);
        let mut next = Vec::with_capacity(b * p);
        for i in 0..b {
            let noise = (cfg.eta > 0.0).then(|| rngs[i].normal_vec::<f32>(p));
            next.extend(ddim_step(
                &xt.data[i * p..(i + 1) * p],
                &v.data[i * p..(i + 1) * p],
                t,
                t_prev,
                schedule,
                cfg.eta,
                noise.as_deref(),
            )?);
        }
        x = next;
    }
    Ok((0..seeds.len())
        .map(|e| {
            let members: Vec<Vec<f32>> = (0..m)
                .map(|k| {
                    let i = e * m + k;
                    x[i * p..(i + 1) * p].iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect()
                })
                .collect();
            let prob: Vec<f32> =
                (0..p).map(|j| members.iter().map(|mm| mm[j]).sum::<f32>() / m as f32).collect();
            let var = (0..p)
                .map(|j| {
                    let mu = prob[j] as f64;
                    members.iter().map(|mm| (mm[j] as f64 - mu).powi(2)).sum::<f64>() / m as f64
                })
                .sum::<f64>()
                / p as f64;
            SampleOutput { prob, ensemble_variance: var, members }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_schedule_products() {
        let s = NoiseSchedule::from_betas(&[0.1, 0.2]).unwrap();
        assert!((s.alpha_bar[1] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[2] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn stride_for_250_over_50() {
        let ts = ddim_timesteps(250, 50);
        assert_eq!(ts.len(), 51);
        assert_eq!(&ts[..3], &[250, 245, 240]);
        assert_eq!(&ts[49..], &[5, 0]);
    }

    #[test]
    fn both_schedules_end_in_noise() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for steps in [2, 10, 250, 1000] {
                let s = NoiseSchedule::new(kind, steps).unwrap();
                assert!(s.alpha_bar[steps] < 0.01, "{kind:?} {steps}");
                assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
            }
        }
        assert_eq!(NoiseSchedule::new(ScheduleKind::Cosine, 1), Err(Error::InvalidT(1)));
    }

    #[test]
    fn clamped_step_keeps_x_t_on_its_noise_line() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 250).unwrap();
        let (t, t_prev) = (200, 150);
        let x_t = [0.3f32, -2.0, 1.7, 0.0];
        let v_hat = [2.5f32, -0.4, 1.1, -3.0];
        let x0: Vec<f32> = recover_x0(&x_t, &v_hat, t, &s).iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let next = ddim_step(&x_t, &v_hat, t, t_prev, &s, 0.0, None).unwrap();
        // independent route: eps from x_t and the clamped x0, then the closed-form update
        for i in 0..4 {
            let eps = (x_t[i] as f64 - s.alpha_bar[t].sqrt() * x0[i] as f64) / (1.0 - s.alpha_bar[t]).sqrt();
            let want = s.alpha_bar[t_prev].sqrt() * x0[i] as f64 + (1.0 - s.alpha_bar[t_prev]).sqrt() * eps;
            assert!((next[i] as f64 - want).abs() < 1e-5, "{i}: {} vs {want}", next[i]);
        }
        // unclamped inputs reproduce the plain v-parameterized step
        let v_small = [0.1f32, -0.2, 0.05, 0.0];
        let x_small = [0.2f32, -0.1, 0.3, 0.0];
        let plain_x0 = recover_x0(&x_small, &v_small, t, &s);
        assert!(plain_x0.iter().all(|v| v.abs() < 1.0));
        let plain_eps = recover_eps(&x_small, &v_small, t, &s);
        let got = ddim_step(&x_small, &v_small, t, t_prev, &s, 0.0, None).unwrap();
        for i in 0..4 {
            let want = s.alpha_bar[t_prev].sqrt() * plain_x0[i] as f64 + (1.0 - s.alpha_bar[t_prev]).sqrt() * plain_eps[i] as f64;
            assert!((got[i] as f64 - want).abs() < 1e-5);
        }
    }

    #[test]
    fn unit_snr_weight_is_half() {
        // alpha_bar = 0.5 gives SNR = 1
        let s = NoiseSchedule::from_betas(&[0.5]).unwrap();
        assert!((s.min_snr_weight(1, 5.0) - 0.5).abs() < 1e-15);
    }
}
