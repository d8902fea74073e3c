//! Reverse-process samplers: ancestral denoising and deterministic
//! pseudo-linear-multistep (PLMS) reconstruction.

use super::schedule::NoiseSchedule;
use super::unet::Unet;
use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ancestral,
    Plms,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Number of inference grid points spread over `[0, T)`.
    pub steps: usize,
    /// Maximum multistep order (1..=4); 1 degenerates to the plain
    /// deterministic transfer chain.
    pub order: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { kind: SamplerKind::Plms, steps: 100, order: 4 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.t_max() {
            return Err(Error::Config(format!(
                "inference steps must be in [1, {}], got {}",
                schedule.t_max(),
                self.steps
            )));
        }
        if !(1..=4).contains(&self.order) {
            return Err(Error::Config(format!("multistep order must be 1..=4, got {}", self.order)));
        }
        Ok(())
    }

    /// Evenly spaced integer grid over `[0, T)`, ascending, no duplicates.
    pub fn grid(&self, schedule: &NoiseSchedule) -> Vec<usize> {
        let t_max = schedule.t_max();
        let mut grid: Vec<usize> =
            (0..self.steps).map(|i| i * t_max / self.steps).collect();
        grid.dedup();
        grid
    }
}

/// One ancestral denoising step (fixed variance `sigma_t = sqrt(beta_t)`):
/// `z_{t-1} = (z_t - beta_t/sqrt(1-alpha_bar_t) * eps_hat)/sqrt(alpha_t)
///            + sigma_t * n`, with `n = 0` at `t = 1`.
pub fn ddpm_step<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    noise: Option<&Tensor<T>>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t == 0 || t > schedule.t_max() {
        return Err(Error::InvalidInput(format!(
            "denoising step needs t in [1, {}], got {t}",
            schedule.t_max()
        )));
    }
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch("noise prediction shape must match latent".into()));
    }
    let beta = schedule.beta(t);
    let alpha = schedule.alpha(t);
    let ab = schedule.alpha_bar(t);
    let coeff = T::from_f64(beta / (1.0 - ab).sqrt());
    let inv_sqrt_alpha = T::from_f64(1.0 / alpha.sqrt());
    let mut out = z_t.clone();
    ndarray::Zip::from(&mut out)
        .and(eps_hat)
        .for_each(|z, &e| *z = (*z - coeff * e) * inv_sqrt_alpha);
    if t > 1 {
        if let Some(n) = noise {
            if n.shape() != z_t.shape() {
                return Err(Error::ShapeMismatch("step noise shape must match latent".into()));
            }
            let sigma = T::from_f64(schedule.sigma(t));
            ndarray::Zip::from(&mut out).and(n).for_each(|z, &nv| *z = *z + sigma * nv);
        }
    }
    Ok(out)
}

/// Deterministic transfer from timestep `t` to `s < t`: reconstruct the
/// noise-free estimate and re-noise it to level `s` with the same predicted
/// noise. `s = 0` returns the noise-free estimate exactly.
pub fn ddim_transfer<T: Scalar>(
    z_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    s: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if s >= t {
        return Err(Error::InvalidInput(format!("transfer requires s < t, got {s} >= {t}")));
    }
    if t > schedule.t_max() {
        return Err(Error::InvalidInput(format!("t={t} beyond schedule")));
    }
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch("noise prediction shape must match latent".into()));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_s = schedule.alpha_bar(s);
    let inv_sqrt_ab_t = 1.0 / ab_t.sqrt();
    let noise_t = (1.0 - ab_t).sqrt();
    let sig_s = T::from_f64(ab_s.sqrt());
    let noise_s = T::from_f64((1.0 - ab_s).sqrt());
    let mut out = z_t.clone();
    ndarray::Zip::from(&mut out).and(eps_hat).for_each(|z, &e| {
        let x0 = T::from_f64((z.as_f64() - noise_t * e.as_f64()) * inv_sqrt_ab_t);
        *z = sig_s * x0 + noise_s * e;
    });
    Ok(out)
}

/// Outcome of a PLMS reconstruction.
pub struct PlmsOutcome<T> {
    pub z0_hat: Tensor<T>,
    /// Set when no grid point lies below `t_start` so the input was returned
    /// unchanged.
    pub warned: bool,
    /// Number of model evaluations performed.
    pub evals: usize,
}

/// Deterministic multi-step reconstruction from `z_start` at `t_start` down
/// to the noise-free latent, walking the inference grid points `<= t_start`.
///
/// A buffer of up to `order` past noise predictions drives the effective
/// noise used in each transfer:
/// order 1: `e`; 2: `(3e - e1)/2`; 3: `(23e - 16e1 + 5e2)/12`;
/// 4: `(55e - 59e1 + 37e2 - 9e3)/24`.
pub fn plms_reconstruct<T: Scalar>(
    model: &mut Unet<T>,
    z_start: &Tensor<T>,
    t_start: usize,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> Result<PlmsOutcome<T>> {
    sampler.validate(schedule)?;
    if t_start > schedule.t_max() {
        return Err(Error::InvalidInput(format!(
            "t_start={t_start} beyond schedule T={}",
            schedule.t_max()
        )));
    }
    if t_start == 0 {
        return Ok(PlmsOutcome { z0_hat: z_start.clone(), warned: false, evals: 0 });
    }
    let grid = sampler.grid(schedule);
    // Targets strictly below t_start, walked top-down, ending at 0.
    let mut targets: Vec<usize> = grid.into_iter().filter(|&g| g < t_start).rev().collect();
    if targets.is_empty() {
        return Ok(PlmsOutcome { z0_hat: z_start.clone(), warned: true, evals: 0 });
    }
    if *targets.last().unwrap() != 0 {
        targets.push(0);
    }

    let mut z = z_start.clone();
    let mut t_cur = t_start;
    let mut history: VecDeque<Tensor<T>> = VecDeque::with_capacity(4);
    let mut evals = 0usize;
    for &s in &targets {
        let eps = model.forward(&z, t_cur)?;
        evals += 1;
        history.push_front(eps);
        while history.len() > sampler.order {
            history.pop_back();
        }
        let eps_eff = combine_history(&history);
        z = ddim_transfer(&z, &eps_eff, t_cur, s, schedule)?;
        t_cur = s;
    }
    Ok(PlmsOutcome { z0_hat: z, warned: false, evals })
}

/// Adams-Bashforth-style combination of the most recent noise predictions
/// (`history[0]` newest).
fn combine_history<T: Scalar>(history: &VecDeque<Tensor<T>>) -> Tensor<T> {
    let coeffs: &[f64] = match history.len() {
        1 => &[1.0],
        2 => &[3.0 / 2.0, -1.0 / 2.0],
        3 => &[23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0],
        _ => &[55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0],
    };
    let mut out = history[0].mapv(|v| v * T::from_f64(coeffs[0]));
    for (k, c) in coeffs.iter().enumerate().skip(1) {
        let cv = T::from_f64(*c);
        ndarray::Zip::from(&mut out).and(&history[k]).for_each(|o, &e| *o = *o + cv * e);
    }
    out
}

/// Stochastic ancestral reconstruction from `t_start` down to 0 using every
/// integer timestep; noise is drawn from `rng`.
pub fn ancestral_reconstruct<T: Scalar>(
    model: &mut Unet<T>,
    z_start: &Tensor<T>,
    t_start: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl rand::Rng,
) -> Result<Tensor<T>> {
    if t_start > schedule.t_max() {
        return Err(Error::InvalidInput(format!("t_start={t_start} beyond schedule")));
    }
    let mut z = z_start.clone();
    for t in (1..=t_start).rev() {
        let eps = model.forward(&z, t)?;
        let noise = if t > 1 {
            Some(z.mapv(|_| T::from_f64(rng.sample::<f64, _>(rand_distr::StandardNormal))))
        } else {
            None
        };
        z = ddpm_step(&z, &eps, t, noise.as_ref(), schedule)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::{forward_noise, ScheduleParams};
    use crate::seeding::rng_for;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::scaled_linear(ScheduleParams::default()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = rng_for(seed, "sampler/test");
        ArrayD::from_shape_fn(IxDyn(shape), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
    }

    #[test]
    fn grid_covers_range_without_duplicates() {
        let s = schedule();
        let cfg = SamplerConfig::default();
        let grid = cfg.grid(&s);
        assert_eq!(grid.len(), 100);
        assert_eq!(grid[0], 0);
        assert_eq!(grid[99], 990);
        for w in grid.windows(2) {
            assert!(w[0] < w[1]);
        }
        // Anomaly-map t values land exactly on the default grid.
        for t in [100, 200, 300, 400] {
            assert!(grid.contains(&t));
        }
    }

    #[test]
    fn ddpm_step_reduces_to_z_t_for_tiny_beta() {
        let s = NoiseSchedule::from_betas(vec![1e-9, 2e-9]).unwrap();
        let z = random(&[8], 1);
        let eps = random(&[8], 2);
        let out = ddpm_step(&z, &eps, 2, None, &s).unwrap();
        for (a, b) in z.iter().zip(out.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert_eq!(out.shape(), z.shape());
        assert!(ddpm_step(&z, &eps, 0, None, &s).is_err());
    }

    #[test]
    fn ddim_transfer_to_zero_inverts_forward_noising_exactly() {
        let s = schedule();
        let z0 = random(&[16], 3);
        let eps = random(&[16], 4);
        for t in [1usize, 137, 500, 1000] {
            let zt = forward_noise(&z0, t, &eps, &s).unwrap();
            let back = ddim_transfer(&zt, &eps, t, 0, &s).unwrap();
            for (a, b) in z0.iter().zip(back.iter()) {
                let rel = (a - b).abs() / a.abs().max(1e-3);
                assert!(rel < 1e-5, "t={t}: {a} vs {b}");
            }
        }
        let zt = forward_noise(&z0, 10, &eps, &s).unwrap();
        assert!(ddim_transfer(&zt, &eps, 10, 10, &s).is_err());
        assert!(ddim_transfer(&zt, &eps, 10, 11, &s).is_err());
    }

    #[test]
    fn ddim_transfer_composes() {
        // t -> s -> r equals t -> r when the predicted noise is held fixed.
        let s = schedule();
        let z0 = random(&[12], 5);
        let eps = random(&[12], 6);
        let zt = forward_noise(&z0, 800, &eps, &s).unwrap();
        let direct = ddim_transfer(&zt, &eps, 800, 200, &s).unwrap();
        let mid = ddim_transfer(&zt, &eps, 800, 500, &s).unwrap();
        let composed = ddim_transfer(&mid, &eps, 500, 200, &s).unwrap();
        for (a, b) in direct.iter().zip(composed.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn plms_from_zero_returns_input() {
        let s = schedule();
        let mut unet = Unet::<f64>::new(
            super::super::unet::UnetConfig { in_channels: 2, channels: vec![4], attention_cap: 512 },
            1,
        )
        .unwrap();
        let z = random(&[2, 4, 4, 4], 7);
        let out =
            plms_reconstruct(&mut unet, &z, 0, &s, &SamplerConfig::default()).unwrap();
        assert!(!out.warned);
        assert_eq!(out.evals, 0);
        assert_eq!(out.z0_hat, z);
    }

    #[test]
    fn plms_order_one_equals_plain_transfer_chain() {
        let s = schedule();
        let cfg_tiny = super::super::unet::UnetConfig {
            in_channels: 2,
            channels: vec![4],
            attention_cap: 512,
        };
        let mut unet = Unet::<f64>::new(cfg_tiny, 2).unwrap();
        // Give the output head weights so predictions are non-trivial.
        let mut rng = rng_for(8, "sampler/plms1");
        for p in crate::nn::ParamSet::params_mut(&mut unet) {
            if p.name == "out.conv.weight" {
                for v in p.value.iter_mut() {
                    *v = rng.random_range(-0.05..0.05);
                }
            }
        }
        let z = random(&[2, 4, 4, 4], 9);
        let sampler = SamplerConfig { kind: SamplerKind::Plms, steps: 25, order: 1 };
        let out = plms_reconstruct(&mut unet, &z, 500, &s, &sampler).unwrap();

        // Hand-rolled first-order chain over the same grid.
        let grid = sampler.grid(&s);
        let mut targets: Vec<usize> = grid.into_iter().filter(|&g| g < 500).rev().collect();
        if *targets.last().unwrap() != 0 {
            targets.push(0);
        }
        let mut zc = z.clone();
        let mut t_cur = 500;
        for &g in &targets {
            let eps = unet.forward(&zc, t_cur).unwrap();
            zc = ddim_transfer(&zc, &eps, t_cur, g, &s).unwrap();
            t_cur = g;
        }
        assert_eq!(out.z0_hat, zc, "order-1 multistep must equal the plain chain exactly");
    }

    #[test]
    fn plms_with_oracle_noise_recovers_the_latent() {
        // A model that always predicts the exact forward noise makes the
        // deterministic chain invert Eq. 1 up to schedule truncation error.
        let s = schedule();
        let z0 = random(&[2, 2, 2, 2], 10);
        let eps = random(&[2, 2, 2, 2], 11);
        let zt = forward_noise(&z0, 600, &eps, &s).unwrap();
        let mut z = zt;
        let mut t_cur = 600;
        for &g in &[400usize, 200, 100, 0] {
            z = ddim_transfer(&z, &eps, t_cur, g, &s).unwrap();
            t_cur = g;
        }
        for (a, b) in z0.iter().zip(z.iter()) {
            assert!((a - b).abs() < 1e-9, "oracle chain drifted: {a} vs {b}");
        }
    }

    #[test]
    fn ancestral_with_oracle_noise_recovers_signal_statistically() {
        // With the true noise injected as the prediction and zero step noise,
        // repeated ancestral steps walk back close to z0.
        let s = schedule();
        let z0 = random(&[6], 12);
        let eps = random(&[6], 13);
        let t0 = 40;
        let zt = forward_noise(&z0, t0, &eps, &s).unwrap();
        let before: f64 =
            z0.iter().zip(zt.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let mut z = zt;
        for t in (1..=t0).rev() {
            z = ddpm_step(&z, &eps, t, None, &s).unwrap();
        }
        // The fixed-prediction mean-only chain is not an exact inverse (the
        // deterministic transfer is; tested above). Measured here: initial
        // perturbation 0.246 contracts to 0.171.
        let after: f64 =
            z0.iter().zip(z.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(after < 0.25, "ancestral oracle drifted too far: {after}");
        assert!(after < 0.8 * before, "denoising did not move toward z0 ({after} vs {before})");
    }
    #[test]
    #[ignore]
    fn oracle_drift_probe() {
        let s = schedule();
        for t0 in [20usize, 40, 100, 200] {
            let z0 = random(&[6], 12);
            let eps = random(&[6], 13);
            let zt = forward_noise(&z0, t0, &eps, &s).unwrap();
            let before: f64 =
                z0.iter().zip(zt.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let mut z = zt;
            for t in (1..=t0).rev() {
                z = ddpm_step(&z, &eps, t, None, &s).unwrap();
            }
            let after: f64 =
                z0.iter().zip(z.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            println!("t0={t0}: before={before:.4} after={after:.4} ratio={:.3}", after / before);
        }
    }
}
