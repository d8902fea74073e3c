//! Forward-process noise schedule.

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// Per-timestep variance schedule with derived quantities, for t in [1, T].
/// `alpha_bar(0)` is defined as 1 (the noise-free endpoint).
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ScheduleParams {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams { t_max: 1000, beta_start: 0.0015, beta_end: 0.0195 }
    }
}

impl NoiseSchedule {
    /// Scaled-linear schedule: beta is linear in sqrt space between the two
    /// endpoints, so `beta_1 = beta_start` and `beta_T = beta_end` exactly.
    pub fn scaled_linear(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams { t_max, beta_start, beta_end } = params;
        if t_max == 0 {
            return Err(Error::InvalidInput("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidInput(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let s0 = beta_start.sqrt();
        let s1 = beta_end.sqrt();
        let mut betas = Vec::with_capacity(t_max);
        for t in 1..=t_max {
            let frac = if t_max == 1 { 0.0 } else { (t - 1) as f64 / (t_max - 1) as f64 };
            let s = s0 + frac * (s1 - s0);
            betas.push(s * s);
        }
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let mut alphas = Vec::with_capacity(betas.len());
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0f64;
        let mut prev_beta = 0.0f64;
        for (i, &b) in betas.iter().enumerate() {
            if !(0.0 < b && b < 1.0) || b < prev_beta {
                return Err(Error::InvalidInput(format!(
                    "betas must be increasing within (0, 1); step {} is {b}",
                    i + 1
                )));
            }
            prev_beta = b;
            let a = 1.0 - b;
            prod *= a;
            alphas.push(a);
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { t_max: betas.len(), betas, alphas, alpha_bars })
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "t={t} out of [1, {}]", self.t_max);
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t));
        self.alphas[t - 1]
    }

    /// Cumulative signal retention; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "t={t} out of [0, {}]", self.t_max);
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }
}

/// `z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise<T: Scalar>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t == 0 || t > schedule.t_max() {
        return Err(Error::InvalidInput(format!(
            "forward noising needs t in [1, {}], got {t}",
            schedule.t_max()
        )));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch("noise shape must match the latent".into()));
    }
    let ab = schedule.alpha_bar(t);
    let signal = T::from_f64(ab.sqrt());
    let noise = T::from_f64((1.0 - ab).sqrt());
    let mut out = z0.mapv(|v| v * signal);
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| *o = *o + noise * e);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_for;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    #[test]
    fn endpoints_match_parameters() {
        let s = NoiseSchedule::scaled_linear(ScheduleParams::default()).unwrap();
        assert!((s.beta(1) - 0.0015).abs() < 1e-12);
        assert!((s.beta(1000) - 0.0195).abs() < 1e-12);
        assert_eq!(s.t_max(), 1000);
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_small_at_end() {
        let s = NoiseSchedule::scaled_linear(ScheduleParams::default()).unwrap();
        let mut prev = 1.0;
        for t in 1..=1000 {
            let ab = s.alpha_bar(t);
            assert!(ab < prev, "alpha_bar not strictly decreasing at t={t}");
            prev = ab;
        }
        assert!(s.alpha_bar(1000) < 0.01, "alpha_bar(T) = {}", s.alpha_bar(1000));
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn single_step_schedule_degenerates_to_beta_start() {
        let s = NoiseSchedule::scaled_linear(ScheduleParams {
            t_max: 1,
            beta_start: 0.004,
            beta_end: 0.02,
        })
        .unwrap();
        assert!((s.beta(1) - 0.004).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges_rejected() {
        for (b0, b1) in [(0.0, 0.1), (0.2, 0.1), (0.1, 1.0)] {
            assert!(NoiseSchedule::scaled_linear(ScheduleParams {
                t_max: 10,
                beta_start: b0,
                beta_end: b1,
            })
            .is_err());
        }
    }

    #[test]
    fn forward_noise_limits_and_bounds() {
        let s = NoiseSchedule::scaled_linear(ScheduleParams::default()).unwrap();
        let z0 = ArrayD::from_elem(IxDyn(&[4]), 0.7f64);
        let eps = ArrayD::from_elem(IxDyn(&[4]), 1.0f64);
        // Small t with a tiny beta keeps z_t close to z0.
        let z1 = forward_noise(&z0, 1, &eps, &s).unwrap();
        for v in z1.iter() {
            assert!((v - 0.7).abs() < 0.05);
        }
        assert!(forward_noise(&z0, 0, &eps, &s).is_err());
        assert!(forward_noise(&z0, 1001, &eps, &s).is_err());
    }

    #[test]
    fn forward_noise_monte_carlo_statistics() {
        // Pooled over elements and 10^4 draws: the mean of z_t matches
        // sqrt(ab) * z0 within 1% (floored at Monte-Carlo precision, 3.5
        // standard errors) and the variance of z_t - sqrt(ab) * z0 matches
        // 1 - ab within 2%.
        let s = NoiseSchedule::scaled_linear(ScheduleParams::default()).unwrap();
        let mut rng = rng_for(12, "schedule/mc");
        let dims = 8;
        let z0 = ArrayD::from_shape_fn(IxDyn(&[dims]), |_| rng.random_range(0.5f64..1.5));
        let n = 10_000;
        for t in [1usize, 250, 500, 750, 1000] {
            let ab = s.alpha_bar(t);
            let expect_mean = ab.sqrt() * z0.iter().sum::<f64>() / dims as f64;
            let expect_var = 1.0 - ab;
            let mut sum = 0.0f64;
            let mut dev_sumsq = 0.0f64;
            for _ in 0..n {
                let eps = ArrayD::from_shape_fn(IxDyn(&[dims]), |_| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let zt = forward_noise(&z0, t, &eps, &s).unwrap();
                for (i, v) in zt.iter().enumerate() {
                    sum += v;
                    let dev = v - ab.sqrt() * z0[[i]];
                    dev_sumsq += dev * dev;
                }
            }
            let samples = (n * dims) as f64;
            let mean = sum / samples;
            let var = dev_sumsq / samples;
            let se_mean = (expect_var / samples).sqrt();
            let mean_tol = (0.01 * expect_mean.abs()).max(3.5 * se_mean);
            assert!(
                (mean - expect_mean).abs() <= mean_tol,
                "t={t}: mean {mean} vs {expect_mean} (tol {mean_tol})"
            );
            assert!(
                (var - expect_var).abs() <= 0.02 * expect_var,
                "t={t}: var {var} vs {expect_var}"
            );
        }
    }

    #[test]
    fn terminal_latent_decorrelates_from_signal() {
        let s = NoiseSchedule::scaled_linear(ScheduleParams::default()).unwrap();
        let mut rng = rng_for(13, "schedule/corr");
        let n = 4096;
        let z0 = ArrayD::from_shape_fn(IxDyn(&[n]), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let eps = ArrayD::from_shape_fn(IxDyn(&[n]), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let zt = forward_noise(&z0, 1000, &eps, &s).unwrap();
        let mean_a = z0.iter().sum::<f64>() / n as f64;
        let mean_b = zt.iter().sum::<f64>() / n as f64;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (a, b) in z0.iter().zip(zt.iter()) {
            cov += (a - mean_a) * (b - mean_b);
            va += (a - mean_a).powi(2);
            vb += (b - mean_b).powi(2);
        }
        let corr = cov / (va.sqrt() * vb.sqrt());
        assert!(corr.abs() < 0.15, "correlation {corr} too high at t = T");
    }
}
