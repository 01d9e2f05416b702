//! Variance-preserving noise schedule and timestep sampling.
//!
//! Timesteps are 1-based (t in 1..=N). The products `abar` use the convention
//! abar(0) = 1, which is what makes the final reverse step land exactly on a
//! clean sample.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Precomputed schedule: beta_t, alpha_t = 1 - beta_t, and the running
/// product abar_t.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    abar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp from `beta_start` to `beta_end` over `num_steps`
    /// timesteps. Betas must stay in (0, 1) so the signal never vanishes in a
    /// single step.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("schedule needs at least one timestep".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got start {} end {}",
                beta_start, beta_end
            )));
        }
        let mut beta = Vec::with_capacity(num_steps);
        let mut abar = Vec::with_capacity(num_steps);
        let mut prod = 1.0;
        for i in 0..num_steps {
            let frac = if num_steps > 1 { i as f64 / (num_steps - 1) as f64 } else { 0.0 };
            let b = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - b;
            if prod <= 0.0 {
                return Err(Error::Numeric(format!(
                    "signal level underflowed to {} at timestep {}",
                    prod,
                    i + 1
                )));
            }
            beta.push(b);
            abar.push(prod);
        }
        Ok(Self { beta, abar })
    }

    pub fn num_steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::Structural(format!(
                "timestep {} out of range 1..={}",
                t,
                self.num_steps()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    /// Cumulative signal level; abar(0) = 1 by convention.
    pub fn abar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.abar[t - 1])
    }

    /// Signal-to-noise ratio sqrt(abar_t) / (1 - abar_t).
    pub fn snr(&self, t: usize) -> Result<f64> {
        let abar = self.abar(t)?;
        if abar >= 1.0 {
            return Err(Error::Structural("snr is undefined at t = 0".into()));
        }
        Ok(abar.sqrt() / (1.0 - abar))
    }
}

/// How training timesteps are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimestepSampler {
    /// Uniform over 1..=N.
    Uniform,
    /// Uniform over a closed subrange (used to concentrate gradient batches
    /// at low signal-to-noise ratios).
    Window { lo: usize, hi: usize },
}

impl TimestepSampler {
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if let TimestepSampler::Window { lo, hi } = self {
            if *lo == 0 || lo > hi || *hi > num_steps {
                return Err(Error::Config(format!(
                    "timestep window [{}, {}] invalid for schedule of length {}",
                    lo, hi, num_steps
                )));
            }
        }
        Ok(())
    }

    pub fn draw(&self, num_steps: usize, rng: &mut ChaCha12Rng) -> usize {
        match self {
            TimestepSampler::Uniform => rng.gen_range(1..=num_steps),
            TimestepSampler::Window { lo, hi } => rng.gen_range(*lo..=*hi),
        }
    }
}

/// Diffuses a clean point to timestep t given the noise draw:
/// x_t = sqrt(abar) x0 + sqrt(1 - abar) eps.
pub fn noised(x0: &[f64], eps: &[f64], abar: f64) -> Vec<f64> {
    debug_assert_eq!(x0.len(), eps.len());
    let sa = abar.sqrt();
    let sn = (1.0 - abar).sqrt();
    x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamSeeder;

    #[test]
    fn default_schedule_endpoints() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.beta(1).unwrap() - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-15);
        assert!((s.alpha(1).unwrap() - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn abar_is_the_running_product_and_decreasing() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.3).unwrap();
        let mut prod = 1.0;
        let mut prev = 1.0;
        for t in 1..=50 {
            prod *= s.alpha(t).unwrap();
            let a = s.abar(t).unwrap();
            assert!((a - prod).abs() < 1e-15);
            assert!(a < prev);
            prev = a;
        }
        assert_eq!(s.abar(0).unwrap(), 1.0);
    }

    #[test]
    fn two_step_hand_case() {
        // alpha = (0.9, 0.729): abar_2 = 0.6561, snr_2 = 0.81 / 0.3439.
        let s = NoiseSchedule::linear(2, 0.1, 0.271).unwrap();
        assert!((s.abar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.abar(2).unwrap() - 0.6561).abs() < 1e-12);
        let snr = s.snr(2).unwrap();
        assert!((snr - 0.81 / 0.3439).abs() < 1e-12);
    }

    #[test]
    fn snr_is_strictly_decreasing() {
        let s = NoiseSchedule::linear(200, 1e-4, 0.05).unwrap();
        let mut prev = f64::INFINITY;
        for t in 1..=200 {
            let snr = s.snr(t).unwrap();
            assert!(snr < prev, "snr must fall at every timestep");
            prev = snr;
        }
    }

    #[test]
    fn noised_hand_case() {
        // abar = 0.64: x_t = 0.8 x0 + 0.6 eps.
        let x_t = noised(&[1.0, 0.0], &[0.0, 1.0], 0.64);
        assert!((x_t[0] - 0.8).abs() < 1e-15);
        assert!((x_t[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_timesteps_are_rejected() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        assert!(s.beta(0).is_err());
        assert!(s.beta(11).is_err());
        assert!(s.abar(11).is_err());
    }

    #[test]
    fn window_sampler_stays_in_bounds() {
        let seeder = StreamSeeder::new(5);
        let mut rng = seeder.stream("test/window");
        let sampler = TimestepSampler::Window { lo: 500, hi: 1000 };
        sampler.validate(1000).unwrap();
        for _ in 0..200 {
            let t = sampler.draw(1000, &mut rng);
            assert!((500..=1000).contains(&t));
        }
        assert!(TimestepSampler::Window { lo: 0, hi: 10 }.validate(1000).is_err());
        assert!(TimestepSampler::Window { lo: 5, hi: 1001 }.validate(1000).is_err());
    }

    #[test]
    fn invalid_beta_ranges_are_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }
}
