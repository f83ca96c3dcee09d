use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear beta schedule over `steps` timesteps, indexed from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("noise schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 1.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config(format!("betas must lie in (0, 1), got {beta_start}..{beta_end}")));
        }
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        if acc >= 1e-3 {
            return Err(Error::Config(format!("schedule ends at alpha-bar {acc:.2e}; the chain does not reach noise")));
        }
        Ok(Self { betas, alpha_bars })
    }

    /// The 1e-4..0.02 schedule of a 1000-step chain, with both endpoints
    /// scaled by `1000 / steps` so shorter chains still end near pure noise.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let s = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, 1e-4 * s, (0.02 * s).min(0.999))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::invalid(format!("timestep {t} outside 1..={}", self.betas.len())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.beta(t)?)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    /// Signal coefficient and noise variance of `z_t` given `z_0`, composed
    /// one step of the Markov chain at a time.
    pub fn chain_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        self.index(t)?;
        let (mut signal, mut var) = (1.0f64, 0.0f64);
        for b in &self.betas[..t] {
            signal *= (1.0 - b).sqrt();
            var = (1.0 - b) * var + b;
        }
        Ok((signal, var))
    }
}

/// `sqrt(ᾱ_t) z0 + sqrt(1 − ᾱ_t) eps`.
pub fn forward_diffuse(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    Ok(((z0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// One step of the chain: `sqrt(1 − β_t) z_{t−1} + sqrt(β_t) eps`.
pub fn diffuse_step(z_prev: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    let b = schedule.beta(t)?;
    Ok(((z_prev * (1.0 - b).sqrt())? + (eps * b.sqrt())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn schedule_invariants() {
        for steps in [10, 100, 1000] {
            let s = NoiseSchedule::scaled_linear(steps).unwrap();
            let abs: Vec<f64> = (1..=steps).map(|t| s.alpha_bar(t).unwrap()).collect();
            assert!(abs.windows(2).all(|w| w[1] < w[0]));
            assert!(abs[steps - 1] < 1e-3);
            assert!((1..=steps).all(|t| (0.0..1.0).contains(&s.beta(t).unwrap())));
        }
        assert!(NoiseSchedule::linear(100, 1e-4, 0.02).is_err());
        let s = NoiseSchedule::scaled_linear(1000).unwrap();
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(1001).is_err());
    }

    #[test]
    fn closed_form_matches_chain() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        for t in [1, 2, 17, 50, 100] {
            let (signal, var) = s.chain_coefficients(t).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            assert!((signal - ab.sqrt()).abs() < 1e-6);
            assert!((var - (1.0 - ab)).abs() < 1e-6);
        }
        // Noise-free chain applied pointwise.
        let dev = Device::Cpu;
        let z0 = Tensor::new(&[0.3f64, -1.2, 2.0], &dev).unwrap();
        let zero = z0.zeros_like().unwrap();
        let mut z = z0.clone();
        for t in 1..=40 {
            z = diffuse_step(&z, t, &zero, &s).unwrap();
        }
        let closed = forward_diffuse(&z0, 40, &zero, &s).unwrap();
        let d: f64 = (z - closed).unwrap().abs().unwrap().max(0).unwrap().to_scalar().unwrap();
        assert!(d < 1e-6);
    }

    #[test]
    fn final_marginal_is_standard_normal() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dev = Device::Cpu;
        let z0 = Tensor::full(1.5f64, n, &dev).unwrap();
        let zt: Vec<f64> = forward_diffuse(&z0, 100, &Tensor::new(eps, &dev).unwrap(), &s).unwrap().to_vec1().unwrap();
        let mean = zt.iter().sum::<f64>() / n as f64;
        let var = zt.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::scaled_linear(100).unwrap();
        let z0 = Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let z = forward_diffuse(&z0, 30, &z0.zeros_like().unwrap(), &s).unwrap().to_vec1::<f64>().unwrap();
        let r = s.alpha_bar(30).unwrap().sqrt();
        assert_eq!(z, vec![r, -2.0 * r]);
        let near = forward_diffuse(&z0, 1, &z0.ones_like().unwrap(), &s).unwrap().to_vec1::<f64>().unwrap();
        assert!((near[0] - 1.0).abs() < 0.05);
    }
}
