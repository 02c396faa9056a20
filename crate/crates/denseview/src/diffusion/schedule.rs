//! Cosine ᾱ schedule and the sampler's step-subset configuration.

use crate::error::{Error, Result};

/// Table of ᾱ_t for t ∈ [0, N]: ᾱ_t = cos²(π/2 · t/N) clamped to (1e-5, 1],
/// strictly decreasing, ᾱ_0 = 1 exactly.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

const ALPHA_FLOOR: f64 = 1e-5;

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs ≥ 1 step".to_string()));
        }
        let alpha_bar: Vec<f64> = (0..=steps)
            .map(|t| {
                let angle = std::f64::consts::FRAC_PI_2 * t as f64 / steps as f64;
                angle.cos().powi(2).clamp(ALPHA_FLOOR, 1.0)
            })
            .collect();
        for w in alpha_bar.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::config(format!(
                    "clamped schedule not strictly decreasing at ᾱ={}; use fewer steps",
                    w[1]
                )));
            }
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// Largest t index (the table has N+1 entries).
    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t].sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar[t]).sqrt()
    }
}

/// Inference step policy: how many denoiser evaluations, over which schedule
/// indices. Only the deterministic (η = 0) sampler exists.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Explicit strictly-decreasing t subset; derived evenly when absent.
    pub subset: Option<Vec<usize>>,
    pub deterministic: bool,
}

impl SamplerConfig {
    pub fn new(steps: usize) -> Self {
        SamplerConfig { steps, subset: None, deterministic: true }
    }

    /// The strictly decreasing t values to visit. Defaults to K evenly spaced
    /// indices from N down to N/K.
    pub fn step_subset(&self, schedule: &NoiseSchedule) -> Result<Vec<usize>> {
        if !self.deterministic {
            return Err(Error::config("stochastic (η > 0) sampling is not supported".to_string()));
        }
        let n = schedule.steps();
        let subset = match &self.subset {
            Some(s) => s.clone(),
            None => {
                if self.steps == 0 || self.steps > n {
                    return Err(Error::config(format!(
                        "inference steps {} outside [1, {}]",
                        self.steps, n
                    )));
                }
                (0..self.steps)
                    .map(|i| ((self.steps - i) * n) / self.steps)
                    .collect()
            }
        };
        if subset.is_empty() || subset.iter().any(|&t| t > n) {
            return Err(Error::config(format!("step subset {:?} outside schedule", subset)));
        }
        for w in subset.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::config(format!(
                    "step subset must strictly decrease, got {:?}",
                    subset
                )));
            }
        }
        Ok(subset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_monotonicity() {
        let s = NoiseSchedule::cosine(50).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!(s.alpha_bar(50) <= 1e-5 + 1e-12);
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn sqrt_tables_satisfy_identity() {
        let s = NoiseSchedule::cosine(50).unwrap();
        for t in 0..=50 {
            let a = s.sqrt_alpha_bar(t);
            let b = s.sqrt_one_minus_alpha_bar(t);
            assert!((a * a + b * b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn default_subset_is_even_and_decreasing() {
        let s = NoiseSchedule::cosine(50).unwrap();
        let c = SamplerConfig::new(10);
        let subset = c.step_subset(&s).unwrap();
        assert_eq!(subset, vec![50, 45, 40, 35, 30, 25, 20, 15, 10, 5]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let s = NoiseSchedule::cosine(20).unwrap();
        assert!(SamplerConfig::new(0).step_subset(&s).is_err());
        assert!(SamplerConfig::new(21).step_subset(&s).is_err());
        let mut c = SamplerConfig::new(2);
        c.subset = Some(vec![5, 5]);
        assert!(c.step_subset(&s).is_err());
        let mut c2 = SamplerConfig::new(2);
        c2.deterministic = false;
        assert!(c2.step_subset(&s).is_err());
    }
}
