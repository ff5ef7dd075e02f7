use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Deterministic DDIM sampling over a linear noise schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cfg_scale: f64,
    /// Clamp the guided clean-latent prediction to `[-1, 1]`.
    pub clip_sample: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            cfg_scale: 7.5,
            clip_sample: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.steps > self.train_steps {
            return Err(invalid(
                "steps",
                format!("{} not in [1, train_steps = {}]", self.steps, self.train_steps),
            ));
        }
        if !(self.beta_start > 0.0 && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return Err(invalid(
                "beta_start/beta_end",
                format!("need 0 < {} < {} < 1", self.beta_start, self.beta_end),
            ));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(invalid("cfg_scale", format!("{} is not finite and >= 0", self.cfg_scale)));
        }
        Ok(())
    }

    pub fn betas(&self) -> Vec<f64> {
        let n = self.train_steps;
        if n == 1 {
            return vec![self.beta_start];
        }
        (0..n)
            .map(|i| self.beta_start + (self.beta_end - self.beta_start) * i as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn alphas_cumprod(&self) -> Vec<f64> {
        let mut acc = 1.0;
        self.betas()
            .into_iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect()
    }

    /// Training timesteps visited, from noisiest to cleanest; sampler step `i`
    /// uses entry `i`.
    pub fn timesteps(&self) -> Vec<usize> {
        let ratio = self.train_steps / self.steps;
        (0..self.steps).rev().map(|i| i * ratio).collect()
    }

    /// `(alpha_bar_t, alpha_bar_prev)` per sampler step; the last step lands on 1.
    pub fn alpha_pairs(&self) -> Vec<(f64, f64)> {
        let ac = self.alphas_cumprod();
        let ratio = self.train_steps / self.steps;
        self.timesteps()
            .into_iter()
            .map(|t| (ac[t], if t >= ratio { ac[t - ratio] } else { 1.0 }))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let s = SamplerConfig::default();
        s.validate().unwrap();
        let b = s.betas();
        assert_eq!(b.len(), 1000);
        assert!(b.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(b[0], 1e-4);
        assert!((b[999] - 0.02).abs() < 1e-15);
        let ts = s.timesteps();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (980, 0));
        let pairs = s.alpha_pairs();
        assert!(pairs.iter().all(|&(a, p)| a < p && p <= 1.0));
        assert_eq!(pairs[49].1, 1.0);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(SamplerConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { cfg_scale: -1.0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { beta_end: 1e-5, ..Default::default() }.validate().is_err());
    }
}
