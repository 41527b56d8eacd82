//! Online Gaussian models of same-cluster and cross-cluster similarity, and
//! the log-likelihood ratio used by the CRP engine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA_MIN: f64 = 0.05;
pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Welford's single-pass mean / sum-of-squared-deviations accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WelfordAccumulator {
    pub n: u64,
    pub mean: f64,
    #[serde(rename = "M2")]
    pub m2: f64,
}

impl WelfordAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, x: f64) -> Result<()> {
        if !x.is_finite() {
            return Err(Error::InvalidObservation(x));
        }
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
        // Rounding can push M2 a hair below zero on constant input.
        if self.m2 < 0.0 {
            self.m2 = 0.0;
        }
        Ok(())
    }

    /// Population variance `M2 / n`; zero when empty.
    pub fn variance(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.m2 / self.n as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodMode {
    ColdStart,
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityModel {
    pub intra: WelfordAccumulator,
    pub inter: WelfordAccumulator,
    pub sigma_min: f64,
    pub epsilon: f64,
}

impl Default for SimilarityModel {
    fn default() -> Self {
        SimilarityModel::new(DEFAULT_SIGMA_MIN, DEFAULT_EPSILON)
    }
}

impl SimilarityModel {
    pub fn new(sigma_min: f64, epsilon: f64) -> Self {
        SimilarityModel {
            intra: WelfordAccumulator::new(),
            inter: WelfordAccumulator::new(),
            sigma_min,
            epsilon,
        }
    }

    /// Gaussian mode needs at least one observation on each side.
    pub fn mode(&self) -> LikelihoodMode {
        if self.intra.n < 1 || self.inter.n < 1 {
            LikelihoodMode::ColdStart
        } else {
            LikelihoodMode::Gaussian
        }
    }

    pub fn sigma_intra(&self) -> f64 {
        self.intra.std_dev().max(self.sigma_min)
    }

    pub fn sigma_inter(&self) -> f64 {
        self.inter.std_dev().max(self.sigma_min)
    }

    pub fn log_likelihood_ratio(&self, s: f64) -> Result<f64> {
        if self.mode() == LikelihoodMode::ColdStart {
            return Err(Error::ColdStart);
        }
        Ok(gaussian_llr(
            s,
            self.intra.mean,
            self.sigma_intra(),
            self.inter.mean,
            self.sigma_inter(),
        ))
    }

    /// `ln(s + ε) − ln(1 − s + ε)` with `s` clamped to `[0, 1]`.
    pub fn cold_start_logit(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        (s + self.epsilon).ln() - (1.0 - s + self.epsilon).ln()
    }

    pub fn evaluate(&self, s: f64) -> f64 {
        match self.mode() {
            LikelihoodMode::ColdStart => self.cold_start_logit(s),
            LikelihoodMode::Gaussian => gaussian_llr(
                s,
                self.intra.mean,
                self.sigma_intra(),
                self.inter.mean,
                self.sigma_inter(),
            ),
        }
    }

    /// Feeds the outcome of one assignment: the similarity to the joined
    /// cluster (if any) goes to `intra`, all others to `inter`. Inputs are
    /// validated before anything is mutated.
    pub fn record_assignment(&mut self, assigned: Option<f64>, others: &[f64]) -> Result<()> {
        if let Some(bad) = assigned.iter().chain(others).copied().find(|x| !x.is_finite()) {
            return Err(Error::InvalidObservation(bad));
        }
        if let Some(s) = assigned {
            self.intra.update(s)?;
        }
        for &s in others {
            self.inter.update(s)?;
        }
        Ok(())
    }
}

/// Log-likelihood ratio of `N(μ_intra, σ_intra²)` against `N(μ_inter, σ_inter²)`.
pub fn gaussian_llr(s: f64, mu_intra: f64, sd_intra: f64, mu_inter: f64, sd_inter: f64) -> f64 {
    (s - mu_inter).powi(2) / (2.0 * sd_inter * sd_inter) - (s - mu_intra).powi(2) / (2.0 * sd_intra * sd_intra)
        + (sd_inter / sd_intra).ln()
}

/// Equal-variance-weighted decision point between the two Gaussians.
pub fn decision_boundary(mu_intra: f64, sd_intra: f64, mu_inter: f64, sd_inter: f64) -> f64 {
    let vi = sd_intra * sd_intra;
    let ve = sd_inter * sd_inter;
    (mu_intra * ve + mu_inter * vi) / (vi + ve)
}

/// `2·exp(−Δ² / (8(σ_intra² + σ_inter²)))`.
pub fn chernoff_bound(delta: f64, sd_intra: f64, sd_inter: f64) -> f64 {
    2.0 * (-delta * delta / (8.0 * (sd_intra * sd_intra + sd_inter * sd_inter))).exp()
}
