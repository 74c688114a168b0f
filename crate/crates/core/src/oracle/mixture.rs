//! Gaussian-mixture data distributions and prompt-like conditions.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 8;

/// Diagonal-covariance Gaussian mixture. Weights sum to 1 (within 1e-12),
/// covariance entries strictly positive, 1 ≤ d ≤ 8 — all enforced at
/// construction.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    dim: usize,
    weights: Array1<f64>,   // K
    means: Array2<f64>,     // K × d
    cov_diags: Array2<f64>, // K × d
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, cov_diags: Vec<Vec<f64>>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(Error::InvalidMixture("no components".into()));
        }
        if means.len() != k || cov_diags.len() != k {
            return Err(Error::InvalidMixture(format!(
                "{} weights but {} means / {} covariances",
                k,
                means.len(),
                cov_diags.len()
            )));
        }
        let dim = means[0].len();
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidMixture(format!(
                "dim must be in 1..={MAX_DIM}, got {dim}"
            )));
        }
        let mut sum = 0.0;
        for &w in &weights {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidMixture(format!(
                    "weights must be strictly positive, got {w}"
                )));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture(format!(
                "weights must sum to 1 within 1e-12, got {sum}"
            )));
        }
        let mut mean_m = Array2::zeros((k, dim));
        let mut cov_m = Array2::zeros((k, dim));
        for (i, (m, v)) in means.iter().zip(&cov_diags).enumerate() {
            if m.len() != dim || v.len() != dim {
                return Err(Error::InvalidMixture(format!(
                    "component {i} has inconsistent dimension"
                )));
            }
            for d in 0..dim {
                if !m[d].is_finite() {
                    return Err(Error::InvalidMixture(format!(
                        "non-finite mean entry in component {i}"
                    )));
                }
                if !(v[d].is_finite() && v[d] > 0.0) {
                    return Err(Error::InvalidMixture(format!(
                        "covariance entries must be strictly positive, got {} in component {i}",
                        v[d]
                    )));
                }
                mean_m[(i, d)] = m[d];
                cov_m[(i, d)] = v[d];
            }
        }
        Ok(Self {
            dim,
            weights: Array1::from(weights),
            means: mean_m,
            cov_diags: cov_m,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn component_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn cov_diags(&self) -> &Array2<f64> {
        &self.cov_diags
    }
}

/// A prompt analogue: reweights (or selects a subset of) mixture components.
///
/// A weighted condition specifies the conditional component weights directly;
/// the renormalized copy ũ defines p(i | y). The implied prompt likelihood is
/// p(y | i) = ũ_i·M / w_i with M the prior mass of the condition's support,
/// so for subset indicators built with [`Condition::hard_subset`] (which are
/// proportional to the prior weights on the subset) the implicit classifier
/// p(y | x) is a genuine Bayes posterior and never exceeds 1.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Unconditional,
    Weighted(Vec<f64>),
}

impl Condition {
    /// Entries ≥ 0, at least one > 0.
    pub fn weighted(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::InvalidCondition("empty weight vector".into()));
        }
        let mut any_pos = false;
        for &u in &raw {
            if !(u.is_finite() && u >= 0.0) {
                return Err(Error::InvalidCondition(format!(
                    "weights must be finite and ≥ 0, got {u}"
                )));
            }
            any_pos |= u > 0.0;
        }
        if !any_pos {
            return Err(Error::InvalidCondition("all weights are zero".into()));
        }
        Ok(Condition::Weighted(raw))
    }

    /// Hard subset of components, weighted by their prior mass.
    pub fn hard_subset(gmm: &GaussianMixture, components: &[usize]) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidCondition("empty component subset".into()));
        }
        let k = gmm.component_count();
        let mut raw = vec![0.0; k];
        for &i in components {
            if i >= k {
                return Err(Error::InvalidCondition(format!(
                    "component index {i} out of range (mixture has {k})"
                )));
            }
            raw[i] = gmm.weights()[i];
        }
        Condition::weighted(raw)
    }

    pub fn is_weighted(&self) -> bool {
        matches!(self, Condition::Weighted(_))
    }

    /// Renormalized conditional component weights ũ over all K components
    /// (zeros preserved). Unconditional → the base weights.
    pub fn conditional_weights(&self, gmm: &GaussianMixture) -> Result<Array1<f64>> {
        match self {
            Condition::Unconditional => Ok(gmm.weights().clone()),
            Condition::Weighted(raw) => {
                if raw.len() != gmm.component_count() {
                    return Err(Error::InvalidCondition(format!(
                        "condition has {} weights, mixture has {} components",
                        raw.len(),
                        gmm.component_count()
                    )));
                }
                let total: f64 = raw.iter().sum();
                if total <= 0.0 {
                    return Err(Error::InvalidCondition("all weights are zero".into()));
                }
                Ok(Array1::from_iter(raw.iter().map(|u| u / total)))
            }
        }
    }

    /// Prior mass of the condition's support: Σ w_i over components with
    /// positive condition weight (1 for unconditional).
    pub fn prior_support_mass(&self, gmm: &GaussianMixture) -> Result<f64> {
        match self {
            Condition::Unconditional => Ok(1.0),
            Condition::Weighted(raw) => {
                if raw.len() != gmm.component_count() {
                    return Err(Error::InvalidCondition(format!(
                        "condition has {} weights, mixture has {} components",
                        raw.len(),
                        gmm.component_count()
                    )));
                }
                Ok(raw
                    .iter()
                    .zip(gmm.weights())
                    .filter(|(u, _)| **u > 0.0)
                    .map(|(_, w)| w)
                    .sum())
            }
        }
    }

    /// Whether component `i` carries positive condition weight.
    pub fn supports(&self, i: usize) -> bool {
        match self {
            Condition::Unconditional => true,
            Condition::Weighted(raw) => raw.get(i).is_some_and(|u| *u > 0.0),
        }
    }
}
