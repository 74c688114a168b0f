//! Closed-form diffusion oracles over Gaussian mixtures.
//!
//! Under a variance-preserving schedule the noised marginal of a diagonal
//! mixture stays a diagonal mixture: component i becomes
//! N(α_t μ_i, α_t² Σ_i + σ_t² I). Everything else follows in closed form —
//! scores via responsibilities, ε-predictions as −σ_t·score, and the
//! implicit classifier p(y | x_t) by Bayes over reweighted components.

mod mixture;
mod schedule;

pub use mixture::{Condition, GaussianMixture, MAX_DIM};
pub use schedule::{NoiseSchedule, ScheduleKind};

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Posterior/density log floor: responsibilities are clamped at 1e-300
/// before logs so far-tail evaluations degrade to a finite floor instead of
/// propagating −inf/NaN.
pub const LOG_FLOOR: f64 = -690.7755278982137; // ln(1e-300)

/// A batch of noised points together with everything that produced them.
/// Invariant: `xt = α(t)·x0 + σ(t)·eps` rowwise, exactly as computed by
/// [`Oracle::noisify`].
#[derive(Clone, Debug)]
pub struct NoisyBatch {
    pub x0: Array2<f64>,
    pub eps: Array2<f64>,
    pub t: Array1<f64>,
    pub xt: Array2<f64>,
}

impl NoisyBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x0.ncols()
    }
}

/// The frozen "pretrained model": a mixture plus a noise schedule.
#[derive(Clone, Debug)]
pub struct Oracle {
    gmm: GaussianMixture,
    sched: NoiseSchedule,
}

impl Oracle {
    pub fn new(gmm: GaussianMixture, sched: NoiseSchedule) -> Self {
        Self { gmm, sched }
    }

    pub fn gmm(&self) -> &GaussianMixture {
        &self.gmm
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sched
    }

    pub fn dim(&self) -> usize {
        self.gmm.dim()
    }

    /// xt = α(t)·x0 + σ(t)·eps rowwise.
    pub fn noisify(
        &self,
        x0: &Array2<f64>,
        t: &Array1<f64>,
        eps: &Array2<f64>,
    ) -> Result<NoisyBatch> {
        let n = x0.nrows();
        let d = x0.ncols();
        if d != self.dim() {
            return Err(Error::DimMismatch {
                context: "noisify x0 columns",
                expected: self.dim(),
                got: d,
            });
        }
        if eps.nrows() != n || eps.ncols() != d {
            return Err(Error::DimMismatch {
                context: "noisify eps shape",
                expected: n * d,
                got: eps.len(),
            });
        }
        if t.len() != n {
            return Err(Error::DimMismatch {
                context: "noisify t length",
                expected: n,
                got: t.len(),
            });
        }
        let mut xt = Array2::zeros((n, d));
        for i in 0..n {
            let (alpha, sigma) = self.sched.eval(t[i])?;
            for j in 0..d {
                xt[(i, j)] = alpha * x0[(i, j)] + sigma * eps[(i, j)];
            }
        }
        Ok(NoisyBatch {
            x0: x0.clone(),
            eps: eps.clone(),
            t: t.clone(),
            xt,
        })
    }

    /// The noised conditional marginal at `t` as a mixture of its own:
    /// conditional weights, means α_t μ_i, covariances α_t² v_i + σ_t².
    /// Zero-weight components are dropped.
    pub fn marginal_at(&self, cond: &Condition, t: f64) -> Result<GaussianMixture> {
        let (alpha, sigma) = self.sched.eval(t)?;
        self.marginal_with(cond, alpha, sigma)
    }

    fn marginal_with(&self, cond: &Condition, alpha: f64, sigma: f64) -> Result<GaussianMixture> {
        let cw = cond.conditional_weights(&self.gmm)?;
        let d = self.dim();
        let a2 = alpha * alpha;
        let s2 = sigma * sigma;
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for i in 0..self.gmm.component_count() {
            if cw[i] <= 0.0 {
                continue;
            }
            weights.push(cw[i]);
            means.push((0..d).map(|j| alpha * self.gmm.means()[(i, j)]).collect());
            covs.push(
                (0..d)
                    .map(|j| a2 * self.gmm.cov_diags()[(i, j)] + s2)
                    .collect(),
            );
        }
        // Renormalize defensively so the constructed mixture meets the
        // 1e-12 weight-sum invariant even after float accumulation.
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        GaussianMixture::new(weights, means, covs)
    }

    /// Per-component log densities ln N(x; α μ_i, α² v_i + σ² I) for all K
    /// components, plus the per-coordinate variances (K × d).
    fn component_log_densities(
        &self,
        x: ArrayView1<f64>,
        alpha: f64,
        sigma: f64,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimMismatch {
                context: "oracle point",
                expected: d,
                got: x.len(),
            });
        }
        let k = self.gmm.component_count();
        let a2 = alpha * alpha;
        let s2 = sigma * sigma;
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        let mut logs = Array1::zeros(k);
        let mut vars = Array2::zeros((k, d));
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..d {
                let s = a2 * self.gmm.cov_diags()[(i, j)] + s2;
                let diff = x[j] - alpha * self.gmm.means()[(i, j)];
                acc += diff * diff / s + (s.ln() + ln_2pi);
                vars[(i, j)] = s;
            }
            logs[i] = -0.5 * acc;
        }
        Ok((logs, vars))
    }

    /// log p_t(x | cond): log-density of the noised conditional marginal.
    pub fn log_density(&self, cond: &Condition, x: ArrayView1<f64>, t: f64) -> Result<f64> {
        let (alpha, sigma) = self.sched.eval(t)?;
        self.log_density_with(cond, x, alpha, sigma)
    }

    fn log_density_with(
        &self,
        cond: &Condition,
        x: ArrayView1<f64>,
        alpha: f64,
        sigma: f64,
    ) -> Result<f64> {
        let cw = cond.conditional_weights(&self.gmm)?;
        let (logs, _) = self.component_log_densities(x, alpha, sigma)?;
        let terms: Vec<f64> = cw
            .iter()
            .zip(&logs)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, l)| w.ln() + l)
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// ∇_x log p_t(x | cond) = Σ_i r_i(x)·Σ_{t,i}⁻¹(α_t μ_i − x) with
    /// responsibilities r_i of the noised conditional marginal.
    pub fn score(&self, cond: &Condition, t: f64, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let (alpha, sigma) = self.sched.eval(t)?;
        self.score_with(cond, x, alpha, sigma)
    }

    fn score_with(
        &self,
        cond: &Condition,
        x: ArrayView1<f64>,
        alpha: f64,
        sigma: f64,
    ) -> Result<Array1<f64>> {
        let cw = cond.conditional_weights(&self.gmm)?;
        let (logs, vars) = self.component_log_densities(x, alpha, sigma)?;
        let d = self.dim();
        let k = self.gmm.component_count();
        // Responsibilities via a stable softmax over the supported components.
        let mut max_log = f64::NEG_INFINITY;
        for i in 0..k {
            if cw[i] > 0.0 {
                max_log = max_log.max(cw[i].ln() + logs[i]);
            }
        }
        let mut total = 0.0;
        let mut resp = vec![0.0; k];
        for i in 0..k {
            if cw[i] > 0.0 {
                let r = (cw[i].ln() + logs[i] - max_log).exp();
                resp[i] = r;
                total += r;
            }
        }
        let mut score = Array1::zeros(d);
        for i in 0..k {
            if resp[i] == 0.0 {
                continue;
            }
            let r = resp[i] / total;
            for j in 0..d {
                score[j] += r * (alpha * self.gmm.means()[(i, j)] - x[j]) / vars[(i, j)];
            }
        }
        Ok(score)
    }

    /// ε-prediction of the analytic denoiser: −σ(t)·score.
    pub fn eps(&self, cond: &Condition, t: f64, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        let (_, sigma) = self.sched.eval(t)?;
        let mut s = self.score(cond, t, x)?;
        s.mapv_inplace(|v| -sigma * v);
        Ok(s)
    }

    /// Rowwise ε-prediction over a noisy batch (each row at its own t).
    pub fn eps_rows(&self, cond: &Condition, batch: &NoisyBatch) -> Result<Array2<f64>> {
        let n = batch.len();
        let mut out = Array2::zeros((n, batch.dim()));
        for i in 0..n {
            let row = self.eps(cond, batch.t[i], batch.xt.row(i))?;
            out.row_mut(i).assign(&row);
        }
        Ok(out)
    }

    /// Implicit classifier log p(y | x_t), computed by Bayes:
    /// log[Σ_i ũ_i·M·N_i(x)] − log[Σ_i w_i·N_i(x)] with ũ the renormalized
    /// condition weights and M the prior mass of the condition's support.
    /// Sub-stochastic conditions (hard subsets) are capped at 0; the result
    /// is clamped at ln(1e-300), and non-finite evaluations return the −inf
    /// sentinel instead of NaN.
    pub fn log_cond_prob(&self, cond: &Condition, x: ArrayView1<f64>, t: f64) -> Result<f64> {
        let (alpha, sigma) = self.sched.eval(t)?;
        self.log_cond_prob_with(cond, x, alpha, sigma)
    }

    fn log_cond_prob_with(
        &self,
        cond: &Condition,
        x: ArrayView1<f64>,
        alpha: f64,
        sigma: f64,
    ) -> Result<f64> {
        if !cond.is_weighted() {
            return Err(Error::Contract(
                "log_cond_prob requires a weighted condition".into(),
            ));
        }
        let cw = cond.conditional_weights(&self.gmm)?;
        let mass = cond.prior_support_mass(&self.gmm)?;
        let (logs, _) = self.component_log_densities(x, alpha, sigma)?;
        let log_mass = mass.ln();
        let mut num_terms = Vec::new();
        let mut den_terms = Vec::new();
        // The implied likelihood p(y|i) = ũ_i·M / w_i; track its maximum to
        // recognize sub-stochastic (subset-like) conditions.
        let mut max_likelihood: f64 = 0.0;
        for i in 0..self.gmm.component_count() {
            let w = self.gmm.weights()[i];
            den_terms.push(w.ln() + logs[i]);
            if cw[i] > 0.0 {
                num_terms.push(cw[i].ln() + log_mass + logs[i]);
                max_likelihood = max_likelihood.max(cw[i] * mass / w);
            }
        }
        let num = log_sum_exp(&num_terms);
        let den = log_sum_exp(&den_terms);
        let raw = num - den;
        if !raw.is_finite() {
            // Zero posterior mass at (numerically) infinite distance.
            return Ok(f64::NEG_INFINITY);
        }
        let mut out = raw.max(LOG_FLOOR);
        if max_likelihood <= 1.0 + 1e-12 {
            // p(y|i) ≤ 1 for every component ⇒ p(y|x) ≤ 1; cap float noise.
            out = out.min(0.0);
        }
        Ok(out)
    }

    /// i.i.d. draws from the conditional mixture; deterministic given seed.
    pub fn sample_conditional(&self, cond: &Condition, n: usize, seed: u64) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::Contract("sample_conditional requires n ≥ 1".into()));
        }
        let cw = cond.conditional_weights(&self.gmm)?;
        let d = self.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array2::zeros((n, d));
        for r in 0..n {
            let comp = sample_categorical(&cw, rng.random::<f64>());
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                out[(r, j)] =
                    self.gmm.means()[(comp, j)] + self.gmm.cov_diags()[(comp, j)].sqrt() * z;
            }
        }
        Ok(out)
    }

    // ----- data-space (t = 0) helpers used for metrics and plotting -----

    /// log p(x | cond) of the unnoised conditional mixture, floored at
    /// ln(1e-300) so downstream metrics stay finite.
    pub fn log_density_data(&self, cond: &Condition, x: ArrayView1<f64>) -> Result<f64> {
        let v = self.log_density_with(cond, x, 1.0, 0.0)?;
        if !v.is_finite() {
            return Ok(LOG_FLOOR);
        }
        Ok(v.max(LOG_FLOOR))
    }

    /// Implicit classifier at t = 0 (same clamps as [`Self::log_cond_prob`]).
    pub fn log_posterior_data(&self, cond: &Condition, x: ArrayView1<f64>) -> Result<f64> {
        let v = self.log_cond_prob_with(cond, x, 1.0, 0.0)?;
        if !v.is_finite() {
            return Ok(LOG_FLOOR);
        }
        Ok(v.max(LOG_FLOOR))
    }

    /// Index of the component with the largest base-weight responsibility
    /// for x in data space.
    pub fn argmax_responsibility_data(&self, x: ArrayView1<f64>) -> Result<usize> {
        let (logs, _) = self.component_log_densities(x, 1.0, 0.0)?;
        let mut best = 0;
        let mut best_val = f64::NEG_INFINITY;
        for i in 0..self.gmm.component_count() {
            let v = self.gmm.weights()[i].ln() + logs[i];
            if v > best_val {
                best_val = v;
                best = i;
            }
        }
        Ok(best)
    }

    /// Trace of the conditional mixture's covariance in data space:
    /// Σ_i ũ_i (tr v_i + ‖μ_i‖²) − ‖μ̄‖².
    pub fn conditional_cov_trace(&self, cond: &Condition) -> Result<f64> {
        let cw = cond.conditional_weights(&self.gmm)?;
        let d = self.dim();
        let mut mean = vec![0.0; d];
        let mut second = 0.0;
        for i in 0..self.gmm.component_count() {
            if cw[i] <= 0.0 {
                continue;
            }
            let mut norm2 = 0.0;
            for (j, mean_j) in mean.iter_mut().enumerate() {
                let m = self.gmm.means()[(i, j)];
                *mean_j += cw[i] * m;
                norm2 += m * m;
                second += cw[i] * self.gmm.cov_diags()[(i, j)];
            }
            second += cw[i] * norm2;
        }
        let mean_norm2: f64 = mean.iter().map(|m| m * m).sum();
        Ok(second - mean_norm2)
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &t in terms {
        if t > max {
            max = t;
        }
    }
    if !max.is_finite() {
        return max; // all −inf (or a NaN/inf input): propagate
    }
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

fn sample_categorical(weights: &Array1<f64>, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}
