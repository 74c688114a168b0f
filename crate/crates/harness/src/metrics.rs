//! Evaluation metrics for a particle cloud against the ground-truth mixture.
//! Everything is measured in data space (t = 0), so the numbers are exact
//! properties of the cloud, not noisy estimates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use sdlab_core::oracle::{Condition, Oracle};

use crate::error::{HarnessError, Result};

/// One logged row. Field order here is the column order everywhere the row
/// is serialized (JSONL, sweep summaries).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    /// Mean log-density of the particles under the conditional mixture.
    pub cond_loglik: f64,
    /// Mean log-posterior log p(y | x): how confidently the implicit
    /// classifier assigns the particles to the condition.
    pub classifier_conf: f64,
    /// trace(sample covariance) / trace(conditional mixture covariance);
    /// 1 means the cloud matches the target spread, small values mean
    /// mode-collapse-like concentration. Defined as 0 for a single particle.
    pub spread_ratio: f64,
    /// Mean per-step displacement of the particles over the last log window.
    pub churn: f64,
    /// Fraction of particles whose most responsible component lies inside
    /// the condition's support.
    pub mode_agreement: f64,
    /// Critic-style value: mean log p(y | x) − log p(φ | x) with the fake
    /// branch proxied by the full-weight (unconditional) posterior.
    pub wgan_value: f64,
}

impl MetricsRow {
    pub const FIELD_NAMES: [&'static str; 7] = [
        "step",
        "cond_loglik",
        "classifier_conf",
        "spread_ratio",
        "churn",
        "mode_agreement",
        "wgan_value",
    ];
}

/// Compute every metric for the given cloud. `churn` is supplied by the
/// caller because it needs the previous snapshot, which only the training
/// loop has.
pub fn compute_metrics(
    points: &Array2<f64>,
    oracle: &Oracle,
    cond: &Condition,
    step: u64,
    churn: f64,
) -> Result<MetricsRow> {
    let n = points.nrows();
    if n == 0 {
        return Err(HarnessError::Config(
            "metrics need at least one particle".into(),
        ));
    }
    if points.ncols() != oracle.dim() {
        return Err(HarnessError::Config(format!(
            "particle dim {} does not match mixture dim {}",
            points.ncols(),
            oracle.dim()
        )));
    }

    // Full-weight condition: posteriors are identically 1, the neutral
    // baseline for the critic value.
    let proxy = Condition::weighted(oracle.gmm().weights().to_vec())?;

    let mut cond_loglik = 0.0;
    let mut classifier_conf = 0.0;
    let mut wgan_value = 0.0;
    let mut agree = 0usize;
    for i in 0..n {
        let x = points.row(i);
        cond_loglik += oracle.log_density_data(cond, x)?;
        let post_y = if cond.is_weighted() {
            oracle.log_posterior_data(cond, x)?
        } else {
            0.0
        };
        classifier_conf += post_y;
        wgan_value += post_y - oracle.log_posterior_data(&proxy, x)?;
        if cond.supports(oracle.argmax_responsibility_data(x)?) {
            agree += 1;
        }
    }
    let nf = n as f64;
    cond_loglik /= nf;
    classifier_conf /= nf;
    wgan_value /= nf;

    let spread_ratio = if n == 1 {
        0.0
    } else {
        let d = points.ncols();
        let mut trace = 0.0;
        for j in 0..d {
            let col = points.column(j);
            let mean = col.sum() / nf;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            trace += ss / (nf - 1.0);
        }
        trace / oracle.conditional_cov_trace(cond)?
    };

    Ok(MetricsRow {
        step,
        cond_loglik,
        classifier_conf,
        spread_ratio,
        churn,
        mode_agreement: agree as f64 / nf,
        wgan_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use sdlab_core::oracle::{GaussianMixture, NoiseSchedule, ScheduleKind};

    fn oracle(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<f64>>) -> Oracle {
        let gmm = GaussianMixture::new(weights, means, covs).unwrap();
        let sched = NoiseSchedule::new(ScheduleKind::VpCosine, 0.02, 0.98).unwrap();
        Oracle::new(gmm, sched)
    }

    #[test]
    fn single_component_cloud_at_the_mode_pins_loglik_and_spread() {
        let orc = oracle(vec![1.0], vec![vec![1.0, -2.0]], vec![vec![1.0, 1.0]]);
        let pts = array![[1.0, -2.0], [1.0, -2.0], [1.0, -2.0]];
        let row = compute_metrics(&pts, &orc, &Condition::Unconditional, 0, 0.0).unwrap();
        // N(μ, I₂) evaluated at μ: −log(2π).
        let expect = -(2.0 * std::f64::consts::PI).ln();
        assert!(
            (row.cond_loglik - expect).abs() < 1e-14,
            "{}",
            row.cond_loglik
        );
        assert!((expect + 1.8378770664093453).abs() < 1e-15);
        assert_eq!(row.spread_ratio, 0.0); // identical particles: zero sample cov
        assert_eq!(row.classifier_conf, 0.0); // unconditional posterior is 1
        assert_eq!(row.mode_agreement, 1.0);
        assert_eq!(row.wgan_value, 0.0);
    }

    #[test]
    fn classifier_confidence_at_a_selected_mode_matches_the_closed_form() {
        let orc = oracle(
            vec![0.5, 0.5],
            vec![vec![3.0, 0.0], vec![-3.0, 0.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        );
        let y = Condition::hard_subset(orc.gmm(), &[0]).unwrap();
        let pts = array![[3.0, 0.0]];
        let row = compute_metrics(&pts, &orc, &y, 10, 0.25).unwrap();
        // Posterior of the near component: 1/(1+e^{−18}), so the log is
        // −log(1 + e^{−18}).
        let expect = -(-18.0_f64).exp().ln_1p();
        assert!(
            (row.classifier_conf - expect).abs() < 1e-15,
            "{}",
            row.classifier_conf
        );
        assert!(row.classifier_conf > -2e-8 && row.classifier_conf < 0.0);
        // Full-weight proxy posterior is identically 1, so the critic value
        // coincides with the confidence.
        assert_eq!(row.wgan_value, row.classifier_conf);
        assert_eq!(row.mode_agreement, 1.0);
        assert_eq!(row.spread_ratio, 0.0);
        assert_eq!(row.step, 10);
        assert_eq!(row.churn, 0.25);
    }

    #[test]
    fn spread_ratio_approaches_one_for_samples_from_the_conditional() {
        let orc = oracle(
            vec![0.5, 0.5],
            vec![vec![3.0, 0.0], vec![-3.0, 0.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        );
        let y = Condition::hard_subset(orc.gmm(), &[1]).unwrap();
        let samples = orc.sample_conditional(&y, 10_000, 7).unwrap();
        let row = compute_metrics(&samples, &orc, &y, 0, 0.0).unwrap();
        assert!(
            (row.spread_ratio - 1.0).abs() < 0.05,
            "spread_ratio = {}",
            row.spread_ratio
        );
        // A few of 10⁴ samples from N((−3,0), I) land past the midpoint and
        // resolve to the other component.
        assert!(row.mode_agreement > 0.99, "{}", row.mode_agreement);
    }

    #[test]
    fn mode_agreement_counts_particles_landing_outside_the_support() {
        let orc = oracle(
            vec![0.5, 0.5],
            vec![vec![3.0, 0.0], vec![-3.0, 0.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        );
        let y = Condition::hard_subset(orc.gmm(), &[0]).unwrap();
        let pts = array![[3.0, 0.0], [-3.0, 0.0], [2.5, 0.5], [-0.1, 0.0]];
        let row = compute_metrics(&pts, &orc, &y, 0, 0.0).unwrap();
        // (3,0) and (2.5,0.5) resolve to component 0; (−3,0) and (−0.1,0)
        // to component 1.
        assert_eq!(row.mode_agreement, 0.5);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let orc = oracle(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 1.0]]);
        let pts = array![[0.0], [1.0]];
        assert!(compute_metrics(&pts, &orc, &Condition::Unconditional, 0, 0.0).is_err());
    }
}
