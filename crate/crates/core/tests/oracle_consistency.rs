//! Independent checks of the analytic oracle: finite differences of the log
//! density, the score/classifier identities, schedule invariants, and a
//! Monte-Carlo estimate of the noised marginal.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sdlab_core::oracle::{Condition, GaussianMixture, NoiseSchedule, Oracle, ScheduleKind};

fn random_mixture(rng: &mut ChaCha8Rng, dim: usize, comps: usize) -> GaussianMixture {
    let raw: Vec<f64> = (0..comps).map(|_| 0.2 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let means: Vec<Vec<f64>> = (0..comps)
        .map(|_| (0..dim).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect())
        .collect();
    let covs: Vec<Vec<f64>> = (0..comps)
        .map(|_| (0..dim).map(|_| 0.3 + 1.7 * rng.random::<f64>()).collect())
        .collect();
    GaussianMixture::new(weights, means, covs).unwrap()
}

fn random_subset(rng: &mut ChaCha8Rng, comps: usize) -> Vec<usize> {
    loop {
        let picked: Vec<usize> = (0..comps).filter(|_| rng.random::<bool>()).collect();
        if !picked.is_empty() && picked.len() < comps {
            return picked;
        }
        if comps == 1 {
            return vec![0];
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[test]
fn score_matches_log_density_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-4;
    for case in 0..100 {
        let dim = 1 + case % 3;
        let comps = 1 + case % 4;
        let gmm = random_mixture(&mut rng, dim, comps);
        let sched = NoiseSchedule::new(
            if case % 2 == 0 {
                ScheduleKind::VpCosine
            } else {
                ScheduleKind::VpLinear
            },
            0.02,
            0.98,
        )
        .unwrap();
        let oracle = Oracle::new(gmm, sched);
        let t = 0.05 + 0.9 * rng.random::<f64>();
        let x = Array1::from_shape_fn(dim, |_| rng.random::<f64>() * 12.0 - 6.0);
        let cond = if case % 3 == 0 {
            Condition::Unconditional
        } else {
            Condition::hard_subset(oracle.gmm(), &random_subset(&mut rng, comps)).unwrap()
        };
        let score = oracle.score(&cond, t, x.view()).unwrap();
        for j in 0..dim {
            let mut up = x.clone();
            up[j] += h;
            let mut down = x.clone();
            down[j] -= h;
            let fd = (oracle.log_density(&cond, up.view(), t).unwrap()
                - oracle.log_density(&cond, down.view(), t).unwrap())
                / (2.0 * h);
            assert!(
                rel_err(score[j], fd) < 1e-4,
                "case {case} coord {j}: score {} vs fd {}",
                score[j],
                fd
            );
        }
    }
}

#[test]
fn classifier_residual_matches_posterior_gradient() {
    // ε_y − ε_unc = −σ · ∇_x log p(y | x_t): the guidance term really is the
    // scaled classifier gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-4;
    for case in 0..100 {
        let dim = 1 + case % 2;
        let comps = 2 + case % 3;
        let gmm = random_mixture(&mut rng, dim, comps);
        let sched = NoiseSchedule::new(ScheduleKind::VpCosine, 0.02, 0.98).unwrap();
        let oracle = Oracle::new(gmm, sched);
        let cond = Condition::hard_subset(oracle.gmm(), &random_subset(&mut rng, comps)).unwrap();
        let t = 0.05 + 0.9 * rng.random::<f64>();
        let (_, sigma) = oracle.schedule().eval(t).unwrap();
        let x = Array1::from_shape_fn(dim, |_| rng.random::<f64>() * 10.0 - 5.0);
        let eps_y = oracle.eps(&cond, t, x.view()).unwrap();
        let eps_u = oracle.eps(&Condition::Unconditional, t, x.view()).unwrap();
        for j in 0..dim {
            let mut up = x.clone();
            up[j] += h;
            let mut down = x.clone();
            down[j] -= h;
            let fd = (oracle.log_cond_prob(&cond, up.view(), t).unwrap()
                - oracle.log_cond_prob(&cond, down.view(), t).unwrap())
                / (2.0 * h);
            let lhs = eps_y[j] - eps_u[j];
            let rhs = -sigma * fd;
            assert!(
                rel_err(lhs, rhs) < 1e-4,
                "case {case} coord {j}: {lhs} vs {rhs}"
            );
        }
    }
}

#[test]
fn variance_preserving_identity_dense() {
    for kind in [ScheduleKind::VpCosine, ScheduleKind::VpLinear] {
        let sched = NoiseSchedule::new(kind, 1e-4, 0.9999).unwrap();
        for k in 0..10_000 {
            let t = 1e-4 + (0.9999 - 1e-4) * (k as f64 / 9999.0);
            let (alpha, sigma) = sched.eval(t).unwrap();
            assert!(
                (alpha * alpha + sigma * sigma - 1.0).abs() < 1e-12,
                "{kind:?} at t = {t}"
            );
            assert!(alpha > 0.0 && sigma > 0.0);
        }
    }
}

#[test]
fn denoising_expectation_identity() {
    // ε(x,t) = (x − α·E[x0|x_t=x]) / σ with the posterior mean assembled
    // from per-component Gaussian conditioning — an independent derivation
    // of the same quantity.
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for case in 0..50 {
        let dim = 1 + case % 3;
        let comps = 1 + case % 4;
        let gmm = random_mixture(&mut rng, dim, comps);
        let sched = NoiseSchedule::new(ScheduleKind::VpCosine, 0.02, 0.98).unwrap();
        let oracle = Oracle::new(gmm, sched);
        let t = 0.05 + 0.9 * rng.random::<f64>();
        let (alpha, sigma) = oracle.schedule().eval(t).unwrap();
        let x = Array1::from_shape_fn(dim, |_| rng.random::<f64>() * 8.0 - 4.0);
        let eps = oracle.eps(&Condition::Unconditional, t, x.view()).unwrap();

        // responsibilities of the noised mixture
        let mut logs = vec![0.0; comps];
        for (i, log) in logs.iter_mut().enumerate() {
            let mut l = (oracle.gmm().weights()[i]).ln();
            for j in 0..dim {
                let s = alpha * alpha * oracle.gmm().cov_diags()[(i, j)] + sigma * sigma;
                let d = x[j] - alpha * oracle.gmm().means()[(i, j)];
                l += -0.5 * ((2.0 * std::f64::consts::PI * s).ln() + d * d / s);
            }
            *log = l;
        }
        let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logs.iter().map(|l| (l - m).exp()).sum();
        for j in 0..dim {
            let mut x0_hat = 0.0;
            for (i, log) in logs.iter().enumerate() {
                let r = (log - m).exp() / z;
                let v = oracle.gmm().cov_diags()[(i, j)];
                let s = alpha * alpha * v + sigma * sigma;
                let mu = oracle.gmm().means()[(i, j)];
                x0_hat += r * (mu + (alpha * v / s) * (x[j] - alpha * mu));
            }
            let expect = (x[j] - alpha * x0_hat) / sigma;
            assert!(
                (eps[j] - expect).abs() < 1e-10,
                "case {case} coord {j}: {} vs {expect}",
                eps[j]
            );
        }
    }
}

#[test]
fn noised_marginal_matches_monte_carlo() {
    let gmm = GaussianMixture::new(
        vec![0.3, 0.7],
        vec![vec![2.0, -1.0], vec![-2.0, 1.5]],
        vec![vec![0.8, 1.2], vec![1.5, 0.5]],
    )
    .unwrap();
    let sched = NoiseSchedule::new(ScheduleKind::VpCosine, 0.02, 0.98).unwrap();
    let oracle = Oracle::new(gmm, sched);
    let t = 0.45;
    let (alpha, sigma) = oracle.schedule().eval(t).unwrap();
    let n = 100_000usize;
    let x0 = oracle
        .sample_conditional(&Condition::Unconditional, n, 42)
        .unwrap();
    let probes = [
        Array1::from(vec![0.0, 0.0]),
        Array1::from(vec![1.5, -0.5]),
        Array1::from(vec![-2.0, 1.0]),
    ];
    for x in &probes {
        // p_t(x) = E_{x0}[ N(x; α·x0, σ²I) ]
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            let mut log_k = 0.0;
            for j in 0..2 {
                let d = x[j] - alpha * x0[(i, j)];
                log_k += -0.5
                    * ((2.0 * std::f64::consts::PI * sigma * sigma).ln() + d * d / (sigma * sigma));
            }
            let k = log_k.exp();
            sum += k;
            sumsq += k * k;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let stderr = (var / n as f64).sqrt();
        let exact = oracle
            .log_density(&Condition::Unconditional, x.view(), t)
            .unwrap()
            .exp();
        assert!(
            (mean - exact).abs() <= 3.0 * stderr + 1e-12,
            "probe {x}: mc {mean} vs exact {exact} (stderr {stderr})"
        );
    }
}

#[test]
fn noisify_agrees_with_direct_arithmetic() {
    let gmm = GaussianMixture::new(
        vec![1.0],
        vec![vec![0.5, -0.25, 1.0]],
        vec![vec![1.0, 2.0, 0.5]],
    )
    .unwrap();
    let sched = NoiseSchedule::new(ScheduleKind::VpLinear, 0.02, 0.98).unwrap();
    let oracle = Oracle::new(gmm, sched);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let x0 = Array2::from_shape_fn((16, 3), |_| rng.random::<f64>() * 4.0 - 2.0);
    let t = Array1::from_shape_fn(16, |_| 0.02 + 0.96 * rng.random::<f64>());
    let eps = Array2::from_shape_fn((16, 3), |_| StandardNormal.sample(&mut rng));
    let batch = oracle.noisify(&x0, &t, &eps).unwrap();
    for i in 0..16 {
        let (alpha, sigma) = oracle.schedule().eval(t[i]).unwrap();
        for j in 0..3 {
            let expect = alpha * x0[(i, j)] + sigma * eps[(i, j)];
            assert_eq!(batch.xt[(i, j)], expect);
        }
    }
}
