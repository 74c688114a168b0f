//! Algebraic reductions between the distillation methods, checked on random
//! batches: every special case the update family collapses to must agree
//! with the directly computed variant.

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sdlab_core::distill::{
    asd_gen_direction, cfg_combine, csd_direction, dds_direction, disc_loss_textonly,
    edit_direction, gamma_floor, sds_direction, upper_bound_gap, DistillConfig, Method,
};
use sdlab_core::fake_branch::ResidualEpsModel;
use sdlab_core::oracle::{
    Condition, GaussianMixture, NoiseSchedule, NoisyBatch, Oracle, ScheduleKind,
};

fn random_oracle(rng: &mut ChaCha8Rng, dim: usize, comps: usize) -> Oracle {
    let raw: Vec<f64> = (0..comps).map(|_| 0.2 + rng.random::<f64>()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let means: Vec<Vec<f64>> = (0..comps)
        .map(|_| (0..dim).map(|_| rng.random::<f64>() * 8.0 - 4.0).collect())
        .collect();
    let covs: Vec<Vec<f64>> = (0..comps)
        .map(|_| (0..dim).map(|_| 0.3 + 1.7 * rng.random::<f64>()).collect())
        .collect();
    let gmm = GaussianMixture::new(weights, means, covs).unwrap();
    Oracle::new(
        gmm,
        NoiseSchedule::new(ScheduleKind::VpCosine, 0.02, 0.98).unwrap(),
    )
}

fn random_batch(oracle: &Oracle, n: usize, rng: &mut ChaCha8Rng) -> NoisyBatch {
    let d = oracle.dim();
    let x0 = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 8.0 - 4.0);
    let t = Array1::from_shape_fn(n, |_| 0.02 + 0.96 * rng.random::<f64>());
    let eps = Array2::from_shape_fn((n, d), |_| StandardNormal.sample(rng));
    oracle.noisify(&x0, &t, &eps).unwrap()
}

fn perturb(phi: &mut ResidualEpsModel, rng: &mut ChaCha8Rng, scale: f64) {
    for p in phi.params_mut() {
        *p += (rng.random::<f64>() * 2.0 - 1.0) * scale;
    }
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn reduction_lattice_over_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(7001);
    for case in 0..100u64 {
        let dim = [1usize, 2, 4][case as usize % 3];
        let comps = 2 + case as usize % 3;
        let oracle = random_oracle(&mut rng, dim, comps);
        let batch = random_batch(&oracle, 8, &mut rng);
        let sel_y = case as usize % comps;
        let sel_z = (case as usize + 1) % comps;
        let y = Condition::hard_subset(oracle.gmm(), &[sel_y]).unwrap();
        let z = Condition::hard_subset(oracle.gmm(), &[sel_z]).unwrap();
        let mut cfg = DistillConfig::preset_2d(Method::Asd);
        cfg.lambda = 1.0 + 10.0 * rng.random::<f64>();

        // --- λ = 1: guided prediction collapses to the conditional one, so
        // the noise-residual direction equals the plain diffusion-loss route
        // exactly
        let mut unit = cfg;
        unit.lambda = 1.0;
        let sds1 = sds_direction(&batch, &y, &unit, &oracle).unwrap();
        let cond_rows = oracle.eps_rows(&y, &batch).unwrap();
        for i in 0..batch.len() {
            for j in 0..dim {
                let diffusion_route = cond_rows[(i, j)] - batch.eps[(i, j)];
                assert!(
                    sds1.dirs[(i, j)] == diffusion_route,
                    "case {case}: diffusion-loss route must be bit-exact at λ = 1"
                );
            }
        }

        // --- zero-init φ: fake prediction is the unconditional one, so the
        // guided-vs-fake direction collapses to the classifier-only one
        let phi0 = ResidualEpsModel::zero_init(oracle.clone(), 900 + case);
        let asd = asd_gen_direction(&batch, &y, &cfg, &phi0).unwrap();
        let csd = csd_direction(&batch, &y, &cfg, &oracle).unwrap();
        assert!(max_abs_diff(&asd.dirs, &csd.dirs) < 1e-12, "case {case}");
        assert!(asd.recompose_error() < 1e-12);
        assert!(csd.recompose_error() < 1e-12);

        // --- zero-init is seed-independent
        let phi0b = ResidualEpsModel::zero_init(oracle.clone(), 5000 + case);
        let pa = phi0.predict_rows(&batch.xt, &batch.t).unwrap();
        let pb = phi0b.predict_rows(&batch.xt, &batch.t).unwrap();
        assert_eq!(pa, pb, "case {case}: zero-init must not depend on seed");

        // --- γ = 0 text-only loss is the plain noise regression
        let mut phi = phi0.clone();
        perturb(&mut phi, &mut rng, 0.05);
        let obj = disc_loss_textonly(&batch, &y, 0.0, &phi).unwrap();
        let pred = phi.predict_rows(&batch.xt, &batch.t).unwrap();
        let plain = pred
            .iter()
            .zip(batch.eps.iter())
            .map(|(p, e)| (p - e) * (p - e))
            .sum::<f64>()
            / batch.len() as f64;
        let v = obj.value(&phi).unwrap();
        assert!(
            (v - plain).abs() <= 1e-12 * plain.abs().max(1.0),
            "case {case}: {v} vs {plain}"
        );

        // --- editing: reduced two-φ form equals the four-term expansion
        let mut phi_y = ResidualEpsModel::zero_init(oracle.clone(), 7000 + case);
        let mut phi_z = ResidualEpsModel::zero_init(oracle.clone(), 8000 + case);
        perturb(&mut phi_y, &mut rng, 0.05);
        perturb(&mut phi_z, &mut rng, 0.05);
        let edit = edit_direction(&batch, &y, &z, &cfg, &phi_y, &phi_z).unwrap();
        let unc = oracle.eps_rows(&Condition::Unconditional, &batch).unwrap();
        let ey = oracle.eps_rows(&y, &batch).unwrap();
        let ez = oracle.eps_rows(&z, &batch).unwrap();
        let fy = phi_y.predict_rows(&batch.xt, &batch.t).unwrap();
        let fz = phi_z.predict_rows(&batch.xt, &batch.t).unwrap();
        let mut four = Array2::zeros((batch.len(), dim));
        for i in 0..batch.len() {
            for j in 0..dim {
                four[(i, j)] = cfg.lambda * (ey[(i, j)] - unc[(i, j)])
                    - (fy[(i, j)] - unc[(i, j)])
                    - cfg.lambda * (ez[(i, j)] - unc[(i, j)])
                    + (fz[(i, j)] - unc[(i, j)]);
            }
        }
        assert!(max_abs_diff(&edit.dirs, &four) < 1e-12, "case {case}");
        assert!(edit.recompose_error() < 1e-12);

        // --- paired-batch contrast equals the difference of the two
        // noise-residual directions when (t, ε) are shared
        let x0s = Array2::from_shape_fn((8, dim), |_| rng.random::<f64>() * 8.0 - 4.0);
        let batch_s = oracle
            .noisify(&x0s, &batch.t.clone(), &batch.eps.clone())
            .unwrap();
        let dds = dds_direction(&batch, &batch_s, &y, &z, &cfg, &oracle).unwrap();
        let sds_g = sds_direction(&batch, &y, &cfg, &oracle).unwrap();
        let sds_s = sds_direction(&batch_s, &z, &cfg, &oracle).unwrap();
        let diff = &sds_g.dirs - &sds_s.dirs;
        assert!(max_abs_diff(&dds.dirs, &diff) < 1e-12, "case {case}");
        assert!(dds.recompose_error() < 1e-12);
        assert!(sds_g.recompose_error() < 1e-12);

        // --- matched pair cancels exactly
        let zero = dds_direction(&batch, &batch, &y, &y, &cfg, &oracle).unwrap();
        assert!(zero.dirs.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn classifier_share_grows_with_guidance_scale() {
    // on fixed batches, the fraction of the update carried by the
    // classifier term must not shrink as λ grows
    for (dim, comps, mix_seed, batch_seed) in
        [(2usize, 2usize, 0u64, 0u64), (2, 3, 4, 1), (4, 2, 5, 0)]
    {
        let mut mix_rng = ChaCha8Rng::seed_from_u64(mix_seed);
        let oracle = random_oracle(&mut mix_rng, dim, comps);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let batch = random_batch(&oracle, 256, &mut rng);
        let y = Condition::hard_subset(oracle.gmm(), &[0]).unwrap();
        let mut prev = -1.0;
        for lambda in [1.0, 7.5, 30.0, 100.0] {
            let mut cfg = DistillConfig::preset_2d(Method::Sds);
            cfg.lambda = lambda;
            let got = sds_direction(&batch, &y, &cfg, &oracle).unwrap();
            let comp = got.components.as_ref().unwrap();
            let cls_norm = comp.classifier.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dir_norm = got.dirs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let share = cls_norm / dir_norm;
            assert!(
                share >= prev - 1e-12,
                "share dropped from {prev} to {share} at λ = {lambda}"
            );
            prev = share;
        }
    }
}

#[test]
fn gamma_floor_bounded_by_eta_when_real_branch_fits_better() {
    let mut rng = ChaCha8Rng::seed_from_u64(7013);
    let eta = 0.5;
    let mut checked = 0;
    for case in 0..40 {
        let oracle = random_oracle(&mut rng, 2, 2);
        let y = Condition::hard_subset(oracle.gmm(), &[0]).unwrap();
        let mut phi = ResidualEpsModel::zero_init(oracle.clone(), 600 + case);
        perturb(&mut phi, &mut rng, 0.05);

        // real batch drawn from the condition itself; fake batch drawn far
        // away, so the real-branch mismatch should typically be smaller
        let x_real = oracle.sample_conditional(&y, 8, 100 + case).unwrap();
        let t = Array1::from_shape_fn(8, |_| 0.05 + 0.9 * rng.random::<f64>());
        let eps_r = Array2::from_shape_fn((8, 2), |_| StandardNormal.sample(&mut rng));
        let batch_r = oracle.noisify(&x_real, &t, &eps_r).unwrap();
        let x_fake = Array2::from_shape_fn((8, 2), |_| rng.random::<f64>() * 20.0 - 10.0);
        let eps_g = Array2::from_shape_fn((8, 2), |_| StandardNormal.sample(&mut rng));
        let batch_g = oracle.noisify(&x_fake, &t, &eps_g).unwrap();

        let mean_sq = |batch: &NoisyBatch| {
            let ey = oracle.eps_rows(&y, batch).unwrap();
            let ep = phi.predict_rows(&batch.xt, &batch.t).unwrap();
            ey.iter()
                .zip(ep.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / batch.len() as f64
        };
        if mean_sq(&batch_r) <= mean_sq(&batch_g) {
            let floor = gamma_floor(&batch_g, &batch_r, &y, &phi, eta).unwrap();
            assert!(floor >= -eta - 1e-12, "case {case}: floor {floor}");
            assert!(floor <= 0.0);
            checked += 1;
        }
    }
    assert!(checked >= 20, "premise held only {checked} times");
}

#[test]
fn cfg_combine_is_affine_in_lambda() {
    let mut rng = ChaCha8Rng::seed_from_u64(7019);
    for _ in 0..100 {
        let d = 1 + (rng.random::<u32>() % 6) as usize;
        let u = Array1::from_shape_fn(d, |_| rng.random::<f64>() * 4.0 - 2.0);
        let c = Array1::from_shape_fn(d, |_| rng.random::<f64>() * 4.0 - 2.0);
        let l1 = 1.0 + 5.0 * rng.random::<f64>();
        let l2 = l1 + 1.0 + 5.0 * rng.random::<f64>();
        let mid = 0.5 * (l1 + l2);
        let a = cfg_combine(u.view(), c.view(), l1).unwrap();
        let b = cfg_combine(u.view(), c.view(), l2).unwrap();
        let m = cfg_combine(u.view(), c.view(), mid).unwrap();
        for j in 0..d {
            assert!((0.5 * (a[j] + b[j]) - m[j]).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn bound_gap_never_negative(
        len in 1usize..9,
        seed in any::<u64>(),
        scale in 0.01f64..100.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = Array1::from_shape_fn(len, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        });
        let v = Array1::from_shape_fn(len, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        });
        let gap = upper_bound_gap(u.view(), v.view()).unwrap();
        prop_assert!(gap >= -1e-12);
        // and it equals ½‖u+v‖²
        let half: f64 = u.iter().zip(v.iter()).map(|(a, b)| (a + b) * (a + b)).sum::<f64>() * 0.5;
        prop_assert!((gap - half).abs() <= 1e-9 * half.abs().max(1.0));
    }
}
