//! Update directions and discriminator losses for score distillation.
//!
//! Every method here produces per-sample directions in x0-space that a
//! generator pulls back through its own Jacobian; the harness never
//! differentiates through the oracle. Methods that train a fake branch
//! (ε_φ) express their discriminator objective as an [`EpsObjective`] so the
//! gradient is exact reverse-mode.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fake_branch::{EpsObjective, ObjectiveGroup, ResidualEpsModel};
use crate::oracle::{Condition, NoisyBatch, Oracle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sds,
    Csd,
    Vsd,
    Asd,
    Dds,
    AsdEdit,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Sds => "sds",
            Method::Csd => "csd",
            Method::Vsd => "vsd",
            Method::Asd => "asd",
            Method::Dds => "dds",
            Method::AsdEdit => "asd_edit",
        }
    }

    /// Whether the method trains a fake branch at all.
    pub fn uses_fake_branch(&self) -> bool {
        matches!(self, Method::Vsd | Method::Asd | Method::AsdEdit)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightingMode {
    #[default]
    Unit,
    SigmaSq,
    Snr,
}

fn default_lambda() -> f64 {
    7.5
}
fn default_eta() -> f64 {
    0.5
}
fn default_gamma() -> f64 {
    -1.0
}
fn default_t_min() -> f64 {
    0.02
}
fn default_t_max() -> f64 {
    0.98
}
fn default_disc_steps() -> u32 {
    1
}

/// Method selection plus every scalar knob shared by the direction kernels.
/// Field names appear verbatim as config-file keys.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub weighting: WeightingMode,
    #[serde(default = "default_t_min")]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default)]
    pub share_noise: bool,
    #[serde(default = "default_disc_steps")]
    pub disc_steps_per_gen_step: u32,
    pub method: Method,
}

impl DistillConfig {
    /// Defaults used by the planar experiments: guidance 7.5, η = 1/2,
    /// γ = −1 (0 for the plain variational method, which fixes γ there).
    pub fn preset_2d(method: Method) -> Self {
        Self {
            lambda: default_lambda(),
            eta: default_eta(),
            gamma: if method == Method::Vsd { 0.0 } else { -1.0 },
            weighting: WeightingMode::Unit,
            t_min: default_t_min(),
            t_max: default_t_max(),
            share_noise: false,
            disc_steps_per_gen_step: default_disc_steps(),
            method,
        }
    }

    /// Variant with the softer γ = −0.5 used for higher-dimensional
    /// (rendered) generators.
    pub fn preset_3d(method: Method) -> Self {
        let mut cfg = Self::preset_2d(method);
        if method != Method::Vsd {
            cfg.gamma = -0.5;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [
            ("lambda", self.lambda),
            ("eta", self.eta),
            ("gamma", self.gamma),
            ("t_min", self.t_min),
            ("t_max", self.t_max),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite, got {v}"));
            }
        }
        if self.lambda < 1.0 {
            return bad(format!("lambda must be >= 1, got {}", self.lambda));
        }
        if !(self.t_min > 0.0 && self.t_min < self.t_max && self.t_max < 1.0) {
            return bad(format!(
                "need 0 < t_min < t_max < 1, got ({}, {})",
                self.t_min, self.t_max
            ));
        }
        if self.method == Method::Vsd && self.gamma != 0.0 {
            return bad(format!(
                "vsd requires gamma = 0 (it is the gamma = 0 special case), got {}",
                self.gamma
            ));
        }
        if self.disc_steps_per_gen_step == 0 && self.method.uses_fake_branch() {
            return bad(format!(
                "method {} trains a fake branch and needs disc_steps_per_gen_step >= 1",
                self.method
            ));
        }
        Ok(())
    }

    /// ω(t) evaluated from the schedule pair.
    pub fn omega(&self, alpha: f64, sigma: f64) -> f64 {
        match self.weighting {
            WeightingMode::Unit => 1.0,
            WeightingMode::SigmaSq => sigma * sigma,
            WeightingMode::Snr => (sigma * sigma) / (alpha * alpha),
        }
    }
}

/// Per-term breakdown of a direction batch, for diagnostics and the
/// gradient-share analyses.
#[derive(Debug, Clone)]
pub struct DirectionComponents {
    pub uncond: Array2<f64>,
    pub classifier: Array2<f64>,
    pub fake: Array2<f64>,
    pub noise: Array2<f64>,
}

/// Per-sample update directions in x0-space with the applied ω(t) values.
#[derive(Debug, Clone)]
pub struct DirectionBatch {
    pub dirs: Array2<f64>,
    pub omega: Array1<f64>,
    pub components: Option<DirectionComponents>,
}

impl DirectionBatch {
    /// Max abs deviation of `dirs` from ω ⊙ (uncond + classifier − fake −
    /// noise); the breakdown must recompose the direction to ~1e-12.
    pub fn recompose_error(&self) -> f64 {
        let Some(c) = &self.components else {
            return 0.0;
        };
        let mut worst = 0.0_f64;
        for i in 0..self.dirs.nrows() {
            for j in 0..self.dirs.ncols() {
                let r = self.omega[i]
                    * (c.uncond[(i, j)] + c.classifier[(i, j)] - c.fake[(i, j)] - c.noise[(i, j)]);
                worst = worst.max((self.dirs[(i, j)] - r).abs());
            }
        }
        worst
    }
}

/// Classifier-free guidance: ε_unc + λ·(ε_cond − ε_unc). λ = 0 and λ = 1
/// short-circuit so those cases are bit-exact.
pub fn cfg_combine(
    eps_unc: ArrayView1<f64>,
    eps_cond: ArrayView1<f64>,
    lambda: f64,
) -> Result<Array1<f64>> {
    if eps_unc.len() != eps_cond.len() {
        return Err(Error::DimMismatch {
            context: "cfg_combine",
            expected: eps_unc.len(),
            got: eps_cond.len(),
        });
    }
    if lambda == 0.0 {
        return Ok(eps_unc.to_owned());
    }
    if lambda == 1.0 {
        return Ok(eps_cond.to_owned());
    }
    Ok(Array1::from_iter(
        eps_unc
            .iter()
            .zip(eps_cond.iter())
            .map(|(u, c)| u + lambda * (c - u)),
    ))
}

fn cfg_combine_rows(eps_unc: &Array2<f64>, eps_cond: &Array2<f64>, lambda: f64) -> Array2<f64> {
    if lambda == 0.0 {
        return eps_unc.clone();
    }
    if lambda == 1.0 {
        return eps_cond.clone();
    }
    let mut out = eps_unc.clone();
    out.zip_mut_with(eps_cond, |u, c| *u = *u + lambda * (*c - *u));
    out
}

fn omega_rows(cfg: &DistillConfig, oracle: &Oracle, t: &Array1<f64>) -> Result<Array1<f64>> {
    let mut omega = Array1::zeros(t.len());
    for (w, &ti) in omega.iter_mut().zip(t.iter()) {
        let (alpha, sigma) = oracle.schedule().eval(ti)?;
        *w = cfg.omega(alpha, sigma);
    }
    Ok(omega)
}

fn scale_rows(omega: &Array1<f64>, mut m: Array2<f64>) -> Array2<f64> {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v * omega[i]);
    }
    m
}

/// ω(t)·(ε_unc + λ(ε_y − ε_unc) − ε): guided score against the stored noise.
pub fn sds_direction(
    batch: &NoisyBatch,
    cond_y: &Condition,
    cfg: &DistillConfig,
    oracle: &Oracle,
) -> Result<DirectionBatch> {
    cfg.validate()?;
    let unc = oracle.eps_rows(&Condition::Unconditional, batch)?;
    let cnd = oracle.eps_rows(cond_y, batch)?;
    let guided = cfg_combine_rows(&unc, &cnd, cfg.lambda);
    let omega = omega_rows(cfg, oracle, &batch.t)?;
    let classifier = &guided - &unc;
    let dirs = scale_rows(&omega, &guided - &batch.eps);
    Ok(DirectionBatch {
        dirs,
        omega,
        components: Some(DirectionComponents {
            uncond: unc,
            classifier,
            fake: Array2::zeros(batch.eps.raw_dim()),
            noise: batch.eps.clone(),
        }),
    })
}

/// ω(t)·λ·(ε_y − ε_unc): the classifier term alone.
pub fn csd_direction(
    batch: &NoisyBatch,
    cond_y: &Condition,
    cfg: &DistillConfig,
    oracle: &Oracle,
) -> Result<DirectionBatch> {
    cfg.validate()?;
    let unc = oracle.eps_rows(&Condition::Unconditional, batch)?;
    let cnd = oracle.eps_rows(cond_y, batch)?;
    let mut classifier = &cnd - &unc;
    classifier.mapv_inplace(|v| v * cfg.lambda);
    let omega = omega_rows(cfg, oracle, &batch.t)?;
    let dirs = scale_rows(&omega, classifier.clone());
    let zeros = Array2::zeros(batch.eps.raw_dim());
    Ok(DirectionBatch {
        dirs,
        omega,
        components: Some(DirectionComponents {
            uncond: zeros.clone(),
            classifier,
            fake: zeros.clone(),
            noise: zeros,
        }),
    })
}

/// ω(t)·(ε_unc + λ(ε_y − ε_unc) − ε_φ): guided score against the trained
/// fake branch instead of the stored noise. With ε_φ frozen at its zero-init
/// this reduces to the classifier-only direction; substituting the stored ε
/// for ε_φ reproduces the plain noise-residual direction.
pub fn asd_gen_direction(
    batch: &NoisyBatch,
    cond_y: &Condition,
    cfg: &DistillConfig,
    phi: &ResidualEpsModel,
) -> Result<DirectionBatch> {
    cfg.validate()?;
    let oracle = phi.oracle();
    let unc = oracle.eps_rows(&Condition::Unconditional, batch)?;
    let cnd = oracle.eps_rows(cond_y, batch)?;
    let guided = cfg_combine_rows(&unc, &cnd, cfg.lambda);
    let fake = phi.predict_rows(&batch.xt, &batch.t)?;
    let omega = omega_rows(cfg, oracle, &batch.t)?;
    let classifier = &guided - &unc;
    let dirs = scale_rows(&omega, &guided - &fake);
    Ok(DirectionBatch {
        dirs,
        omega,
        components: Some(DirectionComponents {
            uncond: unc,
            classifier,
            fake,
            noise: Array2::zeros(batch.eps.raw_dim()),
        }),
    })
}

/// log p(y|x_t) − log p(φ|x_t): analytic discriminator value between two
/// weighted conditions, used for monitoring (φ as a fixed condition).
pub fn disc_value(
    oracle: &Oracle,
    cond_y: &Condition,
    cond_phi: &Condition,
    x: ArrayView1<f64>,
    t: f64,
) -> Result<f64> {
    let a = oracle.log_cond_prob(cond_y, x, t)?;
    let b = oracle.log_cond_prob(cond_phi, x, t)?;
    Ok(a - b)
}

/// mean ‖ε_φ(x_g)−ε‖² + γ‖ε_y(x_g)−ε_φ(x_g)‖²: fake-branch loss without a
/// real batch. Oracle targets are constants; the gradient flows through
/// ε_φ only.
pub fn disc_loss_textonly<'a>(
    batch_g: &'a NoisyBatch,
    cond_y: &Condition,
    gamma: f64,
    phi: &ResidualEpsModel,
) -> Result<EpsObjective<'a>> {
    let eps_y_g = phi.oracle().eps_rows(cond_y, batch_g)?;
    Ok(EpsObjective {
        groups: vec![ObjectiveGroup {
            batch: batch_g,
            terms: vec![(1.0, batch_g.eps.clone()), (gamma, eps_y_g)],
        }],
    })
}

/// Adds the real-batch terms −‖ε_φ(x_r)−ε‖² + η‖ε_y(x_r)−ε_φ(x_r)‖² to the
/// text-only loss. The two batches must share their timestep draws.
pub fn disc_loss_full<'a>(
    batch_g: &'a NoisyBatch,
    batch_r: &'a NoisyBatch,
    cond_y: &Condition,
    eta: f64,
    gamma: f64,
    phi: &ResidualEpsModel,
) -> Result<EpsObjective<'a>> {
    check_paired(batch_g, batch_r, false)?;
    let oracle = phi.oracle();
    let eps_y_g = oracle.eps_rows(cond_y, batch_g)?;
    let eps_y_r = oracle.eps_rows(cond_y, batch_r)?;
    Ok(EpsObjective {
        groups: vec![
            ObjectiveGroup {
                batch: batch_g,
                terms: vec![(1.0, batch_g.eps.clone()), (gamma, eps_y_g)],
            },
            ObjectiveGroup {
                batch: batch_r,
                terms: vec![(-1.0, batch_r.eps.clone()), (eta, eps_y_r)],
            },
        ],
    })
}

fn check_paired(a: &NoisyBatch, b: &NoisyBatch, require_shared_eps: bool) -> Result<()> {
    if a.len() != b.len() || a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "paired batches must match in shape: {}×{} vs {}×{}",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    if a.t != b.t {
        return Err(Error::Contract(
            "paired batches must share their timestep draws".into(),
        ));
    }
    if require_shared_eps && a.eps != b.eps {
        return Err(Error::Contract(
            "paired batches must share their added noise".into(),
        ));
    }
    Ok(())
}

/// −η·mean‖ε_y(x_r)−ε_φ(x_r)‖² / mean‖ε_y(x_g)−ε_φ(x_g)‖²: the smallest γ
/// keeping the full loss's penalty pair positive on these batches. A zero
/// denominator makes the penalty vacuously positive and returns −∞.
pub fn gamma_floor(
    batch_g: &NoisyBatch,
    batch_r: &NoisyBatch,
    cond_y: &Condition,
    phi: &ResidualEpsModel,
    eta: f64,
) -> Result<f64> {
    let mean_sq = |batch: &NoisyBatch| -> Result<f64> {
        let eps_y = phi.oracle().eps_rows(cond_y, batch)?;
        let eps_phi = phi.predict_rows(&batch.xt, &batch.t)?;
        let mut sq = 0.0;
        for (a, b) in eps_y.iter().zip(eps_phi.iter()) {
            let d = a - b;
            sq += d * d;
        }
        Ok(sq / batch.len() as f64)
    };
    let mean_g = mean_sq(batch_g)?;
    let mean_r = mean_sq(batch_r)?;
    if mean_g == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(-eta * mean_r / mean_g)
}

/// ω(t)·(λ(ε_y − ε_z) − ε_{φy} + ε_{φz}): two-discriminator editing
/// direction. The unconditional contributions of the four-term form cancel
/// analytically, so only the reduced form is evaluated.
pub fn edit_direction(
    batch: &NoisyBatch,
    cond_y: &Condition,
    cond_z: &Condition,
    cfg: &DistillConfig,
    phi_y: &ResidualEpsModel,
    phi_z: &ResidualEpsModel,
) -> Result<DirectionBatch> {
    cfg.validate()?;
    let oracle = phi_y.oracle();
    let eps_y = oracle.eps_rows(cond_y, batch)?;
    let eps_z = oracle.eps_rows(cond_z, batch)?;
    let fake_y = phi_y.predict_rows(&batch.xt, &batch.t)?;
    let fake_z = phi_z.predict_rows(&batch.xt, &batch.t)?;
    let mut classifier = &eps_y - &eps_z;
    classifier.mapv_inplace(|v| v * cfg.lambda);
    let fake = &fake_y - &fake_z;
    let omega = omega_rows(cfg, oracle, &batch.t)?;
    let dirs = scale_rows(&omega, &classifier - &fake);
    let zeros = Array2::zeros(batch.eps.raw_dim());
    Ok(DirectionBatch {
        dirs,
        omega,
        components: Some(DirectionComponents {
            uncond: zeros.clone(),
            classifier,
            fake,
            noise: zeros,
        }),
    })
}

/// ω(t)·(guided_y(x_g) − guided_z(x_src)) with both batches built from the
/// same (t, ε) draws; the shared noise cancels between the two guided terms.
pub fn dds_direction(
    batch_g: &NoisyBatch,
    batch_src: &NoisyBatch,
    cond_y: &Condition,
    cond_z: &Condition,
    cfg: &DistillConfig,
    oracle: &Oracle,
) -> Result<DirectionBatch> {
    cfg.validate()?;
    check_paired(batch_g, batch_src, true)?;
    let unc_g = oracle.eps_rows(&Condition::Unconditional, batch_g)?;
    let cnd_g = oracle.eps_rows(cond_y, batch_g)?;
    let unc_s = oracle.eps_rows(&Condition::Unconditional, batch_src)?;
    let cnd_s = oracle.eps_rows(cond_z, batch_src)?;
    let guided_g = cfg_combine_rows(&unc_g, &cnd_g, cfg.lambda);
    let guided_s = cfg_combine_rows(&unc_s, &cnd_s, cfg.lambda);
    let omega = omega_rows(cfg, oracle, &batch_g.t)?;
    let classifier = &guided_g - &unc_g;
    let dirs = scale_rows(&omega, &guided_g - &guided_s);
    Ok(DirectionBatch {
        dirs,
        omega,
        components: Some(DirectionComponents {
            uncond: unc_g,
            classifier,
            fake: guided_s,
            noise: Array2::zeros(batch_g.eps.raw_dim()),
        }),
    })
}

/// (‖u‖² + ‖v‖²) − ½‖u − v‖², which equals ½‖u + v‖² and is therefore
/// non-negative: the per-sample inequality that makes the η = ½ loss an
/// upper bound.
pub fn upper_bound_gap(u: ArrayView1<f64>, v: ArrayView1<f64>) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            context: "upper_bound_gap",
            expected: u.len(),
            got: v.len(),
        });
    }
    let mut uu = 0.0;
    let mut vv = 0.0;
    let mut duv = 0.0;
    for (a, b) in u.iter().zip(v.iter()) {
        uu += a * a;
        vv += b * b;
        let d = a - b;
        duv += d * d;
    }
    Ok(uu + vv - 0.5 * duv)
}
