//! Training loops: generation (SDS/CSD/VSD/ASD) and editing (two-model
//! adversarial editing, delta-style editing). Everything downstream of the
//! seed is deterministic; `wall_time_s` in the run record is the only
//! non-reproducible output.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use sdlab_core::distill::{
    asd_gen_direction, csd_direction, dds_direction, disc_loss_full, disc_loss_textonly,
    edit_direction, gamma_floor, sds_direction, Method,
};
use sdlab_core::fake_branch::ResidualEpsModel;
use sdlab_core::gen::{init_particles, write_points_csv, Generator, InitSpec};
use sdlab_core::optim::AdamState;
use sdlab_core::oracle::{Condition, NoisyBatch, Oracle};

use crate::config::{ExperimentConfig, GeneratorKind, InitKind};
use crate::error::{HarnessError, Result};
use crate::jsonl::write_jsonl;
use crate::metrics::{compute_metrics, MetricsRow};
use crate::svg::emit_svg;

/// Constants for the second discriminator in the editing loop: its loss
/// keeps only the conditional regression term on the frozen source batch
/// (η = 0 kills the real-branch plain term, γ = 1 keeps the conditional one
/// at full weight).
pub const EDIT_SECOND_DISC_ETA: f64 = 0.0;
pub const EDIT_SECOND_DISC_GAMMA: f64 = 1.0;

#[derive(Debug, Clone, Copy, Serialize)]
pub struct SecondDiscConstants {
    pub eta: f64,
    pub gamma: f64,
}

/// Emitted when a configured γ sits below the stability floor implied by
/// the current fake/real fit quality.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct GammaFloorWarning {
    pub step: u64,
    pub floor: f64,
    pub gamma: f64,
}

/// Everything a finished run reports. Serialized (without the metric rows,
/// which live in `metrics.jsonl`) as `run.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub version: String,
    pub config_hash: String,
    pub method: String,
    pub seed: u64,
    pub steps: u64,
    pub out_dir: String,
    /// Count of (t, ε) noise rows drawn over the whole run; shared-noise
    /// configurations draw fewer.
    pub noise_rows_drawn: u64,
    pub second_disc: Option<SecondDiscConstants>,
    pub gamma_floor_warnings: Vec<GammaFloorWarning>,
    pub metrics_path: String,
    pub final_particles: String,
    pub source_particles: Option<String>,
    pub phi_checkpoints: Vec<String>,
    pub snapshots: Vec<String>,
    /// Wall-clock seconds; the single field that varies between reruns.
    pub wall_time_s: f64,
    #[serde(skip)]
    pub metrics: Vec<MetricsRow>,
}

/// Dispatch on the configured method.
pub fn run(cfg: &ExperimentConfig) -> Result<RunRecord> {
    match cfg.distill.method {
        Method::Sds | Method::Csd | Method::Vsd | Method::Asd => run_generation(cfg),
        Method::AsdEdit | Method::Dds => run_editing(cfg),
    }
}

fn numeric_err(step: u64, method: Method, what: &str) -> HarnessError {
    HarnessError::Numeric(format!(
        "non-finite {what} at step {step} (method {method}); \
         try a smaller lr_gen/lr_disc or a narrower t range"
    ))
}

fn ensure_finite(dirs: &Array2<f64>, step: u64, method: Method) -> Result<()> {
    for &v in dirs.iter() {
        if !v.is_finite() {
            return Err(numeric_err(step, method, "update direction"));
        }
    }
    Ok(())
}

/// One uniform t per row in [t_min, t_max], then one standard-normal row per
/// particle. The draw order (all t first, then ε row-major) is part of the
/// reproducibility contract.
fn draw_noise(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
    t_min: f64,
    t_max: f64,
) -> (Array1<f64>, Array2<f64>) {
    let t = Array1::from_shape_fn(n, |_| t_min + (t_max - t_min) * rng.random::<f64>());
    let eps = Array2::from_shape_fn((n, dim), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    (t, eps)
}

fn mean_displacement(now: &Array2<f64>, before: &Array2<f64>) -> f64 {
    let n = now.nrows();
    let mut total = 0.0;
    for i in 0..n {
        let mut sq = 0.0;
        for j in 0..now.ncols() {
            let d = now[(i, j)] - before[(i, j)];
            sq += d * d;
        }
        total += sq.sqrt();
    }
    total / n as f64
}

/// Sub-seeds are derived from the master seed in a fixed order so that every
/// method consumes the same streams for the same purposes.
struct Seeds {
    init: u64,
    phi_y: u64,
    phi_z: u64,
    r#loop: u64,
}

impl Seeds {
    fn derive(master: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        Self {
            init: rng.random(),
            phi_y: rng.random(),
            phi_z: rng.random(),
            r#loop: rng.random(),
        }
    }
}

struct RunContext {
    oracle: Oracle,
    cond_y: Condition,
    gen: Generator,
    seeds: Seeds,
    out_dir: PathBuf,
}

fn prepare(cfg: &ExperimentConfig, source_cond: Option<&Condition>) -> Result<RunContext> {
    let oracle = cfg.build_oracle()?;
    let gmm = cfg.build_mixture()?;
    let cond_y = cfg.build_condition(&cfg.condition_y, &gmm)?;
    let seeds = Seeds::derive(cfg.train.seed);

    let g = &cfg.generator;
    let gen = match g.kind {
        GeneratorKind::Particles => {
            let init_cond = source_cond.unwrap_or(&cond_y);
            let spec = match g.init {
                InitKind::Gauss => InitSpec::Gauss {
                    n: g.n,
                    dim: cfg.mixture.dim,
                    mean: g.mean,
                    std: g.std,
                },
                InitKind::AtConditionMode => InitSpec::AtConditionMode {
                    n: g.n,
                    oracle: &oracle,
                    cond: init_cond,
                },
                InitKind::FromFile => InitSpec::FromFile {
                    path: Path::new(g.path.as_deref().expect("validated at load")),
                },
            };
            Generator::Particles(init_particles(&spec, seeds.init)?)
        }
        GeneratorKind::Warped => Generator::Warped(sdlab_core::gen::WarpedLatentGenerator::new(
            cfg.mixture.dim,
            g.latent_dim,
            g.hidden_dim,
            g.num_views,
            seeds.init,
        )?),
    };
    if gen.dim() != oracle.dim() {
        return Err(HarnessError::Config(format!(
            "generator dim {} does not match mixture dim {}",
            gen.dim(),
            oracle.dim()
        )));
    }
    if cfg.train.snapshot_every > 0 && oracle.dim() < 2 {
        return Err(HarnessError::Config(
            "snapshot_every > 0 needs a mixture of dim >= 2 to plot".into(),
        ));
    }
    if cfg.train.batch > gen.num_rows() && matches!(g.kind, GeneratorKind::Particles) {
        return Err(HarnessError::Config(format!(
            "train.batch ({}) exceeds particle count ({})",
            cfg.train.batch,
            gen.num_rows()
        )));
    }

    let out_dir = PathBuf::from(&cfg.train.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    Ok(RunContext {
        oracle,
        cond_y,
        gen,
        seeds,
        out_dir,
    })
}

/// Shared logging/snapshot walk. Returns true when `step` is a logging
/// boundary (step 0 and every `log_every` steps).
struct LogWalk {
    log_every: u64,
    snapshot_every: u64,
    last_logged: Option<Array2<f64>>,
    rows: Vec<MetricsRow>,
    snapshots: Vec<String>,
}

impl LogWalk {
    fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            log_every: cfg.train.log_every,
            snapshot_every: cfg.train.snapshot_every,
            last_logged: None,
            rows: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    fn observe(
        &mut self,
        step: u64,
        gen: &Generator,
        oracle: &Oracle,
        cond: &Condition,
        out_dir: &Path,
    ) -> Result<()> {
        let log_here = step.is_multiple_of(self.log_every);
        let snap_here = self.snapshot_every > 0 && step.is_multiple_of(self.snapshot_every);
        if !(log_here || snap_here) {
            return Ok(());
        }
        let pts = gen.snapshot_points()?;
        if log_here {
            let churn = match &self.last_logged {
                None => 0.0,
                Some(prev) => mean_displacement(&pts, prev) / self.log_every as f64,
            };
            self.rows
                .push(compute_metrics(&pts, oracle, cond, step, churn)?);
            self.last_logged = Some(pts.clone());
        }
        if snap_here {
            let name = format!("snapshot_{step:06}.svg");
            emit_svg(&pts, oracle, cond, &out_dir.join(&name))?;
            self.snapshots.push(name);
        }
        Ok(())
    }
}

/// Run one of the generation methods. The per-step order is: draw view and
/// batch rows, render, noisify, apply the method's direction to the
/// generator parameters, then (for fake-branch methods) take
/// `disc_steps_per_gen_step` discriminator steps.
pub fn run_generation(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let method = cfg.distill.method;
    if !matches!(
        method,
        Method::Sds | Method::Csd | Method::Vsd | Method::Asd
    ) {
        return Err(HarnessError::Config(format!(
            "run_generation cannot run method {method}; use the edit entry point"
        )));
    }
    let started = Instant::now();
    let mut ctx = prepare(cfg, None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seeds.r#loop);

    // VSD and ASD share one code path; VSD is the γ = 0 point of it. Both
    // initialize the fake branch from the same sub-seed, so runs that differ
    // only in the method label follow identical trajectories when γ = 0.
    let mut phi = method
        .uses_fake_branch()
        .then(|| ResidualEpsModel::zero_init(ctx.oracle.clone(), ctx.seeds.phi_y));
    let mut adam_gen = AdamState::new(ctx.gen.param_count(), cfg.train.lr_gen);
    let mut adam_disc = phi
        .as_ref()
        .map(|p| AdamState::new(p.param_count(), cfg.train.lr_disc));

    let steps = cfg.train.steps;
    let batch = cfg.train.batch;
    let dim = ctx.oracle.dim();
    let (t_min, t_max) = (cfg.distill.t_min, cfg.distill.t_max);
    let mut walk = LogWalk::new(cfg);
    let mut noise_rows_drawn: u64 = 0;

    for step in 0..=steps {
        walk.observe(step, &ctx.gen, &ctx.oracle, &ctx.cond_y, &ctx.out_dir)?;
        if step == steps {
            break;
        }

        let view = (rng.random::<u64>() % ctx.gen.num_views() as u64) as usize;
        let rows: Vec<usize> = match &ctx.gen {
            Generator::Particles(p) => rand::seq::index::sample(&mut rng, p.n(), batch).into_vec(),
            Generator::Warped(_) => vec![0; batch],
        };
        let x0 = ctx.gen.render(view, &rows)?;
        let (t, eps) = draw_noise(&mut rng, batch, dim, t_min, t_max);
        noise_rows_drawn += batch as u64;
        let batch_g = ctx.oracle.noisify(&x0, &t, &eps)?;

        let db = match method {
            Method::Sds => sds_direction(&batch_g, &ctx.cond_y, &cfg.distill, &ctx.oracle)?,
            Method::Csd => csd_direction(&batch_g, &ctx.cond_y, &cfg.distill, &ctx.oracle)?,
            Method::Vsd | Method::Asd => {
                asd_gen_direction(&batch_g, &ctx.cond_y, &cfg.distill, phi.as_ref().unwrap())?
            }
            _ => unreachable!(),
        };
        ensure_finite(&db.dirs, step, method)?;
        let grad = ctx.gen.pullback(view, &rows, &db.dirs)?;
        adam_gen
            .update(ctx.gen.params_mut(), &grad)
            .map_err(|_| numeric_err(step, method, "generator gradient"))?;

        if let (Some(phi), Some(adam_disc)) = (phi.as_mut(), adam_disc.as_mut()) {
            for _ in 0..cfg.distill.disc_steps_per_gen_step {
                let fresh;
                let bg: &NoisyBatch = if cfg.distill.share_noise {
                    // Reuse the generator step's batch: same points (pre
                    // update), same (t, ε).
                    &batch_g
                } else {
                    let x0 = ctx.gen.render(view, &rows)?;
                    let (t, eps) = draw_noise(&mut rng, batch, dim, t_min, t_max);
                    noise_rows_drawn += batch as u64;
                    fresh = ctx.oracle.noisify(&x0, &t, &eps)?;
                    &fresh
                };
                let obj = disc_loss_textonly(bg, &ctx.cond_y, cfg.distill.gamma, phi)?;
                let g = obj.grad(phi)?;
                adam_disc
                    .update(phi.params_mut(), &g)
                    .map_err(|_| numeric_err(step, method, "fake-branch gradient"))?;
            }
        }
    }

    let mut phi_checkpoints = Vec::new();
    if let Some(phi) = &phi {
        let name = "phi_final.bin".to_string();
        phi.save_checkpoint(&ctx.out_dir.join(&name))?;
        phi_checkpoints.push(name);
    }
    finish(
        cfg,
        ctx,
        walk,
        noise_rows_drawn,
        None,
        Vec::new(),
        phi_checkpoints,
        None,
        started,
    )
}

/// Run one of the editing methods against a frozen source cloud (the
/// initial particles). Both methods noise the generated and source rows
/// with the same (t, ε) pair each step.
pub fn run_editing(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let method = cfg.distill.method;
    if !matches!(method, Method::AsdEdit | Method::Dds) {
        return Err(HarnessError::Config(format!(
            "run_editing cannot run method {method}; use the run entry point"
        )));
    }
    let started = Instant::now();
    let gmm = cfg.build_mixture()?;
    let cond_z = {
        let z = cfg
            .condition_z
            .as_ref()
            .expect("validated at load: editing requires condition_z");
        cfg.build_condition(z, &gmm)?
    };
    let mut ctx = prepare(cfg, Some(&cond_z))?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seeds.r#loop);

    let source = match &ctx.gen {
        Generator::Particles(p) => p.points().clone(),
        Generator::Warped(_) => unreachable!("validated at load: editing uses particles"),
    };

    let mut phis = (method == Method::AsdEdit).then(|| {
        (
            ResidualEpsModel::zero_init(ctx.oracle.clone(), ctx.seeds.phi_y),
            ResidualEpsModel::zero_init(ctx.oracle.clone(), ctx.seeds.phi_z),
        )
    });
    let mut adam_gen = AdamState::new(ctx.gen.param_count(), cfg.train.lr_gen);
    let mut adam_discs = phis.as_ref().map(|(py, pz)| {
        (
            AdamState::new(py.param_count(), cfg.train.lr_disc),
            AdamState::new(pz.param_count(), cfg.train.lr_disc),
        )
    });

    let steps = cfg.train.steps;
    let batch = cfg.train.batch;
    let dim = ctx.oracle.dim();
    let (t_min, t_max) = (cfg.distill.t_min, cfg.distill.t_max);
    let mut walk = LogWalk::new(cfg);
    let mut noise_rows_drawn: u64 = 0;
    let mut warnings: Vec<GammaFloorWarning> = Vec::new();

    let source_rows = |rows: &[usize]| -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), dim));
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(k).assign(&source.row(r));
        }
        out
    };

    for step in 0..=steps {
        walk.observe(step, &ctx.gen, &ctx.oracle, &ctx.cond_y, &ctx.out_dir)?;
        if step == steps {
            break;
        }

        let view = (rng.random::<u64>() % ctx.gen.num_views() as u64) as usize;
        let n = ctx.gen.num_rows();
        let rows = rand::seq::index::sample(&mut rng, n, batch).into_vec();
        let x0 = ctx.gen.render(view, &rows)?;
        let x_src = source_rows(&rows);
        // One (t, ε) draw serves both sides of the pair.
        let (t, eps) = draw_noise(&mut rng, batch, dim, t_min, t_max);
        noise_rows_drawn += batch as u64;
        let batch_g = ctx.oracle.noisify(&x0, &t, &eps)?;
        let batch_src = ctx.oracle.noisify(&x_src, &t, &eps)?;

        let db = match method {
            Method::AsdEdit => {
                let (py, pz) = phis.as_ref().unwrap();
                edit_direction(&batch_g, &ctx.cond_y, &cond_z, &cfg.distill, py, pz)?
            }
            Method::Dds => dds_direction(
                &batch_g,
                &batch_src,
                &ctx.cond_y,
                &cond_z,
                &cfg.distill,
                &ctx.oracle,
            )?,
            _ => unreachable!(),
        };
        ensure_finite(&db.dirs, step, method)?;
        let grad = ctx.gen.pullback(view, &rows, &db.dirs)?;
        adam_gen
            .update(ctx.gen.params_mut(), &grad)
            .map_err(|_| numeric_err(step, method, "generator gradient"))?;

        if let (Some((phi_y, phi_z)), Some((adam_y, adam_z))) = (phis.as_mut(), adam_discs.as_mut())
        {
            for _ in 0..cfg.distill.disc_steps_per_gen_step {
                let fresh;
                let (bg, bsrc): (&NoisyBatch, &NoisyBatch) = if cfg.distill.share_noise {
                    (&batch_g, &batch_src)
                } else {
                    let x0 = ctx.gen.render(view, &rows)?;
                    let (t, eps) = draw_noise(&mut rng, batch, dim, t_min, t_max);
                    noise_rows_drawn += batch as u64;
                    fresh = (
                        ctx.oracle.noisify(&x0, &t, &eps)?,
                        ctx.oracle.noisify(&source_rows(&rows), &t, &eps)?,
                    );
                    (&fresh.0, &fresh.1)
                };
                // φ_y fits the moving cloud under y, exactly as in
                // generation.
                let obj_y = disc_loss_textonly(bg, &ctx.cond_y, cfg.distill.gamma, phi_y)?;
                let gy = obj_y.grad(phi_y)?;
                adam_y
                    .update(phi_y.params_mut(), &gy)
                    .map_err(|_| numeric_err(step, method, "fake-branch gradient"))?;
                // φ_z fits the frozen source under z via the full loss with
                // (η, γ) pinned to the conditional-regression point.
                let obj_z = disc_loss_full(
                    bg,
                    bsrc,
                    &cond_z,
                    EDIT_SECOND_DISC_ETA,
                    EDIT_SECOND_DISC_GAMMA,
                    phi_z,
                )?;
                let gz = obj_z.grad(phi_z)?;
                adam_z
                    .update(phi_z.params_mut(), &gz)
                    .map_err(|_| numeric_err(step, method, "fake-branch gradient"))?;
                let floor = gamma_floor(bg, bsrc, &cond_z, phi_z, EDIT_SECOND_DISC_ETA)?;
                if EDIT_SECOND_DISC_GAMMA < floor {
                    warnings.push(GammaFloorWarning {
                        step,
                        floor,
                        gamma: EDIT_SECOND_DISC_GAMMA,
                    });
                }
            }
        }
    }

    let source_name = "source_particles.csv".to_string();
    write_points_csv(&source, &ctx.out_dir.join(&source_name))?;

    let mut phi_checkpoints = Vec::new();
    if let Some((phi_y, phi_z)) = &phis {
        for (name, model) in [("phi_y_final.bin", phi_y), ("phi_z_final.bin", phi_z)] {
            model.save_checkpoint(&ctx.out_dir.join(name))?;
            phi_checkpoints.push(name.to_string());
        }
    }
    let second_disc = (method == Method::AsdEdit).then_some(SecondDiscConstants {
        eta: EDIT_SECOND_DISC_ETA,
        gamma: EDIT_SECOND_DISC_GAMMA,
    });
    finish(
        cfg,
        ctx,
        walk,
        noise_rows_drawn,
        second_disc,
        warnings,
        phi_checkpoints,
        Some(source_name),
        started,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: &ExperimentConfig,
    ctx: RunContext,
    walk: LogWalk,
    noise_rows_drawn: u64,
    second_disc: Option<SecondDiscConstants>,
    gamma_floor_warnings: Vec<GammaFloorWarning>,
    phi_checkpoints: Vec<String>,
    source_particles: Option<String>,
    started: Instant,
) -> Result<RunRecord> {
    let metrics_path = "metrics.jsonl".to_string();
    write_jsonl(&walk.rows, &ctx.out_dir.join(&metrics_path))?;

    let final_particles = "particles_final.csv".to_string();
    write_points_csv(
        &ctx.gen.snapshot_points()?,
        &ctx.out_dir.join(&final_particles),
    )?;

    let record = RunRecord {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.content_hash(),
        method: cfg.distill.method.to_string(),
        seed: cfg.train.seed,
        steps: cfg.train.steps,
        out_dir: cfg.train.out_dir.clone(),
        noise_rows_drawn,
        second_disc,
        gamma_floor_warnings,
        metrics_path,
        final_particles,
        source_particles,
        phi_checkpoints,
        snapshots: walk.snapshots,
        wall_time_s: started.elapsed().as_secs_f64(),
        metrics: walk.rows,
    };
    let json = serde_json::to_string_pretty(&record)
        .map_err(|e| HarnessError::Config(format!("serialize run record: {e}")))?;
    std::fs::write(ctx.out_dir.join("run.json"), json + "\n")?;
    Ok(record)
}
