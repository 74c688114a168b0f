//! TOML experiment configuration: parsing, defaulting, validation, and
//! construction of the core objects (mixture, oracle, conditions) a run
//! needs. A resolved config also has a stable content hash used to stamp
//! run records.

use std::path::Path;

use serde::{Deserialize, Serialize};

use sdlab_core::distill::{DistillConfig, Method, WeightingMode};
use sdlab_core::oracle::{Condition, GaussianMixture, NoiseSchedule, Oracle, ScheduleKind};

use crate::error::{HarnessError, Result};

fn cfg_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

/// `[mixture]`: the ground-truth diagonal Gaussian mixture. Weights are
/// normalized at load time so configs may use unnormalized masses.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSection {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub cov_diags: Vec<Vec<f64>>,
}

/// `[condition_y]` / `[condition_z]`: how a condition restricts or reweights
/// the mixture components.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditionSection {
    Unconditional,
    Weighted { component_weights: Vec<f64> },
    Subset { components: Vec<usize> },
}

/// `[schedule]`: which noise schedule the oracle runs on. The valid time
/// range comes from `[distill] t_min / t_max`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::VpCosine,
        }
    }
}

/// Raw `[distill]` with everything optional, so gamma's default can depend
/// on the method (the plain variational method pins γ = 0; an explicit
/// non-zero γ there is rejected rather than silently ignored).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDistillSection {
    method: Method,
    lambda: Option<f64>,
    eta: Option<f64>,
    gamma: Option<f64>,
    weighting: Option<WeightingMode>,
    t_min: Option<f64>,
    t_max: Option<f64>,
    share_noise: Option<bool>,
    disc_steps_per_gen_step: Option<u32>,
}

impl RawDistillSection {
    fn resolve(&self) -> DistillConfig {
        let mut cfg = DistillConfig::preset_2d(self.method);
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.weighting {
            cfg.weighting = v;
        }
        if let Some(v) = self.t_min {
            cfg.t_min = v;
        }
        if let Some(v) = self.t_max {
            cfg.t_max = v;
        }
        if let Some(v) = self.share_noise {
            cfg.share_noise = v;
        }
        if let Some(v) = self.disc_steps_per_gen_step {
            cfg.disc_steps_per_gen_step = v;
        }
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Particles,
    Warped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Gauss,
    AtConditionMode,
    FromFile,
}

fn default_n() -> usize {
    64
}
fn default_std() -> f64 {
    1.0
}
fn default_latent_dim() -> usize {
    8
}
fn default_hidden_dim() -> usize {
    16
}
fn default_num_views() -> usize {
    4
}

/// `[generator]`: what carries the degrees of freedom being optimized —
/// a free particle cloud or a shared latent pushed through fixed per-view
/// warps.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSection {
    #[serde(default = "default_generator_kind")]
    pub kind: GeneratorKind,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_init")]
    pub init: InitKind,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "default_std")]
    pub std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_num_views")]
    pub num_views: usize,
}

fn default_init() -> InitKind {
    InitKind::Gauss
}

fn default_generator_kind() -> GeneratorKind {
    GeneratorKind::Particles
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Particles,
            n: default_n(),
            init: default_init(),
            mean: 0.0,
            std: default_std(),
            path: None,
            latent_dim: default_latent_dim(),
            hidden_dim: default_hidden_dim(),
            num_views: default_num_views(),
        }
    }
}

fn default_steps() -> u64 {
    2000
}
fn default_batch() -> usize {
    8
}
fn default_log_every() -> u64 {
    50
}
fn default_lr_gen() -> f64 {
    1e-2
}
fn default_lr_disc() -> f64 {
    1e-3
}
fn default_out_dir() -> String {
    "out".into()
}

/// `[train]`: optimization loop bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    #[serde(default = "default_lr_gen")]
    pub lr_gen: f64,
    #[serde(default = "default_lr_disc")]
    pub lr_disc: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
    #[serde(default)]
    pub snapshot_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            batch: default_batch(),
            log_every: default_log_every(),
            lr_gen: default_lr_gen(),
            lr_disc: default_lr_disc(),
            seed: 0,
            out_dir: default_out_dir(),
            snapshot_every: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mixture: MixtureSection,
    condition_y: ConditionSection,
    condition_z: Option<ConditionSection>,
    #[serde(default)]
    schedule: ScheduleSection,
    distill: RawDistillSection,
    #[serde(default)]
    generator: GeneratorSection,
    #[serde(default)]
    train: TrainSection,
}

/// Fully resolved experiment description. Serializing this (rather than the
/// raw file bytes) is what the content hash covers, so formatting and
/// defaulted-vs-explicit keys do not change identity.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub mixture: MixtureSection,
    pub condition_y: ConditionSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub condition_z: Option<ConditionSection>,
    pub schedule: ScheduleSection,
    pub distill: DistillConfig,
    pub generator: GeneratorSection,
    pub train: TrainSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| cfg_err(format!("TOML parse: {e}")))?;
        let mut distill = raw.distill.resolve();
        if raw.distill.method == Method::Vsd {
            match raw.distill.gamma {
                None => distill.gamma = 0.0,
                Some(g) => {
                    if g != 0.0 {
                        return Err(cfg_err(format!(
                            "method vsd pins gamma = 0; got explicit gamma = {g}"
                        )));
                    }
                }
            }
        }
        let mut cfg = Self {
            mixture: raw.mixture,
            condition_y: raw.condition_y,
            condition_z: raw.condition_z,
            schedule: raw.schedule,
            distill,
            generator: raw.generator,
            train: raw.train,
        };
        cfg.normalize_weights()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    fn normalize_weights(&mut self) -> Result<()> {
        let sum: f64 = self.mixture.weights.iter().sum();
        if !sum.is_finite() || sum <= 0.0 {
            return Err(cfg_err(format!("mixture weights sum to {sum}")));
        }
        for w in &mut self.mixture.weights {
            *w /= sum;
        }
        Ok(())
    }

    /// Structural checks beyond what the core constructors enforce.
    fn validate(&self) -> Result<()> {
        self.distill.validate()?;
        // Exercise the core constructors once so bad mixtures/conditions are
        // reported at load time, not mid-run.
        let gmm = self.build_mixture()?;
        self.build_condition(&self.condition_y, &gmm)?;
        if let Some(z) = &self.condition_z {
            self.build_condition(z, &gmm)?;
        }

        let t = &self.train;
        if t.steps < 1 {
            return Err(cfg_err("train.steps must be >= 1"));
        }
        if t.batch < 1 {
            return Err(cfg_err("train.batch must be >= 1"));
        }
        if t.log_every < 1 {
            return Err(cfg_err("train.log_every must be >= 1"));
        }
        for (name, v) in [("lr_gen", t.lr_gen), ("lr_disc", t.lr_disc)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(cfg_err(format!("train.{name} must be finite and > 0")));
            }
        }

        let g = &self.generator;
        match g.kind {
            GeneratorKind::Particles => {
                if g.n < 1 {
                    return Err(cfg_err("generator.n must be >= 1"));
                }
                if t.batch > g.n {
                    return Err(cfg_err(format!(
                        "train.batch ({}) exceeds particle count ({})",
                        t.batch, g.n
                    )));
                }
                if g.init == InitKind::FromFile && g.path.is_none() {
                    return Err(cfg_err(
                        "generator.init = from_file requires generator.path",
                    ));
                }
                if !(g.std.is_finite() && g.std >= 0.0) || !g.mean.is_finite() {
                    return Err(cfg_err("generator mean/std must be finite, std >= 0"));
                }
            }
            GeneratorKind::Warped => {
                if g.latent_dim < 1 || g.hidden_dim < 1 || g.num_views < 1 {
                    return Err(cfg_err(
                        "warped generator needs latent_dim, hidden_dim, num_views >= 1",
                    ));
                }
            }
        }

        match self.distill.method {
            Method::AsdEdit | Method::Dds => {
                if self.condition_z.is_none() {
                    return Err(cfg_err(format!(
                        "method {} requires [condition_z]",
                        self.distill.method
                    )));
                }
                if g.kind != GeneratorKind::Particles {
                    return Err(cfg_err(format!(
                        "method {} edits a particle cloud; generator.kind must be particles",
                        self.distill.method
                    )));
                }
                if g.init == InitKind::Gauss {
                    return Err(cfg_err(format!(
                        "method {} needs a concrete source: generator.init must be \
                         at_condition_mode or from_file",
                        self.distill.method
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn build_mixture(&self) -> Result<GaussianMixture> {
        let m = &self.mixture;
        for row in m.means.iter().chain(m.cov_diags.iter()) {
            if row.len() != m.dim {
                return Err(cfg_err(format!(
                    "mixture.dim = {} but a means/cov_diags row has length {}",
                    m.dim,
                    row.len()
                )));
            }
        }
        Ok(GaussianMixture::new(
            m.weights.clone(),
            m.means.clone(),
            m.cov_diags.clone(),
        )?)
    }

    pub fn build_oracle(&self) -> Result<Oracle> {
        let gmm = self.build_mixture()?;
        let sched = NoiseSchedule::new(self.schedule.kind, self.distill.t_min, self.distill.t_max)?;
        Ok(Oracle::new(gmm, sched))
    }

    pub fn build_condition(
        &self,
        section: &ConditionSection,
        gmm: &GaussianMixture,
    ) -> Result<Condition> {
        Ok(match section {
            ConditionSection::Unconditional => Condition::Unconditional,
            ConditionSection::Weighted { component_weights } => {
                if component_weights.len() != gmm.component_count() {
                    return Err(cfg_err(format!(
                        "condition has {} component weights, mixture has {} components",
                        component_weights.len(),
                        gmm.component_count()
                    )));
                }
                Condition::weighted(component_weights.clone())?
            }
            ConditionSection::Subset { components } => Condition::hard_subset(gmm, components)?,
        })
    }

    /// CLI overrides applied after load.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out_dir: Option<&Path>) {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        if let Some(o) = out_dir {
            self.train.out_dir = o.display().to_string();
        }
    }

    /// FNV-1a over the canonical serialized form, as 16 hex digits.
    pub fn content_hash(&self) -> String {
        let text = toml::to_string(self).expect("resolved config always serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}
