//! One-axis parameter sweeps: clone the base config, set one knob per
//! value, run serially, and collect each run's final metrics row into a
//! summary table.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::runner::{run, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Lambda,
    Gamma,
    DiscSteps,
    Seed,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::Gamma => "gamma",
            SweepAxis::DiscSteps => "disc_steps",
            SweepAxis::Seed => "seed",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lambda" => Ok(SweepAxis::Lambda),
            "gamma" => Ok(SweepAxis::Gamma),
            "disc_steps" => Ok(SweepAxis::DiscSteps),
            "seed" => Ok(SweepAxis::Seed),
            other => Err(format!(
                "unknown sweep axis {other:?} (expected lambda, gamma, disc_steps, or seed)"
            )),
        }
    }
}

pub struct SweepOutcome {
    pub value: f64,
    pub record: RunRecord,
}

fn integral(axis: SweepAxis, v: f64) -> Result<u64> {
    if !(v.is_finite() && v >= 0.0 && v.fract() == 0.0) {
        return Err(HarnessError::Config(format!(
            "{axis} = {v}: axis takes non-negative integers"
        )));
    }
    Ok(v as u64)
}

fn with_context(e: HarnessError, axis: SweepAxis, v: f64) -> HarnessError {
    match e {
        HarnessError::Config(m) => HarnessError::Config(format!("{axis} = {v}: {m}")),
        HarnessError::Numeric(m) => HarnessError::Numeric(format!("{axis} = {v}: {m}")),
        HarnessError::GradCheck(m) => HarnessError::GradCheck(format!("{axis} = {v}: {m}")),
        HarnessError::Core(c) => {
            let msg = format!("{axis} = {v}: {c}");
            if matches!(c, sdlab_core::Error::NonFinite { .. }) {
                HarnessError::Numeric(msg)
            } else {
                HarnessError::Config(msg)
            }
        }
        io @ HarnessError::Io(_) => io,
    }
}

/// Run `base` once per value, each in `out_root/<axis>_<value>/`. All runs
/// share the base seed unless the axis is `seed`. After the last run a
/// `summary.csv` lands in `out_root` with one line per run holding its
/// final metrics row.
pub fn sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    out_root: &Path,
) -> Result<Vec<SweepOutcome>> {
    if values.is_empty() {
        return Err(HarnessError::Config(
            "sweep needs at least one value".into(),
        ));
    }
    std::fs::create_dir_all(out_root)?;

    let mut outcomes = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        match axis {
            SweepAxis::Lambda => cfg.distill.lambda = v,
            SweepAxis::Gamma => cfg.distill.gamma = v,
            SweepAxis::DiscSteps => cfg.distill.disc_steps_per_gen_step = integral(axis, v)? as u32,
            SweepAxis::Seed => cfg.train.seed = integral(axis, v)?,
        }
        cfg.distill
            .validate()
            .map_err(|e| HarnessError::Config(format!("{axis} = {v}: {e}")))?;
        cfg.train.out_dir = out_root.join(format!("{axis}_{v}")).display().to_string();
        let record = run(&cfg).map_err(|e| with_context(e, axis, v))?;
        outcomes.push(SweepOutcome { value: v, record });
    }

    let mut table = String::from(
        "axis,value,step,cond_loglik,classifier_conf,spread_ratio,churn,mode_agreement,wgan_value\n",
    );
    for o in &outcomes {
        let last = o
            .record
            .metrics
            .last()
            .expect("every run logs at least step 0");
        table.push_str(&format!(
            "{axis},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            o.value,
            last.step,
            last.cond_loglik,
            last.classifier_conf,
            last.spread_ratio,
            last.churn,
            last.mode_agreement,
            last.wgan_value,
        ));
    }
    std::fs::write(out_root.join("summary.csv"), table)?;
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for axis in [
            SweepAxis::Lambda,
            SweepAxis::Gamma,
            SweepAxis::DiscSteps,
            SweepAxis::Seed,
        ] {
            assert_eq!(axis.to_string().parse::<SweepAxis>().unwrap(), axis);
        }
        assert!("lamda".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn integral_axis_values_are_checked() {
        assert_eq!(integral(SweepAxis::Seed, 7.0).unwrap(), 7);
        assert!(integral(SweepAxis::Seed, 7.5).is_err());
        assert!(integral(SweepAxis::DiscSteps, -1.0).is_err());
    }
}
