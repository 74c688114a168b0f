//! Variance-preserving noise schedules.
//!
//! Both schedules satisfy α(t)² + σ(t)² = 1 identically, α non-increasing
//! and σ non-decreasing on (0, 1):
//!   vp_cosine: α = cos(πt/2), σ = sin(πt/2)
//!   vp_linear: α = √(1−t),    σ = √t      (linear in variance)

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    VpCosine,
    VpLinear,
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    t_min: f64,
    t_max: f64,
}

impl NoiseSchedule {
    /// Requires 0 < t_min < t_max < 1.
    pub fn new(kind: ScheduleKind, t_min: f64, t_max: f64) -> Result<Self> {
        if !(t_min.is_finite() && t_max.is_finite() && 0.0 < t_min && t_min < t_max && t_max < 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "schedule t-range must satisfy 0 < t_min < t_max < 1, got [{t_min}, {t_max}]"
            )));
        }
        Ok(Self { kind, t_min, t_max })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// (α(t), σ(t)); `t` must lie within [t_min, t_max].
    pub fn eval(&self, t: f64) -> Result<(f64, f64)> {
        if !(t >= self.t_min && t <= self.t_max) {
            return Err(Error::TimeOutOfRange {
                t,
                t_min: self.t_min,
                t_max: self.t_max,
            });
        }
        Ok(eval_raw(self.kind, t))
    }
}

/// Schedule formulas without the range guard; valid on all of [0, 1].
/// Range enforcement is the public API's job — internal limit evaluations
/// (t → 0 data-space quantities, σ → 1 asymptotics) come through here.
pub(crate) fn eval_raw(kind: ScheduleKind, t: f64) -> (f64, f64) {
    match kind {
        ScheduleKind::VpCosine => {
            let half = std::f64::consts::FRAC_PI_2 * t;
            (half.cos(), half.sin())
        }
        ScheduleKind::VpLinear => ((1.0 - t).sqrt(), t.sqrt()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_closed_form() {
        let s = NoiseSchedule::new(ScheduleKind::VpCosine, 0.02, 0.98).unwrap();
        let (a, sg) = s.eval(1.0 / 3.0).unwrap();
        assert!((a - (std::f64::consts::PI / 6.0).cos()).abs() < 1e-15);
        assert!((a - 0.866_025_403_784_438_6).abs() < 1e-12);
        assert!((sg - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_at_range_floor() {
        let s = NoiseSchedule::new(ScheduleKind::VpCosine, 0.02, 0.98).unwrap();
        let (a, sg) = s.eval(0.02).unwrap();
        assert!((a - 0.999_506_56).abs() < 1e-7);
        assert!((sg - 0.031_410_76).abs() < 1e-7);
    }

    #[test]
    fn rejects_out_of_range_t() {
        let s = NoiseSchedule::new(ScheduleKind::VpCosine, 0.02, 0.98).unwrap();
        assert!(matches!(s.eval(0.0199), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(s.eval(0.981), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(
            s.eval(f64::NAN),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::new(ScheduleKind::VpCosine, 0.0, 0.9).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::VpCosine, 0.5, 0.5).is_err());
        assert!(NoiseSchedule::new(ScheduleKind::VpLinear, 0.1, 1.0).is_err());
    }

    #[test]
    fn variance_preserving_and_monotone_both_kinds() {
        for kind in [ScheduleKind::VpCosine, ScheduleKind::VpLinear] {
            let s = NoiseSchedule::new(kind, 0.001, 0.999).unwrap();
            let mut prev_a = f64::INFINITY;
            let mut prev_s = -f64::INFINITY;
            for i in 0..=1000 {
                let t = 0.001 + (0.999 - 0.001) * (i as f64) / 1000.0;
                let (a, sg) = s.eval(t).unwrap();
                assert!((a * a + sg * sg - 1.0).abs() < 1e-12);
                assert!(a <= prev_a + 1e-15);
                assert!(sg >= prev_s - 1e-15);
                prev_a = a;
                prev_s = sg;
            }
        }
    }
}
