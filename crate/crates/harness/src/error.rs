//! Harness-level error type with a stable mapping onto process exit codes.

/// Errors surfaced by the harness. Each variant maps onto the exit code
/// contract of the `sdlab` binary: configuration problems exit 1, numeric
/// failures during a run exit 2, gradient-audit failures exit 3.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("gradient audit failed: {0}")]
    GradCheck(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Core(#[from] sdlab_core::Error),
}

impl HarnessError {
    /// Exit code for the CLI. Core errors are split by kind: a non-finite
    /// value mid-run is a numeric failure, everything else (bad mixtures,
    /// bad conditions, corrupt files) is treated as a configuration error.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Numeric(_) => 2,
            HarnessError::GradCheck(_) => 3,
            HarnessError::Io(_) => 1,
            HarnessError::Core(e) => match e {
                sdlab_core::Error::NonFinite { .. } => 2,
                _ => 1,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_documented_contract() {
        assert_eq!(HarnessError::Config("x".into()).exit_code(), 1);
        assert_eq!(HarnessError::Numeric("x".into()).exit_code(), 2);
        assert_eq!(HarnessError::GradCheck("x".into()).exit_code(), 3);
        let nf = sdlab_core::Error::NonFinite {
            context: "dirs",
            index: 0,
            value: f64::NAN,
        };
        assert_eq!(HarnessError::Core(nf).exit_code(), 2);
        let cfg = sdlab_core::Error::InvalidConfig("bad".into());
        assert_eq!(HarnessError::Core(cfg).exit_code(), 1);
    }
}
