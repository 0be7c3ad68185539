//! CLI error type: wraps core errors and adds file-system and configuration
//! failures, with a machine-readable JSON rendering for stderr.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] gplsim_core::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("fit did not converge; pass --allow-nonconverged to accept it")]
    NotConverged,
}

impl CliError {
    /// Stable machine-readable kind for the stderr error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e {
                gplsim_core::Error::Domain(_) => "domain",
                gplsim_core::Error::Config(_) => "config",
                gplsim_core::Error::Numerical(_) => "numerical",
                gplsim_core::Error::NonConvergence(_) => "non_convergence",
                gplsim_core::Error::SingularDesign(_) => "singular_design",
                gplsim_core::Error::SingularBread(_) => "singular_bread",
                gplsim_core::Error::BracketFailure(_) => "bracket_failure",
                gplsim_core::Error::TooManyFailures { .. } => "too_many_failures",
                gplsim_core::Error::Parse { .. } => "parse",
                gplsim_core::Error::Schema(_) => "schema",
                gplsim_core::Error::DuplicateVisit { .. } => "duplicate_visit",
            },
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::NotConverged => "non_convergence",
        }
    }

    /// One-line JSON object written to stderr on failure.
    pub fn to_json(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_json_is_machine_readable() {
        let err = CliError::Config("bad level".into());
        let v: serde_json::Value = serde_json::from_str(&err.to_json()).unwrap();
        assert_eq!(v["error"], "config");
        assert_eq!(v["message"], "config error: bad level");

        let core = CliError::Core(gplsim_core::Error::Schema(vec!["y".into()]));
        let v: serde_json::Value = serde_json::from_str(&core.to_json()).unwrap();
        assert_eq!(v["error"], "schema");
    }
}
