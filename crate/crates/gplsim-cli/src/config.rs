//! Run configuration: a flat JSON file, overridable by command-line flags,
//! echoed in fully resolved form alongside every run's outputs.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use gplsim_core::{CorrFamily, FitConfig, Method, OutcomeFamily};

use crate::error::{CliError, Result};

/// All run settings, fully resolved. Serialized as a flat JSON object;
/// unknown keys in a config file are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Outcome family: `gaussian`, `bernoulli` or `poisson`.
    pub family: String,
    /// Working correlation: `independence`, `exchangeable` or `ar1`.
    pub corr_family: String,
    /// Sieve dimensions offered to the information criterion.
    pub k_candidates: Vec<usize>,
    pub tol_theta: f64,
    pub max_outer: usize,
    /// Monte Carlo replications for `simulate`.
    pub b: usize,
    /// Bootstrap replicates for `band`.
    pub b_star: usize,
    pub level: f64,
    pub seed: u64,
    pub cv_folds: usize,
    pub out_dir: PathBuf,
    pub standardize: bool,
    pub allow_nonconverged: bool,
    /// Inference methods for `infer` and `simulate`.
    pub methods: Vec<String>,
    /// Grid length for link evaluation and plotting.
    pub grid_len: usize,
    /// Simulation design: subjects, visits, latent correlation, covariate
    /// correlation, heavier covariate tails, and the off-grid override.
    pub n: usize,
    pub m: usize,
    pub rho: f64,
    pub kappa: f64,
    pub heavy_tails: bool,
    pub allow_off_design: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            family: "gaussian".into(),
            corr_family: "independence".into(),
            k_candidates: vec![6, 8, 10, 12],
            tol_theta: 1e-6,
            max_outer: 100,
            b: 200,
            b_star: 200,
            level: 0.95,
            seed: 1,
            cv_folds: 5,
            out_dir: PathBuf::from("out"),
            standardize: false,
            allow_nonconverged: false,
            methods: Method::ALL.iter().map(|m| m.name().to_string()).collect(),
            grid_len: 200,
            n: 100,
            m: 5,
            rho: 0.0,
            kappa: 0.0,
            heavy_tails: false,
            allow_off_design: false,
        }
    }
}

/// Optional flag-level overrides collected from the command line; every set
/// field replaces the corresponding config-file key.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct CommonArgs {
    /// Flat JSON configuration file; flags override its keys.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Outcome family: gaussian, bernoulli or poisson.
    #[arg(long)]
    pub family: Option<String>,
    /// Working correlation: independence, exchangeable or ar1.
    #[arg(long)]
    pub corr_family: Option<String>,
    /// Comma-separated sieve dimensions offered to the information criterion.
    #[arg(long, value_delimiter = ',')]
    pub k_candidates: Option<Vec<usize>>,
    #[arg(long)]
    pub tol_theta: Option<f64>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    /// Monte Carlo replications for simulate.
    #[arg(long)]
    pub b: Option<usize>,
    /// Bootstrap replicates for band.
    #[arg(long)]
    pub b_star: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cv_folds: Option<usize>,
    /// Output directory; created if absent.
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Standardize continuous covariates on ingestion.
    #[arg(long)]
    pub standardize: bool,
    /// Exit 0 even when a fit stopped at its iteration budget.
    #[arg(long)]
    pub allow_nonconverged: bool,
    /// Comma-separated methods (profile_bel, naive_el, gee_wald, gee_poly)
    /// or `all`.
    #[arg(long = "methods", alias = "method", value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub grid_len: Option<usize>,
    /// Simulated subjects per replication.
    #[arg(long)]
    pub n: Option<usize>,
    /// Simulated visits per subject.
    #[arg(long)]
    pub m: Option<usize>,
    /// Latent AR(1) correlation of the simulated subject effect.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Toeplitz decay of the simulated covariate correlation.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Simulate covariates with variance-matched t(5) tails.
    #[arg(long)]
    pub heavy_tails: bool,
    /// Permit simulation designs outside the study grid.
    #[arg(long)]
    pub allow_off_design: bool,
}

impl RunConfig {
    /// Loads the config file (if any), applies flag overrides, validates.
    pub fn resolve(args: &CommonArgs) -> Result<RunConfig> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Io {
                    path: path.clone(),
                    source: e,
                })?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        macro_rules! override_opt {
            ($($field:ident),+ $(,)?) => {
                $(if let Some(v) = &args.$field { cfg.$field = v.clone(); })+
            };
        }
        override_opt!(
            family,
            corr_family,
            k_candidates,
            tol_theta,
            max_outer,
            b,
            b_star,
            level,
            seed,
            cv_folds,
            out_dir,
            grid_len,
            n,
            m,
            rho,
            kappa,
        );
        if let Some(methods) = &args.methods {
            cfg.methods = if methods.iter().any(|m| m == "all") {
                Method::ALL.iter().map(|m| m.name().to_string()).collect()
            } else {
                methods.clone()
            };
        }
        if args.standardize {
            cfg.standardize = true;
        }
        if args.allow_nonconverged {
            cfg.allow_nonconverged = true;
        }
        if args.heavy_tails {
            cfg.heavy_tails = true;
        }
        if args.allow_off_design {
            cfg.allow_off_design = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.parsed_family()?;
        self.parsed_corr()?;
        self.parsed_methods()?;
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(CliError::Config(format!("level {} outside (0, 1)", self.level)));
        }
        if self.k_candidates.is_empty() {
            return Err(CliError::Config("k_candidates must be nonempty".into()));
        }
        if self.cv_folds < 2 {
            return Err(CliError::Config("cv_folds must be at least 2".into()));
        }
        if self.grid_len < 2 {
            return Err(CliError::Config("grid_len must be at least 2".into()));
        }
        Ok(())
    }

    pub fn parsed_family(&self) -> Result<OutcomeFamily> {
        OutcomeFamily::from_str(&self.family).map_err(CliError::Core)
    }

    pub fn parsed_corr(&self) -> Result<CorrFamily> {
        CorrFamily::from_str(&self.corr_family).map_err(CliError::Core)
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>> {
        if self.methods.is_empty() {
            return Err(CliError::Config("methods must be nonempty".into()));
        }
        self.methods
            .iter()
            .map(|m| Method::from_str(m).map_err(CliError::Core))
            .collect()
    }

    /// Base fitting configuration; the sieve dimension is chosen per dataset.
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            tol_theta: self.tol_theta,
            max_outer: self.max_outer,
            ..FitConfig::default()
        }
    }

    /// Writes the fully resolved configuration next to the run's outputs.
    pub fn write_resolved(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join("resolved_config.json");
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Config(format!("serializing resolved config: {e}")))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::Io { path, source: e })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_without_a_file() {
        let cfg = RunConfig::resolve(&CommonArgs::default()).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.cv_folds, 5);
        assert_eq!(cfg.k_candidates, vec![6, 8, 10, 12]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"family": "poisson", "spline_order": 4}"#).unwrap();
        let args = CommonArgs { config: Some(path), ..CommonArgs::default() };
        let err = RunConfig::resolve(&args).unwrap_err();
        assert!(err.to_string().contains("spline_order"), "{err}");
    }

    #[test]
    fn flags_override_file_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"family": "poisson", "seed": 7, "level": 0.9}"#).unwrap();
        let args = CommonArgs {
            config: Some(path),
            seed: Some(11),
            methods: Some(vec!["all".into()]),
            ..CommonArgs::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.family, "poisson");
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.level, 0.9);
        assert_eq!(cfg.methods.len(), 4);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let args = CommonArgs { level: Some(1.5), ..CommonArgs::default() };
        assert!(RunConfig::resolve(&args).is_err());
        let args = CommonArgs { family: Some("gamma".into()), ..CommonArgs::default() };
        assert!(RunConfig::resolve(&args).is_err());
        let args = CommonArgs { methods: Some(vec!["wald".into()]), ..CommonArgs::default() };
        assert!(RunConfig::resolve(&args).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig { seed: 42, ..RunConfig::default() };
        cfg.write_resolved(dir.path()).unwrap();
        let text = fs::read_to_string(dir.path().join("resolved_config.json")).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
