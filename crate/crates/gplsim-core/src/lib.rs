//! Profile estimation and block empirical likelihood (BEL) inference for
//! generalized partially linear single-index models (GPLSIM) with
//! longitudinal data.
//!
//! The model for subject `i` at visit `j` is
//!
//! ```text
//! g(mu_ij) = x_ij' beta + eta(z_ij' alpha),   ||alpha|| = 1, alpha_1 > 0,
//! ```
//!
//! with an unknown smooth link `eta` approximated by a cubic B-spline sieve.
//! Estimation profiles the spline coefficients (and optionally a working
//! correlation parameter) out of a GEE-type estimating equation for
//! `theta = (beta, phi)`, where `alpha = (sqrt(1 - ||phi||^2), phi')'`.
//! Inference on `theta` uses empirical likelihood built on per-subject
//! estimating functions; inference on `eta` uses a cluster bootstrap.
//!
//! Module map:
//! - [`model`]: data containers, index parameterization, outcome families
//! - [`splines`]: cubic B-spline sieve and dimension selection
//! - [`workcov`]: working correlation/covariance and moment updates
//! - [`profile`]: the profile fitting algorithm and estimating functions
//! - [`bel`]: empirical likelihood solver, statistic and profile intervals
//! - [`competitors`]: Naive-EL, GEE-Wald and GEE-Poly baselines
//! - [`bootstrap`]: cluster bootstrap bands for the link function
//! - [`sim`]: simulation designs, metrics and the replication driver

pub mod bel;
pub mod bootstrap;
pub mod competitors;
pub mod error;
pub mod model;
pub mod profile;
pub mod sim;
pub mod splines;
pub mod workcov;

pub use bel::{CiMethod, ComponentSel, ElResult, ProfileCi};
pub use bootstrap::BandResult;
pub use competitors::{PolyFit, SandwichCov, WaldInterval, WaldResult};
pub use error::{Error, Result};
pub use model::{IndexDirection, LongitudinalDataset, OutcomeFamily, SubjectBlock, Theta};
pub use profile::{FitConfig, FitResult};
pub use sim::{Method, MetricRow, MetricsTable, Replication, SimDesign, StudyConfig};
pub use splines::SplineSieve;
pub use workcov::{CorrFamily, WorkingCovSpec};

use std::sync::OnceLock;

static THREAD_POOL_INIT: OnceLock<()> = OnceLock::new();

/// Initializes the global worker pool, honoring the `GPLSIM_THREADS`
/// environment variable when set. Safe to call more than once; only the
/// first call has an effect.
pub fn init_threads() {
    THREAD_POOL_INIT.get_or_init(|| {
        if let Ok(v) = std::env::var("GPLSIM_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Ignore the error: another pool may already be installed.
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}
