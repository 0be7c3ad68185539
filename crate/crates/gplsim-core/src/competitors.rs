//! Baseline methods for the comparative studies: naive per-observation
//! empirical likelihood, GEE with Wald sandwich intervals, and the GEE
//! variant that replaces the spline sieve by a low-order polynomial.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bel::{self, ComponentSel, ElResult, EvalKind};
use crate::error::{Error, Result};
use crate::model::{IndexDirection, LongitudinalDataset, Theta};
use crate::profile::{self, BasisSpec, FitConfig, FitResult};
use crate::workcov::WorkingCovSpec;

/// Bread, meat and assembled sandwich covariance of an estimating-equation
/// estimator.
#[derive(Debug, Clone)]
pub struct SandwichCov {
    /// Bread `H_n`: empirical Jacobian of the mean score `n^-1 U(theta)`.
    pub h_n: DMatrix<f64>,
    /// Meat `S_n = n^-1 sum_i g_i g_i'`.
    pub s_n: DMatrix<f64>,
    /// Covariance `H_n^-1 S_n H_n^-T / n`, symmetrized, with a nonnegative
    /// diagonal.
    pub cov: DMatrix<f64>,
}

/// One Wald confidence interval on the reported component scale.
#[derive(Debug, Clone)]
pub struct WaldInterval {
    /// Component label (`beta1..betap`, `alpha1..alphaq`).
    pub component: String,
    pub estimate: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
}

/// GEE point estimates with sandwich covariance and Wald intervals.
#[derive(Debug, Clone)]
pub struct WaldResult {
    pub theta_hat: Theta,
    pub alpha_hat: IndexDirection,
    pub sandwich: SandwichCov,
    /// Intervals for `beta1..betap` then `alpha1..alphaq`.
    pub intervals: Vec<WaldInterval>,
    pub level: f64,
}

/// GEE fit with a polynomial link basis, plus Wald inference.
#[derive(Debug, Clone)]
pub struct PolyFit {
    pub theta_hat: Theta,
    pub alpha_hat: IndexDirection,
    /// Polynomial degree of the link basis.
    pub degree: usize,
    /// Monomial coefficients on the rescaled index, constant term first.
    pub gamma: DVector<f64>,
    /// Index range backing the rescale map.
    pub range: (f64, f64),
    pub rho_hat: f64,
    pub converged: bool,
    pub sandwich: SandwichCov,
    pub intervals: Vec<WaldInterval>,
    pub level: f64,
}

impl PolyFit {
    /// Fitted polynomial link at a raw index value (clamped to the fitted
    /// range, like the spline sieve).
    pub fn eta(&self, u: f64) -> f64 {
        let t = ((u - self.range.0) / (self.range.1 - self.range.0)).clamp(0.0, 1.0);
        let mut acc = 0.0;
        for &c in self.gamma.iter().rev() {
            acc = acc * t + c;
        }
        acc
    }
}

/// Per-observation empirical likelihood at `theta`: every observation is one
/// estimating unit `g_ij = (d mu_ij / d theta)' v(mu_ij)^-1 (y_ij - mu_ij)`
/// under independence weighting, regardless of `spec.corr_family`.
pub fn naive_el(
    dataset: &LongitudinalDataset,
    theta: &Theta,
    spec: &WorkingCovSpec,
    config: &FitConfig,
) -> Result<ElResult> {
    config.validate()?;
    if dataset.total_obs() < dataset.d() + 1 {
        return Err(Error::domain(format!(
            "need at least d + 1 = {} observations, got {}",
            dataset.d() + 1,
            dataset.total_obs()
        )));
    }
    let ev = bel::el_eval(dataset, theta.clone(), spec, config, EvalKind::PerObs, false, None)?;
    Ok(ev.el)
}

/// Normal quantile for a two-sided interval; 1.96 exactly at the 0.95 level.
fn z_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!("confidence level {level} outside (0, 1)")));
    }
    if (level - 0.95).abs() < 1e-12 {
        return Ok(1.96);
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(normal.inverse_cdf(0.5 * (1.0 + level)))
}

/// Sandwich covariance at an estimate: meat from the per-subject estimating
/// functions, bread from central differences of the mean score.
fn sandwich_at(
    dataset: &LongitudinalDataset,
    working: &WorkingCovSpec,
    config: &FitConfig,
    bspec: BasisSpec,
    theta: &Theta,
    g: &[DVector<f64>],
    warm: Option<&DVector<f64>>,
) -> Result<SandwichCov> {
    let n = dataset.n() as f64;
    let d = dataset.d();
    let p = dataset.p();
    let mut s_n = DMatrix::zeros(d, d);
    for &i in dataset.canonical_order() {
        s_n.ger(1.0 / n, &g[i], &g[i], 1.0);
    }

    // The score is already one derivative deep, so its evaluation noise is
    // larger than the mean's; a quartic-root step balances truncation
    // against that noise for the second-level difference.
    let center = theta.as_vector();
    let mut h_n = DMatrix::zeros(d, d);
    for c in 0..d {
        let mut h = f64::EPSILON.powf(0.25) * (1.0 + center[c].abs());
        let (up, um) = loop {
            let mut tp = center.clone();
            tp[c] += h;
            let mut tm = center.clone();
            tm[c] -= h;
            match (Theta::from_vector(&tp, p), Theta::from_vector(&tm, p)) {
                (Ok(a), Ok(b)) => break (a, b),
                _ => {
                    h *= 0.5;
                    if h < 1e-300 {
                        return Err(Error::numerical(
                            "could not displace theta inside the parameter space",
                        ));
                    }
                }
            }
        };
        let ep = profile::theta_eval(dataset, working, config, bspec, up, warm)?;
        let em = profile::theta_eval(dataset, working, config, bspec, um, warm)?;
        let col = (&ep.u - &em.u) / (2.0 * h * n);
        h_n.set_column(c, &col);
    }

    let sv = h_n.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > 1e12 {
        return Err(Error::SingularBread(cond));
    }
    let lu = h_n.clone().lu();
    let x = lu
        .solve(&s_n)
        .ok_or(Error::SingularBread(cond))?;
    let cov_t = lu
        .solve(&x.transpose())
        .ok_or(Error::SingularBread(cond))?;
    let mut cov = (cov_t.transpose() + cov_t) * (0.5 / n);
    for i in 0..d {
        if cov[(i, i)] < 0.0 {
            cov[(i, i)] = 0.0;
        }
    }
    Ok(SandwichCov { h_n, s_n, cov })
}

/// Wald intervals on the reporting scale, with the derived first index
/// coordinate handled by the delta method.
fn wald_intervals(
    theta: &Theta,
    alpha: &IndexDirection,
    cov: &DMatrix<f64>,
    z: f64,
) -> Vec<WaldInterval> {
    let p = theta.beta().len();
    let q = alpha.q();
    let mut out = Vec::with_capacity(p + q);
    for j in 0..p {
        let estimate = theta.beta()[j];
        let se = cov[(j, j)].max(0.0).sqrt();
        out.push(WaldInterval {
            component: ComponentSel::Beta(j).name(),
            estimate,
            se,
            lo: estimate - z * se,
            hi: estimate + z * se,
        });
    }
    for j in 0..q {
        let estimate = alpha.as_vector()[j];
        let se = if j == 0 {
            // alpha_1 = sqrt(1 - ||phi||^2): gradient -phi / alpha_1.
            let a1 = alpha.as_vector()[0];
            let grad = -theta.phi() / a1;
            let covpp = cov.view((p, p), (q - 1, q - 1));
            (grad.transpose() * covpp * &grad)[(0, 0)].max(0.0).sqrt()
        } else {
            cov[(p + j - 1, p + j - 1)].max(0.0).sqrt()
        };
        out.push(WaldInterval {
            component: ComponentSel::Alpha(j).name(),
            estimate,
            se,
            lo: estimate - z * se,
            hi: estimate + z * se,
        });
    }
    out
}

/// GEE estimate with sandwich covariance and per-component Wald intervals.
/// The point estimate is the profile fit itself under the same `spec` and
/// `config`.
pub fn gee_wald(
    dataset: &LongitudinalDataset,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    level: f64,
) -> Result<WaldResult> {
    let fit = profile::fit(dataset, spec, config, None)?;
    gee_wald_from_fit(dataset, &fit, config, level)
}

/// Wald inference at an existing fit, avoiding the refit when the caller
/// already has one.
pub fn gee_wald_from_fit(
    dataset: &LongitudinalDataset,
    fit: &FitResult,
    config: &FitConfig,
    level: f64,
) -> Result<WaldResult> {
    config.validate()?;
    let z = z_quantile(level)?;
    if !fit.converged {
        return Err(Error::NonConvergence(
            "Wald inference requires a converged fit".into(),
        ));
    }
    let sandwich = sandwich_at(
        dataset,
        &fit.working,
        config,
        BasisSpec::Spline { k: fit.sieve_hat.k() },
        &fit.theta_hat,
        &fit.per_subject_g,
        Some(fit.sieve_hat.gamma()),
    )?;
    let intervals = wald_intervals(&fit.theta_hat, &fit.alpha_hat, &sandwich.cov, z);
    Ok(WaldResult {
        theta_hat: fit.theta_hat.clone(),
        alpha_hat: fit.alpha_hat.clone(),
        sandwich,
        intervals,
        level,
    })
}

/// GEE with the spline sieve replaced by monomials `{1, t, .., t^degree}` on
/// the rescaled index, run through the identical profile machinery, with
/// Wald inference as in [`gee_wald`].
pub fn gee_poly(
    dataset: &LongitudinalDataset,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    degree: usize,
    level: f64,
) -> Result<PolyFit> {
    config.validate()?;
    if degree < 1 {
        return Err(Error::config("polynomial degree must be at least 1"));
    }
    let z = z_quantile(level)?;
    let core = profile::fit_with_basis(dataset, spec, config, None, BasisSpec::Poly { degree })?;
    if !core.converged {
        return Err(Error::NonConvergence(
            "polynomial GEE did not converge".into(),
        ));
    }
    let sandwich = sandwich_at(
        dataset,
        &core.working,
        config,
        BasisSpec::Poly { degree },
        core.theta(),
        &core.eval.g,
        Some(core.eval.basis.gamma()),
    )?;
    let theta_hat = core.theta().clone();
    let alpha_hat = theta_hat.alpha();
    let intervals = wald_intervals(&theta_hat, &alpha_hat, &sandwich.cov, z);
    Ok(PolyFit {
        theta_hat,
        alpha_hat,
        degree,
        gamma: core.eval.basis.gamma().clone(),
        range: core.eval.basis.range(),
        rho_hat: core.working.rho,
        converged: core.converged,
        sandwich,
        intervals,
        level,
    })
}
