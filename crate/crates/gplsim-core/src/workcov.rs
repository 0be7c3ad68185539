//! Working correlation families and per-subject working covariances.
//!
//! A [`WorkingCovSpec`] bundles the correlation family, its parameter `rho`,
//! the outcome family and a dispersion multiplier. Subject covariances are
//! assembled as `V = dispersion * A^{1/2} R(rho) A^{1/2}` with `A = diag(v(mu))`,
//! and `rho` is re-estimated from Pearson residuals by method of moments.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::OutcomeFamily;

/// Margin keeping `rho` strictly inside the positive-definite range.
pub const RHO_MARGIN: f64 = 1e-6;

/// Cholesky factor of a dense symmetric positive-definite matrix.
pub type SpdFactor = Cholesky<f64, Dyn>;

/// Working correlation structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CorrFamily {
    Independence,
    Exchangeable,
    Ar1,
}

impl CorrFamily {
    /// Canonical lowercase name used in outputs and configuration files.
    pub fn name(self) -> &'static str {
        match self {
            CorrFamily::Independence => "independence",
            CorrFamily::Exchangeable => "exchangeable",
            CorrFamily::Ar1 => "ar1",
        }
    }

    /// Valid open range for `rho` given the largest cluster size, shrunk by
    /// [`RHO_MARGIN`] on both sides.
    pub fn rho_bounds(self, m_max: usize) -> (f64, f64) {
        match self {
            CorrFamily::Independence => (0.0, 0.0),
            CorrFamily::Exchangeable => {
                let m = m_max.max(2) as f64;
                (-1.0 / (m - 1.0) + RHO_MARGIN, 1.0 - RHO_MARGIN)
            }
            CorrFamily::Ar1 => (-1.0 + RHO_MARGIN, 1.0 - RHO_MARGIN),
        }
    }
}

impl std::str::FromStr for CorrFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independence" | "ind" => Ok(CorrFamily::Independence),
            "exchangeable" | "exc" | "exch" => Ok(CorrFamily::Exchangeable),
            "ar1" | "ar(1)" => Ok(CorrFamily::Ar1),
            other => Err(Error::config(format!("unknown working correlation '{other}'"))),
        }
    }
}

/// Working covariance specification for one fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorkingCovSpec {
    pub corr_family: CorrFamily,
    pub rho: f64,
    pub family: OutcomeFamily,
    pub dispersion: f64,
}

impl WorkingCovSpec {
    /// Builds a specification with `rho = 0` and unit dispersion.
    pub fn new(corr_family: CorrFamily, family: OutcomeFamily) -> Self {
        WorkingCovSpec { corr_family, rho: 0.0, family, dispersion: 1.0 }
    }

    /// Independence working covariance for `family`.
    pub fn independence(family: OutcomeFamily) -> Self {
        Self::new(CorrFamily::Independence, family)
    }

    /// Exchangeable working covariance starting at `rho = 0`.
    pub fn exchangeable(family: OutcomeFamily) -> Self {
        Self::new(CorrFamily::Exchangeable, family)
    }

    /// AR(1) working covariance starting at `rho = 0`.
    pub fn ar1(family: OutcomeFamily) -> Self {
        Self::new(CorrFamily::Ar1, family)
    }

    /// Copy of `self` with a new correlation parameter. Independence pins
    /// `rho` at zero.
    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = if self.corr_family == CorrFamily::Independence { 0.0 } else { rho };
        self
    }

    /// Copy of `self` with a new dispersion multiplier.
    pub fn with_dispersion(mut self, dispersion: f64) -> Self {
        self.dispersion = dispersion;
        self
    }
}

/// Working correlation matrix for a cluster of size `m`.
pub fn correlation_matrix(spec: &WorkingCovSpec, m: usize) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(Error::domain("cluster size must be at least 1"));
    }
    if m >= 2 && spec.corr_family != CorrFamily::Independence {
        let (lo, hi) = spec.corr_family.rho_bounds(m);
        if !(spec.rho >= lo && spec.rho <= hi) {
            return Err(Error::domain(format!(
                "rho = {} outside the {} range [{lo:.7}, {hi:.7}] for clusters of size {m}",
                spec.rho,
                spec.corr_family.name()
            )));
        }
    }
    let mut r = DMatrix::identity(m, m);
    match spec.corr_family {
        CorrFamily::Independence => {}
        CorrFamily::Exchangeable => {
            for j in 0..m {
                for k in 0..m {
                    if j != k {
                        r[(j, k)] = spec.rho;
                    }
                }
            }
        }
        CorrFamily::Ar1 => {
            for j in 0..m {
                for k in 0..m {
                    r[(j, k)] = spec.rho.powi((j as i32 - k as i32).abs());
                }
            }
        }
    }
    Ok(r)
}

/// Assembles the working covariance `V = dispersion * A^{1/2} R A^{1/2}` for
/// one subject and factors it.
pub fn assemble_v(spec: &WorkingCovSpec, mu: &DVector<f64>) -> Result<(DMatrix<f64>, SpdFactor)> {
    let m = mu.len();
    let mut v = correlation_matrix(spec, m)?;
    let sd: Vec<f64> = mu
        .iter()
        .map(|&mu_ij| (spec.dispersion * spec.family.variance(spec.family.clamp_mean(mu_ij))).sqrt())
        .collect();
    for j in 0..m {
        for k in 0..m {
            v[(j, k)] *= sd[j] * sd[k];
        }
    }
    let chol = Cholesky::new(v.clone())
        .ok_or_else(|| Error::numerical("working covariance is not positive definite"))?;
    Ok((v, chol))
}

/// Method-of-moments update of `rho` from Pearson residual blocks.
///
/// `df_correction` is subtracted from the pair-count denominators (and from
/// the observation count in the dispersion normalizer). Degenerate
/// denominators leave `rho` unchanged; the estimate is clipped into the
/// positive-definite range for the largest observed cluster.
pub fn update_rho(spec: &WorkingCovSpec, residuals: &[DVector<f64>], df_correction: f64) -> f64 {
    if spec.corr_family == CorrFamily::Independence {
        return 0.0;
    }
    let total_obs: usize = residuals.iter().map(|e| e.len()).sum();
    let m_max = residuals.iter().map(|e| e.len()).max().unwrap_or(0);
    if m_max < 2 {
        return spec.rho;
    }
    let ss: f64 = residuals.iter().map(|e| e.norm_squared()).sum();
    let sigma2 = ss / (total_obs as f64 - df_correction);
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return spec.rho;
    }
    let (num, count) = match spec.corr_family {
        CorrFamily::Independence => unreachable!(),
        CorrFamily::Exchangeable => {
            let mut num = 0.0;
            let mut pairs = 0.0;
            for e in residuals {
                let m = e.len();
                for j in 0..m {
                    for k in (j + 1)..m {
                        num += e[j] * e[k];
                    }
                }
                pairs += (m * (m - 1)) as f64 / 2.0;
            }
            (num, pairs)
        }
        CorrFamily::Ar1 => {
            let mut num = 0.0;
            let mut lags = 0.0;
            for e in residuals {
                for j in 0..e.len().saturating_sub(1) {
                    num += e[j] * e[j + 1];
                }
                lags += (e.len() - 1) as f64;
            }
            (num, lags)
        }
    };
    let denom = (count - df_correction) * sigma2;
    if !(denom > 0.0) || !denom.is_finite() {
        return spec.rho;
    }
    let (lo, hi) = spec.corr_family.rho_bounds(m_max);
    (num / denom).clamp(lo, hi)
}

/// Pearson-residual dispersion estimate `sum(e^2) / (N - df_correction)`.
pub fn pearson_dispersion(residuals: &[DVector<f64>], df_correction: f64) -> Option<f64> {
    let total_obs: usize = residuals.iter().map(|e| e.len()).sum();
    let denom = total_obs as f64 - df_correction;
    if denom <= 0.0 {
        return None;
    }
    let ss: f64 = residuals.iter().map(|e| e.norm_squared()).sum();
    Some(ss / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn ar1_zero_rho_is_identity() {
        let spec = WorkingCovSpec::ar1(OutcomeFamily::Gaussian);
        for m in 1..=6 {
            let r = correlation_matrix(&spec, m).unwrap();
            assert_abs_diff_eq!((r - DMatrix::<f64>::identity(m, m)).norm(), 0.0);
        }
    }

    #[test]
    fn ar1_powers_match_hand_matrix() {
        let spec = WorkingCovSpec::ar1(OutcomeFamily::Gaussian).with_rho(0.6);
        let r = correlation_matrix(&spec, 3).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[1.0, 0.6, 0.36, 0.6, 1.0, 0.6, 0.36, 0.6, 1.0]);
        assert_abs_diff_eq!((r - want).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn exchangeable_two_by_two_determinant() {
        let spec = WorkingCovSpec::exchangeable(OutcomeFamily::Gaussian).with_rho(0.5);
        let r = correlation_matrix(&spec, 2).unwrap();
        assert_abs_diff_eq!(r.determinant(), 0.75, epsilon = 1e-14);
    }

    #[test]
    fn out_of_range_rho_is_rejected() {
        let spec = WorkingCovSpec::ar1(OutcomeFamily::Gaussian).with_rho(1.0);
        assert!(matches!(correlation_matrix(&spec, 2), Err(Error::Domain(_))));
        // Exchangeable lower bound tightens with cluster size: -1/(m-1).
        let spec = WorkingCovSpec::exchangeable(OutcomeFamily::Gaussian).with_rho(-0.3);
        assert!(correlation_matrix(&spec, 3).is_ok());
        assert!(matches!(correlation_matrix(&spec, 5), Err(Error::Domain(_))));
    }

    #[test]
    fn correlation_is_symmetric_with_unit_diagonal() {
        for family in [CorrFamily::Exchangeable, CorrFamily::Ar1] {
            for &rho in &[-0.2, 0.0, 0.35, 0.9] {
                let spec = WorkingCovSpec { corr_family: family, rho, family: OutcomeFamily::Gaussian, dispersion: 1.0 };
                let r = correlation_matrix(&spec, 5).unwrap();
                assert_abs_diff_eq!((&r - r.transpose()).norm(), 0.0);
                for j in 0..5 {
                    assert_abs_diff_eq!(r[(j, j)], 1.0);
                }
                assert!(Cholesky::new(r).is_some());
            }
        }
    }

    #[test]
    fn assemble_v_trivial_cases() {
        let spec = WorkingCovSpec::independence(OutcomeFamily::Gaussian);
        let (v, _) = assemble_v(&spec, &DVector::from_column_slice(&[0.3, -2.0, 11.0])).unwrap();
        assert_abs_diff_eq!((v - DMatrix::<f64>::identity(3, 3)).norm(), 0.0);

        let spec = WorkingCovSpec::independence(OutcomeFamily::Poisson);
        let (v, _) = assemble_v(&spec, &DVector::from_column_slice(&[2.0, 5.0])).unwrap();
        assert_abs_diff_eq!((v - DMatrix::from_partial_diagonal(2, 2, &[2.0, 5.0])).norm(), 0.0, epsilon = 1e-14);

        let spec = WorkingCovSpec::ar1(OutcomeFamily::Bernoulli).with_rho(0.3);
        let (v, _) = assemble_v(&spec, &DVector::from_column_slice(&[0.5, 0.5])).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.25, 0.075, 0.075, 0.25]);
        assert_abs_diff_eq!((v - want).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn independence_solve_matches_elementwise_division() {
        let spec = WorkingCovSpec::independence(OutcomeFamily::Poisson).with_dispersion(1.7);
        let mu = DVector::from_column_slice(&[0.4, 2.2, 7.0, 1.1]);
        let (v, chol) = assemble_v(&spec, &mu).unwrap();
        let b = DVector::from_column_slice(&[1.0, -2.0, 0.5, 3.0]);
        let dense = chol.solve(&b);
        for j in 0..4 {
            assert_abs_diff_eq!(dense[j], b[j] / v[(j, j)], epsilon = 1e-12);
        }
    }

    #[test]
    fn update_rho_degenerate_and_symmetric_cases() {
        let spec = WorkingCovSpec::ar1(OutcomeFamily::Gaussian);
        let zeros = vec![DVector::zeros(3), DVector::zeros(4)];
        assert_abs_diff_eq!(update_rho(&spec, &zeros, 0.0), 0.0);

        let pairs = vec![
            DVector::from_column_slice(&[1.0, 1.0]),
            DVector::from_column_slice(&[1.0, -1.0]),
        ];
        assert_abs_diff_eq!(update_rho(&spec, &pairs, 0.0), 0.0);

        // Independence always reports zero.
        let ind = WorkingCovSpec::independence(OutcomeFamily::Gaussian).with_rho(0.4);
        assert_abs_diff_eq!(update_rho(&ind, &pairs, 0.0), 0.0);
    }

    #[test]
    fn update_rho_recovers_ar1_from_synthetic_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rho = 0.5;
        let innovation = (1.0f64 - rho * rho).sqrt();
        let mut blocks = Vec::with_capacity(2000);
        for _ in 0..2000 {
            let mut e = DVector::zeros(5);
            e[0] = StandardNormal.sample(&mut rng);
            for j in 1..5 {
                let z: f64 = StandardNormal.sample(&mut rng);
                e[j] = rho * e[j - 1] + innovation * z;
            }
            blocks.push(e);
        }
        let spec = WorkingCovSpec::ar1(OutcomeFamily::Gaussian);
        let rho_hat = update_rho(&spec, &blocks, 0.0);
        assert!((0.45..=0.55).contains(&rho_hat), "rho_hat = {rho_hat}");

        // The estimate is invariant to subject order and global sign flips.
        let mut reversed: Vec<DVector<f64>> = blocks.iter().rev().cloned().collect();
        assert_abs_diff_eq!(update_rho(&spec, &reversed, 0.0), rho_hat, epsilon = 1e-15);
        for e in &mut reversed {
            *e = -e.clone();
        }
        assert_abs_diff_eq!(update_rho(&spec, &reversed, 0.0), rho_hat, epsilon = 1e-15);
    }

    #[test]
    fn update_rho_scale_invariance_via_dispersion_normalizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut blocks = Vec::with_capacity(500);
        for _ in 0..500 {
            let mut e = DVector::zeros(4);
            for j in 0..4 {
                e[j] = StandardNormal.sample(&mut rng);
            }
            blocks.push(e);
        }
        let scaled: Vec<DVector<f64>> = blocks.iter().map(|e| e * 3.0).collect();
        for corr in [CorrFamily::Exchangeable, CorrFamily::Ar1] {
            let spec = WorkingCovSpec { corr_family: corr, rho: 0.0, family: OutcomeFamily::Gaussian, dispersion: 1.0 };
            let base = update_rho(&spec, &blocks, 0.0);
            let tripled = update_rho(&spec, &scaled, 0.0);
            assert_abs_diff_eq!(base, tripled, epsilon = 1e-12);
        }
    }
}
