//! Data model, index-direction parameterization and outcome families.
//!
//! Data are stored blockwise per subject because every estimator in this
//! crate loops over subjects. The index direction `alpha` lives on the unit
//! sphere with a positive first coordinate and is parameterized by the free
//! vector `phi` through `alpha = (sqrt(1 - ||phi||^2), phi')'`, which keeps
//! the identifiability constraint satisfied at every optimizer step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::splines::SplineSieve;

/// Lower clamp for Bernoulli means (upper clamp is `1 - MEAN_CLAMP`) and for
/// Poisson means, applied before variance functions and deviances.
pub const MEAN_CLAMP: f64 = 1e-10;

/// Repeated measurements for one subject.
#[derive(Debug, Clone)]
pub struct SubjectBlock {
    /// Opaque subject label (unique within a dataset).
    pub id: String,
    /// Response vector of length `m_i`.
    pub y: DVector<f64>,
    /// Linear covariates, `m_i x p`.
    pub x: DMatrix<f64>,
    /// Index covariates, `m_i x q`.
    pub z: DMatrix<f64>,
}

impl SubjectBlock {
    /// Number of observations for this subject.
    pub fn m(&self) -> usize {
        self.y.len()
    }
}

/// A longitudinal dataset: independent subjects with possibly different
/// cluster sizes but identical covariate dimensions.
#[derive(Debug, Clone)]
pub struct LongitudinalDataset {
    subjects: Vec<SubjectBlock>,
    p: usize,
    q: usize,
    /// Subject indices sorted by identifier; all internal reductions run in
    /// this order so results do not depend on storage order.
    canonical: Vec<usize>,
}

impl LongitudinalDataset {
    /// Validates block shapes and identifiers and assembles a dataset.
    pub fn new(subjects: Vec<SubjectBlock>) -> Result<Self> {
        if subjects.len() < 2 {
            return Err(Error::domain("need at least 2 subjects"));
        }
        let p = subjects[0].x.ncols();
        let q = subjects[0].z.ncols();
        if q < 2 {
            return Err(Error::domain("need at least 2 index covariates (q >= 2)"));
        }
        let mut ids: Vec<&str> = Vec::with_capacity(subjects.len());
        for s in &subjects {
            let m = s.m();
            if m < 1 {
                return Err(Error::domain(format!("subject {} has no observations", s.id)));
            }
            if s.x.nrows() != m || s.z.nrows() != m {
                return Err(Error::domain(format!(
                    "subject {}: covariate rows do not match response length {m}",
                    s.id
                )));
            }
            if s.x.ncols() != p || s.z.ncols() != q {
                return Err(Error::domain(format!(
                    "subject {}: covariate columns differ from first subject ({p}, {q})",
                    s.id
                )));
            }
            ids.push(&s.id);
        }
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::domain("subject identifiers must be unique"));
        }
        let mut canonical: Vec<usize> = (0..subjects.len()).collect();
        canonical.sort_unstable_by(|&a, &b| subjects[a].id.cmp(&subjects[b].id));
        Ok(LongitudinalDataset { subjects, p, q, canonical })
    }

    /// Subject blocks in input order.
    pub fn subjects(&self) -> &[SubjectBlock] {
        &self.subjects
    }

    /// Subject indices in identifier order, the canonical reduction order.
    pub(crate) fn canonical_order(&self) -> &[usize] {
        &self.canonical
    }

    /// Number of subjects `n`.
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Number of linear covariates `p`.
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of index covariates `q`.
    pub fn q(&self) -> usize {
        self.q
    }

    /// Dimension of the profiled parameter, `d = p + q - 1`.
    pub fn d(&self) -> usize {
        self.p + self.q - 1
    }

    /// Total number of observations across subjects.
    pub fn total_obs(&self) -> usize {
        self.subjects.iter().map(|s| s.m()).sum()
    }

    /// Largest cluster size.
    pub fn max_m(&self) -> usize {
        self.subjects.iter().map(|s| s.m()).max().unwrap_or(0)
    }

    /// Checks the response range required by `family` (0/1 for Bernoulli,
    /// nonnegative integers for Poisson).
    pub fn validate_for_family(&self, family: OutcomeFamily) -> Result<()> {
        for s in &self.subjects {
            for &y in s.y.iter() {
                match family {
                    OutcomeFamily::Gaussian => {}
                    OutcomeFamily::Bernoulli => {
                        if y != 0.0 && y != 1.0 {
                            return Err(Error::domain(format!(
                                "subject {}: Bernoulli response {y} is not 0/1",
                                s.id
                            )));
                        }
                    }
                    OutcomeFamily::Poisson => {
                        if y < 0.0 || y.fract() != 0.0 {
                            return Err(Error::domain(format!(
                                "subject {}: Poisson response {y} is not a nonnegative integer",
                                s.id
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Finite-dimensional parameter `theta = (beta, phi)` with `||phi|| < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    beta: DVector<f64>,
    phi: DVector<f64>,
}

impl Theta {
    /// Builds a parameter value, rejecting `||phi|| >= 1`.
    pub fn new(beta: DVector<f64>, phi: DVector<f64>) -> Result<Self> {
        if phi.norm() >= 1.0 {
            return Err(Error::domain(format!(
                "||phi|| = {:.6} must be strictly below 1",
                phi.norm()
            )));
        }
        Ok(Theta { beta, phi })
    }

    /// Reassembles a parameter from its stacked vector form `(beta', phi')'`.
    pub fn from_vector(v: &DVector<f64>, p: usize) -> Result<Self> {
        if v.len() < p {
            return Err(Error::domain("stacked parameter shorter than p"));
        }
        Theta::new(v.rows(0, p).into_owned(), v.rows(p, v.len() - p).into_owned())
    }

    /// Linear coefficients `beta`.
    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    /// Free index parameters `phi`.
    pub fn phi(&self) -> &DVector<f64> {
        &self.phi
    }

    /// Dimension `d = p + q - 1`.
    pub fn d(&self) -> usize {
        self.beta.len() + self.phi.len()
    }

    /// Stacked vector `(beta', phi')'`.
    pub fn as_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.d());
        v.rows_mut(0, self.beta.len()).copy_from(&self.beta);
        v.rows_mut(self.beta.len(), self.phi.len()).copy_from(&self.phi);
        v
    }

    /// Unit-norm index direction implied by `phi`.
    pub fn alpha(&self) -> IndexDirection {
        alpha_from_phi(&self.phi).expect("||phi|| < 1 is a construction invariant")
    }
}

/// Unit-norm index direction with positive first coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexDirection {
    alpha: DVector<f64>,
}

impl IndexDirection {
    /// The direction vector.
    pub fn as_vector(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Length `q` of the direction.
    pub fn q(&self) -> usize {
        self.alpha.len()
    }
}

/// Maps the free parameter `phi` to the constrained direction
/// `alpha = (sqrt(1 - ||phi||^2), phi')'`.
pub fn alpha_from_phi(phi: &DVector<f64>) -> Result<IndexDirection> {
    let norm_sq = phi.norm_squared();
    if norm_sq >= 1.0 {
        return Err(Error::domain(format!(
            "||phi||^2 = {norm_sq:.6} must be strictly below 1"
        )));
    }
    let mut alpha = DVector::zeros(phi.len() + 1);
    alpha[0] = (1.0 - norm_sq).sqrt();
    alpha.rows_mut(1, phi.len()).copy_from(phi);
    Ok(IndexDirection { alpha })
}

/// Inverse of [`alpha_from_phi`]: drops the first coordinate of a unit vector
/// whose first coordinate is positive.
pub fn phi_from_alpha(alpha: &DVector<f64>) -> Result<DVector<f64>> {
    if (alpha.norm() - 1.0).abs() > 1e-8 {
        return Err(Error::domain(format!(
            "||alpha|| = {:.10} is not 1 within 1e-8",
            alpha.norm()
        )));
    }
    if alpha[0] <= 0.0 {
        return Err(Error::domain("alpha must have a positive first coordinate"));
    }
    Ok(alpha.rows(1, alpha.len() - 1).into_owned())
}

/// Outcome family: link, inverse link, mean derivative, variance function and
/// unit deviance for the three supported models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeFamily {
    /// Identity link, `v(mu) = 1`.
    Gaussian,
    /// Logit link, `v(mu) = mu (1 - mu)`.
    Bernoulli,
    /// Log link, `v(mu) = mu`.
    Poisson,
}

impl OutcomeFamily {
    /// Link function `g(mu)`.
    pub fn link(self, mu: f64) -> f64 {
        match self {
            OutcomeFamily::Gaussian => mu,
            OutcomeFamily::Bernoulli => (mu / (1.0 - mu)).ln(),
            OutcomeFamily::Poisson => mu.ln(),
        }
    }

    /// Inverse link `g^{-1}(xi)`, clamped into the valid mean range.
    pub fn inv_link(self, xi: f64) -> f64 {
        match self {
            OutcomeFamily::Gaussian => xi,
            OutcomeFamily::Bernoulli => {
                // Numerically stable logistic.
                let mu = if xi >= 0.0 {
                    1.0 / (1.0 + (-xi).exp())
                } else {
                    let e = xi.exp();
                    e / (1.0 + e)
                };
                self.clamp_mean(mu)
            }
            OutcomeFamily::Poisson => self.clamp_mean(xi.exp()),
        }
    }

    /// Mean derivative `d mu / d xi` evaluated at the linear predictor `xi`.
    pub fn mean_deriv(self, xi: f64) -> f64 {
        match self {
            OutcomeFamily::Gaussian => 1.0,
            OutcomeFamily::Bernoulli => {
                let mu = self.inv_link(xi);
                mu * (1.0 - mu)
            }
            OutcomeFamily::Poisson => self.inv_link(xi),
        }
    }

    /// Variance function `v(mu)`.
    pub fn variance(self, mu: f64) -> f64 {
        match self {
            OutcomeFamily::Gaussian => 1.0,
            OutcomeFamily::Bernoulli => {
                let mu = self.clamp_mean(mu);
                mu * (1.0 - mu)
            }
            OutcomeFamily::Poisson => self.clamp_mean(mu),
        }
    }

    /// Clamps a mean into the family's valid range so that variance functions
    /// and Pearson residuals stay bounded away from zero.
    pub fn clamp_mean(self, mu: f64) -> f64 {
        match self {
            OutcomeFamily::Gaussian => mu,
            OutcomeFamily::Bernoulli => mu.clamp(MEAN_CLAMP, 1.0 - MEAN_CLAMP),
            OutcomeFamily::Poisson => mu.max(MEAN_CLAMP),
        }
    }

    /// Parser-facing family name.
    pub fn name(self) -> &'static str {
        match self {
            OutcomeFamily::Gaussian => "gaussian",
            OutcomeFamily::Bernoulli => "bernoulli",
            OutcomeFamily::Poisson => "poisson",
        }
    }
}

impl std::str::FromStr for OutcomeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(OutcomeFamily::Gaussian),
            "bernoulli" | "binomial" => Ok(OutcomeFamily::Bernoulli),
            "poisson" => Ok(OutcomeFamily::Poisson),
            other => Err(Error::config(format!("unknown family '{other}'"))),
        }
    }
}

/// Unit deviance contribution of one observation.
///
/// Gaussian: `(y - mu)^2`; Poisson: `2 [y log(y/mu) - (y - mu)]` with the
/// `y = 0` limit `2 mu`; Bernoulli: `-2 [y log mu + (1 - y) log(1 - mu)]`.
pub fn unit_deviance(family: OutcomeFamily, y: f64, mu: f64) -> Result<f64> {
    match family {
        OutcomeFamily::Gaussian => Ok((y - mu).powi(2)),
        OutcomeFamily::Poisson => {
            if mu <= 0.0 {
                return Err(Error::domain(format!("Poisson mean {mu} must be positive")));
            }
            if y == 0.0 {
                Ok(2.0 * mu)
            } else {
                Ok(2.0 * (y * (y / mu).ln() - (y - mu)))
            }
        }
        OutcomeFamily::Bernoulli => {
            if mu <= 0.0 || mu >= 1.0 {
                return Err(Error::domain(format!("Bernoulli mean {mu} must lie in (0, 1)")));
            }
            Ok(-2.0 * (y * mu.ln() + (1.0 - y) * (1.0 - mu).ln()))
        }
    }
}

/// Linear predictor `xi_i = X_i beta + B_i(theta) gamma` for one subject.
pub fn linear_predictor(block: &SubjectBlock, theta: &Theta, sieve: &SplineSieve) -> DVector<f64> {
    let alpha = theta.alpha();
    let mut xi = &block.x * theta.beta();
    for j in 0..block.m() {
        let u = block.z.row(j).transpose().dot(alpha.as_vector());
        xi[j] += sieve.basis_row(u).dot(sieve.gamma());
    }
    xi
}
