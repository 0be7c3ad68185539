//! Profile estimation: inner IRLS for the sieve coefficients, moment updates
//! for the working correlation, and a damped Gauss-Newton outer loop on the
//! profiled estimating equations.
//!
//! The profiled mean at a candidate `theta` re-fits the sieve coefficients
//! `gamma` (and optionally `rho`), so the per-subject Jacobians `G_i` computed
//! here by central finite differences carry the full indirect dependence of
//! the mean on `theta` through the nuisance fit.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{IndexDirection, LongitudinalDataset, OutcomeFamily, SubjectBlock, Theta};
use crate::splines::{self, SplineSieve};
use crate::workcov::{self, CorrFamily, SpdFactor, WorkingCovSpec};

/// Largest allowed `||phi||` after the projection step of the outer loop.
pub const PHI_MAX: f64 = 1.0 - 1e-6;

/// Absolute per-subject score threshold below which the outer loop stops
/// immediately (scaled by `n`).
const SCORE_EXIT: f64 = 1e-10;

/// Scaled score threshold defining the `converged` flag (scaled by `n`).
const SCORE_CONVERGED: f64 = 1e-4;

/// Solver configuration shared by the estimator and everything built on it.
#[derive(Debug, Clone)]
pub struct FitConfig {
    /// Outer iteration cap.
    pub max_outer: usize,
    /// Inner IRLS iteration cap.
    pub max_inner: usize,
    /// Relative step-norm tolerance for the outer loop.
    pub tol_theta: f64,
    /// Scaled sup-norm tolerance for the inner score.
    pub tol_gamma: f64,
    /// Backtracking factor for the outer line search.
    pub damping: f64,
    /// Maximum number of backtracking halvings per outer step.
    pub max_halvings: usize,
    /// Whether the working correlation parameter is re-estimated.
    pub update_rho: bool,
    /// Sieve dimension used by [`fit`]; pick it with `splines::select_k`.
    pub k: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            max_outer: 100,
            max_inner: 50,
            tol_theta: 1e-6,
            tol_gamma: 1e-8,
            damping: 0.5,
            max_halvings: 20,
            update_rho: true,
            k: 8,
        }
    }
}

impl FitConfig {
    /// Validates tolerances, counts and the sieve dimension.
    pub fn validate(&self) -> Result<()> {
        if self.max_outer < 1 || self.max_inner < 1 {
            return Err(Error::config("iteration caps must be at least 1"));
        }
        if !(self.tol_theta > 0.0) || !(self.tol_gamma > 0.0) {
            return Err(Error::config("tolerances must be positive"));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::config("damping factor must lie in (0, 1)"));
        }
        if self.k < splines::ORDER {
            return Err(Error::config(format!(
                "sieve dimension {} below the cubic minimum {}",
                self.k,
                splines::ORDER
            )));
        }
        Ok(())
    }

    /// Finite-difference step for coordinate value `x`:
    /// `cbrt(machine eps) * (1 + |x|)`.
    pub fn fd_step(x: f64) -> f64 {
        f64::EPSILON.cbrt() * (1.0 + x.abs())
    }
}

/// Which single-index basis the engine runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BasisSpec {
    Spline { k: usize },
    Poly { degree: usize },
}

/// Monomial basis `{1, t, .., t^degree}` on the rescaled index, used by the
/// polynomial competitor.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PolyBasis {
    pub degree: usize,
    pub lo: f64,
    pub hi: f64,
    pub gamma: DVector<f64>,
}

impl PolyBasis {
    fn rescale(&self, u: f64) -> f64 {
        ((u - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    fn fill_row(&self, u: f64, out: &mut [f64]) {
        let t = self.rescale(u);
        let mut pow = 1.0;
        for slot in out.iter_mut() {
            *slot = pow;
            pow *= t;
        }
    }
}

/// Either basis behind one interface so the whole engine is generic over it.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Basis {
    Spline(SplineSieve),
    Poly(PolyBasis),
}

impl Basis {
    pub fn build(spec: BasisSpec, lo: f64, hi: f64) -> Result<Basis> {
        match spec {
            BasisSpec::Spline { k } => Ok(Basis::Spline(SplineSieve::new(k, lo, hi)?)),
            BasisSpec::Poly { degree } => {
                if degree < 1 {
                    return Err(Error::config("polynomial degree must be at least 1"));
                }
                if !(hi > lo) {
                    return Err(Error::domain(format!("need hi > lo, got [{lo}, {hi}]")));
                }
                Ok(Basis::Poly(PolyBasis { degree, lo, hi, gamma: DVector::zeros(degree + 1) }))
            }
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Basis::Spline(s) => s.k(),
            Basis::Poly(p) => p.degree + 1,
        }
    }

    pub fn gamma(&self) -> &DVector<f64> {
        match self {
            Basis::Spline(s) => s.gamma(),
            Basis::Poly(p) => &p.gamma,
        }
    }

    pub fn set_gamma(&mut self, gamma: DVector<f64>) {
        match self {
            Basis::Spline(s) => s.set_gamma(gamma),
            Basis::Poly(p) => {
                assert_eq!(gamma.len(), p.degree + 1);
                p.gamma = gamma;
            }
        }
    }

    pub fn fill_row(&self, u: f64, out: &mut [f64]) {
        match self {
            Basis::Spline(s) => s.basis_row_into(u, out),
            Basis::Poly(p) => p.fill_row(u, out),
        }
    }

    pub fn range(&self) -> (f64, f64) {
        match self {
            Basis::Spline(s) => s.range(),
            Basis::Poly(p) => (p.lo, p.hi),
        }
    }
}

/// Result of one inner profiling pass at a fixed `theta`.
#[derive(Debug, Clone)]
pub(crate) struct MeanEval {
    pub theta: Theta,
    pub basis: Basis,
    pub mus: Vec<DVector<f64>>,
    /// Set when the index values were (numerically) constant, in which case
    /// the rescale interval is widened artificially around the single value.
    pub degenerate_index: bool,
}

/// Full evaluation of the profiled estimating machinery at one `theta`.
#[derive(Debug, Clone)]
pub(crate) struct ThetaEval {
    pub theta: Theta,
    pub basis: Basis,
    pub mus: Vec<DVector<f64>>,
    /// Per-subject profiled Jacobians `G_i` (`m_i x d`).
    pub big_g: Vec<DMatrix<f64>>,
    /// Per-subject estimating functions `g_i`.
    pub g: Vec<DVector<f64>>,
    /// Score sum `U = sum_i g_i`.
    pub u: DVector<f64>,
    /// Gauss-Newton matrix `sum_i G_i' V_i^-1 G_i`.
    pub j: DMatrix<f64>,
    /// Least-squares merit `||U||^2`.
    pub merit: f64,
}

/// Engine-internal fit output shared by the spline and polynomial front ends.
#[derive(Debug, Clone)]
pub(crate) struct FitCore {
    pub eval: ThetaEval,
    pub working: WorkingCovSpec,
    pub dispersion: f64,
    pub converged: bool,
    pub n_outer: usize,
}

impl FitCore {
    pub fn theta(&self) -> &Theta {
        &self.eval.theta
    }

    pub fn mus(&self) -> &[DVector<f64>] {
        &self.eval.mus
    }
}

/// Fitted model: parameter estimates, fitted sieve, working-correlation and
/// dispersion estimates, and the per-subject pieces consumed by inference.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: Theta,
    pub alpha_hat: IndexDirection,
    /// Fitted sieve carrying the estimated coefficients and rescale range.
    pub sieve_hat: SplineSieve,
    pub rho_hat: f64,
    pub dispersion_hat: f64,
    pub converged: bool,
    pub n_outer: usize,
    /// Estimating functions `g_i(theta_hat)`.
    pub per_subject_g: Vec<DVector<f64>>,
    /// Profiled Jacobians `G_i(theta_hat)`.
    pub profiled_jacobians: Vec<DMatrix<f64>>,
    /// Fitted per-subject means.
    pub mus: Vec<DVector<f64>>,
    /// Working specification at the fitted correlation (unit dispersion).
    pub working: WorkingCovSpec,
}

/// Profiled mean pieces returned by [`profiled_mean`].
#[derive(Debug, Clone)]
pub struct ProfiledMean {
    pub mus: Vec<DVector<f64>>,
    pub gamma: DVector<f64>,
    pub sieve: SplineSieve,
    /// True when the index was constant across observations and the rescale
    /// interval had to be widened around it.
    pub degenerate_index: bool,
}

fn index_range(dataset: &LongitudinalDataset, alpha: &DVector<f64>) -> (f64, f64, bool) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in dataset.subjects() {
        for j in 0..s.m() {
            let u = s.z.row(j).transpose().dot(alpha);
            lo = lo.min(u);
            hi = hi.max(u);
        }
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, lo + 0.5, true)
    } else {
        (lo, hi, false)
    }
}

fn build_design(dataset: &LongitudinalDataset, alpha: &DVector<f64>, basis: &Basis) -> Vec<DMatrix<f64>> {
    let k = basis.k();
    dataset
        .subjects()
        .iter()
        .map(|s| {
            let mut b = DMatrix::zeros(s.m(), k);
            let mut row = vec![0.0; k];
            for j in 0..s.m() {
                let u = s.z.row(j).transpose().dot(alpha);
                basis.fill_row(u, &mut row);
                for (c, &v) in row.iter().enumerate() {
                    b[(j, c)] = v;
                }
            }
            b
        })
        .collect()
}

/// Accumulates the inner score (and optionally the Fisher matrix) at `gamma`.
/// Reductions run in canonical subject order for permutation invariance.
fn inner_score(
    dataset: &LongitudinalDataset,
    offsets: &[DVector<f64>],
    bmats: &[DMatrix<f64>],
    spec: &WorkingCovSpec,
    gamma: &DVector<f64>,
    want_fisher: bool,
) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
    let k = gamma.len();
    let mut score = DVector::zeros(k);
    let mut fisher = if want_fisher { Some(DMatrix::zeros(k, k)) } else { None };
    for &i in dataset.canonical_order() {
        let s = &dataset.subjects()[i];
        let xi = &offsets[i] + &bmats[i] * gamma;
        let m = s.m();
        let mut mu = DVector::zeros(m);
        let mut w = bmats[i].clone();
        for j in 0..m {
            mu[j] = spec.family.inv_link(xi[j]);
            let dm = spec.family.mean_deriv(xi[j]);
            w.row_mut(j).scale_mut(dm);
        }
        let (_, chol) = workcov::assemble_v(spec, &mu)?;
        let r = &s.y - &mu;
        score += w.tr_mul(&chol.solve(&r));
        if let Some(f) = fisher.as_mut() {
            *f += w.tr_mul(&chol.solve(&w));
        }
    }
    if !score.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("inner score is not finite"));
    }
    Ok((score, fisher))
}

/// Solves a symmetric positive-definite system, falling back to a ridge
/// `1e-8 * trace / dim` when the condition estimate exceeds `1e12`.
pub(crate) fn solve_spd_ridge(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = Cholesky::new(a.clone()) {
        let l = chol.l_dirty();
        let mut pmin = f64::INFINITY;
        let mut pmax = 0.0f64;
        for i in 0..a.nrows() {
            pmin = pmin.min(l[(i, i)]);
            pmax = pmax.max(l[(i, i)]);
        }
        if pmin > 0.0 && (pmax / pmin).powi(2) < 1e12 {
            return Ok(chol.solve(b));
        }
    }
    let base = (1e-8 * a.trace() / a.nrows() as f64).max(1e-300);
    for boost in [1.0, 1e2, 1e4] {
        let mut aa = a.clone();
        for i in 0..aa.nrows() {
            aa[(i, i)] += base * boost;
        }
        if let Some(chol) = Cholesky::new(aa) {
            return Ok(chol.solve(b));
        }
    }
    Err(Error::SingularDesign(format!(
        "normal matrix of dimension {} is singular even after ridging",
        a.nrows()
    )))
}

/// True when a Bernoulli or Poisson inner fit has pushed every fitted mean
/// onto the numeric boundary, which corresponds to a diverging `gamma`.
fn means_collapsed(
    dataset: &LongitudinalDataset,
    offsets: &[DVector<f64>],
    bmats: &[DMatrix<f64>],
    family: OutcomeFamily,
    gamma: &DVector<f64>,
) -> bool {
    if family == OutcomeFamily::Gaussian {
        return false;
    }
    let mut all_low = true;
    let mut all_high = family == OutcomeFamily::Bernoulli;
    for (i, _) in dataset.subjects().iter().enumerate() {
        let xi = &offsets[i] + &bmats[i] * gamma;
        for &v in xi.iter() {
            let mu = family.inv_link(v);
            all_low = all_low && mu <= 1e-8;
            all_high = all_high && mu >= 1.0 - 1e-8;
            if !all_low && !all_high {
                return false;
            }
        }
    }
    all_low || all_high
}

/// Inner IRLS for the basis coefficients at fixed `theta`.
fn irls(
    dataset: &LongitudinalDataset,
    offsets: &[DVector<f64>],
    bmats: &[DMatrix<f64>],
    spec: &WorkingCovSpec,
    config: &FitConfig,
    gamma0: DVector<f64>,
) -> Result<DVector<f64>> {
    let n = dataset.n() as f64;
    let one_step_exact = spec.family == OutcomeFamily::Gaussian;
    let mut gamma = gamma0;
    for _ in 1..=config.max_inner {
        let (score, fisher) = inner_score(dataset, offsets, bmats, spec, &gamma, true)?;
        let norm = score.amax();
        if norm <= config.tol_gamma * n {
            if means_collapsed(dataset, offsets, bmats, spec.family, &gamma) {
                return Err(Error::NonConvergence(
                    "inner fit collapsed onto the mean boundary (separation)".into(),
                ));
            }
            return Ok(gamma);
        }
        let delta = solve_spd_ridge(&fisher.expect("requested"), &score)?;
        if one_step_exact {
            // Identity link with mean-free variance: the score is linear in
            // gamma, so the full Newton step lands on the root.
            gamma += delta;
            continue;
        }
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..10 {
            let cand = &gamma + step * &delta;
            match inner_score(dataset, offsets, bmats, spec, &cand, false) {
                Ok((s, _)) if s.amax() <= 2.0 * norm => {
                    gamma = cand;
                    moved = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !moved {
            return Err(Error::NonConvergence(
                "inner IRLS step halving failed to make progress".into(),
            ));
        }
    }
    // One last tolerance check before giving up.
    let (score, _) = inner_score(dataset, offsets, bmats, spec, &gamma, false)?;
    if score.amax() <= config.tol_gamma * n {
        if means_collapsed(dataset, offsets, bmats, spec.family, &gamma) {
            return Err(Error::NonConvergence(
                "inner fit collapsed onto the mean boundary (separation)".into(),
            ));
        }
        return Ok(gamma);
    }
    Err(Error::NonConvergence(format!(
        "inner IRLS did not reach tolerance within {} iterations",
        config.max_inner
    )))
}

/// Profiles the basis coefficients at `theta`, refreshing the rescale range.
fn mean_eval(
    dataset: &LongitudinalDataset,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    bspec: BasisSpec,
    theta: Theta,
    warm: Option<&DVector<f64>>,
) -> Result<MeanEval> {
    let alpha = theta.alpha();
    let (lo, hi, degenerate) = index_range(dataset, alpha.as_vector());
    let mut basis = Basis::build(bspec, lo, hi)?;
    let bmats = build_design(dataset, alpha.as_vector(), &basis);
    let offsets: Vec<DVector<f64>> =
        dataset.subjects().iter().map(|s| &s.x * theta.beta()).collect();
    let gamma0 = match warm {
        Some(g) if g.len() == basis.k() => g.clone(),
        _ => DVector::zeros(basis.k()),
    };
    let gamma = irls(dataset, &offsets, &bmats, spec, config, gamma0)?;
    let mus: Vec<DVector<f64>> = dataset
        .subjects()
        .iter()
        .zip(offsets.iter().zip(bmats.iter()))
        .map(|(_, (off, b))| {
            let xi = off + b * &gamma;
            xi.map(|v| spec.family.inv_link(v))
        })
        .collect();
    basis.set_gamma(gamma);
    Ok(MeanEval { theta, basis, mus, degenerate_index: degenerate })
}

/// Central-difference displacement of one stacked-parameter coordinate,
/// shrinking the step when the phi ball boundary is in the way.
fn displace(theta_v: &DVector<f64>, p: usize, coord: usize, scale: f64) -> Result<(Theta, Theta, f64)> {
    let mut h = scale * (1.0 + theta_v[coord].abs());
    for _ in 0..60 {
        let mut vp = theta_v.clone();
        vp[coord] += h;
        let mut vm = theta_v.clone();
        vm[coord] -= h;
        if let (Ok(tp), Ok(tm)) = (Theta::from_vector(&vp, p), Theta::from_vector(&vm, p)) {
            return Ok((tp, tm, h));
        }
        h *= 0.5;
    }
    Err(Error::numerical("finite-difference displacement left the phi ball"))
}

/// Computes `G_i`, `g_i`, the score sum and the Gauss-Newton matrix at the
/// profiled mean `center`, with an optional override of the FD step scale.
fn full_eval_scaled(
    dataset: &LongitudinalDataset,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    bspec: BasisSpec,
    center: &MeanEval,
    fd_scale: Option<f64>,
) -> Result<ThetaEval> {
    let n = dataset.n();
    let d = dataset.d();
    let p = dataset.p();
    let scale = fd_scale.unwrap_or_else(|| f64::EPSILON.cbrt());
    let theta_v = center.theta.as_vector();
    let warm = center.basis.gamma();

    let mut displaced_mus: Vec<(Vec<DVector<f64>>, Vec<DVector<f64>>, f64)> = Vec::with_capacity(d);
    for coord in 0..d {
        let (tp, tm, h) = displace(&theta_v, p, coord, scale)?;
        let ep = mean_eval(dataset, spec, config, bspec, tp, Some(warm))?;
        let em = mean_eval(dataset, spec, config, bspec, tm, Some(warm))?;
        displaced_mus.push((ep.mus, em.mus, h));
    }

    let mut big_g = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut j_parts = Vec::with_capacity(n);
    for (i, s) in dataset.subjects().iter().enumerate() {
        let m = s.m();
        let mut gi_mat = DMatrix::zeros(m, d);
        for (coord, (plus, minus, h)) in displaced_mus.iter().enumerate() {
            let col = (&plus[i] - &minus[i]) / (2.0 * h);
            gi_mat.column_mut(coord).copy_from(&col);
        }
        let (_, chol) = workcov::assemble_v(spec, &center.mus[i])?;
        let r = &s.y - &center.mus[i];
        let gi = gi_mat.tr_mul(&chol.solve(&r));
        j_parts.push(gi_mat.tr_mul(&chol.solve(&gi_mat)));
        big_g.push(gi_mat);
        g.push(gi);
    }
    // Reduce in canonical order so sums do not depend on storage order.
    let mut u = DVector::zeros(d);
    let mut j = DMatrix::zeros(d, d);
    for &i in dataset.canonical_order() {
        u += &g[i];
        j += &j_parts[i];
    }
    let merit = u.norm_squared();
    Ok(ThetaEval {
        theta: center.theta.clone(),
        basis: center.basis.clone(),
        mus: center.mus.clone(),
        big_g,
        g,
        u,
        j,
        merit,
    })
}

pub(crate) fn full_eval(
    dataset: &LongitudinalDataset,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    bspec: BasisSpec,
    center: &MeanEval,
) -> Result<ThetaEval> {
    full_eval_scaled(dataset, spec, config, bspec, center, None)
}

/// One-stop profiled evaluation at `theta` (inner fit plus Jacobians).
pub(crate) fn theta_eval(
    dataset: &LongitudinalDataset,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    bspec: BasisSpec,
    theta: Theta,
    warm: Option<&DVector<f64>>,
) -> Result<ThetaEval> {
    let center = mean_eval(dataset, spec, config, bspec, theta, warm)?;
    full_eval(dataset, spec, config, bspec, &center)
}

/// Alternates the inner fit and the moment update of `rho` at fixed `theta`
/// until `rho` stabilizes (at most 10 cycles).
pub(crate) fn profile_rho_cycle(
    dataset: &LongitudinalDataset,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    bspec: BasisSpec,
    theta: Theta,
    warm: Option<&DVector<f64>>,
) -> Result<(MeanEval, WorkingCovSpec)> {
    let mut spec_cur = *spec;
    let mut me = mean_eval(dataset, &spec_cur, config, bspec, theta, warm)?;
    if config.update_rho && spec_cur.corr_family != CorrFamily::Independence {
        for _ in 0..10 {
            let resid = canonical_residuals(dataset, &me.mus, spec_cur.family);
            let rho_new = workcov::update_rho(&spec_cur, &resid, dataset.d() as f64);
            let moved = (rho_new - spec_cur.rho).abs();
            spec_cur = spec_cur.with_rho(rho_new);
            if moved <= 1e-6 {
                break;
            }
            let warm_gamma = me.basis.gamma().clone();
            me = mean_eval(dataset, &spec_cur, config, bspec, me.theta.clone(), Some(&warm_gamma))?;
        }
    }
    Ok((me, spec_cur))
}

/// Pearson residual blocks in canonical subject order, for moment updates.
fn canonical_residuals(
    dataset: &LongitudinalDataset,
    mus: &[DVector<f64>],
    family: OutcomeFamily,
) -> Vec<DVector<f64>> {
    dataset
        .canonical_order()
        .iter()
        .map(|&i| {
            let s = &dataset.subjects()[i];
            DVector::from_fn(s.m(), |j, _| {
                let mj = family.clamp_mean(mus[i][j]);
                (s.y[j] - mj) / family.variance(mj).sqrt()
            })
        })
        .collect()
}

fn project_theta(v: &DVector<f64>, p: usize) -> Theta {
    let phi = v.rows(p, v.len() - p);
    let norm = phi.norm();
    if norm <= PHI_MAX {
        Theta::from_vector(v, p).expect("inside the phi ball")
    } else {
        let mut vv = v.clone();
        vv.rows_mut(p, v.len() - p).scale_mut(PHI_MAX / norm);
        Theta::from_vector(&vv, p).expect("projected onto the phi ball")
    }
}

/// Starting value: a working GLM on `[1, X, Z]` ignoring the single-index
/// nonlinearity; `beta` from the X block and the index direction from the
/// normalized Z block, mapped to the positive-first-coordinate hemisphere.
pub fn init_theta(dataset: &LongitudinalDataset, family: OutcomeFamily) -> Result<Theta> {
    let nobs = dataset.total_obs();
    let p = dataset.p();
    let q = dataset.q();
    let cols = 1 + p + q;
    let mut w = DMatrix::zeros(nobs, cols);
    let mut y = DVector::zeros(nobs);
    let mut row = 0;
    for &i in dataset.canonical_order() {
        let s = &dataset.subjects()[i];
        for j in 0..s.m() {
            w[(row, 0)] = 1.0;
            for c in 0..p {
                w[(row, 1 + c)] = s.x[(j, c)];
            }
            for c in 0..q {
                w[(row, 1 + p + c)] = s.z[(j, c)];
            }
            y[row] = s.y[j];
            row += 1;
        }
    }
    let coefs = glm_irls(&w, &y, family)?;
    let beta = coefs.rows(1, p).into_owned();
    let zeta = coefs.rows(1 + p, q).into_owned();
    let norm = zeta.norm();
    let phi = if norm < 1e-8 {
        DVector::zeros(q - 1)
    } else {
        let mut alpha = zeta / norm;
        if alpha[0] < 0.0 {
            alpha.neg_mut();
        }
        let mut phi = alpha.rows(1, q - 1).into_owned();
        let pn = phi.norm();
        if pn > 0.99 {
            phi.scale_mut(0.99 / pn);
        }
        phi
    };
    Theta::new(beta, phi)
}

/// Plain independence GLM by Fisher scoring, used only for initialization.
fn glm_irls(w: &DMatrix<f64>, y: &DVector<f64>, family: OutcomeFamily) -> Result<DVector<f64>> {
    let cols = w.ncols();
    let mut coef = DVector::zeros(cols);
    for _ in 0..25 {
        let xi = w * &coef;
        let mut score = DVector::zeros(cols);
        let mut fisher = DMatrix::zeros(cols, cols);
        for r in 0..w.nrows() {
            let mu = family.inv_link(xi[r]);
            let dm = family.mean_deriv(xi[r]);
            let wr = w.row(r);
            score += wr.transpose() * (y[r] - mu);
            fisher += wr.transpose() * wr * dm;
        }
        if !score.iter().all(|v| v.is_finite()) {
            break;
        }
        let delta = solve_spd_ridge(&fisher, &score)?;
        let done = delta.amax() <= 1e-8 * (1.0 + coef.amax());
        coef += delta;
        if done {
            break;
        }
    }
    Ok(coef)
}

/// Shared fitting engine for both the spline sieve and the polynomial basis.
pub(crate) fn fit_with_basis(
    dataset: &LongitudinalDataset,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    theta_init: Option<Theta>,
    bspec: BasisSpec,
) -> Result<FitCore> {
    config.validate()?;
    dataset.validate_for_family(spec.family)?;
    let n = dataset.n() as f64;
    let p = dataset.p();
    let d = dataset.d();

    let mut theta = match theta_init {
        Some(t) => {
            if t.beta().len() != p || t.phi().len() != dataset.q() - 1 {
                return Err(Error::domain(format!(
                    "starting theta has dimensions ({}, {}), dataset needs ({}, {})",
                    t.beta().len(),
                    t.phi().len(),
                    p,
                    dataset.q() - 1
                )));
            }
            t
        }
        None => init_theta(dataset, spec.family)?,
    };

    let mut spec_cur = spec.with_dispersion(1.0);
    let mut center = mean_eval(dataset, &spec_cur, config, bspec, theta.clone(), None)?;
    let mut full: Option<ThetaEval> = None;
    let mut n_outer = 0;

    for iter in 1..=config.max_outer {
        n_outer = iter;
        if config.update_rho && spec_cur.corr_family != CorrFamily::Independence {
            let resid = canonical_residuals(dataset, &center.mus, spec_cur.family);
            let rho_new = workcov::update_rho(&spec_cur, &resid, d as f64);
            if (rho_new - spec_cur.rho).abs() > 1e-12 {
                spec_cur = spec_cur.with_rho(rho_new);
                let warm = center.basis.gamma().clone();
                center = mean_eval(dataset, &spec_cur, config, bspec, theta.clone(), Some(&warm))?;
                full = None;
            }
        }
        let cur = match full.take() {
            Some(f) => f,
            None => full_eval(dataset, &spec_cur, config, bspec, &center)?,
        };
        if cur.u.amax() <= SCORE_EXIT * n {
            full = Some(cur);
            break;
        }
        let delta = solve_spd_ridge(&cur.j, &cur.u)?;
        let theta_v = theta.as_vector();
        let mut step = 1.0;
        let mut accepted: Option<(Theta, MeanEval, ThetaEval)> = None;
        for _ in 0..=config.max_halvings {
            let cand_v = &theta_v + step * &delta;
            let cand = project_theta(&cand_v, p);
            let warm = center.basis.gamma().clone();
            let trial = mean_eval(dataset, &spec_cur, config, bspec, cand.clone(), Some(&warm))
                .and_then(|me| {
                    full_eval(dataset, &spec_cur, config, bspec, &me).map(|fe| (me, fe))
                });
            if let Ok((me, fe)) = trial {
                if fe.merit.is_finite() && fe.merit < cur.merit {
                    accepted = Some((cand, me, fe));
                    break;
                }
            }
            step *= config.damping;
        }
        match accepted {
            None => {
                full = Some(cur);
                break;
            }
            Some((cand, me, fe)) => {
                debug_assert!(fe.merit < cur.merit);
                let step_norm = (cand.as_vector() - &theta_v).norm();
                let rel = step_norm / (1.0 + theta_v.norm());
                theta = cand;
                center = me;
                full = Some(fe);
                if rel <= config.tol_theta {
                    break;
                }
            }
        }
    }

    let eval = match full {
        Some(f) => f,
        None => full_eval(dataset, &spec_cur, config, bspec, &center)?,
    };
    let converged = eval.u.amax() <= SCORE_CONVERGED * n;
    let dispersion = match spec.family {
        OutcomeFamily::Gaussian => {
            let resid = canonical_residuals(dataset, &eval.mus, spec_cur.family);
            workcov::pearson_dispersion(&resid, d as f64).unwrap_or(1.0)
        }
        _ => 1.0,
    };
    Ok(FitCore { eval, working: spec_cur, dispersion, converged, n_outer })
}

/// Fits the model by the profile algorithm: inner IRLS for the sieve
/// coefficients, a moment update for `rho` once per outer iteration, and a
/// damped Gauss-Newton step on the profiled estimating equations, with the
/// index direction kept inside the unit ball by projection.
pub fn fit(
    dataset: &LongitudinalDataset,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    theta_init: Option<Theta>,
) -> Result<FitResult> {
    let core = fit_with_basis(dataset, spec, config, theta_init, BasisSpec::Spline { k: config.k })?;
    let FitCore { eval, working, dispersion, converged, n_outer } = core;
    let sieve_hat = match eval.basis {
        Basis::Spline(s) => s,
        Basis::Poly(_) => unreachable!("spline front end"),
    };
    let alpha_hat = eval.theta.alpha();
    Ok(FitResult {
        theta_hat: eval.theta,
        alpha_hat,
        sieve_hat,
        rho_hat: working.rho,
        dispersion_hat: dispersion,
        converged,
        n_outer,
        per_subject_g: eval.g,
        profiled_jacobians: eval.big_g,
        mus: eval.mus,
        working,
    })
}

/// Inner IRLS at fixed `theta` on a caller-supplied sieve (its rescale range
/// is used as given, not refreshed).
pub fn inner_fit_gamma(
    dataset: &LongitudinalDataset,
    theta: &Theta,
    sieve: &SplineSieve,
    spec: &WorkingCovSpec,
    config: &FitConfig,
) -> Result<DVector<f64>> {
    config.validate()?;
    let alpha = theta.alpha();
    let basis = Basis::Spline(sieve.clone());
    let bmats = build_design(dataset, alpha.as_vector(), &basis);
    let offsets: Vec<DVector<f64>> =
        dataset.subjects().iter().map(|s| &s.x * theta.beta()).collect();
    irls(dataset, &offsets, &bmats, spec, config, sieve.gamma().clone())
}

/// Profiled mean at `theta`: re-fits `gamma` on a refreshed rescale range and
/// returns the per-subject means with the fitted sieve.
pub fn profiled_mean(
    dataset: &LongitudinalDataset,
    theta: &Theta,
    spec: &WorkingCovSpec,
    config: &FitConfig,
) -> Result<ProfiledMean> {
    config.validate()?;
    let me = mean_eval(dataset, spec, config, BasisSpec::Spline { k: config.k }, theta.clone(), None)?;
    let sieve = match me.basis {
        Basis::Spline(s) => s,
        Basis::Poly(_) => unreachable!(),
    };
    Ok(ProfiledMean {
        mus: me.mus,
        gamma: sieve.gamma().clone(),
        sieve,
        degenerate_index: me.degenerate_index,
    })
}

/// Per-subject profiled Jacobians `G_i(theta)` by central finite differences
/// of the profiled mean, including the dependence through the inner fit.
pub fn profiled_jacobian(
    dataset: &LongitudinalDataset,
    theta: &Theta,
    spec: &WorkingCovSpec,
    config: &FitConfig,
) -> Result<Vec<DMatrix<f64>>> {
    config.validate()?;
    let eval = theta_eval(dataset, spec, config, BasisSpec::Spline { k: config.k }, theta.clone(), None)?;
    Ok(eval.big_g)
}

/// Same as [`profiled_jacobian`] with an explicit step scale, for step-size
/// studies.
pub fn profiled_jacobian_scaled(
    dataset: &LongitudinalDataset,
    theta: &Theta,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    fd_scale: f64,
) -> Result<Vec<DMatrix<f64>>> {
    config.validate()?;
    let bspec = BasisSpec::Spline { k: config.k };
    let center = mean_eval(dataset, spec, config, bspec, theta.clone(), None)?;
    let eval = full_eval_scaled(dataset, spec, config, bspec, &center, Some(fd_scale))?;
    Ok(eval.big_g)
}

/// Estimating function of one subject: `g_i = G_i' V_i^-1 (y_i - mu_i)`.
pub fn subject_estimating_function(
    block: &SubjectBlock,
    big_g: &DMatrix<f64>,
    chol: &SpdFactor,
    mu: &DVector<f64>,
) -> DVector<f64> {
    let r = &block.y - mu;
    big_g.tr_mul(&chol.solve(&r))
}

/// Profiled estimating functions `g_i(theta)` for all subjects, at the given
/// working specification (no correlation update).
pub fn estimating_functions(
    dataset: &LongitudinalDataset,
    theta: &Theta,
    spec: &WorkingCovSpec,
    config: &FitConfig,
) -> Result<Vec<DVector<f64>>> {
    config.validate()?;
    let eval = theta_eval(dataset, spec, config, BasisSpec::Spline { k: config.k }, theta.clone(), None)?;
    Ok(eval.g)
}
