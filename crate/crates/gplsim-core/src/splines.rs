//! Cubic B-spline sieve on a rescaled index interval.
//!
//! The sieve carries its own affine rescaling map `u -> (u - lo) / (hi - lo)`
//! so that raw index values `u = z' alpha` are evaluated on `[0, 1]`.
//! Values outside the stored range are clamped to the boundary, never
//! extrapolated. The knot vector is open (boundary knots repeated `order`
//! times) with equally spaced interior knots.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{LongitudinalDataset, OutcomeFamily, SubjectBlock, Theta};
use crate::profile::{self, BasisSpec, FitConfig};
use crate::workcov::WorkingCovSpec;

/// Spline order for a cubic basis (degree 3).
pub const ORDER: usize = 4;

/// Cubic B-spline sieve: knots, rescaling map and coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineSieve {
    k: usize,
    knots: Vec<f64>,
    lo: f64,
    hi: f64,
    gamma: DVector<f64>,
}

impl SplineSieve {
    /// Builds a `K`-dimensional cubic sieve whose rescaling map sends
    /// `[lo, hi]` onto `[0, 1]`. Coefficients start at zero.
    pub fn new(k: usize, lo: f64, hi: f64) -> Result<Self> {
        if k < ORDER {
            return Err(Error::domain(format!("K = {k} must be at least the order {ORDER}")));
        }
        if !(hi > lo) {
            return Err(Error::domain(format!("need hi > lo, got [{lo}, {hi}]")));
        }
        let mut knots = Vec::with_capacity(k + ORDER);
        knots.extend(std::iter::repeat(0.0).take(ORDER));
        let intervals = (k - ORDER + 1) as f64;
        for i in 1..=(k - ORDER) {
            knots.push(i as f64 / intervals);
        }
        knots.extend(std::iter::repeat(1.0).take(ORDER));
        Ok(SplineSieve { k, knots, lo, hi, gamma: DVector::zeros(k) })
    }

    /// Basis dimension `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    /// Knot vector of length `K + order`.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Rescaling bounds `(lo, hi)` in raw index units.
    pub fn range(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    /// Fitted coefficient vector.
    pub fn gamma(&self) -> &DVector<f64> {
        &self.gamma
    }

    /// Replaces the coefficient vector.
    pub fn set_gamma(&mut self, gamma: DVector<f64>) {
        assert_eq!(gamma.len(), self.k, "gamma length must equal K");
        self.gamma = gamma;
    }

    /// Maps a raw index value to the evaluation interval, clamping to `[0, 1]`.
    pub fn rescale(&self, u: f64) -> f64 {
        ((u - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }

    /// Index of the knot span containing `t in [0, 1]`, such that
    /// `knots[s] <= t < knots[s + 1]` (with `t = 1` assigned to the last
    /// nonempty span).
    fn span(&self, t: f64) -> usize {
        if t >= 1.0 {
            return self.k - 1;
        }
        // Interior knots are equally spaced, so the span is arithmetic.
        let intervals = self.k - ORDER + 1;
        let j = ((t * intervals as f64) as usize).min(intervals - 1);
        j + ORDER - 1
    }

    /// Evaluates all `K` basis functions at a raw index value.
    ///
    /// The returned row is nonnegative, has at most `order` nonzero entries
    /// and sums to one.
    pub fn basis_row(&self, u: f64) -> DVector<f64> {
        let mut row = DVector::zeros(self.k);
        self.basis_row_into(u, row.as_mut_slice());
        row
    }

    /// Allocation-free variant of [`basis_row`](Self::basis_row) writing into
    /// a caller-owned slice of length `K`.
    pub fn basis_row_into(&self, u: f64, out: &mut [f64]) {
        assert_eq!(out.len(), self.k, "output slice length must equal K");
        out.fill(0.0);
        let t = self.rescale(u);
        let s = self.span(t);
        let vals = self.span_values(s, t);
        for (offset, &v) in vals.iter().enumerate() {
            out[s + 1 - ORDER + offset] = v;
        }
    }

    /// The `order` basis values supported on span `s`, evaluated at `t` by
    /// the triangular scheme. `t` may lie outside the span, in which case the
    /// span's polynomial pieces are continued.
    fn span_values(&self, s: usize, t: f64) -> [f64; ORDER] {
        let mut vals = [0.0; ORDER];
        vals[0] = 1.0;
        let mut left = [0.0; ORDER];
        let mut right = [0.0; ORDER];
        for j in 1..ORDER {
            left[j] = t - self.knots[s + 1 - j];
            right[j] = self.knots[s + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let term = if denom > 0.0 { vals[r] / denom } else { 0.0 };
                vals[r] = saved + right[r + 1] * term;
                saved = left[j - r] * term;
            }
            vals[j] = saved;
        }
        vals
    }

    /// Fitted link at a raw index value, continuing the boundary polynomial
    /// pieces beyond the stored range instead of clamping.
    ///
    /// Inside `[lo, hi]` this equals [`eval`](Self::eval). Outside, the cubic
    /// of the adjacent boundary span is extended, which is the appropriate
    /// evaluation for arguments slightly past the fitted range — for example
    /// bootstrap replicates whose resampled index range is narrower than the
    /// original fit's.
    pub fn eval_extended(&self, u: f64) -> f64 {
        let t = (u - self.lo) / (self.hi - self.lo);
        let s = self.span(t.clamp(0.0, 1.0));
        let vals = self.span_values(s, t);
        let mut acc = 0.0;
        for (offset, &v) in vals.iter().enumerate() {
            acc += v * self.gamma[s + 1 - ORDER + offset];
        }
        acc
    }

    /// Evaluates the first derivative of each basis function at a raw index
    /// value, scaled by the slope `1 / (hi - lo)` of the rescaling map.
    ///
    /// Outside the stored `[lo, hi]` range the clamped evaluation is constant,
    /// so the derivative is zero there.
    pub fn basis_deriv_row(&self, u: f64) -> DVector<f64> {
        let mut row = DVector::zeros(self.k);
        let raw = (u - self.lo) / (self.hi - self.lo);
        if raw < 0.0 || raw > 1.0 {
            return row;
        }
        let t = raw;
        let lower = self.basis_row_order3(t);
        let deg = (ORDER - 1) as f64;
        for i in 0..self.k {
            let d1 = self.knots[i + ORDER - 1] - self.knots[i];
            let d2 = self.knots[i + ORDER] - self.knots[i + 1];
            let a = if d1 > 0.0 { lower[i] / d1 } else { 0.0 };
            let b = if d2 > 0.0 { lower[i + 1] / d2 } else { 0.0 };
            row[i] = deg * (a - b) / (self.hi - self.lo);
        }
        row
    }

    /// Order-3 basis functions on the same knot vector, padded with a
    /// trailing virtual function, used by the derivative formula.
    fn basis_row_order3(&self, t: f64) -> Vec<f64> {
        let n = self.k + 1;
        let mut vals = vec![0.0; n];
        // Cox-de Boor recursion restricted to order 3 over the shifted index
        // range: function i of order 3 lives on knots[i..=i+3], i in 1..=K.
        let order = ORDER - 1;
        let s = self.span(t.min(1.0).max(0.0));
        let mut tri = [0.0; ORDER];
        tri[0] = 1.0;
        let mut left = [0.0; ORDER];
        let mut right = [0.0; ORDER];
        for j in 1..order {
            left[j] = t - self.knots[s + 1 - j];
            right[j] = self.knots[s + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let term = if denom > 0.0 { tri[r] / denom } else { 0.0 };
                tri[r] = saved + right[r + 1] * term;
                saved = left[j - r] * term;
            }
            tri[j] = saved;
        }
        for (offset, &v) in tri.iter().take(order).enumerate() {
            let idx = s + 1 - order + offset;
            if idx < n {
                vals[idx] = v;
            }
        }
        vals
    }

    /// Evaluates the fitted link at a raw index value.
    pub fn eval(&self, u: f64) -> f64 {
        self.basis_row(u).dot(&self.gamma)
    }

    /// Evaluates the fitted link directly at a rescaled argument in `[0, 1]`.
    pub fn eval_unit(&self, t: f64) -> f64 {
        let u = self.lo + t.clamp(0.0, 1.0) * (self.hi - self.lo);
        self.eval(u)
    }
}

/// Spline design matrix for one subject: row `j` is `B(u_ij(theta))`.
pub fn design_matrix(block: &SubjectBlock, theta: &Theta, sieve: &SplineSieve) -> DMatrix<f64> {
    let alpha = theta.alpha();
    let mut b = DMatrix::zeros(block.m(), sieve.k());
    for j in 0..block.m() {
        let u = block.z.row(j).transpose().dot(alpha.as_vector());
        b.row_mut(j).copy_from(&sieve.basis_row(u).transpose());
    }
    b
}

/// Selects the sieve dimension from `candidates` by a BIC-type criterion:
/// family deviance of the converged fit plus `K log(total observations)`.
/// Ties break toward the smaller dimension.
pub fn select_k(
    dataset: &LongitudinalDataset,
    theta_init: Option<&Theta>,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    candidates: &[usize],
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::config("empty candidate set for K"));
    }
    if let Some(&bad) = candidates.iter().find(|&&k| k < ORDER) {
        return Err(Error::config(format!("candidate K = {bad} below the minimum {ORDER}")));
    }
    let mut sorted: Vec<usize> = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();

    let penalty_scale = (dataset.total_obs() as f64).ln();
    let mut best: Option<(f64, usize)> = None;
    let mut last_err: Option<Error> = None;
    let mut init: Option<Theta> = theta_init.cloned();
    for &k in &sorted {
        match profile::fit_with_basis(dataset, spec, config, init.clone(), BasisSpec::Spline { k }) {
            Ok(fit) => {
                let mut deviance = 0.0;
                for (s, mu) in dataset.subjects().iter().zip(fit.mus().iter()) {
                    for j in 0..s.m() {
                        deviance +=
                            crate::model::unit_deviance(spec.family, s.y[j], spec.family.clamp_mean(mu[j]))?;
                    }
                }
                let bic = deviance + k as f64 * penalty_scale;
                if best.map_or(true, |(b, _)| bic < b) {
                    best = Some((bic, k));
                }
                // Warm-start the next candidate from this fit.
                init = Some(fit.theta().clone());
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((_, k)) => Ok(k),
        None => Err(Error::config(format!(
            "every candidate K failed to fit (last error: {})",
            last_err.map(|e| e.to_string()).unwrap_or_default()
        ))),
    }
}

/// Convenience wrapper of [`select_k`] that only needs the outcome family,
/// using the per-family default working specification.
pub fn select_k_default(
    dataset: &LongitudinalDataset,
    theta_init: Option<&Theta>,
    family: OutcomeFamily,
    candidates: &[usize],
) -> Result<usize> {
    let spec = WorkingCovSpec::independence(family);
    select_k(dataset, theta_init, &spec, &FitConfig::default(), candidates)
}
