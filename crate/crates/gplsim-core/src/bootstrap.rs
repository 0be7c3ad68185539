//! Cluster bootstrap: whole subjects are resampled with replacement so that
//! within-subject dependence is preserved, and each replicate is refit to
//! produce pointwise and simultaneous confidence bands for the link.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::LongitudinalDataset;
use crate::profile::{self, FitConfig, FitResult};
use crate::workcov::WorkingCovSpec;

/// Bootstrap band for the fitted link on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BandResult {
    /// Rescaled grid positions in `[0, 1]` over the original fit's index
    /// range.
    pub grid: Vec<f64>,
    /// Original fitted link on the grid.
    pub eta_hat: Vec<f64>,
    /// Pointwise lower percentile per grid point.
    pub lo: Vec<f64>,
    /// Pointwise upper percentile per grid point.
    pub hi: Vec<f64>,
    /// Radius of the simultaneous band `eta_hat +- sup_radius`.
    pub sup_radius: f64,
    /// Requested replicate count.
    pub b_star: usize,
    /// Replicates that failed to refit or did not converge (dropped).
    pub failures: usize,
}

/// Linear-interpolation sample quantile (the common "type 7" definition) on
/// an ascending slice.
fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of an empty sample");
    if n == 1 {
        return sorted[0];
    }
    let h = (n as f64 - 1.0) * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Cluster bootstrap band with replicates warm-started at the original fit.
#[allow(clippy::too_many_arguments)]
pub fn cluster_bootstrap_band(
    dataset: &LongitudinalDataset,
    fit: &FitResult,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    b_star: usize,
    level: f64,
    l_grid: usize,
    seed: u64,
) -> Result<BandResult> {
    cluster_bootstrap_band_with(dataset, fit, spec, config, b_star, level, l_grid, seed, true)
}

/// [`cluster_bootstrap_band`] with explicit control over warm-starting; a
/// cold start refits every replicate from its own initializer, which is
/// slower but useful as a warm-start bias check.
#[allow(clippy::too_many_arguments)]
pub fn cluster_bootstrap_band_with(
    dataset: &LongitudinalDataset,
    fit: &FitResult,
    spec: &WorkingCovSpec,
    config: &FitConfig,
    b_star: usize,
    level: f64,
    l_grid: usize,
    seed: u64,
    warm_start: bool,
) -> Result<BandResult> {
    config.validate()?;
    if b_star < 1 {
        return Err(Error::config("need at least one bootstrap replicate"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::config(format!("confidence level {level} outside (0, 1)")));
    }
    if l_grid < 2 {
        return Err(Error::config("need at least two grid points"));
    }
    if !fit.converged {
        return Err(Error::NonConvergence(
            "bootstrap bands require a converged fit".into(),
        ));
    }

    // The grid is pinned to the original fit's index range; replicate sieves
    // clamp to their own range when evaluated on it.
    let (u_lo, u_hi) = fit.sieve_hat.range();
    let grid: Vec<f64> = (0..l_grid).map(|j| j as f64 / (l_grid - 1) as f64).collect();
    let raw: Vec<f64> = grid.iter().map(|t| u_lo + t * (u_hi - u_lo)).collect();
    let eta_hat: Vec<f64> = raw.iter().map(|&u| fit.sieve_hat.eval(u)).collect();

    // Replicate config: the sieve dimension stays at the original fit's K so
    // band variability reflects resampling, not re-selection.
    let mut rep_config = config.clone();
    rep_config.k = fit.sieve_hat.k();
    let rep_spec = *spec;
    let n = dataset.n();

    // Each replicate consumes its own counter-mode substream, so parallel
    // and serial execution agree exactly.
    let curves: Vec<Option<Vec<f64>>> = (0..b_star as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b + 1);
            let mut subjects = Vec::with_capacity(n);
            for k in 0..n {
                let src = &dataset.subjects()[rng.random_range(0..n)];
                let mut s = src.clone();
                // Duplicates must stay distinct subjects.
                s.id = format!("r{k:06}");
                subjects.push(s);
            }
            let resample = LongitudinalDataset::new(subjects).ok()?;
            let init = if warm_start { Some(fit.theta_hat.clone()) } else { None };
            let refit = profile::fit(&resample, &rep_spec, &rep_config, init).ok()?;
            if !refit.converged {
                return None;
            }
            // The sphere parameterization keeps the first index coordinate
            // positive, so replicate curves are already on the same branch.
            debug_assert!(refit.alpha_hat.as_vector()[0] >= 0.0);
            // A resample's index range is a subset of the original's, so the
            // replicate sieve is continued past its own boundary rather than
            // clamped, avoiding artificial flat spots at the grid edges.
            Some(raw.iter().map(|&u| refit.sieve_hat.eval_extended(u)).collect())
        })
        .collect();

    let kept: Vec<&Vec<f64>> = curves.iter().flatten().collect();
    let failures = b_star - kept.len();
    if (failures as f64) / (b_star as f64) > 0.2 {
        return Err(Error::TooManyFailures { failed: failures, total: b_star });
    }

    let a = 0.5 * (1.0 - level);
    let mut lo = Vec::with_capacity(l_grid);
    let mut hi = Vec::with_capacity(l_grid);
    let mut col = Vec::with_capacity(kept.len());
    for j in 0..l_grid {
        col.clear();
        col.extend(kept.iter().map(|c| c[j]));
        col.sort_unstable_by(f64::total_cmp);
        lo.push(quantile_sorted(&col, a));
        hi.push(quantile_sorted(&col, 1.0 - a));
    }

    let mut sups: Vec<f64> = kept
        .iter()
        .map(|c| {
            c.iter()
                .zip(eta_hat.iter())
                .map(|(v, e)| (v - e).abs())
                .fold(0.0f64, f64::max)
        })
        .collect();
    sups.sort_unstable_by(f64::total_cmp);
    let mut sup_radius = quantile_sorted(&sups, level);
    // The simultaneous band must contain the pointwise band; the quantile
    // construction already guarantees it except in small-replicate corner
    // cases, where the radius is widened to the pointwise extremes.
    for j in 0..l_grid {
        sup_radius = sup_radius.max(hi[j] - eta_hat[j]).max(eta_hat[j] - lo[j]);
    }

    Ok(BandResult { grid, eta_hat, lo, hi, sup_radius, b_star, failures })
}

/// Curve evaluations shared by the simulation harness: the fitted link on an
/// equispaced grid over its own index range.
pub fn eta_on_grid(fit: &FitResult, l_grid: usize) -> Vec<f64> {
    let (u_lo, u_hi) = fit.sieve_hat.range();
    (0..l_grid)
        .map(|j| {
            let t = j as f64 / (l_grid - 1).max(1) as f64;
            fit.sieve_hat.eval(u_lo + t * (u_hi - u_lo))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OutcomeFamily, SubjectBlock, Theta};
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal, Uniform};

    fn sine_dataset(n: usize, seed: u64, noise: f64) -> LongitudinalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unif = Uniform::new(-1.0, 1.0).unwrap();
        let theta = Theta::new(
            DVector::from_column_slice(&[1.0, -1.0]),
            DVector::from_column_slice(&[0.5, 0.5]),
        )
        .unwrap();
        let alpha = theta.alpha();
        let m = 4;
        let mut subjects = Vec::with_capacity(n);
        for i in 0..n {
            let x = DMatrix::from_fn(m, 2, |_, _| unif.sample(&mut rng));
            let z = DMatrix::from_fn(m, 3, |_, _| unif.sample(&mut rng));
            let mut y = DVector::zeros(m);
            for j in 0..m {
                let u = z.row(j).transpose().dot(alpha.as_vector());
                let e: f64 = StandardNormal.sample(&mut rng);
                y[j] = x.row(j).transpose().dot(theta.beta()) + (1.8 * u).sin() + noise * e;
            }
            subjects.push(SubjectBlock { id: format!("s{i:03}"), y, x, z });
        }
        LongitudinalDataset::new(subjects).unwrap()
    }

    fn fit_gaussian(dataset: &LongitudinalDataset, k: usize) -> crate::profile::FitResult {
        let spec = WorkingCovSpec::independence(OutcomeFamily::Gaussian);
        let config = FitConfig { k, ..FitConfig::default() };
        profile::fit(dataset, &spec, &config, None).unwrap()
    }

    #[test]
    fn single_replicate_band_is_degenerate() {
        let dataset = sine_dataset(30, 51, 0.3);
        let spec = WorkingCovSpec::independence(OutcomeFamily::Gaussian);
        let config = FitConfig { k: 6, ..FitConfig::default() };
        let fit = profile::fit(&dataset, &spec, &config, None).unwrap();
        let band =
            cluster_bootstrap_band(&dataset, &fit, &spec, &config, 1, 0.95, 25, 7).unwrap();
        assert_eq!(band.b_star, 1);
        assert_eq!(band.failures, 0);
        for j in 0..band.grid.len() {
            assert_eq!(band.lo[j], band.hi[j], "degenerate percentiles at {j}");
        }
        assert!(band.sup_radius >= 0.0);
    }

    #[test]
    fn zero_noise_band_is_uniformly_tight() {
        let dataset = sine_dataset(40, 52, 0.0);
        let spec = WorkingCovSpec::independence(OutcomeFamily::Gaussian);
        let config = FitConfig { k: 12, ..FitConfig::default() };
        let fit = profile::fit(&dataset, &spec, &config, None).unwrap();
        let band =
            cluster_bootstrap_band(&dataset, &fit, &spec, &config, 20, 0.95, 40, 9).unwrap();
        let width = band
            .lo
            .iter()
            .zip(band.hi.iter())
            .map(|(l, h)| h - l)
            .fold(0.0f64, f64::max);
        assert!(width <= 1e-2, "max band width {width}");
        for j in 0..band.grid.len() {
            assert!(band.lo[j] <= band.eta_hat[j] + 1e-9 && band.eta_hat[j] <= band.hi[j] + 1e-9);
        }
    }

    #[test]
    fn equal_seeds_reproduce_the_band_exactly() {
        let dataset = sine_dataset(25, 53, 0.4);
        let spec = WorkingCovSpec::independence(OutcomeFamily::Gaussian);
        let config = FitConfig { k: 6, ..FitConfig::default() };
        let fit = profile::fit(&dataset, &spec, &config, None).unwrap();
        let a = cluster_bootstrap_band(&dataset, &fit, &spec, &config, 8, 0.90, 15, 123).unwrap();
        let b = cluster_bootstrap_band(&dataset, &fit, &spec, &config, 8, 0.90, 15, 123).unwrap();
        assert_eq!(a, b);
        let c = cluster_bootstrap_band(&dataset, &fit, &spec, &config, 8, 0.90, 15, 124).unwrap();
        assert!(a != c, "different seeds should move the band");
    }

    #[test]
    fn simultaneous_band_contains_the_pointwise_band() {
        let dataset = sine_dataset(45, 54, 0.3);
        let fit = fit_gaussian(&dataset, 6);
        let spec = WorkingCovSpec::independence(OutcomeFamily::Gaussian);
        let config = FitConfig { k: 6, ..FitConfig::default() };
        let band =
            cluster_bootstrap_band(&dataset, &fit, &spec, &config, 60, 0.95, 30, 11).unwrap();
        for j in 0..band.grid.len() {
            assert!(
                band.hi[j] <= band.eta_hat[j] + band.sup_radius + 1e-9,
                "upper nesting fails at {j}"
            );
            assert!(
                band.lo[j] >= band.eta_hat[j] - band.sup_radius - 1e-9,
                "lower nesting fails at {j}"
            );
        }
    }

    #[test]
    fn resampled_duplicates_are_distinct_subjects() {
        let dataset = sine_dataset(10, 55, 0.2);
        // A resample drawn by hand: the same source subject twice under
        // fresh identifiers must be accepted as two subjects.
        let src = &dataset.subjects()[3];
        let mut a = src.clone();
        a.id = "r000000".into();
        let mut b = src.clone();
        b.id = "r000001".into();
        let two = LongitudinalDataset::new(vec![a, b]).unwrap();
        assert_eq!(two.n(), 2);
    }

    #[test]
    fn exhausted_iteration_budget_counts_as_failures() {
        let dataset = sine_dataset(20, 56, 0.6);
        let spec = WorkingCovSpec::independence(OutcomeFamily::Gaussian);
        let config = FitConfig { k: 6, ..FitConfig::default() };
        let fit = profile::fit(&dataset, &spec, &config, None).unwrap();
        // One outer iteration cannot re-solve a resample, so every replicate
        // fails and the failure cap trips.
        let starved = FitConfig { max_outer: 1, k: 6, ..FitConfig::default() };
        let err = cluster_bootstrap_band(&dataset, &fit, &spec, &starved, 5, 0.95, 10, 3)
            .unwrap_err();
        match err {
            Error::TooManyFailures { failed, total } => {
                assert_eq!(total, 5);
                assert!(failed > 1);
            }
            other => panic!("expected TooManyFailures, got {other:?}"),
        }
    }

    #[test]
    fn grid_spans_the_unit_interval() {
        let dataset = sine_dataset(25, 57, 0.3);
        let fit = fit_gaussian(&dataset, 6);
        let spec = WorkingCovSpec::independence(OutcomeFamily::Gaussian);
        let config = FitConfig { k: 6, ..FitConfig::default() };
        let band = cluster_bootstrap_band(&dataset, &fit, &spec, &config, 4, 0.95, 21, 5).unwrap();
        assert_eq!(band.grid.len(), 21);
        assert_eq!(band.grid[0], 0.0);
        assert_eq!(*band.grid.last().unwrap(), 1.0);
        let eta = eta_on_grid(&fit, 21);
        for (a, b) in eta.iter().zip(band.eta_hat.iter()) {
            assert_eq!(a, b);
        }
    }
}
