//! Simulation studies: the data-generating mechanisms, the evaluation
//! metrics, and the replication driver that produces the comparative
//! metric tables.

use std::f64::consts::PI;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal, StudentT};
use rayon::prelude::*;

use crate::bel::{self, CiMethod, ComponentSel};
use crate::competitors;
use crate::error::{Error, Result};
use crate::model::{LongitudinalDataset, OutcomeFamily, SubjectBlock, Theta};
use crate::profile::{self, FitConfig, FitResult};
use crate::splines;
use crate::workcov::{CorrFamily, WorkingCovSpec};

/// One cell of the study design: sample sizes, outcome family, latent
/// dependence, covariate correlation and the true parameter values.
#[derive(Debug, Clone)]
pub struct SimDesign {
    /// Number of subjects.
    pub n: usize,
    /// Observations per subject.
    pub m: usize,
    pub family: OutcomeFamily,
    /// AR(1) parameter of the latent subject effect.
    pub rho_latent: f64,
    /// Toeplitz decay of the covariate correlation.
    pub kappa: f64,
    /// Latent effect scale.
    pub sigma_b: f64,
    /// Gaussian noise scale.
    pub sigma_eps: f64,
    pub beta0: DVector<f64>,
    /// Unit-norm index direction with positive first coordinate.
    pub alpha0: DVector<f64>,
    /// Monte Carlo replication count.
    pub b_reps: usize,
    pub seed: u64,
    /// Swap covariate Gaussians for variance-matched t(5) draws.
    pub heavy_tails: bool,
    /// Permit values outside the study grid (for diagnostics and tests).
    pub allow_off_design: bool,
}

impl Default for SimDesign {
    fn default() -> Self {
        let q = 3;
        SimDesign {
            n: 100,
            m: 5,
            family: OutcomeFamily::Gaussian,
            rho_latent: 0.0,
            kappa: 0.0,
            sigma_b: 0.6,
            sigma_eps: 1.0,
            beta0: DVector::from_column_slice(&[1.0, -1.0, 0.5]),
            alpha0: DVector::from_element(q, 1.0 / (q as f64).sqrt()),
            b_reps: 200,
            seed: 1,
            heavy_tails: false,
            allow_off_design: false,
        }
    }
}

impl SimDesign {
    /// True link on the rescaled index.
    pub fn eta0(utilde: f64) -> f64 {
        (2.0 * PI * utilde).sin()
    }

    /// True parameter in the sphere parameterization.
    pub fn theta0(&self) -> Theta {
        let q = self.alpha0.len();
        let phi0 = self.alpha0.rows(1, q - 1).into_owned();
        Theta::new(self.beta0.clone(), phi0).expect("alpha0 is unit norm with positive head")
    }

    /// Checks basic coherence, and membership in the study grid unless
    /// `allow_off_design` is set.
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m < 1 || self.b_reps < 1 {
            return Err(Error::config("need n >= 2, m >= 1 and at least one replication"));
        }
        if self.alpha0.len() < 2 {
            return Err(Error::config("index direction needs at least two coordinates"));
        }
        if (self.alpha0.norm() - 1.0).abs() > 1e-8 || self.alpha0[0] <= 0.0 {
            return Err(Error::config(
                "alpha0 must be unit norm with a positive first coordinate",
            ));
        }
        if self.sigma_b < 0.0 || self.sigma_eps <= 0.0 {
            return Err(Error::config("scale parameters out of range"));
        }
        if !(-1.0 + 1e-6..=1.0 - 1e-6).contains(&self.rho_latent) {
            return Err(Error::config("latent correlation outside (-1, 1)"));
        }
        if self.allow_off_design {
            return Ok(());
        }
        let near = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        let grid_ok = [100, 200].contains(&self.n)
            && self.m == 5
            && [0.0, 0.3, 0.6].iter().any(|&r| near(self.rho_latent, r))
            && [0.0, 0.3].iter().any(|&k| near(self.kappa, k))
            && near(self.sigma_b, 0.6)
            && near(self.sigma_eps, 1.0)
            && self.beta0.len() == 3
            && near(self.beta0[0], 1.0)
            && near(self.beta0[1], -1.0)
            && near(self.beta0[2], 0.5)
            && self.alpha0.len() == 3
            && self.alpha0.iter().all(|&a| near(a, 1.0 / 3f64.sqrt()));
        if !grid_ok {
            return Err(Error::config(
                "design lies outside the study grid; set allow_off_design to override",
            ));
        }
        Ok(())
    }
}

/// One simulated dataset with the pieces of the truth that metrics need.
#[derive(Debug, Clone)]
pub struct Replication {
    pub dataset: LongitudinalDataset,
    /// True parameter.
    pub theta0: Theta,
    /// Min-max bounds of the raw true index in this replication; the true
    /// link argument is `(u - u_lo) / (u_hi - u_lo)`.
    pub u_lo: f64,
    pub u_hi: f64,
    /// True conditional linear predictor per subject (before the latent
    /// effect), kept for distributional checks.
    pub xi0: Vec<DVector<f64>>,
}

impl Replication {
    /// True link on an equispaced grid of `l` rescaled index values.
    pub fn eta0_grid(&self, l: usize) -> Vec<f64> {
        (0..l)
            .map(|j| SimDesign::eta0(j as f64 / (l - 1).max(1) as f64))
            .collect()
    }

    /// Raw index values matching [`eta0_grid`](Self::eta0_grid).
    pub fn raw_grid(&self, l: usize) -> Vec<f64> {
        (0..l)
            .map(|j| {
                let t = j as f64 / (l - 1).max(1) as f64;
                self.u_lo + t * (self.u_hi - self.u_lo)
            })
            .collect()
    }
}

/// Generates one replication of the design. The replication index selects a
/// dedicated RNG substream, so replications are independent and the pair
/// `(design, rep)` is fully reproducible.
pub fn generate_replication(design: &SimDesign, rep: usize) -> Result<Replication> {
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(design.seed);
    rng.set_stream(rep as u64);

    let p = design.beta0.len();
    let q = design.alpha0.len();
    let w_dim = p + q;
    // Covariates: centered, unit variance, Toeplitz cross-correlation.
    let sigma_w = DMatrix::from_fn(w_dim, w_dim, |r, c| {
        design.kappa.powi((r as i32 - c as i32).abs())
    });
    let chol_w = sigma_w
        .cholesky()
        .ok_or_else(|| Error::numerical("covariate correlation is not positive definite"))?;
    let l_w = chol_w.l();
    let t_scale = (5.0f64 / 3.0).sqrt();
    let student = StudentT::new(5.0).expect("valid degrees of freedom");

    // Latent subject effect: AR(1) correlation, scale sigma_b.
    let r_b = DMatrix::from_fn(design.m, design.m, |r, c| {
        design.rho_latent.powi((r as i32 - c as i32).abs())
    });
    let l_b = r_b
        .cholesky()
        .ok_or_else(|| Error::numerical("latent correlation is not positive definite"))?
        .l();

    let mut xs = Vec::with_capacity(design.n);
    let mut zs = Vec::with_capacity(design.n);
    let mut u0 = Vec::with_capacity(design.n);
    let mut u_lo = f64::INFINITY;
    let mut u_hi = f64::NEG_INFINITY;
    for _ in 0..design.n {
        let mut x = DMatrix::zeros(design.m, p);
        let mut z = DMatrix::zeros(design.m, q);
        let mut u = DVector::zeros(design.m);
        for j in 0..design.m {
            let e = DVector::from_fn(w_dim, |_, _| {
                if design.heavy_tails {
                    let t: f64 = student.sample(&mut rng);
                    t / t_scale
                } else {
                    StandardNormal.sample(&mut rng)
                }
            });
            let w = &l_w * e;
            for k in 0..p {
                x[(j, k)] = w[k];
            }
            for k in 0..q {
                z[(j, k)] = w[p + k];
            }
            u[j] = z.row(j).transpose().dot(&design.alpha0);
            u_lo = u_lo.min(u[j]);
            u_hi = u_hi.max(u[j]);
        }
        xs.push(x);
        zs.push(z);
        u0.push(u);
    }
    if u_hi - u_lo < 1e-12 {
        let c = 0.5 * (u_lo + u_hi);
        u_lo = c - 0.5;
        u_hi = c + 0.5;
    }

    let mut subjects = Vec::with_capacity(design.n);
    let mut xi0 = Vec::with_capacity(design.n);
    for i in 0..design.n {
        let eb = DVector::from_fn(design.m, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let b = design.sigma_b * (&l_b * eb);
        let mut xi = DVector::zeros(design.m);
        let mut y = DVector::zeros(design.m);
        for j in 0..design.m {
            let utilde = (u0[i][j] - u_lo) / (u_hi - u_lo);
            xi[j] = xs[i].row(j).transpose().dot(&design.beta0) + SimDesign::eta0(utilde);
            let latent = xi[j] + b[j];
            y[j] = match design.family {
                OutcomeFamily::Gaussian => {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    latent + design.sigma_eps * e
                }
                OutcomeFamily::Bernoulli => {
                    let prob = 1.0 / (1.0 + (-latent).exp());
                    f64::from(rng.random::<f64>() < prob)
                }
                OutcomeFamily::Poisson => {
                    let mu = latent.clamp(-30.0, 25.0).exp().max(1e-12);
                    Poisson::new(mu).expect("positive mean").sample(&mut rng)
                }
            };
        }
        xi0.push(xi);
        subjects.push(SubjectBlock { id: format!("s{i:05}"), y, x: xs[i].clone(), z: zs[i].clone() });
    }
    let dataset = LongitudinalDataset::new(subjects)?;
    Ok(Replication { dataset, theta0: design.theta0(), u_lo, u_hi, xi0 })
}

/// Angle between two directions, invariant to sign flips: `arccos |a'b|`
/// after normalization, in `[0, pi/2]`.
pub fn angle_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let denom = a.norm() * b.norm();
    assert!(denom > 0.0, "angle of a zero vector");
    (a.dot(b) / denom).abs().min(1.0).acos()
}

/// Integrated squared error proxy: mean squared difference on a shared grid.
pub fn ise(eta_hat: &[f64], eta0: &[f64]) -> Result<f64> {
    if eta_hat.len() != eta0.len() {
        return Err(Error::domain(format!(
            "grid lengths differ: {} vs {}",
            eta_hat.len(),
            eta0.len()
        )));
    }
    if eta_hat.is_empty() {
        return Err(Error::domain("empty grids"));
    }
    let sum: f64 = eta_hat
        .iter()
        .zip(eta0.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / eta_hat.len() as f64)
}

/// Inference methods compared in the studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    ProfileBel,
    NaiveEl,
    GeeWald,
    GeePoly,
}

impl Method {
    pub const ALL: [Method; 4] =
        [Method::ProfileBel, Method::NaiveEl, Method::GeeWald, Method::GeePoly];

    pub fn name(&self) -> &'static str {
        match self {
            Method::ProfileBel => "profile_bel",
            Method::NaiveEl => "naive_el",
            Method::GeeWald => "gee_wald",
            Method::GeePoly => "gee_poly",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "profile_bel" => Ok(Method::ProfileBel),
            "naive_el" => Ok(Method::NaiveEl),
            "gee_wald" => Ok(Method::GeeWald),
            "gee_poly" => Ok(Method::GeePoly),
            other => Err(Error::config(format!("unknown method `{other}`"))),
        }
    }
}

/// Study-wide settings shared across design cells.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub methods: Vec<Method>,
    /// Working correlation families to run each cell under.
    pub working: Vec<CorrFamily>,
    pub fit_config: FitConfig,
    /// Sieve dimensions offered to the information criterion.
    pub k_candidates: Vec<usize>,
    pub level: f64,
    /// Grid length for link evaluation.
    pub grid_len: usize,
    /// When false, only point metrics are computed; interval construction
    /// (the expensive part) is skipped and no `cover_*`/`len_*` rows appear.
    pub compute_intervals: bool,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            methods: Method::ALL.to_vec(),
            working: vec![CorrFamily::Independence],
            fit_config: FitConfig::default(),
            k_candidates: vec![6, 8, 10, 12],
            level: 0.95,
            grid_len: 200,
            compute_intervals: true,
        }
    }
}

/// One row of the long-format metric table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub family: String,
    pub n: usize,
    pub rho: f64,
    pub working_corr: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

/// Long-format metric table keyed by (family, n, rho, working_corr, method,
/// metric).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    /// Value lookup within a full key.
    pub fn lookup(
        &self,
        family: &str,
        n: usize,
        rho: f64,
        working: &str,
        method: &str,
        metric: &str,
    ) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| {
                r.family == family
                    && r.n == n
                    && (r.rho - rho).abs() < 1e-12
                    && r.working_corr == working
                    && r.method == method
                    && r.metric == metric
            })
            .map(|r| r.value)
    }

    /// Serializes the table in the artifact CSV schema.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("family,n,rho,working_corr,method,metric,value\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.family, r.n, r.rho, r.working_corr, r.method, r.metric, r.value
            ));
        }
        out
    }

    /// Cells whose failure rate exceeded the 10% reporting threshold.
    pub fn flagged_cells(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter(|r| r.metric == "fail_rate" && r.value > 0.10)
            .map(|r| {
                format!(
                    "{} n={} rho={} {} {}",
                    r.family, r.n, r.rho, r.working_corr, r.method
                )
            })
            .collect()
    }
}

/// Confidence-interval record for one component.
#[derive(Debug, Clone, Copy)]
struct CiRec {
    lo: f64,
    hi: f64,
}

/// Per-replication output of the working-correlation profile fit, serving
/// the profile BEL and Wald methods.
struct SharedFit {
    theta: DVector<f64>,
    ise: f64,
    angle: f64,
    k: usize,
    bel: Option<Vec<CiRec>>,
    wald: Option<Vec<CiRec>>,
}

/// Per-replication output of the naive method, always built on an
/// independence fit so it cannot depend on the requested working
/// correlation.
struct NaiveRec {
    theta: DVector<f64>,
    ise: f64,
    angle: f64,
    k: usize,
    cis: Option<Vec<CiRec>>,
}

/// Per-replication output of the polynomial baseline.
struct PolyRec {
    theta: DVector<f64>,
    ise: f64,
    angle: f64,
    cis: Option<Vec<CiRec>>,
}

struct RepRecord {
    fit: Option<SharedFit>,
    naive: Option<NaiveRec>,
    poly: Option<PolyRec>,
}

/// The components whose intervals the studies track: `beta1`, `beta2`,
/// `alpha2`.
const CI_COMPONENTS: [ComponentSel; 3] =
    [ComponentSel::Beta(0), ComponentSel::Beta(1), ComponentSel::Alpha(1)];
const CI_LABELS: [&str; 3] = ["beta1", "beta2", "alpha2"];

fn wald_ci_by_name(intervals: &[competitors::WaldInterval], name: &str) -> Option<CiRec> {
    intervals
        .iter()
        .find(|iv| iv.component == name)
        .map(|iv| CiRec { lo: iv.lo, hi: iv.hi })
}

fn el_cis_for(
    dataset: &LongitudinalDataset,
    fit: &FitResult,
    spec: &WorkingCovSpec,
    cfg: &FitConfig,
    study: &StudyConfig,
    method: CiMethod,
) -> Option<Vec<CiRec>> {
    let mut out = Vec::with_capacity(CI_COMPONENTS.len());
    for comp in CI_COMPONENTS {
        let ci =
            bel::profile_ci_with(dataset, fit, comp, study.level, spec, cfg, method).ok()?;
        out.push(CiRec { lo: ci.lo, hi: ci.hi });
    }
    Some(out)
}

fn run_replication(
    design: &SimDesign,
    rep: usize,
    corr: CorrFamily,
    study: &StudyConfig,
) -> RepRecord {
    let mut record = RepRecord { fit: None, naive: None, poly: None };
    let Ok(replication) = generate_replication(design, rep) else {
        return record;
    };
    let dataset = &replication.dataset;
    let spec = WorkingCovSpec::new(corr, design.family);
    let raw_grid = replication.raw_grid(study.grid_len);
    let eta0 = replication.eta0_grid(study.grid_len);

    let fit_under = |spec: &WorkingCovSpec| -> Option<(FitResult, FitConfig)> {
        let k = splines::select_k(dataset, None, spec, &study.fit_config, &study.k_candidates)
            .ok()?;
        let cfg = FitConfig { k, ..study.fit_config.clone() };
        match profile::fit(dataset, spec, &cfg, None) {
            Ok(fit) if fit.converged => Some((fit, cfg)),
            _ => None,
        }
    };
    let link_metrics = |fit: &FitResult| -> (f64, f64) {
        let eta_hat: Vec<f64> = raw_grid.iter().map(|&u| fit.sieve_hat.eval(u)).collect();
        (
            ise(&eta_hat, &eta0).unwrap_or(f64::NAN),
            angle_error(fit.alpha_hat.as_vector(), &design.alpha0),
        )
    };

    let wants_shared = study
        .methods
        .iter()
        .any(|m| matches!(m, Method::ProfileBel | Method::GeeWald))
        || (corr == CorrFamily::Independence && study.methods.contains(&Method::NaiveEl));
    let shared = if wants_shared { fit_under(&spec) } else { None };
    if let Some((fit, cfg)) = &shared {
        let (ise_val, angle) = link_metrics(fit);
        let bel_cis = (study.compute_intervals && study.methods.contains(&Method::ProfileBel))
            .then(|| el_cis_for(dataset, fit, &spec, cfg, study, CiMethod::ProfileBel))
            .flatten();
        let wald_cis = if study.compute_intervals && study.methods.contains(&Method::GeeWald) {
            competitors::gee_wald_from_fit(dataset, fit, cfg, study.level)
                .ok()
                .and_then(|w| {
                    CI_LABELS
                        .iter()
                        .map(|name| wald_ci_by_name(&w.intervals, name))
                        .collect::<Option<Vec<_>>>()
                })
        } else {
            None
        };
        record.fit = Some(SharedFit {
            theta: fit.theta_hat.as_vector(),
            ise: ise_val,
            angle,
            k: cfg.k,
            bel: bel_cis,
            wald: wald_cis,
        });
    }

    if study.methods.contains(&Method::NaiveEl) {
        // The naive method ignores within-subject correlation, so its fit,
        // point metrics and intervals come from the independence working
        // covariance regardless of the cell's requested correlation.
        let ind_spec = WorkingCovSpec::new(CorrFamily::Independence, design.family);
        let owned: Option<(FitResult, FitConfig)>;
        let naive_fit = if corr == CorrFamily::Independence {
            shared.as_ref()
        } else {
            owned = fit_under(&ind_spec);
            owned.as_ref()
        };
        if let Some((fit, cfg)) = naive_fit {
            let (ise_val, angle) = link_metrics(fit);
            let cis = study
                .compute_intervals
                .then(|| el_cis_for(dataset, fit, &ind_spec, cfg, study, CiMethod::NaiveEl))
                .flatten();
            record.naive = Some(NaiveRec {
                theta: fit.theta_hat.as_vector(),
                ise: ise_val,
                angle,
                k: cfg.k,
                cis,
            });
        }
    }

    if study.methods.contains(&Method::GeePoly) {
        if let Ok(poly) =
            competitors::gee_poly(dataset, &spec, &study.fit_config, 2, study.level)
        {
            let eta_hat: Vec<f64> = raw_grid.iter().map(|&u| poly.eta(u)).collect();
            let ise_val = ise(&eta_hat, &eta0).unwrap_or(f64::NAN);
            let angle = angle_error(poly.alpha_hat.as_vector(), &design.alpha0);
            let cis = study.compute_intervals.then(|| {
                CI_LABELS
                    .iter()
                    .map(|name| wald_ci_by_name(&poly.intervals, name))
                    .collect::<Option<Vec<_>>>()
            }).flatten();
            record.poly = Some(PolyRec {
                theta: poly.theta_hat.as_vector(),
                ise: ise_val,
                angle,
                cis,
            });
        }
    }
    record
}

/// Point-metric accumulator over converged replications.
struct PointAgg {
    count: usize,
    bias: DVector<f64>,
    mse: DVector<f64>,
    angle: f64,
    ise: f64,
    ks: Vec<usize>,
}

impl PointAgg {
    fn new(p: usize) -> Self {
        PointAgg { count: 0, bias: DVector::zeros(p), mse: DVector::zeros(p), angle: 0.0, ise: 0.0, ks: Vec::new() }
    }

    fn add(&mut self, beta_hat: &DVector<f64>, beta0: &DVector<f64>, angle: f64, ise: f64, k: usize) {
        self.count += 1;
        for j in 0..beta0.len() {
            let e = beta_hat[j] - beta0[j];
            self.bias[j] += e;
            self.mse[j] += e * e;
        }
        self.angle += angle;
        self.ise += ise;
        self.ks.push(k);
    }

    fn median_k(&self) -> f64 {
        if self.ks.is_empty() {
            return f64::NAN;
        }
        let mut ks = self.ks.clone();
        ks.sort_unstable();
        let l = ks.len();
        if l % 2 == 1 {
            ks[l / 2] as f64
        } else {
            (ks[l / 2 - 1] + ks[l / 2]) as f64 / 2.0
        }
    }
}

/// Coverage/length accumulator for one method.
struct CiAgg {
    count: usize,
    cover: [usize; 3],
    len_sum: [f64; 3],
    len_count: [usize; 3],
}

impl CiAgg {
    fn new() -> Self {
        CiAgg { count: 0, cover: [0; 3], len_sum: [0.0; 3], len_count: [0; 3] }
    }

    fn add(&mut self, cis: &[CiRec], targets: &[f64; 3]) {
        self.count += 1;
        for (j, ci) in cis.iter().enumerate() {
            if ci.lo <= targets[j] && targets[j] <= ci.hi {
                self.cover[j] += 1;
            }
            let len = ci.hi - ci.lo;
            if len.is_finite() {
                self.len_sum[j] += len;
                self.len_count[j] += 1;
            }
        }
    }
}

fn emit_point_rows(
    table: &mut MetricsTable,
    key: (&str, usize, f64, &str),
    method: &str,
    agg: &PointAgg,
    p: usize,
    b_reps: usize,
    k_fixed: Option<f64>,
) {
    let (family, n, rho, working) = key;
    let mut push = |metric: String, value: f64| {
        table.push(MetricRow {
            family: family.to_string(),
            n,
            rho,
            working_corr: working.to_string(),
            method: method.to_string(),
            metric,
            value,
        });
    };
    let c = agg.count.max(1) as f64;
    for j in 0..p {
        push(format!("bias_beta{}", j + 1), agg.bias[j] / c);
        push(format!("rmse_beta{}", j + 1), (agg.mse[j] / c).sqrt());
    }
    push("angle".into(), agg.angle / c);
    push("ise_mean".into(), agg.ise / c);
    push("k_med".into(), k_fixed.unwrap_or_else(|| agg.median_k()));
    push("fail_rate".into(), 1.0 - agg.count as f64 / b_reps as f64);
}

fn emit_ci_rows(
    table: &mut MetricsTable,
    key: (&str, usize, f64, &str),
    method: &str,
    agg: &CiAgg,
) {
    let (family, n, rho, working) = key;
    let mut push = |metric: String, value: f64| {
        table.push(MetricRow {
            family: family.to_string(),
            n,
            rho,
            working_corr: working.to_string(),
            method: method.to_string(),
            metric,
            value,
        });
    };
    for (j, label) in CI_LABELS.iter().enumerate() {
        let denom = agg.count.max(1) as f64;
        push(format!("cover_{label}"), agg.cover[j] as f64 / denom);
        let len_denom = agg.len_count[j].max(1) as f64;
        push(format!("len_{label}"), agg.len_sum[j] / len_denom);
    }
}

/// Runs every design cell under every requested working correlation and
/// aggregates the metric table. Replications run in parallel but aggregate
/// in replication order, so results do not depend on scheduling.
pub fn run_study(designs: &[SimDesign], study: &StudyConfig) -> Result<MetricsTable> {
    if designs.is_empty() {
        return Err(Error::config("no design cells requested"));
    }
    if study.methods.is_empty() {
        return Err(Error::config("no methods requested"));
    }
    if !(study.level > 0.0 && study.level < 1.0) {
        return Err(Error::config("confidence level outside (0, 1)"));
    }
    study.fit_config.validate()?;
    let mut table = MetricsTable::default();
    for design in designs {
        design.validate()?;
        for &corr in &study.working {
            run_cell(design, corr, study, &mut table);
        }
    }
    Ok(table)
}

fn run_cell(design: &SimDesign, corr: CorrFamily, study: &StudyConfig, table: &mut MetricsTable) {
    let records: Vec<RepRecord> = (0..design.b_reps)
        .into_par_iter()
        .map(|rep| run_replication(design, rep, corr, study))
        .collect();

    let p = design.beta0.len();
    let targets = [design.beta0[0], design.beta0[1], design.alpha0[1]];
    let mut shared_points = PointAgg::new(p);
    let mut naive_points = PointAgg::new(p);
    let mut poly_points = PointAgg::new(p);
    let mut bel_ci = CiAgg::new();
    let mut naive_ci = CiAgg::new();
    let mut wald_ci = CiAgg::new();
    let mut poly_ci = CiAgg::new();
    for r in &records {
        if let Some(f) = &r.fit {
            let beta_hat = f.theta.rows(0, p).into_owned();
            shared_points.add(&beta_hat, &design.beta0, f.angle, f.ise, f.k);
            if let Some(cis) = &f.bel {
                bel_ci.add(cis, &targets);
            }
            if let Some(cis) = &f.wald {
                wald_ci.add(cis, &targets);
            }
        }
        if let Some(nv) = &r.naive {
            let beta_hat = nv.theta.rows(0, p).into_owned();
            naive_points.add(&beta_hat, &design.beta0, nv.angle, nv.ise, nv.k);
            if let Some(cis) = &nv.cis {
                naive_ci.add(cis, &targets);
            }
        }
        if let Some(poly) = &r.poly {
            let beta_hat = poly.theta.rows(0, p).into_owned();
            poly_points.add(&beta_hat, &design.beta0, poly.angle, poly.ise, 2);
            if let Some(cis) = &poly.cis {
                poly_ci.add(cis, &targets);
            }
        }
    }

    let family = design.family.name();
    let working = corr.name();
    let key = (family, design.n, design.rho_latent, working);
    for method in &study.methods {
        let (points, cis, k_fixed) = match method {
            Method::ProfileBel => (&shared_points, &bel_ci, None),
            Method::NaiveEl => (&naive_points, &naive_ci, None),
            Method::GeeWald => (&shared_points, &wald_ci, None),
            Method::GeePoly => (&poly_points, &poly_ci, Some(2.0)),
        };
        emit_point_rows(table, key, method.name(), points, p, design.b_reps, k_fixed);
        if study.compute_intervals {
            emit_ci_rows(table, key, method.name(), cis);
        }
    }
}
