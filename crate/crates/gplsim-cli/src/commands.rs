//! Command implementations: fit, infer, band, simulate, cv, stability.
//! Each command writes its artifact files into the configured output
//! directory along with the fully resolved configuration.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use gplsim_core::model::unit_deviance;
use gplsim_core::{
    bel, bootstrap, competitors, profile, sim, splines, CiMethod, ComponentSel, CorrFamily,
    FitConfig, FitResult, LongitudinalDataset, Method, OutcomeFamily, SimDesign, StudyConfig,
    SubjectBlock, WorkingCovSpec,
};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::ingest::ingest_csv;
use crate::output::{csv_row, fmt_f64, read_csv, write_csv};
use crate::svg;

/// What a command reports back for exit-code purposes.
#[derive(Debug, Clone, Copy)]
pub struct CommandOutcome {
    pub converged: bool,
    pub allow_nonconverged: bool,
}

impl CommandOutcome {
    fn new(cfg: &RunConfig, converged: bool) -> Self {
        CommandOutcome { converged, allow_nonconverged: cfg.allow_nonconverged }
    }

    /// Exit-code rule: success iff converged or explicitly allowed.
    pub fn success(&self) -> bool {
        self.converged || self.allow_nonconverged
    }
}

/// The stability report's fixed working-correlation sweep, in output order.
const CORR_SWEEP: [CorrFamily; 3] =
    [CorrFamily::Independence, CorrFamily::Ar1, CorrFamily::Exchangeable];

struct FittedModel {
    dataset: LongitudinalDataset,
    fit: FitResult,
    spec: WorkingCovSpec,
    fit_config: FitConfig,
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Io { path: cfg.out_dir.clone(), source: e })?;
    cfg.write_resolved(&cfg.out_dir)
}

fn fit_dataset(cfg: &RunConfig, dataset: LongitudinalDataset) -> Result<FittedModel> {
    let spec = WorkingCovSpec::new(cfg.parsed_corr()?, cfg.parsed_family()?);
    let base = cfg.fit_config();
    let k = splines::select_k(&dataset, None, &spec, &base, &cfg.k_candidates)?;
    let fit_config = FitConfig { k, ..base };
    let fit = profile::fit(&dataset, &spec, &fit_config, None)?;
    Ok(FittedModel { dataset, fit, spec, fit_config })
}

/// Raw index grid over the fitted sieve's range.
fn raw_grid(fit: &FitResult, len: usize) -> Vec<f64> {
    let (lo, hi) = fit.sieve_hat.range();
    (0..len)
        .map(|j| lo + (hi - lo) * j as f64 / (len - 1) as f64)
        .collect()
}

pub fn cmd_fit(cfg: &RunConfig, data: &Path) -> Result<CommandOutcome> {
    prepare_out_dir(cfg)?;
    let dataset = ingest_csv(data, cfg.standardize)?;
    let model = fit_dataset(cfg, dataset)?;
    write_fit_outputs(cfg, &model)?;
    Ok(CommandOutcome::new(cfg, model.fit.converged))
}

fn write_fit_outputs(cfg: &RunConfig, model: &FittedModel) -> Result<()> {
    let p = model.dataset.p();
    let theta = model.fit.theta_hat.as_vector();
    let alpha = model.fit.alpha_hat.as_vector();
    let mut rows = Vec::with_capacity(p + alpha.len());
    for j in 0..p {
        rows.push(csv_row(&[format!("beta{}", j + 1), fmt_f64(theta[j])]));
    }
    for j in 0..alpha.len() {
        rows.push(csv_row(&[format!("alpha{}", j + 1), fmt_f64(alpha[j])]));
    }
    write_csv(&cfg.out_dir.join("theta_hat.csv"), "component,estimate", rows)?;

    let grid = raw_grid(&model.fit, cfg.grid_len);
    let eta_rows: Vec<String> = grid
        .iter()
        .map(|&u| csv_row(&[fmt_f64(u), fmt_f64(model.fit.sieve_hat.eval(u))]))
        .collect();
    write_csv(&cfg.out_dir.join("eta_hat.csv"), "grid,value", eta_rows)?;

    let meta = serde_json::json!({
        "converged": model.fit.converged,
        "k": model.fit.sieve_hat.k(),
        "rho_hat": model.fit.rho_hat,
        "iterations": model.fit.n_outer,
    });
    let path = cfg.out_dir.join("fit_meta.json");
    fs::write(&path, format!("{meta:#}\n")).map_err(|e| CliError::Io { path, source: e })?;
    Ok(())
}

pub fn cmd_infer(cfg: &RunConfig, data: &Path) -> Result<CommandOutcome> {
    prepare_out_dir(cfg)?;
    let dataset = ingest_csv(data, cfg.standardize)?;
    let model = fit_dataset(cfg, dataset)?;
    let methods = cfg.parsed_methods()?;
    let p = model.dataset.p();
    let q = model.dataset.q();
    let components: Vec<ComponentSel> = (0..p)
        .map(ComponentSel::Beta)
        .chain((0..q).map(ComponentSel::Alpha))
        .collect();

    // The naive method ignores the working correlation, so its intervals come
    // from an independence fit and are identical across `--corr-family` runs.
    let naive_model: Option<FittedModel> = if methods.contains(&Method::NaiveEl)
        && cfg.parsed_corr()? != CorrFamily::Independence
    {
        let mut icfg = cfg.clone();
        icfg.corr_family = "independence".into();
        Some(fit_dataset(&icfg, model.dataset.clone())?)
    } else {
        None
    };

    let mut converged = model.fit.converged;
    let mut rows = Vec::new();
    for method in &methods {
        match method {
            Method::ProfileBel => {
                for &comp in &components {
                    let ci = bel::profile_ci_with(
                        &model.dataset,
                        &model.fit,
                        comp,
                        cfg.level,
                        &model.spec,
                        &model.fit_config,
                        CiMethod::ProfileBel,
                    )?;
                    rows.push(ci_row(&comp.name(), method.name(), ci.lo, ci.hi));
                }
            }
            Method::NaiveEl => {
                let nm = naive_model.as_ref().unwrap_or(&model);
                converged = converged && nm.fit.converged;
                for &comp in &components {
                    let ci = bel::profile_ci_with(
                        &nm.dataset,
                        &nm.fit,
                        comp,
                        cfg.level,
                        &nm.spec,
                        &nm.fit_config,
                        CiMethod::NaiveEl,
                    )?;
                    rows.push(ci_row(&comp.name(), method.name(), ci.lo, ci.hi));
                }
            }
            Method::GeeWald => {
                let wald = competitors::gee_wald_from_fit(
                    &model.dataset,
                    &model.fit,
                    &model.fit_config,
                    cfg.level,
                )?;
                for iv in &wald.intervals {
                    rows.push(ci_row(&iv.component, method.name(), iv.lo, iv.hi));
                }
            }
            Method::GeePoly => {
                let poly = competitors::gee_poly(
                    &model.dataset,
                    &model.spec,
                    &model.fit_config,
                    2,
                    cfg.level,
                )?;
                converged = converged && poly.converged;
                for iv in &poly.intervals {
                    rows.push(ci_row(&iv.component, method.name(), iv.lo, iv.hi));
                }
            }
        }
    }
    write_csv(&cfg.out_dir.join("ci.csv"), "component,method,lo,hi,length", rows.clone())?;
    let corr_name = cfg.parsed_corr()?.name();
    write_csv(
        &cfg.out_dir.join(format!("ci_{corr_name}.csv")),
        "component,method,lo,hi,length",
        rows,
    )?;
    Ok(CommandOutcome::new(cfg, converged))
}

fn ci_row(component: &str, method: &str, lo: f64, hi: f64) -> String {
    csv_row(&[
        component.to_string(),
        method.to_string(),
        fmt_f64(lo),
        fmt_f64(hi),
        fmt_f64(hi - lo),
    ])
}

pub fn cmd_band(cfg: &RunConfig, data: &Path) -> Result<CommandOutcome> {
    prepare_out_dir(cfg)?;
    let dataset = ingest_csv(data, cfg.standardize)?;
    let model = fit_dataset(cfg, dataset)?;
    let band = bootstrap::cluster_bootstrap_band(
        &model.dataset,
        &model.fit,
        &model.spec,
        &model.fit_config,
        cfg.b_star,
        cfg.level,
        cfg.grid_len,
        cfg.seed,
    )?;
    let grid = raw_grid(&model.fit, band.grid.len());
    let rows: Vec<String> = (0..grid.len())
        .map(|j| {
            csv_row(&[
                fmt_f64(grid[j]),
                fmt_f64(band.eta_hat[j]),
                fmt_f64(band.lo[j]),
                fmt_f64(band.hi[j]),
            ])
        })
        .collect();
    write_csv(&cfg.out_dir.join("band.csv"), "grid,eta_hat,lo,hi", rows)?;

    let mut eta = band.eta_hat.clone();
    let mut lo = band.lo.clone();
    let mut hi = band.hi.clone();
    svg::normalize_curve(&mut eta, &mut lo, &mut hi);
    let path = cfg.out_dir.join("band.svg");
    fs::write(&path, svg::band_svg(&grid, &eta, &lo, &hi))
        .map_err(|e| CliError::Io { path, source: e })?;
    Ok(CommandOutcome::new(cfg, model.fit.converged))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<CommandOutcome> {
    prepare_out_dir(cfg)?;
    let design = SimDesign {
        n: cfg.n,
        m: cfg.m,
        family: cfg.parsed_family()?,
        rho_latent: cfg.rho,
        kappa: cfg.kappa,
        b_reps: cfg.b,
        seed: cfg.seed,
        heavy_tails: cfg.heavy_tails,
        allow_off_design: cfg.allow_off_design,
        ..SimDesign::default()
    };
    let study = StudyConfig {
        methods: cfg.parsed_methods()?,
        working: vec![cfg.parsed_corr()?],
        fit_config: cfg.fit_config(),
        k_candidates: cfg.k_candidates.clone(),
        level: cfg.level,
        grid_len: cfg.grid_len,
        compute_intervals: true,
    };
    let table = sim::run_study(&[design], &study)?;
    let path = cfg.out_dir.join("metrics.csv");
    fs::write(&path, table.to_csv_string()).map_err(|e| CliError::Io { path, source: e })?;
    Ok(CommandOutcome::new(cfg, true))
}

/// Accumulated held-out deviance for one (method, working correlation) cell.
#[derive(Default, Clone, Copy)]
struct DevSum {
    sum: f64,
    count: usize,
    converged: bool,
}

pub fn cmd_cv(cfg: &RunConfig, data: &Path) -> Result<CommandOutcome> {
    prepare_out_dir(cfg)?;
    let dataset = ingest_csv(data, cfg.standardize)?;
    let n = dataset.n();
    let folds = cfg.cv_folds;
    if n < folds {
        return Err(CliError::Config(format!(
            "{folds} folds over {n} subjects would leave a fold empty"
        )));
    }
    let methods = cfg.parsed_methods()?;
    let family = cfg.parsed_family()?;

    // Subject-level folds from a seeded shuffle; fold f takes every
    // folds-th subject of the shuffled order, so all folds are nonempty.
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order.shuffle(&mut rng);
    let fold_members: Vec<Vec<usize>> = (0..folds)
        .map(|f| order.iter().copied().skip(f).step_by(folds).collect())
        .collect();

    let fold_results: Vec<Result<HashMap<(Method, CorrFamily), DevSum>>> = fold_members
        .par_iter()
        .map(|held_out| cv_fold(cfg, &dataset, held_out, &methods, family))
        .collect();

    let mut totals: HashMap<(Method, CorrFamily), DevSum> = HashMap::new();
    for fr in fold_results {
        for (key, ds) in fr? {
            let t = totals.entry(key).or_insert(DevSum { converged: true, ..DevSum::default() });
            t.sum += ds.sum;
            t.count += ds.count;
            t.converged = t.converged && ds.converged;
        }
    }

    let mut converged = true;
    let mut rows = Vec::new();
    for method in &methods {
        for corr in CORR_SWEEP {
            let cell = totals
                .get(&(*method, corr))
                .ok_or_else(|| CliError::Config("cross-validation cell missing".into()))?;
            converged = converged && cell.converged;
            rows.push(csv_row(&[
                method.name().to_string(),
                corr.name().to_string(),
                fmt_f64(cell.sum / cell.count as f64),
            ]));
        }
    }
    write_csv(&cfg.out_dir.join("cv.csv"), "method,working_corr,mean_deviance", rows)?;
    Ok(CommandOutcome::new(cfg, converged))
}

/// Fits every requested estimator on the training split and scores held-out
/// observations by mean unit deviance.
fn cv_fold(
    cfg: &RunConfig,
    dataset: &LongitudinalDataset,
    held_out: &[usize],
    methods: &[Method],
    family: OutcomeFamily,
) -> Result<HashMap<(Method, CorrFamily), DevSum>> {
    let held: std::collections::HashSet<usize> = held_out.iter().copied().collect();
    let train_subjects: Vec<SubjectBlock> = dataset
        .subjects()
        .iter()
        .enumerate()
        .filter(|(i, _)| !held.contains(i))
        .map(|(_, s)| s.clone())
        .collect();
    let train = LongitudinalDataset::new(train_subjects)?;
    let test: Vec<&SubjectBlock> =
        held_out.iter().map(|&i| &dataset.subjects()[i]).collect();
    let base = cfg.fit_config();

    let wants_profile = methods
        .iter()
        .any(|m| matches!(m, Method::ProfileBel | Method::GeeWald));
    let wants_naive = methods.contains(&Method::NaiveEl);
    let wants_poly = methods.contains(&Method::GeePoly);

    let mut out: HashMap<(Method, CorrFamily), DevSum> = HashMap::new();

    // The independence-profiled estimator ignores the working correlation,
    // so one fit serves all three report columns.
    if wants_naive {
        let spec = WorkingCovSpec::new(CorrFamily::Independence, family);
        let k = splines::select_k(&train, None, &spec, &base, &cfg.k_candidates)?;
        let fit = profile::fit(&train, &spec, &FitConfig { k, ..base.clone() }, None)?;
        let ds = profile_deviance(&fit, family, &test)?;
        for corr in CORR_SWEEP {
            out.insert(
                (Method::NaiveEl, corr),
                DevSum { converged: fit.converged, ..ds },
            );
        }
    }

    for corr in CORR_SWEEP {
        let spec = WorkingCovSpec::new(corr, family);
        if wants_profile {
            let k = splines::select_k(&train, None, &spec, &base, &cfg.k_candidates)?;
            let fit = profile::fit(&train, &spec, &FitConfig { k, ..base.clone() }, None)?;
            let ds = profile_deviance(&fit, family, &test)?;
            let cell = DevSum { converged: fit.converged, ..ds };
            for method in [Method::ProfileBel, Method::GeeWald] {
                if methods.contains(&method) {
                    out.insert((method, corr), cell);
                }
            }
        }
        if wants_poly {
            let poly = competitors::gee_poly(&train, &spec, &base, 2, cfg.level)?;
            let mut sum = 0.0;
            let mut count = 0;
            let beta = poly.theta_hat.as_vector();
            let alpha = poly.alpha_hat.as_vector();
            for s in &test {
                for j in 0..s.m() {
                    let u = s.z.row(j).transpose().dot(alpha);
                    let xi = s.x.row(j).transpose().dot(&beta.rows(0, s.x.ncols()).into_owned())
                        + poly.eta(u);
                    let mu = family.inv_link(xi);
                    sum += unit_deviance(family, s.y[j], mu)?;
                    count += 1;
                }
            }
            out.insert(
                (Method::GeePoly, corr),
                DevSum { sum, count, converged: poly.converged },
            );
        }
    }
    Ok(out)
}

fn profile_deviance(
    fit: &FitResult,
    family: OutcomeFamily,
    test: &[&SubjectBlock],
) -> Result<DevSum> {
    let theta = fit.theta_hat.as_vector();
    let alpha = fit.alpha_hat.as_vector();
    let mut sum = 0.0;
    let mut count = 0;
    for s in test {
        let p = s.x.ncols();
        for j in 0..s.m() {
            let u = s.z.row(j).transpose().dot(alpha);
            let xi = s.x.row(j).transpose().dot(&theta.rows(0, p).into_owned())
                + fit.sieve_hat.eval(u);
            let mu = family.inv_link(xi);
            sum += unit_deviance(family, s.y[j], mu)?;
            count += 1;
        }
    }
    Ok(DevSum { sum, count, converged: true })
}

pub fn cmd_stability(cfg: &RunConfig) -> Result<CommandOutcome> {
    prepare_out_dir(cfg)?;
    let mut missing = Vec::new();
    let mut files: Vec<(CorrFamily, PathBuf)> = Vec::new();
    for corr in CORR_SWEEP {
        let path = cfg.out_dir.join(format!("ci_{}.csv", corr.name()));
        if path.exists() {
            files.push((corr, path));
        } else {
            missing.push(format!("ci_{}.csv", corr.name()));
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Config(format!(
            "stability needs an infer run per working correlation; missing: {}",
            missing.join(", ")
        )));
    }

    // Keyed by (component, method); row order follows the first file.
    let mut order: Vec<(String, String)> = Vec::new();
    let mut lengths: HashMap<(String, String), Vec<f64>> = HashMap::new();
    for (idx, (corr, path)) in files.iter().enumerate() {
        let (header, rows) = read_csv(path)?;
        if header != "component,method,lo,hi,length" {
            return Err(CliError::Config(format!(
                "{}: unexpected header `{header}`",
                path.display()
            )));
        }
        for row in rows {
            if row.len() != 5 {
                return Err(CliError::Config(format!(
                    "{}: malformed row `{}`",
                    path.display(),
                    row.join(",")
                )));
            }
            let key = (row[0].clone(), row[1].clone());
            let len: f64 = row[4].parse().map_err(|_| {
                CliError::Config(format!("{}: bad length `{}`", path.display(), row[4]))
            })?;
            if idx == 0 {
                order.push(key.clone());
                lengths.insert(key, vec![len]);
            } else {
                lengths
                    .get_mut(&key)
                    .ok_or_else(|| {
                        CliError::Config(format!(
                            "{} has a row for ({}, {}) not present under {}",
                            path.display(),
                            key.0,
                            key.1,
                            files[0].1.display()
                        ))
                    })?
                    .push(len);
            }
        }
        let expected = order.len();
        let complete = lengths.values().filter(|v| v.len() == idx + 1).count();
        if complete != expected {
            return Err(CliError::Config(format!(
                "ci_{}.csv is missing rows present under independence",
                corr.name()
            )));
        }
    }

    let rows: Vec<String> = order
        .iter()
        .map(|key| {
            let ls = &lengths[key];
            let avg = ls.iter().sum::<f64>() / ls.len() as f64;
            let max = ls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = ls.iter().copied().fold(f64::INFINITY, f64::min);
            csv_row(&[key.0.clone(), key.1.clone(), fmt_f64(avg), fmt_f64(max - min)])
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("stability.csv"),
        "component,method,avg_length,range",
        rows,
    )?;
    Ok(CommandOutcome::new(cfg, true))
}
