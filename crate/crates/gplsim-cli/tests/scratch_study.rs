use std::time::Instant;

use gplsim_core::sim::run_study;
use gplsim_core::{CorrFamily, FitConfig, Method, OutcomeFamily, SimDesign, StudyConfig};

#[test]
fn point_metric_cells() {
    gplsim_core::init_threads();
    let study = |working: CorrFamily| StudyConfig {
        methods: vec![Method::ProfileBel],
        working: vec![working],
        fit_config: FitConfig::default(),
        k_candidates: vec![6, 8, 10, 12],
        level: 0.95,
        grid_len: 200,
        compute_intervals: false,
    };
    let cells: Vec<(OutcomeFamily, usize, CorrFamily)> = vec![
        (OutcomeFamily::Gaussian, 100, CorrFamily::Ar1),
        (OutcomeFamily::Gaussian, 200, CorrFamily::Ar1),
        (OutcomeFamily::Bernoulli, 100, CorrFamily::Ar1),
        (OutcomeFamily::Bernoulli, 200, CorrFamily::Ar1),
        (OutcomeFamily::Poisson, 100, CorrFamily::Independence),
        (OutcomeFamily::Poisson, 200, CorrFamily::Independence),
    ];
    for (family, n, working) in cells {
        let design = SimDesign {
            n,
            family,
            b_reps: 200,
            seed: 42,
            ..SimDesign::default()
        };
        let t0 = Instant::now();
        let table = run_study(&[design], &study(working)).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let get = |metric: &str| {
            table
                .lookup(family.name(), n, 0.0, working.name(), "profile_bel", metric)
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "MISSING".into())
        };
        println!(
            "CELL {family:?} n={n} working={working:?}  rmse_beta2={} angle={} ise={} k_med={} fail={}  [{secs:.0}s]",
            get("rmse_beta2"),
            get("angle"),
            get("ise_mean"),
            get("k_med"),
            get("fail_rate"),
        );
    }
}
