use llb_core::analysis::fit_slope;
use llb_core::clt::{run_clt, CltConfig};
use llb_core::dynamics::{default_initial, ModelParams, TimeGrid};
use llb_core::field::{Grid1D, VectorField};
use llb_core::ldp::{compactness_probe, estimate_rate, rate_cost, skeleton_terminal, RateProblem};
use llb_core::noise::{ControlPath, CovarianceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Setup {
    grid: Grid1D,
    tgrid: TimeGrid,
    spec: CovarianceSpec,
    u0: VectorField,
}

fn setup() -> Setup {
    let grid = Grid1D::new(31).unwrap();
    Setup {
        grid,
        tgrid: TimeGrid::new(0.25, 250).unwrap(),
        spec: CovarianceSpec::new(4, 4.0).unwrap(),
        u0: default_initial(grid, 0.8, 0.4),
    }
}

#[test]
fn uncontrolled_target_has_zero_rate() {
    let s = setup();
    let zero = ControlPath::zeros(250, s.tgrid.dt(), 4).unwrap();
    let target = skeleton_terminal(&zero, ModelParams::default(), s.tgrid, &s.spec, &s.u0).unwrap();
    let est = estimate_rate(&RateProblem::new(target, 2, 5), ModelParams::default(), s.tgrid, &s.spec, &s.u0).unwrap();
    assert!(est.cost <= 1e-3 && est.misfit <= 1e-3, "{} {}", est.cost, est.misfit);
    assert!(est.converged);
}

#[test]
fn round_trip_recovers_feasible_cost() {
    let s = setup();
    let params = ModelParams::default();
    let h_star = ControlPath::single_mode(250, s.tgrid.dt(), 4, 1, 3, 0.5).unwrap();
    let target = skeleton_terminal(&h_star, params, s.tgrid, &s.spec, &s.u0).unwrap();
    let problem = RateProblem::new(target.clone(), 2, 5);
    let est = estimate_rate(&problem, params, s.tgrid, &s.spec, &s.u0).unwrap();
    assert!(est.converged);
    assert!(est.cost <= 1.05 * rate_cost(&h_star), "{} vs {}", est.cost, rate_cost(&h_star));
    assert!(est.misfit <= 1e-2 * target.norms().h1());
    for w in est.history.windows(2) {
        if w[0].0 == w[1].0 {
            assert!(w[1].1 <= w[0].1);
        }
    }
    let again = estimate_rate(&problem, params, s.tgrid, &s.spec, &s.u0).unwrap();
    assert_eq!(again, est);
}

#[test]
fn unreachable_target_is_flagged() {
    let s = setup();
    let mut spike = VectorField::zeros(s.grid);
    spike.values_mut()[15] = [1e3, 0.0, 0.0];
    let est = estimate_rate(&RateProblem::new(spike.clone(), 2, 5), ModelParams::default(), s.tgrid, &s.spec, &s.u0)
        .unwrap();
    assert!(!est.converged);
    assert!(est.cost.is_finite());
    assert!(est.misfit > 0.5 * spike.norms().h1());
}

#[test]
fn noisy_power_law_slope() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let points: Vec<(f64, f64)> = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3]
        .iter()
        .map(|&e: &f64| (e, 3.0 * e.sqrt() * (1.0 + 0.01 * rng.random_range(-1.0..1.0))))
        .collect();
    let fit = fit_slope(&points).unwrap();
    assert!((fit.slope - 0.5).abs() <= 0.05);
    let exact = fit_slope(&[(1e-1, 1e-1), (1e-2, 1e-2), (1e-3, 1e-3)]).unwrap();
    assert!((exact.slope - 1.0).abs() <= 1e-12);
    let flat = fit_slope(&[(1e-1, 2.0), (1e-2, 2.0), (1e-3, 2.0)]).unwrap();
    assert!(flat.slope.abs() <= 1e-12);
    assert!(fit_slope(&[(1e-1, 1.0), (1e-2, 0.0), (1e-3, 1.0)]).is_err());
    assert!(fit_slope(&[(1e-1, 1.0), (1e-2, 1.0)]).is_err());
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let s = setup();
    let config = CltConfig {
        epsilons: vec![1e-1, 1e-2, 1e-3],
        samples: 6,
        params: ModelParams::default(),
        tgrid: TimeGrid::new(0.05, 100).unwrap(),
        spec: s.spec.clone(),
        base_seed: 17,
        initial: s.u0.clone(),
    };
    let h = ControlPath::single_mode(250, s.tgrid.dt(), 4, 1, 3, 0.5).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let clt = run_clt(&config).unwrap();
            let probe =
                compactness_probe(&h, &[2, 4], 1.0, 3, ModelParams::default(), s.tgrid, &s.spec, &s.u0).unwrap();
            let mut csv = Vec::new();
            clt.write_csv(&mut csv).unwrap();
            (csv, probe)
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn linear_drift_gives_first_order_clt_slope() {
    let grid = Grid1D::new(31).unwrap();
    let config = CltConfig {
        epsilons: vec![1e-1, 1e-2, 1e-3],
        samples: 16,
        params: ModelParams {
            gamma: 0.0,
            mu: 0.0,
            ..ModelParams::default()
        },
        tgrid: TimeGrid::new(0.1, 1000).unwrap(),
        spec: CovarianceSpec::new(8, 4.0).unwrap(),
        base_seed: 5,
        initial: default_initial(grid, 0.8, 0.4),
    };
    let report = run_clt(&config).unwrap();
    let slope = report.slope.unwrap().slope;
    assert!(slope >= 0.9, "slope {slope}");
}
