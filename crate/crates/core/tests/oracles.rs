use std::f64::consts::PI;

use llb_core::analysis::{check_cubic_identity, cubic_term, cubic_term_scalar_form, energy_drift};
use llb_core::dynamics::{default_initial, Integrator, ModelParams, StepTerms, SystemKind, TimeGrid, TrajectoryRecord};
use llb_core::field::{dot, Grid1D, VectorField};
use llb_core::noise::{ControlPath, CovarianceSpec, NoisePath, WienerIncrement};

fn spec() -> CovarianceSpec {
    CovarianceSpec::new(8, 4.0).unwrap()
}

fn heat_params() -> ModelParams {
    ModelParams {
        nu1: 1.0,
        nu2: 0.0,
        gamma: 0.0,
        mu: 0.0,
        epsilon: 0.0,
    }
}

fn heat_error(n: usize, steps: usize) -> f64 {
    let grid = Grid1D::new(n).unwrap();
    let u0 = VectorField::from_fn(grid, |x| [(PI * x).sin(), 0.0, 0.0]);
    let tgrid = TimeGrid::new(0.1, steps).unwrap();
    let rec = Integrator::new(SystemKind::Deterministic, heat_params(), tgrid, &spec())
        .stride(1)
        .run(&u0)
        .unwrap();
    let mut worst: f64 = 0.0;
    for (&step, snap) in rec.snapshot_steps().iter().zip(rec.snapshots()) {
        let decay = (-PI * PI * tgrid.time(step)).exp();
        for (x, v) in grid.nodes().zip(snap.values()) {
            worst = worst.max((v[0] - decay * (PI * x).sin()).abs());
            assert_eq!(v[1], 0.0);
            assert_eq!(v[2], 0.0);
        }
    }
    worst
}

#[test]
fn heat_equation_matches_exponential_decay() {
    let coarse = heat_error(255, 1000);
    let fine = heat_error(511, 2000);
    assert!(coarse <= 1e-3, "coarse error {coarse}");
    assert!(coarse / fine >= 1.7, "refinement ratio {}", coarse / fine);
}

/// `r' = −2ν₂ r (1 + μ r)`, solved by separation of variables.
fn bernoulli(r0: f64, nu2: f64, mu: f64, t: f64) -> f64 {
    let e = (-2.0 * nu2 * t).exp();
    r0 * e / (1.0 + mu * r0 * (1.0 - e))
}

fn rk4(r0: f64, nu2: f64, mu: f64, t: f64, steps: usize) -> f64 {
    let f = |r: f64| -2.0 * nu2 * r * (1.0 + mu * r);
    let dt = t / steps as f64;
    let mut r = r0;
    for _ in 0..steps {
        let k1 = f(r);
        let k2 = f(r + 0.5 * dt * k1);
        let k3 = f(r + 0.5 * dt * k2);
        let k4 = f(r + dt * k3);
        r += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    r
}

#[test]
fn closed_form_agrees_with_rk4() {
    for &(r0, nu2, mu) in &[(0.25, 1.0, 1.0), (0.9, 0.5, 3.0), (0.01, 2.0, 0.1)] {
        for &t in &[0.01, 0.1, 1.0] {
            let exact = bernoulli(r0, nu2, mu, t);
            assert!((exact - rk4(r0, nu2, mu, t, 10_000)).abs() <= 1e-13);
        }
    }
}

#[test]
fn cubic_relaxation_matches_bernoulli_solution() {
    let params = ModelParams {
        nu1: 1.0,
        nu2: 1.0,
        gamma: 0.0,
        mu: 1.0,
        epsilon: 0.0,
    };
    let grid = Grid1D::new(31).unwrap();
    let u0 = VectorField::from_fn(grid, |x| {
        let a = 0.5 * (PI * x).sin();
        [a * 0.6, a * 0.8, 0.0]
    });
    let tgrid = TimeGrid::new(0.05, 5000).unwrap();
    let rec = Integrator::new(SystemKind::Deterministic, params, tgrid, &spec())
        .terms(StepTerms {
            diffusion: false,
            laplacian: false,
        })
        .stride(50)
        .run(&u0)
        .unwrap();
    let mut worst: f64 = 0.0;
    for (&step, snap) in rec.snapshot_steps().iter().zip(rec.snapshots()) {
        let t = tgrid.time(step);
        for (v, w) in snap.values().iter().zip(u0.values()) {
            let exact = bernoulli(dot(*w, *w), params.nu2, params.mu, t);
            worst = worst.max((dot(*v, *v) - exact).abs());
        }
    }
    assert!(worst <= 1e-6, "max |u|² error {worst}");
}

#[test]
fn precession_preserves_nodal_length_and_gradient_energy() {
    let params = ModelParams {
        nu1: 1.0,
        nu2: 0.0,
        gamma: 1.0,
        mu: 0.0,
        epsilon: 0.0,
    };
    let grid = Grid1D::new(63).unwrap();
    let u0 = default_initial(grid, 0.8, 0.4);
    let tgrid = TimeGrid::new(1e-4, 1000).unwrap();
    let rec = Integrator::new(SystemKind::Deterministic, params, tgrid, &spec())
        .terms(StepTerms {
            diffusion: false,
            laplacian: true,
        })
        .stride(1000)
        .run(&u0)
        .unwrap();
    let end = rec.terminal();
    assert!(end.sub(&u0).unwrap().l2_norm() > 1e-4, "field should move");
    for (v, w) in end.values().iter().zip(u0.values()) {
        assert!((dot(*v, *v) - dot(*w, *w)).abs() <= 1e-8 * dot(*w, *w).max(1e-3));
    }
    let g0 = u0.gradient().l2_norm().powi(2);
    let g1 = end.gradient().l2_norm().powi(2);
    assert!((g1 - g0).abs() <= 1e-8 * g0);
}

fn deterministic(params: ModelParams, u0: &VectorField, tgrid: TimeGrid) -> TrajectoryRecord {
    Integrator::new(SystemKind::Deterministic, params, tgrid, &spec())
        .stride(1)
        .run(u0)
        .unwrap()
}

#[test]
fn zero_noise_and_zero_control_reproduce_deterministic_run() {
    let grid = Grid1D::new(63).unwrap();
    let u0 = default_initial(grid, 0.8, 0.4);
    let tgrid = TimeGrid::new(0.05, 500).unwrap();
    let params = ModelParams::default();
    let det = deterministic(params, &u0, tgrid);
    let spec = spec();
    let sto = Integrator::new(SystemKind::Stochastic, params.with_epsilon(0.0), tgrid, &spec)
        .seed(99, 0)
        .stride(1)
        .run(&u0)
        .unwrap();
    let zero = ControlPath::zeros(500, tgrid.dt(), 8).unwrap();
    let skel = Integrator::new(SystemKind::Skeleton, params, tgrid, &spec)
        .control(&zero)
        .stride(1)
        .run(&u0)
        .unwrap();
    let silent = spec.clone().with_strength(0.0).unwrap();
    let quiet = Integrator::new(SystemKind::ControlledStochastic, params.with_epsilon(0.5), tgrid, &silent)
        .control(&zero)
        .seed(99, 0)
        .stride(1)
        .run(&u0)
        .unwrap();
    for other in [&sto, &skel, &quiet] {
        assert_eq!(other.snapshots(), det.snapshots());
        assert_eq!(other.reports(), det.reports());
    }
}

#[test]
fn linearized_system_without_noise_stays_at_zero() {
    let grid = Grid1D::new(31).unwrap();
    let u0 = default_initial(grid, 0.8, 0.4);
    let tgrid = TimeGrid::new(0.02, 200).unwrap();
    let base = deterministic(ModelParams::default(), &u0, tgrid);
    let spec = spec();
    let path = NoisePath::from_increments(vec![WienerIncrement::zeros(8, tgrid.dt()); 200]);
    let v = Integrator::new(SystemKind::LinearizedClt, ModelParams::default(), tgrid, &spec)
        .base(&base)
        .noise_path(&path)
        .stride(1)
        .run(&VectorField::zeros(grid))
        .unwrap();
    assert!(v.snapshots().iter().all(|s| s.values().iter().all(|x| *x == [0.0; 3])));
}

#[test]
fn energy_drift_is_first_order_in_time() {
    let grid = Grid1D::new(63).unwrap();
    let u0 = default_initial(grid, 0.8, 0.4);
    for params in [heat_params(), ModelParams::default()] {
        let coarse = energy_drift(&deterministic(params, &u0, TimeGrid::new(0.05, 500).unwrap()), &params).unwrap();
        let fine = energy_drift(&deterministic(params, &u0, TimeGrid::new(0.05, 1000).unwrap()), &params).unwrap();
        let ratio = coarse / fine;
        assert!((1.6..=2.4).contains(&ratio), "drift {coarse} → {fine}, ratio {ratio}");
    }
    let zero = VectorField::zeros(grid);
    let p = ModelParams::default();
    assert_eq!(energy_drift(&deterministic(p, &zero, TimeGrid::new(0.01, 10).unwrap()), &p).unwrap(), 0.0);
}

#[test]
fn cubic_identity_refines_at_first_order() {
    let residual = |n: usize| {
        let u = default_initial(Grid1D::new(n).unwrap(), 0.8, 0.4);
        let report = check_cubic_identity(&u, 1.0);
        assert!(report.vector.passed, "{:?}", report);
        report.vector.residual.abs()
    };
    let (r1, r2) = (residual(63), residual(127));
    assert!(r1 / r2 >= 1.7, "ratio {}", r1 / r2);

    let zero = check_cubic_identity(&VectorField::zeros(Grid1D::new(15).unwrap()), 1.0);
    assert_eq!(zero.vector.residual, 0.0);
    assert_eq!(zero.scalar_form_residual, 0.0);

    let parallel = VectorField::from_fn(Grid1D::new(63).unwrap(), |x| [(PI * x).sin() * (1.0 + x), 0.0, 0.0]);
    assert!((cubic_term(&parallel) - 3.0 * cubic_term_scalar_form(&parallel)).abs() <= 1e-12 * cubic_term(&parallel));
    let report = check_cubic_identity(&parallel, 2.0);
    assert!((report.vector.residual - report.scalar_form_residual).abs() <= 1e-12);
}
