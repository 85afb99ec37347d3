//! Large-deviation experiments built on the skeleton (controlled,
//! noise-free) equation.
//!
//! * [`estimate_rate`] approximates the endpoint rate
//!   `inf { ½∫‖h‖²_{H₀} : u_h(T) = target }` by penalized minimization over a
//!   coarse piecewise-constant control.
//! * [`weak_convergence_experiment`] measures how fast the controlled SPDE
//!   approaches the skeleton solution as ε → 0.
//! * [`compactness_probe`] measures the skeleton response to fixed-cost
//!   perturbations of increasing mode index.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clt::{path_error, LevelStats};
use crate::dynamics::{Integrator, ModelParams, SystemKind, TimeGrid, TrajectoryRecord};
use crate::error::{LlbError, Result};
use crate::field::VectorField;
use crate::noise::{stream_id, ControlPath, CovarianceSpec};

/// `½ Σ_n dt Σ_{k,j} c²_{k,j}(t_n)`.
pub fn rate_cost(ctrl: &ControlPath) -> f64 {
    ctrl.h0_cost()
}

/// Knobs of the finite-difference gradient descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Length of the first trial step in coefficient space.
    pub step_size: f64,
    /// Central-difference bump.
    pub fd_bump: f64,
    /// Stationarity: `‖∇J‖ ≤ tolerance · max(1, ‖∇J(x_start)‖)`.
    pub tolerance: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_iterations: 300,
            step_size: 0.1,
            fd_bump: 1e-5,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RateProblem {
    pub target: VectorField,
    /// Initial penalty ρ on `‖u_h(T) − target‖²_{H¹}`.
    pub penalty: f64,
    /// Penalty multiplier for the single continuation stage; `None` disables it.
    pub continuation: Option<f64>,
    /// Modes `k ≤ K'` carry control.
    pub control_modes: usize,
    /// Coarse time blocks `N'`; must divide the time grid's step count.
    pub control_steps: usize,
    /// A run counts as converged only if the final misfit is at most this
    /// fraction of `‖target‖_{H¹}`.
    pub misfit_tolerance: f64,
    pub optimizer: OptimizerSettings,
}

impl RateProblem {
    pub fn new(target: VectorField, control_modes: usize, control_steps: usize) -> Self {
        RateProblem {
            target,
            penalty: 1e3,
            continuation: Some(10.0),
            control_modes,
            control_steps,
            misfit_tolerance: 1e-2,
            optimizer: OptimizerSettings::default(),
        }
    }

    pub fn unknowns(&self) -> usize {
        self.control_modes * self.control_steps * 3
    }

    fn validate(&self, tgrid: &TimeGrid, spec: &CovarianceSpec) -> Result<()> {
        if !(self.penalty > 0.0) {
            return Err(LlbError::invalid(format!("penalty must be positive, got {}", self.penalty)));
        }
        if self.control_modes == 0 || self.control_modes > spec.modes() {
            return Err(LlbError::invalid(format!(
                "control modes must lie in 1..={}, got {}",
                spec.modes(),
                self.control_modes
            )));
        }
        if self.control_steps == 0 || !tgrid.steps().is_multiple_of(self.control_steps) {
            return Err(LlbError::invalid(format!(
                "control steps {} must divide the {} time steps",
                self.control_steps,
                tgrid.steps()
            )));
        }
        let o = &self.optimizer;
        if !(o.step_size > 0.0 && o.fd_bump > 0.0 && o.tolerance > 0.0) {
            return Err(LlbError::invalid("optimizer step, bump and tolerance must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    /// `½∫‖ĥ‖²_{H₀}dt` of the returned control.
    pub cost: f64,
    /// `‖u_ĥ(T) − target‖_{H¹}`.
    pub misfit: f64,
    pub control: ControlPath,
    pub iterations: usize,
    /// Stationary and within the misfit tolerance. `false` flags that the
    /// target may be unreachable (infinite rate).
    pub converged: bool,
    /// Penalized objective after each accepted iteration, with its penalty.
    pub history: Vec<(f64, f64)>,
}

#[derive(Serialize)]
struct RateSummary {
    cost: f64,
    misfit: f64,
    iterations: usize,
    converged: bool,
}

impl RateEstimate {
    /// `{cost, misfit, iterations, converged}`.
    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(
            writer,
            &RateSummary {
                cost: self.cost,
                misfit: self.misfit,
                iterations: self.iterations,
                converged: self.converged,
            },
        )?;
        Ok(())
    }
}

/// Coarse parameterization: `x[(b·K' + k−1)·3 + j−1]` is the H₀ coordinate
/// `c_{k,j}` on time block `b`.
struct CoarseControl<'a> {
    tgrid: TimeGrid,
    spec: &'a CovarianceSpec,
    modes: usize,
    blocks: usize,
}

impl CoarseControl<'_> {
    fn expand(&self, x: &[f64]) -> ControlPath {
        let steps = self.tgrid.steps();
        let per_block = steps / self.blocks;
        let mut ctrl = ControlPath::zeros(steps, self.tgrid.dt(), self.spec.modes()).expect("validated grid");
        for n in 0..steps {
            let b = n / per_block;
            for k in 1..=self.modes {
                for j in 1..=3 {
                    let v = x[(b * self.modes + k - 1) * 3 + j - 1];
                    if v != 0.0 {
                        ctrl.set(n, k, j, v).expect("in range");
                    }
                }
            }
        }
        ctrl
    }
}

struct Objective<'a> {
    coarse: CoarseControl<'a>,
    params: ModelParams,
    initial: &'a VectorField,
    target: &'a VectorField,
}

impl Objective<'_> {
    fn skeleton_terminal(&self, ctrl: &ControlPath) -> Result<VectorField> {
        let rec = Integrator::new(SystemKind::Skeleton, self.params, self.coarse.tgrid, self.coarse.spec)
            .control(ctrl)
            .stride(usize::MAX)
            .run(self.initial)?;
        Ok(rec.terminal().clone())
    }

    /// `(cost, misfit)`; blow-up maps to infinite misfit.
    fn parts(&self, x: &[f64]) -> Result<(f64, f64)> {
        let ctrl = self.coarse.expand(x);
        let cost = ctrl.h0_cost();
        match self.skeleton_terminal(&ctrl) {
            Ok(u) => Ok((cost, u.sub(self.target)?.norms().h1())),
            Err(LlbError::BlowUp { .. }) => Ok((cost, f64::INFINITY)),
            Err(e) => Err(e),
        }
    }

    fn value(&self, x: &[f64], penalty: f64) -> Result<f64> {
        let (cost, misfit) = self.parts(x)?;
        Ok(cost + penalty * misfit * misfit)
    }

    fn gradient(&self, x: &[f64], penalty: f64, bump: f64, center: f64) -> Result<Vec<f64>> {
        (0..x.len())
            .into_par_iter()
            .map(|i| {
                let mut xp = x.to_vec();
                xp[i] += bump;
                let fp = self.value(&xp, penalty)?;
                xp[i] = x[i] - bump;
                let fm = self.value(&xp, penalty)?;
                Ok(match (fp.is_finite(), fm.is_finite()) {
                    (true, true) => (fp - fm) / (2.0 * bump),
                    (true, false) => (fp - center) / bump,
                    (false, true) => (center - fm) / bump,
                    (false, false) => {
                        return Err(LlbError::BlowUp {
                            step: 0,
                            reason: format!("skeleton diverges on both sides of coordinate {i}"),
                        })
                    }
                })
            })
            .collect()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

struct StageOutcome {
    x: Vec<f64>,
    iterations: usize,
    stationary: bool,
}

/// Gradient descent with Barzilai–Borwein step proposals and Armijo
/// backtracking; only decreasing steps are accepted.
fn descend(
    obj: &Objective<'_>,
    mut x: Vec<f64>,
    penalty: f64,
    settings: &OptimizerSettings,
    history: &mut Vec<(f64, f64)>,
) -> Result<StageOutcome> {
    const ARMIJO: f64 = 1e-4;
    const MAX_HALVINGS: usize = 40;
    // Consecutive accepted steps with relative decrease below `STALL_DECREASE`.
    const STALL_STEPS: usize = 10;
    const STALL_DECREASE: f64 = 1e-12;

    let mut f = obj.value(&x, penalty)?;
    if !f.is_finite() {
        return Err(LlbError::BlowUp {
            step: 0,
            reason: "skeleton diverges at the starting control".into(),
        });
    }
    let mut g = obj.gradient(&x, penalty, settings.fd_bump, f)?;
    let threshold = settings.tolerance * norm(&g).max(1.0);
    let mut alpha = settings.step_size / norm(&g).max(f64::MIN_POSITIVE);
    let mut iterations = 0;
    let mut stalled = 0;

    while iterations < settings.max_iterations {
        let gnorm = norm(&g);
        if gnorm <= threshold {
            return Ok(StageOutcome {
                x,
                iterations,
                stationary: true,
            });
        }
        let mut accepted = None;
        let mut trial_alpha = alpha;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - trial_alpha * b).collect();
            let ft = obj.value(&trial, penalty)?;
            if ft.is_finite() && ft <= f - ARMIJO * trial_alpha * gnorm * gnorm {
                accepted = Some((trial, ft));
                break;
            }
            trial_alpha *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            // No decrease left at finite-difference resolution.
            return Ok(StageOutcome {
                x,
                iterations,
                stationary: false,
            });
        };
        iterations += 1;
        if f - f_new <= STALL_DECREASE * f.abs() {
            stalled += 1;
        } else {
            stalled = 0;
        }
        let g_new = obj.gradient(&x_new, penalty, settings.fd_bump, f_new)?;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|a| a * a).sum();
        alpha = if sy > 0.0 { ss / sy } else { 2.0 * trial_alpha };
        x = x_new;
        f = f_new;
        g = g_new;
        history.push((penalty, f));
        if stalled >= STALL_STEPS {
            break;
        }
    }
    let stationary = norm(&g) <= threshold;
    Ok(StageOutcome {
        x,
        iterations,
        stationary,
    })
}

/// Minimizes `½∫‖h‖²_{H₀} + ρ‖u_h(T) − target‖²_{H¹}` from the zero control.
///
/// `params.epsilon` is ignored: the dynamics are the skeleton equation. With
/// continuation enabled the penalty is multiplied once after the first stage
/// and the descent restarts from the first stage's minimizer.
pub fn estimate_rate(
    problem: &RateProblem,
    params: ModelParams,
    tgrid: TimeGrid,
    spec: &CovarianceSpec,
    initial: &VectorField,
) -> Result<RateEstimate> {
    problem.validate(&tgrid, spec)?;
    let params = params.with_epsilon(0.0);
    params.validate()?;
    let obj = Objective {
        coarse: CoarseControl {
            tgrid,
            spec,
            modes: problem.control_modes,
            blocks: problem.control_steps,
        },
        params,
        initial,
        target: &problem.target,
    };
    let mut history = Vec::new();
    let mut x = vec![0.0; problem.unknowns()];
    let mut iterations = 0;
    let mut penalty = problem.penalty;
    let mut stages = vec![penalty];
    if let Some(factor) = problem.continuation {
        stages.push(penalty * factor);
    }
    let mut stationary = false;
    for rho in stages {
        penalty = rho;
        let out = descend(&obj, x, penalty, &problem.optimizer, &mut history)?;
        x = out.x;
        iterations += out.iterations;
        stationary = out.stationary;
    }
    let control = obj.coarse.expand(&x);
    let (cost, misfit) = obj.parts(&x)?;
    let scale = problem.target.norms().h1().max(f64::MIN_POSITIVE);
    let converged = stationary && misfit <= problem.misfit_tolerance * scale.max(1e-12);
    Ok(RateEstimate {
        cost,
        misfit,
        control,
        iterations,
        converged,
        history,
    })
}

/// Terminal state of the skeleton equation under `ctrl`.
pub fn skeleton_terminal(
    ctrl: &ControlPath,
    params: ModelParams,
    tgrid: TimeGrid,
    spec: &CovarianceSpec,
    initial: &VectorField,
) -> Result<VectorField> {
    let rec = Integrator::new(SystemKind::Skeleton, params.with_epsilon(0.0), tgrid, spec)
        .control(ctrl)
        .stride(usize::MAX)
        .run(initial)?;
    Ok(rec.terminal().clone())
}

fn skeleton(
    ctrl: &ControlPath,
    params: ModelParams,
    tgrid: TimeGrid,
    spec: &CovarianceSpec,
    initial: &VectorField,
) -> Result<TrajectoryRecord> {
    Integrator::new(SystemKind::Skeleton, params.with_epsilon(0.0), tgrid, spec)
        .control(ctrl)
        .stride(1)
        .run(initial)
}

/// For each ε, the sample mean of
/// `sup_t ‖∇(u_h^ε − u_h)‖² + ν₁∫‖Δ(u_h^ε − u_h)‖²` where `u_h^ε` solves the
/// controlled SPDE and `u_h` the skeleton equation under the same `h`.
///
/// Levels must be strictly decreasing in [0, 1]; sample `m` of level `i`
/// uses stream `(base_seed, (i, m))`.
#[allow(clippy::too_many_arguments)]
pub fn weak_convergence_experiment(
    h: &ControlPath,
    epsilons: &[f64],
    samples: usize,
    params: ModelParams,
    tgrid: TimeGrid,
    spec: &CovarianceSpec,
    initial: &VectorField,
    base_seed: u64,
) -> Result<Vec<LevelStats>> {
    if epsilons.is_empty() || epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LlbError::invalid("epsilons must be nonempty and strictly decreasing"));
    }
    if samples == 0 {
        return Err(LlbError::invalid("need at least one sample"));
    }
    let u_h = skeleton(h, params, tgrid, spec, initial)?;
    epsilons
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let p = params.with_epsilon(eps);
            p.validate()?;
            let outcomes: Vec<Result<f64>> = (0..samples)
                .into_par_iter()
                .map(|m| {
                    let u = Integrator::new(SystemKind::ControlledStochastic, p, tgrid, spec)
                        .control(h)
                        .seed(base_seed, stream_id(i, m))
                        .stride(1)
                        .run(initial)?;
                    path_error(&u, &u_h, p.nu1)
                })
                .collect();
            LevelStats::from_outcomes(eps, outcomes)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactnessRow {
    pub mode: usize,
    /// `sup_t ‖∇(u_{h_n} − u_h)‖²`.
    pub sup_gradient_sq: f64,
    /// `sup_t ‖∇(u_{h_n} − u_h)‖² + ν₁∫‖Δ(u_{h_n} − u_h)‖²`.
    pub metric: f64,
}

pub fn write_compactness_csv<W: Write>(rows: &[CompactnessRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Perturbation of H₀ cost `cost`, constant in time, in mode `k` along `ê_j`.
pub fn mode_perturbation(tgrid: TimeGrid, modes: usize, k: usize, j: usize, cost: f64) -> Result<ControlPath> {
    if !(cost >= 0.0) {
        return Err(LlbError::invalid(format!("perturbation cost must be ≥ 0, got {cost}")));
    }
    // ½ T c² = cost.
    let c = (2.0 * cost / tgrid.horizon()).sqrt();
    ControlPath::single_mode(tgrid.steps(), tgrid.dt(), modes, k, j, c)
}

/// Skeleton response to `h + p_k` for each mode `k`, where `p_k` has H₀ cost
/// `cost` in mode `k` along `ê_direction`.
#[allow(clippy::too_many_arguments)]
pub fn compactness_probe(
    h: &ControlPath,
    oscillation_modes: &[usize],
    cost: f64,
    direction: usize,
    params: ModelParams,
    tgrid: TimeGrid,
    spec: &CovarianceSpec,
    initial: &VectorField,
) -> Result<Vec<CompactnessRow>> {
    if let Some(&k) = oscillation_modes.iter().find(|&&k| k == 0 || k > spec.modes()) {
        return Err(LlbError::invalid(format!(
            "oscillation mode {k} outside 1..={}",
            spec.modes()
        )));
    }
    let u_h = skeleton(h, params, tgrid, spec, initial)?;
    oscillation_modes
        .par_iter()
        .map(|&k| {
            let p = mode_perturbation(tgrid, spec.modes(), k, direction, cost)?;
            let u_n = skeleton(&h.plus(&p)?, params, tgrid, spec, initial)?;
            let sup = u_n
                .snapshots()
                .iter()
                .zip(u_h.snapshots())
                .map(|(a, b)| a.sub(b).map(|d| d.gradient().l2_norm().powi(2)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            Ok(CompactnessRow {
                mode: k,
                sup_gradient_sq: sup,
                metric: path_error(&u_n, &u_h, params.nu1)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::default_initial;
    use crate::field::Grid1D;

    #[test]
    fn cost_examples() {
        let zero = ControlPath::zeros(10, 0.1, 3).unwrap();
        assert_eq!(rate_cost(&zero), 0.0);
        let unit = ControlPath::single_mode(10, 0.1, 3, 1, 1, 1.0).unwrap();
        assert!((rate_cost(&unit) - 0.5).abs() < 1e-14);
        let s = 3.7;
        assert!((rate_cost(&unit.scaled(s)) - s * s * rate_cost(&unit)).abs() < 1e-12);
    }

    #[test]
    fn coarse_expansion_preserves_cost() {
        let spec = CovarianceSpec::new(4, 4.0).unwrap();
        let tgrid = TimeGrid::new(0.1, 20).unwrap();
        let coarse = CoarseControl {
            tgrid,
            spec: &spec,
            modes: 2,
            blocks: 4,
        };
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let ctrl = coarse.expand(&x);
        let direct = 0.5 * (tgrid.horizon() / 4.0) * x.iter().map(|v| v * v).sum::<f64>();
        assert!((ctrl.h0_cost() - direct).abs() < 1e-14);
        assert_eq!(ctrl.get(4, 1, 1).unwrap(), x[0]);
        assert_eq!(ctrl.get(5, 1, 1).unwrap(), x[6]);
        assert_eq!(ctrl.get(19, 2, 3).unwrap(), x[23]);
        assert_eq!(ctrl.get(0, 3, 1).unwrap(), 0.0);
    }

    #[test]
    fn problem_validation() {
        let grid = Grid1D::new(15).unwrap();
        let spec = CovarianceSpec::new(2, 4.0).unwrap();
        let tgrid = TimeGrid::new(0.1, 20).unwrap();
        let p = RateProblem::new(VectorField::zeros(grid), 3, 4);
        assert!(p.validate(&tgrid, &spec).is_err());
        let p = RateProblem::new(VectorField::zeros(grid), 2, 3);
        assert!(p.validate(&tgrid, &spec).is_err());
        let mut p = RateProblem::new(VectorField::zeros(grid), 2, 4);
        assert!(p.validate(&tgrid, &spec).is_ok());
        p.penalty = 0.0;
        assert!(p.validate(&tgrid, &spec).is_err());
    }

    #[test]
    fn zero_perturbation_gives_zero_response() {
        let grid = Grid1D::new(15).unwrap();
        let spec = CovarianceSpec::new(4, 4.0).unwrap();
        let tgrid = TimeGrid::new(0.05, 50).unwrap();
        let u0 = default_initial(grid, 0.8, 0.4);
        let h = ControlPath::single_mode(50, tgrid.dt(), 4, 1, 3, 0.5).unwrap();
        let rows = compactness_probe(&h, &[2, 3], 0.0, 3, ModelParams::default(), tgrid, &spec, &u0).unwrap();
        for r in rows {
            assert_eq!(r.metric, 0.0);
            assert_eq!(r.sup_gradient_sq, 0.0);
        }
        assert!(compactness_probe(&h, &[5], 1.0, 3, ModelParams::default(), tgrid, &spec, &u0).is_err());
    }

    #[test]
    fn zero_noise_level_matches_skeleton() {
        let grid = Grid1D::new(15).unwrap();
        let spec = CovarianceSpec::new(3, 4.0).unwrap();
        let tgrid = TimeGrid::new(0.05, 50).unwrap();
        let u0 = default_initial(grid, 0.8, 0.4);
        let h = ControlPath::single_mode(50, tgrid.dt(), 3, 1, 3, 0.5).unwrap();
        let rows =
            weak_convergence_experiment(&h, &[0.1, 0.0], 3, ModelParams::default(), tgrid, &spec, &u0, 5).unwrap();
        assert!(rows[0].mean_error > 0.0);
        assert_eq!(rows[1].mean_error, 0.0);
    }
}
