//! Central limit experiment: `(u_ε − u₀)/√ε` against the linearized process
//! `V₀`, both driven by the same Brownian path.
//!
//! For each noise level and sample the error functional
//!
//! ```text
//! e = sup_t ‖∇(V_ε − V₀)‖² + ν₁ ∫₀ᵀ ‖Δ(V_ε − V₀)‖² dt
//! ```
//!
//! is evaluated (discrete sup over stored steps, left-endpoint rectangle rule
//! in time); its sample mean should decay like `ε`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{fit_slope, SlopeFit};
use crate::dynamics::{mean_and_stderr, Integrator, ModelParams, SystemKind, TimeGrid, TrajectoryRecord};
use crate::error::{LlbError, Result};
use crate::field::VectorField;
use crate::noise::{stream_id, stream_rng, CovarianceSpec, NoisePath};

/// `(u_ε − u₀)/√ε` at every common stored step.
pub fn deviation_process(
    u_eps: &TrajectoryRecord,
    u0: &TrajectoryRecord,
    epsilon: f64,
) -> Result<TrajectoryRecord> {
    if !(epsilon > 0.0) {
        return Err(LlbError::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    ensure_aligned(u_eps, u0)?;
    let scale = 1.0 / epsilon.sqrt();
    let snaps = u_eps
        .snapshots()
        .iter()
        .zip(u0.snapshots())
        .map(|(a, b)| Ok(a.sub(b)?.scaled(scale)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryRecord::from_parts(
        u_eps.kind(),
        u_eps.params().with_epsilon(epsilon),
        *u_eps.time_grid(),
        *u_eps.grid(),
        u_eps.snapshot_steps().to_vec(),
        snaps,
    ))
}

fn ensure_aligned(a: &TrajectoryRecord, b: &TrajectoryRecord) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(LlbError::GridMismatch {
            left: a.grid().n_interior(),
            right: b.grid().n_interior(),
        });
    }
    if a.time_grid() != b.time_grid() || a.snapshot_steps() != b.snapshot_steps() {
        return Err(LlbError::DimensionMismatch(
            "trajectories are stored on different time grids".into(),
        ));
    }
    Ok(())
}

/// `sup_t ‖∇(a − b)‖² + ν₁ Σ_n (t_{n+1} − t_n) ‖Δ(a − b)(t_n)‖²` over the
/// common stored steps.
pub fn path_error(a: &TrajectoryRecord, b: &TrajectoryRecord, nu1: f64) -> Result<f64> {
    ensure_aligned(a, b)?;
    let dt = a.time_grid().dt();
    let steps = a.snapshot_steps();
    let diffs = a
        .snapshots()
        .iter()
        .zip(b.snapshots())
        .map(|(x, y)| x.sub(y))
        .collect::<Result<Vec<VectorField>>>()?;
    let sup = diffs
        .iter()
        .map(|d| d.gradient().l2_norm().powi(2))
        .fold(0.0, f64::max);
    let integral: f64 = diffs
        .iter()
        .zip(steps.windows(2))
        .map(|(d, w)| (w[1] - w[0]) as f64 * dt * d.laplacian().l2_norm().powi(2))
        .sum();
    Ok(sup + nu1 * integral)
}

#[derive(Debug, Clone)]
pub struct CltConfig {
    pub epsilons: Vec<f64>,
    pub samples: usize,
    /// Template; `epsilon` is overridden per level.
    pub params: ModelParams,
    pub tgrid: TimeGrid,
    pub spec: CovarianceSpec,
    pub base_seed: u64,
    pub initial: VectorField,
}

impl CltConfig {
    pub fn validate(&self) -> Result<()> {
        validate_epsilons(&self.epsilons)?;
        if self.samples < 2 {
            return Err(LlbError::invalid(format!("need at least 2 samples, got {}", self.samples)));
        }
        self.params.validate()
    }
}

/// Noise levels must be strictly decreasing and lie in (0, 1].
pub fn validate_epsilons(epsilons: &[f64]) -> Result<()> {
    if epsilons.is_empty() {
        return Err(LlbError::invalid("at least one epsilon is required"));
    }
    if let Some(e) = epsilons.iter().find(|&&e| !(e > 0.0 && e <= 1.0)) {
        return Err(LlbError::invalid(format!("epsilon {e} outside (0, 1]")));
    }
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LlbError::invalid("epsilons must be strictly decreasing"));
    }
    Ok(())
}

/// Per-level summary of a Monte Carlo metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub epsilon: f64,
    pub mean_error: f64,
    pub std_error: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

impl LevelStats {
    pub(crate) fn from_outcomes(epsilon: f64, outcomes: Vec<Result<f64>>) -> Result<Self> {
        let mut ok = Vec::with_capacity(outcomes.len());
        let mut failed = 0;
        for o in outcomes {
            match o {
                Ok(v) => ok.push(v),
                Err(LlbError::BlowUp { .. }) => failed += 1,
                Err(e) => return Err(e),
            }
        }
        let (mean, se) = mean_and_stderr(&ok);
        Ok(LevelStats {
            epsilon,
            mean_error: mean,
            std_error: se,
            n_ok: ok.len(),
            n_failed: failed,
        })
    }
}

pub fn write_levels_csv<W: Write>(rows: &[LevelStats], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// True when consecutive means never increase by more than the pooled
/// standard error `sqrt(se_i² + se_{i+1}²)`.
pub fn nonincreasing_within_pooled_se(rows: &[LevelStats]) -> bool {
    rows.windows(2).all(|w| {
        let pooled = w[0].std_error.hypot(w[1].std_error);
        w[1].mean_error <= w[0].mean_error + pooled
    })
}

pub fn strictly_decreasing(rows: &[LevelStats]) -> bool {
    rows.windows(2).all(|w| w[1].mean_error < w[0].mean_error)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub rows: Vec<LevelStats>,
    /// Log-log fit of mean error against ε; absent with fewer than three
    /// levels or a nonpositive mean.
    pub slope: Option<SlopeFit>,
}

#[derive(Serialize)]
struct CltSummary<'a> {
    slope: Option<f64>,
    intercept: Option<f64>,
    residual: Option<f64>,
    levels: usize,
    strictly_decreasing: bool,
    nonincreasing_within_pooled_se: bool,
    rows: &'a [LevelStats],
}

impl CltReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_levels_csv(&self.rows, writer)
    }

    pub fn write_summary_json<W: Write>(&self, writer: W) -> Result<()> {
        let summary = CltSummary {
            slope: self.slope.as_ref().map(|s| s.slope),
            intercept: self.slope.as_ref().map(|s| s.intercept),
            residual: self.slope.as_ref().map(|s| s.residual),
            levels: self.rows.len(),
            strictly_decreasing: strictly_decreasing(&self.rows),
            nonincreasing_within_pooled_se: nonincreasing_within_pooled_se(&self.rows),
            rows: &self.rows,
        };
        serde_json::to_writer_pretty(writer, &summary)?;
        Ok(())
    }
}

/// One coupled sample: returns the error functional for `(u_ε, V₀)` driven
/// by the same increments.
pub fn clt_sample(
    initial: &VectorField,
    u0: &TrajectoryRecord,
    params: ModelParams,
    tgrid: TimeGrid,
    spec: &CovarianceSpec,
    path: &NoisePath,
) -> Result<f64> {
    let eps = params.epsilon;
    let u_eps = Integrator::new(SystemKind::Stochastic, params, tgrid, spec)
        .noise_path(path)
        .stride(1)
        .run(initial)?;
    let v0 = Integrator::new(SystemKind::LinearizedClt, params, tgrid, spec)
        .noise_path(path)
        .base(u0)
        .stride(1)
        .run(&VectorField::zeros(*initial.grid()))?;
    if u_eps.noise_digest() != v0.noise_digest() {
        return Err(LlbError::invalid(
            "coupled runs consumed different Gaussian increments",
        ));
    }
    let v_eps = deviation_process(&u_eps, u0, eps)?;
    path_error(&v_eps, &v0, params.nu1)
}

/// Runs the full experiment. Level `i`, sample `m` uses stream
/// `(base_seed, (i, m))`; samples run in parallel and are reduced in index
/// order, so results do not depend on the thread count.
pub fn run_clt(config: &CltConfig) -> Result<CltReport> {
    config.validate()?;
    let tgrid = config.tgrid;
    let u0 = Integrator::new(
        SystemKind::Deterministic,
        config.params.with_epsilon(0.0),
        tgrid,
        &config.spec,
    )
    .stride(1)
    .run(&config.initial)?;

    let rows = config
        .epsilons
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let params = config.params.with_epsilon(eps);
            let outcomes: Vec<Result<f64>> = (0..config.samples)
                .into_par_iter()
                .map(|m| {
                    let mut rng = stream_rng(config.base_seed, stream_id(i, m));
                    let path = NoisePath::sample(&config.spec, tgrid.steps(), tgrid.dt(), &mut rng)?;
                    clt_sample(&config.initial, &u0, params, tgrid, &config.spec, &path)
                })
                .collect();
            LevelStats::from_outcomes(eps, outcomes)
        })
        .collect::<Result<Vec<_>>>()?;

    let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.epsilon, r.mean_error)).collect();
    let slope = fit_slope(&points).ok();
    Ok(CltReport { rows, slope })
}
