//! Semi-implicit Euler–Maruyama integration of the LLB family.
//!
//! Every system shares one step rule: the stiff diffusion `ν₁Δu` is implicit
//! (one tridiagonal solve per component), everything else is explicit:
//!
//! ```text
//! (I − dt·ν₁Δ_h) u⁺ = u + dt·[γ u×Δu − ν₂(1+μ|u|²)u] + u × (√ε ΔB + dt·h)
//! ```
//!
//! The five systems differ only in which forcing terms are present:
//!
//! | kind                   | noise `√ε ΔB` | control `dt·h` |
//! |------------------------|---------------|----------------|
//! | `Deterministic`        | –             | –              |
//! | `Stochastic`           | ✓             | –              |
//! | `ControlledStochastic` | ✓             | ✓              |
//! | `Skeleton`             | –             | ✓              |
//!
//! `LinearizedClt` integrates the linearization about a stored deterministic
//! trajectory `u₀`, driven by the unscaled noise `u₀ × ΔB`. It is exactly the
//! derivative of the discrete `Stochastic` step in its noise amplitude, so
//! discrete `(u_ε − u₀)/√ε − V₀` is `O(√ε)` path by path.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LlbError, Result};
use crate::field::{dot, EnergyReport, Grid1D, Helmholtz, Vec3, VectorField};
use crate::noise::{
    sample_increment, stream_id, stream_rng, ControlPath, CovarianceSpec, IncrementDigest, ModeSynthesizer,
    NoisePath, NoiseRng, WienerIncrement,
};

/// Coefficients of the equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub nu1: f64,
    pub nu2: f64,
    pub gamma: f64,
    pub mu: f64,
    pub epsilon: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            nu1: 1.0,
            nu2: 1.0,
            gamma: 1.0,
            mu: 1.0,
            epsilon: 0.0,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.nu1, self.nu2, self.gamma, self.mu, self.epsilon];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(LlbError::invalid("model parameters must be finite"));
        }
        if !(self.nu1 > 0.0) {
            return Err(LlbError::invalid(format!("nu1 must be positive, got {}", self.nu1)));
        }
        if self.nu2 < 0.0 || self.mu < 0.0 {
            return Err(LlbError::invalid("nu2 and mu must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(LlbError::invalid(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn with_epsilon(self, epsilon: f64) -> Self {
        ModelParams { epsilon, ..self }
    }
}

/// Uniform time partition of `[0, T]` into `N` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(LlbError::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(LlbError::invalid("time grid needs at least one step"));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    /// Snapshot stride: every step up to 10⁴ steps, else `⌈N/10⁴⌉`.
    pub fn default_stride(&self) -> usize {
        const MAX_SNAPSHOTS: usize = 10_000;
        self.steps.div_ceil(MAX_SNAPSHOTS).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SystemKind {
    Deterministic,
    Stochastic,
    ControlledStochastic,
    Skeleton,
    LinearizedClt,
}

impl SystemKind {
    pub fn uses_noise(self) -> bool {
        matches!(
            self,
            SystemKind::Stochastic | SystemKind::ControlledStochastic | SystemKind::LinearizedClt
        )
    }

    pub fn uses_control(self) -> bool {
        matches!(self, SystemKind::ControlledStochastic | SystemKind::Skeleton)
    }
}

/// Switches for isolating terms in verification runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepTerms {
    /// Implicit `ν₁Δu`.
    pub diffusion: bool,
    /// Every term containing `Δu`: the diffusion and the precession `γu×Δu`.
    pub laplacian: bool,
}

impl Default for StepTerms {
    fn default() -> Self {
        StepTerms {
            diffusion: true,
            laplacian: true,
        }
    }
}

/// `γ u×Δu − ν₂(1+μ|u|²)u`, the explicit drift.
pub fn explicit_rhs(u: &VectorField, params: &ModelParams) -> VectorField {
    explicit_rhs_with(u, params, StepTerms::default())
}

fn explicit_rhs_with(u: &VectorField, params: &ModelParams, terms: StepTerms) -> VectorField {
    let ModelParams { gamma, nu2, mu, .. } = *params;
    let lap = (terms.laplacian && gamma != 0.0).then(|| u.laplacian());
    let values: Vec<Vec3> = u
        .values()
        .iter()
        .enumerate()
        .map(|(i, &ui)| {
            let damp = nu2 * (1.0 + mu * dot(ui, ui));
            let mut out = [-damp * ui[0], -damp * ui[1], -damp * ui[2]];
            if let Some(lap) = &lap {
                let p = crate::field::cross3(ui, lap.values()[i]);
                for d in 0..3 {
                    out[d] += gamma * p[d];
                }
            }
            out
        })
        .collect();
    VectorField::from_values(*u.grid(), values).expect("same length")
}

/// Linearized drift `γ(V×Δu₀ + u₀×ΔV) − ν₂V − ν₂μ(2(u₀·V)u₀ + |u₀|²V)`.
pub fn linearized_rhs(v: &VectorField, base: &VectorField, params: &ModelParams) -> Result<VectorField> {
    let ModelParams { gamma, nu2, mu, .. } = *params;
    if v.grid() != base.grid() {
        return Err(LlbError::GridMismatch {
            left: v.grid().n_interior(),
            right: base.grid().n_interior(),
        });
    }
    let lap_base = base.laplacian();
    let lap_v = v.laplacian();
    let values: Vec<Vec3> = (0..v.values().len())
        .map(|i| {
            let vi = v.values()[i];
            let bi = base.values()[i];
            let a = crate::field::cross3(vi, lap_base.values()[i]);
            let b = crate::field::cross3(bi, lap_v.values()[i]);
            let bv = dot(bi, vi);
            let bb = dot(bi, bi);
            let mut out = [0.0; 3];
            for d in 0..3 {
                out[d] = gamma * (a[d] + b[d]) - nu2 * vi[d] - nu2 * mu * (2.0 * bv * bi[d] + bb * vi[d]);
            }
            out
        })
        .collect();
    VectorField::from_values(*v.grid(), values)
}

/// One semi-implicit step with fixed `dt`, reusing the factored solver.
#[derive(Debug, Clone)]
pub struct Stepper {
    params: ModelParams,
    dt: f64,
    terms: StepTerms,
    solver: Option<Helmholtz>,
}

impl Stepper {
    pub fn new(grid: Grid1D, params: ModelParams, dt: f64) -> Result<Self> {
        Self::with_terms(grid, params, dt, StepTerms::default())
    }

    pub fn with_terms(grid: Grid1D, params: ModelParams, dt: f64, terms: StepTerms) -> Result<Self> {
        params.validate()?;
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(LlbError::invalid(format!("time step must be positive, got {dt}")));
        }
        let solver = if terms.diffusion && terms.laplacian {
            Some(Helmholtz::new(grid, dt * params.nu1)?)
        } else {
            None
        };
        Ok(Stepper {
            params,
            dt,
            terms,
            solver,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Advances `u` by one step. `forcing` is the already combined
    /// `√ε ΔB + dt·h`; `None` means no forcing at all.
    pub fn advance(&self, u: &VectorField, forcing: Option<&VectorField>) -> Result<VectorField> {
        let mut rhs = explicit_rhs_with(u, &self.params, self.terms);
        rhs = u.axpy(self.dt, &rhs)?;
        if let Some(f) = forcing {
            rhs.add_scaled(1.0, &u.cross(f)?)?;
        }
        self.implicit(rhs)
    }

    /// Advances the linearized system about `base` (the deterministic state at
    /// the same step). `noise` is the unscaled increment field `ΔB`.
    pub fn advance_linearized(
        &self,
        v: &VectorField,
        base: &VectorField,
        noise: Option<&VectorField>,
    ) -> Result<VectorField> {
        let drift = linearized_rhs(v, base, &self.params)?;
        let mut rhs = v.axpy(self.dt, &drift)?;
        if let Some(b) = noise {
            rhs.add_scaled(1.0, &base.cross(b)?)?;
        }
        self.implicit(rhs)
    }

    fn implicit(&self, rhs: VectorField) -> Result<VectorField> {
        let out = match &self.solver {
            Some(s) => s.solve(&rhs)?,
            None => rhs,
        };
        if !out.is_finite() {
            return Err(LlbError::BlowUp {
                step: 0,
                reason: "non-finite values".into(),
            });
        }
        Ok(out)
    }
}

/// One Euler–Maruyama step of the controlled equation.
///
/// `noise` is the increment field `ΔB` (scaled by `√ε` here) and `control`
/// the field `h(t_n)` (scaled by `dt` here); absent terms are zero.
pub fn step(
    u: &VectorField,
    params: &ModelParams,
    dt: f64,
    noise: Option<&VectorField>,
    control: Option<&VectorField>,
) -> Result<VectorField> {
    step_with(u, params, dt, noise, control, StepTerms::default())
}

pub fn step_with(
    u: &VectorField,
    params: &ModelParams,
    dt: f64,
    noise: Option<&VectorField>,
    control: Option<&VectorField>,
    terms: StepTerms,
) -> Result<VectorField> {
    let stepper = Stepper::with_terms(*u.grid(), *params, dt, terms)?;
    let forcing = combine_forcing(u.grid(), params.epsilon.sqrt(), noise, dt, control)?;
    stepper.advance(u, forcing.as_ref())
}

fn combine_forcing(
    grid: &Grid1D,
    noise_scale: f64,
    noise: Option<&VectorField>,
    dt: f64,
    control: Option<&VectorField>,
) -> Result<Option<VectorField>> {
    let noise = noise.filter(|_| noise_scale != 0.0);
    Ok(match (noise, control) {
        (None, None) => None,
        (Some(b), None) => Some(b.scaled(noise_scale)),
        (None, Some(h)) => Some(h.scaled(dt)),
        (Some(b), Some(h)) => {
            let mut f = b.scaled(noise_scale);
            f.add_scaled(dt, h)?;
            debug_assert_eq!(f.grid(), grid);
            Some(f)
        }
    })
}

/// Seed provenance of a stochastic trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedInfo {
    pub base_seed: u64,
    pub stream: u64,
}

/// A solved system: per-step energy reports and strided snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    kind: SystemKind,
    params: ModelParams,
    tgrid: TimeGrid,
    grid: Grid1D,
    reports: Vec<EnergyReport>,
    snapshot_steps: Vec<usize>,
    snapshots: Vec<VectorField>,
    seed: Option<SeedInfo>,
    noise_digest: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    step: usize,
    time: f64,
    l2: f64,
    h1_semi: f64,
    h2_semi: f64,
    linf: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FieldRow {
    step: usize,
    node_index: usize,
    ux: f64,
    uy: f64,
    uz: f64,
}

impl TrajectoryRecord {
    pub(crate) fn from_parts(
        kind: SystemKind,
        params: ModelParams,
        tgrid: TimeGrid,
        grid: Grid1D,
        snapshot_steps: Vec<usize>,
        snapshots: Vec<VectorField>,
    ) -> Self {
        let reports = snapshot_steps
            .iter()
            .zip(&snapshots)
            .map(|(&n, f)| f.norms_at(tgrid.time(n)))
            .collect();
        TrajectoryRecord {
            kind,
            params,
            tgrid,
            grid,
            reports,
            snapshot_steps,
            snapshots,
            seed: None,
            noise_digest: None,
        }
    }

    pub fn kind(&self) -> SystemKind {
        self.kind
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn time_grid(&self) -> &TimeGrid {
        &self.tgrid
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    /// One report per step `0..=N` (or per snapshot for derived records).
    pub fn reports(&self) -> &[EnergyReport] {
        &self.reports
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.reports.iter().map(|r| r.time)
    }

    pub fn snapshot_steps(&self) -> &[usize] {
        &self.snapshot_steps
    }

    pub fn snapshots(&self) -> &[VectorField] {
        &self.snapshots
    }

    /// Snapshot stored at step `n`, if any.
    pub fn snapshot_at(&self, n: usize) -> Option<&VectorField> {
        self.snapshot_steps
            .binary_search(&n)
            .ok()
            .map(|i| &self.snapshots[i])
    }

    pub fn terminal(&self) -> &VectorField {
        self.snapshots.last().expect("a record always holds the initial snapshot")
    }

    /// True when every step is stored.
    pub fn is_dense(&self) -> bool {
        self.snapshot_steps.len() == self.tgrid.steps() + 1
    }

    pub fn seed(&self) -> Option<SeedInfo> {
        self.seed
    }

    /// Digest of the Gaussian increments this run consumed.
    pub fn noise_digest(&self) -> Option<&str> {
        self.noise_digest.as_deref()
    }

    /// `sup_t ‖∇u(t)‖²` over the reports.
    pub fn sup_gradient_sq(&self) -> f64 {
        self.reports
            .iter()
            .map(|r| r.h1_semi * r.h1_semi)
            .fold(0.0, f64::max)
    }

    pub fn write_reports_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let steps: Vec<usize> = if self.reports.len() == self.snapshot_steps.len() {
            self.snapshot_steps.clone()
        } else {
            (0..self.reports.len()).collect()
        };
        for (step, r) in steps.into_iter().zip(&self.reports) {
            w.serialize(ReportRow {
                step,
                time: r.time,
                l2: r.l2,
                h1_semi: r.h1_semi,
                h2_semi: r.h2_semi,
                linf: r.linf,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Nodal dump `(step, node_index, ux, uy, uz)`; `node_index` is 1-based
    /// so that the node sits at `x = node_index·h`.
    pub fn write_fields_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (&step, f) in self.snapshot_steps.iter().zip(&self.snapshots) {
            for (i, v) in f.values().iter().enumerate() {
                w.serialize(FieldRow {
                    step,
                    node_index: i + 1,
                    ux: v[0],
                    uy: v[1],
                    uz: v[2],
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a nodal dump back as `(step, field)` pairs in file order.
pub fn read_fields_csv<R: Read>(reader: R, grid: Grid1D) -> Result<Vec<(usize, VectorField)>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out: Vec<(usize, Vec<Option<Vec3>>)> = Vec::new();
    let n = grid.n_interior();
    for row in r.deserialize::<FieldRow>() {
        let row = row?;
        if row.node_index == 0 || row.node_index > n {
            return Err(LlbError::DimensionMismatch(format!(
                "node_index {} outside 1..={n}",
                row.node_index
            )));
        }
        if out.last().map(|(s, _)| *s) != Some(row.step) {
            out.push((row.step, vec![None; n]));
        }
        let slot = &mut out.last_mut().expect("pushed above").1[row.node_index - 1];
        *slot = Some([row.ux, row.uy, row.uz]);
    }
    out.into_iter()
        .map(|(step, vals)| {
            let values = vals
                .into_iter()
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| LlbError::DimensionMismatch(format!("step {step} is missing nodes")))?;
            Ok((step, VectorField::from_values(grid, values)?))
        })
        .collect()
}

/// Where a stochastic run takes its increments from.
#[derive(Debug, Clone, Copy)]
enum NoiseSource<'a> {
    None,
    Shared(&'a NoisePath),
    Seeded(SeedInfo),
}

/// Builder for a single trajectory of any [`SystemKind`].
#[derive(Debug, Clone)]
pub struct Integrator<'a> {
    kind: SystemKind,
    params: ModelParams,
    tgrid: TimeGrid,
    spec: &'a CovarianceSpec,
    control: Option<&'a ControlPath>,
    noise: NoiseSource<'a>,
    base: Option<&'a TrajectoryRecord>,
    stride: Option<usize>,
    ceiling: f64,
    terms: StepTerms,
}

impl<'a> Integrator<'a> {
    pub const DEFAULT_CEILING: f64 = 1e3;

    pub fn new(kind: SystemKind, params: ModelParams, tgrid: TimeGrid, spec: &'a CovarianceSpec) -> Self {
        Integrator {
            kind,
            params,
            tgrid,
            spec,
            control: None,
            noise: NoiseSource::None,
            base: None,
            stride: None,
            ceiling: Self::DEFAULT_CEILING,
            terms: StepTerms::default(),
        }
    }

    pub fn control(mut self, ctrl: &'a ControlPath) -> Self {
        self.control = Some(ctrl);
        self
    }

    pub fn noise_path(mut self, path: &'a NoisePath) -> Self {
        self.noise = NoiseSource::Shared(path);
        self
    }

    /// Draw increments on the fly from stream `stream` of `base_seed`.
    pub fn seed(mut self, base_seed: u64, stream: u64) -> Self {
        self.noise = NoiseSource::Seeded(SeedInfo { base_seed, stream });
        self
    }

    pub fn base(mut self, base: &'a TrajectoryRecord) -> Self {
        self.base = Some(base);
        self
    }

    /// Snapshot every `stride` steps (the final step is always stored).
    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = Some(stride.max(1));
        self
    }

    /// Abort when `‖u‖_∞` exceeds this value.
    pub fn ceiling(mut self, ceiling: f64) -> Self {
        self.ceiling = ceiling;
        self
    }

    pub fn terms(mut self, terms: StepTerms) -> Self {
        self.terms = terms;
        self
    }

    pub fn run(&self, initial: &VectorField) -> Result<TrajectoryRecord> {
        self.params.validate()?;
        let grid = *initial.grid();
        if !initial.is_finite() {
            return Err(LlbError::invalid("initial field is not finite"));
        }
        let steps = self.tgrid.steps();
        let dt = self.tgrid.dt();
        let stride = self.stride.unwrap_or_else(|| self.tgrid.default_stride());

        let control = if self.kind.uses_control() {
            let ctrl = self.control.ok_or(LlbError::MissingInput("control path"))?;
            if ctrl.steps() != steps || ctrl.modes() != self.spec.modes() {
                return Err(LlbError::DimensionMismatch(format!(
                    "control path is {}×{} (steps×modes), run needs {steps}×{}",
                    ctrl.steps(),
                    ctrl.modes(),
                    self.spec.modes()
                )));
            }
            Some(ctrl)
        } else {
            None
        };
        let base = if self.kind == SystemKind::LinearizedClt {
            let base = self.base.ok_or(LlbError::MissingInput("base trajectory u0"))?;
            if base.grid() != &grid || base.time_grid() != &self.tgrid || !base.is_dense() {
                return Err(LlbError::DimensionMismatch(
                    "base trajectory must be stored at every step on the same grids".into(),
                ));
            }
            Some(base)
        } else {
            None
        };
        let mut rng: Option<NoiseRng> = None;
        let mut seed = None;
        if self.kind.uses_noise() {
            match self.noise {
                NoiseSource::None => return Err(LlbError::MissingInput("noise path or seed")),
                NoiseSource::Shared(path) => {
                    if path.len() != steps {
                        return Err(LlbError::DimensionMismatch(format!(
                            "noise path has {} steps, run needs {steps}",
                            path.len()
                        )));
                    }
                }
                NoiseSource::Seeded(info) => {
                    rng = Some(stream_rng(info.base_seed, info.stream));
                    seed = Some(info);
                }
            }
        }

        let stepper = Stepper::with_terms(grid, self.params, dt, self.terms)?;
        let synth = ModeSynthesizer::new(self.spec, grid);
        let noise_scale = match self.kind {
            SystemKind::LinearizedClt => 1.0,
            _ => self.params.epsilon.sqrt(),
        };
        let mut digest = self.kind.uses_noise().then(IncrementDigest::default);

        let mut reports = Vec::with_capacity(steps + 1);
        let mut snapshot_steps = vec![0];
        let mut snapshots = vec![initial.clone()];
        reports.push(initial.norms_at(0.0));
        let mut u = initial.clone();
        let mut drawn: WienerIncrement;

        for n in 0..steps {
            let incr: Option<&WienerIncrement> = if self.kind.uses_noise() {
                match self.noise {
                    NoiseSource::Shared(path) => Some(&path.increments()[n]),
                    _ => {
                        drawn = sample_increment(self.spec, dt, rng.as_mut().expect("seeded"))?;
                        Some(&drawn)
                    }
                }
            } else {
                None
            };
            if let (Some(d), Some(incr)) = (digest.as_mut(), incr) {
                d.update(incr);
            }
            let noise_field = match incr {
                Some(incr) if noise_scale != 0.0 => Some(synth.synthesize(incr.coefficients())?),
                _ => None,
            };

            let next = match base {
                Some(base) => {
                    let u0 = base.snapshot_at(n).expect("dense base");
                    stepper.advance_linearized(&u, u0, noise_field.as_ref())
                }
                None => {
                    let ctrl_field = match control {
                        Some(ctrl) => {
                            let coeffs = ctrl.at(n)?;
                            if coeffs.iter().flatten().any(|&c| c != 0.0) {
                                Some(synth.synthesize(coeffs)?)
                            } else {
                                None
                            }
                        }
                        None => None,
                    };
                    let forcing =
                        combine_forcing(&grid, noise_scale, noise_field.as_ref(), dt, ctrl_field.as_ref())?;
                    stepper.advance(&u, forcing.as_ref())
                }
            };
            u = next.map_err(|e| match e {
                LlbError::BlowUp { reason, .. } => LlbError::BlowUp { step: n + 1, reason },
                other => other,
            })?;
            let report = u.norms_at(self.tgrid.time(n + 1));
            if report.linf > self.ceiling {
                return Err(LlbError::BlowUp {
                    step: n + 1,
                    reason: format!("‖u‖_∞ = {:.3e} exceeds ceiling {:.3e}", report.linf, self.ceiling),
                });
            }
            reports.push(report);
            if (n + 1) % stride == 0 || n + 1 == steps {
                snapshot_steps.push(n + 1);
                snapshots.push(u.clone());
            }
        }

        Ok(TrajectoryRecord {
            kind: self.kind,
            params: self.params,
            tgrid: self.tgrid,
            grid,
            reports,
            snapshot_steps,
            snapshots,
            seed,
            noise_digest: digest.map(IncrementDigest::finish),
        })
    }
}

/// Integrates `kind` from `initial`. Stochastic kinds replay `shared_path`;
/// use [`Integrator::seed`] to draw increments instead.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    kind: SystemKind,
    initial: &VectorField,
    params: ModelParams,
    tgrid: TimeGrid,
    spec: &CovarianceSpec,
    ctrl: Option<&ControlPath>,
    shared_path: Option<&NoisePath>,
    base: Option<&TrajectoryRecord>,
) -> Result<TrajectoryRecord> {
    let mut it = Integrator::new(kind, params, tgrid, spec);
    if let Some(c) = ctrl {
        it = it.control(c);
    }
    if let Some(p) = shared_path {
        it = it.noise_path(p);
    }
    if let Some(b) = base {
        it = it.base(b);
    }
    it.run(initial)
}

/// Default initial datum `a·sin(πx)ê₁ + b·sin(2πx)ê₂`.
pub fn default_initial(grid: Grid1D, a: f64, b: f64) -> VectorField {
    use std::f64::consts::PI;
    VectorField::from_fn(grid, |x| [a * (PI * x).sin(), b * (2.0 * PI * x).sin(), 0.0])
}

/// Outcome of a stochastic ensemble at one noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub epsilon: f64,
    /// Sample mean of `sup_t ‖∇u_ε‖²` over successful paths.
    pub mean_sup_gradient_sq: f64,
    pub std_error: f64,
    /// `sup_t ‖∇u₀‖²` of the deterministic run from the same datum.
    pub deterministic_sup_gradient_sq: f64,
    pub n_ok: usize,
    pub n_failed: usize,
}

/// One row per noise level.
pub fn write_ensemble_csv<W: Write>(rows: &[EnsembleSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and standard error in fixed (index) order.
pub(crate) fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let m = values.len();
    if m == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64;
    (mean, (var / m as f64).sqrt())
}

/// Runs `samples` independent `Stochastic` paths per noise level and records
/// `sup_t ‖∇u_ε‖²`. Path `m` of level `i` uses stream `(base_seed, (i, m))`.
pub fn gradient_ensemble(
    initial: &VectorField,
    params: ModelParams,
    tgrid: TimeGrid,
    spec: &CovarianceSpec,
    epsilons: &[f64],
    samples: usize,
    base_seed: u64,
) -> Result<Vec<EnsembleSummary>> {
    let det = Integrator::new(SystemKind::Deterministic, params.with_epsilon(0.0), tgrid, spec)
        .stride(usize::MAX)
        .run(initial)?;
    let det_sup = det.sup_gradient_sq();
    epsilons
        .iter()
        .enumerate()
        .map(|(i, &eps)| {
            let p = params.with_epsilon(eps);
            p.validate()?;
            let outcomes: Vec<Result<f64>> = (0..samples)
                .into_par_iter()
                .map(|m| {
                    Integrator::new(SystemKind::Stochastic, p, tgrid, spec)
                        .seed(base_seed, stream_id(i, m))
                        .stride(usize::MAX)
                        .run(initial)
                        .map(|r| r.sup_gradient_sq())
                })
                .collect();
            let mut ok = Vec::with_capacity(samples);
            let mut failed = 0;
            for o in outcomes {
                match o {
                    Ok(v) => ok.push(v),
                    Err(LlbError::BlowUp { .. }) => failed += 1,
                    Err(e) => return Err(e),
                }
            }
            let (mean, se) = mean_and_stderr(&ok);
            Ok(EnsembleSummary {
                epsilon: eps,
                mean_sup_gradient_sq: mean,
                std_error: se,
                deterministic_sup_gradient_sq: det_sup,
                n_ok: ok.len(),
                n_failed: failed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn spec() -> CovarianceSpec {
        CovarianceSpec::new(4, 4.0).unwrap()
    }

    #[test]
    fn params_and_time_grid_validation() {
        assert!(ModelParams::default().validate().is_ok());
        assert!(ModelParams { nu1: 0.0, ..Default::default() }.validate().is_err());
        assert!(ModelParams::default().with_epsilon(1.5).validate().is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(-1.0, 4).is_err());
        let t = TimeGrid::new(0.25, 2500).unwrap();
        assert!((t.dt() - 1e-4).abs() < 1e-18);
        assert_eq!(t.default_stride(), 1);
        assert_eq!(TimeGrid::new(1.0, 25_000).unwrap().default_stride(), 3);
    }

    #[test]
    fn rhs_vanishes_without_precession_and_damping() {
        let grid = Grid1D::new(31).unwrap();
        let u = default_initial(grid, 0.8, 0.4);
        let p = ModelParams { gamma: 0.0, nu2: 0.0, ..Default::default() };
        assert_eq!(explicit_rhs(&u, &p), VectorField::zeros(grid));
    }

    #[test]
    fn rhs_single_direction_is_pure_damping() {
        let grid = Grid1D::new(31).unwrap();
        let u = VectorField::from_fn(grid, |x| [(PI * x).sin(), 0.0, 0.0]);
        let p = ModelParams { nu2: 0.7, mu: 2.0, ..Default::default() };
        let rhs = explicit_rhs(&u, &p);
        for (v, r) in u.values().iter().zip(rhs.values()) {
            let f = v[0];
            assert!((r[0] + 0.7 * (1.0 + 2.0 * f * f) * f).abs() < 1e-14);
            assert_eq!(r[1], 0.0);
            assert_eq!(r[2], 0.0);
        }
    }

    #[test]
    fn precession_is_orthogonal_to_u() {
        let grid = Grid1D::new(63).unwrap();
        let u = default_initial(grid, 0.8, 0.4).map(|v| [v[0], v[1], 0.3 * v[0] * v[1]]);
        let p = ModelParams { nu2: 0.0, ..Default::default() };
        let rhs = explicit_rhs(&u, &p);
        let scale: f64 = grid.spacing()
            * u.values()
                .iter()
                .zip(rhs.values())
                .map(|(a, b)| dot(*a, *a).sqrt() * dot(*b, *b).sqrt())
                .sum::<f64>();
        assert!(rhs.inner(&u).unwrap().abs() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn heat_step_matches_decay() {
        let grid = Grid1D::new(255).unwrap();
        let p = ModelParams { gamma: 0.0, nu2: 0.0, ..Default::default() };
        let tgrid = TimeGrid::new(0.1, 1000).unwrap();
        let u0 = VectorField::from_fn(grid, |x| [(PI * x).sin(), 0.0, 0.0]);
        let rec = Integrator::new(SystemKind::Deterministic, p, tgrid, &spec()).run(&u0).unwrap();
        let decay = (-PI * PI * 0.1f64).exp();
        let err = grid
            .nodes()
            .zip(rec.terminal().values())
            .map(|(x, v)| (v[0] - decay * (PI * x).sin()).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-3, "{err}");
        assert!(rec.is_dense());
        assert_eq!(rec.reports().len(), 1001);
    }

    #[test]
    fn step_reports_blow_up() {
        let grid = Grid1D::new(15).unwrap();
        let u = VectorField::from_fn(grid, |_| [f64::MAX, 0.0, 0.0]);
        let p = ModelParams { nu2: 1.0, mu: 1.0, ..Default::default() };
        assert!(matches!(step(&u, &p, 1e-3, None, None), Err(LlbError::BlowUp { .. })));
    }

    #[test]
    fn ceiling_aborts_with_step_index() {
        let grid = Grid1D::new(15).unwrap();
        let u0 = default_initial(grid, 0.8, 0.4);
        let tgrid = TimeGrid::new(0.01, 10).unwrap();
        let err = Integrator::new(SystemKind::Deterministic, ModelParams::default(), tgrid, &spec())
            .ceiling(1e-3)
            .run(&u0)
            .unwrap_err();
        assert!(matches!(err, LlbError::BlowUp { step: 1, .. }));
    }

    #[test]
    fn missing_inputs_are_rejected() {
        let grid = Grid1D::new(15).unwrap();
        let u0 = default_initial(grid, 0.8, 0.4);
        let tgrid = TimeGrid::new(0.01, 10).unwrap();
        let s = spec();
        let p = ModelParams::default().with_epsilon(0.1);
        for kind in [SystemKind::Skeleton, SystemKind::ControlledStochastic] {
            let err = Integrator::new(kind, p, tgrid, &s).seed(1, 0).run(&u0).unwrap_err();
            assert!(matches!(err, LlbError::MissingInput("control path")));
        }
        let err = Integrator::new(SystemKind::Stochastic, p, tgrid, &s).run(&u0).unwrap_err();
        assert!(matches!(err, LlbError::MissingInput(_)));
        let err = Integrator::new(SystemKind::LinearizedClt, p, tgrid, &s).seed(1, 0).run(&u0).unwrap_err();
        assert!(matches!(err, LlbError::MissingInput("base trajectory u0")));
    }

    #[test]
    fn seeded_and_shared_paths_agree() {
        let grid = Grid1D::new(31).unwrap();
        let u0 = default_initial(grid, 0.8, 0.4);
        let tgrid = TimeGrid::new(0.01, 50).unwrap();
        let s = spec();
        let p = ModelParams::default().with_epsilon(0.1);
        let seeded = Integrator::new(SystemKind::Stochastic, p, tgrid, &s).seed(9, 2).run(&u0).unwrap();
        let path = NoisePath::sample(&s, 50, tgrid.dt(), &mut stream_rng(9, 2)).unwrap();
        let shared = Integrator::new(SystemKind::Stochastic, p, tgrid, &s).noise_path(&path).run(&u0).unwrap();
        assert_eq!(seeded.snapshots(), shared.snapshots());
        assert_eq!(seeded.noise_digest(), Some(path.digest().as_str()));
        assert_eq!(shared.noise_digest(), seeded.noise_digest());
    }

    #[test]
    fn field_csv_round_trip() {
        let grid = Grid1D::new(7).unwrap();
        let u0 = default_initial(grid, 0.8, 0.4);
        let tgrid = TimeGrid::new(0.01, 4).unwrap();
        let rec = Integrator::new(SystemKind::Deterministic, ModelParams::default(), tgrid, &spec())
            .run(&u0)
            .unwrap();
        let mut buf = Vec::new();
        rec.write_fields_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"step,node_index,ux,uy,uz\n"));
        let back = read_fields_csv(buf.as_slice(), grid).unwrap();
        assert_eq!(back.len(), 5);
        assert_eq!(&back[4].1, rec.terminal());
        let mut buf = Vec::new();
        rec.write_reports_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,time,l2,h1_semi,h2_semi,linf\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
