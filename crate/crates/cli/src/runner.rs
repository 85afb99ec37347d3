//! Dispatch, output persistence and the run manifest.

use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use llb_core::analysis::{check_cubic_identity, check_identities, energy_drift, fit_slope, write_identity_csv, IdentityReport};
use llb_core::clt::{nonincreasing_within_pooled_se, run_clt, strictly_decreasing, write_levels_csv, CltConfig, LevelStats};
use llb_core::dynamics::{default_initial, gradient_ensemble, read_fields_csv, write_ensemble_csv, Integrator, ModelParams, SystemKind, TimeGrid};
use llb_core::field::{Grid1D, VectorField};
use llb_core::ldp::{compactness_probe, estimate_rate, skeleton_terminal, weak_convergence_experiment, write_compactness_csv, RateProblem};
use llb_core::noise::{stream_id, stream_rng, ControlPath, CovarianceSpec};
use llb_core::LlbError;
use rand::Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, ControlSource, ExperimentConfig, Kind, TargetSource};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    #[error("invalid input: {0}")]
    Input(LlbError),
    #[error("numerical blow-up: {0}")]
    BlowUp(LlbError),
    #[error("I/O error: {0}")]
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Input(_) => 2,
            RunError::BlowUp(_) => 3,
            RunError::Io(_) => 4,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Input(_) => "invalid_input",
            RunError::BlowUp(_) => "blow_up",
            RunError::Io(_) => "io",
        }
    }

    /// Machine-readable failure record.
    pub fn to_json(&self) -> serde_json::Value {
        let details: Vec<String> = match self {
            RunError::Config(e) => e.errors.clone(),
            other => vec![other.to_string()],
        };
        json!({
            "status": "error",
            "category": self.category(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
            "errors": details,
        })
    }
}

impl From<LlbError> for RunError {
    fn from(e: LlbError) -> Self {
        match e {
            LlbError::BlowUp { .. } => RunError::BlowUp(e),
            LlbError::Io(_) | LlbError::Csv(_) | LlbError::Json(_) => RunError::Io(e.to_string()),
            other => RunError::Input(other),
        }
    }
}

impl From<io::Error> for RunError {
    fn from(e: io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

/// Exit status of a run that produced its outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    /// The validation suite ran but these checks failed.
    ValidationFailed(Vec<String>),
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::Completed => 0,
            Outcome::ValidationFailed(_) => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

/// Writes files into one directory and remembers their digests.
struct Outputs {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, RunError> {
        fs::create_dir_all(dir)?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        fs::write(self.dir.join(name), bytes)?;
        self.files.push(OutputFile {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> llb_core::Result<()>,
    ) -> Result<(), RunError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, &buf)
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), RunError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| RunError::Io(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }
}

struct Setup {
    grid: Grid1D,
    tgrid: TimeGrid,
    spec: CovarianceSpec,
    params: ModelParams,
    initial: VectorField,
}

fn open(path: &Path) -> Result<BufReader<fs::File>, RunError> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| RunError::Io(format!("{}: {e}", path.display())))
}

fn read_field(path: &Path, grid: Grid1D, last: bool) -> Result<VectorField, RunError> {
    let records = read_fields_csv(open(path)?, grid)?;
    let pick = if last { records.into_iter().last() } else { records.into_iter().next() };
    pick.map(|(_, f)| f)
        .ok_or_else(|| RunError::Input(LlbError::InvalidInput(format!("{} holds no field", path.display()))))
}

fn control(source: &ControlSource, s: &Setup) -> Result<ControlPath, RunError> {
    let ctrl = match source {
        ControlSource::File(p) => pad_modes(ControlPath::read_csv(open(p)?, s.tgrid.dt())?, s.spec.modes())?,
        ControlSource::SingleMode { mode, direction, value } => {
            ControlPath::single_mode(s.tgrid.steps(), s.tgrid.dt(), s.spec.modes(), *mode, *direction, *value)?
        }
    };
    if ctrl.steps() != s.tgrid.steps() || ctrl.modes() != s.spec.modes() {
        return Err(RunError::Input(LlbError::DimensionMismatch(format!(
            "control is {}×{} (steps×modes), run needs {}×{}",
            ctrl.steps(),
            ctrl.modes(),
            s.tgrid.steps(),
            s.spec.modes()
        ))));
    }
    Ok(ctrl)
}

// Files list only nonzero entries, so they may name fewer modes than the run.
fn pad_modes(ctrl: ControlPath, modes: usize) -> Result<ControlPath, RunError> {
    if ctrl.modes() >= modes {
        return Ok(ctrl);
    }
    let mut padded = ControlPath::zeros(ctrl.steps(), ctrl.dt(), modes)?;
    for n in 0..ctrl.steps() {
        for (k, row) in ctrl.at(n)?.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                padded.set(n, k + 1, j + 1, c)?;
            }
        }
    }
    Ok(padded)
}

fn setup(cfg: &ExperimentConfig) -> Result<Setup, RunError> {
    let grid = Grid1D::new(cfg.n_interior)?;
    let initial = match &cfg.initial.file {
        Some(p) => read_field(p, grid, false)?,
        None => default_initial(grid, cfg.initial.a, cfg.initial.b),
    };
    Ok(Setup {
        grid,
        tgrid: TimeGrid::new(cfg.time.horizon, cfg.time.steps)?,
        spec: CovarianceSpec::new(cfg.noise.modes, cfg.noise.decay)?,
        params: cfg.model,
        initial,
    })
}

/// Runs the experiment in the current rayon pool and writes its outputs,
/// then `manifest.json`, into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<Outcome, RunError> {
    let started = Instant::now();
    let mut out = Outputs::new(out_dir)?;
    let s = setup(cfg)?;
    let outcome = match cfg.kind {
        Kind::Validate => validate(cfg, &mut out)?,
        Kind::Deterministic => deterministic(cfg, &s, &mut out)?,
        Kind::StochasticEnsemble => {
            let rows = gradient_ensemble(
                &s.initial,
                s.params,
                s.tgrid,
                &s.spec,
                &cfg.ensemble.epsilons,
                cfg.ensemble.samples,
                cfg.base_seed,
            )?;
            out.write_with("ensemble.csv", |w| write_ensemble_csv(&rows, w))?;
            Outcome::Completed
        }
        Kind::Clt => {
            let report = run_clt(&CltConfig {
                epsilons: cfg.clt.epsilons.clone(),
                samples: cfg.clt.samples,
                params: s.params,
                tgrid: s.tgrid,
                spec: s.spec.clone(),
                base_seed: cfg.base_seed,
                initial: s.initial.clone(),
            })?;
            out.write_with("clt_report.csv", |w| report.write_csv(w))?;
            out.write_with("summary.json", |w| {
                report.write_summary_json(&mut *w)?;
                w.push(b'\n');
                Ok(())
            })?;
            Outcome::Completed
        }
        Kind::WeakConvergence => {
            let h = control(&cfg.weak.control, &s)?;
            let rows = weak_convergence_experiment(
                &h,
                &cfg.weak.levels.epsilons,
                cfg.weak.levels.samples,
                s.params,
                s.tgrid,
                &s.spec,
                &s.initial,
                cfg.base_seed,
            )?;
            out.write_with("weak_convergence.csv", |w| write_levels_csv(&rows, w))?;
            out.write_json("summary.json", &level_summary(&rows))?;
            Outcome::Completed
        }
        Kind::Rate => rate(cfg, &s, &mut out)?,
        Kind::Compactness => {
            let h = control(&cfg.compactness.control, &s)?;
            let c = &cfg.compactness;
            let rows = compactness_probe(&h, &c.modes, c.cost, c.direction, s.params, s.tgrid, &s.spec, &s.initial)?;
            out.write_with("compactness.csv", |w| write_compactness_csv(&rows, w))?;
            let decreasing = rows.windows(2).all(|w| w[1].sup_gradient_sq < w[0].sup_gradient_sq);
            out.write_json(
                "summary.json",
                &json!({ "strictly_decreasing": decreasing, "rows": rows }),
            )?;
            Outcome::Completed
        }
    };
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "kind": cfg.kind.name(),
        "config": cfg,
        "threads": threads,
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
        "exit_code": outcome.exit_code(),
        "outputs": out.files,
    });
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| RunError::Io(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(out.dir.join("manifest.json"), bytes)?;
    Ok(outcome)
}

fn level_summary(rows: &[LevelStats]) -> serde_json::Value {
    let positive: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.epsilon > 0.0 && r.mean_error > 0.0)
        .map(|r| (r.epsilon, r.mean_error))
        .collect();
    let fit = fit_slope(&positive).ok();
    json!({
        "slope": fit.as_ref().map(|f| f.slope),
        "intercept": fit.as_ref().map(|f| f.intercept),
        "residual": fit.as_ref().map(|f| f.residual),
        "strictly_decreasing": strictly_decreasing(rows),
        "nonincreasing_within_pooled_se": nonincreasing_within_pooled_se(rows),
        "rows": rows,
    })
}

fn random_field<R: Rng>(grid: Grid1D, rng: &mut R) -> VectorField {
    let scale = 10f64.powf(rng.random_range(-2.0..2.0));
    let values = (0..grid.n_interior())
        .map(|_| {
            [
                scale * rng.random_range(-1.0..1.0),
                scale * rng.random_range(-1.0..1.0),
                scale * rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    VectorField::from_values(grid, values).expect("sized to grid")
}

/// Worst residual of each identity over random field pairs on every grid
/// size, plus the cubic identity on the configured initial profile.
fn validate(cfg: &ExperimentConfig, out: &mut Outputs) -> Result<Outcome, RunError> {
    let mut reports: Vec<IdentityReport> = Vec::new();
    for (i, &n) in cfg.validate.sizes.iter().enumerate() {
        let grid = Grid1D::new(n)?;
        let mut rng = stream_rng(cfg.base_seed, stream_id(i, 0));
        let mut worst: Vec<IdentityReport> = Vec::new();
        for _ in 0..cfg.validate.fields {
            let u = random_field(grid, &mut rng);
            let v = random_field(grid, &mut rng);
            let batch = check_identities(&u, &v)?;
            if worst.is_empty() {
                worst = batch;
                continue;
            }
            for (w, r) in worst.iter_mut().zip(batch) {
                if r.residual.abs() / r.tolerance > w.residual.abs() / w.tolerance {
                    *w = r;
                }
            }
        }
        reports.extend(worst.into_iter().map(|r| IdentityReport::new(format!("{}@n{n}", r.name), r.residual, r.tolerance)));
        let u = default_initial(grid, cfg.initial.a, cfg.initial.b);
        let cubic = check_cubic_identity(&u, cfg.model.mu).vector;
        reports.push(IdentityReport::new(format!("{}@n{n}", cubic.name), cubic.residual, cubic.tolerance));
    }
    out.write_with("identities.csv", |w| write_identity_csv(&reports, w))?;
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    Ok(if failed.is_empty() {
        Outcome::Completed
    } else {
        Outcome::ValidationFailed(failed)
    })
}

fn deterministic(cfg: &ExperimentConfig, s: &Setup, out: &mut Outputs) -> Result<Outcome, RunError> {
    let mut integrator = Integrator::new(SystemKind::Deterministic, s.params.with_epsilon(0.0), s.tgrid, &s.spec);
    if let Some(stride) = cfg.time.stride {
        integrator = integrator.stride(stride);
    }
    let rec = integrator.run(&s.initial)?;
    out.write_with("reports.csv", |w| rec.write_reports_csv(w))?;
    out.write_with("fields.csv", |w| rec.write_fields_csv(w))?;
    let drift = if rec.is_dense() {
        Some(energy_drift(&rec, &s.params)?)
    } else {
        None
    };
    let cubic = check_cubic_identity(rec.terminal(), s.params.mu);
    out.write_json(
        "summary.json",
        &json!({
            "sup_gradient_sq": rec.sup_gradient_sq(),
            "energy_drift": drift,
            "terminal": rec.terminal().norms_at(s.tgrid.horizon()),
            "cubic_identity_residual": cubic.vector.residual,
            "cubic_identity_scalar_form_residual": cubic.scalar_form_residual,
        }),
    )?;
    Ok(Outcome::Completed)
}

fn rate(cfg: &ExperimentConfig, s: &Setup, out: &mut Outputs) -> Result<Outcome, RunError> {
    let r = &cfg.rate;
    let target = match &r.target {
        TargetSource::File(p) => read_field(p, s.grid, true)?,
        TargetSource::Control(source) => {
            let h = control(source, s)?;
            skeleton_terminal(&h, s.params, s.tgrid, &s.spec, &s.initial)?
        }
    };
    let mut problem = RateProblem::new(target, r.control_modes, r.control_steps);
    problem.penalty = r.penalty;
    problem.continuation = r.continuation;
    problem.misfit_tolerance = r.misfit_tolerance;
    problem.optimizer = r.optimizer;
    let est = estimate_rate(&problem, s.params, s.tgrid, &s.spec, &s.initial)?;
    out.write_with("rate.json", |w| {
        est.write_json(&mut *w)?;
        w.push(b'\n');
        Ok(())
    })?;
    out.write_with("control.csv", |w| est.control.write_csv(w))?;
    Ok(Outcome::Completed)
}
