//! Experiment configuration: a TOML document with flat sections.
//!
//! Every key is optional except `kind`; omitted keys take the defaults listed
//! in [`ExperimentConfig::default_for`]. Unknown sections and keys are errors.
//! Relative file paths are resolved against the directory of the config file.
//!
//! ```toml
//! kind = "clt"            # validate | deterministic | stochastic-ensemble |
//!                         # clt | weak-convergence | rate | compactness
//! threads = 4             # optional
//!
//! [grid]
//! n_interior = 127
//!
//! [time]
//! horizon = 0.25
//! steps = 2500
//! stride = 1              # snapshot stride, default ceil(steps / 10⁴)
//!
//! [model]
//! nu1 = 1.0
//! nu2 = 1.0
//! gamma = 1.0
//! mu = 1.0
//!
//! [initial]               # a·sin(πx)ê₁ + b·sin(2πx)ê₂, or the first record of `file`
//! a = 0.8
//! b = 0.4
//! # file = "u0.csv"
//!
//! [noise]
//! modes = 8
//! decay = 4.0
//!
//! [seeds]
//! base_seed = 20240601
//!
//! [validate]
//! fields = 1000
//! sizes = [31, 127, 255]
//!
//! [ensemble]
//! epsilons = [0.1, 0.01]
//! samples = 64
//!
//! [clt]
//! epsilons = [0.1, 0.01, 0.001]
//! samples = 64
//!
//! [weak]
//! epsilons = [0.1, 0.01, 0.001]
//! samples = 32
//! control_mode = 1        # or control_file = "h.csv"
//! control_direction = 3
//! control_value = 0.5
//!
//! [rate]
//! target_mode = 1         # target = skeleton terminal state under this control,
//! target_direction = 3    # or target_control_file = "h.csv",
//! target_value = 0.5      # or target_file = "target.csv" (last record)
//! control_modes = 2
//! control_steps = 5
//! penalty = 1000.0
//! continuation = 10.0     # 0 disables the second stage
//! misfit_tolerance = 0.01
//! max_iterations = 300
//! step_size = 0.1
//! fd_bump = 1e-5
//! tolerance = 1e-4
//!
//! [compactness]
//! modes = [2, 4, 8]
//! cost = 1.0
//! direction = 3
//! control_mode = 1        # base control h, as in [weak]
//! control_direction = 3
//! control_value = 0.5
//!
//! [output]
//! dir = "out"
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use llb_core::dynamics::ModelParams;
use llb_core::ldp::OptimizerSettings;
use serde::Serialize;
use toml::{Table, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Validate,
    Deterministic,
    StochasticEnsemble,
    Clt,
    WeakConvergence,
    Rate,
    Compactness,
}

impl Kind {
    const NAMES: [(&'static str, Kind); 7] = [
        ("validate", Kind::Validate),
        ("deterministic", Kind::Deterministic),
        ("stochastic-ensemble", Kind::StochasticEnsemble),
        ("clt", Kind::Clt),
        ("weak-convergence", Kind::WeakConvergence),
        ("rate", Kind::Rate),
        ("compactness", Kind::Compactness),
    ];

    pub fn name(self) -> &'static str {
        Kind::NAMES.iter().find(|(_, k)| *k == self).unwrap().0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeSection {
    pub horizon: f64,
    pub steps: usize,
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InitialSection {
    pub a: f64,
    pub b: f64,
    pub file: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseSection {
    pub modes: usize,
    pub decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidateSection {
    pub fields: usize,
    pub sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelsSection {
    pub epsilons: Vec<f64>,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    File(PathBuf),
    SingleMode { mode: usize, direction: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    File(PathBuf),
    Control(ControlSource),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakSection {
    pub levels: LevelsSection,
    pub control: ControlSource,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateSection {
    pub target: TargetSource,
    pub control_modes: usize,
    pub control_steps: usize,
    pub penalty: f64,
    pub continuation: Option<f64>,
    pub misfit_tolerance: f64,
    pub optimizer: OptimizerSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompactnessSection {
    pub modes: Vec<usize>,
    pub cost: f64,
    pub direction: usize,
    pub control: ControlSource,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub threads: Option<usize>,
    pub n_interior: usize,
    pub time: TimeSection,
    pub model: ModelParams,
    pub initial: InitialSection,
    pub noise: NoiseSection,
    pub base_seed: u64,
    pub validate: ValidateSection,
    pub ensemble: LevelsSection,
    pub clt: LevelsSection,
    pub weak: WeakSection,
    pub rate: RateSection,
    pub compactness: CompactnessSection,
    pub output_dir: PathBuf,
}

/// Every problem found in a config document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub errors: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.errors.join("; "))
    }
}

impl std::error::Error for ConfigError {}

fn default_control() -> ControlSource {
    ControlSource::SingleMode {
        mode: 1,
        direction: 3,
        value: 0.5,
    }
}

impl ExperimentConfig {
    pub fn default_for(kind: Kind) -> Self {
        ExperimentConfig {
            kind,
            threads: None,
            n_interior: 127,
            time: TimeSection {
                horizon: 0.25,
                steps: 2500,
                stride: None,
            },
            model: ModelParams::default(),
            initial: InitialSection {
                a: 0.8,
                b: 0.4,
                file: None,
            },
            noise: NoiseSection { modes: 8, decay: 4.0 },
            base_seed: 20240601,
            validate: ValidateSection {
                fields: 1000,
                sizes: vec![31, 127, 255],
            },
            ensemble: LevelsSection {
                epsilons: vec![1e-1, 1e-2],
                samples: 64,
            },
            clt: LevelsSection {
                epsilons: vec![1e-1, 1e-2, 1e-3],
                samples: 64,
            },
            weak: WeakSection {
                levels: LevelsSection {
                    epsilons: vec![1e-1, 1e-2, 1e-3],
                    samples: 32,
                },
                control: default_control(),
            },
            rate: RateSection {
                target: TargetSource::Control(default_control()),
                control_modes: 2,
                control_steps: 5,
                penalty: 1e3,
                continuation: Some(10.0),
                misfit_tolerance: 1e-2,
                optimizer: OptimizerSettings::default(),
            },
            compactness: CompactnessSection {
                modes: vec![2, 4, 8],
                cost: 1.0,
                direction: 3,
                control: default_control(),
            },
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Reads one table, remembering which keys were consumed.
struct Section<'a> {
    name: &'static str,
    table: Option<&'a Table>,
    seen: BTreeSet<&'static str>,
    errors: &'a mut Vec<String>,
}

impl<'a> Section<'a> {
    fn key(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.name)
        }
    }

    fn raw(&mut self, key: &'static str) -> Option<&'a Value> {
        self.seen.insert(key);
        self.table.and_then(|t| t.get(key))
    }

    fn has(&self, key: &str) -> bool {
        self.table.is_some_and(|t| t.contains_key(key))
    }

    fn error(&mut self, key: &str, msg: impl fmt::Display) {
        let k = self.key(key);
        self.errors.push(format!("{k}: {msg}"));
    }

    fn float(&mut self, key: &'static str, default: f64) -> f64 {
        match self.raw(key) {
            None => default,
            Some(Value::Float(v)) => *v,
            Some(Value::Integer(v)) => *v as f64,
            Some(other) => {
                self.error(key, format!("expected a number, got {}", other.type_str()));
                default
            }
        }
    }

    fn integer(&mut self, key: &'static str, default: u64) -> u64 {
        match self.raw(key) {
            None => default,
            Some(Value::Integer(v)) if *v >= 0 => *v as u64,
            Some(Value::Integer(v)) => {
                self.error(key, format!("must be nonnegative, got {v}"));
                default
            }
            Some(other) => {
                self.error(key, format!("expected an integer, got {}", other.type_str()));
                default
            }
        }
    }

    fn count(&mut self, key: &'static str, default: usize) -> usize {
        self.integer(key, default as u64) as usize
    }

    fn text(&mut self, key: &'static str) -> Option<String> {
        match self.raw(key) {
            None => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(other) => {
                self.error(key, format!("expected a string, got {}", other.type_str()));
                None
            }
        }
    }

    fn floats(&mut self, key: &'static str, default: &[f64]) -> Vec<f64> {
        match self.raw(key) {
            None => default.to_vec(),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for v in items {
                    match v {
                        Value::Float(f) => out.push(*f),
                        Value::Integer(i) => out.push(*i as f64),
                        other => {
                            self.error(key, format!("expected numbers, found {}", other.type_str()));
                            return default.to_vec();
                        }
                    }
                }
                out
            }
            Some(other) => {
                self.error(key, format!("expected an array, got {}", other.type_str()));
                default.to_vec()
            }
        }
    }

    fn counts(&mut self, key: &'static str, default: &[usize]) -> Vec<usize> {
        match self.raw(key) {
            None => default.to_vec(),
            Some(Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for v in items {
                    match v {
                        Value::Integer(i) if *i >= 0 => out.push(*i as usize),
                        other => {
                            self.error(key, format!("expected nonnegative integers, found {other}"));
                            return default.to_vec();
                        }
                    }
                }
                out
            }
            Some(other) => {
                self.error(key, format!("expected an array, got {}", other.type_str()));
                default.to_vec()
            }
        }
    }

    fn path(&mut self, key: &'static str, base: &Path) -> Option<PathBuf> {
        let p = base.join(self.text(key)?);
        if !p.is_file() {
            self.error(key, format!("file {} does not exist", p.display()));
        }
        Some(p)
    }

    fn finish(self) {
        if let Some(t) = self.table {
            for k in t.keys() {
                if !self.seen.contains(k.as_str()) {
                    let key = if self.name.is_empty() {
                        k.clone()
                    } else {
                        format!("{}.{k}", self.name)
                    };
                    self.errors.push(format!("{key}: unknown key"));
                }
            }
        }
    }
}

const SECTIONS: [&str; 15] = [
    "output",
    "kind",
    "threads",
    "grid",
    "time",
    "model",
    "initial",
    "noise",
    "seeds",
    "validate",
    "ensemble",
    "clt",
    "weak",
    "rate",
    "compactness",
];

fn control_source(s: &mut Section<'_>, base: &Path, default: &ControlSource) -> ControlSource {
    let ControlSource::SingleMode {
        mode,
        direction,
        value,
    } = default.clone()
    else {
        unreachable!("defaults are single-mode")
    };
    let file_given = s.has("control_file");
    let file = s.path("control_file", base);
    let mode_keys = ["control_mode", "control_direction", "control_value"];
    if file_given && mode_keys.iter().any(|k| s.has(k)) {
        s.error("control_file", "conflicts with control_mode/control_direction/control_value");
    }
    let mode = s.count("control_mode", mode);
    let direction = s.count("control_direction", direction);
    let value = s.float("control_value", value);
    match file {
        Some(p) => ControlSource::File(p),
        None => ControlSource::SingleMode { mode, direction, value },
    }
}

fn check_single_mode(errors: &mut Vec<String>, section: &str, source: &ControlSource, modes: usize) {
    if let ControlSource::SingleMode { mode, direction, value } = source {
        if *mode == 0 || *mode > modes {
            errors.push(format!("{section}.control_mode: must lie in 1..={modes}, got {mode}"));
        }
        if !(1..=3).contains(direction) {
            errors.push(format!("{section}.control_direction: must lie in 1..=3, got {direction}"));
        }
        if !value.is_finite() {
            errors.push(format!("{section}.control_value: must be finite"));
        }
    }
}

fn check_levels(errors: &mut Vec<String>, section: &str, levels: &LevelsSection, allow_zero: bool, min_samples: usize) {
    let eps = &levels.epsilons;
    if eps.is_empty() {
        errors.push(format!("{section}.epsilons: at least one level is required"));
    }
    let lower_ok = |e: f64| if allow_zero { e >= 0.0 } else { e > 0.0 };
    if let Some(e) = eps.iter().find(|&&e| !(lower_ok(e) && e <= 1.0)) {
        let range = if allow_zero { "[0, 1]" } else { "(0, 1]" };
        errors.push(format!("{section}.epsilons: {e} outside {range}"));
    }
    if eps.windows(2).any(|w| w[1] >= w[0]) {
        errors.push(format!("{section}.epsilons: must be strictly decreasing"));
    }
    if levels.samples < min_samples {
        errors.push(format!(
            "{section}.samples: must be at least {min_samples}, got {}",
            levels.samples
        ));
    }
}

/// Parses and validates a config document. `base` resolves relative paths.
pub fn parse_config(text: &str, base: &Path) -> Result<ExperimentConfig, ConfigError> {
    let doc: Table = text.parse().map_err(|e: toml::de::Error| ConfigError {
        errors: vec![format!("malformed document: {}", e.message())],
    })?;
    let mut errors = Vec::new();

    for key in doc.keys() {
        if !SECTIONS.contains(&key.as_str()) {
            errors.push(format!("{key}: unknown key"));
        }
    }
    let table = |name: &str, errors: &mut Vec<String>| -> Option<&Table> {
        match doc.get(name) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                errors.push(format!("{name}: expected a section"));
                None
            }
        }
    };

    let kind = match doc.get("kind") {
        None => {
            errors.push("kind: missing (one of validate, deterministic, stochastic-ensemble, clt, weak-convergence, rate, compactness)".into());
            None
        }
        Some(Value::String(s)) => match Kind::NAMES.iter().find(|(n, _)| n == s) {
            Some((_, k)) => Some(*k),
            None => {
                errors.push(format!("kind: unknown experiment kind \"{s}\""));
                None
            }
        },
        Some(other) => {
            errors.push(format!("kind: expected a string, got {}", other.type_str()));
            None
        }
    };
    let mut cfg = ExperimentConfig::default_for(kind.unwrap_or(Kind::Validate));
    let d = cfg.clone();

    match doc.get("threads") {
        None => {}
        Some(Value::Integer(t)) if *t >= 1 => cfg.threads = Some(*t as usize),
        Some(other) => errors.push(format!("threads: must be a positive integer, got {other}")),
    }

    macro_rules! section {
        ($name:literal) => {{
            let t = table($name, &mut errors);
            Section {
                name: $name,
                table: t,
                seen: BTreeSet::new(),
                errors: &mut errors,
            }
        }};
    }

    {
        let mut s = section!("grid");
        cfg.n_interior = s.count("n_interior", d.n_interior);
        s.finish();
    }
    {
        let mut s = section!("time");
        cfg.time.horizon = s.float("horizon", d.time.horizon);
        cfg.time.steps = s.count("steps", d.time.steps);
        if s.has("stride") {
            cfg.time.stride = Some(s.count("stride", 1));
        }
        s.finish();
    }
    {
        let mut s = section!("model");
        cfg.model.nu1 = s.float("nu1", d.model.nu1);
        cfg.model.nu2 = s.float("nu2", d.model.nu2);
        cfg.model.gamma = s.float("gamma", d.model.gamma);
        cfg.model.mu = s.float("mu", d.model.mu);
        cfg.model.epsilon = s.float("epsilon", d.model.epsilon);
        s.finish();
    }
    {
        let mut s = section!("initial");
        cfg.initial.a = s.float("a", d.initial.a);
        cfg.initial.b = s.float("b", d.initial.b);
        cfg.initial.file = s.path("file", base);
        s.finish();
    }
    {
        let mut s = section!("noise");
        cfg.noise.modes = s.count("modes", d.noise.modes);
        cfg.noise.decay = s.float("decay", d.noise.decay);
        s.finish();
    }
    {
        let mut s = section!("seeds");
        cfg.base_seed = s.integer("base_seed", d.base_seed);
        s.finish();
    }
    {
        let mut s = section!("validate");
        cfg.validate.fields = s.count("fields", d.validate.fields);
        cfg.validate.sizes = s.counts("sizes", &d.validate.sizes);
        s.finish();
    }
    {
        let mut s = section!("ensemble");
        cfg.ensemble.epsilons = s.floats("epsilons", &d.ensemble.epsilons);
        cfg.ensemble.samples = s.count("samples", d.ensemble.samples);
        s.finish();
    }
    {
        let mut s = section!("clt");
        cfg.clt.epsilons = s.floats("epsilons", &d.clt.epsilons);
        cfg.clt.samples = s.count("samples", d.clt.samples);
        s.finish();
    }
    {
        let mut s = section!("weak");
        cfg.weak.levels.epsilons = s.floats("epsilons", &d.weak.levels.epsilons);
        cfg.weak.levels.samples = s.count("samples", d.weak.levels.samples);
        cfg.weak.control = control_source(&mut s, base, &d.weak.control);
        s.finish();
    }
    {
        let mut s = section!("rate");
        let file_given = s.has("target_file");
        let control_given = s.has("target_control_file");
        let file = s.path("target_file", base);
        let control_file = s.path("target_control_file", base);
        let mode_keys = ["target_mode", "target_direction", "target_value"];
        let modes_given = mode_keys.iter().any(|k| s.has(k));
        if [file_given, control_given, modes_given].iter().filter(|b| **b).count() > 1 {
            s.error(
                "target_file",
                "give only one of target_file, target_control_file, target_mode/target_direction/target_value",
            );
        }
        let mode = s.count("target_mode", 1);
        let direction = s.count("target_direction", 3);
        let value = s.float("target_value", 0.5);
        cfg.rate.target = match (file, control_file) {
            (Some(p), _) => TargetSource::File(p),
            (None, Some(p)) => TargetSource::Control(ControlSource::File(p)),
            (None, None) => TargetSource::Control(ControlSource::SingleMode { mode, direction, value }),
        };
        cfg.rate.control_modes = s.count("control_modes", d.rate.control_modes);
        cfg.rate.control_steps = s.count("control_steps", d.rate.control_steps);
        cfg.rate.penalty = s.float("penalty", d.rate.penalty);
        let cont = s.float("continuation", d.rate.continuation.unwrap_or(0.0));
        cfg.rate.continuation = (cont != 0.0).then_some(cont);
        cfg.rate.misfit_tolerance = s.float("misfit_tolerance", d.rate.misfit_tolerance);
        let o = &mut cfg.rate.optimizer;
        o.max_iterations = s.count("max_iterations", d.rate.optimizer.max_iterations);
        o.step_size = s.float("step_size", d.rate.optimizer.step_size);
        o.fd_bump = s.float("fd_bump", d.rate.optimizer.fd_bump);
        o.tolerance = s.float("tolerance", d.rate.optimizer.tolerance);
        s.finish();
    }
    {
        let mut s = section!("compactness");
        cfg.compactness.modes = s.counts("modes", &d.compactness.modes);
        cfg.compactness.cost = s.float("cost", d.compactness.cost);
        cfg.compactness.direction = s.count("direction", d.compactness.direction);
        cfg.compactness.control = control_source(&mut s, base, &d.compactness.control);
        s.finish();
    }
    {
        let mut s = section!("output");
        if let Some(dir) = s.text("dir") {
            cfg.output_dir = PathBuf::from(dir);
        }
        s.finish();
    }

    check_ranges(&cfg, &mut errors);
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(ConfigError { errors })
    }
}

fn check_ranges(cfg: &ExperimentConfig, errors: &mut Vec<String>) {
    let mut need = |ok: bool, msg: String| {
        if !ok {
            errors.push(msg);
        }
    };
    need(
        cfg.n_interior >= 3,
        format!("grid.n_interior: must be at least 3, got {}", cfg.n_interior),
    );
    need(
        cfg.time.horizon > 0.0 && cfg.time.horizon.is_finite(),
        format!("time.horizon: must be positive, got {}", cfg.time.horizon),
    );
    need(cfg.time.steps >= 1, format!("time.steps: must be at least 1, got {}", cfg.time.steps));
    if let Some(s) = cfg.time.stride {
        need(s >= 1, format!("time.stride: must be at least 1, got {s}"));
    }
    let m = &cfg.model;
    for (name, v) in [("nu1", m.nu1), ("nu2", m.nu2), ("mu", m.mu)] {
        need(v.is_finite() && v >= 0.0, format!("model.{name}: must be finite and nonnegative, got {v}"));
    }
    need(m.gamma.is_finite(), format!("model.gamma: must be finite, got {}", m.gamma));
    need(m.nu1 > 0.0, format!("model.nu1: must be positive, got {}", m.nu1));
    need(
        (0.0..=1.0).contains(&m.epsilon),
        format!("model.epsilon: must lie in [0, 1], got {}", m.epsilon),
    );
    need(cfg.initial.a.is_finite(), "initial.a: must be finite".into());
    need(cfg.initial.b.is_finite(), "initial.b: must be finite".into());
    need(cfg.noise.modes >= 1, format!("noise.modes: must be at least 1, got {}", cfg.noise.modes));
    need(
        cfg.noise.decay > 3.0,
        format!("noise.decay: must exceed 3 for a trace-class H¹ covariance, got {}", cfg.noise.decay),
    );
    need(cfg.validate.fields >= 1, "validate.fields: must be at least 1".into());
    need(!cfg.validate.sizes.is_empty(), "validate.sizes: at least one grid size is required".into());
    if let Some(n) = cfg.validate.sizes.iter().find(|&&n| n < 3) {
        errors.push(format!("validate.sizes: grid size {n} below 3"));
    }
    check_levels(errors, "ensemble", &cfg.ensemble, false, 1);
    check_levels(errors, "clt", &cfg.clt, false, 2);
    check_levels(errors, "weak", &cfg.weak.levels, true, 1);
    check_single_mode(errors, "weak", &cfg.weak.control, cfg.noise.modes);
    check_single_mode(errors, "compactness", &cfg.compactness.control, cfg.noise.modes);

    let r = &cfg.rate;
    if let TargetSource::Control(c @ ControlSource::SingleMode { .. }) = &r.target {
        let mut sub = Vec::new();
        check_single_mode(&mut sub, "rate", c, cfg.noise.modes);
        errors.extend(sub.into_iter().map(|e| e.replace("rate.control_", "rate.target_")));
    }
    if r.control_modes == 0 || r.control_modes > cfg.noise.modes {
        errors.push(format!(
            "rate.control_modes: must lie in 1..={}, got {}",
            cfg.noise.modes, r.control_modes
        ));
    }
    if r.control_steps == 0 || !cfg.time.steps.is_multiple_of(r.control_steps.max(1)) {
        errors.push(format!(
            "rate.control_steps: must divide time.steps = {}, got {}",
            cfg.time.steps, r.control_steps
        ));
    }
    if r.control_modes * r.control_steps * 3 > 300 {
        errors.push(format!(
            "rate: {} control unknowns exceed the limit of 300",
            r.control_modes * r.control_steps * 3
        ));
    }
    let mut need = |ok: bool, msg: String| {
        if !ok {
            errors.push(msg);
        }
    };
    need(r.penalty > 0.0, format!("rate.penalty: must be positive, got {}", r.penalty));
    if let Some(c) = r.continuation {
        need(c > 0.0, format!("rate.continuation: must be positive or 0 to disable, got {c}"));
    }
    need(
        r.misfit_tolerance > 0.0,
        format!("rate.misfit_tolerance: must be positive, got {}", r.misfit_tolerance),
    );
    let o = &r.optimizer;
    need(o.step_size > 0.0, format!("rate.step_size: must be positive, got {}", o.step_size));
    need(o.fd_bump > 0.0, format!("rate.fd_bump: must be positive, got {}", o.fd_bump));
    need(o.tolerance > 0.0, format!("rate.tolerance: must be positive, got {}", o.tolerance));

    let c = &cfg.compactness;
    need(!c.modes.is_empty(), "compactness.modes: at least one mode is required".into());
    if let Some(k) = c.modes.iter().find(|&&k| k == 0 || k > cfg.noise.modes) {
        errors.push(format!("compactness.modes: mode {k} outside 1..={}", cfg.noise.modes));
    }
    let mut need = |ok: bool, msg: String| {
        if !ok {
            errors.push(msg);
        }
    };
    need(c.cost >= 0.0, format!("compactness.cost: must be nonnegative, got {}", c.cost));
    need(
        (1..=3).contains(&c.direction),
        format!("compactness.direction: must lie in 1..=3, got {}", c.direction),
    );
}
