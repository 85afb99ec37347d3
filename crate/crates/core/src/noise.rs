//! Truncated Q-Wiener process on L²((0,1); ℝ³) and control paths in its
//! Cameron–Martin space.
//!
//! The covariance is diagonal in the basis `e_k(x) ê_j` with
//! `e_k(x) = √2 sin(kπx)` and eigenvalues `λ_k = s·k^{−α}` (`s` is an overall
//! strength, 1 unless a test silences the noise). The noise enters the
//! equation as `u × dW` with
//!
//! ```text
//! W(t, x) = Σ_{k ≤ K} Σ_j √λ_k e_k(x) W_{k,j}(t) ê_j
//! ```
//!
//! and a control `h` is stored by its coordinates `c_{k,j}(t)` in the
//! orthonormal basis `{√λ_k e_k ê_j}` of H₀, so `‖h‖²_{H₀} = Σ c²`.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LlbError, Result};
use crate::field::{Grid1D, Vec3, VectorField};

/// Per-trajectory random stream.
pub type NoiseRng = ChaCha8Rng;

/// Stream `stream` of the generator seeded with `base_seed`.
///
/// Streams are independent and addressable, so ensembles do not depend on
/// scheduling order.
pub fn stream_rng(base_seed: u64, stream: u64) -> NoiseRng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(stream);
    rng
}

/// Packs a (group, sample) pair into one stream id.
pub fn stream_id(group: usize, sample: usize) -> u64 {
    ((group as u64) << 32) | (sample as u64 & 0xffff_ffff)
}

/// Diagonal trace-class covariance truncated to `K` sine modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    modes: usize,
    decay: f64,
    strength: f64,
    sqrt_lambda: Vec<f64>,
}

impl CovarianceSpec {
    pub const DEFAULT_DECAY: f64 = 4.0;

    /// `K` modes with `λ_k = k^{−α}`.
    ///
    /// Requires `α > 3` so that `Σ_k λ_k ‖e_k‖²_{H¹}` is summable, i.e. the
    /// noise operator is Hilbert–Schmidt into H¹.
    pub fn new(modes: usize, decay: f64) -> Result<Self> {
        if modes == 0 {
            return Err(LlbError::invalid("covariance needs at least one mode"));
        }
        if !(decay > 3.0) || !decay.is_finite() {
            return Err(LlbError::invalid(format!(
                "decay exponent {decay} violates the H¹ trace condition \
                 Σ_k ‖G̃_k‖²_H¹ < ∞ (needs α > 3)"
            )));
        }
        let sqrt_lambda = (1..=modes).map(|k| (k as f64).powf(-decay).sqrt()).collect();
        Ok(CovarianceSpec {
            modes,
            decay,
            strength: 1.0,
            sqrt_lambda,
        })
    }

    /// Multiplies every eigenvalue by `strength ≥ 0`. Zero silences the noise.
    pub fn with_strength(mut self, strength: f64) -> Result<Self> {
        if !(strength >= 0.0) || !strength.is_finite() {
            return Err(LlbError::invalid(format!("noise strength must be ≥ 0, got {strength}")));
        }
        let ratio = (strength / self.strength).sqrt();
        if self.strength == 0.0 {
            self.sqrt_lambda = (1..=self.modes)
                .map(|k| (strength * (k as f64).powf(-self.decay)).sqrt())
                .collect();
        } else {
            self.sqrt_lambda.iter_mut().for_each(|s| *s *= ratio);
        }
        self.strength = strength;
        Ok(self)
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// `λ_k` for 1-based mode `k`.
    pub fn eigenvalue(&self, k: usize) -> f64 {
        let s = self.sqrt_lambda[k - 1];
        s * s
    }

    /// `√λ_k` for 1-based mode `k`.
    pub fn sqrt_eigenvalue(&self, k: usize) -> f64 {
        self.sqrt_lambda[k - 1]
    }

    /// `Σ_{k ≤ K} Σ_j λ_k ‖e_k‖²_{H¹} = Σ_k 3 λ_k (1 + (kπ)²)`.
    pub fn partial_h1_trace(&self) -> f64 {
        (1..=self.modes)
            .map(|k| {
                let kp = k as f64 * PI;
                3.0 * self.eigenvalue(k) * (1.0 + kp * kp)
            })
            .sum()
    }
}

/// Increments `ΔW_{k,j}` over one step, each `N(0, dt)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerIncrement {
    dt: f64,
    coefficients: Vec<Vec3>,
}

impl WienerIncrement {
    pub fn zeros(modes: usize, dt: f64) -> Self {
        WienerIncrement {
            dt,
            coefficients: vec![[0.0; 3]; modes],
        }
    }

    pub fn from_coefficients(coefficients: Vec<Vec3>, dt: f64) -> Self {
        WienerIncrement { dt, coefficients }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Row `k − 1` holds the three directions of mode `k`.
    pub fn coefficients(&self) -> &[Vec3] {
        &self.coefficients
    }

    pub fn modes(&self) -> usize {
        self.coefficients.len()
    }
}

/// Draws one increment; entries are filled mode-major, direction-minor.
pub fn sample_increment<R: Rng + ?Sized>(
    spec: &CovarianceSpec,
    dt: f64,
    rng: &mut R,
) -> Result<WienerIncrement> {
    if !(dt > 0.0) {
        return Err(LlbError::invalid(format!("time step must be positive, got {dt}")));
    }
    let sd = dt.sqrt();
    let coefficients = (0..spec.modes)
        .map(|_| {
            let mut row = [0.0; 3];
            for v in &mut row {
                let z: f64 = rng.sample(StandardNormal);
                *v = sd * z;
            }
            row
        })
        .collect();
    Ok(WienerIncrement { dt, coefficients })
}

/// Raw increments for every step of one path, shareable between systems.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    increments: Vec<WienerIncrement>,
}

impl NoisePath {
    pub fn sample<R: Rng + ?Sized>(
        spec: &CovarianceSpec,
        steps: usize,
        dt: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let increments = (0..steps)
            .map(|_| sample_increment(spec, dt, rng))
            .collect::<Result<_>>()?;
        Ok(NoisePath { increments })
    }

    pub fn from_increments(increments: Vec<WienerIncrement>) -> Self {
        NoisePath { increments }
    }

    pub fn increments(&self) -> &[WienerIncrement] {
        &self.increments
    }

    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// SHA-256 over the bit patterns of every increment, hex encoded.
    pub fn digest(&self) -> String {
        let mut digest = IncrementDigest::default();
        for incr in &self.increments {
            digest.update(incr);
        }
        digest.finish()
    }
}

/// Streaming digest of consumed increments.
#[derive(Default, Clone)]
pub struct IncrementDigest {
    hasher: Sha256,
}

impl IncrementDigest {
    pub fn update(&mut self, incr: &WienerIncrement) {
        for row in &incr.coefficients {
            for v in row {
                self.hasher.update(v.to_bits().to_le_bytes());
            }
        }
    }

    pub fn finish(self) -> String {
        hex::encode(self.hasher.finalize())
    }
}

/// Tabulated `√λ_k e_k(x_i)` on a grid, used to synthesize noise and control
/// fields from mode coordinates.
#[derive(Debug, Clone)]
pub struct ModeSynthesizer {
    grid: Grid1D,
    modes: usize,
    // table[k * n + i] = √λ_{k+1} √2 sin((k+1)π x_i)
    table: Vec<f64>,
}

impl ModeSynthesizer {
    pub fn new(spec: &CovarianceSpec, grid: Grid1D) -> Self {
        let n = grid.n_interior();
        let mut table = Vec::with_capacity(spec.modes * n);
        for k in 1..=spec.modes {
            let amp = spec.sqrt_eigenvalue(k) * 2f64.sqrt();
            table.extend(grid.nodes().map(|x| amp * (k as f64 * PI * x).sin()));
        }
        ModeSynthesizer {
            grid,
            modes: spec.modes,
            table,
        }
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    /// `Σ_{k,j} √λ_k c_{k,j} e_k ê_j`.
    pub fn synthesize(&self, coefficients: &[Vec3]) -> Result<VectorField> {
        if coefficients.len() != self.modes {
            return Err(LlbError::DimensionMismatch(format!(
                "{} mode rows for a covariance with {} modes",
                coefficients.len(),
                self.modes
            )));
        }
        let n = self.grid.n_interior();
        let mut values = vec![[0.0; 3]; n];
        for (k, c) in coefficients.iter().enumerate() {
            if c[0] == 0.0 && c[1] == 0.0 && c[2] == 0.0 {
                continue;
            }
            let row = &self.table[k * n..(k + 1) * n];
            for (v, &phi) in values.iter_mut().zip(row) {
                v[0] += c[0] * phi;
                v[1] += c[1] * phi;
                v[2] += c[2] * phi;
            }
        }
        VectorField::from_values(self.grid, values)
    }

    /// Projects a field back to H₀ coordinates: `c_{k,j} = (f, e_k ê_j)/√λ_k`.
    ///
    /// Exact for fields in the span of the first `K` modes when `K ≤ n`
    /// (discrete sine orthogonality).
    pub fn project(&self, field: &VectorField) -> Result<Vec<Vec3>> {
        if field.grid() != &self.grid {
            return Err(LlbError::GridMismatch {
                left: field.grid().n_interior(),
                right: self.grid.n_interior(),
            });
        }
        let n = self.grid.n_interior();
        let h = self.grid.spacing();
        (0..self.modes)
            .map(|k| {
                let row = &self.table[k * n..(k + 1) * n];
                let mut c = [0.0; 3];
                for (v, &phi) in field.values().iter().zip(row) {
                    c[0] += v[0] * phi;
                    c[1] += v[1] * phi;
                    c[2] += v[2] * phi;
                }
                // row = √λ e_k, so (f, row)/λ = (f, e_k)/√λ.
                let amp2 = {
                    let s = row_amplitude(row, h);
                    s * s
                };
                if amp2 == 0.0 {
                    return Err(LlbError::invalid("cannot project onto a silenced mode"));
                }
                Ok(c.map(|v| h * v / amp2))
            })
            .collect()
    }
}

// ‖√λ e_k‖ on the grid, which is √λ for resolved modes.
fn row_amplitude(row: &[f64], h: f64) -> f64 {
    (h * row.iter().map(|v| v * v).sum::<f64>()).sqrt()
}

/// Noise field `B = Σ √λ_k ΔW_{k,j} e_k ê_j` for one increment.
pub fn noise_field(spec: &CovarianceSpec, incr: &WienerIncrement, grid: Grid1D) -> Result<VectorField> {
    ModeSynthesizer::new(spec, grid).synthesize(&incr.coefficients)
}

/// The control `h(t_n)` as a field on `grid`.
pub fn control_field(
    spec: &CovarianceSpec,
    ctrl: &ControlPath,
    step: usize,
    grid: Grid1D,
) -> Result<VectorField> {
    if ctrl.modes != spec.modes {
        return Err(LlbError::DimensionMismatch(format!(
            "control has {} modes, covariance {}",
            ctrl.modes, spec.modes
        )));
    }
    ModeSynthesizer::new(spec, grid).synthesize(ctrl.at(step)?)
}

/// Piecewise-constant control in H₀ coordinates on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    dt: f64,
    steps: usize,
    modes: usize,
    coefficients: Vec<Vec3>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ControlRow {
    step: usize,
    k: usize,
    j: usize,
    coefficient: f64,
}

impl ControlPath {
    pub fn zeros(steps: usize, dt: f64, modes: usize) -> Result<Self> {
        if steps == 0 || modes == 0 || !(dt > 0.0) {
            return Err(LlbError::invalid(format!(
                "control path needs steps ≥ 1, modes ≥ 1, dt > 0 (got {steps}, {modes}, {dt})"
            )));
        }
        Ok(ControlPath {
            dt,
            steps,
            modes,
            coefficients: vec![[0.0; 3]; steps * modes],
        })
    }

    /// Constant-in-time control with a single nonzero coordinate `c_{k,j}`
    /// (both indices 1-based).
    pub fn single_mode(steps: usize, dt: f64, modes: usize, k: usize, j: usize, value: f64) -> Result<Self> {
        let mut ctrl = Self::zeros(steps, dt, modes)?;
        for n in 0..steps {
            ctrl.set(n, k, j, value)?;
        }
        Ok(ctrl)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.steps as f64
    }

    /// Coordinates at step `n`, one row per mode.
    pub fn at(&self, n: usize) -> Result<&[Vec3]> {
        if n >= self.steps {
            return Err(LlbError::invalid(format!(
                "control step {n} out of range (path has {} steps)",
                self.steps
            )));
        }
        Ok(&self.coefficients[n * self.modes..(n + 1) * self.modes])
    }

    pub fn get(&self, n: usize, k: usize, j: usize) -> Result<f64> {
        let idx = self.index(n, k, j)?;
        Ok(self.coefficients[idx.0][idx.1])
    }

    pub fn set(&mut self, n: usize, k: usize, j: usize, value: f64) -> Result<()> {
        let idx = self.index(n, k, j)?;
        self.coefficients[idx.0][idx.1] = value;
        Ok(())
    }

    fn index(&self, n: usize, k: usize, j: usize) -> Result<(usize, usize)> {
        if n >= self.steps || k == 0 || k > self.modes || j == 0 || j > 3 {
            return Err(LlbError::invalid(format!(
                "control index (step {n}, k {k}, j {j}) out of range"
            )));
        }
        Ok((n * self.modes + k - 1, j - 1))
    }

    /// `½ Σ_n dt Σ_{k,j} c²_{k,j}(t_n)`, i.e. `½∫‖h‖²_{H₀} dt`.
    pub fn h0_cost(&self) -> f64 {
        0.5 * self.dt
            * self
                .coefficients
                .iter()
                .flatten()
                .map(|c| c * c)
                .sum::<f64>()
    }

    pub fn scaled(&self, s: f64) -> ControlPath {
        let mut out = self.clone();
        out.coefficients
            .iter_mut()
            .flatten()
            .for_each(|c| *c *= s);
        out
    }

    /// Pointwise sum with another control on the same time grid and modes.
    pub fn plus(&self, other: &ControlPath) -> Result<ControlPath> {
        if self.steps != other.steps || self.modes != other.modes || self.dt != other.dt {
            return Err(LlbError::DimensionMismatch(
                "controls on different time grids or mode counts".into(),
            ));
        }
        let mut out = self.clone();
        for (a, b) in out.coefficients.iter_mut().zip(&other.coefficients) {
            for d in 0..3 {
                a[d] += b[d];
            }
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for n in 0..self.steps {
            for k in 1..=self.modes {
                let row = self.coefficients[n * self.modes + k - 1];
                for (j, &coefficient) in row.iter().enumerate() {
                    w.serialize(ControlRow {
                        step: n,
                        k,
                        j: j + 1,
                        coefficient,
                    })?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `(step, k, j, coefficient)` format. Step and mode counts are
    /// the largest indices present; missing entries are zero.
    pub fn read_csv<R: Read>(reader: R, dt: f64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let rows: Vec<ControlRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        if rows.is_empty() {
            return Err(LlbError::invalid("control file has no rows"));
        }
        let steps = rows.iter().map(|r| r.step).max().unwrap_or(0) + 1;
        let modes = rows.iter().map(|r| r.k).max().unwrap_or(0);
        let mut ctrl = Self::zeros(steps, dt, modes)?;
        for row in rows {
            if !row.coefficient.is_finite() {
                return Err(LlbError::invalid(format!(
                    "non-finite coefficient at step {} k {} j {}",
                    row.step, row.k, row.j
                )));
            }
            ctrl.set(row.step, row.k, row.j, row.coefficient)?;
        }
        Ok(ctrl)
    }
}

/// Returns `ctrl` rescaled onto the boundary of `S_M = {∫‖h‖²_{H₀} ≤ M}` if it
/// lies outside, unchanged otherwise.
pub fn project_to_ball(ctrl: &ControlPath, radius: f64) -> Result<ControlPath> {
    if !(radius > 0.0) {
        return Err(LlbError::invalid(format!("ball radius must be positive, got {radius}")));
    }
    let energy = 2.0 * ctrl.h0_cost();
    if energy <= radius {
        return Ok(ctrl.clone());
    }
    Ok(ctrl.scaled((radius / energy).sqrt()))
}
