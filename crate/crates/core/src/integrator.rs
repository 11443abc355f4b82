//! Time stepping of single and coupled Galerkin trajectories.
//!
//! Noise is generated in H-orthonormal coordinates, where the truncated
//! cylindrical Brownian motion has i.i.d. `N(0, dt)` entries, and mapped back to
//! sine coordinates by `1/√w_i`. Every `(master_seed, path, step, channel)`
//! tuple owns a fixed window of a ChaCha8 keystream, so results do not depend
//! on how paths are scheduled across threads.
//!
//! The default scheme is a stabilized exponential Euler step. With a scalar
//! stiffness `α` supplied by the drift evaluation and `μ_i = α λ_i`,
//!
//! ```text
//! x_i ← e^{-μ_i dt} x_i + φ₁(μ_i dt) dt (A_i(x) + μ_i x_i) + noise_i,
//! ```
//!
//! where `φ₁(z) = (1 - e^{-z})/z`. For the linear families this integrates the
//! drift exactly; for the nonlinear ones it removes the explicit step-size limit
//! of the top mode.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coupling::{i_n_slice, increments_h, CouplingParams};
use crate::error::{invalid, Error, Result};
use crate::models::{b_diagonal, eval_drift, ModelSpec};
use crate::spaces::{SpectralSpace, StateVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Explicit,
    Exponential,
}

/// Bounded observable evaluated at every checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunctional {
    /// `tanh(scale · v_mode)` on a sine coefficient (1-based mode).
    TanhMode { mode: usize, scale: f64 },
    Constant { value: f64 },
}

impl Default for TestFunctional {
    fn default() -> Self {
        TestFunctional::TanhMode {
            mode: 1,
            scale: 1.0,
        }
    }
}

impl TestFunctional {
    pub fn eval(&self, v: &[f64]) -> f64 {
        match *self {
            TestFunctional::TanhMode { mode, scale } => {
                (scale * v.get(mode - 1).copied().unwrap_or(0.0)).tanh()
            }
            TestFunctional::Constant { value } => value,
        }
    }

    /// `sup f - inf f`
    pub fn osc(&self) -> f64 {
        match self {
            TestFunctional::TanhMode { scale, .. } if *scale != 0.0 => 2.0,
            _ => 0.0,
        }
    }

    /// Lipschitz constant with respect to the H-norm.
    pub fn lipschitz(&self, space: &SpectralSpace) -> f64 {
        match *self {
            TestFunctional::TanhMode { mode, scale } => match space.h_weights().get(mode.wrapping_sub(1)) {
                Some(w) => scale.abs() / w.sqrt(),
                None => 0.0,
            },
            TestFunctional::Constant { .. } => 0.0,
        }
    }

    fn validate(&self, n_modes: usize) -> Result<()> {
        match *self {
            TestFunctional::TanhMode { mode, scale } => {
                if mode == 0 || mode > n_modes {
                    return Err(invalid("functional.mode", mode as f64, "must be in 1..=N"));
                }
                if !scale.is_finite() {
                    return Err(invalid("functional.scale", scale, "must be finite"));
                }
            }
            TestFunctional::Constant { value } => {
                if !value.is_finite() {
                    return Err(invalid("functional.value", value, "must be finite"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub master_seed: u64,
    /// Observation times; each is rounded to the nearest step.
    pub checkpoint_times: Vec<f64>,
    pub scheme: Scheme,
    /// Escape levels `δ` whose first passage `‖X - Y‖ ≥ δ` is recorded.
    pub delta_levels: Vec<f64>,
    /// Accumulate `∫₀ᵗ ‖X_s‖_V^{1+r} ds` along the X component.
    pub track_v_integral: bool,
    pub functional: TestFunctional,
}

impl SimConfig {
    pub fn new(dt: f64, horizon: f64, n_paths: usize, master_seed: u64) -> Result<Self> {
        let cfg = SimConfig {
            dt,
            horizon,
            n_paths,
            master_seed,
            checkpoint_times: vec![0.0, horizon],
            scheme: Scheme::Exponential,
            delta_levels: Vec::new(),
            track_v_integral: false,
            functional: TestFunctional::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `count + 1` evenly spaced checkpoints on `[0, horizon]`.
    pub fn with_uniform_checkpoints(mut self, count: usize) -> Self {
        let count = count.max(1);
        self.checkpoint_times = (0..=count)
            .map(|k| self.horizon * k as f64 / count as f64)
            .collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", self.dt, "must be positive"));
        }
        if !(self.horizon.is_finite() && self.dt <= self.horizon) {
            return Err(invalid("horizon", self.horizon, "must be finite and at least dt"));
        }
        if self.n_paths == 0 {
            return Err(Error::EmptyEnsemble);
        }
        if self.checkpoint_times.is_empty() {
            return Err(Error::ConfigSemantic("at least one checkpoint is required".into()));
        }
        for w in self.checkpoint_times.windows(2) {
            if !(w[0] < w[1]) {
                return Err(Error::ConfigSemantic(
                    "checkpoint times must be strictly increasing".into(),
                ));
            }
        }
        for &t in &self.checkpoint_times {
            if !(0.0..=self.horizon * (1.0 + 1e-12)).contains(&t) {
                return Err(invalid("checkpoint", t, "must lie in [0, horizon]"));
            }
        }
        for &d in &self.delta_levels {
            if !(d > 0.0) {
                return Err(invalid("delta", d, "escape levels must be positive"));
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> u64 {
        (self.horizon / self.dt).round() as u64
    }

    /// Step indices of the checkpoints; distinct after rounding.
    pub fn checkpoint_steps(&self) -> Result<Vec<u64>> {
        let steps: Vec<u64> = self
            .checkpoint_times
            .iter()
            .map(|t| ((t / self.dt).round() as u64).min(self.n_steps()))
            .collect();
        if steps.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::ConfigSemantic(
                "two checkpoints fall on the same time step".into(),
            ));
        }
        Ok(steps)
    }
}

/// One step's increments of the three independent Brownian motions, in
/// H-orthonormal coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseIncrements {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
}

impl NoiseIncrements {
    pub fn zeros(n: usize) -> Self {
        NoiseIncrements {
            w1: vec![0.0; n],
            w2: vec![0.0; n],
            w3: vec![0.0; n],
        }
    }
}

/// Keystream of one path.
pub(crate) struct NoiseSource {
    rng: ChaCha8Rng,
    sqrt_dt: f64,
    words_per_block: u128,
}

impl NoiseSource {
    pub(crate) fn new(master_seed: u64, path: u64, n: usize, dt: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(path);
        // Box-Muller uses two u64 (four words) per pair of normals.
        let words_per_block = (4 * n.div_ceil(2)) as u128;
        NoiseSource {
            rng,
            sqrt_dt: dt.sqrt(),
            words_per_block,
        }
    }

    pub(crate) fn fill(&mut self, step: u64, channel: u8, out: &mut [f64]) {
        let block = step as u128 * 3 + channel as u128;
        self.rng.set_word_pos(block * self.words_per_block);
        let scale = self.sqrt_dt;
        for pair in out.chunks_mut(2) {
            let (a, b) = normal_pair(&mut self.rng);
            pair[0] = scale * a;
            if pair.len() > 1 {
                pair[1] = scale * b;
            }
        }
    }

    fn draw(&mut self, step: u64, channels: [bool; 3], out: &mut NoiseIncrements) {
        if channels[0] {
            self.fill(step, 0, &mut out.w1);
        }
        if channels[1] {
            self.fill(step, 1, &mut out.w2);
        }
        if channels[2] {
            self.fill(step, 2, &mut out.w3);
        }
    }
}

/// Uniform on `(0, 1]` from the top 53 bits.
fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Two independent standard normals by Box-Muller; always consumes two `u64`.
pub(crate) fn normal_pair(rng: &mut impl RngCore) -> (f64, f64) {
    let u1 = unit_open(rng.next_u64());
    let u2 = unit_open(rng.next_u64());
    let radius = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (radius * c, radius * s)
}

/// The three noise channels for `(master_seed, path, step)`.
pub fn gen_noise(master_seed: u64, path: u64, step: u64, n: usize, dt: f64) -> NoiseIncrements {
    let mut src = NoiseSource::new(master_seed, path, n, dt);
    let mut out = NoiseIncrements::zeros(n);
    src.draw(step, [true; 3], &mut out);
    out
}

fn phi1(z: f64) -> f64 {
    if z < 1e-8 {
        1.0 - 0.5 * z
    } else {
        -(-z).exp_m1() / z
    }
}

/// Deterministic part of one step; also returns `‖x‖_V^{1+r}` when requested.
fn drift_update(
    space: &SpectralSpace,
    model: &ModelSpec,
    scheme: Scheme,
    t: f64,
    dt: f64,
    x: &[f64],
    want_v_power: bool,
) -> (Vec<f64>, Option<f64>) {
    let eval = eval_drift(space, model, t, x, want_v_power);
    let out = match scheme {
        Scheme::Explicit => x.iter().zip(&eval.drift).map(|(a, d)| a + dt * d).collect(),
        Scheme::Exponential => x
            .iter()
            .zip(&eval.drift)
            .zip(space.lambdas())
            .map(|((a, d), l)| {
                let mu = eval.stiffness * l;
                let z = mu * dt;
                (-z).exp() * a + phi1(z) * dt * (d + mu * a)
            })
            .collect(),
    };
    (out, eval.v_power)
}

/// Adds H-coordinate noise to a state in sine coordinates.
fn add_noise(space: &SpectralSpace, x: &mut [f64], noise_h: &[f64]) {
    for ((a, n), w) in x.iter_mut().zip(noise_h).zip(space.h_weights()) {
        *a += n / w.sqrt();
    }
}

fn check_state(x: &[f64], time: f64) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(mode) => Err(Error::StepOverflow { time, mode }),
        None => Ok(()),
    }
}

/// `B(x) dW¹ + Q dW²` in H-coordinates.
fn single_noise(space: &SpectralSpace, model: &ModelSpec, x: &[f64], noise: &NoiseIncrements) -> Vec<f64> {
    let mut out: Vec<f64> = space
        .q_coeffs()
        .iter()
        .zip(&noise.w2)
        .map(|(q, w)| q * w)
        .collect();
    if let Some(b) = b_diagonal(space, model, x) {
        for ((o, b), w) in out.iter_mut().zip(&b).zip(&noise.w1) {
            *o += b * w;
        }
    }
    out
}

fn check_dims(space: &SpectralSpace, lens: &[usize]) -> Result<()> {
    for &len in lens {
        if len != space.n_modes() {
            return Err(Error::DimensionMismatch {
                expected: space.n_modes(),
                found: len,
            });
        }
    }
    Ok(())
}

/// One step of `dX = A(t,X) dt + B(t,X) dW¹ + Q dW²`.
pub fn step_single(
    space: &SpectralSpace,
    model: &ModelSpec,
    config: &SimConfig,
    x: &StateVector,
    t: f64,
    noise: &NoiseIncrements,
) -> Result<StateVector> {
    check_dims(space, &[x.len(), noise.w1.len(), noise.w2.len()])?;
    x.check_finite("state")?;
    let (next, _) = advance_single(space, model, config.scheme, t, config.dt, x.coeffs(), noise, false)?;
    Ok(StateVector::from_vec(next))
}

#[allow(clippy::too_many_arguments)]
fn advance_single(
    space: &SpectralSpace,
    model: &ModelSpec,
    scheme: Scheme,
    t: f64,
    dt: f64,
    x: &[f64],
    noise: &NoiseIncrements,
    want_v_power: bool,
) -> Result<(Vec<f64>, Option<f64>)> {
    let (mut next, vp) = drift_update(space, model, scheme, t, dt, x, want_v_power);
    add_noise(space, &mut next, &single_noise(space, model, x, noise));
    check_state(&next, t + dt)?;
    Ok((next, vp))
}

/// How the second component is driven.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// X only.
    Single,
    /// Reflection coupling with cutoff and gluing.
    Coupled,
    /// Both components share every noise channel (`h ≡ 0`).
    Synchronous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingState {
    pub x: StateVector,
    pub y: StateVector,
    pub time: f64,
    pub step: u64,
    pub coupled: bool,
    /// First time `‖X - Y‖ ≤ 1/n`.
    pub tau_n_hit: Option<f64>,
    /// `‖X - Y‖` at `τ_n`.
    pub diff_at_tau_n: Option<f64>,
    /// First time `‖X - Y‖ ≥ δ`, per level.
    pub tau_delta_hits: Vec<(f64, Option<f64>)>,
    /// Gluing time.
    pub t_n_hit: Option<f64>,
}

impl CouplingState {
    pub fn new(
        space: &SpectralSpace,
        params: &CouplingParams,
        x: StateVector,
        y: StateVector,
        delta_levels: &[f64],
    ) -> Result<Self> {
        check_dims(space, &[x.len(), y.len()])?;
        x.check_finite("x")?;
        y.check_finite("y")?;
        let mut state = CouplingState {
            x,
            y,
            time: 0.0,
            step: 0,
            coupled: false,
            tau_n_hit: None,
            diff_at_tau_n: None,
            tau_delta_hits: delta_levels.iter().map(|&d| (d, None)).collect(),
            t_n_hit: None,
        };
        state.record(space, params);
        Ok(state)
    }

    pub fn diff_h(&self, space: &SpectralSpace) -> f64 {
        space.h_norm(&(&self.x - &self.y))
    }

    /// Updates stopping-time records and glues at the current time.
    fn record(&mut self, space: &SpectralSpace, params: &CouplingParams) {
        let d = if self.coupled { 0.0 } else { self.diff_h(space) };
        if self.tau_n_hit.is_none() && d <= params.threshold() {
            self.tau_n_hit = Some(self.time);
            self.diff_at_tau_n = Some(d);
        }
        for (level, hit) in &mut self.tau_delta_hits {
            if hit.is_none() && d >= *level {
                *hit = Some(self.time);
            }
        }
        if !self.coupled && d <= params.glue_eps {
            self.y = self.x.clone();
            self.coupled = true;
            self.t_n_hit = Some(self.time);
        }
    }
}

/// One step of the coupled system, gluing once the components meet.
pub fn step_coupled(
    space: &SpectralSpace,
    model: &ModelSpec,
    params: &CouplingParams,
    config: &SimConfig,
    state: &CouplingState,
    noise: &NoiseIncrements,
) -> Result<CouplingState> {
    check_dims(
        space,
        &[state.x.len(), state.y.len(), noise.w1.len(), noise.w2.len(), noise.w3.len()],
    )?;
    let mut next = state.clone();
    advance_pair(space, model, params, config, RunMode::Coupled, &mut next, noise, false)?;
    Ok(next)
}

#[allow(clippy::too_many_arguments)]
fn advance_pair(
    space: &SpectralSpace,
    model: &ModelSpec,
    params: &CouplingParams,
    config: &SimConfig,
    mode: RunMode,
    state: &mut CouplingState,
    noise: &NoiseIncrements,
    want_v_power: bool,
) -> Result<Option<f64>> {
    let (t, dt) = (state.time, config.dt);
    let x = state.x.coeffs();
    let (mut nx, vp) = drift_update(space, model, config.scheme, t, dt, x, want_v_power);
    if state.coupled {
        add_noise(space, &mut nx, &single_noise(space, model, x, noise));
        check_state(&nx, t + dt)?;
        state.x = StateVector::from_vec(nx);
        state.y = state.x.clone();
    } else {
        let y = state.y.coeffs();
        let (mut ny, _) = drift_update(space, model, config.scheme, t, dt, y, false);
        let (dx, dy) = match mode {
            RunMode::Coupled => {
                let (dx, dy, _) =
                    increments_h(space, model, params, x, y, &noise.w1, &noise.w2, &noise.w3)?;
                (dx, dy)
            }
            _ => (single_noise(space, model, x, noise), single_noise(space, model, y, noise)),
        };
        add_noise(space, &mut nx, &dx);
        add_noise(space, &mut ny, &dy);
        check_state(&nx, t + dt)?;
        check_state(&ny, t + dt)?;
        state.x = StateVector::from_vec(nx);
        state.y = StateVector::from_vec(ny);
    }
    state.step += 1;
    state.time = state.step as f64 * dt;
    state.record(space, params);
    Ok(vp)
}

/// Observables of one path at one checkpoint. Mode-1 values are H-coordinates;
/// the Y fields are NaN for single runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub time: f64,
    pub x_norm: f64,
    pub y_norm: f64,
    pub diff_h: f64,
    pub diff_q: f64,
    /// `‖X - Y‖` at `t ∧ τ_n`.
    pub diff_stopped: f64,
    pub x_mode1: f64,
    pub y_mode1: f64,
    pub f_x: f64,
    pub f_y: f64,
    /// `∫₀ᵗ ‖X_s‖_V^{1+r} ds` (left Riemann sum), NaN when not tracked.
    pub v_integral: f64,
    pub coupled: bool,
    /// Exact coefficient-wise equality of X and Y.
    pub identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub path: usize,
    pub checkpoints: Vec<Checkpoint>,
    pub tau_n: Option<f64>,
    pub t_n: Option<f64>,
    pub tau_delta: Vec<Option<f64>>,
    /// Largest `I_n(Δ)/‖Δ‖` seen at step boundaries before `τ_n`.
    pub max_i_n_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathFailure {
    pub path: usize,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathEnsembleRecord {
    pub mode: RunMode,
    pub checkpoint_times: Vec<f64>,
    pub delta_levels: Vec<f64>,
    /// `1/n` for coupled runs.
    pub threshold: Option<f64>,
    pub osc_f: f64,
    pub lip_f: f64,
    pub paths: Vec<PathRecord>,
    pub failures: Vec<PathFailure>,
}

impl PathEnsembleRecord {
    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    /// Values of one observable across healthy paths at checkpoint `k`.
    pub fn column(&self, k: usize, f: impl Fn(&Checkpoint) -> f64) -> Vec<f64> {
        self.paths.iter().map(|p| f(&p.checkpoints[k])).collect()
    }

    /// Human-readable summary of failed paths.
    pub fn failure_report(&self) -> Option<String> {
        if self.failures.is_empty() {
            return None;
        }
        let mut s = format!("{} of {} paths failed", self.failures.len(), self.failures.len() + self.paths.len());
        for f in self.failures.iter().take(10) {
            s.push_str(&format!("\n  path {}: {}", f.path, f.message));
        }
        Some(s)
    }
}

/// Simulates `config.n_paths` independent paths; path `k` uses keystream `k`.
/// Output order is by path index whatever the thread count.
pub fn run_paths(
    space: &SpectralSpace,
    model: &ModelSpec,
    params: Option<&CouplingParams>,
    config: &SimConfig,
    mode: RunMode,
    x0: &StateVector,
    y0: &StateVector,
) -> Result<PathEnsembleRecord> {
    config.validate()?;
    model.validate_for(space)?;
    config.functional.validate(space.n_modes())?;
    check_dims(space, &[x0.len(), y0.len()])?;
    x0.check_finite("x0")?;
    y0.check_finite("y0")?;
    let default_params;
    let params = match (mode, params) {
        (RunMode::Coupled, None) => {
            return Err(Error::ConfigSemantic("coupled runs need coupling parameters".into()))
        }
        (_, Some(p)) => {
            p.validate()?;
            p
        }
        (_, None) => {
            default_params = CouplingParams::with_default_glue(1)?;
            &default_params
        }
    };
    let steps = config.checkpoint_steps()?;
    let results: Vec<std::result::Result<PathRecord, PathFailure>> = (0..config.n_paths)
        .into_par_iter()
        .map(|path| {
            simulate_path(space, model, params, config, mode, &steps, x0, y0, path)
                .map_err(|e| PathFailure {
                    path,
                    message: e.to_string(),
                })
        })
        .collect();
    let mut paths = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(p) => paths.push(p),
            Err(f) => failures.push(f),
        }
    }
    Ok(PathEnsembleRecord {
        mode,
        checkpoint_times: steps.iter().map(|&k| k as f64 * config.dt).collect(),
        delta_levels: config.delta_levels.clone(),
        threshold: (mode == RunMode::Coupled).then(|| params.threshold()),
        osc_f: config.functional.osc(),
        lip_f: config.functional.lipschitz(space),
        paths,
        failures,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate_path(
    space: &SpectralSpace,
    model: &ModelSpec,
    params: &CouplingParams,
    config: &SimConfig,
    mode: RunMode,
    steps: &[u64],
    x0: &StateVector,
    y0: &StateVector,
    path: usize,
) -> Result<PathRecord> {
    let n = space.n_modes();
    let mut src = NoiseSource::new(config.master_seed, path as u64, n, config.dt);
    let mut noise = NoiseIncrements::zeros(n);
    let has_b = b_diagonal(space, model, x0.coeffs()).is_some();
    let last = *steps.last().expect("validated non-empty");
    let mut checkpoints = Vec::with_capacity(steps.len());
    let mut v_integral = if config.track_v_integral { 0.0 } else { f64::NAN };
    let mut next_cp = 0;

    if mode == RunMode::Single {
        let mut x = x0.coeffs().to_vec();
        for step in 0..=last {
            let t = step as f64 * config.dt;
            if steps[next_cp] == step {
                checkpoints.push(single_checkpoint(space, config, t, &x, v_integral));
                next_cp += 1;
            }
            if step == last {
                break;
            }
            src.draw(step, [has_b, true, false], &mut noise);
            let (nx, vp) =
                advance_single(space, model, config.scheme, t, config.dt, &x, &noise, config.track_v_integral)?;
            if let Some(vp) = vp {
                v_integral += vp * config.dt;
            }
            x = nx;
        }
        return Ok(PathRecord {
            path,
            checkpoints,
            tau_n: None,
            t_n: None,
            tau_delta: Vec::new(),
            max_i_n_ratio: 0.0,
        });
    }

    let mut state = CouplingState::new(space, params, x0.clone(), y0.clone(), &config.delta_levels)?;
    let mut max_i_n_ratio = 0.0f64;
    for step in 0..=last {
        if mode == RunMode::Coupled && state.tau_n_hit.is_none() {
            let delta = &state.x - &state.y;
            let norm = space.h_norm(&delta);
            max_i_n_ratio = max_i_n_ratio.max(i_n_slice(space, params.n, delta.coeffs()) / norm);
        }
        if steps[next_cp] == step {
            checkpoints.push(pair_checkpoint(space, config, &state, v_integral));
            next_cp += 1;
        }
        if step == last {
            break;
        }
        let reflect = mode == RunMode::Coupled && !state.coupled;
        src.draw(step, [has_b, true, reflect], &mut noise);
        let vp = advance_pair(
            space,
            model,
            params,
            config,
            mode,
            &mut state,
            &noise,
            config.track_v_integral,
        )?;
        if let Some(vp) = vp {
            v_integral += vp * config.dt;
        }
    }
    Ok(PathRecord {
        path,
        checkpoints,
        tau_n: state.tau_n_hit,
        t_n: state.t_n_hit,
        tau_delta: state.tau_delta_hits.iter().map(|(_, h)| *h).collect(),
        max_i_n_ratio,
    })
}

fn mode1_h(space: &SpectralSpace, x: &[f64]) -> f64 {
    x[0] * space.h_weights()[0].sqrt()
}

fn single_checkpoint(space: &SpectralSpace, config: &SimConfig, t: f64, x: &[f64], v_integral: f64) -> Checkpoint {
    Checkpoint {
        time: t,
        x_norm: space.h_norm_slice(x),
        y_norm: f64::NAN,
        diff_h: f64::NAN,
        diff_q: f64::NAN,
        diff_stopped: f64::NAN,
        x_mode1: mode1_h(space, x),
        y_mode1: f64::NAN,
        f_x: config.functional.eval(x),
        f_y: f64::NAN,
        v_integral,
        coupled: false,
        identical: false,
    }
}

fn pair_checkpoint(
    space: &SpectralSpace,
    config: &SimConfig,
    state: &CouplingState,
    v_integral: f64,
) -> Checkpoint {
    let (x, y) = (state.x.coeffs(), state.y.coeffs());
    let delta: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let diff_h = space.h_norm_slice(&delta);
    let diff_stopped = match state.diff_at_tau_n {
        Some(d) => d,
        None => diff_h,
    };
    Checkpoint {
        time: state.time,
        x_norm: space.h_norm_slice(x),
        y_norm: space.h_norm_slice(y),
        diff_h,
        diff_q: space.q_norm_slice(&delta),
        diff_stopped,
        x_mode1: mode1_h(space, x),
        y_mode1: mode1_h(space, y),
        f_x: config.functional.eval(x),
        f_y: config.functional.eval(y),
        v_integral,
        coupled: state.coupled,
        identical: x == y,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::HMetric;
    use std::f64::consts::PI;

    fn linear_setup(n: usize) -> (SpectralSpace, ModelSpec) {
        (
            SpectralSpace::new(n, 1.0, HMetric::Dual, vec![1.0; n]).unwrap(),
            ModelSpec::porous(1.0),
        )
    }

    #[test]
    fn noise_is_reproducible_and_channel_keyed() {
        let a = gen_noise(7, 3, 11, 5, 0.01);
        let b = gen_noise(7, 3, 11, 5, 0.01);
        assert_eq!(a, b);
        assert_ne!(a.w1, a.w2);
        assert_ne!(gen_noise(7, 4, 11, 5, 0.01), a);
        assert_ne!(gen_noise(7, 3, 12, 5, 0.01), a);
        let mut src = NoiseSource::new(7, 3, 5, 0.01);
        let mut w2 = vec![0.0; 5];
        src.fill(11, 1, &mut w2);
        assert_eq!(w2, a.w2);
    }

    #[test]
    fn explicit_zero_noise_step_on_first_mode() {
        let (space, model) = linear_setup(4);
        let mut cfg = SimConfig::new(1e-3, 1.0, 1, 0).unwrap();
        cfg.scheme = Scheme::Explicit;
        let e1 = StateVector::basis(4, 0);
        let x = step_single(&space, &model, &cfg, &e1, 0.0, &NoiseIncrements::zeros(4)).unwrap();
        assert!((x.coeffs()[0] - (1.0 - PI * PI * 1e-3)).abs() < 1e-14);
        assert!(x.coeffs()[1..].iter().all(|c| *c == 0.0));
    }

    #[test]
    fn exponential_step_is_exact_for_the_linear_drift() {
        let (space, model) = linear_setup(4);
        let cfg = SimConfig::new(1e-2, 1.0, 1, 0).unwrap();
        let x = StateVector::from_vec(vec![1.0, -0.5, 0.25, 2.0]);
        let next = step_single(&space, &model, &cfg, &x, 0.0, &NoiseIncrements::zeros(4)).unwrap();
        for (i, (a, b)) in next.coeffs().iter().zip(x.coeffs()).enumerate() {
            let l = (PI * (i + 1) as f64).powi(2);
            assert!((a - b * (-l * 1e-2).exp()).abs() < 1e-13);
        }
    }

    #[test]
    fn glued_start_stays_glued() {
        let (space, model) = linear_setup(4);
        let params = CouplingParams::with_default_glue(10).unwrap();
        let cfg = SimConfig::new(1e-3, 1e-2, 1, 0).unwrap();
        let x = StateVector::basis(4, 1);
        let mut state = CouplingState::new(&space, &params, x.clone(), x, &[]).unwrap();
        assert_eq!(state.tau_n_hit, Some(0.0));
        assert_eq!(state.t_n_hit, Some(0.0));
        for step in 0..10 {
            let noise = gen_noise(1, 0, step, 4, cfg.dt);
            state = step_coupled(&space, &model, &params, &cfg, &state, &noise).unwrap();
            assert!(state.coupled);
            assert_eq!(state.x, state.y);
        }
    }

    #[test]
    fn noise_cancels_below_the_band() {
        let (space, model) = linear_setup(4);
        let params = CouplingParams::with_default_glue(1).unwrap();
        let cfg = SimConfig::new(1e-4, 1e-2, 1, 0).unwrap();
        // ‖Δ‖_H = 0.01, well below 1/(2n)
        let eps = 0.01 * PI;
        let y = StateVector::zeros(4);
        let x = StateVector::basis(4, 0).scaled(eps);
        let mut state = CouplingState::new(&space, &params, x, y, &[]).unwrap();
        for step in 0..100 {
            let noise = gen_noise(5, 0, step, 4, cfg.dt);
            state = step_coupled(&space, &model, &params, &cfg, &state, &noise).unwrap();
        }
        let d = &state.x - &state.y;
        let expected = eps * (-PI * PI * 0.01f64).exp();
        assert!((d.coeffs()[0] - expected).abs() < 1e-12 * eps);
        assert!(d.coeffs()[1..].iter().all(|c| c.abs() < 1e-14));
    }

    #[test]
    fn overflow_reports_time_and_mode() {
        let space = SpectralSpace::new(4, 1.0, HMetric::Dual, vec![1.0; 4]).unwrap();
        let model = ModelSpec::porous(3.0);
        let mut cfg = SimConfig::new(1.0, 1.0, 1, 0).unwrap();
        cfg.scheme = Scheme::Explicit;
        let x = StateVector::from_vec(vec![1e120, 0.0, 0.0, 0.0]);
        let err = step_single(&space, &model, &cfg, &x, 0.0, &NoiseIncrements::zeros(4)).unwrap_err();
        assert!(matches!(err, Error::StepOverflow { .. } | Error::NonFinite { .. }));
    }

    #[test]
    fn checkpoint_steps_reject_collisions() {
        let mut cfg = SimConfig::new(0.1, 1.0, 1, 0).unwrap();
        cfg.checkpoint_times = vec![0.0, 0.1, 0.12];
        assert!(cfg.checkpoint_steps().is_err());
        cfg.checkpoint_times = vec![0.0, 0.5, 1.0];
        assert_eq!(cfg.checkpoint_steps().unwrap(), vec![0, 5, 10]);
    }

    #[test]
    fn single_path_driver_matches_manual_steps() {
        let (space, model) = linear_setup(3);
        let cfg = SimConfig::new(1e-3, 5e-3, 1, 9).unwrap();
        let x0 = StateVector::basis(3, 0);
        let rec = run_paths(&space, &model, None, &cfg, RunMode::Single, &x0, &x0).unwrap();
        let mut x = x0.clone();
        for step in 0..5 {
            let noise = gen_noise(9, 0, step, 3, cfg.dt);
            x = step_single(&space, &model, &cfg, &x, step as f64 * cfg.dt, &noise).unwrap();
        }
        let cp = &rec.paths[0].checkpoints[1];
        assert!((cp.x_mode1 - x.coeffs()[0] / PI).abs() < 1e-15);
    }
}
