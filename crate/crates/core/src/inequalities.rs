//! Sampled checks of the structural inequalities and parameter conditions.
//!
//! A fitted constant is an extremum over a random batch scaled by
//! [`SAFETY_FACTOR`]; the verdict is then decided on a fresh batch drawn from
//! the next seed.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::integrator::normal_pair;
use crate::models::{b_hs_diff, pairing_drift_diff, Family, ModelSpec};
use crate::spaces::{SpectralSpace, StateVector};

/// Fitted constants are the sampled extremum relaxed by this factor.
pub const SAFETY_FACTOR: f64 = 0.5;

/// Relative slack for rounding when counting violations.
pub const REL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Vacuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition_id: String,
    pub sample_count: usize,
    pub violation_count: usize,
    pub fitted_constants: BTreeMap<String, f64>,
    /// Smallest relative margin `(rhs - lhs) / (|lhs| + |rhs|)` on the verdict batch.
    pub worst_margin: f64,
    pub verdict: Verdict,
}

impl ConditionReport {
    fn new(id: &str) -> Self {
        ConditionReport {
            condition_id: id.to_string(),
            sample_count: 0,
            violation_count: 0,
            fitted_constants: BTreeMap::new(),
            worst_margin: f64::INFINITY,
            verdict: Verdict::Vacuous,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict != Verdict::Fail
    }

    fn constant(mut self, name: &str, value: f64) -> Self {
        self.fitted_constants.insert(name.to_string(), value);
        self
    }

    /// Folds one `lhs ≤ rhs` comparison into the counts.
    fn observe(&mut self, lhs: f64, rhs: f64) {
        self.sample_count += 1;
        let scale = lhs.abs() + rhs.abs();
        if scale == 0.0 {
            return;
        }
        let margin = (rhs - lhs) / scale;
        self.worst_margin = self.worst_margin.min(margin);
        if margin < -REL_TOL {
            self.violation_count += 1;
        }
    }

    fn finish(mut self) -> Self {
        self.verdict = if self.sample_count == 0 {
            Verdict::Vacuous
        } else if self.violation_count == 0 {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        self
    }

    fn fail(mut self) -> Self {
        self.verdict = Verdict::Fail;
        self
    }
}

/// Random test vectors: a mixture of few-mode smooth fields and rough fields
/// with slowly decaying coefficients, over several decades of amplitude.
pub struct PairSampler {
    rng: ChaCha8Rng,
    n: usize,
    smooth_only: usize,
}

impl PairSampler {
    pub fn new(seed: u64, n: usize) -> Self {
        PairSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            n,
            smooth_only: 0,
        }
    }

    /// Restricts every sample to the first `modes` sine modes.
    pub fn supported_on(mut self, modes: usize) -> Self {
        self.smooth_only = modes.min(self.n);
        self
    }

    fn normal(&mut self) -> f64 {
        normal_pair(&mut self.rng).0
    }

    pub fn vector(&mut self) -> StateVector {
        let n = self.n;
        let mut c = vec![0.0; n];
        let support = if self.smooth_only > 0 { self.smooth_only } else { n };
        if self.smooth_only > 0 || self.rng.random::<f64>() < 0.4 {
            let k = self.rng.random_range(1..=support.min(3));
            for _ in 0..k {
                let i = self.rng.random_range(0..support);
                c[i] += self.normal();
            }
        } else {
            for (i, ci) in c.iter_mut().enumerate() {
                *ci = self.normal() * ((i + 1) as f64).powf(-0.6);
            }
        }
        let scale = 10f64.powf(self.rng.random_range(-1.5..1.0));
        StateVector::from_vec(c.into_iter().map(|x| x * scale).collect())
    }

    /// A pair; roughly a third are near-collisions `v₂ = v₁ + ε e_j`.
    pub fn pair(&mut self) -> (StateVector, StateVector) {
        let v1 = self.vector();
        if self.rng.random::<f64>() < 0.3 {
            let support = if self.smooth_only > 0 { self.smooth_only } else { self.n };
            let j = self.rng.random_range(0..support);
            let size = v1.coeffs().iter().map(|x| x * x).sum::<f64>().sqrt();
            let eps = size * 10f64.powf(self.rng.random_range(-5.0..-1.0));
            let mut v2 = v1.clone();
            v2.coeffs_mut()[j] += if self.rng.random::<bool>() { eps } else { -eps };
            (v1, v2)
        } else {
            let v2 = self.vector();
            (v1, v2)
        }
    }

    pub fn pairs(&mut self, count: usize) -> Vec<(StateVector, StateVector)> {
        (0..count).map(|_| self.pair()).collect()
    }

    pub fn vectors(&mut self, count: usize) -> Vec<StateVector> {
        (0..count).map(|_| self.vector()).collect()
    }
}

/// User-supplied constants `(K, θ)` to test instead of the fitted ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityConstants {
    pub k: f64,
    pub theta: f64,
}

/// Per-pair `(lhs, ‖Δ‖², factor)` with `lhs = ⟨A(v1)-A(v2), Δ⟩ + ½‖B(v1)-B(v2)‖²_HS`.
fn monotone_terms<F>(
    space: &SpectralSpace,
    model: &ModelSpec,
    pairs: &[(StateVector, StateVector)],
    factor: F,
) -> Vec<(f64, f64, f64)>
where
    F: Fn(&StateVector, &StateVector, &StateVector) -> f64 + Sync,
{
    pairs
        .par_iter()
        .map(|(v1, v2)| {
            let lhs = pairing_drift_diff(space, model, 0.0, v1, v2)
                + 0.5 * b_hs_diff(space, model, 0.0, v1, v2).powi(2);
            let delta = v1 - v2;
            let nh2 = space.h_inner(&delta, &delta);
            (lhs, nh2, factor(v1, v2, &delta))
        })
        .collect()
}

/// Shared fit/verify logic for `lhs ≤ K ‖Δ‖² - θ · factor`.
fn monotone_report<F>(
    id: &str,
    space: &SpectralSpace,
    model: &ModelSpec,
    samples: usize,
    seed: u64,
    user: Option<MonotonicityConstants>,
    factor: F,
) -> ConditionReport
where
    F: Fn(&StateVector, &StateVector, &StateVector) -> f64 + Sync,
{
    let k = user.map(|u| u.k).unwrap_or_else(|| model.monotonicity_k());
    let fit_batch = PairSampler::new(seed, space.n_modes()).pairs(samples);
    let fit = monotone_terms(space, model, &fit_batch, &factor);
    let theta_star = fit
        .iter()
        .filter(|(_, _, f)| *f > 0.0 && f.is_finite())
        .map(|(lhs, nh2, f)| (k * nh2 - lhs) / f)
        .fold(f64::INFINITY, f64::min);

    let mut report = ConditionReport::new(id).constant("K", k);
    let theta = match user {
        Some(u) => u.theta,
        None => SAFETY_FACTOR * theta_star,
    };
    report = report.constant("theta", theta);
    if theta_star.is_finite() {
        report = report.constant("theta_sup", theta_star);
    }
    let fresh_batch = PairSampler::new(seed.wrapping_add(1), space.n_modes()).pairs(samples);
    let fresh = monotone_terms(space, model, &fresh_batch, &factor);
    let batches: Vec<&(f64, f64, f64)> = match user {
        Some(_) => fit.iter().chain(&fresh).collect(),
        None => fresh.iter().collect(),
    };
    for (lhs, nh2, f) in batches {
        if *f == 0.0 && *nh2 == 0.0 {
            report.sample_count += 1;
            continue;
        }
        report.observe(*lhs, k * nh2 - theta * f);
    }
    let report = report.finish();
    if !(theta > 0.0 && theta.is_finite()) {
        return report.fail();
    }
    report
}

fn require_nonempty(samples: usize) -> Result<()> {
    if samples == 0 {
        Err(Error::EmptyEnsemble)
    } else {
        Ok(())
    }
}

/// `⟨A(v1)-A(v2), Δ⟩ + ½‖B(v1)-B(v2)‖²_HS ≤ K‖Δ‖² - θ‖Δ‖^{r+1-κ}‖Δ‖_Q^κ`
pub fn check_a1_prime(
    space: &SpectralSpace,
    model: &ModelSpec,
    kappa: f64,
    samples: usize,
    seed: u64,
    user: Option<MonotonicityConstants>,
) -> Result<ConditionReport> {
    model.validate_for(space)?;
    require_nonempty(samples)?;
    let r = match model.family {
        Family::Porous { r, .. } => r,
        Family::PLaplace { p } => p - 1.0,
        Family::FastDiff { .. } => {
            return Err(Error::ParameterDomain(
                "(A1') needs r >= 1; use the fast-diffusion check".into(),
            ))
        }
    };
    if !(kappa > r - 1.0) {
        return Err(Error::ParameterDomain(format!(
            "kappa = {kappa} must exceed r - 1 = {}",
            r - 1.0
        )));
    }
    Ok(monotone_report(
        "A1prime",
        space,
        model,
        samples,
        seed,
        user,
        |_, _, d| {
            let nh = space.h_norm(d);
            if nh == 0.0 {
                return 0.0;
            }
            nh.powf(r + 1.0 - kappa) * space.q_norm(d).powf(kappa)
        },
    ))
}

/// Fast-diffusion form with factor `‖Δ‖^{2-κ}‖Δ‖_Q^κ / (‖v1‖_V ∨ ‖v2‖_V)^{1-r}`.
pub fn check_a1_double_prime(
    space: &SpectralSpace,
    model: &ModelSpec,
    kappa: f64,
    samples: usize,
    seed: u64,
    user: Option<MonotonicityConstants>,
) -> Result<ConditionReport> {
    model.validate_for(space)?;
    require_nonempty(samples)?;
    let r = match model.family {
        Family::FastDiff { r, .. } => r,
        _ => {
            return Err(Error::ParameterDomain(
                "(A1'') applies to fast diffusion".into(),
            ))
        }
    };
    if !(kappa > 0.0) {
        return Err(invalid("kappa", kappa, "must be positive"));
    }
    let vf = model.family.v_family();
    Ok(monotone_report(
        "A1doubleprime",
        space,
        model,
        samples,
        seed,
        user,
        |v1, v2, d| a1_double_prime_factor(space, vf, r, kappa, v1, v2, d),
    ))
}

fn a1_double_prime_factor(
    space: &SpectralSpace,
    vf: crate::spaces::VFamily,
    r: f64,
    kappa: f64,
    v1: &StateVector,
    v2: &StateVector,
    d: &StateVector,
) -> f64 {
    let nh = space.h_norm(d);
    if nh == 0.0 {
        return 0.0;
    }
    let vmax = space
        .v_norm(v1, vf)
        .unwrap_or(0.0)
        .max(space.v_norm(v2, vf).unwrap_or(0.0));
    nh.powf(2.0 - kappa) * space.q_norm(d).powf(kappa) / vmax.powf(1.0 - r)
}

/// `θ` ratio `-lhs / factor` for one fast-diffusion pair; used by homogeneity audits.
pub fn a1_double_prime_ratio(
    space: &SpectralSpace,
    model: &ModelSpec,
    kappa: f64,
    v1: &StateVector,
    v2: &StateVector,
) -> Result<f64> {
    let r = match model.family {
        Family::FastDiff { r, .. } => r,
        _ => return Err(Error::ParameterDomain("fast diffusion only".into())),
    };
    let d = v1 - v2;
    let f = a1_double_prime_factor(space, model.family.v_family(), r, kappa, v1, v2, &d);
    if f == 0.0 {
        return Err(Error::CoincidentStates);
    }
    Ok(-pairing_drift_diff(space, model, 0.0, v1, v2) / f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationForm {
    /// `‖x‖_Q² ≤ C ‖x‖^{2(κ-1-r)/κ} ‖x‖_V^{2(1+r)/κ}` (porous media, `V = L^{1+r}`).
    Porous,
    /// `‖x‖_{1+r}² ‖x‖^{κ-2} ≥ η ‖x‖_Q^κ` (fast diffusion).
    FastDiffusion,
}

/// Fits `C` (or `η`) and verifies it on a fresh batch.
pub fn check_interpolation_q(
    space: &SpectralSpace,
    kappa: f64,
    r: f64,
    form: InterpolationForm,
    samples: usize,
    seed: u64,
) -> Result<ConditionReport> {
    check_interpolation_q_with(space, kappa, r, form, seed, |s| {
        PairSampler::new(s, space.n_modes()).vectors(samples)
    })
}

/// As [`check_interpolation_q`] with a caller-provided batch generator.
pub fn check_interpolation_q_with<G>(
    space: &SpectralSpace,
    kappa: f64,
    r: f64,
    form: InterpolationForm,
    seed: u64,
    batch: G,
) -> Result<ConditionReport>
where
    G: Fn(u64) -> Vec<StateVector>,
{
    if !(kappa > 0.0 && r > 0.0) {
        return Err(Error::ParameterDomain(format!(
            "need kappa > 0 and r > 0, got kappa = {kappa}, r = {r}"
        )));
    }
    if form == InterpolationForm::Porous && !(kappa >= 1.0 + r) {
        return Err(Error::ParameterDomain(format!(
            "porous interpolation needs kappa >= 1 + r, got {kappa}"
        )));
    }
    // Each term is (small side, large side) scaled so that small ≤ const · large.
    let terms = |x: &StateVector| -> (f64, f64) {
        let nh = space.h_norm(x);
        let nq = space.q_norm(x);
        let lp = space.lp_norm(x, 1.0 + r);
        match form {
            InterpolationForm::Porous => (
                nq * nq,
                nh.powf(2.0 * (kappa - 1.0 - r) / kappa) * lp.powf(2.0 * (1.0 + r) / kappa),
            ),
            InterpolationForm::FastDiffusion => (nq.powf(kappa), lp * lp * nh.powf(kappa - 2.0)),
        }
    };
    let fit: Vec<(f64, f64)> = batch(seed).par_iter().map(terms).collect();
    let c_sup = fit
        .iter()
        .filter(|(_, big)| *big > 0.0)
        .map(|(small, big)| small / big)
        .fold(0.0f64, f64::max);
    let c = c_sup / SAFETY_FACTOR;
    let mut report = match form {
        InterpolationForm::Porous => ConditionReport::new("interpolation_porous")
            .constant("C", c)
            .constant("C_sup", c_sup),
        InterpolationForm::FastDiffusion => ConditionReport::new("interpolation_fast_diffusion")
            .constant("eta", 1.0 / c)
            .constant("eta_inf", 1.0 / c_sup),
    };
    let fresh: Vec<(f64, f64)> = batch(seed.wrapping_add(1)).par_iter().map(terms).collect();
    for (small, big) in fresh {
        report.observe(small, c * big);
    }
    let report = report.finish();
    if !(c.is_finite() && c > 0.0) {
        return Ok(report.fail());
    }
    Ok(report)
}

/// Which power-law spectrum condition to test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectrumCondition {
    /// `sup λ_i^{-1} q_i^{-2κ/(1+r)} < ∞`
    StarE,
    /// `sup q_i^{-1} i^{-p/κ} < ∞`
    StarStarE,
    /// `sup |q_i|^{-1} λ_i^{(ε-1)/κ} < ∞`
    SB,
    /// `Σ q_i² < ∞`
    EI,
}

impl SpectrumCondition {
    pub fn id(&self) -> &'static str {
        match self {
            SpectrumCondition::StarE => "*E",
            SpectrumCondition::StarStarE => "**E",
            SpectrumCondition::SB => "SB",
            SpectrumCondition::EI => "EI",
        }
    }
}

/// Power-law inputs `q_i = c_i i^{-δ}`, `λ_i = (πi)^{2γ}` on a domain of dimension `d = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumParams {
    pub gamma: f64,
    pub delta: f64,
    pub r: f64,
    pub p: f64,
    pub kappa: f64,
    pub epsilon: f64,
    /// Prefactors `c_i`; `c(i)` for the brute-force scan.
    pub coeffs: crate::spaces::CoeffScheme,
}

impl SpectrumParams {
    pub fn new(gamma: f64, delta: f64) -> Self {
        SpectrumParams {
            gamma,
            delta,
            r: 1.0,
            p: 2.0,
            kappa: 2.0,
            epsilon: 0.5,
            coeffs: crate::spaces::CoeffScheme::Constant { value: 1.0 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub condition: String,
    /// Exponent of `i` in the supremand (summand for `EI`).
    pub exponent: f64,
    pub finite: bool,
    /// Exponent estimated from decade ratios of the brute-force scan.
    pub scanned_exponent: f64,
    pub scanned_finite: bool,
    pub scan_limit: usize,
}

impl SpectrumReport {
    pub fn agrees(&self) -> bool {
        self.finite == self.scanned_finite
    }
}

/// Tolerance of the symbolic "exponent ≤ 0" test.
const EXPONENT_TOL: f64 = 1e-12;
/// Tolerance of the scanned-exponent verdict.
const SCAN_TOL: f64 = 0.05;

pub fn check_spectrum_condition(
    which: SpectrumCondition,
    params: &SpectrumParams,
    scan_limit: usize,
) -> Result<SpectrumReport> {
    params.coeffs.validate()?;
    let SpectrumParams {
        gamma,
        delta,
        r,
        p,
        kappa,
        epsilon,
        ..
    } = *params;
    if !(gamma > 0.0 && delta.is_finite()) {
        return Err(Error::Degenerate(format!(
            "malformed spectrum: gamma = {gamma}, delta = {delta}"
        )));
    }
    if scan_limit < 1000 {
        return Err(invalid("scan_limit", scan_limit as f64, "must be at least 1000"));
    }
    let pi = std::f64::consts::PI;
    let lambda = |i: f64| (pi * i).powf(2.0 * gamma);
    let q = |i: usize| params.coeffs.coefficient(i) * (i as f64).powf(-delta);
    let (exponent, supremand): (f64, Box<dyn Fn(usize) -> f64>) = match which {
        SpectrumCondition::StarE => {
            if !(kappa > 0.0 && r > 0.0) {
                return Err(Error::ParameterDomain("(*E) needs kappa, r > 0".into()));
            }
            (
                -2.0 * gamma + 2.0 * kappa * delta / (1.0 + r),
                Box::new(move |i| 1.0 / lambda(i as f64) * q(i).abs().powf(-2.0 * kappa / (1.0 + r))),
            )
        }
        SpectrumCondition::StarStarE => {
            if !(kappa > 0.0 && p > 0.0) {
                return Err(Error::ParameterDomain("(**E) needs kappa, p > 0".into()));
            }
            (
                delta - p / kappa,
                Box::new(move |i| 1.0 / q(i).abs() * (i as f64).powf(-p / kappa)),
            )
        }
        SpectrumCondition::SB => {
            if !(kappa > 0.0) {
                return Err(Error::ParameterDomain("(SB) needs kappa > 0".into()));
            }
            (
                delta + 2.0 * gamma * (epsilon - 1.0) / kappa,
                Box::new(move |i| 1.0 / q(i).abs() * lambda(i as f64).powf((epsilon - 1.0) / kappa)),
            )
        }
        SpectrumCondition::EI => (-2.0 * delta, Box::new(move |i| q(i) * q(i))),
    };

    // Decades [L/100, L/10) and [L/10, L].
    let hi = scan_limit;
    let mid = hi / 10;
    let lo = mid / 10;
    let (scanned_exponent, scanned_finite, finite) = match which {
        SpectrumCondition::EI => {
            let s_low: f64 = (lo..mid).map(&supremand).sum();
            let s_high: f64 = (mid..=hi).map(&supremand).sum();
            let e = (s_high / s_low).log10() - 1.0;
            (e, e < -1.0 - SCAN_TOL, exponent < -1.0)
        }
        _ => {
            let m_low = (lo..mid).map(&supremand).fold(0.0f64, f64::max);
            let m_high = (mid..=hi).map(&supremand).fold(0.0f64, f64::max);
            let e = (m_high / m_low).log10();
            (e, e <= SCAN_TOL, exponent <= EXPONENT_TOL)
        }
    };
    Ok(SpectrumReport {
        condition: which.id().to_string(),
        exponent,
        finite,
        scanned_exponent,
        scanned_finite,
        scan_limit,
    })
}

/// `κ = γ(1+r)/(δd)` for porous media with `r > 1`, `δ > 1/2`, `γ ≥ δd`.
pub fn kappa_porous_example(gamma: f64, r: f64, delta: f64, d: f64) -> Result<f64> {
    if !(r > 1.0) {
        return Err(invalid("r", r, "needs r > 1"));
    }
    if !(delta > 0.5) {
        return Err(invalid("delta", delta, "needs delta > 1/2"));
    }
    if !(d > 0.0 && gamma >= delta * d) {
        return Err(invalid("gamma", gamma, format!("needs gamma >= delta d = {}", delta * d)));
    }
    Ok(gamma * (1.0 + r) / (delta * d))
}

/// `κ = p/δ` for the p-Laplacian with `δ ∈ (1/2, 1]`.
pub fn kappa_plaplace_example(p: f64, delta: f64) -> Result<f64> {
    if !(p >= 2.0) {
        return Err(invalid("p", p, "needs p >= 2"));
    }
    if !(delta > 0.5 && delta <= 1.0) {
        return Err(invalid("delta", delta, "needs delta in (1/2, 1]"));
    }
    Ok(p / delta)
}

/// Open interval of admissible `κ` for fast diffusion, intersected with `[2, ∞)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaInterval {
    pub lower: f64,
    pub upper: f64,
    /// Whether the lower end is the closed bound 2.
    pub lower_closed: bool,
}

impl KappaInterval {
    pub fn contains(&self, kappa: f64) -> bool {
        let above = if self.lower_closed {
            kappa >= self.lower
        } else {
            kappa > self.lower
        };
        above && kappa < self.upper
    }
}

/// `((2γ(1+r) - d(1-r))/(dδ(1+r)), 2γ/(dδ)) ∩ [2, ∞)` with
/// `δ ∈ (1/2, (1+3r)/(2(1+r)))`.
pub fn kappa_fastdiff_interval(r: f64, gamma: f64, d: f64, delta: f64) -> Result<KappaInterval> {
    if !(r > 0.0 && r < 1.0) {
        return Err(invalid("r", r, "needs 0 < r < 1"));
    }
    let delta_max = (1.0 + 3.0 * r) / (2.0 * (1.0 + r));
    if !(delta > 0.5 && delta < delta_max) {
        return Err(invalid(
            "delta",
            delta,
            format!("needs delta in (1/2, {delta_max})"),
        ));
    }
    if !(gamma > 0.0 && d > 0.0) {
        return Err(Error::ParameterDomain("gamma and d must be positive".into()));
    }
    let lo = (2.0 * gamma * (1.0 + r) - d * (1.0 - r)) / (d * delta * (1.0 + r));
    let hi = 2.0 * gamma / (d * delta);
    let (lower, lower_closed) = if lo >= 2.0 { (lo, false) } else { (2.0, true) };
    if !(lower < hi) {
        return Err(Error::ParameterDomain(format!(
            "admissible kappa interval is empty: ({lo}, {hi}) ∩ [2, ∞)"
        )));
    }
    Ok(KappaInterval {
        lower,
        upper: hi,
        lower_closed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NashReport {
    pub m: f64,
    pub r: f64,
    /// `2(1+r)/(1-r)`
    pub bound: f64,
    pub passes: bool,
    /// `ε = 1 - κdδ/(2γ)` and its admissible ceiling `(1-r)m/(2(1+r))`.
    pub epsilon: Option<f64>,
    pub epsilon_ceiling: Option<f64>,
    pub epsilon_ok: Option<bool>,
}

/// Whether `m < 2(1+r)/(1-r)`.
pub fn nash_exponent_gate(m: f64, r: f64) -> Result<NashReport> {
    if !(m > 0.0) {
        return Err(invalid("m", m, "must be positive"));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(invalid("r", r, "needs 0 < r < 1"));
    }
    let bound = 2.0 * (1.0 + r) / (1.0 - r);
    Ok(NashReport {
        m,
        r,
        bound,
        passes: m < bound,
        epsilon: None,
        epsilon_ceiling: None,
        epsilon_ok: None,
    })
}

/// Nash gate with `m = d/γ` plus the `ε` range check for a given `κ`.
pub fn nash_gate_fastdiff(r: f64, gamma: f64, d: f64, delta: f64, kappa: f64) -> Result<NashReport> {
    if !(gamma > 0.0 && d > 0.0) {
        return Err(Error::ParameterDomain("gamma and d must be positive".into()));
    }
    let m = d / gamma;
    let mut rep = nash_exponent_gate(m, r)?;
    let eps = (2.0 * gamma - kappa * d * delta) / (2.0 * gamma);
    let ceiling = (1.0 - r) * m / (2.0 * (1.0 + r));
    rep.epsilon = Some(eps);
    rep.epsilon_ceiling = Some(ceiling);
    rep.epsilon_ok = Some(eps > 0.0 && eps < ceiling);
    Ok(rep)
}

/// `(s₁-s₂)(s₁^r - s₂^r) ≥ r|s₁-s₂|²(|s₁|∨|s₂|)^{r-1}` on heavy-tailed pairs.
pub fn check_scalar_mean_value(r: f64, samples: usize, seed: u64) -> Result<ConditionReport> {
    if !(r > 0.0 && r < 1.0) {
        return Err(invalid("r", r, "needs 0 < r < 1"));
    }
    require_nonempty(samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> f64 {
        if rng.random::<f64>() < 0.02 {
            return 0.0;
        }
        let mag = 10f64.powf(rng.random_range(-6.0..6.0));
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    };
    let pairs: Vec<(f64, f64)> = (0..samples)
        .map(|_| {
            let s1 = draw(&mut rng);
            let u: f64 = rng.random();
            let s2 = if u < 0.2 {
                s1 * (1.0 + 10f64.powf(rng.random_range(-8.0..-1.0)))
            } else if u < 0.3 {
                -s1
            } else {
                draw(&mut rng)
            };
            (s1, s2)
        })
        .collect();
    let mut report = ConditionReport::new("scalar_mean_value");
    let mut ratio_min = f64::INFINITY;
    for (s1, s2) in pairs {
        let lhs = (s1 - s2) * power_difference(s1, s2, r);
        let m = s1.abs().max(s2.abs());
        let rhs = if m == 0.0 {
            0.0
        } else {
            r * (s1 - s2).powi(2) * m.powf(r - 1.0)
        };
        if rhs > 0.0 {
            ratio_min = ratio_min.min(lhs / rhs);
        }
        // the inequality reads rhs ≤ lhs
        report.observe(rhs, lhs);
    }
    Ok(report.constant("ratio_min", ratio_min).finish())
}

/// `s₁^r - s₂^r` with `s^r = |s|^r sgn s`, without cancellation for nearby
/// arguments of equal sign.
fn power_difference(s1: f64, s2: f64, r: f64) -> f64 {
    if s1 == 0.0 || s2 == 0.0 || s1.signum() != s2.signum() {
        return s1.abs().powf(r) * s1.signum() - s2.abs().powf(r) * s2.signum();
    }
    let rel = (s2 - s1) / s1;
    -s1.abs().powf(r) * s1.signum() * (r * rel.ln_1p()).exp_m1()
}

/// `K' = K + sup I_n(v)/‖v‖` over a sampled batch of differences; an upper bound
/// for the drift rate of `‖X - Y‖` in the coupled system.
pub fn sampled_k_prime(space: &SpectralSpace, model: &ModelSpec, n: u32, samples: usize, seed: u64) -> f64 {
    let vs = PairSampler::new(seed, space.n_modes()).vectors(samples);
    let sup = vs
        .par_iter()
        .map(|v| {
            let norm = space.h_norm(v);
            if norm == 0.0 {
                0.0
            } else {
                crate::coupling::i_n(space, n, v) / norm
            }
        })
        .reduce(|| 0.0, f64::max);
    model.monotonicity_k() + sup
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::{power_law_noise, CoeffScheme, HMetric};
    use std::f64::consts::PI;

    #[test]
    fn mean_value_examples() {
        let r: f64 = 0.5;
        let lhs = |a: f64, b: f64| (a - b) * (a.abs().powf(r) * a.signum() - b.abs().powf(r) * b.signum());
        let rhs = |a: f64, b: f64| r * (a - b).powi(2) * a.abs().max(b.abs()).powf(r - 1.0);
        assert_eq!(lhs(3.0, 3.0), 0.0);
        assert!((lhs(4.0, 1.0) - 3.0).abs() < 1e-15);
        assert!((rhs(4.0, 1.0) - 2.25).abs() < 1e-15);
        assert!((lhs(1.0, -1.0) - 4.0).abs() < 1e-15);
        assert!((rhs(1.0, -1.0) - 2.0).abs() < 1e-15);
        let rep = check_scalar_mean_value(0.5, 10_000, 1).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass);
        assert!(rep.fitted_constants["ratio_min"] >= 1.0 - 1e-9);
    }

    #[test]
    fn linear_porous_a1_prime_with_analytic_theta() {
        let space = SpectralSpace::new(12, 1.0, HMetric::Dual, vec![1.0; 12]).unwrap();
        let model = ModelSpec::porous(1.0);
        let user = MonotonicityConstants { k: 0.0, theta: PI * PI };
        let rep = check_a1_prime(&space, &model, 2.0, 2000, 3, Some(user)).unwrap();
        assert_eq!(rep.violation_count, 0);
        assert_eq!(rep.verdict, Verdict::Pass);
        // the sampled supremum of θ cannot beat the analytic one
        assert!(rep.fitted_constants["theta_sup"] >= PI * PI * (1.0 - 1e-9));
        let too_big = MonotonicityConstants { k: 0.0, theta: 1.5 * PI * PI };
        let rep = check_a1_prime(&space, &model, 2.0, 2000, 3, Some(too_big)).unwrap();
        assert_eq!(rep.verdict, Verdict::Fail);
    }

    #[test]
    fn a1_prime_rejects_small_kappa() {
        let space = SpectralSpace::new(8, 1.0, HMetric::Dual, vec![1.0; 8]).unwrap();
        let err = check_a1_prime(&space, &ModelSpec::porous(2.0), 0.5, 10, 0, None).unwrap_err();
        assert!(matches!(err, Error::ParameterDomain(_)));
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(kappa_porous_example(2.0, 2.0, 0.75, 1.0).unwrap(), 8.0);
        assert!((kappa_plaplace_example(2.0, 0.8).unwrap() - 2.5).abs() < 1e-15);
        let iv = kappa_fastdiff_interval(0.5, 1.0, 1.0, 0.6).unwrap();
        assert!((iv.lower - 25.0 / 9.0).abs() < 1e-14);
        assert!((iv.upper - 10.0 / 3.0).abs() < 1e-14);
        assert!(iv.contains(3.0));
        assert!(kappa_porous_example(0.5, 2.0, 0.75, 1.0).is_err());
        assert!(kappa_plaplace_example(2.0, 0.4).is_err());
    }

    #[test]
    fn nash_examples() {
        let rep = nash_exponent_gate(2.0, 0.5).unwrap();
        assert!(rep.passes);
        assert!((rep.bound - 6.0).abs() < 1e-14);
        let rep = nash_gate_fastdiff(0.5, 1.0, 1.0, 0.6, 3.0).unwrap();
        assert_eq!(rep.m, 1.0);
        assert!(rep.passes);
        assert_eq!(rep.epsilon_ok, Some(true));
        assert!(nash_exponent_gate(1e6, 1.0 - 1e-9).unwrap().passes);
    }

    #[test]
    fn spectrum_exponents() {
        let mut p = SpectrumParams::new(2.0, 0.75);
        p.r = 2.0;
        p.kappa = 8.0;
        let rep = check_spectrum_condition(SpectrumCondition::StarE, &p, 100_000).unwrap();
        assert!(rep.exponent.abs() < 1e-14);
        assert!(rep.finite && rep.agrees());
        p.kappa = 9.0;
        let rep = check_spectrum_condition(SpectrumCondition::StarE, &p, 100_000).unwrap();
        assert!(!rep.finite && rep.agrees());
        let p = SpectrumParams::new(1.0, 0.5);
        let rep = check_spectrum_condition(SpectrumCondition::EI, &p, 100_000).unwrap();
        assert!(!rep.finite && rep.agrees());
    }

    #[test]
    fn fast_diffusion_ratio_is_scale_invariant() {
        let q = power_law_noise(10, 0.6, CoeffScheme::Constant { value: 1.0 });
        let space = SpectralSpace::new(10, 1.0, HMetric::Dual, q).unwrap();
        let model = ModelSpec::fast_diff(0.5);
        let mut s = PairSampler::new(4, 10);
        for _ in 0..20 {
            let (v1, v2) = s.pair();
            if v1 == v2 {
                continue;
            }
            let base = a1_double_prime_ratio(&space, &model, 3.0, &v1, &v2).unwrap();
            for c in [0.5, 2.0] {
                let scaled = a1_double_prime_ratio(&space, &model, 3.0, &v1.scaled(c), &v2.scaled(c)).unwrap();
                assert!((scaled - base).abs() <= 1e-8 * base.abs());
            }
        }
    }
}
