//! Cutoff, regularized reflection and the coupled noise of the reflection coupling.
//!
//! The reflection direction is `a = (Q + I/n)^{-1}(u - v)`, and
//! `σ_n(u,v) w = ⟨a, w⟩ a / ‖a‖²` is the H-orthogonal projection onto it.
//! Noise vectors handed to this module are in H-orthonormal coordinates, so the
//! cylindrical Brownian motion is isotropic there and `I - 2σ_n` preserves its law.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{b_diagonal, ModelSpec};
use crate::spaces::{SpectralSpace, StateVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingParams {
    /// Regularization level; reflection is active once `‖X - Y‖ > 1/(2n)`.
    pub n: u32,
    /// Distance below which the two components are glued.
    pub glue_eps: f64,
}

impl CouplingParams {
    pub fn new(n: u32, glue_eps: f64) -> Result<Self> {
        let p = CouplingParams { n, glue_eps };
        p.validate()?;
        Ok(p)
    }

    pub fn with_default_glue(n: u32) -> Result<Self> {
        Self::new(n, 1e-12)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("n", 0.0, "must be at least 1"));
        }
        if !(self.glue_eps >= 0.0 && self.glue_eps < self.band()) {
            return Err(invalid(
                "glue_eps",
                self.glue_eps,
                format!("must lie in [0, 1/(2n)) = [0, {})", self.band()),
            ));
        }
        Ok(())
    }

    /// Coupling threshold `1/n`.
    pub fn threshold(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Edge `1/(2n)` of the synchronous band.
    pub fn band(&self) -> f64 {
        0.5 / self.n as f64
    }
}

fn smoothstep(u: f64) -> f64 {
    u * u * (3.0 - 2.0 * u)
}

fn smoothstep_prime(u: f64) -> f64 {
    6.0 * u * (1.0 - u)
}

fn check_arg(s: f64) -> Result<()> {
    if s < 0.0 || s.is_nan() {
        return Err(invalid("s", s, "cutoff is defined on [0, ∞)"));
    }
    Ok(())
}

/// `h(s)`: 0 on `[0, 1/2]`, 1 on `[1, ∞)`, `sin(π/2 · S(2s - 1))` between,
/// with `S(u) = 3u² - 2u³`. Both `h` and `√(1 - h²) = cos(π/2 · S)` are `C¹_b`.
pub fn cutoff_h(s: f64) -> Result<f64> {
    check_arg(s)?;
    Ok(h_unchecked(s))
}

pub(crate) fn h_unchecked(s: f64) -> f64 {
    if s <= 0.5 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        (0.5 * PI * smoothstep(2.0 * s - 1.0)).sin()
    }
}

pub fn cutoff_h_prime(s: f64) -> Result<f64> {
    check_arg(s)?;
    if s <= 0.5 || s >= 1.0 {
        return Ok(0.0);
    }
    let u = 2.0 * s - 1.0;
    Ok(PI * smoothstep_prime(u) * (0.5 * PI * smoothstep(u)).cos())
}

/// `√(1 - h(s)²)`
pub fn cutoff_complement(s: f64) -> Result<f64> {
    check_arg(s)?;
    Ok(complement_unchecked(s))
}

pub(crate) fn complement_unchecked(s: f64) -> f64 {
    if s <= 0.5 {
        1.0
    } else if s >= 1.0 {
        0.0
    } else {
        (0.5 * PI * smoothstep(2.0 * s - 1.0)).cos()
    }
}

pub fn cutoff_complement_prime(s: f64) -> Result<f64> {
    check_arg(s)?;
    if s <= 0.5 || s >= 1.0 {
        return Ok(0.0);
    }
    let u = 2.0 * s - 1.0;
    Ok(-PI * smoothstep_prime(u) * (0.5 * PI * smoothstep(u)).sin())
}

/// `‖h'‖_∞`, located by a dense scan refined with a golden-section search.
pub fn cutoff_h_prime_sup() -> f64 {
    static SUP: OnceLock<f64> = OnceLock::new();
    *SUP.get_or_init(|| {
        let f = |s: f64| cutoff_h_prime(s).unwrap_or(0.0);
        let steps = 20_000;
        let (mut best_s, mut best) = (0.75, f(0.75));
        for k in 1..steps {
            let s = 0.5 + 0.5 * k as f64 / steps as f64;
            let v = f(s);
            if v > best {
                best = v;
                best_s = s;
            }
        }
        let h = 0.5 / steps as f64;
        let (mut a, mut b) = (best_s - h, best_s + h);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..80 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        best.max(f(0.5 * (a + b)))
    })
}

/// H-coordinates of the reflection direction `(Q + I/n)^{-1}(u - v)`.
fn direction_h(space: &SpectralSpace, delta: &[f64], n: u32) -> Vec<f64> {
    let inv_n = 1.0 / n as f64;
    delta
        .iter()
        .zip(space.q_coeffs())
        .zip(space.h_weights())
        .map(|((d, q), w)| w.sqrt() * d / (q + inv_n))
        .collect()
}

/// In-place `ξ ← ξ - 2 (ξ·a) a / |a|²` on Euclidean (H-orthonormal) coordinates.
fn reflect_in_place(xi: &mut [f64], a: &[f64]) {
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let xa: f64 = xi.iter().zip(a).map(|(x, y)| x * y).sum();
    let k = 2.0 * xa / aa;
    for (x, y) in xi.iter_mut().zip(a) {
        *x -= k * y;
    }
}

fn direction_checked(
    space: &SpectralSpace,
    u: &StateVector,
    v: &StateVector,
    n: u32,
) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("n", 0.0, "must be at least 1"));
    }
    for z in [u, v] {
        if z.len() != space.n_modes() {
            return Err(Error::DimensionMismatch {
                expected: space.n_modes(),
                found: z.len(),
            });
        }
    }
    let delta = u - v;
    let a = direction_h(space, delta.coeffs(), n);
    if a.iter().all(|&x| x == 0.0) {
        return Err(Error::CoincidentStates);
    }
    Ok(a)
}

/// `σ_n(u, v) w`
pub fn sigma_n_apply(
    space: &SpectralSpace,
    u: &StateVector,
    v: &StateVector,
    n: u32,
    w: &StateVector,
) -> Result<StateVector> {
    let a = direction_checked(space, u, v, n)?;
    let wh = space.to_h_coords(w);
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let wa: f64 = wh.iter().zip(&a).map(|(x, y)| x * y).sum();
    let proj: Vec<f64> = a.iter().map(|x| wa / aa * x).collect();
    Ok(space.from_h_coords(&proj))
}

/// `(I - 2σ_n(u, v)) w`
pub fn reflect_apply(
    space: &SpectralSpace,
    u: &StateVector,
    v: &StateVector,
    n: u32,
    w: &StateVector,
) -> Result<StateVector> {
    let a = direction_checked(space, u, v, n)?;
    let mut wh = space.to_h_coords(w);
    reflect_in_place(&mut wh, &a);
    Ok(space.from_h_coords(&wh))
}

/// Noise increments of the two coupled components, in state coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct CoupledIncrements {
    pub dx: StateVector,
    pub dy: StateVector,
    /// Cutoff value `h(n ‖x - y‖)` used for this step.
    pub h: f64,
}

/// X gets `B dW¹ + Q√(1-h²) dW² + Q h dW³`, Y gets
/// `B dW¹ + Q√(1-h²) dW² + Q h (I - 2σ_n) dW³`; `dW*` are in H-coordinates.
#[allow(clippy::too_many_arguments)]
pub fn coupled_diffusion_increments(
    space: &SpectralSpace,
    model: &ModelSpec,
    params: &CouplingParams,
    x: &StateVector,
    y: &StateVector,
    dw1: &[f64],
    dw2: &[f64],
    dw3: &[f64],
) -> Result<CoupledIncrements> {
    let n = space.n_modes();
    for len in [x.len(), y.len(), dw1.len(), dw2.len(), dw3.len()] {
        if len != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: len,
            });
        }
    }
    let (dx, dy, h) = increments_h(space, model, params, x.coeffs(), y.coeffs(), dw1, dw2, dw3)?;
    Ok(CoupledIncrements {
        dx: space.from_h_coords(&dx),
        dy: space.from_h_coords(&dy),
        h,
    })
}

/// Same as [`coupled_diffusion_increments`] but returns H-coordinates.
#[allow(clippy::too_many_arguments)]
pub(crate) fn increments_h(
    space: &SpectralSpace,
    model: &ModelSpec,
    params: &CouplingParams,
    x: &[f64],
    y: &[f64],
    dw1: &[f64],
    dw2: &[f64],
    dw3: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let delta: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let dist = space.h_norm_slice(&delta);
    let arg = params.n as f64 * dist;
    let h = h_unchecked(arg);
    let c = complement_unchecked(arg);
    let q = space.q_coeffs();

    let mut dx: Vec<f64> = q.iter().zip(dw2).map(|(q, w)| q * c * w).collect();
    let mut dy = dx.clone();
    if h > 0.0 {
        let a = direction_h(space, &delta, params.n);
        if a.iter().all(|&v| v == 0.0) {
            return Err(Error::CoincidentStates);
        }
        let mut reflected = dw3.to_vec();
        reflect_in_place(&mut reflected, &a);
        for i in 0..q.len() {
            dx[i] += q[i] * h * dw3[i];
            dy[i] += q[i] * h * reflected[i];
        }
    }
    if let (Some(bx), Some(by)) = (b_diagonal(space, model, x), b_diagonal(space, model, y)) {
        for i in 0..q.len() {
            dx[i] += bx[i] * dw1[i];
            dy[i] += by[i] * dw1[i];
        }
    }
    Ok((dx, dy, h))
}

fn qn_inv(space: &SpectralSpace, n: u32, v: &[f64]) -> Vec<f64> {
    let inv_n = 1.0 / n as f64;
    v.iter()
        .zip(space.q_coeffs())
        .map(|(x, q)| x / (q + inv_n))
        .collect()
}

/// `I_n(v) = 2h(n‖v‖)² / (‖v‖ ‖Q_n⁻¹v‖²) · (‖QQ_n⁻¹v‖² - ⟨QQ_n⁻¹v, v⟩² / ‖v‖²)`,
/// the Itô correction in the drift of `‖X - Y‖`.
pub fn i_n(space: &SpectralSpace, n: u32, v: &StateVector) -> f64 {
    i_n_slice(space, n, v.coeffs())
}

pub(crate) fn i_n_slice(space: &SpectralSpace, n: u32, v: &[f64]) -> f64 {
    let norm = space.h_norm_slice(v);
    if norm == 0.0 {
        return 0.0;
    }
    let h = h_unchecked(n as f64 * norm);
    if h == 0.0 {
        return 0.0;
    }
    let qn = qn_inv(space, n, v);
    let qqn: Vec<f64> = qn.iter().zip(space.q_coeffs()).map(|(a, q)| a * q).collect();
    let qn_norm2 = space.h_norm_slice(&qn).powi(2);
    let qqn_norm2 = space.h_norm_slice(&qqn).powi(2);
    let inner: f64 = space
        .h_weights()
        .iter()
        .zip(qqn.iter().zip(v))
        .map(|(w, (a, b))| w * a * b)
        .sum();
    let defect = (qqn_norm2 - inner * inner / (norm * norm)).max(0.0);
    2.0 * h * h / (norm * qn_norm2) * defect
}

/// Quadratic-variation rate of the reflection martingale in `‖X - Y‖` when `h = 1`:
/// `4 ⟨QQ_n⁻¹Δ, Δ⟩² / (‖Δ‖² ‖Q_n⁻¹Δ‖²)`.
pub fn reflection_qv_rate(space: &SpectralSpace, n: u32, delta: &StateVector) -> f64 {
    let norm2 = space.h_inner(delta, delta);
    if norm2 == 0.0 {
        return 0.0;
    }
    let qn = qn_inv(space, n, delta.coeffs());
    let qn_norm2 = space.h_norm_slice(&qn).powi(2);
    let inner: f64 = space
        .h_weights()
        .iter()
        .zip(qn.iter().zip(space.q_coeffs()).zip(delta.coeffs()))
        .map(|(w, ((a, q), d))| w * a * q * d)
        .sum();
    4.0 * inner * inner / (norm2 * qn_norm2)
}

/// `2 ‖Δ‖² / ‖Δ‖_Q² - 4/n²`
pub fn qv_lower_bound(space: &SpectralSpace, n: u32, delta: &StateVector) -> f64 {
    let qn = space.q_norm(delta);
    let ratio = if qn.is_infinite() {
        0.0
    } else {
        2.0 * space.h_inner(delta, delta) / (qn * qn)
    };
    ratio - 4.0 / (n as f64 * n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spaces::HMetric;

    fn space(n: usize) -> SpectralSpace {
        let q: Vec<f64> = (1..=n).map(|i| (i as f64).powf(-0.75)).collect();
        SpectralSpace::new(n, 1.0, HMetric::Dual, q).unwrap()
    }

    #[test]
    fn cutoff_branch_values() {
        assert_eq!(cutoff_h(0.4).unwrap(), 0.0);
        assert_eq!(cutoff_h(0.5).unwrap(), 0.0);
        assert_eq!(cutoff_h(1.5).unwrap(), 1.0);
        assert_eq!(cutoff_h(1.0).unwrap(), 1.0);
        // independent route: S(1/2) = 3/4 - 2/8 = 1/2, so h = sin(π/4)
        let s_half = 3.0 * 0.25 - 2.0 * 0.125;
        assert!((cutoff_h(0.75).unwrap() - (PI / 2.0 * s_half).sin()).abs() < 1e-15);
        assert!((cutoff_h(0.75).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(cutoff_h(-0.1).is_err());
    }

    #[test]
    fn complement_squares_to_one() {
        for k in 0..=200 {
            let s = k as f64 / 100.0;
            let h = cutoff_h(s).unwrap();
            let c = cutoff_complement(s).unwrap();
            assert!((h * h + c * c - 1.0).abs() < 1e-14);
            assert!((0.0..=1.0).contains(&h));
        }
    }

    #[test]
    fn derivative_sup_is_attained_inside_the_transition() {
        let sup = cutoff_h_prime_sup();
        assert!(sup > 3.0 && sup < 4.0, "{sup}");
        let scan = (1..10_000)
            .map(|k| cutoff_h_prime(0.5 + k as f64 / 20_000.0).unwrap())
            .fold(0.0f64, f64::max);
        assert!(sup >= scan);
    }

    #[test]
    fn projection_and_reflection_examples() {
        let s = space(6);
        let e1 = StateVector::basis(6, 0);
        let e2 = StateVector::basis(6, 1);
        let zero = StateVector::zeros(6);
        let p = sigma_n_apply(&s, &e1, &zero, 3, &e1).unwrap();
        assert!((&p - &e1).coeffs().iter().all(|c| c.abs() < 1e-14));
        assert!(sigma_n_apply(&s, &e1, &zero, 3, &e2).unwrap().is_zero());

        let r = reflect_apply(&s, &e1, &zero, 3, &e1.scaled(2.5)).unwrap();
        assert!((&r - &e1.scaled(-2.5)).coeffs().iter().all(|c| c.abs() < 1e-14));
        assert_eq!(reflect_apply(&s, &e1, &zero, 3, &e2).unwrap(), e2);

        assert!(matches!(
            sigma_n_apply(&s, &e1, &e1, 3, &e2),
            Err(Error::CoincidentStates)
        ));
    }

    #[test]
    fn synchronous_below_band() {
        let s = space(4);
        let m = ModelSpec::porous(1.0);
        let params = CouplingParams::with_default_glue(1).unwrap();
        let x = StateVector::zeros(4);
        // ‖x - y‖_H = 0.1 < 1/2
        let y = StateVector::basis(4, 0).scaled(0.1 * PI);
        let w = [0.3, -0.1, 0.2, 0.05];
        let inc =
            coupled_diffusion_increments(&s, &m, &params, &x, &y, &w, &[0.1, 0.2, 0.3, 0.4], &w)
                .unwrap();
        assert_eq!(inc.h, 0.0);
        assert_eq!(inc.dx, inc.dy);
    }

    #[test]
    fn full_reflection_flips_first_mode() {
        let s = SpectralSpace::new(4, 1.0, HMetric::Dual, vec![1.0; 4]).unwrap();
        let m = ModelSpec::porous(1.0);
        let params = CouplingParams::with_default_glue(10).unwrap();
        let x = StateVector::basis(4, 0).scaled(5.0);
        let y = StateVector::zeros(4);
        let dw3 = [0.7, 0.2, -0.1, 0.4];
        let zero = [0.0; 4];
        let inc = coupled_diffusion_increments(&s, &m, &params, &x, &y, &zero, &zero, &dw3).unwrap();
        assert_eq!(inc.h, 1.0);
        assert!((inc.dx.coeffs()[0] + inc.dy.coeffs()[0]).abs() < 1e-14);
        for i in 1..4 {
            assert!((inc.dx.coeffs()[i] - inc.dy.coeffs()[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn params_validation() {
        assert!(CouplingParams::new(0, 0.0).is_err());
        assert!(CouplingParams::new(10, 0.05).is_err());
        assert!(CouplingParams::new(10, 1e-12).is_ok());
    }
}
