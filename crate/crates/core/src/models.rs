//! Drift and diffusion for the three monotone families.
//!
//! * porous media: `A(t,v) = L Ψ(v) + c v` with `Ψ(s) = a |s|^{r-1} s`, `r ≥ 1`
//! * p-Laplace:    `A(t,v) = div(|∇v|^{p-2} ∇v)`, `p ≥ 2`, on `L²(0,1)`
//! * fast diffusion: `A(t,v) = L Ψ(v) + β(t) v` with `Ψ(s) = |s|^r sgn s`, `0 < r < 1`
//!
//! Porous media and fast diffusion live on the dual metric, p-Laplace on `L²`
//! with `γ = 1`; [`ModelSpec::validate_for`] enforces the pairing.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spaces::{HMetric, SpectralSpace, StateVector, VFamily};

/// Lower clamp for the typical amplitude used to stabilize fast diffusion.
const FAST_DIFF_AMPLITUDE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Beta {
    Constant { value: f64 },
    /// `mean + amplitude · sin(frequency · t)`
    Sinusoid {
        mean: f64,
        amplitude: f64,
        frequency: f64,
    },
}

impl Beta {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            Beta::Constant { value } => value,
            Beta::Sinusoid {
                mean,
                amplitude,
                frequency,
            } => mean + amplitude * (frequency * t).sin(),
        }
    }

    /// `sup_t β(t)`
    pub fn sup(&self) -> f64 {
        match *self {
            Beta::Constant { value } => value,
            Beta::Sinusoid {
                mean, amplitude, ..
            } => mean + amplitude.abs(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Porous {
        r: f64,
        psi_scale: f64,
        phi_slope: f64,
    },
    PLaplace {
        p: f64,
    },
    FastDiff {
        r: f64,
        beta: Beta,
    },
}

impl Family {
    /// Growth exponent `r` of the monotonicity conditions (`p - 1` for p-Laplace).
    pub fn r(&self) -> f64 {
        match *self {
            Family::Porous { r, .. } | Family::FastDiff { r, .. } => r,
            Family::PLaplace { p } => p - 1.0,
        }
    }

    pub fn v_family(&self) -> VFamily {
        match *self {
            Family::Porous { r, .. } => VFamily::Porous { r },
            Family::PLaplace { p } => VFamily::PLaplace { p },
            Family::FastDiff { r, .. } => VFamily::FastDiff { r },
        }
    }

    pub fn is_linear(&self) -> bool {
        match *self {
            Family::Porous { r, .. } => r == 1.0,
            Family::PLaplace { p } => p == 2.0,
            Family::FastDiff { .. } => false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::Porous { .. } => "porous",
            Family::PLaplace { .. } => "plaplace",
            Family::FastDiff { .. } => "fastdiff",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionSpec {
    Zero,
    /// Diagonal in the H-orthonormal basis with entries
    /// `b_i(v) = c0 · a_i · tanh(ṽ_i)`, `ṽ_i` the H-coordinates of `v`.
    /// With `Σ a_i² ≤ 1`, `‖B(v1) - B(v2)‖_HS ≤ c0 ‖v1 - v2‖_H`.
    LipschitzDiagonal { c0: f64, base: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub b_spec: DiffusionSpec,
    /// Optional user-supplied monotonicity strength for the checkers.
    pub theta: Option<f64>,
}

impl ModelSpec {
    pub fn new(family: Family) -> Self {
        ModelSpec {
            family,
            b_spec: DiffusionSpec::Zero,
            theta: None,
        }
    }

    pub fn porous(r: f64) -> Self {
        Self::new(Family::Porous {
            r,
            psi_scale: 1.0,
            phi_slope: 0.0,
        })
    }

    pub fn plaplace(p: f64) -> Self {
        Self::new(Family::PLaplace { p })
    }

    pub fn fast_diff(r: f64) -> Self {
        Self::new(Family::FastDiff {
            r,
            beta: Beta::Constant { value: 0.0 },
        })
    }

    pub fn with_diffusion(mut self, b_spec: DiffusionSpec) -> Self {
        self.b_spec = b_spec;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            Family::Porous {
                r,
                psi_scale,
                phi_slope,
            } => {
                if !(r >= 1.0 && r.is_finite()) {
                    return Err(invalid("r", r, "porous media needs r >= 1"));
                }
                if !(psi_scale > 0.0 && psi_scale.is_finite()) {
                    return Err(invalid("psi_scale", psi_scale, "must be positive"));
                }
                if !phi_slope.is_finite() {
                    return Err(invalid("phi_slope", phi_slope, "must be finite"));
                }
            }
            Family::PLaplace { p } => {
                if !(p >= 2.0 && p.is_finite()) {
                    return Err(invalid("p", p, "p-Laplace needs p >= 2"));
                }
            }
            Family::FastDiff { r, beta } => {
                if !(r > 0.0 && r < 1.0) {
                    return Err(invalid("r", r, "fast diffusion needs 0 < r < 1"));
                }
                if !beta.sup().is_finite() {
                    return Err(invalid("beta", beta.sup(), "must be finite"));
                }
            }
        }
        if let DiffusionSpec::LipschitzDiagonal { c0, base } = &self.b_spec {
            if !(*c0 >= 0.0 && c0.is_finite()) {
                return Err(invalid("c0", *c0, "must be nonnegative"));
            }
            if let Some(index) = base.iter().position(|a| !a.is_finite()) {
                return Err(Error::NonFinite {
                    context: "diffusion amplitudes",
                    index,
                });
            }
        }
        Ok(())
    }

    /// Checks the family against the space it will run on.
    pub fn validate_for(&self, space: &SpectralSpace) -> Result<()> {
        self.validate()?;
        match self.family {
            Family::PLaplace { .. } => {
                if space.metric() != HMetric::L2 {
                    return Err(Error::ConfigSemantic(
                        "p-Laplace runs on the L2 metric".into(),
                    ));
                }
                if space.gamma() != 1.0 {
                    return Err(invalid("gamma", space.gamma(), "p-Laplace needs gamma = 1"));
                }
            }
            Family::Porous { .. } | Family::FastDiff { .. } => {
                if space.metric() != HMetric::Dual {
                    return Err(Error::ConfigSemantic(format!(
                        "{} runs on the dual metric",
                        self.family.name()
                    )));
                }
            }
        }
        if let DiffusionSpec::LipschitzDiagonal { base, .. } = &self.b_spec {
            if base.len() > space.n_modes() {
                return Err(Error::DimensionMismatch {
                    expected: space.n_modes(),
                    found: base.len(),
                });
            }
        }
        Ok(())
    }

    /// A valid `K` for the plain monotonicity bound:
    /// `⟨A(v1)-A(v2), Δ⟩ + ½‖B(v1)-B(v2)‖²_HS ≤ K ‖Δ‖²`.
    pub fn monotonicity_k(&self) -> f64 {
        let linear = match self.family {
            Family::Porous { phi_slope, .. } => phi_slope.max(0.0),
            Family::PLaplace { .. } => 0.0,
            Family::FastDiff { beta, .. } => beta.sup().max(0.0),
        };
        linear + 0.5 * self.lipschitz_c0().powi(2)
    }

    pub fn lipschitz_c0(&self) -> f64 {
        match &self.b_spec {
            DiffusionSpec::Zero => 0.0,
            DiffusionSpec::LipschitzDiagonal { c0, base } => {
                let amax = base.iter().fold(0.0f64, |m, a| m.max(a.abs()));
                c0 * amax
            }
        }
    }

    /// `sup ‖B(t,x)‖_{op}`; zero for the zero spec.
    pub fn b_sup(&self) -> f64 {
        self.lipschitz_c0()
    }
}

/// Pointwise `Ψ`.
fn psi(family: &Family, s: f64) -> f64 {
    match *family {
        Family::Porous { r, psi_scale, .. } => psi_scale * s.abs().powf(r - 1.0) * s,
        Family::FastDiff { r, .. } => s.abs().powf(r) * s.signum(),
        Family::PLaplace { .. } => unreachable!("p-Laplace has no pointwise Ψ"),
    }
}

/// `|g|^{p-2} g`
fn p_flux(p: f64, g: f64) -> f64 {
    if p == 2.0 {
        g
    } else {
        g.abs().powf(p - 2.0) * g
    }
}

/// Drift with the auxiliary quantities the integrator needs.
#[derive(Clone, Debug)]
pub(crate) struct DriftEval {
    pub drift: Vec<f64>,
    /// Scalar `α` such that `-α λ_i` is a stabilizing diagonal linearization.
    pub stiffness: f64,
    /// `‖v‖_V^{1+r}` when requested.
    pub v_power: Option<f64>,
}

pub(crate) fn eval_drift(
    space: &SpectralSpace,
    model: &ModelSpec,
    t: f64,
    v: &[f64],
    want_v_power: bool,
) -> DriftEval {
    let lambdas = space.lambdas();
    let r = model.family.r();
    let mut v_power = None;
    let (drift, stiffness) = match model.family {
        Family::Porous {
            r: 1.0,
            psi_scale,
            phi_slope,
        } => {
            if want_v_power {
                let grid = space.to_grid_unchecked(v);
                v_power = Some(space.v_norm_from_grid(v, &grid, model.family.v_family()).powf(2.0));
            }
            let d = v
                .iter()
                .zip(lambdas)
                .map(|(c, l)| (-psi_scale * l + phi_slope) * c)
                .collect();
            (d, psi_scale)
        }
        Family::Porous {
            r,
            psi_scale,
            phi_slope,
        } => {
            let grid = space.to_grid_unchecked(v);
            let vmax = grid.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            let mapped: Vec<f64> = grid.iter().map(|&s| psi(&model.family, s)).collect();
            let proj = space.project_grid(&mapped);
            if want_v_power {
                v_power = Some(space.v_norm_from_grid(v, &grid, model.family.v_family()).powf(1.0 + r));
            }
            let d = proj
                .iter()
                .zip(lambdas)
                .zip(v)
                .map(|((p, l), c)| -l * p + phi_slope * c)
                .collect();
            (d, psi_scale * r * vmax.powf(r - 1.0))
        }
        Family::FastDiff { r, beta } => {
            let grid = space.to_grid_unchecked(v);
            let rms = (space.grid_integral(&grid, &grid)).sqrt();
            let mapped: Vec<f64> = grid.iter().map(|&s| psi(&model.family, s)).collect();
            let proj = space.project_grid(&mapped);
            if want_v_power {
                v_power = Some(space.v_norm_from_grid(v, &grid, model.family.v_family()).powf(1.0 + r));
            }
            let b = beta.at(t);
            let d = proj
                .iter()
                .zip(lambdas)
                .zip(v)
                .map(|((p, l), c)| -l * p + b * c)
                .collect();
            (d, r * rms.max(FAST_DIFF_AMPLITUDE_FLOOR).powf(r - 1.0))
        }
        Family::PLaplace { p: 2.0 } => {
            if want_v_power {
                let grid = space.to_grid_unchecked(v);
                v_power = Some(space.v_norm_from_grid(v, &grid, model.family.v_family()).powf(2.0));
            }
            let d = v.iter().zip(lambdas).map(|(c, l)| -l * c).collect();
            (d, 1.0)
        }
        Family::PLaplace { p } => {
            let grad = space.gradient_on_nodes(v);
            let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            let flux: Vec<f64> = grad.iter().map(|&g| p_flux(p, g)).collect();
            if want_v_power {
                let grid = space.to_grid_unchecked(v);
                v_power = Some(space.v_norm_from_grid(v, &grid, model.family.v_family()).powf(1.0 + r));
            }
            (space.divergence_from_nodes(&flux), (p - 1.0) * gmax.powf(p - 2.0))
        }
    };
    DriftEval {
        drift,
        stiffness,
        v_power,
    }
}

/// Galerkin projection of `A(t, v)`.
pub fn drift(
    space: &SpectralSpace,
    model: &ModelSpec,
    t: f64,
    v: &StateVector,
) -> Result<StateVector> {
    if v.len() != space.n_modes() {
        return Err(Error::DimensionMismatch {
            expected: space.n_modes(),
            found: v.len(),
        });
    }
    v.check_finite("drift input")?;
    let out = StateVector::from_vec(eval_drift(space, model, t, v.coeffs(), false).drift);
    out.check_finite("drift")?;
    Ok(out)
}

/// `⟨A(t,v1) - A(t,v2), v1 - v2⟩` in the family's closed form.
pub fn pairing_drift_diff(
    space: &SpectralSpace,
    model: &ModelSpec,
    t: f64,
    v1: &StateVector,
    v2: &StateVector,
) -> f64 {
    if v1 == v2 {
        return 0.0;
    }
    let delta = v1 - v2;
    match model.family {
        Family::Porous { phi_slope, .. } => {
            let (g1, g2, gd) = grids(space, v1, v2, &delta);
            let dpsi: Vec<f64> = g1
                .iter()
                .zip(&g2)
                .map(|(&a, &b)| psi(&model.family, a) - psi(&model.family, b))
                .collect();
            let inverse_l: f64 = delta
                .coeffs()
                .iter()
                .zip(space.lambdas())
                .map(|(d, l)| d * d / l)
                .sum();
            -space.grid_integral(&dpsi, &gd) + phi_slope * inverse_l
        }
        Family::FastDiff { beta, .. } => {
            let (g1, g2, gd) = grids(space, v1, v2, &delta);
            let dpsi: Vec<f64> = g1
                .iter()
                .zip(&g2)
                .map(|(&a, &b)| psi(&model.family, a) - psi(&model.family, b))
                .collect();
            -space.grid_integral(&dpsi, &gd) + beta.at(t) * space.h_inner(&delta, &delta)
        }
        Family::PLaplace { p } => {
            let d1 = space.gradient_on_nodes(v1.coeffs());
            let d2 = space.gradient_on_nodes(v2.coeffs());
            let dd = space.gradient_on_nodes(delta.coeffs());
            let dflux: Vec<f64> = d1
                .iter()
                .zip(&d2)
                .map(|(&a, &b)| p_flux(p, a) - p_flux(p, b))
                .collect();
            -space.node_integral(&dflux, &dd)
        }
    }
}

fn grids(
    space: &SpectralSpace,
    v1: &StateVector,
    v2: &StateVector,
    delta: &StateVector,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (
        space.to_grid_unchecked(v1.coeffs()),
        space.to_grid_unchecked(v2.coeffs()),
        space.to_grid_unchecked(delta.coeffs()),
    )
}

/// Diagonal entries `b_i(v)` of `B(t, v)` in the H-orthonormal basis.
pub(crate) fn b_diagonal(space: &SpectralSpace, model: &ModelSpec, v: &[f64]) -> Option<Vec<f64>> {
    match &model.b_spec {
        DiffusionSpec::Zero => None,
        DiffusionSpec::LipschitzDiagonal { c0, base } => Some(
            v.iter()
                .zip(space.h_weights())
                .enumerate()
                .map(|(i, (c, w))| {
                    let a = base.get(i).copied().unwrap_or(0.0);
                    c0 * a * (c * w.sqrt()).tanh()
                })
                .collect(),
        ),
    }
}

/// `B(t, v) w`.
pub fn apply_b(
    space: &SpectralSpace,
    model: &ModelSpec,
    _t: f64,
    v: &StateVector,
    w: &StateVector,
) -> StateVector {
    match b_diagonal(space, model, v.coeffs()) {
        None => StateVector::zeros(space.n_modes()),
        Some(b) => StateVector::from_vec(b.iter().zip(w.coeffs()).map(|(b, w)| b * w).collect()),
    }
}

/// `‖B(t, v1) - B(t, v2)‖_HS` at truncation.
pub fn b_hs_diff(
    space: &SpectralSpace,
    model: &ModelSpec,
    _t: f64,
    v1: &StateVector,
    v2: &StateVector,
) -> f64 {
    match (
        b_diagonal(space, model, v1.coeffs()),
        b_diagonal(space, model, v2.coeffs()),
    ) {
        (Some(b1), Some(b2)) => b1
            .iter()
            .zip(&b2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt(),
        _ => 0.0,
    }
}

/// `‖B(t, v)‖²_HS`
pub fn b_hs_sq(space: &SpectralSpace, model: &ModelSpec, v: &StateVector) -> f64 {
    b_diagonal(space, model, v.coeffs())
        .map(|b| b.iter().map(|x| x * x).sum())
        .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn dual(n: usize) -> SpectralSpace {
        SpectralSpace::new(n, 1.0, HMetric::Dual, vec![1.0; n]).unwrap()
    }

    fn flat(n: usize) -> SpectralSpace {
        SpectralSpace::new(n, 1.0, HMetric::L2, vec![1.0; n]).unwrap()
    }

    #[test]
    fn linear_porous_drift_on_first_mode() {
        let s = dual(8);
        let d = drift(&s, &ModelSpec::porous(1.0), 0.0, &StateVector::basis(8, 0)).unwrap();
        assert!((d.coeffs()[0] + PI * PI).abs() < 1e-12);
        assert!(d.coeffs()[1..].iter().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn quadratic_plaplace_is_the_laplacian() {
        let s = flat(8);
        let d = drift(&s, &ModelSpec::plaplace(2.0), 0.0, &StateVector::basis(8, 0)).unwrap();
        assert!((d.coeffs()[0] + PI * PI).abs() < 1e-12);
    }

    #[test]
    fn general_plaplace_route_matches_laplacian_at_p2() {
        // p slightly above 2 exercises the quadrature route
        let s = flat(8);
        let v = StateVector::from_vec(vec![0.3, -0.2, 0.1, 0.05, 0.0, 0.0, 0.01, 0.0]);
        let fast = drift(&s, &ModelSpec::plaplace(2.0), 0.0, &v).unwrap();
        let slow = drift(&s, &ModelSpec::plaplace(2.0 + 1e-12), 0.0, &v).unwrap();
        for (a, b) in fast.coeffs().iter().zip(slow.coeffs()) {
            assert!((a - b).abs() < 1e-9, "{a} {b}");
        }
    }

    #[test]
    fn cubic_porous_matches_fine_quadrature() {
        let n = 4;
        let coarse = dual(n);
        let fine = SpectralSpace::with_oversampling(n, 1.0, HMetric::Dual, vec![1.0; n], 64).unwrap();
        let m = ModelSpec::porous(3.0);
        let e1 = StateVector::basis(n, 0);
        let a = drift(&coarse, &m, 0.0, &e1).unwrap();
        let b = drift(&fine, &m, 0.0, &e1).unwrap();
        for (x, y) in a.coeffs().iter().zip(b.coeffs()) {
            assert!((x - y).abs() < 1e-6);
        }
        // m(e1 · e1³) = 4 ∫ sin⁴ = 3/2
        assert!((a.coeffs()[0] + PI * PI * 1.5).abs() < 1e-10);
    }

    #[test]
    fn pairing_examples() {
        let s = dual(8);
        let v = StateVector::from_vec(vec![0.5, 0.1, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0]);
        assert_eq!(pairing_drift_diff(&s, &ModelSpec::porous(2.0), 0.0, &v, &v), 0.0);

        let e1 = StateVector::basis(8, 0);
        let y = &v - &e1;
        let pr = pairing_drift_diff(&s, &ModelSpec::porous(1.0), 0.0, &v, &y);
        assert!((pr + 1.0).abs() < 1e-12);

        let f = flat(8);
        let pl = pairing_drift_diff(&f, &ModelSpec::plaplace(2.0), 0.0, &v, &y);
        assert!((pl + PI * PI).abs() < 1e-10);
    }

    #[test]
    fn closed_form_pairing_equals_galerkin_pairing() {
        let s = dual(8);
        let v1 = StateVector::from_vec(vec![0.5, 0.1, -0.3, 0.0, 0.2, 0.0, 0.05, 0.0]);
        let v2 = StateVector::from_vec(vec![-0.1, 0.4, 0.0, 0.1, 0.0, -0.2, 0.0, 0.01]);
        for model in [
            ModelSpec::porous(2.0),
            ModelSpec::new(Family::Porous {
                r: 3.0,
                psi_scale: 0.7,
                phi_slope: 1.5,
            }),
            ModelSpec::fast_diff(0.5),
        ] {
            let a = drift(&s, &model, 0.0, &v1).unwrap();
            let b = drift(&s, &model, 0.0, &v2).unwrap();
            let galerkin = s.h_inner(&(&a - &b), &(&v1 - &v2));
            let closed = pairing_drift_diff(&s, &model, 0.0, &v1, &v2);
            assert!((galerkin - closed).abs() < 1e-9 * closed.abs().max(1.0), "{galerkin} {closed}");
        }
    }

    #[test]
    fn zero_diffusion_is_zero() {
        let s = dual(4);
        let m = ModelSpec::porous(2.0);
        let v = StateVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert!(apply_b(&s, &m, 0.0, &v, &v).is_zero());
        assert_eq!(b_hs_diff(&s, &m, 0.0, &v, &StateVector::zeros(4)), 0.0);
    }

    #[test]
    fn lipschitz_diagonal_vanishes_on_the_diagonal() {
        let s = dual(4);
        let m = ModelSpec::porous(2.0).with_diffusion(DiffusionSpec::LipschitzDiagonal {
            c0: 1.5,
            base: vec![0.5; 4],
        });
        let v = StateVector::from_vec(vec![1.0, -2.0, 3.0, 0.0]);
        assert_eq!(b_hs_diff(&s, &m, 0.0, &v, &v), 0.0);
        assert!((m.lipschitz_c0() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn space_pairing_is_enforced() {
        assert!(ModelSpec::plaplace(2.0).validate_for(&dual(4)).is_err());
        assert!(ModelSpec::porous(2.0).validate_for(&flat(4)).is_err());
        assert!(ModelSpec::porous(0.5).validate().is_err());
        assert!(ModelSpec::fast_diff(1.0).validate().is_err());
    }

    #[test]
    fn overflow_is_flagged_with_a_mode() {
        let s = dual(4);
        let v = StateVector::from_vec(vec![1e200, 0.0, 0.0, 0.0]);
        match drift(&s, &ModelSpec::porous(3.0), 0.0, &v) {
            Err(Error::NonFinite { index, .. }) => assert!(index < 4),
            other => panic!("expected overflow, got {other:?}"),
        }
    }
}
