//! Truncated Gelfand triple on (0,1).
//!
//! Fields are stored as coefficients in the Dirichlet sine basis
//! `e_i(x) = √2 sin(iπx)`, which is orthonormal in `L²(m)` for the normalized
//! Lebesgue measure `m`. The eigenvalues of `-L = (-Δ)^γ` are `λ_i = (πi)^{2γ}`.
//! Two ambient metrics are supported: the dual space of `D((-L)^{1/2})`, where
//! mode `i` carries weight `1/λ_i`, and plain `L²(m)`.
//!
//! Pointwise nonlinearities are evaluated by collocation on a uniform grid of
//! `M = oversampling · N` interior points. With the trapezoidal rule the discrete
//! sine and cosine systems stay orthogonal up to degree `2(M+1)`, so products of
//! up to seven band-limited factors are integrated without aliasing at the
//! default oversampling of 4.

use std::f64::consts::PI;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Smallest accepted ratio `M / N`.
pub const MIN_OVERSAMPLING: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HMetric {
    /// Dual of `D((-L)^{1/2})`; `⟨x, y⟩ = Σ x_i y_i / λ_i`.
    Dual,
    /// `L²(m)`; `⟨x, y⟩ = Σ x_i y_i`.
    L2,
}

/// Prefactors `c_i` of a power-law noise spectrum `q_i = c_i i^{-δ}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoeffScheme {
    Constant { value: f64 },
    /// `c_i = value · (1 + amplitude · sin(i))`, bounded away from zero when
    /// `|amplitude| < 1`.
    Oscillating { value: f64, amplitude: f64 },
}

impl CoeffScheme {
    pub fn coefficient(&self, mode: usize) -> f64 {
        match *self {
            CoeffScheme::Constant { value } => value,
            CoeffScheme::Oscillating { value, amplitude } => {
                value * (1.0 + amplitude * (mode as f64).sin())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            CoeffScheme::Constant { value } => {
                if !value.is_finite() || value == 0.0 {
                    return Err(invalid("c", value, "must be finite and nonzero"));
                }
            }
            CoeffScheme::Oscillating { value, amplitude } => {
                if !value.is_finite() || value == 0.0 {
                    return Err(invalid("c", value, "must be finite and nonzero"));
                }
                if !(amplitude.abs() < 1.0) {
                    return Err(invalid("amplitude", amplitude, "must satisfy |a| < 1"));
                }
            }
        }
        Ok(())
    }
}

/// `q_i = c_i · i^{-δ}` for `i = 1..=n`.
pub fn power_law_noise(n: usize, delta: f64, scheme: CoeffScheme) -> Vec<f64> {
    (1..=n)
        .map(|i| scheme.coefficient(i) * (i as f64).powf(-delta))
        .collect()
}

/// Eigenvalues `(πi)^{2γ}`.
pub fn dirichlet_eigenvalues(n: usize, gamma: f64) -> Vec<f64> {
    (1..=n).map(|i| (PI * i as f64).powf(2.0 * gamma)).collect()
}

/// Coefficients of a field in the first `N` sine modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn zeros(n: usize) -> Self {
        StateVector(vec![0.0; n])
    }

    pub fn from_vec(coeffs: Vec<f64>) -> Self {
        StateVector(coeffs)
    }

    /// The basis vector of mode `k + 1` (0-based index `k`).
    pub fn basis(n: usize, k: usize) -> Self {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        StateVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.0
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&c| c == 0.0)
    }

    /// First non-finite coefficient, as a hard error.
    pub fn check_finite(&self, context: &'static str) -> Result<()> {
        match self.0.iter().position(|c| !c.is_finite()) {
            Some(index) => Err(Error::NonFinite { context, index }),
            None => Ok(()),
        }
    }

    pub fn scaled(&self, c: f64) -> StateVector {
        StateVector(self.0.iter().map(|x| c * x).collect())
    }

    /// `self += a · other`
    pub fn axpy(&mut self, a: f64, other: &StateVector) {
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s += a * o;
        }
    }
}

impl Sub for &StateVector {
    type Output = StateVector;
    fn sub(self, rhs: &StateVector) -> StateVector {
        StateVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Add for &StateVector {
    type Output = StateVector;
    fn add(self, rhs: &StateVector) -> StateVector {
        StateVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

/// Which V-norm to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum VFamily {
    /// `‖v‖_{L^{1+r}}`
    Porous { r: f64 },
    /// `‖v‖_p + ‖∇v‖_p`
    PLaplace { p: f64 },
    /// `‖v‖_{L^{1+r}} + ‖v‖_H`
    FastDiff { r: f64 },
}

#[derive(Clone, Debug)]
pub struct SpectralSpace {
    n_modes: usize,
    gamma: f64,
    metric: HMetric,
    lambdas: Vec<f64>,
    q: Vec<f64>,
    h_weights: Vec<f64>,
    /// Interior collocation points `j/(M+1)`, `j = 1..=M`.
    points: Vec<f64>,
    /// `√2 sin(iπ x_j)`, row-major by point.
    sine: Vec<f64>,
    /// `√2 iπ cos(iπ x_j)` on all `M + 2` nodes (endpoints included).
    dsine: Vec<f64>,
}

impl SpectralSpace {
    /// Space with `λ_i = (πi)^{2γ}` and explicit noise coefficients `q`.
    pub fn new(n_modes: usize, gamma: f64, metric: HMetric, q: Vec<f64>) -> Result<Self> {
        Self::with_oversampling(n_modes, gamma, metric, q, MIN_OVERSAMPLING)
    }

    pub fn with_oversampling(
        n_modes: usize,
        gamma: f64,
        metric: HMetric,
        q: Vec<f64>,
        oversampling: usize,
    ) -> Result<Self> {
        if n_modes == 0 {
            return Err(invalid("n_modes", 0.0, "must be at least 1"));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid("gamma", gamma, "must be positive"));
        }
        if oversampling < MIN_OVERSAMPLING {
            return Err(invalid(
                "oversampling",
                oversampling as f64,
                format!("quadrature needs M >= {MIN_OVERSAMPLING}N"),
            ));
        }
        if q.len() != n_modes {
            return Err(Error::DimensionMismatch {
                expected: n_modes,
                found: q.len(),
            });
        }
        if let Some(index) = q.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: "noise coefficients",
                index,
            });
        }

        let lambdas = dirichlet_eigenvalues(n_modes, gamma);
        let h_weights = match metric {
            HMetric::Dual => lambdas.iter().map(|l| 1.0 / l).collect(),
            HMetric::L2 => vec![1.0; n_modes],
        };

        let m = oversampling * n_modes;
        let spacing = 1.0 / (m as f64 + 1.0);
        let points: Vec<f64> = (1..=m).map(|j| j as f64 * spacing).collect();

        let mut sine = Vec::with_capacity(m * n_modes);
        for j in 1..=m {
            for i in 1..=n_modes {
                // exact angle reduction keeps the discrete orthogonality at round-off level
                let k = (i * j) % (2 * (m + 1));
                let angle = PI * k as f64 * spacing;
                sine.push(2f64.sqrt() * angle.sin());
            }
        }
        let mut dsine = Vec::with_capacity((m + 2) * n_modes);
        for j in 0..=m + 1 {
            for i in 1..=n_modes {
                let k = (i * j) % (2 * (m + 1));
                let angle = PI * k as f64 * spacing;
                dsine.push(2f64.sqrt() * PI * i as f64 * angle.cos());
            }
        }

        Ok(SpectralSpace {
            n_modes,
            gamma,
            metric,
            lambdas,
            q,
            h_weights,
            points,
            sine,
            dsine,
        })
    }

    /// Power-law noise `q_i = c_i i^{-δ}`.
    pub fn power_law(
        n_modes: usize,
        gamma: f64,
        metric: HMetric,
        delta: f64,
        scheme: CoeffScheme,
    ) -> Result<Self> {
        scheme.validate()?;
        Self::new(n_modes, gamma, metric, power_law_noise(n_modes, delta, scheme))
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn metric(&self) -> HMetric {
        self.metric
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn q_coeffs(&self) -> &[f64] {
        &self.q
    }

    /// Per-mode weights `w_i` of the H inner product.
    pub fn h_weights(&self) -> &[f64] {
        &self.h_weights
    }

    pub fn grid_points(&self) -> &[f64] {
        &self.points
    }

    pub fn grid_len(&self) -> usize {
        self.points.len()
    }

    /// Trapezoidal weight of each interior node (endpoints carry zero sine values).
    pub fn grid_weight(&self) -> f64 {
        1.0 / (self.points.len() as f64 + 1.0)
    }

    /// Copy of this space with a different noise spectrum.
    pub fn with_noise(&self, q: Vec<f64>) -> Result<Self> {
        let oversampling = self.points.len() / self.n_modes;
        Self::with_oversampling(self.n_modes, self.gamma, self.metric, q, oversampling)
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.n_modes {
            return Err(Error::DimensionMismatch {
                expected: self.n_modes,
                found: len,
            });
        }
        Ok(())
    }

    pub fn to_grid(&self, x: &StateVector) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        Ok(self.to_grid_unchecked(x.coeffs()))
    }

    pub(crate) fn to_grid_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.sine
            .chunks_exact(self.n_modes)
            .map(|row| row.iter().zip(x).map(|(b, c)| b * c).sum())
            .collect()
    }

    /// L² projection `x_i = m(g e_i)` by quadrature.
    pub fn from_grid(&self, g: &[f64]) -> Result<StateVector> {
        if g.len() != self.points.len() {
            return Err(Error::DimensionMismatch {
                expected: self.points.len(),
                found: g.len(),
            });
        }
        Ok(StateVector(self.project_grid(g)))
    }

    pub(crate) fn project_grid(&self, g: &[f64]) -> Vec<f64> {
        let w = self.grid_weight();
        let mut out = vec![0.0; self.n_modes];
        for (row, gj) in self.sine.chunks_exact(self.n_modes).zip(g) {
            let s = w * gj;
            for (o, b) in out.iter_mut().zip(row) {
                *o += s * b;
            }
        }
        out
    }

    /// `∂_x` of the field on all `M + 2` nodes, endpoints included.
    pub(crate) fn gradient_on_nodes(&self, x: &[f64]) -> Vec<f64> {
        self.dsine
            .chunks_exact(self.n_modes)
            .map(|row| row.iter().zip(x).map(|(b, c)| b * c).sum())
            .collect()
    }

    /// Trapezoidal weights on the `M + 2` gradient nodes.
    pub(crate) fn node_weight(&self, j: usize) -> f64 {
        let last = self.points.len() + 1;
        let w = self.grid_weight();
        if j == 0 || j == last {
            0.5 * w
        } else {
            w
        }
    }

    /// Coefficients of `div w` tested against each `e_i`:
    /// `-m(w e_i')` by integration by parts.
    pub(crate) fn divergence_from_nodes(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_modes];
        for (j, (row, wj)) in self.dsine.chunks_exact(self.n_modes).zip(w).enumerate() {
            let s = -self.node_weight(j) * wj;
            for (o, b) in out.iter_mut().zip(row) {
                *o += s * b;
            }
        }
        out
    }

    /// `m(f g)` for two fields sampled on the gradient nodes.
    pub(crate) fn node_integral(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter()
            .zip(g)
            .enumerate()
            .map(|(j, (a, b))| self.node_weight(j) * a * b)
            .sum()
    }

    /// `m(f g)` for two fields sampled on the interior grid.
    pub(crate) fn grid_integral(&self, f: &[f64], g: &[f64]) -> f64 {
        self.grid_weight() * f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn h_inner(&self, x: &StateVector, y: &StateVector) -> f64 {
        self.h_weights
            .iter()
            .zip(x.coeffs().iter().zip(y.coeffs()))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    }

    pub fn h_norm(&self, x: &StateVector) -> f64 {
        self.h_inner(x, x).sqrt()
    }

    pub(crate) fn h_norm_slice(&self, x: &[f64]) -> f64 {
        self.h_weights
            .iter()
            .zip(x)
            .map(|(w, a)| w * a * a)
            .sum::<f64>()
            .sqrt()
    }

    /// Intrinsic noise norm `‖Q^{-1}x‖_H`; `+∞` off the range of `Q`.
    pub fn q_norm(&self, x: &StateVector) -> f64 {
        self.q_norm_slice(x.coeffs())
    }

    pub(crate) fn q_norm_slice(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((w, q), a) in self.h_weights.iter().zip(&self.q).zip(x) {
            if *a == 0.0 {
                continue;
            }
            if *q == 0.0 {
                return f64::INFINITY;
            }
            acc += w * a * a / (q * q);
        }
        acc.sqrt()
    }

    /// `‖x‖_{L²(m)}` by Parseval.
    pub fn l2_norm(&self, x: &StateVector) -> f64 {
        x.coeffs().iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// `‖x‖_{L^p(m)}` by quadrature.
    pub fn lp_norm(&self, x: &StateVector, p: f64) -> f64 {
        lp_of_grid(&self.to_grid_unchecked(x.coeffs()), self.grid_weight(), p)
    }

    pub fn v_norm(&self, x: &StateVector, family: VFamily) -> Result<f64> {
        self.check_len(x.len())?;
        let grid = self.to_grid_unchecked(x.coeffs());
        Ok(self.v_norm_from_grid(x.coeffs(), &grid, family))
    }

    /// V-norm reusing grid values the caller already computed.
    pub(crate) fn v_norm_from_grid(&self, x: &[f64], grid: &[f64], family: VFamily) -> f64 {
        let w = self.grid_weight();
        match family {
            VFamily::Porous { r } => lp_of_grid(grid, w, 1.0 + r),
            VFamily::FastDiff { r } => lp_of_grid(grid, w, 1.0 + r) + self.h_norm_slice(x),
            VFamily::PLaplace { p } => {
                let grad = self.gradient_on_nodes(x);
                let gp: f64 = grad
                    .iter()
                    .enumerate()
                    .map(|(j, g)| self.node_weight(j) * g.abs().powf(p))
                    .sum();
                lp_of_grid(grid, w, p) + gp.powf(1.0 / p)
            }
        }
    }

    /// Coordinates in the H-orthonormal basis `e_i / √w_i`.
    pub fn to_h_coords(&self, x: &StateVector) -> Vec<f64> {
        x.coeffs()
            .iter()
            .zip(&self.h_weights)
            .map(|(c, w)| c * w.sqrt())
            .collect()
    }

    pub fn from_h_coords(&self, h: &[f64]) -> StateVector {
        StateVector(
            h.iter()
                .zip(&self.h_weights)
                .map(|(c, w)| c / w.sqrt())
                .collect(),
        )
    }

    /// `Σ q_i²` at truncation.
    pub fn q_hs_norm_sq(&self) -> f64 {
        self.q.iter().map(|q| q * q).sum()
    }
}

pub(crate) fn lp_of_grid(grid: &[f64], weight: f64, p: f64) -> f64 {
    let s: f64 = grid.iter().map(|g| g.abs().powf(p)).sum();
    (weight * s).powf(1.0 / p)
}
