//! Monte Carlo estimators built on path ensembles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coupling::CouplingParams;
use crate::error::{invalid, Error, Result};
use crate::integrator::{run_paths, PathEnsembleRecord, RunMode, SimConfig};
use crate::models::ModelSpec;
use crate::spaces::{SpectralSpace, StateVector};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate {
            value,
            std_err: 0.0,
        }
    }
}

/// Sample mean with its standard error.
pub fn mean_estimate(values: &[f64]) -> Result<Estimate> {
    let m = values.len();
    if m == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    if m == 1 {
        return Ok(Estimate::exact(mean));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    Ok(Estimate {
        value: mean,
        std_err: (var / m as f64).sqrt(),
    })
}

/// Unbiased sample variance; the standard error uses the fourth central moment.
pub fn variance_estimate(values: &[f64]) -> Result<Estimate> {
    let m = values.len();
    if m < 2 {
        return Err(Error::EmptyEnsemble);
    }
    let mf = m as f64;
    let mean = values.iter().sum::<f64>() / mf;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / mf;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / mf;
    Ok(Estimate {
        value: m2 * mf / (mf - 1.0),
        std_err: ((m4 - m2 * m2).max(0.0) / mf).sqrt(),
    })
}

/// Named series of estimates over a grid (checkpoint times or parameters).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub grid_label: String,
    pub grid: Vec<f64>,
    pub estimates: Vec<Estimate>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedRate {
    pub rate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub experiment_id: String,
    pub config_hash: String,
    pub series: Vec<Series>,
    pub fitted_rates: BTreeMap<String, FittedRate>,
    pub scalars: BTreeMap<String, f64>,
    pub pass_flags: BTreeMap<String, bool>,
}

impl ExperimentResult {
    pub fn new(id: &str, config_hash: &str) -> Self {
        ExperimentResult {
            experiment_id: id.to_string(),
            config_hash: config_hash.to_string(),
            ..Default::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.pass_flags.values().all(|&p| p)
    }
}

fn require_paths(ens: &PathEnsembleRecord) -> Result<()> {
    if ens.paths.is_empty() {
        Err(Error::EmptyEnsemble)
    } else {
        Ok(())
    }
}

fn require_pair(ens: &PathEnsembleRecord) -> Result<()> {
    require_paths(ens)?;
    if ens.mode == RunMode::Single {
        return Err(Error::Degenerate("estimator needs a two-component ensemble".into()));
    }
    Ok(())
}

/// `P̂(τ_n > t)` per checkpoint with binomial standard errors.
pub fn survival_curve(ens: &PathEnsembleRecord) -> Result<Series> {
    require_pair(ens)?;
    if ens.threshold.is_none() {
        return Err(Error::Degenerate("survival needs a coupled ensemble".into()));
    }
    let m = ens.paths.len() as f64;
    let estimates = ens
        .checkpoint_times
        .iter()
        .map(|&t| {
            let alive = ens
                .paths
                .iter()
                .filter(|p| p.tau_n.is_none_or(|tn| tn > t))
                .count() as f64;
            let p = alive / m;
            Estimate {
                value: p,
                std_err: (p * (1.0 - p) / m).sqrt(),
            }
        })
        .collect();
    Ok(Series {
        name: "survival".into(),
        grid_label: "checkpoint_time".into(),
        grid: ens.checkpoint_times.clone(),
        estimates,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub grid_value: f64,
    pub estimate: Estimate,
    pub bound: f64,
    /// `bound + allowance · SE - estimate`
    pub margin: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub name: String,
    pub rows: Vec<BoundRow>,
    pub pass: bool,
}

impl BoundReport {
    fn from_rows(name: &str, rows: Vec<BoundRow>) -> Self {
        let pass = rows.iter().all(|r| r.pass);
        BoundReport {
            name: name.into(),
            rows,
            pass,
        }
    }

    pub fn series(&self) -> Series {
        Series {
            name: self.name.clone(),
            grid_label: "grid_value".into(),
            grid: self.rows.iter().map(|r| r.grid_value).collect(),
            estimates: self.rows.iter().map(|r| r.estimate).collect(),
        }
    }
}

/// `P(τ_{n,δ} ≤ τ_n ∧ t) ≤ ‖x - y‖ e^{K't} / δ`, per recorded escape level,
/// with an allowance of three standard errors.
pub fn check_escape_bound(
    ens: &PathEnsembleRecord,
    initial_distance: f64,
    t: f64,
    k_prime: f64,
) -> Result<BoundReport> {
    require_pair(ens)?;
    if ens.delta_levels.is_empty() {
        return Err(Error::Degenerate("no escape levels were recorded".into()));
    }
    let m = ens.paths.len() as f64;
    let rows = ens
        .delta_levels
        .iter()
        .enumerate()
        .map(|(j, &delta)| {
            let hits = ens
                .paths
                .iter()
                .filter(|p| {
                    p.tau_delta[j].is_some_and(|td| td <= t && p.tau_n.is_none_or(|tn| td <= tn))
                })
                .count() as f64;
            let p = hits / m;
            let se = (p * (1.0 - p) / m).sqrt();
            let bound = initial_distance * (k_prime * t).exp() / delta;
            let margin = bound + 3.0 * se - p;
            BoundRow {
                grid_value: delta,
                estimate: Estimate { value: p, std_err: se },
                bound,
                margin,
                pass: margin >= 0.0,
            }
        })
        .collect();
    Ok(BoundReport::from_rows("escape_bound", rows))
}

/// `|P̂_t f(x) - P̂_t f(y)| ≤ osc(f) P̂(τ_n > t) + L(f) Ê[‖X_t - Y_t‖; τ_n ≤ t]`, allowing four
/// combined standard errors, at every checkpoint.
pub fn check_coupling_inequality(ens: &PathEnsembleRecord) -> Result<BoundReport> {
    let surv = survival_curve(ens)?;
    let rows = ens
        .checkpoint_times
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let diffs = ens.column(k, |c| c.f_x - c.f_y);
            let d = mean_estimate(&diffs)?;
            let s = surv.estimates[k];
            // After τ_n the pair is within 1/n but may not have glued yet;
            // that residual is controlled by L(f) E[‖X_t - Y_t‖; τ_n ≤ t].
            let tail: Vec<f64> = ens
                .paths
                .iter()
                .map(|p| match p.tau_n {
                    Some(tau) if tau <= t => ens.lip_f * p.checkpoints[k].diff_h,
                    _ => 0.0,
                })
                .collect();
            let tail = mean_estimate(&tail)?;
            let combined = (d.std_err.powi(2) + (ens.osc_f * s.std_err).powi(2) + tail.std_err.powi(2)).sqrt();
            let bound = ens.osc_f * s.value + tail.value;
            let lhs = d.value.abs();
            let margin = bound + 4.0 * combined - lhs;
            Ok(BoundRow {
                grid_value: t,
                estimate: Estimate {
                    value: lhs,
                    std_err: d.std_err,
                },
                bound,
                margin,
                pass: margin >= 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BoundReport::from_rows("coupling_inequality", rows))
}

/// Test functions of the supermartingale arguments.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GSpec {
    Identity,
    /// `s - s^{1+ε} / (4δ^ε)`, increasing on `[0, δ]`.
    PowerCorrection { epsilon: f64, delta: f64 },
    /// `∫₀ˢ log(e + 1/z)^a dz`; `a = r/(1+r)` or `a = 1/2`.
    LogIntegral { power: f64 },
    /// `s^ε`
    Power { epsilon: f64 },
    /// `1 - e^{-λ s^ε} + γ s^ε`
    ExpPower { lambda: f64, epsilon: f64, gamma: f64 },
}

impl GSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &'static str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(invalid(name, v, "must lie in (0, 1)"))
            }
        };
        match *self {
            GSpec::Identity => Ok(()),
            GSpec::PowerCorrection { epsilon, delta } => {
                unit("epsilon", epsilon)?;
                if delta > 0.0 {
                    Ok(())
                } else {
                    Err(invalid("delta", delta, "must be positive"))
                }
            }
            GSpec::LogIntegral { power } => {
                if power > 0.0 && power <= 1.0 {
                    Ok(())
                } else {
                    Err(invalid("power", power, "must lie in (0, 1]"))
                }
            }
            GSpec::Power { epsilon } => unit("epsilon", epsilon),
            GSpec::ExpPower {
                lambda,
                epsilon,
                gamma,
            } => {
                unit("epsilon", epsilon)?;
                if lambda > 0.0 && gamma >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::ParameterDomain(
                        "need lambda > 0 and gamma >= 0".into(),
                    ))
                }
            }
        }
    }

    pub fn eval(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        match *self {
            GSpec::Identity => s,
            GSpec::PowerCorrection { epsilon, delta } => {
                s - s.powf(1.0 + epsilon) / (4.0 * delta.powf(epsilon))
            }
            GSpec::LogIntegral { power } => log_integral(s, power),
            GSpec::Power { epsilon } => s.powf(epsilon),
            GSpec::ExpPower {
                lambda,
                epsilon,
                gamma,
            } => {
                let se = s.powf(epsilon);
                -(-lambda * se).exp_m1() + gamma * se
            }
        }
    }
}

/// `∫₀ˢ log(e + 1/z)^a dz` by Simpson's rule after `z = s w⁴`, which smooths
/// the logarithmic endpoint singularity.
fn log_integral(s: f64, a: f64) -> f64 {
    const PANELS: usize = 64;
    let e = std::f64::consts::E;
    let f = |w: f64| {
        if w == 0.0 {
            0.0
        } else {
            let w3 = w * w * w;
            4.0 * w3 * (e + 1.0 / (s * w3 * w)).ln().powf(a)
        }
    };
    let h = 1.0 / PANELS as f64;
    let mut acc = f(0.0) + f(1.0);
    for k in 1..PANELS {
        let c = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += c * f(k as f64 * h);
    }
    s * acc * h / 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupermartingaleReport {
    pub series: Series,
    /// Mean increment between consecutive checkpoints with its paired SE.
    pub increments: Vec<Estimate>,
    pub nonincreasing: bool,
}

/// `t ↦ E e^{-K't} g(‖X_{t∧τ_n} - Y_{t∧τ_n}‖)` and whether every paired
/// increment is at most three standard errors above zero.
pub fn supermartingale_diagnostic(
    ens: &PathEnsembleRecord,
    g: GSpec,
    k_prime: f64,
) -> Result<SupermartingaleReport> {
    require_pair(ens)?;
    g.validate()?;
    let per_path: Vec<Vec<f64>> = ens
        .paths
        .iter()
        .map(|p| {
            p.checkpoints
                .iter()
                .map(|c| (-k_prime * c.time).exp() * g.eval(c.diff_stopped))
                .collect()
        })
        .collect();
    let ncp = ens.checkpoint_times.len();
    let mut estimates = Vec::with_capacity(ncp);
    let mut increments = Vec::with_capacity(ncp.saturating_sub(1));
    for k in 0..ncp {
        let col: Vec<f64> = per_path.iter().map(|v| v[k]).collect();
        estimates.push(mean_estimate(&col)?);
        if k > 0 {
            let inc: Vec<f64> = per_path.iter().map(|v| v[k] - v[k - 1]).collect();
            increments.push(mean_estimate(&inc)?);
        }
    }
    let nonincreasing = increments.iter().all(|d| d.value <= 3.0 * d.std_err);
    Ok(SupermartingaleReport {
        series: Series {
            name: "supermartingale".into(),
            grid_label: "checkpoint_time".into(),
            grid: ens.checkpoint_times.clone(),
            estimates,
        },
        increments,
        nonincreasing,
    })
}

/// `K' = K + max I_n(Δ)/‖Δ‖` along the simulated paths before `τ_n`.
pub fn fitted_k_prime(model: &ModelSpec, ens: &PathEnsembleRecord) -> f64 {
    let sup = ens
        .paths
        .iter()
        .map(|p| p.max_i_n_ratio)
        .fold(0.0f64, f64::max);
    model.monotonicity_k() + sup
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GluingReport {
    pub glued_paths: usize,
    pub violations: usize,
}

/// Counts glued paths whose components differ at a later checkpoint.
pub fn gluing_audit(ens: &PathEnsembleRecord) -> GluingReport {
    let mut glued_paths = 0;
    let mut violations = 0;
    for p in &ens.paths {
        if let Some(first) = p.checkpoints.iter().position(|c| c.coupled) {
            glued_paths += 1;
            if p.checkpoints[first..].iter().any(|c| !c.coupled || !c.identical) {
                violations += 1;
            }
        }
    }
    GluingReport {
        glued_paths,
        violations,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub series: Series,
    pub slope: FittedRate,
    /// Number of checkpoints used by the fit.
    pub points: usize,
}

impl ContractionReport {
    /// `|slope - expected| ≤ rel_tol · |expected|`
    pub fn matches(&self, expected: f64, rel_tol: f64) -> bool {
        (self.slope.rate - expected).abs() <= rel_tol * expected.abs()
    }

    /// Slope not significantly above `bound`: the lower confidence limit is at most `bound`.
    pub fn decays_at_least(&self, bound: f64) -> bool {
        self.slope.ci_low <= bound
    }
}

/// Least-squares slope of `log E‖X_t(x) - X_t(y)‖²` against `t` for
/// checkpoints with `t ≥ t_min`, weighted by the delta-method variance of the
/// logarithm when the ensemble is random and unweighted otherwise. The interval
/// is a normal 95% interval.
pub fn contraction_fit(ens: &PathEnsembleRecord, t_min: f64) -> Result<ContractionReport> {
    require_pair(ens)?;
    let first = ens.column(0, |c| c.diff_h);
    if first.iter().all(|&d| d == 0.0) {
        return Err(Error::Degenerate("x = y: nothing to contract".into()));
    }
    let mut grid = Vec::new();
    let mut estimates = Vec::new();
    for (k, &t) in ens.checkpoint_times.iter().enumerate() {
        let sq = ens.column(k, |c| c.diff_h * c.diff_h);
        let e = mean_estimate(&sq)?;
        grid.push(t);
        estimates.push(e);
    }
    let pts: Vec<(f64, f64, f64)> = grid
        .iter()
        .zip(&estimates)
        .filter(|(t, e)| **t >= t_min && e.value > 0.0)
        .map(|(t, e)| (*t, e.value.ln(), e.std_err / e.value))
        .collect();
    if pts.len() < 3 {
        return Err(Error::Degenerate("fewer than three usable checkpoints".into()));
    }
    let weighted = pts.iter().all(|p| p.2 > 0.0);
    let w: Vec<f64> = pts
        .iter()
        .map(|p| if weighted { 1.0 / (p.2 * p.2) } else { 1.0 })
        .collect();
    let sw: f64 = w.iter().sum();
    let tb = pts.iter().zip(&w).map(|(p, w)| w * p.0).sum::<f64>() / sw;
    let yb = pts.iter().zip(&w).map(|(p, w)| w * p.1).sum::<f64>() / sw;
    let sxx: f64 = pts.iter().zip(&w).map(|(p, w)| w * (p.0 - tb).powi(2)).sum();
    let sxy: f64 = pts.iter().zip(&w).map(|(p, w)| w * (p.0 - tb) * (p.1 - yb)).sum();
    let slope = sxy / sxx;
    let resid: f64 = pts
        .iter()
        .zip(&w)
        .map(|(p, w)| w * (p.1 - yb - slope * (p.0 - tb)).powi(2))
        .sum();
    let dof = (pts.len() - 2) as f64;
    // Weighted: known variances, inflated by the reduced chi-square when it exceeds one.
    let scale = if weighted {
        (resid / dof).max(1.0)
    } else {
        resid / dof
    };
    let se = (scale / sxx).sqrt();
    Ok(ContractionReport {
        series: Series {
            name: "mean_sq_difference".into(),
            grid_label: "checkpoint_time".into(),
            grid,
            estimates,
        },
        slope: FittedRate {
            rate: slope,
            ci_low: slope - 1.96 * se,
            ci_high: slope + 1.96 * se,
        },
        points: pts.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Per-mode moments of the linear model `dX = -λ X dt + Q dW` in H-coordinates:
/// mean `e^{-λ_i t} x_i(0)`, variance `q_i²(1 - e^{-2λ_i t})/(2λ_i)`.
pub fn ou_oracle(space: &SpectralSpace, x0: &StateVector, t: f64) -> Result<Vec<OuMoments>> {
    if !(t >= 0.0) {
        return Err(invalid("t", t, "must be nonnegative"));
    }
    if x0.len() != space.n_modes() {
        return Err(Error::DimensionMismatch {
            expected: space.n_modes(),
            found: x0.len(),
        });
    }
    let h = space.to_h_coords(x0);
    Ok(space
        .lambdas()
        .iter()
        .zip(space.q_coeffs())
        .zip(h)
        .map(|((l, q), x)| OuMoments {
            mean: (-l * t).exp() * x,
            variance: if t.is_infinite() {
                q * q / (2.0 * l)
            } else {
                -q * q * (-2.0 * l * t).exp_m1() / (2.0 * l)
            },
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderRow {
    pub epsilon: f64,
    /// Common-random-number estimate of `P_t f(x) - P_t f(x + ε d)`.
    pub crn: Estimate,
    /// Same quantity from the coupled ensemble.
    pub coupled: Estimate,
    pub agree: bool,
    pub conclusive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderScan {
    pub rows: Vec<HolderRow>,
    /// Log-log slope of `|difference|` against `ε` over conclusive rows.
    pub exponent: Option<f64>,
}

impl HolderScan {
    pub fn series(&self) -> Series {
        Series {
            name: "holder_scan".into(),
            grid_label: "epsilon".into(),
            grid: self.rows.iter().map(|r| r.epsilon).collect(),
            estimates: self
                .rows
                .iter()
                .map(|r| Estimate {
                    value: r.crn.value.abs(),
                    std_err: r.crn.std_err,
                })
                .collect(),
        }
    }
}

/// Diagnostic scan of `|P_t f(x) - P_t f(x + ε d)|` over `ε`, using the last
/// checkpoint of `config` as `t`.
pub fn holder_ratio_scan(
    space: &SpectralSpace,
    model: &ModelSpec,
    params: &CouplingParams,
    config: &SimConfig,
    x: &StateVector,
    direction: &StateVector,
    eps_grid: &[f64],
) -> Result<HolderScan> {
    if eps_grid.iter().any(|e| !(*e >= 0.0)) {
        return Err(invalid("epsilon", f64::NAN, "grid values must be nonnegative"));
    }
    let base = run_paths(space, model, None, config, RunMode::Single, x, x)?;
    let last = config.checkpoint_times.len() - 1;
    let fx = base.column(last, |c| c.f_x);
    let mut rows = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let mut y = x.clone();
        y.axpy(eps, direction);
        let shifted = run_paths(space, model, None, config, RunMode::Single, &y, &y)?;
        if shifted.paths.len() != base.paths.len() {
            return Err(Error::Degenerate("path failures break the CRN pairing".into()));
        }
        let fy = shifted.column(last, |c| c.f_x);
        let diffs: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| a - b).collect();
        let crn = mean_estimate(&diffs)?;
        let coupled = if eps == 0.0 {
            Estimate::exact(0.0)
        } else {
            let ens = run_paths(space, model, Some(params), config, RunMode::Coupled, x, &y)?;
            mean_estimate(&ens.column(last, |c| c.f_x - c.f_y))?
        };
        let combined = (crn.std_err.powi(2) + coupled.std_err.powi(2)).sqrt();
        rows.push(HolderRow {
            epsilon: eps,
            crn,
            coupled,
            agree: (crn.value - coupled.value).abs() <= 3.0 * combined,
            conclusive: eps > 0.0 && crn.value.abs() > 2.0 * crn.std_err,
        });
    }
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.conclusive)
        .map(|r| (r.epsilon.ln(), r.crn.value.abs().ln()))
        .collect();
    let exponent = (pts.len() >= 2).then(|| {
        let n = pts.len() as f64;
        let xb = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let yb = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxx: f64 = pts.iter().map(|p| (p.0 - xb).powi(2)).sum();
        let sxy: f64 = pts.iter().map(|p| (p.0 - xb) * (p.1 - yb)).sum();
        sxy / sxx
    });
    Ok(HolderScan { rows, exponent })
}

/// `E (∫₀ᵗ ‖X_s‖_V^{1+r} ds)^p` at the last checkpoint.
pub fn v_integral_moment(ens: &PathEnsembleRecord, p: f64) -> Result<Estimate> {
    require_paths(ens)?;
    let last = ens.checkpoint_times.len() - 1;
    let vals = ens.column(last, |c| c.v_integral.powf(p));
    if vals.iter().any(|v| v.is_nan()) {
        return Err(Error::Degenerate("the V-norm integral was not tracked".into()));
    }
    mean_estimate(&vals)
}
