//! Experiment orchestration and on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentKind, FamilyName, RunConfig};
use crate::error::Result;
use crate::experiments::{
    check_coupling_inequality, check_escape_bound, contraction_fit, fitted_k_prime, gluing_audit, holder_ratio_scan,
    ou_oracle, supermartingale_diagnostic, survival_curve, variance_estimate, BoundReport, Estimate,
    ExperimentResult, Series,
};
use crate::inequalities::{
    check_a1_double_prime, check_a1_prime, check_interpolation_q, check_scalar_mean_value,
    check_spectrum_condition, nash_gate_fastdiff, ConditionReport, InterpolationForm, NashReport,
    SpectrumCondition, SpectrumParams, SpectrumReport,
};
use crate::integrator::{run_paths, PathEnsembleRecord, RunMode};
use crate::spaces::StateVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub experiments: Vec<ExperimentResult>,
    pub conditions: Vec<ConditionReport>,
    pub spectrum: Vec<SpectrumReport>,
    pub nash: Option<NashReport>,
    pub bounds: Vec<BoundReport>,
    /// Names of path failures and of every pass flag that came out false.
    pub failed_checks: Vec<String>,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.failed_checks.is_empty()
    }

    /// Machine-readable failure report, `None` when everything passed.
    pub fn failure_report(&self) -> Option<String> {
        if self.passed() {
            return None;
        }
        let report = serde_json::json!({
            "status": "fail",
            "config_hash": self.config_hash,
            "failed_checks": self.failed_checks,
        });
        Some(serde_json::to_string_pretty(&report).expect("report serializes"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub threads: usize,
    pub wall_time_seconds: f64,
}

fn exact_series(name: &str, grid_label: &str, grid: &[f64], values: impl Iterator<Item = f64>) -> Series {
    Series {
        name: name.into(),
        grid_label: grid_label.into(),
        grid: grid.to_vec(),
        estimates: values.map(Estimate::exact).collect(),
    }
}

fn bound_series(report: &BoundReport, grid_label: &str) -> [Series; 2] {
    let mut est = report.series();
    est.grid_label = grid_label.into();
    let grid = est.grid.clone();
    let bound = exact_series(
        &format!("{}_bound", report.name),
        grid_label,
        &grid,
        report.rows.iter().map(|r| r.bound),
    );
    [est, bound]
}

struct Context<'a> {
    cfg: &'a RunConfig,
    hash: String,
    x: StateVector,
    y: StateVector,
    distance: f64,
}

/// Runs every configured experiment. Pure computation; nothing touches disk.
pub fn execute(cfg: &RunConfig) -> Result<Summary> {
    cfg.validate()?;
    let space = cfg.space()?;
    let (x, y) = cfg.initial_states(&space);
    let distance = space.h_norm(&(&x - &y));
    let ctx = Context {
        cfg,
        hash: cfg.config_hash(),
        x,
        y,
        distance,
    };
    let mut summary = Summary {
        config_hash: ctx.hash.clone(),
        experiments: Vec::new(),
        conditions: Vec::new(),
        spectrum: Vec::new(),
        nash: None,
        bounds: Vec::new(),
        failed_checks: Vec::new(),
    };

    let mut kinds = cfg.experiments.run.clone();
    kinds.sort();
    kinds.dedup();

    if kinds.iter().any(|k| k.needs_coupled_ensemble()) {
        let ens = coupled_ensemble(&ctx)?;
        if let Some(report) = ens.failure_report() {
            summary.failed_checks.push(format!("ensemble: {report}"));
        }
        coupled_experiments(&ctx, &kinds, &ens, &mut summary)?;
    }
    if kinds.contains(&ExperimentKind::Contraction) {
        summary.experiments.push(contraction(&ctx)?);
    }
    if kinds.contains(&ExperimentKind::Holder) {
        summary.experiments.push(holder(&ctx)?);
    }
    if kinds.contains(&ExperimentKind::Conditions) {
        conditions(&ctx, &mut summary)?;
    }

    for e in &summary.experiments {
        for (flag, ok) in &e.pass_flags {
            if !ok {
                summary.failed_checks.push(format!("{}/{}", e.experiment_id, flag));
            }
        }
    }
    Ok(summary)
}

fn coupled_ensemble(ctx: &Context) -> Result<PathEnsembleRecord> {
    let cfg = ctx.cfg;
    let space = cfg.space()?;
    let mut sim = cfg.sim_config()?;
    if cfg.has(ExperimentKind::EscapeBound) && ctx.distance > 0.0 {
        sim.delta_levels = cfg.experiments.delta_multiples.iter().map(|k| k * ctx.distance).collect();
    }
    run_paths(
        &space,
        &cfg.model_spec(),
        Some(&cfg.coupling_params()?),
        &sim,
        RunMode::Coupled,
        &ctx.x,
        &ctx.y,
    )
}

fn coupled_experiments(
    ctx: &Context,
    kinds: &[ExperimentKind],
    ens: &PathEnsembleRecord,
    summary: &mut Summary,
) -> Result<()> {
    let cfg = ctx.cfg;
    let k_prime = cfg
        .experiments
        .k_prime
        .unwrap_or_else(|| fitted_k_prime(&cfg.model_spec(), ens));
    let times = ens.checkpoint_times.clone();
    for kind in kinds.iter().filter(|k| k.needs_coupled_ensemble()) {
        let mut res = ExperimentResult::new(kind.id(), &ctx.hash);
        res.scalars.insert("paths".into(), ens.paths.len() as f64);
        match kind {
            ExperimentKind::Survival => {
                res.series.push(survival_curve(ens)?);
                let hit = ens.paths.iter().filter(|p| p.tau_n.is_some()).count();
                res.scalars.insert("tau_n_hits".into(), hit as f64);
            }
            ExperimentKind::CouplingInequality => {
                let report = check_coupling_inequality(ens)?;
                res.series.extend(bound_series(&report, "checkpoint_time"));
                res.scalars.insert("osc_f".into(), ens.osc_f);
                res.scalars.insert("lip_f".into(), ens.lip_f);
                res.pass_flags.insert("bound".into(), report.pass);
                summary.bounds.push(report);
            }
            ExperimentKind::EscapeBound => {
                res.scalars.insert("k_prime".into(), k_prime);
                res.scalars.insert("initial_distance".into(), ctx.distance);
                let mut per_level: Vec<Vec<Estimate>> = vec![Vec::new(); ens.delta_levels.len()];
                let mut pass = true;
                for &t in &times {
                    let mut report = check_escape_bound(ens, ctx.distance, t, k_prime)?;
                    report.name = format!("escape_bound_t{t}");
                    for (j, row) in report.rows.iter().enumerate() {
                        per_level[j].push(row.estimate);
                    }
                    pass &= report.pass;
                    summary.bounds.push(report);
                }
                for (j, estimates) in per_level.into_iter().enumerate() {
                    res.series.push(Series {
                        name: format!("escape_delta{}", j + 1),
                        grid_label: "checkpoint_time".into(),
                        grid: times.clone(),
                        estimates,
                    });
                    res.scalars.insert(format!("delta{}", j + 1), ens.delta_levels[j]);
                }
                res.pass_flags.insert("bound".into(), pass);
            }
            ExperimentKind::Supermartingale => {
                let report = supermartingale_diagnostic(ens, cfg.g_spec(), k_prime)?;
                res.scalars.insert("k_prime".into(), k_prime);
                res.series.push(report.series);
                res.pass_flags.insert("nonincreasing".into(), report.nonincreasing);
            }
            ExperimentKind::Gluing => {
                let audit = gluing_audit(ens);
                res.scalars.insert("glued_paths".into(), audit.glued_paths as f64);
                res.scalars.insert("violations".into(), audit.violations as f64);
                res.pass_flags.insert("glued_stay_equal".into(), audit.violations == 0);
            }
            ExperimentKind::OuOracle => {
                let space = cfg.space()?;
                let mut vx = Vec::new();
                let mut vy = Vec::new();
                let mut oracle = Vec::new();
                for (k, &t) in times.iter().enumerate() {
                    vx.push(variance_estimate(&ens.column(k, |c| c.x_mode1))?);
                    vy.push(variance_estimate(&ens.column(k, |c| c.y_mode1))?);
                    oracle.push(ou_oracle(&space, &ctx.x, t)?[0].variance);
                }
                let last = times.len() - 1;
                let within = |e: &Estimate| (e.value - oracle[last]).abs() <= 3.0 * e.std_err;
                res.pass_flags.insert("x_variance".into(), within(&vx[last]));
                res.pass_flags.insert("y_variance".into(), within(&vy[last]));
                res.scalars.insert("oracle_variance".into(), oracle[last]);
                res.series.push(Series {
                    name: "x_mode1_variance".into(),
                    grid_label: "checkpoint_time".into(),
                    grid: times.clone(),
                    estimates: vx,
                });
                res.series.push(Series {
                    name: "y_mode1_variance".into(),
                    grid_label: "checkpoint_time".into(),
                    grid: times.clone(),
                    estimates: vy,
                });
                res.series
                    .push(exact_series("oracle_variance", "checkpoint_time", &times, oracle.into_iter()));
            }
            _ => unreachable!("filtered to coupled experiments"),
        }
        summary.experiments.push(res);
    }
    Ok(())
}

fn contraction(ctx: &Context) -> Result<ExperimentResult> {
    let cfg = ctx.cfg;
    let space = cfg.space()?;
    let ens = run_paths(
        &space,
        &cfg.model_spec(),
        None,
        &cfg.sim_config()?,
        RunMode::Synchronous,
        &ctx.x,
        &ctx.y,
    )?;
    let report = contraction_fit(&ens, cfg.experiments.fit_t_min)?;
    let mut res = ExperimentResult::new("contraction", &ctx.hash);
    res.fitted_rates.insert("log_mean_sq_distance".into(), report.slope);
    res.scalars.insert("fit_points".into(), report.points as f64);
    if let Some(expected) = cfg.experiments.expected_rate {
        res.pass_flags
            .insert("matches_expected".into(), report.matches(expected, cfg.experiments.rate_tolerance));
    }
    if let Some(bound) = cfg.experiments.rate_bound {
        res.pass_flags.insert("decays_at_least".into(), report.decays_at_least(bound));
    }
    res.series.push(report.series);
    Ok(res)
}

fn holder(ctx: &Context) -> Result<ExperimentResult> {
    let cfg = ctx.cfg;
    let space = cfg.space()?;
    let mut dir = vec![0.0; space.n_modes()];
    dir[cfg.experiments.holder_mode - 1] = 1.0;
    let direction = space.from_h_coords(&dir);
    let scan = holder_ratio_scan(
        &space,
        &cfg.model_spec(),
        &cfg.coupling_params()?,
        &cfg.sim_config()?,
        &ctx.x,
        &direction,
        &cfg.experiments.holder_eps,
    )?;
    let mut res = ExperimentResult::new("holder", &ctx.hash);
    if let Some(e) = scan.exponent {
        res.scalars.insert("exponent".into(), e);
    }
    let agree = scan.rows.iter().filter(|r| r.agree).count();
    res.scalars.insert("crn_coupled_agreements".into(), agree as f64);
    res.series.push(scan.series());
    Ok(res)
}

fn conditions(ctx: &Context, summary: &mut Summary) -> Result<()> {
    let cfg = ctx.cfg;
    let space = cfg.space()?;
    let model = cfg.model_spec();
    let kappa = cfg.experiments.kappa.expect("validated");
    let samples = cfg.experiments.condition_samples;
    let seed = cfg.sim.seed;
    let r = cfg.r();
    let (gamma, delta) = (cfg.space.gamma, cfg.space.delta);
    let mut res = ExperimentResult::new("conditions", &ctx.hash);

    let mut reports = Vec::new();
    match cfg.model.family {
        FamilyName::Porous => {
            reports.push(check_a1_prime(&space, &model, kappa, samples, seed, None)?);
            reports.push(check_interpolation_q(&space, kappa, r, InterpolationForm::Porous, samples, seed)?);
        }
        FamilyName::Plaplace => {
            reports.push(check_a1_prime(&space, &model, kappa, samples, seed, None)?);
        }
        FamilyName::FastDiffusion => {
            reports.push(check_a1_double_prime(&space, &model, kappa, samples, seed, None)?);
            reports.push(check_interpolation_q(
                &space,
                kappa,
                r,
                InterpolationForm::FastDiffusion,
                samples,
                seed,
            )?);
            reports.push(check_scalar_mean_value(r, samples, seed)?);
            let nash = nash_gate_fastdiff(r, gamma, 1.0, delta, kappa)?;
            res.pass_flags.insert("nash".into(), nash.passes && nash.epsilon_ok.unwrap_or(true));
            summary.nash = Some(nash);
        }
    }
    for rep in &reports {
        res.pass_flags.insert(rep.condition_id.clone(), rep.passed());
        res.scalars
            .insert(format!("{}_violations", rep.condition_id), rep.violation_count as f64);
    }

    let mut params = SpectrumParams::new(gamma, delta);
    params.r = r;
    params.p = cfg.model.p.unwrap_or(1.0 + r);
    params.kappa = kappa;
    params.coeffs = cfg.coeff_scheme();
    params.epsilon = cfg.experiments.epsilon.unwrap_or(match cfg.model.family {
        FamilyName::FastDiffusion => (2.0 * gamma - kappa * delta) / (2.0 * gamma),
        _ => 0.5,
    });
    for which in [
        SpectrumCondition::StarE,
        SpectrumCondition::StarStarE,
        SpectrumCondition::SB,
        SpectrumCondition::EI,
    ] {
        let rep = check_spectrum_condition(which, &params, cfg.experiments.scan_limit)?;
        res.pass_flags.insert(format!("{}_scan_agrees", rep.condition), rep.agrees());
        res.scalars.insert(format!("{}_exponent", rep.condition), rep.exponent);
        summary.spectrum.push(rep);
    }
    summary.conditions.extend(reports);
    summary.experiments.push(res);
    Ok(())
}

/// Formats a value with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn series_csv(s: &Series) -> String {
    let mut out = format!("{},estimate,std_err\n", s.grid_label);
    for (g, e) in s.grid.iter().zip(&s.estimates) {
        out.push_str(&format!("{},{},{}\n", fmt17(*g), fmt17(e.value), fmt17(e.std_err)));
    }
    out
}

/// Writes `summary.json`, the series CSVs and `manifest.json` under
/// `root/<config_hash>/`, returning that directory.
pub fn write_artifacts(
    cfg: &RunConfig,
    summary: &Summary,
    root: &Path,
    threads: usize,
    wall_time_seconds: f64,
) -> Result<PathBuf> {
    let dir = root.join(&summary.config_hash);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    if cfg.output.csv {
        for e in &summary.experiments {
            for s in &e.series {
                let name = if e.series.len() == 1 {
                    format!("{}.csv", e.experiment_id)
                } else {
                    format!("{}__{}.csv", e.experiment_id, s.name)
                };
                fs::write(dir.join(name), series_csv(s))?;
            }
        }
    }
    let manifest = Manifest {
        config: cfg.clone(),
        config_hash: summary.config_hash.clone(),
        seed: cfg.sim.seed,
        versions: BTreeMap::from([
            ("spde-reflect".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]),
        threads,
        wall_time_seconds,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let failure = dir.join("failure.json");
    match summary.failure_report() {
        Some(report) => fs::write(failure, report + "\n")?,
        None if failure.exists() => fs::remove_file(failure)?,
        None => {}
    }
    Ok(dir)
}
