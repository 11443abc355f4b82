//! Run configuration: flat TOML sections, unknown keys rejected, every
//! documented default filled in before hashing.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coupling::CouplingParams;
use crate::error::{Error, Result};
use crate::experiments::GSpec;
use crate::integrator::{Scheme, SimConfig, TestFunctional};
use crate::models::{Beta, DiffusionSpec, Family, ModelSpec};
use crate::spaces::{CoeffScheme, HMetric, SpectralSpace, StateVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    Porous,
    Plaplace,
    FastDiffusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: FamilyName,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub p: Option<f64>,
    #[serde(default = "one")]
    pub psi_scale: f64,
    #[serde(default)]
    pub phi_slope: f64,
    /// Constant `β` of the fast-diffusion drift.
    #[serde(default)]
    pub beta: f64,
    /// Lipschitz constant of the diagonal diffusion; 0 means additive noise only.
    #[serde(default)]
    pub c0: f64,
    #[serde(default = "unit_base")]
    pub base: Vec<f64>,
    #[serde(default)]
    pub theta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    pub modes: usize,
    pub gamma: f64,
    pub delta: f64,
    #[serde(default = "one")]
    pub noise_scale: f64,
    /// Nonzero selects `c_i = scale (1 + amplitude sin i)`.
    #[serde(default)]
    pub noise_amplitude: f64,
    /// Defaults to `l2` for p-Laplace and `dual` otherwise.
    #[serde(default)]
    pub metric: Option<HMetric>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    #[serde(default = "default_n")]
    pub n: u32,
    #[serde(default = "default_glue")]
    pub glue_eps: f64,
}

impl Default for CouplingSection {
    fn default() -> Self {
        CouplingSection {
            n: default_n(),
            glue_eps: default_glue(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Initial states as leading H-coordinates; missing modes are zero.
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    #[serde(default = "one_usize")]
    pub functional_mode: usize,
    #[serde(default = "one")]
    pub functional_scale: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Survival,
    CouplingInequality,
    EscapeBound,
    Supermartingale,
    Gluing,
    Contraction,
    OuOracle,
    Holder,
    Conditions,
}

impl ExperimentKind {
    pub fn id(&self) -> &'static str {
        match self {
            ExperimentKind::Survival => "survival",
            ExperimentKind::CouplingInequality => "coupling_inequality",
            ExperimentKind::EscapeBound => "escape_bound",
            ExperimentKind::Supermartingale => "supermartingale",
            ExperimentKind::Gluing => "gluing",
            ExperimentKind::Contraction => "contraction",
            ExperimentKind::OuOracle => "ou_oracle",
            ExperimentKind::Holder => "holder",
            ExperimentKind::Conditions => "conditions",
        }
    }

    /// Experiments that consume the reflection-coupled ensemble.
    pub fn needs_coupled_ensemble(&self) -> bool {
        matches!(
            self,
            ExperimentKind::Survival
                | ExperimentKind::CouplingInequality
                | ExperimentKind::EscapeBound
                | ExperimentKind::Supermartingale
                | ExperimentKind::Gluing
                | ExperimentKind::OuOracle
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GName {
    Identity,
    PowerCorrection,
    LogIntegral,
    Power,
    ExpPower,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_experiments")]
    pub run: Vec<ExperimentKind>,
    /// Escape levels as multiples of `‖x0 - y0‖`.
    #[serde(default = "default_multiples")]
    pub delta_multiples: Vec<f64>,
    /// Overrides the path-fitted `K'`.
    #[serde(default)]
    pub k_prime: Option<f64>,
    #[serde(default = "default_g")]
    pub g: GName,
    #[serde(default = "half")]
    pub g_epsilon: f64,
    #[serde(default = "one")]
    pub g_delta: f64,
    #[serde(default = "one")]
    pub g_lambda: f64,
    #[serde(default = "one")]
    pub g_gamma: f64,
    #[serde(default = "half")]
    pub g_power: f64,
    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_samples")]
    pub condition_samples: usize,
    #[serde(default = "default_scan")]
    pub scan_limit: usize,
    #[serde(default)]
    pub fit_t_min: f64,
    /// Expected contraction slope; the fit must match it within `rate_tolerance`.
    #[serde(default)]
    pub expected_rate: Option<f64>,
    #[serde(default = "default_rate_tol")]
    pub rate_tolerance: f64,
    /// The fitted slope must not lie significantly above this bound.
    #[serde(default)]
    pub rate_bound: Option<f64>,
    #[serde(default)]
    pub holder_eps: Vec<f64>,
    #[serde(default = "one_usize")]
    pub holder_mode: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults deserialize")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default = "yes")]
    pub csv: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: default_dir(),
            csv: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub space: SpaceSection,
    #[serde(default)]
    pub coupling: CouplingSection,
    pub sim: SimSection,
    #[serde(default)]
    pub experiments: ExperimentSection,
    #[serde(default)]
    pub output: OutputSection,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn one_usize() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn unit_base() -> Vec<f64> {
    vec![1.0]
}
fn default_n() -> u32 {
    10
}
fn default_glue() -> f64 {
    1e-12
}
fn default_checkpoints() -> usize {
    10
}
fn default_scheme() -> Scheme {
    Scheme::Exponential
}
fn default_experiments() -> Vec<ExperimentKind> {
    vec![
        ExperimentKind::Survival,
        ExperimentKind::CouplingInequality,
        ExperimentKind::Gluing,
    ]
}
fn default_multiples() -> Vec<f64> {
    vec![2.0, 4.0, 8.0]
}
fn default_g() -> GName {
    GName::Identity
}
fn default_samples() -> usize {
    2000
}
fn default_scan() -> usize {
    1_000_000
}
fn default_rate_tol() -> f64 {
    0.1
}
fn default_dir() -> String {
    "results".into()
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn semantic(msg: impl Into<String>) -> Error {
    Error::ConfigSemantic(msg.into())
}

/// Parses and validates a configuration.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigSyntax {
        line: e.span().map_or(1, |s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn r(&self) -> f64 {
        match self.model.family {
            FamilyName::Plaplace => self.model.p.unwrap_or(2.0) - 1.0,
            _ => self.model.r.unwrap_or(f64::NAN),
        }
    }

    pub fn has(&self, kind: ExperimentKind) -> bool {
        self.experiments.run.contains(&kind)
    }

    /// Cross-field rules, then the domain checks of every derived object.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        match m.family {
            FamilyName::Porous | FamilyName::FastDiffusion => {
                if m.r.is_none() {
                    return Err(semantic("model.r is required for this family"));
                }
                if m.p.is_some() {
                    return Err(semantic("model.p applies only to the plaplace family"));
                }
            }
            FamilyName::Plaplace => {
                if m.p.is_none() {
                    return Err(semantic("model.p is required for the plaplace family"));
                }
                if m.r.is_some() {
                    return Err(semantic("model.r does not apply to the plaplace family"));
                }
            }
        }
        let r = self.r();
        if let Some(kappa) = self.experiments.kappa {
            if !(kappa > 0.0) {
                return Err(semantic(format!("kappa must be positive, got {kappa}")));
            }
            if m.family != FamilyName::FastDiffusion && !(kappa > r - 1.0) {
                return Err(semantic(format!(
                    "kappa > r - 1 is required by the monotonicity condition (kappa = {kappa}, r = {r})"
                )));
            }
        }
        if self.has(ExperimentKind::Conditions) {
            if self.experiments.kappa.is_none() {
                return Err(semantic("the conditions experiment needs experiments.kappa"));
            }
            if !(self.space.delta > 0.5) {
                return Err(semantic(format!(
                    "delta > 1/2 is required for trace-class noise (EI), got {}",
                    self.space.delta
                )));
            }
        }
        let n = self.space.modes;
        if self.sim.x0.len() > n || self.sim.y0.len() > n {
            return Err(semantic("sim.x0 and sim.y0 may not be longer than space.modes"));
        }
        if self.sim.functional_mode == 0 || self.sim.functional_mode > n {
            return Err(semantic("sim.functional_mode must lie in 1..=space.modes"));
        }
        if self.experiments.holder_mode == 0 || self.experiments.holder_mode > n {
            return Err(semantic("experiments.holder_mode must lie in 1..=space.modes"));
        }
        if self.has(ExperimentKind::EscapeBound) {
            if self.experiments.delta_multiples.is_empty() {
                return Err(semantic("escape_bound needs at least one delta multiple"));
            }
            if let Some(bad) = self.experiments.delta_multiples.iter().find(|&&k| !(k > 1.0)) {
                return Err(semantic(format!("delta multiples must exceed 1, got {bad}")));
            }
        }
        if self.has(ExperimentKind::OuOracle) {
            let linear = m.family == FamilyName::Porous && r == 1.0 && m.psi_scale == 1.0 && m.phi_slope == 0.0;
            if !linear || m.c0 != 0.0 {
                return Err(semantic("ou_oracle needs the linear model: porous, r = 1, psi_scale = 1, phi_slope = 0, c0 = 0"));
            }
        }
        if self.has(ExperimentKind::Holder) && self.experiments.holder_eps.is_empty() {
            return Err(semantic("the holder experiment needs experiments.holder_eps"));
        }
        if self.experiments.run.is_empty() {
            return Err(semantic("experiments.run is empty"));
        }
        self.g_spec().validate()?;
        let space = self.space()?;
        self.model_spec().validate_for(&space)?;
        self.coupling_params()?;
        self.sim_config()?.validate()?;
        Ok(())
    }

    pub fn metric(&self) -> HMetric {
        self.space.metric.unwrap_or(match self.model.family {
            FamilyName::Plaplace => HMetric::L2,
            _ => HMetric::Dual,
        })
    }

    pub fn coeff_scheme(&self) -> CoeffScheme {
        if self.space.noise_amplitude == 0.0 {
            CoeffScheme::Constant {
                value: self.space.noise_scale,
            }
        } else {
            CoeffScheme::Oscillating {
                value: self.space.noise_scale,
                amplitude: self.space.noise_amplitude,
            }
        }
    }

    pub fn space(&self) -> Result<SpectralSpace> {
        SpectralSpace::power_law(
            self.space.modes,
            self.space.gamma,
            self.metric(),
            self.space.delta,
            self.coeff_scheme(),
        )
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        let family = match m.family {
            FamilyName::Porous => Family::Porous {
                r: self.r(),
                psi_scale: m.psi_scale,
                phi_slope: m.phi_slope,
            },
            FamilyName::Plaplace => Family::PLaplace {
                p: m.p.unwrap_or(2.0),
            },
            FamilyName::FastDiffusion => Family::FastDiff {
                r: self.r(),
                beta: Beta::Constant { value: m.beta },
            },
        };
        let mut spec = ModelSpec::new(family);
        if m.c0 != 0.0 {
            spec = spec.with_diffusion(DiffusionSpec::LipschitzDiagonal {
                c0: m.c0,
                base: m.base.clone(),
            });
        }
        spec.theta = m.theta;
        spec
    }

    pub fn coupling_params(&self) -> Result<CouplingParams> {
        CouplingParams::new(self.coupling.n, self.coupling.glue_eps)
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = &self.sim;
        let mut cfg = SimConfig::new(s.dt, s.horizon, s.paths, s.seed)?.with_uniform_checkpoints(s.checkpoints);
        cfg.scheme = s.scheme;
        cfg.functional = TestFunctional::TanhMode {
            mode: s.functional_mode,
            scale: s.functional_scale,
        };
        Ok(cfg)
    }

    pub fn initial_states(&self, space: &SpectralSpace) -> (StateVector, StateVector) {
        let pad = |v: &[f64]| {
            let mut h = vec![0.0; space.n_modes()];
            h[..v.len()].copy_from_slice(v);
            space.from_h_coords(&h)
        };
        (pad(&self.sim.x0), pad(&self.sim.y0))
    }

    pub fn g_spec(&self) -> GSpec {
        let e = &self.experiments;
        match e.g {
            GName::Identity => GSpec::Identity,
            GName::PowerCorrection => GSpec::PowerCorrection {
                epsilon: e.g_epsilon,
                delta: e.g_delta,
            },
            GName::LogIntegral => GSpec::LogIntegral { power: e.g_power },
            GName::Power => GSpec::Power { epsilon: e.g_epsilon },
            GName::ExpPower => GSpec::ExpPower {
                lambda: e.g_lambda,
                epsilon: e.g_epsilon,
                gamma: e.g_gamma,
            },
        }
    }

    /// Canonical form: everything that affects results, output settings excluded.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
        }
        serde_json::to_string(&v).expect("value serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[model]
family = "porous"
r = 2.0

[space]
modes = 8
gamma = 2.0
delta = 0.75

[sim]
dt = 1e-4
horizon = 0.01
paths = 10
x0 = [0.25]
y0 = [-0.25]
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.coupling.n, 10);
        assert_eq!(cfg.coupling.glue_eps, 1e-12);
        assert_eq!(cfg.sim.checkpoints, 10);
        assert_eq!(cfg.metric(), HMetric::Dual);
        assert_eq!(cfg.experiments.run, default_experiments());
        assert_eq!(cfg.output.dir, "results");
    }

    #[test]
    fn kappa_below_r_minus_one_is_semantic() {
        let text = format!("{MINIMAL}\n[experiments]\nkappa = 0.5\n");
        match parse_config(&text) {
            Err(Error::ConfigSemantic(msg)) => assert!(msg.contains("kappa > r - 1"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_key_reports_its_line() {
        let text = MINIMAL.replace("r = 2.0", "r = 2.0\nr = 3.0");
        match parse_config(&text) {
            Err(Error::ConfigSyntax { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected_with_line() {
        let text = MINIMAL.replace("delta = 0.75", "delta = 0.75\nwobble = 1");
        match parse_config(&text) {
            Err(Error::ConfigSyntax { line, message }) => {
                assert_eq!(line, 10);
                assert!(message.contains("wobble"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ei_needs_delta_above_half() {
        let text = MINIMAL.replace("delta = 0.75", "delta = 0.5")
            + "\n[experiments]\nrun = [\"conditions\"]\nkappa = 3.0\n";
        assert!(matches!(parse_config(&text), Err(Error::ConfigSemantic(_))));
    }

    #[test]
    fn hash_ignores_output_and_tracks_seed() {
        let a = parse_config(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.sim.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }
}
