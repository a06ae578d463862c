//! The versioned scenario file format and the bundled catalog.
//!
//! A scenario names a network, a curve design, and either a list of
//! closed-loop runs or one parameter sweep. Bundled scenarios are
//! compiled in and addressable by name wherever a scenario path is
//! accepted.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use voltflow_core::dynamics::PhysicsMode;
use voltflow_core::netmodel::FeederNetwork;

pub const SCENARIO_SCHEMA: &str = "scenario/v1";

pub const BUNDLED: &[(&str, &str)] = &[
    ("fig3", include_str!("../scenarios/fig3.toml")),
    ("fig4-range", include_str!("../scenarios/fig4-range.toml")),
    ("fig5-gradient-rates", include_str!("../scenarios/fig5-gradient-rates.toml")),
    ("fig6-pseudo-rates", include_str!("../scenarios/fig6-pseudo-rates.toml")),
    ("conditions-sweep", include_str!("../scenarios/conditions-sweep.toml")),
];

/// Bundled scenario by exact name, or by unique prefix as a
/// convenience; ambiguity is an error, absence is `None`.
pub fn find_bundled(name: &str) -> Result<Option<(&'static str, &'static str)>> {
    if let Some(hit) = BUNDLED.iter().find(|(n, _)| *n == name) {
        return Ok(Some(*hit));
    }
    let matches: Vec<_> = BUNDLED.iter().filter(|(n, _)| n.starts_with(name)).collect();
    match matches.as_slice() {
        [] => Ok(None),
        [one] => Ok(Some(**one)),
        many => bail!(
            "`{name}` is ambiguous; candidates: {}",
            many.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
        ),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: String,
    pub name: Option<String>,
    #[serde(default)]
    pub description: String,
    /// Physics for simulations; overridable from the command line.
    pub physics: Option<PhysicsChoice>,
    pub network: NetworkRef,
    pub curves: CurveSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub runs: Vec<RunSpec>,
    pub sweep: Option<SweepSpec>,
    /// Free-form annotations copied verbatim into the run manifest.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PhysicsChoice {
    Linear,
    Nonlinear,
}

impl PhysicsChoice {
    pub fn mode(self) -> PhysicsMode {
        match self {
            PhysicsChoice::Linear => PhysicsMode::Linear,
            PhysicsChoice::Nonlinear => PhysicsMode::Nonlinear,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhysicsChoice::Linear => "linear",
            PhysicsChoice::Nonlinear => "nonlinear",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkRef {
    /// `builtin:<name>` or a path, relative to the scenario file.
    pub source: String,
    #[serde(default = "one")]
    pub load_multiplier: f64,
    /// Overrides the network file's default power factor for loads
    /// given without reactive demand.
    pub power_factor_default: Option<f64>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    #[serde(default = "one")]
    pub v_nom: f64,
    pub deadband: f64,
    /// Saturation threshold distance from nominal; slopes follow from
    /// each bus's reactive limits.
    pub threshold_offset: Option<f64>,
    /// Uniform slope alternative to `threshold_offset`.
    pub alpha: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    #[serde(default)]
    pub q0: Q0Spec,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum Q0Spec {
    Named(String),
    Values(Vec<f64>),
}

impl Default for Q0Spec {
    fn default() -> Self {
        Q0Spec::Named("zero".to_owned())
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub conv_tol: f64,
    pub flow_tol: f64,
    pub max_steps: usize,
    pub conv_window: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { conv_tol: 1e-8, flow_tol: 1e-10, max_steps: 500, conv_window: 5 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub law: LawChoice,
    pub stepsize: Option<f64>,
    /// Stepsize as a fraction of the law's provable bound (`c2` for
    /// gradient, `c3` for pseudo-gradient).
    pub stepsize_factor: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LawChoice {
    Droop,
    Gradient,
    PseudoGradient,
}

impl LawChoice {
    pub fn name(self) -> &'static str {
        match self {
            LawChoice::Droop => "droop",
            LawChoice::Gradient => "gradient",
            LawChoice::PseudoGradient => "pseudo-gradient",
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub kind: SweepKind,
    /// For `stepsize` sweeps.
    pub law: Option<SweepLawChoice>,
    pub gamma: Option<GridSpec>,
    /// For `threshold-range` and `conditions` sweeps.
    pub offsets: Option<GridSpec>,
    pub gamma_gradient: Option<GridSpec>,
    pub gamma_pseudo: Option<GridSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Stepsize,
    ThresholdRange,
    Conditions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepLawChoice {
    Gradient,
    PseudoGradient,
}

impl SweepLawChoice {
    pub fn name(self) -> &'static str {
        match self {
            SweepLawChoice::Gradient => "gradient",
            SweepLawChoice::PseudoGradient => "pseudo-gradient",
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        voltflow_core::analysis::grid(self.start, self.stop, self.step)
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = self.start.is_finite()
            && self.stop.is_finite()
            && self.step.is_finite()
            && self.step > 0.0
            && self.stop >= self.start;
        if !ok {
            bail!("{what} grid must satisfy start <= stop and step > 0, got {self:?}");
        }
        Ok(())
    }
}

impl Scenario {
    fn validate(&self) -> Result<()> {
        if self.schema != SCENARIO_SCHEMA {
            bail!("unsupported scenario schema `{}` (expected {SCENARIO_SCHEMA})", self.schema);
        }
        let n = &self.network;
        if !(n.load_multiplier.is_finite() && n.load_multiplier > 0.0) {
            bail!("load_multiplier must be positive and finite, got {}", n.load_multiplier);
        }
        if let Some(pf) = n.power_factor_default {
            if !(pf > 0.0 && pf <= 1.0) {
                bail!("power_factor_default must lie in (0, 1], got {pf}");
            }
        }
        let c = &self.curves;
        if !(c.v_nom.is_finite() && c.v_nom > 0.0) {
            bail!("curves.v_nom must be positive, got {}", c.v_nom);
        }
        if !(c.deadband.is_finite() && c.deadband >= 0.0) {
            bail!("curves.deadband must be non-negative, got {}", c.deadband);
        }
        match &self.init.q0 {
            Q0Spec::Named(name) if name == "zero" || name == "random" => {}
            Q0Spec::Named(name) => {
                bail!("init.q0 must be \"zero\", \"random\", or a list of values; got \"{name}\"")
            }
            Q0Spec::Values(v) => {
                if v.iter().any(|x| !x.is_finite()) {
                    bail!("init.q0 values must be finite");
                }
            }
        }
        let t = &self.tolerances;
        if !(t.conv_tol.is_finite() && t.conv_tol >= 0.0) || !(t.flow_tol > 0.0) {
            bail!("tolerances must be non-negative (conv_tol) and positive (flow_tol)");
        }
        if t.max_steps == 0 || t.conv_window == 0 {
            bail!("max_steps and conv_window must be at least 1");
        }
        match (self.runs.is_empty(), &self.sweep) {
            (true, None) => bail!("scenario defines neither [[runs]] nor [sweep]"),
            (false, Some(_)) => bail!("scenario defines both [[runs]] and [sweep]; pick one"),
            _ => {}
        }
        if !self.runs.is_empty() {
            self.validate_point_design()?;
            for (i, run) in self.runs.iter().enumerate() {
                let named = |what| format!("runs[{i}] ({}): {what}", run.law.name());
                match run.law {
                    LawChoice::Droop => {
                        if run.stepsize.is_some() || run.stepsize_factor.is_some() {
                            bail!(named("droop takes no stepsize"));
                        }
                    }
                    _ => match (run.stepsize, run.stepsize_factor) {
                        (Some(s), None) if s.is_finite() && s > 0.0 => {}
                        (None, Some(f)) if f.is_finite() && f > 0.0 => {}
                        _ => bail!(named("needs exactly one of stepsize or stepsize_factor, positive")),
                    },
                }
            }
        }
        if let Some(sweep) = &self.sweep {
            sweep.validate(self)?;
        }
        Ok(())
    }

    /// A single curve design: exactly one of threshold_offset / alpha.
    fn validate_point_design(&self) -> Result<()> {
        match (self.curves.threshold_offset, self.curves.alpha) {
            (Some(o), None) => {
                if !(o.is_finite() && o > self.curves.deadband / 2.0) {
                    bail!(
                        "curves.threshold_offset must exceed half the deadband ({} > {})",
                        o,
                        self.curves.deadband / 2.0
                    );
                }
            }
            (None, Some(a)) => {
                if !(a.is_finite() && a > 0.0) {
                    bail!("curves.alpha must be positive, got {a}");
                }
            }
            _ => bail!("curves needs exactly one of threshold_offset or alpha"),
        }
        Ok(())
    }
}

impl SweepSpec {
    fn validate(&self, scenario: &Scenario) -> Result<()> {
        let need = |opt: bool, what: &str| {
            if opt {
                Ok(())
            } else {
                Err(anyhow!("sweep kind requires `{what}`"))
            }
        };
        let forbid = |absent: bool, what: &str| {
            if absent {
                Ok(())
            } else {
                Err(anyhow!("sweep kind does not take `{what}`"))
            }
        };
        match self.kind {
            SweepKind::Stepsize => {
                scenario.validate_point_design()?;
                need(self.law.is_some(), "law")?;
                need(self.gamma.is_some(), "gamma")?;
                forbid(self.offsets.is_none(), "offsets")?;
                forbid(self.gamma_gradient.is_none(), "gamma_gradient")?;
                forbid(self.gamma_pseudo.is_none(), "gamma_pseudo")?;
                self.gamma.as_ref().unwrap().validate("gamma")?;
            }
            SweepKind::ThresholdRange => {
                // the sweep itself supplies the threshold offsets
                forbid(scenario.curves.threshold_offset.is_none(), "curves.threshold_offset")?;
                forbid(scenario.curves.alpha.is_none(), "curves.alpha")?;
                forbid(self.law.is_none(), "law")?;
                forbid(self.gamma.is_none(), "gamma")?;
                need(self.offsets.is_some(), "offsets")?;
                need(self.gamma_gradient.is_some(), "gamma_gradient")?;
                need(self.gamma_pseudo.is_some(), "gamma_pseudo")?;
                let offsets = self.offsets.as_ref().unwrap();
                offsets.validate("offsets")?;
                check_offsets_clear_deadband(offsets, scenario.curves.deadband)?;
                self.gamma_gradient.as_ref().unwrap().validate("gamma_gradient")?;
                self.gamma_pseudo.as_ref().unwrap().validate("gamma_pseudo")?;
            }
            SweepKind::Conditions => {
                forbid(scenario.curves.threshold_offset.is_none(), "curves.threshold_offset")?;
                forbid(scenario.curves.alpha.is_none(), "curves.alpha")?;
                forbid(self.law.is_none(), "law")?;
                forbid(self.gamma.is_none(), "gamma")?;
                forbid(self.gamma_gradient.is_none(), "gamma_gradient")?;
                forbid(self.gamma_pseudo.is_none(), "gamma_pseudo")?;
                need(self.offsets.is_some(), "offsets")?;
                let offsets = self.offsets.as_ref().unwrap();
                offsets.validate("offsets")?;
                check_offsets_clear_deadband(offsets, scenario.curves.deadband)?;
            }
        }
        Ok(())
    }
}

/// Every swept threshold offset must leave room for a sloped segment
/// beyond the deadband edge.
fn check_offsets_clear_deadband(offsets: &GridSpec, deadband: f64) -> Result<()> {
    if offsets.start <= deadband / 2.0 {
        bail!(
            "sweep offsets start at {}, inside half the deadband ({}); no curve exists there",
            offsets.start,
            deadband / 2.0
        );
    }
    Ok(())
}

/// A parsed scenario plus the hash of the exact source text it came
/// from; the hash is embedded in every output the scenario produces.
#[derive(Debug)]
pub struct LoadedScenario {
    pub name: String,
    pub hash: String,
    /// Base directory for relative network paths (none for bundled).
    pub dir: Option<PathBuf>,
    pub scenario: Scenario,
}

/// Loads `arg` as a scenario file if such a file exists, otherwise as a
/// bundled scenario name.
pub fn resolve(arg: &str) -> Result<LoadedScenario> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading scenario file {}", path.display()))?;
        let fallback = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".to_owned());
        return parse(&fallback, text, path.parent().map(Path::to_path_buf));
    }
    match find_bundled(arg)? {
        Some((name, text)) => parse(name, text.to_owned(), None),
        None => bail!("`{arg}` is neither a scenario file nor a bundled scenario; see `voltflow list`"),
    }
}

fn parse(fallback_name: &str, text: String, dir: Option<PathBuf>) -> Result<LoadedScenario> {
    let scenario: Scenario = toml::from_str(&text)
        .with_context(|| format!("scenario `{fallback_name}` is malformed"))?;
    scenario
        .validate()
        .with_context(|| format!("scenario `{fallback_name}` is invalid"))?;
    let name = scenario.name.clone().unwrap_or_else(|| fallback_name.to_owned());
    let hash = sha256_hex(text.as_bytes());
    Ok(LoadedScenario { name, hash, dir, scenario })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads a network from `builtin:<name>` or a file path (relative paths
/// against `base`), optionally overriding the file's default power
/// factor. Returns the network and the source text that produced it.
pub fn load_network_source(
    source: &str,
    base: Option<&Path>,
    power_factor_default: Option<f64>,
) -> Result<(FeederNetwork, String)> {
    let text = if let Some(builtin) = source.strip_prefix("builtin:") {
        match builtin {
            "sce42" => voltflow_core::datasets::SCE42_TOML.to_owned(),
            other => bail!("unknown builtin network `{other}` (available: sce42)"),
        }
    } else {
        let path = Path::new(source);
        let path = match base {
            Some(dir) if path.is_relative() => dir.join(path),
            _ => path.to_path_buf(),
        };
        fs::read_to_string(&path)
            .with_context(|| format!("reading network file {}", path.display()))?
    };
    let text = match power_factor_default {
        Some(pf) => override_default_pf(&text, pf)?,
        None => text,
    };
    let net = FeederNetwork::from_toml_str(&text)
        .map_err(|e| anyhow!("network `{source}`: {e}"))?;
    Ok((net, text))
}

fn override_default_pf(text: &str, pf: f64) -> Result<String> {
    let mut table: toml::Table = toml::from_str(text).context("network file is not valid TOML")?;
    let defaults = table
        .entry("defaults".to_owned())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    defaults
        .as_table_mut()
        .ok_or_else(|| anyhow!("network `defaults` entry is not a table"))?
        .insert("pf".to_owned(), toml::Value::Float(pf));
    Ok(toml::to_string(&table)?)
}
