//! Experiment configuration: a strict TOML schema with defaults.

use std::path::Path;

use rfcw::model::DistSpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub coarse: CoarseSection,
    #[serde(default)]
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub coupling: CouplingSection,
    #[serde(default)]
    pub targets: TargetsSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Number of sites.
    pub n: usize,
    pub beta: f64,
    pub seed: u64,
    pub fields: DistSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseSection {
    /// Number of blocks.
    #[serde(default = "one")]
    pub n: usize,
    /// Interval width bound `C`: every interval must be at most `C/n` wide.
    /// Defaults to the field support width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsSection {
    #[serde(default = "default_cap")]
    pub cap: u64,
    #[serde(default = "default_trajectories")]
    pub trajectories: u64,
    /// Starting configurations compared by `flatness`.
    #[serde(default = "default_starts")]
    pub starts: usize,
    /// Common random numbers across the starts of `flatness`.
    #[serde(default = "yes")]
    pub paired: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_c2")]
    pub c2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu_override: Option<f64>,
    #[serde(default = "default_cap_cycles")]
    pub cap_cycles: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StartRule {
    /// Grid slice nearest the metastable minimum.
    Metastable,
    /// Grid slice nearest the stable minimum.
    Stable,
    /// Grid slice nearest the given block coordinates.
    Explicit { m: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BDefinition {
    /// Grid slice nearest the stable minimum.
    StableSlice,
    /// l1 ball of the given radius around that slice.
    StableBall { radius: f64 },
    TotalBelow { threshold: f64 },
    TotalAbove { threshold: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsSection {
    #[serde(default = "default_start")]
    pub start: StartRule,
    #[serde(default = "default_b")]
    pub b: BDefinition,
    #[serde(default = "default_delta")]
    pub delta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_directory")]
    pub directory: String,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn default_cap() -> u64 {
    rfcw::dynamics::DEFAULT_CAP
}
fn default_trajectories() -> u64 {
    100
}
fn default_starts() -> usize {
    4
}
fn default_kappa() -> f64 {
    3.0
}
fn default_c2() -> f64 {
    4.0
}
fn default_cap_cycles() -> usize {
    1_000_000
}
fn default_start() -> StartRule {
    StartRule::Metastable
}
fn default_b() -> BDefinition {
    BDefinition::StableSlice
}
fn default_delta() -> f64 {
    0.2
}
fn default_directory() -> String {
    "out".into()
}
fn default_formats() -> Vec<Format> {
    vec![Format::Csv, Format::Json]
}

impl Default for CoarseSection {
    fn default() -> Self {
        Self { n: one(), c: None }
    }
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self { cap: default_cap(), trajectories: default_trajectories(), starts: default_starts(), paired: true }
    }
}

impl Default for CouplingSection {
    fn default() -> Self {
        Self { kappa: default_kappa(), c2: default_c2(), nu_override: None, cap_cycles: default_cap_cycles() }
    }
}

impl Default for TargetsSection {
    fn default() -> Self {
        Self { start: default_start(), b: default_b(), delta: default_delta() }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: default_directory(), formats: default_formats() }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let message = e.message().to_string();
            match line {
                Some(line) => CliError::Config(format!("line {line}: {message}")),
                None => CliError::Config(message),
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| CliError::Config(format!("{}: not UTF-8 ({e})", path.display())))?;
        Ok((Self::parse(text)?, bytes))
    }

    /// Canonical TOML with every default written out.
    pub fn emit(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.model.n == 0 {
            return bad("model.n must be at least 1".into());
        }
        if !(self.model.beta > 0.0) || !self.model.beta.is_finite() {
            return bad(format!("model.beta must be positive, got {}", self.model.beta));
        }
        self.model.fields.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.coarse.n == 0 || self.coarse.n > self.model.n {
            return bad(format!("coarse.n must lie in 1..={}, got {}", self.model.n, self.coarse.n));
        }
        if let Some(c) = self.coarse.c {
            if !(c >= 0.0) || !c.is_finite() {
                return bad(format!("coarse.c must be nonnegative, got {c}"));
            }
        }
        if self.dynamics.cap == 0 {
            return bad("dynamics.cap must be at least 1".into());
        }
        if self.dynamics.starts < 2 {
            return bad("dynamics.starts must be at least 2".into());
        }
        let c = &self.coupling;
        if !(c.kappa > 0.0) || !c.kappa.is_finite() || !(c.c2 > 0.0) || !c.c2.is_finite() {
            return bad("coupling.kappa and coupling.c2 must be positive".into());
        }
        if let Some(nu) = c.nu_override {
            if !(0.0..1.0).contains(&nu) {
                return bad(format!("coupling.nu_override = {nu} is not a probability in [0, 1)"));
            }
        }
        if c.cap_cycles == 0 {
            return bad("coupling.cap_cycles must be at least 1".into());
        }
        if !(self.targets.delta >= 0.0) {
            return bad(format!("targets.delta must be nonnegative, got {}", self.targets.delta));
        }
        if let StartRule::Explicit { m } = &self.targets.start {
            if m.len() != self.coarse.n || m.iter().any(|v| !v.is_finite()) {
                return bad(format!("targets.start.m needs {} finite coordinates", self.coarse.n));
            }
        }
        if let BDefinition::StableBall { radius } = self.targets.b {
            if !(radius >= 0.0) {
                return bad(format!("targets.b.radius must be nonnegative, got {radius}"));
            }
        }
        if self.output.directory.is_empty() {
            return bad("output.directory is empty".into());
        }
        Ok(())
    }

    pub fn wants(&self, format: Format) -> bool {
        self.output.formats.contains(&format)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[model]\nn = 8\nbeta = 1.5\nseed = 3\nfields = { kind = \"uniform\", low = -0.1, high = 0.1 }\n";

    #[test]
    fn defaults_are_filled_in() {
        let c = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.coupling, CouplingSection::default());
        assert_eq!(c.coupling.kappa, 3.0);
        assert_eq!(c.coupling.c2, 4.0);
        assert!(c.emit().contains("kappa = 3.0"));
    }

    #[test]
    fn empty_coupling_section_echoes_defaults() {
        let c = ExperimentConfig::parse(&format!("{MINIMAL}[coupling]\n")).unwrap();
        assert_eq!(c.coupling, CouplingSection::default());
        assert!(c.emit().contains("[coupling]"));
    }

    #[test]
    fn round_trip() {
        let text = format!(
            "{MINIMAL}[coarse]\nn = 2\n[coupling]\nnu_override = 0.25\n[targets]\ndelta = 0.3\nb = {{ kind = \"stable_ball\", radius = 0.1 }}\n"
        );
        let c = ExperimentConfig::parse(&text).unwrap();
        let again = ExperimentConfig::parse(&c.emit()).unwrap();
        assert_eq!(c, again);
        assert_eq!(again.emit(), c.emit());
    }

    #[test]
    fn nu_override_must_be_a_probability() {
        let e = ExperimentConfig::parse(&format!("{MINIMAL}[coupling]\nnu_override = 1.5\n")).unwrap_err();
        assert!(e.to_string().contains("nu_override"));
    }

    #[test]
    fn unknown_key_reports_line() {
        let e = ExperimentConfig::parse(&format!("{MINIMAL}[dynamics]\ncap = 10\ntrajectorys = 5\n")).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("line 8"), "{msg}");
        assert!(msg.contains("trajectorys"), "{msg}");
    }

    #[test]
    fn type_mismatch_and_missing_key() {
        let e = ExperimentConfig::parse("[model]\nn = \"eight\"\nbeta = 1.0\nseed = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = ExperimentConfig::parse("[model]\nn = 8\nseed = 1\nfields = { kind = \"uniform\", low = 0.0, high = 0.1 }\n")
            .unwrap_err();
        assert!(e.to_string().contains("beta"), "{e}");
    }
}
