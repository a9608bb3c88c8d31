//! Run configuration: one TOML file with sections per workflow, command-line
//! overrides, and a content hash embedded in every output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use epimix::baseline::SimplexConfig;
use epimix::evaluate::{IsProposal, SegmentConfig};
use epimix::gillespie::SimulationConfig;
use epimix::model::{ModelConfig, UnitModel};
use epimix::popmodel::PopulationParams;
use epimix::saem::SaemConfig;
use epimix::{Error, Result};

/// Sections that take the run seed.
const SEEDED_SECTIONS: [&str; 3] = ["simulate", "saem", "km"];

/// Population parameters given on the link scale; randomness comes from the link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThetaSection {
    pub beta: Vec<f64>,
    /// Variances of the random effects, one per component (ignored for fixed ones).
    pub gamma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub units: usize,
    pub n_pop: u64,
    pub delta: f64,
    #[serde(default = "default_extinction_threshold")]
    pub extinction_threshold: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
}

fn default_extinction_threshold() -> f64 {
    0.05
}

fn default_horizon() -> f64 {
    365.0
}

fn default_max_attempts() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    /// Monte-Carlo draws for natural-scale moments of a fitted population.
    pub moment_draws: usize,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self { moment_draws: 1_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoglikSection {
    pub n_samples: usize,
    pub proposal: IsProposal,
}

impl Default for LoglikSection {
    fn default() -> Self {
        Self { n_samples: 1000, proposal: IsProposal::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpcheckSection {
    pub n_sim: usize,
    /// Grid length; taken from the dataset when one is given.
    pub steps: Option<usize>,
    pub n_pop: Option<f64>,
    pub delta: Option<f64>,
    pub component: usize,
}

impl Default for PpcheckSection {
    fn default() -> Self {
        Self { n_sim: 1000, steps: None, n_pop: None, delta: None, component: 0 }
    }
}

/// Segmentation rules; exclusions are given as dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentSection {
    pub threshold: f64,
    pub min_len: usize,
    pub exclude: Vec<String>,
    /// Sampling step (days) of the dataset built from the windows.
    pub delta: usize,
    /// Population size attached to each window.
    pub n_pop: f64,
}

impl Default for SegmentSection {
    fn default() -> Self {
        Self { threshold: 160.0, min_len: 14, exclude: vec![], delta: 7, n_pop: 1e5 }
    }
}

impl SegmentSection {
    pub fn rule(&self, exclude: Vec<usize>) -> SegmentConfig {
        SegmentConfig { threshold: self.threshold, min_len: self.min_len, exclude }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: Option<ModelConfig>,
    pub theta: Option<ThetaSection>,
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub saem: SaemConfig,
    #[serde(default)]
    pub km: SimplexConfig,
    #[serde(default)]
    pub report: ReportSection,
    #[serde(default)]
    pub loglik: LoglikSection,
    #[serde(default)]
    pub ppcheck: PpcheckSection,
    #[serde(default)]
    pub segment: SegmentSection,
}

/// A parsed configuration with the text it was hashed from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    /// Effective configuration after overrides, as TOML.
    pub text: String,
    pub hash: String,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `key.path=value`; the value is read as TOML, else as a string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not `key=value`")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key `{path}` is malformed")));
    }
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads `path` (or starts empty), applies overrides and the seed, and parses.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<LoadedConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    let run_seed = match table.get("seed") {
        None => 0,
        Some(toml::Value::Integer(s)) if *s >= 0 => *s,
        Some(v) => return Err(Error::Config(format!("seed: expected a nonnegative integer, got {v}"))),
    };
    table.insert("seed".into(), toml::Value::Integer(run_seed));
    for section in SEEDED_SECTIONS {
        if let Some(t) = table.get(section).and_then(|v| v.as_table()) {
            if t.contains_key("seed") {
                return Err(Error::Config(format!("{section}.seed: seeds are set only by the top-level `seed`")));
            }
        }
    }
    let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
    let mut run: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
        .map_err(|e| Error::Config(format!("{}: {}", e.path(), e.inner())))?;
    run.saem.seed = run.seed;
    run.km.seed = run.seed;
    Ok(LoadedConfig { hash: sha256_hex(text.as_bytes()), run, text })
}

impl RunConfig {
    pub fn unit_model(&self) -> Result<UnitModel> {
        let cfg = self.model.clone().ok_or_else(|| Error::Config("missing [model] section".into()))?;
        UnitModel::new(cfg)
    }

    pub fn population(&self, model: &UnitModel) -> Result<PopulationParams> {
        let t = self.theta.as_ref().ok_or_else(|| Error::Config("missing [theta] section".into()))?;
        theta_from_link(model, t.beta.clone(), t.gamma.clone())
    }

    pub fn simulation(&self) -> Result<SimulationConfig> {
        let s = self.simulate.as_ref().ok_or_else(|| Error::Config("missing [simulate] section".into()))?;
        Ok(SimulationConfig {
            units: s.units,
            n_pop: s.n_pop,
            delta: s.delta,
            extinction_threshold: s.extinction_threshold,
            horizon: s.horizon,
            max_attempts: s.max_attempts,
            seed: self.seed,
        })
    }
}

/// `θ` with the randomness pattern of the model's link; fixed components get `Γ = 0`.
pub fn theta_from_link(model: &UnitModel, beta: Vec<f64>, gamma: Vec<f64>) -> Result<PopulationParams> {
    let random: Vec<bool> = model.link().components.iter().map(|c| c.random).collect();
    if beta.len() != random.len() || gamma.len() != random.len() {
        return Err(Error::Config(format!(
            "theta: β and Γ need {} entries to match the link",
            random.len()
        )));
    }
    let gamma = gamma.iter().zip(&random).map(|(g, r)| if *r { *g } else { 0.0 }).collect();
    PopulationParams::new(beta, gamma, random)
}
