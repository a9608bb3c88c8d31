//! Per-unit model: natural parameters `φ` to epidemic parameters, observation
//! scheme and filter log-likelihood.
//!
//! Parameters are resolved by name, first from the link (the estimated
//! components of `φ`) and then from `constants`. Recognised names:
//!
//! | model | required | optional |
//! |-------|----------|----------|
//! | sir   | `r0`, `d`, `p`, `i0` | `s0`, `immune` |
//! | seir  | `r0`, `d_e`, `d_i`, `p`, `i0` | `e0`, `immune`, `tau2` |
//!
//! Without `s0` the initial susceptible fraction is `1 - immune - i0` (SIR) or
//! `1 - immune - e0 - i0` (SEIR), and `e0` defaults to `i0`. Incidence counts
//! entries into the infectious class: new infections for SIR, E → I
//! transitions for SEIR. `tau2` switches the noise to the over-dispersed form;
//! it is on the proportion scale, so a count-scale factor `τ²_c` corresponds
//! to `tau2 = N τ²_c`.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::compartments::{
    statespace_quantities, EpiParams, IncidenceNoise, ModelSpec, ObservationKind, ObservationScheme,
    StateSpaceQuantities,
};
use crate::data::UnitSeries;
use crate::error::{Error, Result};
use crate::filters;
use crate::popmodel::LinkSpec;

fn default_max_step() -> f64 {
    0.05
}

/// Serializable description of the unit-level model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `sir` or `seir`.
    pub model: String,
    pub observation: ObservationKind,
    pub link: LinkSpec,
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
    /// Largest RK4 step; the sub-grid uses `ceil(Δ / max_step)` steps per interval.
    #[serde(default = "default_max_step")]
    pub max_step: f64,
}

/// Where a named parameter comes from.
#[derive(Debug, Clone, Copy)]
enum Source {
    Phi(usize),
    Const(f64),
    Absent,
}

/// A resolved [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct UnitModel {
    pub config: ModelConfig,
    pub spec: ModelSpec,
    sources: BTreeMap<&'static str, Source>,
}

const SIR_REQUIRED: [&str; 4] = ["r0", "d", "p", "i0"];
const SEIR_REQUIRED: [&str; 5] = ["r0", "d_e", "d_i", "p", "i0"];
const OPTIONAL: [&str; 4] = ["s0", "e0", "immune", "tau2"];

impl UnitModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.link.validate()?;
        let spec = ModelSpec::by_name(&config.model)?;
        let required: &[&str] = match spec.name.as_str() {
            "sir" => &SIR_REQUIRED,
            _ => &SEIR_REQUIRED,
        };
        let known: Vec<&str> = required.iter().chain(OPTIONAL.iter()).copied().collect();
        for name in config.link.names().iter().chain(config.constants.keys()) {
            if !known.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "parameter `{name}` is not used by model `{}`",
                    spec.name
                )));
            }
            if config.link.index_of(name).is_some() && config.constants.contains_key(name) {
                return Err(Error::Config(format!("parameter `{name}` is both estimated and constant")));
            }
        }
        let mut sources = BTreeMap::new();
        for &name in &known {
            let src = match (config.link.index_of(name), config.constants.get(name)) {
                (Some(i), _) => Source::Phi(i),
                (None, Some(v)) => Source::Const(*v),
                (None, None) => Source::Absent,
            };
            if required.contains(&name) && matches!(src, Source::Absent) {
                return Err(Error::Config(format!(
                    "model `{}` needs `{name}` in the link or the constants",
                    spec.name
                )));
            }
            sources.insert(name, src);
        }
        if spec.name == "sir" && !matches!(sources["e0"], Source::Absent) {
            return Err(Error::Config("`e0` has no meaning for the sir model".into()));
        }
        if !(config.max_step > 0.0) {
            return Err(Error::Config(format!("max_step = {} must be > 0", config.max_step)));
        }
        Ok(Self { config, spec, sources })
    }

    pub fn link(&self) -> &LinkSpec {
        &self.config.link
    }

    pub fn kind(&self) -> ObservationKind {
        self.config.observation
    }

    fn value(&self, name: &str, phi: &[f64]) -> Option<f64> {
        match self.sources.get(name).copied().unwrap_or(Source::Absent) {
            Source::Phi(i) => Some(phi[i]),
            Source::Const(v) => Some(v),
            Source::Absent => None,
        }
    }

    /// Named parameter value for `phi`, if the model uses it.
    pub fn param(&self, name: &str, phi: &[f64]) -> Option<f64> {
        self.value(name, phi)
    }

    /// Epidemic parameters and observation scheme for `phi`.
    pub fn resolve(&self, phi: &[f64]) -> Result<(EpiParams, ObservationScheme)> {
        if phi.len() != self.config.link.len() {
            return Err(Error::Argument(format!(
                "φ has {} entries, link has {}",
                phi.len(),
                self.config.link.len()
            )));
        }
        let v = |name: &str| self.value(name, phi).unwrap();
        let immune = self.value("immune", phi).unwrap_or(0.0);
        let i0 = v("i0");
        let p = v("p");
        let (eta, obs) = match self.spec.name.as_str() {
            "sir" => {
                let s0 = self.value("s0", phi).unwrap_or(1.0 - immune - i0);
                let eta = EpiParams::sir(v("r0"), v("d"), s0, i0)?;
                let obs = match self.config.observation {
                    ObservationKind::Prevalence => ObservationScheme::Prevalence { compartment: 1, p },
                    ObservationKind::Incidence => ObservationScheme::Incidence {
                        compartments: vec![0],
                        p,
                        noise: self.noise(phi),
                    },
                };
                (eta, obs)
            }
            _ => {
                let e0 = self.value("e0", phi).unwrap_or(i0);
                let s0 = self.value("s0", phi).unwrap_or(1.0 - immune - e0 - i0);
                let eta = EpiParams::seir(v("r0"), v("d_e"), v("d_i"), s0, e0, i0)?;
                let obs = match self.config.observation {
                    ObservationKind::Prevalence => ObservationScheme::Prevalence { compartment: 2, p },
                    ObservationKind::Incidence => ObservationScheme::Incidence {
                        compartments: vec![0, 1],
                        p,
                        noise: self.noise(phi),
                    },
                };
                (eta, obs)
            }
        };
        Ok((eta, obs))
    }

    fn noise(&self, phi: &[f64]) -> IncidenceNoise {
        match self.value("tau2", phi) {
            Some(tau2) => IncidenceNoise::Overdispersed { tau2 },
            None => IncidenceNoise::Binomial,
        }
    }

    pub fn substeps(&self, delta: f64) -> usize {
        ((delta / self.config.max_step) - 1e-9).ceil().max(1.0) as usize
    }

    /// State-space quantities for `phi` on `n` intervals of length `delta`.
    pub fn quantities(&self, phi: &[f64], n_pop: f64, delta: f64, n: usize) -> Result<StateSpaceQuantities> {
        let (eta, obs) = self.resolve(phi)?;
        statespace_quantities(&self.spec, &eta, n_pop, delta, n, &obs, self.substeps(delta))
    }

    /// Filter log-likelihood of one unit.
    pub fn try_loglik(&self, phi: &[f64], unit: &UnitSeries, delta: f64) -> Result<f64> {
        let q = self.quantities(phi, unit.n_pop, delta, unit.n())?;
        filters::loglik(&q, &unit.y)
    }

    /// As [`UnitModel::try_loglik`], with every failure mapped to `-∞`.
    pub fn loglik(&self, phi: &[f64], unit: &UnitSeries, delta: f64) -> f64 {
        match self.try_loglik(phi, unit, delta) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => f64::NEG_INFINITY,
            Err(e) => {
                log::trace!("unit {}: loglik rejected: {e}", unit.label);
                f64::NEG_INFINITY
            }
        }
    }

    /// Mean observation `E[y_k]` under the deterministic path, `k = 1..=n`.
    pub fn mean_observations(&self, phi: &[f64], n_pop: f64, delta: f64, n: usize) -> Result<Vec<DVector<f64>>> {
        let q = self.quantities(phi, n_pop, delta, n)?;
        Ok((1..=n)
            .map(|k| match q.kind {
                ObservationKind::Prevalence => &q.obs_map * q.x(k),
                ObservationKind::Incidence => &q.obs_map * (q.x(k) - q.x(k - 1)),
            })
            .collect())
    }
}

/// Ready-made configurations.
pub mod presets {
    use super::*;
    use crate::popmodel::LinkKind;

    /// SIR prevalence with random `(R0, p, i0)` and fixed `d`, `s0 = 1 - i0`.
    pub fn sir_prevalence() -> ModelConfig {
        ModelConfig {
            model: "sir".into(),
            observation: ObservationKind::Prevalence,
            link: LinkSpec::from_triples(&[
                ("r0", LinkKind::ShiftedLogExp, true),
                ("d", LinkKind::LogExp, false),
                ("p", LinkKind::Logit, true),
                ("i0", LinkKind::Logit, true),
            ])
            .unwrap(),
            constants: BTreeMap::new(),
            max_step: default_max_step(),
        }
    }

    /// SEIR incidence with random `(R0, p, i0)`, known durations, initial
    /// immunity and over-dispersion.
    pub fn seir_incidence(d_e: f64, d_i: f64, immune: f64, tau2: f64) -> ModelConfig {
        ModelConfig {
            model: "seir".into(),
            observation: ObservationKind::Incidence,
            link: LinkSpec::from_triples(&[
                ("r0", LinkKind::ShiftedLogExp, true),
                ("p", LinkKind::Logit, true),
                ("i0", LinkKind::Logit, true),
            ])
            .unwrap(),
            constants: BTreeMap::from([
                ("d_e".to_string(), d_e),
                ("d_i".to_string(), d_i),
                ("immune".to_string(), immune),
                ("tau2".to_string(), tau2),
            ]),
            max_step: 0.1,
        }
    }
}
