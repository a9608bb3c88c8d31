//! Exact simulation of the jump process and of the observation layer.
//!
//! Events fire at count-space rate `N k Π (X_j / N)^{a_j}` (direct method).
//! Every compartment other than the first (susceptible) counts as infected;
//! a run ends when they are all empty.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Binomial, Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compartments::{EpiParams, IncidenceNoise, ModelSpec, ObservationScheme};
use crate::data::{Dataset, UnitSeries};
use crate::error::{Error, Result};
use crate::model::UnitModel;
use crate::popmodel::{sample_unit_params, LinkSpec, PopulationParams};
use crate::rng::unit_rng;

/// Event times and counts of one realisation, starting with the state at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpTrajectory {
    pub n_pop: u64,
    pub dim: usize,
    /// `times[0] = 0`, then one entry per event.
    pub times: Vec<f64>,
    /// Row-major counts after each event, `times.len()` rows of `dim`.
    pub counts: Vec<i64>,
}

impl JumpTrajectory {
    /// Number of events.
    pub fn len(&self) -> usize {
        self.times.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, i: usize) -> &[i64] {
        &self.counts[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_state(&self) -> &[i64] {
        self.state(self.len())
    }

    /// Counts at time `t` (right-continuous).
    pub fn state_at(&self, t: f64) -> &[i64] {
        let i = self.times.partition_point(|&s| s <= t).saturating_sub(1);
        self.state(i)
    }

    /// Susceptibles lost over the whole run.
    pub fn final_size(&self) -> i64 {
        self.state(0)[0] - self.last_state()[0]
    }

    /// Recovered class, implied by conservation.
    pub fn removed(&self, i: usize) -> i64 {
        self.n_pop as i64 - self.state(i).iter().sum::<i64>()
    }
}

fn infected(x: &[i64]) -> i64 {
    x[1..].iter().sum()
}

/// Limits on a single run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunLimits {
    /// Stop once this time is passed.
    pub t_max: f64,
    /// Stop once the final size reaches this many infections.
    pub stop_at_final_size: Option<i64>,
}

impl Default for RunLimits {
    fn default() -> Self {
        Self { t_max: f64::INFINITY, stop_at_final_size: None }
    }
}

/// Initial counts `round(N x0)`.
pub fn initial_counts(eta: &EpiParams, n_pop: u64) -> Vec<i64> {
    eta.x0.iter().map(|v| (v * n_pop as f64).round() as i64).collect()
}

/// Direct-method simulation until extinction of the infected classes.
pub fn simulate_jump<R: Rng + ?Sized>(
    model: &ModelSpec,
    eta: &EpiParams,
    n_pop: u64,
    rng: &mut R,
) -> Result<JumpTrajectory> {
    simulate_jump_limited(model, eta, n_pop, RunLimits::default(), rng)
}

pub fn simulate_jump_limited<R: Rng + ?Sized>(
    model: &ModelSpec,
    eta: &EpiParams,
    n_pop: u64,
    limits: RunLimits,
    rng: &mut R,
) -> Result<JumpTrajectory> {
    let d = model.dim();
    if eta.x0.len() != d || eta.rates.len() != model.rate_names.len() {
        return Err(Error::Argument(format!("parameters do not fit model `{}`", model.name)));
    }
    if n_pop == 0 {
        return Err(Error::Argument("population size must be positive".into()));
    }
    let mut x = initial_counts(eta, n_pop);
    if x.iter().sum::<i64>() > n_pop as i64 {
        return Err(Error::Parameter("initial counts exceed the population".into()));
    }
    let n = n_pop as f64;
    let s_start = x[0];
    let mut times = vec![0.0];
    let mut counts = x.clone();
    let mut props = vec![0.0; model.events.len()];
    let mut prop_x = vec![0.0; d];
    let mut t = 0.0;
    while infected(&x) > 0 {
        for (p, &c) in prop_x.iter_mut().zip(&x) {
            *p = c as f64 / n;
        }
        let mut total = 0.0;
        for (slot, ev) in props.iter_mut().zip(&model.events) {
            let r = n * model.propensity(ev, &eta.rates, &prop_x);
            *slot = r;
            total += r;
        }
        if !(total > 0.0) {
            break;
        }
        let wait: f64 = rng.sample::<f64, _>(Exp1) / total;
        t += wait;
        if t > limits.t_max {
            break;
        }
        let mut u = rng.random::<f64>() * total;
        let mut chosen = props.len() - 1;
        for (e, &r) in props.iter().enumerate() {
            if u < r {
                chosen = e;
                break;
            }
            u -= r;
        }
        // Guard against rounding picking an event with zero rate.
        if props[chosen] == 0.0 {
            chosen = props.iter().rposition(|&r| r > 0.0).unwrap();
        }
        for (c, j) in x.iter_mut().zip(&model.events[chosen].jump) {
            *c += j;
        }
        times.push(t);
        counts.extend_from_slice(&x);
        if let Some(limit) = limits.stop_at_final_size {
            if s_start - x[0] >= limit {
                break;
            }
        }
    }
    Ok(JumpTrajectory { n_pop, dim: d, times, counts })
}

/// Fraction of runs whose final size reaches `threshold` infections, for an
/// SIR epidemic started from `i0` infectives in a population of `n_pop`.
pub fn major_outbreak_fraction<R: Rng + ?Sized>(
    r0: f64,
    i0: u64,
    n_pop: u64,
    threshold: i64,
    reps: usize,
    rng: &mut R,
) -> Result<f64> {
    if !(r0 > 1.0) || i0 == 0 || i0 >= n_pop {
        return Err(Error::Argument(format!("need R0 > 1 and 1 <= I0 < N (R0={r0}, I0={i0})")));
    }
    let model = ModelSpec::sir();
    let n = n_pop as f64;
    // Only the ratio of rates matters for the embedded chain; d = 1.
    let eta = EpiParams::from_rates(vec![r0, 1.0], vec![(n - i0 as f64) / n, i0 as f64 / n])?;
    let limits = RunLimits { t_max: f64::INFINITY, stop_at_final_size: Some(threshold) };
    let mut major = 0usize;
    for _ in 0..reps {
        let traj = simulate_jump_limited(&model, &eta, n_pop, limits, rng)?;
        if traj.final_size() >= threshold {
            major += 1;
        }
    }
    Ok(major as f64 / reps as f64)
}

/// `1 - major_outbreak_fraction` with the default 5% threshold.
pub fn extinction_fraction<R: Rng + ?Sized>(
    r0: f64,
    i0: u64,
    n_pop: u64,
    reps: usize,
    rng: &mut R,
) -> Result<f64> {
    let threshold = (0.05 * n_pop as f64).ceil() as i64;
    Ok(1.0 - major_outbreak_fraction(r0, i0, n_pop, threshold, reps, rng)?)
}

/// Counts at `t_k = kΔ`, `k = 0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridStates {
    pub delta: f64,
    pub n_pop: u64,
    /// `states[k]` are the counts at `t_k`.
    pub states: Vec<Vec<i64>>,
}

impl GridStates {
    pub fn n(&self) -> usize {
        self.states.len() - 1
    }

    /// Normalised state at `t_k`.
    pub fn proportions(&self, k: usize) -> Vec<f64> {
        self.states[k].iter().map(|&c| c as f64 / self.n_pop as f64).collect()
    }
}

/// Samples the trajectory on `t_k = kΔ` up to the first grid time with no
/// infected individuals, or up to `t_max` when the run was truncated.
pub fn sample_grid(traj: &JumpTrajectory, delta: f64, t_max: f64) -> Result<GridStates> {
    if !(delta > 0.0) {
        return Err(Error::Argument(format!("Δ = {delta} must be > 0")));
    }
    let mut states = vec![traj.state(0).to_vec()];
    if infected(traj.state(0)) > 0 {
        let mut k = 1usize;
        loop {
            let t = k as f64 * delta;
            if t > t_max + 1e-12 {
                break;
            }
            let x = traj.state_at(t).to_vec();
            let done = infected(&x) == 0;
            states.push(x);
            if done {
                break;
            }
            k += 1;
        }
    }
    Ok(GridStates { delta, n_pop: traj.n_pop, states })
}

/// Observations `y_1..y_n` (normalised by `N`) drawn from the grid states.
///
/// Prevalence: `Binomial(X_j(t_k), p) / N`. Binomial incidence:
/// `Binomial(Inc_k, p) / N`. Over-dispersed incidence: Gaussian with mean
/// `p Inc_k` and variance `p Inc_k + (τ²/N) p² Inc_k²`, truncated at 0.
/// `Inc_k` counts the individuals leaving the observed compartments.
pub fn observe<R: Rng + ?Sized>(
    grid: &GridStates,
    scheme: &ObservationScheme,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>> {
    let n = grid.n_pop as f64;
    let p = scheme.reporting_rate();
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("reporting rate {p} outside [0, 1]")));
    }
    let binom = |count: i64, rng: &mut R| -> Result<f64> {
        let b = Binomial::new(count.max(0) as u64, p).map_err(|e| Error::Parameter(e.to_string()))?;
        Ok(b.sample(rng) as f64)
    };
    let mut out = Vec::with_capacity(grid.n());
    for k in 1..=grid.n() {
        let v = match scheme {
            ObservationScheme::Prevalence { compartment, .. } => binom(grid.states[k][*compartment], rng)?,
            ObservationScheme::Incidence { compartments, noise, .. } => {
                let inc: i64 = compartments
                    .iter()
                    .map(|&j| grid.states[k - 1][j] - grid.states[k][j])
                    .sum();
                match noise {
                    IncidenceNoise::Binomial => binom(inc, rng)?,
                    IncidenceNoise::Overdispersed { tau2 } => {
                        let m = p * inc as f64;
                        let var = m + tau2 / n * m * m;
                        let z: f64 = rng.sample(StandardNormal);
                        (m + var.sqrt() * z).max(0.0)
                    }
                }
            }
        };
        out.push(DVector::from_element(1, v / n));
    }
    Ok(out)
}

/// Protocol for benchmark datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub units: usize,
    pub n_pop: u64,
    pub delta: f64,
    /// Runs whose final size is below this fraction of `N` are early extinctions.
    #[serde(default = "default_extinction_threshold")]
    pub extinction_threshold: f64,
    /// Observation horizon (days).
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Draws allowed per retained unit before giving up.
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
    pub seed: u64,
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

/// A simulated dataset and its bookkeeping.
#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub dataset: Dataset,
    pub grids: Vec<GridStates>,
    /// Parameter draws discarded because of early extinction, per unit.
    pub rejected: Vec<usize>,
}

struct UnitOutcome {
    phi: Vec<f64>,
    grid: GridStates,
    y: Vec<DVector<f64>>,
    rejected: usize,
}

fn simulate_unit(
    theta: &PopulationParams,
    link: &LinkSpec,
    model: &UnitModel,
    cfg: &SimulationConfig,
    u: usize,
) -> Result<UnitOutcome> {
    let mut rng = unit_rng(cfg.seed, u as u64);
    let min_size = (cfg.extinction_threshold * cfg.n_pop as f64).ceil() as i64;
    let limits = RunLimits { t_max: cfg.horizon, stop_at_final_size: None };
    for attempt in 0..cfg.max_attempts {
        let draw = sample_unit_params(theta, link, &mut rng)?;
        let (eta, obs) = match model.resolve(&draw.phi) {
            Ok(v) => v,
            Err(_) => continue,
        };
        let traj = simulate_jump_limited(&model.spec, &eta, cfg.n_pop, limits, &mut rng)?;
        if traj.final_size() < min_size {
            continue;
        }
        let grid = sample_grid(&traj, cfg.delta, cfg.horizon)?;
        if grid.n() == 0 {
            continue;
        }
        let y = observe(&grid, &obs, &mut rng)?;
        return Ok(UnitOutcome { phi: draw.phi, grid, y, rejected: attempt });
    }
    Err(Error::Config(format!(
        "unit {u}: no major outbreak in {} draws; the parameters imply near-certain early extinction",
        cfg.max_attempts
    )))
}

/// Draws `U` units from `θ`, redrawing `φ_u` after each early extinction.
///
/// Unit `u` uses stream `u` of `seed`, so results do not depend on the
/// thread count.
pub fn generate_dataset(
    theta: &PopulationParams,
    model: &UnitModel,
    cfg: &SimulationConfig,
) -> Result<SimulatedDataset> {
    if cfg.units == 0 {
        return Err(Error::Config("number of units must be positive".into()));
    }
    if !(cfg.delta > 0.0) || cfg.n_pop == 0 {
        return Err(Error::Config("need Δ > 0 and N > 0".into()));
    }
    theta.validate()?;
    let link = model.link();
    let outcomes: Vec<Result<UnitOutcome>> =
        (0..cfg.units).into_par_iter().map(|u| simulate_unit(theta, link, model, cfg, u)).collect();
    let mut units = Vec::with_capacity(cfg.units);
    let mut truth = Vec::with_capacity(cfg.units);
    let mut grids = Vec::with_capacity(cfg.units);
    let mut rejected = Vec::with_capacity(cfg.units);
    for (u, o) in outcomes.into_iter().enumerate() {
        let o = o?;
        units.push(UnitSeries { label: u.to_string(), n_pop: cfg.n_pop as f64, y: o.y });
        truth.push(o.phi);
        grids.push(o.grid);
        rejected.push(o.rejected);
    }
    let mut dataset = Dataset::new(cfg.delta, units);
    dataset.true_phi = Some(truth);
    dataset.info.insert("seed".into(), cfg.seed.into());
    dataset.info.insert("rejected_draws".into(), rejected.iter().sum::<usize>().into());
    dataset.info.insert("theta".into(), serde_json::to_value(theta)?);
    dataset.info.insert("link".into(), serde_json::to_value(link)?);
    Ok(SimulatedDataset { dataset, grids, rejected })
}
