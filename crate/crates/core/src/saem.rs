//! SAEM-MCMC estimation of `θ = (β, Γ)`.
//!
//! Each iteration runs a Metropolis-Hastings sweep over the unit effects
//! `ψ_u` (S-step), a stochastic-approximation update of the sufficient
//! statistics `S1 = Σ ψ_u` and `S2 = Σ ψ_u²` (SA-step) and the closed-form
//! maximisation `β = S1/U`, `Γ = S2/U - β²` (M-step).
//!
//! Fixed components are carried as random ones with a working variance `ω`
//! that follows the random-component rule during burn-in and is then
//! multiplied by `K0` every iteration. During burn-in the random variances are
//! annealed: `Γ_m = max(τ0 Γ_{m-1}, Γ̂_m)`.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset};
use crate::error::{Error, Result};
use crate::model::UnitModel;
use crate::popmodel::{default_start_box, link_apply, LinkSpec, PopulationParams};
use crate::rng::unit_rng;

const VARIANCE_FLOOR: f64 = 1e-12;
const RW_TARGET_ACCEPTANCE: f64 = 0.3;
const RW_ADAPT_GAIN: f64 = 0.4;

/// MH proposal for the S-step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Proposal {
    /// Draw from `N(β, Γ)`; the acceptance ratio reduces to the likelihood ratio.
    Prior,
    /// A prior move followed by `ψ + scale · sqrt(Γ) · z`, whose acceptance ratio includes the prior.
    /// `scale` is the starting value; it is tuned towards 30% acceptance during burn-in.
    RandomWalk { scale: f64 },
}

/// Tuning of the algorithm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaemConfig {
    /// `M0`: iterations with step size 1.
    pub burn_in: usize,
    /// `ν0`: step-size exponent after burn-in.
    pub nu0: f64,
    /// `K0`: decay of the working variance of fixed components.
    pub k0: f64,
    /// `μ0`: relative-change threshold of the stopping rule.
    pub mu0: f64,
    /// `M_max`.
    pub max_iter: usize,
    /// `τ0`: annealing factor for random variances during burn-in.
    pub tau0: f64,
    pub consecutive_hits: usize,
    pub mh_iters: usize,
    pub seed: u64,
    /// Per-component interval (ψ scale) for drawing `β0`; `None` uses [`default_init_box`].
    pub init_box: Option<Vec<(f64, f64)>>,
    /// `Γ0`, used for every component.
    pub gamma0: f64,
    pub anneal: bool,
    pub decay_fixed: bool,
    pub proposal: Proposal,
    /// Iterations in a row with every proposal rejected before giving up.
    pub max_stall: usize,
}

impl Default for SaemConfig {
    fn default() -> Self {
        Self::simulation()
    }
}

impl SaemConfig {
    /// Settings for the simulation studies.
    pub fn simulation() -> Self {
        Self {
            burn_in: 500,
            nu0: 0.6,
            k0: 0.87,
            mu0: 1e-3,
            max_iter: 1000,
            tau0: 0.98,
            consecutive_hits: 3,
            mh_iters: 1,
            seed: 0,
            init_box: None,
            gamma0: 1.0,
            anneal: true,
            decay_fixed: true,
            proposal: Proposal::Prior,
            max_stall: 100,
        }
    }

    /// Longer burn-in and a stricter stopping rule for real-data fits.
    pub fn case_study() -> Self {
        Self { burn_in: 5000, mu0: 1e-4, max_iter: 10_000, consecutive_hits: 100, ..Self::simulation() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must lie in (0, 1)")))
            }
        };
        unit("k0", self.k0)?;
        unit("tau0", self.tau0)?;
        if !(self.nu0 > 0.5 && self.nu0 <= 1.0) {
            return Err(Error::Config(format!("nu0 = {} must lie in (0.5, 1]", self.nu0)));
        }
        if !(self.mu0 > 0.0) || !(self.gamma0 > 0.0) {
            return Err(Error::Config("mu0 and gamma0 must be positive".into()));
        }
        if self.max_iter == 0 || self.mh_iters == 0 || self.consecutive_hits == 0 {
            return Err(Error::Config("max_iter, mh_iters and consecutive_hits must be >= 1".into()));
        }
        if let Proposal::RandomWalk { scale } = self.proposal {
            if !(scale > 0.0) {
                return Err(Error::Config(format!("random-walk scale {scale} must be > 0")));
            }
        }
        Ok(())
    }
}

/// Half-width (ψ scale) of the default box for `β0`.
pub const DEFAULT_INIT_HALF_WIDTH: f64 = 1.5;

/// Default box for `β0`: see [`default_start_box`].
pub fn default_init_box(link: &LinkSpec) -> Vec<(f64, f64)> {
    default_start_box(link, DEFAULT_INIT_HALF_WIDTH)
}

/// `α_m`.
pub fn step_size(m: usize, cfg: &SaemConfig) -> f64 {
    if m <= cfg.burn_in {
        1.0
    } else {
        ((m - cfg.burn_in) as f64).powf(-cfg.nu0)
    }
}

/// Log-likelihood of each unit as a function of its effects `ψ_u`.
pub trait UnitLikelihood: Sync {
    fn n_units(&self) -> usize;
    fn loglik(&self, unit: usize, psi: &[f64]) -> f64;
}

/// Filter likelihood of a dataset under a unit model.
pub struct ModelLikelihood<'a> {
    pub model: &'a UnitModel,
    pub data: &'a Dataset,
}

impl UnitLikelihood for ModelLikelihood<'_> {
    fn n_units(&self) -> usize {
        self.data.len()
    }

    fn loglik(&self, unit: usize, psi: &[f64]) -> f64 {
        match link_apply(self.model.link(), psi) {
            Ok(phi) => self.model.loglik(&phi, &self.data.units[unit], self.data.delta),
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

/// Current state of one unit's chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub psi: Vec<f64>,
    pub loglik: f64,
}

/// Working population parameters: `var[j]` is `Γ_j` for random components and `ω_j` for fixed ones.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingParams {
    pub beta: Vec<f64>,
    pub var: Vec<f64>,
    pub random: Vec<bool>,
}

impl WorkingParams {
    /// Estimate with fixed components reported at zero variance.
    pub fn to_population(&self) -> PopulationParams {
        PopulationParams {
            beta: self.beta.clone(),
            gamma: self
                .var
                .iter()
                .zip(&self.random)
                .map(|(v, r)| if *r { *v } else { 0.0 })
                .collect(),
            random: self.random.clone(),
        }
    }

    /// `log p(to; θ) - log p(from; θ)`, summed over components that differ.
    fn logprior_ratio(&self, to: &[f64], from: &[f64]) -> f64 {
        to.iter()
            .zip(from)
            .zip(self.beta.iter().zip(&self.var))
            .filter(|((t, f), _)| t != f)
            .map(|((t, f), (b, v))| -0.5 * ((t - b).powi(2) - (f - b).powi(2)) / v)
            .sum()
    }
}

fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp()
}

/// One MH update of `chain`; returns whether the candidate was accepted.
///
/// A candidate with non-finite log-likelihood is always rejected; a current
/// state at `-∞` is left for any finite candidate.
pub fn mh_step<L: UnitLikelihood + ?Sized, R: Rng + ?Sized>(
    lik: &L,
    unit: usize,
    theta: &WorkingParams,
    proposal: Proposal,
    chain: &mut ChainState,
    rng: &mut R,
) -> bool {
    match proposal {
        Proposal::Prior => {
            let candidate = theta
                .beta
                .iter()
                .zip(&theta.var)
                .map(|(b, v)| b + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            accept_candidate(lik, unit, theta, candidate, false, chain, rng)
        }
        Proposal::RandomWalk { scale } => {
            let steps: Vec<f64> = theta.var.iter().map(|v| scale * v.sqrt()).collect();
            rw_step(lik, unit, theta, &steps, chain, rng)
        }
    }
}

/// Random-walk update with per-component step deviations; zero steps leave a component in place.
fn rw_step<L: UnitLikelihood + ?Sized, R: Rng + ?Sized>(
    lik: &L,
    unit: usize,
    theta: &WorkingParams,
    steps: &[f64],
    chain: &mut ChainState,
    rng: &mut R,
) -> bool {
    let candidate = chain
        .psi
        .iter()
        .zip(steps)
        .map(|(x, s)| if *s > 0.0 { x + s * rng.sample::<f64, _>(StandardNormal) } else { *x })
        .collect();
    accept_candidate(lik, unit, theta, candidate, true, chain, rng)
}

fn accept_candidate<L: UnitLikelihood + ?Sized, R: Rng + ?Sized>(
    lik: &L,
    unit: usize,
    theta: &WorkingParams,
    candidate: Vec<f64>,
    with_prior: bool,
    chain: &mut ChainState,
    rng: &mut R,
) -> bool {
    let ll = lik.loglik(unit, &candidate);
    if !ll.is_finite() {
        return false;
    }
    let log_ratio = if chain.loglik == f64::NEG_INFINITY {
        0.0
    } else if with_prior {
        ll - chain.loglik + theta.logprior_ratio(&candidate, &chain.psi)
    } else {
        ll - chain.loglik
    };
    if accept(log_ratio, rng) {
        chain.psi = candidate;
        chain.loglik = ll;
        true
    } else {
        false
    }
}

/// Random-walk step deviations used by the S-step; `None` disables a move.
struct RwSteps {
    joint: Option<Vec<f64>>,
    fixed: Option<Vec<f64>>,
}

/// `mh_iters` rounds of MH moves on one unit; returns accepted prior, joint and fixed-component moves.
fn s_step<L: UnitLikelihood + ?Sized, R: Rng + ?Sized>(
    lik: &L,
    unit: usize,
    theta: &WorkingParams,
    mh_iters: usize,
    steps: &RwSteps,
    chain: &mut ChainState,
    rng: &mut R,
) -> [usize; 3] {
    let mut acc = [0; 3];
    for _ in 0..mh_iters {
        acc[0] += mh_step(lik, unit, theta, Proposal::Prior, chain, rng) as usize;
        if let Some(s) = &steps.joint {
            acc[1] += rw_step(lik, unit, theta, s, chain, rng) as usize;
        }
        if let Some(s) = &steps.fixed {
            acc[2] += rw_step(lik, unit, theta, s, chain, rng) as usize;
        }
    }
    acc
}

/// Stochastic approximations of `Σ_u ψ_u` and `Σ_u ψ_u²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
}

impl SufficientStats {
    pub fn zeros(c: usize) -> Self {
        Self { s1: vec![0.0; c], s2: vec![0.0; c] }
    }
}

/// `S ← S + α (s(ψ) - S)`.
pub fn sa_update(stats: &mut SufficientStats, chains: &[ChainState], alpha: f64) {
    let c = stats.s1.len();
    let mut sum = vec![0.0; c];
    let mut sum_sq = vec![0.0; c];
    for ch in chains {
        for j in 0..c {
            sum[j] += ch.psi[j];
            sum_sq[j] += ch.psi[j] * ch.psi[j];
        }
    }
    for j in 0..c {
        stats.s1[j] += alpha * (sum[j] - stats.s1[j]);
        stats.s2[j] += alpha * (sum_sq[j] - stats.s2[j]);
    }
}

/// Closed-form maximisation with annealing and fixed-effect decay.
pub fn m_step(
    stats: &SufficientStats,
    prev: &WorkingParams,
    cfg: &SaemConfig,
    m: usize,
    n_units: usize,
) -> WorkingParams {
    let u = n_units as f64;
    let c = stats.s1.len();
    let mut beta = vec![0.0; c];
    let mut var = vec![0.0; c];
    let burn = m <= cfg.burn_in;
    for j in 0..c {
        beta[j] = stats.s1[j] / u;
        let mut hat = stats.s2[j] / u - beta[j] * beta[j];
        if hat < VARIANCE_FLOOR {
            if hat < -1e-10 * (stats.s2[j] / u).abs().max(1.0) {
                log::warn!("negative variance estimate {hat:e} for component {j} floored");
            }
            hat = VARIANCE_FLOOR;
        }
        var[j] = if !prev.random[j] && !burn && cfg.decay_fixed {
            (cfg.k0 * prev.var[j]).max(f64::MIN_POSITIVE)
        } else if burn && cfg.anneal {
            (cfg.tau0 * prev.var[j]).max(hat)
        } else {
            hat
        };
    }
    WorkingParams { beta, var, random: prev.random.clone() }
}

/// Tracks the relative-change stopping rule.
#[derive(Debug, Clone, PartialEq)]
pub struct StopRule {
    pub mu0: f64,
    pub needed: usize,
    pub hits: usize,
}

impl StopRule {
    pub fn new(mu0: f64, needed: usize) -> Self {
        Self { mu0, needed, hits: 0 }
    }

    /// `max_j |θ_j - θ'_j| / |θ_j|`.
    pub fn relative_change(current: &[f64], previous: &[f64]) -> f64 {
        current
            .iter()
            .zip(previous)
            .map(|(a, b)| (a - b).abs() / a.abs().max(1e-12))
            .fold(0.0, f64::max)
    }

    /// Feeds one iteration; returns true once the rule has held `needed` times in a row.
    pub fn update(&mut self, current: &[f64], previous: &[f64]) -> bool {
        if Self::relative_change(current, previous) < self.mu0 {
            self.hits += 1;
        } else {
            self.hits = 0;
        }
        self.hits >= self.needed
    }
}

/// Components monitored by the stopping rule: every `β_j` and `Γ_j` of random components.
pub fn monitored(theta: &WorkingParams) -> Vec<f64> {
    let mut v = theta.beta.clone();
    v.extend(theta.var.iter().zip(&theta.random).filter(|(_, r)| **r).map(|(g, _)| *g));
    v
}

/// One iteration of the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub alpha: f64,
    pub beta: Vec<f64>,
    pub var: Vec<f64>,
    pub acceptance: f64,
}

/// Per-iteration record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SaemTrace {
    pub names: Vec<String>,
    pub rows: Vec<TraceRow>,
}

impl SaemTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,alpha");
        for n in &self.names {
            write!(s, ",beta_{n}").unwrap();
        }
        for n in &self.names {
            write!(s, ",gamma_{n}").unwrap();
        }
        s.push_str(",acceptance\n");
        for r in &self.rows {
            write!(s, "{},{}", r.iteration, fmt_f64(r.alpha)).unwrap();
            for v in r.beta.iter().chain(&r.var) {
                write!(s, ",{}", fmt_f64(*v)).unwrap();
            }
            writeln!(s, ",{}", fmt_f64(r.acceptance)).unwrap();
        }
        s
    }

    /// Largest per-iteration relative change of the monitored components over the last `window` iterations.
    pub fn max_recent_change(&self, random: &[bool], window: usize) -> f64 {
        let pick = |r: &TraceRow| {
            let mut v = r.beta.clone();
            v.extend(r.var.iter().zip(random).filter(|(_, f)| **f).map(|(g, _)| *g));
            v
        };
        let n = self.rows.len();
        let start = n.saturating_sub(window + 1);
        self.rows[start..]
            .windows(2)
            .map(|w| StopRule::relative_change(&pick(&w[1]), &pick(&w[0])))
            .fold(0.0, f64::max)
    }
}

/// Outcome of [`run_saem`].
#[derive(Debug, Clone)]
pub struct SaemResult {
    pub theta: PopulationParams,
    pub working: WorkingParams,
    pub trace: SaemTrace,
    /// Final random-walk scale, when that move is enabled.
    pub rw_scale: Option<f64>,
    pub chains: Vec<ChainState>,
    pub iterations: usize,
    /// True when the stopping rule fired before `max_iter`.
    pub converged: bool,
}

/// Runs SAEM-MCMC for the given per-unit likelihood.
pub fn run_saem<L: UnitLikelihood + ?Sized>(
    lik: &L,
    link: &LinkSpec,
    cfg: &SaemConfig,
) -> Result<SaemResult> {
    cfg.validate()?;
    link.validate()?;
    let n_units = lik.n_units();
    if n_units < 2 {
        return Err(Error::Argument(format!("SAEM needs at least two units, got {n_units}")));
    }
    let c = link.len();
    let bounds = cfg.init_box.clone().unwrap_or_else(|| default_init_box(link));
    if bounds.len() != c {
        return Err(Error::Config(format!("init_box has {} entries, link has {c}", bounds.len())));
    }
    let mut init_rng = unit_rng(cfg.seed, u64::MAX);
    let beta0: Vec<f64> = bounds
        .iter()
        .map(|&(lo, hi)| if hi > lo { init_rng.random_range(lo..hi) } else { lo })
        .collect();
    let mut theta = WorkingParams { beta: beta0, var: vec![cfg.gamma0; c], random: link.random_flags() };

    let mut rngs: Vec<ChaCha8Rng> = (0..n_units).map(|u| unit_rng(cfg.seed, u as u64)).collect();
    let mut chains: Vec<ChainState> = rngs
        .par_iter_mut()
        .enumerate()
        .map(|(u, rng)| {
            let psi: Vec<f64> = theta
                .beta
                .iter()
                .zip(&theta.var)
                .map(|(b, v)| b + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let loglik = lik.loglik(u, &psi);
            ChainState { psi, loglik }
        })
        .collect();

    let mut stats = SufficientStats::zeros(c);
    let mut stop = StopRule::new(cfg.mu0, cfg.consecutive_hits);
    let mut trace = SaemTrace { names: link.names(), rows: Vec::with_capacity(cfg.max_iter) };
    let mut rw_scale = match cfg.proposal {
        Proposal::Prior => None,
        Proposal::RandomWalk { scale } => Some(scale),
    };
    // Step deviations of the fixed-component move, frozen at the end of burn-in.
    let mut fixed_sd: Vec<f64> = vec![cfg.gamma0.sqrt(); c];
    let mut stall = 0usize;
    let mut converged = false;
    let mut m = 0;
    while m < cfg.max_iter {
        m += 1;
        // After burn-in, fixed components leave the joint move and are pulled towards
        // β by a move of their own whose step no longer shrinks with ω.
        let burn = m <= cfg.burn_in;
        let steps = match rw_scale {
            None => RwSteps { joint: None, fixed: None },
            Some(scale) => {
                let joint = (0..c)
                    .map(|j| if theta.random[j] || burn { scale * theta.var[j].sqrt() } else { 0.0 })
                    .collect();
                let fixed: Vec<f64> = (0..c)
                    .map(|j| match (theta.random[j], burn) {
                        (true, _) => 0.0,
                        (false, true) => scale * theta.var[j].sqrt(),
                        (false, false) => scale * fixed_sd[j],
                    })
                    .collect();
                RwSteps { joint: Some(joint), fixed: fixed.iter().any(|s| *s > 0.0).then_some(fixed) }
            }
        };
        let acc = chains
            .par_iter_mut()
            .zip(rngs.par_iter_mut())
            .enumerate()
            .map(|(u, (chain, rng))| s_step(lik, u, &theta, cfg.mh_iters, &steps, chain, rng))
            .reduce(|| [0; 3], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
        let accepted: usize = acc.iter().sum();
        stall = if accepted == 0 { stall + 1 } else { 0 };
        if stall >= cfg.max_stall {
            return Err(Error::Convergence(format!(
                "every proposal rejected for {stall} consecutive iterations (at iteration {m})"
            )));
        }
        let moves = cfg.mh_iters
            * (1 + steps.joint.is_some() as usize + steps.fixed.is_some() as usize);
        if let Some(scale) = rw_scale.as_mut() {
            if burn {
                let rate = acc[1] as f64 / (n_units * cfg.mh_iters) as f64;
                *scale *= 1.0 + RW_ADAPT_GAIN * (rate - RW_TARGET_ACCEPTANCE);
            }
        }
        let alpha = step_size(m, cfg);
        sa_update(&mut stats, &chains, alpha);
        let next = m_step(&stats, &theta, cfg, m, n_units);
        let done = m > cfg.burn_in && stop.update(&monitored(&next), &monitored(&theta));
        theta = next;
        if m == cfg.burn_in {
            fixed_sd = theta.var.iter().map(|v| v.sqrt()).collect();
        }
        trace.rows.push(TraceRow {
            iteration: m,
            alpha,
            beta: theta.beta.clone(),
            var: theta.var.clone(),
            acceptance: accepted as f64 / (n_units * moves) as f64,
        });
        if m % 100 == 0 {
            log::debug!("saem iteration {m}: β = {:?}, Γ = {:?}", theta.beta, theta.var);
        }
        if done {
            converged = true;
            break;
        }
    }
    if chains.iter().any(|ch| ch.loglik == f64::NEG_INFINITY) {
        log::warn!("some chains never reached a finite likelihood");
    }
    Ok(SaemResult {
        theta: theta.to_population(),
        working: theta,
        trace,
        rw_scale,
        chains,
        iterations: m,
        converged,
    })
}
