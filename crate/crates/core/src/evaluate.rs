//! Model evaluation and study reproduction.
//!
//! Importance-sampling estimates of the observed log-likelihood, post-predictive
//! envelopes from the Gaussian state-space model, segmentation of surveillance
//! series into epidemic periods, and replicate bias studies comparing SAEM with
//! the two-step KM baseline on shared datasets.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{fit_km, nelder_mead, SimplexConfig};
use crate::compartments::{ObservationKind, StateSpaceQuantities};
use crate::data::{fmt_f64, Dataset, UnitSeries};
use crate::error::{Error, Result};
use crate::gillespie::{generate_dataset, SimulationConfig};
use crate::linalg::{gaussian_logpdf, log_sum_exp, psd_cholesky};
use crate::model::UnitModel;
use crate::popmodel::{link_apply, natural_moments, sample_unit_params, PopulationParams};
use crate::rng::{derive_seed, unit_rng};
use crate::saem::{run_saem, ModelLikelihood, SaemConfig};

// ---------------------------------------------------------------------------
// Importance sampling
// ---------------------------------------------------------------------------

/// Estimated `log p(y_u; θ)` of one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitEstimate {
    pub loglik: f64,
    /// Delta-method standard error of `loglik`.
    pub se: f64,
    /// Effective sample size of the importance weights.
    pub ess: f64,
}

/// Importance-sampling estimate over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct IsEstimate {
    pub units: Vec<UnitEstimate>,
    pub total: f64,
    /// Standard error of `total`, treating units as independent.
    pub total_se: f64,
}

/// `log` of the mean of `exp(w)` with its standard error and effective sample size.
pub fn log_mean_exp(w: &[f64]) -> UnitEstimate {
    let n = w.len() as f64;
    let lse = log_sum_exp(w);
    if !lse.is_finite() {
        return UnitEstimate { loglik: lse, se: f64::NAN, ess: 0.0 };
    }
    let loglik = lse - n.ln();
    // Normalised weights w_s / mean(w).
    let rel: Vec<f64> = w.iter().map(|v| (v - loglik).exp()).collect();
    let var = rel.iter().map(|r| (r - 1.0).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sum_sq: f64 = rel.iter().map(|r| r * r).sum();
    UnitEstimate { loglik, se: (var / n).sqrt(), ess: n * n / sum_sq }
}

/// Proposal distribution of the importance sampler.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IsProposal {
    /// The population distribution `p(ψ; θ)`; weights are the filter likelihoods.
    Prior,
    /// Per-unit Gaussian at the conditional mode with curvature-based
    /// covariance, mixed with the prior.
    #[default]
    Laplace,
}

/// Prior share of the Laplace mixture proposal.
const DEFENSIVE_WEIGHT: f64 = 0.2;
/// Variance inflation of the Laplace component.
const LAPLACE_INFLATION: f64 = 2.0;

/// Estimates `log p(y_u; θ)` by importance sampling. Unit `u` uses stream `u` of `seed`.
pub fn is_loglik(
    theta: &PopulationParams,
    model: &UnitModel,
    data: &Dataset,
    n_samples: usize,
    proposal: IsProposal,
    seed: u64,
) -> Result<IsEstimate> {
    if n_samples < 100 {
        return Err(Error::Argument(format!("n_samples = {n_samples} must be at least 100")));
    }
    theta.validate()?;
    let link = model.link();
    let units: Vec<UnitEstimate> = data
        .units
        .par_iter()
        .enumerate()
        .map(|(u, unit)| {
            let mut rng = unit_rng(seed, u as u64);
            let w = match proposal {
                IsProposal::Prior => (0..n_samples)
                    .map(|_| Ok(model.loglik(&sample_unit_params(theta, link, &mut rng)?.phi, unit, data.delta)))
                    .collect::<Result<Vec<f64>>>()?,
                IsProposal::Laplace => laplace_weights(theta, model, unit, data.delta, n_samples, &mut rng)?,
            };
            let est = log_mean_exp(&w);
            if est.loglik == f64::NEG_INFINITY {
                log::warn!("unit {}: every importance weight is zero", unit.label);
            }
            Ok(est)
        })
        .collect::<Result<_>>()?;
    let total = units.iter().map(|e| e.loglik).sum();
    let total_se = units.iter().map(|e| e.se * e.se).sum::<f64>().sqrt();
    Ok(IsEstimate { units, total, total_se })
}

/// Mode and covariance of `log p(y | ψ) + log p(ψ; θ)` over the random components.
fn conditional_laplace<R: Rng + ?Sized>(
    theta: &PopulationParams,
    model: &UnitModel,
    unit: &UnitSeries,
    delta: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let link = model.link();
    let idx: Vec<usize> = (0..theta.dim()).filter(|&j| theta.random[j]).collect();
    let prior_var = DVector::from_iterator(idx.len(), idx.iter().map(|&j| theta.gamma[j]));
    let beta_r = DVector::from_iterator(idx.len(), idx.iter().map(|&j| theta.beta[j]));
    let neg_post = |x: &[f64]| -> f64 {
        let mut psi = theta.beta.clone();
        let mut lp = 0.0;
        for (k, &j) in idx.iter().enumerate() {
            psi[j] = x[k];
            lp -= (x[k] - beta_r[k]).powi(2) / (2.0 * prior_var[k]);
        }
        match link_apply(link, &psi) {
            Ok(phi) => -(model.loglik(&phi, unit, delta) + lp),
            Err(_) => f64::INFINITY,
        }
    };
    let mut start = beta_r.as_slice().to_vec();
    let mut best = neg_post(&start);
    for _ in 0..20 {
        let x: Vec<f64> = (0..idx.len())
            .map(|k| beta_r[k] + prior_var[k].sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let v = neg_post(&x);
        if v < best {
            best = v;
            start = x;
        }
    }
    let cfg = SimplexConfig { initial_step: 0.2, ..SimplexConfig::default() };
    let m = nelder_mead(neg_post, &start, &cfg);
    let mode = DVector::from_vec(m.x);
    let prior_cov = DMatrix::from_diagonal(&prior_var);
    if !m.value.is_finite() {
        return Ok((beta_r, prior_cov));
    }
    let d = idx.len();
    let h: Vec<f64> = (0..d).map(|k| 1e-2 * prior_var[k].sqrt()).collect();
    let f = |x: &DVector<f64>| neg_post(x.as_slice());
    let mut hess = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let e = |sa: f64, sb: f64| {
                let mut x = mode.clone();
                x[a] += sa * h[a];
                x[b] += sb * h[b];
                f(&x)
            };
            let v = (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * h[a] * h[b]);
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    let finite = hess.iter().all(|v| v.is_finite());
    let cov = match hess.cholesky() {
        Some(c) if finite => c.inverse() * LAPLACE_INFLATION,
        _ => prior_cov,
    };
    Ok((mode, cov))
}

/// Log-weights `log p(y | ψ) + log p(ψ; θ) - log q(ψ)` under the defensive Laplace mixture.
fn laplace_weights<R: Rng + ?Sized>(
    theta: &PopulationParams,
    model: &UnitModel,
    unit: &UnitSeries,
    delta: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let link = model.link();
    let idx: Vec<usize> = (0..theta.dim()).filter(|&j| theta.random[j]).collect();
    let d = idx.len();
    if d == 0 {
        let phi = link_apply(link, &theta.beta)?;
        return Ok(vec![model.loglik(&phi, unit, delta); n_samples]);
    }
    let (mode, cov) = conditional_laplace(theta, model, unit, delta, rng)?;
    let beta_r = DVector::from_iterator(d, idx.iter().map(|&j| theta.beta[j]));
    let prior_cov = DMatrix::from_diagonal(&DVector::from_iterator(d, idx.iter().map(|&j| theta.gamma[j])));
    let l_lap = cov.clone().cholesky().ok_or_else(|| Error::Numerical("Laplace covariance".into()))?.l();
    let mut w = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = if rng.random::<f64>() < DEFENSIVE_WEIGHT {
            &beta_r + prior_cov.map(f64::sqrt) * z
        } else {
            &mode + &l_lap * z
        };
        let lp = gaussian_logpdf(&x, &beta_r, &prior_cov)?;
        let lq = log_sum_exp(&[
            DEFENSIVE_WEIGHT.ln() + lp,
            (1.0 - DEFENSIVE_WEIGHT).ln() + gaussian_logpdf(&x, &mode, &cov)?,
        ]);
        let mut psi = theta.beta.clone();
        for (k, &j) in idx.iter().enumerate() {
            psi[j] = x[k];
        }
        let ll = match link_apply(link, &psi) {
            Ok(phi) => model.loglik(&phi, unit, delta),
            Err(_) => f64::NEG_INFINITY,
        };
        w.push(ll + lp - lq);
    }
    Ok(w)
}

// ---------------------------------------------------------------------------
// Post-predictive envelopes
// ---------------------------------------------------------------------------

/// Pointwise summary of simulated observation paths for `k = 1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub delta: f64,
    /// Observation component summarised.
    pub component: usize,
    pub mean: Vec<f64>,
    pub p5: Vec<f64>,
    pub p95: Vec<f64>,
}

impl Envelope {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,mean,p5,p95\n");
        for k in 0..self.len() {
            writeln!(
                s,
                "{},{},{},{}",
                fmt_f64((k + 1) as f64 * self.delta),
                fmt_f64(self.mean[k]),
                fmt_f64(self.p5[k]),
                fmt_f64(self.p95[k])
            )
            .unwrap();
        }
        s
    }

    /// Fraction of non-missing observations inside `[p5, p95]`, over the
    /// envelope's time span.
    pub fn coverage<'a, I: IntoIterator<Item = &'a UnitSeries>>(&self, units: I) -> f64 {
        let (mut inside, mut total) = (0usize, 0usize);
        for unit in units {
            for (k, y) in unit.y.iter().enumerate().take(self.len()) {
                let v = y[self.component];
                if v.is_nan() {
                    continue;
                }
                total += 1;
                if v >= self.p5[k] && v <= self.p95[k] {
                    inside += 1;
                }
            }
        }
        if total == 0 {
            f64::NAN
        } else {
            inside as f64 / total as f64
        }
    }
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn gaussian<R: Rng + ?Sized>(chol: &Option<DMatrix<f64>>, dim: usize, rng: &mut R) -> DVector<f64> {
    match chol {
        Some(l) => l * DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal)),
        None => DVector::zeros(dim),
    }
}

/// One observation path of the Gaussian state-space model.
pub fn simulate_observations<R: Rng + ?Sized>(q: &StateSpaceQuantities, rng: &mut R) -> Result<Vec<DVector<f64>>> {
    let factor = |m: &DMatrix<f64>| -> Result<Option<DMatrix<f64>>> {
        if m.iter().all(|v| *v == 0.0) {
            return Ok(None);
        }
        psd_cholesky(m)
            .map(Some)
            .ok_or_else(|| Error::Numerical("noise covariance is not positive semi-definite".into()))
    };
    let mut x = q.x0.clone();
    let mut out = Vec::with_capacity(q.n());
    for k in 1..=q.n() {
        let next = q.f(k) + q.a(k - 1) * &x + gaussian(&factor(q.t(k))?, q.dim, rng);
        let signal = match q.kind {
            ObservationKind::Prevalence => &q.obs_map * &next,
            ObservationKind::Incidence => &q.obs_map * (&next - &x),
        };
        out.push(signal + gaussian(&factor(q.p(k))?, q.obs_dim(), rng));
        x = next;
    }
    Ok(out)
}

/// Envelope of `n_sim` paths, each from a fresh `φ ~ p(φ; θ)`, over `n` steps.
///
/// Draw `s` uses stream `s` of `seed`; draws whose quantities cannot be
/// computed are replaced by the next stream.
#[allow(clippy::too_many_arguments)]
pub fn post_predictive(
    theta: &PopulationParams,
    model: &UnitModel,
    n_pop: f64,
    delta: f64,
    n: usize,
    n_sim: usize,
    component: usize,
    seed: u64,
) -> Result<Envelope> {
    if n_sim < 100 {
        return Err(Error::Argument(format!("n_sim = {n_sim} must be at least 100")));
    }
    theta.validate()?;
    let link = model.link();
    let paths: Vec<Vec<f64>> = (0..n_sim)
        .into_par_iter()
        .map(|s| {
            let mut stream = s as u64;
            loop {
                let mut rng = unit_rng(seed, stream);
                let draw = sample_unit_params(theta, link, &mut rng)?;
                if let Ok(q) = model.quantities(&draw.phi, n_pop, delta, n) {
                    if component >= q.obs_dim() {
                        return Err(Error::Argument(format!("observation component {component} out of range")));
                    }
                    let ys = simulate_observations(&q, &mut rng)?;
                    return Ok(ys.iter().map(|y| y[component]).collect());
                }
                stream += n_sim as u64;
                if stream > 100 * n_sim as u64 {
                    return Err(Error::Numerical("post-predictive draws keep failing".into()));
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut mean = vec![0.0; n];
    let mut p5 = vec![0.0; n];
    let mut p95 = vec![0.0; n];
    let mut col = vec![0.0; n_sim];
    for k in 0..n {
        for (s, p) in paths.iter().enumerate() {
            col[s] = p[k];
        }
        mean[k] = col.iter().sum::<f64>() / n_sim as f64;
        col.sort_by(f64::total_cmp);
        p5[k] = quantile(&col, 0.05);
        p95[k] = quantile(&col, 0.95);
    }
    Ok(Envelope { delta, component, mean, p5, p95 })
}

// ---------------------------------------------------------------------------
// Segmentation
// ---------------------------------------------------------------------------

/// Rules for cutting a daily surveillance series into epidemic periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    /// Weekly incidence (per 100k) that marks epidemic activity.
    pub threshold: f64,
    /// Shortest window kept, in days.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    /// Days (indices) whose windows are discarded.
    #[serde(default)]
    pub exclude: Vec<usize>,
}

fn default_min_len() -> usize {
    14
}

/// Half-open windows `[start, end)` of epidemic activity.
///
/// A day is active when the trailing 7-day sum exceeds the threshold. Each run
/// of active days `[a, b]` becomes the window `[a - 6, b]` (the days whose
/// cases enter the crossing sums); overlapping windows are merged, zero-valued
/// edge days trimmed, and windows shorter than `min_len` or containing an
/// excluded day dropped.
pub fn segment_epidemics(series: &[f64], cfg: &SegmentConfig) -> Result<Vec<(usize, usize)>> {
    if let Some(i) = series.iter().position(|v| !(*v >= 0.0)) {
        return Err(Error::Data(format!("day {i}: incidence {} is not a nonnegative number", series[i])));
    }
    let mut windows: Vec<(usize, usize)> = Vec::new();
    let mut weekly = 0.0;
    let mut run_start: Option<usize> = None;
    for (i, v) in series.iter().enumerate() {
        weekly += v;
        if i >= 7 {
            weekly -= series[i - 7];
        }
        let active = weekly > cfg.threshold;
        match (active, run_start) {
            (true, None) => run_start = Some(i),
            (false, Some(a)) => {
                windows.push((a.saturating_sub(6), i));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(a) = run_start {
        windows.push((a.saturating_sub(6), series.len()));
    }
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for w in windows {
        match merged.last_mut() {
            Some(last) if w.0 <= last.1 => last.1 = last.1.max(w.1),
            _ => merged.push(w),
        }
    }
    Ok(merged
        .into_iter()
        .filter_map(|(mut a, mut b)| {
            while a < b && series[a] == 0.0 {
                a += 1;
            }
            while b > a && series[b - 1] == 0.0 {
                b -= 1;
            }
            let excluded = cfg.exclude.iter().any(|d| (a..b).contains(d));
            (b - a >= cfg.min_len.max(1) && !excluded).then_some((a, b))
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Bias studies
// ---------------------------------------------------------------------------

/// Estimation method compared in a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Saem,
    Km,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Saem => "saem",
            Method::Km => "km",
        }
    }
}

/// Replicate study settings. Replicate `j` simulates with seed
/// `derive_seed(derive_seed(seed, j), 0)` and fits with streams 1 (SAEM) and 2 (KM).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasStudyConfig {
    pub replicates: usize,
    pub simulation: SimulationConfig,
    pub saem: SaemConfig,
    pub km: SimplexConfig,
    pub methods: Vec<Method>,
    /// Monte-Carlo draws for natural-scale moments of a fitted population.
    pub moment_draws: usize,
    pub seed: u64,
}

/// Natural-scale moments estimated on one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateEstimate {
    pub replicate: usize,
    pub method: Method,
    pub mean_length: f64,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// KM only: moments without units flagged extreme.
    pub trimmed: Option<(Vec<f64>, Vec<f64>)>,
}

/// Outcome of [`bias_study`].
#[derive(Debug, Clone, PartialEq)]
pub struct BiasStudy {
    pub names: Vec<String>,
    pub truth_means: Vec<f64>,
    pub truth_sds: Vec<f64>,
    pub estimates: Vec<ReplicateEstimate>,
    /// `(replicate, method, message)` of failed fits.
    pub failures: Vec<(usize, Method, String)>,
}

/// Summary of one method over replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    pub replicates: usize,
    pub mean_of_means: Vec<f64>,
    pub sd_of_means: Vec<f64>,
    pub mean_of_sds: Vec<f64>,
    pub sd_of_sds: Vec<f64>,
    /// 5/25/50/75/95% quantiles of `estimate - truth`, means then sds.
    pub mean_bias_quantiles: Vec<[f64; 5]>,
    pub sd_bias_quantiles: Vec<[f64; 5]>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

fn five_quantiles(mut v: Vec<f64>) -> [f64; 5] {
    v.sort_by(f64::total_cmp);
    [0.05, 0.25, 0.5, 0.75, 0.95].map(|q| quantile(&v, q))
}

impl BiasStudy {
    pub fn for_method(&self, method: Method) -> Vec<&ReplicateEstimate> {
        self.estimates.iter().filter(|e| e.method == method).collect()
    }

    pub fn summary(&self, method: Method) -> Option<MethodSummary> {
        let est = self.for_method(method);
        if est.is_empty() {
            return None;
        }
        let c = self.names.len();
        let col = |f: &dyn Fn(&ReplicateEstimate) -> f64| -> Vec<f64> { est.iter().map(|e| f(e)).collect() };
        let mut s = MethodSummary {
            method,
            replicates: est.len(),
            mean_of_means: vec![],
            sd_of_means: vec![],
            mean_of_sds: vec![],
            sd_of_sds: vec![],
            mean_bias_quantiles: vec![],
            sd_bias_quantiles: vec![],
        };
        for j in 0..c {
            let means = col(&|e| e.means[j]);
            let sds = col(&|e| e.sds[j]);
            let (a, b) = mean_sd(&means);
            let (x, y) = mean_sd(&sds);
            s.mean_of_means.push(a);
            s.sd_of_means.push(b);
            s.mean_of_sds.push(x);
            s.sd_of_sds.push(y);
            s.mean_bias_quantiles.push(five_quantiles(means.iter().map(|m| m - self.truth_means[j]).collect()));
            s.sd_bias_quantiles.push(five_quantiles(sds.iter().map(|m| m - self.truth_sds[j]).collect()));
        }
        Some(s)
    }

    /// Table with one column per natural mean and standard deviation; rows are
    /// the truth, then mean and sd of the estimates for each method.
    pub fn table_csv(&self) -> String {
        let mut s = String::from("method,row");
        for n in &self.names {
            write!(s, ",E({n})").unwrap();
        }
        for n in &self.names {
            write!(s, ",sd({n})").unwrap();
        }
        s.push('\n');
        let row = |s: &mut String, m: &str, r: &str, a: &[f64], b: &[f64]| {
            write!(s, "{m},{r}").unwrap();
            for v in a.iter().chain(b) {
                write!(s, ",{}", fmt_f64(*v)).unwrap();
            }
            s.push('\n');
        };
        row(&mut s, "truth", "value", &self.truth_means, &self.truth_sds);
        for method in [Method::Saem, Method::Km] {
            if let Some(sum) = self.summary(method) {
                row(&mut s, method.name(), "mean", &sum.mean_of_means, &sum.mean_of_sds);
                row(&mut s, method.name(), "sd", &sum.sd_of_means, &sum.sd_of_sds);
            }
        }
        s
    }

    /// One row per replicate and method.
    pub fn replicates_csv(&self) -> String {
        let mut s = String::from("replicate,method,mean_length");
        for n in &self.names {
            write!(s, ",E({n})").unwrap();
        }
        for n in &self.names {
            write!(s, ",sd({n})").unwrap();
        }
        s.push('\n');
        for e in &self.estimates {
            write!(s, "{},{},{}", e.replicate, e.method.name(), fmt_f64(e.mean_length)).unwrap();
            for v in e.means.iter().chain(&e.sds) {
                write!(s, ",{}", fmt_f64(*v)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn moments_of(theta: &PopulationParams, model: &UnitModel, draws: usize, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rng: ChaCha8Rng = unit_rng(seed, 0);
    let m = natural_moments(theta, model.link(), draws, &mut rng)?;
    Ok(m.into_iter().unzip())
}

/// Fits one dataset with one method, returning natural-scale moments.
pub fn fit_moments(
    method: Method,
    model: &UnitModel,
    data: &Dataset,
    cfg: &BiasStudyConfig,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, Option<(Vec<f64>, Vec<f64>)>)> {
    match method {
        Method::Saem => {
            let saem = SaemConfig { seed, ..cfg.saem.clone() };
            let res = run_saem(&ModelLikelihood { model, data }, model.link(), &saem)?;
            let (m, s) = moments_of(&res.theta, model, cfg.moment_draws, seed)?;
            Ok((m, s, None))
        }
        Method::Km => {
            let km = SimplexConfig { seed, ..cfg.km.clone() };
            let res = fit_km(model, data, &km)?;
            let (m, s): (Vec<f64>, Vec<f64>) = res.moments.iter().copied().unzip();
            let trimmed = res.trimmed.map(|t| t.into_iter().unzip());
            Ok((m, s, trimmed))
        }
    }
}

/// Runs `J` replicates; every method sees the same simulated dataset.
pub fn bias_study(theta: &PopulationParams, model: &UnitModel, cfg: &BiasStudyConfig) -> Result<BiasStudy> {
    if cfg.replicates < 2 {
        return Err(Error::Argument("a bias study needs at least two replicates".into()));
    }
    if cfg.moment_draws < 2 {
        return Err(Error::Argument("moment_draws must be at least 2".into()));
    }
    let (truth_means, truth_sds) = moments_of(theta, model, cfg.moment_draws, cfg.seed)?;
    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for j in 0..cfg.replicates {
        let rep_seed = derive_seed(cfg.seed, j as u64);
        let sim = SimulationConfig { seed: derive_seed(rep_seed, 0), ..cfg.simulation.clone() };
        let data = match generate_dataset(theta, model, &sim) {
            Ok(s) => s.dataset,
            Err(e) => {
                for &m in &cfg.methods {
                    failures.push((j, m, e.to_string()));
                }
                continue;
            }
        };
        for (i, &method) in cfg.methods.iter().enumerate() {
            let seed = derive_seed(rep_seed, 1 + i as u64);
            match fit_moments(method, model, &data, cfg, seed) {
                Ok((means, sds, trimmed)) => estimates.push(ReplicateEstimate {
                    replicate: j,
                    method,
                    mean_length: data.mean_length(),
                    means,
                    sds,
                    trimmed,
                }),
                Err(e) => {
                    log::warn!("replicate {j}, {}: {e}", method.name());
                    failures.push((j, method, e.to_string()));
                }
            }
        }
        log::info!("bias study: replicate {} of {} done", j + 1, cfg.replicates);
    }
    Ok(BiasStudy { names: model.link().names(), truth_means, truth_sds, estimates, failures })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;
    use crate::popmodel::{link_invert, LinkKind, LinkSpec};
    use proptest::collection::vec as pvec;
    use proptest::prelude::{prop_assert_eq, proptest};
    use rand::SeedableRng;
    use std::collections::BTreeMap;

    fn sir_theta() -> PopulationParams {
        PopulationParams::from_random_variances(
            vec![-0.81, 0.92, 1.45, -2.20],
            vec![true, false, true, true],
            &[0.47f64.powi(2), 1.50f64.powi(2), 0.75f64.powi(2)],
        )
        .unwrap()
    }

    #[test]
    fn log_mean_exp_cases() {
        let e = log_mean_exp(&[0.0; 10]);
        assert!(e.loglik.abs() < 1e-15 && e.se == 0.0 && (e.ess - 10.0).abs() < 1e-12);
        let e = log_mean_exp(&[1000.0, 1000.0 + 2f64.ln()]);
        assert!((e.loglik - (1000.0 + 1.5f64.ln())).abs() < 1e-12);
        assert_eq!(log_mean_exp(&[f64::NEG_INFINITY; 3]).loglik, f64::NEG_INFINITY);
    }

    #[test]
    fn degenerate_prior_gives_the_filter_loglik() {
        let model = UnitModel::new(presets::sir_prevalence()).unwrap();
        let theta = PopulationParams::new(vec![-0.7, 0.9, 1.0, -2.0], vec![0.0; 4], vec![false; 4]).unwrap();
        let phi = crate::popmodel::link_apply(model.link(), &theta.beta).unwrap();
        let y = model.mean_observations(&phi, 1e4, 1.0, 30).unwrap();
        let data = Dataset::new(1.0, vec![UnitSeries { label: "a".into(), n_pop: 1e4, y }]);
        let est = is_loglik(&theta, &model, &data, 100, IsProposal::Prior, 1).unwrap();
        let exact = model.loglik(&phi, &data.units[0], 1.0);
        assert!((est.total - exact).abs() < 1e-9 * exact.abs(), "{} vs {exact}", est.total);
        assert!(is_loglik(&theta, &model, &data, 99, IsProposal::Prior, 1).is_err());
    }

    /// Log-normal weights have a closed-form log mean.
    #[test]
    fn log_normal_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mu, s) = (-2.0f64, 0.5f64);
        let n = 20_000;
        let w: Vec<f64> = (0..n).map(|_| mu + s * rng.sample::<f64, _>(StandardNormal)).collect();
        let e = log_mean_exp(&w);
        let exact = mu + s * s / 2.0;
        assert!((e.loglik - exact).abs() < 3.0 * e.se, "{} vs {exact} (se {})", e.loglik, e.se);
    }

    #[test]
    fn standard_error_shrinks_with_samples() {
        let model = UnitModel::new(presets::sir_prevalence()).unwrap();
        let theta = sir_theta();
        let cfg = SimulationConfig { units: 2, n_pop: 10_000, delta: 2.0, extinction_threshold: 0.05, horizon: 365.0, max_attempts: 100, seed: 4 };
        let data = generate_dataset(&theta, &model, &cfg).unwrap().dataset;
        let small = is_loglik(&theta, &model, &data, 100, IsProposal::Prior, 1).unwrap();
        let large = is_loglik(&theta, &model, &data, 1600, IsProposal::Prior, 1).unwrap();
        assert!(large.total_se < small.total_se, "{} vs {}", large.total_se, small.total_se);
    }

    #[test]
    fn laplace_agrees_with_the_prior_proposal() {
        let model = UnitModel::new(presets::sir_prevalence()).unwrap();
        let theta = sir_theta();
        let cfg = SimulationConfig { units: 2, n_pop: 2_000, delta: 4.0, extinction_threshold: 0.05, horizon: 365.0, max_attempts: 100, seed: 6 };
        let data = generate_dataset(&theta, &model, &cfg).unwrap().dataset;
        let prior = is_loglik(&theta, &model, &data, 20_000, IsProposal::Prior, 2).unwrap();
        let lap = is_loglik(&theta, &model, &data, 500, IsProposal::Laplace, 2).unwrap();
        for (p, l) in prior.units.iter().zip(&lap.units) {
            let tol = 4.0 * (p.se.powi(2) + l.se.powi(2)).sqrt();
            assert!((p.loglik - l.loglik).abs() < tol, "prior {p:?}, laplace {l:?}");
            assert!(l.ess / 500.0 > p.ess / 20_000.0);
        }
        let fixed = PopulationParams::new(vec![-0.7, 0.9, 1.0, -2.0], vec![0.0; 4], vec![false; 4]).unwrap();
        let a = is_loglik(&fixed, &model, &data, 100, IsProposal::Laplace, 1).unwrap();
        let b = is_loglik(&fixed, &model, &data, 100, IsProposal::Prior, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert!((quantile(&v, 0.05) - 1.2).abs() < 1e-12);
        assert_eq!(quantile(&v, 1.0), 5.0);
    }

    #[test]
    fn degenerate_envelope_collapses_to_the_mean_curve() {
        // Γ = 0 and an effectively infinite population: no noise left.
        let model = UnitModel::new(presets::sir_prevalence()).unwrap();
        let theta = PopulationParams::new(vec![-0.7, 0.9, 1.0, -2.0], vec![0.0; 4], vec![false; 4]).unwrap();
        let env = post_predictive(&theta, &model, 1e300, 1.0, 25, 100, 0, 2).unwrap();
        let phi = crate::popmodel::link_apply(model.link(), &theta.beta).unwrap();
        let mean = model.mean_observations(&phi, 1e300, 1.0, 25).unwrap();
        for k in 0..25 {
            assert!((env.p5[k] - mean[k][0]).abs() < 1e-12);
            assert!((env.p95[k] - mean[k][0]).abs() < 1e-12);
            assert!((env.mean[k] - mean[k][0]).abs() < 1e-12);
        }
    }

    #[test]
    fn bands_contain_the_mean_curve() {
        let model = UnitModel::new(presets::sir_prevalence()).unwrap();
        let env = post_predictive(&sir_theta(), &model, 1e4, 1.0, 40, 400, 0, 3).unwrap();
        for k in 0..env.len() {
            assert!(env.p5[k] <= env.mean[k] && env.mean[k] <= env.p95[k], "k = {k}");
        }
        let csv = env.to_csv();
        assert!(csv.starts_with("t,mean,p5,p95\n1.0,"));
    }

    #[test]
    fn simulated_paths_average_to_the_mean_curve() {
        let model = UnitModel::new(presets::sir_prevalence()).unwrap();
        let phi = [1.8, 2.5, 0.6, 0.05];
        let q = model.quantities(&phi, 1e4, 1.0, 20).unwrap();
        let mean = model.mean_observations(&phi, 1e4, 1.0, 20).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let reps = 4000;
        let mut acc = vec![0.0; 20];
        let mut acc2 = vec![0.0; 20];
        for _ in 0..reps {
            for (k, y) in simulate_observations(&q, &mut rng).unwrap().iter().enumerate() {
                acc[k] += y[0];
                acc2[k] += y[0] * y[0];
            }
        }
        for k in 0..20 {
            let m = acc[k] / reps as f64;
            let sd = (acc2[k] / reps as f64 - m * m).sqrt();
            assert!((m - mean[k][0]).abs() < 4.0 * sd / (reps as f64).sqrt() + 1e-15, "k = {k}");
        }
    }

    #[test]
    fn incidence_paths_use_increments() {
        let cfg = presets::seir_incidence(1.9, 4.1, 0.3, 1e-9);
        let model = UnitModel::new(cfg).unwrap();
        let phi = [2.2, 0.5, 1e-3];
        let q = model.quantities(&phi, 1e5, 1.0, 30).unwrap();
        let mean = model.mean_observations(&phi, 1e5, 1.0, 30).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let reps = 2000;
        let mut acc = vec![0.0; 30];
        for _ in 0..reps {
            for (k, y) in simulate_observations(&q, &mut rng).unwrap().iter().enumerate() {
                acc[k] += y[0] / reps as f64;
            }
        }
        let peak = mean.iter().map(|v| v[0]).fold(0.0, f64::max);
        for k in 0..30 {
            assert!((acc[k] - mean[k][0]).abs() < 0.05 * peak, "k = {k}: {} vs {}", acc[k], mean[k][0]);
        }
    }

    fn seg(series: &[f64]) -> Vec<(usize, usize)> {
        segment_epidemics(series, &SegmentConfig { threshold: 160.0, min_len: 7, exclude: vec![] }).unwrap()
    }

    #[test]
    fn segmentation_examples() {
        assert!(seg(&[0.0; 100]).is_empty());
        let mut s = vec![0.0; 100];
        for v in &mut s[40..70] {
            *v = 30.0;
        }
        assert_eq!(seg(&s), vec![(40, 70)]);
        let mut low = vec![0.0; 100];
        for v in &mut low[40..70] {
            *v = 20.0;
        }
        assert!(seg(&low).is_empty());
        assert!(segment_epidemics(&[1.0, -1.0], &SegmentConfig { threshold: 1.0, min_len: 1, exclude: vec![] }).is_err());
    }

    #[test]
    fn segmentation_exclusion_and_min_length() {
        let mut s = vec![0.0; 200];
        for v in &mut s[20..50] {
            *v = 30.0;
        }
        for v in &mut s[120..130] {
            *v = 40.0;
        }
        assert_eq!(seg(&s), vec![(20, 50), (120, 130)]);
        let cfg = SegmentConfig { threshold: 160.0, min_len: 15, exclude: vec![] };
        assert_eq!(segment_epidemics(&s, &cfg).unwrap(), vec![(20, 50)]);
        let cfg = SegmentConfig { threshold: 160.0, min_len: 7, exclude: vec![25] };
        assert_eq!(segment_epidemics(&s, &cfg).unwrap(), vec![(120, 130)]);
    }

    proptest! {
        #[test]
        fn segmentation_ignores_padding_and_is_idempotent(
            body in pvec(0.0f64..60.0, 1..120),
            lead in 0usize..20,
            tail in 0usize..20,
        ) {
            let base = seg(&body);
            let mut padded = vec![0.0; lead];
            padded.extend(&body);
            padded.extend(vec![0.0; tail]);
            let shifted: Vec<(usize, usize)> = base.iter().map(|(a, b)| (a + lead, b + lead)).collect();
            prop_assert_eq!(seg(&padded), shifted);
            let mut masked = vec![0.0; body.len()];
            for &(a, b) in &base {
                masked[a..b].copy_from_slice(&body[a..b]);
            }
            prop_assert_eq!(seg(&masked), base);
        }
    }

    #[test]
    fn bias_study_is_exact_without_variability() {
        // Γ = 0 and a huge population: every dataset is the deterministic curve.
        let mut mc = presets::sir_prevalence();
        mc.link = LinkSpec::from_triples(&[("r0", LinkKind::ShiftedLogExp, true), ("p", LinkKind::Logit, true)]).unwrap();
        mc.constants = BTreeMap::from([("d".into(), 2.5), ("i0".into(), 0.05)]);
        let model = UnitModel::new(mc).unwrap();
        let beta = link_invert(model.link(), &[1.8, 0.6]).unwrap();
        let theta = PopulationParams::new(beta, vec![0.0, 0.0], vec![false, false]).unwrap();
        let cfg = BiasStudyConfig {
            replicates: 2,
            simulation: SimulationConfig { units: 3, n_pop: 1_000_000, delta: 1.0, extinction_threshold: 0.05, horizon: 60.0, max_attempts: 10, seed: 0 },
            saem: SaemConfig::simulation(),
            km: SimplexConfig { n_starts: 2, max_evals: 600, ..SimplexConfig::default() },
            methods: vec![Method::Km],
            moment_draws: 1000,
            seed: 7,
        };
        let study = bias_study(&theta, &model, &cfg).unwrap();
        assert!(study.failures.is_empty());
        let km = study.summary(Method::Km).unwrap();
        assert_eq!(km.replicates, 2);
        for j in 0..2 {
            assert!((km.mean_of_means[j] / study.truth_means[j] - 1.0).abs() < 0.02, "{:?}", km);
            assert!(km.mean_of_sds[j] < 0.02 * study.truth_means[j]);
        }
        assert!(study.table_csv().starts_with("method,row,E(r0),E(p),sd(r0),sd(p)\ntruth,value,"));
    }
}
