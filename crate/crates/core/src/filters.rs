//! Gaussian filtering for prevalence and incidence observations.
//!
//! Prevalence data observe the state, `Y_k = B X_k + W_k`, and the usual
//! Kalman recursions apply. Incidence data observe increments,
//! `Y_k = B̃ Δ_k + W_k` with `Δ_k = X_k - X_{k-1} = G_k + (A_{k-1} - I) S_{k-1} + V_k`
//! and `S_k = Δ_1 + … + Δ_k`. The increments are not Markov, so the incidence
//! filter carries a belief about the cumulative sum `S_k` alongside the
//! current increment.
//!
//! [`IncidenceRecursion::Exact`] keeps the cross-covariance between `S_{k-1}`
//! and `Δ_k`, so its log-likelihood equals the joint-Gaussian value.
//! [`IncidenceRecursion::SummedUpdates`] approximates the cumulative belief by
//! the sums of filtered increment means and covariances. The two coincide
//! when every `A_k = I` or when `n <= 2`.
//!
//! Missing observations are encoded as NaN and produce a prediction-only step.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::compartments::{variance_floor, ObservationKind, StateSpaceQuantities};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_logpdf, symmetrize, LN_2PI};

/// Mean and covariance of a Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { mean, cov }
    }

    /// Point mass at `mean`.
    pub fn dirac(mean: DVector<f64>) -> Self {
        let d = mean.len();
        Self { mean, cov: DMatrix::zeros(d, d) }
    }
}

/// One step of a filter run.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub k: usize,
    /// `X̂_k, Ξ̂_k` (or the increment counterparts).
    pub predicted: GaussianBelief,
    /// `X̄_k, T̄_k` (or the increment counterparts). Equal to `predicted` when `y_k` is missing.
    pub updated: GaussianBelief,
    /// `M̂_k, Ω̂_k`.
    pub marginal: GaussianBelief,
    /// Belief about `S_k` after the update (incidence only).
    pub cumulative: Option<GaussianBelief>,
    pub observed: bool,
    /// Contribution of `y_k` to the log-likelihood.
    pub loglik: f64,
}

/// Full output of a filter run.
#[derive(Debug, Clone)]
pub struct FilterTrace {
    pub steps: Vec<FilterStep>,
    pub loglik: f64,
    /// Steps whose innovation covariance needed extra flooring.
    pub floored: Vec<usize>,
}

/// How the incidence filter tracks the cumulative sum of increments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IncidenceRecursion {
    #[default]
    Exact,
    SummedUpdates,
}

fn is_missing(y: &DVector<f64>) -> bool {
    y.iter().any(|v| v.is_nan())
}

fn check_inputs(q: &StateSpaceQuantities, y: &[DVector<f64>], kind: ObservationKind) -> Result<()> {
    if q.kind != kind {
        return Err(Error::Argument(format!(
            "filter for {kind:?} data given {:?} quantities",
            q.kind
        )));
    }
    if y.len() != q.n() {
        return Err(Error::Argument(format!(
            "{} observations for {} intervals",
            y.len(),
            q.n()
        )));
    }
    if let Some(bad) = y.iter().find(|v| v.len() != q.obs_dim()) {
        return Err(Error::Argument(format!(
            "observation of length {}, expected {}",
            bad.len(),
            q.obs_dim()
        )));
    }
    Ok(())
}

/// Innovation covariance factorisation with one flooring retry.
struct Innovation {
    chol: Cholesky<f64, Dyn>,
    floored: bool,
}

impl Innovation {
    fn new(omega: &DMatrix<f64>, floor: f64, k: usize) -> Result<Self> {
        if let Some(chol) = Cholesky::new(omega.clone()) {
            return Ok(Self { chol, floored: false });
        }
        let q = omega.nrows();
        let bumped = omega + DMatrix::identity(q, q) * floor;
        match Cholesky::new(bumped) {
            Some(chol) => Ok(Self { chol, floored: true }),
            None => Err(Error::Numerical(format!(
                "innovation covariance not positive definite at k = {k}"
            ))),
        }
    }

    fn logpdf(&self, resid: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        let q = resid.len();
        let mut z = resid.clone();
        l.solve_lower_triangular_mut(&mut z);
        let logdet: f64 = (0..q).map(|i| l[(i, i)].ln()).sum();
        -0.5 * (q as f64 * LN_2PI + z.norm_squared()) - logdet
    }

    /// `C Ω⁻¹` for a `m × q` cross-covariance `C`.
    fn gain(&self, cross: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(&cross.transpose()).transpose()
    }
}

// ---------------------------------------------------------------------------
// Prevalence
// ---------------------------------------------------------------------------

/// Kalman filter for `X_k = F_k + A_{k-1} X_{k-1} + V_k`, `Y_k = B X_k + W_k`,
/// started from `X_0 ~ init`.
pub fn prevalence_filter(
    q: &StateSpaceQuantities,
    y: &[DVector<f64>],
    init: &GaussianBelief,
) -> Result<FilterTrace> {
    run_prevalence(q, y, init, true)
}

/// Log-likelihood of the prevalence model from a known `x_0`, without a trace.
pub fn prevalence_loglik(q: &StateSpaceQuantities, y: &[DVector<f64>]) -> Result<f64> {
    let init = GaussianBelief::dirac(q.x0.clone());
    run_prevalence(q, y, &init, false).map(|t| t.loglik)
}

fn run_prevalence(
    q: &StateSpaceQuantities,
    y: &[DVector<f64>],
    init: &GaussianBelief,
    record: bool,
) -> Result<FilterTrace> {
    check_inputs(q, y, ObservationKind::Prevalence)?;
    if init.mean.len() != q.dim || init.cov.shape() != (q.dim, q.dim) {
        return Err(Error::Argument("initial belief has the wrong dimension".into()));
    }
    let b = &q.obs_map;
    let bt = b.transpose();
    let floor = variance_floor(q.n_pop);
    let mut mean = init.mean.clone();
    let mut cov = init.cov.clone();
    let mut trace = FilterTrace { steps: Vec::new(), loglik: 0.0, floored: Vec::new() };

    for k in 1..=q.n() {
        let a = q.a(k - 1);
        let x_hat = q.f(k) + a * &mean;
        let mut xi_hat = a * &cov * a.transpose() + q.t(k);
        symmetrize(&mut xi_hat);
        let m_hat = b * &x_hat;
        let mut omega = b * &xi_hat * &bt + q.p(k);
        symmetrize(&mut omega);

        let yk = &y[k - 1];
        let observed = !is_missing(yk);
        let mut ll = 0.0;
        if observed {
            let inn = Innovation::new(&omega, floor, k)?;
            if inn.floored {
                trace.floored.push(k);
            }
            let resid = yk - &m_hat;
            ll = inn.logpdf(&resid);
            let cross = &xi_hat * &bt;
            let gain = inn.gain(&cross);
            mean = &x_hat + &gain * &resid;
            cov = &xi_hat - &gain * cross.transpose();
            symmetrize(&mut cov);
        } else {
            mean = x_hat.clone();
            cov = xi_hat.clone();
        }
        trace.loglik += ll;
        if record {
            trace.steps.push(FilterStep {
                k,
                predicted: GaussianBelief::new(x_hat, xi_hat),
                updated: GaussianBelief::new(mean.clone(), cov.clone()),
                marginal: GaussianBelief::new(m_hat, omega),
                cumulative: None,
                observed,
                loglik: ll,
            });
        }
    }
    if !trace.loglik.is_finite() {
        return Err(Error::Numerical("prevalence log-likelihood is not finite".into()));
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Incidence
// ---------------------------------------------------------------------------

/// Filter for `Y_k = B̃ Δ_k + W_k`, started from `Δ̂_1 = G_1`, `Ξ̂_1 = T_1`.
pub fn incidence_filter(
    q: &StateSpaceQuantities,
    y: &[DVector<f64>],
    recursion: IncidenceRecursion,
) -> Result<FilterTrace> {
    run_incidence(q, y, recursion, true)
}

/// Log-likelihood of the incidence model (exact recursion), without a trace.
pub fn incidence_loglik(q: &StateSpaceQuantities, y: &[DVector<f64>]) -> Result<f64> {
    run_incidence(q, y, IncidenceRecursion::Exact, false).map(|t| t.loglik)
}

fn run_incidence(
    q: &StateSpaceQuantities,
    y: &[DVector<f64>],
    recursion: IncidenceRecursion,
    record: bool,
) -> Result<FilterTrace> {
    check_inputs(q, y, ObservationKind::Incidence)?;
    let d = q.dim;
    let id = DMatrix::<f64>::identity(d, d);
    let b = &q.obs_map;
    let bt = b.transpose();
    let floor = variance_floor(q.n_pop);
    // Belief about S_{k-1} given Y_{1:k-1}.
    let mut s_mean = DVector::<f64>::zeros(d);
    let mut s_cov = DMatrix::<f64>::zeros(d, d);
    let mut trace = FilterTrace { steps: Vec::new(), loglik: 0.0, floored: Vec::new() };

    for k in 1..=q.n() {
        let m = q.a(k - 1) - &id;
        let d_hat = q.g(k) + &m * &s_mean;
        let mut xi_hat = &m * &s_cov * m.transpose() + q.t(k);
        symmetrize(&mut xi_hat);
        // Cov(S_{k-1}, Δ_k); only the exact recursion keeps it.
        let cross_sd = match recursion {
            IncidenceRecursion::Exact => &s_cov * m.transpose(),
            IncidenceRecursion::SummedUpdates => DMatrix::zeros(d, d),
        };
        let m_hat = b * &d_hat;
        let mut omega = b * &xi_hat * &bt + q.p(k);
        symmetrize(&mut omega);

        let yk = &y[k - 1];
        let observed = !is_missing(yk);
        let mut ll = 0.0;
        let (d_bar, t_bar, s_post_mean, s_post_cov, cross_post) = if observed {
            let inn = Innovation::new(&omega, floor, k)?;
            if inn.floored {
                trace.floored.push(k);
            }
            let resid = yk - &m_hat;
            ll = inn.logpdf(&resid);
            let c_d = &xi_hat * &bt;
            let k_d = inn.gain(&c_d);
            let d_bar = &d_hat + &k_d * &resid;
            let mut t_bar = &xi_hat - &k_d * c_d.transpose();
            symmetrize(&mut t_bar);
            match recursion {
                IncidenceRecursion::Exact => {
                    let c_s = &cross_sd * &bt;
                    let k_s = inn.gain(&c_s);
                    let sm = &s_mean + &k_s * &resid;
                    let sc = &s_cov - &k_s * c_s.transpose();
                    let cr = &cross_sd - &k_s * c_d.transpose();
                    (d_bar, t_bar, sm, sc, cr)
                }
                IncidenceRecursion::SummedUpdates => {
                    (d_bar, t_bar, s_mean.clone(), s_cov.clone(), cross_sd)
                }
            }
        } else {
            (d_hat.clone(), xi_hat.clone(), s_mean.clone(), s_cov.clone(), cross_sd)
        };
        s_mean = s_post_mean + &d_bar;
        s_cov = s_post_cov + &t_bar + &cross_post + cross_post.transpose();
        symmetrize(&mut s_cov);

        trace.loglik += ll;
        if record {
            trace.steps.push(FilterStep {
                k,
                predicted: GaussianBelief::new(d_hat, xi_hat),
                updated: GaussianBelief::new(d_bar, t_bar),
                marginal: GaussianBelief::new(m_hat, omega),
                cumulative: Some(GaussianBelief::new(s_mean.clone(), s_cov.clone())),
                observed,
                loglik: ll,
            });
        }
    }
    if !trace.loglik.is_finite() {
        return Err(Error::Numerical("incidence log-likelihood is not finite".into()));
    }
    Ok(trace)
}

/// Log-likelihood for whichever observation kind `q` carries, from a known `x_0`.
pub fn loglik(q: &StateSpaceQuantities, y: &[DVector<f64>]) -> Result<f64> {
    match q.kind {
        ObservationKind::Prevalence => prevalence_loglik(q, y),
        ObservationKind::Incidence => incidence_loglik(q, y),
    }
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

/// Log-density of `y` under the joint Gaussian obtained by unrolling the
/// linear recursions.
///
/// Every `X_k` is written as `μ_k + L_k ε` with `ε = (X_0 - x_0, V_1, …, V_n)`;
/// increments use `L_k - L_{k-1}`. `init` gives the law of `X_0`
/// (default: point mass at `x_0`); it is ignored for incidence data, whose
/// model fixes `X_0 = x_0`.
pub fn exact_loglik_oracle(
    q: &StateSpaceQuantities,
    y: &[DVector<f64>],
    init: Option<&GaussianBelief>,
) -> Result<f64> {
    check_inputs(q, y, q.kind)?;
    let d = q.dim;
    let n = q.n();
    let width = (n + 1) * d;
    let dirac = GaussianBelief::dirac(q.x0.clone());
    let init = match q.kind {
        ObservationKind::Prevalence => init.unwrap_or(&dirac),
        ObservationKind::Incidence => &dirac,
    };

    // Block-diagonal noise covariance.
    let mut noise = DMatrix::<f64>::zeros(width, width);
    noise.view_mut((0, 0), (d, d)).copy_from(&init.cov);
    for k in 1..=n {
        noise.view_mut((k * d, k * d), (d, d)).copy_from(q.t(k));
    }

    let mut means = vec![init.mean.clone()];
    let mut loads = vec![{
        let mut l = DMatrix::<f64>::zeros(d, width);
        l.view_mut((0, 0), (d, d)).fill_with_identity();
        l
    }];
    for k in 1..=n {
        let a = q.a(k - 1);
        means.push(q.f(k) + a * &means[k - 1]);
        let mut l = a * &loads[k - 1];
        for i in 0..d {
            l[(i, k * d + i)] += 1.0;
        }
        loads.push(l);
    }

    let kept: Vec<usize> = (1..=n).filter(|&k| !is_missing(&y[k - 1])).collect();
    let qd = q.obs_dim();
    let rows = kept.len() * qd;
    if rows == 0 {
        return Ok(0.0);
    }
    let mut obs_mean = DVector::<f64>::zeros(rows);
    let mut obs_load = DMatrix::<f64>::zeros(rows, width);
    let mut obs_noise = DMatrix::<f64>::zeros(rows, rows);
    let mut obs = DVector::<f64>::zeros(rows);
    for (r, &k) in kept.iter().enumerate() {
        let (mu, l) = match q.kind {
            ObservationKind::Prevalence => (means[k].clone(), loads[k].clone()),
            ObservationKind::Incidence => (&means[k] - &means[k - 1], &loads[k] - &loads[k - 1]),
        };
        obs_mean.rows_mut(r * qd, qd).copy_from(&(&q.obs_map * mu));
        obs_load.rows_mut(r * qd, qd).copy_from(&(&q.obs_map * l));
        obs_noise.view_mut((r * qd, r * qd), (qd, qd)).copy_from(q.p(k));
        obs.rows_mut(r * qd, qd).copy_from(&y[k - 1]);
    }
    let mut cov = &obs_load * &noise * obs_load.transpose() + obs_noise;
    symmetrize(&mut cov);
    gaussian_logpdf(&obs, &obs_mean, &cov)
}
