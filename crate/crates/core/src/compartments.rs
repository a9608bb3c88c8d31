//! Compartmental models and the Gaussian AR(1) state-space quantities derived from them.
//!
//! A [`ModelSpec`] lists mass-action events (a rate constant times a monomial in
//! the tracked proportions, and an integer jump vector in count space). From it
//! we get the drift `b`, the diffusion matrix `Σ` and its Cholesky factor, the
//! limiting ODE, the resolvent `Φ(t, s)` of the linearised ODE and finally, per
//! sampling interval:
//!
//! - `A_{k-1} = Φ(t_k, t_{k-1})`
//! - `F_k = x(t_k) - A_{k-1} x(t_{k-1})`
//! - `T_k = (1/N) ∫ Φ(t_k, s) Σ(x(s)) Φ(t_k, s)' ds`
//! - `G_k = x(t_k) - x_0 - A_{k-1} (x(t_{k-1}) - x_0)`
//!
//! together with the observation map and noise covariance of the chosen
//! [`ObservationScheme`].
//!
//! All integration is fixed-step RK4 on a sub-grid of `Δ / substeps`, and the
//! resolvent is obtained by integrating the variational equation alongside the
//! state on that same sub-grid. `T_k` uses the trapezoidal rule on the sub-grid.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{clip_to_psd, invert_in_place, psd_cholesky, symmetrize};

/// Default number of RK4 sub-steps per sampling interval.
pub const DEFAULT_SUBSTEPS: usize = 20;

/// States may leave `[0, 1]` by at most this much before being clipped back.
const CLIP_TOL: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Model description
// ---------------------------------------------------------------------------

/// One transition of the jump process.
///
/// The per-capita rate is `rates[rate] * Π_j x_j^exponents[j]`; when the event
/// fires the count vector moves by `jump`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub rate: usize,
    pub exponents: Vec<u32>,
    pub jump: Vec<i64>,
}

/// A density-dependent compartmental model over `d` tracked proportions.
///
/// The untracked last compartment (R) is implied by conservation. Compartment 0
/// is the susceptible class by convention; the simulator uses it to measure
/// final size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub compartments: Vec<String>,
    pub rate_names: Vec<String>,
    pub events: Vec<Event>,
}

#[derive(Deserialize)]
struct RawModel {
    name: String,
    compartments: Vec<String>,
    rates: Vec<String>,
    events: Vec<RawEvent>,
}

#[derive(Deserialize)]
struct RawEvent {
    rate: String,
    #[serde(default)]
    monomial: BTreeMap<String, u32>,
    jump: BTreeMap<String, i64>,
}

impl ModelSpec {
    /// S → I at `λ s i`, I → R at `γ i`; rates `(λ, γ)`.
    pub fn sir() -> Self {
        Self {
            name: "sir".into(),
            compartments: vec!["s".into(), "i".into()],
            rate_names: vec!["lambda".into(), "gamma".into()],
            events: vec![
                Event { rate: 0, exponents: vec![1, 1], jump: vec![-1, 1] },
                Event { rate: 1, exponents: vec![0, 1], jump: vec![0, -1] },
            ],
        }
    }

    /// S → E at `λ s i`, E → I at `ε e`, I → R at `γ i`; rates `(λ, ε, γ)`.
    pub fn seir() -> Self {
        Self {
            name: "seir".into(),
            compartments: vec!["s".into(), "e".into(), "i".into()],
            rate_names: vec!["lambda".into(), "epsilon".into(), "gamma".into()],
            events: vec![
                Event { rate: 0, exponents: vec![1, 0, 1], jump: vec![-1, 1, 0] },
                Event { rate: 1, exponents: vec![0, 1, 0], jump: vec![0, -1, 1] },
                Event { rate: 2, exponents: vec![0, 0, 1], jump: vec![0, 0, -1] },
            ],
        }
    }

    /// Built-in model by name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "sir" => Ok(Self::sir()),
            "seir" => Ok(Self::seir()),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }

    /// Parses a TOML model description.
    ///
    /// ```toml
    /// name = "sir"
    /// compartments = ["s", "i"]
    /// rates = ["lambda", "gamma"]
    ///
    /// [[events]]
    /// rate = "lambda"
    /// monomial = { s = 1, i = 1 }
    /// jump = { s = -1, i = 1 }
    /// ```
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawModel =
            toml::from_str(text).map_err(|e| Error::Config(format!("model description: {e}")))?;
        let d = raw.compartments.len();
        if d == 0 {
            return Err(Error::Config("model has no compartments".into()));
        }
        let index_of = |name: &str| -> Result<usize> {
            raw.compartments
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| Error::Config(format!("unknown compartment `{name}`")))
        };
        let mut events = Vec::with_capacity(raw.events.len());
        for ev in &raw.events {
            let rate = raw
                .rates
                .iter()
                .position(|r| *r == ev.rate)
                .ok_or_else(|| Error::Config(format!("unknown rate `{}`", ev.rate)))?;
            let mut exponents = vec![0; d];
            for (name, power) in &ev.monomial {
                exponents[index_of(name)?] = *power;
            }
            let mut jump = vec![0; d];
            for (name, delta) in &ev.jump {
                jump[index_of(name)?] = *delta;
            }
            events.push(Event { rate, exponents, jump });
        }
        let spec = Self {
            name: raw.name,
            compartments: raw.compartments,
            rate_names: raw.rates,
            events,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        for (i, ev) in self.events.iter().enumerate() {
            if ev.exponents.len() != d || ev.jump.len() != d {
                return Err(Error::Config(format!("event {i}: vectors must have length {d}")));
            }
            if ev.rate >= self.rate_names.len() {
                return Err(Error::Config(format!("event {i}: rate index out of range")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.compartments.len()
    }

    /// Per-capita propensity of `event` at proportions `x`.
    #[inline]
    pub fn propensity(&self, event: &Event, rates: &[f64], x: &[f64]) -> f64 {
        let mut r = rates[event.rate];
        for (xj, &a) in x.iter().zip(&event.exponents) {
            match a {
                0 => {}
                1 => r *= xj,
                _ => r *= xj.powi(a as i32),
            }
        }
        r
    }

    fn drift_into(&self, rates: &[f64], x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for ev in &self.events {
            let r = self.propensity(ev, rates, x);
            for (o, &j) in out.iter_mut().zip(&ev.jump) {
                if j != 0 {
                    *o += j as f64 * r;
                }
            }
        }
    }

    /// Row-major Jacobian `∂b_i/∂x_j`.
    fn jacobian_into(&self, rates: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        for ev in &self.events {
            for j in 0..d {
                let a = ev.exponents[j];
                if a == 0 {
                    continue;
                }
                let mut dr = rates[ev.rate] * a as f64;
                for (l, (&xl, &al)) in x.iter().zip(&ev.exponents).enumerate() {
                    let p = if l == j { al - 1 } else { al };
                    match p {
                        0 => {}
                        1 => dr *= xl,
                        _ => dr *= xl.powi(p as i32),
                    }
                }
                for i in 0..d {
                    if ev.jump[i] != 0 {
                        out[i * d + j] += ev.jump[i] as f64 * dr;
                    }
                }
            }
        }
    }

    /// Row-major `Σ = Σ_events jump jump' · rate`.
    fn diffusion_into(&self, rates: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        out.iter_mut().for_each(|v| *v = 0.0);
        for ev in &self.events {
            let r = self.propensity(ev, rates, x);
            if r == 0.0 {
                continue;
            }
            for i in 0..d {
                if ev.jump[i] == 0 {
                    continue;
                }
                for j in 0..d {
                    out[i * d + j] += (ev.jump[i] * ev.jump[j]) as f64 * r;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Epidemic parameters
// ---------------------------------------------------------------------------

/// Rate constants and initial proportions of one epidemic (`η`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiParams {
    pub rates: Vec<f64>,
    pub x0: Vec<f64>,
}

impl EpiParams {
    /// Raw constructor; rates must be nonnegative and `x0` a sub-probability vector.
    pub fn from_rates(rates: Vec<f64>, x0: Vec<f64>) -> Result<Self> {
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Parameter(format!("rates must be finite and >= 0: {rates:?}")));
        }
        if x0.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Parameter(format!("initial proportions outside [0, 1]: {x0:?}")));
        }
        if x0.iter().sum::<f64>() > 1.0 + CLIP_TOL {
            return Err(Error::Parameter(format!("initial proportions sum above 1: {x0:?}")));
        }
        Ok(Self { rates, x0 })
    }

    /// SIR in the `(R0, d, s0, i0)` parameterisation: `λ = R0/d`, `γ = 1/d`.
    pub fn sir(r0: f64, d: f64, s0: f64, i0: f64) -> Result<Self> {
        if !(r0 > 1.0) || !(d > 0.0) {
            return Err(Error::Parameter(format!("need R0 > 1 and d > 0, got R0={r0}, d={d}")));
        }
        check_open_unit(&[s0, i0])?;
        Self::from_rates(vec![r0 / d, 1.0 / d], vec![s0, i0])
    }

    /// SEIR in the `(R0, d_E, d_I, s0, e0, i0)` parameterisation:
    /// `λ = R0/d_I`, `ε = 1/d_E`, `γ = 1/d_I`.
    pub fn seir(r0: f64, d_e: f64, d_i: f64, s0: f64, e0: f64, i0: f64) -> Result<Self> {
        if !(r0 > 1.0) || !(d_e > 0.0) || !(d_i > 0.0) {
            return Err(Error::Parameter(format!(
                "need R0 > 1 and positive durations, got R0={r0}, d_E={d_e}, d_I={d_i}"
            )));
        }
        check_open_unit(&[s0, e0, i0])?;
        Self::from_rates(vec![r0 / d_i, 1.0 / d_e, 1.0 / d_i], vec![s0, e0, i0])
    }
}

fn check_open_unit(v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(*x > 0.0 && *x < 1.0)) {
        return Err(Error::Parameter(format!("initial proportions must lie in (0, 1): {v:?}")));
    }
    if v.iter().sum::<f64>() > 1.0 + CLIP_TOL {
        return Err(Error::Parameter(format!("initial proportions sum above 1: {v:?}")));
    }
    Ok(())
}

fn check_state(model: &ModelSpec, eta: &EpiParams, x: &[f64]) -> Result<()> {
    if x.len() != model.dim() {
        return Err(Error::Argument(format!(
            "state has length {}, model `{}` has dimension {}",
            x.len(),
            model.name,
            model.dim()
        )));
    }
    if eta.rates.len() != model.rate_names.len() {
        return Err(Error::Argument(format!(
            "model `{}` needs {} rates, got {}",
            model.name,
            model.rate_names.len(),
            eta.rates.len()
        )));
    }
    if let Some(v) = x.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(format!("negative or non-finite state component {v}")));
    }
    Ok(())
}

/// Drift `b(η, x)`.
pub fn drift(model: &ModelSpec, eta: &EpiParams, x: &[f64]) -> Result<DVector<f64>> {
    check_state(model, eta, x)?;
    let mut out = vec![0.0; model.dim()];
    model.drift_into(&eta.rates, x, &mut out);
    Ok(DVector::from_vec(out))
}

/// Jacobian `∇_x b(η, x)`.
pub fn jacobian(model: &ModelSpec, eta: &EpiParams, x: &[f64]) -> Result<DMatrix<f64>> {
    check_state(model, eta, x)?;
    let d = model.dim();
    let mut out = vec![0.0; d * d];
    model.jacobian_into(&eta.rates, x, &mut out);
    Ok(DMatrix::from_row_slice(d, d, &out))
}

/// Diffusion matrix `Σ(η, x)` and a lower-triangular `σ` with `σσ' = Σ`.
pub fn diffusion(
    model: &ModelSpec,
    eta: &EpiParams,
    x: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_state(model, eta, x)?;
    let d = model.dim();
    let mut out = vec![0.0; d * d];
    model.diffusion_into(&eta.rates, x, &mut out);
    let sigma = DMatrix::from_row_slice(d, d, &out);
    let chol = psd_cholesky(&sigma)
        .ok_or_else(|| Error::Domain("diffusion matrix is not positive semi-definite".into()))?;
    Ok((sigma, chol))
}

// ---------------------------------------------------------------------------
// ODE integration
// ---------------------------------------------------------------------------

/// Solution of the limiting ODE on the grid `t_k = kΔ` and its RK4 sub-grid.
#[derive(Debug, Clone)]
pub struct OdeTrajectory {
    pub dim: usize,
    pub delta: f64,
    pub substeps: usize,
    /// Number of sampling intervals.
    pub n: usize,
    /// Row-major sub-grid states, `n * substeps + 1` rows of `dim`.
    pub states: Vec<f64>,
}

impl OdeTrajectory {
    pub fn step(&self) -> f64 {
        self.delta / self.substeps as f64
    }

    pub fn n_sub(&self) -> usize {
        self.n * self.substeps + 1
    }

    pub fn sub_state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    /// `x(t_k)`.
    pub fn grid_state(&self, k: usize) -> &[f64] {
        self.sub_state(k * self.substeps)
    }

    pub fn grid_times(&self) -> Vec<f64> {
        (0..=self.n).map(|k| k as f64 * self.delta).collect()
    }

    /// Sub-grid index of time `t`, if `t` lies on the sub-grid.
    pub fn sub_index(&self, t: f64) -> Option<usize> {
        let h = self.step();
        let j = (t / h).round();
        if j < 0.0 || (j * h - t).abs() > 1e-9 * t.abs().max(1.0) {
            return None;
        }
        let j = j as usize;
        (j < self.n_sub()).then_some(j)
    }
}

/// RK4 integrator for the state and, optionally, the variational matrix.
struct Rk4<'a> {
    model: &'a ModelSpec,
    rates: &'a [f64],
    d: usize,
    kx: [Vec<f64>; 4],
    kp: [Vec<f64>; 4],
    xt: Vec<f64>,
    pt: Vec<f64>,
    jac: Vec<f64>,
}

impl<'a> Rk4<'a> {
    fn new(model: &'a ModelSpec, rates: &'a [f64]) -> Self {
        let d = model.dim();
        let v = |n: usize| vec![0.0; n];
        Self {
            model,
            rates,
            d,
            kx: [v(d), v(d), v(d), v(d)],
            kp: [v(d * d), v(d * d), v(d * d), v(d * d)],
            xt: v(d),
            pt: v(d * d),
            jac: v(d * d),
        }
    }

    fn step(&mut self, x: &mut [f64], mut phi: Option<&mut [f64]>, h: f64) {
        const C: [f64; 4] = [0.0, 0.5, 0.5, 1.0];
        let d = self.d;
        for s in 0..4 {
            let c = C[s] * h;
            if s == 0 {
                self.xt.copy_from_slice(x);
            } else {
                let (prev, _) = self.kx.split_at(s);
                for i in 0..d {
                    self.xt[i] = x[i] + c * prev[s - 1][i];
                }
            }
            self.model.drift_into(self.rates, &self.xt, &mut self.kx[s]);
            if let Some(p) = phi.as_deref() {
                if s == 0 {
                    self.pt.copy_from_slice(p);
                } else {
                    let (prev, _) = self.kp.split_at(s);
                    for i in 0..d * d {
                        self.pt[i] = p[i] + c * prev[s - 1][i];
                    }
                }
                self.model.jacobian_into(self.rates, &self.xt, &mut self.jac);
                let out = &mut self.kp[s];
                for i in 0..d {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for l in 0..d {
                            acc += self.jac[i * d + l] * self.pt[l * d + j];
                        }
                        out[i * d + j] = acc;
                    }
                }
            }
        }
        let w = h / 6.0;
        for i in 0..d {
            x[i] += w * (self.kx[0][i] + 2.0 * self.kx[1][i] + 2.0 * self.kx[2][i] + self.kx[3][i]);
        }
        if let Some(p) = phi.as_deref_mut() {
            for i in 0..d * d {
                p[i] += w * (self.kp[0][i] + 2.0 * self.kp[1][i] + 2.0 * self.kp[2][i] + self.kp[3][i]);
            }
        }
    }
}

/// Clips tiny excursions outside the simplex; larger ones are an error.
fn project_state(x: &mut [f64], t: f64) -> Result<()> {
    for v in x.iter_mut() {
        if !v.is_finite() {
            return Err(Error::Integration(format!("non-finite state at t = {t}")));
        }
        if *v < 0.0 {
            if *v < -CLIP_TOL {
                return Err(Error::Integration(format!(
                    "state component {v:e} below 0 at t = {t}; reduce Δ or raise substeps"
                )));
            }
            *v = 0.0;
        } else if *v > 1.0 {
            if *v > 1.0 + CLIP_TOL {
                return Err(Error::Integration(format!("state component {v} above 1 at t = {t}")));
            }
            *v = 1.0;
        }
    }
    let total: f64 = x.iter().sum();
    if total > 1.0 + CLIP_TOL {
        return Err(Error::Integration(format!("state proportions sum to {total} at t = {t}")));
    }
    Ok(())
}

/// Integrates the limiting ODE on `[0, t_end]` with grid step `Δ`.
pub fn solve_ode(
    model: &ModelSpec,
    eta: &EpiParams,
    t_end: f64,
    delta: f64,
    substeps: usize,
) -> Result<OdeTrajectory> {
    if !(delta > 0.0) || substeps == 0 || !(t_end >= 0.0) {
        return Err(Error::Argument(format!(
            "need Δ > 0, substeps >= 1 and t_end >= 0 (got Δ={delta}, substeps={substeps}, t_end={t_end})"
        )));
    }
    check_state(model, eta, &eta.x0)?;
    let d = model.dim();
    let n = (t_end / delta - 1e-9).ceil().max(0.0) as usize;
    let h = delta / substeps as f64;
    let total = n * substeps;
    let mut states = Vec::with_capacity((total + 1) * d);
    let mut x = eta.x0.clone();
    states.extend_from_slice(&x);
    let mut rk = Rk4::new(model, &eta.rates);
    for j in 0..total {
        rk.step(&mut x, None, h);
        project_state(&mut x, (j + 1) as f64 * h)?;
        states.extend_from_slice(&x);
    }
    Ok(OdeTrajectory { dim: d, delta, substeps, n, states })
}

/// Resolvent `Φ(t, s)` of the linearised ODE along `trajectory`.
///
/// Both times must lie on the trajectory's RK4 sub-grid.
pub fn resolvent(
    model: &ModelSpec,
    eta: &EpiParams,
    s: f64,
    t: f64,
    trajectory: &OdeTrajectory,
) -> Result<DMatrix<f64>> {
    if s > t {
        return Err(Error::Argument(format!("resolvent needs s <= t, got s={s}, t={t}")));
    }
    let js = trajectory
        .sub_index(s)
        .ok_or_else(|| Error::Argument(format!("s = {s} is not on the solver sub-grid")))?;
    let jt = trajectory
        .sub_index(t)
        .ok_or_else(|| Error::Argument(format!("t = {t} is not on the solver sub-grid")))?;
    let d = model.dim();
    let mut x = trajectory.sub_state(js).to_vec();
    let mut phi = identity_flat(d);
    let mut rk = Rk4::new(model, &eta.rates);
    let h = trajectory.step();
    for _ in js..jt {
        rk.step(&mut x, Some(&mut phi), h);
        // Matches `solve_ode` exactly; projection keeps the two paths identical.
        project_state(&mut x, t)?;
    }
    Ok(DMatrix::from_row_slice(d, d, &phi))
}

fn identity_flat(d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    v
}

// ---------------------------------------------------------------------------
// Observation schemes and state-space quantities
// ---------------------------------------------------------------------------

/// Whether observations measure states (prevalence) or increments (incidence).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationKind {
    Prevalence,
    Incidence,
}

/// Variance model for incidence observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum IncidenceNoise {
    /// `P̃_k = (1/N) (1 - p) m_k`, binomial thinning of the new cases.
    Binomial,
    /// `P̃_k = (1/N) (m_k + τ² m_k²)`.
    Overdispersed { tau2: f64 },
}

/// How a unit's epidemic is observed.
///
/// Prevalence: `B = p e_j'`, `P_k = p (1-p) x_j(t_k) / N`.
/// Incidence: `B̃ = -p Σ_{j∈C} e_j'`, noise per [`IncidenceNoise`] with
/// `m_k = B̃ (x(t_k) - x(t_{k-1}))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ObservationScheme {
    Prevalence { compartment: usize, p: f64 },
    Incidence { compartments: Vec<usize>, p: f64, noise: IncidenceNoise },
}

impl ObservationScheme {
    pub fn kind(&self) -> ObservationKind {
        match self {
            Self::Prevalence { .. } => ObservationKind::Prevalence,
            Self::Incidence { .. } => ObservationKind::Incidence,
        }
    }

    pub fn reporting_rate(&self) -> f64 {
        match self {
            Self::Prevalence { p, .. } | Self::Incidence { p, .. } => *p,
        }
    }

    /// Observation map as a `1 × d` matrix.
    pub fn obs_map(&self, d: usize) -> Result<DMatrix<f64>> {
        let mut b = DMatrix::zeros(1, d);
        match self {
            Self::Prevalence { compartment, p } => {
                if *compartment >= d {
                    return Err(Error::Config(format!("observed compartment {compartment} >= {d}")));
                }
                b[(0, *compartment)] = *p;
            }
            Self::Incidence { compartments, p, .. } => {
                for &j in compartments {
                    if j >= d {
                        return Err(Error::Config(format!("incidence compartment {j} >= {d}")));
                    }
                    b[(0, j)] = -*p;
                }
            }
        }
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        let p = self.reporting_rate();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Parameter(format!("reporting rate {p} outside [0, 1]")));
        }
        if let Self::Incidence { noise: IncidenceNoise::Overdispersed { tau2 }, .. } = self {
            if !(*tau2 >= 0.0) {
                return Err(Error::Parameter(format!("over-dispersion τ² = {tau2} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Every per-interval quantity of the Gaussian state-space model of one unit.
///
/// Vectors indexed by interval hold entry `k - 1` for interval `k = 1..=n`;
/// prefer the accessors, which take the mathematical index.
#[derive(Debug, Clone)]
pub struct StateSpaceQuantities {
    pub dim: usize,
    pub n_pop: f64,
    pub delta: f64,
    pub kind: ObservationKind,
    pub x0: DVector<f64>,
    /// `x(t_0), …, x(t_n)`.
    pub states: Vec<DVector<f64>>,
    /// `A_0, …, A_{n-1}`.
    pub transition: Vec<DMatrix<f64>>,
    /// `F_1, …, F_n`.
    pub offset: Vec<DVector<f64>>,
    /// `T_1, …, T_n`.
    pub noise: Vec<DMatrix<f64>>,
    /// `G_1, …, G_n`.
    pub increment_drift: Vec<DVector<f64>>,
    /// `B` or `B̃` (`q × d`).
    pub obs_map: DMatrix<f64>,
    /// `P_1, …, P_n` or `P̃_1, …, P̃_n` (`q × q`).
    pub obs_noise: Vec<DMatrix<f64>>,
    /// Intervals whose observation variance hit the floor.
    pub floored: Vec<usize>,
}

impl StateSpaceQuantities {
    pub fn n(&self) -> usize {
        self.transition.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_map.nrows()
    }

    /// `A_k = Φ(t_{k+1}, t_k)`, `k = 0..n`.
    pub fn a(&self, k: usize) -> &DMatrix<f64> {
        &self.transition[k]
    }

    /// `F_k`, `k = 1..=n`.
    pub fn f(&self, k: usize) -> &DVector<f64> {
        &self.offset[k - 1]
    }

    /// `T_k`, `k = 1..=n`.
    pub fn t(&self, k: usize) -> &DMatrix<f64> {
        &self.noise[k - 1]
    }

    /// `G_k`, `k = 1..=n`.
    pub fn g(&self, k: usize) -> &DVector<f64> {
        &self.increment_drift[k - 1]
    }

    /// `P_k` or `P̃_k`, `k = 1..=n`.
    pub fn p(&self, k: usize) -> &DMatrix<f64> {
        &self.obs_noise[k - 1]
    }

    /// `x(t_k)`.
    pub fn x(&self, k: usize) -> &DVector<f64> {
        &self.states[k]
    }
}

/// Observation-variance floor for population size `n_pop`.
pub fn variance_floor(n_pop: f64) -> f64 {
    1e-12 / n_pop
}

/// Assembles `A_{k-1}, F_k, T_k, G_k`, the observation map and its noise for
/// `k = 1..=n` on the grid `t_k = kΔ`.
pub fn statespace_quantities(
    model: &ModelSpec,
    eta: &EpiParams,
    n_pop: f64,
    delta: f64,
    n: usize,
    obs: &ObservationScheme,
    substeps: usize,
) -> Result<StateSpaceQuantities> {
    if !(n_pop > 0.0) || !(delta > 0.0) || substeps == 0 {
        return Err(Error::Argument(format!(
            "need N > 0, Δ > 0 and substeps >= 1 (got N={n_pop}, Δ={delta}, substeps={substeps})"
        )));
    }
    check_state(model, eta, &eta.x0)?;
    obs.validate()?;
    let d = model.dim();
    let h = delta / substeps as f64;
    let obs_map = obs.obs_map(d)?;

    let mut rk = Rk4::new(model, &eta.rates);
    let mut x = eta.x0.clone();
    let mut phi = vec![0.0; d * d];
    let mut work = vec![0.0; d * d];
    let mut inv = vec![0.0; d * d];
    let mut sig = vec![0.0; d * d];
    let mut tmp = vec![0.0; d * d];
    let mut quad = vec![0.0; d * d];

    let x0 = DVector::from_column_slice(&eta.x0);
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.clone());
    let mut transition = Vec::with_capacity(n);
    let mut offset = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    let mut increment_drift = Vec::with_capacity(n);

    // Adds w · Ψ⁻¹ Σ(x) Ψ⁻ᵀ to `quad`, with Ψ = Φ(s, t_{k-1}).
    let accumulate = |model: &ModelSpec,
                      x: &[f64],
                      phi: &[f64],
                      w: f64,
                      work: &mut [f64],
                      inv: &mut [f64],
                      sig: &mut [f64],
                      tmp: &mut [f64],
                      quad: &mut [f64]|
     -> Result<()> {
        model.diffusion_into(&eta.rates, x, sig);
        work.copy_from_slice(phi);
        if !invert_in_place(work, inv, d) {
            return Err(Error::Numerical("resolvent became singular".into()));
        }
        // tmp = inv · Σ
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += inv[i * d + l] * sig[l * d + j];
                }
                tmp[i * d + j] = acc;
            }
        }
        // quad += w · tmp · invᵀ
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for l in 0..d {
                    acc += tmp[i * d + l] * inv[j * d + l];
                }
                quad[i * d + j] += w * acc;
            }
        }
        Ok(())
    };

    for k in 1..=n {
        let x_prev = DVector::from_column_slice(&x);
        phi.copy_from_slice(&identity_flat(d));
        quad.iter_mut().for_each(|v| *v = 0.0);
        accumulate(model, &x, &phi, 0.5 * h, &mut work, &mut inv, &mut sig, &mut tmp, &mut quad)?;
        for s in 0..substeps {
            rk.step(&mut x, Some(&mut phi), h);
            let t = ((k - 1) * substeps + s + 1) as f64 * h;
            project_state(&mut x, t)?;
            let w = if s + 1 == substeps { 0.5 * h } else { h };
            accumulate(model, &x, &phi, w, &mut work, &mut inv, &mut sig, &mut tmp, &mut quad)?;
        }
        let a = DMatrix::from_row_slice(d, d, &phi);
        let q = DMatrix::from_row_slice(d, d, &quad);
        let mut t_k = (&a * q * a.transpose()) / n_pop;
        clip_to_psd(&mut t_k);
        symmetrize(&mut t_k);
        let x_k = DVector::from_column_slice(&x);
        let f_k = &x_k - &a * &x_prev;
        let g_k = (&x_k - &x0) - &a * (&x_prev - &x0);
        transition.push(a);
        offset.push(f_k);
        noise.push(t_k);
        increment_drift.push(g_k);
        states.push(x_k);
    }

    let floor = variance_floor(n_pop);
    let mut floored = Vec::new();
    let mut obs_noise = Vec::with_capacity(n);
    for k in 1..=n {
        let v = match obs {
            ObservationScheme::Prevalence { compartment, p } => {
                p * (1.0 - p) * states[k][*compartment] / n_pop
            }
            ObservationScheme::Incidence { noise, p, .. } => {
                let m = (&obs_map * (&states[k] - &states[k - 1]))[0];
                match noise {
                    IncidenceNoise::Binomial => (1.0 - p) * m / n_pop,
                    IncidenceNoise::Overdispersed { tau2 } => (m + tau2 * m * m) / n_pop,
                }
            }
        };
        let v = if v.is_nan() || v < floor {
            floored.push(k);
            floor
        } else {
            v
        };
        obs_noise.push(DMatrix::from_element(1, 1, v));
    }
    if !floored.is_empty() {
        log::debug!("observation variance floored at {} of {n} intervals", floored.len());
    }

    Ok(StateSpaceQuantities {
        dim: d,
        n_pop,
        delta,
        kind: obs.kind(),
        x0,
        states,
        transition,
        offset,
        noise,
        increment_drift,
        obs_map,
        obs_noise,
        floored,
    })
}
