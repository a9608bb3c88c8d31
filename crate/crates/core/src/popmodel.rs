//! Population layer: links between unconstrained effects and natural parameters,
//! the population parameters `θ = (β, Γ)` and random-effect sampling.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::LN_2PI;

const EXP_CLAMP: f64 = 700.0;

fn clamped_exp(x: f64) -> f64 {
    if x.abs() > EXP_CLAMP {
        log::warn!("link argument {x} clamped to ±{EXP_CLAMP}");
        x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
    } else {
        x.exp()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + clamped_exp(-x))
    } else {
        let e = clamped_exp(x);
        e / (1.0 + e)
    }
}

/// Scalar or paired link from `ψ` to a natural parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkKind {
    /// `exp(ψ) + 1`, for `R0 > 1`.
    ShiftedLogExp,
    /// `exp(ψ)`, for durations and variances.
    LogExp,
    /// `1 / (1 + exp(-ψ))`, for proportions.
    Logit,
    /// Two consecutive components mapped jointly to `(s0, i0)`:
    /// `s0 = 1/D`, `i0 = exp(-ψ_a)/D`, `D = 1 + exp(-ψ_a) + exp(-ψ_b)`.
    MlogitPair,
}

/// One component of a link specification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkComponent {
    pub name: String,
    pub kind: LinkKind,
    #[serde(default = "default_true")]
    pub random: bool,
}

fn default_true() -> bool {
    true
}

/// Per-component links and randomness flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LinkSpec {
    pub components: Vec<LinkComponent>,
}

impl LinkSpec {
    pub fn new(components: Vec<LinkComponent>) -> Result<Self> {
        let spec = Self { components };
        spec.validate()?;
        Ok(spec)
    }

    /// Shorthand: `(name, kind, random)` triples.
    pub fn from_triples(items: &[(&str, LinkKind, bool)]) -> Result<Self> {
        Self::new(
            items
                .iter()
                .map(|(n, k, r)| LinkComponent { name: (*n).into(), kind: *k, random: *r })
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let mut j = 0;
        while j < self.components.len() {
            if self.components[j].kind == LinkKind::MlogitPair {
                if self.components.get(j + 1).map(|c| c.kind) != Some(LinkKind::MlogitPair) {
                    return Err(Error::Config(format!(
                        "multinomial-logit component `{}` must be followed by its partner",
                        self.components[j].name
                    )));
                }
                j += 2;
            } else {
                j += 1;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.components.iter().map(|c| c.name.clone()).collect()
    }

    pub fn random_flags(&self) -> Vec<bool> {
        self.components.iter().map(|c| c.random).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.components.iter().position(|c| c.name == name)
    }
}

/// `φ = h(ψ)`.
pub fn link_apply(link: &LinkSpec, psi: &[f64]) -> Result<Vec<f64>> {
    if psi.len() != link.len() {
        return Err(Error::Argument(format!("ψ has {} entries, link has {}", psi.len(), link.len())));
    }
    if let Some(v) = psi.iter().find(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("non-finite effect {v}")));
    }
    let mut phi = vec![0.0; psi.len()];
    let mut j = 0;
    while j < psi.len() {
        match link.components[j].kind {
            LinkKind::ShiftedLogExp => phi[j] = clamped_exp(psi[j]) + 1.0,
            LinkKind::LogExp => phi[j] = clamped_exp(psi[j]),
            LinkKind::Logit => phi[j] = logistic(psi[j]),
            LinkKind::MlogitPair => {
                let ea = clamped_exp(-psi[j]);
                let eb = clamped_exp(-psi[j + 1]);
                let den = 1.0 + ea + eb;
                phi[j] = 1.0 / den;
                phi[j + 1] = ea / den;
                j += 1;
            }
        }
        j += 1;
    }
    Ok(phi)
}

/// `ψ = h⁻¹(φ)`.
pub fn link_invert(link: &LinkSpec, phi: &[f64]) -> Result<Vec<f64>> {
    if phi.len() != link.len() {
        return Err(Error::Argument(format!("φ has {} entries, link has {}", phi.len(), link.len())));
    }
    let mut psi = vec![0.0; phi.len()];
    let mut j = 0;
    let outside = |name: &str, v: f64, range: &str| {
        Error::Domain(format!("`{name}` = {v} is not inside {range}"))
    };
    while j < phi.len() {
        let c = &link.components[j];
        let v = phi[j];
        match c.kind {
            LinkKind::ShiftedLogExp => {
                if !(v > 1.0 && v.is_finite()) {
                    return Err(outside(&c.name, v, "(1, ∞)"));
                }
                psi[j] = (v - 1.0).ln();
            }
            LinkKind::LogExp => {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(outside(&c.name, v, "(0, ∞)"));
                }
                psi[j] = v.ln();
            }
            LinkKind::Logit => {
                if !(v > 0.0 && v < 1.0) {
                    return Err(outside(&c.name, v, "(0, 1)"));
                }
                psi[j] = (v / (1.0 - v)).ln();
            }
            LinkKind::MlogitPair => {
                let (s0, i0) = (v, phi[j + 1]);
                let r = 1.0 - s0 - i0;
                if !(s0 > 0.0 && i0 > 0.0 && r > 0.0) {
                    return Err(Error::Domain(format!(
                        "(s0, i0) = ({s0}, {i0}) is not inside the open simplex"
                    )));
                }
                psi[j] = (s0 / i0).ln();
                psi[j + 1] = (s0 / r).ln();
                j += 1;
            }
        }
        j += 1;
    }
    Ok(psi)
}

/// Population parameters `θ = (β, Γ)` with a diagonal `Γ`.
///
/// `gamma[j]` is the random-effect variance of component `j`; entries of
/// fixed components are kept at 0 and never read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub random: Vec<bool>,
}

impl PopulationParams {
    pub fn new(beta: Vec<f64>, gamma: Vec<f64>, random: Vec<bool>) -> Result<Self> {
        let theta = Self { beta, gamma, random };
        theta.validate()?;
        Ok(theta)
    }

    /// `Γ` given only on the random components, in order.
    pub fn from_random_variances(beta: Vec<f64>, random: Vec<bool>, variances: &[f64]) -> Result<Self> {
        let n_random = random.iter().filter(|r| **r).count();
        if variances.len() != n_random {
            return Err(Error::Parameter(format!(
                "{} variances for {n_random} random components",
                variances.len()
            )));
        }
        let mut it = variances.iter();
        let gamma = random.iter().map(|r| if *r { *it.next().unwrap() } else { 0.0 }).collect();
        Self::new(beta, gamma, random)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.beta.len();
        if self.gamma.len() != c || self.random.len() != c {
            return Err(Error::Parameter("β, Γ and randomness flags differ in length".into()));
        }
        if let Some(b) = self.beta.iter().find(|b| !b.is_finite()) {
            return Err(Error::Parameter(format!("non-finite fixed effect {b}")));
        }
        for (j, (g, r)) in self.gamma.iter().zip(&self.random).enumerate() {
            if *r && !(*g > 0.0 && g.is_finite()) {
                return Err(Error::Parameter(format!("Γ[{j}] = {g} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// Random-effect standard deviations (0 on fixed components).
    pub fn sd(&self) -> Vec<f64> {
        self.gamma
            .iter()
            .zip(&self.random)
            .map(|(g, r)| if *r { g.sqrt() } else { 0.0 })
            .collect()
    }
}

/// One sampled unit: `ξ`, `ψ = β + ξ` and `φ = h(ψ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitDraw {
    pub xi: Vec<f64>,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Draws `ξ ~ N(0, Γ)` on random components and maps it through the link.
pub fn sample_unit_params<R: Rng + ?Sized>(
    theta: &PopulationParams,
    link: &LinkSpec,
    rng: &mut R,
) -> Result<UnitDraw> {
    let xi: Vec<f64> = theta
        .gamma
        .iter()
        .zip(&theta.random)
        .map(|(g, r)| if *r { g.sqrt() * rng.sample::<f64, _>(StandardNormal) } else { 0.0 })
        .collect();
    let psi: Vec<f64> = theta.beta.iter().zip(&xi).map(|(b, x)| b + x).collect();
    let phi = link_apply(link, &psi)?;
    Ok(UnitDraw { xi, psi, phi })
}

/// Log-density of the random components of `ψ - β` under `N(0, Γ)`.
pub fn effects_logdensity(theta: &PopulationParams, psi: &[f64]) -> Result<f64> {
    if psi.len() != theta.dim() {
        return Err(Error::Argument(format!("ψ has {} entries, θ has {}", psi.len(), theta.dim())));
    }
    let mut ll = 0.0;
    for j in 0..psi.len() {
        if !theta.random[j] {
            continue;
        }
        let g = theta.gamma[j];
        if !(g > 0.0) {
            return Err(Error::Parameter(format!("Γ[{j}] = {g} must be > 0")));
        }
        let z = psi[j] - theta.beta[j];
        ll += -0.5 * (LN_2PI + g.ln()) - z * z / (2.0 * g);
    }
    Ok(ll)
}

/// Typical natural-scale value of a parameter, used to centre start boxes.
pub fn typical_value(name: &str) -> Option<f64> {
    Some(match name {
        "r0" => 1.5,
        "d" => 2.5,
        "d_e" => 2.0,
        "d_i" => 3.0,
        "p" => 0.7,
        "i0" | "e0" => 0.05,
        "s0" => 0.9,
        "immune" => 0.3,
        "tau2" => 1000.0,
        _ => return None,
    })
}

/// Start box `ψ_c ± half_width` around `link_invert` of typical values; unknown names centre at 0.
pub fn default_start_box(link: &LinkSpec, half_width: f64) -> Vec<(f64, f64)> {
    let known: Vec<Option<f64>> = link.components.iter().map(|c| typical_value(&c.name)).collect();
    let phi: Vec<f64> = known.iter().map(|v| v.unwrap_or(0.5)).collect();
    let centre = match link_invert(link, &phi) {
        Ok(psi) => psi.into_iter().zip(&known).map(|(x, k)| if k.is_some() { x } else { 0.0 }).collect(),
        Err(_) => vec![0.0; link.len()],
    };
    centre.into_iter().map(|x| (x - half_width, x + half_width)).collect()
}

/// Monte-Carlo mean and standard deviation of each natural parameter.
pub fn natural_moments<R: Rng + ?Sized>(
    theta: &PopulationParams,
    link: &LinkSpec,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    if draws < 2 {
        return Err(Error::Argument("need at least two draws".into()));
    }
    let c = theta.dim();
    let mut sum = vec![0.0; c];
    let mut sum_sq = vec![0.0; c];
    for _ in 0..draws {
        let u = sample_unit_params(theta, link, rng)?;
        for j in 0..c {
            sum[j] += u.phi[j];
            sum_sq[j] += u.phi[j] * u.phi[j];
        }
    }
    let n = draws as f64;
    Ok((0..c)
        .map(|j| {
            let mean = sum[j] / n;
            let var = ((sum_sq[j] - n * mean * mean) / (n - 1.0)).max(0.0);
            (mean, var.sqrt())
        })
        .collect())
}
