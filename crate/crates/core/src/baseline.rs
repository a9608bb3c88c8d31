//! Two-step KM comparator: per-unit maximum likelihood, then moments across units.
//!
//! Each unit is fitted independently by multi-start Nelder-Mead on the
//! negative filter log-likelihood in ψ space, and the population is
//! summarised by the empirical mean and standard deviation of the fitted
//! natural parameters.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset, UnitSeries};
use crate::error::{Error, Result};
use crate::model::UnitModel;
use crate::popmodel::{default_start_box, link_apply};
use crate::rng::unit_rng;

/// Nelder-Mead and multi-start settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimplexConfig {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    pub max_evals: usize,
    /// Stop when `f_max - f_min <= ftol · (|f_min| + ftol)` over the simplex.
    pub ftol: f64,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
    pub n_starts: usize,
    /// Per-component start interval (ψ scale); `None` uses [`default_start_box`] with half-width 1.5.
    pub start_box: Option<Vec<(f64, f64)>>,
    /// Fitted `R0` above this value marks a unit as extreme.
    pub r0_cap: f64,
    pub seed: u64,
}

impl Default for SimplexConfig {
    fn default() -> Self {
        Self {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            max_evals: 4000,
            ftol: 1e-10,
            initial_step: 0.5,
            n_starts: 10,
            start_box: None,
            r0_cap: 20.0,
            seed: 0,
        }
    }
}

impl SimplexConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.reflection > 0.0
            && self.expansion > 1.0
            && self.expansion > self.reflection
            && self.contraction > 0.0
            && self.contraction < 1.0
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.initial_step > 0.0
            && self.ftol >= 0.0
            && self.n_starts >= 1
            && self.max_evals >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid simplex settings: {self:?}")))
        }
    }
}

// ---------------------------------------------------------------------------
// Nelder-Mead
// ---------------------------------------------------------------------------

/// Result of a simplex search.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimises `f` from `start`; non-finite values count as `+∞`.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, start: &[f64], cfg: &SimplexConfig) -> Minimum {
    let d = start.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut pts: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    pts.push(start.to_vec());
    for j in 0..d {
        let mut p = start.to_vec();
        p[j] += cfg.initial_step;
        pts.push(p);
    }
    let mut vals: Vec<f64> = pts.iter().map(|p| eval(p, &mut evals)).collect();
    let mut converged = false;

    while evals < cfg.max_evals {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        pts = order.iter().map(|&i| pts[i].clone()).collect();
        vals = order.iter().map(|&i| vals[i]).collect();
        let (best, worst) = (vals[0], vals[d]);
        if best.is_finite() && worst - best <= cfg.ftol * (best.abs() + cfg.ftol) {
            converged = true;
            break;
        }
        if d == 0 {
            converged = true;
            break;
        }

        let centroid: Vec<f64> =
            (0..d).map(|j| pts[..d].iter().map(|p| p[j]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> {
            centroid.iter().zip(&pts[d]).map(|(c, w)| c + t * (c - w)).collect()
        };
        let xr = along(cfg.reflection);
        let fr = eval(&xr, &mut evals);
        if fr < vals[0] {
            let xe = along(cfg.reflection * cfg.expansion);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                pts[d] = xe;
                vals[d] = fe;
            } else {
                pts[d] = xr;
                vals[d] = fr;
            }
            continue;
        }
        if fr < vals[d - 1] {
            pts[d] = xr;
            vals[d] = fr;
            continue;
        }
        let (xc, fc) = if fr < vals[d] {
            let xc = along(cfg.reflection * cfg.contraction);
            let fc = eval(&xc, &mut evals);
            (xc, (fc <= fr).then_some(fc))
        } else {
            let xc = along(-cfg.contraction);
            let fc = eval(&xc, &mut evals);
            (xc, (fc < vals[d]).then_some(fc))
        };
        if let Some(fc) = fc {
            pts[d] = xc;
            vals[d] = fc;
            continue;
        }
        for i in 1..=d {
            let p: Vec<f64> = pts[0].iter().zip(&pts[i]).map(|(b, x)| b + cfg.shrink * (x - b)).collect();
            vals[i] = eval(&p, &mut evals);
            pts[i] = p;
        }
    }
    let i = (0..=d).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap_or(0);
    Minimum { x: pts[i].clone(), value: vals[i], evals, converged }
}

// ---------------------------------------------------------------------------
// Per-unit fits
// ---------------------------------------------------------------------------

/// Maximum-likelihood fit of one unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitFit {
    pub label: String,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub loglik: f64,
    /// Index of the start that produced the best fit.
    pub start: usize,
    /// False when every start ended at a non-finite likelihood.
    pub fitted: bool,
    pub extreme: bool,
}

/// Uniform draws from `bounds`, one vector per start.
pub fn draw_starts<R: Rng + ?Sized>(bounds: &[(f64, f64)], n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| bounds.iter().map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo }).collect())
        .collect()
}

/// Multi-start maximum likelihood for one unit; starts are drawn in order, so
/// the first `k` starts do not depend on `n_starts`.
pub fn fit_unit_mle<R: Rng + ?Sized>(
    model: &UnitModel,
    unit: &UnitSeries,
    delta: f64,
    cfg: &SimplexConfig,
    rng: &mut R,
) -> Result<UnitFit> {
    cfg.validate()?;
    if unit.n() == 0 {
        return Err(Error::Data(format!("unit {} has no observations", unit.label)));
    }
    let link = model.link();
    let bounds = cfg.start_box.clone().unwrap_or_else(|| default_start_box(link, 1.5));
    if bounds.len() != link.len() {
        return Err(Error::Config(format!("start_box has {} entries, link has {}", bounds.len(), link.len())));
    }
    let objective = |psi: &[f64]| match link_apply(link, psi) {
        Ok(phi) => -model.loglik(&phi, unit, delta),
        Err(_) => f64::INFINITY,
    };
    let mut best: Option<(usize, Minimum)> = None;
    for (s, start) in draw_starts(&bounds, cfg.n_starts, rng).into_iter().enumerate() {
        let m = nelder_mead(objective, &start, cfg);
        if best.as_ref().is_none_or(|(_, b)| m.value < b.value) {
            best = Some((s, m));
        }
    }
    let (start, m) = best.expect("n_starts >= 1");
    let fitted = m.value.is_finite();
    let phi = link_apply(link, &m.x).unwrap_or_else(|_| vec![f64::NAN; link.len()]);
    let extreme = match link.index_of("r0") {
        Some(j) => !(phi[j].abs() <= cfg.r0_cap),
        None => false,
    };
    Ok(UnitFit { label: unit.label.clone(), psi: m.x, phi, loglik: -m.value, start, fitted, extreme })
}

// ---------------------------------------------------------------------------
// Moments
// ---------------------------------------------------------------------------

/// Sample mean and standard deviation (denominator `n - 1`) per component.
pub fn empirical_moments(values: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    if values.len() < 2 {
        return Err(Error::Argument(format!("need at least two fitted units, got {}", values.len())));
    }
    let c = values[0].len();
    let n = values.len() as f64;
    Ok((0..c)
        .map(|j| {
            let mean = values.iter().map(|v| v[j]).sum::<f64>() / n;
            let var = values.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var.sqrt())
        })
        .collect())
}

/// KM estimate of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct KmResult {
    pub names: Vec<String>,
    pub fits: Vec<UnitFit>,
    /// Moments over all fitted units.
    pub moments: Vec<(f64, f64)>,
    /// Moments over fitted units not flagged extreme, when at least two remain.
    pub trimmed: Option<Vec<(f64, f64)>>,
    pub unfit: usize,
    pub extreme: usize,
}

impl KmResult {
    pub fn fits_csv(&self) -> String {
        let mut s = String::from("unit");
        for n in &self.names {
            write!(s, ",{n}").unwrap();
        }
        s.push_str(",loglik,start,fitted,extreme\n");
        for f in &self.fits {
            s.push_str(&f.label);
            for v in &f.phi {
                write!(s, ",{}", fmt_f64(*v)).unwrap();
            }
            writeln!(s, ",{},{},{},{}", fmt_f64(f.loglik), f.start, f.fitted, f.extreme).unwrap();
        }
        s
    }

    pub fn moments_csv(&self) -> String {
        let mut s = String::from("parameter,mean,sd,trimmed_mean,trimmed_sd\n");
        for (j, n) in self.names.iter().enumerate() {
            let (m, sd) = self.moments[j];
            let (tm, tsd) = self.trimmed.as_ref().map_or((f64::NAN, f64::NAN), |t| t[j]);
            writeln!(s, "{n},{},{},{},{}", fmt_f64(m), fmt_f64(sd), fmt_f64(tm), fmt_f64(tsd)).unwrap();
        }
        s
    }
}

/// Fits every unit (in parallel, unit `u` on stream `u` of `cfg.seed`) and summarises.
pub fn fit_km(model: &UnitModel, data: &Dataset, cfg: &SimplexConfig) -> Result<KmResult> {
    let fits: Vec<UnitFit> = data
        .units
        .par_iter()
        .enumerate()
        .map(|(u, unit)| fit_unit_mle(model, unit, data.delta, cfg, &mut unit_rng(cfg.seed, u as u64)))
        .collect::<Result<_>>()?;
    let ok: Vec<Vec<f64>> = fits.iter().filter(|f| f.fitted).map(|f| f.phi.clone()).collect();
    let unfit = fits.len() - ok.len();
    if unfit > 0 {
        log::warn!("{unfit} units could not be fitted");
    }
    let moments = empirical_moments(&ok)?;
    let kept: Vec<Vec<f64>> = fits.iter().filter(|f| f.fitted && !f.extreme).map(|f| f.phi.clone()).collect();
    let extreme = fits.iter().filter(|f| f.fitted && f.extreme).count();
    let trimmed = empirical_moments(&kept).ok();
    Ok(KmResult { names: model.link().names(), fits, moments, trimmed, unfit, extreme })
}
