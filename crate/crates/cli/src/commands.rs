//! The six workflows. Each writes its outputs into a directory and stamps them
//! with the configuration hash and seed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde_json::{json, Value};

use epimix::baseline::fit_km;
use epimix::data::{fmt_f64, Dataset, UnitSeries};
use epimix::evaluate::{is_loglik, post_predictive, segment_epidemics};
use epimix::gillespie::generate_dataset;
use epimix::model::UnitModel;
use epimix::popmodel::{natural_moments, PopulationParams};
use epimix::rng::unit_rng;
use epimix::saem::{run_saem, ModelLikelihood};
use epimix::{Error, Result};

use crate::config::{LoadedConfig, RunConfig};
use crate::series;

/// Stream used for Monte-Carlo moments of a fitted population.
const MOMENT_STREAM: u64 = 0x6d6f;

/// Raw series are per 100k; datasets hold proportions.
const PER_100K: f64 = 1e5;

// ---------------------------------------------------------------------------
// Output stamping
// ---------------------------------------------------------------------------

pub struct Output {
    pub dir: PathBuf,
    command: &'static str,
    hash: String,
    seed: u64,
    config: String,
}

impl Output {
    pub fn new(dir: &Path, command: &'static str, cfg: &LoadedConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            hash: cfg.hash.clone(),
            seed: cfg.run.seed,
            config: cfg.text.clone(),
        })
    }

    pub fn comments(&self) -> Vec<String> {
        vec![
            format!("epimix {}", self.command),
            format!("config_sha256 {}", self.hash),
            format!("seed {}", self.seed),
        ]
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `body` after `#` lines carrying the stamp and `extra`.
    pub fn csv(&self, name: &str, body: &str, extra: &[String]) -> Result<PathBuf> {
        let mut text = String::new();
        for c in self.comments().iter().chain(extra) {
            writeln!(text, "# {c}").unwrap();
        }
        text.push_str(body);
        let path = self.path(name);
        std::fs::write(&path, text)?;
        Ok(path)
    }

    /// Writes a JSON object with the stamp and the effective configuration added.
    pub fn json(&self, name: &str, mut value: Value) -> Result<PathBuf> {
        let obj = value.as_object_mut().expect("outputs are JSON objects");
        obj.insert("command".into(), json!(self.command));
        obj.insert("config_sha256".into(), json!(self.hash));
        obj.insert("seed".into(), json!(self.seed));
        obj.insert("config".into(), json!(self.config));
        let path = self.path(name);
        std::fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")?;
        Ok(path)
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let data = Dataset::load(path, None)?;
    if data.is_empty() {
        return Err(Error::Data(format!("{}: no units", path.display())));
    }
    Ok(data)
}

/// `θ` from a `fit-saem` output when given, else from `[theta]`.
fn population(run: &RunConfig, model: &UnitModel, theta_path: Option<&Path>) -> Result<PopulationParams> {
    let Some(path) = theta_path else {
        return run.population(model);
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let theta: PopulationParams = serde_json::from_value(v.get("theta").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Data(format!("{}: `theta`: {e}", path.display())))?;
    if theta.random != model.link().components.iter().map(|c| c.random).collect::<Vec<_>>() {
        return Err(Error::Config(format!("{}: θ does not match the model's link", path.display())));
    }
    Ok(theta)
}

fn moments_csv(names: &[String], moments: &[(f64, f64)]) -> String {
    let mut s = String::from("parameter,mean,sd\n");
    for (n, (m, sd)) in names.iter().zip(moments) {
        writeln!(s, "{n},{},{}", fmt_f64(*m), fmt_f64(*sd)).unwrap();
    }
    s
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn simulate(cfg: &LoadedConfig, out: &Output) -> Result<()> {
    let model = cfg.run.unit_model()?;
    let theta = cfg.run.population(&model)?;
    let sim = generate_dataset(&theta, &model, &cfg.run.simulation()?)?;
    let mut data = sim.dataset;
    data.info.insert("config_sha256".into(), json!(cfg.hash));
    let path = out.path("dataset.csv");
    data.save(&path, &out.comments())?;
    println!("wrote {} units (mean length {:.1}) to {}", data.len(), data.mean_length(), path.display());
    Ok(())
}

pub fn fit_saem(cfg: &LoadedConfig, data_path: &Path, out: &Output) -> Result<()> {
    let data = load_dataset(data_path)?;
    let model = cfg.run.unit_model()?;
    let link = model.link();
    let res = run_saem(&ModelLikelihood { model: &model, data: &data }, link, &cfg.run.saem)?;
    let names = link.names();
    let mut rng = unit_rng(cfg.run.seed, MOMENT_STREAM);
    let moments = natural_moments(&res.theta, link, cfg.run.report.moment_draws, &mut rng)?;
    out.csv("trace.csv", &res.trace.to_csv(), &[])?;
    out.csv("moments.csv", &moments_csv(&names, &moments), &[])?;
    out.json(
        "theta.json",
        json!({
            "names": names,
            "theta": res.theta,
            "iterations": res.iterations,
            "converged": res.converged,
            "rw_scale": res.rw_scale,
            "units": data.len(),
        }),
    )?;
    println!(
        "SAEM {} after {} iterations; β = {:?}",
        if res.converged { "converged" } else { "stopped at max_iter" },
        res.iterations,
        res.theta.beta
    );
    Ok(())
}

pub fn fit_km_cmd(cfg: &LoadedConfig, data_path: &Path, out: &Output) -> Result<()> {
    let data = load_dataset(data_path)?;
    let model = cfg.run.unit_model()?;
    let res = fit_km(&model, &data, &cfg.run.km)?;
    let extra = [format!("unfit {}", res.unfit), format!("extreme {}", res.extreme)];
    out.csv("unit_fits.csv", &res.fits_csv(), &extra)?;
    out.csv("moments.csv", &res.moments_csv(), &extra)?;
    println!("KM: {} units fitted, {} unfit, {} extreme", res.fits.len() - res.unfit, res.unfit, res.extreme);
    Ok(())
}

pub fn loglik(cfg: &LoadedConfig, data_path: &Path, theta_path: Option<&Path>, out: &Output) -> Result<()> {
    let data = load_dataset(data_path)?;
    let model = cfg.run.unit_model()?;
    let theta = population(&cfg.run, &model, theta_path)?;
    let est = is_loglik(&theta, &model, &data, cfg.run.loglik.n_samples, cfg.run.loglik.proposal, cfg.run.seed)?;
    let mut s = String::from("unit,loglik,se,ess\n");
    for (u, e) in data.units.iter().zip(&est.units) {
        writeln!(s, "{},{},{},{}", u.label, fmt_f64(e.loglik), fmt_f64(e.se), fmt_f64(e.ess)).unwrap();
    }
    writeln!(s, "total,{},{},", fmt_f64(est.total), fmt_f64(est.total_se)).unwrap();
    out.csv("loglik.csv", &s, &[format!("n_samples {}", cfg.run.loglik.n_samples)])?;
    println!("log-likelihood {} (s.e. {})", fmt_f64(est.total), fmt_f64(est.total_se));
    Ok(())
}

pub fn ppcheck(cfg: &LoadedConfig, theta_path: Option<&Path>, data_path: Option<&Path>, out: &Output) -> Result<()> {
    let model = cfg.run.unit_model()?;
    let theta = population(&cfg.run, &model, theta_path)?;
    let pp = &cfg.run.ppcheck;
    let data = data_path.map(load_dataset).transpose()?;
    let need = |v: Option<f64>, from_data: Option<f64>, key: &str| -> Result<f64> {
        v.or(from_data).ok_or_else(|| Error::Config(format!("ppcheck.{key} is required without a dataset")))
    };
    let n_pop = need(pp.n_pop, data.as_ref().map(|d| d.units[0].n_pop), "n_pop")?;
    let delta = need(pp.delta, data.as_ref().map(|d| d.delta), "delta")?;
    let steps = pp
        .steps
        .or(data.as_ref().and_then(|d| d.units.iter().map(UnitSeries::n).max()))
        .ok_or_else(|| Error::Config("ppcheck.steps is required without a dataset".into()))?;
    let env = post_predictive(&theta, &model, n_pop, delta, steps, pp.n_sim, pp.component, cfg.run.seed)?;
    let mut extra = vec![format!("n_sim {}", pp.n_sim), format!("n_pop {}", fmt_f64(n_pop))];
    if let Some(d) = &data {
        let cov = env.coverage(&d.units);
        extra.push(format!("coverage {}", fmt_f64(cov)));
        println!("5-95% envelope covers {:.1}% of observations", 100.0 * cov);
    }
    let path = out.csv("envelope.csv", &env.to_csv(), &extra)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Sums consecutive blocks of `delta` days; a trailing partial block is dropped.
fn block_sums(values: &[f64], delta: usize) -> Vec<f64> {
    values.chunks_exact(delta).map(|c| c.iter().sum()).collect()
}

/// Windows as a dataset of incidence proportions per `delta`-day block.
fn windows_dataset(daily: &series::DailySeries, windows: &[(usize, usize)], delta: usize, n_pop: f64) -> Dataset {
    let units = windows
        .iter()
        .filter_map(|&(a, b)| {
            let y: Vec<DVector<f64>> = block_sums(&daily.values[a..b], delta)
                .into_iter()
                .map(|v| DVector::from_element(1, v / PER_100K))
                .collect();
            (!y.is_empty()).then(|| UnitSeries { label: daily.dates[a].to_string(), n_pop, y })
        })
        .collect();
    Dataset::new(delta as f64, units)
}

pub fn segment(cfg: &LoadedConfig, series_path: &Path, out: &Output) -> Result<()> {
    let seg = &cfg.run.segment;
    if seg.delta == 0 {
        return Err(Error::Config("segment.delta must be positive".into()));
    }
    let daily = series::load(series_path)?;
    let exclude = daily.indices_of(&seg.exclude)?;
    let windows = segment_epidemics(&daily.values, &seg.rule(exclude))?;
    let mut s = String::from("window,start,end,days,total\n");
    for (w, &(a, b)) in windows.iter().enumerate() {
        let total: f64 = daily.values[a..b].iter().sum();
        writeln!(s, "{w},{},{},{},{}", daily.dates[a], daily.dates[b - 1], b - a, fmt_f64(total)).unwrap();
    }
    out.csv("windows.csv", &s, &[format!("threshold {}", fmt_f64(seg.threshold))])?;
    let mut data = windows_dataset(&daily, &windows, seg.delta, seg.n_pop);
    data.info.insert("config_sha256".into(), json!(cfg.hash));
    data.save(&out.path("epidemics.csv"), &out.comments())?;
    println!("{} epidemic windows in {} days", windows.len(), daily.len());
    Ok(())
}
