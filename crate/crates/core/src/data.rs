//! Multi-unit observation datasets and their CSV/JSON storage.
//!
//! A dataset CSV has the header `unit,k,t,y_1,..,y_q` and one row per
//! observation time `t_k = kΔ`, `k >= 1`. Lines starting with `#` are
//! comments. Empty or `NaN` cells mark missing observations. A JSON sidecar
//! (`<file>.meta.json`) carries Δ, population sizes, and simulation truth when known.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observations of one unit on the grid `t_k = kΔ`, `k = 1..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitSeries {
    pub label: String,
    pub n_pop: f64,
    /// `y[k - 1]` is `y_k`; NaN entries are missing.
    pub y: Vec<DVector<f64>>,
}

impl UnitSeries {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.y.first().map_or(0, |v| v.len())
    }
}

/// Per-unit sidecar entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitMeta {
    pub label: String,
    pub n_pop: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_phi: Option<Vec<f64>>,
}

/// Dataset sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub delta: f64,
    pub units: Vec<UnitMeta>,
    /// Free-form provenance (seed, config hash, generating θ, …).
    #[serde(default)]
    pub info: BTreeMap<String, serde_json::Value>,
}

/// Units sharing one sampling step `Δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub delta: f64,
    pub units: Vec<UnitSeries>,
    pub true_phi: Option<Vec<Vec<f64>>>,
    pub info: BTreeMap<String, serde_json::Value>,
}

impl Dataset {
    pub fn new(delta: f64, units: Vec<UnitSeries>) -> Self {
        Self { delta, units, true_phi: None, info: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Mean number of time points per unit.
    pub fn mean_length(&self) -> f64 {
        if self.units.is_empty() {
            return 0.0;
        }
        self.units.iter().map(|u| u.n() as f64).sum::<f64>() / self.units.len() as f64
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            delta: self.delta,
            units: self
                .units
                .iter()
                .enumerate()
                .map(|(i, u)| UnitMeta {
                    label: u.label.clone(),
                    n_pop: u.n_pop,
                    true_phi: self.true_phi.as_ref().map(|t| t[i].clone()),
                })
                .collect(),
            info: self.info.clone(),
        }
    }

    /// Writes the CSV, preceded by `comments` as `#` lines.
    pub fn write_csv<W: Write>(&self, out: W, comments: &[String]) -> Result<()> {
        let mut out = out;
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let q = self.units.iter().map(|u| u.obs_dim()).max().unwrap_or(1).max(1);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["unit".to_string(), "k".into(), "t".into()];
        header.extend((1..=q).map(|j| format!("y_{j}")));
        w.write_record(&header)?;
        for u in &self.units {
            for (i, y) in u.y.iter().enumerate() {
                let k = i + 1;
                let mut row = vec![u.label.clone(), k.to_string(), fmt_f64(k as f64 * self.delta)];
                row.extend(y.iter().map(|v| if v.is_nan() { String::new() } else { fmt_f64(*v) }));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `<path>` and `<path>.meta.json`.
    pub fn save(&self, path: &Path, comments: &[String]) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file), comments)?;
        let meta = serde_json::to_string_pretty(&self.meta())?;
        std::fs::write(meta_path(path), meta + "\n")?;
        Ok(())
    }

    /// Reads a dataset CSV and, when present, its sidecar. Without a sidecar
    /// `default_n_pop` is used and Δ is inferred from the first row.
    pub fn load(path: &Path, default_n_pop: Option<f64>) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let mp = meta_path(path);
        let meta: Option<DatasetMeta> = if mp.exists() {
            let m = std::fs::read_to_string(&mp)?;
            Some(serde_json::from_str(&m).map_err(|e| Error::Data(format!("{}: {e}", mp.display())))?)
        } else {
            None
        };
        Self::from_csv_str(&text, meta, default_n_pop)
    }

    pub fn from_csv_str(text: &str, meta: Option<DatasetMeta>, default_n_pop: Option<f64>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = rdr.headers()?.clone();
        if header.len() < 4 || &header[0] != "unit" || &header[1] != "k" || &header[2] != "t" {
            return Err(Error::Data("dataset header must be `unit,k,t,y_1,...`".into()));
        }
        let q = header.len() - 3;
        let mut order: Vec<String> = Vec::new();
        let mut rows: BTreeMap<String, Vec<(usize, f64, DVector<f64>)>> = BTreeMap::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::Data(format!("row {}: bad {what}", line + 1));
            let label = rec[0].to_string();
            let k: usize = rec[1].parse().map_err(|_| bad("k"))?;
            let t: f64 = rec[2].parse().map_err(|_| bad("t"))?;
            if k == 0 {
                return Err(bad("k (must be >= 1)"));
            }
            let mut y = DVector::zeros(q);
            for j in 0..q {
                let cell = &rec[3 + j];
                y[j] = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
                    f64::NAN
                } else {
                    cell.parse().map_err(|_| bad("observation"))?
                };
            }
            if !rows.contains_key(&label) {
                order.push(label.clone());
            }
            rows.entry(label).or_default().push((k, t, y));
        }
        if order.is_empty() {
            return Err(Error::Data("dataset has no rows".into()));
        }
        let delta = match &meta {
            Some(m) => m.delta,
            None => {
                let (k, t, _) = &rows[&order[0]][0];
                t / *k as f64
            }
        };
        if !(delta > 0.0) {
            return Err(Error::Data(format!("invalid sampling step Δ = {delta}")));
        }
        let meta_units: BTreeMap<&str, &UnitMeta> = meta
            .as_ref()
            .map(|m| m.units.iter().map(|u| (u.label.as_str(), u)).collect())
            .unwrap_or_default();
        let mut units = Vec::with_capacity(order.len());
        let mut truth = Vec::new();
        for label in &order {
            let mut r = rows.remove(label).unwrap();
            r.sort_by_key(|(k, _, _)| *k);
            let n = r.last().unwrap().0;
            let mut y = vec![DVector::from_element(q, f64::NAN); n];
            for (k, t, v) in r {
                if (t - k as f64 * delta).abs() > 1e-6 * delta.max(t.abs()) {
                    return Err(Error::Data(format!(
                        "unit {label}: t = {t} is not k·Δ for k = {k}, Δ = {delta}"
                    )));
                }
                y[k - 1] = v;
            }
            let m = meta_units.get(label.as_str());
            let n_pop = match (m, default_n_pop) {
                (Some(m), _) => m.n_pop,
                (None, Some(n)) => n,
                (None, None) => {
                    return Err(Error::Data(format!("no population size for unit {label}")))
                }
            };
            truth.push(m.and_then(|m| m.true_phi.clone()));
            units.push(UnitSeries { label: label.clone(), n_pop, y });
        }
        let true_phi = if truth.iter().all(|t| t.is_some()) {
            Some(truth.into_iter().map(|t| t.unwrap()).collect())
        } else {
            None
        };
        Ok(Self { delta, units, true_phi, info: meta.map(|m| m.info).unwrap_or_default() })
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Shortest decimal that round-trips.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        let mut d = Dataset::new(
            0.425,
            vec![
                UnitSeries {
                    label: "a".into(),
                    n_pop: 1e4,
                    y: vec![
                        DVector::from_element(1, 0.1),
                        DVector::from_element(1, f64::NAN),
                        DVector::from_element(1, 1.0 / 3.0),
                    ],
                },
                UnitSeries { label: "b".into(), n_pop: 2e4, y: vec![DVector::from_element(1, 0.0)] },
            ],
        );
        d.true_phi = Some(vec![vec![1.5, 2.5], vec![1.2, 3.0]]);
        d
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = toy();
        d.save(&path, &["seed=1".into()]).unwrap();
        let back = Dataset::load(&path, None).unwrap();
        assert_eq!(back.delta, d.delta);
        assert_eq!(back.true_phi, d.true_phi);
        for (u, v) in d.units.iter().zip(&back.units) {
            assert_eq!(u.label, v.label);
            assert_eq!(u.n_pop, v.n_pop);
            for (a, b) in u.y.iter().zip(&v.y) {
                assert!(a[0] == b[0] || (a[0].is_nan() && b[0].is_nan()));
            }
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# seed=1\nunit,k,t,y_1\n"));
    }

    #[test]
    fn delta_is_inferred_without_sidecar() {
        let d = Dataset::from_csv_str("unit,k,t,y_1\nx,2,1.0,0.5\nx,1,0.5,0.25\n", None, Some(100.0)).unwrap();
        assert_eq!(d.delta, 0.5);
        assert_eq!(d.units[0].y[0][0], 0.25);
        assert!(Dataset::from_csv_str("unit,k,t,y_1\nx,1,0.5,0.25\n", None, None).is_err());
        assert!(Dataset::from_csv_str("unit,k,t,y_1\nx,1,0.5,0.2\nx,2,1.3,0.1\n", None, Some(1.0)).is_err());
        assert!(Dataset::from_csv_str("unit,k,t,y_1\n", None, Some(1.0)).is_err());
    }
}
