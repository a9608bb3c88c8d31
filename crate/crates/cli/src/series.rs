//! Raw surveillance series: `date,incidence_per_100k`, one row per consecutive day.

use std::path::Path;

use chrono::NaiveDate;

use epimix::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DailySeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl DailySeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Indices of the given ISO dates; dates outside the series are ignored.
    pub fn indices_of(&self, dates: &[String]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for d in dates {
            let date = parse_date(d)?;
            if let Some(first) = self.dates.first() {
                let i = (date - *first).num_days();
                if i >= 0 && (i as usize) < self.len() {
                    out.push(i as usize);
                }
            }
        }
        Ok(out)
    }
}

fn parse_date(s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Data(format!("date `{s}`: {e}")))
}

pub fn parse(text: &str) -> Result<DailySeries> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.len() != 2 || &header[0] != "date" || &header[1] != "incidence_per_100k" {
        return Err(Error::Data("series header must be `date,incidence_per_100k`".into()));
    }
    let mut series = DailySeries { dates: vec![], values: vec![] };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let date = parse_date(&rec[0]).map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        let value: f64 = rec[1]
            .parse()
            .map_err(|_| Error::Data(format!("line {line}: incidence `{}` is not a number", &rec[1])))?;
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::Data(format!("line {line}: incidence {value} must be finite and nonnegative")));
        }
        if let Some(prev) = series.dates.last() {
            if date != *prev + chrono::Duration::days(1) {
                return Err(Error::Data(format!("line {line}: {date} does not follow {prev}; days must be consecutive")));
            }
        }
        series.dates.push(date);
        series.values.push(value);
    }
    Ok(series)
}

pub fn load(path: &Path) -> Result<DailySeries> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}
