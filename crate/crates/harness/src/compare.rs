//! Lining up metric files from several runs.

use std::fmt::Write as _;
use std::path::Path;

use crate::runner::METRICS_HEADER;
use crate::{Error, Result};

/// The evaluation column of one `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub name: String,
    pub metric: String,
    pub rounds: Vec<u32>,
    pub values: Vec<f64>,
}

impl RunMetrics {
    pub fn read(path: &Path) -> Result<Self> {
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .filter(|_| path.file_name().is_some_and(|f| f == "metrics.csv"))
            .unwrap_or(path.as_os_str())
            .to_string_lossy()
            .into_owned();
        let file = std::fs::File::open(path).map_err(|e| Error::Metrics(format!("{}: {e}", path.display())))?;
        Self::from_reader(name, file)
    }

    pub fn from_reader<R: std::io::Read>(name: String, reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        if header.iter().ne(METRICS_HEADER) {
            return Err(Error::Metrics(format!("{name}: unexpected header {header:?}")));
        }
        let mut out = RunMetrics {
            name,
            metric: String::new(),
            rounds: Vec::new(),
            values: Vec::new(),
        };
        for row in r.records() {
            let row = row?;
            let bad = |what: &str| Error::Metrics(format!("{}: bad {what} in {:?}", out.name, row));
            let round: u32 = row[0].parse().map_err(|_| bad("round"))?;
            let value: f64 = row[2].parse().map_err(|_| bad("eval_metric"))?;
            if out.metric.is_empty() {
                out.metric = row[1].to_owned();
            } else if out.metric != row[1] {
                return Err(bad("metric name"));
            }
            if out.rounds.last().is_some_and(|&last| round <= last) {
                return Err(bad("round order"));
            }
            out.rounds.push(round);
            out.values.push(value);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub metric: String,
    pub names: Vec<String>,
    /// Rounds present in every run.
    pub rounds: Vec<u32>,
    /// `values[r][i]`: run `i` at `rounds[r]`.
    pub values: Vec<Vec<f64>>,
    /// Runs had different lengths and were cut to the common prefix.
    pub truncated: bool,
    /// Final common-round value of each run minus that of the first.
    pub deltas: Vec<f64>,
}

pub fn compare_runs(runs: &[RunMetrics]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::Metrics("need at least two runs to compare".into()));
    }
    let metric = &runs[0].metric;
    if let Some(odd) = runs.iter().find(|r| &r.metric != metric) {
        return Err(Error::MismatchedMetrics {
            expected: metric.clone(),
            found: odd.metric.clone(),
            run: odd.name.clone(),
        });
    }
    let common = runs.iter().map(|r| r.rounds.len()).min().unwrap_or(0);
    let truncated = runs.iter().any(|r| r.rounds.len() != common);
    let rounds = runs[0].rounds[..common].to_vec();
    for r in runs {
        if r.rounds[..common] != rounds[..] {
            return Err(Error::Metrics(format!(
                "{}: rounds do not line up with {}",
                r.name, runs[0].name
            )));
        }
    }
    let values: Vec<Vec<f64>> = (0..common)
        .map(|i| runs.iter().map(|r| r.values[i]).collect())
        .collect();
    let deltas = match values.last() {
        Some(last) => last.iter().map(|v| v - last[0]).collect(),
        None => vec![0.0; runs.len()],
    };
    Ok(Comparison {
        metric: metric.clone(),
        names: runs.iter().map(|r| r.name.clone()).collect(),
        rounds,
        values,
        truncated,
        deltas,
    })
}

impl Comparison {
    /// Plot-ready table: one row per round, one column per run.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("round")
            .chain(self.names.iter().map(String::as_str))
            .collect();
        w.write_record(&header).expect("in-memory write");
        for (round, row) in self.rounds.iter().zip(&self.values) {
            let cells: Vec<String> = std::iter::once(round.to_string())
                .chain(row.iter().map(f64::to_string))
                .collect();
            w.write_record(&cells).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let width = self.names.iter().map(String::len).max().unwrap_or(0).max(8);
        let _ = writeln!(out, "metric: {}", self.metric);
        if self.truncated {
            let _ = writeln!(
                out,
                "note: runs differ in length; compared over the first {} rounds",
                self.rounds.len()
            );
        }
        let last = self.rounds.last().copied().unwrap_or(0);
        let _ = writeln!(
            out,
            "{:width$}  {:>12}  {:>12}",
            "run",
            format!("round {last}"),
            "delta"
        );
        for (i, name) in self.names.iter().enumerate() {
            let value = self.values.last().map_or(f64::NAN, |row| row[i]);
            let _ = writeln!(out, "{name:width$}  {value:>12.6}  {:>+12.6}", self.deltas[i]);
        }
        out
    }
}
