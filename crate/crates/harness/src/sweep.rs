//! Grids of experiments.

use std::path::Path;

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::runner::{run_experiment, RunOutcome};
use crate::{Error, Result};

/// One swept parameter: `key=v1,v2,...`.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis `{s}` is not key=v1,v2,...")))?;
        let values: Vec<String> = split_top_level(values)
            .into_iter()
            .map(|v| v.trim().to_owned())
            .collect();
        if key.trim().is_empty() || values.iter().any(String::is_empty) {
            return Err(Error::Config(format!("grid axis `{s}` has an empty key or value")));
        }
        Ok(Axis {
            key: key.trim().to_owned(),
            values,
        })
    }
}

/// Splits on commas that are not inside brackets, so list values survive.
fn split_top_level(s: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let (mut depth, mut start) = (0i32, 0);
    for (i, c) in s.char_indices() {
        match c {
            '[' => depth += 1,
            ']' => depth -= 1,
            ',' if depth == 0 => {
                parts.push(&s[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

/// A point in the grid: its run id and the overrides that define it.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPoint {
    pub run_id: String,
    pub overrides: Vec<String>,
}

/// Cartesian product of `axes`, first axis varying slowest.
pub fn grid(prefix: &str, axes: &[Axis]) -> Vec<GridPoint> {
    let mut points = vec![GridPoint {
        run_id: prefix.to_owned(),
        overrides: Vec::new(),
    }];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut next = p.clone();
                    next.overrides.push(format!("{}={v}", axis.key));
                    next.run_id = format!("{}__{}={}", next.run_id, axis.key, sanitize(v));
                    next
                })
            })
            .collect();
    }
    points
}

fn sanitize(v: &str) -> String {
    v.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '+') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub struct SweepRun {
    pub point: GridPoint,
    pub outcome: RunOutcome,
}

/// Runs every grid point (in parallel) and, with `out`, writes each run
/// under `out/<run-id>/` plus an index `out/sweep.csv`.
pub fn run_sweep(base: &ExperimentConfig, prefix: &str, axes: &[Axis], out: Option<&Path>) -> Result<Vec<SweepRun>> {
    let points = grid(prefix, axes);
    let configs = points
        .iter()
        .map(|p| base.with_overrides(&p.overrides))
        .collect::<Result<Vec<_>>>()?;
    let outcomes = configs.par_iter().map(run_experiment).collect::<Result<Vec<_>>>()?;
    let runs: Vec<SweepRun> = points
        .into_iter()
        .zip(outcomes)
        .map(|(point, outcome)| SweepRun { point, outcome })
        .collect();
    if let Some(dir) = out {
        for r in &runs {
            r.outcome.write_to(&dir.join(&r.point.run_id))?;
        }
        std::fs::write(dir.join("sweep.csv"), index_csv(axes, &runs))?;
    }
    Ok(runs)
}

pub fn index_csv(axes: &[Axis], runs: &[SweepRun]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run_id".to_owned()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(
        [
            "metric",
            "final_eval_metric",
            "best_eval_metric",
            "released_params_total",
        ]
        .map(String::from),
    );
    w.write_record(&header).expect("in-memory write");
    for r in runs {
        let mut row = vec![r.point.run_id.clone()];
        row.extend(
            r.point
                .overrides
                .iter()
                .map(|o| o.split_once('=').map_or("", |(_, v)| v).to_owned()),
        );
        let s = &r.outcome.summary;
        row.extend([
            s.metric.to_owned(),
            s.last.metric.to_string(),
            s.best.metric.to_string(),
            s.released_params_total.to_string(),
        ]);
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}
