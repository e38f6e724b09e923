use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::run::run_seed;
use crate::credit::mean_std;
use crate::error::{Error, Result};
use crate::optim::SchemeTag;

/// The configuration knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Scheme,
    G,
    J,
    K,
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scheme" => Ok(Axis::Scheme),
            "G" | "g" => Ok(Axis::G),
            "J" | "j" => Ok(Axis::J),
            "K" | "k" => Ok(Axis::K),
            _ => Err(Error::Config(format!(
                "unknown sweep axis '{s}' (expected scheme, G, J or K)"
            ))),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Scheme => "scheme",
            Axis::G => "G",
            Axis::J => "J",
            Axis::K => "K",
        })
    }
}

impl Axis {
    /// The base config with this axis set to `value`, under its own run name.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let count = || {
            value.parse::<usize>().map_err(|_| {
                Error::Config(format!(
                    "sweep value '{value}' for axis {self} is not an integer"
                ))
            })
        };
        match self {
            Axis::Scheme => cfg.train.reward_scheme = value.parse::<SchemeTag>()?,
            Axis::G => cfg.train.group_size = count()?,
            Axis::J => cfg.train.summary_branches = count()?,
            Axis::K => cfg.train.response_branches = count()?,
        }
        cfg.run_name = format!("{}.{self}-{value}", base.run_name);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub axis: String,
    pub value: String,
    pub seeds: usize,
    pub mean_final_eval: f64,
    pub std_final_eval: f64,
    /// Per-seed final eval rewards, in seed order.
    #[serde(skip)]
    pub finals: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub cells: Vec<CellResult>,
    pub csv: PathBuf,
}

/// One full training run per value per seed, all in parallel, then a CSV of
/// mean ± population std of the final eval reward per cell.
pub fn sweep(base: &ExperimentConfig, axis: Axis, values: &[String]) -> Result<SweepResult> {
    base.validate()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let cells: Vec<ExperimentConfig> = values
        .iter()
        .map(|v| axis.apply(base, v))
        .collect::<Result<_>>()?;
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| base.train.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let finals: Vec<f64> = jobs
        .par_iter()
        .map(|&(c, s)| {
            run_seed(&cells[c], s, None)
                .map(|o| o.final_eval().expect("every run evaluates at least once"))
        })
        .collect::<Result<_>>()?;

    let n = base.train.seeds.len();
    let results: Vec<CellResult> = values
        .iter()
        .zip(finals.chunks(n))
        .map(|(v, f)| {
            let (mean, std) = mean_std(f);
            CellResult {
                axis: axis.to_string(),
                value: v.clone(),
                seeds: n,
                mean_final_eval: mean,
                std_final_eval: std,
                finals: f.to_vec(),
            }
        })
        .collect();

    fs::create_dir_all(&base.output_dir).map_err(|e| Error::io(&base.output_dir, e))?;
    let csv_path = base
        .output_dir
        .join(format!("{}.sweep-{axis}.csv", base.run_name));
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &results {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    Ok(SweepResult {
        cells: results,
        csv: csv_path,
    })
}
