use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::metrics::{read_metrics, MetricsRecord};
use crate::credit::mean_std;
use crate::error::{Error, Result};

/// Eval reward a run must reach for the steps-to-threshold statistic.
pub const THRESHOLD: f64 = 0.9;
/// Printed in place of a step count when a run never reached the threshold.
pub const NOT_REACHED: &str = "not reached";

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub path: PathBuf,
    pub run: String,
    pub seed: u64,
    pub scheme: String,
    pub final_step: u64,
    pub final_eval: Option<f64>,
    pub mean_train_reward: Option<f64>,
    pub steps_to_threshold: Option<u64>,
}

/// First eval step whose reward is at least `threshold`.
pub fn steps_to_threshold(evals: &[(u64, f64)], threshold: f64) -> Option<u64> {
    evals
        .iter()
        .find(|&&(_, r)| r >= threshold)
        .map(|&(s, _)| s)
}

fn summarize(path: &Path, records: &[MetricsRecord]) -> RunSummary {
    let (run, seed) = match &records[0] {
        MetricsRecord::Header { run, seed, .. } => (run.clone(), *seed),
        _ => unreachable!("read_metrics guarantees a header"),
    };
    let mut scheme = String::from("-");
    let mut evals = Vec::new();
    let mut train = Vec::new();
    let mut final_step = 0;
    for r in &records[1..] {
        match r {
            MetricsRecord::Eval {
                step,
                mean_eval_reward,
                scheme: s,
                ..
            } => {
                evals.push((*step, *mean_eval_reward));
                scheme = s.to_string();
                final_step = final_step.max(*step);
            }
            MetricsRecord::Train {
                step,
                mean_reward,
                scheme: s,
                ..
            } => {
                train.push(*mean_reward);
                scheme = s.to_string();
                final_step = final_step.max(*step);
            }
            MetricsRecord::Header { .. } => {}
        }
    }
    RunSummary {
        path: path.into(),
        run,
        seed,
        scheme,
        final_step,
        final_eval: evals.last().map(|e| e.1),
        mean_train_reward: (!train.is_empty())
            .then(|| train.iter().sum::<f64>() / train.len() as f64),
        steps_to_threshold: steps_to_threshold(&evals, THRESHOLD),
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Summarizes every `metrics.jsonl` under `dir` into `report.md`,
/// `summary.csv` and the plot-ready `curves.csv`. Fails, naming every bad
/// file, if any metrics file is missing or corrupt.
pub fn report(dir: &Path) -> Result<Vec<RunSummary>> {
    let mut files: Vec<PathBuf> = WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == "metrics.jsonl")
        .map(|e| e.into_path())
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Metrics {
            path: dir.into(),
            reason: "no metrics.jsonl files found".into(),
        });
    }
    let mut parsed = Vec::new();
    let mut bad = Vec::new();
    for f in &files {
        match read_metrics(f) {
            Ok(r) => parsed.push((f.clone(), r)),
            Err(e) => bad.push(e.to_string()),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Metrics {
            path: dir.into(),
            reason: format!("{} bad metrics file(s):\n  {}", bad.len(), bad.join("\n  ")),
        });
    }

    let summaries: Vec<RunSummary> = parsed.iter().map(|(p, r)| summarize(p, r)).collect();

    let summary_path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record([
        "run",
        "seed",
        "scheme",
        "final_step",
        "final_eval_reward",
        "mean_train_reward",
        "steps_to_0.9",
    ])?;
    for s in &summaries {
        w.write_record([
            s.run.clone(),
            s.seed.to_string(),
            s.scheme.clone(),
            s.final_step.to_string(),
            s.final_eval.map_or_else(String::new, |v| v.to_string()),
            s.mean_train_reward
                .map_or_else(String::new, |v| v.to_string()),
            s.steps_to_threshold
                .map_or_else(|| NOT_REACHED.into(), |v| v.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&summary_path, e))?;

    let curves_path = dir.join("curves.csv");
    let mut w = csv::Writer::from_path(&curves_path)?;
    w.write_record(["run", "seed", "scheme", "kind", "step", "reward", "clock"])?;
    for (_, records) in &parsed {
        for r in records {
            let row = match r {
                MetricsRecord::Train {
                    run,
                    seed,
                    step,
                    scheme,
                    mean_reward,
                    clock,
                    ..
                } => (run, seed, scheme, "train", step, mean_reward, clock),
                MetricsRecord::Eval {
                    run,
                    seed,
                    step,
                    scheme,
                    mean_eval_reward,
                    clock,
                } => (run, seed, scheme, "eval", step, mean_eval_reward, clock),
                MetricsRecord::Header { .. } => continue,
            };
            w.write_record([
                row.0.clone(),
                row.1.to_string(),
                row.2.to_string(),
                row.3.to_string(),
                row.4.to_string(),
                row.5.to_string(),
                row.6.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&curves_path, e))?;

    let mut md = String::new();
    writeln!(md, "# Training report\n").unwrap();
    writeln!(md, "## Runs\n").unwrap();
    writeln!(
        md,
        "| run | seed | scheme | final step | final eval | mean train | steps to {THRESHOLD} |"
    )
    .unwrap();
    writeln!(md, "|---|---|---|---|---|---|---|").unwrap();
    for s in &summaries {
        writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} |",
            s.run,
            s.seed,
            s.scheme,
            s.final_step,
            fmt_opt(s.final_eval),
            fmt_opt(s.mean_train_reward),
            s.steps_to_threshold
                .map_or_else(|| NOT_REACHED.into(), |v| v.to_string()),
        )
        .unwrap();
    }
    let mut by_scheme: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for s in &summaries {
        if let Some(f) = s.final_eval {
            by_scheme.entry(&s.scheme).or_default().push(f);
        }
    }
    writeln!(md, "\n## By scheme\n").unwrap();
    writeln!(md, "| scheme | runs | mean final eval | std |").unwrap();
    writeln!(md, "|---|---|---|---|").unwrap();
    for (scheme, finals) in &by_scheme {
        let (m, sd) = mean_std(finals);
        writeln!(md, "| {scheme} | {} | {m:.4} | {sd:.4} |", finals.len()).unwrap();
    }
    let md_path = dir.join("report.md");
    fs::write(&md_path, md).map_err(|e| Error::io(&md_path, e))?;
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::metrics::{JsonlSink, MetricsSink};
    use crate::optim::SchemeTag;

    fn write_run(dir: &Path, name: &str, evals: &[(u64, f64)]) {
        let d = dir.join(name);
        fs::create_dir_all(&d).unwrap();
        let mut sink = JsonlSink::create(&d.join("metrics.jsonl")).unwrap();
        sink.record(&MetricsRecord::header(name, 1, 0)).unwrap();
        for &(step, r) in evals {
            sink.record(&MetricsRecord::Eval {
                run: name.into(),
                seed: 1,
                step,
                scheme: SchemeTag::FinalOnly,
                mean_eval_reward: r,
                clock: 0,
            })
            .unwrap();
        }
    }

    #[test]
    fn threshold_sentinel() {
        assert_eq!(
            steps_to_threshold(&[(0, 0.1), (10, 0.95), (20, 0.8)], 0.9),
            Some(10)
        );
        assert_eq!(steps_to_threshold(&[(0, 0.1), (10, 0.5)], 0.9), None);
    }

    #[test]
    fn writes_tables() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), "a", &[(0, 0.25), (5, 0.9), (10, 1.0)]);
        write_run(dir.path(), "b", &[(0, 0.25), (10, 0.5)]);
        let s = report(dir.path()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].steps_to_threshold, Some(5));
        assert_eq!(s[1].final_eval, Some(0.5));
        let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(summary.contains(NOT_REACHED), "{summary}");
        let md = fs::read_to_string(dir.path().join("report.md")).unwrap();
        assert!(md.contains("| final_only | 2 | 0.7500 | 0.2500 |"), "{md}");
        let curves = fs::read_to_string(dir.path().join("curves.csv")).unwrap();
        assert_eq!(curves.lines().count(), 1 + 5);
    }

    #[test]
    fn lists_every_bad_file() {
        let dir = tempfile::tempdir().unwrap();
        write_run(dir.path(), "good", &[(0, 0.5)]);
        for bad in ["x", "y"] {
            let d = dir.path().join(bad);
            fs::create_dir_all(&d).unwrap();
            fs::write(d.join("metrics.jsonl"), "not json\n").unwrap();
        }
        let err = report(dir.path()).unwrap_err().to_string();
        assert!(
            err.contains("x/metrics.jsonl") && err.contains("y/metrics.jsonl"),
            "{err}"
        );
        assert!(report(&dir.path().join("missing")).is_err());
    }
}
