use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::PerAgent;
use crate::error::{Error, Result};
use crate::optim::SchemeTag;

pub const METRICS_SCHEMA: &str = "treecredit-metrics";
pub const METRICS_VERSION: u32 = 1;

/// One line of a metrics file. `clock` is a logical timestamp: the number of
/// tokens sampled by the run so far, which unlike wall time is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricsRecord {
    Header {
        schema: String,
        version: u32,
        run: String,
        seed: u64,
        config_hash: String,
    },
    Train {
        run: String,
        seed: u64,
        step: u64,
        scheme: SchemeTag,
        mean_reward: f64,
        obj_builder: f64,
        obj_summarizer: f64,
        obj_responder: f64,
        grad_norms: PerAgent<f64>,
        builder_len_ratio: f64,
        clock: u64,
    },
    Eval {
        run: String,
        seed: u64,
        step: u64,
        scheme: SchemeTag,
        mean_eval_reward: f64,
        clock: u64,
    },
}

impl MetricsRecord {
    pub fn header(run: &str, seed: u64, config_hash: u64) -> Self {
        MetricsRecord::Header {
            schema: METRICS_SCHEMA.into(),
            version: METRICS_VERSION,
            run: run.into(),
            seed,
            config_hash: format!("{config_hash:016x}"),
        }
    }

    pub fn step(&self) -> Option<u64> {
        match self {
            MetricsRecord::Header { .. } => None,
            MetricsRecord::Train { step, .. } | MetricsRecord::Eval { step, .. } => Some(*step),
        }
    }
}

/// Destination for metrics records; files in production, vectors in tests.
pub trait MetricsSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Append-only JSON-lines writer, flushed after every record so an aborted run
/// leaves a readable file.
pub struct JsonlSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.into(),
            out: BufWriter::new(file),
        })
    }

    /// Reopens an existing file, keeping only the header and records up to
    /// `step`. Kept lines are copied verbatim, not re-serialized. A torn last
    /// line (no trailing newline, as left by a crash mid-write) is dropped.
    pub fn truncate_after(path: &Path, step: u64) -> Result<Self> {
        let mut text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.truncate(text.rfind('\n').map_or(0, |i| i + 1));
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
        read_metrics(path)?;
        let mut kept = String::with_capacity(text.len());
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let record: MetricsRecord = serde_json::from_str(line)?;
            if record.step().is_none_or(|s| s <= step) {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        std::fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        Self::append(path)
    }

    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.into(),
            out: BufWriter::new(file),
        })
    }
}

impl MetricsSink for JsonlSink {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out
            .write_all(b"\n")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Reads and checks a metrics file: a known header first, then records with
/// non-decreasing steps and rewards in `[0, 1]`.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let bad = |reason: String| Error::Metrics {
        path: path.into(),
        reason,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut last_step = 0;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord =
            serde_json::from_str(&line).map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        match (&record, records.is_empty()) {
            (
                MetricsRecord::Header {
                    schema, version, ..
                },
                true,
            ) => {
                if schema != METRICS_SCHEMA || *version != METRICS_VERSION {
                    return Err(bad(format!("unsupported schema {schema} v{version}")));
                }
            }
            (MetricsRecord::Header { .. }, false) => {
                return Err(bad(format!("line {}: repeated header", n + 1)))
            }
            (_, true) => return Err(bad("missing header line".into())),
            (r, false) => {
                let step = r.step().unwrap();
                if step < last_step {
                    return Err(bad(format!(
                        "line {}: step {step} after step {last_step}",
                        n + 1
                    )));
                }
                last_step = step;
                let reward = match r {
                    MetricsRecord::Train { mean_reward, .. } => *mean_reward,
                    MetricsRecord::Eval {
                        mean_eval_reward, ..
                    } => *mean_eval_reward,
                    MetricsRecord::Header { .. } => unreachable!(),
                };
                if !(0.0..=1.0).contains(&reward) {
                    return Err(bad(format!(
                        "line {}: reward {reward} outside [0, 1]",
                        n + 1
                    )));
                }
            }
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(bad("empty file".into()));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(step: u64, r: f64) -> MetricsRecord {
        MetricsRecord::Eval {
            run: "r".into(),
            seed: 1,
            step,
            scheme: SchemeTag::TreeCredit,
            mean_eval_reward: r,
            clock: step * 10,
        }
    }

    #[test]
    fn round_trip_and_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut sink = JsonlSink::create(&path).unwrap();
        let records = vec![
            MetricsRecord::header("r", 1, 0xabc),
            eval(0, 0.25),
            eval(5, 0.5),
            eval(10, 1.0),
        ];
        for r in &records {
            sink.record(r).unwrap();
        }
        drop(sink);
        assert_eq!(read_metrics(&path).unwrap(), records);

        let mut sink = JsonlSink::truncate_after(&path, 5).unwrap();
        sink.record(&eval(7, 0.75)).unwrap();
        drop(sink);
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[3], eval(7, 0.75));
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "{\"kind\":\"eval\"}\n").unwrap();
        assert!(matches!(read_metrics(&path), Err(Error::Metrics { .. })));

        let mut sink = JsonlSink::create(&path).unwrap();
        for r in [MetricsRecord::header("r", 1, 0), eval(5, 0.5), eval(3, 0.5)] {
            sink.record(&r).unwrap();
        }
        drop(sink);
        let err = read_metrics(&path).unwrap_err().to_string();
        assert!(err.contains("step 3 after step 5"), "{err}");
    }
}
