use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::PerAgent;
use crate::env::TaskConfig;
use crate::error::{Error, Result};
use crate::optim::TrainConfig;
use crate::rollout::OutputLimits;

/// Initialization and decoding limits shared by all three agents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    /// Per-role strength of the prior the weights start from; 0 is a uniform policy.
    pub init_prior: PerAgent<f64>,
    pub builder_max_len: usize,
    pub summarizer_max_len: usize,
    pub responder_max_len: usize,
}

impl PolicyConfig {
    pub fn limits(&self) -> OutputLimits {
        OutputLimits {
            builder_max_len: self.builder_max_len,
            summarizer_max_len: self.summarizer_max_len,
            responder_max_len: self.responder_max_len,
        }
    }
}

/// One experiment: every scientific knob is a required key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub steps: u64,
    pub eval_cadence: u64,
    pub eval_tasks: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_cadence: u64,
    /// Dump the full rollout tree every this many steps; 0 disables.
    #[serde(default)]
    pub debug_tree_every: u64,
    pub task: TaskConfig,
    pub policy: PolicyConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return bad("run_name must be a non-empty file name");
        }
        if self.eval_cadence < 1 {
            return bad("eval_cadence must be >= 1");
        }
        if self.eval_tasks < 1 {
            return bad("eval_tasks must be >= 1");
        }
        let p = &self.policy.init_prior;
        if [p.builder, p.summarizer, p.responder]
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return bad("init_prior must be finite and >= 0");
        }
        self.task.validate()?;
        self.policy.limits().validate()?;
        self.train.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let loc = e
                .span()
                .map(|s| format!("line {}: ", line_of_offset(text, s.start)))
                .unwrap_or_default();
            Error::Config(format!("{loc}{}", e.message()))
        })?;
        cfg.validate().map_err(|e| match e {
            Error::Config(msg) => match line_of_key(text, &msg) {
                Some(line) => Error::Config(format!("line {line}: {msg}")),
                None => Error::Config(msg),
            },
            other => other,
        })?;
        Ok(cfg)
    }

    /// Reads, parses and validates a config file. Errors carry the offending line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Stable fingerprint of every field except `output_dir`, stored in
    /// metrics headers and checkpoints. Where artifacts land does not change
    /// what is computed, so moved runs still resume and compare equal.
    pub fn hash(&self) -> u64 {
        let mut identity = self.clone();
        identity.output_dir = PathBuf::new();
        let canonical = serde_json::to_vec(&identity).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    /// Directory holding the artifacts of one seed.
    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir
            .join(&self.run_name)
            .join(format!("seed-{seed}"))
    }
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Finds the line assigning the first config key mentioned in a validation message.
fn line_of_key(text: &str, msg: &str) -> Option<usize> {
    msg.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .filter(|w| w.contains('_') || w.chars().all(|c| c.is_ascii_lowercase()))
        .filter(|w| !w.is_empty())
        .find_map(|key| {
            text.lines().position(|line| {
                line.trim_start()
                    .strip_prefix(key)
                    .is_some_and(|rest| rest.trim_start().starts_with('='))
            })
        })
        .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
run_name = "t"
output_dir = "out"
steps = 10
eval_cadence = 5
eval_tasks = 4
checkpoint_cadence = 0

[task]
n_slots = 2
n_values = 2
history_len = 4
noise_fraction = 0.25
update_rate = 0.5

[policy]
builder_max_len = 12
summarizer_max_len = 12
responder_max_len = 1

[policy.init_prior]
builder = 1.0
summarizer = 2.0
responder = 2.0

[train]
group_size = 4
summary_branches = 2
response_branches = 2
eps_norm = 1e-6
eps_clip = 0.2
length_penalty = -1.0
learning_rate = 0.5
momentum = 0.0
updates_per_rollout = 1
reward_scheme = "tree_credit"
task_weight = 0.5
seeds = [1, 2]
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.train.group_size, 4);
        let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn hash_sees_every_knob() {
        let a = ExperimentConfig::from_toml(BASE).unwrap();
        let mut b = a.clone();
        b.train.eps_clip = 0.21;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), c.hash());
    }

    #[test]
    fn validation_errors_point_at_the_line() {
        let text = BASE.replace("eps_clip = 0.2", "eps_clip = 1.5");
        let msg = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        let line = text
            .lines()
            .position(|l| l.starts_with("eps_clip"))
            .unwrap()
            + 1;
        assert!(msg.contains(&format!("line {line}:")), "{msg}");

        let text = BASE.replace("group_size = 4", "group_size = 1");
        let msg = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        let line = text
            .lines()
            .position(|l| l.starts_with("group_size"))
            .unwrap()
            + 1;
        assert!(msg.contains(&format!("line {line}:")), "{msg}");
    }

    #[test]
    fn parse_errors_point_at_the_line() {
        let text = BASE.replace("steps = 10", "steps = \"ten\"");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.is_config());
        let line = text.lines().position(|l| l.starts_with("steps")).unwrap() + 1;
        assert!(err.to_string().contains(&format!("line {line}:")), "{err}");
    }

    #[test]
    fn scientific_keys_have_no_defaults() {
        let text = BASE.replace("eps_clip = 0.2\n", "");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("eps_clip"), "{err}");
        let text = BASE.replace("seeds = [1, 2]", "seeds = [1, 2]\nbogus = 3");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }
}
