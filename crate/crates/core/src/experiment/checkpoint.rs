//! Binary checkpoints. All integers and floats are little-endian:
//!
//! ```text
//! magic        8 bytes  "TCCKPT\0\0"
//! version      u32
//! seed         u64
//! step         u64
//! config_hash  u64
//! clock        u64
//! n_slots      u32
//! n_values     u32
//! has_velocity u8
//! 3 × agent, in builder, summarizer, responder order:
//!   role         u8      (1, 2, 3)
//!   feature_dim  u64
//!   vocab_size   u64
//!   step         u64
//!   weights      f64 × feature_dim·vocab_size   (row-major, feature-major)
//!   velocity     f64 × feature_dim·vocab_size   (only if has_velocity)
//! ```

use std::fs;
use std::path::Path;

use crate::agents::PerAgent;
use crate::env::Vocab;
use crate::error::{Error, Result};
use crate::optim::TrainState;
use crate::policy::{Policies, PolicyParams, Role};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"TCCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    /// Last completed training step.
    pub step: u64,
    pub config_hash: u64,
    pub clock: u64,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let vocab = self.state.policies.vocab();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for x in [self.seed, self.step, self.config_hash, self.clock] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&vocab.n_slots.to_le_bytes());
        out.extend_from_slice(&vocab.n_values.to_le_bytes());
        out.push(self.state.velocity.is_some() as u8);
        for role in Role::ALL {
            let p = self.state.policies.get(role);
            out.push(role.level());
            for x in [p.feature_dim() as u64, p.vocab_size() as u64, self.step] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            let velocity = self.state.velocity.as_ref().map(|v| v.get(role));
            for w in p.weights.iter().chain(velocity.into_iter().flatten()) {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let (seed, step, config_hash, clock) = (r.u64()?, r.u64()?, r.u64()?, r.u64()?);
        let vocab = Vocab::new(r.u32()?, r.u32()?);
        let has_velocity = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::Checkpoint(format!("bad velocity flag {b}"))),
        };
        let mut params = Vec::new();
        let mut velocity = Vec::new();
        for role in Role::ALL {
            let level = r.take(1)?[0];
            if level != role.level() {
                return Err(Error::Checkpoint(format!(
                    "expected {} block, found role {level}",
                    role.name()
                )));
            }
            let expected = PolicyParams::zeros(role, vocab);
            let (dim, v, agent_step) = (r.u64()?, r.u64()?, r.u64()?);
            if dim != expected.feature_dim() as u64 || v != expected.vocab_size() as u64 {
                return Err(Error::Checkpoint(format!(
                    "{} block is {dim}×{v}, vocabulary implies {}×{}",
                    role.name(),
                    expected.feature_dim(),
                    expected.vocab_size()
                )));
            }
            if agent_step != step {
                return Err(Error::Checkpoint(format!(
                    "{} block is at step {agent_step}, header at {step}",
                    role.name()
                )));
            }
            let n = expected.weights.len();
            params.push(PolicyParams {
                weights: r.f64s(n)?,
                ..expected
            });
            if has_velocity {
                velocity.push(r.f64s(n)?);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let mut params = params.into_iter();
        let policies = Policies::new(
            params.next().unwrap(),
            params.next().unwrap(),
            params.next().unwrap(),
        );
        let velocity = has_velocity.then(|| {
            let mut v = velocity.into_iter();
            PerAgent {
                builder: v.next().unwrap(),
                summarizer: v.next().unwrap(),
                responder: v.next().unwrap(),
            }
        });
        Ok(Self {
            seed,
            step,
            config_hash,
            clock,
            state: TrainState { policies, velocity },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write-then-rename so a crash never leaves a half-written checkpoint.
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("oversized block".into()))?,
            )?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
