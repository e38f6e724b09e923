//! Synthetic long-horizon memory tasks.
//!
//! A task is a history of slot-update records, some of them flagged as noise,
//! plus a query slot whose gold answer is the value of the latest non-noise
//! update to that slot. Histories are serialized into a flat token stream that
//! all three agents share:
//!
//! ```text
//! [0, n_slots)                      slot tokens
//! [n_slots, n_slots + n_values)     value tokens
//! n_slots + n_values                FACT flag
//! n_slots + n_values + 1            NOISE flag
//! n_slots + n_values + 2            end of sequence (agent outputs only)
//! ```
//!
//! Each record serializes to exactly three tokens `(slot, value, flag)`.
//!
//! Noise records reuse a slot that already holds a fact and assign it a value
//! different from the one it holds, so an agent that keeps noise in memory
//! answers wrongly rather than merely wasting space.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

pub const TOKENS_PER_RECORD: usize = 3;

/// The flat token vocabulary shared by every agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    pub n_slots: u32,
    pub n_values: u32,
}

impl Vocab {
    pub fn new(n_slots: u32, n_values: u32) -> Self {
        Self { n_slots, n_values }
    }

    pub fn size(&self) -> usize {
        (self.n_slots + self.n_values + 3) as usize
    }

    pub fn slot(&self, slot: u32) -> Token {
        debug_assert!(slot < self.n_slots);
        slot
    }

    pub fn value(&self, value: u32) -> Token {
        debug_assert!(value < self.n_values);
        self.n_slots + value
    }

    pub fn fact(&self) -> Token {
        self.n_slots + self.n_values
    }

    pub fn noise(&self) -> Token {
        self.n_slots + self.n_values + 1
    }

    pub fn eos(&self) -> Token {
        self.n_slots + self.n_values + 2
    }

    pub fn flag(&self, is_noise: bool) -> Token {
        if is_noise {
            self.noise()
        } else {
            self.fact()
        }
    }

    pub fn is_slot(&self, t: Token) -> bool {
        t < self.n_slots
    }

    pub fn is_value(&self, t: Token) -> bool {
        t >= self.n_slots && t < self.n_slots + self.n_values
    }

    pub fn is_flag(&self, t: Token) -> bool {
        t == self.fact() || t == self.noise()
    }

    /// Maps a value token back to its value identifier.
    pub fn value_of(&self, t: Token) -> Option<u32> {
        self.is_value(t).then(|| t - self.n_slots)
    }

    /// Whether `tokens` at `pos` holds a well-formed `(slot, value, flag)` triple.
    pub fn is_record_at(&self, tokens: &[Token], pos: usize) -> bool {
        pos + TOKENS_PER_RECORD <= tokens.len()
            && self.is_slot(tokens[pos])
            && self.is_value(tokens[pos + 1])
            && self.is_flag(tokens[pos + 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Record {
    pub slot: u32,
    pub value: u32,
    pub time: u64,
    #[serde(rename = "noise")]
    pub is_noise: bool,
}

/// A scalar reward in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardValue(f64);

impl RewardValue {
    pub const ZERO: RewardValue = RewardValue(0.0);
    pub const ONE: RewardValue = RewardValue(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::Config(format!("reward {value} outside [0, 1]")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Task-generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub n_slots: u32,
    pub n_values: u32,
    pub history_len: usize,
    /// Fraction of records flagged as noise; the count is `floor(history_len * noise_fraction)`.
    pub noise_fraction: f64,
    /// Probability that a fact record picks its slot uniformly over all slots
    /// (possibly overwriting one) instead of a slot not yet written.
    pub update_rate: f64,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_slots < 1 {
            return Err(Error::Config("n_slots must be >= 1".into()));
        }
        if self.n_values < 2 {
            return Err(Error::Config("n_values must be >= 2".into()));
        }
        if self.history_len < 1 {
            return Err(Error::Config("history_len must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.noise_fraction) {
            return Err(Error::Config(format!(
                "noise_fraction {} must lie in [0, 1)",
                self.noise_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.update_rate) {
            return Err(Error::Config(format!(
                "update_rate {} must lie in [0, 1]",
                self.update_rate
            )));
        }
        if self.n_noise() >= self.history_len {
            return Err(Error::Config(
                "noise_fraction leaves no non-noise record, so no gold answer exists".into(),
            ));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.n_slots, self.n_values)
    }

    pub fn n_noise(&self) -> usize {
        (self.history_len as f64 * self.noise_fraction).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub seed: u64,
    pub vocab: Vocab,
    pub history: Vec<Record>,
    pub query_slot: u32,
    pub gold_answer: u32,
    pub history_token_len: usize,
}

impl Task {
    /// The record the gold answer comes from.
    pub fn gold_record(&self) -> &Record {
        self.history
            .iter()
            .rev()
            .find(|r| !r.is_noise && r.slot == self.query_slot)
            .expect("task invariant: query slot has a fact")
    }

    pub fn query_token(&self) -> Token {
        self.vocab.slot(self.query_slot)
    }
}

pub fn generate_task(seed: u64, cfg: &TaskConfig) -> Result<Task> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_noise = cfg.n_noise();

    let mut noise_mask = vec![false; cfg.history_len];
    noise_mask[..n_noise].iter_mut().for_each(|m| *m = true);
    noise_mask.shuffle(&mut rng);

    // current[s] is the value of slot s's latest fact, if any.
    let mut current: Vec<Option<u32>> = vec![None; cfg.n_slots as usize];
    let mut history = Vec::with_capacity(cfg.history_len);
    let mut time = 0u64;
    for is_noise in noise_mask {
        time += rng.gen_range(1..=3);
        let written: Vec<u32> = (0..cfg.n_slots)
            .filter(|&s| current[s as usize].is_some())
            .collect();
        let (slot, value) = if is_noise {
            // Noise reuses a real slot and contradicts its current value.
            if written.is_empty() {
                (
                    rng.gen_range(0..cfg.n_slots),
                    rng.gen_range(0..cfg.n_values),
                )
            } else {
                let slot = written[rng.gen_range(0..written.len())];
                let held = current[slot as usize].unwrap();
                let value = (held + rng.gen_range(1..cfg.n_values)) % cfg.n_values;
                (slot, value)
            }
        } else {
            let fresh: Vec<u32> = (0..cfg.n_slots)
                .filter(|&s| current[s as usize].is_none())
                .collect();
            let slot = if fresh.is_empty() || rng.gen_bool(cfg.update_rate) {
                rng.gen_range(0..cfg.n_slots)
            } else {
                fresh[rng.gen_range(0..fresh.len())]
            };
            let value = rng.gen_range(0..cfg.n_values);
            current[slot as usize] = Some(value);
            (slot, value)
        };
        history.push(Record {
            slot,
            value,
            time,
            is_noise,
        });
    }

    let candidates: Vec<u32> = (0..cfg.n_slots)
        .filter(|&s| current[s as usize].is_some())
        .collect();
    let query_slot = candidates[rng.gen_range(0..candidates.len())];
    let gold_answer = history
        .iter()
        .rev()
        .find(|r| !r.is_noise && r.slot == query_slot)
        .map(|r| r.value)
        .expect("query slot was drawn from written slots");

    Ok(Task {
        seed,
        vocab: cfg.vocab(),
        history_token_len: history.len() * TOKENS_PER_RECORD,
        history,
        query_slot,
        gold_answer,
    })
}

/// Serializes a history as `(slot, value, flag)` token triples.
pub fn serialize_history(task: &Task) -> Vec<Token> {
    serialize_records(&task.vocab, &task.history)
}

pub fn serialize_records(vocab: &Vocab, records: &[Record]) -> Vec<Token> {
    records
        .iter()
        .flat_map(|r| {
            [
                vocab.slot(r.slot),
                vocab.value(r.value),
                vocab.flag(r.is_noise),
            ]
        })
        .collect()
}

/// Inverse of [`serialize_history`]. Times are not part of the token stream,
/// so records come back with `time` set to their index.
pub fn deserialize_history(vocab: &Vocab, tokens: &[Token]) -> Result<Vec<Record>> {
    if !tokens.len().is_multiple_of(TOKENS_PER_RECORD) {
        return Err(Error::Shape(format!(
            "{} tokens do not form whole records",
            tokens.len()
        )));
    }
    (0..tokens.len())
        .step_by(TOKENS_PER_RECORD)
        .map(|pos| {
            if !vocab.is_record_at(tokens, pos) {
                return Err(Error::Shape(format!("no record at token {pos}")));
            }
            Ok(Record {
                slot: tokens[pos],
                value: vocab.value_of(tokens[pos + 1]).unwrap(),
                time: (pos / TOKENS_PER_RECORD) as u64,
                is_noise: tokens[pos + 2] == vocab.noise(),
            })
        })
        .collect()
}

/// Exact-match evaluator: 1 iff the answer equals the gold value.
/// Identifiers outside `[0, n_values)` score 0.
pub fn evaluate(answer: u32, task: &Task) -> RewardValue {
    if answer < task.vocab.n_values && answer == task.gold_answer {
        RewardValue::ONE
    } else {
        RewardValue::ZERO
    }
}

/// How a responder's token sequence is turned into a reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluator {
    /// Only the first emitted token is the answer.
    #[default]
    ExactMatch,
    /// Token-level F1 between the emitted value tokens and the gold value.
    TokenF1,
}

impl Evaluator {
    pub fn score(self, tokens: &[Token], task: &Task) -> RewardValue {
        let vocab = &task.vocab;
        match self {
            Evaluator::ExactMatch => {
                let answer = tokens
                    .first()
                    .and_then(|&t| vocab.value_of(t))
                    .unwrap_or(u32::MAX);
                evaluate(answer, task)
            }
            Evaluator::TokenF1 => {
                let predicted: Vec<Token> = tokens
                    .iter()
                    .copied()
                    .filter(|&t| t != vocab.eos())
                    .collect();
                let hits = predicted
                    .iter()
                    .filter(|&&t| vocab.value_of(t) == Some(task.gold_answer))
                    .count();
                if hits == 0 {
                    return RewardValue::ZERO;
                }
                let precision = hits as f64 / predicted.len() as f64;
                // One gold token: recall saturates at the first hit.
                let recall = 1.0;
                RewardValue(2.0 * precision * recall / (precision + recall))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TaskLine {
    seed: u64,
    records: Vec<Record>,
    query_slot: u32,
    gold_answer: u32,
}

/// Writes tasks as JSON lines, one task per line.
pub fn write_tasks_jsonl<W: Write>(mut out: W, tasks: &[Task]) -> Result<()> {
    for task in tasks {
        let line = TaskLine {
            seed: task.seed,
            records: task.history.clone(),
            query_slot: task.query_slot,
            gold_answer: task.gold_answer,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io("<tasks>", e))?;
    }
    Ok(())
}

/// Reads tasks written by [`write_tasks_jsonl`], checking every task invariant.
pub fn read_tasks_jsonl<R: BufRead>(input: R, vocab: Vocab) -> Result<Vec<Task>> {
    let mut tasks = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<tasks>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TaskLine = serde_json::from_str(&line)?;
        let bad = |msg: &str| Error::Config(format!("task on line {}: {msg}", lineno + 1));
        for pair in parsed.records.windows(2) {
            if pair[1].time <= pair[0].time {
                return Err(bad("record times are not strictly increasing"));
            }
        }
        if parsed
            .records
            .iter()
            .any(|r| r.slot >= vocab.n_slots || r.value >= vocab.n_values)
        {
            return Err(bad("record outside the vocabulary"));
        }
        let latest = parsed
            .records
            .iter()
            .rev()
            .find(|r| !r.is_noise && r.slot == parsed.query_slot)
            .ok_or_else(|| bad("query slot has no fact record"))?;
        if latest.value != parsed.gold_answer {
            return Err(bad("gold answer disagrees with the latest fact"));
        }
        tasks.push(Task {
            seed: parsed.seed,
            vocab,
            history_token_len: parsed.records.len() * TOKENS_PER_RECORD,
            history: parsed.records,
            query_slot: parsed.query_slot,
            gold_answer: parsed.gold_answer,
        });
    }
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(n_slots: u32, n_values: u32, history_len: usize, noise: f64) -> TaskConfig {
        TaskConfig {
            n_slots,
            n_values,
            history_len,
            noise_fraction: noise,
            update_rate: 0.5,
        }
    }

    /// Independent last-write-wins scan.
    fn scan_gold(history: &[Record], slot: u32) -> Option<u32> {
        let mut answer = None;
        for r in history {
            if r.slot == slot && !r.is_noise {
                answer = Some(r.value);
            }
        }
        answer
    }

    #[test]
    fn single_record_history_forces_the_answer() {
        let c = TaskConfig {
            n_slots: 1,
            n_values: 2,
            history_len: 1,
            noise_fraction: 0.0,
            update_rate: 1.0,
        };
        let task = generate_task(7, &c).unwrap();
        assert_eq!(task.history.len(), 1);
        assert!(!task.history[0].is_noise);
        assert_eq!(task.gold_answer, task.history[0].value);
        assert_eq!(task.history_token_len, 3);
    }

    #[test]
    fn gold_matches_last_write_wins_scan() {
        let task = generate_task(0, &cfg(2, 4, 20, 0.5)).unwrap();
        assert_eq!(task.history.iter().filter(|r| r.is_noise).count(), 10);
        assert_eq!(
            scan_gold(&task.history, task.query_slot),
            Some(task.gold_answer)
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let c = cfg(8, 4, 20, 0.5);
        let first = generate_task(42, &c).unwrap();
        for _ in 0..1000 {
            assert_eq!(generate_task(42, &c).unwrap(), first);
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_tasks_jsonl(&mut a, &[first.clone()]).unwrap();
        write_tasks_jsonl(&mut b, &[generate_task(42, &c).unwrap()]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(generate_task(0, &cfg(0, 4, 5, 0.0)).is_err());
        assert!(generate_task(0, &cfg(2, 1, 5, 0.0)).is_err());
        assert!(generate_task(0, &cfg(2, 4, 0, 0.0)).is_err());
        assert!(generate_task(0, &cfg(2, 4, 5, 1.0)).is_err());
        assert!(generate_task(0, &cfg(2, 4, 5, -0.1)).is_err());
    }

    #[test]
    fn evaluate_exact_match() {
        let task = generate_task(3, &cfg(4, 4, 10, 0.3)).unwrap();
        let gold = task.gold_answer;
        assert_eq!(evaluate(gold, &task).get(), 1.0);
        assert_eq!(evaluate((gold + 1) % 4, &task).get(), 0.0);
        assert_eq!(evaluate(999, &task).get(), 0.0);
    }

    #[test]
    fn evaluators_on_token_sequences() {
        let task = generate_task(3, &cfg(4, 4, 10, 0.3)).unwrap();
        let v = task.vocab;
        let gold = v.value(task.gold_answer);
        let wrong = v.value((task.gold_answer + 1) % 4);
        assert_eq!(Evaluator::ExactMatch.score(&[gold], &task).get(), 1.0);
        assert_eq!(Evaluator::ExactMatch.score(&[v.slot(0)], &task).get(), 0.0);
        assert_eq!(Evaluator::ExactMatch.score(&[v.eos()], &task).get(), 0.0);
        assert_eq!(Evaluator::TokenF1.score(&[gold], &task).get(), 1.0);
        let f1 = Evaluator::TokenF1
            .score(&[gold, wrong, v.eos()], &task)
            .get();
        assert!((f1 - 2.0 * 0.5 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn serialization_lengths() {
        let task = generate_task(1, &cfg(3, 3, 5, 0.0)).unwrap();
        assert_eq!(serialize_history(&task).len(), 15);
        let one = generate_task(1, &cfg(3, 3, 1, 0.0)).unwrap();
        assert_eq!(serialize_history(&one).len(), 3);
    }

    #[test]
    fn jsonl_rejects_inconsistent_gold() {
        let task = generate_task(5, &cfg(3, 4, 8, 0.25)).unwrap();
        let mut buf = Vec::new();
        write_tasks_jsonl(&mut buf, &[task.clone()]).unwrap();
        let back = read_tasks_jsonl(&buf[..], task.vocab).unwrap();
        assert_eq!(back, vec![task.clone()]);

        let text = String::from_utf8(buf).unwrap().replace(
            &format!("\"gold_answer\":{}", task.gold_answer),
            &format!("\"gold_answer\":{}", (task.gold_answer + 1) % 4),
        );
        assert!(read_tasks_jsonl(text.as_bytes(), task.vocab).is_err());
    }

    proptest! {
        #[test]
        fn generated_tasks_satisfy_invariants(
            seed in any::<u64>(),
            n_slots in 1u32..10,
            n_values in 2u32..6,
            history_len in 1usize..40,
            noise in 0.0f64..0.95,
            update_rate in 0.0f64..=1.0,
        ) {
            let c = TaskConfig { n_slots, n_values, history_len, noise_fraction: noise, update_rate };
            prop_assume!(c.validate().is_ok());
            let task = generate_task(seed, &c).unwrap();
            prop_assert_eq!(task.history.len(), history_len);
            for pair in task.history.windows(2) {
                prop_assert!(pair[0].time < pair[1].time);
            }
            for r in &task.history {
                prop_assert!(r.slot < n_slots && r.value < n_values);
            }
            let facts = task.history.iter().filter(|r| !r.is_noise).count();
            prop_assert!(facts as f64 >= (history_len as f64 * (1.0 - noise) - 1e-9).ceil());
            prop_assert_eq!(scan_gold(&task.history, task.query_slot), Some(task.gold_answer));
            prop_assert_eq!(evaluate(task.gold_answer, &task).get(), 1.0);

            let tokens = serialize_history(&task);
            prop_assert_eq!(tokens.len(), task.history_token_len);
            let back = deserialize_history(&task.vocab, &tokens).unwrap();
            for (a, b) in back.iter().zip(&task.history) {
                prop_assert_eq!((a.slot, a.value, a.is_noise), (b.slot, b.value, b.is_noise));
            }
        }
    }
}
