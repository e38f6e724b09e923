use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;
use super::metrics::{JsonlSink, MetricsRecord, MetricsSink};
use crate::env::{generate_task, Evaluator, Task};

use crate::error::{Error, Result};
use crate::optim::{train_step_traced, TrainState};
use crate::policy::{Decoding, Policies};
use crate::rollout::{run_pipeline, OutputLimits};
use crate::seed::{self, stream};

/// Training task for a step. Depends only on `(seed, step)` and the task
/// parameters, so every cell of a sweep sees the same task stream.
pub fn train_task(cfg: &ExperimentConfig, seed: u64, step: u64) -> Result<Task> {
    generate_task(seed::derive(seed, &[stream::TASK, step]), &cfg.task)
}

/// Held-out evaluation task `index`, drawn from a stream disjoint from training.
pub fn eval_task(cfg: &ExperimentConfig, seed: u64, index: usize) -> Result<Task> {
    generate_task(
        seed::derive(seed, &[stream::EVAL_TASK, index as u64]),
        &cfg.task,
    )
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed::derive(seed, &[stream::ROLLOUT, step])
}

/// Mean reward of greedy single-path decoding over `tasks`.
pub fn evaluate_greedy(
    policies: &Policies,
    tasks: &[Task],
    limits: &OutputLimits,
    evaluator: Evaluator,
) -> Result<f64> {
    let mut total = 0.0;
    for task in tasks {
        let traj = run_pipeline(policies, task, limits, Decoding::Greedy, 0, evaluator)?;
        total += traj.reward.map_or(0.0, |r| r.get());
    }
    Ok(total / tasks.len() as f64)
}

pub fn initial_state(cfg: &ExperimentConfig) -> TrainState {
    TrainState::new(Policies::with_prior(
        cfg.task.vocab(),
        &cfg.policy.init_prior,
        cfg.train.tie_weights,
    ))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub steps: u64,
    /// `(step, mean greedy eval reward)` for every eval performed by this invocation.
    pub evals: Vec<(u64, f64)>,
    pub final_state: TrainState,
    pub clock: u64,
}

impl RunOutcome {
    pub fn final_eval(&self) -> Option<f64> {
        self.evals.last().map(|&(_, r)| r)
    }
}

/// File layout of one seed's artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub checkpoints: PathBuf,
    pub trees: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig, seed: u64) -> Self {
        let dir = cfg.seed_dir(seed);
        Self {
            metrics: dir.join("metrics.jsonl"),
            checkpoints: dir.join("checkpoints"),
            trees: dir.join("trees"),
            dir,
        }
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints.join(format!("step-{step}.ckpt"))
    }

    pub fn abort_checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints.join(format!("abort-step-{step}.ckpt"))
    }
}

/// Executes one seed of an experiment.
pub struct SeedRunner<'a> {
    cfg: &'a ExperimentConfig,
    seed: u64,
    limits: OutputLimits,
    eval_tasks: Vec<Task>,
    config_hash: u64,
}

impl<'a> SeedRunner<'a> {
    pub fn new(cfg: &'a ExperimentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let eval_tasks = (0..cfg.eval_tasks)
            .map(|e| eval_task(cfg, seed, e))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            seed,
            limits: cfg.policy.limits(),
            eval_tasks,
            config_hash: cfg.hash(),
        })
    }

    pub fn header(&self) -> MetricsRecord {
        MetricsRecord::header(&self.cfg.run_name, self.seed, self.config_hash)
    }

    fn is_eval_step(&self, step: u64) -> bool {
        step == 0 || step.is_multiple_of(self.cfg.eval_cadence) || step == self.cfg.steps
    }

    fn is_checkpoint_step(&self, step: u64) -> bool {
        let c = self.cfg.checkpoint_cadence;
        step == self.cfg.steps || (c > 0 && step.is_multiple_of(c))
    }

    fn eval(&self, state: &TrainState, step: u64, clock: u64) -> Result<(f64, MetricsRecord)> {
        let reward = evaluate_greedy(
            &state.policies,
            &self.eval_tasks,
            &self.limits,
            self.cfg.train.evaluator,
        )?;
        Ok((
            reward,
            MetricsRecord::Eval {
                run: self.cfg.run_name.clone(),
                seed: self.seed,
                step,
                scheme: self.cfg.train.reward_scheme,
                mean_eval_reward: reward,
                clock,
            },
        ))
    }

    fn checkpoint(&self, state: &TrainState, step: u64, clock: u64) -> Checkpoint {
        Checkpoint {
            seed: self.seed,
            step,
            config_hash: self.config_hash,
            clock,
            state: state.clone(),
        }
    }

    /// Trains from scratch, or from `start`, through the configured number of
    /// steps. With `paths`, checkpoints and debug trees are written to disk;
    /// on a mid-run failure the last good state is saved as an abort checkpoint.
    pub fn train(
        &self,
        start: Option<Checkpoint>,
        sink: &mut dyn MetricsSink,
        paths: Option<&RunPaths>,
    ) -> Result<RunOutcome> {
        let cfg = self.cfg;
        let (mut state, first, mut clock) = match start {
            Some(ck) => {
                if ck.seed != self.seed || ck.config_hash != self.config_hash {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint (seed {}, config {:016x}) does not belong to this run (seed {}, config {:016x})",
                        ck.seed, ck.config_hash, self.seed, self.config_hash
                    )));
                }
                if ck.state.policies.vocab() != cfg.task.vocab() {
                    return Err(Error::Checkpoint(
                        "checkpoint vocabulary differs from the config".into(),
                    ));
                }
                (ck.state, ck.step + 1, ck.clock)
            }
            None => (initial_state(cfg), 1, 0),
        };
        let mut evals = Vec::new();
        if first == 1 {
            let (r, rec) = self.eval(&state, 0, clock)?;
            sink.record(&rec)?;
            evals.push((0, r));
            if cfg.steps == 0 {
                if let Some(p) = paths {
                    self.checkpoint(&state, 0, clock).save(&p.checkpoint(0))?;
                }
            }
        }

        for step in first..=cfg.steps {
            let outcome = train_task(cfg, self.seed, step).and_then(|task| {
                let (next, m, trace) = train_step_traced(
                    &state,
                    &task,
                    &cfg.train,
                    &self.limits,
                    step_seed(self.seed, step),
                )?;
                if !next.policies.is_finite_all() {
                    return Err(Error::Divergence(format!(
                        "non-finite weights after step {step}"
                    )));
                }
                Ok((next, m, trace))
            });
            let (next, m, trace) = match outcome {
                Ok(x) => x,
                Err(e) => {
                    if let Some(p) = paths {
                        self.checkpoint(&state, step - 1, clock)
                            .save(&p.abort_checkpoint(step - 1))?;
                    }
                    return Err(e);
                }
            };
            state = next;
            clock += m.sampled_tokens;
            sink.record(&MetricsRecord::Train {
                run: cfg.run_name.clone(),
                seed: self.seed,
                step,
                scheme: cfg.train.reward_scheme,
                mean_reward: m.mean_reward,
                obj_builder: m.objective.builder,
                obj_summarizer: m.objective.summarizer,
                obj_responder: m.objective.responder,
                grad_norms: m.grad_norms,
                builder_len_ratio: m.builder_len_ratio,
                clock,
            })?;
            if let Some(p) = paths {
                if cfg.debug_tree_every > 0 && step % cfg.debug_tree_every == 0 {
                    fs::create_dir_all(&p.trees).map_err(|e| Error::io(&p.trees, e))?;
                    let path = p.trees.join(format!("step-{step}.jsonl"));
                    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                    trace.tree.write_jsonl(std::io::BufWriter::new(file))?;
                }
            }
            if self.is_eval_step(step) {
                let (r, rec) = self.eval(&state, step, clock)?;
                sink.record(&rec)?;
                evals.push((step, r));
            }
            if let Some(p) = paths {
                if self.is_checkpoint_step(step) {
                    self.checkpoint(&state, step, clock)
                        .save(&p.checkpoint(step))?;
                }
            }
        }
        Ok(RunOutcome {
            seed: self.seed,
            steps: cfg.steps,
            evals,
            final_state: state,
            clock,
        })
    }
}

/// Runs one seed with on-disk artifacts, optionally resuming from a checkpoint.
/// On resume the metrics file is cut back to the checkpoint's step first.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, resume: Option<&Path>) -> Result<RunOutcome> {
    let runner = SeedRunner::new(cfg, seed)?;
    let paths = RunPaths::new(cfg, seed);
    fs::create_dir_all(&paths.dir).map_err(|e| Error::io(&paths.dir, e))?;
    match resume {
        Some(ck_path) => {
            let ck = Checkpoint::load(ck_path)?;
            let mut sink = JsonlSink::truncate_after(&paths.metrics, ck.step)?;
            runner.train(Some(ck), &mut sink, Some(&paths))
        }
        None => {
            let mut sink = JsonlSink::create(&paths.metrics)?;
            sink.record(&runner.header())?;
            runner.train(None, &mut sink, Some(&paths))
        }
    }
}

/// Runs every configured seed; seeds are independent and execute in parallel.
pub fn run(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    cfg.train
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, s, None))
        .collect()
}
