//! Per-agent clipped group-relative objective and the training step.
//!
//! For agent `n` the objective over a group of `G` trajectories is
//!
//! ```text
//! J_n = 1/G Σ_i 1/|o_i| Σ_t min(ρ_t A_i, clip(ρ_t, 1-ε, 1+ε) A_i)
//! ρ_t = exp(log π(o_t | c, o_<t) - log π_old(o_t | c, o_<t))
//! ```
//!
//! and is maximized by plain gradient ascent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::agents::PerAgent;
use crate::credit::{
    assign_credit, normalize_advantages, select_group, AdvantageSet, TrajectoryGroup,
};
use crate::env::{Evaluator, Task, Token, Vocab};
use crate::error::{Error, Result};
use crate::policy::{score, ContextView, Policies, Role};
use crate::rollout::{rollout_tree, score_leaves_with, Branching, OutputLimits, RolloutTree};
use crate::seed;

/// Which training signal each agent receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeTag {
    /// Subtree-averaged credits from the rollout tree.
    TreeCredit,
    /// Every agent receives its trajectory's leaf reward.
    FinalOnly,
    /// Hand-designed per-agent proxies.
    TaskSpecific,
    /// `final + w · task` per agent.
    Combined,
}

impl SchemeTag {
    pub const ALL: [SchemeTag; 4] = [
        SchemeTag::TreeCredit,
        SchemeTag::FinalOnly,
        SchemeTag::TaskSpecific,
        SchemeTag::Combined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeTag::TreeCredit => "tree_credit",
            SchemeTag::FinalOnly => "final_only",
            SchemeTag::TaskSpecific => "task_specific",
            SchemeTag::Combined => "combined",
        }
    }
}

impl fmt::Display for SchemeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown reward scheme '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardScheme {
    pub tag: SchemeTag,
    pub task_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// G
    pub group_size: usize,
    /// J
    pub summary_branches: usize,
    /// K
    pub response_branches: usize,
    pub eps_norm: f64,
    pub eps_clip: f64,
    /// Signed coefficient of `|a₁| / |H|` in the builder credit.
    pub length_penalty: f64,
    pub learning_rate: f64,
    /// Heavy-ball coefficient; 0 is plain gradient ascent.
    pub momentum: f64,
    pub updates_per_rollout: usize,
    pub reward_scheme: SchemeTag,
    /// w in the combined scheme.
    pub task_weight: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub tie_weights: bool,
    #[serde(default)]
    pub evaluator: Evaluator,
}

impl TrainConfig {
    pub fn branching(&self) -> Branching {
        Branching::new(
            self.group_size,
            self.summary_branches,
            self.response_branches,
        )
    }

    pub fn scheme(&self) -> RewardScheme {
        RewardScheme {
            tag: self.reward_scheme,
            task_weight: self.task_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.branching().validate_for_training()?;
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(
            self.eps_norm > 0.0,
            format!("eps_norm {} must be > 0", self.eps_norm),
        )?;
        check(
            self.eps_clip > 0.0 && self.eps_clip < 1.0,
            format!("eps_clip {} must lie in (0, 1)", self.eps_clip),
        )?;
        check(
            self.learning_rate > 0.0,
            format!("learning_rate {} must be > 0", self.learning_rate),
        )?;
        check(
            (0.0..1.0).contains(&self.momentum),
            format!("momentum {} must lie in [0, 1)", self.momentum),
        )?;
        check(
            self.updates_per_rollout >= 1,
            "updates_per_rollout must be >= 1".into(),
        )?;
        check(
            self.length_penalty.is_finite(),
            "length_penalty must be finite".into(),
        )?;
        check(
            self.task_weight.is_finite(),
            "task_weight must be finite".into(),
        )?;
        check(!self.seeds.is_empty(), "seeds must not be empty".into())?;
        Ok(())
    }
}

/// Weight-shaped gradients, one per agent.
pub type GradientVector = PerAgent<Vec<f64>>;

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Value and exact gradient of the clipped objective for every agent.
pub fn grpo_objective(
    group: &TrajectoryGroup,
    adv: &AdvantageSet,
    policies: &Policies,
    eps_clip: f64,
) -> Result<(PerAgent<f64>, GradientVector)> {
    let g = group.len();
    if Role::ALL.iter().any(|&r| adv.get(r).len() != g) {
        return Err(Error::Shape(
            "advantages are not aligned with the group".into(),
        ));
    }
    let mut objective = PerAgent::<f64>::default();
    let mut grads = PerAgent::from_fn(|r| vec![0.0; policies.get(r).weights.len()]);

    for role in Role::ALL {
        let params = policies.get(role);
        let advantages = adv.get(role);
        let grad = grads.get_mut(role);
        let mut total = 0.0;
        for (traj, &a) in group.trajectories.iter().zip(advantages) {
            let step = traj.step(role);
            let tokens = &step.action.tokens;
            if tokens.is_empty() {
                return Err(Error::Shape(format!("empty {} action", role.name())));
            }
            let (logprobs, token_grads) = score(params, &step.context, tokens, true)?;
            let weight = 1.0 / (tokens.len() as f64 * g as f64);
            for t in 0..tokens.len() {
                let old = step.action.logprobs_old[t];
                let ratio = (logprobs[t] - old).exp();
                if !old.is_finite() || !ratio.is_finite() {
                    return Err(Error::Divergence(format!(
                        "{} ratio is not finite (old logprob {old})",
                        role.name()
                    )));
                }
                let clipped = ratio.clamp(1.0 - eps_clip, 1.0 + eps_clip);
                let unclipped_term = ratio * a;
                let clipped_term = clipped * a;
                total += weight * unclipped_term.min(clipped_term);
                // The clipped branch is constant in θ; only the unclipped one carries gradient.
                if unclipped_term <= clipped_term {
                    token_grads[t].add_scaled_to(grad, weight * a * ratio);
                }
            }
        }
        *objective.get_mut(role) = total;
    }
    Ok((objective, grads))
}

/// Gradient ascent: `w + lr · g`. Inputs are left untouched.
pub fn apply_update(
    policies: &Policies,
    grads: &GradientVector,
    learning_rate: f64,
) -> Result<Policies> {
    let mut next = policies.clone();
    for role in Role::ALL {
        let params = next.get_mut(role);
        let g = grads.get(role);
        if g.len() != params.weights.len() {
            return Err(Error::Shape(format!(
                "{} gradient has {} entries, weights have {}",
                role.name(),
                g.len(),
                params.weights.len()
            )));
        }
        for (w, d) in params.weights.iter_mut().zip(g) {
            *w += learning_rate * d;
        }
        if !params.is_finite() {
            return Err(Error::Divergence(format!(
                "{} weights became non-finite",
                role.name()
            )));
        }
    }
    Ok(next)
}

/// Fraction of the gold `(slot, value)` pair found at the best-aligned
/// position of the builder's memory.
pub fn evidence_coverage(memory: &[Token], task: &Task) -> f64 {
    let gold = task.gold_record();
    let v = task.vocab;
    let target = [v.slot(gold.slot), v.value(gold.value)];
    let best = (0..memory.len())
        .map(|p| {
            target
                .iter()
                .enumerate()
                .filter(|&(o, t)| memory.get(p + o) == Some(t))
                .count()
        })
        .max()
        .unwrap_or(0);
    best as f64 / target.len() as f64
}

/// Share of the memory's unflagged-or-FACT `(slot, value)` items that reappear
/// adjacent in the summary, divided by the summary-to-memory length ratio and
/// capped at 1. A memory without facts counts as fully covered.
pub fn summary_fidelity(memory: &[Token], summary: &[Token], vocab: &Vocab) -> f64 {
    let facts: Vec<(Token, Token)> = ContextView::new(vocab, memory)
        .map(|view| {
            view.items()
                .iter()
                .filter(|i| !i.noisy)
                .map(|i| (i.slot, i.value))
                .collect()
        })
        .unwrap_or_default();
    let coverage = if facts.is_empty() {
        1.0
    } else {
        let hits = facts
            .iter()
            .filter(|&&(s, val)| summary.windows(2).any(|w| w[0] == s && w[1] == val))
            .count();
        hits as f64 / facts.len() as f64
    };
    let content = |xs: &[Token]| xs.iter().filter(|&&t| t != vocab.eos()).count().max(1);
    let ratio = content(summary) as f64 / content(memory) as f64;
    (coverage / ratio).min(1.0)
}

fn task_specific_credits(tree: &RolloutTree, group: &TrajectoryGroup) -> PerAgent<Vec<f64>> {
    let task = &tree.task;
    let rewards = group.rewards();
    PerAgent {
        builder: group
            .trajectories
            .iter()
            .map(|t| evidence_coverage(&t.builder.action.tokens, task))
            .collect(),
        summarizer: group
            .trajectories
            .iter()
            .map(|t| {
                summary_fidelity(
                    &t.builder.action.tokens,
                    &t.summarizer.action.tokens,
                    &task.vocab,
                )
            })
            .collect(),
        responder: rewards,
    }
}

/// Per-agent credits under a reward scheme. `TreeCredit` returns the group's
/// subtree credits unchanged.
pub fn baseline_credits(
    scheme: RewardScheme,
    tree: &RolloutTree,
    group: &TrajectoryGroup,
) -> Result<PerAgent<Vec<f64>>> {
    if !tree.is_scored() {
        return Err(Error::Shape("baseline credits need a scored tree".into()));
    }
    let finals = group.rewards();
    Ok(match scheme.tag {
        SchemeTag::TreeCredit => group.credits.clone(),
        SchemeTag::FinalOnly => PerAgent::from_fn(|_| finals.clone()),
        SchemeTag::TaskSpecific => task_specific_credits(tree, group),
        SchemeTag::Combined => {
            let task = task_specific_credits(tree, group);
            task.map(|_, t| {
                finals
                    .iter()
                    .zip(t)
                    .map(|(f, t)| f + scheme.task_weight * t)
                    .collect()
            })
        }
    })
}

/// Parameters plus optimizer memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub policies: Policies,
    /// Heavy-ball velocity, present once a momentum step has been taken.
    pub velocity: Option<GradientVector>,
}

impl TrainState {
    pub fn new(policies: Policies) -> Self {
        Self {
            policies,
            velocity: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub mean_reward: f64,
    pub objective: PerAgent<f64>,
    pub grad_norms: PerAgent<f64>,
    pub builder_len_ratio: f64,
    pub sampled_tokens: u64,
}

/// Everything a step produced, for debugging and tests.
#[derive(Debug, Clone)]
pub struct StepTrace {
    pub tree: RolloutTree,
    pub group: TrajectoryGroup,
    pub advantages: AdvantageSet,
}

/// One rollout-and-update step. All randomness is keyed by `step_seed`.
pub fn train_step(
    state: &TrainState,
    task: &Task,
    cfg: &TrainConfig,
    limits: &OutputLimits,
    step_seed: u64,
) -> Result<(TrainState, StepMetrics)> {
    train_step_traced(state, task, cfg, limits, step_seed).map(|(s, m, _)| (s, m))
}

pub fn train_step_traced(
    state: &TrainState,
    task: &Task,
    cfg: &TrainConfig,
    limits: &OutputLimits,
    step_seed: u64,
) -> Result<(TrainState, StepMetrics, StepTrace)> {
    let rollout_seed = seed::derive(step_seed, &[seed::stream::ROLLOUT]);
    let tree = rollout_tree(&state.policies, task, cfg.branching(), limits, rollout_seed)?;
    let tree = score_leaves_with(tree, cfg.evaluator);
    let credits = assign_credit(&tree, cfg.length_penalty)?;
    let mut select_rng = seed::rng_from(step_seed, &[seed::stream::SELECT]);
    let mut group = select_group(&tree, &credits, &mut select_rng);
    if cfg.reward_scheme != SchemeTag::TreeCredit {
        let c = baseline_credits(cfg.scheme(), &tree, &group)?;
        group = group.with_credits(c);
    }
    let advantages = normalize_advantages(&group, cfg.eps_norm)?;

    let mut policies = state.policies.clone();
    let mut velocity = state.velocity.clone();
    let mut objective = PerAgent::default();
    let mut grad_norms = None;
    for _ in 0..cfg.updates_per_rollout {
        let (obj, mut grads) = grpo_objective(&group, &advantages, &policies, cfg.eps_clip)?;
        if cfg.tie_weights {
            let mut shared = grads.builder.clone();
            for role in [Role::Summarizer, Role::Responder] {
                for (s, g) in shared.iter_mut().zip(grads.get(role)) {
                    *s += g;
                }
            }
            grads = PerAgent::from_fn(|_| shared.clone());
        }
        grad_norms.get_or_insert_with(|| grads.map(|_, g| l2_norm(g)));
        objective = obj;
        let direction = if cfg.momentum > 0.0 {
            let v = match velocity.take() {
                Some(prev) => prev.map(|r, p| {
                    p.iter()
                        .zip(grads.get(r))
                        .map(|(p, g)| cfg.momentum * p + g)
                        .collect()
                }),
                None => grads,
            };
            velocity = Some(v.clone());
            v
        } else {
            grads
        };
        policies = apply_update(&policies, &direction, cfg.learning_rate)?;
    }

    let leaves: Vec<f64> = (0..tree.branching.group)
        .flat_map(|i| {
            (0..tree.branching.summaries)
                .flat_map(move |j| (0..tree.branching.responses).map(move |k| (i, j, k)))
        })
        .map(|(i, j, k)| tree.reward(i, j, k))
        .collect::<Result<_>>()?;
    let sampled_tokens = tree
        .builder_nodes
        .iter()
        .map(|b| {
            b.action.len()
                + b.children
                    .iter()
                    .map(|s| {
                        s.action.len() + s.children.iter().map(|l| l.action.len()).sum::<usize>()
                    })
                    .sum::<usize>()
        })
        .sum::<usize>() as u64;
    let metrics = StepMetrics {
        mean_reward: leaves.iter().sum::<f64>() / leaves.len() as f64,
        objective,
        grad_norms: grad_norms.unwrap_or_default(),
        builder_len_ratio: credits.length_ratios.iter().sum::<f64>()
            / credits.length_ratios.len() as f64,
        sampled_tokens,
    };
    Ok((
        TrainState { policies, velocity },
        metrics,
        StepTrace {
            tree,
            group,
            advantages,
        },
    ))
}
