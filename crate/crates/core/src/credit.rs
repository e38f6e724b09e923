//! Credit assignment over a scored rollout tree.
//!
//! Each action is credited with the mean leaf reward of the subtree it roots.
//! The builder's credit additionally carries a signed length term
//! `λ_len · |a₁| / |H|`; a negative coefficient penalizes verbatim copying.
//! One trajectory per builder subtree is then drawn to form the group whose
//! credits are standardized into advantages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::PerAgent;
use crate::error::{Error, Result};
use crate::policy::Role;
use crate::rollout::{RolloutTree, Trajectory};

/// Default standardization guard.
pub const DEFAULT_EPS_NORM: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditMap {
    /// Builder credits, one per subtree.
    pub q1: Vec<f64>,
    /// Summarizer credits, `G × J`.
    pub q2: Vec<Vec<f64>>,
    /// Responder credits (the leaf rewards), `G × J × K`.
    pub q3: Vec<Vec<Vec<f64>>>,
    pub length_penalty_coeff: f64,
    /// `|a₁ⁱ| / |H|` for every builder action.
    pub length_ratios: Vec<f64>,
}

pub fn assign_credit(tree: &RolloutTree, length_penalty_coeff: f64) -> Result<CreditMap> {
    let history_len = tree.task.history_token_len;
    if history_len == 0 {
        return Err(Error::Config("history has zero tokens".into()));
    }
    let vocab = tree.task.vocab;
    let mut q1 = Vec::with_capacity(tree.builder_nodes.len());
    let mut q2 = Vec::with_capacity(tree.builder_nodes.len());
    let mut q3 = Vec::with_capacity(tree.builder_nodes.len());
    let mut length_ratios = Vec::with_capacity(tree.builder_nodes.len());

    for (i, builder) in tree.builder_nodes.iter().enumerate() {
        let mut subtree_sum = 0.0;
        let mut subtree_leaves = 0usize;
        let mut q2_i = Vec::with_capacity(builder.children.len());
        let mut q3_i = Vec::with_capacity(builder.children.len());
        for (j, summary) in builder.children.iter().enumerate() {
            let rewards = (0..summary.children.len())
                .map(|k| tree.reward(i, j, k))
                .collect::<Result<Vec<f64>>>()?;
            let sum: f64 = rewards.iter().sum();
            subtree_sum += sum;
            subtree_leaves += rewards.len();
            q2_i.push(sum / rewards.len() as f64);
            q3_i.push(rewards);
        }
        let ratio = builder.action.content_len(&vocab) as f64 / history_len as f64;
        q1.push(subtree_sum / subtree_leaves as f64 + length_penalty_coeff * ratio);
        length_ratios.push(ratio);
        q2.push(q2_i);
        q3.push(q3_i);
    }

    Ok(CreditMap {
        q1,
        q2,
        q3,
        length_penalty_coeff,
        length_ratios,
    })
}

/// The `G` selected trajectories with the credit each agent receives.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGroup {
    pub trajectories: Vec<Trajectory>,
    pub credits: PerAgent<Vec<f64>>,
    /// `(jᵢ, kᵢ)` per builder subtree.
    pub selected_indices: Vec<(usize, usize)>,
}

impl TrajectoryGroup {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// The same trajectories credited differently.
    pub fn with_credits(mut self, credits: PerAgent<Vec<f64>>) -> Self {
        self.credits = credits;
        self
    }

    /// Leaf rewards of the selected trajectories.
    pub fn rewards(&self) -> Vec<f64> {
        self.trajectories
            .iter()
            .map(|t| t.reward.map_or(0.0, |r| r.get()))
            .collect()
    }
}

/// Draws one `(j, k)` per builder subtree uniformly and copies its credits.
pub fn select_group<R: Rng>(
    tree: &RolloutTree,
    credits: &CreditMap,
    rng: &mut R,
) -> TrajectoryGroup {
    let b = tree.branching;
    let mut trajectories = Vec::with_capacity(b.group);
    let mut selected_indices = Vec::with_capacity(b.group);
    let mut group_credits = PerAgent::<Vec<f64>>::default();
    for i in 0..tree.builder_nodes.len() {
        let j = rng.gen_range(0..b.summaries);
        let k = rng.gen_range(0..b.responses);
        trajectories.push(tree.trajectory(i, j, k));
        selected_indices.push((j, k));
        group_credits.builder.push(credits.q1[i]);
        group_credits.summarizer.push(credits.q2[i][j]);
        group_credits.responder.push(credits.q3[i][j][k]);
    }
    TrajectoryGroup {
        trajectories,
        credits: group_credits,
        selected_indices,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub values: PerAgent<Vec<f64>>,
    pub eps_norm: f64,
}

impl AdvantageSet {
    pub fn get(&self, role: Role) -> &[f64] {
        self.values.get(role)
    }
}

/// Population mean and standard deviation, summed left to right.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(x - mean) / (std + eps)` with the population standard deviation.
/// A group of identical values maps to exact zeros.
pub fn standardize(xs: &[f64], eps: f64) -> Vec<f64> {
    if xs.iter().all(|&x| x == xs[0]) {
        return vec![0.0; xs.len()];
    }
    let (mean, std) = mean_std(xs);
    xs.iter().map(|x| (x - mean) / (std + eps)).collect()
}

pub fn normalize_advantages(group: &TrajectoryGroup, eps_norm: f64) -> Result<AdvantageSet> {
    if group.len() < 2 {
        return Err(Error::Config(format!(
            "cannot normalize a group of {} trajectories",
            group.len()
        )));
    }
    if eps_norm.is_nan() || eps_norm <= 0.0 {
        return Err(Error::Config(format!("eps_norm {eps_norm} must be > 0")));
    }
    Ok(AdvantageSet {
        values: group.credits.map(|_, c| standardize(c, eps_norm)),
        eps_norm,
    })
}
