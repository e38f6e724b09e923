//! Tree-structured rollouts of the builder → summarizer → responder pipeline.
//!
//! For one task the builder samples `G` memories, the summarizer `J` summaries
//! per memory and the responder `K` answers per (memory, summary) pair. Only
//! leaves carry rewards. Every node draws from its own random stream keyed by
//! `(root seed, level, i, j, k)`, so a tree does not depend on the order in
//! which branches are expanded.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{serialize_history, Evaluator, RewardValue, Task, Token};
use crate::error::{Error, Result};
use crate::policy::{generate, Context, Decoding, Policies, Role, SampledSequence};
use crate::seed;

/// Branching factors `(G, J, K)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Branching {
    pub group: usize,
    pub summaries: usize,
    pub responses: usize,
}

impl Branching {
    pub fn new(group: usize, summaries: usize, responses: usize) -> Self {
        Self {
            group,
            summaries,
            responses,
        }
    }

    /// The single-path deployment pipeline.
    pub const INFERENCE: Branching = Branching {
        group: 1,
        summaries: 1,
        responses: 1,
    };

    pub fn leaves(&self) -> usize {
        self.group * self.summaries * self.responses
    }

    pub fn nodes(&self) -> usize {
        self.group + self.group * self.summaries + self.leaves()
    }

    pub fn validate_for_training(&self) -> Result<()> {
        if self.group < 2 {
            return Err(Error::Config(format!(
                "group_size {} must be >= 2 for group normalization",
                self.group
            )));
        }
        self.validate_shape()
    }

    fn validate_shape(&self) -> Result<()> {
        if self.group < 1 || self.summaries < 1 || self.responses < 1 {
            return Err(Error::Config(format!(
                "branching ({}, {}, {}) must be positive",
                self.group, self.summaries, self.responses
            )));
        }
        Ok(())
    }
}

/// Per-role output length caps. The builder is further capped at `|H|` and the
/// summarizer at the length of its builder's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputLimits {
    pub builder_max_len: usize,
    pub summarizer_max_len: usize,
    pub responder_max_len: usize,
}

impl OutputLimits {
    pub fn validate(&self) -> Result<()> {
        if self.builder_max_len == 0 || self.summarizer_max_len == 0 || self.responder_max_len == 0
        {
            return Err(Error::Config("output length limits must be >= 1".into()));
        }
        Ok(())
    }
}

/// Position of a node in the tree; `None` for levels above the node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodePath {
    pub i: usize,
    pub j: Option<usize>,
    pub k: Option<usize>,
}

impl NodePath {
    /// The path of the parent node, absent at builder level.
    pub fn parent(&self) -> Option<NodePath> {
        match (self.j, self.k) {
            (None, _) => None,
            (Some(_), None) => Some(NodePath {
                i: self.i,
                j: None,
                k: None,
            }),
            (Some(j), Some(_)) => Some(NodePath {
                i: self.i,
                j: Some(j),
                k: None,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub level: Role,
    pub path: NodePath,
    /// The conditioning input the action was sampled under.
    pub context: Vec<Token>,
    pub action: SampledSequence,
    pub children: Vec<TreeNode>,
    pub leaf_reward: Option<RewardValue>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutTree {
    pub task: Task,
    pub branching: Branching,
    pub builder_nodes: Vec<TreeNode>,
}

/// One step of a trajectory: what an agent saw and what it emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStep {
    pub context: Context,
    pub action: SampledSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub indices: (usize, usize, usize),
    pub builder: AgentStep,
    pub summarizer: AgentStep,
    pub responder: AgentStep,
    pub reward: Option<RewardValue>,
}

impl Trajectory {
    pub fn step(&self, role: Role) -> &AgentStep {
        match role {
            Role::Builder => &self.builder,
            Role::Summarizer => &self.summarizer,
            Role::Responder => &self.responder,
        }
    }
}

pub fn responder_context(query: Token, memory: &[Token], summary: &[Token]) -> Vec<Token> {
    let mut ctx = Vec::with_capacity(1 + memory.len() + summary.len());
    ctx.push(query);
    ctx.extend_from_slice(memory);
    ctx.extend_from_slice(summary);
    ctx
}

fn node_rng(root: u64, level: Role, i: usize, j: usize, k: usize) -> rand_chacha::ChaCha8Rng {
    seed::rng_from(
        root,
        &[
            seed::stream::ROLLOUT,
            level.level() as u64,
            i as u64,
            j as u64,
            k as u64,
        ],
    )
}

fn grow(
    policies: &Policies,
    task: &Task,
    branching: Branching,
    limits: &OutputLimits,
    root_seed: u64,
    decoding: Decoding,
) -> Result<RolloutTree> {
    branching.validate_shape()?;
    limits.validate()?;
    if task.history_token_len == 0 {
        return Err(Error::Config("empty history".into()));
    }
    let history = serialize_history(task);
    let query = task.query_token();
    let builder_cap = limits.builder_max_len.min(history.len());

    let mut builder_nodes = Vec::with_capacity(branching.group);
    for i in 0..branching.group {
        let builder_ctx = Context::new(Role::Builder, history.clone());
        let memory = generate(
            &policies.builder,
            &builder_ctx,
            builder_cap,
            decoding,
            &mut node_rng(root_seed, Role::Builder, i, 0, 0),
        )?;
        let summary_cap = limits.summarizer_max_len.min(memory.len().max(1));

        let mut summary_nodes = Vec::with_capacity(branching.summaries);
        for j in 0..branching.summaries {
            let summarizer_ctx = Context::new(Role::Summarizer, memory.tokens.clone());
            let summary = generate(
                &policies.summarizer,
                &summarizer_ctx,
                summary_cap,
                decoding,
                &mut node_rng(root_seed, Role::Summarizer, i, j, 0),
            )?;
            let responder_tokens = responder_context(query, &memory.tokens, &summary.tokens);

            let mut leaves = Vec::with_capacity(branching.responses);
            for k in 0..branching.responses {
                let responder_ctx = Context::new(Role::Responder, responder_tokens.clone());
                let answer = generate(
                    &policies.responder,
                    &responder_ctx,
                    limits.responder_max_len,
                    decoding,
                    &mut node_rng(root_seed, Role::Responder, i, j, k),
                )?;
                leaves.push(TreeNode {
                    level: Role::Responder,
                    path: NodePath {
                        i,
                        j: Some(j),
                        k: Some(k),
                    },
                    context: responder_ctx.tokens,
                    action: answer,
                    children: Vec::new(),
                    leaf_reward: None,
                });
            }
            summary_nodes.push(TreeNode {
                level: Role::Summarizer,
                path: NodePath {
                    i,
                    j: Some(j),
                    k: None,
                },
                context: summarizer_ctx.tokens,
                action: summary,
                children: leaves,
                leaf_reward: None,
            });
        }
        builder_nodes.push(TreeNode {
            level: Role::Builder,
            path: NodePath {
                i,
                j: None,
                k: None,
            },
            context: builder_ctx.tokens,
            action: memory,
            children: summary_nodes,
            leaf_reward: None,
        });
    }

    Ok(RolloutTree {
        task: task.clone(),
        branching,
        builder_nodes,
    })
}

/// Samples the full `G × J × K` training tree. Leaves are unscored.
pub fn rollout_tree(
    policies: &Policies,
    task: &Task,
    branching: Branching,
    limits: &OutputLimits,
    root_seed: u64,
) -> Result<RolloutTree> {
    branching.validate_for_training()?;
    grow(
        policies,
        task,
        branching,
        limits,
        root_seed,
        Decoding::Sample,
    )
}

/// Runs the deployment pipeline once, without tree expansion, and scores it.
pub fn run_pipeline(
    policies: &Policies,
    task: &Task,
    limits: &OutputLimits,
    decoding: Decoding,
    root_seed: u64,
    evaluator: Evaluator,
) -> Result<Trajectory> {
    let tree = grow(
        policies,
        task,
        Branching::INFERENCE,
        limits,
        root_seed,
        decoding,
    )?;
    let tree = score_leaves_with(tree, evaluator);
    Ok(enumerate_paths(&tree).remove(0))
}

/// Scores every leaf with exact match on the responder's answer.
pub fn score_leaves(tree: RolloutTree) -> RolloutTree {
    score_leaves_with(tree, Evaluator::ExactMatch)
}

pub fn score_leaves_with(mut tree: RolloutTree, evaluator: Evaluator) -> RolloutTree {
    let task = &tree.task;
    for b in tree.builder_nodes.iter_mut() {
        for s in b.children.iter_mut() {
            for leaf in s.children.iter_mut() {
                leaf.leaf_reward = Some(evaluator.score(&leaf.action.tokens, task));
            }
        }
    }
    tree
}

impl RolloutTree {
    pub fn leaf(&self, i: usize, j: usize, k: usize) -> &TreeNode {
        &self.builder_nodes[i].children[j].children[k]
    }

    /// Leaf reward, or an error if the tree is unscored.
    pub fn reward(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        self.leaf(i, j, k)
            .leaf_reward
            .map(RewardValue::get)
            .ok_or_else(|| Error::Shape(format!("leaf ({i}, {j}, {k}) is unscored")))
    }

    pub fn is_scored(&self) -> bool {
        self.builder_nodes
            .iter()
            .flat_map(|b| &b.children)
            .flat_map(|s| &s.children)
            .all(|l| l.leaf_reward.is_some())
    }

    pub fn node_count(&self) -> usize {
        self.builder_nodes
            .iter()
            .map(|b| {
                1 + b
                    .children
                    .iter()
                    .map(|s| 1 + s.children.len())
                    .sum::<usize>()
            })
            .sum()
    }

    pub fn trajectory(&self, i: usize, j: usize, k: usize) -> Trajectory {
        let b = &self.builder_nodes[i];
        let s = &b.children[j];
        let r = &s.children[k];
        Trajectory {
            indices: (i, j, k),
            builder: AgentStep {
                context: Context::new(Role::Builder, b.context.clone()),
                action: b.action.clone(),
            },
            summarizer: AgentStep {
                context: Context::new(Role::Summarizer, s.context.clone()),
                action: s.action.clone(),
            },
            responder: AgentStep {
                context: Context::new(Role::Responder, r.context.clone()),
                action: r.action.clone(),
            },
            reward: r.leaf_reward,
        }
    }

    /// Writes one JSON object per node in depth-first order.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        #[derive(Serialize)]
        struct NodeLine<'a> {
            level: u8,
            i: usize,
            j: Option<usize>,
            k: Option<usize>,
            tokens: &'a [Token],
            logprobs: &'a [f64],
            #[serde(skip_serializing_if = "Option::is_none")]
            reward: Option<f64>,
        }
        fn emit<W: Write>(node: &TreeNode, out: &mut W) -> Result<()> {
            let line = NodeLine {
                level: node.level.level(),
                i: node.path.i,
                j: node.path.j,
                k: node.path.k,
                tokens: &node.action.tokens,
                logprobs: &node.action.logprobs_old,
                reward: node.leaf_reward.map(RewardValue::get),
            };
            serde_json::to_writer(&mut *out, &line)?;
            out.write_all(b"\n").map_err(|e| Error::io("<tree>", e))?;
            node.children.iter().try_for_each(|c| emit(c, out))
        }
        self.builder_nodes
            .iter()
            .try_for_each(|b| emit(b, &mut out))
    }
}

/// All root-to-leaf trajectories in lexicographic `(i, j, k)` order.
pub fn enumerate_paths(tree: &RolloutTree) -> Vec<Trajectory> {
    let mut out = Vec::with_capacity(tree.branching.leaves());
    for (i, b) in tree.builder_nodes.iter().enumerate() {
        for (j, s) in b.children.iter().enumerate() {
            for k in 0..s.children.len() {
                out.push(tree.trajectory(i, j, k));
            }
        }
    }
    out
}
