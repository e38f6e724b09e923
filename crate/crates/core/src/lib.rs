//! Tree-structured credit assignment for a builder → summarizer → responder
//! memory pipeline, trained with a per-agent clipped group-relative objective
//! on synthetic slot-recall tasks.

pub mod agents;
pub mod credit;
pub mod env;
pub mod error;
pub mod experiment;
pub mod optim;
pub mod policy;
pub mod rollout;
pub mod seed;
pub mod verify;

pub use agents::PerAgent;
pub use credit::{
    assign_credit, normalize_advantages, select_group, AdvantageSet, CreditMap, TrajectoryGroup,
};
pub use env::{
    evaluate, generate_task, serialize_history, Evaluator, Record, RewardValue, Task, TaskConfig,
    Token, Vocab,
};
pub use error::{Error, Result};
pub use optim::{
    apply_update, baseline_credits, grpo_objective, train_step, GradientVector, RewardScheme,
    SchemeTag, StepMetrics, TrainConfig, TrainState,
};
pub use policy::{
    grad_logprob, logprob, sample, Context, Decoding, Policies, PolicyParams, Role, SampledSequence,
};
pub use rollout::{
    enumerate_paths, rollout_tree, score_leaves, Branching, OutputLimits, RolloutTree, Trajectory,
    TreeNode,
};
