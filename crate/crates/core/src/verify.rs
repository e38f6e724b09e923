//! Oracle suites that check the algorithms against independent computations.
//!
//! Each suite recomputes its quantity from first principles (explicit loops,
//! exhaustive enumeration, finite differences) instead of calling back into
//! the code under test, and reports a pass/fail verdict with a one-line
//! detail. The `verify` command and the acceptance target run all of them.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agents::PerAgent;
use crate::credit::{assign_credit, normalize_advantages, TrajectoryGroup};
use crate::env::{generate_task, serialize_history, RewardValue, Task, TaskConfig, Token, Vocab};
use crate::error::Result;
use crate::optim::{grpo_objective, train_step, SchemeTag, TrainConfig, TrainState};
use crate::policy::{logprob, Context, Policies, PolicyParams, Role, SampledSequence};
use crate::rollout::{
    enumerate_paths, rollout_tree, score_leaves, AgentStep, Branching, OutputLimits, RolloutTree,
    Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Structure,
    Tower,
    MonteCarlo,
    Advantages,
    Gradient,
    Degenerate,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Structure,
        Suite::Tower,
        Suite::MonteCarlo,
        Suite::Advantages,
        Suite::Gradient,
        Suite::Degenerate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Structure => "tree structure",
            Suite::Tower => "credit tower",
            Suite::MonteCarlo => "monte carlo credit",
            Suite::Advantages => "advantage normalization",
            Suite::Gradient => "objective gradient",
            Suite::Degenerate => "degenerate tree equivalence",
        }
    }

    pub fn run(self) -> SuiteReport {
        let start = Instant::now();
        let outcome = match self {
            Suite::Structure => structure_suite(),
            Suite::Tower => tower_suite(500),
            Suite::MonteCarlo => monte_carlo_suite(100, 4096),
            Suite::Advantages => advantage_suite(1000),
            Suite::Gradient => gradient_suite(50),
            Suite::Degenerate => degenerate_suite(),
        };
        let (passed, detail) = match outcome {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        SuiteReport {
            suite: self,
            passed,
            detail,
            elapsed: start.elapsed(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {} ({:.2?})",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite.name(),
            self.detail,
            self.elapsed
        )
    }
}

pub fn run_all() -> Vec<SuiteReport> {
    Suite::ALL.into_iter().map(Suite::run).collect()
}

type Verdict = Result<(bool, String)>;

fn random_policies(vocab: Vocab, scale: f64, rng: &mut ChaCha8Rng) -> Policies {
    Policies::new(
        PolicyParams::random(Role::Builder, vocab, scale, rng),
        PolicyParams::random(Role::Summarizer, vocab, scale, rng),
        PolicyParams::random(Role::Responder, vocab, scale, rng),
    )
}

fn bytes(tokens: &[Token]) -> Vec<u8> {
    tokens.iter().flat_map(|t| t.to_le_bytes()).collect()
}

fn small_task(seed: u64) -> Result<Task> {
    generate_task(
        seed,
        &TaskConfig {
            n_slots: 3,
            n_values: 3,
            history_len: 6,
            noise_fraction: 0.5,
            update_rate: 0.5,
        },
    )
}

/// Leaf counts, node counts and every node's conditioning context over the
/// full `{2,4,8} × {1,2,4} × {1,2,4}` grid.
pub fn structure_suite() -> Verdict {
    let limits = OutputLimits {
        builder_max_len: 12,
        summarizer_max_len: 12,
        responder_max_len: 2,
    };
    let mut failures = Vec::new();
    let mut cells = 0;
    for g in [2, 4, 8] {
        for j in [1, 2, 4] {
            for k in [1, 2, 4] {
                cells += 1;
                let seed = (g * 100 + j * 10 + k) as u64;
                let task = small_task(seed)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let policies = random_policies(task.vocab, 1.0, &mut rng);
                let tree = rollout_tree(&policies, &task, Branching::new(g, j, k), &limits, seed)?;
                if let Err(why) = check_structure(&tree, &policies, g, j, k) {
                    failures.push(format!("({g},{j},{k}): {why}"));
                }
            }
        }
    }
    Ok(if failures.is_empty() {
        (true, format!("{cells} branching cells byte-identical"))
    } else {
        (false, failures.join("; "))
    })
}

fn check_structure(
    tree: &RolloutTree,
    policies: &Policies,
    g: usize,
    j: usize,
    k: usize,
) -> std::result::Result<(), String> {
    let history = bytes(&serialize_history(&tree.task));
    if tree.builder_nodes.len() != g {
        return Err(format!("{} builder nodes", tree.builder_nodes.len()));
    }
    let mut leaves = 0;
    for (i, b) in tree.builder_nodes.iter().enumerate() {
        if bytes(&b.context) != history {
            return Err(format!("builder {i} context differs from the history"));
        }
        if b.children.len() != j {
            return Err(format!("builder {i} has {} summaries", b.children.len()));
        }
        for (jj, s) in b.children.iter().enumerate() {
            if bytes(&s.context) != bytes(&b.action.tokens) {
                return Err(format!("summarizer ({i},{jj}) context is not its memory"));
            }
            if s.children.len() != k {
                return Err(format!(
                    "summarizer ({i},{jj}) has {} answers",
                    s.children.len()
                ));
            }
            let mut expected = vec![tree.task.query_token()];
            expected.extend(&b.action.tokens);
            expected.extend(&s.action.tokens);
            for (kk, r) in s.children.iter().enumerate() {
                leaves += 1;
                if bytes(&r.context) != bytes(&expected) {
                    return Err(format!("responder ({i},{jj},{kk}) context differs"));
                }
            }
        }
        // Recorded log-probabilities are the policy's own.
        let lp = logprob(
            &policies.builder,
            &Context::new(Role::Builder, b.context.clone()),
            &b.action.tokens,
        )
        .map_err(|e| e.to_string())?;
        if lp
            .iter()
            .zip(&b.action.logprobs_old)
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(format!(
                "builder {i} log-probabilities differ from rescoring"
            ));
        }
    }
    if leaves != g * j * k || tree.node_count() != g + g * j + g * j * k {
        return Err(format!("{leaves} leaves, {} nodes", tree.node_count()));
    }
    let paths = enumerate_paths(tree);
    let mut expected = Vec::new();
    for a in 0..g {
        for b in 0..j {
            for c in 0..k {
                expected.push((a, b, c));
            }
        }
    }
    if paths.iter().map(|p| p.indices).collect::<Vec<_>>() != expected {
        return Err("paths are not in lexicographic order".into());
    }
    Ok(())
}

fn overwrite_rewards(tree: &mut RolloutTree, rng: &mut ChaCha8Rng) -> Result<()> {
    for b in tree.builder_nodes.iter_mut() {
        for s in b.children.iter_mut() {
            for l in s.children.iter_mut() {
                let r = if rng.gen_bool(0.3) {
                    rng.gen_range(0..2) as f64
                } else {
                    rng.gen::<f64>()
                };
                l.leaf_reward = Some(RewardValue::new(r)?);
            }
        }
    }
    Ok(())
}

/// Subtree credits against explicit nested means over random scored trees.
pub fn tower_suite(trees: usize) -> Verdict {
    let limits = OutputLimits {
        builder_max_len: 18,
        summarizer_max_len: 18,
        responder_max_len: 1,
    };
    let mut worst: f64 = 0.0;
    for n in 0..trees {
        let mut rng = ChaCha8Rng::seed_from_u64(0x70_3e + n as u64);
        let task = small_task(n as u64)?;
        let policies = random_policies(task.vocab, 1.0, &mut rng);
        let branching = Branching::new(
            rng.gen_range(2..=6),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let mut tree = rollout_tree(&policies, &task, branching, &limits, n as u64)?;
        overwrite_rewards(&mut tree, &mut rng)?;
        let lambda = if n % 2 == 0 {
            0.0
        } else {
            rng.gen_range(-2.0..2.0)
        };
        let credits = assign_credit(&tree, lambda)?;
        for (i, b) in tree.builder_nodes.iter().enumerate() {
            let mut q2_sum = 0.0;
            for (j, s) in b.children.iter().enumerate() {
                let mut leaf_sum = 0.0;
                for l in &s.children {
                    leaf_sum += l.leaf_reward.map_or(f64::NAN, RewardValue::get);
                }
                let q2 = leaf_sum / s.children.len() as f64;
                worst = worst.max((credits.q2[i][j] - q2).abs());
                q2_sum += q2;
            }
            let content = b
                .action
                .tokens
                .iter()
                .filter(|&&t| t != task.vocab.eos())
                .count();
            let ratio = content as f64 / task.history_token_len as f64;
            let q1 = q2_sum / b.children.len() as f64 + lambda * ratio;
            worst = worst.max((credits.q1[i] - q1).abs());
        }
    }
    let passed = worst <= 1e-12;
    Ok((passed, format!("{trees} trees, max deviation {worst:.2e}")))
}

/// All output sequences a policy can emit under a length cap, with their
/// probabilities.
fn enumerate_outputs(
    params: &PolicyParams,
    ctx: &Context,
    cap: usize,
) -> Result<Vec<(Vec<Token>, f64)>> {
    let v = params.vocab.size() as Token;
    let eos = params.vocab.eos();
    let mut done = Vec::new();
    let mut frontier = vec![Vec::<Token>::new()];
    while let Some(prefix) = frontier.pop() {
        for t in 0..v {
            let mut seq = prefix.clone();
            seq.push(t);
            if t == eos || seq.len() == cap {
                let p = logprob(params, ctx, &seq)?.iter().sum::<f64>().exp();
                done.push((seq, p));
            } else {
                frontier.push(seq);
            }
        }
    }
    Ok(done)
}

/// `E[R | a₁]` by exhaustive enumeration over summaries and answers.
fn exact_expected_reward(
    policies: &Policies,
    task: &Task,
    memory: &[Token],
    limits: &OutputLimits,
) -> Result<f64> {
    let summary_cap = limits.summarizer_max_len.min(memory.len().max(1));
    let summarizer_ctx = Context::new(Role::Summarizer, memory.to_vec());
    let gold = task.vocab.value(task.gold_answer);
    let mut expectation = 0.0;
    for (summary, ps) in enumerate_outputs(&policies.summarizer, &summarizer_ctx, summary_cap)? {
        let mut ctx = vec![task.query_token()];
        ctx.extend_from_slice(memory);
        ctx.extend_from_slice(&summary);
        let responder_ctx = Context::new(Role::Responder, ctx);
        for (answer, pa) in enumerate_outputs(
            &policies.responder,
            &responder_ctx,
            limits.responder_max_len,
        )? {
            let reward = if answer[0] == gold { 1.0 } else { 0.0 };
            expectation += ps * pa * reward;
        }
    }
    Ok(expectation)
}

/// Empirical subtree means with `branches` leaves per builder action against
/// the exact conditional expectation, on the smallest vocabulary the token
/// layout admits (one slot, two values: six tokens) with outputs of at most
/// two tokens.
pub fn monte_carlo_suite(seeds: usize, branches: usize) -> Verdict {
    let cfg = TaskConfig {
        n_slots: 1,
        n_values: 2,
        history_len: 2,
        noise_fraction: 0.5,
        update_rate: 0.5,
    };
    let limits = OutputLimits {
        builder_max_len: 2,
        summarizer_max_len: 2,
        responder_max_len: 1,
    };
    let j = (branches as f64).sqrt().round() as usize;
    let k = branches / j;
    let mut agree = 0;
    for s in 0..seeds as u64 {
        let task = generate_task(s, &cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0x3c_0000 + s);
        let policies = random_policies(task.vocab, 1.0, &mut rng);
        let tree = score_leaves(rollout_tree(
            &policies,
            &task,
            Branching::new(2, j, k),
            &limits,
            s,
        )?);
        let credits = assign_credit(&tree, 0.0)?;
        let mut ok = true;
        for (i, b) in tree.builder_nodes.iter().enumerate() {
            let exact = exact_expected_reward(&policies, &task, &b.action.tokens, &limits)?;
            // Summaries are i.i.d. given the memory, so the spread of the q2
            // values gives the standard error of their mean.
            let q2 = &credits.q2[i];
            let mean = q2.iter().sum::<f64>() / q2.len() as f64;
            let var = q2.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (q2.len() - 1) as f64;
            let se = (var / q2.len() as f64).sqrt();
            ok &= (credits.q1[i] - exact).abs() <= 3.0 * se + 1e-12;
        }
        agree += ok as usize;
    }
    let needed = (seeds * 95).div_ceil(100);
    Ok((
        agree >= needed,
        format!("{agree}/{seeds} seeds within 3 standard errors ({j}x{k} branches)"),
    ))
}

fn dummy_trajectory() -> Trajectory {
    let step = |role| AgentStep {
        context: Context::new(role, Vec::new()),
        action: SampledSequence {
            tokens: Vec::new(),
            logprobs_old: Vec::new(),
        },
    };
    Trajectory {
        indices: (0, 0, 0),
        builder: step(Role::Builder),
        summarizer: step(Role::Summarizer),
        responder: step(Role::Responder),
        reward: None,
    }
}

/// Moments of standardized advantages over random groups, plus exact zeros
/// for constant groups.
pub fn advantage_suite(groups: usize) -> Verdict {
    let eps = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(0xad_0a);
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    let mut checked = 0;
    while checked < groups {
        let g = rng.gen_range(2..=32);
        let scale = 10f64.powf(rng.gen_range(-2.0..2.0));
        let credits = PerAgent::from_fn(|_| {
            (0..g)
                .map(|_| scale * rng.gen_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        });
        let stds = credits.map(|_, c| {
            let m = c.iter().sum::<f64>() / g as f64;
            (c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / g as f64).sqrt()
        });
        if Role::ALL.iter().any(|&r| *stds.get(r) <= 1e-3) {
            continue;
        }
        checked += 1;
        let group = TrajectoryGroup {
            trajectories: vec![dummy_trajectory(); g],
            credits,
            selected_indices: vec![(0, 0); g],
        };
        let adv = normalize_advantages(&group, eps)?;
        for role in Role::ALL {
            let a = adv.get(role);
            let m = a.iter().sum::<f64>() / g as f64;
            let sd = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / g as f64).sqrt();
            let target = stds.get(role) / (stds.get(role) + eps);
            worst_mean = worst_mean.max(m.abs());
            worst_std = worst_std.max((sd - target).abs());
        }
    }
    let mut zero_ok = true;
    for g in [2, 5, 8] {
        let value = rng.gen_range(-3.0..3.0);
        let group = TrajectoryGroup {
            trajectories: vec![dummy_trajectory(); g],
            credits: PerAgent::splat(vec![value; g]),
            selected_indices: vec![(0, 0); g],
        };
        let adv = normalize_advantages(&group, eps)?;
        zero_ok &= Role::ALL
            .iter()
            .all(|&r| adv.get(r).iter().all(|&x| x == 0.0));
    }
    let passed = worst_mean <= 1e-9 && worst_std <= 1e-6 && zero_ok;
    Ok((
        passed,
        format!(
            "{groups} groups, max |mean| {worst_mean:.2e}, max std error {worst_std:.2e}, constant groups zero: {zero_ok}"
        ),
    ))
}

/// Analytic objective gradients against central finite differences at
/// off-policy points, skipping points with a ratio near a clip boundary.
pub fn gradient_suite(points_per_role: usize) -> Verdict {
    let h = 1e-5;
    let eps_clip = 0.2;
    let limits = OutputLimits {
        builder_max_len: 8,
        summarizer_max_len: 8,
        responder_max_len: 2,
    };
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    for role in Role::ALL {
        let mut done = 0;
        let mut attempt = 0u64;
        while done < points_per_role {
            attempt += 1;
            let seed = attempt * 7 + role.level() as u64 * 100_003;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let task = small_task(seed)?;
            let behaviour = random_policies(task.vocab, 0.7, &mut rng);
            let tree = score_leaves(rollout_tree(
                &behaviour,
                &task,
                Branching::new(4, 1, 1),
                &limits,
                seed,
            )?);
            let trajectories = enumerate_paths(&tree);
            let g = trajectories.len();
            let credits = PerAgent::from_fn(|_| {
                (0..g)
                    .map(|_| rng.gen_range(-1.5..1.5))
                    .collect::<Vec<f64>>()
            });
            let group = TrajectoryGroup {
                trajectories,
                credits,
                selected_indices: vec![(0, 0); g],
            };
            let adv = normalize_advantages(&group, 1e-6)?;
            // Move the current policy away from the behaviour policy.
            let mut current = behaviour.clone();
            for w in current.get_mut(role).weights.iter_mut() {
                *w += 0.15 * (rng.gen::<f64>() * 2.0 - 1.0);
            }
            if near_clip_boundary(&group, &current, role, eps_clip, 1e-3)? {
                skipped += 1;
                continue;
            }
            let (_, grads) = grpo_objective(&group, &adv, &current, eps_clip)?;
            let analytic = grads.get(role);
            let mut numeric = vec![0.0; analytic.len()];
            for (idx, slot) in numeric.iter_mut().enumerate() {
                let mut plus = current.clone();
                plus.get_mut(role).weights[idx] += h;
                let mut minus = current.clone();
                minus.get_mut(role).weights[idx] -= h;
                let (op, _) = grpo_objective(&group, &adv, &plus, eps_clip)?;
                let (om, _) = grpo_objective(&group, &adv, &minus, eps_clip)?;
                *slot = (op.get(role) - om.get(role)) / (2.0 * h);
            }
            let diff = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n).powi(2))
                .sum::<f64>()
                .sqrt();
            let norm = analytic
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
            let rel = if norm < 1e-10 { diff } else { diff / norm };
            worst = worst.max(rel);
            done += 1;
        }
    }
    Ok((
        worst <= 1e-4,
        format!(
            "{} points, max relative error {worst:.2e}, {skipped} boundary points skipped",
            3 * points_per_role
        ),
    ))
}

fn near_clip_boundary(
    group: &TrajectoryGroup,
    policies: &Policies,
    role: Role,
    eps_clip: f64,
    margin: f64,
) -> Result<bool> {
    for t in &group.trajectories {
        let step = t.step(role);
        let lp = logprob(policies.get(role), &step.context, &step.action.tokens)?;
        for (new, old) in lp.iter().zip(&step.action.logprobs_old) {
            let ratio = (new - old).exp();
            if (ratio - (1.0 - eps_clip)).abs() < margin
                || (ratio - (1.0 + eps_clip)).abs() < margin
            {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// With one summary and one answer per memory and no length term, subtree
/// credits collapse to leaf rewards, so both schemes must update identically.
pub fn degenerate_suite() -> Verdict {
    let limits = OutputLimits {
        builder_max_len: 12,
        summarizer_max_len: 12,
        responder_max_len: 1,
    };
    let base = TrainConfig {
        group_size: 8,
        summary_branches: 1,
        response_branches: 1,
        eps_norm: 1e-6,
        eps_clip: 0.2,
        length_penalty: 0.0,
        learning_rate: 0.5,
        momentum: 0.0,
        updates_per_rollout: 3,
        reward_scheme: SchemeTag::TreeCredit,
        task_weight: 0.5,
        seeds: vec![0],
        tie_weights: false,
        evaluator: Default::default(),
    };
    let mut mismatches = 0;
    let runs = 20;
    for s in 0..runs as u64 {
        let task = small_task(s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0xde_9e + s);
        let state = TrainState::new(random_policies(task.vocab, 1.0, &mut rng));
        let (tree_state, _) = train_step(&state, &task, &base, &limits, s)?;
        let final_cfg = TrainConfig {
            reward_scheme: SchemeTag::FinalOnly,
            ..base.clone()
        };
        let (final_state, _) = train_step(&state, &task, &final_cfg, &limits, s)?;
        let identical = Role::ALL.iter().all(|&r| {
            let a = &tree_state.policies.get(r).weights;
            let b = &final_state.policies.get(r).weights;
            a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        });
        mismatches += !identical as usize;
    }
    Ok((
        mismatches == 0,
        format!("{runs} steps, {mismatches} with differing weights"),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_probabilities_sum_to_one() {
        let vocab = Vocab::new(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = PolicyParams::random(Role::Summarizer, vocab, 1.0, &mut rng);
        let ctx = Context::new(Role::Summarizer, vec![0, 1, 3]);
        for cap in 1..=3 {
            let total: f64 = enumerate_outputs(&p, &ctx, cap)
                .unwrap()
                .iter()
                .map(|(_, p)| p)
                .sum();
            assert!((total - 1.0).abs() < 1e-12, "cap {cap}: {total}");
        }
    }

    #[test]
    fn small_suites_pass() {
        for (passed, detail) in [
            tower_suite(20).unwrap(),
            advantage_suite(50).unwrap(),
            degenerate_suite().unwrap(),
        ] {
            assert!(passed, "{detail}");
        }
    }
}
