use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use treecredit_bench::{limits, prior_policies, slot_recall_config};
use treecredit_core::optim::SchemeTag;
use treecredit_core::{
    assign_credit, generate_task, grpo_objective, normalize_advantages, rollout_tree, score_leaves,
    select_group, train_step, Branching, TrainConfig, TrainState,
};

fn train_config(g: usize, j: usize, k: usize) -> TrainConfig {
    TrainConfig {
        group_size: g,
        summary_branches: j,
        response_branches: k,
        eps_norm: 1e-6,
        eps_clip: 0.2,
        length_penalty: -1.0,
        learning_rate: 0.5,
        momentum: 0.0,
        updates_per_rollout: 4,
        reward_scheme: SchemeTag::TreeCredit,
        task_weight: 0.5,
        seeds: vec![1],
        tie_weights: false,
        evaluator: Default::default(),
    }
}

fn bench_rollout(c: &mut Criterion) {
    let task = generate_task(7, &slot_recall_config()).unwrap();
    let policies = prior_policies(&task);
    let limits = limits(&task);
    let mut group = c.benchmark_group("rollout_tree");
    for (g, j, k) in [(8, 1, 1), (8, 2, 2), (8, 4, 4)] {
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{g}x{j}x{k}")),
            &(g, j, k),
            |b, &(g, j, k)| {
                b.iter(|| {
                    rollout_tree(
                        &policies,
                        &task,
                        Branching::new(g, j, k),
                        &limits,
                        black_box(3),
                    )
                    .unwrap()
                })
            },
        );
    }
    group.finish();
}

fn bench_objective(c: &mut Criterion) {
    let task = generate_task(7, &slot_recall_config()).unwrap();
    let policies = prior_policies(&task);
    let tree = score_leaves(
        rollout_tree(&policies, &task, Branching::new(8, 2, 2), &limits(&task), 3).unwrap(),
    );
    let credits = assign_credit(&tree, -1.0).unwrap();
    let mut rng = treecredit_core::seed::rng_from(3, &[0]);
    let group = select_group(&tree, &credits, &mut rng);
    let adv = normalize_advantages(&group, 1e-6).unwrap();
    c.bench_function("grpo_objective/G8", |b| {
        b.iter(|| grpo_objective(black_box(&group), &adv, &policies, 0.2).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let task = generate_task(7, &slot_recall_config()).unwrap();
    let state = TrainState::new(prior_policies(&task));
    let limits = limits(&task);
    let cfg = train_config(8, 2, 2);
    c.bench_function("train_step/G8xJ2xK2", |b| {
        b.iter(|| train_step(&state, &task, &cfg, &limits, black_box(11)).unwrap())
    });
}

criterion_group!(benches, bench_rollout, bench_objective, bench_train_step);
criterion_main!(benches);
