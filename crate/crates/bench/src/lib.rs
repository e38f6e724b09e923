//! Shared fixtures for the benchmarks.

use treecredit_core::{OutputLimits, PerAgent, Policies, Task, TaskConfig};

pub fn slot_recall_config() -> TaskConfig {
    TaskConfig {
        n_slots: 8,
        n_values: 4,
        history_len: 20,
        noise_fraction: 0.5,
        update_rate: 0.5,
    }
}

pub fn limits(task: &Task) -> OutputLimits {
    OutputLimits {
        builder_max_len: task.history_token_len,
        summarizer_max_len: task.history_token_len,
        responder_max_len: 1,
    }
}

pub fn prior_policies(task: &Task) -> Policies {
    Policies::with_prior(task.vocab, &PerAgent::splat(3.0), false)
}
