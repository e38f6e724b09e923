use serde::{Deserialize, Serialize};

use crate::policy::Role;

/// One value per agent role.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerAgent<T> {
    pub builder: T,
    pub summarizer: T,
    pub responder: T,
}

impl<T: Clone> PerAgent<T> {
    pub fn splat(value: T) -> Self {
        Self::from_fn(|_| value.clone())
    }
}

impl<T> PerAgent<T> {
    pub fn from_fn(mut f: impl FnMut(Role) -> T) -> Self {
        Self {
            builder: f(Role::Builder),
            summarizer: f(Role::Summarizer),
            responder: f(Role::Responder),
        }
    }

    pub fn get(&self, role: Role) -> &T {
        match role {
            Role::Builder => &self.builder,
            Role::Summarizer => &self.summarizer,
            Role::Responder => &self.responder,
        }
    }

    pub fn get_mut(&mut self, role: Role) -> &mut T {
        match role {
            Role::Builder => &mut self.builder,
            Role::Summarizer => &mut self.summarizer,
            Role::Responder => &mut self.responder,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Role, &T) -> U) -> PerAgent<U> {
        PerAgent::from_fn(|r| f(r, self.get(r)))
    }
}
