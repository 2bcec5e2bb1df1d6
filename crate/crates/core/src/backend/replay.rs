use std::collections::HashMap;

use super::{context_hash, Backend, BackendError};
use crate::decoder::DecodeTrace;
use crate::distributions::LogProbDist;
use crate::scalar::Scalar;

/// Serves distributions recorded in decode traces, keyed by exact context.
#[derive(Debug, Clone, Default)]
pub struct ReplayBackend<F> {
    recorded: HashMap<String, LogProbDist<F>>,
    eos: Option<String>,
}

impl<F: Scalar> ReplayBackend<F> {
    pub fn new() -> Self {
        Self {
            recorded: HashMap::new(),
            eos: None,
        }
    }

    pub fn insert(&mut self, context: impl Into<String>, dist: LogProbDist<F>) {
        self.recorded.insert(context.into(), dist);
    }

    /// Rebuilds every context the trace queried and records what it saw.
    pub fn from_trace(trace: &DecodeTrace<F>) -> Self {
        let mut replay = Self::new();
        replay.add_trace(trace);
        replay
    }

    pub fn add_trace(&mut self, trace: &DecodeTrace<F>) {
        let mut generated = String::new();
        for step in &trace.steps {
            if let (Some(prompt), Some(dist)) = (&trace.prompt_plain, &step.p_dist) {
                self.insert(format!("{prompt}{generated}"), dist.clone());
            }
            if let (Some(prompt), Some(dist)) = (&trace.prompt_with_examples, &step.p_tilde_dist) {
                self.insert(format!("{prompt}{generated}"), dist.clone());
            }
            generated.push_str(&step.selected);
        }
        if trace.eos.is_some() {
            self.eos = trace.eos.clone();
        }
    }

    pub fn len(&self) -> usize {
        self.recorded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recorded.is_empty()
    }
}

impl<F: Scalar> Backend<F> for ReplayBackend<F> {
    fn next_token_logprobs(&self, context: &str) -> Result<LogProbDist<F>, BackendError> {
        self.recorded
            .get(context)
            .cloned()
            .ok_or_else(|| BackendError::ReplayMiss {
                context_hash: context_hash(context),
            })
    }

    fn eos_token(&self) -> Option<String> {
        self.eos.clone()
    }

    fn describe(&self) -> String {
        format!("replay ({} contexts)", self.recorded.len())
    }
}
