//! Decision-transformer inference: model, per-agent context windows,
//! action selection, weight files and the dispatch policy wrapper.

mod model;
mod policy;
mod weights;

use std::collections::VecDeque;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::Observation;

pub use model::DtModel;
pub use policy::{DtPolicy, TargetReturn};
pub use weights::{load_weights, save_weights, TensorEntry, WeightHeader, MAGIC};

/// Shape of the transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DtConfig {
    /// Maximum number of (return, state, action) tuples in the window.
    pub context_k: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    /// Size of the absolute timestep table; later steps reuse the last row.
    pub max_timestep: usize,
    /// Used only while training.
    pub dropout: f64,
}

impl Default for DtConfig {
    fn default() -> Self {
        Self {
            context_k: 20,
            embed_dim: 128,
            n_layers: 3,
            n_heads: 1,
            state_dim: 44,
            n_actions: 20,
            max_timestep: 1024,
            dropout: 0.1,
        }
    }
}

impl DtConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("context_k", self.context_k),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("state_dim", self.state_dim),
            ("n_actions", self.n_actions),
            ("max_timestep", self.max_timestep),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "embed_dim",
                format!(
                    "{} is not divisible by n_heads {}",
                    self.embed_dim, self.n_heads
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Index of the "no previous action" embedding row.
    pub fn no_action_index(&self) -> usize {
        self.n_actions
    }
}

/// Input scaling stored with the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    /// Multiplier applied to returns-to-go before embedding.
    pub return_scale: f64,
}

impl Normalization {
    pub fn identity(state_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            return_scale: 1e-3,
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        if self.state_mean.len() != state_dim || self.state_std.len() != state_dim {
            return Err(Error::Weights(format!(
                "normalization has {}/{} entries, state_dim is {state_dim}",
                self.state_mean.len(),
                self.state_std.len()
            )));
        }
        if self.state_mean.iter().any(|m| !m.is_finite())
            || self.state_std.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || !self.return_scale.is_finite()
        {
            return Err(Error::Weights(
                "normalization constants must be finite with positive std".into(),
            ));
        }
        Ok(())
    }
}

/// One tuple of the context window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextEntry {
    pub return_to_go: i64,
    pub state: Vec<u32>,
    pub prev_action: Option<usize>,
    /// The agent's event index within the episode.
    pub timestep: usize,
}

/// Rolling window of one agent's recent tuples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentContext {
    pub agent_id: usize,
    k: usize,
    window: VecDeque<ContextEntry>,
    current_rtg: i64,
    steps: usize,
}

impl AgentContext {
    pub fn new(agent_id: usize, target_return: i64, k: usize) -> Self {
        assert!(k > 0, "context length must be positive");
        Self {
            agent_id,
            k,
            window: VecDeque::with_capacity(k + 1),
            current_rtg: target_return,
            steps: 0,
        }
    }

    pub fn current_rtg(&self) -> i64 {
        self.current_rtg
    }

    pub fn capacity(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Tuples appended since the episode started, including evicted ones.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &ContextEntry> {
        self.window.iter()
    }

    /// Appends a tuple without touching the return-to-go; used to build
    /// arbitrary windows in tests and tools.
    pub fn push_entry(&mut self, entry: ContextEntry) {
        self.window.push_back(entry);
        self.steps += 1;
        while self.window.len() > self.k {
            self.window.pop_front();
        }
    }
}

/// Subtracts `observed_reward` from the running return-to-go and appends
/// `(rtg, new_state, last_action)`, evicting the oldest tuple beyond `k`.
pub fn context_step(
    ctx: &mut AgentContext,
    new_state: &Observation,
    last_action: Option<usize>,
    observed_reward: u64,
) {
    ctx.current_rtg -= observed_reward as i64;
    let entry = ContextEntry {
        return_to_go: ctx.current_rtg,
        state: new_state.to_vec(),
        prev_action: last_action,
        timestep: ctx.steps,
    };
    ctx.push_entry(entry);
}

/// How an action is picked from the logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SelectionMode {
    Greedy,
    Sample { temperature: f64 },
}

/// Numerically stable softmax at temperature 1.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Greedy: first index of the maximum. Sample: draw from
/// `softmax(logits / temperature)`; a non-positive temperature is greedy.
pub fn select_action<T: Scalar>(logits: &[T], mode: SelectionMode, rng: &mut impl Rng) -> usize {
    let greedy = || {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best
    };
    match mode {
        SelectionMode::Greedy => greedy(),
        SelectionMode::Sample { temperature } if temperature <= 0.0 => greedy(),
        SelectionMode::Sample { temperature } => {
            let scaled: Vec<f64> = logits.iter().map(|l| l.into_f64() / temperature).collect();
            let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights = scaled.iter().map(|s| (s - max).exp());
            match WeightedIndex::new(weights) {
                Ok(dist) => dist.sample(rng),
                Err(_) => greedy(),
            }
        }
    }
}

#[cfg(test)]
mod tests;
