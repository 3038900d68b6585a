use std::str::FromStr;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{context_step, select_action, AgentContext, DtModel, SelectionMode};
use crate::error::{Error, Result};
use crate::policies::{DispatchPolicy, HeuristicKind};
use crate::scalar::Scalar;
use crate::sim::{DispatchEvent, SimulationState};

/// Initial return-to-go for every agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetReturn {
    Fixed(i64),
    /// The median episode throughput of a heuristic, measured by the harness.
    AutoMedian(HeuristicKind),
}

impl FromStr for TargetReturn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(kind) = s.strip_prefix("auto-median:") {
            return Ok(TargetReturn::AutoMedian(kind.parse()?));
        }
        s.parse::<i64>().map(TargetReturn::Fixed).map_err(|_| {
            Error::Usage(format!(
                "target return `{s}` is neither an integer nor auto-median:<policy>"
            ))
        })
    }
}

/// Runs a decision transformer for every incoming point, each with its own
/// context window and random stream.
///
/// At an agent's n-th event the return-to-go is reduced by the reward of
/// its (n-1)-th event, i.e. the throughput between its (n-2)-th and
/// (n-1)-th events. This reproduces the returns-to-go stored in recorded
/// datasets, where the reward of an event is the throughput accrued since
/// the agent's previous event.
#[derive(Debug, Clone)]
pub struct DtPolicy<T> {
    models: Vec<Arc<DtModel<T>>>,
    target_return: i64,
    mode: SelectionMode,
    seed_rng: ChaCha8Rng,
    rngs: Vec<ChaCha8Rng>,
    contexts: Vec<AgentContext>,
    last_total: Vec<u64>,
    pending_reward: Vec<u64>,
    last_action: Vec<Option<usize>>,
}

impl<T: Scalar> DtPolicy<T> {
    /// `models` holds either one shared model or one per incoming point.
    pub fn new(
        models: Vec<Arc<DtModel<T>>>,
        target_return: i64,
        mode: SelectionMode,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Usage("no decision-transformer weights given".into()));
        }
        Ok(Self {
            models,
            target_return,
            mode,
            seed_rng: rng,
            rngs: Vec::new(),
            contexts: Vec::new(),
            last_total: Vec::new(),
            pending_reward: Vec::new(),
            last_action: Vec::new(),
        })
    }

    pub fn shared(
        model: Arc<DtModel<T>>,
        target_return: i64,
        mode: SelectionMode,
        rng: ChaCha8Rng,
    ) -> Self {
        Self::new(vec![model], target_return, mode, rng).expect("one model")
    }

    pub fn target_return(&self) -> i64 {
        self.target_return
    }

    /// Context of `agent`, once it has seen an event this episode.
    pub fn context(&self, agent: usize) -> Option<&AgentContext> {
        self.contexts.get(agent)
    }

    fn model_for(&self, agent: usize) -> Result<&Arc<DtModel<T>>> {
        match self.models.len() {
            1 => Ok(&self.models[0]),
            _ => self.models.get(agent).ok_or_else(|| {
                Error::Usage(format!(
                    "{} weight sets given but incoming point {agent} needs one",
                    self.models.len()
                ))
            }),
        }
    }

    /// Per-agent state is created in agent order so that it does not depend
    /// on how events of different agents interleave.
    fn ensure_agent(&mut self, agent: usize) -> Result<()> {
        while self.contexts.len() <= agent {
            let i = self.contexts.len();
            let k = self.model_for(i)?.config().context_k;
            self.contexts
                .push(AgentContext::new(i, self.target_return, k));
            self.rngs
                .push(ChaCha8Rng::seed_from_u64(self.seed_rng.next_u64()));
            self.last_total.push(0);
            self.pending_reward.push(0);
            self.last_action.push(None);
        }
        Ok(())
    }
}

impl<T: Scalar> DispatchPolicy for DtPolicy<T> {
    fn name(&self) -> String {
        "dt".into()
    }

    fn begin_episode(&mut self) {
        self.rngs.clear();
        self.contexts.clear();
        self.last_total.clear();
        self.pending_reward.clear();
        self.last_action.clear();
    }

    fn dispatch(&mut self, state: &SimulationState, event: &DispatchEvent) -> Result<usize> {
        let agent = event.incoming_id;
        self.ensure_agent(agent)?;
        let model = Arc::clone(self.model_for(agent)?);
        let cfg = model.config();
        if event.observation.len() != cfg.state_dim || state.topology().n_storage() != cfg.n_actions
        {
            return Err(Error::Usage(format!(
                "model expects {} state values and {} actions, simulator has {} and {}",
                cfg.state_dim,
                cfg.n_actions,
                event.observation.len(),
                state.topology().n_storage()
            )));
        }

        let total = state.throughput().total;
        let reward = total - self.last_total[agent];
        self.last_total[agent] = total;
        let observed = std::mem::replace(&mut self.pending_reward[agent], reward);

        let ctx = &mut self.contexts[agent];
        context_step(ctx, &event.observation, self.last_action[agent], observed);
        let logits = model.forward(ctx)?;
        let action = select_action(&logits, self.mode, &mut self.rngs[agent]);
        self.last_action[agent] = Some(action);
        Ok(action)
    }
}
