//! Experiment runner: seeded episodes, evaluation summaries, conditioning
//! sweeps and dataset generation.
//!
//! Run `e` under seed `s` uses `ChaCha8Rng::seed_from_u64(s)` on stream
//! `2e` for the simulator and stream `2e + 1` for the policy, so every run
//! is reproducible on its own, in any order and on any thread.

use std::collections::HashSet;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::dataset::{record_episode, Dataset, DatasetSource, EpisodeTrajectory};
use crate::dt::{DtPolicy, SelectionMode, TargetReturn};
use crate::error::{Error, Result};
use crate::policies::{DispatchPolicy, HeuristicKind, HeuristicPolicy};
use crate::sim::{SimulationState, ThroughputCounter};
use crate::stats::{median, FiveNumber};
use crate::DtModelF32;

/// Which policy to run.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    Heuristic(HeuristicKind),
    Dt {
        /// One shared model or one per incoming point.
        models: Vec<Arc<DtModelF32>>,
        target_return: i64,
        mode: SelectionMode,
    },
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::Heuristic(kind) => kind.to_string(),
            PolicySpec::Dt { .. } => "dt".into(),
        }
    }

    pub fn build(
        &self,
        config: &ExperimentConfig,
        rng: ChaCha8Rng,
    ) -> Result<Box<dyn DispatchPolicy>> {
        Ok(match self {
            PolicySpec::Heuristic(kind) => {
                Box::new(HeuristicPolicy::new(*kind, config.heuristics.clone(), rng))
            }
            PolicySpec::Dt {
                models,
                target_return,
                mode,
            } => Box::new(DtPolicy::new(models.clone(), *target_return, *mode, rng)?),
        })
    }

    fn with_target(&self, target: i64) -> Self {
        match self {
            PolicySpec::Dt { models, mode, .. } => PolicySpec::Dt {
                models: models.clone(),
                target_return: target,
                mode: *mode,
            },
            other => other.clone(),
        }
    }
}

/// Simulator and policy random streams of run `episode` under `seed`.
pub fn episode_rngs(seed: u64, episode: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut env = ChaCha8Rng::seed_from_u64(seed);
    env.set_stream(2 * episode);
    let mut policy = ChaCha8Rng::seed_from_u64(seed);
    policy.set_stream(2 * episode + 1);
    (env, policy)
}

/// Result of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub episode: u64,
    pub throughput: ThroughputCounter,
    pub events_per_agent: Vec<u64>,
    pub trajectories: Vec<EpisodeTrajectory>,
}

/// Plays one full episode.
pub fn run_episode(
    spec: &PolicySpec,
    config: &ExperimentConfig,
    seed: u64,
    episode: u64,
) -> Result<EpisodeOutcome> {
    let (env_rng, policy_rng) = episode_rngs(seed, episode);
    let mut state = SimulationState::with_rng(&config.sim, env_rng)?;
    let mut policy = spec.build(config, policy_rng)?;
    let trajectories = record_episode(&mut state, policy.as_mut(), episode)?;
    Ok(EpisodeOutcome {
        seed,
        episode,
        throughput: state.throughput(),
        events_per_agent: state.event_counts().to_vec(),
        trajectories,
    })
}

/// Per-run line of an evaluation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub episode: u64,
    pub throughput: u64,
    pub storage_receipts: u64,
    pub outgoing_deliveries: u64,
    pub events_per_agent: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub policy: String,
    pub n_episodes: usize,
    pub n_seeds: usize,
    pub base_seed: u64,
    /// Five-number summary of per-episode throughput over all runs.
    pub throughput: FiveNumber,
    pub per_seed_medians: Vec<f64>,
    /// Median over runs of the mean events per incoming point.
    pub median_events_per_agent: f64,
    /// Runs in seed-major order.
    pub runs: Vec<RunRecord>,
}

/// `n_episodes` runs for each seed `base_seed + j`, `j < n_seeds`.
pub fn evaluate(
    spec: &PolicySpec,
    config: &ExperimentConfig,
    n_episodes: usize,
    n_seeds: usize,
    base_seed: u64,
) -> Result<EvalSummary> {
    if n_episodes == 0 || n_seeds == 0 {
        return Err(Error::Usage("episodes and seeds must be at least 1".into()));
    }
    config.validate()?;
    let jobs: Vec<(u64, u64)> = (0..n_seeds as u64)
        .flat_map(|j| (0..n_episodes as u64).map(move |e| (base_seed + j, e)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(seed, e)| {
            let out = run_episode(spec, config, seed, e)?;
            Ok(RunRecord {
                seed,
                episode: e,
                throughput: out.throughput.total,
                storage_receipts: out.throughput.storage_receipts,
                outgoing_deliveries: out.throughput.outgoing_deliveries,
                events_per_agent: out.events_per_agent,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let totals: Vec<f64> = runs.iter().map(|r| r.throughput as f64).collect();
    let per_seed_medians = totals
        .chunks(n_episodes)
        .map(|c| median(c).expect("non-empty"))
        .collect();
    let mean_events: Vec<f64> = runs
        .iter()
        .map(|r| r.events_per_agent.iter().sum::<u64>() as f64 / r.events_per_agent.len() as f64)
        .collect();
    Ok(EvalSummary {
        policy: spec.name(),
        n_episodes,
        n_seeds,
        base_seed,
        throughput: FiveNumber::from_values(&totals).expect("non-empty"),
        per_seed_medians,
        median_events_per_agent: median(&mean_events).expect("non-empty"),
        runs,
    })
}

/// Median heuristic throughput, rounded, under the evaluation protocol.
pub fn heuristic_median(
    kind: HeuristicKind,
    config: &ExperimentConfig,
    n_episodes: usize,
    n_seeds: usize,
    base_seed: u64,
) -> Result<i64> {
    let s = evaluate(
        &PolicySpec::Heuristic(kind),
        config,
        n_episodes,
        n_seeds,
        base_seed,
    )?;
    Ok(s.throughput.median.round() as i64)
}

/// Turns a target-return request into a number.
pub fn resolve_target(
    target: TargetReturn,
    config: &ExperimentConfig,
    n_episodes: usize,
    n_seeds: usize,
    base_seed: u64,
) -> Result<i64> {
    match target {
        TargetReturn::Fixed(v) => Ok(v),
        TargetReturn::AutoMedian(kind) => {
            heuristic_median(kind, config, n_episodes, n_seeds, base_seed)
        }
    }
}

/// Conditioning sweep around a base return.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub models: Vec<Arc<DtModelF32>>,
    pub mode: SelectionMode,
    pub base_return: i64,
    pub offsets: Vec<i64>,
    pub n_episodes: usize,
    pub n_seeds: usize,
}

impl SweepSpec {
    pub const DEFAULT_OFFSETS: [i64; 5] = [-200, -100, 0, 100, 200];

    pub fn validate(&self) -> Result<()> {
        if self.offsets.is_empty() {
            return Err(Error::Usage("sweep needs at least one offset".into()));
        }
        let mut seen = HashSet::new();
        for &o in &self.offsets {
            if !seen.insert(o) {
                return Err(Error::Usage(format!("offset {o} given twice")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub offset: i64,
    pub target_return: i64,
    pub summary: EvalSummary,
}

/// One evaluation per target `base_return + offset`, in the given order.
pub fn sweep_conditioning(
    spec: &SweepSpec,
    config: &ExperimentConfig,
    base_seed: u64,
) -> Result<Vec<SweepPoint>> {
    spec.validate()?;
    let policy = PolicySpec::Dt {
        models: spec.models.clone(),
        target_return: spec.base_return,
        mode: spec.mode,
    };
    spec.offsets
        .iter()
        .map(|&offset| {
            let target = spec.base_return + offset;
            let summary = evaluate(
                &policy.with_target(target),
                config,
                spec.n_episodes,
                spec.n_seeds,
                base_seed,
            )?;
            Ok(SweepPoint {
                offset,
                target_return: target,
                summary,
            })
        })
        .collect()
}

/// Records `n_episodes` episodes under `seed` into a dataset.
pub fn gen_data(
    spec: &PolicySpec,
    config: &ExperimentConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    config.validate()?;
    let episodes = (0..n_episodes as u64)
        .into_par_iter()
        .map(|e| run_episode(spec, config, seed, e).map(|o| o.trajectories))
        .collect::<Result<Vec<_>>>()?;
    let source = DatasetSource {
        policy: spec.name(),
        n_episodes: n_episodes as u64,
        seed,
        config_hash: config.hash(),
        n_agents: config.sim.n_incoming,
        n_storage: config.sim.n_storage,
        n_junctions: config.sim.n_junctions,
    };
    Dataset::new(source, episodes.into_iter().flatten().collect())
}
