//! Dispatching heuristics, the loop cost function and the junction rule.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::HeuristicParams;
use crate::error::{Error, Result};
use crate::sim::{DispatchEvent, HeuristicContext, Payload, SimulationState};

/// Anything that can answer dispatch events.
///
/// One policy instance serves every incoming point of one episode; the
/// event's `incoming_id` tells which agent is asking.
pub trait DispatchPolicy {
    fn name(&self) -> String;

    /// Called once before the first event of an episode.
    fn begin_episode(&mut self) {}

    fn dispatch(&mut self, state: &SimulationState, event: &DispatchEvent) -> Result<usize>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeuristicKind {
    Random,
    Low,
    Medium,
    High,
    Sll,
}

impl HeuristicKind {
    pub const ALL: [HeuristicKind; 5] = [
        HeuristicKind::Random,
        HeuristicKind::Low,
        HeuristicKind::Medium,
        HeuristicKind::High,
        HeuristicKind::Sll,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeuristicKind::Random => "random",
            HeuristicKind::Low => "low",
            HeuristicKind::Medium => "medium",
            HeuristicKind::High => "high",
            HeuristicKind::Sll => "sll",
        }
    }

    /// Whether the rule draws random numbers.
    pub fn is_stochastic(self) -> bool {
        matches!(self, HeuristicKind::Random | HeuristicKind::Low)
    }
}

impl fmt::Display for HeuristicKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeuristicKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeuristicKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownPolicy(s.to_string()))
    }
}

/// Per-loop assigned-pallet totals with their extremes.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopStats {
    pub assigned_per_loop: Vec<u32>,
    pub x_min: u32,
    pub x_max: u32,
}

impl LoopStats {
    pub fn new(assigned_per_loop: Vec<u32>) -> Self {
        let x_min = assigned_per_loop.iter().copied().min().unwrap_or(0);
        let x_max = assigned_per_loop.iter().copied().max().unwrap_or(0);
        Self {
            assigned_per_loop,
            x_min,
            x_max,
        }
    }

    pub fn from_context(ctx: &HeuristicContext) -> Self {
        Self::new(ctx.per_loop_assigned.clone())
    }
}

/// Normalized load of `candidate_loop` plus the distance cost from `origin_loop`.
///
/// The load term is 0 when every loop carries the same number of pallets.
pub fn loop_cost(
    stats: &LoopStats,
    candidate_loop: usize,
    origin_loop: usize,
    params: &HeuristicParams,
) -> f64 {
    let spread = stats.x_max - stats.x_min;
    let load = if spread == 0 {
        0.0
    } else {
        f64::from(stats.assigned_per_loop[candidate_loop] - stats.x_min) / f64::from(spread)
    };
    load + params.loop_cost(origin_loop, candidate_loop)
}

/// Lowest-id storage minimizing `key` over `candidates`.
fn argmin_by_key<K: Ord>(candidates: &[usize], key: impl Fn(usize) -> K) -> Option<usize> {
    candidates.iter().copied().min_by_key(|&s| (key(s), s))
}

fn all_storages(ctx: &HeuristicContext) -> Vec<usize> {
    (0..ctx.n_storage()).collect()
}

pub fn dispatch_random(ctx: &HeuristicContext, rng: &mut impl Rng) -> usize {
    rng.random_range(0..ctx.n_storage())
}

/// Uniform draw from the storage points on the incoming point's own loop.
pub fn dispatch_low(ctx: &HeuristicContext, rng: &mut impl Rng) -> Result<usize> {
    if ctx.same_loop_set.is_empty() {
        return Err(Error::config(
            "layout",
            format!("loop {} has no storage points", ctx.origin_loop),
        ));
    }
    Ok(ctx.same_loop_set[rng.random_range(0..ctx.same_loop_set.len())])
}

/// Threshold on incoming pallets, cheapest loop, then fewest incoming pallets.
pub fn dispatch_medium(ctx: &HeuristicContext, params: &HeuristicParams) -> usize {
    let in_count = |s: usize| ctx.in_count[s];
    let filtered: Vec<usize> = all_storages(ctx)
        .into_iter()
        .filter(|&s| in_count(s) <= params.c1)
        .collect();
    if filtered.is_empty() {
        return argmin_by_key(&all_storages(ctx), in_count).expect("at least one storage");
    }

    let stats = LoopStats::from_context(ctx);
    let mut best_loop = None;
    let mut best_cost = f64::INFINITY;
    for l in 0..ctx.n_loops() {
        if !filtered.iter().any(|&s| ctx.loop_of_storage[s] == l) {
            continue;
        }
        let c = loop_cost(&stats, l, ctx.origin_loop, params);
        if c < best_cost {
            best_cost = c;
            best_loop = Some(l);
        }
    }
    let best_loop = best_loop.expect("filtered set is non-empty");
    let in_loop: Vec<usize> = filtered
        .into_iter()
        .filter(|&s| ctx.loop_of_storage[s] == best_loop)
        .collect();
    match in_loop.as_slice() {
        [only] => *only,
        _ => argmin_by_key(&in_loop, in_count).expect("non-empty"),
    }
}

/// Candidate set chosen by comparing same-loop and other-loop assignments
/// against `c1`/`c2`, before any per-storage filtering.
pub fn high_branch_set(ctx: &HeuristicContext, params: &HeuristicParams) -> Vec<usize> {
    let same_ok = ctx.x_same < params.c1;
    let other_ok = ctx.x_other < params.c2;
    let same_over = ctx.x_same > params.c1;
    let other_over = ctx.x_other > params.c2;
    if same_ok && other_ok {
        all_storages(ctx)
    } else if same_ok && other_over {
        ctx.same_loop_set.clone()
    } else if same_over && other_ok {
        ctx.other_loop_set.clone()
    } else {
        all_storages(ctx)
    }
}

/// Loop-congestion branch, incoming threshold, same-loop preference, then
/// the smallest Out(s) - In(s).
pub fn dispatch_high(ctx: &HeuristicContext, params: &HeuristicParams) -> usize {
    let out_minus_in = |s: usize| i64::from(ctx.out_count[s]) - i64::from(ctx.in_count[s]);
    let mut set: Vec<usize> = high_branch_set(ctx, params)
        .into_iter()
        .filter(|&s| ctx.in_count[s] <= params.c3)
        .collect();
    let same_only: Vec<usize> = set
        .iter()
        .copied()
        .filter(|&s| ctx.loop_of_storage[s] == ctx.origin_loop)
        .collect();
    if !same_only.is_empty() {
        set = same_only;
    }
    match set.as_slice() {
        [] => argmin_by_key(&all_storages(ctx), out_minus_in).expect("at least one storage"),
        [only] => *only,
        _ => argmin_by_key(&set, out_minus_in).expect("non-empty"),
    }
}

/// Same loop, fewest incoming pallets.
pub fn dispatch_sll(ctx: &HeuristicContext) -> Result<usize> {
    argmin_by_key(&ctx.same_loop_set, |s| ctx.in_count[s]).ok_or_else(|| {
        Error::config(
            "layout",
            format!("loop {} has no storage points", ctx.origin_loop),
        )
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JunctionDirection {
    Stay,
    Cross,
}

/// Empty-pallet rule: cross only toward a loop holding strictly fewer pallets.
pub fn empty_pallet_direction(current_loop: usize, downstream_loop: usize) -> JunctionDirection {
    if downstream_loop < current_loop {
        JunctionDirection::Cross
    } else {
        JunctionDirection::Stay
    }
}

/// Decision for the pallet passing the exit of junction `junction_id`.
///
/// Empty pallets cross when the downstream loop holds strictly fewer
/// pallets than the current one. Loaded pallets follow the shortest
/// junction path toward their destination's loop.
pub fn route_junction(
    state: &SimulationState,
    junction_id: usize,
    payload: Payload,
) -> JunctionDirection {
    let topo = state.topology();
    let link = topo.junction_links[junction_id];
    let dest_loop = match payload {
        Payload::Empty => {
            return empty_pallet_direction(
                state.loop_pallet_count(link.from_loop),
                state.loop_pallet_count(link.to_loop),
            );
        }
        Payload::Inbound(s) => topo.loop_of_storage[s],
        Payload::Outbound(o) => topo.loop_of_outgoing[o],
    };
    if topo.next_hop[link.from_loop][dest_loop] == Some(junction_id) {
        JunctionDirection::Cross
    } else {
        JunctionDirection::Stay
    }
}

/// One of the five named heuristics with its own RNG stream.
#[derive(Debug, Clone)]
pub struct HeuristicPolicy {
    kind: HeuristicKind,
    params: HeuristicParams,
    rng: ChaCha8Rng,
}

impl HeuristicPolicy {
    pub fn new(kind: HeuristicKind, params: HeuristicParams, rng: ChaCha8Rng) -> Self {
        Self { kind, params, rng }
    }

    pub fn seeded(kind: HeuristicKind, params: HeuristicParams, seed: u64) -> Self {
        Self::new(kind, params, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn kind(&self) -> HeuristicKind {
        self.kind
    }

    pub fn decide(&mut self, ctx: &HeuristicContext) -> Result<usize> {
        match self.kind {
            HeuristicKind::Random => Ok(dispatch_random(ctx, &mut self.rng)),
            HeuristicKind::Low => dispatch_low(ctx, &mut self.rng),
            HeuristicKind::Medium => Ok(dispatch_medium(ctx, &self.params)),
            HeuristicKind::High => Ok(dispatch_high(ctx, &self.params)),
            HeuristicKind::Sll => dispatch_sll(ctx),
        }
    }
}

impl DispatchPolicy for HeuristicPolicy {
    fn name(&self) -> String {
        self.kind.to_string()
    }

    fn dispatch(&mut self, state: &SimulationState, event: &DispatchEvent) -> Result<usize> {
        let ctx = state.heuristic_context(event.incoming_id)?;
        self.decide(&ctx)
    }
}
