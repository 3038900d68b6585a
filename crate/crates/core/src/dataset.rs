//! Per-agent trajectory recording, dataset files and mixing.
//!
//! A dataset is a plain-text data file with one transition per line plus a
//! JSON manifest next to it (`<data>.manifest.json`). Every data line holds
//! integers only, in this order:
//!
//! ```text
//! episode agent step tick action reward done rtg state[0] .. state[n-1]
//! ```
//!
//! where the state is the flattened [`Observation`]. Lines starting with `#`
//! are comments. Transitions of one trajectory are contiguous and the last
//! one has `done = 1`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policies::DispatchPolicy;
use crate::sim::{Advance, DispatchEvent, Observation, SimulationState};
use crate::stats::FiveNumber;

pub const FORMAT_VERSION: u32 = 1;

/// Number of integer fields preceding the state on a data line.
const FIXED_FIELDS: usize = 8;

/// One dispatch decision of one agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub episode_id: u64,
    pub agent_id: usize,
    pub step_index: u64,
    /// Simulation tick of the event.
    pub tick: u64,
    pub state: Observation,
    pub action: usize,
    /// System throughput accrued since this agent's previous event.
    pub reward: u64,
    pub done: bool,
}

impl Transition {
    pub fn time(&self, tick_seconds: f64) -> f64 {
        self.tick as f64 * tick_seconds
    }
}

/// Suffix sums of `rewards`.
pub fn compute_returns_to_go(rewards: &[u64]) -> Vec<u64> {
    let mut rtg = vec![0; rewards.len()];
    let mut acc = 0;
    for (i, &r) in rewards.iter().enumerate().rev() {
        acc += r;
        rtg[i] = acc;
    }
    rtg
}

/// All transitions of one agent in one episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTrajectory {
    pub transitions: Vec<Transition>,
    pub returns_to_go: Vec<u64>,
    pub total_return: u64,
}

impl EpisodeTrajectory {
    pub fn new(transitions: Vec<Transition>) -> Self {
        let rewards: Vec<u64> = transitions.iter().map(|t| t.reward).collect();
        let returns_to_go = compute_returns_to_go(&rewards);
        let total_return = returns_to_go.first().copied().unwrap_or(0);
        Self {
            transitions,
            returns_to_go,
            total_return,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// `(episode, agent)` of the first transition.
    pub fn key(&self) -> Option<(u64, usize)> {
        self.transitions.first().map(|t| (t.episode_id, t.agent_id))
    }

    pub fn rewards(&self) -> impl Iterator<Item = u64> + '_ {
        self.transitions.iter().map(|t| t.reward)
    }

    /// Checks step numbering, the done flag and the return-to-go suffix sums.
    pub fn check(&self) -> std::result::Result<(), String> {
        let Some((episode, agent)) = self.key() else {
            return Err("empty trajectory".into());
        };
        if self.returns_to_go.len() != self.transitions.len() {
            return Err("returns_to_go length differs from transitions".into());
        }
        let last = self.transitions.len() - 1;
        for (i, t) in self.transitions.iter().enumerate() {
            if (t.episode_id, t.agent_id) != (episode, agent) {
                return Err(format!("step {i} belongs to another trajectory"));
            }
            if t.step_index != i as u64 {
                return Err(format!("step {i} has step_index {}", t.step_index));
            }
            if t.done != (i == last) {
                return Err(format!("done flag wrong at step {i}"));
            }
            let next = if i == last {
                0
            } else {
                self.returns_to_go[i + 1]
            };
            if self.returns_to_go[i] != next + t.reward {
                return Err(format!("return-to-go mismatch at step {i}"));
            }
        }
        if self.total_return != self.returns_to_go[0] {
            return Err("total_return differs from first return-to-go".into());
        }
        Ok(())
    }
}

/// Collects transitions for every agent while an episode runs.
#[derive(Debug, Clone)]
pub struct EpisodeRecorder {
    episode_id: u64,
    last_total: Vec<u64>,
    transitions: Vec<Vec<Transition>>,
}

impl EpisodeRecorder {
    pub fn new(episode_id: u64, n_agents: usize) -> Self {
        Self {
            episode_id,
            last_total: vec![0; n_agents],
            transitions: vec![Vec::new(); n_agents],
        }
    }

    /// Logs the decision taken at `event`; `throughput_total` is the system
    /// total at the event. Returns the reward attributed to it.
    pub fn record(&mut self, event: &DispatchEvent, action: usize, throughput_total: u64) -> u64 {
        let agent = event.incoming_id;
        let reward = throughput_total - self.last_total[agent];
        self.last_total[agent] = throughput_total;
        let steps = &mut self.transitions[agent];
        steps.push(Transition {
            episode_id: self.episode_id,
            agent_id: agent,
            step_index: steps.len() as u64,
            tick: event.tick,
            state: event.observation.clone(),
            action,
            reward,
            done: false,
        });
        reward
    }

    /// Closes the episode: throughput after an agent's last event is credited
    /// to that last transition, which is flagged done. One trajectory per
    /// agent, possibly empty.
    pub fn finish(self, final_total: u64) -> Vec<EpisodeTrajectory> {
        self.transitions
            .into_iter()
            .zip(self.last_total)
            .map(|(mut steps, last)| {
                if let Some(t) = steps.last_mut() {
                    t.reward += final_total - last;
                    t.done = true;
                }
                EpisodeTrajectory::new(steps)
            })
            .collect()
    }
}

/// Plays `state` to the horizon under `policy`, recording every agent.
pub fn record_episode(
    state: &mut SimulationState,
    policy: &mut dyn DispatchPolicy,
    episode_id: u64,
) -> Result<Vec<EpisodeTrajectory>> {
    let mut recorder = EpisodeRecorder::new(episode_id, state.config().n_incoming);
    policy.begin_episode();
    while let Advance::Event(event) = state.advance_to_next_event()? {
        let action = policy.dispatch(state, &event)?;
        state.apply_dispatch(&event, action)?;
        recorder.record(&event, action, state.throughput().total);
    }
    Ok(recorder.finish(state.throughput().total))
}

/// Where the data came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub policy: String,
    pub n_episodes: u64,
    pub seed: u64,
    pub config_hash: String,
    pub n_agents: usize,
    pub n_storage: usize,
    pub n_junctions: usize,
}

impl DatasetSource {
    pub fn state_dim(&self) -> usize {
        2 * self.n_storage + self.n_junctions
    }
}

/// Counts that must match the data file exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub n_trajectories: u64,
    pub n_transitions: u64,
    pub per_agent_trajectories: Vec<u64>,
    pub per_agent_transitions: Vec<u64>,
    /// Events per trajectory, summarized per agent.
    pub per_agent_event_counts: Vec<Option<FiveNumber>>,
}

impl DatasetCounts {
    pub fn of(trajectories: &[EpisodeTrajectory], n_agents: usize) -> Self {
        let mut lengths = vec![Vec::new(); n_agents];
        for tr in trajectories {
            if let Some((_, agent)) = tr.key() {
                lengths[agent].push(tr.len() as u64);
            }
        }
        Self {
            n_trajectories: trajectories.len() as u64,
            n_transitions: trajectories.iter().map(|t| t.len() as u64).sum(),
            per_agent_trajectories: lengths.iter().map(|l| l.len() as u64).collect(),
            per_agent_transitions: lengths.iter().map(|l| l.iter().sum()).collect(),
            per_agent_event_counts: lengths
                .iter()
                .map(|l| FiveNumber::from_counts(l.iter().copied()))
                .collect(),
        }
    }
}

/// Which source trajectory a mixed trajectory was copied from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryOrigin {
    pub agent: usize,
    pub episode: u64,
    pub source: usize,
    pub source_episode: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixProvenance {
    pub sources: Vec<DatasetSource>,
    pub trajectories_per_source: usize,
    pub seed: u64,
    pub origins: Vec<TrajectoryOrigin>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub source: DatasetSource,
    pub counts: DatasetCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix: Option<MixProvenance>,
}

/// Trajectories plus their manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<EpisodeTrajectory>,
}

impl Dataset {
    /// Validates every trajectory and derives the manifest counts. Empty
    /// trajectories (agents without events) are dropped.
    pub fn new(source: DatasetSource, trajectories: Vec<EpisodeTrajectory>) -> Result<Self> {
        let trajectories: Vec<_> = trajectories.into_iter().filter(|t| !t.is_empty()).collect();
        let mut seen = HashSet::new();
        for tr in &trajectories {
            let (episode, agent) = tr.key().expect("non-empty");
            let label = format!("trajectory (episode {episode}, agent {agent})");
            tr.check()
                .map_err(|e| Error::Dataset(format!("{label}: {e}")))?;
            if agent >= source.n_agents {
                return Err(Error::Dataset(format!("{label}: agent out of range")));
            }
            if !seen.insert((episode, agent)) {
                return Err(Error::Dataset(format!("{label} appears twice")));
            }
            for t in &tr.transitions {
                if t.state.len() != source.state_dim()
                    || t.state.heading_to_storage.len() != source.n_storage
                {
                    return Err(Error::Dataset(format!("{label}: state has wrong shape")));
                }
                if t.action >= source.n_storage {
                    return Err(Error::Dataset(format!(
                        "{label}: action {} out of range",
                        t.action
                    )));
                }
            }
        }
        let counts = DatasetCounts::of(&trajectories, source.n_agents);
        Ok(Self {
            manifest: DatasetManifest {
                format_version: FORMAT_VERSION,
                source,
                counts,
                mix: None,
            },
            trajectories,
        })
    }

    pub fn source(&self) -> &DatasetSource {
        &self.manifest.source
    }

    pub fn n_transitions(&self) -> u64 {
        self.manifest.counts.n_transitions
    }

    pub fn trajectories_of(&self, agent: usize) -> impl Iterator<Item = &EpisodeTrajectory> {
        self.trajectories
            .iter()
            .filter(move |t| t.key().map(|k| k.1) == Some(agent))
    }
}

/// Manifest location for a data file.
pub fn manifest_path(data_path: &Path) -> PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn header_line(source: &DatasetSource) -> String {
    format!(
        "# episode agent step tick action reward done rtg heading[{}] junction[{}] inventory[{}]",
        source.n_storage, source.n_junctions, source.n_storage
    )
}

/// Writes the data file at `path` and the manifest next to it.
pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    if !dataset.trajectories.is_empty() {
        writeln!(out, "{}", header_line(dataset.source())).map_err(io)?;
    }
    let mut line = String::new();
    for tr in &dataset.trajectories {
        for (t, rtg) in tr.transitions.iter().zip(&tr.returns_to_go) {
            line.clear();
            let _ = write!(
                line,
                "{} {} {} {} {} {} {} {}",
                t.episode_id,
                t.agent_id,
                t.step_index,
                t.tick,
                t.action,
                t.reward,
                u8::from(t.done),
                rtg
            );
            for v in t.state.to_vec() {
                let _ = write!(line, " {v}");
            }
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)?;

    let mpath = manifest_path(path);
    let json = serde_json::to_string_pretty(&dataset.manifest).expect("manifest serializes");
    std::fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))
}

pub fn read_manifest(data_path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let mpath = manifest_path(data_path.as_ref());
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: mpath.clone(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "{}: unsupported format version {}",
            mpath.display(),
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Reads and fully verifies a dataset; any inconsistency is an error and
/// nothing is returned.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = read_manifest(path)?;
    let source = &manifest.source;
    let n_fields = FIXED_FIELDS + source.state_dim();
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut trajectories: Vec<EpisodeTrajectory> = Vec::new();
    let mut current: Vec<Transition> = Vec::new();
    let mut stored_rtg: Vec<(u64, usize)> = Vec::new();
    let mut seen = HashSet::new();
    let mut values: Vec<u64> = Vec::with_capacity(n_fields);
    let mut line_no = 0;

    let mut close = |steps: &mut Vec<Transition>, rtg: &mut Vec<(u64, usize)>| -> Result<()> {
        let tr = EpisodeTrajectory::new(std::mem::take(steps));
        for (i, &(stored, line)) in rtg.iter().enumerate() {
            if tr.returns_to_go[i] != stored {
                return Err(parse_err(
                    line,
                    format!(
                        "stored rtg {stored} but rewards sum to {}",
                        tr.returns_to_go[i]
                    ),
                ));
            }
        }
        rtg.clear();
        trajectories.push(tr);
        Ok(())
    };

    for line in reader.lines() {
        line_no += 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        values.clear();
        for field in text.split_ascii_whitespace() {
            let v = field.parse::<u64>().map_err(|_| {
                parse_err(line_no, format!("`{field}` is not a non-negative integer"))
            })?;
            values.push(v);
        }
        if values.len() != n_fields {
            return Err(parse_err(
                line_no,
                format!("expected {n_fields} fields, found {}", values.len()),
            ));
        }
        let [episode_id, agent, step_index, tick, action, reward, done, rtg] =
            values[..FIXED_FIELDS].try_into().expect("fixed width");
        let agent = agent as usize;
        let action = action as usize;
        if agent >= source.n_agents {
            return Err(parse_err(line_no, format!("agent {agent} out of range")));
        }
        if action >= source.n_storage {
            return Err(parse_err(line_no, format!("action {action} out of range")));
        }
        let done = match done {
            0 => false,
            1 => true,
            d => return Err(parse_err(line_no, format!("done flag {d} is not 0 or 1"))),
        };
        let state_values: Vec<u32> = values[FIXED_FIELDS..]
            .iter()
            .map(|&v| {
                u32::try_from(v)
                    .map_err(|_| parse_err(line_no, format!("state value {v} too large")))
            })
            .collect::<Result<_>>()?;
        let state = Observation::from_slice(&state_values, source.n_storage, source.n_junctions)
            .expect("length checked");

        if current.is_empty() {
            if !seen.insert((episode_id, agent)) {
                return Err(parse_err(
                    line_no,
                    format!("trajectory (episode {episode_id}, agent {agent}) appears twice"),
                ));
            }
        } else {
            let head = &current[0];
            if (head.episode_id, head.agent_id) != (episode_id, agent) {
                return Err(parse_err(
                    line_no,
                    "previous trajectory ended without done".into(),
                ));
            }
        }
        if step_index != current.len() as u64 {
            return Err(parse_err(
                line_no,
                format!("expected step {}, found {step_index}", current.len()),
            ));
        }
        current.push(Transition {
            episode_id,
            agent_id: agent,
            step_index,
            tick,
            state,
            action,
            reward,
            done,
        });
        stored_rtg.push((rtg, line_no));
        if done {
            close(&mut current, &mut stored_rtg)?;
        }
    }
    if !current.is_empty() {
        return Err(parse_err(
            line_no,
            "file ends inside a trajectory (truncated?)".into(),
        ));
    }
    let counts = DatasetCounts::of(&trajectories, source.n_agents);
    if counts != manifest.counts {
        return Err(Error::Dataset(format!(
            "{}: contents ({} trajectories, {} transitions) do not match the manifest ({}, {})",
            path.display(),
            counts.n_trajectories,
            counts.n_transitions,
            manifest.counts.n_trajectories,
            manifest.counts.n_transitions
        )));
    }
    Ok(Dataset {
        manifest,
        trajectories,
    })
}

/// Samples `per_source` trajectories per agent from every source, without
/// replacement, and renumbers episodes per agent in sampling order.
pub fn mix_datasets(sources: &[&Dataset], per_source: usize, seed: u64) -> Result<Dataset> {
    let Some(first) = sources.first() else {
        return Err(Error::Dataset("no sources to mix".into()));
    };
    let shape = |d: &Dataset| {
        (
            d.source().n_agents,
            d.source().n_storage,
            d.source().n_junctions,
        )
    };
    if sources.iter().any(|d| shape(d) != shape(first)) {
        return Err(Error::Dataset("sources have different layouts".into()));
    }
    let n_agents = first.source().n_agents;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut per_agent: Vec<Vec<(TrajectoryOrigin, EpisodeTrajectory)>> = vec![Vec::new(); n_agents];
    for (agent, picked) in per_agent.iter_mut().enumerate() {
        for (k, src) in sources.iter().enumerate() {
            let pool: Vec<&EpisodeTrajectory> = src.trajectories_of(agent).collect();
            if pool.len() < per_source {
                return Err(Error::Dataset(format!(
                    "source {k} ({}) has {} trajectories for agent {agent}, {per_source} requested",
                    src.source().policy,
                    pool.len()
                )));
            }
            let mut idx = sample(&mut rng, pool.len(), per_source).into_vec();
            idx.sort_unstable();
            for i in idx {
                let episode = picked.len() as u64;
                let mut tr = pool[i].clone();
                let source_episode = tr.transitions[0].episode_id;
                for t in &mut tr.transitions {
                    t.episode_id = episode;
                }
                let origin = TrajectoryOrigin {
                    agent,
                    episode,
                    source: k,
                    source_episode,
                };
                picked.push((origin, tr));
            }
        }
    }

    let n_episodes = (per_source * sources.len()) as u64;
    let mut origins = Vec::new();
    let mut trajectories = Vec::new();
    let mut columns: Vec<_> = per_agent.into_iter().map(|v| v.into_iter()).collect();
    for _ in 0..n_episodes {
        for col in columns.iter_mut() {
            let (origin, tr) = col.next().expect("every agent has n_episodes trajectories");
            origins.push(origin);
            trajectories.push(tr);
        }
    }

    let hashes: Vec<&str> = sources
        .iter()
        .map(|d| d.source().config_hash.as_str())
        .collect();
    let config_hash = if hashes.iter().all(|h| *h == hashes[0]) {
        hashes[0].to_string()
    } else {
        format!("mixed:{}", hashes.join("+"))
    };
    let source = DatasetSource {
        policy: sources
            .iter()
            .map(|d| d.source().policy.as_str())
            .collect::<Vec<_>>()
            .join("+"),
        n_episodes,
        seed,
        config_hash,
        ..first.source().clone()
    };
    let mut mixed = Dataset::new(source, trajectories)?;
    mixed.manifest.mix = Some(MixProvenance {
        sources: sources.iter().map(|d| d.source().clone()).collect(),
        trajectories_per_source: per_source,
        seed,
        origins,
    });
    Ok(mixed)
}

/// Summary of a dataset's contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_trajectories: u64,
    pub n_transitions: u64,
    /// Transitions per trajectory.
    pub event_counts: FiveNumber,
    pub per_agent_event_counts: Vec<Option<FiveNumber>>,
    /// Per-trajectory total return.
    pub returns: FiveNumber,
    pub action_histogram: Vec<u64>,
}

pub fn dataset_stats(dataset: &Dataset) -> Result<DatasetStats> {
    let trs = &dataset.trajectories;
    let empty = || Error::Dataset("dataset has no trajectories".into());
    let event_counts =
        FiveNumber::from_counts(trs.iter().map(|t| t.len() as u64)).ok_or_else(empty)?;
    let returns = FiveNumber::from_counts(trs.iter().map(|t| t.total_return)).ok_or_else(empty)?;
    let mut action_histogram = vec![0; dataset.source().n_storage];
    for t in trs.iter().flat_map(|t| &t.transitions) {
        action_histogram[t.action] += 1;
    }
    Ok(DatasetStats {
        n_trajectories: dataset.manifest.counts.n_trajectories,
        n_transitions: dataset.manifest.counts.n_transitions,
        event_counts,
        per_agent_event_counts: dataset.manifest.counts.per_agent_event_counts.clone(),
        returns,
        action_histogram,
    })
}
