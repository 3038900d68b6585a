//! Simulation and heuristic configuration, loaded from a TOML file.
//!
//! ```toml
//! [sim]
//! n_loops = 3
//! horizon = 3600.0
//! demand_rate_per_outgoing = 0.11
//!
//! [heuristics]
//! c1 = 6
//! hop_cost = 0.5
//! ```
//!
//! Every field is optional; missing fields take the defaults below. All
//! durations are in seconds and must be integer multiples of `tick`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Layout and timing parameters of the conveyor system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_loops: usize,
    pub n_incoming: usize,
    pub n_storage: usize,
    pub n_outgoing: usize,
    pub n_junctions: usize,
    pub t_proc_incoming: f64,
    pub t_proc_storage: f64,
    pub t_proc_outgoing: f64,
    pub t_proc_junction: f64,
    pub buf_incoming: usize,
    pub buf_storage: usize,
    pub buf_outgoing: usize,
    /// Queue capacity of each junction transfer unit.
    pub buf_junction: usize,
    pub n_pallets: usize,
    pub tick: f64,
    pub horizon: f64,
    pub slots_per_loop: usize,
    pub slot_travel_time: f64,
    pub demand_rate_per_outgoing: f64,
    pub initial_inventory_per_storage: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_loops: 3,
            n_incoming: 4,
            n_storage: 20,
            n_outgoing: 6,
            n_junctions: 4,
            t_proc_incoming: 5.0,
            t_proc_storage: 10.0,
            t_proc_outgoing: 6.0,
            t_proc_junction: 0.5,
            buf_incoming: 4,
            buf_storage: 8,
            buf_outgoing: 10,
            buf_junction: 4,
            n_pallets: 500,
            tick: 0.1,
            horizon: 3600.0,
            slots_per_loop: 175,
            slot_travel_time: 0.2,
            demand_rate_per_outgoing: 0.11,
            initial_inventory_per_storage: 100,
        }
    }
}

/// Durations of a [`SimConfig`] converted to whole ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TickTimes {
    pub proc_incoming: u32,
    pub proc_storage: u32,
    pub proc_outgoing: u32,
    pub proc_junction: u32,
    pub horizon: u64,
    pub slot_travel: u32,
}

fn ticks_of(field: &str, seconds: f64, tick: f64) -> Result<u64> {
    if !seconds.is_finite() || seconds < 0.0 {
        return Err(Error::config(
            field,
            "must be a finite non-negative duration",
        ));
    }
    let n = (seconds / tick).round();
    if (n * tick - seconds).abs() > 1e-6 * tick.max(1.0) {
        return Err(Error::config(
            field,
            format!("{seconds} s is not an integer multiple of tick {tick} s"),
        ));
    }
    Ok(n as u64)
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_loops", self.n_loops),
            ("n_incoming", self.n_incoming),
            ("n_storage", self.n_storage),
            ("n_outgoing", self.n_outgoing),
            ("buf_incoming", self.buf_incoming),
            ("buf_storage", self.buf_storage),
            ("buf_outgoing", self.buf_outgoing),
            ("buf_junction", self.buf_junction),
            ("n_pallets", self.n_pallets),
            ("slots_per_loop", self.slots_per_loop),
        ];
        for (field, v) in counts {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.tick.is_finite() && self.tick > 0.0) {
            return Err(Error::config("tick", "must be positive"));
        }
        if !(self.demand_rate_per_outgoing.is_finite() && self.demand_rate_per_outgoing >= 0.0) {
            return Err(Error::config(
                "demand_rate_per_outgoing",
                "must be a finite non-negative rate",
            ));
        }
        let t = self.tick_times()?;
        for (field, v) in [
            ("t_proc_incoming", t.proc_incoming),
            ("t_proc_storage", t.proc_storage),
            ("t_proc_outgoing", t.proc_outgoing),
            ("t_proc_junction", t.proc_junction),
            ("slot_travel_time", t.slot_travel),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least one tick"));
            }
        }
        let expected_junctions = 2 * (self.n_loops - 1);
        if self.n_junctions != expected_junctions {
            return Err(Error::config(
                "n_junctions",
                format!(
                    "a chain of {} loop(s) uses exactly {} junction(s), got {}",
                    self.n_loops, expected_junctions, self.n_junctions
                ),
            ));
        }
        if self.n_loops > self.n_storage {
            return Err(Error::config(
                "n_storage",
                "every loop needs a storage point",
            ));
        }
        if self.n_loops > self.n_incoming {
            return Err(Error::config(
                "n_incoming",
                "every loop needs an incoming point",
            ));
        }
        let per_loop_points =
            (self.n_incoming + self.n_storage + self.n_outgoing).div_ceil(self.n_loops) + 2 * 2;
        if per_loop_points > self.slots_per_loop {
            return Err(Error::config(
                "slots_per_loop",
                "too few slots to place every point on its loop",
            ));
        }
        if self.n_pallets > self.n_loops * self.slots_per_loop {
            return Err(Error::config(
                "n_pallets",
                format!(
                    "{} pallets do not fit on {} conveyor slots",
                    self.n_pallets,
                    self.n_loops * self.slots_per_loop
                ),
            ));
        }
        Ok(())
    }

    pub fn tick_times(&self) -> Result<TickTimes> {
        let narrow = |field: &str, v: u64| -> Result<u32> {
            u32::try_from(v).map_err(|_| Error::config(field, "duration too long"))
        };
        Ok(TickTimes {
            proc_incoming: narrow(
                "t_proc_incoming",
                ticks_of("t_proc_incoming", self.t_proc_incoming, self.tick)?,
            )?,
            proc_storage: narrow(
                "t_proc_storage",
                ticks_of("t_proc_storage", self.t_proc_storage, self.tick)?,
            )?,
            proc_outgoing: narrow(
                "t_proc_outgoing",
                ticks_of("t_proc_outgoing", self.t_proc_outgoing, self.tick)?,
            )?,
            proc_junction: narrow(
                "t_proc_junction",
                ticks_of("t_proc_junction", self.t_proc_junction, self.tick)?,
            )?,
            horizon: ticks_of("horizon", self.horizon, self.tick)?,
            slot_travel: narrow(
                "slot_travel_time",
                ticks_of("slot_travel_time", self.slot_travel_time, self.tick)?,
            )?,
        })
    }
}

/// Thresholds and loop distance costs used by the Medium/High heuristics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeuristicParams {
    pub c1: u32,
    pub c2: u32,
    pub c3: u32,
    /// Distance cost per junction hop between two loops.
    pub hop_cost: f64,
    /// Explicit `loop_cost[from][to]` matrix; overrides `hop_cost` when set.
    pub loop_cost: Option<Vec<Vec<f64>>>,
}

impl Default for HeuristicParams {
    fn default() -> Self {
        Self {
            c1: 6,
            c2: 12,
            c3: 6,
            hop_cost: 0.5,
            loop_cost: None,
        }
    }
}

impl HeuristicParams {
    /// Distance cost of sending a pallet from `from` loop to `to` loop.
    pub fn loop_cost(&self, from: usize, to: usize) -> f64 {
        match &self.loop_cost {
            Some(m) => m[from][to],
            None => self.hop_cost * from.abs_diff(to) as f64,
        }
    }

    pub fn validate(&self, n_loops: usize) -> Result<()> {
        for (field, v) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3)] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.hop_cost.is_finite() && self.hop_cost >= 0.0) {
            return Err(Error::config("hop_cost", "must be finite and non-negative"));
        }
        if let Some(m) = &self.loop_cost {
            if m.len() != n_loops || m.iter().any(|row| row.len() != n_loops) {
                return Err(Error::config(
                    "loop_cost",
                    format!("must be a {n_loops}x{n_loops} matrix"),
                ));
            }
            for (i, row) in m.iter().enumerate() {
                if row[i] != 0.0 {
                    return Err(Error::config("loop_cost", "diagonal entries must be 0"));
                }
                if row.iter().any(|c| !c.is_finite() || *c < 0.0) {
                    return Err(Error::config(
                        "loop_cost",
                        "entries must be finite and >= 0",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Contents of a configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub heuristics: HeuristicParams,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config("<file>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.heuristics.validate(self.sim.n_loops)
    }

    /// Short provenance hash over every configuration field.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_system_table() {
        let c = SimConfig::default();
        assert_eq!(
            (
                c.n_loops,
                c.n_incoming,
                c.n_storage,
                c.n_outgoing,
                c.n_junctions
            ),
            (3, 4, 20, 6, 4)
        );
        assert_eq!((c.buf_incoming, c.buf_storage, c.buf_outgoing), (4, 8, 10));
        assert_eq!(c.n_pallets, 500);
        let t = c.tick_times().unwrap();
        assert_eq!(
            (
                t.proc_incoming,
                t.proc_storage,
                t.proc_outgoing,
                t.proc_junction
            ),
            (50, 100, 60, 5)
        );
        assert_eq!(t.horizon, 36_000);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_non_multiple_of_tick() {
        let c = SimConfig {
            t_proc_junction: 0.55,
            ..Default::default()
        };
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "t_proc_junction"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_zero_counts_by_name() {
        let c = SimConfig {
            buf_storage: 0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config { field, .. }) if field == "buf_storage"));
    }

    #[test]
    fn toml_round_trip_and_hash_stability() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash(), back.hash());
        let mut other = cfg.clone();
        other.heuristics.c1 = 7;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[sim]\nhorizon = 60.0\n").unwrap();
        assert_eq!(cfg.sim.horizon, 60.0);
        assert_eq!(cfg.sim.n_storage, 20);
        assert!(ExperimentConfig::from_toml_str("[sim]\nbogus = 1\n").is_err());
    }

    #[test]
    fn hop_cost_defaults_are_symmetric() {
        let p = HeuristicParams::default();
        assert_eq!(p.loop_cost(0, 0), 0.0);
        assert_eq!(p.loop_cost(0, 2), p.loop_cost(2, 0));
        assert_eq!(p.loop_cost(0, 1), 0.5);
    }
}
