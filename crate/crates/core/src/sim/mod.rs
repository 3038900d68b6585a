//! Tick-driven simulation of the multi-loop conveyor.
//!
//! Each loop is a ring of slots holding at most one pallet; the ring
//! advances one slot every `slot_travel_time`. Points sit at fixed slots
//! and exchange pallets with whatever slot is under them when the ring
//! moves: first a passing pallet may be taken into the point's buffer,
//! then a finished pallet may be merged onto the (now) empty slot.
//!
//! The simulation pauses whenever an incoming point finishes loading a
//! good and returns a [`DispatchEvent`]; the caller answers it with
//! [`SimulationState::apply_dispatch`] before advancing again.

mod topology;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::config::{SimConfig, TickTimes};
use crate::error::{Error, Result};
use crate::policies::{route_junction, JunctionDirection};

pub use topology::{build_topology, JunctionLink, PointId, Port, PortKind, Topology};

pub type PalletId = usize;

/// What a pallet carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Payload {
    Empty,
    /// A good headed for storage point `dest`.
    Inbound(usize),
    /// A retrieved good headed for outgoing point `dest`.
    Outbound(usize),
}

/// Where a pallet currently is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Position {
    OnSlot {
        loop_id: usize,
        slot: usize,
    },
    InBuffer {
        point: PointId,
        queue_pos: usize,
    },
    /// At a point's server; `remaining` is 0 once service is done and the
    /// pallet is waiting for a dispatch decision or a free slot.
    Processing {
        point: PointId,
        remaining: f64,
    },
}

/// Snapshot of the sensor state seen by dispatching policies.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Observation {
    /// Pallets carrying a good assigned to each storage point, not yet received.
    pub heading_to_storage: Vec<u32>,
    /// Pallets held at each junction on their way to its downstream loop.
    pub junction_downstream: Vec<u32>,
    /// Goods stored at each storage point.
    pub inventory: Vec<u32>,
}

impl Observation {
    pub fn len(&self) -> usize {
        self.heading_to_storage.len() + self.junction_downstream.len() + self.inventory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat vector: heading counts, then junction queues, then inventory.
    pub fn to_vec(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.heading_to_storage);
        v.extend_from_slice(&self.junction_downstream);
        v.extend_from_slice(&self.inventory);
        v
    }

    pub fn from_slice(values: &[u32], n_storage: usize, n_junctions: usize) -> Option<Self> {
        if values.len() != 2 * n_storage + n_junctions {
            return None;
        }
        Some(Self {
            heading_to_storage: values[..n_storage].to_vec(),
            junction_downstream: values[n_storage..n_storage + n_junctions].to_vec(),
            inventory: values[n_storage + n_junctions..].to_vec(),
        })
    }
}

/// A dispatch decision request from an incoming point.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchEvent {
    pub seq: u64,
    pub tick: u64,
    pub time: f64,
    pub incoming_id: usize,
    pub observation: Observation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Advance {
    Event(DispatchEvent),
    EpisodeEnd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThroughputCounter {
    pub storage_receipts: u64,
    pub outgoing_deliveries: u64,
    pub total: u64,
}

/// Inputs to the dispatching heuristics for one incoming point.
#[derive(Debug, Clone, PartialEq)]
pub struct HeuristicContext {
    pub incoming_id: usize,
    pub origin_loop: usize,
    /// In(s): pallets assigned to storage `s` and not yet received.
    pub in_count: Vec<u32>,
    /// Out(s): outstanding retrieval requests at storage `s`.
    pub out_count: Vec<u32>,
    pub x_same: u32,
    pub x_other: u32,
    pub per_loop_assigned: Vec<u32>,
    pub loop_of_storage: Vec<usize>,
    pub same_loop_set: Vec<usize>,
    pub other_loop_set: Vec<usize>,
}

impl HeuristicContext {
    /// Builds a context from raw per-storage counts.
    pub fn from_counts(
        incoming_id: usize,
        origin_loop: usize,
        in_count: Vec<u32>,
        out_count: Vec<u32>,
        loop_of_storage: Vec<usize>,
        n_loops: usize,
    ) -> Self {
        assert_eq!(in_count.len(), loop_of_storage.len());
        assert_eq!(out_count.len(), loop_of_storage.len());
        let mut per_loop_assigned = vec![0; n_loops];
        let mut same_loop_set = Vec::new();
        let mut other_loop_set = Vec::new();
        for (s, &l) in loop_of_storage.iter().enumerate() {
            per_loop_assigned[l] += in_count[s];
            if l == origin_loop {
                same_loop_set.push(s);
            } else {
                other_loop_set.push(s);
            }
        }
        let x_same = same_loop_set.iter().map(|&s| in_count[s]).sum();
        let x_other = other_loop_set.iter().map(|&s| in_count[s]).sum();
        Self {
            incoming_id,
            origin_loop,
            in_count,
            out_count,
            x_same,
            x_other,
            per_loop_assigned,
            loop_of_storage,
            same_loop_set,
            other_loop_set,
        }
    }

    pub fn n_storage(&self) -> usize {
        self.in_count.len()
    }

    pub fn n_loops(&self) -> usize {
        self.per_loop_assigned.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Server {
    Idle,
    Busy {
        pallet: PalletId,
        remaining: u32,
    },
    /// Incoming point finished loading; waiting for a destination.
    AwaitingDispatch {
        pallet: PalletId,
    },
    /// Service done; waiting for an empty slot to merge onto.
    Ready {
        pallet: PalletId,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Station {
    queue: VecDeque<PalletId>,
    capacity: usize,
    proc_ticks: u32,
    server: Server,
}

impl Station {
    fn new(capacity: usize, proc_ticks: u32) -> Self {
        Self {
            queue: VecDeque::with_capacity(capacity),
            capacity,
            proc_ticks,
            server: Server::Idle,
        }
    }

    fn has_room(&self) -> bool {
        self.queue.len() < self.capacity
    }

    fn held(&self) -> usize {
        self.queue.len() + usize::from(self.server != Server::Idle)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct StoragePoint {
    station: Station,
    inventory: u32,
    /// Unclaimed retrieval requests, by destination outgoing point.
    requests: VecDeque<usize>,
    /// Destinations of empty pallets already claimed for retrieval, in service order.
    claimed: VecDeque<usize>,
}

impl StoragePoint {
    fn outstanding(&self) -> u32 {
        (self.requests.len() + self.claimed.len()) as u32
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Ring {
    cells: Vec<Option<PalletId>>,
    moves: usize,
    occupied: usize,
}

impl Ring {
    fn cell_at(&self, slot: usize) -> usize {
        let n = self.cells.len();
        (slot + n - self.moves % n) % n
    }
}

/// Full mutable state of one simulated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    config: SimConfig,
    times: TickTimes,
    topology: Topology,
    rng: ChaCha8Rng,
    demand: Option<Poisson<f64>>,
    now: u64,
    payloads: Vec<Payload>,
    rings: Vec<Ring>,
    incoming: Vec<Station>,
    storage: Vec<StoragePoint>,
    outgoing: Vec<Station>,
    junctions: Vec<Station>,
    heading: Vec<u32>,
    unassigned: Vec<u32>,
    requests_generated: Vec<u64>,
    event_counts: Vec<u64>,
    counter: ThroughputCounter,
    pending_events: VecDeque<usize>,
    outstanding: Option<u64>,
    next_seq: u64,
    ended: bool,
}

impl SimulationState {
    /// Fresh episode: every pallet empty, spread round-robin over the loops
    /// and evenly along each ring.
    pub fn reset(config: &SimConfig, seed: u64) -> Result<Self> {
        let topology = build_topology(config)?;
        Self::with_topology(config, topology, ChaCha8Rng::seed_from_u64(seed))
    }

    /// Like [`reset`](Self::reset) but with a caller-provided RNG stream.
    pub fn with_rng(config: &SimConfig, rng: ChaCha8Rng) -> Result<Self> {
        let topology = build_topology(config)?;
        Self::with_topology(config, topology, rng)
    }

    fn with_topology(config: &SimConfig, topology: Topology, rng: ChaCha8Rng) -> Result<Self> {
        let times = config.tick_times()?;
        let n_loops = config.n_loops;
        let slots = config.slots_per_loop;

        let mut rings: Vec<Ring> = (0..n_loops)
            .map(|_| Ring {
                cells: vec![None; slots],
                moves: 0,
                occupied: 0,
            })
            .collect();
        for (l, ring) in rings.iter_mut().enumerate() {
            let members: Vec<PalletId> = (l..config.n_pallets).step_by(n_loops).collect();
            let count = members.len();
            for (k, p) in members.into_iter().enumerate() {
                ring.cells[k * slots / count] = Some(p);
            }
            ring.occupied = count;
        }

        let lambda = config.demand_rate_per_outgoing * config.tick;
        let demand = (lambda > 0.0).then(|| Poisson::new(lambda).expect("positive finite rate"));

        Ok(Self {
            times,
            rng,
            demand,
            now: 0,
            payloads: vec![Payload::Empty; config.n_pallets],
            rings,
            incoming: (0..config.n_incoming)
                .map(|_| Station::new(config.buf_incoming, times.proc_incoming))
                .collect(),
            storage: (0..config.n_storage)
                .map(|_| StoragePoint {
                    station: Station::new(config.buf_storage, times.proc_storage),
                    inventory: config.initial_inventory_per_storage,
                    requests: VecDeque::new(),
                    claimed: VecDeque::new(),
                })
                .collect(),
            outgoing: (0..config.n_outgoing)
                .map(|_| Station::new(config.buf_outgoing, times.proc_outgoing))
                .collect(),
            junctions: (0..config.n_junctions)
                .map(|_| Station::new(config.buf_junction, times.proc_junction))
                .collect(),
            heading: vec![0; config.n_storage],
            unassigned: vec![0; config.n_outgoing],
            requests_generated: vec![0; config.n_outgoing],
            event_counts: vec![0; config.n_incoming],
            counter: ThroughputCounter::default(),
            pending_events: VecDeque::new(),
            outstanding: None,
            next_seq: 0,
            ended: false,
            topology,
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn now_ticks(&self) -> u64 {
        self.now
    }

    pub fn now_seconds(&self) -> f64 {
        self.now as f64 * self.config.tick
    }

    pub fn horizon_ticks(&self) -> u64 {
        self.times.horizon
    }

    pub fn is_ended(&self) -> bool {
        self.ended
    }

    pub fn throughput(&self) -> ThroughputCounter {
        self.counter
    }

    pub fn payload(&self, pallet: PalletId) -> Payload {
        self.payloads[pallet]
    }

    /// Pallets currently on the ring slots of loop `l`.
    pub fn loop_pallet_count(&self, l: usize) -> usize {
        self.rings[l].occupied
    }

    /// Dispatch events issued so far, per incoming point.
    pub fn event_counts(&self) -> &[u64] {
        &self.event_counts
    }

    /// Retrieval requests generated so far, per outgoing point.
    pub fn requests_generated(&self) -> &[u64] {
        &self.requests_generated
    }

    /// Number of pallets ever carrying an outbound good at this instant.
    pub fn outbound_pallets(&self) -> usize {
        self.payloads
            .iter()
            .filter(|p| matches!(p, Payload::Outbound(_)))
            .count()
    }

    /// Runs ticks until a dispatch decision is needed or the horizon elapses.
    pub fn advance_to_next_event(&mut self) -> Result<Advance> {
        self.advance_inspecting(|_| {})
    }

    /// Same as [`advance_to_next_event`](Self::advance_to_next_event), calling
    /// `inspect` after every simulated tick.
    pub fn advance_inspecting(&mut self, mut inspect: impl FnMut(&Self)) -> Result<Advance> {
        if self.ended {
            return Err(Error::Usage("episode already ended".into()));
        }
        if self.outstanding.is_some() {
            return Err(Error::Usage(
                "previous dispatch event has not been answered".into(),
            ));
        }
        loop {
            if let Some(incoming_id) = self.pending_events.pop_front() {
                let seq = self.next_seq;
                self.next_seq += 1;
                self.outstanding = Some(seq);
                self.event_counts[incoming_id] += 1;
                return Ok(Advance::Event(DispatchEvent {
                    seq,
                    tick: self.now,
                    time: self.now_seconds(),
                    incoming_id,
                    observation: self.snapshot(),
                }));
            }
            if self.now >= self.times.horizon {
                self.ended = true;
                return Ok(Advance::EpisodeEnd);
            }
            self.step();
            inspect(self);
        }
    }

    /// Assigns the pallet loaded at `event`'s incoming point to `storage_id`.
    pub fn apply_dispatch(&mut self, event: &DispatchEvent, storage_id: usize) -> Result<()> {
        if self.outstanding != Some(event.seq) {
            return Err(Error::Usage(format!(
                "event {} is not the outstanding dispatch request",
                event.seq
            )));
        }
        let n_storage = self.storage.len();
        if storage_id >= n_storage {
            return Err(Error::Action {
                storage: storage_id,
                n_storage,
            });
        }
        let station = &mut self.incoming[event.incoming_id];
        let Server::AwaitingDispatch { pallet } = station.server else {
            unreachable!("outstanding event without a loaded pallet");
        };
        station.server = Server::Ready { pallet };
        self.payloads[pallet] = Payload::Inbound(storage_id);
        self.heading[storage_id] += 1;
        self.outstanding = None;
        Ok(())
    }

    pub fn observe(&self, incoming_id: usize) -> Result<Observation> {
        self.check_incoming(incoming_id)?;
        Ok(self.snapshot())
    }

    fn snapshot(&self) -> Observation {
        Observation {
            heading_to_storage: self.heading.clone(),
            junction_downstream: self.junctions.iter().map(|j| j.held() as u32).collect(),
            inventory: self.storage.iter().map(|s| s.inventory).collect(),
        }
    }

    fn check_incoming(&self, incoming_id: usize) -> Result<()> {
        if incoming_id >= self.incoming.len() {
            return Err(Error::Usage(format!(
                "incoming point {incoming_id} out of range (0..{})",
                self.incoming.len()
            )));
        }
        Ok(())
    }

    pub fn heuristic_context(&self, incoming_id: usize) -> Result<HeuristicContext> {
        self.check_incoming(incoming_id)?;
        Ok(HeuristicContext::from_counts(
            incoming_id,
            self.topology.loop_of_incoming[incoming_id],
            self.heading.clone(),
            self.storage.iter().map(StoragePoint::outstanding).collect(),
            self.topology.loop_of_storage.clone(),
            self.topology.n_loops,
        ))
    }

    /// Every pallet's position, indexed by pallet id. Panics if a pallet is
    /// missing or held twice.
    pub fn pallet_positions(&self) -> Vec<Position> {
        let mut pos: Vec<Option<Position>> = vec![None; self.payloads.len()];
        let mut put = |p: PalletId, at: Position| {
            assert!(pos[p].is_none(), "pallet {p} held twice");
            pos[p] = Some(at);
        };
        for (l, ring) in self.rings.iter().enumerate() {
            let n = ring.cells.len();
            for (c, cell) in ring.cells.iter().enumerate() {
                if let Some(p) = cell {
                    put(
                        *p,
                        Position::OnSlot {
                            loop_id: l,
                            slot: (c + ring.moves) % n,
                        },
                    );
                }
            }
        }
        let tick = self.config.tick;
        let stations = self
            .incoming
            .iter()
            .enumerate()
            .map(|(i, s)| (PointId::Incoming(i), s))
            .chain(
                self.storage
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (PointId::Storage(i), &s.station)),
            )
            .chain(
                self.outgoing
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (PointId::Outgoing(i), s)),
            )
            .chain(
                self.junctions
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (PointId::Junction(i), s)),
            );
        for (point, st) in stations {
            for (queue_pos, &p) in st.queue.iter().enumerate() {
                put(p, Position::InBuffer { point, queue_pos });
            }
            match st.server {
                Server::Idle => {}
                Server::Busy { pallet, remaining } => put(
                    pallet,
                    Position::Processing {
                        point,
                        remaining: remaining as f64 * tick,
                    },
                ),
                Server::AwaitingDispatch { pallet } | Server::Ready { pallet } => put(
                    pallet,
                    Position::Processing {
                        point,
                        remaining: 0.0,
                    },
                ),
            }
        }
        pos.into_iter()
            .enumerate()
            .map(|(p, at)| at.unwrap_or_else(|| panic!("pallet {p} lost")))
            .collect()
    }

    /// Longest buffer queue at each kind of point: (incoming, storage, outgoing, junction).
    pub fn max_queue_lengths(&self) -> (usize, usize, usize, usize) {
        let max =
            |it: &mut dyn Iterator<Item = &Station>| it.map(|s| s.queue.len()).max().unwrap_or(0);
        (
            max(&mut self.incoming.iter()),
            max(&mut self.storage.iter().map(|s| &s.station)),
            max(&mut self.outgoing.iter()),
            max(&mut self.junctions.iter()),
        )
    }

    /// Pallets with an inbound payload that have not been received yet.
    pub fn inbound_in_flight(&self) -> usize {
        self.payloads
            .iter()
            .filter(|p| matches!(p, Payload::Inbound(_)))
            .count()
    }

    /// One simulation tick.
    fn step(&mut self) {
        self.now += 1;
        self.generate_demand();
        self.advance_servers();
        if self.now.is_multiple_of(u64::from(self.times.slot_travel)) {
            self.move_conveyors();
        }
        self.start_idle_servers();
    }

    /// Poisson retrieval requests for one tick; each is bound to a storage
    /// point with unreserved inventory, or waits until one exists.
    fn generate_demand(&mut self) {
        if let Some(poisson) = &self.demand {
            for o in 0..self.unassigned.len() {
                let k = poisson.sample(&mut self.rng) as u32;
                self.unassigned[o] += k;
                self.requests_generated[o] += k as u64;
            }
        }
        for o in 0..self.unassigned.len() {
            while self.unassigned[o] > 0 {
                let candidates: Vec<usize> = (0..self.storage.len())
                    .filter(|&s| self.storage[s].inventory > self.storage[s].outstanding())
                    .collect();
                if candidates.is_empty() {
                    return;
                }
                let s = candidates[self.rng.random_range(0..candidates.len())];
                self.storage[s].requests.push_back(o);
                self.unassigned[o] -= 1;
            }
        }
    }

    fn advance_servers(&mut self) {
        for i in 0..self.incoming.len() {
            if let Server::Busy { pallet, remaining } = &mut self.incoming[i].server {
                *remaining -= 1;
                if *remaining == 0 {
                    let pallet = *pallet;
                    self.incoming[i].server = Server::AwaitingDispatch { pallet };
                    self.pending_events.push_back(i);
                }
            }
        }
        for s in 0..self.storage.len() {
            let point = &mut self.storage[s];
            if let Server::Busy { pallet, remaining } = &mut point.station.server {
                *remaining -= 1;
                if *remaining == 0 {
                    let pallet = *pallet;
                    match self.payloads[pallet] {
                        Payload::Inbound(_) => {
                            point.inventory += 1;
                            self.heading[s] -= 1;
                            self.counter.storage_receipts += 1;
                            self.counter.total += 1;
                            self.payloads[pallet] = Payload::Empty;
                        }
                        Payload::Empty => {
                            let dest = point.claimed.pop_front().expect("claimed retrieval");
                            point.inventory -= 1;
                            self.payloads[pallet] = Payload::Outbound(dest);
                        }
                        Payload::Outbound(_) => unreachable!("outbound pallet at storage"),
                    }
                    point.station.server = Server::Ready { pallet };
                }
            }
        }
        for o in 0..self.outgoing.len() {
            if let Server::Busy { pallet, remaining } = &mut self.outgoing[o].server {
                *remaining -= 1;
                if *remaining == 0 {
                    let pallet = *pallet;
                    self.payloads[pallet] = Payload::Empty;
                    self.counter.outgoing_deliveries += 1;
                    self.counter.total += 1;
                    self.outgoing[o].server = Server::Ready { pallet };
                }
            }
        }
        for j in &mut self.junctions {
            if let Server::Busy { pallet, remaining } = &mut j.server {
                *remaining -= 1;
                if *remaining == 0 {
                    j.server = Server::Ready { pallet: *pallet };
                }
            }
        }
    }

    fn move_conveyors(&mut self) {
        for l in 0..self.rings.len() {
            self.rings[l].moves += 1;
            for k in 0..self.topology.loops[l].len() {
                let port = self.topology.loops[l][k];
                self.exchange(l, port);
            }
        }
    }

    fn exchange(&mut self, l: usize, port: Port) {
        let cell = self.rings[l].cell_at(port.slot);
        if let Some(p) = self.rings[l].cells[cell] {
            if self.try_take(port.kind, p) {
                self.rings[l].cells[cell] = None;
                self.rings[l].occupied -= 1;
            }
        }
        if self.rings[l].cells[cell].is_none() {
            let station = match port.kind {
                PortKind::Incoming(i) => Some(&mut self.incoming[i]),
                PortKind::Storage(s) => Some(&mut self.storage[s].station),
                PortKind::Outgoing(o) => Some(&mut self.outgoing[o]),
                PortKind::JunctionEntry(j) => Some(&mut self.junctions[j]),
                PortKind::JunctionExit(_) => None,
            };
            if let Some(st) = station {
                if let Server::Ready { pallet } = st.server {
                    st.server = Server::Idle;
                    self.rings[l].cells[cell] = Some(pallet);
                    self.rings[l].occupied += 1;
                }
            }
        }
    }

    /// Whether the point at `kind` takes passing pallet `p` off the ring.
    fn try_take(&mut self, kind: PortKind, p: PalletId) -> bool {
        let payload = self.payloads[p];
        match kind {
            PortKind::Incoming(i) => {
                let st = &mut self.incoming[i];
                if payload == Payload::Empty && st.has_room() {
                    st.queue.push_back(p);
                    return true;
                }
            }
            PortKind::Storage(s) => {
                let point = &mut self.storage[s];
                if !point.station.has_room() {
                    return false;
                }
                match payload {
                    Payload::Inbound(d) if d == s => {
                        point.station.queue.push_back(p);
                        return true;
                    }
                    Payload::Empty => {
                        if let Some(dest) = point.requests.pop_front() {
                            point.claimed.push_back(dest);
                            point.station.queue.push_back(p);
                            return true;
                        }
                    }
                    _ => {}
                }
            }
            PortKind::Outgoing(o) => {
                let st = &mut self.outgoing[o];
                if payload == Payload::Outbound(o) && st.has_room() {
                    st.queue.push_back(p);
                    return true;
                }
            }
            PortKind::JunctionExit(j) => {
                if self.junctions[j].has_room()
                    && route_junction(self, j, payload) == JunctionDirection::Cross
                {
                    self.junctions[j].queue.push_back(p);
                    return true;
                }
            }
            PortKind::JunctionEntry(_) => {}
        }
        false
    }

    fn start_idle_servers(&mut self) {
        let stations = self
            .incoming
            .iter_mut()
            .chain(self.storage.iter_mut().map(|s| &mut s.station))
            .chain(self.outgoing.iter_mut())
            .chain(self.junctions.iter_mut());
        for st in stations {
            if st.server == Server::Idle {
                if let Some(pallet) = st.queue.pop_front() {
                    st.server = Server::Busy {
                        pallet,
                        remaining: st.proc_ticks,
                    };
                }
            }
        }
    }
}
