use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::error::{Error, Result};

/// A process point of the conveyor system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PointId {
    Incoming(usize),
    Storage(usize),
    Outgoing(usize),
    Junction(usize),
}

/// What happens at a fixed position of a loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PortKind {
    Incoming(usize),
    Storage(usize),
    Outgoing(usize),
    /// Pallets may leave this loop into junction `j`.
    JunctionExit(usize),
    /// Pallets from junction `j` merge onto this loop.
    JunctionEntry(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Port {
    pub slot: usize,
    pub kind: PortKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JunctionLink {
    pub id: usize,
    pub from_loop: usize,
    pub to_loop: usize,
    pub exit_slot: usize,
    pub entry_slot: usize,
}

/// Static layout of loops, points and junctions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub n_loops: usize,
    pub slots_per_loop: usize,
    /// Ports of each loop, sorted by slot in direction of travel.
    pub loops: Vec<Vec<Port>>,
    pub junction_links: Vec<JunctionLink>,
    pub loop_of_storage: Vec<usize>,
    pub loop_of_incoming: Vec<usize>,
    pub loop_of_outgoing: Vec<usize>,
    /// `next_hop[from][dest]`: junction to take from loop `from` toward loop `dest`.
    pub next_hop: Vec<Vec<Option<usize>>>,
}

/// Splits `n` items over `parts` groups, larger groups first.
fn split_counts(n: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|i| n / parts + usize::from(i < n % parts))
        .collect()
}

fn ids_by_loop(n: usize, parts: usize) -> Vec<Vec<usize>> {
    let mut next = 0;
    split_counts(n, parts)
        .into_iter()
        .map(|c| {
            let ids = (next..next + c).collect();
            next += c;
            ids
        })
        .collect()
}

/// Builds the deterministic layout for `config`.
///
/// Points are assigned to loops in contiguous id blocks (storage 7/7/6,
/// incoming 2/1/1, outgoing 2/2/2 by default). Loops form a chain joined
/// by one junction in each direction between neighbours.
pub fn build_topology(config: &SimConfig) -> Result<Topology> {
    config.validate()?;
    let n_loops = config.n_loops;
    let slots = config.slots_per_loop;

    let incoming = ids_by_loop(config.n_incoming, n_loops);
    let storage = ids_by_loop(config.n_storage, n_loops);
    let outgoing = ids_by_loop(config.n_outgoing, n_loops);

    let mut links: Vec<(usize, usize)> = Vec::new();
    for l in 0..n_loops.saturating_sub(1) {
        links.push((l, l + 1));
        links.push((l + 1, l));
    }
    if links.len() != config.n_junctions {
        return Err(Error::config(
            "n_junctions",
            "does not match the loop chain",
        ));
    }

    // Fractional placement along the loop, then spread evenly by rank.
    let mut loops = Vec::with_capacity(n_loops);
    let mut exit_slot = vec![0; links.len()];
    let mut entry_slot = vec![0; links.len()];
    for l in 0..n_loops {
        let mut items: Vec<(f64, u8, PortKind)> = Vec::new();
        let k_in = incoming[l].len() as f64;
        for (k, &i) in incoming[l].iter().enumerate() {
            items.push((k as f64 / k_in, 0, PortKind::Incoming(i)));
        }
        let k_s = storage[l].len() as f64;
        for (k, &s) in storage[l].iter().enumerate() {
            items.push(((k as f64 + 0.5) / k_s, 1, PortKind::Storage(s)));
        }
        let k_o = outgoing[l].len() as f64;
        for (k, &o) in outgoing[l].iter().enumerate() {
            items.push(((k as f64 + 0.3) / k_o, 2, PortKind::Outgoing(o)));
        }
        let exits: Vec<usize> = (0..links.len()).filter(|&j| links[j].0 == l).collect();
        for (k, &j) in exits.iter().enumerate() {
            let f = (k as f64 + 0.85) / exits.len() as f64;
            items.push((f, 3, PortKind::JunctionExit(j)));
        }
        let entries: Vec<usize> = (0..links.len()).filter(|&j| links[j].1 == l).collect();
        for (k, &j) in entries.iter().enumerate() {
            let f = (k as f64 + 0.9) / entries.len() as f64;
            items.push((f, 4, PortKind::JunctionEntry(j)));
        }
        items.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let n_items = items.len();
        let ports: Vec<Port> = items
            .into_iter()
            .enumerate()
            .map(|(rank, (_, _, kind))| {
                let slot = rank * slots / n_items;
                match kind {
                    PortKind::JunctionExit(j) => exit_slot[j] = slot,
                    PortKind::JunctionEntry(j) => entry_slot[j] = slot,
                    _ => {}
                }
                Port { slot, kind }
            })
            .collect();
        loops.push(ports);
    }

    let junction_links = links
        .iter()
        .enumerate()
        .map(|(id, &(from_loop, to_loop))| JunctionLink {
            id,
            from_loop,
            to_loop,
            exit_slot: exit_slot[id],
            entry_slot: entry_slot[id],
        })
        .collect::<Vec<_>>();

    let flatten = |groups: &[Vec<usize>], n: usize| {
        let mut out = vec![0; n];
        for (l, ids) in groups.iter().enumerate() {
            for &i in ids {
                out[i] = l;
            }
        }
        out
    };

    let next_hop = shortest_next_hops(n_loops, &junction_links);
    Ok(Topology {
        n_loops,
        slots_per_loop: slots,
        loops,
        junction_links,
        loop_of_storage: flatten(&storage, config.n_storage),
        loop_of_incoming: flatten(&incoming, config.n_incoming),
        loop_of_outgoing: flatten(&outgoing, config.n_outgoing),
        next_hop,
    })
}

/// Breadth-first search from every loop; records the first junction on a
/// shortest path to each destination (lowest junction id on ties).
fn shortest_next_hops(n_loops: usize, links: &[JunctionLink]) -> Vec<Vec<Option<usize>>> {
    let mut table = vec![vec![None; n_loops]; n_loops];
    for src in 0..n_loops {
        let mut first: Vec<Option<Option<usize>>> = vec![None; n_loops];
        first[src] = Some(None);
        let mut frontier = std::collections::VecDeque::from([src]);
        while let Some(l) = frontier.pop_front() {
            for link in links.iter().filter(|j| j.from_loop == l) {
                if first[link.to_loop].is_none() {
                    let via = first[l].unwrap().or(Some(link.id));
                    first[link.to_loop] = Some(via);
                    frontier.push_back(link.to_loop);
                }
            }
        }
        for dest in 0..n_loops {
            table[src][dest] = first[dest].flatten();
        }
    }
    table
}

impl Topology {
    pub fn n_storage(&self) -> usize {
        self.loop_of_storage.len()
    }

    /// Loop and slot of a point; junctions report their exit slot.
    pub fn placement(&self, point: PointId) -> Option<(usize, usize)> {
        if let PointId::Junction(j) = point {
            return self
                .junction_links
                .get(j)
                .map(|link| (link.from_loop, link.exit_slot));
        }
        self.loops.iter().enumerate().find_map(|(l, ports)| {
            ports.iter().find_map(|p| {
                let matches = matches!(
                    (p.kind, point),
                    (PortKind::Incoming(a), PointId::Incoming(b))
                    | (PortKind::Storage(a), PointId::Storage(b))
                    | (PortKind::Outgoing(a), PointId::Outgoing(b)) if a == b
                );
                matches.then_some((l, p.slot))
            })
        })
    }

    /// Number of junction hops between two loops.
    pub fn hops(&self, from: usize, to: usize) -> usize {
        let mut at = from;
        let mut n = 0;
        while at != to {
            match self.next_hop[at][to] {
                Some(j) => at = self.junction_links[j].to_loop,
                None => return usize::MAX,
            }
            n += 1;
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn default_layout_counts() {
        let t = build_topology(&SimConfig::default()).unwrap();
        assert_eq!(t.loop_of_storage.len(), 20);
        let per_loop = |v: &[usize]| {
            (0..3)
                .map(|l| v.iter().filter(|&&x| x == l).count())
                .collect::<Vec<_>>()
        };
        assert_eq!(per_loop(&t.loop_of_storage), vec![7, 7, 6]);
        assert_eq!(per_loop(&t.loop_of_incoming), vec![2, 1, 1]);
        assert_eq!(per_loop(&t.loop_of_outgoing), vec![2, 2, 2]);
        let links: Vec<_> = t
            .junction_links
            .iter()
            .map(|j| (j.from_loop, j.to_loop))
            .collect();
        assert_eq!(links, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn every_point_placed_once_on_distinct_slots() {
        let t = build_topology(&SimConfig::default()).unwrap();
        let mut seen = BTreeSet::new();
        for ports in &t.loops {
            let slots: BTreeSet<_> = ports.iter().map(|p| p.slot).collect();
            assert_eq!(slots.len(), ports.len());
            for p in ports {
                assert!(seen.insert(format!("{:?}", p.kind)));
            }
        }
        assert_eq!(seen.len(), 4 + 20 + 6 + 4 + 4);
    }

    #[test]
    fn deterministic() {
        let c = SimConfig::default();
        assert_eq!(build_topology(&c).unwrap(), build_topology(&c).unwrap());
    }

    #[test]
    fn all_loops_reachable() {
        let t = build_topology(&SimConfig::default()).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(t.hops(a, b), a.abs_diff(b));
            }
        }
        assert_eq!(t.next_hop[0][2], Some(0));
        assert_eq!(t.next_hop[2][0], Some(3));
    }

    #[test]
    fn single_loop_layout() {
        let c = SimConfig {
            n_loops: 1,
            n_junctions: 0,
            slots_per_loop: 600,
            ..Default::default()
        };
        let t = build_topology(&c).unwrap();
        assert!(t.junction_links.is_empty());
        assert!(t.loop_of_storage.iter().all(|&l| l == 0));

        let bad = SimConfig {
            n_loops: 1,
            ..Default::default()
        };
        assert!(
            matches!(build_topology(&bad), Err(Error::Config { field, .. }) if field == "n_junctions")
        );
    }
}
