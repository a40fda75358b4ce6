//! Road network, OD demands and the fixed path set.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Range;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ArcId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for ArcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Directed arc with linear delay `A + B·x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Arc {
    pub id: ArcId,
    pub tail: NodeId,
    pub head: NodeId,
    /// Free-flow delay `A` (minutes).
    pub delay_intercept: f64,
    /// Marginal delay per effective vehicle `B`.
    pub delay_slope: f64,
}

impl Arc {
    pub fn new(id: u32, tail: u32, head: u32, delay_intercept: f64, delay_slope: f64) -> Self {
        Self {
            id: ArcId(id),
            tail: NodeId(tail),
            head: NodeId(head),
            delay_intercept,
            delay_slope,
        }
    }

    /// `A + B·x` for an effective volume `x`.
    #[inline]
    pub fn delay(&self, effective_volume: f64) -> f64 {
        self.delay_intercept + self.delay_slope * effective_volume
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdPair {
    pub origin: NodeId,
    pub destination: NodeId,
    pub demand_private: f64,
    pub demand_truck: f64,
}

impl OdPair {
    pub fn new(origin: u32, destination: u32, demand_private: f64, demand_truck: f64) -> Self {
        Self {
            origin: NodeId(origin),
            destination: NodeId(destination),
            demand_private,
            demand_truck,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    /// Position of the path in [`Network::paths`].
    pub id: usize,
    /// Index of the OD pair in [`Network::od_pairs`].
    pub od: usize,
    pub arcs: Vec<ArcId>,
    pub truck_allowed: bool,
}

impl Path {
    /// `arc1-arc2-…`, a stable key independent of path numbering.
    pub fn key(&self) -> alloc::string::String {
        let parts: Vec<alloc::string::String> = self.arcs.iter().map(|a| format!("{a}")).collect();
        parts.join("-")
    }

    pub fn contains(&self, arc: ArcId) -> bool {
        self.arcs.contains(&arc)
    }
}

/// Immutable network with paths grouped contiguously by OD pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    nodes: Vec<NodeId>,
    arcs: Vec<Arc>,
    od_pairs: Vec<OdPair>,
    paths: Vec<Path>,
    od_ranges: Vec<Range<usize>>,
    arc_index: BTreeMap<ArcId, usize>,
}

impl Network {
    /// Build a network from explicit path arc sequences, given per OD pair.
    ///
    /// `paths[w]` lists the arc sequences of OD pair `w`.
    pub fn new(
        nodes: Vec<NodeId>,
        arcs: Vec<Arc>,
        od_pairs: Vec<OdPair>,
        paths: Vec<Vec<Vec<ArcId>>>,
    ) -> Result<Self> {
        if paths.len() != od_pairs.len() {
            return Err(Error::InvalidNetwork(format!(
                "{} OD pairs but {} path groups",
                od_pairs.len(),
                paths.len()
            )));
        }
        let node_set: BTreeSet<NodeId> = nodes.iter().copied().collect();
        if node_set.len() != nodes.len() {
            return Err(Error::InvalidNetwork("duplicate node id".into()));
        }
        let mut arc_index = BTreeMap::new();
        for (i, arc) in arcs.iter().enumerate() {
            if arc_index.insert(arc.id, i).is_some() {
                return Err(Error::InvalidNetwork(format!("duplicate arc id {}", arc.id)));
            }
            if !node_set.contains(&arc.tail) || !node_set.contains(&arc.head) {
                return Err(Error::InvalidNetwork(format!(
                    "arc {} references an unknown node",
                    arc.id
                )));
            }
            if !(arc.delay_intercept > 0.0 && arc.delay_intercept.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "arc {} needs A > 0, got {}",
                    arc.id, arc.delay_intercept
                )));
            }
            if !(arc.delay_slope > 0.0 && arc.delay_slope.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "arc {} needs B > 0, got {}",
                    arc.id, arc.delay_slope
                )));
            }
        }
        for od in &od_pairs {
            let ok = |q: f64| q >= 0.0 && q.is_finite();
            if !ok(od.demand_private) || !ok(od.demand_truck) {
                return Err(Error::InvalidNetwork(format!(
                    "OD {}->{} has a negative or non-finite demand",
                    od.origin, od.destination
                )));
            }
            if !node_set.contains(&od.origin) || !node_set.contains(&od.destination) {
                return Err(Error::InvalidNetwork(format!(
                    "OD {}->{} references an unknown node",
                    od.origin, od.destination
                )));
            }
        }

        let mut flat = Vec::new();
        let mut od_ranges = Vec::with_capacity(od_pairs.len());
        for (w, group) in paths.into_iter().enumerate() {
            let od = &od_pairs[w];
            if group.is_empty() {
                return Err(Error::NoPath {
                    origin: od.origin,
                    destination: od.destination,
                });
            }
            let start = flat.len();
            for arcs_of_path in group {
                check_chain(&arcs, &arc_index, od, &arcs_of_path)?;
                flat.push(Path {
                    id: flat.len(),
                    od: w,
                    arcs: arcs_of_path,
                    truck_allowed: true,
                });
            }
            od_ranges.push(start..flat.len());
        }

        Ok(Self {
            nodes,
            arcs,
            od_pairs,
            paths: flat,
            od_ranges,
            arc_index,
        })
    }

    /// Build a network whose path sets are enumerated (up to `max_paths` per
    /// OD pair).
    pub fn with_enumerated_paths(
        nodes: Vec<NodeId>,
        arcs: Vec<Arc>,
        od_pairs: Vec<OdPair>,
        max_paths: usize,
    ) -> Result<Self> {
        let skeleton = Self::new(nodes.clone(), arcs.clone(), Vec::new(), Vec::new())?;
        let mut paths = Vec::with_capacity(od_pairs.len());
        for od in &od_pairs {
            paths.push(enumerate_paths(&skeleton, od, max_paths)?);
        }
        Self::new(nodes, arcs, od_pairs, paths)
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn od_pairs(&self) -> &[OdPair] {
        &self.od_pairs
    }

    pub fn paths(&self) -> &[Path] {
        &self.paths
    }

    /// Indices of the paths serving OD pair `w`.
    pub fn paths_of(&self, w: usize) -> Range<usize> {
        self.od_ranges[w].clone()
    }

    pub fn arc_index(&self, id: ArcId) -> Option<usize> {
        self.arc_index.get(&id).copied()
    }

    pub fn arc(&self, id: ArcId) -> Option<&Arc> {
        self.arc_index(id).map(|i| &self.arcs[i])
    }

    pub fn truck_path_count(&self) -> usize {
        self.paths.iter().filter(|p| p.truck_allowed).count()
    }

    /// Copy with every OD pair's demands replaced.
    pub fn with_uniform_demand(&self, private: f64, truck: f64) -> Result<Self> {
        let demands: Vec<(f64, f64)> = self.od_pairs.iter().map(|_| (private, truck)).collect();
        self.with_demands(&demands)
    }

    /// Copy with per-OD `(private, truck)` demands.
    pub fn with_demands(&self, demands: &[(f64, f64)]) -> Result<Self> {
        if demands.len() != self.od_pairs.len() {
            return Err(Error::InvalidNetwork(format!(
                "{} demand rows for {} OD pairs",
                demands.len(),
                self.od_pairs.len()
            )));
        }
        let mut out = self.clone();
        for (od, &(p, t)) in out.od_pairs.iter_mut().zip(demands) {
            if !(p >= 0.0 && p.is_finite() && t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidNetwork(format!(
                    "OD {}->{} has a negative or non-finite demand",
                    od.origin, od.destination
                )));
            }
            od.demand_private = p;
            od.demand_truck = t;
        }
        out.check_truck_routable(None)?;
        Ok(out)
    }

    /// Copy where trucks may not use any path through `arc`. Private paths
    /// are untouched.
    pub fn block_arc_for_trucks(&self, arc: ArcId) -> Result<Self> {
        if self.arc_index(arc).is_none() {
            return Err(Error::UnknownArc(arc));
        }
        let mut out = self.clone();
        for p in out.paths.iter_mut() {
            if p.contains(arc) {
                p.truck_allowed = false;
            }
        }
        out.check_truck_routable(Some(arc))?;
        Ok(out)
    }

    fn check_truck_routable(&self, blocked: Option<ArcId>) -> Result<()> {
        for (w, od) in self.od_pairs.iter().enumerate() {
            if od.demand_truck > 0.0 && !self.paths[self.paths_of(w)].iter().any(|p| p.truck_allowed) {
                return Err(match blocked {
                    Some(arc) => Error::InfeasibleBlocking {
                        arc,
                        origin: od.origin,
                        destination: od.destination,
                    },
                    None => Error::InvalidNetwork(format!(
                        "OD {}->{} has truck demand but no truck path",
                        od.origin, od.destination
                    )),
                });
            }
        }
        Ok(())
    }
}

fn check_chain(
    arcs: &[Arc],
    index: &BTreeMap<ArcId, usize>,
    od: &OdPair,
    seq: &[ArcId],
) -> Result<()> {
    let bad = |why: &str| {
        Err(Error::InvalidNetwork(format!(
            "path {:?} for OD {}->{}: {why}",
            seq.iter().map(|a| a.0).collect::<Vec<_>>(),
            od.origin,
            od.destination
        )))
    };
    if seq.is_empty() {
        return bad("empty");
    }
    let mut seen = BTreeSet::new();
    let mut at = od.origin;
    for id in seq {
        let Some(&i) = index.get(id) else {
            return Err(Error::UnknownArc(*id));
        };
        if !seen.insert(*id) {
            return bad("repeats an arc");
        }
        if arcs[i].tail != at {
            return bad("arcs are not chained head to tail");
        }
        at = arcs[i].head;
    }
    if at != od.destination {
        return bad("does not end at the destination");
    }
    Ok(())
}

/// All simple directed paths from `od.origin` to `od.destination`, in
/// lexicographic order of their arc-id sequences, truncated at `max_paths`.
pub fn enumerate_paths(network: &Network, od: &OdPair, max_paths: usize) -> Result<Vec<Vec<ArcId>>> {
    let mut out_arcs: BTreeMap<NodeId, Vec<&Arc>> = BTreeMap::new();
    for arc in &network.arcs {
        out_arcs.entry(arc.tail).or_default().push(arc);
    }
    for list in out_arcs.values_mut() {
        list.sort_by_key(|a| a.id);
    }

    let mut found = Vec::new();
    let mut visited: BTreeSet<NodeId> = BTreeSet::new();
    let mut stack: Vec<ArcId> = Vec::new();
    if od.origin != od.destination {
        visited.insert(od.origin);
        dfs(
            &out_arcs,
            od.origin,
            od.destination,
            max_paths,
            &mut visited,
            &mut stack,
            &mut found,
        );
    }
    if found.is_empty() {
        return Err(Error::NoPath {
            origin: od.origin,
            destination: od.destination,
        });
    }
    Ok(found)
}

fn dfs(
    out_arcs: &BTreeMap<NodeId, Vec<&Arc>>,
    at: NodeId,
    dest: NodeId,
    max_paths: usize,
    visited: &mut BTreeSet<NodeId>,
    stack: &mut Vec<ArcId>,
    found: &mut Vec<Vec<ArcId>>,
) {
    let Some(next) = out_arcs.get(&at) else {
        return;
    };
    for arc in next {
        if found.len() >= max_paths {
            return;
        }
        if visited.contains(&arc.head) {
            continue;
        }
        stack.push(arc.id);
        if arc.head == dest {
            found.push(stack.clone());
        } else {
            visited.insert(arc.head);
            dfs(out_arcs, arc.head, dest, max_paths, visited, stack, found);
            visited.remove(&arc.head);
        }
        stack.pop();
    }
}

/// Slope `B` shared by every benchmark arc.
pub const NGUYEN_DUPUIS_SLOPE: f64 = 6.67e-4;

/// The 13-node, 19-arc Nguyen–Dupuis network with OD pairs (1,2), (1,3),
/// (4,2), (4,3) (zero demand) and all 25 simple paths.
pub fn build_nguyen_dupuis() -> Network {
    const TOPOLOGY: [(u32, u32, u32); 19] = [
        (1, 1, 5),
        (2, 1, 12),
        (3, 4, 5),
        (4, 4, 9),
        (5, 5, 6),
        (6, 5, 9),
        (7, 6, 7),
        (8, 6, 10),
        (9, 7, 8),
        (10, 7, 11),
        (11, 8, 2),
        (12, 9, 10),
        (13, 9, 13),
        (14, 10, 11),
        (15, 11, 2),
        (16, 11, 3),
        (17, 12, 6),
        (18, 12, 8),
        (19, 13, 3),
    ];
    let intercept = |id: u32| match id {
        1 | 7 | 13 | 15 | 19 => 1.5,
        4 => 2.5,
        _ => 2.0,
    };
    let arcs = TOPOLOGY
        .iter()
        .map(|&(id, t, h)| Arc::new(id, t, h, intercept(id), NGUYEN_DUPUIS_SLOPE))
        .collect();
    let nodes = (1..=13).map(NodeId).collect();
    let od_pairs = alloc::vec![
        OdPair::new(1, 2, 0.0, 0.0),
        OdPair::new(1, 3, 0.0, 0.0),
        OdPair::new(4, 2, 0.0, 0.0),
        OdPair::new(4, 3, 0.0, 0.0),
    ];
    Network::with_enumerated_paths(nodes, arcs, od_pairs, usize::MAX)
        .expect("benchmark network is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ids(v: &[u32]) -> Vec<ArcId> {
        v.iter().copied().map(ArcId).collect()
    }

    fn diamond() -> Network {
        let arcs = vec![
            Arc::new(1, 1, 2, 1.0, 0.01),
            Arc::new(2, 1, 3, 1.0, 0.01),
            Arc::new(3, 2, 4, 1.0, 0.01),
            Arc::new(4, 3, 4, 1.0, 0.01),
        ];
        Network::with_enumerated_paths(
            (1..=4).map(NodeId).collect(),
            arcs,
            vec![OdPair::new(1, 4, 10.0, 5.0)],
            100,
        )
        .unwrap()
    }

    #[test]
    fn benchmark_has_25_paths() {
        let net = build_nguyen_dupuis();
        assert_eq!(net.paths().len(), 25);
        let counts: Vec<usize> = (0..4).map(|w| net.paths_of(w).len()).collect();
        assert_eq!(counts, vec![8, 6, 5, 6]);
        assert_eq!(counts.iter().sum::<usize>(), 25);
    }

    #[test]
    fn benchmark_arc_parameters() {
        let net = build_nguyen_dupuis();
        assert_eq!(net.arc(ArcId(4)).unwrap().delay_intercept, 2.5);
        assert_eq!(net.arc(ArcId(12)).unwrap().delay_intercept, 2.0);
        for id in [1, 7, 13, 15, 19] {
            assert_eq!(net.arc(ArcId(id)).unwrap().delay_intercept, 1.5);
        }
        assert!(net.arcs().iter().all(|a| a.delay_slope == 6.67e-4));
        assert_eq!(net.arcs().len(), 19);
        assert_eq!(net.nodes().len(), 13);
    }

    #[test]
    fn benchmark_od_43_has_four_arc_route_through_nodes_9_10_11() {
        let net = build_nguyen_dupuis();
        let paths = &net.paths()[net.paths_of(3)];
        assert!(paths.iter().any(|p| p.arcs == ids(&[4, 12, 14, 16])));
        assert!(paths.iter().any(|p| p.arcs == ids(&[4, 13, 19])));
    }

    #[test]
    fn single_arc_network() {
        let net = Network::with_enumerated_paths(
            vec![NodeId(1), NodeId(2)],
            vec![Arc::new(7, 1, 2, 2.0, 0.001)],
            vec![OdPair::new(1, 2, 1.0, 0.0)],
            10,
        )
        .unwrap();
        assert_eq!(net.paths().len(), 1);
        assert_eq!(net.paths()[0].arcs, ids(&[7]));
    }

    #[test]
    fn diamond_has_two_ordered_paths() {
        let net = diamond();
        let seqs: Vec<_> = net.paths().iter().map(|p| p.arcs.clone()).collect();
        assert_eq!(seqs, vec![ids(&[1, 3]), ids(&[2, 4])]);
    }

    #[test]
    fn enumeration_respects_max_paths_and_reports_unreachable() {
        let net = build_nguyen_dupuis();
        let od = OdPair::new(1, 2, 0.0, 0.0);
        assert_eq!(enumerate_paths(&net, &od, 3).unwrap().len(), 3);
        let back = OdPair::new(2, 1, 0.0, 0.0);
        assert!(matches!(
            enumerate_paths(&net, &back, 10),
            Err(Error::NoPath { .. })
        ));
    }

    #[test]
    fn enumeration_is_deterministic_and_lexicographic() {
        let net = build_nguyen_dupuis();
        let od = net.od_pairs()[0].clone();
        let a = enumerate_paths(&net, &od, usize::MAX).unwrap();
        let b = enumerate_paths(&net.clone(), &od, usize::MAX).unwrap();
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(a, sorted);
    }

    #[test]
    fn blocking_arc_12_removes_truck_paths_only() {
        let net = build_nguyen_dupuis().with_uniform_demand(100.0, 10.0).unwrap();
        let blocked = net.block_arc_for_trucks(ArcId(12)).unwrap();
        assert!(blocked.truck_path_count() < net.truck_path_count());
        assert_eq!(blocked.paths().len(), net.paths().len());
        for (before, after) in net.paths().iter().zip(blocked.paths()) {
            assert_eq!(before.arcs, after.arcs);
            assert!(!after.truck_allowed || before.truck_allowed);
            assert_eq!(after.truck_allowed, !before.arcs.contains(&ArcId(12)));
        }
    }

    #[test]
    fn blocking_unused_arc_is_a_no_op() {
        let mut arcs = diamond().arcs().to_vec();
        arcs.push(Arc::new(9, 4, 1, 1.0, 0.01));
        let net = Network::with_enumerated_paths(
            (1..=4).map(NodeId).collect(),
            arcs,
            vec![OdPair::new(1, 4, 10.0, 5.0)],
            100,
        )
        .unwrap();
        assert_eq!(net.block_arc_for_trucks(ArcId(9)).unwrap(), net);
    }

    #[test]
    fn blocking_only_route_is_infeasible() {
        let net = Network::with_enumerated_paths(
            vec![NodeId(1), NodeId(2)],
            vec![Arc::new(1, 1, 2, 2.0, 0.001)],
            vec![OdPair::new(1, 2, 10.0, 3.0)],
            10,
        )
        .unwrap();
        assert!(matches!(
            net.block_arc_for_trucks(ArcId(1)),
            Err(Error::InfeasibleBlocking { .. })
        ));
        assert!(matches!(
            net.block_arc_for_trucks(ArcId(5)),
            Err(Error::UnknownArc(_))
        ));
        // Without truck demand the same blocking is fine.
        let no_trucks = net.with_uniform_demand(10.0, 0.0).unwrap();
        assert!(no_trucks.block_arc_for_trucks(ArcId(1)).is_ok());
    }

    #[test]
    fn rejects_broken_paths_and_parameters() {
        let nodes: Vec<NodeId> = (1..=3).map(NodeId).collect();
        let arcs = vec![Arc::new(1, 1, 2, 1.0, 0.1), Arc::new(2, 2, 3, 1.0, 0.1)];
        let od = vec![OdPair::new(1, 3, 1.0, 0.0)];
        assert!(Network::new(nodes.clone(), arcs.clone(), od.clone(), vec![vec![ids(&[2, 1])]]).is_err());
        assert!(Network::new(nodes.clone(), arcs.clone(), od.clone(), vec![vec![ids(&[1])]]).is_err());
        assert!(Network::new(nodes.clone(), arcs.clone(), od.clone(), vec![vec![]]).is_err());
        assert!(Network::new(nodes.clone(), arcs.clone(), od.clone(), vec![vec![ids(&[1, 2])]]).is_ok());
        let zero_a = vec![Arc::new(1, 1, 2, 0.0, 0.1), Arc::new(2, 2, 3, 1.0, 0.1)];
        assert!(Network::new(nodes.clone(), zero_a, od.clone(), vec![vec![ids(&[1, 2])]]).is_err());
        let neg = vec![OdPair::new(1, 3, -1.0, 0.0)];
        assert!(Network::new(nodes, arcs, neg, vec![vec![ids(&[1, 2])]]).is_err());
    }

    #[test]
    fn blocking_is_monotone() {
        let net = build_nguyen_dupuis().with_uniform_demand(10.0, 1.0).unwrap();
        for a in net.arcs() {
            if let Ok(b) = net.block_arc_for_trucks(a.id) {
                for (x, y) in net.paths().iter().zip(b.paths()) {
                    assert!(!y.truck_allowed || x.truck_allowed);
                }
            }
        }
    }
}
