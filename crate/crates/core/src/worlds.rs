//! Kidnap detection and multi-world bookkeeping.
//!
//! When tracking collapses the odometry restarts in a fresh co-ordinate
//! system (a world). Inter-world loop matches yield relative poses between
//! worlds; a disjoint-set structure tracks which worlds are connected and a
//! directed pose graph over worlds lets any connected pair be related by
//! chaining edge poses along a breadth-first path, even when no direct loop
//! between the two worlds was ever observed.

use crate::geometry::{compose, inverse, relative_world_pose, Pose};
use crate::placedb::{CandidateKind, LoopCandidate, WorldId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WorldsError {
    #[error("candidate joins nodes of the same world {world}")]
    IntraWorldCandidate { world: WorldId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackingState {
    Tracking,
    Kidnapped,
}

/// State transition reported by the kidnap detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KidnapEvent {
    KidnapStart,
    /// Tracking resumed; odometry restarts in this fresh world.
    KidnapEnd(WorldId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidnapConfig {
    /// Tracking is declared lost when the feature count falls below this.
    pub enter_threshold: u32,
    /// Candidate recovery requires at least this many features...
    pub exit_threshold: u32,
    /// ...for this many consecutive frames.
    pub dwell_frames: u32,
}

impl Default for KidnapConfig {
    fn default() -> Self {
        KidnapConfig {
            enter_threshold: 10,
            exit_threshold: 20,
            dwell_frames: 2,
        }
    }
}

/// Hysteresis state machine over tracked-feature counts. The world id
/// increments by exactly one on every recovery.
#[derive(Debug, Clone)]
pub struct KidnapDetector {
    cfg: KidnapConfig,
    state: TrackingState,
    world: WorldId,
    dwell: u32,
}

impl KidnapDetector {
    pub fn new(cfg: KidnapConfig) -> Self {
        KidnapDetector {
            cfg,
            state: TrackingState::Tracking,
            world: 0,
            dwell: 0,
        }
    }

    pub fn state(&self) -> TrackingState {
        self.state
    }

    pub fn world(&self) -> WorldId {
        self.world
    }

    pub fn update(&mut self, feature_count: u32) -> Option<KidnapEvent> {
        match self.state {
            TrackingState::Tracking => {
                if feature_count < self.cfg.enter_threshold {
                    self.state = TrackingState::Kidnapped;
                    self.dwell = 0;
                    Some(KidnapEvent::KidnapStart)
                } else {
                    None
                }
            }
            TrackingState::Kidnapped => {
                if feature_count >= self.cfg.exit_threshold {
                    self.dwell += 1;
                    if self.dwell >= self.cfg.dwell_frames {
                        self.state = TrackingState::Tracking;
                        self.world += 1;
                        self.dwell = 0;
                        return Some(KidnapEvent::KidnapEnd(self.world));
                    }
                } else {
                    self.dwell = 0;
                }
                None
            }
        }
    }
}

/// Union-find over world ids with path compression and union by rank.
#[derive(Debug, Clone, Default)]
pub struct DisjointSets {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSets {
    pub fn new() -> Self {
        Self::default()
    }

    /// Grow the universe so `id` exists, each new element in its own set.
    pub fn ensure(&mut self, id: WorldId) {
        while self.parent.len() <= id as usize {
            self.parent.push(self.parent.len());
            self.rank.push(0);
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, id: WorldId) -> WorldId {
        self.ensure(id);
        let mut root = id as usize;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = id as usize;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root as WorldId
    }

    pub fn union(&mut self, a: WorldId, b: WorldId) {
        let ra = self.find(a) as usize;
        let rb = self.find(b) as usize;
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }

    pub fn same_set(&mut self, a: WorldId, b: WorldId) -> bool {
        self.find(a) == self.find(b)
    }

    /// All sets as sorted member lists, sorted by their smallest member.
    pub fn sets(&mut self) -> Vec<Vec<WorldId>> {
        let mut groups: BTreeMap<WorldId, Vec<WorldId>> = BTreeMap::new();
        for id in 0..self.len() as WorldId {
            groups.entry(self.find(id)).or_default().push(id);
        }
        let mut sets: Vec<Vec<WorldId>> = groups.into_values().collect();
        sets.sort_by_key(|s| s[0]);
        sets
    }
}

/// Directed pose edge between two worlds: the pose of world `to` expressed
/// in world `from`. The reverse direction is implied with the inverse pose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldEdge {
    pub from: WorldId,
    pub to: WorldId,
    pub pose: Pose,
}

/// Sparse directed graph of worlds with relative-pose edges.
#[derive(Debug, Clone, Default)]
pub struct WorldGraph {
    edges: Vec<WorldEdge>,
    adjacency: BTreeMap<WorldId, Vec<(WorldId, Pose)>>,
}

impl WorldGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn edges(&self) -> &[WorldEdge] {
        &self.edges
    }

    pub fn has_edge(&self, a: WorldId, b: WorldId) -> bool {
        self.edges
            .iter()
            .any(|e| (e.from == a && e.to == b) || (e.from == b && e.to == a))
    }

    /// Store the edge unless the pair already has one; later measurements of
    /// the same pair belong to the pose-graph solver, not this layer.
    pub fn add_edge(&mut self, from: WorldId, to: WorldId, pose: Pose) -> bool {
        if self.has_edge(from, to) {
            return false;
        }
        self.adjacency.entry(from).or_default().push((to, pose));
        self.adjacency
            .entry(to)
            .or_default()
            .push((from, inverse(&pose)));
        for list in self.adjacency.values_mut() {
            list.sort_by_key(|(id, _)| *id);
        }
        self.edges.push(WorldEdge { from, to, pose });
        true
    }

    /// Fewest-hop chain of edge poses from `from` to `to`, ties broken by
    /// expanding lowest world ids first. None when no path exists.
    pub fn chain_pose(&self, from: WorldId, to: WorldId) -> Option<Pose> {
        if from == to {
            return Some(Pose::identity());
        }
        let mut visited: BTreeMap<WorldId, Pose> = BTreeMap::new();
        visited.insert(from, Pose::identity());
        let mut queue = VecDeque::new();
        queue.push_back(from);
        while let Some(current) = queue.pop_front() {
            let pose_to_current = visited[&current];
            if let Some(neighbors) = self.adjacency.get(&current) {
                for (next, edge_pose) in neighbors {
                    if visited.contains_key(next) {
                        continue;
                    }
                    let pose = compose(&pose_to_current, edge_pose);
                    if *next == to {
                        return Some(pose);
                    }
                    visited.insert(*next, pose);
                    queue.push_back(*next);
                }
            }
        }
        None
    }
}

/// Kidnap interval in the keyframe stream: the ids that were skipped and the
/// world that began at recovery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidnapInterval {
    pub world: WorldId,
    pub start_id: u64,
    pub end_id: u64,
}

/// Snapshot of the multi-world state for reports and the solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldReport {
    pub worlds: Vec<WorldId>,
    pub sets: Vec<Vec<WorldId>>,
    pub edges: Vec<WorldEdge>,
    pub kidnaps: Vec<KidnapInterval>,
}

/// Owner of the disjoint sets and the world graph.
#[derive(Debug, Clone, Default)]
pub struct WorldManager {
    sets: DisjointSets,
    graph: WorldGraph,
}

impl WorldManager {
    pub fn new() -> Self {
        let mut manager = WorldManager::default();
        manager.sets.ensure(0);
        manager
    }

    pub fn ensure_world(&mut self, id: WorldId) {
        self.sets.ensure(id);
    }

    pub fn graph(&self) -> &WorldGraph {
        &self.graph
    }

    /// Fold an accepted inter-world candidate into the bookkeeping: derives
    /// the world-to-world pose from the two odometry poses and the measured
    /// node-to-node pose, unions the sets and stores the edge.
    pub fn register_inter_world(
        &mut self,
        candidate: &LoopCandidate,
        query_world: WorldId,
        query_odom: &Pose,
        match_world: WorldId,
        match_odom: &Pose,
    ) -> Result<(), WorldsError> {
        if candidate.kind == CandidateKind::IntraWorld || query_world == match_world {
            return Err(WorldsError::IntraWorldCandidate { world: query_world });
        }
        let pose = relative_world_pose(query_odom, &candidate.relative_pose, match_odom);
        self.sets.union(query_world, match_world);
        self.graph.add_edge(query_world, match_world, pose);
        Ok(())
    }

    pub fn same_set(&mut self, a: WorldId, b: WorldId) -> bool {
        self.sets.same_set(a, b)
    }

    /// Relative pose of world `k1` expressed in world `k`, when the two are
    /// connected. Identity when `k == k1`.
    pub fn relative_pose_between_worlds(&mut self, k: WorldId, k1: WorldId) -> Option<Pose> {
        if k == k1 {
            return Some(Pose::identity());
        }
        if !self.sets.same_set(k, k1) {
            return None;
        }
        self.graph.chain_pose(k, k1)
    }

    /// Lowest world id in the set of `k`, a deterministic reference frame.
    pub fn set_root(&mut self, k: WorldId) -> WorldId {
        let root = self.sets.find(k);
        (0..self.sets.len() as WorldId)
            .filter(|w| self.sets.find(*w) == root)
            .min()
            .unwrap_or(k)
    }

    pub fn report(&mut self, kidnaps: Vec<KidnapInterval>) -> WorldReport {
        WorldReport {
            worlds: (0..self.sets.len() as WorldId).collect(),
            sets: self.sets.sets(),
            edges: self.graph.edges().to_vec(),
            kidnaps,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use std::collections::HashSet;

    fn candidate(query_id: u64, match_id: u64, pose: Pose, kind: CandidateKind) -> LoopCandidate {
        LoopCandidate {
            query_id,
            match_id,
            score: 0.9,
            relative_pose: pose,
            kind,
        }
    }

    #[test]
    fn kidnap_starts_below_enter_threshold() {
        let mut det = KidnapDetector::new(KidnapConfig::default());
        assert_eq!(det.update(50), None);
        assert_eq!(det.update(30), None);
        assert_eq!(det.update(9), Some(KidnapEvent::KidnapStart));
        assert_eq!(det.state(), TrackingState::Kidnapped);
    }

    #[test]
    fn kidnap_ends_after_dwell_above_exit_threshold() {
        let mut det = KidnapDetector::new(KidnapConfig::default());
        det.update(9);
        assert_eq!(det.update(4), None);
        assert_eq!(det.update(8), None);
        assert_eq!(det.update(25), None); // first dwell frame
        assert_eq!(det.update(40), Some(KidnapEvent::KidnapEnd(1)));
        assert_eq!(det.world(), 1);
        assert_eq!(det.state(), TrackingState::Tracking);
    }

    #[test]
    fn dwell_resets_on_dropouts() {
        let mut det = KidnapDetector::new(KidnapConfig::default());
        det.update(5);
        det.update(25); // dwell 1
        det.update(5); // reset
        assert_eq!(det.update(25), None);
        assert_eq!(det.update(25), Some(KidnapEvent::KidnapEnd(1)));
    }

    #[test]
    fn constant_counts_never_emit_events() {
        let mut det = KidnapDetector::new(KidnapConfig::default());
        for _ in 0..100 {
            assert_eq!(det.update(50), None);
        }
        assert_eq!(det.world(), 0);
    }

    #[test]
    fn world_increments_once_per_recovery() {
        let mut det = KidnapDetector::new(KidnapConfig::default());
        for round in 1..=3 {
            det.update(0);
            det.update(30);
            assert_eq!(det.update(30), Some(KidnapEvent::KidnapEnd(round)));
        }
    }

    #[test]
    fn same_set_reflexive_and_fresh_worlds_disjoint() {
        let mut sets = DisjointSets::new();
        assert!(sets.same_set(0, 0));
        assert!(!sets.same_set(0, 1));
    }

    #[test]
    fn union_find_matches_naive_partition_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n: u32 = 64;
        let mut sets = DisjointSets::new();
        sets.ensure(n - 1);
        // Naive oracle: partition as a vector of labels, unions relabel.
        let mut labels: Vec<u32> = (0..n).collect();
        for _ in 0..1000 {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            sets.union(a, b);
            let (la, lb) = (labels[a as usize], labels[b as usize]);
            if la != lb {
                for l in labels.iter_mut() {
                    if *l == lb {
                        *l = la;
                    }
                }
            }
            let c = rng.random_range(0..n);
            let d = rng.random_range(0..n);
            assert_eq!(
                sets.same_set(c, d),
                labels[c as usize] == labels[d as usize]
            );
        }
    }

    #[test]
    fn register_inter_world_unions_and_stores_edge() {
        let mut manager = WorldManager::new();
        manager.ensure_world(1);
        let cand = candidate(200, 10, Pose::identity(), CandidateKind::InterWorld);
        manager
            .register_inter_world(&cand, 1, &Pose::identity(), 0, &Pose::identity())
            .unwrap();
        assert!(manager.same_set(0, 1));
        assert_eq!(manager.graph().edges().len(), 1);
    }

    #[test]
    fn intra_world_candidate_is_rejected() {
        let mut manager = WorldManager::new();
        let cand = candidate(200, 10, Pose::identity(), CandidateKind::IntraWorld);
        let err = manager
            .register_inter_world(&cand, 0, &Pose::identity(), 0, &Pose::identity())
            .unwrap_err();
        assert_eq!(err, WorldsError::IntraWorldCandidate { world: 0 });
    }

    #[test]
    fn noiseless_candidate_recovers_ground_truth_offset() {
        // Ground truth: world 1 origin sits at a known pose in world 0.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..20 {
            let offset = crate::geometry::random_pose(&mut rng);
            let node_i_w1 = crate::geometry::random_pose(&mut rng); // odometry in world 1
            let node_j_w0 = crate::geometry::random_pose(&mut rng); // odometry in world 0
            // Global poses: world 0 is the reference.
            let global_i = compose(&offset, &node_i_w1);
            let global_j = node_j_w0;
            let measured = compose(&inverse(&global_i), &global_j);

            let mut manager = WorldManager::new();
            manager.ensure_world(1);
            let cand = candidate(300, 5, measured, CandidateKind::InterWorld);
            manager
                .register_inter_world(&cand, 1, &node_i_w1, 0, &node_j_w0)
                .unwrap();
            // Stored edge is the pose of world 0 in world 1: inverse(offset).
            let rel = manager.relative_pose_between_worlds(1, 0).unwrap();
            assert!(rel.is_close(&inverse(&offset), 1e-9));
            let back = manager.relative_pose_between_worlds(0, 1).unwrap();
            assert!(back.is_close(&offset, 1e-9));
        }
    }

    #[test]
    fn chain_pose_composes_over_two_hops() {
        let mut graph = WorldGraph::new();
        let e01 = Pose::from_planar(1.0, 0.0, 0.2);
        let e12 = Pose::from_planar(0.0, 2.0, -0.4);
        graph.add_edge(0, 1, e01);
        graph.add_edge(1, 2, e12);
        let chained = graph.chain_pose(0, 2).unwrap();
        assert!(chained.is_close(&compose(&e01, &e12), 1e-12));
        assert!(graph.chain_pose(0, 3).is_none());
        assert!(graph
            .chain_pose(2, 2)
            .unwrap()
            .is_close(&Pose::identity(), 1e-15));
    }

    #[test]
    fn duplicate_edges_keep_the_first() {
        let mut graph = WorldGraph::new();
        assert!(graph.add_edge(0, 1, Pose::from_planar(1.0, 0.0, 0.0)));
        assert!(!graph.add_edge(1, 0, Pose::from_planar(9.0, 9.0, 1.0)));
        assert_eq!(graph.edges().len(), 1);
        let rel = graph.chain_pose(0, 1).unwrap();
        assert!(rel.is_close(&Pose::from_planar(1.0, 0.0, 0.0), 1e-12));
    }

    #[test]
    fn edge_with_implied_reverse_composes_to_identity() {
        let mut graph = WorldGraph::new();
        let pose = Pose::from_planar(2.0, -1.0, 0.8);
        graph.add_edge(0, 1, pose);
        let forward = graph.chain_pose(0, 1).unwrap();
        let backward = graph.chain_pose(1, 0).unwrap();
        assert!(compose(&forward, &backward).is_close(&Pose::identity(), 1e-9));
    }

    #[test]
    fn same_set_iff_relative_pose_exists() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let mut manager = WorldManager::new();
        let worlds: WorldId = 10;
        manager.ensure_world(worlds - 1);
        // Random unions via synthetic inter-world candidates.
        let mut pairs = HashSet::new();
        for _ in 0..8 {
            let a = rng.random_range(0..worlds);
            let b = rng.random_range(0..worlds);
            if a == b || !pairs.insert((a.min(b), a.max(b))) {
                continue;
            }
            let cand = candidate(
                500,
                5,
                crate::geometry::random_pose(&mut rng),
                CandidateKind::InterWorld,
            );
            manager
                .register_inter_world(
                    &cand,
                    a,
                    &crate::geometry::random_pose(&mut rng),
                    b,
                    &crate::geometry::random_pose(&mut rng),
                )
                .unwrap();
        }
        for a in 0..worlds {
            for b in 0..worlds {
                assert_eq!(
                    manager.same_set(a, b),
                    manager.relative_pose_between_worlds(a, b).is_some()
                );
            }
        }
    }

    #[test]
    fn indirect_pose_matches_direct_ground_truth_and_cycles_close() {
        // Three worlds with known global offsets; observe only the loop
        // pairs (1,2) and (0,2). The 0-1 transform must still come out
        // exactly, covering the chained-kidnap case.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..20 {
            let offsets = [
                Pose::identity(),
                crate::geometry::random_pose(&mut rng),
                crate::geometry::random_pose(&mut rng),
            ];
            let mut manager = WorldManager::new();
            manager.ensure_world(2);
            for (qw, mw) in [(1u32, 2u32), (0u32, 2u32)] {
                let odom_q = crate::geometry::random_pose(&mut rng);
                let odom_m = crate::geometry::random_pose(&mut rng);
                let global_q = compose(&offsets[qw as usize], &odom_q);
                let global_m = compose(&offsets[mw as usize], &odom_m);
                let measured = compose(&inverse(&global_q), &global_m);
                let cand = candidate(700, 7, measured, CandidateKind::InterWorld);
                manager
                    .register_inter_world(&cand, qw, &odom_q, mw, &odom_m)
                    .unwrap();
            }
            let rel = manager.relative_pose_between_worlds(0, 1).unwrap();
            let truth = compose(&inverse(&offsets[0]), &offsets[1]);
            assert!(rel.is_close(&truth, 1e-9));

            // Cycle consistency: 0 -> 1 -> 2 -> 0 closes to identity.
            let p01 = manager.relative_pose_between_worlds(0, 1).unwrap();
            let p12 = manager.relative_pose_between_worlds(1, 2).unwrap();
            let p20 = manager.relative_pose_between_worlds(2, 0).unwrap();
            let cycle = compose(&compose(&p01, &p12), &p20);
            assert!(cycle.is_close(&Pose::identity(), 1e-9));
        }
    }

    #[test]
    fn world_report_is_serializable() {
        let mut manager = WorldManager::new();
        manager.ensure_world(2);
        let cand = candidate(
            300,
            5,
            Pose::from_parts(1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0),
            CandidateKind::InterWorld,
        );
        manager
            .register_inter_world(
                &cand,
                1,
                &Pose::identity(),
                0,
                &Pose::from_translation(1.0, 0.0, 0.0),
            )
            .unwrap();
        let report = manager.report(vec![KidnapInterval {
            world: 1,
            start_id: 60,
            end_id: 69,
        }]);
        let json = serde_json::to_string(&report).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(value["sets"][0], serde_json::json!([0, 1]));
        assert_eq!(value["sets"][1], serde_json::json!([2]));
        assert_eq!(value["kidnaps"][0]["start_id"], 60);
        let _ = Vector3::<f64>::zeros();
    }
}
