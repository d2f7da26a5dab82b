//! End-to-end pipeline: retrieval, loop acceptance, world bookkeeping and
//! pose-graph construction over a keyframe stream.
//!
//! Two execution modes share the same stage logic. Deterministic mode runs
//! both stages in strict keyframe order on the calling thread; concurrent
//! mode runs the retrieval stage and the bookkeeping stage on separate
//! threads connected by a bounded channel with back-pressure. The channel
//! preserves order, so both modes accept the same loop candidates.

use crate::geometry::{compose, inverse, Pose};
use crate::placedb::{
    CandidateKind, Keyframe, LoopCandidate, LoopDecider, PlaceDb, PlaceDbConfig, QueryTop,
    RetrievalRecord, WorldId,
};
use crate::posegraph::{EdgeWeights, OptimizeConfig, PoseGraphProblem, SolveReport};
use crate::sim::{GroundTruth, LoopPoseProvider, SimError};
use crate::worlds::{
    KidnapConfig, KidnapDetector, KidnapEvent, KidnapInterval, TrackingState, WorldManager,
    WorldReport,
};
use serde::{Deserialize, Serialize};
use std::sync::mpsc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Deterministic,
    Concurrent { queue_capacity: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub placedb: PlaceDbConfig,
    pub kidnap: KidnapConfig,
    pub odometry_weights: EdgeWeights,
    pub loop_weights: EdgeWeights,
    pub optimize: OptimizeConfig,
    pub execution: ExecutionMode,
    /// Run the pose-graph solver after ingesting the stream.
    pub solve: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            placedb: PlaceDbConfig::default(),
            kidnap: KidnapConfig::default(),
            odometry_weights: EdgeWeights {
                rotation: 100.0,
                translation: 100.0,
            },
            loop_weights: EdgeWeights {
                rotation: 5.0,
                translation: 5.0,
            },
            optimize: OptimizeConfig::default(),
            execution: ExecutionMode::Deterministic,
            solve: true,
        }
    }
}

/// Loop candidate accepted by the pipeline, with the worlds it connects and
/// the injected-outlier flag from the measurement source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcceptedLoop {
    pub candidate: LoopCandidate,
    pub query_world: WorldId,
    pub match_world: WorldId,
    pub outlier: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FramePose {
    pub frame: u64,
    pub world: WorldId,
    pub pose: Pose,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub frames_processed: u64,
    pub keyframes_stored: u64,
    pub world_report: WorldReport,
    pub accepted: Vec<AcceptedLoop>,
    pub records: Vec<RetrievalRecord>,
    pub solve_report: Option<SolveReport>,
    /// Node poses after initialization from world offsets, before solving.
    pub initial_trajectory: Vec<FramePose>,
    /// Node poses after the solve (equal to the initial trajectory when
    /// solving is disabled).
    pub optimized_trajectory: Vec<FramePose>,
    /// Plain-text dump of the final problem for external inspection.
    pub g2o: String,
}

impl PipelineOutput {
    /// Frames whose world belongs to the same set as world 0, in id order.
    pub fn root_set_frames(&self) -> Vec<u64> {
        let root_set = self
            .world_report
            .sets
            .iter()
            .find(|s| s.contains(&0))
            .cloned()
            .unwrap_or_default();
        self.optimized_trajectory
            .iter()
            .filter(|f| root_set.contains(&f.world))
            .map(|f| f.frame)
            .collect()
    }

    fn trajectory_poses(traj: &[FramePose], frames: &[u64]) -> Vec<Pose> {
        let mut poses = Vec::with_capacity(frames.len());
        for f in frames {
            let fp = traj
                .iter()
                .find(|p| p.frame == *f)
                .expect("frame present in trajectory");
            poses.push(fp.pose);
        }
        poses
    }

    /// Initial and optimized poses restricted to the given frames.
    pub fn aligned_poses(&self, frames: &[u64]) -> (Vec<Pose>, Vec<Pose>) {
        (
            Self::trajectory_poses(&self.initial_trajectory, frames),
            Self::trajectory_poses(&self.optimized_trajectory, frames),
        )
    }
}

/// Join retrieval records with ground truth for precision-recall scoring.
pub fn attach_ground_truth(
    records: &[RetrievalRecord],
    truth: &GroundTruth,
    gap: u64,
) -> Vec<RetrievalRecord> {
    records
        .iter()
        .map(|r| RetrievalRecord {
            true_match: truth.true_match(r.query_id, gap),
            ..*r
        })
        .collect()
}

/// Messages flowing from the retrieval stage to the bookkeeping stage.
enum StageMsg {
    Frame {
        id: u64,
        world: WorldId,
        odometry: Pose,
    },
    Candidate {
        query_id: u64,
        match_id: u64,
        score: f64,
        query_world: WorldId,
        query_odom: Pose,
        match_world: WorldId,
        match_odom: Pose,
    },
}

/// Retrieval stage: kidnap tracking, descriptor store, loop decision.
struct RetrievalStage {
    cfg: PlaceDbConfig,
    detector: KidnapDetector,
    db: PlaceDb,
    decider: LoopDecider,
    records: Vec<RetrievalRecord>,
    kidnaps: Vec<KidnapInterval>,
    open_kidnap: Option<u64>,
    last_accepted_anchor: Option<u64>,
}

impl RetrievalStage {
    fn new(placedb: PlaceDbConfig, kidnap: KidnapConfig) -> Self {
        RetrievalStage {
            cfg: placedb,
            detector: KidnapDetector::new(kidnap),
            db: PlaceDb::new(),
            decider: LoopDecider::new(),
            records: Vec::new(),
            kidnaps: Vec::new(),
            open_kidnap: None,
            last_accepted_anchor: None,
        }
    }

    fn process(&mut self, kf: &Keyframe, out: &mut Vec<StageMsg>) {
        let event = self.detector.update(kf.tracked_features);
        match event {
            Some(KidnapEvent::KidnapStart) => {
                self.open_kidnap = Some(kf.id);
            }
            Some(KidnapEvent::KidnapEnd(world)) => {
                if let Some(start) = self.open_kidnap.take() {
                    self.kidnaps.push(KidnapInterval {
                        world,
                        start_id: start,
                        end_id: kf.id - 1,
                    });
                }
            }
            None => {}
        }
        if self.detector.state() == TrackingState::Kidnapped {
            return;
        }
        let world = self.detector.world();
        debug_assert_eq!(world, kf.world, "stream world tag disagrees with detector");

        let mut stored = kf.clone();
        stored.world = world;
        self.db.insert(stored).expect("stream ids are monotonic");
        out.push(StageMsg::Frame {
            id: kf.id,
            world,
            odometry: kf.pose,
        });

        let Some(top) = self.db.query_top(&kf.descriptor, &self.cfg) else {
            return;
        };
        self.records.push(RetrievalRecord {
            query_id: kf.id,
            match_id: Some(top.id),
            score: top.score,
            true_match: None,
        });
        let decision = self.decider.push(
            QueryTop {
                query_id: kf.id,
                match_id: top.id,
                score: top.score,
            },
            &self.cfg,
        );
        if let Some((anchor_query, anchor_match, score)) = decision {
            // Overlapping windows re-report the same revisit; require the
            // anchor to advance past the previous window before accepting
            // again.
            let fresh = self
                .last_accepted_anchor
                .map(|last| anchor_query >= last + self.cfg.consecutive as u64)
                .unwrap_or(true);
            if fresh {
                self.last_accepted_anchor = Some(anchor_query);
                let query_kf = self.db.get(anchor_query).expect("anchor stored");
                let match_kf = self.db.get(anchor_match).expect("match stored");
                out.push(StageMsg::Candidate {
                    query_id: anchor_query,
                    match_id: anchor_match,
                    score,
                    query_world: query_kf.world,
                    query_odom: query_kf.pose,
                    match_world: match_kf.world,
                    match_odom: match_kf.pose,
                });
            }
        }
    }
}

/// Bookkeeping stage: world sets, world graph and pose-graph construction.
struct BookkeepingStage<'p, P: LoopPoseProvider> {
    provider: &'p mut P,
    odometry_weights: EdgeWeights,
    loop_weights: EdgeWeights,
    worlds: WorldManager,
    problem: PoseGraphProblem,
    accepted: Vec<AcceptedLoop>,
    last_frame_in_world: std::collections::BTreeMap<WorldId, (u64, Pose)>,
}

impl<'p, P: LoopPoseProvider> BookkeepingStage<'p, P> {
    fn new(provider: &'p mut P, odometry_weights: EdgeWeights, loop_weights: EdgeWeights) -> Self {
        BookkeepingStage {
            provider,
            odometry_weights,
            loop_weights,
            worlds: WorldManager::new(),
            problem: PoseGraphProblem::new(),
            accepted: Vec::new(),
            last_frame_in_world: std::collections::BTreeMap::new(),
        }
    }

    fn process(&mut self, msg: StageMsg) {
        match msg {
            StageMsg::Frame { id, world, odometry } => {
                self.worlds.ensure_world(world);
                self.problem
                    .add_node(id, world, odometry)
                    .expect("stream ids are unique");
                if let Some((prev_id, prev_odom)) = self.last_frame_in_world.get(&world) {
                    let measurement = compose(&inverse(prev_odom), &odometry);
                    self.problem
                        .add_odometry_edge(*prev_id, id, measurement, self.odometry_weights)
                        .expect("nodes exist");
                }
                self.last_frame_in_world.insert(world, (id, odometry));
            }
            StageMsg::Candidate {
                query_id,
                match_id,
                score,
                query_world,
                query_odom,
                match_world,
                match_odom,
            } => {
                let measurement = self.provider.measure(query_id, match_id);
                let kind = if query_world == match_world {
                    CandidateKind::IntraWorld
                } else {
                    CandidateKind::InterWorld
                };
                let candidate = LoopCandidate {
                    query_id,
                    match_id,
                    score,
                    relative_pose: measurement.pose,
                    kind,
                };
                if kind == CandidateKind::InterWorld {
                    self.worlds
                        .register_inter_world(
                            &candidate,
                            query_world,
                            &query_odom,
                            match_world,
                            &match_odom,
                        )
                        .expect("kind checked above");
                }
                self.problem
                    .add_loop_edge(query_id, match_id, measurement.pose, self.loop_weights)
                    .expect("nodes exist");
                self.accepted.push(AcceptedLoop {
                    candidate,
                    query_world,
                    match_world,
                    outlier: measurement.outlier,
                });
            }
        }
    }
}

/// Run the pipeline over a keyframe stream.
pub fn run_pipeline<P: LoopPoseProvider>(
    stream: &[Keyframe],
    cfg: &PipelineConfig,
    provider: &mut P,
) -> Result<PipelineOutput, SimError> {
    let mut retrieval = RetrievalStage::new(cfg.placedb, cfg.kidnap);
    let mut bookkeeping = BookkeepingStage::new(provider, cfg.odometry_weights, cfg.loop_weights);

    match cfg.execution {
        ExecutionMode::Deterministic => {
            let mut buffer = Vec::new();
            for kf in stream {
                retrieval.process(kf, &mut buffer);
                for msg in buffer.drain(..) {
                    bookkeeping.process(msg);
                }
            }
        }
        ExecutionMode::Concurrent { queue_capacity } => {
            let capacity = queue_capacity.max(1);
            let (tx, rx) = mpsc::sync_channel::<StageMsg>(capacity);
            std::thread::scope(|scope| {
                let retrieval_ref = &mut retrieval;
                let producer = scope.spawn(move || {
                    let mut buffer = Vec::new();
                    for kf in stream {
                        retrieval_ref.process(kf, &mut buffer);
                        for msg in buffer.drain(..) {
                            tx.send(msg).expect("consumer alive");
                        }
                    }
                    drop(tx);
                });
                for msg in rx {
                    bookkeeping.process(msg);
                }
                producer.join().expect("retrieval stage panicked");
            });
        }
    }

    let BookkeepingStage {
        mut worlds,
        mut problem,
        accepted,
        ..
    } = bookkeeping;

    problem.initialize(&mut worlds);
    let initial_trajectory: Vec<FramePose> = problem
        .nodes()
        .map(|n| FramePose {
            frame: n.id,
            world: n.world,
            pose: n.pose,
        })
        .collect();
    let solve_report = if cfg.solve {
        Some(problem.optimize(&mut worlds, &cfg.optimize))
    } else {
        None
    };
    let optimized_trajectory: Vec<FramePose> = problem
        .nodes()
        .map(|n| FramePose {
            frame: n.id,
            world: n.world,
            pose: n.pose,
        })
        .collect();

    let world_report = worlds.report(retrieval.kidnaps.clone());
    let g2o = problem.dump_g2o(&cfg.optimize);
    Ok(PipelineOutput {
        frames_processed: stream.len() as u64,
        keyframes_stored: retrieval.db.len() as u64,
        world_report,
        accepted,
        records: retrieval.records,
        solve_report,
        initial_trajectory,
        optimized_trajectory,
        g2o,
    })
}

/// Measurement source that hands out identity poses; good enough for
/// retrieval-only evaluation where loop geometry is never used.
pub struct IdentityProvider;

impl LoopPoseProvider for IdentityProvider {
    fn measure(&mut self, _query_id: u64, _match_id: u64) -> crate::sim::LoopMeasurement {
        crate::sim::LoopMeasurement {
            pose: Pose::identity(),
            outlier: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::placedb::pr_curve;
    use crate::posegraph::ate;
    use crate::sim::{
        generate, KidnapSpec, MeasurementConfig, OdometryNoise, SimConfig, SimLoopProvider,
    };

    fn no_kidnap_config() -> SimConfig {
        SimConfig {
            seed: 11,
            descriptor_dim: 64,
            place_count: 20,
            waypoints: (0..20).collect(),
            dwell: 2,
            frames: 140,
            descriptor_noise: 0.1,
            ..Default::default()
        }
    }

    fn pipeline_cfg(exclusion: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.placedb.exclusion_window = exclusion;
        cfg
    }

    #[test]
    fn stream_without_revisits_stays_single_world_without_loops() {
        let cfg = SimConfig {
            seed: 2,
            descriptor_dim: 32,
            place_count: 30,
            waypoints: (0..30).collect(),
            dwell: 2,
            frames: 60, // one pass, no revisits
            descriptor_noise: 0.1,
            ..Default::default()
        };
        let (stream, truth) = generate(&cfg).unwrap();
        let mut provider = SimLoopProvider::new(&truth, MeasurementConfig::default(), 5);
        let out = run_pipeline(&stream, &pipeline_cfg(40), &mut provider).unwrap();
        assert_eq!(out.world_report.sets.len(), 1);
        assert!(out.accepted.is_empty());
        assert_eq!(out.keyframes_stored, 60);
        // Output equals odometry exactly.
        for fp in &out.optimized_trajectory {
            assert!(fp.pose.is_close(&stream[fp.frame as usize].pose, 1e-9));
        }
    }

    #[test]
    fn revisits_produce_intra_world_loops_and_low_drift() {
        let mut sim = no_kidnap_config();
        sim.odometry_noise = OdometryNoise {
            sigma_trans: 0.01,
            sigma_rot: 0.0,
        };
        let (stream, truth) = generate(&sim).unwrap();
        let mut provider = SimLoopProvider::new(&truth, MeasurementConfig::default(), 6);
        let out = run_pipeline(&stream, &pipeline_cfg(30), &mut provider).unwrap();
        assert!(!out.accepted.is_empty());
        assert!(out
            .accepted
            .iter()
            .all(|a| a.candidate.kind == CandidateKind::IntraWorld));

        let frames = out.root_set_frames();
        let (initial, optimized) = out.aligned_poses(&frames);
        let gt: Vec<Pose> = frames
            .iter()
            .map(|f| truth.poses[*f as usize])
            .collect();
        let before = ate(&initial, &gt);
        let after = ate(&optimized, &gt);
        assert!(
            after.translation_rmse < before.translation_rmse,
            "before {} after {}",
            before.translation_rmse,
            after.translation_rmse
        );
    }

    #[test]
    fn kidnap_recovery_merges_worlds() {
        let sim = SimConfig {
            seed: 21,
            descriptor_dim: 64,
            place_count: 20,
            waypoints: (0..20).collect(),
            dwell: 2,
            frames: 260,
            descriptor_noise: 0.05,
            kidnaps: vec![KidnapSpec {
                frame: 90,
                teleport_to: 0,
                duration: 8,
            }],
            ..Default::default()
        };
        let (stream, truth) = generate(&sim).unwrap();
        let mut provider = SimLoopProvider::new(&truth, MeasurementConfig::default(), 7);
        let out = run_pipeline(&stream, &pipeline_cfg(50), &mut provider).unwrap();
        assert_eq!(out.world_report.worlds.len(), 2);
        assert_eq!(out.world_report.kidnaps.len(), 1);
        assert!(out
            .accepted
            .iter()
            .any(|a| a.candidate.kind == CandidateKind::InterWorld));
        // Worlds merged into one set.
        assert_eq!(out.world_report.sets.len(), 1);
        // The recovered world offset matches ground truth.
        let edge = &out.world_report.edges[0];
        let expected = truth.world_pair_offset(edge.from, edge.to);
        assert!(edge.pose.is_close(&expected, 1e-9));
    }

    #[test]
    fn concurrent_mode_accepts_identical_candidates() {
        let mut sim = no_kidnap_config();
        sim.frames = 300;
        sim.kidnaps = vec![KidnapSpec {
            frame: 120,
            teleport_to: 0,
            duration: 10,
        }];
        sim.odometry_noise = OdometryNoise {
            sigma_trans: 0.005,
            sigma_rot: 0.001,
        };
        let (stream, truth) = generate(&sim).unwrap();

        let run = |mode: ExecutionMode| {
            let mut provider = SimLoopProvider::new(&truth, MeasurementConfig::default(), 9);
            let mut cfg = pipeline_cfg(40);
            cfg.execution = mode;
            cfg.solve = false; // the concurrency contract is about candidates
            run_pipeline(&stream, &cfg, &mut provider).unwrap()
        };
        let det = run(ExecutionMode::Deterministic);
        for capacity in [1, 4, 64] {
            let conc = run(ExecutionMode::Concurrent {
                queue_capacity: capacity,
            });
            assert_eq!(
                serde_json::to_string(&det.accepted).unwrap(),
                serde_json::to_string(&conc.accepted).unwrap()
            );
            assert_eq!(
                serde_json::to_string(&det.world_report).unwrap(),
                serde_json::to_string(&conc.world_report).unwrap()
            );
            assert_eq!(
                serde_json::to_string(&det.initial_trajectory).unwrap(),
                serde_json::to_string(&conc.initial_trajectory).unwrap()
            );
        }
    }

    #[test]
    fn retrieval_records_score_well_on_clean_streams() {
        // Memory/live structure: one full lap fills the database, the second
        // lap queries it, so each frame has one eligible true match.
        let sim = SimConfig {
            seed: 11,
            descriptor_dim: 64,
            place_count: 40,
            waypoints: (0..40).collect(),
            dwell: 2,
            frames: 160,
            descriptor_noise: 0.3,
            ..Default::default()
        };
        let (stream, truth) = generate(&sim).unwrap();
        let mut provider = SimLoopProvider::new(&truth, MeasurementConfig::default(), 4);
        let mut cfg = pipeline_cfg(60);
        cfg.solve = false;
        let out = run_pipeline(&stream, &cfg, &mut provider).unwrap();
        let records = attach_ground_truth(&out.records, &truth, cfg.placedb.exclusion_window);
        let curve = pr_curve(&records, cfg.placedb.locality_window).unwrap();
        assert!(curve.auc > 0.9, "auc {}", curve.auc);
    }
}
