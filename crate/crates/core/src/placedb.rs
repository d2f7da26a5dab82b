//! Descriptor store-and-compare retrieval and the loop-acceptance rule.
//!
//! Every keyframe descriptor is stored indexed by id; a query scores the
//! incoming descriptor against all stored keyframes except the latest T
//! (dense dot products, no approximate index). A loop hypothesis is accepted
//! when three consecutive queries score above the threshold and retrieve
//! indices within six keyframes of the first of the three retrievals; the
//! first retrieval becomes the reported match.

use crate::geometry::Pose;
use crate::netvlad::ImageDescriptor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type WorldId = u32;

#[derive(Debug, Error, PartialEq)]
pub enum PlaceDbError {
    #[error("keyframe id {id} is not greater than the latest stored id {latest}")]
    NonMonotonicId { id: u64, latest: u64 },
    #[error("no ground truth labels given")]
    EmptyGroundTruth,
}

/// Odometry keyframe: id, timestamp, owning world, pose in that world's
/// frame, whole-image descriptor and the tracked-feature count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Keyframe {
    pub id: u64,
    #[serde(rename = "t")]
    pub timestamp: f64,
    pub world: WorldId,
    pub pose: Pose,
    #[serde(rename = "desc")]
    pub descriptor: ImageDescriptor,
    #[serde(rename = "feat_count")]
    pub tracked_features: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaceDbConfig {
    /// Exclusion window: ignore the latest T keyframes when querying.
    pub exclusion_window: u64,
    /// Acceptance threshold on the dot-product score.
    pub accept_threshold: f64,
    /// Number of consecutive agreeing queries required.
    pub consecutive: usize,
    /// Retrieved indices must stay within this many keyframes of the first
    /// of the consecutive retrievals.
    pub locality_window: u64,
}

impl Default for PlaceDbConfig {
    fn default() -> Self {
        PlaceDbConfig {
            exclusion_window: 150,
            accept_threshold: 0.7,
            consecutive: 3,
            locality_window: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateKind {
    IntraWorld,
    InterWorld,
}

/// Accepted loop hypothesis between a query keyframe and an older match.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopCandidate {
    pub query_id: u64,
    pub match_id: u64,
    pub score: f64,
    /// Relative pose of the match frame expressed in the query frame,
    /// filled in by whatever supplies loop measurements.
    pub relative_pose: Pose,
    pub kind: CandidateKind,
}

/// Dense score of one stored keyframe against a query descriptor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Score {
    pub id: u64,
    pub score: f64,
}

/// Store-and-compare descriptor database.
#[derive(Debug, Default)]
pub struct PlaceDb {
    frames: Vec<Keyframe>,
}

impl PlaceDb {
    pub fn new() -> Self {
        PlaceDb { frames: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn latest_id(&self) -> Option<u64> {
        self.frames.last().map(|f| f.id)
    }

    pub fn get(&self, id: u64) -> Option<&Keyframe> {
        self.frames
            .binary_search_by_key(&id, |f| f.id)
            .ok()
            .map(|i| &self.frames[i])
    }

    pub fn frames(&self) -> &[Keyframe] {
        &self.frames
    }

    pub fn insert(&mut self, kf: Keyframe) -> Result<(), PlaceDbError> {
        if let Some(latest) = self.latest_id() {
            if kf.id <= latest {
                return Err(PlaceDbError::NonMonotonicId { id: kf.id, latest });
            }
        }
        self.frames.push(kf);
        Ok(())
    }

    /// Dot-product scores against every stored keyframe with
    /// `id <= latest - T`. Empty when everything falls inside the window.
    pub fn query(&self, descriptor: &ImageDescriptor, cfg: &PlaceDbConfig) -> Vec<Score> {
        let Some(latest) = self.latest_id() else {
            return Vec::new();
        };
        let Some(cutoff) = latest.checked_sub(cfg.exclusion_window) else {
            return Vec::new();
        };
        self.frames
            .iter()
            .take_while(|f| f.id <= cutoff)
            .map(|f| Score {
                id: f.id,
                score: descriptor.dot(&f.descriptor),
            })
            .collect()
    }

    /// Best-scoring eligible keyframe for the descriptor, if any.
    pub fn query_top(&self, descriptor: &ImageDescriptor, cfg: &PlaceDbConfig) -> Option<Score> {
        self.query(descriptor, cfg)
            .into_iter()
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap())
    }
}

/// Top retrieval of one query, as consumed by the acceptance rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryTop {
    pub query_id: u64,
    pub match_id: u64,
    pub score: f64,
}

/// Pure decision rule over the last `consecutive` query results: accept when
/// all scores clear the threshold, the query ids are consecutive, and every
/// retrieved index lies within the locality window of the first retrieval.
/// The first retrieval is reported as the match.
pub fn detect_loop(recent: &[QueryTop], cfg: &PlaceDbConfig) -> Option<(u64, u64, f64)> {
    if recent.len() < cfg.consecutive {
        return None;
    }
    let window = &recent[recent.len() - cfg.consecutive..];
    let first = &window[0];
    for (i, q) in window.iter().enumerate() {
        if q.score <= cfg.accept_threshold {
            return None;
        }
        if q.query_id != first.query_id + i as u64 {
            return None;
        }
        if q.match_id.abs_diff(first.match_id) > cfg.locality_window {
            return None;
        }
    }
    Some((first.query_id, first.match_id, first.score))
}

/// Sliding-window wrapper around [`detect_loop`] for stream processing.
#[derive(Debug, Default)]
pub struct LoopDecider {
    recent: Vec<QueryTop>,
}

impl LoopDecider {
    pub fn new() -> Self {
        LoopDecider { recent: Vec::new() }
    }

    pub fn push(&mut self, top: QueryTop, cfg: &PlaceDbConfig) -> Option<(u64, u64, f64)> {
        self.recent.push(top);
        let keep = cfg.consecutive;
        if self.recent.len() > keep {
            let drop = self.recent.len() - keep;
            self.recent.drain(..drop);
        }
        detect_loop(&self.recent, cfg)
    }
}

/// Per-frame retrieval record used for precision-recall evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub query_id: u64,
    /// Top retrieval, if the database had any eligible keyframe.
    pub match_id: Option<u64>,
    pub score: f64,
    /// True match index for this frame, when one exists.
    pub true_match: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

impl PrCurve {
    pub fn csv_header() -> &'static str {
        "threshold,precision,recall"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::csv_header());
        out.push('\n');
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
        }
        out
    }
}

/// Sweep the acceptance threshold over all observed scores. A retrieval is
/// accepted at threshold tau when its score exceeds tau, and counted correct
/// when the retrieved index is within `correct_window` of the true match.
/// Recall is against the number of frames that have a true match; the area
/// under the curve integrates precision over recall by the trapezoid rule.
pub fn pr_curve(
    records: &[RetrievalRecord],
    correct_window: u64,
) -> Result<PrCurve, PlaceDbError> {
    let total_true = records.iter().filter(|r| r.true_match.is_some()).count();
    if total_true == 0 {
        return Err(PlaceDbError::EmptyGroundTruth);
    }
    // Cumulative sweep: sorting by score descending makes each distinct
    // score a threshold at which everything seen so far is accepted.
    let mut scored: Vec<(f64, bool)> = records
        .iter()
        .filter_map(|r| {
            r.match_id.map(|m| {
                let correct = r
                    .true_match
                    .is_some_and(|truth| m.abs_diff(truth) <= correct_window);
                (r.score, correct)
            })
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut points = Vec::new();
    let mut accepted = 0usize;
    let mut correct = 0usize;
    let mut i = 0;
    while i < scored.len() {
        let tau = scored[i].0;
        while i < scored.len() && scored[i].0 == tau {
            accepted += 1;
            if scored[i].1 {
                correct += 1;
            }
            i += 1;
        }
        points.push(PrPoint {
            threshold: tau,
            precision: correct as f64 / accepted as f64,
            recall: correct as f64 / total_true as f64,
        });
    }

    // Trapezoid integration over recall, anchored at recall zero with the
    // precision of the tightest threshold.
    let mut auc = 0.0;
    if let Some(first) = points.first() {
        auc += first.recall * first.precision;
        for w in points.windows(2) {
            auc += (w[1].recall - w[0].recall) * 0.5 * (w[0].precision + w[1].precision);
        }
    }
    Ok(PrCurve { points, auc })
}

/// Serialize keyframes as JSON-lines.
pub fn write_jsonl(frames: &[Keyframe]) -> String {
    let mut out = String::new();
    for kf in frames {
        out.push_str(&serde_json::to_string(kf).expect("keyframe serializes"));
        out.push('\n');
    }
    out
}

pub fn read_jsonl(text: &str) -> Result<Vec<Keyframe>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
