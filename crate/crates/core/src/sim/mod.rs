//! Deterministic SLAM-stream simulator.
//!
//! Generates keyframe streams with drifty odometry, place descriptors with
//! controllable noise, revisit schedules and kidnap/teleport events, plus
//! the ground truth needed to score every downstream stage. Places sit on a
//! circle; the trajectory walks a waypoint tour, dwelling a few frames per
//! place, and loops through the tour until the frame budget runs out. A
//! kidnap blinds the sensor for a stretch of frames and teleports it to
//! another place, where a fresh odometry world begins.
//!
//! Everything is a pure function of the configuration: one seed, one stream.

pub mod pipeline;
pub mod tuples;

use crate::geometry::{compose, inverse, se3_exp, Pose, Twist};
use crate::netvlad::ImageDescriptor;
use crate::placedb::{Keyframe, WorldId};
use crate::worlds::{KidnapConfig, KidnapDetector, TrackingState};
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("invalid kidnap schedule: {0}")]
    InvalidSchedule(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryNoise {
    pub sigma_trans: f64,
    pub sigma_rot: f64,
}

impl Default for OdometryNoise {
    fn default() -> Self {
        OdometryNoise {
            sigma_trans: 0.0,
            sigma_rot: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LoopNoise {
    pub sigma_trans: f64,
    pub sigma_rot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureModel {
    pub nominal: u32,
    pub kidnap: u32,
}

impl Default for FeatureModel {
    fn default() -> Self {
        FeatureModel {
            nominal: 50,
            kidnap: 5,
        }
    }
}

/// One kidnap event: the camera is blinded for `duration` frames starting at
/// `frame` and teleported to `teleport_to`; the tour resumes from that
/// waypoint after recovery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidnapSpec {
    pub frame: u64,
    pub teleport_to: u32,
    pub duration: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub descriptor_dim: usize,
    pub place_count: u32,
    /// Waypoint tour over place ids; cycled until the frame budget is spent.
    pub waypoints: Vec<u32>,
    /// Frames spent at each waypoint.
    pub dwell: u64,
    pub frames: u64,
    #[serde(default)]
    pub odometry_noise: OdometryNoise,
    /// Scale of the random unit perturbation added to place anchors.
    #[serde(default)]
    pub descriptor_noise: f64,
    #[serde(default)]
    pub kidnaps: Vec<KidnapSpec>,
    #[serde(default)]
    pub features: FeatureModel,
    /// Spacing between neighboring places along the circle, meters.
    #[serde(default = "default_spacing")]
    pub place_spacing: f64,
}

fn default_spacing() -> f64 {
    2.0
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 7,
            descriptor_dim: 128,
            place_count: 40,
            waypoints: (0..40).collect(),
            dwell: 3,
            frames: 600,
            odometry_noise: OdometryNoise::default(),
            descriptor_noise: 0.2,
            kidnaps: Vec::new(),
            features: FeatureModel::default(),
            place_spacing: 2.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.waypoints.is_empty() {
            return Err(SimError::InvalidConfig("waypoint tour is empty".into()));
        }
        if self.dwell == 0 || self.frames == 0 || self.descriptor_dim == 0 {
            return Err(SimError::InvalidConfig(
                "dwell, frames and descriptor_dim must be positive".into(),
            ));
        }
        if let Some(w) = self
            .waypoints
            .iter()
            .find(|w| **w >= self.place_count)
        {
            return Err(SimError::InvalidConfig(format!(
                "waypoint {w} outside place universe {}",
                self.place_count
            )));
        }
        if self.descriptor_noise < 0.0
            || self.odometry_noise.sigma_trans < 0.0
            || self.odometry_noise.sigma_rot < 0.0
        {
            return Err(SimError::InvalidConfig("negative noise scale".into()));
        }
        let mut previous_end = 0u64;
        for (i, k) in self.kidnaps.iter().enumerate() {
            if k.duration == 0 {
                return Err(SimError::InvalidSchedule(format!(
                    "kidnap {i} has zero duration"
                )));
            }
            if i > 0 && k.frame < previous_end {
                return Err(SimError::InvalidSchedule(format!(
                    "kidnap {i} overlaps or precedes the previous interval"
                )));
            }
            if k.teleport_to >= self.place_count {
                return Err(SimError::InvalidSchedule(format!(
                    "kidnap {i} teleports outside the place universe"
                )));
            }
            if !self.waypoints.contains(&k.teleport_to) {
                return Err(SimError::InvalidSchedule(format!(
                    "kidnap {i} teleports to place {} which is not on the tour",
                    k.teleport_to
                )));
            }
            if k.frame + k.duration >= self.frames {
                return Err(SimError::InvalidSchedule(format!(
                    "kidnap {i} does not end before the last frame"
                )));
            }
            previous_end = k.frame + k.duration;
        }
        Ok(())
    }

    /// Global pose of a place on the circle, heading along the tangent.
    pub fn place_pose(&self, place: u32) -> Pose {
        let radius = self.place_count as f64 * self.place_spacing / (2.0 * std::f64::consts::PI);
        let phi = 2.0 * std::f64::consts::PI * place as f64 / self.place_count as f64;
        Pose::from_planar(
            radius * phi.cos(),
            radius * phi.sin(),
            phi + std::f64::consts::FRAC_PI_2,
        )
    }
}

/// Everything the simulator knows that the pipeline has to rediscover.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Global pose per frame.
    pub poses: Vec<Pose>,
    /// Place id per frame.
    pub places: Vec<u32>,
    /// Frames emitted while blinded.
    pub kidnapped: Vec<bool>,
    /// World id per frame (the world the detector is in at that frame).
    pub worlds: Vec<WorldId>,
    /// Global pose of each world's odometry origin.
    pub world_offsets: Vec<Pose>,
}

impl GroundTruth {
    pub fn frames(&self) -> u64 {
        self.poses.len() as u64
    }

    /// Relative pose of frame `j` expressed in frame `i`.
    pub fn relative_pose(&self, i: u64, j: u64) -> Pose {
        compose(&inverse(&self.poses[i as usize]), &self.poses[j as usize])
    }

    /// Ground-truth transform of world `k1` expressed in world `k`.
    pub fn world_pair_offset(&self, k: WorldId, k1: WorldId) -> Pose {
        compose(
            &inverse(&self.world_offsets[k as usize]),
            &self.world_offsets[k1 as usize],
        )
    }

    /// Most recent earlier frame at the same place at least `gap` frames
    /// back, both frames tracking.
    pub fn true_match(&self, frame: u64, gap: u64) -> Option<u64> {
        if self.kidnapped[frame as usize] {
            return None;
        }
        let place = self.places[frame as usize];
        let cutoff = frame.checked_sub(gap)?;
        (0..=cutoff)
            .rev()
            .find(|j| !self.kidnapped[*j as usize] && self.places[*j as usize] == place)
    }

    /// All (later, earlier) same-place pairs with index gap at least `gap`.
    pub fn true_loop_pairs(&self, gap: u64) -> Vec<(u64, u64)> {
        let mut pairs = Vec::new();
        for i in 0..self.frames() {
            if self.kidnapped[i as usize] {
                continue;
            }
            let Some(cutoff) = i.checked_sub(gap) else {
                continue;
            };
            for j in 0..=cutoff {
                if !self.kidnapped[j as usize] && self.places[j as usize] == self.places[i as usize]
                {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }
}

fn random_unit_vector(dim: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn noise_twist(sigma_rot: f64, sigma_trans: f64, rng: &mut ChaCha12Rng) -> Twist {
    let gauss = |s: f64, rng: &mut ChaCha12Rng| -> f64 {
        if s == 0.0 {
            0.0
        } else {
            let g: f64 = StandardNormal.sample(rng);
            g * s
        }
    };
    Twist::from_parts(
        Vector3::new(
            gauss(sigma_rot, rng),
            gauss(sigma_rot, rng),
            gauss(sigma_rot, rng),
        ),
        Vector3::new(
            gauss(sigma_trans, rng),
            gauss(sigma_trans, rng),
            gauss(sigma_trans, rng),
        ),
    )
}

/// Generate the keyframe stream and its ground truth. Deterministic per
/// configuration.
pub fn generate(cfg: &SimConfig) -> Result<(Vec<Keyframe>, GroundTruth), SimError> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);

    // Place descriptor anchors, drawn once per place.
    let anchors: Vec<Vec<f64>> = (0..cfg.place_count)
        .map(|_| random_unit_vector(cfg.descriptor_dim, &mut rng))
        .collect();

    // Walk the tour, applying kidnap teleports, to lay out the per-frame
    // place schedule and in-dwell step.
    let mut places = Vec::with_capacity(cfg.frames as usize);
    let mut dwell_steps = Vec::with_capacity(cfg.frames as usize);
    let mut blinded = Vec::with_capacity(cfg.frames as usize);
    let mut cursor = 0usize;
    let mut step = 0u64;
    let mut kidnap_iter = cfg.kidnaps.iter().peekable();
    let mut active_kidnap: Option<&KidnapSpec> = None;
    let mut frame = 0u64;
    while frame < cfg.frames {
        if let Some(k) = active_kidnap {
            places.push(k.teleport_to);
            dwell_steps.push(0);
            blinded.push(true);
            if frame + 1 == k.frame + k.duration {
                // Resume the tour at the teleport waypoint.
                cursor = next_occurrence(&cfg.waypoints, cursor, k.teleport_to);
                step = 0;
                active_kidnap = None;
            }
            frame += 1;
            continue;
        }
        if let Some(k) = kidnap_iter.peek() {
            if k.frame == frame {
                active_kidnap = Some(kidnap_iter.next().unwrap());
                continue;
            }
        }
        places.push(cfg.waypoints[cursor]);
        dwell_steps.push(step);
        blinded.push(false);
        step += 1;
        if step == cfg.dwell {
            step = 0;
            cursor = (cursor + 1) % cfg.waypoints.len();
        }
        frame += 1;
    }

    // Ground-truth poses: place pose advanced slightly along the heading per
    // dwell step so consecutive frames move.
    let in_dwell_advance = 0.15;
    let gt_poses: Vec<Pose> = places
        .iter()
        .zip(dwell_steps.iter())
        .map(|(p, s)| {
            compose(
                &cfg.place_pose(*p),
                &Pose::from_translation(*s as f64 * in_dwell_advance, 0.0, 0.0),
            )
        })
        .collect();

    // Feature counts and the detector-derived world segmentation.
    let mut detector = KidnapDetector::new(KidnapConfig::default());
    let mut worlds_per_frame = Vec::with_capacity(cfg.frames as usize);
    let mut kidnapped = Vec::with_capacity(cfg.frames as usize);
    let mut world_offsets = vec![gt_poses[0]];
    let mut feature_counts = Vec::with_capacity(cfg.frames as usize);
    for f in 0..cfg.frames as usize {
        let count = if blinded[f] {
            cfg.features.kidnap
        } else {
            cfg.features.nominal
        };
        feature_counts.push(count);
        detector.update(count);
        let tracking = detector.state() == TrackingState::Tracking;
        kidnapped.push(!tracking);
        worlds_per_frame.push(detector.world());
        if tracking && detector.world() as usize == world_offsets.len() {
            world_offsets.push(gt_poses[f]);
        }
    }

    // Odometry: chained noisy relative poses, restarting at identity on
    // every world change; frozen while blinded.
    let mut odometry = Vec::with_capacity(cfg.frames as usize);
    let mut previous: Option<(usize, Pose)> = None; // (frame, odom) of last tracking frame
    let mut frozen = Pose::identity();
    for f in 0..cfg.frames as usize {
        if kidnapped[f] {
            odometry.push(frozen);
            continue;
        }
        let pose = match previous {
            Some((pf, podom)) if worlds_per_frame[pf] == worlds_per_frame[f] => {
                let truth_rel = compose(&inverse(&gt_poses[pf]), &gt_poses[f]);
                let noise = se3_exp(&noise_twist(
                    cfg.odometry_noise.sigma_rot,
                    cfg.odometry_noise.sigma_trans,
                    &mut rng,
                ));
                compose(&podom, &compose(&truth_rel, &noise))
            }
            _ => Pose::identity(),
        };
        previous = Some((f, pose));
        frozen = pose;
        odometry.push(pose);
    }

    // Descriptors: unit anchor plus a scaled random unit direction.
    let mut stream = Vec::with_capacity(cfg.frames as usize);
    for f in 0..cfg.frames as usize {
        let anchor = &anchors[places[f] as usize];
        let mut values = anchor.clone();
        if cfg.descriptor_noise > 0.0 {
            let u = random_unit_vector(cfg.descriptor_dim, &mut rng);
            for (v, n) in values.iter_mut().zip(u.iter()) {
                *v += cfg.descriptor_noise * n;
            }
        }
        stream.push(Keyframe {
            id: f as u64,
            timestamp: f as f64 * 0.1,
            world: worlds_per_frame[f],
            pose: odometry[f],
            descriptor: ImageDescriptor::normalized(values),
            tracked_features: feature_counts[f],
        });
    }

    let truth = GroundTruth {
        poses: gt_poses,
        places,
        kidnapped,
        worlds: worlds_per_frame,
        world_offsets,
    };
    Ok((stream, truth))
}

fn next_occurrence(waypoints: &[u32], from: usize, target: u32) -> usize {
    let n = waypoints.len();
    for offset in 0..n {
        let idx = (from + offset) % n;
        if waypoints[idx] == target {
            return idx;
        }
    }
    unreachable!("validated: teleport target is on the tour");
}

/// A loop-pair relative pose handed to the pipeline, with its outlier flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopMeasurement {
    pub pose: Pose,
    pub outlier: bool,
}

/// Source of relative poses for accepted loop candidates.
pub trait LoopPoseProvider: Send {
    fn measure(&mut self, query_id: u64, match_id: u64) -> LoopMeasurement;
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasurementConfig {
    #[serde(default)]
    pub noise: LoopNoise,
    /// Probability that a candidate pair is replaced by a far-off pose.
    #[serde(default)]
    pub outlier_fraction: f64,
}

/// Ground-truth-backed measurement provider with configurable noise and
/// outlier injection. Outlier decisions and noise draws are keyed on the
/// pair ids, so replays and reordered calls see identical measurements.
pub struct SimLoopProvider<'a> {
    truth: &'a GroundTruth,
    cfg: MeasurementConfig,
    seed: u64,
}

impl<'a> SimLoopProvider<'a> {
    pub fn new(truth: &'a GroundTruth, cfg: MeasurementConfig, seed: u64) -> Self {
        SimLoopProvider { truth, cfg, seed }
    }

    fn pair_rng(&self, i: u64, j: u64) -> ChaCha12Rng {
        let mixed = self
            .seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(i.wrapping_mul(0x2545F4914F6CDD1D))
            .wrapping_add(j);
        ChaCha12Rng::seed_from_u64(mixed)
    }
}

impl LoopPoseProvider for SimLoopProvider<'_> {
    fn measure(&mut self, query_id: u64, match_id: u64) -> LoopMeasurement {
        let truth_pose = self.truth.relative_pose(query_id, match_id);
        let mut rng = self.pair_rng(query_id, match_id);
        let outlier = self.cfg.outlier_fraction > 0.0
            && rng.random_range(0.0..1.0) < self.cfg.outlier_fraction;
        if outlier {
            // A pose several meters and a large yaw off the truth.
            let dir = rng.random_range(0.0..std::f64::consts::TAU);
            let dist = rng.random_range(3.0..6.0);
            let yaw = rng.random_range(0.7..1.5);
            let off = Pose::from_planar(dist * dir.cos(), dist * dir.sin(), yaw);
            return LoopMeasurement {
                pose: compose(&truth_pose, &off),
                outlier: true,
            };
        }
        let noise = se3_exp(&noise_twist(
            self.cfg.noise.sigma_rot,
            self.cfg.noise.sigma_trans,
            &mut rng,
        ));
        LoopMeasurement {
            pose: compose(&truth_pose, &noise),
            outlier: false,
        }
    }
}

/// Render a trajectory as `frame,x,y,z,qw,qx,qy,qz` CSV.
pub fn trajectory_csv(frames: &[(u64, Pose)]) -> String {
    let mut out = String::from("frame,x,y,z,qw,qx,qy,qz\n");
    for (id, pose) in frames {
        let q = pose.rotation.quaternion();
        let t = pose.translation;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            id, t.x, t.y, t.z, q.w, q.i, q.j, q.k
        ));
    }
    out
}
