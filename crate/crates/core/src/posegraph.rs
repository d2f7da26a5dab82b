//! Robust pose-graph optimization over all worlds.
//!
//! Nodes are keyframe poses, odometry edges chain consecutive keyframes of
//! one world, loop edges carry retrieval-derived relative poses. Every loop
//! edge owns a switch variable in [0, 1] that scales its residual, with a
//! prior pulling the switch toward 1; grossly inconsistent edges buy their
//! residual out by dropping the switch, which rejects outliers inside the
//! least-squares problem. Damped Gauss-Newton steps (Levenberg-Marquardt
//! schedule) over node twists and switches, Jacobians by central finite
//! differences per residual block.

use crate::geometry::{compose, inverse, se3_exp, se3_log, Pose, Twist};
use crate::placedb::WorldId;
use crate::worlds::WorldManager;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PoseGraphError {
    #[error("node {0} already exists")]
    DuplicateNode(u64),
    #[error("edge references missing node {0}")]
    DanglingNode(u64),
}

/// Scalar square-root information weights applied to the rotational and
/// translational halves of a 6-dof residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeWeights {
    pub rotation: f64,
    pub translation: f64,
}

impl Default for EdgeWeights {
    fn default() -> Self {
        EdgeWeights {
            rotation: 100.0,
            translation: 100.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub id: u64,
    pub world: WorldId,
    /// Raw odometry pose in the world's own frame.
    pub odometry: Pose,
    /// Current estimate in the root frame of the node's world set.
    pub pose: Pose,
    /// False when the node's world could not be related to its set root;
    /// such nodes keep odometry coordinates.
    pub resolved: bool,
}

#[derive(Debug, Clone)]
pub struct OdometryEdge {
    pub from: u64,
    pub to: u64,
    pub measurement: Pose,
    pub weights: EdgeWeights,
}

#[derive(Debug, Clone)]
pub struct LoopEdge {
    pub from: u64,
    pub to: u64,
    pub measurement: Pose,
    pub weights: EdgeWeights,
    pub switch: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub max_iterations: usize,
    pub initial_damping: f64,
    pub tolerance: f64,
    /// Weight of the (1 - s) switch prior residual.
    pub switch_prior_weight: f64,
    /// Freeze all switches at their current values.
    pub fix_switches: bool,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        OptimizeConfig {
            max_iterations: 50,
            initial_damping: 1e-6,
            tolerance: 1e-10,
            switch_prior_weight: 1.0,
            fix_switches: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchReport {
    pub from: u64,
    pub to: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub converged: bool,
    /// Total cost after every accepted step, starting at the initial cost.
    pub cost_history: Vec<f64>,
    pub switches: Vec<SwitchReport>,
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraphProblem {
    nodes: BTreeMap<u64, GraphNode>,
    odometry_edges: Vec<OdometryEdge>,
    loop_edges: Vec<LoopEdge>,
}

impl PoseGraphProblem {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn node(&self, id: u64) -> Option<&GraphNode> {
        self.nodes.get(&id)
    }

    pub fn odometry_edges(&self) -> &[OdometryEdge] {
        &self.odometry_edges
    }

    pub fn loop_edges(&self) -> &[LoopEdge] {
        &self.loop_edges
    }

    pub fn add_node(&mut self, id: u64, world: WorldId, odometry: Pose) -> Result<(), PoseGraphError> {
        if self.nodes.contains_key(&id) {
            return Err(PoseGraphError::DuplicateNode(id));
        }
        self.nodes.insert(
            id,
            GraphNode {
                id,
                world,
                odometry,
                pose: odometry,
                resolved: true,
            },
        );
        Ok(())
    }

    fn check_endpoints(&self, from: u64, to: u64) -> Result<(), PoseGraphError> {
        for id in [from, to] {
            if !self.nodes.contains_key(&id) {
                return Err(PoseGraphError::DanglingNode(id));
            }
        }
        Ok(())
    }

    pub fn add_odometry_edge(
        &mut self,
        from: u64,
        to: u64,
        measurement: Pose,
        weights: EdgeWeights,
    ) -> Result<(), PoseGraphError> {
        self.check_endpoints(from, to)?;
        self.odometry_edges.push(OdometryEdge {
            from,
            to,
            measurement,
            weights,
        });
        Ok(())
    }

    /// Loop edges start fully trusted: switch value 1.
    pub fn add_loop_edge(
        &mut self,
        from: u64,
        to: u64,
        measurement: Pose,
        weights: EdgeWeights,
    ) -> Result<(), PoseGraphError> {
        self.check_endpoints(from, to)?;
        self.loop_edges.push(LoopEdge {
            from,
            to,
            measurement,
            weights,
            switch: 1.0,
        });
        Ok(())
    }

    /// Seed node estimates from world offsets: each node pose becomes the
    /// transform from its set root to its world, composed with its odometry.
    /// Worlds without a resolvable transform keep raw odometry and are
    /// marked unresolved.
    pub fn initialize(&mut self, worlds: &mut WorldManager) {
        for node in self.nodes.values_mut() {
            let root = worlds.set_root(node.world);
            match worlds.relative_pose_between_worlds(root, node.world) {
                Some(root_from_world) => {
                    node.pose = compose(&root_from_world, &node.odometry);
                    node.resolved = true;
                }
                None => {
                    node.pose = node.odometry;
                    node.resolved = false;
                }
            }
        }
    }

    /// Current estimates in id order.
    pub fn poses(&self) -> Vec<(u64, Pose)> {
        self.nodes.values().map(|n| (n.id, n.pose)).collect()
    }

    /// Anchor node per world set: the lowest node id among nodes whose world
    /// maps to each set root. Anchors are excluded from the variables, which
    /// fixes the gauge of every connected component.
    fn anchors(&self, worlds: &mut WorldManager) -> Vec<u64> {
        let mut per_root: BTreeMap<WorldId, u64> = BTreeMap::new();
        for node in self.nodes.values() {
            let root = worlds.set_root(node.world);
            per_root.entry(root).or_insert(node.id);
        }
        per_root.into_values().collect()
    }

    /// Residual blocks at the given state. Layout: 6 entries per odometry
    /// edge, 6 per loop edge (scaled by its switch), then 1 per loop edge
    /// for the switch prior (unless switches are fixed).
    fn residuals(&self, cfg: &OptimizeConfig) -> DVector<f64> {
        let rows = 6 * (self.odometry_edges.len() + self.loop_edges.len())
            + if cfg.fix_switches {
                0
            } else {
                self.loop_edges.len()
            };
        let mut r = DVector::zeros(rows);
        let mut row = 0;
        for e in &self.odometry_edges {
            let block = pose_residual(
                &self.nodes[&e.from].pose,
                &self.nodes[&e.to].pose,
                &e.measurement,
                &e.weights,
            );
            r.rows_mut(row, 6).copy_from(&block);
            row += 6;
        }
        for e in &self.loop_edges {
            let block = pose_residual(
                &self.nodes[&e.from].pose,
                &self.nodes[&e.to].pose,
                &e.measurement,
                &e.weights,
            ) * e.switch;
            r.rows_mut(row, 6).copy_from(&block);
            row += 6;
        }
        if !cfg.fix_switches {
            for e in &self.loop_edges {
                r[row] = cfg.switch_prior_weight * (1.0 - e.switch);
                row += 1;
            }
        }
        r
    }

    fn cost(&self, cfg: &OptimizeConfig) -> f64 {
        self.residuals(cfg).norm_squared()
    }

    /// Damped least-squares over node twists and switch values.
    pub fn optimize(&mut self, worlds: &mut WorldManager, cfg: &OptimizeConfig) -> SolveReport {
        let anchors = self.anchors(worlds);
        let mut var_offset: BTreeMap<u64, usize> = BTreeMap::new();
        let mut next = 0usize;
        for node in self.nodes.values() {
            if !anchors.contains(&node.id) {
                var_offset.insert(node.id, next);
                next += 6;
            }
        }
        let switch_base = next;
        let n_vars = if cfg.fix_switches {
            next
        } else {
            next + self.loop_edges.len()
        };

        let initial_cost = self.cost(cfg);
        let mut cost = initial_cost;
        let mut cost_history = vec![cost];
        let mut damping = cfg.initial_damping;
        let mut iterations = 0;
        let mut converged = n_vars == 0;

        'outer: for _ in 0..cfg.max_iterations {
            if converged {
                break;
            }
            iterations += 1;
            let (h, g) = self.normal_equations(cfg, &var_offset, switch_base, n_vars);
            if g.amax() < 1e-12 {
                converged = true;
                break;
            }
            // Inner damping loop: retry with stronger damping until a step
            // reduces the cost.
            loop {
                let mut damped = h.clone();
                for i in 0..n_vars {
                    let d = h[(i, i)].max(1e-12);
                    damped[(i, i)] += damping * d;
                }
                let step = damped.cholesky().map(|c| c.solve(&(-&g)));
                let accepted = step.and_then(|delta| {
                    let saved = self.apply_step(&delta, &var_offset, switch_base, cfg);
                    let new_cost = self.cost(cfg);
                    if new_cost < cost {
                        Some(new_cost)
                    } else {
                        self.restore(saved);
                        None
                    }
                });
                match accepted {
                    Some(new_cost) => {
                        let improvement = cost - new_cost;
                        cost = new_cost;
                        cost_history.push(cost);
                        damping = (damping / 10.0).max(1e-12);
                        if improvement <= cfg.tolerance * cost.max(1e-12) {
                            converged = true;
                        }
                        break;
                    }
                    None => {
                        damping *= 10.0;
                        if damping > 1e14 {
                            converged = true;
                            break 'outer;
                        }
                    }
                }
            }
        }

        SolveReport {
            iterations,
            initial_cost,
            final_cost: cost,
            converged,
            cost_history,
            switches: self
                .loop_edges
                .iter()
                .map(|e| SwitchReport {
                    from: e.from,
                    to: e.to,
                    value: e.switch,
                })
                .collect(),
        }
    }

    /// Build J^T J and J^T r by central finite differences per residual
    /// block; each block touches at most two nodes and one switch.
    fn normal_equations(
        &self,
        cfg: &OptimizeConfig,
        var_offset: &BTreeMap<u64, usize>,
        switch_base: usize,
        n_vars: usize,
    ) -> (DMatrix<f64>, DVector<f64>) {
        const STEP: f64 = 1e-6;
        let mut h = DMatrix::zeros(n_vars, n_vars);
        let mut g = DVector::zeros(n_vars);

        let mut process_block = |residual: &dyn Fn(&[(u64, Pose)], f64) -> DVector<f64>,
                                 node_ids: &[u64],
                                 switch: Option<(usize, f64)>,
                                 base: &DVector<f64>| {
            // Collect the free parameters this block depends on.
            let mut cols: Vec<usize> = Vec::new();
            let mut jac: Vec<DVector<f64>> = Vec::new();
            let base_poses: Vec<(u64, Pose)> = node_ids
                .iter()
                .map(|id| (*id, self.nodes[id].pose))
                .collect();
            for (slot, id) in node_ids.iter().enumerate() {
                let Some(&offset) = var_offset.get(id) else {
                    continue;
                };
                for axis in 0..6 {
                    let mut twist = Twist::zero();
                    match axis {
                        0..=2 => twist.rotational[axis] = STEP,
                        _ => twist.translational[axis - 3] = STEP,
                    }
                    let mut plus = base_poses.clone();
                    plus[slot].1 = compose(&plus[slot].1, &se3_exp(&twist));
                    let r_plus = residual(&plus, switch.map(|s| s.1).unwrap_or(1.0));
                    match axis {
                        0..=2 => twist.rotational[axis] = -STEP,
                        _ => twist.translational[axis - 3] = -STEP,
                    }
                    let mut minus = base_poses.clone();
                    minus[slot].1 = compose(&minus[slot].1, &se3_exp(&twist));
                    let r_minus = residual(&minus, switch.map(|s| s.1).unwrap_or(1.0));
                    cols.push(offset + axis);
                    jac.push((r_plus - r_minus) / (2.0 * STEP));
                }
            }
            if let Some((col, s)) = switch {
                let r_plus = residual(&base_poses, s + STEP);
                let r_minus = residual(&base_poses, s - STEP);
                cols.push(col);
                jac.push((r_plus - r_minus) / (2.0 * STEP));
            }
            for (a, ca) in cols.iter().enumerate() {
                g[*ca] += jac[a].dot(base);
                for (b, cb) in cols.iter().enumerate() {
                    h[(*ca, *cb)] += jac[a].dot(&jac[b]);
                }
            }
        };

        for e in &self.odometry_edges {
            let meas = e.measurement;
            let weights = e.weights;
            let res = move |poses: &[(u64, Pose)], _s: f64| {
                pose_residual(&poses[0].1, &poses[1].1, &meas, &weights)
            };
            let base = pose_residual(
                &self.nodes[&e.from].pose,
                &self.nodes[&e.to].pose,
                &meas,
                &weights,
            );
            process_block(&res, &[e.from, e.to], None, &base);
        }
        for (i, e) in self.loop_edges.iter().enumerate() {
            let meas = e.measurement;
            let weights = e.weights;
            let res = move |poses: &[(u64, Pose)], s: f64| {
                pose_residual(&poses[0].1, &poses[1].1, &meas, &weights) * s
            };
            let base = pose_residual(
                &self.nodes[&e.from].pose,
                &self.nodes[&e.to].pose,
                &meas,
                &weights,
            ) * e.switch;
            let switch = if cfg.fix_switches {
                None
            } else {
                Some((switch_base + i, e.switch))
            };
            process_block(&res, &[e.from, e.to], switch, &base);
        }
        if !cfg.fix_switches {
            let lambda = cfg.switch_prior_weight;
            for (i, e) in self.loop_edges.iter().enumerate() {
                let col = switch_base + i;
                // Analytic: d/ds of lambda*(1-s) is -lambda.
                let base = lambda * (1.0 - e.switch);
                g[col] += -lambda * base;
                h[(col, col)] += lambda * lambda;
            }
        }
        (h, g)
    }

    /// Apply an update, returning the previous state for rollback.
    fn apply_step(
        &mut self,
        delta: &DVector<f64>,
        var_offset: &BTreeMap<u64, usize>,
        switch_base: usize,
        cfg: &OptimizeConfig,
    ) -> (Vec<(u64, Pose)>, Vec<f64>) {
        let saved_poses: Vec<(u64, Pose)> = var_offset
            .keys()
            .map(|id| (*id, self.nodes[id].pose))
            .collect();
        let saved_switches: Vec<f64> = self.loop_edges.iter().map(|e| e.switch).collect();
        for (id, offset) in var_offset {
            let twist = Twist::from_parts(
                Vector3::new(delta[offset + 0], delta[offset + 1], delta[offset + 2]),
                Vector3::new(delta[offset + 3], delta[offset + 4], delta[offset + 5]),
            );
            let node = self.nodes.get_mut(id).expect("variable node exists");
            node.pose = compose(&node.pose, &se3_exp(&twist));
        }
        if !cfg.fix_switches {
            for (i, e) in self.loop_edges.iter_mut().enumerate() {
                e.switch = (e.switch + delta[switch_base + i]).clamp(0.0, 1.0);
            }
        }
        (saved_poses, saved_switches)
    }

    fn restore(&mut self, saved: (Vec<(u64, Pose)>, Vec<f64>)) {
        for (id, pose) in saved.0 {
            self.nodes.get_mut(&id).expect("node exists").pose = pose;
        }
        for (e, s) in self.loop_edges.iter_mut().zip(saved.1) {
            e.switch = s;
        }
    }

    /// Plain-text dump: `VERTEX_SE3:QUAT` and `EDGE_SE3:QUAT` lines in the
    /// usual id/translation/quaternion order plus one `SWITCH` line per loop
    /// edge.
    pub fn dump_g2o(&self, cfg: &OptimizeConfig) -> String {
        let mut out = String::new();
        let vertex = |n: &GraphNode| {
            let q = n.pose.rotation.quaternion();
            let t = n.pose.translation;
            format!(
                "VERTEX_SE3:QUAT {} {} {} {} {} {} {} {}\n",
                n.id, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            )
        };
        for n in self.nodes.values() {
            out.push_str(&vertex(n));
        }
        let edge_line = |tag: &str, from: u64, to: u64, m: &Pose, w: &EdgeWeights| {
            let q = m.rotation.quaternion();
            let t = m.translation;
            let mut line = format!(
                "{tag} {from} {to} {} {} {} {} {} {} {}",
                t.x, t.y, t.z, q.i, q.j, q.k, q.w
            );
            // Upper-triangular 6x6 information from the scalar weights:
            // translation block first, then rotation, matching the vertex
            // ordering above.
            let diag = [
                w.translation * w.translation,
                w.translation * w.translation,
                w.translation * w.translation,
                w.rotation * w.rotation,
                w.rotation * w.rotation,
                w.rotation * w.rotation,
            ];
            for i in 0..6 {
                for j in i..6 {
                    line.push_str(&format!(" {}", if i == j { diag[i] } else { 0.0 }));
                }
            }
            line.push('\n');
            line
        };
        for e in &self.odometry_edges {
            out.push_str(&edge_line("EDGE_SE3:QUAT", e.from, e.to, &e.measurement, &e.weights));
        }
        for e in &self.loop_edges {
            out.push_str(&edge_line("EDGE_SE3:QUAT", e.from, e.to, &e.measurement, &e.weights));
            out.push_str(&format!(
                "SWITCH {} {} {} {}\n",
                e.from, e.to, e.switch, cfg.switch_prior_weight
            ));
        }
        out
    }
}

/// Weighted 6-dof residual of a relative-pose measurement:
/// `log(meas^-1 * (Ti^-1 * Tj))`, rotational part first.
fn pose_residual(t_i: &Pose, t_j: &Pose, measurement: &Pose, weights: &EdgeWeights) -> DVector<f64> {
    let predicted = compose(&inverse(t_i), t_j);
    let err = compose(&inverse(measurement), &predicted);
    let twist = se3_log(&err).unwrap_or(Twist {
        // Angle at pi cannot occur for sane graphs; fall back to a large
        // finite residual instead of failing the whole solve.
        rotational: Vector3::new(std::f64::consts::PI, 0.0, 0.0),
        translational: err.translation,
    });
    let mut r = DVector::zeros(6);
    for i in 0..3 {
        r[i] = weights.rotation * twist.rotational[i];
        r[i + 3] = weights.translation * twist.translational[i];
    }
    r
}

/// Absolute trajectory error after closed-form SE(3) alignment of the
/// estimate onto the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AteReport {
    pub translation_rmse: f64,
    pub rotation_rmse: f64,
}

pub fn ate(estimate: &[Pose], ground_truth: &[Pose]) -> AteReport {
    assert_eq!(estimate.len(), ground_truth.len());
    assert!(!estimate.is_empty());
    let n = estimate.len() as f64;
    let centroid = |poses: &[Pose]| {
        poses
            .iter()
            .fold(Vector3::zeros(), |acc, p| acc + p.translation)
            / n
    };
    let c_est = centroid(estimate);
    let c_gt = centroid(ground_truth);
    let mut w = Matrix3::zeros();
    for (e, g) in estimate.iter().zip(ground_truth.iter()) {
        w += (g.translation - c_gt) * (e.translation - c_est).transpose();
    }
    let svd = w.svd(true, true);
    let u = svd.u.expect("svd computes u");
    let v_t = svd.v_t.expect("svd computes v_t");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    let translation = c_gt - rotation * c_est;
    let align = Pose {
        rotation: nalgebra::UnitQuaternion::from_matrix(&rotation),
        translation,
    };

    let mut trans_sq = 0.0;
    let mut rot_sq = 0.0;
    for (e, g) in estimate.iter().zip(ground_truth.iter()) {
        let aligned = compose(&align, e);
        trans_sq += (aligned.translation - g.translation).norm_squared();
        let angle = aligned.rotation.angle_to(&g.rotation);
        rot_sq += angle * angle;
    }
    AteReport {
        translation_rmse: (trans_sq / n).sqrt(),
        rotation_rmse: (rot_sq / n).sqrt(),
    }
}
