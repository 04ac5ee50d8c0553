//! Embedded deformation graph over the sparse map and its optimization.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::GlobalMap;
use crate::lie::{hat, so3, Pose};
use crate::linalg::symmetrize;
use crate::simulation::rng::{stream, Stream};
use crate::surfel_map::SparseSurfel;
use crate::{Mat3, Vec3};

#[derive(Debug, Error)]
pub enum DeformationError {
    #[error("need at least {needed} sparse surfels for a graph, got {got}")]
    TooFewSurfels { needed: usize, got: usize },
    #[error("graph optimization needs at least one loop constraint")]
    NoConstraints,
    #[error("invalid deformation config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformConfig {
    /// Nodes per square meter of surfel area.
    pub node_density: f64,
    pub surfel_radius: f64,
    /// Temporal neighbors per node used by the regularizer.
    pub k_node: usize,
    /// Spatial neighbors blended per point.
    pub k_blend: usize,
    /// Points farther than this from every admissible node are left alone.
    pub max_influence: f64,
    /// Nodes whose timestamp differs from the point's by this much or more
    /// are not blended.
    pub temporal_gate: f64,
    pub w_reg: f64,
    pub w_pin: f64,
    pub w_loop: f64,
    pub max_iterations: usize,
    pub cost_tolerance: f64,
    pub n_loop: usize,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            node_density: 0.5,
            surfel_radius: 0.02,
            k_node: 4,
            k_blend: 4,
            max_influence: f64::MAX,
            temporal_gate: f64::MAX,
            w_reg: 1.0,
            w_pin: 100.0,
            w_loop: 100.0,
            max_iterations: 30,
            cost_tolerance: 1e-10,
            n_loop: 256,
        }
    }
}

impl DeformConfig {
    pub fn validate(&self) -> Result<(), DeformationError> {
        let positive = [self.node_density, self.surfel_radius, self.max_influence, self.temporal_gate];
        if positive.iter().any(|v| !(*v > 0.0)) || self.k_node == 0 || self.k_blend == 0 {
            return Err(DeformationError::Invalid("densities, radii, gates and neighbor counts must be positive".into()));
        }
        if [self.w_reg, self.w_pin, self.w_loop].iter().any(|w| !(*w >= 0.0)) {
            return Err(DeformationError::Invalid("weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub position: Vec3,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub timestamp: f64,
}

#[derive(Clone, Debug)]
pub struct DeformGraph {
    pub nodes: Vec<Node>,
    /// Temporal neighbors of each node; pairs further apart in time than the
    /// temporal gate are not linked.
    pub neighbours: Vec<Vec<usize>>,
    pub k_blend: usize,
    pub max_influence: f64,
    pub temporal_gate: f64,
}

/// Node count for a map of `surfel_count` discs.
pub fn node_count(surfel_count: usize, cfg: &DeformConfig) -> usize {
    (cfg.node_density * surfel_count as f64 * std::f64::consts::PI * cfg.surfel_radius.powi(2)).ceil() as usize
}

/// Samples graph nodes from sparse centroids. The count follows the dense
/// surfel area, clamped to `[k_node + 1, sparse.len()]`.
pub fn build_graph(sparse: &[SparseSurfel], dense_count: usize, cfg: &DeformConfig, seed: u64) -> Result<DeformGraph, DeformationError> {
    cfg.validate()?;
    let needed = cfg.k_node + 1;
    if sparse.len() < needed {
        return Err(DeformationError::TooFewSurfels { needed, got: sparse.len() });
    }
    let n = node_count(dense_count, cfg).clamp(needed, sparse.len());
    let mut rng = stream(seed, Stream::Graph);
    let mut picked: Vec<usize> = sample(&mut rng, sparse.len(), n).into_vec();
    picked.sort_by(|&a, &b| sparse[a].timestamp.total_cmp(&sparse[b].timestamp).then(a.cmp(&b)));
    let nodes: Vec<Node> = picked
        .iter()
        .map(|&i| Node {
            position: sparse[i].centroid,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            timestamp: sparse[i].timestamp,
        })
        .collect();
    Ok(DeformGraph::new(nodes, cfg))
}

impl DeformGraph {
    /// Graph over `nodes`, which must already be in temporal order.
    pub fn new(nodes: Vec<Node>, cfg: &DeformConfig) -> Self {
        let half = cfg.k_node.div_ceil(2);
        let n = nodes.len();
        let neighbours = (0..n)
            .map(|j| {
                let lo = j.saturating_sub(half);
                let hi = (j + half).min(n.saturating_sub(1));
                (lo..=hi)
                    .filter(|&k| k != j && (nodes[k].timestamp - nodes[j].timestamp).abs() < cfg.temporal_gate)
                    .take(cfg.k_node)
                    .collect()
            })
            .collect();
        Self {
            nodes,
            neighbours,
            k_blend: cfg.k_blend,
            max_influence: cfg.max_influence,
            temporal_gate: cfg.temporal_gate,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.nodes.iter().all(|n| n.rotation == Mat3::identity() && n.translation == Vec3::zeros())
    }

    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.rotation = Mat3::identity();
            n.translation = Vec3::zeros();
        }
    }

    /// Writes one rigid motion into every node.
    pub fn set_rigid(&mut self, pose: &Pose) {
        for n in &mut self.nodes {
            n.rotation = *pose.rotation();
            n.translation = pose.transform_point(&n.position) - n.position;
        }
    }

    /// Blending nodes for a point at time `t` and their normalized weights.
    /// Empty when the point is out of support.
    pub fn blend_weights(&self, p: &Vec3, t: f64) -> Vec<(usize, f64)> {
        let mut near: Vec<(usize, f64)> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| (n.timestamp - t).abs() < self.temporal_gate)
            .map(|(j, n)| (j, (p - n.position).norm()))
            .collect();
        near.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        near.truncate(self.k_blend);
        if near.is_empty() || near[0].1 > self.max_influence {
            return Vec::new();
        }
        let d_max = near.last().map_or(0.0, |x| x.1);
        let mut weights: Vec<(usize, f64)> = near.iter().map(|&(j, d)| (j, if d_max > 0.0 { 1.0 - d / d_max } else { 0.0 })).collect();
        let total: f64 = weights.iter().map(|w| w.1).sum();
        if total > 0.0 {
            for w in &mut weights {
                w.1 /= total;
            }
        } else {
            let equal = 1.0 / weights.len() as f64;
            for w in &mut weights {
                w.1 = equal;
            }
        }
        weights
    }

    fn apply_node(&self, j: usize, p: &Vec3) -> Vec3 {
        let n = &self.nodes[j];
        n.rotation * (p - n.position) + n.position + n.translation
    }

    /// Deformed point and whether it was out of support (then unchanged).
    pub fn deform_point(&self, p: &Vec3, t: f64) -> (Vec3, bool) {
        let w = self.blend_weights(p, t);
        if w.is_empty() {
            return (*p, true);
        }
        (w.iter().map(|&(j, wj)| self.apply_node(j, p) * wj).sum(), false)
    }

    /// Deformed unit normal; the flag reports a degenerate blend, in which
    /// case the input normal is returned.
    pub fn deform_normal(&self, n: &Vec3, p: &Vec3, t: f64) -> (Vec3, bool) {
        let w = self.blend_weights(p, t);
        if w.is_empty() {
            return (*n, false);
        }
        let v: Vec3 = w.iter().map(|&(j, wj)| self.nodes[j].rotation * n * wj).sum();
        let norm = v.norm();
        if norm < 1e-9 {
            return (*n, true);
        }
        (v / norm, false)
    }

    /// Blended (not orthonormalized) rotation at a point.
    pub fn blended_rotation(&self, p: &Vec3, t: f64) -> Option<Mat3> {
        let w = self.blend_weights(p, t);
        (!w.is_empty()).then(|| w.iter().map(|&(j, wj)| self.nodes[j].rotation * wj).sum())
    }

    pub fn deform_covariance(&self, cov: &Mat3, p: &Vec3, t: f64) -> Mat3 {
        match self.blended_rotation(p, t) {
            Some(r) => symmetrize(&(r * cov * r.transpose())),
            None => *cov,
        }
    }

    /// Deforms every surfel of both maps in place. Returns the number of
    /// dense surfels left untouched because they were out of support.
    pub fn deform_map(&self, map: &mut GlobalMap) -> usize {
        let mut outside = 0;
        map.dense.map_in_place(|s| {
            let Some(r) = self.blended_rotation(&s.position, s.timestamp) else {
                outside += 1;
                return;
            };
            let (n, _) = self.deform_normal(&s.normal, &s.position, s.timestamp);
            s.normal = n;
            s.position_cov = symmetrize(&(r * s.position_cov * r.transpose()));
            s.scatter = symmetrize(&(r * s.scatter * r.transpose()));
            s.beam_noise = symmetrize(&(r * s.beam_noise * r.transpose()));
            s.position = self.deform_point(&s.position, s.timestamp).0;
        });
        for s in &mut map.sparse {
            if let Some(r) = self.blended_rotation(&s.centroid, s.timestamp) {
                s.normal = self.deform_normal(&s.normal, &s.centroid, s.timestamp).0;
                s.covariance = symmetrize(&(r * s.covariance * r.transpose()));
                s.centroid = self.deform_point(&s.centroid, s.timestamp).0;
            }
        }
        outside
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopConstraint {
    pub p_src: Vec3,
    pub t_src: f64,
    pub p_dest: Vec3,
    pub t_dest: f64,
    pub weight: f64,
}

/// Loop constraints from a misalignment estimate: sources are sampled local
/// sparse centroids and destinations are their exact images under `pose`.
/// Destination times come from the nearest inactive sparse surfel.
pub fn make_loop_constraints(local_sparse: &[SparseSurfel], inactive_sparse: &[SparseSurfel], pose: &Pose, n_loop: usize, seed: u64) -> Vec<LoopConstraint> {
    if local_sparse.len() < n_loop {
        log::warn!("only {} sparse surfels available for {} loop constraints", local_sparse.len(), n_loop);
    }
    let count = n_loop.min(local_sparse.len());
    let mut rng = stream(seed, Stream::Correspondences);
    let mut picked = sample(&mut rng, local_sparse.len(), count).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|i| {
            let s = &local_sparse[i];
            let p_dest = pose.transform_point(&s.centroid);
            let t_dest = inactive_sparse
                .iter()
                .min_by(|a, b| (a.centroid - p_dest).norm_squared().total_cmp(&(b.centroid - p_dest).norm_squared()))
                .map_or(s.timestamp, |d| d.timestamp);
            LoopConstraint {
                p_src: s.centroid,
                t_src: s.timestamp,
                p_dest,
                t_dest,
                weight: 1.0,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GraphOutcome {
    pub graph: DeformGraph,
    pub converged: bool,
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
}

struct Residuals {
    rows: Vec<(Vec<(usize, [f64; 6])>, f64)>,
}

/// Three-component residual blocks of the graph cost, one scalar row per
/// axis, with Jacobian entries per node in (rotation, translation) order.
fn linearize(graph: &DeformGraph, loops: &[LoopConstraint], cfg: &DeformConfig) -> Residuals {
    let mut rows = Vec::new();
    let mut push_blend = |p: &Vec3, t: f64, target: &Vec3, scale: f64| {
        let w = graph.blend_weights(p, t);
        if w.is_empty() {
            return;
        }
        let value: Vec3 = w.iter().map(|&(j, wj)| graph.apply_node(j, p) * wj).sum::<Vec3>() - target;
        let blocks: Vec<(usize, Mat3)> = w
            .iter()
            .map(|&(j, wj)| {
                let n = &graph.nodes[j];
                (j, -hat(&(n.rotation * (p - n.position) + n.translation)) * wj)
            })
            .collect();
        for axis in 0..3 {
            let entries = blocks
                .iter()
                .zip(&w)
                .map(|((j, dr), (_, wj))| {
                    let mut e = [0.0; 6];
                    for c in 0..3 {
                        e[c] = dr[(axis, c)] * scale;
                    }
                    e[3 + axis] = wj * scale;
                    (*j, e)
                })
                .collect();
            rows.push((entries, value[axis] * scale));
        }
    };
    for c in loops {
        push_blend(&c.p_src, c.t_src, &c.p_dest, (cfg.w_loop * c.weight).sqrt());
        push_blend(&c.p_dest, c.t_dest, &c.p_dest, (cfg.w_pin * c.weight).sqrt());
    }
    let s = cfg.w_reg.sqrt();
    for (j, nbrs) in graph.neighbours.iter().enumerate() {
        let nj = &graph.nodes[j];
        for &k in nbrs {
            let nk = &graph.nodes[k];
            let arm = nj.rotation * (nk.position - nj.position);
            let value = arm + nj.position + nj.translation - nk.position - nk.translation;
            let dj = -hat(&(arm + nj.translation));
            let dk = hat(&nk.translation);
            for axis in 0..3 {
                let mut ej = [0.0; 6];
                let mut ek = [0.0; 6];
                for c in 0..3 {
                    ej[c] = dj[(axis, c)] * s;
                    ek[c] = dk[(axis, c)] * s;
                }
                ej[3 + axis] = s;
                ek[3 + axis] = -s;
                rows.push((vec![(j, ej), (k, ek)], value[axis] * s));
            }
        }
    }
    Residuals { rows }
}

pub fn graph_cost(graph: &DeformGraph, loops: &[LoopConstraint], cfg: &DeformConfig) -> f64 {
    linearize(graph, loops, cfg).rows.iter().map(|(_, r)| r * r).sum()
}

fn apply_update(graph: &DeformGraph, delta: &DVector<f64>) -> DeformGraph {
    let mut out = graph.clone();
    for (j, n) in out.nodes.iter_mut().enumerate() {
        let phi = Vec3::new(delta[6 * j], delta[6 * j + 1], delta[6 * j + 2]);
        let rho = Vec3::new(delta[6 * j + 3], delta[6 * j + 4], delta[6 * j + 5]);
        let r = so3::exp(&phi);
        n.rotation = crate::lie::project_to_so3(&(r * n.rotation));
        n.translation = r * n.translation + so3::left_jacobian(&phi) * rho;
    }
    out
}

/// Damped Gauss-Newton over all node corrections, starting from `graph`.
pub fn optimize_graph(graph: &DeformGraph, loops: &[LoopConstraint], cfg: &DeformConfig) -> Result<GraphOutcome, DeformationError> {
    cfg.validate()?;
    if loops.is_empty() {
        return Err(DeformationError::NoConstraints);
    }
    let dim = 6 * graph.nodes.len();
    let mut current = graph.clone();
    let initial_cost = graph_cost(&current, loops, cfg);
    let mut cost = initial_cost;
    let mut lambda = 1e-4;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let lin = linearize(&current, loops, cfg);
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        for (entries, r) in &lin.rows {
            for (a, ea) in entries {
                for i in 0..6 {
                    g[6 * a + i] += ea[i] * r;
                    for (b, eb) in entries {
                        for k in 0..6 {
                            h[(6 * a + i, 6 * b + k)] += ea[i] * eb[k];
                        }
                    }
                }
            }
        }
        let mut accepted = false;
        for _ in 0..8 {
            let mut damped = h.clone();
            for i in 0..dim {
                damped[(i, i)] += lambda * (h[(i, i)] + 1e-9);
            }
            let Some(delta) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = apply_update(&current, &delta);
            let c = graph_cost(&candidate, loops, cfg);
            if c < cost {
                let decrease = (cost - c) / cost.max(f64::MIN_POSITIVE);
                current = candidate;
                cost = c;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if decrease < cfg.cost_tolerance || delta.norm() < 1e-12 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            converged = cost <= initial_cost;
            break;
        }
        if converged {
            break;
        }
    }
    if !converged && cost < initial_cost && iterations >= cfg.max_iterations {
        converged = true;
        log::debug!("graph optimization stopped at the iteration cap with cost {cost:.3e}");
    }
    Ok(GraphOutcome {
        graph: current,
        converged: converged && cost.is_finite(),
        iterations,
        initial_cost,
        final_cost: cost,
    })
}
