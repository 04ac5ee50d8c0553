//! Active/inactive map bookkeeping and sparse point-to-plane ICP.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::lie::{exp_se3, Pose, Twist};
use crate::surfel_map::{SparseSurfel, SurfelIndex, SurfelMap};
use crate::Vec3;

use super::{fuse_colour, fuse_surfel, match_geometry, match_surfel, FusionError, MatchParams, Measurement, STABLE_OBSERVATIONS};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalConfig {
    /// Surfels older than this (s) are inactive.
    pub active_window: f64,
    /// Unstable surfels not re-observed for this long (s) are removed.
    pub cull_age: f64,
    /// Minimum ICP inlier fraction for a loop trigger.
    pub inlier_fraction: f64,
    /// Minimum mean displacement (m) of the local map for a loop trigger.
    pub trigger_distance: f64,
    /// Maximum number of unmatched local sparse surfels for reactivating
    /// overlapping inactive surfels.
    pub max_gaps: usize,
    pub icp_iterations: usize,
    pub icp_max_distance: f64,
    pub icp_inlier_distance: f64,
    pub matching: MatchParams,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            active_window: 30.0,
            cull_age: 60.0,
            inlier_fraction: 0.35,
            trigger_distance: 0.05,
            max_gaps: 50,
            icp_iterations: 20,
            icp_max_distance: 0.5,
            icp_inlier_distance: 0.05,
            matching: MatchParams::default(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct LocalMap {
    pub sparse: Vec<SparseSurfel>,
    pub dense: Vec<crate::surfel_map::DenseSurfel>,
}

#[derive(Clone, Debug, Default)]
pub struct GlobalMap {
    pub sparse: Vec<SparseSurfel>,
    pub dense: SurfelMap,
}

#[derive(Clone, Debug)]
pub struct IcpResult {
    /// Maps source points onto the target.
    pub pose: Pose,
    pub inlier_fraction: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Inlier (source centroid, target centroid) pairs at the final pose.
    pub pairs: Vec<(Vec3, Vec3)>,
    /// Mean displacement of the source centroids under `pose`.
    pub displacement: f64,
}

#[derive(Clone, Debug)]
pub struct DeformationTrigger {
    pub pose: Pose,
    pub inlier_fraction: f64,
    pub pairs: Vec<(Vec3, Vec3)>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub n_active: usize,
    pub n_inactive: usize,
    pub n_new: usize,
    pub n_fused: usize,
    pub n_culled: usize,
    pub icp_inlier: f64,
    pub icp_dist: f64,
    pub triggered: bool,
}

struct LevelIndex {
    by_level: BTreeMap<usize, SurfelIndex>,
}

impl LevelIndex {
    fn new(target: &[SparseSurfel]) -> Self {
        let mut by_level: BTreeMap<usize, SurfelIndex> = BTreeMap::new();
        for (i, s) in target.iter().enumerate() {
            by_level
                .entry(s.level)
                .or_insert_with(|| SurfelIndex::new(s.centroid, 8.0, 16))
                .insert(i as u64, s.centroid);
        }
        Self { by_level }
    }

    fn nearest(&self, level: usize, p: &Vec3) -> Option<(usize, f64)> {
        self.by_level.get(&level)?.nearest(p).map(|(i, d)| (i as usize, d))
    }
}

/// Point-to-plane ICP of source sparse centroids against target sparse
/// surfels of the same level, weighted by target planarity.
pub fn icp_point_to_plane(source: &[SparseSurfel], target: &[SparseSurfel], init: Pose, cfg: &TemporalConfig) -> IcpResult {
    let index = LevelIndex::new(target);
    let mut pose = init;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.icp_iterations {
        iterations += 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        let mut used = 0;
        for s in source {
            let p = pose.transform_point(&s.centroid);
            let Some((j, d)) = index.nearest(s.level, &p) else {
                continue;
            };
            let t = &target[j];
            if d > cfg.icp_max_distance || t.degenerate {
                continue;
            }
            let n = t.normal;
            let e = n.dot(&(t.centroid - p));
            let mut jac = Vector6::zeros();
            jac.fixed_rows_mut::<3>(0).copy_from(&(-p.cross(&n)));
            jac.fixed_rows_mut::<3>(3).copy_from(&(-n));
            let w = t.planarity;
            h += jac * jac.transpose() * w;
            g += jac * (w * e);
            used += 1;
        }
        if used < 6 {
            break;
        }
        let damped = h + Matrix6::identity() * (1e-9 * h.trace().max(1e-12));
        let Some(delta) = damped.cholesky().map(|c| c.solve(&(-g))) else {
            break;
        };
        let Ok(step) = exp_se3(&Twist(delta)) else {
            break;
        };
        pose = step.compose(&pose);
        if delta.norm() < 1e-7 {
            converged = true;
            break;
        }
    }
    let mut pairs = Vec::new();
    for s in source {
        let p = pose.transform_point(&s.centroid);
        if let Some((j, d)) = index.nearest(s.level, &p) {
            let t = &target[j];
            if d <= cfg.icp_max_distance && t.normal.dot(&(t.centroid - p)).abs() < cfg.icp_inlier_distance {
                pairs.push((s.centroid, t.centroid));
            }
        }
    }
    let displacement = if source.is_empty() {
        0.0
    } else {
        source.iter().map(|s| (pose.transform_point(&s.centroid) - s.centroid).norm()).sum::<f64>() / source.len() as f64
    };
    IcpResult {
        pose,
        inlier_fraction: if source.is_empty() { 0.0 } else { pairs.len() as f64 / source.len() as f64 },
        converged,
        iterations,
        pairs,
        displacement,
    }
}

/// Fuses a local map into the active part of the global map, checks the
/// local map against the inactive part and culls stale unstable surfels.
/// Returns a trigger when the local map is confidently misaligned with the
/// inactive map.
pub fn temporal_fusion_step(
    local: &LocalMap,
    global: &mut GlobalMap,
    now: f64,
    step: usize,
    cfg: &TemporalConfig,
) -> Result<(StepMetrics, Option<DeformationTrigger>), FusionError> {
    let is_active = |t: f64| now - t < cfg.active_window;
    let active: BTreeSet<u64> = global.dense.iter().filter(|(_, s)| is_active(s.timestamp)).map(|(i, _)| i).collect();
    let mut metrics = StepMetrics {
        step,
        n_active: active.len(),
        n_inactive: global.dense.len() - active.len(),
        ..StepMetrics::default()
    };

    let inactive_sparse: Vec<SparseSurfel> = global.sparse.iter().filter(|s| !is_active(s.timestamp)).cloned().collect();
    let mut trigger = None;
    let mut reactivate = false;
    if !inactive_sparse.is_empty() && !local.sparse.is_empty() {
        let icp = icp_point_to_plane(&local.sparse, &inactive_sparse, Pose::identity(), cfg);
        metrics.icp_inlier = icp.inlier_fraction;
        metrics.icp_dist = icp.displacement;
        let overlapping = icp.inlier_fraction > cfg.inlier_fraction;
        if overlapping && icp.displacement > cfg.trigger_distance {
            if icp.converged {
                trigger = Some(DeformationTrigger {
                    pose: icp.pose,
                    inlier_fraction: icp.inlier_fraction,
                    pairs: icp.pairs,
                });
            } else {
                log::warn!("step {step}: ICP did not converge; loop trigger suppressed");
            }
        } else if overlapping && local.sparse.len() - icp.pairs.len() < cfg.max_gaps {
            reactivate = true;
        }
    }
    metrics.triggered = trigger.is_some();

    let mut inserted: BTreeSet<u64> = BTreeSet::new();
    for src in &local.dense {
        let candidates = match_surfel(src, &global.dense, &cfg.matching);
        let best = candidates
            .into_iter()
            .filter(|id| !inserted.contains(id) && (reactivate || active.contains(id)))
            .filter_map(|id| {
                let dst = global.dense.get(id)?;
                let (_, d, sigma) = match_geometry(src, dst);
                Some((id, if sigma > 0.0 { d / sigma } else { 0.0 }))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        match best {
            Some((id, _)) => {
                let dst = global.dense.get(id).expect("matched id is live");
                let (mut fused, _) = fuse_surfel(dst, &Measurement::from_surfel(src))?;
                let (colour, sigma) = fuse_colour(dst.colour, dst.colour_sigma, src.colour, src.colour_sigma);
                fused.colour = colour;
                fused.colour_sigma = sigma;
                global.dense.update(id, fused);
                metrics.n_fused += 1;
            }
            None => {
                let mut fresh = src.clone();
                fresh.stable = fresh.obs_count >= STABLE_OBSERVATIONS;
                inserted.insert(global.dense.insert(fresh));
                metrics.n_new += 1;
            }
        }
    }

    let stale: Vec<u64> = global
        .dense
        .iter()
        .filter(|(_, s)| s.obs_count < STABLE_OBSERVATIONS && now - s.timestamp > cfg.cull_age)
        .map(|(i, _)| i)
        .collect();
    for id in &stale {
        global.dense.remove(*id);
    }
    metrics.n_culled = stale.len();
    global.sparse.extend(local.sparse.iter().cloned());
    Ok((metrics, trigger))
}
