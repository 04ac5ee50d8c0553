//! Synthetic two-pass mapping run: local window optimization, surfel
//! extraction, temporal fusion, loop detection, localization and map
//! deformation.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deformation::{build_graph, make_loop_constraints, optimize_graph, DeformConfig, DeformGraph};
use crate::fusion::{point_noise, temporal_fusion_step, GlobalMap, LocalMap, MatchParams, NoiseModel, StepMetrics, TemporalConfig};
use crate::io::{encode_ply, write_graph_csv, write_rows, write_trajectory_csv};
use crate::lie::Pose;
use crate::linalg::cholesky_lower;
use crate::local_mapping::{optimize_window, IterationRecord, LocalMappingConfig, LocalMappingError, OptState};
use crate::localization::{localization_session, CorrespondenceProvider, FeaturePair, Place, PlanarPoint, SessionConfig};
use crate::simulation::rng::{normal3, substream, Stream};
use crate::simulation::{gen_surfel_scene, gen_trajectory_and_imu, SimConfig};
use crate::surfel_map::{extract_dense_world, voxelize_sparse, ScanPoint, SparseSurfel, SurfelMapConfig};
use crate::trajectory::ControlGrid;
use crate::Vec3;

use super::table5::{session_log, SessionLogRow};
use super::ExperimentError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlamConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub local_mapping: LocalMappingConfig,
    /// Half side of the square room (m).
    pub room_half: f64,
    pub room_height: f64,
    /// Radius of the circle of window anchor positions (m).
    pub anchor_radius: f64,
    pub anchor_height: f64,
    pub passes: usize,
    pub windows_per_pass: usize,
    /// Time between the starts of consecutive passes (s).
    pub pass_interval: f64,
    pub points_per_window: usize,
    pub noise: NoiseModel,
    pub surfel_map: SurfelMapConfig,
    pub temporal: TemporalConfig,
    pub deform: DeformConfig,
    pub session: SessionConfig,
    /// Odometry drift applied to every pass after the first, as a rotation
    /// vector (rad) and translation (m).
    pub drift_rotation: [f64; 3],
    pub drift_translation: [f64; 3],
}

impl Default for SlamConfig {
    fn default() -> Self {
        let mut session = SessionConfig {
            max_places: 1,
            ..SessionConfig::default()
        };
        session.registration.use_features = false;
        session.registration.max_iterations = 30;
        Self {
            seed: 0,
            sim: SimConfig {
                n_features: 600,
                ..SimConfig::default()
            },
            local_mapping: LocalMappingConfig::default(),
            room_half: 6.0,
            room_height: 3.0,
            anchor_radius: 2.5,
            anchor_height: 1.2,
            passes: 2,
            windows_per_pass: 4,
            pass_interval: 60.0,
            points_per_window: 30_000,
            noise: NoiseModel::default(),
            surfel_map: SurfelMapConfig {
                resolutions: vec![1.0, 0.5],
                radius: 0.25,
                ..SurfelMapConfig::default()
            },
            temporal: TemporalConfig {
                max_gaps: 100_000,
                matching: MatchParams {
                    theta_r: 0.25,
                    theta_d: 3.0,
                },
                ..TemporalConfig::default()
            },
            deform: DeformConfig {
                node_density: 0.05,
                surfel_radius: 0.25,
                temporal_gate: 20.0,
                ..DeformConfig::default()
            },
            session,
            drift_rotation: [0.0, 0.0, 0.03],
            drift_translation: [0.25, -0.15, 0.05],
        }
    }
}

impl SlamConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.passes == 0 || self.windows_per_pass == 0 || self.points_per_window == 0 {
            return Err(ExperimentError::Config("passes, windows and points must be positive".into()));
        }
        if self.pass_interval < self.windows_per_pass as f64 * self.sim.window {
            return Err(ExperimentError::Config("passes overlap in time".into()));
        }
        self.surfel_map.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.deform.validate().map_err(|e| ExperimentError::Config(e.to_string()))
    }

    fn drift(&self) -> Pose {
        Pose::from_rotation_vector(Vec3::from(self.drift_rotation), Vec3::from(self.drift_translation))
    }

    fn anchor(&self, index: usize) -> Pose {
        let angle = std::f64::consts::TAU * index as f64 / self.windows_per_pass as f64;
        Pose::from_rotation_vector(
            Vec3::new(0.0, 0.0, angle),
            Vec3::new(self.anchor_radius * angle.cos(), self.anchor_radius * angle.sin(), self.anchor_height),
        )
    }
}

#[derive(Clone, Copy, Debug)]
struct Surface {
    normal: Vec3,
    origin: Vec3,
    u: Vec3,
    v: Vec3,
    area: f64,
}

impl Surface {
    fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.origin)).abs()
    }
}

/// Floor and four walls; each surface spans `origin + a u + b v` for
/// `a, b` in [0, 1].
fn room(cfg: &SlamConfig) -> Vec<Surface> {
    let h = cfg.room_half;
    let z = cfg.room_height;
    let wall = |normal: Vec3, origin: Vec3, u: Vec3| Surface {
        normal,
        origin,
        u,
        v: Vec3::new(0.0, 0.0, z),
        area: 2.0 * h * z,
    };
    vec![
        Surface {
            normal: Vec3::z(),
            origin: Vec3::new(-h, -h, 0.0),
            u: Vec3::new(2.0 * h, 0.0, 0.0),
            v: Vec3::new(0.0, 2.0 * h, 0.0),
            area: 4.0 * h * h,
        },
        wall(Vec3::x(), Vec3::new(-h, -h, 0.0), Vec3::new(0.0, 2.0 * h, 0.0)),
        wall(-Vec3::x(), Vec3::new(h, -h, 0.0), Vec3::new(0.0, 2.0 * h, 0.0)),
        wall(Vec3::y(), Vec3::new(-h, -h, 0.0), Vec3::new(2.0 * h, 0.0, 0.0)),
        wall(-Vec3::y(), Vec3::new(-h, h, 0.0), Vec3::new(2.0 * h, 0.0, 0.0)),
    ]
}

/// Surface closest to `p` and the distance to it.
fn nearest_surface<'a>(surfaces: &'a [Surface], p: &Vec3) -> (&'a Surface, f64) {
    surfaces
        .iter()
        .map(|s| (s, s.distance(p)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("room has surfaces")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QualityRow {
    pub obs_count: u32,
    pub surfels: usize,
    pub mean_position_error: f64,
    pub mean_normal_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlamSummary {
    pub config_hash: String,
    pub windows: usize,
    pub deformations: usize,
    pub map_surfels: usize,
    /// Mean loop residual before and after the graph optimization (m).
    pub loop_residual_before: f64,
    pub loop_residual_after: f64,
    /// Mean distance of the triggering window's surfels to the true
    /// surfaces before and after deformation (m).
    pub misalignment_before: f64,
    pub misalignment_after: f64,
    pub raw_point_error: f64,
    /// Mean surface distance of surfels with at least five observations.
    pub fused_error: f64,
}

#[derive(Clone, Debug)]
pub struct SlamOutcome {
    pub map: GlobalMap,
    pub trajectory: Vec<(f64, Pose)>,
    pub metrics: Vec<StepMetrics>,
    pub reports: Vec<Vec<IterationRecord>>,
    pub graph: Option<DeformGraph>,
    pub session: Vec<SessionLogRow>,
    pub quality: Vec<QualityRow>,
    pub summary: SlamSummary,
}

struct SparsePlace {
    source: Vec<PlanarPoint>,
    reference: Vec<PlanarPoint>,
}

impl CorrespondenceProvider for SparsePlace {
    fn feature_pairs(&self) -> Vec<FeaturePair> {
        Vec::new()
    }
}

impl Place for SparsePlace {
    fn source(&self) -> &[PlanarPoint] {
        &self.source
    }

    fn reference(&self) -> &[PlanarPoint] {
        &self.reference
    }
}

fn planar(s: &[SparseSurfel]) -> Vec<PlanarPoint> {
    s.iter()
        .filter(|s| !s.degenerate)
        .map(|s| PlanarPoint {
            position: s.centroid,
            normal: s.normal,
        })
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Runs the full pipeline. `config_hash` is copied into the summary.
pub fn run_slam(cfg: &SlamConfig, config_hash: &str) -> Result<SlamOutcome, ExperimentError> {
    cfg.validate()?;
    let surfaces = room(cfg);
    let total_area: f64 = surfaces.iter().map(|s| s.area).sum();
    let mut global = GlobalMap::default();
    let mut correction = Pose::identity();
    let mut trajectory = Vec::new();
    let mut metrics = Vec::new();
    let mut reports = Vec::new();
    let mut graph_out = None;
    let mut session = Vec::new();
    let mut deformations = 0;
    let (mut loop_before, mut loop_after, mut mis_before, mut mis_after) = (f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    let mut raw_sum = 0.0;
    let mut raw_n = 0usize;
    let mut step = 0;
    for pass in 0..cfg.passes {
        let drift = if pass == 0 { Pose::identity() } else { cfg.drift() };
        for index in 0..cfg.windows_per_pass {
            let window_seed = cfg.seed.wrapping_mul(1000).wrapping_add(step as u64);
            let t0 = pass as f64 * cfg.pass_interval + index as f64 * cfg.sim.window;
            let sim = SimConfig {
                seed: window_seed,
                ..cfg.sim.clone()
            };
            let run = gen_trajectory_and_imu(&sim).map_err(|e| ExperimentError::numerical("simulation", e))?;
            let scene = gen_surfel_scene(&sim, &run.truth).map_err(|e| ExperimentError::numerical("simulation", e))?;
            let grid = ControlGrid::covering(run.init.start(), run.init.end(), cfg.local_mapping.knot_step)
                .map_err(|e| ExperimentError::numerical("local-mapping", e))?;
            let (estimate, report) = match optimize_window(&scene.constraints, &run.imu, &run.init, &OptState::zero(grid), &cfg.local_mapping) {
                Ok((_, traj, report)) => (traj, report.iterations),
                Err(LocalMappingError::NoProgress { best, .. }) => (best.1, Vec::new()),
                Err(e) => return Err(ExperimentError::numerical("local-mapping", e)),
            };
            reports.push(report);

            let anchor = cfg.anchor(index);
            let world_estimate = correction.compose(&drift).compose(&anchor);
            let mut rng = substream(window_seed, Stream::Sensor, 0);
            let mut noise = substream(window_seed, Stream::FeatureNoise, 1);
            let mut points = Vec::with_capacity(cfg.points_per_window);
            for _ in 0..cfg.points_per_window {
                let tau = rng.random_range(run.truth.start()..=run.truth.end());
                let mut pick = rng.random_range(0.0..total_area);
                let surface = surfaces
                    .iter()
                    .find(|s| {
                        pick -= s.area;
                        pick < 0.0
                    })
                    .unwrap_or(&surfaces[surfaces.len() - 1]);
                let truth_point = surface.origin + surface.u * rng.random::<f64>() + surface.v * rng.random::<f64>();
                let truth_pose = anchor.compose(&run.truth.sample(tau).map_err(|e| ExperimentError::numerical("simulation", e))?);
                let q = point_noise(truth_pose.translation(), &truth_point, &surface.normal, &cfg.noise);
                let measured = truth_point + cholesky_lower(&q).0 * normal3(&mut noise, 1.0);
                let local = truth_pose.inverse().transform_point(&measured);
                let est_pose = world_estimate.compose(&estimate.sample(tau).map_err(|e| ExperimentError::numerical("deskew", e))?);
                let position = est_pose.transform_point(&local);
                raw_sum += nearest_surface(&surfaces, &position).1;
                raw_n += 1;
                points.push(ScanPoint {
                    position,
                    time: t0 + tau,
                    origin: *est_pose.translation(),
                    colour: [0.5; 3],
                });
            }
            let local = LocalMap {
                sparse: voxelize_sparse(&points, &cfg.surfel_map).map_err(|e| ExperimentError::numerical("surfel-extraction", e))?,
                dense: extract_dense_world(&points, &cfg.surfel_map, &cfg.noise).map_err(|e| ExperimentError::numerical("surfel-extraction", e))?,
            };
            let now = t0 + cfg.sim.window;
            let inactive: Vec<SparseSurfel> = global.sparse.iter().filter(|s| now - s.timestamp >= cfg.temporal.active_window).cloned().collect();
            let (m, trigger) = temporal_fusion_step(&local, &mut global, now, step, &cfg.temporal).map_err(|e| ExperimentError::numerical("fusion", e))?;
            metrics.push(m);

            let mut window_correction = Pose::identity();
            if let Some(trigger) = trigger {
                let place = SparsePlace {
                    source: planar(&local.sparse),
                    reference: planar(&inactive),
                };
                let outcome = localization_session(&[&place as &dyn Place], trigger.pose, &cfg.session);
                let truth = correction.compose(&drift).inverse();
                session = session_log(&outcome, &truth);
                if let Some(fused) = outcome.fused.filter(|_| outcome.success) {
                    let loops = make_loop_constraints(&local.sparse, &inactive, &fused.pose, cfg.deform.n_loop, window_seed);
                    let graph = build_graph(&global.sparse, global.dense.len(), &cfg.deform, window_seed)
                        .map_err(|e| ExperimentError::numerical("deformation", e))?;
                    let result = optimize_graph(&graph, &loops, &cfg.deform).map_err(|e| ExperimentError::numerical("deformation", e))?;
                    if result.converged {
                        let residual = |g: &DeformGraph| mean(loops.iter().map(|c| (g.deform_point(&c.p_src, c.t_src).0 - c.p_dest).norm()));
                        let window_error = |map: &GlobalMap| {
                            mean(map.dense.iter().filter(|(_, s)| s.timestamp >= t0).map(|(_, s)| nearest_surface(&surfaces, &s.position).1))
                        };
                        loop_before = residual(&graph);
                        loop_after = residual(&result.graph);
                        mis_before = window_error(&global);
                        result.graph.deform_map(&mut global);
                        mis_after = window_error(&global);
                        deformations += 1;
                        window_correction = fused.pose;
                        correction = fused.pose.compose(&correction);
                        graph_out = Some(result.graph);
                    } else {
                        log::warn!("step {step}: graph optimization did not converge; map left unchanged");
                    }
                }
            }
            for (tau, pose) in estimate.iter() {
                trajectory.push((t0 + tau, window_correction.compose(&world_estimate).compose(pose)));
            }
            step += 1;
        }
    }

    let mut groups: BTreeMap<u32, (usize, f64, f64)> = BTreeMap::new();
    for (_, s) in global.dense.iter() {
        let (surface, d) = nearest_surface(&surfaces, &s.position);
        let angle = s.normal.dot(&surface.normal).abs().min(1.0).acos();
        let g = groups.entry(s.obs_count).or_default();
        g.0 += 1;
        g.1 += d;
        g.2 += angle;
    }
    let quality: Vec<QualityRow> = groups
        .iter()
        .map(|(&obs_count, &(n, d, a))| QualityRow {
            obs_count,
            surfels: n,
            mean_position_error: d / n as f64,
            mean_normal_error: a / n as f64,
        })
        .collect();
    let fused_error = mean(global.dense.iter().filter(|(_, s)| s.obs_count >= 5).map(|(_, s)| nearest_surface(&surfaces, &s.position).1));
    let summary = SlamSummary {
        config_hash: config_hash.to_string(),
        windows: step,
        deformations,
        map_surfels: global.dense.len(),
        loop_residual_before: loop_before,
        loop_residual_after: loop_after,
        misalignment_before: mis_before,
        misalignment_after: mis_after,
        raw_point_error: raw_sum / raw_n.max(1) as f64,
        fused_error,
    };
    Ok(SlamOutcome {
        map: global,
        trajectory,
        metrics,
        reports,
        graph: graph_out,
        session,
        quality,
        summary,
    })
}

/// Writes map, trajectory, metrics and summary files into `dir`.
pub fn write_slam_outputs(outcome: &SlamOutcome, dir: &Path) -> Result<(), ExperimentError> {
    std::fs::write(dir.join("map.ply"), encode_ply(&outcome.map.dense))?;
    write_trajectory_csv(BufWriter::new(File::create(dir.join("trajectory.csv"))?), outcome.trajectory.iter().map(|(t, p)| (*t, p)))?;
    write_rows(BufWriter::new(File::create(dir.join("fusion.csv"))?), &outcome.metrics)?;
    for (w, report) in outcome.reports.iter().enumerate() {
        write_rows(BufWriter::new(File::create(dir.join(format!("report_{w:02}.csv")))?), report)?;
    }
    if let Some(graph) = &outcome.graph {
        write_graph_csv(BufWriter::new(File::create(dir.join("graph.csv"))?), graph)?;
    }
    if !outcome.session.is_empty() {
        write_rows(BufWriter::new(File::create(dir.join("session.csv"))?), &outcome.session)?;
    }
    write_rows(BufWriter::new(File::create(dir.join("quality.csv"))?), &outcome.quality)?;
    let summary = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    std::fs::write(dir.join("summary.json"), summary + "\n")?;
    Ok(())
}
