//! Sparse ellipsoid surfels, dense disc surfels and the map that holds them.

mod octree;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{point_noise, NoiseModel};
use crate::linalg::{clamp_psd, mean_and_scatter, sorted_eigen, symmetrize};
use crate::trajectory::{Trajectory, TrajectoryError};
use crate::{Mat3, Vec3};

pub use octree::SurfelIndex;

/// Planarity below which a sparse surfel is flagged as a poor plane.
pub const PLANARITY_FLOOR: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SurfelMapError {
    #[error("invalid surfel map config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfelMapConfig {
    /// Voxel edge lengths for sparse surfels, coarsest first.
    pub resolutions: Vec<f64>,
    pub min_points: usize,
    /// Dense surfel radius, constant map-wide.
    pub radius: f64,
    pub leaf_capacity: usize,
    pub colour_sigma: f64,
}

impl Default for SurfelMapConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![1.0, 0.5, 0.25],
            min_points: 5,
            radius: 0.02,
            leaf_capacity: 16,
            colour_sigma: 0.1,
        }
    }
}

impl SurfelMapConfig {
    pub fn validate(&self) -> Result<(), SurfelMapError> {
        if self.resolutions.is_empty() || self.resolutions.iter().any(|r| !(*r > 0.0)) {
            return Err(SurfelMapError::Invalid("resolutions must be non-empty and positive".into()));
        }
        if self.resolutions.windows(2).any(|w| w[1] > w[0]) {
            return Err(SurfelMapError::Invalid("resolutions must be ordered coarsest first".into()));
        }
        if !(self.radius > 0.0) || self.min_points < 2 || self.leaf_capacity == 0 || !(self.colour_sigma > 0.0) {
            return Err(SurfelMapError::Invalid("radius, min_points, leaf_capacity or colour_sigma out of range".into()));
        }
        Ok(())
    }
}

/// A LiDAR return after deskewing, in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanPoint {
    pub position: Vec3,
    pub time: f64,
    /// Sensor origin at capture time.
    pub origin: Vec3,
    pub colour: [f64; 3],
}

/// A LiDAR return in the sensor frame at its capture time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawPoint {
    pub local: Vec3,
    pub time: f64,
    pub colour: [f64; 3],
}

pub fn deskew(points: &[RawPoint], traj: &Trajectory) -> Result<Vec<ScanPoint>, TrajectoryError> {
    points
        .iter()
        .map(|p| {
            let pose = traj.sample(p.time)?;
            Ok(ScanPoint {
                position: pose.transform_point(&p.local),
                time: p.time,
                origin: *pose.translation(),
                colour: p.colour,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparseSurfel {
    pub centroid: Vec3,
    pub covariance: Mat3,
    pub count: usize,
    pub level: usize,
    pub timestamp: f64,
    pub normal: Vec3,
    /// (λ₁ − λ₀) / λ₂ with eigenvalues ascending; 1 for a perfect plane.
    pub planarity: f64,
    pub degenerate: bool,
}

impl SparseSurfel {
    fn from_points(points: &[&ScanPoint], level: usize) -> Option<Self> {
        let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
        let (centroid, scatter, n) = mean_and_scatter(positions.iter())?;
        if n < 2 {
            return None;
        }
        let covariance = clamp_psd(&(scatter / (n - 1) as f64)).0;
        let (values, vectors) = sorted_eigen(&covariance);
        let planarity = if values[2] > 0.0 { (values[1] - values[0]) / values[2] } else { 0.0 };
        let mut normal: Vec3 = vectors.column(0).into();
        let origin = points.iter().map(|p| p.origin).sum::<Vec3>() / n as f64;
        if normal.dot(&(origin - centroid)) < 0.0 {
            normal = -normal;
        }
        Some(Self {
            centroid,
            covariance,
            count: n,
            level,
            timestamp: points.iter().map(|p| p.time).sum::<f64>() / n as f64,
            normal,
            planarity,
            degenerate: planarity < PLANARITY_FLOOR,
        })
    }
}

fn voxel_key(p: &Vec3, size: f64) -> (i64, i64, i64) {
    let k = p.map(|v| (v / size).floor());
    (k.x as i64, k.y as i64, k.z as i64)
}

/// One surfel per occupied voxel per resolution with at least
/// `cfg.min_points` points. Output is ordered by level then voxel key.
pub fn voxelize_sparse(points: &[ScanPoint], cfg: &SurfelMapConfig) -> Result<Vec<SparseSurfel>, SurfelMapError> {
    cfg.validate()?;
    let mut out = Vec::new();
    for (level, &size) in cfg.resolutions.iter().enumerate() {
        let mut voxels: BTreeMap<(i64, i64, i64), Vec<&ScanPoint>> = BTreeMap::new();
        for p in points {
            voxels.entry(voxel_key(&p.position, size)).or_default().push(p);
        }
        for members in voxels.values() {
            if members.len() >= cfg.min_points {
                out.extend(SparseSurfel::from_points(members, level));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseSurfel {
    pub position: Vec3,
    pub normal: Vec3,
    /// Uncertainty of the centroid estimate.
    pub position_cov: Mat3,
    /// Accrued scatter of the extent.
    pub scatter: Mat3,
    /// Wishart degrees of freedom.
    pub dof: f64,
    pub obs_count: u32,
    pub timestamp: f64,
    pub radius: f64,
    pub colour: [f64; 3],
    pub colour_sigma: f64,
    pub stable: bool,
    /// Mean world-frame beam noise of the points that formed the surfel.
    pub beam_noise: Mat3,
}

impl DenseSurfel {
    /// Symmetrizes and clamps both covariances; returns whether a clamp fired.
    pub fn sanitize(&mut self) -> bool {
        let (p, a) = clamp_psd(&self.position_cov);
        let (s, b) = clamp_psd(&self.scatter);
        self.position_cov = p;
        self.scatter = s;
        self.beam_noise = symmetrize(&self.beam_noise);
        a || b
    }

    /// Extent covariance implied by the Wishart state, when defined.
    pub fn extent(&self) -> Option<Mat3> {
        let d = self.dof - 4.0;
        (d > 0.0).then(|| self.scatter / d)
    }
}

struct HashGrid {
    size: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl HashGrid {
    fn new(size: f64) -> Self {
        Self {
            size,
            cells: HashMap::new(),
        }
    }

    fn insert(&mut self, p: &Vec3, i: usize) {
        self.cells.entry(voxel_key(p, self.size)).or_default().push(i);
    }

    fn around(&self, p: &Vec3) -> impl Iterator<Item = usize> + '_ {
        let (x, y, z) = voxel_key(p, self.size);
        (-1..=1).flat_map(move |dx| {
            (-1..=1).flat_map(move |dy| {
                (-1..=1).flat_map(move |dz| self.cells.get(&(x + dx, y + dy, z + dz)).into_iter().flatten().copied())
            })
        })
    }
}

/// Greedy seeds no two of which are within `radius` of each other, visiting
/// points in input order.
pub fn greedy_seeds(points: &[Vec3], radius: f64) -> Vec<usize> {
    let mut grid = HashGrid::new(radius);
    let mut seeds = Vec::new();
    for (i, p) in points.iter().enumerate() {
        if grid.around(p).all(|s| (points[s] - p).norm() >= radius) {
            grid.insert(p, i);
            seeds.push(i);
        }
    }
    seeds
}

/// Dense surfels from fixed-radius neighborhoods around greedy seeds.
pub fn extract_dense_world(points: &[ScanPoint], cfg: &SurfelMapConfig, noise: &NoiseModel) -> Result<Vec<DenseSurfel>, SurfelMapError> {
    cfg.validate()?;
    let positions: Vec<Vec3> = points.iter().map(|p| p.position).collect();
    let mut grid = HashGrid::new(cfg.radius);
    for (i, p) in positions.iter().enumerate() {
        grid.insert(p, i);
    }
    let mut out = Vec::new();
    for seed in greedy_seeds(&positions, cfg.radius) {
        let center = positions[seed];
        let mut members: Vec<usize> = grid.around(&center).filter(|&j| (positions[j] - center).norm() <= cfg.radius).collect();
        if members.len() < cfg.min_points {
            continue;
        }
        members.sort_unstable();
        let Some((mean, scatter, n)) = mean_and_scatter(members.iter().map(|&j| &positions[j])) else {
            continue;
        };
        let nf = n as f64;
        let (_, vectors) = sorted_eigen(&scatter);
        let mut normal: Vec3 = vectors.column(0).into();
        let origin = members.iter().map(|&j| points[j].origin).sum::<Vec3>() / nf;
        if normal.dot(&(origin - mean)) < 0.0 {
            normal = -normal;
        }
        let beam_noise = symmetrize(&(members.iter().map(|&j| point_noise(&points[j].origin, &positions[j], &normal, noise)).sum::<Mat3>() / nf));
        let mut colour = [0.0; 3];
        for &j in &members {
            for (c, v) in colour.iter_mut().zip(points[j].colour) {
                *c += v / nf;
            }
        }
        let mut surfel = DenseSurfel {
            position: mean,
            normal,
            position_cov: scatter / (nf * (nf - 1.0)) + beam_noise / nf,
            scatter,
            dof: nf,
            obs_count: 1,
            timestamp: members.iter().map(|&j| points[j].time).sum::<f64>() / nf,
            radius: cfg.radius,
            colour,
            colour_sigma: cfg.colour_sigma,
            stable: false,
            beam_noise,
        };
        surfel.sanitize();
        out.push(surfel);
    }
    Ok(out)
}

/// Deskews sensor-frame points along `traj` and extracts dense surfels.
pub fn extract_dense(points: &[RawPoint], traj: &Trajectory, cfg: &SurfelMapConfig, noise: &NoiseModel) -> Result<Vec<DenseSurfel>, SurfelMapError> {
    extract_dense_world(&deskew(points, traj)?, cfg, noise)
}

/// Dense surfels keyed by id with a spatial index over their centroids.
#[derive(Clone, Debug)]
pub struct SurfelMap {
    surfels: BTreeMap<u64, DenseSurfel>,
    index: SurfelIndex,
    next_id: u64,
    var_bound: f64,
}

impl Default for SurfelMap {
    fn default() -> Self {
        Self::new(16)
    }
}

impl SurfelMap {
    pub fn new(leaf_capacity: usize) -> Self {
        Self {
            surfels: BTreeMap::new(),
            index: SurfelIndex::new(Vec3::zeros(), 8.0, leaf_capacity),
            next_id: 0,
            var_bound: 0.0,
        }
    }

    pub fn from_surfels(surfels: impl IntoIterator<Item = DenseSurfel>) -> Self {
        let mut map = Self::default();
        for s in surfels {
            map.insert(s);
        }
        map
    }

    pub fn len(&self) -> usize {
        self.surfels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfels.is_empty()
    }

    pub fn insert(&mut self, mut surfel: DenseSurfel) -> u64 {
        surfel.sanitize();
        self.note_variance(&surfel);
        let id = self.next_id;
        self.next_id += 1;
        self.index.insert(id, surfel.position);
        self.surfels.insert(id, surfel);
        id
    }

    /// Replaces an existing surfel; returns false if `id` is unknown.
    pub fn update(&mut self, id: u64, mut surfel: DenseSurfel) -> bool {
        let Some(slot) = self.surfels.get_mut(&id) else {
            return false;
        };
        surfel.sanitize();
        self.var_bound = self.var_bound.max(sorted_eigen(&surfel.position_cov).0[2]);
        if slot.position != surfel.position {
            self.index.insert(id, surfel.position);
        }
        *slot = surfel;
        true
    }

    pub fn remove(&mut self, id: u64) -> Option<DenseSurfel> {
        let s = self.surfels.remove(&id)?;
        self.index.remove(id);
        Some(s)
    }

    pub fn get(&self, id: u64) -> Option<&DenseSurfel> {
        self.surfels.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &DenseSurfel)> {
        self.surfels.iter().map(|(i, s)| (*i, s))
    }

    pub fn ids(&self) -> Vec<u64> {
        self.surfels.keys().copied().collect()
    }

    /// Ids with centroid within `r` of `p`, ascending.
    pub fn query_radius(&self, p: &Vec3, r: f64) -> Vec<u64> {
        let mut ids = self.index.query_radius(p, r);
        ids.sort_unstable();
        ids
    }

    pub fn nearest(&self, p: &Vec3) -> Option<(u64, f64)> {
        self.index.nearest(p)
    }

    /// Applies `f` to every surfel and reindexes.
    pub fn map_in_place(&mut self, mut f: impl FnMut(&mut DenseSurfel)) {
        for (id, s) in self.surfels.iter_mut() {
            f(s);
            s.sanitize();
            self.var_bound = self.var_bound.max(sorted_eigen(&s.position_cov).0[2]);
            self.index.insert(*id, s.position);
        }
    }

    /// Upper bound on the largest centroid variance of any surfel ever held.
    pub fn position_variance_bound(&self) -> f64 {
        self.var_bound
    }

    fn note_variance(&mut self, s: &DenseSurfel) {
        self.var_bound = self.var_bound.max(sorted_eigen(&s.position_cov).0[2]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scan(p: Vec3) -> ScanPoint {
        ScanPoint {
            position: p,
            time: 0.0,
            origin: Vec3::new(0.0, 0.0, 5.0),
            colour: [0.5; 3],
        }
    }

    #[test]
    fn cube_corners_give_one_centroid() {
        let pts: Vec<ScanPoint> = (0..8)
            .map(|i| scan(Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64) + Vec3::repeat(0.5)))
            .collect();
        let cfg = SurfelMapConfig {
            resolutions: vec![10.0],
            ..SurfelMapConfig::default()
        };
        let s = voxelize_sparse(&pts, &cfg).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0].centroid - Vec3::repeat(1.0)).norm() < 1e-12);
    }

    #[test]
    fn coplanar_points_are_rank_two() {
        let pts: Vec<ScanPoint> = (0..50).map(|i| scan(Vec3::new((i % 7) as f64 * 0.1, (i / 7) as f64 * 0.1, 0.3))).collect();
        let cfg = SurfelMapConfig {
            resolutions: vec![4.0],
            ..SurfelMapConfig::default()
        };
        let s = voxelize_sparse(&pts, &cfg).unwrap();
        let (values, _) = sorted_eigen(&s[0].covariance);
        assert!(values[0] < 1e-12 * values[2]);
        assert!(s[0].normal.z > 0.999);
    }

    #[test]
    fn empty_input_is_empty_output() {
        assert!(voxelize_sparse(&[], &SurfelMapConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn map_update_reindexes() {
        let noise = NoiseModel::default();
        let pts: Vec<ScanPoint> = (0..100).map(|i| scan(Vec3::new((i % 10) as f64 * 0.004, (i / 10) as f64 * 0.004, 0.0))).collect();
        let surfels = extract_dense_world(&pts, &SurfelMapConfig::default(), &noise).unwrap();
        assert!(!surfels.is_empty());
        let mut map = SurfelMap::from_surfels(surfels);
        let id = map.ids()[0];
        let mut s = map.get(id).unwrap().clone();
        s.position += Vec3::new(3.0, 0.0, 0.0);
        assert!(map.update(id, s));
        assert_eq!(map.query_radius(&Vec3::new(3.0, 0.0, 0.0), 0.1), vec![id]);
        assert!(map.remove(id).is_some());
        assert!(map.query_radius(&Vec3::new(3.0, 0.0, 0.0), 0.1).is_empty());
    }
}
