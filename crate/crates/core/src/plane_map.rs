//! World models that answer nearest-plane queries for point-to-plane residuals.
//!
//! Two backends are provided: a list of finite analytic patches (exact
//! associations, used with simulated worlds) and an accumulated point map
//! that fits a local plane to the five nearest neighbours.

use std::collections::HashMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("analytic maps are immutable; scans can only be inserted into a point map")]
    Immutable,
}

/// Infinite plane through `anchor` with unit `normal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub anchor: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl Plane {
    pub fn signed_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(&(p - self.anchor))
    }

    /// Flip the normal so it points toward `viewpoint`.
    fn facing(mut self, viewpoint: &Vector3<f64>) -> Self {
        if self.normal.dot(&(viewpoint - self.anchor)) < 0.0 {
            self.normal = -self.normal;
        }
        self
    }
}

/// Rectangular patch centred on `center`; extents are full side lengths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanePatch {
    pub center: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub extent_u: f64,
    pub extent_v: f64,
    u_axis: Vector3<f64>,
    v_axis: Vector3<f64>,
}

impl PlanePatch {
    /// `normal` is normalized; the in-plane axes are derived from it deterministically.
    pub fn new(center: Vector3<f64>, normal: Vector3<f64>, extent_u: f64, extent_v: f64) -> Self {
        let normal = normal.normalize();
        let reference = if normal.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let u_axis = normal.cross(&reference).normalize();
        let v_axis = normal.cross(&u_axis);
        Self { center, normal, extent_u, extent_v, u_axis, v_axis }
    }

    pub fn u_axis(&self) -> Vector3<f64> {
        self.u_axis
    }

    pub fn v_axis(&self) -> Vector3<f64> {
        self.v_axis
    }

    /// Closest point of the patch to `p`.
    pub fn closest_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let d = p - self.center;
        let u = d.dot(&self.u_axis).clamp(-0.5 * self.extent_u, 0.5 * self.extent_u);
        let v = d.dot(&self.v_axis).clamp(-0.5 * self.extent_v, 0.5 * self.extent_v);
        self.center + u * self.u_axis + v * self.v_axis
    }

    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        (p - self.closest_point(p)).norm()
    }

    /// Ray parameter of the intersection with this patch, if any.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.center - origin)) / denom;
        if t <= 0.0 {
            return None;
        }
        let d = origin + dir * t - self.center;
        let inside = d.dot(&self.u_axis).abs() <= 0.5 * self.extent_u && d.dot(&self.v_axis).abs() <= 0.5 * self.extent_v;
        inside.then_some(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticMap {
    pub patches: Vec<PlanePatch>,
    /// Correspondences farther than this from every patch are rejected.
    pub max_distance: f64,
}

impl AnalyticMap {
    pub const DEFAULT_MAX_DISTANCE: f64 = 1.0;

    pub fn new(patches: Vec<PlanePatch>) -> Self {
        Self { patches, max_distance: Self::DEFAULT_MAX_DISTANCE }
    }

    /// Index of the nearest patch and its distance.
    pub fn nearest_patch(&self, p: &Vector3<f64>) -> Option<(usize, f64)> {
        self.patches
            .iter()
            .enumerate()
            .map(|(i, patch)| (i, patch.distance(p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn nearest_plane(&self, p: &Vector3<f64>, viewpoint: &Vector3<f64>) -> Option<Plane> {
        let (i, dist) = self.nearest_patch(p)?;
        if dist > self.max_distance {
            return None;
        }
        let patch = &self.patches[i];
        Some(Plane { anchor: patch.closest_point(p), normal: patch.normal }.facing(viewpoint))
    }

    /// Parse the world file format: `q_x q_y q_z n_x n_y n_z extent_u extent_v` per line.
    pub fn parse(text: &str) -> Result<Self, MapError> {
        let mut patches = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| MapError::Parse { line: i + 1, msg };
            let values = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| err(format!("{t:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != 8 {
                return Err(err(format!("expected 8 values, found {}", values.len())));
            }
            let normal = Vector3::new(values[3], values[4], values[5]);
            if !(normal.norm() > 1e-9) {
                return Err(err("zero normal".into()));
            }
            if !(values[6] > 0.0 && values[7] > 0.0) {
                return Err(err("patch extents must be positive".into()));
            }
            patches.push(PlanePatch::new(Vector3::new(values[0], values[1], values[2]), normal, values[6], values[7]));
        }
        Ok(Self::new(patches))
    }

    pub fn to_world_file(&self) -> String {
        let mut out = String::from("# q_x q_y q_z n_x n_y n_z extent_u extent_v\n");
        for p in &self.patches {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {}",
                p.center.x, p.center.y, p.center.z, p.normal.x, p.normal.y, p.normal.z, p.extent_u, p.extent_v
            );
        }
        out
    }
}

type VoxelKey = (i64, i64, i64);

/// Voxel-downsampled global point cloud with local plane fitting.
#[derive(Debug, Clone)]
pub struct PointMap {
    voxel_size: f64,
    voxels: HashMap<VoxelKey, Vector3<f64>>,
    pub neighbors: usize,
    /// Neighbours farther than this from the query are not used.
    pub max_neighbor_distance: f64,
    /// Largest allowed distance of a neighbour to its fitted plane.
    pub planarity_gate: f64,
}

impl PointMap {
    pub fn new(voxel_size: f64) -> Self {
        assert!(voxel_size > 0.0, "voxel size must be positive");
        Self { voxel_size, voxels: HashMap::new(), neighbors: 5, max_neighbor_distance: 1.0, planarity_gate: 0.1 }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    fn key(&self, p: &Vector3<f64>) -> VoxelKey {
        let s = self.voxel_size;
        ((p.x / s).floor() as i64, (p.y / s).floor() as i64, (p.z / s).floor() as i64)
    }

    /// Insert points, keeping the first point that lands in each voxel.
    pub fn insert(&mut self, points: &[Vector3<f64>]) {
        for p in points {
            let k = self.key(p);
            self.voxels.entry(k).or_insert(*p);
        }
    }

    pub fn k_nearest(&self, p: &Vector3<f64>, k: usize) -> Vec<Vector3<f64>> {
        let reach = (self.max_neighbor_distance / self.voxel_size).ceil() as i64;
        let (cx, cy, cz) = self.key(p);
        let mut found: Vec<(f64, Vector3<f64>)> = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(q) = self.voxels.get(&(cx + dx, cy + dy, cz + dz)) {
                        let d = (q - p).norm();
                        if d <= self.max_neighbor_distance {
                            found.push((d, *q));
                        }
                    }
                }
            }
        }
        // Ties broken by coordinates so the result does not depend on hash order.
        found.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(a.1.x.total_cmp(&b.1.x))
                .then(a.1.y.total_cmp(&b.1.y))
                .then(a.1.z.total_cmp(&b.1.z))
        });
        found.into_iter().take(k).map(|(_, q)| q).collect()
    }

    pub fn nearest_plane(&self, p: &Vector3<f64>, viewpoint: &Vector3<f64>) -> Option<Plane> {
        let nn = self.k_nearest(p, self.neighbors);
        if nn.len() < self.neighbors {
            return None;
        }
        let plane = fit_plane(&nn)?;
        if nn.iter().any(|q| plane.signed_distance(q).abs() > self.planarity_gate) {
            return None;
        }
        Some(plane.facing(viewpoint))
    }
}

/// Least-squares plane through points: centroid plus the direction of least variance.
pub fn fit_plane(points: &[Vector3<f64>]) -> Option<Plane> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let centroid = points.iter().sum::<Vector3<f64>>() / n;
    let scatter = points.iter().fold(Matrix3::zeros(), |acc, p| {
        let d = p - centroid;
        acc + d * d.transpose()
    });
    let eig = SymmetricEigen::new(scatter);
    let (imin, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let mut normal = eig.eigenvectors.column(imin).into_owned();
    let norm = normal.norm();
    if !(norm > 0.0) {
        return None;
    }
    normal /= norm;
    Some(Plane { anchor: centroid, normal })
}

#[derive(Debug, Clone)]
pub enum PlaneMap {
    Analytic(AnalyticMap),
    Points(PointMap),
}

impl PlaneMap {
    /// Nearest plane to a global point, normal oriented toward `viewpoint`.
    pub fn nearest_plane(&self, p: &Vector3<f64>, viewpoint: &Vector3<f64>) -> Option<Plane> {
        match self {
            PlaneMap::Analytic(m) => m.nearest_plane(p, viewpoint),
            PlaneMap::Points(m) => m.nearest_plane(p, viewpoint),
        }
    }

    pub fn insert_scan(&mut self, points: &[Vector3<f64>]) -> Result<(), MapError> {
        match self {
            PlaneMap::Analytic(_) => Err(MapError::Immutable),
            PlaneMap::Points(m) => {
                m.insert(points);
                Ok(())
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            PlaneMap::Analytic(m) => m.patches.is_empty(),
            PlaneMap::Points(m) => m.is_empty(),
        }
    }
}
