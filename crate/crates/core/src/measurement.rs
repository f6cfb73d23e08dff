//! Point-to-plane measurements over a sliding window of coupled poses.
//!
//! A measurement captured `N` scans ago is expressed through the chain of
//! change terms linking its owner pose to the current pose, so its Jacobian
//! has nonzero blocks on every pose from the current one back to the owner.

use nalgebra::{DMatrix, DVector, Matrix3, RowVector3, SVector, Vector3};
use thiserror::Error;

use crate::manifold::{exp, skew, so3_log, Pose, Rotation};
use crate::state::BlockLayout;

/// Default per-point noise variance, (0.05 m)².
pub const DEFAULT_POINT_VARIANCE: f64 = 0.05 * 0.05;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MeasurementError {
    #[error("chain has {chain} poses but the layout describes {layout}")]
    LayoutMismatch { chain: usize, layout: usize },
    #[error("owner offset {owner} outside a chain of {len} poses")]
    OwnerOutOfRange { owner: usize, len: usize },
    #[error("plane normal must be unit length, got norm {0}")]
    NonUnitNormal(f64),
    #[error("noise variance must be positive, got {0}")]
    NonPositiveVariance(f64),
}

/// A LiDAR point associated with a global plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    /// Point in the LiDAR frame.
    pub point: Vector3<f64>,
    /// Owner offset: number of chain steps back from the current pose.
    pub owner: usize,
    pub normal: Vector3<f64>,
    pub anchor: Vector3<f64>,
    pub variance: f64,
}

impl Measurement {
    pub fn new(
        point: Vector3<f64>,
        owner: usize,
        normal: Vector3<f64>,
        anchor: Vector3<f64>,
        variance: f64,
    ) -> Result<Self, MeasurementError> {
        let norm = normal.norm();
        if !((norm - 1.0).abs() < 1e-9) {
            return Err(MeasurementError::NonUnitNormal(norm));
        }
        if !(variance > 0.0) {
            return Err(MeasurementError::NonPositiveVariance(variance));
        }
        Ok(Self { point, owner, normal, anchor, variance })
    }

    pub fn with_owner(mut self, owner: usize) -> Self {
        self.owner = owner;
        self
    }
}

/// IMU-from-LiDAR transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self { rotation: Rotation::identity(), translation: Vector3::zeros() }
    }
}

impl Extrinsics {
    /// Point expressed in the IMU frame.
    pub fn to_imu(&self, lidar_point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * lidar_point + self.translation
    }

    pub fn to_global(&self, pose: &Pose, lidar_point: &Vector3<f64>) -> Vector3<f64> {
        pose.transform_point(&self.to_imu(lidar_point))
    }
}

/// Change between a newer and an older pose: `[Log(R_olderᵀ R_newer); p_newer − p_older]`.
pub fn change_term(newer: &Pose, older: &Pose) -> SVector<f64, 6> {
    let dtheta = so3_log(&(older.rotation.inverse() * newer.rotation));
    let dp = newer.position - older.position;
    SVector::<f64, 6>::from_iterator(dtheta.iter().chain(dp.iter()).copied())
}

/// Older pose reconstructed from the newer pose, the change term and the older pose's error.
pub fn couple(newer: &Pose, change: &SVector<f64, 6>, error: &SVector<f64, 6>) -> Pose {
    let dtheta = Vector3::new(change[0], change[1], change[2]);
    let dp = Vector3::new(change[3], change[4], change[5]);
    let et = Vector3::new(error[0], error[1], error[2]);
    let ep = Vector3::new(error[3], error[4], error[5]);
    Pose::new(newer.rotation * exp(&dtheta).inverse() * exp(&et), newer.position - dp + ep)
}

/// Signed point-to-plane distance with the owner pose at its current iterate.
pub fn residual(owner: &Pose, m: &Measurement, ext: &Extrinsics) -> f64 {
    m.normal.dot(&(ext.to_global(owner, &m.point) - m.anchor))
}

fn check_chain(chain: &[Pose], m: &Measurement, layout: &BlockLayout) -> Result<(), MeasurementError> {
    let expected = 1 + layout.active_count() + layout.fixed_count();
    if chain.len() != expected {
        return Err(MeasurementError::LayoutMismatch { chain: chain.len(), layout: expected });
    }
    if m.owner >= chain.len() {
        return Err(MeasurementError::OwnerOutOfRange { owner: m.owner, len: chain.len() });
    }
    Ok(())
}

/// Rotation-block coupling matrix `Θ_{m,r} = −R_m [R_mᵀ R_r D]×`.
pub fn coupling_matrix(r_m: &Rotation, r_r: &Rotation, lever: &Vector3<f64>) -> Matrix3<f64> {
    let inner = r_m.inverse() * (r_r * lever);
    -(r_m.matrix() * skew(&inner))
}

fn fill_row(chain: &[Pose], m: &Measurement, ext: &Extrinsics, layout: &BlockLayout, row: &mut [f64]) {
    let lever = ext.to_imu(&m.point);
    let owner_rot = &chain[m.owner].rotation;
    let e = RowVector3::new(m.normal.x, m.normal.y, m.normal.z);
    for (k, pose) in chain.iter().enumerate().take(m.owner + 1) {
        let rot = e * coupling_matrix(&pose.rotation, owner_rot, &lever);
        let rc = layout.chain_rotation(k);
        let pc = layout.chain_position(k);
        row[rc..rc + 3].copy_from_slice(rot.as_slice());
        row[pc..pc + 3].copy_from_slice(m.normal.as_slice());
    }
}

/// One row of the stacked Jacobian over the full error layout.
///
/// `chain[0]` is the current pose and `chain[i]` the pose at owner offset `i`.
pub fn jacobian_row(
    chain: &[Pose],
    m: &Measurement,
    ext: &Extrinsics,
    layout: &BlockLayout,
) -> Result<DVector<f64>, MeasurementError> {
    check_chain(chain, m, layout)?;
    let mut row = vec![0.0; layout.dim()];
    fill_row(chain, m, ext, layout, &mut row);
    Ok(DVector::from_vec(row))
}

/// Stacked Jacobian, residuals and diagonal noise of a measurement set.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSystem {
    pub h: DMatrix<f64>,
    pub z: DVector<f64>,
    /// Diagonal of the noise covariance.
    pub c: DVector<f64>,
    /// Index into the input slice for every row.
    pub source: Vec<usize>,
}

impl StackedSystem {
    pub fn empty(dim: usize) -> Self {
        Self { h: DMatrix::zeros(0, dim), z: DVector::zeros(0), c: DVector::zeros(0), source: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// `Hᵀ C⁻¹`.
    pub fn weighted_transpose(&self) -> DMatrix<f64> {
        let mut ht = self.h.transpose();
        for (j, mut col) in ht.column_iter_mut().enumerate() {
            col /= self.c[j];
        }
        ht
    }

    /// `Hᵀ C⁻¹ H`, accumulated over the nonzero columns of each row.
    pub fn information(&self) -> DMatrix<f64> {
        let n = self.h.ncols();
        let mut info = DMatrix::zeros(n, n);
        let mut nz = Vec::with_capacity(n);
        for i in 0..self.h.nrows() {
            nz.clear();
            nz.extend((0..n).filter(|&j| self.h[(i, j)] != 0.0));
            let w = 1.0 / self.c[i];
            for (k, &a) in nz.iter().enumerate() {
                let ha = self.h[(i, a)] * w;
                for &b in &nz[k..] {
                    info[(a, b)] += ha * self.h[(i, b)];
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                info[(a, b)] = info[(b, a)];
            }
        }
        info
    }

    /// `Hᵀ C⁻¹ z`.
    pub fn weighted_residual(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.h.ncols());
        for i in 0..self.h.nrows() {
            let w = self.z[i] / self.c[i];
            for j in 0..self.h.ncols() {
                out[j] += self.h[(i, j)] * w;
            }
        }
        out
    }
}

/// Stack measurements in order of owner offset, ties kept in input order.
pub fn stack_system(
    measurements: &[Measurement],
    chain: &[Pose],
    ext: &Extrinsics,
    layout: &BlockLayout,
) -> Result<StackedSystem, MeasurementError> {
    let mut order: Vec<usize> = (0..measurements.len()).collect();
    order.sort_by_key(|&i| measurements[i].owner);
    for m in measurements {
        check_chain(chain, m, layout)?;
    }
    let n = order.len();
    let dim = layout.dim();
    // Built row-major, then transposed into nalgebra's column-major storage.
    let mut rows = vec![0.0; n * dim];
    let mut z = DVector::zeros(n);
    let mut c = DVector::zeros(n);
    for (r, &i) in order.iter().enumerate() {
        let m = &measurements[i];
        fill_row(chain, m, ext, layout, &mut rows[r * dim..(r + 1) * dim]);
        z[r] = residual(&chain[m.owner], m, ext);
        c[r] = m.variance;
    }
    let h = DMatrix::from_row_slice(n, dim, &rows);
    Ok(StackedSystem { h, z, c, source: order })
}
