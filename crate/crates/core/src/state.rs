//! Compound filter state, error-covariance layout, and window bookkeeping.
//!
//! Error-state columns are ordered
//! `[δθ, δp, δv, δb_ω, δb_a, δg | active poses newest first | fixed poses newest first]`
//! with six columns `[δθ, δp]` per window pose. Code that fills Jacobians or
//! gains addresses blocks through [`BlockLayout`] rather than raw offsets.

use std::ops::Range;

use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

use crate::manifold::{Pose, Rotation};

/// Error dimension of the IMU block.
pub const IMU_DIM: usize = 18;
/// Error dimension of one window pose.
pub const POSE_DIM: usize = 6;

#[derive(Debug, Error, PartialEq)]
pub enum StateError {
    #[error("active window is full ({0} poses)")]
    WindowOverflow(usize),
    #[error("window pose index {index} out of range (window holds {len})")]
    InvalidIndex { index: usize, len: usize },
    #[error("pose {0} is not the oldest active pose")]
    NotOldestActive(usize),
    #[error("covariance is {got}x{got}, state error dimension is {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid window configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuState {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub gravity: Vector3<f64>,
}

impl ImuState {
    /// State at the global origin (the first IMU frame) at rest.
    pub fn at_origin(gravity: Vector3<f64>, gyro_bias: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation::identity(),
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            gyro_bias,
            accel_bias: Vector3::zeros(),
            gravity,
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseRole {
    Active,
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPose {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
    pub role: PoseRole,
    /// Ordinal of the scan this pose was cloned at.
    pub scan_index: usize,
    /// Cached condition number of the pose's own measurements.
    pub condition: Option<f64>,
}

impl WindowPose {
    pub fn active(rotation: Rotation, position: Vector3<f64>, scan_index: usize) -> Self {
        Self { rotation, position, role: PoseRole::Active, scan_index, condition: None }
    }

    pub fn fixed(rotation: Rotation, position: Vector3<f64>, scan_index: usize) -> Self {
        Self { role: PoseRole::Fixed, ..Self::active(rotation, position, scan_index) }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub imu: ImuState,
    /// Newest first.
    pub active: Vec<WindowPose>,
    /// Newest first.
    pub fixed: Vec<WindowPose>,
}

impl FullState {
    pub fn new(imu: ImuState) -> Self {
        Self { imu, active: Vec::new(), fixed: Vec::new() }
    }

    pub fn window_len(&self) -> usize {
        self.active.len() + self.fixed.len()
    }

    pub fn error_dim(&self) -> usize {
        IMU_DIM + POSE_DIM * self.window_len()
    }

    /// Window poses in layout order: active newest-first, then fixed newest-first.
    pub fn window_poses(&self) -> impl Iterator<Item = &WindowPose> {
        self.active.iter().chain(self.fixed.iter())
    }

    pub fn window_poses_mut(&mut self) -> impl Iterator<Item = &mut WindowPose> {
        self.active.iter_mut().chain(self.fixed.iter_mut())
    }

    pub fn window_pose(&self, index: usize) -> Option<&WindowPose> {
        self.window_poses().nth(index)
    }

    /// Poses along the coupling chain: the current IMU pose, then every window pose.
    ///
    /// Chain position equals a measurement's owner offset.
    pub fn chain(&self) -> Vec<Pose> {
        std::iter::once(self.imu.pose()).chain(self.window_poses().map(WindowPose::pose)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub active_size: usize,
    pub fixed_size: usize,
    pub condition_threshold: f64,
    /// Cosine threshold on localizability contributions.
    pub localizability_threshold: f64,
    pub max_iterations: usize,
    pub convergence_eps: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            active_size: 2,
            fixed_size: 2,
            condition_threshold: 1.5,
            localizability_threshold: 35f64.to_radians().cos(),
            max_iterations: 5,
            convergence_eps: 1e-4,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), StateError> {
        let bad = |msg: &str| Err(StateError::InvalidConfig(msg.to_string()));
        if !(self.condition_threshold > 1.0) {
            return bad("condition threshold must exceed 1");
        }
        if !(self.localizability_threshold >= 0.0 && self.localizability_threshold < 1.0) {
            return bad("localizability threshold must lie in [0, 1)");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.convergence_eps > 0.0) {
            return bad("convergence_eps must be positive");
        }
        Ok(())
    }

    pub fn window_size(&self) -> usize {
        self.active_size + self.fixed_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Rotation,
    Position,
    Velocity,
    GyroBias,
    AccelBias,
    Gravity,
    /// Six columns of the i-th active pose (newest = 0).
    Active(usize),
    /// Six columns of the i-th fixed pose (newest = 0).
    Fixed(usize),
}

/// Named column ranges of the error state.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockLayout {
    blocks: Vec<(Block, Range<usize>)>,
    active: usize,
    fixed: usize,
}

impl BlockLayout {
    pub fn for_state(state: &FullState) -> Self {
        Self::with_window(state.active.len(), state.fixed.len())
    }

    pub fn with_window(active: usize, fixed: usize) -> Self {
        let mut blocks = Vec::with_capacity(6 + active + fixed);
        let imu = [Block::Rotation, Block::Position, Block::Velocity, Block::GyroBias, Block::AccelBias, Block::Gravity];
        for (i, b) in imu.into_iter().enumerate() {
            blocks.push((b, 3 * i..3 * i + 3));
        }
        let mut start = IMU_DIM;
        for i in 0..active {
            blocks.push((Block::Active(i), start..start + POSE_DIM));
            start += POSE_DIM;
        }
        for i in 0..fixed {
            blocks.push((Block::Fixed(i), start..start + POSE_DIM));
            start += POSE_DIM;
        }
        Self { blocks, active, fixed }
    }

    pub fn dim(&self) -> usize {
        IMU_DIM + POSE_DIM * (self.active + self.fixed)
    }

    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn fixed_count(&self) -> usize {
        self.fixed
    }

    pub fn blocks(&self) -> &[(Block, Range<usize>)] {
        &self.blocks
    }

    pub fn range(&self, block: Block) -> Option<Range<usize>> {
        self.blocks.iter().find(|(b, _)| *b == block).map(|(_, r)| r.clone())
    }

    /// Rotation columns of the pose at a chain position (0 = current IMU pose).
    pub fn chain_rotation(&self, chain_index: usize) -> usize {
        if chain_index == 0 {
            0
        } else {
            IMU_DIM + POSE_DIM * (chain_index - 1)
        }
    }

    /// Position columns of the pose at a chain position.
    pub fn chain_position(&self, chain_index: usize) -> usize {
        self.chain_rotation(chain_index) + 3
    }

    /// Columns owned by fixed poses; always the trailing block of the layout.
    pub fn fixed_columns(&self) -> Range<usize> {
        IMU_DIM + POSE_DIM * self.active..self.dim()
    }

    /// Columns of the updating (current + active) part.
    pub fn updating_columns(&self) -> Range<usize> {
        0..IMU_DIM + POSE_DIM * self.active
    }
}

/// Canonical block layout for a state.
pub fn error_block_layout(state: &FullState) -> BlockLayout {
    BlockLayout::for_state(state)
}

/// Error covariance over the tangent space of a [`FullState`].
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCovariance(pub DMatrix<f64>);

impl ErrorCovariance {
    pub fn new(m: DMatrix<f64>) -> Self {
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn symmetrize(&mut self) {
        let t = self.0.transpose();
        self.0 += t;
        self.0 *= 0.5;
    }

    pub fn check_dim(&self, state: &FullState) -> Result<(), StateError> {
        if self.0.nrows() != state.error_dim() || self.0.ncols() != state.error_dim() {
            return Err(StateError::DimensionMismatch { expected: state.error_dim(), got: self.0.nrows() });
        }
        Ok(())
    }

    /// Select rows and columns by source index.
    fn gather(&self, index: &[usize]) -> Self {
        let n = index.len();
        Self(DMatrix::from_fn(n, n, |i, j| self.0[(index[i], index[j])]))
    }
}

/// Clone the current IMU pose as the newest active pose.
///
/// The clone's covariance rows/columns duplicate those of `[δθ, δp]`, so the
/// clone is perfectly correlated with the IMU pose at creation.
pub fn augment(
    state: &FullState,
    cov: &ErrorCovariance,
    config: &WindowConfig,
    scan_index: usize,
) -> Result<(FullState, ErrorCovariance), StateError> {
    cov.check_dim(state)?;
    if state.active.len() >= config.active_size {
        return Err(StateError::WindowOverflow(state.active.len()));
    }
    let mut next = state.clone();
    next.active.insert(0, WindowPose::active(state.imu.rotation, state.imu.position, scan_index));

    let dim = state.error_dim();
    let index: Vec<usize> = (0..IMU_DIM)
        .chain(0..POSE_DIM)
        .chain(IMU_DIM..dim)
        .collect();
    Ok((next, cov.gather(&index)))
}

/// Remove a window pose (index in layout order) and its covariance rows/columns.
pub fn marginalize_drop(
    state: &FullState,
    cov: &ErrorCovariance,
    pose_index: usize,
) -> Result<(FullState, ErrorCovariance), StateError> {
    cov.check_dim(state)?;
    let len = state.window_len();
    if pose_index >= len {
        return Err(StateError::InvalidIndex { index: pose_index, len });
    }
    let mut next = state.clone();
    if pose_index < next.active.len() {
        next.active.remove(pose_index);
    } else {
        next.fixed.remove(pose_index - state.active.len());
    }
    let start = IMU_DIM + POSE_DIM * pose_index;
    let index: Vec<usize> = (0..state.error_dim()).filter(|i| !(start..start + POSE_DIM).contains(i)).collect();
    Ok((next, cov.gather(&index)))
}

/// Relabel the oldest active pose as the newest fixed pose.
///
/// The oldest active block is adjacent to the newest fixed block, so the
/// covariance needs no permutation. A full fixed set evicts its oldest member
/// first; with zero fixed capacity the pose itself is dropped.
pub fn transfer_to_fixed(
    state: &FullState,
    cov: &ErrorCovariance,
    pose_index: usize,
    config: &WindowConfig,
) -> Result<(FullState, ErrorCovariance), StateError> {
    cov.check_dim(state)?;
    let len = state.window_len();
    if pose_index >= len {
        return Err(StateError::InvalidIndex { index: pose_index, len });
    }
    if state.active.is_empty() || pose_index != state.active.len() - 1 {
        return Err(StateError::NotOldestActive(pose_index));
    }
    if config.fixed_size == 0 {
        return marginalize_drop(state, cov, pose_index);
    }
    let (mut next, mut next_cov) = (state.clone(), cov.clone());
    while next.fixed.len() >= config.fixed_size {
        let oldest = next.window_len() - 1;
        (next, next_cov) = marginalize_drop(&next, &next_cov, oldest)?;
    }
    let mut pose = next.active.pop().expect("checked non-empty");
    pose.role = PoseRole::Fixed;
    next.fixed.insert(0, pose);
    Ok((next, next_cov))
}
