//! IMU kinematics and error-state covariance propagation between scans.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use thiserror::Error;

use crate::manifold::{exp, right_jacobian, skew};
use crate::state::{ErrorCovariance, FullState, ImuState, StateError, IMU_DIM};

/// Process-noise rate on the gravity block, (m/s²)²/s.
pub const GRAVITY_NOISE_RATE: f64 = 1e-10;

pub type ImuJacobian = SMatrix<f64, 18, 18>;
pub type NoiseJacobian = SMatrix<f64, 18, 12>;

#[derive(Debug, Error, PartialEq)]
pub enum PropagationError {
    #[error("non-positive time step {0}")]
    NonPositiveDt(f64),
    #[error(transparent)]
    State(#[from] StateError),
    #[error("static initialization needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

/// Continuous-time noise densities, each a per-axis variance rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// (rad/s)²/Hz
    pub gyro: f64,
    /// (m/s²)²/Hz
    pub accel: f64,
    /// (rad/s)²/s
    pub gyro_bias_walk: f64,
    /// (m/s²)²/s
    pub accel_bias_walk: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self { gyro: 1e-5, accel: 1e-3, gyro_bias_walk: 1e-8, accel_bias_walk: 1e-6 }
    }
}

impl NoiseParams {
    pub fn zero() -> Self {
        Self { gyro: 0.0, accel: 0.0, gyro_bias_walk: 0.0, accel_bias_walk: 0.0 }
    }

    pub fn is_valid(&self) -> bool {
        [self.gyro, self.accel, self.gyro_bias_walk, self.accel_bias_walk].iter().all(|v| *v >= 0.0 && v.is_finite())
    }
}

/// One realization of the process noise `w = [n_ω, n_a, n_bω, n_ba]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NoiseSample {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
}

/// Continuous-time rate of the IMU block with zero noise.
///
/// Rows follow the error layout `[θ, p, v, b_ω, b_a, g]`; window-pose rows are zero.
pub fn f_model(imu: &ImuState, u: &ImuSample) -> SVector<f64, 18> {
    rate(imu, u, &NoiseSample::default())
}

fn rate(imu: &ImuState, u: &ImuSample, w: &NoiseSample) -> SVector<f64, 18> {
    let mut f = SVector::<f64, 18>::zeros();
    f.fixed_rows_mut::<3>(0).copy_from(&(u.gyro - imu.gyro_bias - w.gyro));
    f.fixed_rows_mut::<3>(3).copy_from(&imu.velocity);
    f.fixed_rows_mut::<3>(6).copy_from(&(imu.rotation * (u.accel - imu.accel_bias - w.accel) + imu.gravity));
    f.fixed_rows_mut::<3>(9).copy_from(&w.gyro_bias);
    f.fixed_rows_mut::<3>(12).copy_from(&w.accel_bias);
    f
}

/// One forward-Euler step `x ⊞ f(x, u, w)·dt` of the IMU block.
pub fn step_imu(imu: &ImuState, u: &ImuSample, w: &NoiseSample, dt: f64) -> ImuState {
    let f = rate(imu, u, w) * dt;
    let mut rotation = imu.rotation * exp(&f.fixed_rows::<3>(0).into_owned());
    rotation.renormalize();
    ImuState {
        rotation,
        position: imu.position + f.fixed_rows::<3>(3),
        velocity: imu.velocity + f.fixed_rows::<3>(6),
        gyro_bias: imu.gyro_bias + f.fixed_rows::<3>(9),
        accel_bias: imu.accel_bias + f.fixed_rows::<3>(12),
        gravity: imu.gravity + f.fixed_rows::<3>(15),
    }
}

/// Jacobians of [`step_imu`] with respect to the IMU error state and to `w`.
pub fn imu_jacobians(imu: &ImuState, u: &ImuSample, dt: f64) -> (ImuJacobian, NoiseJacobian) {
    let omega_dt = (u.gyro - imu.gyro_bias) * dt;
    let acc = u.accel - imu.accel_bias;
    let r = imu.rotation.matrix();
    let jr_dt = right_jacobian(&omega_dt) * dt;
    let i3 = Matrix3::identity();

    let mut fx = ImuJacobian::identity();
    fx.fixed_view_mut::<3, 3>(0, 0).copy_from(&exp(&omega_dt).matrix().transpose());
    fx.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-jr_dt));
    fx.fixed_view_mut::<3, 3>(3, 6).copy_from(&(i3 * dt));
    fx.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-r * skew(&acc) * dt));
    fx.fixed_view_mut::<3, 3>(6, 12).copy_from(&(-r * dt));
    fx.fixed_view_mut::<3, 3>(6, 15).copy_from(&(i3 * dt));

    let mut fw = NoiseJacobian::zeros();
    fw.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jr_dt));
    fw.fixed_view_mut::<3, 3>(6, 3).copy_from(&(-r * dt));
    fw.fixed_view_mut::<3, 3>(9, 6).copy_from(&(i3 * dt));
    fw.fixed_view_mut::<3, 3>(12, 9).copy_from(&(i3 * dt));
    (fx, fw)
}

/// Covariance of the noise sample `w` over one step.
///
/// `F_w` carries a factor `dt`, so dividing the densities by `dt` makes
/// `F_w Q F_wᵀ` grow like `density·dt`.
pub fn noise_covariance(noise: &NoiseParams, dt: f64) -> SVector<f64, 12> {
    let mut q = SVector::<f64, 12>::zeros();
    let rates = [noise.gyro, noise.accel, noise.gyro_bias_walk, noise.accel_bias_walk];
    for (k, v) in rates.iter().enumerate() {
        for i in 0..3 {
            q[3 * k + i] = v / dt;
        }
    }
    q
}

/// Propagate the full state and covariance through one IMU sample.
///
/// Window poses are static between updates: their blocks of `F_x̃` are
/// identity and they receive no process noise.
pub fn propagate(
    state: &FullState,
    cov: &ErrorCovariance,
    u: &ImuSample,
    dt: f64,
    noise: &NoiseParams,
) -> Result<(FullState, ErrorCovariance), PropagationError> {
    if !(dt > 0.0) {
        return Err(PropagationError::NonPositiveDt(dt));
    }
    cov.check_dim(state)?;
    let (fx, fw) = imu_jacobians(&state.imu, u, dt);
    let q = noise_covariance(noise, dt);

    let mut next = state.clone();
    next.imu = step_imu(&state.imu, u, &NoiseSample::default(), dt);

    let p = cov.matrix();
    let dim = p.nrows();
    let mut out = p.clone();
    let p_ii = p.fixed_view::<18, 18>(0, 0);
    let mut new_ii = fx * p_ii * fx.transpose() + fw * SMatrix::<f64, 12, 12>::from_diagonal(&q) * fw.transpose();
    for i in 15..18 {
        new_ii[(i, i)] += GRAVITY_NOISE_RATE * dt;
    }
    out.fixed_view_mut::<18, 18>(0, 0).copy_from(&new_ii);
    if dim > IMU_DIM {
        let w = dim - IMU_DIM;
        let cross = fx * p.view((0, IMU_DIM), (IMU_DIM, w));
        out.view_mut((0, IMU_DIM), (IMU_DIM, w)).copy_from(&cross);
        out.view_mut((IMU_DIM, 0), (w, IMU_DIM)).copy_from(&cross.transpose());
    }
    let mut out = ErrorCovariance::new(out);
    out.symmetrize();
    Ok((next, out))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticInit {
    pub gravity: Vector3<f64>,
    pub gyro_bias: Vector3<f64>,
    /// Sample variance suggested the device was moving.
    pub motion_detected: bool,
}

pub const MIN_STATIC_SAMPLES: usize = 100;
const STATIC_ACCEL_VARIANCE: f64 = 0.05;
const STATIC_GYRO_VARIANCE: f64 = 1e-3;

/// Gravity and gyro bias from a stationary stream; the global frame is the
/// first IMU frame, so gravity is the negated mean specific force.
pub fn static_initialize(samples: &[ImuSample]) -> Result<StaticInit, PropagationError> {
    if samples.len() < MIN_STATIC_SAMPLES {
        return Err(PropagationError::TooFewSamples { needed: MIN_STATIC_SAMPLES, got: samples.len() });
    }
    let n = samples.len() as f64;
    let mean_w = samples.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n;
    let mean_a = samples.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n;
    let var = |f: &dyn Fn(&ImuSample) -> Vector3<f64>, mean: &Vector3<f64>| {
        samples.iter().map(|s| (f(s) - mean).norm_squared()).sum::<f64>() / (n - 1.0)
    };
    let var_a = var(&|s| s.accel, &mean_a);
    let var_w = var(&|s| s.gyro, &mean_w);
    Ok(StaticInit {
        gravity: -mean_a,
        gyro_bias: mean_w,
        motion_detected: var_a > STATIC_ACCEL_VARIANCE || var_w > STATIC_GYRO_VARIANCE,
    })
}
