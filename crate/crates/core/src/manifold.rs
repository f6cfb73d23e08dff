//! SO(3) and compound-manifold algebra.
//!
//! Rotations are perturbed on the right everywhere in this crate:
//! `R ⊞ δθ = R · Exp(δθ)` and `Ra ⊟ Rb = Log(Rbᵀ · Ra)`. Vector blocks are
//! perturbed additively. All measurement and propagation Jacobians are
//! derived for this convention and checked against finite differences.

use nalgebra::{DVector, Matrix3, Rotation3, Vector3};
use thiserror::Error;

use crate::state::FullState;

/// Rotation matrix in SO(3).
pub type Rotation = Rotation3<f64>;

/// Below this rotation-vector norm the Taylor expansions are used.
pub const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum ManifoldError {
    #[error("rotation vector has non-finite component: {0:?}")]
    NonFinite([f64; 3]),
    #[error("tangent vector has dimension {got}, state expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("states have different window shapes ({0} vs {1} poses)")]
    ShapeMismatch(usize, usize),
}

/// A rotation and position pair, the pose part of every window slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation,
    pub position: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, position: Vector3<f64>) -> Self {
        Self { rotation, position }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn transform_point(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.position
    }
}

/// Skew-symmetric matrix with `skew(v) * w == v.cross(&w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map, rejecting non-finite input.
pub fn so3_exp(phi: &Vector3<f64>) -> Result<Rotation, ManifoldError> {
    if phi.iter().all(|c| c.is_finite()) {
        Ok(exp(phi))
    } else {
        Err(ManifoldError::NonFinite([phi.x, phi.y, phi.z]))
    }
}

/// Rodrigues' formula; second-order Taylor expansion near the origin.
pub fn exp(phi: &Vector3<f64>) -> Rotation {
    let theta = phi.norm();
    let k = skew(phi);
    let m = if theta < SMALL_ANGLE {
        Matrix3::identity() + k + 0.5 * k * k
    } else {
        let (s, c) = theta.sin_cos();
        Matrix3::identity() + (s / theta) * k + ((1.0 - c) / (theta * theta)) * k * k
    };
    Rotation::from_matrix_unchecked(m)
}

/// Principal logarithm, `‖result‖ ≤ π`.
pub fn so3_log(r: &Rotation) -> Vector3<f64> {
    let m = r.matrix();
    let cos_theta = ((m.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let vee = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]);

    if cos_theta > 1.0 - 1e-12 {
        // theta ≈ 0: Log(R) ≈ vee(R - Rᵀ)/2 to second order
        return 0.5 * vee;
    }
    if cos_theta < -0.99 {
        return log_near_pi(m, cos_theta, &vee);
    }
    let theta = cos_theta.acos();
    vee * (theta / (2.0 * theta.sin()))
}

// Near π the antisymmetric part vanishes; recover the axis from R + I using
// the column with the largest diagonal element, then fix the sign from vee.
fn log_near_pi(m: &Matrix3<f64>, cos_theta: f64, vee: &Vector3<f64>) -> Vector3<f64> {
    let theta = (0.5 * vee.norm()).atan2(cos_theta);
    let b = 1.0 - cos_theta;
    let diag = [m[(0, 0)], m[(1, 1)], m[(2, 2)]];
    let i = (0..3)
        .max_by(|&a, &b| diag[a].partial_cmp(&diag[b]).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap_or(0);
    // R = cosθ I + (1-cosθ) a aᵀ + sinθ [a]x  →  column i of (R + Rᵀ)/2 - cosθ I = b a_i a
    let sym = 0.5 * (m + m.transpose()) - cos_theta * Matrix3::identity();
    let ai = (sym[(i, i)] / b).max(0.0).sqrt();
    let mut axis = if ai > 0.0 {
        Vector3::new(sym[(0, i)], sym[(1, i)], sym[(2, i)]) / (b * ai)
    } else {
        Vector3::x()
    };
    axis.normalize_mut();
    if axis.dot(vee) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Right Jacobian `Jr(φ)` of the exponential map.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() - 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let t2 = theta * theta;
    Matrix3::identity() - ((1.0 - theta.cos()) / t2) * k + ((theta - theta.sin()) / (t2 * theta)) * k * k
}

/// Inverse right Jacobian `Jr⁻¹(φ)`.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-5 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 12.0) * k * k;
    }
    let t2 = theta * theta;
    let coeff = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Matrix3::identity() + 0.5 * k + coeff * k * k
}

/// Pose difference `a ⊟ b` as `[Log(Rbᵀ Ra); pa − pb]`.
pub fn pose_boxminus(a: &Pose, b: &Pose) -> [Vector3<f64>; 2] {
    [so3_log(&(b.rotation.inverse() * a.rotation)), a.position - b.position]
}

fn rotate_right(r: &Rotation, delta: &Vector3<f64>) -> Rotation {
    if delta.iter().all(|&d| d == 0.0) {
        *r
    } else {
        let mut out = r * exp(delta);
        out.renormalize();
        out
    }
}

fn block(delta: &DVector<f64>, start: usize) -> Vector3<f64> {
    Vector3::new(delta[start], delta[start + 1], delta[start + 2])
}

/// Compound-manifold addition `x ⊞ δ` over the canonical error layout.
///
/// Blocks whose increment is exactly zero are left bit-identical.
pub fn boxplus(x: &FullState, delta: &DVector<f64>) -> Result<FullState, ManifoldError> {
    let expected = x.error_dim();
    if delta.len() != expected {
        return Err(ManifoldError::DimensionMismatch { expected, got: delta.len() });
    }
    if delta.iter().any(|d| !d.is_finite()) {
        let first = delta.iter().position(|d| !d.is_finite()).unwrap_or(0);
        let start = first - first % 3;
        let b = block(delta, start);
        return Err(ManifoldError::NonFinite([b.x, b.y, b.z]));
    }
    let mut out = x.clone();
    let imu = &mut out.imu;
    imu.rotation = rotate_right(&imu.rotation, &block(delta, 0));
    imu.position += block(delta, 3);
    imu.velocity += block(delta, 6);
    imu.gyro_bias += block(delta, 9);
    imu.accel_bias += block(delta, 12);
    imu.gravity += block(delta, 15);
    for (i, pose) in out.window_poses_mut().enumerate() {
        let base = 18 + 6 * i;
        pose.rotation = rotate_right(&pose.rotation, &block(delta, base));
        pose.position += block(delta, base + 3);
    }
    Ok(out)
}

/// Compound-manifold subtraction `a ⊟ b`; both states must share a window shape.
pub fn boxminus(a: &FullState, b: &FullState) -> Result<DVector<f64>, ManifoldError> {
    if a.active.len() != b.active.len() || a.fixed.len() != b.fixed.len() {
        return Err(ManifoldError::ShapeMismatch(a.window_len(), b.window_len()));
    }
    let mut out = DVector::zeros(a.error_dim());
    let mut put = |start: usize, v: Vector3<f64>| out.fixed_rows_mut::<3>(start).copy_from(&v);
    put(0, so3_log(&(b.imu.rotation.inverse() * a.imu.rotation)));
    put(3, a.imu.position - b.imu.position);
    put(6, a.imu.velocity - b.imu.velocity);
    put(9, a.imu.gyro_bias - b.imu.gyro_bias);
    put(12, a.imu.accel_bias - b.imu.accel_bias);
    put(15, a.imu.gravity - b.imu.gravity);
    for (i, (pa, pb)) in a.window_poses().zip(b.window_poses()).enumerate() {
        let [dt, dp] = pose_boxminus(&pa.pose(), &pb.pose());
        put(18 + 6 * i, dt);
        put(18 + 6 * i + 3, dp);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::{ImuState, WindowPose};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn rotation_valid(r: &Rotation) -> bool {
        let m = r.matrix();
        (m * m.transpose() - Matrix3::identity()).abs().max() < 1e-9 && (m.determinant() - 1.0).abs() < 1e-9
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(so3_exp(&Vector3::zeros()).unwrap(), Rotation::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let r = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0)).unwrap();
        let v = r * Vector3::x();
        assert!((v - Vector3::y()).norm() < 1e-12);
    }

    #[test]
    fn exp_full_turn_is_identity() {
        let axis = Vector3::new(1.0, -2.0, 0.5).normalize();
        let r = so3_exp(&(axis * 2.0 * PI)).unwrap();
        assert!((r.matrix() - Matrix3::identity()).abs().max() < 1e-9);
    }

    #[test]
    fn exp_rejects_non_finite() {
        assert!(so3_exp(&Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(so3_exp(&Vector3::new(0.0, f64::INFINITY, 0.0)).is_err());
    }

    #[test]
    fn log_identity_and_round_trip() {
        assert_eq!(so3_log(&Rotation::identity()), Vector3::zeros());
        let phi = Vector3::new(0.1, -0.2, 0.3);
        assert!((so3_log(&exp(&phi)) - phi).norm() < 1e-10);
    }

    #[test]
    fn log_of_half_turn_about_z() {
        let r = Rotation::from_matrix_unchecked(Matrix3::new(-1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0));
        let phi = so3_log(&r);
        assert!((phi.abs() - Vector3::new(0.0, 0.0, PI)).norm() < 1e-12);
        assert!((exp(&phi).matrix() - r.matrix()).abs().max() < 1e-12);
    }

    #[test]
    fn log_near_pi_round_trips() {
        for axis in [Vector3::new(1.0, 2.0, -0.5), Vector3::new(-0.3, 0.1, 1.0), Vector3::x()] {
            for angle in [PI - 1e-3, PI - 1e-7, PI] {
                let r = exp(&(axis.normalize() * angle));
                let back = exp(&so3_log(&r));
                assert!((back.matrix() - r.matrix()).abs().max() < 1e-9, "axis {axis:?} angle {angle}");
                assert!(so3_log(&r).norm() <= PI + 1e-12);
            }
        }
    }

    #[test]
    fn skew_properties() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(skew(&Vector3::x()) * Vector3::y(), Vector3::z());
        let s = skew(&Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(s.transpose(), -s);
    }

    #[test]
    fn right_jacobian_inverse_pair() {
        for phi in [Vector3::new(0.3, -0.1, 0.7), Vector3::new(1e-7, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.4)] {
            let prod = right_jacobian(&phi) * right_jacobian_inv(&phi);
            assert!((prod - Matrix3::identity()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn right_jacobian_matches_finite_differences() {
        // Exp(φ + δ) ≈ Exp(φ) Exp(Jr δ)
        let phi = Vector3::new(0.4, -0.3, 0.9);
        let h = 1e-6;
        let jr = right_jacobian(&phi);
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let plus = so3_log(&(exp(&phi).inverse() * exp(&(phi + d))));
            let minus = so3_log(&(exp(&phi).inverse() * exp(&(phi - d))));
            let col = (plus - minus) / (2.0 * h);
            assert!((col - jr.column(k)).norm() < 1e-8);
        }
    }

    fn sample_state() -> FullState {
        let imu = ImuState {
            rotation: exp(&Vector3::new(0.2, -0.1, 0.4)),
            position: Vector3::new(1.0, 2.0, 3.0),
            velocity: Vector3::new(0.1, 0.0, -0.2),
            gyro_bias: Vector3::new(0.01, 0.0, 0.0),
            accel_bias: Vector3::new(0.0, 0.02, 0.0),
            gravity: Vector3::new(0.0, 0.0, -9.81),
        };
        let mut s = FullState::new(imu);
        s.active.push(WindowPose::active(exp(&Vector3::new(0.0, 0.3, 0.1)), Vector3::new(0.5, 0.0, 0.0), 3));
        s.fixed.push(WindowPose::fixed(exp(&Vector3::new(-0.2, 0.0, 0.2)), Vector3::new(0.0, -1.0, 0.0), 1));
        s
    }

    #[test]
    fn boxplus_zero_is_identity() {
        let x = sample_state();
        let y = boxplus(&x, &DVector::zeros(x.error_dim())).unwrap();
        assert_eq!(x, y);
        assert_eq!(boxminus(&x, &x).unwrap(), DVector::zeros(x.error_dim()));
    }

    #[test]
    fn boxplus_dimension_mismatch() {
        let x = sample_state();
        assert_eq!(
            boxplus(&x, &DVector::zeros(5)),
            Err(ManifoldError::DimensionMismatch { expected: 30, got: 5 })
        );
    }

    #[test]
    fn position_only_delta_keeps_rotations() {
        let x = sample_state();
        let mut d = DVector::zeros(x.error_dim());
        d[3] = 0.5;
        d[4] = -1.0;
        let y = boxplus(&x, &d).unwrap();
        assert_eq!(y.imu.position, x.imu.position + Vector3::new(0.5, -1.0, 0.0));
        assert_eq!(y.imu.rotation, x.imu.rotation);
        assert_eq!(y.active[0].rotation, x.active[0].rotation);
        assert_eq!(y.fixed[0].rotation, x.fixed[0].rotation);
        let back = boxminus(&y, &x).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn boxminus_matches_direct_log_on_poses() {
        let a = Pose::new(exp(&Vector3::new(0.3, 0.2, -0.4)), Vector3::new(1.0, 0.0, 2.0));
        let b = Pose::new(exp(&Vector3::new(-0.1, 0.5, 0.2)), Vector3::new(-1.0, 3.0, 0.0));
        let [dt, dp] = pose_boxminus(&a, &b);
        // Direct evaluation: Exp(dt) = Rbᵀ Ra
        let direct = b.rotation.matrix().transpose() * a.rotation.matrix();
        assert!((exp(&dt).matrix() - direct).abs().max() < 1e-12);
        assert_eq!(dp, Vector3::new(2.0, -3.0, 2.0));
    }

    proptest! {
        #[test]
        fn exp_output_is_valid_rotation(x in -10.0..10.0f64, y in -10.0..10.0f64, z in -10.0..10.0f64) {
            prop_assert!(rotation_valid(&exp(&Vector3::new(x, y, z))));
        }

        #[test]
        fn boxplus_boxminus_round_trip(v in proptest::collection::vec(-1.7..1.7f64, 30)) {
            let x = sample_state();
            let d = DVector::from_vec(v);
            let y = boxplus(&x, &d).unwrap();
            let back = boxminus(&y, &x).unwrap();
            prop_assert!((back - d).amax() < 1e-9);
        }

        #[test]
        fn parallel_exponentials_commute(ax in -1.0..1.0f64, ay in -1.0..1.0f64, az in -1.0..1.0f64,
                                         s in -2.0..2.0f64, t in -2.0..2.0f64) {
            let axis = Vector3::new(ax, ay, az);
            let (a, b) = (axis * s, axis * t);
            let lhs = exp(&(a + b));
            let rhs = exp(&a) * exp(&b);
            prop_assert!((lhs.matrix() - rhs.matrix()).abs().max() < 1e-9);
        }
    }
}
