//! Trajectory accuracy: timestamp association, rigid alignment and APE.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::manifold::{Pose, Rotation};

/// Default association window for nearest-timestamp pairing.
pub const DEFAULT_MAX_DT: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("timestamps must be strictly increasing (at index {0})")]
    NotIncreasing(usize),
    #[error("no pose pairs within {0} s")]
    NoPairs(f64),
    #[error("need at least 3 pose pairs, got {0}")]
    TooFewPairs(usize),
    #[error("empty trajectory")]
    Empty,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub pose: Pose,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    poses: Vec<StampedPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<StampedPose>) -> Result<Self, EvalError> {
        if let Some(i) = poses.windows(2).position(|w| !(w[1].t > w[0].t)) {
            return Err(EvalError::NotIncreasing(i + 1));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[StampedPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Parse `timestamp tx ty tz qx qy qz qw` lines; `#` starts a comment.
    pub fn from_tum(text: &str) -> Result<Self, EvalError> {
        let mut poses = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| EvalError::Parse { line: i + 1, msg };
            let v = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| err(format!("{t:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            if v.len() != 8 {
                return Err(err(format!("expected 8 fields, found {}", v.len())));
            }
            let q = Quaternion::new(v[7], v[4], v[5], v[6]);
            if !(q.norm() > 1e-9) {
                return Err(err("zero quaternion".into()));
            }
            let rotation = UnitQuaternion::from_quaternion(q).to_rotation_matrix();
            poses.push(StampedPose { t: v[0], pose: Pose::new(rotation, Vector3::new(v[1], v[2], v[3])) });
        }
        Self::new(poses)
    }

    pub fn to_tum(&self) -> String {
        let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for s in &self.poses {
            let q = UnitQuaternion::from_rotation_matrix(&s.pose.rotation);
            let p = s.pose.position;
            let _ = writeln!(
                out,
                "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
                s.t, p.x, p.y, p.z, q.i, q.j, q.k, q.w
            );
        }
        out
    }
}

/// Nearest-timestamp pairs `(gt, est)` within `max_dt`.
pub fn associate(gt: &Trajectory, est: &Trajectory, max_dt: f64) -> Result<Vec<(Pose, Pose)>, EvalError> {
    if gt.is_empty() || est.is_empty() {
        return Err(EvalError::Empty);
    }
    let times: Vec<f64> = gt.poses.iter().map(|p| p.t).collect();
    let mut pairs = Vec::new();
    for e in &est.poses {
        let i = times.partition_point(|&t| t < e.t);
        let best = [i.checked_sub(1), (i < times.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (times[a] - e.t).abs().total_cmp(&(times[b] - e.t).abs()));
        if let Some(j) = best {
            if (times[j] - e.t).abs() <= max_dt {
                pairs.push((gt.poses[j].pose, e.pose));
            }
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoPairs(max_dt));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApeResult {
    pub rmse: f64,
    /// RMSE of each world axis after alignment.
    pub axis_rmse: [f64; 3],
    pub pairs: usize,
    /// Rotation could not be determined; only translation was aligned.
    pub translation_only: bool,
}

/// Rotation and translation mapping `est` onto `gt` in the least-squares sense.
pub fn align(gt: &[Vector3<f64>], est: &[Vector3<f64>]) -> (Rotation, Vector3<f64>, bool) {
    let n = gt.len() as f64;
    let mg = gt.iter().sum::<Vector3<f64>>() / n;
    let me = est.iter().sum::<Vector3<f64>>() / n;
    let cross = gt.iter().zip(est).fold(Matrix3::zeros(), |acc, (g, e)| acc + (e - me) * (g - mg).transpose());
    let svd = cross.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    if !(sv[0] > 0.0) || sv[1] < 1e-9 * sv[0] {
        return (Rotation::identity(), mg - me, true);
    }
    let v = vt.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = Rotation::from_matrix_unchecked(v * d * u.transpose());
    let t = mg - r * me;
    (r, t, false)
}

/// Translational RMSE after rigid alignment of the estimate onto ground truth.
pub fn ape_rmse(pairs: &[(Pose, Pose)]) -> Result<ApeResult, EvalError> {
    if pairs.len() < 3 {
        return Err(EvalError::TooFewPairs(pairs.len()));
    }
    let gt: Vec<_> = pairs.iter().map(|(g, _)| g.position).collect();
    let est: Vec<_> = pairs.iter().map(|(_, e)| e.position).collect();
    let (r, t, translation_only) = align(&gt, &est);
    let mut sq = Vector3::zeros();
    for (g, e) in gt.iter().zip(&est) {
        let d = g - (r * e + t);
        sq += d.component_mul(&d);
    }
    let n = pairs.len() as f64;
    let axis = sq / n;
    Ok(ApeResult {
        rmse: (axis.sum()).sqrt(),
        axis_rmse: [axis.x.sqrt(), axis.y.sqrt(), axis.z.sqrt()],
        pairs: pairs.len(),
        translation_only,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::exp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn curve(n: usize, rate: f64) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|i| {
                    let t = i as f64 / rate;
                    StampedPose {
                        t,
                        pose: Pose::new(exp(&Vector3::new(0.0, 0.1 * t, 0.3 * t)), Vector3::new(t, (0.7 * t).sin(), 0.2 * t * t)),
                    }
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn association_examples() {
        let gt = curve(1000, 100.0);
        assert_eq!(associate(&gt, &gt, DEFAULT_MAX_DT).unwrap().len(), 1000);
        let sparse = Trajectory::new(gt.poses().iter().step_by(10).copied().collect()).unwrap();
        assert_eq!(associate(&gt, &sparse, DEFAULT_MAX_DT).unwrap().len(), 100);
        let late = Trajectory::new(gt.poses().iter().map(|p| StampedPose { t: p.t + 100.0, ..*p }).collect()).unwrap();
        assert!(matches!(associate(&gt, &late, DEFAULT_MAX_DT), Err(EvalError::NoPairs(_))));
    }

    #[test]
    fn ape_zero_for_identical_and_rigidly_moved() {
        let gt = curve(200, 10.0);
        assert!(ape_rmse(&associate(&gt, &gt, 0.02).unwrap()).unwrap().rmse < 1e-9);
        let r = exp(&Vector3::new(0.3, -1.0, 2.0));
        let t = Vector3::new(5.0, -2.0, 1.0);
        let moved = Trajectory::new(
            gt.poses()
                .iter()
                .map(|p| StampedPose { t: p.t, pose: Pose::new(r * p.pose.rotation, r * p.pose.position + t) })
                .collect(),
        )
        .unwrap();
        let ape = ape_rmse(&associate(&gt, &moved, 0.02).unwrap()).unwrap();
        assert!(ape.rmse < 1e-9, "{}", ape.rmse);
        assert!(!ape.translation_only);
    }

    #[test]
    fn ape_of_single_axis_noise() {
        let gt = curve(1000, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let noisy = Trajectory::new(
            gt.poses()
                .iter()
                .map(|p| {
                    let mut q = *p;
                    q.pose.position.y += noise.sample(&mut rng);
                    q
                })
                .collect(),
        )
        .unwrap();
        let ape = ape_rmse(&associate(&gt, &noisy, 0.02).unwrap()).unwrap();
        assert!((ape.rmse - 0.1).abs() < 0.02, "{}", ape.rmse);
        assert!(ape.axis_rmse[1] > 5.0 * ape.axis_rmse[0]);
    }

    #[test]
    fn collinear_trajectory_falls_back() {
        let line: Vec<_> = (0..10)
            .map(|i| (Pose::new(Rotation::identity(), Vector3::x() * i as f64), Pose::new(Rotation::identity(), Vector3::new(i as f64, 1.0, 0.0))))
            .collect();
        let ape = ape_rmse(&line).unwrap();
        assert!(ape.translation_only);
        assert!(ape.rmse < 1e-12);
        assert!(matches!(ape_rmse(&line[..2]), Err(EvalError::TooFewPairs(2))));
    }

    #[test]
    fn tum_round_trip() {
        let gt = curve(50, 10.0);
        let text = gt.to_tum();
        let back = Trajectory::from_tum(&text).unwrap();
        assert_eq!(back.len(), 50);
        for (a, b) in gt.poses().iter().zip(back.poses()) {
            assert!((a.t - b.t).abs() < 1e-6);
            assert!((a.pose.position - b.pose.position).norm() < 1e-8);
            assert!((a.pose.rotation.matrix() - b.pose.rotation.matrix()).abs().max() < 1e-8);
        }
        assert!(Trajectory::from_tum("0 1 2 3").is_err());
        assert!(Trajectory::from_tum("1 0 0 0 0 0 0 1\n0 0 0 0 0 0 0 1\n").is_err());
    }
}
