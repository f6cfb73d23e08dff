//! Iterated error-state Schmidt-Kalman update over the sliding window.
//!
//! Fixed poses take part in the gain through their cross-covariances but
//! never move: their gain rows are zeroed, so their means and their own
//! covariance block come out of every update bit-identical.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::manifold::{boxminus, boxplus, right_jacobian, ManifoldError};
use crate::measurement::{MeasurementError, StackedSystem};
use crate::state::{
    augment, marginalize_drop, transfer_to_fixed, BlockLayout, ErrorCovariance, FullState, StateError, WindowConfig,
    IMU_DIM, POSE_DIM,
};

#[derive(Debug, Error)]
pub enum UpdateError {
    #[error("normal matrix is singular at iteration {0}")]
    SingularNormalMatrix(usize),
    #[error("measurement system has {rows} rows and {cols} columns; state expects {dim}")]
    SystemShape { rows: usize, cols: usize, dim: usize },
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Measurement(#[from] MeasurementError),
    #[error(transparent)]
    State(#[from] StateError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateConfig {
    pub max_iterations: usize,
    /// Stop once the tangent-space increment norm falls below this.
    pub convergence_eps: f64,
    /// Zero the gain rows of fixed poses.
    pub schmidt: bool,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self::from_window(&WindowConfig::default())
    }
}

impl UpdateConfig {
    pub fn from_window(window: &WindowConfig) -> Self {
        Self { max_iterations: window.max_iterations.max(1), convergence_eps: window.convergence_eps, schmidt: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateSummary {
    pub iterations: usize,
    pub converged: bool,
    /// Increment norm of every iteration.
    pub increments: Vec<f64>,
    pub rows: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SlideDecision {
    /// Oldest active pose moved to the fixed set.
    Full,
    /// Oldest active pose discarded.
    Partial,
    /// Window still filling, or disabled.
    None,
}

/// Per-scan account of selection, update and sliding.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateReport {
    pub iterations: usize,
    pub converged: bool,
    pub chi_pre_prune: f64,
    pub chi_post_prune: f64,
    pub chi_post_compensate: f64,
    pub rows_total: usize,
    pub rows_pruned: usize,
    pub rows_compensated: usize,
    pub slide: SlideDecision,
}

/// Zero the gain rows of fixed poses; other rows are untouched.
pub fn schmidt_gain(mut k: DMatrix<f64>, layout: &BlockLayout) -> DMatrix<f64> {
    let fixed = layout.fixed_columns();
    k.rows_mut(fixed.start, fixed.len()).fill(0.0);
    k
}

/// `J⁻¹` of the prior-to-iterate reparametrization: the right Jacobian on
/// every rotation block that has moved, identity elsewhere.
fn reparam_inverse(iterate: &FullState, prior: &FullState, layout: &BlockLayout) -> Result<DMatrix<f64>, ManifoldError> {
    let e = boxminus(iterate, prior)?;
    let mut jinv = DMatrix::identity(layout.dim(), layout.dim());
    let rotation_starts = std::iter::once(0).chain((0..layout.active_count()).map(|i| IMU_DIM + POSE_DIM * i));
    for s in rotation_starts {
        let phi = e.fixed_rows::<3>(s).into_owned();
        if phi.iter().any(|&x| x != 0.0) {
            jinv.fixed_view_mut::<3, 3>(s, s).copy_from(&right_jacobian(&phi));
        }
    }
    Ok(jinv)
}

/// `(I + P M)⁻¹ P` for an information matrix `M`; `None` when singular.
fn gain_factor(p: &DMatrix<f64>, info: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut a = p * info;
    for i in 0..a.nrows() {
        a[(i, i)] += 1.0;
    }
    let l = a.lu().solve(p)?;
    l.iter().all(|x| x.is_finite()).then_some(l)
}

/// Gain `(I + P HᵀC⁻¹H)⁻¹ P HᵀC⁻¹`, equal to `(HᵀC⁻¹H + P⁻¹)⁻¹HᵀC⁻¹` without inverting `P`.
pub fn kalman_gain(p: &DMatrix<f64>, system: &StackedSystem) -> Option<DMatrix<f64>> {
    let w = system.weighted_transpose();
    let pw = p * &w;
    let mut a = &pw * &system.h;
    for i in 0..a.nrows() {
        a[(i, i)] += 1.0;
    }
    let k = a.lu().solve(&pw)?;
    k.iter().all(|x| x.is_finite()).then_some(k)
}

/// Partitioned Joseph form for a gain whose rows outside `updating` are zero.
///
/// `k_u` holds the gain rows of the `updating` block, which must be a prefix
/// of the layout; the complementary block keeps its covariance exactly.
pub fn joseph_partitioned(
    p: &DMatrix<f64>,
    k_u: &DMatrix<f64>,
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    updating: Range<usize>,
) -> DMatrix<f64> {
    assert_eq!(updating.start, 0, "updating block must lead the layout");
    let g = k_u * h;
    let mut kc = k_u.clone();
    for (j, mut col) in kc.column_iter_mut().enumerate() {
        col *= c[j];
    }
    joseph_from_products(p, &g, &(kc * k_u.transpose()))
}

/// Partitioned Joseph form from `G = K_u H` and `K_u C K_uᵀ`.
fn joseph_from_products(p: &DMatrix<f64>, g: &DMatrix<f64>, kck: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = p.nrows();
    let nu = g.nrows();
    let gp = g * p;
    let gp_u = gp.columns(0, nu);
    let uu = p.view((0, 0), (nu, nu)) - gp_u - gp_u.transpose() + &gp * g.transpose() + kck;
    let mut out = p.clone();
    out.view_mut((0, 0), (nu, nu)).copy_from(&uu);
    if nu < dim {
        let nf = dim - nu;
        let uf = p.view((0, nu), (nu, nf)) - gp.columns(nu, nf);
        out.view_mut((0, nu), (nu, nf)).copy_from(&uf);
        out.view_mut((nu, 0), (nf, nu)).copy_from(&uf.transpose());
    }
    let upper = out.view((0, 0), (nu, nu)).into_owned();
    out.view_mut((0, 0), (nu, nu)).copy_from(&((&upper + upper.transpose()) * 0.5));
    out
}

/// Covariance after an update with Schmidt gain `k_u` on the updating block of `layout`.
pub fn joseph_update(
    p: &ErrorCovariance,
    k_u: &DMatrix<f64>,
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    layout: &BlockLayout,
) -> ErrorCovariance {
    ErrorCovariance::new(joseph_partitioned(p.matrix(), k_u, h, c, layout.updating_columns()))
}

/// Covariance, gain factor, information and row count of the final iterate.
type LastIterate = (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, usize);

/// Iterated MAP update; `build` stacks the measurement system at a given iterate.
///
/// An empty system leaves state and covariance untouched.
pub fn iterated_update<F>(
    prior: &FullState,
    prior_cov: &ErrorCovariance,
    config: &UpdateConfig,
    mut build: F,
) -> Result<(FullState, ErrorCovariance, UpdateSummary), UpdateError>
where
    F: FnMut(&FullState) -> Result<StackedSystem, UpdateError>,
{
    prior_cov.check_dim(prior)?;
    let layout = BlockLayout::for_state(prior);
    let dim = layout.dim();
    let updating = if config.schmidt { layout.updating_columns() } else { 0..dim };

    let mut x = prior.clone();
    let mut increments = Vec::new();
    let mut last: Option<LastIterate> = None;
    let mut converged = false;

    for it in 0..config.max_iterations.max(1) {
        let system = build(&x)?;
        if system.h.ncols() != dim || system.h.nrows() != system.rows() || system.c.len() != system.rows() {
            return Err(UpdateError::SystemShape { rows: system.rows(), cols: system.h.ncols(), dim });
        }
        if system.is_empty() {
            return Ok((x, prior_cov.clone(), UpdateSummary { iterations: it, converged: true, increments, rows: 0 }));
        }
        let jinv = reparam_inverse(&x, prior, &layout)?;
        let p = &jinv * prior_cov.matrix() * jinv.transpose();
        let info = system.information();
        // K = (I + P M)⁻¹ P Hᵀ C⁻¹ = L Hᵀ C⁻¹ with L = (I + P M)⁻¹ P.
        let mut l = gain_factor(&p, &info).ok_or(UpdateError::SingularNormalMatrix(it))?;
        if config.schmidt {
            let fixed = layout.fixed_columns();
            l.rows_mut(fixed.start, fixed.len()).fill(0.0);
        }
        let kh = &l * &info;
        let e = boxminus(&x, prior)?;
        let mut i_kh = -&kh;
        for d in 0..dim {
            i_kh[(d, d)] += 1.0;
        }
        let delta = -(&l * system.weighted_residual()) - i_kh * (&jinv * e);
        let norm = delta.norm();
        increments.push(norm);
        x = boxplus(&x, &delta)?;
        last = Some((p, l, info, system.rows()));
        if norm < config.convergence_eps {
            converged = true;
            break;
        }
    }

    let (p, l, info, rows) = last.expect("at least one iteration");
    let l_u = l.rows(0, updating.len()).into_owned();
    let g = &l_u * &info;
    let kck = &g * l_u.transpose();
    let cov = ErrorCovariance::new(joseph_from_products(&p, &g, &kck));
    Ok((x, cov, UpdateSummary { iterations: increments.len(), converged, increments, rows }))
}

/// Advance the window after an update.
///
/// When the active set is full its oldest pose goes to the fixed set if
/// `chi_last_active < threshold`, otherwise it is dropped; the current pose
/// then joins as the newest active pose.
pub fn slide(
    state: &FullState,
    cov: &ErrorCovariance,
    chi_last_active: f64,
    config: &WindowConfig,
    scan_index: usize,
) -> Result<(FullState, ErrorCovariance, SlideDecision), StateError> {
    if config.active_size == 0 {
        return Ok((state.clone(), cov.clone(), SlideDecision::None));
    }
    let (mut s, mut c) = (state.clone(), cov.clone());
    let mut decision = SlideDecision::None;
    if s.active.len() >= config.active_size {
        let oldest = s.active.len() - 1;
        if chi_last_active < config.condition_threshold && config.fixed_size > 0 {
            (s, c) = transfer_to_fixed(&s, &c, oldest, config)?;
            decision = SlideDecision::Full;
        } else {
            (s, c) = marginalize_drop(&s, &c, oldest)?;
            decision = SlideDecision::Partial;
        }
    }
    let (s, c) = augment(&s, &c, config, scan_index)?;
    Ok((s, c, decision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::{exp, Pose};
    use crate::measurement::{stack_system, Extrinsics, Measurement};
    use crate::state::{ImuState, WindowPose};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        (&a * a.transpose()) * scale + DMatrix::identity(n, n) * 1e-4
    }

    fn windowed_state(rng: &mut ChaCha8Rng, active: usize, fixed: usize) -> FullState {
        let mut s = FullState::new(ImuState::at_origin(Vector3::new(0.0, 0.0, -9.81), Vector3::zeros()));
        s.imu.rotation = exp(&Vector3::new(0.1, -0.2, 0.3));
        s.imu.position = Vector3::new(1.0, 2.0, 0.5);
        for i in 0..active {
            let r = exp(&Vector3::new(rng.random_range(-0.3..0.3), 0.1, rng.random_range(-0.3..0.3)));
            s.active.push(WindowPose::active(r, Vector3::new(0.8 - 0.3 * i as f64, 1.9, 0.5), 10 - i));
        }
        for i in 0..fixed {
            let r = exp(&Vector3::new(0.05, rng.random_range(-0.3..0.3), 0.0));
            s.fixed.push(WindowPose::fixed(r, Vector3::new(0.1 - 0.3 * i as f64, 1.8, 0.5), 5 - i));
        }
        s
    }

    fn box_measurements(rng: &mut ChaCha8Rng, owners: usize, n: usize) -> Vec<Measurement> {
        let normals = [Vector3::x(), Vector3::y(), Vector3::z(), -Vector3::x(), -Vector3::y(), -Vector3::z()];
        (0..n)
            .map(|i| {
                let nrm = normals[i % 6];
                let point = Vector3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
                let anchor = -nrm * 5.0 + Vector3::new(rng.random_range(-0.1..0.1), 0.0, 0.0);
                Measurement::new(point, i % owners, nrm, anchor, 0.01).unwrap()
            })
            .collect()
    }

    #[test]
    fn schmidt_gain_examples() {
        let k = DMatrix::from_fn(42, 7, |i, j| (i * 7 + j) as f64 + 1.0);
        let none = BlockLayout::with_window(4, 0);
        assert_eq!(schmidt_gain(k.clone(), &none), k);
        let two = BlockLayout::with_window(2, 2);
        let z = schmidt_gain(k.clone(), &two);
        let zero_rows = (0..42).filter(|&i| z.row(i).iter().all(|&x| x == 0.0)).count();
        assert_eq!(zero_rows, 12);
        assert_eq!(z.rows(0, 30), k.rows(0, 30));
    }

    #[test]
    fn joseph_matches_classic_form_without_fixed_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let dim = 30;
            let n = 15;
            let p = random_spd(&mut rng, dim, 0.1);
            let h = DMatrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0));
            let c = DVector::from_fn(n, |_, _| rng.random_range(0.01..0.1));
            let k = DMatrix::from_fn(dim, n, |_, _| rng.random_range(-0.2..0.2));
            let out = joseph_partitioned(&p, &k, &h, &c, 0..dim);
            let i_kh = DMatrix::identity(dim, dim) - &k * &h;
            let classic = &i_kh * &p * i_kh.transpose() + &k * DMatrix::from_diagonal(&c) * k.transpose();
            assert!((&out - &classic).abs().max() <= 1e-9 * classic.abs().max());
        }
    }

    #[test]
    fn joseph_zero_gain_and_fixed_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let layout = BlockLayout::with_window(1, 2);
        let p = random_spd(&mut rng, layout.dim(), 0.1);
        let nu = layout.updating_columns().len();
        let h = DMatrix::from_fn(5, layout.dim(), |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_element(5, 0.01);
        let out = joseph_update(&ErrorCovariance::new(p.clone()), &DMatrix::zeros(nu, 5), &h, &c, &layout);
        assert_eq!(out.matrix(), &p);
        let k_u = DMatrix::from_fn(nu, 5, |_, _| rng.random_range(-0.2..0.2));
        let out = joseph_update(&ErrorCovariance::new(p.clone()), &k_u, &h, &c, &layout);
        let f = layout.fixed_columns();
        assert_eq!(out.matrix().view((f.start, f.start), (f.len(), f.len())), p.view((f.start, f.start), (f.len(), f.len())));
        let sym = out.matrix();
        assert!((sym - sym.transpose()).abs().max() == 0.0);
    }

    #[test]
    fn zero_residuals_leave_state_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let state = windowed_state(&mut rng, 1, 1);
        let cov = ErrorCovariance::new(random_spd(&mut rng, state.error_dim(), 0.01));
        let layout = BlockLayout::for_state(&state);
        let ms: Vec<_> = box_measurements(&mut rng, 1, 60)
            .into_iter()
            .map(|m| {
                let pose = state.imu.pose();
                let g = Extrinsics::default().to_global(&pose, &m.point);
                Measurement { anchor: g, ..m }
            })
            .collect();
        let (x, c, summary) = iterated_update(&state, &cov, &UpdateConfig::default(), |s| {
            Ok(stack_system(&ms, &s.chain(), &Extrinsics::default(), &layout)?)
        })
        .unwrap();
        assert_eq!(summary.iterations, 1);
        assert_eq!(x, state);
        assert!(c.matrix().trace() < cov.matrix().trace());
    }

    #[test]
    fn fixed_poses_and_block_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..5 {
            let state = windowed_state(&mut rng, 2, 2);
            let cov = ErrorCovariance::new(random_spd(&mut rng, state.error_dim(), 0.01));
            let layout = BlockLayout::for_state(&state);
            let ms = box_measurements(&mut rng, 5, 120);
            let (x, c, _) = iterated_update(&state, &cov, &UpdateConfig::default(), |s| {
                Ok(stack_system(&ms, &s.chain(), &Extrinsics::default(), &layout)?)
            })
            .unwrap();
            assert_eq!(x.fixed, state.fixed);
            let f = layout.fixed_columns();
            assert_eq!(
                c.matrix().view((f.start, f.start), (f.len(), f.len())),
                cov.matrix().view((f.start, f.start), (f.len(), f.len()))
            );
            assert_ne!(x.imu.position, state.imu.position);
        }
    }

    #[test]
    fn empty_system_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let state = windowed_state(&mut rng, 0, 0);
        let cov = ErrorCovariance::new(random_spd(&mut rng, 18, 0.01));
        let (x, c, s) = iterated_update(&state, &cov, &UpdateConfig::default(), |_| Ok(StackedSystem::empty(18))).unwrap();
        assert_eq!((x, c, s.iterations), (state, cov, 0));
    }

    #[test]
    fn single_pose_update_reaches_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let truth = Pose::new(exp(&Vector3::new(0.02, -0.01, 0.03)), Vector3::new(0.1, -0.05, 0.08));
        let ms: Vec<_> = box_measurements(&mut rng, 1, 300)
            .into_iter()
            .map(|m| Measurement { anchor: truth.transform_point(&m.point), ..m })
            .collect();
        let state = FullState::new(ImuState::at_origin(Vector3::new(0.0, 0.0, -9.81), Vector3::zeros()));
        let mut p = DMatrix::identity(18, 18) * 1e-4;
        p.view_mut((0, 0), (6, 6)).fill_with_identity();
        let cov = ErrorCovariance::new(p);
        let layout = BlockLayout::for_state(&state);
        let config = UpdateConfig { max_iterations: 10, convergence_eps: 1e-10, schmidt: true };
        let (x, _, summary) = iterated_update(&state, &cov, &config, |s| {
            Ok(stack_system(&ms, &s.chain(), &Extrinsics::default(), &layout)?)
        })
        .unwrap();
        assert!(summary.converged);
        assert!((x.imu.position - truth.position).norm() < 1e-3);
        let n = summary.increments.len();
        assert!(n < 2 || summary.increments[n - 1] <= summary.increments[n - 2]);
    }

    #[test]
    fn sliding_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let config = WindowConfig::default();
        let state = windowed_state(&mut rng, 0, 0);
        let cov = ErrorCovariance::new(random_spd(&mut rng, 18, 0.01));
        let (s1, c1, d1) = slide(&state, &cov, f64::INFINITY, &config, 1).unwrap();
        assert_eq!(d1, SlideDecision::None);
        let (s2, c2, d2) = slide(&s1, &c1, f64::INFINITY, &config, 2).unwrap();
        assert_eq!(d2, SlideDecision::None);
        assert_eq!(s2.active.len(), 2);
        let (s3, c3, d3) = slide(&s2, &c2, 1.2, &config, 3).unwrap();
        assert_eq!(d3, SlideDecision::Full);
        assert_eq!(s3.fixed.len(), 1);
        assert_eq!(s3.fixed[0].scan_index, 1);
        let (s4, c4, d4) = slide(&s3, &c3, f64::INFINITY, &config, 4).unwrap();
        assert_eq!(d4, SlideDecision::Partial);
        assert_eq!(s4.fixed.len(), 1);
        assert_eq!(s4.active.iter().map(|p| p.scan_index).collect::<Vec<_>>(), vec![4, 3]);
        assert_eq!(c4.dim(), s4.error_dim());
        let off = WindowConfig { active_size: 0, fixed_size: 0, ..config };
        let (s5, _, d5) = slide(&state, &cov, 1.0, &off, 1).unwrap();
        assert_eq!((s5.window_len(), d5), (0, SlideDecision::None));
    }
}
