//! Degeneracy quantification and measurement selection.
//!
//! The position and rotation columns of the current pose are decomposed
//! separately; each measurement is scored by how strongly its constraint
//! direction projects onto the singular directions. Weak rows are pruned, and
//! rows owned by fixed poses are added back along the least-constrained
//! direction until the condition number recovers.

use nalgebra::{DMatrix, Matrix3, RowVector3, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::manifold::{skew, Pose};
use crate::measurement::{Extrinsics, Measurement, StackedSystem};
use crate::state::BlockLayout;

/// Relative floor below which the smallest singular value counts as zero.
pub const SINGULAR_FLOOR: f64 = 1e-12;
/// Candidates added between condition-number evaluations.
pub const COMPENSATION_BATCH: usize = 10;
/// Rows a pose needs before its degeneracy is evaluated.
pub const MIN_STATE_ROWS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DadeError {
    #[error("condition number of an empty matrix")]
    EmptyMatrix,
}

/// `σ_max / σ_min`, or `+∞` when the matrix is numerically rank deficient.
pub fn condition_number(h: &DMatrix<f64>) -> Result<f64, DadeError> {
    if h.nrows() == 0 || h.ncols() == 0 {
        return Err(DadeError::EmptyMatrix);
    }
    if h.nrows() < h.ncols() {
        return Ok(f64::INFINITY);
    }
    let sv = h.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min < SINGULAR_FLOOR * max {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// Rotation and position columns of the current pose: `(H_R, H_p)`.
pub fn split_jacobian(system: &StackedSystem, layout: &BlockLayout) -> (DMatrix<f64>, DMatrix<f64>) {
    let rc = layout.chain_rotation(0);
    let pc = layout.chain_position(0);
    (system.h.columns(rc, 3).into_owned(), system.h.columns(pc, 3).into_owned())
}

/// Right singular vectors of a three-column matrix, ordered by descending singular value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularBasis {
    pub vectors: Matrix3<f64>,
    pub values: Vector3<f64>,
}

impl SingularBasis {
    pub fn of(h: &DMatrix<f64>) -> Self {
        assert_eq!(h.ncols(), 3, "singular basis expects three columns");
        let gram = h.transpose() * h;
        let eig = SymmetricEigen::new(Matrix3::from_column_slice(gram.as_slice()));
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut vectors = Matrix3::zeros();
        let mut values = Vector3::zeros();
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
            values[dst] = eig.eigenvalues[src].max(0.0).sqrt();
        }
        Self { vectors, values }
    }

    /// Direction with the smallest singular value.
    pub fn weakest(&self) -> Vector3<f64> {
        self.vectors.column(2).into_owned()
    }
}

/// Bases of both current-pose sub-Jacobians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegeneracyBasis {
    pub position: SingularBasis,
    pub rotation: SingularBasis,
}

impl DegeneracyBasis {
    pub fn of(system: &StackedSystem, layout: &BlockLayout) -> Self {
        let (hr, hp) = split_jacobian(system, layout);
        Self { position: SingularBasis::of(&hp), rotation: SingularBasis::of(&hr) }
    }
}

/// Absolute projections of one measurement onto the singular directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizabilityScores {
    pub position: Vector3<f64>,
    pub rotation: Vector3<f64>,
}

impl LocalizabilityScores {
    /// Scores from the current-pose rotation and position blocks of a Jacobian row.
    pub fn from_row(row_rotation: &RowVector3<f64>, row_position: &RowVector3<f64>, basis: &DegeneracyBasis) -> Self {
        Self {
            position: (row_position * basis.position.vectors).transpose().abs(),
            rotation: (row_rotation * basis.rotation.vectors).transpose().abs(),
        }
    }

    /// `max_ℓ max(|Ω_p^ℓ|, |Ω_R^ℓ|)`.
    pub fn peak(&self) -> f64 {
        self.position.max().max(self.rotation.max())
    }

    /// Projection onto the weakest direction of each basis.
    pub fn weakest(&self) -> f64 {
        self.position[2].max(self.rotation[2])
    }
}

/// Scores of a current-scan measurement.
pub fn localizability(m: &Measurement, pose: &Pose, ext: &Extrinsics, basis: &DegeneracyBasis) -> LocalizabilityScores {
    let e = m.normal.transpose();
    let lever = ext.to_imu(&m.point);
    let row_rotation = -(e * pose.rotation.matrix() * skew(&lever));
    LocalizabilityScores::from_row(&row_rotation, &e, basis)
}

/// Scores of every row of a stacked system.
pub fn row_scores(system: &StackedSystem, layout: &BlockLayout, basis: &DegeneracyBasis) -> Vec<LocalizabilityScores> {
    let rc = layout.chain_rotation(0);
    let pc = layout.chain_position(0);
    (0..system.rows())
        .map(|i| {
            let r = system.h.fixed_view::<1, 3>(i, rc).into_owned();
            let p = system.h.fixed_view::<1, 3>(i, pc).into_owned();
            LocalizabilityScores::from_row(&r, &p, basis)
        })
        .collect()
}

/// Indices of measurements whose peak score exceeds `threshold`.
pub fn prune(scores: &[LocalizabilityScores], threshold: f64) -> Vec<usize> {
    scores.iter().enumerate().filter(|(_, s)| s.peak() > threshold).map(|(i, _)| i).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compensation {
    /// Kept rows followed by the added candidates, in the order they were added.
    pub selected: Vec<usize>,
    pub added: usize,
    pub initial_condition: f64,
    pub final_condition: f64,
}

/// Add candidate rows along the weakest directions until `condition(selected) < threshold`.
///
/// `candidates` pairs a row id with its scores against the basis of the kept
/// set. Those whose weakest-direction score exceeds `localizability` are added
/// in descending order, `COMPENSATION_BATCH` at a time.
pub fn compensate<F>(
    kept: &[usize],
    candidates: &[(usize, LocalizabilityScores)],
    condition_threshold: f64,
    localizability: f64,
    mut condition: F,
) -> Compensation
where
    F: FnMut(&[usize]) -> f64,
{
    let mut selected = kept.to_vec();
    let initial = condition(&selected);
    let mut current = initial;
    let mut added = 0;
    if current >= condition_threshold {
        let mut ranked: Vec<(usize, f64)> = candidates
            .iter()
            .map(|(id, s)| (*id, s.weakest()))
            .filter(|(_, w)| *w > localizability)
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for batch in ranked.chunks(COMPENSATION_BATCH) {
            selected.extend(batch.iter().map(|(id, _)| *id));
            added += batch.len();
            current = condition(&selected);
            if current < condition_threshold {
                break;
            }
        }
    }
    Compensation { selected, added, initial_condition: initial, final_condition: current }
}

/// Condition number of the position columns at `chain_index` over the given rows.
pub fn position_condition(system: &StackedSystem, layout: &BlockLayout, chain_index: usize, rows: &[usize]) -> f64 {
    if rows.len() < 3 {
        return f64::INFINITY;
    }
    let pc = layout.chain_position(chain_index);
    directions_condition(rows.iter().map(|&r| Vector3::new(system.h[(r, pc)], system.h[(r, pc + 1)], system.h[(r, pc + 2)])))
}

/// Condition number of the n×3 matrix whose rows are `dirs`, from its 3×3 Gram matrix.
pub fn directions_condition(dirs: impl IntoIterator<Item = Vector3<f64>>) -> f64 {
    let mut gram = Matrix3::zeros();
    let mut n = 0;
    for d in dirs {
        gram += d * d.transpose();
        n += 1;
    }
    if n < 3 {
        return f64::INFINITY;
    }
    let ev = gram.symmetric_eigenvalues();
    let (max, min) = (ev.max(), ev.min());
    if !(max > 0.0) || min < SINGULAR_FLOOR * SINGULAR_FLOOR * max {
        return f64::INFINITY;
    }
    (max / min).sqrt()
}

/// Degeneracy of a window pose from the rows it owns.
///
/// Evaluated on the pose's position columns; with fewer than
/// `MIN_STATE_ROWS` rows the pose is reported degenerate.
pub fn degeneracy_of_state(system: &StackedSystem, layout: &BlockLayout, chain_index: usize, owned_rows: &[usize]) -> f64 {
    if owned_rows.len() < MIN_STATE_ROWS {
        return f64::INFINITY;
    }
    position_condition(system, layout, chain_index, owned_rows)
}

/// Condition number of the full six pose columns at `chain_index` over the given rows.
pub fn pose_condition(system: &StackedSystem, layout: &BlockLayout, chain_index: usize, rows: &[usize]) -> f64 {
    if rows.len() < MIN_STATE_ROWS {
        return f64::INFINITY;
    }
    let rc = layout.chain_rotation(chain_index);
    let sub = DMatrix::from_fn(rows.len(), 6, |i, j| system.h[(rows[i], rc + j)]);
    condition_number(&sub).unwrap_or(f64::INFINITY)
}
