//! The odometry loop: propagate to each scan, select measurements, update, slide.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

use crate::daaskf::{iterated_update, slide, SlideDecision, UpdateConfig, UpdateError};
use crate::dade::{compensate, directions_condition, position_condition, prune, row_scores, DegeneracyBasis, MIN_STATE_ROWS};
use crate::evaluation::{ape_rmse, associate, EvalError, StampedPose, Trajectory, DEFAULT_MAX_DT};
use crate::harness::config::{MapBackend, RunConfig};
use crate::harness::dataset::Dataset;
use crate::harness::report::{RunReport, ScanRecord, StageTimes};
use crate::manifold::Pose;
use crate::measurement::{stack_system, Measurement, StackedSystem};
use crate::plane_map::{PlaneMap, PointMap};
use crate::propagation::{propagate, static_initialize, ImuSample, PropagationError, MIN_STATIC_SAMPLES};
use crate::state::{BlockLayout, ErrorCovariance, FullState, ImuState, StateError, WindowConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("the analytic map backend needs world.txt in the dataset")]
    MissingWorld,
    #[error("initialization needs {needed} IMU samples within the first {duration} s, found {got}")]
    ShortInitialization { needed: usize, got: usize, duration: f64 },
    #[error(transparent)]
    Propagation(#[from] PropagationError),
    #[error(transparent)]
    Update(#[from] UpdateError),
    #[error(transparent)]
    State(#[from] StateError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
}

/// Diagonal of the initial covariance per IMU block.
const INITIAL_STD: [f64; 6] = [1e-4, 1e-4, 1e-2, 1e-3, 5e-2, 1e-2];

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Keep the first point falling in each voxel, in input order.
pub fn voxel_downsample(points: &[Vector3<f64>], voxel: f64) -> Vec<Vector3<f64>> {
    let mut seen = HashSet::with_capacity(points.len());
    points
        .iter()
        .filter(|p| seen.insert(((p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64)))
        .copied()
        .collect()
}

/// Condition number of the position block spanned by a set of plane normals.
pub fn normals_condition(ms: &[Measurement]) -> f64 {
    if ms.len() < MIN_STATE_ROWS {
        return f64::INFINITY;
    }
    directions_condition(ms.iter().map(|m| m.normal))
}

/// Filter state carried from scan to scan.
pub struct Odometry {
    config: RunConfig,
    window: WindowConfig,
    update: UpdateConfig,
    state: FullState,
    cov: ErrorCovariance,
    map: PlaneMap,
    /// Frozen measurements of every window pose, by scan index.
    stored: BTreeMap<usize, Vec<Measurement>>,
}

/// Selection outcome for one scan.
struct Selection {
    measurements: Vec<Measurement>,
    /// Downsampled point index of each current-scan measurement, in order.
    current_points: Vec<usize>,
    record: ScanRecord,
}

impl Odometry {
    pub fn new(config: RunConfig, imu: ImuState, map: PlaneMap) -> Self {
        let window = config.effective_window();
        let mut update = UpdateConfig::from_window(&window);
        update.schmidt = config.toggles.schmidt;
        let mut p = DMatrix::zeros(18, 18);
        for (b, s) in INITIAL_STD.iter().enumerate() {
            for i in 0..3 {
                p[(3 * b + i, 3 * b + i)] = s * s;
            }
        }
        Self { config, window, update, state: FullState::new(imu), cov: ErrorCovariance::new(p), map, stored: BTreeMap::new() }
    }

    pub fn state(&self) -> &FullState {
        &self.state
    }

    pub fn covariance(&self) -> &ErrorCovariance {
        &self.cov
    }

    pub fn pose(&self) -> Pose {
        self.state.imu.pose()
    }

    pub fn propagate(&mut self, u: &ImuSample, dt: f64) -> Result<(), PipelineError> {
        let (s, c) = propagate(&self.state, &self.cov, u, dt, &self.config.noise)?;
        self.state = s;
        self.cov = c;
        Ok(())
    }

    fn associate_point(&self, pose: &Pose, point: &Vector3<f64>) -> Option<Measurement> {
        let ext = &self.config.extrinsics;
        let global = ext.to_global(pose, point);
        let viewpoint = pose.transform_point(&ext.translation);
        let plane = self.map.nearest_plane(&global, &viewpoint)?;
        Measurement::new(*point, 0, plane.normal, plane.anchor, self.config.point_variance).ok()
    }

    fn select(&self, points: &[Vector3<f64>], layout: &BlockLayout) -> Result<Selection, PipelineError> {
        let start = Instant::now();
        let pose = self.pose();
        let mut measurements = Vec::new();
        let mut current_points = Vec::new();
        for (i, p) in points.iter().enumerate() {
            if let Some(m) = self.associate_point(&pose, p) {
                measurements.push(m);
                current_points.push(i);
            }
        }
        let n_cur = measurements.len();
        for (k, wp) in self.state.window_poses().enumerate() {
            if let Some(stored) = self.stored.get(&wp.scan_index) {
                let owner = k + 1;
                measurements.extend(stored.iter().map(|m| m.with_owner(owner)));
            }
        }
        let n_updating = n_cur
            + self
                .state
                .active
                .iter()
                .filter_map(|wp| self.stored.get(&wp.scan_index))
                .map(Vec::len)
                .sum::<usize>();

        let associate_ms = ms_since(start);
        let start = Instant::now();
        let chain = self.state.chain();
        // Measurements are already ordered by owner, so rows follow input order.
        let system = stack_system(&measurements, &chain, &self.config.extrinsics, layout).map_err(UpdateError::from)?;
        let cond = |rows: &[usize]| position_condition(&system, layout, 0, rows);
        let current: Vec<usize> = (0..n_cur).collect();
        let updating: Vec<usize> = (0..n_updating).collect();
        let fixed: Vec<usize> = (n_updating..measurements.len()).collect();

        let chi_scan = cond(&current);
        let chi_pre_prune = cond(&updating);
        let kept = if self.config.toggles.dade_prune && updating.len() >= 3 {
            let sub = subsystem(&system, &updating);
            let basis = DegeneracyBasis::of(&sub, layout);
            let scores = row_scores(&sub, layout, &basis);
            prune(&scores, self.window.localizability_threshold).into_iter().map(|i| updating[i]).collect()
        } else {
            updating.clone()
        };
        let chi_post_prune = cond(&kept);

        let (selected, added) = if fixed.is_empty() {
            (kept.clone(), 0)
        } else if self.config.toggles.dade_compensate {
            let bar = subsystem(&system, &kept);
            let basis = if kept.len() >= 3 { DegeneracyBasis::of(&bar, layout) } else { DegeneracyBasis::of(&system, layout) };
            let all_scores = row_scores(&subsystem(&system, &fixed), layout, &basis);
            let candidates: Vec<_> = fixed.iter().copied().zip(all_scores).collect();
            let out = compensate(&kept, &candidates, self.window.condition_threshold, self.window.localizability_threshold, cond);
            (out.selected, out.added)
        } else {
            let mut all = kept.clone();
            all.extend(&fixed);
            (all, fixed.len())
        };
        let chi_post_compensate = cond(&selected);

        let mut selected_sorted = selected.clone();
        selected_sorted.sort_unstable();
        let chosen_points: Vec<usize> = selected_sorted.iter().filter(|&&r| r < n_cur).map(|&r| current_points[r]).collect();
        let chosen: Vec<Measurement> = selected_sorted.iter().map(|&r| measurements[r]).collect();
        let record = ScanRecord {
            index: 0,
            t: 0.0,
            chi_scan,
            chi_pre_prune,
            chi_post_prune,
            chi_post_compensate,
            points: points.len(),
            rows_total: measurements.len(),
            rows_pruned: updating.len() - kept.len(),
            rows_compensated: added,
            rows_used: chosen.len(),
            iterations: 0,
            converged: false,
            slide: SlideDecision::None,
            aborted: false,
            ms: 0.0,
            stages: StageTimes { associate: associate_ms, select: ms_since(start), ..StageTimes::default() },
        };
        Ok(Selection { measurements: chosen, current_points: chosen_points, record })
    }

    /// Update with one scan taken at the current filter time.
    pub fn process_scan(&mut self, index: usize, t: f64, raw_points: &[Vector3<f64>]) -> Result<ScanRecord, PipelineError> {
        let start = Instant::now();
        let points = voxel_downsample(raw_points, self.config.voxel_size);
        let downsample_ms = ms_since(start);
        let layout = BlockLayout::for_state(&self.state);
        let selection = self.select(&points, &layout)?;
        let mut record = selection.record;
        record.index = index;
        record.t = t;
        let mut stages = record.stages;
        stages.associate += downsample_ms;

        let update_start = Instant::now();
        let n_cur = selection.current_points.len();
        let mut measurements = selection.measurements;
        let prior_pose = self.pose();
        let ext = self.config.extrinsics;
        let mut final_current: Vec<Measurement> = measurements[..n_cur].to_vec();
        let result = if measurements.is_empty() {
            None
        } else {
            let map = &self.map;
            let points_ref = &points;
            let current_points = &selection.current_points;
            let outcome = iterated_update(&self.state, &self.cov, &self.update, |x| {
                let pose = x.imu.pose();
                if pose != prior_pose {
                    let viewpoint = pose.transform_point(&ext.translation);
                    for (m, &pi) in measurements.iter_mut().zip(current_points) {
                        let global = ext.to_global(&pose, &points_ref[pi]);
                        if let Some(plane) = map.nearest_plane(&global, &viewpoint) {
                            m.normal = plane.normal;
                            m.anchor = plane.anchor;
                        }
                    }
                }
                Ok(stack_system(&measurements, &x.chain(), &ext, &BlockLayout::for_state(x))?)
            });
            final_current = measurements[..n_cur].to_vec();
            Some(outcome)
        };
        match result {
            Some(Ok((x, c, summary))) => {
                self.state = x;
                self.cov = c;
                record.iterations = summary.iterations;
                record.converged = summary.converged;
            }
            Some(Err(UpdateError::SingularNormalMatrix(_))) => {
                record.aborted = true;
                final_current.clear();
            }
            Some(Err(e)) => return Err(e.into()),
            None => {}
        }
        stages.update = ms_since(update_start);

        let slide_start = Instant::now();
        record.slide = self.slide(index, final_current)?;
        if let PlaneMap::Points(_) = self.map {
            let pose = self.pose();
            let global: Vec<_> = points.iter().map(|p| ext.to_global(&pose, p)).collect();
            self.map.insert_scan(&global).expect("point maps accept scans");
        }
        stages.slide = ms_since(slide_start);
        record.stages = stages;
        record.ms = stages.total();
        Ok(record)
    }

    fn slide(&mut self, index: usize, current: Vec<Measurement>) -> Result<SlideDecision, PipelineError> {
        if self.window.active_size == 0 {
            return Ok(SlideDecision::None);
        }
        let chi_last = self.state.active.last().and_then(|p| p.condition).unwrap_or(f64::INFINITY);
        let condition = normals_condition(&current);
        let (s, c, decision) = slide(&self.state, &self.cov, chi_last, &self.window, index)?;
        self.state = s;
        self.cov = c;
        self.state.active[0].condition = Some(condition);
        self.stored.insert(index, current);
        let live: HashSet<usize> = self.state.window_poses().map(|p| p.scan_index).collect();
        self.stored.retain(|k, _| live.contains(k));
        Ok(decision)
    }
}

/// Rows of a stacked system, in the given order.
fn subsystem(system: &StackedSystem, rows: &[usize]) -> StackedSystem {
    StackedSystem {
        h: system.h.select_rows(rows),
        z: system.z.select_rows(rows),
        c: system.c.select_rows(rows),
        source: rows.iter().map(|&r| system.source[r]).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub report: RunReport,
}

/// Run the filter over a dataset. Scans before the end of initialization are skipped.
pub fn run(data: &Dataset, config: &RunConfig) -> Result<RunOutput, PipelineError> {
    let init: Vec<ImuSample> = data.imu.iter().filter(|s| s.t <= config.init_duration + 1e-9).copied().collect();
    if init.len() < MIN_STATIC_SAMPLES {
        return Err(PipelineError::ShortInitialization { needed: MIN_STATIC_SAMPLES, got: init.len(), duration: config.init_duration });
    }
    let start = static_initialize(&init)?;
    let map = match config.map {
        MapBackend::Analytic => {
            let mut world = data.world.clone().ok_or(PipelineError::MissingWorld)?;
            world.max_distance = config.max_correspondence;
            PlaneMap::Analytic(world)
        }
        MapBackend::Points => PlaneMap::Points(PointMap::new(config.voxel_size)),
    };
    let mut odo = Odometry::new(config.clone(), ImuState::at_origin(start.gravity, start.gyro_bias), map);

    let t0 = init.last().map(|s| s.t).unwrap_or(0.0);
    let mut now = t0;
    let mut cursor = init.len() - 1;
    let mut poses = Vec::new();
    let mut records = Vec::new();
    for (index, scan) in data.scans.iter().enumerate() {
        if scan.t < t0 - 1e-9 {
            continue;
        }
        let prop_start = Instant::now();
        while now < scan.t - 1e-12 {
            while cursor + 1 < data.imu.len() && data.imu[cursor + 1].t <= now + 1e-12 {
                cursor += 1;
            }
            let next = data.imu.get(cursor + 1).map_or(scan.t, |s| s.t.min(scan.t));
            let next = if next > now { next } else { scan.t };
            odo.propagate(&data.imu[cursor], next - now)?;
            now = next;
        }
        let propagate_ms = ms_since(prop_start);
        let mut record = odo.process_scan(index, scan.t, &scan.points)?;
        record.stages.propagate = propagate_ms;
        record.ms += propagate_ms;
        records.push(record);
        poses.push(StampedPose { t: scan.t, pose: odo.pose() });
    }
    let trajectory = Trajectory::new(poses)?;
    let ape = match &data.ground_truth {
        Some(gt) if trajectory.len() >= 3 => Some(ape_rmse(&associate(gt, &trajectory, DEFAULT_MAX_DT)?)?),
        _ => None,
    };
    Ok(RunOutput { trajectory, report: RunReport::new(config.clone(), records, ape) })
}
