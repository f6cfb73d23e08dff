//! Deterministic synthetic LiDAR-inertial scenarios.
//!
//! Trajectories are closed-form, so IMU readings follow analytically from the
//! pose derivatives. Scans are raycast against a world of planar patches.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::evaluation::{StampedPose, Trajectory};
use crate::manifold::{Pose, Rotation};
use crate::measurement::Extrinsics;
use crate::plane_map::{AnalyticMap, PlanePatch};
use crate::propagation::{ImuSample, NoiseParams};

pub const GRAVITY: f64 = 9.81;
/// Ground-truth output rate.
pub const GT_RATE: f64 = 100.0;
/// The platform holds still this long before moving.
pub const STATIC_PERIOD: f64 = 1.0;
const RAMP_DURATION: f64 = 2.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("time {t} outside [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("unknown scenario {0:?}; expected corridor, open_plane, room or cavern")]
    UnknownScenario(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    Corridor,
    OpenPlane,
    Room,
    Cavern,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 4] = [ScenarioKind::Corridor, ScenarioKind::OpenPlane, ScenarioKind::Room, ScenarioKind::Cavern];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Corridor => "corridor",
            ScenarioKind::OpenPlane => "open_plane",
            ScenarioKind::Room => "room",
            ScenarioKind::Cavern => "cavern",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| SimError::UnknownScenario(s.to_string()))
    }
}

/// Angular layout of the rays of one scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayPattern {
    pub azimuth_steps: usize,
    pub elevation_steps: usize,
    /// Lowest and highest elevation, rad.
    pub elevation_range: (f64, f64),
    pub max_range: f64,
}

impl RayPattern {
    /// Split `rays` into elevation lines and azimuth steps at a 4:1 ratio.
    pub fn with_rays(rays: usize, elevation_range: (f64, f64), max_range: f64) -> Self {
        if rays == 0 {
            return Self { azimuth_steps: 0, elevation_steps: 0, elevation_range, max_range };
        }
        let elevation_steps = ((rays as f64 / 4.0).sqrt().round() as usize).clamp(1, rays);
        Self { azimuth_steps: rays / elevation_steps, elevation_steps, elevation_range, max_range }
    }

    pub fn rays(&self) -> usize {
        self.azimuth_steps * self.elevation_steps
    }

    /// Unit ray directions in the LiDAR frame.
    pub fn directions(&self) -> Vec<Vector3<f64>> {
        let (lo, hi) = self.elevation_range;
        let mut out = Vec::with_capacity(self.rays());
        for e in 0..self.elevation_steps {
            let el = if self.elevation_steps == 1 { 0.5 * (lo + hi) } else { lo + (hi - lo) * e as f64 / (self.elevation_steps - 1) as f64 };
            for a in 0..self.azimuth_steps {
                let az = 2.0 * PI * a as f64 / self.azimuth_steps as f64;
                out.push(Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()));
            }
        }
        out
    }
}

/// Shape of the nominal path followed at the ramped speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathShape {
    /// Straight along +x.
    Line,
    /// Counter-clockwise circle starting at the origin heading +x.
    Circle { radius: f64 },
}

/// Sinusoidal perturbation `amplitude · sin(2π · frequency · t)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Wave {
    pub amplitude: f64,
    pub frequency: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryParams {
    pub path: PathShape,
    /// Cruise speed, m/s.
    pub speed: f64,
    pub lateral: Wave,
    pub vertical: Wave,
    pub yaw: Wave,
    pub pitch: Wave,
    pub roll: Wave,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub duration: f64,
    pub imu_rate: f64,
    pub scan_rate: f64,
    pub rays_per_scan: usize,
    pub range_sigma: f64,
    pub imu_noise: NoiseParams,
    pub gyro_bias: Vector3<f64>,
    pub accel_bias: Vector3<f64>,
    pub seed: u64,
    pub extrinsics: Extrinsics,
    pub trajectory: TrajectoryParams,
    pub elevation_range: (f64, f64),
    pub max_range: f64,
}

/// Default IMU-from-LiDAR translation shared by the simulator and the filter.
pub fn default_extrinsics() -> Extrinsics {
    Extrinsics { rotation: Rotation::identity(), translation: Vector3::new(0.05, 0.0, 0.1) }
}

impl Scenario {
    pub fn new(kind: ScenarioKind, seed: u64) -> Self {
        let wave = |amplitude, frequency| Wave { amplitude, frequency };
        let (duration, trajectory) = match kind {
            ScenarioKind::Corridor => (
                60.0,
                TrajectoryParams {
                    path: PathShape::Line,
                    speed: 0.9,
                    lateral: wave(0.3, 0.05),
                    vertical: wave(0.1, 0.07),
                    yaw: wave(0.15, 0.06),
                    pitch: wave(0.04, 0.11),
                    roll: wave(0.04, 0.13),
                },
            ),
            ScenarioKind::OpenPlane => (
                30.0,
                TrajectoryParams {
                    path: PathShape::Line,
                    speed: 2.0,
                    lateral: wave(1.0, 0.04),
                    vertical: wave(0.5, 0.05),
                    yaw: wave(0.2, 0.05),
                    pitch: wave(0.05, 0.1),
                    roll: wave(0.05, 0.12),
                },
            ),
            ScenarioKind::Room => (
                30.0,
                TrajectoryParams {
                    path: PathShape::Circle { radius: 2.0 },
                    speed: 0.6,
                    lateral: wave(0.3, 0.07),
                    vertical: wave(0.2, 0.09),
                    yaw: wave(0.3, 0.05),
                    pitch: wave(0.06, 0.11),
                    roll: wave(0.06, 0.13),
                },
            ),
            ScenarioKind::Cavern => (
                30.0,
                TrajectoryParams {
                    path: PathShape::Line,
                    speed: 1.0,
                    lateral: wave(0.5, 0.05),
                    vertical: wave(0.3, 0.06),
                    yaw: wave(0.2, 0.05),
                    pitch: wave(0.05, 0.1),
                    roll: wave(0.05, 0.12),
                },
            ),
        };
        Self {
            kind,
            duration,
            imu_rate: 200.0,
            scan_rate: 10.0,
            rays_per_scan: 4000,
            range_sigma: 0.02,
            imu_noise: NoiseParams::default(),
            gyro_bias: Vector3::new(0.002, -0.001, 0.0015),
            accel_bias: Vector3::new(0.02, -0.015, 0.01),
            seed,
            extrinsics: default_extrinsics(),
            trajectory,
            elevation_range: (-60f64.to_radians(), 60f64.to_radians()),
            max_range: 100.0,
        }
    }

    /// Same scenario with all sensor noise and biases removed.
    pub fn noiseless(mut self) -> Self {
        self.range_sigma = 0.0;
        self.imu_noise = NoiseParams::zero();
        self.gyro_bias = Vector3::zeros();
        self.accel_bias = Vector3::zeros();
        self
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [("duration", self.duration), ("imu_rate", self.imu_rate), ("scan_rate", self.scan_rate)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.range_sigma >= 0.0) || !self.imu_noise.is_valid() {
            return Err(SimError::Invalid("noise levels must be non-negative".into()));
        }
        Ok(())
    }

    pub fn pattern(&self) -> RayPattern {
        RayPattern::with_rays(self.rays_per_scan, self.elevation_range, self.max_range)
    }

    /// World of planar patches for this scenario; `cavern` draws its patches from the seed.
    pub fn world(&self) -> AnalyticMap {
        let p = |c: [f64; 3], n: [f64; 3], eu: f64, ev: f64| PlanePatch::new(Vector3::from(c), Vector3::from(n), eu, ev);
        let patches = match self.kind {
            ScenarioKind::Corridor => {
                // Start chamber x, y in [-4, 4], z in [-3, 3]; corridor mouth at x = 4.
                let (x0, x1) = (4.0, 55.0);
                let (cx, len) = (0.5 * (x0 + x1), x1 - x0);
                let (floor, ceiling) = (-1.2, 1.8);
                let (cz, height) = (0.5 * (floor + ceiling), ceiling - floor);
                let (h, lo, hi) = (4.0, -3.0, 3.0);
                vec![
                    p([cx, 1.5, cz], [0.0, -1.0, 0.0], len, height),
                    p([cx, -1.5, cz], [0.0, 1.0, 0.0], len, height),
                    p([cx, 0.0, floor], [0.0, 0.0, 1.0], 3.0, len),
                    p([cx, 0.0, ceiling], [0.0, 0.0, -1.0], 3.0, len),
                    p([-h, 0.0, 0.0], [1.0, 0.0, 0.0], 2.0 * h, hi - lo),
                    p([0.0, h, 0.0], [0.0, -1.0, 0.0], 2.0 * h, hi - lo),
                    p([0.0, -h, 0.0], [0.0, 1.0, 0.0], 2.0 * h, hi - lo),
                    p([0.0, 0.0, lo], [0.0, 0.0, 1.0], 2.0 * h, 2.0 * h),
                    p([0.0, 0.0, hi], [0.0, 0.0, -1.0], 2.0 * h, 2.0 * h),
                    // Front wall around the mouth.
                    p([h, 2.75, 0.0], [-1.0, 0.0, 0.0], 2.5, hi - lo),
                    p([h, -2.75, 0.0], [-1.0, 0.0, 0.0], 2.5, hi - lo),
                    p([h, 0.0, 0.5 * (ceiling + hi)], [-1.0, 0.0, 0.0], 3.0, hi - ceiling),
                    p([h, 0.0, 0.5 * (lo + floor)], [-1.0, 0.0, 0.0], 3.0, floor - lo),
                    // Small distant patch beyond the corridor end.
                    p([75.0, 0.0, 0.3], [-1.0, 0.0, 0.0], 1.5, 1.5),
                ]
            }
            ScenarioKind::OpenPlane => vec![p([30.0, 0.0, -15.0], [0.0, 0.0, 1.0], 400.0, 400.0)],
            ScenarioKind::Room => {
                let (cx, cy) = (0.0, 2.0);
                let (h, lo, hi) = (4.0, -3.0, 3.0);
                let cz = 0.5 * (lo + hi);
                vec![
                    p([cx + h, cy, cz], [-1.0, 0.0, 0.0], 2.0 * h, hi - lo),
                    p([cx - h, cy, cz], [1.0, 0.0, 0.0], 2.0 * h, hi - lo),
                    p([cx, cy + h, cz], [0.0, -1.0, 0.0], 2.0 * h, hi - lo),
                    p([cx, cy - h, cz], [0.0, 1.0, 0.0], 2.0 * h, hi - lo),
                    p([cx, cy, lo], [0.0, 0.0, 1.0], 2.0 * h, 2.0 * h),
                    p([cx, cy, hi], [0.0, 0.0, -1.0], 2.0 * h, 2.0 * h),
                ]
            }
            ScenarioKind::Cavern => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(2);
                let length = self.trajectory.speed * self.duration;
                (0..40)
                    .map(|_| {
                        let x = rng.random_range(-5.0..length + 5.0);
                        let ang = rng.random_range(0.0..2.0 * PI);
                        let dist = rng.random_range(3.0..8.0);
                        let center = Vector3::new(x, dist * ang.cos(), dist * ang.sin());
                        let jitter = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                        let normal = (Vector3::new(0.0, -ang.cos(), -ang.sin()) + jitter).normalize();
                        PlanePatch::new(center, normal, rng.random_range(1.0..4.0), rng.random_range(1.0..4.0))
                    })
                    .collect()
            }
        };
        AnalyticMap::new(patches)
    }
}

/// Scalar with first and second time derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Jet {
    v: f64,
    d: f64,
    dd: f64,
}

impl Jet {
    fn constant(v: f64) -> Self {
        Self { v, d: 0.0, dd: 0.0 }
    }

    fn time(t: f64) -> Self {
        Self { v: t, d: 1.0, dd: 0.0 }
    }

    fn sin(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Self { v: s, d: c * self.d, dd: c * self.dd - s * self.d * self.d }
    }

    fn cos(self) -> Self {
        let (s, c) = self.v.sin_cos();
        Self { v: c, d: -s * self.d, dd: -s * self.dd - c * self.d * self.d }
    }

    fn scale(self, k: f64) -> Self {
        Self { v: k * self.v, d: k * self.d, dd: k * self.dd }
    }
}

impl std::ops::Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet { v: self.v + o.v, d: self.d + o.d, dd: self.dd + o.dd }
    }
}

impl std::ops::Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        Jet { v: self.v - o.v, d: self.d - o.d, dd: self.dd - o.dd }
    }
}

impl std::ops::Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        Jet { v: self.v * o.v, d: self.d * o.v + self.v * o.d, dd: self.dd * o.v + 2.0 * self.d * o.d + self.v * o.dd }
    }
}

/// Smoothstep ramp from 0 to 1 over the start-up window.
fn ramp(t: f64) -> Jet {
    let u = ((t - STATIC_PERIOD) / RAMP_DURATION).clamp(0.0, 1.0);
    if u <= 0.0 || u >= 1.0 {
        return Jet::constant(u);
    }
    let k = 1.0 / RAMP_DURATION;
    Jet { v: u * u * (3.0 - 2.0 * u), d: 6.0 * u * (1.0 - u) * k, dd: (6.0 - 12.0 * u) * k * k }
}

/// Distance along the path: integral of `speed · ramp`.
fn arc_length(t: f64, speed: f64) -> Jet {
    let u = ((t - STATIC_PERIOD) / RAMP_DURATION).clamp(0.0, 1.0);
    let r = ramp(t);
    let v = if u < 1.0 {
        speed * RAMP_DURATION * (u.powi(3) - 0.5 * u.powi(4))
    } else {
        speed * RAMP_DURATION * 0.5 + speed * (t - STATIC_PERIOD - RAMP_DURATION)
    };
    Jet { v, d: speed * r.v, dd: speed * r.d }
}

fn wave(w: &Wave, t: Jet) -> Jet {
    t.scale(2.0 * PI * w.frequency).sin().scale(w.amplitude)
}

/// Ground-truth kinematics at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinematicSample {
    pub pose: Pose,
    /// World-frame velocity.
    pub velocity: Vector3<f64>,
    /// Body-frame angular rate.
    pub angular_rate: Vector3<f64>,
    /// Body-frame specific force `Rᵀ(a − g)`.
    pub specific_force: Vector3<f64>,
    /// World-frame acceleration.
    pub acceleration: Vector3<f64>,
}

fn euler_rotation(yaw: f64, pitch: f64, roll: f64) -> Rotation {
    Rotation::from_axis_angle(&Vector3::z_axis(), yaw)
        * Rotation::from_axis_angle(&Vector3::y_axis(), pitch)
        * Rotation::from_axis_angle(&Vector3::x_axis(), roll)
}

pub fn gravity_vector() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -GRAVITY)
}

/// Closed-form pose and IMU quantities at time `t`.
pub fn sample_trajectory(scenario: &Scenario, t: f64) -> Result<KinematicSample, SimError> {
    if !(0.0..=scenario.duration).contains(&t) {
        return Err(SimError::TimeOutOfRange { t, duration: scenario.duration });
    }
    let p = &scenario.trajectory;
    let time = Jet::time(t);
    let r = ramp(t);
    let s = arc_length(t, p.speed);
    let (base_x, base_y, heading) = match p.path {
        PathShape::Line => (s, Jet::constant(0.0), Jet::constant(0.0)),
        PathShape::Circle { radius } => {
            let ang = s.scale(1.0 / radius);
            (ang.sin().scale(radius), Jet::constant(radius) - ang.cos().scale(radius), ang)
        }
    };
    let lateral = r * wave(&p.lateral, time);
    let x = base_x - heading.sin() * lateral;
    let y = base_y + heading.cos() * lateral;
    let z = r * wave(&p.vertical, time);
    let yaw = heading + r * wave(&p.yaw, time);
    let pitch = r * wave(&p.pitch, time);
    let roll = r * wave(&p.roll, time);

    let rotation = euler_rotation(yaw.v, pitch.v, roll.v);
    let (sr, cr) = roll.v.sin_cos();
    let (sp, cp) = pitch.v.sin_cos();
    let angular_rate = Vector3::new(
        roll.d - yaw.d * sp,
        pitch.d * cr + yaw.d * sr * cp,
        -pitch.d * sr + yaw.d * cr * cp,
    );
    let acceleration = Vector3::new(x.dd, y.dd, z.dd);
    Ok(KinematicSample {
        pose: Pose::new(rotation, Vector3::new(x.v, y.v, z.v)),
        velocity: Vector3::new(x.d, y.d, z.d),
        angular_rate,
        specific_force: rotation.inverse() * (acceleration - gravity_vector()),
        acceleration,
    })
}

/// LiDAR-frame points of rays from `sensor` that hit the world within range.
pub fn raycast_scan(
    world: &AnalyticMap,
    sensor: &Pose,
    pattern: &RayPattern,
    range_sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vector3<f64>> {
    let noise = (range_sigma > 0.0).then(|| Normal::new(0.0, range_sigma).expect("finite sigma"));
    let mut points = Vec::new();
    for dir in pattern.directions() {
        let world_dir = sensor.rotation * dir;
        let hit = world
            .patches
            .iter()
            .filter_map(|p| p.intersect(&sensor.position, &world_dir))
            .min_by(|a, b| a.total_cmp(b));
        let Some(range) = hit.filter(|&r| r <= pattern.max_range) else { continue };
        let noisy = match &noise {
            Some(n) => range + n.sample(rng),
            None => range,
        };
        if noisy > 0.0 {
            points.push(dir * noisy);
        }
    }
    points
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub t: f64,
    /// Points in the LiDAR frame.
    pub points: Vec<Vector3<f64>>,
}

#[derive(Debug, Clone)]
pub struct ScenarioDataset {
    pub imu: Vec<ImuSample>,
    pub scans: Vec<Scan>,
    pub ground_truth: Trajectory,
    pub world: AnalyticMap,
}

fn sample_count(duration: f64, rate: f64) -> usize {
    (duration * rate + 1e-9).floor() as usize + 1
}

/// Generate the full dataset; identical scenarios give identical datasets.
pub fn generate(scenario: &Scenario) -> Result<ScenarioDataset, SimError> {
    scenario.validate()?;
    let world = scenario.world();

    let mut imu_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    imu_rng.set_stream(1);
    let dt = 1.0 / scenario.imu_rate;
    let std = |density: f64| (density / dt).sqrt();
    let gyro_noise = Normal::new(0.0, std(scenario.imu_noise.gyro)).map_err(|e| SimError::Invalid(e.to_string()))?;
    let accel_noise = Normal::new(0.0, std(scenario.imu_noise.accel)).map_err(|e| SimError::Invalid(e.to_string()))?;
    let draw = |n: &Normal<f64>, rng: &mut ChaCha8Rng| Vector3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    let mut imu = Vec::new();
    for i in 0..sample_count(scenario.duration, scenario.imu_rate) {
        let t = i as f64 * dt;
        let k = sample_trajectory(scenario, t)?;
        imu.push(ImuSample {
            t,
            gyro: k.angular_rate + scenario.gyro_bias + draw(&gyro_noise, &mut imu_rng),
            accel: k.specific_force + scenario.accel_bias + draw(&accel_noise, &mut imu_rng),
        });
    }

    let pattern = scenario.pattern();
    let mut scans = Vec::new();
    for i in 0..sample_count(scenario.duration, scenario.scan_rate) {
        let t = i as f64 / scenario.scan_rate;
        let body = sample_trajectory(scenario, t)?.pose;
        let ext = &scenario.extrinsics;
        let sensor = Pose::new(body.rotation * ext.rotation, body.transform_point(&ext.translation));
        let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
        rng.set_stream(1000 + i as u64);
        scans.push(Scan { t, points: raycast_scan(&world, &sensor, &pattern, scenario.range_sigma, &mut rng) });
    }

    let mut gt = Vec::new();
    for i in 0..sample_count(scenario.duration, GT_RATE) {
        let t = i as f64 / GT_RATE;
        gt.push(StampedPose { t, pose: sample_trajectory(scenario, t)?.pose });
    }
    let ground_truth = Trajectory::new(gt).map_err(|e| SimError::Invalid(e.to_string()))?;
    Ok(ScenarioDataset { imu, scans, ground_truth, world })
}
