//! Run configuration: defaults, `key = value` files and command-line overrides.

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::manifold::exp;
use crate::measurement::{Extrinsics, DEFAULT_POINT_VARIANCE};
use crate::propagation::NoiseParams;
use crate::simulator::default_extrinsics;
use crate::state::WindowConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("invalid value {value:?} for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MapBackend {
    /// Exact planes from the dataset's `world.txt`.
    Analytic,
    /// Map accumulated from registered scans.
    Points,
}

/// Independent switches for the pipeline's stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Toggles {
    pub window: bool,
    pub schmidt: bool,
    pub dade_prune: bool,
    pub dade_compensate: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles { window: true, schmidt: true, dade_prune: true, dade_compensate: true };
    pub const ALL_OFF: Toggles = Toggles { window: false, schmidt: false, dade_prune: false, dade_compensate: false };
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(skip)]
    pub window: WindowConfig,
    #[serde(skip)]
    pub noise: NoiseParams,
    #[serde(skip)]
    pub extrinsics: Extrinsics,
    pub map: MapBackend,
    pub voxel_size: f64,
    pub point_variance: f64,
    /// Seconds of stationary IMU data used for initialization.
    pub init_duration: f64,
    /// Largest accepted point-to-patch distance for the analytic map.
    pub max_correspondence: f64,
    pub toggles: Toggles,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            noise: NoiseParams::default(),
            extrinsics: default_extrinsics(),
            map: MapBackend::Analytic,
            voxel_size: 0.3,
            point_variance: DEFAULT_POINT_VARIANCE,
            init_duration: 1.0,
            max_correspondence: 1.0,
            toggles: Toggles::ALL_ON,
        }
    }
}

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("active_size", "number of active window poses"),
    ("fixed_size", "number of fixed window poses"),
    ("condition_threshold", "condition number below which a pose counts as well constrained"),
    ("localizability_threshold", "minimum projection for a measurement to be kept"),
    ("max_iterations", "iterations of the filter update"),
    ("convergence_eps", "increment norm that ends the iteration"),
    ("gyro_noise", "gyroscope noise density, rad^2/s"),
    ("accel_noise", "accelerometer noise density, m^2/s^3"),
    ("gyro_bias_walk", "gyroscope bias random walk, rad^2/s^3"),
    ("accel_bias_walk", "accelerometer bias random walk, m^2/s^5"),
    ("extrinsic_translation", "IMU-from-LiDAR translation `x,y,z`, m"),
    ("extrinsic_rotation", "IMU-from-LiDAR rotation vector `x,y,z`, rad"),
    ("map", "analytic | points"),
    ("voxel_size", "scan downsampling and point-map voxel size, m"),
    ("point_variance", "point-to-plane noise variance, m^2"),
    ("init_duration", "stationary initialization period, s"),
    ("max_correspondence", "largest point-to-patch distance for analytic association, m"),
    ("window", "on | off: sliding window of past poses"),
    ("schmidt", "on | off: freeze fixed poses in the update"),
    ("dade_prune", "on | off: prune weakly localizing measurements"),
    ("dade_compensate", "on | off: select fixed-pose measurements along weak directions"),
    ("dade", "on | off: both measurement-selection stages"),
];

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::Value { key: key.into(), value: v.into(), reason: "expected on or off".into() }),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| ConfigError::Value { key: key.into(), value: v.into(), reason: e.to_string() })
}

fn parse_vec3(key: &str, v: &str) -> Result<Vector3<f64>, ConfigError> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(ConfigError::Value { key: key.into(), value: v.into(), reason: "expected x,y,z".into() });
    }
    Ok(Vector3::new(parse_num(key, parts[0])?, parse_num(key, parts[1])?, parse_num(key, parts[2])?))
}

impl RunConfig {
    /// Configuration that disables every stage: a single-pose iterated Kalman filter.
    pub fn baseline() -> Self {
        let mut c = Self::default();
        c.set_toggles(Toggles::ALL_OFF);
        c
    }

    pub fn set_toggles(&mut self, toggles: Toggles) {
        self.toggles = toggles;
    }

    /// Window sizes after applying the `window` toggle.
    pub fn effective_window(&self) -> WindowConfig {
        if self.toggles.window {
            self.window
        } else {
            WindowConfig { active_size: 0, fixed_size: 0, ..self.window }
        }
    }

    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let positive = |x: f64| -> Result<f64, ConfigError> {
            if x > 0.0 && x.is_finite() {
                Ok(x)
            } else {
                Err(ConfigError::Value { key: key.into(), value: v.into(), reason: "must be positive".into() })
            }
        };
        match key {
            "active_size" => self.window.active_size = parse_num(key, v)?,
            "fixed_size" => self.window.fixed_size = parse_num(key, v)?,
            "condition_threshold" => self.window.condition_threshold = positive(parse_num(key, v)?)?,
            "localizability_threshold" => self.window.localizability_threshold = parse_num(key, v)?,
            "max_iterations" => {
                let n: usize = parse_num(key, v)?;
                if n == 0 {
                    return Err(ConfigError::Value { key: key.into(), value: v.into(), reason: "must be at least 1".into() });
                }
                self.window.max_iterations = n;
            }
            "convergence_eps" => self.window.convergence_eps = positive(parse_num(key, v)?)?,
            "gyro_noise" => self.noise.gyro = parse_num(key, v)?,
            "accel_noise" => self.noise.accel = parse_num(key, v)?,
            "gyro_bias_walk" => self.noise.gyro_bias_walk = parse_num(key, v)?,
            "accel_bias_walk" => self.noise.accel_bias_walk = parse_num(key, v)?,
            "extrinsic_translation" => self.extrinsics.translation = parse_vec3(key, v)?,
            "extrinsic_rotation" => self.extrinsics.rotation = exp(&parse_vec3(key, v)?),
            "map" => {
                self.map = match v {
                    "analytic" => MapBackend::Analytic,
                    "points" => MapBackend::Points,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: v.into(),
                            reason: "expected analytic or points".into(),
                        })
                    }
                }
            }
            "voxel_size" => self.voxel_size = positive(parse_num(key, v)?)?,
            "point_variance" => self.point_variance = positive(parse_num(key, v)?)?,
            "init_duration" => self.init_duration = positive(parse_num(key, v)?)?,
            "max_correspondence" => self.max_correspondence = positive(parse_num(key, v)?)?,
            "window" => self.toggles.window = parse_bool(key, v)?,
            "schmidt" => self.toggles.schmidt = parse_bool(key, v)?,
            "dade_prune" => self.toggles.dade_prune = parse_bool(key, v)?,
            "dade_compensate" => self.toggles.dade_compensate = parse_bool(key, v)?,
            "dade" => {
                let on = parse_bool(key, v)?;
                self.toggles.dade_prune = on;
                self.toggles.dade_compensate = on;
            }
            _ => return Err(ConfigError::UnknownKeys(vec![key.to_string()])),
        }
        if !self.noise.is_valid() {
            return Err(ConfigError::Value { key: key.into(), value: v.into(), reason: "noise must be non-negative".into() });
        }
        Ok(())
    }

    /// Apply a configuration file; all unknown keys are reported together.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut unknown = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(ConfigError::Syntax { line: i + 1, text: raw.to_string() });
            };
            match self.set(k.trim(), v) {
                Err(ConfigError::UnknownKeys(mut keys)) => unknown.append(&mut keys),
                other => other?,
            }
        }
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::UnknownKeys(unknown))
        }
    }

    /// Apply `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        let text: Vec<&str> = overrides.iter().map(AsRef::as_ref).collect();
        for (i, o) in text.iter().enumerate() {
            if !o.contains('=') {
                return Err(ConfigError::Syntax { line: i + 1, text: o.to_string() });
            }
        }
        self.apply_text(&text.join("\n"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_full_pipeline() {
        let c = RunConfig::default();
        assert_eq!(c.window.active_size, 2);
        assert_eq!(c.window.fixed_size, 2);
        assert_eq!(c.window.condition_threshold, 1.5);
        assert!((c.window.localizability_threshold - 35f64.to_radians().cos()).abs() < 1e-15);
        assert_eq!(c.voxel_size, 0.3);
        assert_eq!(c.toggles, Toggles::ALL_ON);
    }

    #[test]
    fn file_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nactive_size = 3\n\nmap = points  # trailing\nextrinsic_translation = 0.1, 0, 0.2\n").unwrap();
        assert_eq!(c.window.active_size, 3);
        assert_eq!(c.map, MapBackend::Points);
        assert_eq!(c.extrinsics.translation, Vector3::new(0.1, 0.0, 0.2));
        c.apply_overrides(&["window=off", "dade=off"]).unwrap();
        assert!(!c.toggles.window && !c.toggles.dade_prune && !c.toggles.dade_compensate && c.toggles.schmidt);
        assert_eq!(c.effective_window().active_size, 0);
    }

    #[test]
    fn errors_name_the_keys() {
        let mut c = RunConfig::default();
        let err = c.apply_text("bogus = 1\nactive_size = 1\nalso_bogus = 2").unwrap_err();
        assert_eq!(err, ConfigError::UnknownKeys(vec!["bogus".into(), "also_bogus".into()]));
        assert!(err.to_string().contains("bogus, also_bogus"));
        assert!(matches!(c.apply_text("no equals sign"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(c.set("window", "maybe"), Err(ConfigError::Value { .. })));
        assert!(matches!(c.set("voxel_size", "-1"), Err(ConfigError::Value { .. })));
        assert!(matches!(c.set("max_iterations", "0"), Err(ConfigError::Value { .. })));
        assert!(matches!(c.apply_overrides(&["window"]), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn every_documented_key_is_accepted() {
        let samples = [
            ("extrinsic_translation", "0,0,0"),
            ("extrinsic_rotation", "0,0,0"),
            ("map", "analytic"),
        ];
        for (key, _) in KEYS {
            let value = samples.iter().find(|(k, _)| k == key).map(|(_, v)| *v).unwrap_or(
                if ["window", "schmidt", "dade_prune", "dade_compensate", "dade"].contains(key) { "on" } else { "1" },
            );
            RunConfig::default().set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
