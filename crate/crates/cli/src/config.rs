//! Run configuration: one TOML file plus `--set key=value` overrides.
//!
//! Every section is optional and falls back to its defaults; unknown keys are
//! rejected. Example:
//!
//! ```toml
//! seed = 3
//!
//! [camera]
//! width = 64
//! height = 48
//!
//! [grid]
//! voxel_size = 0.05
//! min = [-0.6, -0.6, -0.12]
//! max = [0.6, 0.6, 0.6]
//!
//! [train]
//! steps = 500
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use voxfield::explorer::PolicyConfig;
use voxfield::field::ModelConfig;
use voxfield::geom::{Aabb, CameraIntrinsics, GridSpec, Vec3};
use voxfield::scene::{SensorConfig, SyntheticScene};
use voxfield::training::TrainConfig;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 32,
            height: 24,
            hfov_deg: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub voxel_size: f64,
    /// Truncation distance in voxels.
    pub trunc_voxels: f64,
    /// Grid bounds; when absent the scene bounds are used.
    pub min: Option<[f64; 3]>,
    pub max: Option<[f64; 3]>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.08,
            trunc_voxels: 3.0,
            min: None,
            max: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub center: [f64; 3],
    pub radius: f64,
    pub elevation_deg: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0, 0.2],
            radius: 1.0,
            elevation_deg: 35.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub n_s: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { n_s: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// MC-dropout passes for the TSDF baseline; 0 skips it.
    pub mc_passes: usize,
    pub mc_rate: f64,
    /// F-score distance threshold in meters.
    pub threshold: f64,
    pub n_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mc_passes: 10,
            mc_rate: 0.1,
            threshold: 0.05,
            n_points: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryConfig {
    pub class_id: u32,
    pub temperature: f64,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self {
            class_id: 1,
            temperature: voxfield::query::DEFAULT_TEMPERATURE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub camera: CameraConfig,
    pub sensor: SensorConfig,
    pub grid: GridConfig,
    pub trajectory: TrajectoryConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    pub render: RenderConfig,
    pub eval: EvalConfig,
    pub query: QueryConfig,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::new("E_CONFIG", msg)
}

/// Parses a `--set` value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key '{key}'")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override key '{key}': '{p}' is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Loads the optional config file, applies overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, CliError> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::new("E_IO", format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_err(format!("{}: {}", p.display(), e.message())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.message().to_string()))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.intrinsics()?;
        self.model.validate()?;
        self.train.validate()?;
        self.policy.validate()?;
        let g = &self.grid;
        if !(g.voxel_size > 0.0 && g.trunc_voxels > 0.0) {
            return Err(config_err("grid.voxel_size and grid.trunc_voxels must be positive"));
        }
        if g.min.is_some() != g.max.is_some() {
            return Err(config_err("grid.min and grid.max must be given together"));
        }
        if self.sensor.feature_dim != self.model.feature_dim {
            return Err(config_err(format!(
                "sensor.feature_dim {} differs from model.feature_dim {}",
                self.sensor.feature_dim, self.model.feature_dim
            )));
        }
        if self.render.n_s == 0 {
            return Err(config_err("render.n_s must be positive"));
        }
        if !(self.trajectory.radius > 0.0) {
            return Err(config_err("trajectory.radius must be positive"));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, CliError> {
        Ok(CameraIntrinsics::from_fov(self.camera.width, self.camera.height, self.camera.hfov_deg)?)
    }

    pub fn trunc(&self) -> f64 {
        self.grid.trunc_voxels * self.grid.voxel_size
    }

    pub fn center(&self) -> Vec3 {
        let c = self.trajectory.center;
        Vec3::new(c[0], c[1], c[2])
    }

    /// Grid from the configured bounds, or covering the scene bounds.
    pub fn grid_for(&self, scene: Option<&SyntheticScene>) -> Result<GridSpec, CliError> {
        let bounds = match (self.grid.min, self.grid.max, scene) {
            (Some(lo), Some(hi), _) => Aabb::new(Vec3::from(lo), Vec3::from(hi))?,
            (_, _, Some(s)) => s.bounds,
            _ => return Err(config_err("grid bounds are needed: set grid.min/grid.max or pass --scene")),
        };
        Ok(GridSpec::covering(&bounds, self.grid.voxel_size)?)
    }
}
