use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector3};

use super::streams;
use crate::error::{Error, Result};
use crate::geometry::{axis_rotation, Axis, CameraModel, CameraRig};
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::rng::Rng;
use crate::width::FeatureVolume;

/// Camera axes (x right, y down, z forward) expressed in the ego frame
/// (x forward, y left, z up).
pub fn camera_to_ego_base() -> Matrix3<f64> {
    Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub cameras: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Mounting height of every camera, meters.
    pub mount_height: f64,
    /// Distance of each camera from the ego origin, meters.
    pub ring_radius: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn from_config(config: &PipelineConfig, seed: u64) -> Self {
        SceneSpec {
            cameras: config.cameras,
            height: config.height,
            width: config.width,
            channels: config.channels,
            mount_height: 1.6,
            ring_radius: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.cameras, self.height, self.width, self.channels].contains(&0) {
            return Err(Error::Config(format!("scene dimensions must be positive: {self:?}")));
        }
        if !self.mount_height.is_finite() || !self.ring_radius.is_finite() {
            return Err(Error::Config("scene offsets must be finite".into()));
        }
        Ok(())
    }

    pub fn yaw(&self, cam: usize) -> f64 {
        TAU * cam as f64 / self.cameras as f64
    }
}

/// Pinhole cameras evenly spaced in yaw, focal length `width` pixels and
/// the principal point at the feature-map center.
pub fn ring_rig(spec: &SceneSpec) -> Result<CameraRig> {
    spec.validate()?;
    let (w, h) = (spec.width as f64, spec.height as f64);
    let k = Matrix3::new(w, 0.0, w / 2.0, 0.0, w, h / 2.0, 0.0, 0.0, 1.0);
    let base = camera_to_ego_base();
    let mut cams = Vec::with_capacity(spec.cameras);
    for c in 0..spec.cameras {
        let yaw = spec.yaw(c);
        let r = axis_rotation(Axis::Z, yaw) * base;
        let t = Vector3::new(spec.ring_radius * yaw.cos(), spec.ring_radius * yaw.sin(), spec.mount_height);
        cams.push(CameraModel::new(k, r, t)?);
    }
    CameraRig::new((0..spec.cameras).map(|c| format!("cam{c}")).collect(), cams)
}

/// Deterministic rig and uniform(-1, 1) features for `spec.seed`.
pub fn gen_scene(spec: &SceneSpec) -> Result<(CameraRig, FeatureVolume)> {
    let rig = ring_rig(spec)?;
    let mut rng = Rng::new(spec.seed, streams::FEATURES);
    let feat = FeatureVolume::new(rng.uniform_tensor(&[spec.cameras, spec.height, spec.width, spec.channels], -1.0, 1.0))?;
    Ok((rig, feat))
}

/// Scene plus pipeline weights, both derived from `seed`.
pub fn demo_setup(config: &PipelineConfig, seed: u64) -> Result<(Pipeline, CameraRig, FeatureVolume)> {
    let (rig, feat) = gen_scene(&SceneSpec::from_config(config, seed))?;
    let pipeline = Pipeline::init(config.clone(), &mut Rng::new(seed, streams::WEIGHTS))?;
    Ok((pipeline, rig, feat))
}
