//! Pinhole camera rigs: lifting pixels to depth-binned reference points,
//! projecting them into the shared ego frame, polar coordinates on the
//! ground plane, and extrinsic perturbation.

use std::collections::HashSet;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Below this ground-plane distance the bearing is undefined and the
/// `(sin, cos) = (0, 1)` convention applies.
pub const POLAR_EPS: f64 = 1e-9;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    intrinsics: Matrix3<f64>,
    intrinsics_inv: Matrix3<f64>,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraModel {
    /// Validates that the intrinsics are invertible and the rotation is
    /// orthonormal with `|det| = 1`.
    pub fn new(intrinsics: Matrix3<f64>, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let finite = intrinsics.iter().chain(rotation.iter()).chain(translation.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("camera parameters must be finite".into()));
        }
        let intrinsics_inv =
            intrinsics.try_inverse().filter(|_| intrinsics.determinant().abs() > 1e-12).ok_or_else(|| Error::Config("singular intrinsics".into()))?;
        if (rotation.determinant().abs() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Config(format!("rotation determinant {}", rotation.determinant())));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > ORTHO_TOL {
            return Err(Error::Config(format!("rotation not orthonormal (error {:e})", gram.amax())));
        }
        Ok(CameraModel { intrinsics, intrinsics_inv, rotation, translation })
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    fn with_extrinsics(&self, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        CameraModel { rotation, translation, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    names: Vec<String>,
    cameras: Vec<CameraModel>,
}

impl CameraRig {
    pub fn new(names: Vec<String>, cameras: Vec<CameraModel>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::Config("rig needs at least one camera".into()));
        }
        if names.len() != cameras.len() {
            return Err(Error::Config(format!("{} names for {} cameras", names.len(), cameras.len())));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::Config(format!("duplicate camera name {dup:?}")));
        }
        Ok(CameraRig { names, cameras })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cameras
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: RigFile = serde_json::from_str(text)?;
        let mut names = Vec::new();
        let mut cams = Vec::new();
        for c in file.cameras {
            let cam = CameraModel::new(
                Matrix3::from_row_slice(&c.intrinsics),
                Matrix3::from_row_slice(&c.rotation),
                Vector3::from_column_slice(&c.translation),
            )
            .map_err(|e| Error::Config(format!("camera {:?}: {e}", c.name)))?;
            names.push(c.name);
            cams.push(cam);
        }
        CameraRig::new(names, cams)
    }

    pub fn to_json(&self) -> String {
        let row_major = |m: &Matrix3<f64>| {
            let mut out = [0.0; 9];
            for r in 0..3 {
                for c in 0..3 {
                    out[r * 3 + c] = m[(r, c)];
                }
            }
            out
        };
        let file = RigFile {
            cameras: self
                .names
                .iter()
                .zip(&self.cameras)
                .map(|(n, c)| CameraEntry {
                    name: n.clone(),
                    intrinsics: row_major(&c.intrinsics),
                    rotation: row_major(&c.rotation),
                    translation: [c.translation.x, c.translation.y, c.translation.z],
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("rig serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_json())?)
    }
}

#[derive(Serialize, Deserialize)]
struct RigFile {
    cameras: Vec<CameraEntry>,
}

#[derive(Serialize, Deserialize)]
struct CameraEntry {
    name: String,
    intrinsics: [f64; 9],
    rotation: [f64; 9],
    translation: [f64; 3],
}

/// Strictly increasing positive candidate depths (meters).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthBins(Vec<f64>);

impl DepthBins {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("need at least one depth bin".into()));
        }
        if !(values[0] > 0.0) || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("depth bins must be finite and positive".into()));
        }
        if values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("depth bins must be strictly increasing".into()));
        }
        Ok(DepthBins(values))
    }

    /// `count` evenly spaced depths from `near` to `far` inclusive.
    pub fn uniform(near: f64, far: f64, count: usize) -> Result<Self> {
        if count == 1 {
            return Self::new(vec![near]);
        }
        let step = (far - near) / (count - 1) as f64;
        Self::new((0..count).map(|k| near + step * k as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for DepthBins {
    /// 32 bins spread uniformly over 1..60 m.
    fn default() -> Self {
        Self::uniform(1.0, 60.0, 32).expect("valid default bins")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }
}

/// Ground-plane distance and bearing of a point plus its height.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarCoord {
    pub d: f64,
    pub sin: f64,
    pub cos: f64,
    pub z: f64,
}

/// Homogeneous reference points `(u d_k, v d_k, d_k)`, one per depth bin.
pub fn lift_pixel(u: f64, v: f64, bins: &DepthBins) -> Vec<Vector3<f64>> {
    bins.values().iter().map(|&d| Vector3::new(u * d, v * d, d)).collect()
}

/// `R I^-1 p + T`
pub fn project_to_ego(p_hom: &Vector3<f64>, cam: &CameraModel) -> Point3 {
    let c = cam.rotation * (cam.intrinsics_inv * p_hom) + cam.translation;
    Point3::new(c.x, c.y, c.z)
}

pub fn to_polar(p: Point3) -> PolarCoord {
    let d = p.x.hypot(p.y);
    if d < POLAR_EPS {
        return PolarCoord { d, sin: 0.0, cos: 1.0, z: p.z };
    }
    PolarCoord { d, sin: p.y / d, cos: p.x / d, z: p.z }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Some(Axis::X),
            "y" => Some(Axis::Y),
            "z" => Some(Axis::Z),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PerturbKind {
    Rotation,
    Translation,
}

impl PerturbKind {
    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::Rotation => "rot",
            PerturbKind::Translation => "trans",
        }
    }

    pub fn parse(s: &str) -> Option<PerturbKind> {
        match s {
            "rot" | "rotation" => Some(PerturbKind::Rotation),
            "trans" | "translation" => Some(PerturbKind::Translation),
            _ => None,
        }
    }
}

/// Frame in which a translation offset is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TranslationFrame {
    /// Along the camera's own axis, rotated into the ego frame.
    #[default]
    Camera,
    /// Along the ego axis directly.
    Ego,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec {
    pub axis: Axis,
    pub kind: PerturbKind,
    /// Radians for rotations, meters for translations.
    pub sigma: f64,
    pub frame: TranslationFrame,
}

impl PerturbSpec {
    pub fn new(kind: PerturbKind, axis: Axis, sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        Ok(PerturbSpec { axis, kind, sigma, frame: TranslationFrame::Camera })
    }

    pub fn with_frame(mut self, frame: TranslationFrame) -> Self {
        self.frame = frame;
        self
    }
}

/// Rotation by `angle` radians about a coordinate axis.
pub fn axis_rotation(axis: Axis, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    match axis {
        Axis::X => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Axis::Y => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Axis::Z => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

/// Independently perturbs every camera's extrinsics with zero-mean Gaussian
/// noise: `R' = R * Rot(axis, a)` or `T' = T + offset`, `a, delta ~ N(0, sigma^2)`.
pub fn perturb_rig(rig: &CameraRig, spec: &PerturbSpec, rng: &mut Rng) -> CameraRig {
    let cameras = rig
        .cameras
        .iter()
        .map(|cam| {
            let delta = rng.normal(spec.sigma);
            match spec.kind {
                PerturbKind::Rotation => cam.with_extrinsics(cam.rotation * axis_rotation(spec.axis, delta), cam.translation),
                PerturbKind::Translation => {
                    let mut e = Vector3::zeros();
                    e[spec.axis.index()] = delta;
                    let offset = match spec.frame {
                        TranslationFrame::Camera => cam.rotation * e,
                        TranslationFrame::Ego => e,
                    };
                    cam.with_extrinsics(cam.rotation, cam.translation + offset)
                }
            }
        })
        .collect();
    CameraRig { names: rig.names.clone(), cameras }
}
