//! Scene description: object pose, camera model and pinhole projection.
//!
//! Conventions: right-handed world, y up, ground plane at y = 0, camera on a
//! sphere of radius `distance` looking at the world origin with azimuth fixed
//! at zero (the camera sits on the +z side; object rotation stands in for
//! azimuth changes).

use crate::grid::VoxelGrid;
use crate::math::{sin_cos_deg, Vec3};
use crate::CoreError;

/// Rigid-plus-scale edit applied to the object before scene placement.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    /// Rotation about the vertical axis, degrees.
    pub rotation_y: f64,
    /// Translation on the ground plane, world units.
    pub translation: (f64, f64),
    /// Per-axis scale factors, all > 0.
    pub scale: (f64, f64, f64),
}

impl Default for Pose {
    fn default() -> Pose {
        Pose { rotation_y: 0.0, translation: (0.0, 0.0), scale: (1.0, 1.0, 1.0) }
    }
}

impl Pose {
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.scale.0 > 0.0 && self.scale.1 > 0.0 && self.scale.2 > 0.0) {
            return Err(CoreError::DegeneratePose(format!("scale {:?} must be > 0", self.scale)));
        }
        Ok(())
    }

    /// Object-frame point to world frame: scale, then rotate about y, then
    /// translate across the ground plane.
    pub fn apply(&self, p: Vec3) -> Vec3 {
        let scaled = Vec3::new(p.x * self.scale.0, p.y * self.scale.1, p.z * self.scale.2);
        let (s, c) = sin_cos_deg(self.rotation_y);
        let rotated = Vec3::new(scaled.x * c + scaled.z * s, scaled.y, -scaled.x * s + scaled.z * c);
        rotated + Vec3::new(self.translation.0, 0.0, self.translation.1)
    }

    /// World frame back to object frame.
    pub fn invert(&self, p: Vec3) -> Vec3 {
        let t = p - Vec3::new(self.translation.0, 0.0, self.translation.1);
        let (s, c) = sin_cos_deg(self.rotation_y);
        let r = Vec3::new(t.x * c - t.z * s, t.y, t.x * s + t.z * c);
        Vec3::new(r.x / self.scale.0, r.y / self.scale.1, r.z / self.scale.2)
    }
}

/// Pinhole camera looking at the world origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    /// Degrees above the ground plane, in [0, 90).
    pub elevation: f64,
    /// World units from the origin.
    pub distance: f64,
    /// Focal length as a ratio against `sensor_width`.
    pub focal_length: f64,
    /// World-unit equivalent sensor extent.
    pub sensor_width: f64,
    /// Output raster dimensions (width, height) in pixels.
    pub image_dims: (usize, usize),
}

impl Camera {
    pub const DEFAULT_FOCAL: f64 = 40.0;
    pub const DEFAULT_SENSOR: f64 = 32.0;
    pub const DEFAULT_DISTANCE: f64 = 3.0;

    pub fn looking_at_origin(elevation: f64, image_dims: (usize, usize)) -> Camera {
        Camera {
            elevation,
            distance: Camera::DEFAULT_DISTANCE,
            focal_length: Camera::DEFAULT_FOCAL,
            sensor_width: Camera::DEFAULT_SENSOR,
            image_dims,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.elevation >= 0.0 && self.elevation < 90.0) {
            return Err(CoreError::InvalidCamera(format!("elevation {} out of [0, 90)", self.elevation)));
        }
        if !(self.distance > 0.0) {
            return Err(CoreError::InvalidCamera("distance must be > 0".into()));
        }
        if !(self.focal_length > 0.0 && self.sensor_width > 0.0) {
            return Err(CoreError::InvalidCamera("focal length and sensor width must be > 0".into()));
        }
        if self.image_dims.0 == 0 || self.image_dims.1 == 0 {
            return Err(CoreError::InvalidCamera("image dims must be nonzero".into()));
        }
        Ok(())
    }

    /// Camera center in world coordinates (azimuth 0: on the +z side).
    pub fn eye(&self) -> Vec3 {
        let (s, c) = sin_cos_deg(self.elevation);
        Vec3::new(0.0, self.distance * s, self.distance * c)
    }

    /// Orthonormal view basis: (right, up, forward), forward toward origin.
    pub fn basis(&self) -> (Vec3, Vec3, Vec3) {
        let (s, c) = sin_cos_deg(self.elevation);
        let right = Vec3::new(1.0, 0.0, 0.0);
        let up = Vec3::new(0.0, c, -s);
        let forward = Vec3::new(0.0, -s, -c);
        (right, up, forward)
    }

    /// Pixels per unit tangent: focal / sensor scaled to the raster width.
    pub fn pixel_scale(&self) -> f64 {
        self.focal_length / self.sensor_width * self.image_dims.0 as f64
    }

    /// World point into camera coordinates (x right, y up, z = view depth).
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let (right, up, forward) = self.basis();
        let q = p - self.eye();
        Vec3::new(q.dot(right), q.dot(up), q.dot(forward))
    }

    /// Pinhole projection of a world point.
    ///
    /// Returns the continuous pixel position (u right, v down) and the depth
    /// along the view axis; points at or behind the camera plane are not
    /// projectable.
    pub fn project_point(&self, p: Vec3) -> Result<(f64, f64, f64), CoreError> {
        let cam = self.to_camera(p);
        if cam.z <= 0.0 {
            return Err(CoreError::BehindCamera);
        }
        let k = self.pixel_scale();
        let u = self.image_dims.0 as f64 / 2.0 + k * cam.x / cam.z;
        let v = self.image_dims.1 as f64 / 2.0 - k * cam.y / cam.z;
        Ok((u, v, cam.z))
    }

    /// World-space ray through the center of pixel (px, py).
    pub fn pixel_ray(&self, px: usize, py: usize) -> (Vec3, Vec3) {
        let (right, up, forward) = self.basis();
        let k = self.pixel_scale();
        let du = (px as f64 + 0.5) - self.image_dims.0 as f64 / 2.0;
        let dv = (py as f64 + 0.5) - self.image_dims.1 as f64 / 2.0;
        let dir = (forward + right * (du / k) - up * (dv / k)).normalized();
        (self.eye(), dir)
    }
}

/// Ground slab configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ground {
    /// Slab thickness in voxel layers below y = 0.
    pub layers: usize,
    pub color: [f32; 3],
    /// Mirror-reflection strength of the floor in the reference renderer.
    pub specular: f64,
}

impl Default for Ground {
    fn default() -> Ground {
        Ground { layers: 2, color: [0.6, 0.6, 0.6], specular: 0.3 }
    }
}

/// Sampling envelope for light positions (training range).
pub const LIGHT_X_RANGE: (f64, f64) = (-1.5, 1.5);
pub const LIGHT_Y_RANGE: (f64, f64) = (2.5, 3.0);
pub const LIGHT_Z_RANGE: (f64, f64) = (-1.5, 1.5);
/// Sampling envelope for object translation (training range).
pub const TRANSLATION_RANGE: (f64, f64) = (-0.5, 0.5);

/// A full editable scene: object voxels, pose, ground, light and camera.
#[derive(Clone, Debug)]
pub struct Scene {
    pub object: VoxelGrid,
    pub pose: Pose,
    pub ground: Ground,
    pub light_position: Vec3,
    pub camera: Camera,
}

impl Scene {
    pub fn validate(&self) -> Result<(), CoreError> {
        self.pose.validate()?;
        self.camera.validate()
    }

    /// Check the training envelope for light and translation.
    pub fn validate_envelope(&self) -> Result<(), CoreError> {
        let l = self.light_position;
        let inside = |v: f64, r: (f64, f64)| r.0 <= v && v <= r.1;
        if !(inside(l.x, LIGHT_X_RANGE) && inside(l.y, LIGHT_Y_RANGE) && inside(l.z, LIGHT_Z_RANGE)) {
            return Err(CoreError::OutsideEnvelope(format!("light position {l:?}")));
        }
        let (tx, tz) = self.pose.translation;
        if !(inside(tx, TRANSLATION_RANGE) && inside(tz, TRANSLATION_RANGE)) {
            return Err(CoreError::OutsideEnvelope(format!("translation ({tx}, {tz})")));
        }
        Ok(())
    }
}
