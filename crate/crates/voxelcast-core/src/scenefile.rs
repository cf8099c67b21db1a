//! Plain-text scene description files.
//!
//! `key = value` lines, `#` comments, UTF-8. Multi-component values are
//! whitespace-separated numbers. Paths are stored as written and resolved
//! against the scene file's directory on load.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::math::Vec3;
use crate::scene::{Camera, Ground, Pose, Scene};
use crate::{vxg, CoreError};

/// A scene description as stored on disk: everything in [`Scene`] except the
/// voxel payload, which lives in a referenced grid file.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFile {
    pub object_grid: PathBuf,
    pub appearance_image: Option<PathBuf>,
    pub pose: Pose,
    pub ground: Ground,
    pub light_position: Vec3,
    pub camera: Camera,
}

impl Default for SceneFile {
    fn default() -> SceneFile {
        SceneFile {
            object_grid: PathBuf::new(),
            appearance_image: None,
            pose: Pose::default(),
            ground: Ground::default(),
            light_position: Vec3::new(0.0, 2.75, 0.0),
            camera: Camera::looking_at_origin(30.0, (64, 64)),
        }
    }
}

fn parse_floats<const N: usize>(key: &str, value: &str) -> Result<[f64; N], CoreError> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != N {
        return Err(CoreError::SceneFile(format!(
            "key '{key}' expects {N} number(s), got '{value}'"
        )));
    }
    let mut out = [0.0; N];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = part
            .parse::<f64>()
            .map_err(|_| CoreError::SceneFile(format!("key '{key}': '{part}' is not a number")))?;
    }
    Ok(out)
}

impl SceneFile {
    pub fn parse(text: &str) -> Result<SceneFile, CoreError> {
        let mut out = SceneFile::default();
        let mut seen = std::collections::BTreeSet::new();
        let mut has_object = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CoreError::SceneFile(format!(
                    "line {}: expected 'key = value', got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(CoreError::SceneFile(format!("duplicate key '{key}'")));
            }
            match key {
                "object_grid" => {
                    out.object_grid = PathBuf::from(value);
                    has_object = true;
                }
                "appearance_image" => out.appearance_image = Some(PathBuf::from(value)),
                "rotation_y" => out.pose.rotation_y = parse_floats::<1>(key, value)?[0],
                "translation" => {
                    let [tx, tz] = parse_floats::<2>(key, value)?;
                    out.pose.translation = (tx, tz);
                }
                "scale" => {
                    let [sx, sy, sz] = parse_floats::<3>(key, value)?;
                    out.pose.scale = (sx, sy, sz);
                }
                "ground_layers" => {
                    out.ground.layers = value.parse::<usize>().map_err(|_| {
                        CoreError::SceneFile(format!("key '{key}': '{value}' is not a count"))
                    })?;
                }
                "ground_color" => {
                    let [r, g, b] = parse_floats::<3>(key, value)?;
                    out.ground.color = [r as f32, g as f32, b as f32];
                }
                "ground_specular" => out.ground.specular = parse_floats::<1>(key, value)?[0],
                "light_position" => {
                    let [x, y, z] = parse_floats::<3>(key, value)?;
                    out.light_position = Vec3::new(x, y, z);
                }
                "elevation" => out.camera.elevation = parse_floats::<1>(key, value)?[0],
                "distance" => out.camera.distance = parse_floats::<1>(key, value)?[0],
                "focal_length" => out.camera.focal_length = parse_floats::<1>(key, value)?[0],
                "sensor_width" => out.camera.sensor_width = parse_floats::<1>(key, value)?[0],
                "image_width" => {
                    out.camera.image_dims.0 = value.parse().map_err(|_| {
                        CoreError::SceneFile(format!("key '{key}': '{value}' is not a count"))
                    })?;
                }
                "image_height" => {
                    out.camera.image_dims.1 = value.parse().map_err(|_| {
                        CoreError::SceneFile(format!("key '{key}': '{value}' is not a count"))
                    })?;
                }
                other => {
                    return Err(CoreError::SceneFile(format!("unknown key '{other}'")));
                }
            }
        }
        if !has_object {
            return Err(CoreError::SceneFile("missing required key 'object_grid'".into()));
        }
        out.pose.validate()?;
        out.camera.validate()?;
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "object_grid = {}", self.object_grid.display());
        if let Some(img) = &self.appearance_image {
            let _ = writeln!(s, "appearance_image = {}", img.display());
        }
        let _ = writeln!(s, "rotation_y = {}", self.pose.rotation_y);
        let _ = writeln!(s, "translation = {} {}", self.pose.translation.0, self.pose.translation.1);
        let _ = writeln!(s, "scale = {} {} {}", self.pose.scale.0, self.pose.scale.1, self.pose.scale.2);
        let _ = writeln!(s, "ground_layers = {}", self.ground.layers);
        let _ = writeln!(
            s,
            "ground_color = {} {} {}",
            self.ground.color[0], self.ground.color[1], self.ground.color[2]
        );
        let _ = writeln!(s, "ground_specular = {}", self.ground.specular);
        let _ = writeln!(
            s,
            "light_position = {} {} {}",
            self.light_position.x, self.light_position.y, self.light_position.z
        );
        let _ = writeln!(s, "elevation = {}", self.camera.elevation);
        let _ = writeln!(s, "distance = {}", self.camera.distance);
        let _ = writeln!(s, "focal_length = {}", self.camera.focal_length);
        let _ = writeln!(s, "sensor_width = {}", self.camera.sensor_width);
        let _ = writeln!(s, "image_width = {}", self.camera.image_dims.0);
        let _ = writeln!(s, "image_height = {}", self.camera.image_dims.1);
        s
    }

    pub fn load(path: &Path) -> Result<SceneFile, CoreError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::Io(format!("{}: {e}", path.display())))?;
        let mut file = SceneFile::parse(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if file.object_grid.is_relative() {
            file.object_grid = base.join(&file.object_grid);
        }
        if let Some(img) = &file.appearance_image {
            if img.is_relative() {
                file.appearance_image = Some(base.join(img));
            }
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        std::fs::write(path, self.to_text())
            .map_err(|e| CoreError::Io(format!("{}: {e}", path.display())))
    }

    /// Load the referenced object grid and build the in-memory scene.
    pub fn into_scene(self) -> Result<(Scene, Option<PathBuf>), CoreError> {
        let object = vxg::load_grid(&self.object_grid)?;
        let scene = Scene {
            object,
            pose: self.pose,
            ground: self.ground,
            light_position: self.light_position,
            camera: self.camera,
        };
        scene.validate()?;
        Ok((scene, self.appearance_image))
    }

    /// Snapshot the describable parts of a scene (grid path supplied by the
    /// caller, since the grid payload lives in its own file).
    pub fn from_scene(scene: &Scene, object_grid: PathBuf, appearance_image: Option<PathBuf>) -> SceneFile {
        SceneFile {
            object_grid,
            appearance_image,
            pose: scene.pose,
            ground: scene.ground,
            light_position: scene.light_position,
            camera: scene.camera,
        }
    }
}

/// Convenience: load a scene file and its object grid in one call.
pub fn load_scene(path: &Path) -> Result<(Scene, Option<PathBuf>), CoreError> {
    SceneFile::load(path)?.into_scene()
}
