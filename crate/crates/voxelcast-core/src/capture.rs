//! Appearance capture: color the voxels of a grid from a single aligned
//! image.
//!
//! Visible voxels take the color of the pixel their center projects into.
//! Hidden voxels take the color of the first visible voxel along their own
//! camera ray; the remainder are filled from their mirror voxel (left-right
//! about the object-grid center plane) when that mirror is visible, and
//! finally from the mean visible color.

use rayon::prelude::*;

use crate::assemble::{assemble_scene, Assembled};
use crate::grid::VoxelGrid;
use crate::image::Image;
use crate::raycast::{first_matching_hit, visible_from};
use crate::scene::{Camera, Scene};
use crate::CoreError;

/// Per-voxel source-view visibility flags paired with a grid's shape.
#[derive(Clone, Debug)]
pub struct VisibilityMask {
    dims: (usize, usize, usize),
    visible: Vec<bool>,
}

impl VisibilityMask {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        let (_, ny, nz) = self.dims;
        self.visible[(x * ny + y) * nz + z]
    }

    pub fn at(&self, idx: usize) -> bool {
        self.visible[idx]
    }

    pub fn flags(&self) -> &[bool] {
        &self.visible
    }

    pub fn count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    /// Flag values as a single-channel volume for file export.
    pub fn to_floats(&self) -> Vec<f32> {
        self.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

/// An aligned appearance photograph and the camera it was taken with.
#[derive(Clone, Debug)]
pub struct AppearanceSource {
    pub image: Image,
    pub camera: Camera,
}

impl AppearanceSource {
    pub fn new(image: Image, camera: Camera) -> Result<AppearanceSource, CoreError> {
        if image.dims() != camera.image_dims {
            return Err(CoreError::InvalidImage(format!(
                "appearance image {:?} does not match camera dims {:?}",
                image.dims(),
                camera.image_dims
            )));
        }
        Ok(AppearanceSource { image, camera })
    }
}

/// Colored grid plus the flags the symmetry pass needs.
#[derive(Clone, Debug)]
pub struct Capture {
    pub grid: VoxelGrid,
    pub visibility: VisibilityMask,
    /// Per-voxel: has this voxel received a color (directly or by ray fill)?
    pub colored: Vec<bool>,
}

/// Mark every occupied voxel whose center ray from the camera eye is not
/// blocked by another occupied voxel (strict chord-entry comparison).
pub fn compute_visibility(grid: &VoxelGrid, camera: &Camera) -> VisibilityMask {
    let eye = camera.eye();
    let visible: Vec<bool> = (0..grid.len())
        .into_par_iter()
        .map(|idx| {
            if !grid.occupied_at(idx) {
                return false;
            }
            visible_from(grid, eye, grid.unlinear(idx))
        })
        .collect();
    VisibilityMask { dims: grid.dims(), visible }
}

/// Un-project image colors onto the occupied voxels of a world-frame grid.
///
/// Returns the recolored grid, the visibility mask, and per-voxel colored
/// flags. Hidden voxels are filled from the first visible *and colored* voxel
/// along their own camera ray; voxels projecting outside the image stay
/// uncolored.
pub fn color_from_image(grid: &VoxelGrid, source: &AppearanceSource) -> Result<Capture, CoreError> {
    if source.image.dims() != source.camera.image_dims {
        return Err(CoreError::InvalidImage("appearance image does not match its camera".into()));
    }
    let camera = &source.camera;
    let eye = camera.eye();
    let visibility = compute_visibility(grid, camera);

    let mut out = grid.clone();
    let mut colored = vec![false; grid.len()];

    // Pass 1: visible voxels read the pixel their center projects into.
    for idx in 0..grid.len() {
        if !grid.occupied_at(idx) {
            out.set_at(idx, [0.0, 0.0, 0.0, 0.0]);
            continue;
        }
        let (x, y, z) = grid.unlinear(idx);
        out.set_at(idx, [0.0, 0.0, 0.0, 1.0]);
        if !visibility.at(idx) {
            continue;
        }
        if let Ok((u, v, _)) = camera.project_point(grid.center(x, y, z)) {
            let (px, py) = (u.floor() as i64, v.floor() as i64);
            if source.image.in_bounds(px, py) {
                let c = source.image.get(px as usize, py as usize);
                out.set_at(idx, [c[0], c[1], c[2], 1.0]);
                colored[idx] = true;
            }
        }
    }

    // Pass 2: hidden voxels copy the first visible colored voxel on their ray.
    let fills: Vec<(usize, [f32; 3])> = (0..grid.len())
        .into_par_iter()
        .filter_map(|idx| {
            if !grid.occupied_at(idx) || visibility.at(idx) {
                return None;
            }
            let (x, y, z) = grid.unlinear(idx);
            let dir = grid.center(x, y, z) - eye;
            let hit = first_matching_hit(grid, eye, dir, f64::INFINITY, |h| {
                let i = grid.linear(h.cell.0, h.cell.1, h.cell.2);
                visibility.at(i) && colored[i]
            })?;
            let v = out.at(grid.linear(hit.cell.0, hit.cell.1, hit.cell.2));
            Some((idx, [v[0], v[1], v[2]]))
        })
        .collect();
    for (idx, c) in fills {
        out.set_at(idx, [c[0], c[1], c[2], 1.0]);
        colored[idx] = true;
    }

    Ok(Capture { grid: out, visibility, colored })
}

/// Fill the remaining hidden/uncolored voxels by mirror symmetry, then by the
/// mean visible color.
///
/// The mirror plane is the grid's center plane perpendicular to x (cell x
/// maps to nx-1-x). Every voxel that is hidden or uncolored takes its mirror
/// voxel's color when the mirror is visible and colored; voxels still
/// uncolored after that take the mean color over all visible colored voxels.
pub fn symmetry_complete(
    grid: &VoxelGrid,
    visibility: &VisibilityMask,
    colored: &[bool],
) -> Result<VoxelGrid, CoreError> {
    if visibility.dims() != grid.dims() || colored.len() != grid.len() {
        return Err(CoreError::InvalidGrid("mask shape does not match grid".into()));
    }
    let (nx, _, _) = grid.dims();
    let mut mean = [0.0f64; 3];
    let mut n_vis = 0usize;
    for idx in 0..grid.len() {
        if grid.occupied_at(idx) && visibility.at(idx) && colored[idx] {
            let v = grid.at(idx);
            for c in 0..3 {
                mean[c] += v[c] as f64;
            }
            n_vis += 1;
        }
    }
    if n_vis == 0 {
        return Err(CoreError::EmptyCapture);
    }
    let mean = [
        (mean[0] / n_vis as f64) as f32,
        (mean[1] / n_vis as f64) as f32,
        (mean[2] / n_vis as f64) as f32,
    ];

    let mut out = grid.clone();
    for idx in 0..grid.len() {
        if !grid.occupied_at(idx) {
            continue;
        }
        if visibility.at(idx) && colored[idx] {
            continue;
        }
        let (x, y, z) = grid.unlinear(idx);
        let mx = nx - 1 - x;
        let midx = grid.linear(mx, y, z);
        if grid.occupied_at(midx) && visibility.at(midx) && colored[midx] {
            let v = grid.at(midx);
            out.set_at(idx, [v[0], v[1], v[2], 1.0]);
        } else if !colored[idx] {
            out.set_at(idx, [mean[0], mean[1], mean[2], 1.0]);
        }
        // Ray-filled hidden voxels without a visible mirror keep their fill.
    }
    Ok(out)
}

/// Full capture pipeline: assemble the scene, capture colors in world frame
/// (the ground participates in occlusion), pull the colors back onto the
/// object grid, and symmetry-complete in object frame.
pub fn capture_object_colors(scene: &Scene, source: &AppearanceSource) -> Result<VoxelGrid, CoreError> {
    let scene_n = default_scene_side(&scene.object);
    capture_object_colors_sized(scene, source, (scene_n, scene_n, scene_n))
}

/// Scene-grid side used when the caller does not specify one: the smallest
/// grid at the object's voxel size that spans the [-1, 1] world cube.
pub fn default_scene_side(object: &VoxelGrid) -> usize {
    ((2.0 / object.voxel_size()).round() as usize).max(2)
}

pub fn capture_object_colors_sized(
    scene: &Scene,
    source: &AppearanceSource,
    scene_dims: (usize, usize, usize),
) -> Result<VoxelGrid, CoreError> {
    let Assembled { grid: world, source: src_map, .. } = assemble_scene(scene, scene_dims)?;
    let world_capture = color_from_image(&world, source)?;

    // Pull colors and flags back onto the object grid. Several scene cells
    // can map to one object cell; prefer a visible colored source, then any
    // colored one (first by linear order in both cases).
    let object = &scene.object;
    let mut grid = object.clone();
    let mut visible = vec![false; object.len()];
    let mut colored = vec![false; object.len()];
    let mut chosen: Vec<Option<(bool, usize)>> = vec![None; object.len()];
    for sidx in 0..world.len() {
        let Some(oidx) = src_map[sidx] else { continue };
        let oidx = oidx as usize;
        let vis = world_capture.visibility.at(sidx);
        let col = world_capture.colored[sidx];
        visible[oidx] |= vis;
        if !col {
            continue;
        }
        let candidate = (vis, sidx);
        let better = match chosen[oidx] {
            None => true,
            // Visible beats hidden; earlier linear index breaks ties.
            Some((cv, cs)) => (!cv && vis) || (cv == vis && sidx < cs),
        };
        if better {
            chosen[oidx] = Some(candidate);
        }
    }
    for oidx in 0..object.len() {
        if !object.occupied_at(oidx) {
            grid.set_at(oidx, [0.0, 0.0, 0.0, 0.0]);
            continue;
        }
        grid.set_at(oidx, [0.0, 0.0, 0.0, 1.0]);
        if let Some((_, sidx)) = chosen[oidx] {
            let v = world_capture.grid.at(sidx);
            grid.set_at(oidx, [v[0], v[1], v[2], 1.0]);
            colored[oidx] = true;
        }
    }
    // An object voxel is "visible" here if any of its scene images was; the
    // mirror rule then runs in object coordinates.
    let visibility = VisibilityMask { dims: object.dims(), visible };
    symmetry_complete(&grid, &visibility, &colored)
}
