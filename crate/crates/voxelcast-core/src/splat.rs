//! Point splatting: project colored voxel centers into a target view as
//! filled discs with nearest-depth-wins compositing.
//!
//! The result is deliberately raw — gaps between splats and over-covered
//! silhouettes are expected; downstream consumers treat it as a rendering
//! hint, not a final image.

use std::path::Path;

use crate::grid::VoxelGrid;
use crate::image::{write_raw_raster, Image};
use crate::scene::Camera;
use crate::CoreError;

/// A splat target: color, per-pixel nearest depth, and coverage flags.
#[derive(Clone, Debug)]
pub struct SplatCanvas {
    pub color: Image,
    /// Nearest composited depth per pixel; +inf where nothing landed.
    pub depth: Vec<f64>,
    pub coverage: Vec<bool>,
}

impl SplatCanvas {
    pub fn empty(width: usize, height: usize) -> SplatCanvas {
        SplatCanvas {
            color: Image::new(width, height),
            depth: vec![f64::INFINITY; width * height],
            coverage: vec![false; width * height],
        }
    }

    pub fn covered_count(&self) -> usize {
        self.coverage.iter().filter(|&&c| c).count()
    }

    /// Write the color image as PNG and the depth buffer as a single-channel
    /// float raster next to it (same stem, `.depth` extension).
    pub fn save(&self, color_path: &Path) -> Result<(), CoreError> {
        self.color.save_png(color_path)?;
        let depth32: Vec<f32> = self.depth.iter().map(|&d| d as f32).collect();
        let depth_path = color_path.with_extension("depth");
        write_raw_raster(&depth_path, self.color.width(), self.color.height(), 1, &depth32)
    }
}

/// Disc radius in pixels for a voxel of world size `voxel_size` at `depth`:
/// half the projected voxel footprint, rounded up, at least one pixel.
fn disc_radius(camera: &Camera, voxel_size: f64, depth: f64) -> i64 {
    let size_px = voxel_size * camera.pixel_scale() / depth;
    ((0.5 * size_px).ceil() as i64).max(1)
}

/// Splat every occupied voxel center into the target view.
///
/// Per pixel the splat with the smallest depth wins; exact depth ties go to
/// the smaller voxel linear index, so the result is independent of iteration
/// order. Voxels behind the camera are skipped; an all-behind grid yields an
/// empty canvas.
pub fn splat(grid: &VoxelGrid, camera: &Camera) -> SplatCanvas {
    splat_with_radius(grid, camera, disc_radius)
}

/// Same as [`splat`] with the footprint rule swapped out (used by tests to
/// study coverage as a function of radius).
pub fn splat_with_radius(
    grid: &VoxelGrid,
    camera: &Camera,
    radius: impl Fn(&Camera, f64, f64) -> i64,
) -> SplatCanvas {
    let (w, h) = camera.image_dims;
    let mut canvas = SplatCanvas::empty(w, h);
    // Winner per pixel: (depth, voxel linear index), lexicographic minimum.
    let mut winner: Vec<(f64, usize)> = vec![(f64::INFINITY, usize::MAX); w * h];

    for idx in 0..grid.len() {
        if !grid.occupied_at(idx) {
            continue;
        }
        let (x, y, z) = grid.unlinear(idx);
        let Ok((u, v, depth)) = camera.project_point(grid.center(x, y, z)) else {
            continue;
        };
        let r = radius(camera, grid.voxel_size(), depth);
        let r2 = (r * r) as f64;
        let px_lo = (u - r as f64 - 1.0).floor() as i64;
        let px_hi = (u + r as f64 + 1.0).ceil() as i64;
        let py_lo = (v - r as f64 - 1.0).floor() as i64;
        let py_hi = (v + r as f64 + 1.0).ceil() as i64;
        for py in py_lo..=py_hi {
            for px in px_lo..=px_hi {
                if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                    continue;
                }
                let du = px as f64 + 0.5 - u;
                let dv = py as f64 + 0.5 - v;
                if du * du + dv * dv > r2 {
                    continue;
                }
                let p = py as usize * w + px as usize;
                if (depth, idx) < winner[p] {
                    winner[p] = (depth, idx);
                }
            }
        }
    }

    for p in 0..w * h {
        let (depth, idx) = winner[p];
        if idx != usize::MAX {
            let vox = grid.at(idx);
            canvas.color.pixels_mut()[p] = [vox[0], vox[1], vox[2]];
            canvas.depth[p] = depth;
            canvas.coverage[p] = true;
        }
    }
    canvas
}
