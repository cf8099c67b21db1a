//! Scene assembly: place a posed object grid and the ground slab into the
//! world-frame scene grid, and resample a world grid into the camera-aligned
//! frame.
//!
//! All resampling is inverse-mapping nearest-neighbor: every destination cell
//! pulls from the source cell containing its transformed center, which keeps
//! occupancy and colors discrete.

use crate::grid::VoxelGrid;
use crate::math::Vec3;
use crate::scene::{Camera, Scene};
use crate::CoreError;

/// Scene grid plus assembly book-keeping.
pub struct Assembled {
    pub grid: VoxelGrid,
    /// Occupied object voxels whose transformed centers fall outside the
    /// scene grid (they are dropped from the output).
    pub clipped: usize,
    /// For each scene cell (linear index): the object cell (linear index) it
    /// was filled from, if it is object- rather than ground-occupied.
    pub source: Vec<Option<u32>>,
}

/// Place the posed object and the ground slab into a world-frame cube grid of
/// `scene_dims` voxels spanning the scene extent.
pub fn assemble_scene(scene: &Scene, scene_dims: (usize, usize, usize)) -> Result<Assembled, CoreError> {
    scene.pose.validate()?;
    let (nx, ny, nz) = scene_dims;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(CoreError::InvalidGrid("scene dims must be nonzero".into()));
    }
    if nx != ny || ny != nz {
        return Err(CoreError::InvalidGrid("scene grid must be a cube".into()));
    }
    let mut out = VoxelGrid::scene_cube(nx)?;
    let mut source = vec![None; out.len()];

    // Object pass: pull each scene-cell center back through the pose.
    for sx in 0..nx {
        for sy in 0..ny {
            for sz in 0..nz {
                let obj_point = scene.pose.invert(out.center(sx, sy, sz));
                if let Some((ox, oy, oz)) = scene.object.index_of(obj_point) {
                    let v = scene.object.get(ox, oy, oz);
                    if v[3] != 0.0 {
                        out.set(sx, sy, sz, v);
                        source[out.linear(sx, sy, sz)] = Some(scene.object.linear(ox, oy, oz) as u32);
                    }
                }
            }
        }
    }

    // Ground slab: the layers just below y = 0, full x-z extent; object
    // voxels keep precedence where they already landed.
    let ground_top = ny / 2; // first layer with centers above y = 0
    let layers = scene.ground.layers.min(ground_top);
    for sy in ground_top - layers..ground_top {
        for sx in 0..nx {
            for sz in 0..nz {
                if !out.occupied(sx, sy, sz) {
                    let c = scene.ground.color;
                    out.set(sx, sy, sz, [c[0], c[1], c[2], 1.0]);
                }
            }
        }
    }

    // Count occupied object voxels whose transformed centers left the grid.
    let mut clipped = 0;
    for (ox, oy, oz) in scene.object.occupied_indices() {
        let world = scene.pose.apply(scene.object.center(ox, oy, oz));
        if out.index_of(world).is_none() {
            clipped += 1;
        }
    }

    Ok(Assembled { grid: out, clipped, source })
}

/// Resample a world-frame grid into a camera-aligned frame of the same shape:
/// x along the camera right axis, y along up, z along the view (depth) axis,
/// centered on the look-at point.
pub fn world_to_camera(grid: &VoxelGrid, camera: &Camera) -> Result<VoxelGrid, CoreError> {
    camera.validate()?;
    if grid.occupied_count() == 0 {
        return Err(CoreError::InvalidGrid("cannot reframe an empty grid".into()));
    }
    let (nx, ny, nz) = grid.dims();
    let vs = grid.voxel_size();
    let origin = Vec3::new(
        -(nx as f64) * vs / 2.0,
        -(ny as f64) * vs / 2.0,
        -(nz as f64) * vs / 2.0,
    );
    let mut out = VoxelGrid::new((nx, ny, nz), origin, vs)?;
    let (right, up, forward) = camera.basis();
    for cx in 0..nx {
        for cy in 0..ny {
            for cz in 0..nz {
                let q = out.center(cx, cy, cz);
                let world = right * q.x + up * q.y + forward * q.z;
                if let Some((ix, iy, iz)) = grid.index_of(world) {
                    out.set(cx, cy, cz, grid.get(ix, iy, iz));
                }
            }
        }
    }
    Ok(out)
}
