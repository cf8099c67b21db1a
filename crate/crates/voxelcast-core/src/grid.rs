//! Dense colored voxel grids.
//!
//! A grid stores one `(r, g, b, occupancy)` quadruple per cell. Occupancy is
//! binary; empty cells must carry zero color. Linear layout is x-major:
//! `index = (x * ny + y) * nz + z`.

use crate::math::Vec3;
use crate::CoreError;

/// Per-voxel payload: RGB color in `[0,1]` and binary occupancy.
pub type Voxel = [f32; 4];

/// Dense 3D grid with color + occupancy channels and world placement.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dims: (usize, usize, usize),
    /// World position of the low corner of voxel (0, 0, 0).
    origin: Vec3,
    /// World units per voxel edge.
    voxel_size: f64,
    data: Vec<Voxel>,
}

impl VoxelGrid {
    /// Empty grid (all voxels unoccupied).
    pub fn new(dims: (usize, usize, usize), origin: Vec3, voxel_size: f64) -> Result<VoxelGrid, CoreError> {
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(CoreError::InvalidGrid("grid dims must all be >= 1".into()));
        }
        if !(voxel_size > 0.0) {
            return Err(CoreError::InvalidGrid("voxel_size must be > 0".into()));
        }
        Ok(VoxelGrid {
            dims,
            origin,
            voxel_size,
            data: vec![[0.0; 4]; dims.0 * dims.1 * dims.2],
        })
    }

    /// Cube grid spanning the world box `[-1,1]^3`, the scene frame used by
    /// the whole pipeline.
    /// Object-frame grid convention: centered on x/z, resting on y = 0 (the
    /// grid occupies y in [0, ny * voxel_size]).
    pub fn object_grid(dims: (usize, usize, usize), voxel_size: f64) -> Result<VoxelGrid, CoreError> {
        let origin = Vec3::new(
            -(dims.0 as f64) * voxel_size / 2.0,
            0.0,
            -(dims.2 as f64) * voxel_size / 2.0,
        );
        VoxelGrid::new(dims, origin, voxel_size)
    }

    pub fn scene_cube(n: usize) -> Result<VoxelGrid, CoreError> {
        VoxelGrid::new((n, n, n), Vec3::new(-1.0, -1.0, -1.0), 2.0 / n as f64)
    }

    /// Rebuild a grid from raw parts, validating the voxel invariants.
    pub fn from_parts(
        dims: (usize, usize, usize),
        origin: Vec3,
        voxel_size: f64,
        data: Vec<Voxel>,
    ) -> Result<VoxelGrid, CoreError> {
        let mut grid = VoxelGrid::new(dims, origin, voxel_size)?;
        if data.len() != grid.data.len() {
            return Err(CoreError::InvalidGrid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        grid.data = data;
        grid.validate()?;
        Ok(grid)
    }

    /// Check the voxel invariants: occupancy in {0,1}, colors in [0,1],
    /// empty voxels all-zero.
    pub fn validate(&self) -> Result<(), CoreError> {
        for (i, v) in self.data.iter().enumerate() {
            if v[3] != 0.0 && v[3] != 1.0 {
                return Err(CoreError::InvalidGrid(format!("voxel {i} occupancy {} not in {{0,1}}", v[3])));
            }
            if v[3] == 0.0 && (v[0] != 0.0 || v[1] != 0.0 || v[2] != 0.0) {
                return Err(CoreError::InvalidGrid(format!("empty voxel {i} has nonzero color")));
            }
            for c in 0..3 {
                if !(0.0..=1.0).contains(&v[c]) {
                    return Err(CoreError::InvalidGrid(format!("voxel {i} channel {c} = {} out of [0,1]", v[c])));
                }
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| v[3] == 0.0)
    }

    pub fn data(&self) -> &[Voxel] {
        &self.data
    }

    pub fn linear(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims.1 + y) * self.dims.2 + z
    }

    pub fn unlinear(&self, idx: usize) -> (usize, usize, usize) {
        let z = idx % self.dims.2;
        let y = (idx / self.dims.2) % self.dims.1;
        let x = idx / (self.dims.1 * self.dims.2);
        (x, y, z)
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> Voxel {
        self.data[self.linear(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: Voxel) {
        let i = self.linear(x, y, z);
        self.data[i] = v;
    }

    pub fn at(&self, idx: usize) -> Voxel {
        self.data[idx]
    }

    pub fn set_at(&mut self, idx: usize, v: Voxel) {
        self.data[idx] = v;
    }

    pub fn occupied(&self, x: usize, y: usize, z: usize) -> bool {
        self.get(x, y, z)[3] != 0.0
    }

    pub fn occupied_at(&self, idx: usize) -> bool {
        self.data[idx][3] != 0.0
    }

    /// World-space center of a voxel.
    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                (x as f64 + 0.5) * self.voxel_size,
                (y as f64 + 0.5) * self.voxel_size,
                (z as f64 + 0.5) * self.voxel_size,
            )
    }

    /// Voxel index containing a world point, if inside the grid.
    ///
    /// The cell is found by flooring the continuous grid coordinate, so a
    /// point exactly on a shared face belongs to the higher-index cell.
    pub fn index_of(&self, p: Vec3) -> Option<(usize, usize, usize)> {
        let gx = (p.x - self.origin.x) / self.voxel_size;
        let gy = (p.y - self.origin.y) / self.voxel_size;
        let gz = (p.z - self.origin.z) / self.voxel_size;
        let (ix, iy, iz) = (gx.floor(), gy.floor(), gz.floor());
        if ix < 0.0 || iy < 0.0 || iz < 0.0 {
            return None;
        }
        let (ix, iy, iz) = (ix as usize, iy as usize, iz as usize);
        if ix >= self.dims.0 || iy >= self.dims.1 || iz >= self.dims.2 {
            return None;
        }
        Some((ix, iy, iz))
    }

    /// Iterate over occupied voxel indices in linear order.
    pub fn occupied_indices(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, v)| v[3] != 0.0)
            .map(|(i, _)| self.unlinear(i))
    }

    pub fn occupied_count(&self) -> usize {
        self.data.iter().filter(|v| v[3] != 0.0).count()
    }

    /// World-space box covered by the grid: (low corner, high corner).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let hi = self.origin
            + Vec3::new(
                self.dims.0 as f64 * self.voxel_size,
                self.dims.1 as f64 * self.voxel_size,
                self.dims.2 as f64 * self.voxel_size,
            );
        (self.origin, hi)
    }

    /// Downsample to `factor` of the resolution and re-upsample back with
    /// nearest-neighbor lookups. Used by the resolution-degradation study.
    pub fn degrade_resolution(&self, factor: f64) -> Result<VoxelGrid, CoreError> {
        if !(0.0 < factor && factor <= 1.0) {
            return Err(CoreError::InvalidGrid(format!("degrade factor {factor} out of (0,1]")));
        }
        let small_dims = (
            ((self.dims.0 as f64 * factor).round() as usize).max(1),
            ((self.dims.1 as f64 * factor).round() as usize).max(1),
            ((self.dims.2 as f64 * factor).round() as usize).max(1),
        );
        // Low-res pass: each small cell takes the nearest full-res voxel.
        let mut small = vec![[0.0f32; 4]; small_dims.0 * small_dims.1 * small_dims.2];
        for sx in 0..small_dims.0 {
            for sy in 0..small_dims.1 {
                for sz in 0..small_dims.2 {
                    let fx = (((sx as f64 + 0.5) / small_dims.0 as f64) * self.dims.0 as f64) as usize;
                    let fy = (((sy as f64 + 0.5) / small_dims.1 as f64) * self.dims.1 as f64) as usize;
                    let fz = (((sz as f64 + 0.5) / small_dims.2 as f64) * self.dims.2 as f64) as usize;
                    small[(sx * small_dims.1 + sy) * small_dims.2 + sz] =
                        self.get(fx.min(self.dims.0 - 1), fy.min(self.dims.1 - 1), fz.min(self.dims.2 - 1));
                }
            }
        }
        let mut out = VoxelGrid::new(self.dims, self.origin, self.voxel_size)?;
        for x in 0..self.dims.0 {
            for y in 0..self.dims.1 {
                for z in 0..self.dims.2 {
                    let sx = ((x as f64 + 0.5) / self.dims.0 as f64 * small_dims.0 as f64) as usize;
                    let sy = ((y as f64 + 0.5) / self.dims.1 as f64 * small_dims.1 as f64) as usize;
                    let sz = ((z as f64 + 0.5) / self.dims.2 as f64 * small_dims.2 as f64) as usize;
                    let v = small[(sx.min(small_dims.0 - 1) * small_dims.1 + sy.min(small_dims.1 - 1)) * small_dims.2
                        + sz.min(small_dims.2 - 1)];
                    out.set(x, y, z, v);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_roundtrip() {
        let g = VoxelGrid::new((3, 4, 5), Vec3::ZERO, 1.0).unwrap();
        for x in 0..3 {
            for y in 0..4 {
                for z in 0..5 {
                    assert_eq!(g.unlinear(g.linear(x, y, z)), (x, y, z));
                }
            }
        }
    }

    #[test]
    fn index_of_centers() {
        let g = VoxelGrid::scene_cube(8).unwrap();
        for x in 0..8 {
            for y in 0..8 {
                for z in 0..8 {
                    assert_eq!(g.index_of(g.center(x, y, z)), Some((x, y, z)));
                }
            }
        }
        assert_eq!(g.index_of(Vec3::new(1.5, 0.0, 0.0)), None);
    }

    #[test]
    fn face_point_belongs_to_upper_cell() {
        let g = VoxelGrid::scene_cube(8).unwrap();
        // x = 0 is the boundary between cells 3 and 4 along x.
        assert_eq!(g.index_of(Vec3::new(0.0, -0.9, -0.9)), Some((4, 0, 0)));
    }

    #[test]
    fn validate_rejects_colored_empty_voxel() {
        let mut g = VoxelGrid::scene_cube(4).unwrap();
        g.set(0, 0, 0, [0.5, 0.0, 0.0, 0.0]);
        assert!(g.validate().is_err());
    }

    #[test]
    fn degrade_full_factor_is_identity() {
        let mut g = VoxelGrid::scene_cube(8).unwrap();
        g.set(1, 2, 3, [0.2, 0.4, 0.6, 1.0]);
        g.set(7, 0, 5, [0.9, 0.1, 0.3, 1.0]);
        let d = g.degrade_resolution(1.0).unwrap();
        assert_eq!(g, d);
    }

    #[test]
    fn degrade_halves_detail() {
        let mut g = VoxelGrid::scene_cube(8).unwrap();
        for x in 0..8 {
            g.set(x, 0, 0, [if x % 2 == 0 { 1.0 } else { 0.0 }, 0.5, 0.5, 1.0]);
        }
        let d = g.degrade_resolution(0.5).unwrap();
        // Half resolution cannot keep a period-2 pattern: each coarse cell
        // duplicates one source voxel.
        for x in (0..8).step_by(2) {
            assert_eq!(d.get(x, 0, 0), d.get(x + 1, 0, 0));
        }
    }
}
