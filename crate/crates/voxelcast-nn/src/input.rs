//! Conversions between renderer-side types and network tensors.
//!
//! The network consumes the scene in the camera frame: the voxel grid is
//! first resampled with `world_to_camera` (x = camera right, y = up,
//! z = view depth), then laid out as a `[4, depth, row, column]` tensor
//! where rows run top-to-bottom like image rows. The light position is
//! expressed in the same camera basis.

use ndarray::{ArrayD, IxDyn};

use voxelcast_core::{Camera, Image, Vec3, VoxelGrid};

use crate::NnError;

/// Camera-frame voxel grid → `[4, d, h, w]` tensor (RGB + occupancy).
/// Tensor row h counts downward from the top of the image, so it maps to
/// grid y index `ny − 1 − h`; tensor depth d is the grid z (view) index and
/// tensor column w is the grid x (right) index.
pub fn voxel_tensor(grid: &VoxelGrid) -> ArrayD<f32> {
    let (nx, ny, nz) = grid.dims();
    let mut out = ArrayD::zeros(IxDyn(&[4, nz, ny, nx]));
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let v = grid.get(x, y, z);
                let (d, h, w) = (z, ny - 1 - y, x);
                for c in 0..4 {
                    out[[c, d, h, w]] = v[c];
                }
            }
        }
    }
    out
}

/// Light position in the camera basis: components along the camera right,
/// up and forward axes.
pub fn light_camera(light_world: Vec3, camera: &Camera) -> [f32; 3] {
    let (right, up, forward) = camera.basis();
    [
        light_world.dot(right) as f32,
        light_world.dot(up) as f32,
        light_world.dot(forward) as f32,
    ]
}

/// Image → `[3, h, w]` tensor.
pub fn image_tensor(img: &Image) -> ArrayD<f32> {
    let (w, h) = img.dims();
    let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            let p = img.get(x, y);
            for c in 0..3 {
                out[[c, y, x]] = p[c];
            }
        }
    }
    out
}

/// `[3, h, w]` tensor → image, clamping to [0, 1].
pub fn tensor_image(t: &ArrayD<f32>) -> Result<Image, NnError> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(NnError::Config(format!("expected [3, h, w] tensor, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            img.set(x, y, [
                t[[0, y, x]].clamp(0.0, 1.0),
                t[[1, y, x]].clamp(0.0, 1.0),
                t[[2, y, x]].clamp(0.0, 1.0),
            ]);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voxel_tensor_flips_rows_and_keeps_channels() {
        let mut grid = VoxelGrid::new((2, 2, 2), Vec3::new(0.0, 0.0, 0.0), 1.0).unwrap();
        grid.set(1, 0, 0, [0.2, 0.4, 0.6, 1.0]);
        let t = voxel_tensor(&grid);
        assert_eq!(t.shape(), &[4, 2, 2, 2]);
        // y = 0 is the bottom row, so it lands at tensor row h = 1.
        assert_eq!(t[[0, 0, 1, 1]], 0.2);
        assert_eq!(t[[3, 0, 1, 1]], 1.0);
        let total: f32 = t.iter().sum();
        assert_eq!(total, 0.2 + 0.4 + 0.6 + 1.0);
    }

    #[test]
    fn light_components_follow_the_camera_basis() {
        // At zero elevation the camera basis is the world basis with z
        // negated, so the conversion is a sign flip on z.
        let camera = Camera::looking_at_origin(0.0, (64, 64));
        let l = light_camera(Vec3::new(0.5, 2.75, -0.25), &camera);
        assert!((l[0] - 0.5).abs() < 1e-6);
        assert!((l[1] - 2.75).abs() < 1e-6);
        assert!((l[2] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn image_tensor_roundtrip() {
        let mut img = Image::new(3, 2);
        img.set(0, 0, [0.1, 0.2, 0.3]);
        img.set(2, 1, [0.9, 0.8, 0.7]);
        let t = image_tensor(&img);
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(t[[0, 0, 0]], 0.1);
        assert_eq!(t[[2, 1, 2]], 0.7);
        let back = tensor_image(&t).unwrap();
        assert_eq!(back.pixels(), img.pixels());
    }
}
