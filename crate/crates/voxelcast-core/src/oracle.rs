//! Reference renderer: physically-motivated shading of a colored voxel grid
//! under a rectangular area light.
//!
//! Per pixel: primary ray into the grid, Lambertian direct lighting sampled
//! with stratified jitter on the light rectangle (soft shadows via grid
//! traversal), a mirror-reflection term on floor voxels, and an optional
//! single cosine-sampled indirect bounce for color bleed. Every pixel owns an
//! RNG stream derived from (seed, pixel index), so serial and parallel runs
//! produce bit-identical images.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::grid::VoxelGrid;
use crate::image::Image;
use crate::math::Vec3;
use crate::raycast::{first_matching_hit, first_occupied_hit, segment_blocked, Hit};
use crate::scene::Camera;
use crate::CoreError;

/// Rectangular light parallel to the ground plane, emitting white light
/// downward with uniform radiance `intensity`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaLight {
    pub center: Vec3,
    /// Half extents along x and z.
    pub half_extents: (f64, f64),
    pub intensity: f64,
}

impl AreaLight {
    pub fn at(center: Vec3) -> AreaLight {
        AreaLight { center, half_extents: (0.25, 0.25), intensity: AreaLight::DEFAULT_INTENSITY }
    }

    pub const DEFAULT_INTENSITY: f64 = 12.0;

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.half_extents.0 > 0.0 && self.half_extents.1 > 0.0) {
            return Err(CoreError::InvalidLight("half extents must be > 0".into()));
        }
        if !(self.center.y > 0.0) {
            return Err(CoreError::InvalidLight("light must sit above the ground plane".into()));
        }
        if !(self.intensity > 0.0) {
            return Err(CoreError::InvalidLight("intensity must be > 0".into()));
        }
        Ok(())
    }

    fn corner(&self, sx: f64, sz: f64) -> Vec3 {
        self.center + Vec3::new(sx * self.half_extents.0, 0.0, sz * self.half_extents.1)
    }
}

/// Renderer knobs. `floor_specular` applies to voxels below the ground plane
/// (the slab), matching the scene's ground material.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub shadow_samples: usize,
    pub indirect_bounce: bool,
    pub ambient: f64,
    pub floor_specular: f64,
    pub rng_seed: u64,
    pub background: [f32; 3],
}

impl Default for RenderSettings {
    fn default() -> RenderSettings {
        RenderSettings {
            shadow_samples: 16,
            indirect_bounce: true,
            ambient: 0.1,
            floor_specular: 0.3,
            rng_seed: 0,
            background: DEFAULT_BACKGROUND,
        }
    }
}

/// Backdrop for rays that miss the scene. Deliberately not pure black: the
/// neural rerenderer squashes its output through a sigmoid, which can only
/// approach the exact 0.0 asymptotically.
pub const DEFAULT_BACKGROUND: [f32; 3] = [0.10, 0.10, 0.12];

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream for one pixel of one render.
pub fn pixel_rng(seed: u64, pixel_index: u64) -> ChaCha8Rng {
    let mut state = seed ^ pixel_index.wrapping_mul(0xA24B_AED4_963E_E407);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Per-voxel unit normals from the occupancy field: minus the central
/// difference gradient over the 6-neighborhood. Cells where the gradient
/// vanishes (isolated or fully interior voxels) get the zero vector; shading
/// substitutes a view-facing normal there.
pub fn voxel_normals(grid: &VoxelGrid) -> Vec<Vec3> {
    let (nx, ny, nz) = grid.dims();
    let occ = |x: i64, y: i64, z: i64| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            0.0
        } else if grid.occupied(x as usize, y as usize, z as usize) {
            1.0
        } else {
            0.0
        }
    };
    // Differencing the raw binary field quantizes normals to 26 directions,
    // far too coarse to track a curved surface. Averaging occupancy over the
    // 3x3x3 neighborhood first recovers sub-voxel surface orientation while
    // keeping flat faces exactly axis-aligned.
    let smoothed = |x: i64, y: i64, z: i64| -> f64 {
        let mut s = 0.0;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    s += occ(x + dx, y + dy, z + dz);
                }
            }
        }
        s / 27.0
    };
    let mut normals = vec![Vec3::ZERO; grid.len()];
    for (x, y, z) in grid.occupied_indices() {
        let (xi, yi, zi) = (x as i64, y as i64, z as i64);
        let g = Vec3::new(
            smoothed(xi + 1, yi, zi) - smoothed(xi - 1, yi, zi),
            smoothed(xi, yi + 1, zi) - smoothed(xi, yi - 1, zi),
            smoothed(xi, yi, zi + 1) - smoothed(xi, yi, zi - 1),
        );
        if g.length() > 0.0 {
            normals[grid.linear(x, y, z)] = (-g).normalized();
        }
    }
    normals
}

fn normal_or_view_facing(normals: &[Vec3], grid: &VoxelGrid, cell: (usize, usize, usize), toward: Vec3) -> Vec3 {
    let n = normals[grid.linear(cell.0, cell.1, cell.2)];
    if n.length() > 0.0 {
        n
    } else {
        let c = grid.center(cell.0, cell.1, cell.2);
        (toward - c).normalized()
    }
}

/// Monte-Carlo irradiance at point `p` with normal `n` from the light,
/// counting occlusion by the grid (the cell `skip` never blocks its own
/// shading point). Stratified jitter when `samples` is a perfect square,
/// independent uniforms otherwise.
pub fn direct_irradiance(
    grid: &VoxelGrid,
    p: Vec3,
    n: Vec3,
    light: &AreaLight,
    samples: usize,
    skip: Option<(usize, usize, usize)>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let samples = samples.max(1);
    let side = (samples as f64).sqrt() as usize;
    let stratified = side * side == samples;
    let area = 4.0 * light.half_extents.0 * light.half_extents.1;
    let mut sum = 0.0;
    for i in 0..samples {
        let (u, v) = if stratified {
            let (ix, iz) = (i % side, i / side);
            (
                (ix as f64 + rng.gen::<f64>()) / side as f64,
                (iz as f64 + rng.gen::<f64>()) / side as f64,
            )
        } else {
            (rng.gen::<f64>(), rng.gen::<f64>())
        };
        let q = light.corner(2.0 * u - 1.0, 2.0 * v - 1.0);
        let d = q - p;
        let r2 = d.dot(d);
        if r2 == 0.0 {
            continue;
        }
        let l = d * (1.0 / r2.sqrt());
        let cos_surface = n.dot(l);
        // The light emits downward only.
        let cos_light = l.y;
        if cos_surface <= 0.0 || cos_light <= 0.0 {
            continue;
        }
        if segment_blocked(grid, p, q, skip) {
            continue;
        }
        sum += cos_surface * cos_light / r2;
    }
    light.intensity * area * sum / samples as f64
}

fn cosine_hemisphere(n: Vec3, rng: &mut ChaCha8Rng) -> Vec3 {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let r = u1.sqrt();
    let phi = 2.0 * std::f64::consts::PI * u2;
    // Tangent frame around n.
    let a = if n.x.abs() < 0.9 { Vec3::new(1.0, 0.0, 0.0) } else { Vec3::new(0.0, 1.0, 0.0) };
    let t = n.cross(a).normalized();
    let b = n.cross(t);
    t * (r * phi.cos()) + b * (r * phi.sin()) + n * (1.0 - u1).sqrt()
}

const BOUNCE_SAMPLES: usize = 4;

struct Shader<'a> {
    grid: &'a VoxelGrid,
    normals: &'a [Vec3],
    light: &'a AreaLight,
    settings: &'a RenderSettings,
}

impl Shader<'_> {
    fn albedo(&self, cell: (usize, usize, usize)) -> Vec3 {
        let v = self.grid.get(cell.0, cell.1, cell.2);
        Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64)
    }

    fn is_floor(&self, cell: (usize, usize, usize)) -> bool {
        self.grid.center(cell.0, cell.1, cell.2).y < 0.0
    }

    /// Shade the surface a ray hit. `primary` enables the floor mirror term
    /// and the indirect bounce; secondary shading is ambient + direct only.
    fn shade(&self, origin: Vec3, dir: Vec3, hit: &Hit, rng: &mut ChaCha8Rng, primary: bool) -> Vec3 {
        let p = origin + dir * hit.t_entry.max(0.0);
        let n = normal_or_view_facing(self.normals, self.grid, hit.cell, origin);
        let albedo = self.albedo(hit.cell);
        let shadow_samples = if primary {
            self.settings.shadow_samples
        } else {
            (self.settings.shadow_samples / 4).max(1)
        };
        let e_direct = direct_irradiance(self.grid, p, n, self.light, shadow_samples, Some(hit.cell), rng);
        let mut color = albedo * (self.settings.ambient + e_direct);

        if primary && self.settings.floor_specular > 0.0 && self.is_floor(hit.cell) {
            let rdir = dir.normalized().reflect(n);
            let skip = hit.cell;
            let reflected = first_matching_hit(self.grid, p, rdir, f64::INFINITY, |h| h.cell != skip);
            if let Some(h2) = reflected {
                let mirror = self.shade(p, rdir, &h2, rng, false);
                color += mirror * self.settings.floor_specular;
            }
            // Rays reflecting into empty space see a black sky: no term.
        }

        if primary && self.settings.indirect_bounce {
            let mut bleed = Vec3::ZERO;
            for _ in 0..BOUNCE_SAMPLES {
                let h = cosine_hemisphere(n, rng);
                let skip = hit.cell;
                if let Some(h2) = first_matching_hit(self.grid, p, h, f64::INFINITY, |c| c.cell != skip) {
                    let p2 = p + h * h2.t_entry.max(0.0);
                    let n2 = normal_or_view_facing(self.normals, self.grid, h2.cell, p);
                    let e2 = direct_irradiance(self.grid, p2, n2, self.light, 1, Some(h2.cell), rng);
                    let a2 = self.albedo(h2.cell);
                    bleed += a2 * e2;
                }
            }
            // Cosine-weighted estimate of one-bounce irradiance; the pi from
            // the Lambertian lobe cancels against the sampling density.
            color += albedo.hadamard(bleed) * (1.0 / BOUNCE_SAMPLES as f64);
        }

        color
    }
}

/// Render the colored world-frame grid under the area light.
pub fn render_target(
    grid: &VoxelGrid,
    light: &AreaLight,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<Image, CoreError> {
    light.validate()?;
    camera.validate()?;
    let normals = voxel_normals(grid);
    let shader = Shader { grid, normals: &normals, light, settings };
    let (w, h) = camera.image_dims;
    let pixels: Vec<[f32; 3]> = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let (px, py) = (p % w, p / w);
            let mut rng = pixel_rng(settings.rng_seed, p as u64);
            let (origin, dir) = camera.pixel_ray(px, py);
            match first_occupied_hit(grid, origin, dir, f64::INFINITY) {
                None => settings.background,
                Some(hit) => {
                    let c = shader.shade(origin, dir, &hit, &mut rng, true);
                    [
                        c.x.clamp(0.0, 1.0) as f32,
                        c.y.clamp(0.0, 1.0) as f32,
                        c.z.clamp(0.0, 1.0) as f32,
                    ]
                }
            }
        })
        .collect();
    Ok(Image::from_pixels(w, h, pixels).expect("pixel count matches"))
}
