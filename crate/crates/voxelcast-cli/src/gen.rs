//! Procedural object generation: each object is the union of a few solid
//! primitives (boxes, vertical cylinders, ellipsoids) voxelized into an
//! object grid, colored under one of three appearance settings.
//!
//! Shapes are built to be usable as scene content without further checks:
//! the first primitive rests on the ground plane and every later primitive
//! is anchored inside the union built so far, so the occupied voxels form a
//! single 6-connected, ground-supported component. A candidate that fails
//! the connectivity or color-diversity checks is discarded and redrawn from
//! the same RNG stream, keeping generation deterministic per seed.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use voxelcast_core::math::Vec3;
use voxelcast_core::VoxelGrid;

use crate::PipelineError;

/// Which texture parameter pool an object draws from. The pools are
/// disjoint, so a held-out texture scale never appears during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureSplit {
    Train,
    Test,
}

/// Texture pattern cell sizes (in voxels) per split; deliberately disjoint.
pub const TRAIN_TEXTURE_PERIODS: [usize; 2] = [2, 3];
pub const TEST_TEXTURE_PERIODS: [usize; 2] = [4, 5];

/// How a generated object is colored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AppearanceSetting {
    /// One color for the whole object.
    SingleColor,
    /// One color per primitive part (later parts overwrite earlier ones
    /// where they overlap).
    DefaultParts,
    /// A two-color procedural pattern (stripes, checkerboard or cell noise)
    /// stamped over the occupied voxels.
    Textured(TextureSplit),
}

/// Appearance setting as named in configuration files, without the
/// train/test texture split baked in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SettingKind {
    SingleColor,
    DefaultParts,
    Textured,
}

impl SettingKind {
    pub fn parse(name: &str) -> Result<SettingKind, PipelineError> {
        match name {
            "single_color" => Ok(SettingKind::SingleColor),
            "default_parts" => Ok(SettingKind::DefaultParts),
            "textured" => Ok(SettingKind::Textured),
            other => Err(PipelineError::Invalid(format!(
                "unknown appearance setting '{other}' (expected single_color, default_parts or textured)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SettingKind::SingleColor => "single_color",
            SettingKind::DefaultParts => "default_parts",
            SettingKind::Textured => "textured",
        }
    }

    /// The concrete per-object setting for a dataset split.
    pub fn for_split(self, split: TextureSplit) -> AppearanceSetting {
        match self {
            SettingKind::SingleColor => AppearanceSetting::SingleColor,
            SettingKind::DefaultParts => AppearanceSetting::DefaultParts,
            SettingKind::Textured => AppearanceSetting::Textured(split),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Primitive {
    Box { center: Vec3, half: Vec3 },
    Cylinder { center: Vec3, radius: f64, half_height: f64 },
    Ellipsoid { center: Vec3, radii: Vec3 },
}

impl Primitive {
    fn contains(&self, p: Vec3) -> bool {
        match *self {
            Primitive::Box { center, half } => {
                let d = p - center;
                d.x.abs() <= half.x && d.y.abs() <= half.y && d.z.abs() <= half.z
            }
            Primitive::Cylinder { center, radius, half_height } => {
                let d = p - center;
                d.y.abs() <= half_height && d.x * d.x + d.z * d.z <= radius * radius
            }
            Primitive::Ellipsoid { center, radii } => {
                let d = p - center;
                let n = Vec3::new(d.x / radii.x, d.y / radii.y, d.z / radii.z);
                n.dot(n) <= 1.0
            }
        }
    }

    fn half_extents(&self) -> Vec3 {
        match *self {
            Primitive::Box { half, .. } => half,
            Primitive::Cylinder { radius, half_height, .. } => {
                Vec3::new(radius, half_height, radius)
            }
            Primitive::Ellipsoid { radii, .. } => radii,
        }
    }

    fn center(&self) -> Vec3 {
        match *self {
            Primitive::Box { center, .. }
            | Primitive::Cylinder { center, .. }
            | Primitive::Ellipsoid { center, .. } => center,
        }
    }

    fn with_center(self, c: Vec3) -> Primitive {
        match self {
            Primitive::Box { half, .. } => Primitive::Box { center: c, half },
            Primitive::Cylinder { radius, half_height, .. } => {
                Primitive::Cylinder { center: c, radius, half_height }
            }
            Primitive::Ellipsoid { radii, .. } => Primitive::Ellipsoid { center: c, radii },
        }
    }
}

struct TextureParams {
    pattern: u8,
    period: usize,
    stripe_mix: (usize, usize),
    salt: u64,
    colors: ([f32; 3], [f32; 3]),
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.gen_range(0.15..0.9) as f32,
        rng.gen_range(0.15..0.9) as f32,
        rng.gen_range(0.15..0.9) as f32,
    ]
}

/// Two colors far apart in L1 so both stay distinguishable after shading.
fn contrasting_pair(rng: &mut ChaCha8Rng) -> ([f32; 3], [f32; 3]) {
    loop {
        let a = random_color(rng);
        let b = random_color(rng);
        let dist: f32 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        if dist >= 0.9 {
            return (a, b);
        }
    }
}

fn sample_texture(rng: &mut ChaCha8Rng, split: TextureSplit) -> TextureParams {
    let periods: &[usize] = match split {
        TextureSplit::Train => &TRAIN_TEXTURE_PERIODS,
        TextureSplit::Test => &TEST_TEXTURE_PERIODS,
    };
    TextureParams {
        pattern: rng.gen_range(0..3u8),
        period: periods[rng.gen_range(0..periods.len())],
        stripe_mix: (rng.gen_range(0..2), rng.gen_range(0..2)),
        salt: rng.gen(),
        colors: contrasting_pair(rng),
    }
}

fn cell_hash(x: u64, y: u64, z: u64, salt: u64) -> u64 {
    let mut h = salt ^ 0x9E37_79B9_7F4A_7C15;
    for v in [x, y, z] {
        h ^= v.wrapping_mul(0xA24B_AED4_963E_E407);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

fn texture_color(tex: &TextureParams, x: usize, y: usize, z: usize) -> [f32; 3] {
    let p = tex.period;
    let first = match tex.pattern {
        0 => {
            let along = x + tex.stripe_mix.0 * y + tex.stripe_mix.1 * z;
            (along / p) % 2 == 0
        }
        1 => (x / p + y / p + z / p) % 2 == 0,
        _ => cell_hash((x / p) as u64, (y / p) as u64, (z / p) as u64, tex.salt) & 1 == 0,
    };
    if first {
        tex.colors.0
    } else {
        tex.colors.1
    }
}

/// Generate one object into a fresh object grid (`dims`³ voxels of size
/// `voxel_size`, origin at the center of its ground footprint). The same
/// seed always produces bit-identical voxels.
pub fn generate_object(
    seed: u64,
    setting: AppearanceSetting,
    dims: usize,
    voxel_size: f64,
) -> Result<VoxelGrid, PipelineError> {
    if dims < 8 {
        return Err(PipelineError::Invalid(format!(
            "object grid side {dims} too small to fit primitives"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..64 {
        let grid = build_candidate(&mut rng, setting, dims, voxel_size)?;
        if grid.occupied_count() >= 40 && occupied_connected(&grid) && colors_diverse(&grid, setting)
        {
            return Ok(grid);
        }
    }
    Err(PipelineError::Invalid(format!(
        "object generation for seed {seed} kept producing degenerate shapes"
    )))
}

fn sample_primitive(rng: &mut ChaCha8Rng, span: f64) -> Primitive {
    let lo = 0.08 * span;
    let hi = 0.24 * span;
    let ext = |r: &mut ChaCha8Rng| r.gen_range(lo..hi);
    match rng.gen_range(0..3u8) {
        0 => {
            let half = Vec3::new(ext(rng), ext(rng), ext(rng));
            Primitive::Box { center: Vec3::ZERO, half }
        }
        1 => {
            let radius = ext(rng);
            let half_height = ext(rng);
            Primitive::Cylinder { center: Vec3::ZERO, radius, half_height }
        }
        _ => {
            let radii = Vec3::new(ext(rng), ext(rng), ext(rng));
            Primitive::Ellipsoid { center: Vec3::ZERO, radii }
        }
    }
}

fn build_candidate(
    rng: &mut ChaCha8Rng,
    setting: AppearanceSetting,
    dims: usize,
    voxel_size: f64,
) -> Result<VoxelGrid, PipelineError> {
    let mut grid = VoxelGrid::object_grid((dims, dims, dims), voxel_size)?;
    let span = dims as f64 * voxel_size;
    // Keep primitives comfortably inside the grid so pose rotation and
    // translation later rarely push the object out of the scene cube.
    let ground_cap = 0.45 * span;

    let n_parts = rng.gen_range(3..=8usize);
    let mut part_of: Vec<Option<u8>> = vec![None; grid.len()];
    let mut anchors: Vec<(usize, usize, usize)> = Vec::new();

    for k in 0..n_parts {
        let prim = sample_primitive(rng, span);
        let half = prim.half_extents();
        let center = if k == 0 || anchors.is_empty() {
            // Grounded root: bottom face on the ground plane.
            Vec3::new(
                rng.gen_range(-(ground_cap - half.x).max(0.0)..=(ground_cap - half.x).max(0.0)),
                half.y,
                rng.gen_range(-(ground_cap - half.z).max(0.0)..=(ground_cap - half.z).max(0.0)),
            )
        } else {
            // Anchored growth: center the primitive near an occupied voxel
            // so the new part overlaps the union built so far.
            let (ax, ay, az) = anchors[rng.gen_range(0..anchors.len())];
            let a = grid.center(ax, ay, az);
            let c = a
                + Vec3::new(
                    rng.gen_range(-0.5..0.5) * half.x,
                    rng.gen_range(-0.5..0.5) * half.y,
                    rng.gen_range(-0.5..0.5) * half.z,
                );
            clamp_center(c, half, ground_cap, span)
        };
        let prim = prim.with_center(center);
        stamp(&grid, &prim, k as u8, &mut part_of, &mut anchors);
    }

    paint(&mut grid, &part_of, n_parts, setting, rng);
    Ok(grid)
}

/// Clamp a primitive center so the whole solid stays inside the grid extent
/// (|x|,|z| within the ground cap, y within [half, span - half]).
fn clamp_center(c: Vec3, half: Vec3, ground_cap: f64, span: f64) -> Vec3 {
    let cx = (ground_cap - half.x).max(0.0);
    let cz = (ground_cap - half.z).max(0.0);
    Vec3::new(
        c.x.clamp(-cx, cx),
        c.y.clamp(half.y, (span - half.y).max(half.y)),
        c.z.clamp(-cz, cz),
    )
}

fn stamp(
    grid: &VoxelGrid,
    prim: &Primitive,
    part: u8,
    part_of: &mut [Option<u8>],
    anchors: &mut Vec<(usize, usize, usize)>,
) {
    let (nx, ny, nz) = grid.dims();
    let half = prim.half_extents();
    let center = prim.center();
    let lo = center - half;
    let hi = center + half;
    let origin = grid.origin();
    let vs = grid.voxel_size();
    let cell = |w: f64, o: f64| ((w - o) / vs).floor() as i64;
    let x0 = cell(lo.x, origin.x).max(0) as usize;
    let x1 = (cell(hi.x, origin.x).max(0) as usize).min(nx - 1);
    let y0 = cell(lo.y, origin.y).max(0) as usize;
    let y1 = (cell(hi.y, origin.y).max(0) as usize).min(ny - 1);
    let z0 = cell(lo.z, origin.z).max(0) as usize;
    let z1 = (cell(hi.z, origin.z).max(0) as usize).min(nz - 1);
    for x in x0..=x1 {
        for y in y0..=y1 {
            for z in z0..=z1 {
                if prim.contains(grid.center(x, y, z)) {
                    let idx = grid.linear(x, y, z);
                    if part_of[idx].is_none() {
                        anchors.push((x, y, z));
                    }
                    part_of[idx] = Some(part);
                }
            }
        }
    }
}

fn paint(
    grid: &mut VoxelGrid,
    part_of: &[Option<u8>],
    n_parts: usize,
    setting: AppearanceSetting,
    rng: &mut ChaCha8Rng,
) {
    let colors: Vec<[f32; 3]> = match setting {
        AppearanceSetting::SingleColor => vec![random_color(rng)],
        AppearanceSetting::DefaultParts => (0..n_parts).map(|_| random_color(rng)).collect(),
        AppearanceSetting::Textured(_) => Vec::new(),
    };
    let tex = match setting {
        AppearanceSetting::Textured(split) => Some(sample_texture(rng, split)),
        _ => None,
    };
    let (nx, ny, nz) = grid.dims();
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let idx = grid.linear(x, y, z);
                let Some(part) = part_of[idx] else { continue };
                let c = match setting {
                    AppearanceSetting::SingleColor => colors[0],
                    AppearanceSetting::DefaultParts => colors[part as usize],
                    AppearanceSetting::Textured(_) => {
                        texture_color(tex.as_ref().unwrap(), x, y, z)
                    }
                };
                grid.set(x, y, z, [c[0], c[1], c[2], 1.0]);
            }
        }
    }
}

/// Whether the occupied voxels form a single 6-connected component.
pub fn occupied_connected(grid: &VoxelGrid) -> bool {
    let (nx, ny, nz) = grid.dims();
    let total = grid.occupied_count();
    if total == 0 {
        return false;
    }
    let start = (0..grid.len()).find(|&i| grid.occupied_at(i)).unwrap();
    let mut seen = vec![false; grid.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut reached = 0usize;
    while let Some(idx) = stack.pop() {
        reached += 1;
        let (x, y, z) = grid.unlinear(idx);
        let mut push = |x: i64, y: i64, z: i64| {
            if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                return;
            }
            let n = grid.linear(x as usize, y as usize, z as usize);
            if !seen[n] && grid.occupied_at(n) {
                seen[n] = true;
                stack.push(n);
            }
        };
        let (xi, yi, zi) = (x as i64, y as i64, z as i64);
        push(xi - 1, yi, zi);
        push(xi + 1, yi, zi);
        push(xi, yi - 1, zi);
        push(xi, yi + 1, zi);
        push(xi, yi, zi - 1);
        push(xi, yi, zi + 1);
    }
    reached == total
}

/// Textured objects must show both pattern colors prominently (each over
/// 10% of the occupied voxels); other settings pass as long as anything is
/// occupied.
fn colors_diverse(grid: &VoxelGrid, setting: AppearanceSetting) -> bool {
    if !matches!(setting, AppearanceSetting::Textured(_)) {
        return grid.occupied_count() > 0;
    }
    let mut counts: std::collections::HashMap<[u32; 3], usize> = std::collections::HashMap::new();
    let mut total = 0usize;
    for idx in 0..grid.len() {
        if !grid.occupied_at(idx) {
            continue;
        }
        let v = grid.at(idx);
        *counts.entry([v[0].to_bits(), v[1].to_bits(), v[2].to_bits()]).or_insert(0) += 1;
        total += 1;
    }
    if total == 0 {
        return false;
    }
    let mut freqs: Vec<usize> = counts.values().copied().collect();
    freqs.sort_unstable_by(|a, b| b.cmp(a));
    freqs.len() >= 2 && freqs[0] * 10 > total && freqs[1] * 10 > total
}
