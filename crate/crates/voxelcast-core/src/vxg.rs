//! The `VXG1` binary voxel grid format.
//!
//! Layout: magic `VXG1`, dims as three little-endian u32, voxel size and
//! origin as four little-endian f32, then row-major float32 voxel data.
//! Color grids carry four channels (RGBA where A is occupancy); masks carry
//! a single channel. The channel count is inferred from the payload size.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::grid::VoxelGrid;
use crate::math::Vec3;
use crate::CoreError;

const MAGIC: &[u8; 4] = b"VXG1";

pub fn save_grid(grid: &VoxelGrid, path: &Path) -> Result<(), CoreError> {
    let flat: Vec<f32> = grid.data().iter().flatten().copied().collect();
    write_payload(path, grid.dims(), grid.origin(), grid.voxel_size(), &flat)
}

pub fn load_grid(path: &Path) -> Result<VoxelGrid, CoreError> {
    let (dims, origin, voxel_size, channels, flat) = read_payload(path)?;
    if channels != 4 {
        return Err(CoreError::Format(format!(
            "{}: expected 4-channel grid, found {channels}",
            path.display()
        )));
    }
    let data = flat.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    VoxelGrid::from_parts(dims, origin, voxel_size, data)
}

/// Single-channel export used for visibility masks.
pub fn save_mask(dims: (usize, usize, usize), origin: Vec3, voxel_size: f64, values: &[f32], path: &Path) -> Result<(), CoreError> {
    if values.len() != dims.0 * dims.1 * dims.2 {
        return Err(CoreError::Format("mask length does not match dims".into()));
    }
    write_payload(path, dims, origin, voxel_size, values)
}

pub fn load_mask(path: &Path) -> Result<((usize, usize, usize), Vec3, f64, Vec<f32>), CoreError> {
    let (dims, origin, voxel_size, channels, flat) = read_payload(path)?;
    if channels != 1 {
        return Err(CoreError::Format(format!(
            "{}: expected 1-channel mask, found {channels}",
            path.display()
        )));
    }
    Ok((dims, origin, voxel_size, flat))
}

fn write_payload(path: &Path, dims: (usize, usize, usize), origin: Vec3, voxel_size: f64, flat: &[f32]) -> Result<(), CoreError> {
    let file = File::create(path).map_err(|e| CoreError::Io(format!("creating {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| CoreError::Io(format!("writing {}: {e}", path.display()));
    w.write_all(MAGIC).map_err(io)?;
    for d in [dims.0, dims.1, dims.2] {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    }
    for v in [voxel_size as f32, origin.x as f32, origin.y as f32, origin.z as f32] {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    for v in flat {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_payload(path: &Path) -> Result<((usize, usize, usize), Vec3, f64, usize, Vec<f32>), CoreError> {
    let file = File::open(path).map_err(|e| CoreError::Io(format!("opening {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| CoreError::Io(format!("reading {}: {e}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(CoreError::Format(format!("{}: bad grid magic", path.display())));
    }
    let mut word = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32, CoreError> {
        r.read_exact(&mut word).map_err(io)?;
        Ok(u32::from_le_bytes(word))
    };
    let dims = (
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
    );
    let mut word = [0u8; 4];
    let mut read_f32 = |r: &mut BufReader<File>| -> Result<f32, CoreError> {
        r.read_exact(&mut word).map_err(io)?;
        Ok(f32::from_le_bytes(word))
    };
    let voxel_size = read_f32(&mut r)? as f64;
    let origin = Vec3::new(read_f32(&mut r)? as f64, read_f32(&mut r)? as f64, read_f32(&mut r)? as f64);
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if rest.len() % 4 != 0 {
        return Err(CoreError::Format(format!("{}: truncated payload", path.display())));
    }
    let count = rest.len() / 4;
    let nvox = dims.0 * dims.1 * dims.2;
    if nvox == 0 || count % nvox != 0 {
        return Err(CoreError::Format(format!(
            "{}: payload of {count} floats does not tile {nvox} voxels",
            path.display()
        )));
    }
    let channels = count / nvox;
    let flat = rest
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((dims, origin, voxel_size, channels, flat))
}
