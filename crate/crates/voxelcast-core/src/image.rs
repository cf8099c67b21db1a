//! Dense RGB rasters in `[0,1]` plus PNG and raw-float file IO.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::CoreError;

/// Magic for the raw float32 raster format: header `IMGF`, then width,
/// height and channel count as little-endian u32, then f32 samples in
/// row-major, channel-interleaved order.
const RAW_MAGIC: &[u8; 4] = b"IMGF";

/// RGB image with pixels in `[0,1]`. Row-major, `(x, y)` with y = row.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<[f32; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image { width, height, data: vec![[0.0; 3]; width * height] }
    }

    pub fn filled(width: usize, height: usize, color: [f32; 3]) -> Image {
        Image { width, height, data: vec![color; width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, data: Vec<[f32; 3]>) -> Result<Image, CoreError> {
        if data.len() != width * height {
            return Err(CoreError::InvalidImage(format!(
                "pixel count {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        self.data[y * self.width + x] = c;
    }

    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    /// Mean absolute difference over all pixels and channels.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.dims(), other.dims());
        let mut acc = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            for c in 0..3 {
                acc += (a[c] as f64 - b[c] as f64).abs();
            }
        }
        acc / (self.data.len() * 3) as f64
    }

    /// 8-bit PNG. Channels are clamped to `[0,1]` and quantized.
    pub fn save_png(&self, path: &Path) -> Result<(), CoreError> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.get(x, y);
                buf.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])]),
                );
            }
        }
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| CoreError::Io(format!("writing {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Image, CoreError> {
        let img = image::open(path)
            .map_err(|e| CoreError::Io(format!("reading {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                out.set(x, y, [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]);
            }
        }
        Ok(out)
    }

    /// Load either a PNG or a raw float raster, keyed by extension.
    pub fn load(path: &Path) -> Result<Image, CoreError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("png") => Image::load_png(path),
            _ => Image::load_raw(path),
        }
    }

    pub fn save_raw(&self, path: &Path) -> Result<(), CoreError> {
        let flat: Vec<f32> = self.data.iter().flatten().copied().collect();
        write_raw_raster(path, self.width, self.height, 3, &flat)
    }

    pub fn load_raw(path: &Path) -> Result<Image, CoreError> {
        let (w, h, channels, flat) = read_raw_raster(path)?;
        if channels != 3 {
            return Err(CoreError::InvalidImage(format!(
                "{}: expected 3 channels, found {channels}",
                path.display()
            )));
        }
        let data = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Image::from_pixels(w, h, data)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write a raw float raster with an arbitrary channel count (1 for depth
/// sidecars, 3 for color).
pub fn write_raw_raster(path: &Path, width: usize, height: usize, channels: usize, data: &[f32]) -> Result<(), CoreError> {
    if data.len() != width * height * channels {
        return Err(CoreError::InvalidImage("raster data length mismatch".into()));
    }
    let file = File::create(path).map_err(|e| CoreError::Io(format!("creating {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| CoreError::Io(format!("writing {}: {e}", path.display()));
    w.write_all(RAW_MAGIC).map_err(io)?;
    w.write_all(&(width as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(height as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(channels as u32).to_le_bytes()).map_err(io)?;
    for v in data {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_raw_raster(path: &Path) -> Result<(usize, usize, usize, Vec<f32>), CoreError> {
    let file = File::open(path).map_err(|e| CoreError::Io(format!("opening {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| CoreError::Io(format!("reading {}: {e}", path.display()));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != RAW_MAGIC {
        return Err(CoreError::InvalidImage(format!("{}: bad raster magic", path.display())));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(io)?;
    let width = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(io)?;
    let height = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(io)?;
    let channels = u32::from_le_bytes(word) as usize;
    let mut data = vec![0f32; width * height * channels];
    for v in data.iter_mut() {
        r.read_exact(&mut word).map_err(io)?;
        *v = f32::from_le_bytes(word);
    }
    Ok((width, height, channels, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.raw");
        let mut img = Image::new(5, 3);
        img.set(4, 2, [0.25, 0.5, 0.75]);
        img.save_raw(&path).unwrap();
        let back = Image::load_raw(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn png_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut img = Image::new(4, 4);
        img.set(1, 1, [1.0, 0.0, 0.5]);
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.dims(), (4, 4));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
    }
}
