//! On-disk formats: annotation text files, 16-bit PNG scenes and raw
//! float32 grids.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ImageBuffer, Luma};

use crate::data::scene::{Point, Scene};
use crate::error::{Error, Result};
use crate::grid::Grid;

/// Parses `row col` integer pairs, one per line. Blank lines are skipped.
pub fn parse_annotations(text: &str) -> std::result::Result<Vec<Point>, String> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let parse = |f: Option<&str>| -> std::result::Result<usize, String> {
            f.ok_or_else(|| format!("line {}: expected `row col`", n + 1))?
                .parse::<usize>()
                .map_err(|e| format!("line {}: {e}", n + 1))
        };
        let row = parse(fields.next())?;
        let col = parse(fields.next())?;
        if fields.next().is_some() {
            return Err(format!("line {}: trailing fields", n + 1));
        }
        points.push(Point::new(row, col));
    }
    Ok(points)
}

pub fn format_annotations(points: &[Point]) -> String {
    let mut out = String::with_capacity(points.len() * 8);
    for p in points {
        out.push_str(&format!("{} {}\n", p.row, p.col));
    }
    out
}

pub fn read_annotations(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text).map_err(|m| Error::format(path, m))
}

pub fn write_annotations(path: &Path, points: &[Point]) -> Result<()> {
    fs::write(path, format_annotations(points)).map_err(|e| Error::io(path, e))
}

/// Writes intensities in `[0, 1]` as a 16-bit grayscale PNG.
pub fn write_png16(path: &Path, image: &Grid) -> Result<()> {
    let (h, w) = image.shape();
    let pixels: Vec<u16> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(w as u32, h as u32, pixels)
        .ok_or_else(|| Error::format(path, "pixel buffer size mismatch"))?;
    buf.save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_png(path: &Path) -> Result<Grid> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?;
    let luma = img.into_luma16();
    let (w, h) = luma.dimensions();
    let data = luma.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    Grid::from_vec(h as usize, w as usize, data)
}

/// Loads `<stem>.png` plus `<stem>.txt` if the annotation file exists.
pub fn read_scene(dir: &Path, id: &str, require_points: bool) -> Result<Scene> {
    let image = read_png(&dir.join(format!("{id}.png")))?;
    let ann = dir.join(format!("{id}.txt"));
    let points = if ann.exists() {
        read_annotations(&ann)?
    } else if require_points {
        return Err(Error::io(
            &ann,
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing annotation file"),
        ));
    } else {
        Vec::new()
    };
    Scene::new(id, image, points).map_err(|e| Error::format(&ann, e.to_string()))
}

pub fn write_scene(dir: &Path, scene: &Scene, with_points: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png16(&dir.join(format!("{}.png", scene.id())), scene.image())?;
    if with_points {
        write_annotations(&dir.join(format!("{}.txt", scene.id())), scene.points())?;
    }
    Ok(())
}

/// Raw grid layout: three little-endian `u32` (height, width, count) then
/// `height * width` little-endian `f32` values in row-major order. `count`
/// is the grid sum rounded to the nearest integer.
pub fn write_raw_grid(path: &Path, grid: &Grid) -> Result<()> {
    let (h, w) = grid.shape();
    let count = grid.sum().round().max(0.0) as u32;
    let mut bytes = Vec::with_capacity(12 + 4 * grid.len());
    for v in [h as u32, w as u32, count] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for &v in grid.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Returns the grid (widened to f64) and the header count.
pub fn read_raw_grid(path: &Path) -> Result<(Grid, u32)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 {
        return Err(Error::format(path, "truncated header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
    let (h, w, count) = (word(0) as usize, word(1) as usize, word(2));
    if bytes.len() != 12 + 4 * h * w {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {h}x{w}, found {}", 12 + 4 * h * w, bytes.len()),
        ));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((Grid::from_vec(h, w, data)?, count))
}
