//! File formats: PGM and PFM images, Wavefront OBJ lens meshes, source
//! tables, and solver trace CSVs.
//!
//! Orientation: pixel row v = 0 sits at the plane's minimum y. PGM stores
//! rows top to bottom, so rows are written in descending v; PFM with a
//! negative scale stores rows bottom to top, so rows go out in ascending v.
//! Viewers then show both formats with +y up.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fluxrender::{FluxImage, GrayImage};
use crate::geometry::{LensSurface, Rect};
use crate::solver::TraceRow;
use crate::sourcemodel::{Emitter, PointSourceSet};

/// Sample width for PGM output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn maxval(self) -> u32 {
        match self {
            BitDepth::Eight => 255,
            BitDepth::Sixteen => 65535,
        }
    }
}

/// Quantize a normalized gray value, rounding halves away from zero.
fn quantize(v: f64, maxval: u32) -> u32 {
    ((v * maxval as f64).round() as u32).min(maxval)
}

/// Write a binary PGM (P5). Sixteen-bit samples are big-endian per the
/// Netpbm convention.
pub fn write_pgm(path: &Path, img: &GrayImage, depth: BitDepth) -> Result<()> {
    let maxval = depth.maxval();
    let (w, h) = (img.res_w(), img.res_h());
    let mut bytes = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for v in (0..h).rev() {
        for u in 0..w {
            let q = quantize(img.at(u, v), maxval);
            if depth == BitDepth::Sixteen {
                bytes.push((q >> 8) as u8);
            }
            bytes.push((q & 0xff) as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Pull the next whitespace-separated header token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Parse("unexpected end of image header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_dim(token: &str, what: &str) -> Result<usize> {
    token
        .parse::<usize>()
        .map_err(|_| Error::Parse(format!("bad {what} '{token}' in image header")))
}

/// Read a binary PGM of either sample width into normalized gray values.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos)?;
    if magic != "P5" {
        return Err(Error::Parse(format!("expected P5 magic, found '{magic}'")));
    }
    let w = parse_dim(&next_token(&bytes, &mut pos)?, "width")?;
    let h = parse_dim(&next_token(&bytes, &mut pos)?, "height")?;
    let maxval = parse_dim(&next_token(&bytes, &mut pos)?, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse(format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace byte before the raster
    let wide = maxval > 255;
    let stride = if wide { 2 } else { 1 };
    let need = w * h * stride;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Parse(format!("raster truncated, need {need} bytes")))?;
    let mut data = vec![0.0; w * h];
    for file_row in 0..h {
        let v = h - 1 - file_row;
        for u in 0..w {
            let at = (file_row * w + u) * stride;
            let q = if wide {
                u32::from(raster[at]) << 8 | u32::from(raster[at + 1])
            } else {
                u32::from(raster[at])
            };
            data[v * w + u] = f64::from(q) / maxval as f64;
        }
    }
    GrayImage::from_data(w, h, data)
}

/// Write a grayscale PFM ("Pf", little-endian via scale -1.0).
pub fn write_pfm(path: &Path, img: &FluxImage) -> Result<()> {
    let (w, h) = (img.res_w(), img.res_h());
    let mut bytes = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for v in 0..h {
        for u in 0..w {
            bytes.extend_from_slice(&(img.at(u, v) as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a grayscale PFM written by [`write_pfm`] (big-endian scales are
/// accepted too).
pub fn read_pfm(path: &Path) -> Result<FluxImage> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let magic = next_token(&bytes, &mut pos)?;
    if magic != "Pf" {
        return Err(Error::Parse(format!("expected Pf magic, found '{magic}'")));
    }
    let w = parse_dim(&next_token(&bytes, &mut pos)?, "width")?;
    let h = parse_dim(&next_token(&bytes, &mut pos)?, "height")?;
    let scale_tok = next_token(&bytes, &mut pos)?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::Parse(format!("bad scale '{scale_tok}' in PFM header")))?;
    if scale == 0.0 {
        return Err(Error::Parse("PFM scale must be nonzero".into()));
    }
    pos += 1;
    let need = w * h * 4;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Parse(format!("raster truncated, need {need} bytes")))?;
    let mut data = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let at = (v * w + u) * 4;
            let quad: [u8; 4] = raster[at..at + 4].try_into().expect("slice length checked");
            let sample = if scale < 0.0 {
                f32::from_le_bytes(quad)
            } else {
                f32::from_be_bytes(quad)
            };
            data[v * w + u] = f64::from(sample) * scale.abs();
        }
    }
    FluxImage::from_data(w, h, data)
}

/// Export the back surface as ASCII OBJ, 9 significant digits, vertices in
/// grid order with 1-based canonical-diagonal faces.
pub fn write_lens_obj(path: &Path, lens: &LensSurface) -> Result<()> {
    let mut out = String::with_capacity(lens.vertex_count() * 48);
    for idx in 0..lens.vertex_count() {
        let p = lens.vertex(idx)?;
        out.push_str(&format!("v {:.8e} {:.8e} {:.8e}\n", p.x, p.y, p.z));
    }
    for tri in lens.triangles() {
        out.push_str(&format!("f {} {} {}\n", tri[0] + 1, tri[1] + 1, tri[2] + 1));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Import a back-surface OBJ. Only `v` records are used: the grid shape and
/// extent come from the vertex lattice, faces are regenerated with the
/// canonical diagonal, and the remaining scene constants come from the
/// caller's configuration.
pub fn read_lens_obj(path: &Path, front_z: f64, refractive_index: f64) -> Result<LensSurface> {
    let text = fs::read_to_string(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        if parts.next() != Some("v") {
            continue;
        }
        let mut coord = |what: &str| -> Result<f64> {
            parts
                .next()
                .ok_or_else(|| Error::Parse(format!("line {}: missing {what}", lineno + 1)))?
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("line {}: bad {what}", lineno + 1)))
        };
        xs.push(coord("x")?);
        ys.push(coord("y")?);
        zs.push(coord("z")?);
    }
    let n = xs.len();
    if n < 4 {
        return Err(Error::Parse(format!("{n} vertices cannot form a height-field grid")));
    }

    let span = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (min_x, max_x) = span(&xs);
    let (min_y, max_y) = span(&ys);
    let tol = 1e-6 * (max_x - min_x).max(max_y - min_y).max(1.0);

    // Row-major lattice: the first row shares y, rows repeat the same xs.
    let grid_w = ys.iter().take_while(|y| (*y - ys[0]).abs() <= tol).count();
    if grid_w < 2 || n % grid_w != 0 {
        return Err(Error::Parse(format!(
            "vertices do not form a lattice (leading row of {grid_w}, {n} total)"
        )));
    }
    let grid_h = n / grid_w;
    if grid_h < 2 {
        return Err(Error::Parse("lattice needs at least two rows".into()));
    }
    for j in 0..grid_h {
        let row_y = ys[j * grid_w];
        for i in 0..grid_w {
            let idx = j * grid_w + i;
            if (ys[idx] - row_y).abs() > tol || (xs[idx] - xs[i]).abs() > tol {
                return Err(Error::Parse(format!(
                    "vertex {idx} breaks the lattice at row {j}, column {i}"
                )));
            }
        }
    }

    let extent = Rect::new(min_x, min_y, max_x, max_y)?;
    // Placeholder thickness; the parsed z values replace the flat heights.
    LensSurface::flat(grid_w, grid_h, extent, front_z, 1.0, refractive_index)?
        .with_heights(&zs)
}

/// Write an emitter table: header `N B`, then one `x y q` row per emitter
/// at full precision.
pub fn write_source_table(path: &Path, set: &PointSourceSet) -> Result<()> {
    let mut out = format!("{} {:.17e}\n", set.emitters().len(), set.side());
    for e in set.emitters() {
        out.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", e.x, e.y, e.q));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read an emitter table written by [`write_source_table`].
pub fn read_source_table(path: &Path) -> Result<PointSourceSet> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or_else(|| Error::Parse("empty source table".into()))?;
    let mut head = header.split_whitespace();
    let n: usize = head
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Parse("source table header needs an emitter count".into()))?;
    let b: f64 = head
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Parse("source table header needs the square side".into()))?;
    let mut emitters = Vec::with_capacity(n);
    for line in lines {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad emitter value '{t}'")))
            })
            .collect::<Result<_>>()?;
        if vals.len() != 3 {
            return Err(Error::Parse(format!(
                "emitter rows need x y q, found {} values",
                vals.len()
            )));
        }
        emitters.push(Emitter { x: vals[0], y: vals[1], q: vals[2] });
    }
    if emitters.len() != n {
        return Err(Error::Parse(format!(
            "header promises {n} emitters, table holds {}",
            emitters.len()
        )));
    }
    PointSourceSet::new(emitters, b)
}

/// Write a solver trace as `iter,E,grad_norm,step` CSV.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut out = String::from("iter,E,grad_norm,step\n");
    for row in trace {
        out.push_str(&format!(
            "{},{:.17e},{:.17e},{:.17e}\n",
            row.iter, row.energy, row.grad_norm, row.step
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write a plain `key = value` sidecar describing how a file was produced.
pub fn write_sidecar(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let mut out = String::new();
    for (key, value) in entries {
        out.push_str(&format!("{key} = {value}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}
