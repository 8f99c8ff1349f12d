use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{AerialPatch, DemGrid};
use crate::error::{Error, Result};

pub const DEMF_MAGIC: &[u8; 4] = b"DEMF";
pub const DEMF_VERSION: u32 = 1;
const DEMF_HEADER_LEN: usize = 32;

/// Loads a `.demf32` raster, or an ESRI ASCII grid for any other extension.
pub fn load_dem(path: impl AsRef<Path>) -> Result<DemGrid> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(DEMF_MAGIC) {
        decode_demf32(&bytes)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Format(format!("{} is neither .demf32 nor an ASCII grid", path.display())))?;
        parse_ascii_grid(&text)
    }
}

pub fn save_dem(grid: &DemGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_demf32(grid);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode_demf32(grid: &DemGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(DEMF_HEADER_LEN + 4 * grid.heights().len());
    out.extend_from_slice(DEMF_MAGIC);
    out.extend_from_slice(&DEMF_VERSION.to_le_bytes());
    out.extend_from_slice(&(grid.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.cols() as u32).to_le_bytes());
    out.extend_from_slice(&grid.cell_size().to_le_bytes());
    let nodata = grid.nodata().map_or(f64::NAN, f64::from);
    out.extend_from_slice(&nodata.to_le_bytes());
    for h in grid.heights() {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out
}

pub(crate) fn decode_demf32(bytes: &[u8]) -> Result<DemGrid> {
    if bytes.len() < DEMF_HEADER_LEN {
        return Err(Error::Format(format!("header truncated: {} bytes", bytes.len())));
    }
    if &bytes[0..4] != DEMF_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != DEMF_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rows = u32_at(8) as usize;
    let cols = u32_at(12) as usize;
    let cell = f64_at(16);
    let nodata = f64_at(24);
    let payload = &bytes[DEMF_HEADER_LEN..];
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("zero dimension {rows}x{cols}")));
    }
    if payload.len() != rows * cols * 4 {
        return Err(Error::Corrupt(format!(
            "header declares {rows}x{cols} ({} values) but payload holds {} bytes",
            rows * cols,
            payload.len()
        )));
    }
    let heights = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let nodata = (!nodata.is_nan()).then_some(nodata as f32);
    DemGrid::with_nodata(rows, cols, cell, nodata, heights)
}

pub(crate) fn parse_ascii_grid(text: &str) -> Result<DemGrid> {
    let mut ncols = None;
    let mut nrows = None;
    let mut cellsize = None;
    let mut nodata = None;
    let mut values: Vec<f32> = Vec::new();
    let mut in_header = true;

    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if in_header {
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            if key.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
                let value = parts
                    .next()
                    .ok_or_else(|| Error::Format(format!("header line without value: {line}")))?;
                let bad = || Error::Format(format!("bad header value: {line}"));
                match key.to_ascii_lowercase().as_str() {
                    "ncols" => ncols = Some(value.parse::<usize>().map_err(|_| bad())?),
                    "nrows" => nrows = Some(value.parse::<usize>().map_err(|_| bad())?),
                    "cellsize" => cellsize = Some(value.parse::<f64>().map_err(|_| bad())?),
                    "nodata_value" => nodata = Some(value.parse::<f32>().map_err(|_| bad())?),
                    "xllcorner" | "yllcorner" | "xllcenter" | "yllcenter" => {
                        value.parse::<f64>().map_err(|_| bad())?;
                    }
                    _ => return Err(Error::Format(format!("unknown header key {key}"))),
                }
                continue;
            }
            in_header = false;
        }
        for tok in line.split_whitespace() {
            let v = tok
                .parse::<f32>()
                .map_err(|_| Error::Format(format!("bad value {tok:?}")))?;
            values.push(v);
        }
    }

    let (Some(cols), Some(rows), Some(cell)) = (ncols, nrows, cellsize) else {
        return Err(Error::Format("ASCII grid needs ncols, nrows and cellsize".into()));
    };
    if values.len() != rows * cols {
        return Err(Error::Corrupt(format!(
            "header declares {rows}x{cols} but found {} values",
            values.len()
        )));
    }
    DemGrid::with_nodata(rows, cols, cell, nodata, values)
}

pub fn load_aerial_png(path: impl AsRef<Path>) -> Result<AerialPatch> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
    };
    let mut pixels = Vec::with_capacity(w * h);
    for r in 0..h {
        let line = &buf[r * info.line_size..r * info.line_size + w * channels];
        for px in line.chunks_exact(channels) {
            pixels.push(if channels < 3 {
                [px[0]; 3]
            } else {
                [px[0], px[1], px[2]]
            });
        }
    }
    AerialPatch::new(h, w, pixels)
}

pub fn save_aerial_png(img: &AerialPatch, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<u8> = img.pixels().iter().flatten().copied().collect();
    write_png(path.as_ref(), img.cols(), img.rows(), png::ColorType::Rgb, &data)
}

pub fn save_gray_png(width: usize, height: usize, data: &[u8], path: impl AsRef<Path>) -> Result<()> {
    write_png(path.as_ref(), width, height, png::ColorType::Grayscale, data)
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    {
        let mut enc = png::Encoder::new(&mut w, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer.write_image_data(data).map_err(|e| Error::Png(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
