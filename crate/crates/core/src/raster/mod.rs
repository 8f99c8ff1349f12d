//! Elevation and aerial rasters: containers, file formats, resampling and patching.

mod format;
mod patch;
mod resample;

pub use format::{load_aerial_png, load_dem, save_aerial_png, save_dem, save_gray_png, DEMF_MAGIC, DEMF_VERSION};
pub use patch::{
    extract_patches, make_lr_ilr, tile_anchors, NormalizedSample, PatchTriple, AERIAL_MEAN, AERIAL_STD,
    DEFAULT_NORM_SCALE, LR_CELL_SIZE,
};
pub use resample::{bicubic_resample, catmull_rom, resample_to};
pub(crate) use resample::resample_plane;

use crate::error::{Error, Result};

/// A single-band elevation raster in meters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DemGrid {
    rows: usize,
    cols: usize,
    cell_size: f64,
    nodata: Option<f32>,
    heights: Vec<f32>,
}

impl DemGrid {
    pub fn new(rows: usize, cols: usize, cell_size: f64, heights: Vec<f32>) -> Result<Self> {
        Self::with_nodata(rows, cols, cell_size, None, heights)
    }

    pub fn with_nodata(
        rows: usize,
        cols: usize,
        cell_size: f64,
        nodata: Option<f32>,
        heights: Vec<f32>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("raster must be non-empty, got {rows}x{cols}")));
        }
        if heights.len() != rows * cols {
            return Err(Error::Corrupt(format!(
                "expected {} heights for {rows}x{cols}, got {}",
                rows * cols,
                heights.len()
            )));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::InvalidArgument(format!("cell size must be positive, got {cell_size}")));
        }
        if let Some(nd) = nodata {
            if nd.is_nan() {
                return Err(Error::InvalidArgument("nodata value must not be NaN".into()));
            }
        }
        if let Some(bad) = heights.iter().position(|&h| !h.is_finite() && Some(h) != nodata) {
            return Err(Error::Numeric(format!("non-finite height at index {bad}")));
        }
        Ok(Self {
            rows,
            cols,
            cell_size,
            nodata,
            heights,
        })
    }

    pub fn filled(rows: usize, cols: usize, cell_size: f64, value: f32) -> Result<Self> {
        Self::new(rows, cols, cell_size, vec![value; rows * cols])
    }

    pub fn from_fn(rows: usize, cols: usize, cell_size: f64, f: impl Fn(usize, usize) -> f32) -> Result<Self> {
        let mut heights = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                heights.push(f(r, c));
            }
        }
        Self::new(rows, cols, cell_size, heights)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn nodata(&self) -> Option<f32> {
        self.nodata
    }

    pub fn heights(&self) -> &[f32] {
        &self.heights
    }

    pub fn into_heights(self) -> Vec<f32> {
        self.heights
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.heights[r * self.cols + c]
    }

    pub fn is_nodata(&self, v: f32) -> bool {
        self.nodata == Some(v)
    }

    pub fn has_nodata(&self) -> bool {
        self.nodata.is_some_and(|nd| self.heights.contains(&nd))
    }

    /// Mean over valid cells, `None` when every cell is nodata.
    pub fn mean(&self) -> Option<f64> {
        let (sum, n) = self
            .heights
            .iter()
            .filter(|&&h| !self.is_nodata(h))
            .fold((0.0f64, 0usize), |(s, n), &h| (s + h as f64, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    /// (min, max) over valid cells.
    pub fn range(&self) -> Option<(f32, f32)> {
        self.heights
            .iter()
            .filter(|&&h| !self.is_nodata(h))
            .fold(None, |acc, &h| match acc {
                None => Some((h, h)),
                Some((lo, hi)) => Some((lo.min(h), hi.max(h))),
            })
    }

    pub fn crop(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self> {
        if row0 + rows > self.rows || col0 + cols > self.cols || rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "crop {rows}x{cols}@({row0},{col0}) outside {}x{}",
                self.rows, self.cols
            )));
        }
        let mut heights = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            let start = r * self.cols + col0;
            heights.extend_from_slice(&self.heights[start..start + cols]);
        }
        Ok(Self {
            rows,
            cols,
            cell_size: self.cell_size,
            nodata: self.nodata,
            heights,
        })
    }

    /// Same shape and metadata, new values.
    pub fn with_heights(&self, heights: Vec<f32>) -> Result<Self> {
        Self::with_nodata(self.rows, self.cols, self.cell_size, self.nodata, heights)
    }
}

/// An 8-bit RGB image, interleaved row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AerialPatch {
    rows: usize,
    cols: usize,
    pixels: Vec<[u8; 3]>,
}

impl AerialPatch {
    pub fn new(rows: usize, cols: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != rows * cols {
            return Err(Error::Shape(format!(
                "aerial {rows}x{cols} needs {} pixels, got {}",
                rows * cols,
                pixels.len()
            )));
        }
        Ok(Self { rows, cols, pixels })
    }

    pub fn uniform(rows: usize, cols: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(rows, cols, vec![rgb; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> [u8; 3] {
        self.pixels[r * self.cols + c]
    }

    pub fn crop(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self> {
        if row0 + rows > self.rows || col0 + cols > self.cols {
            return Err(Error::Shape(format!(
                "aerial crop {rows}x{cols}@({row0},{col0}) outside {}x{}",
                self.rows, self.cols
            )));
        }
        let mut pixels = Vec::with_capacity(rows * cols);
        for r in row0..row0 + rows {
            let start = r * self.cols + col0;
            pixels.extend_from_slice(&self.pixels[start..start + cols]);
        }
        Self::new(rows, cols, pixels)
    }

    /// Checks the 2x geo-registration with a DEM of the given dims.
    pub fn check_pairs_with(&self, dem_rows: usize, dem_cols: usize) -> Result<()> {
        if self.rows != 2 * dem_rows || self.cols != 2 * dem_cols {
            return Err(Error::Shape(format!(
                "aerial {}x{} is not twice the DEM {dem_rows}x{dem_cols}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn mean_intensity(&self) -> f64 {
        let total: f64 = self
            .pixels
            .iter()
            .map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / 3.0)
            .sum();
        total / self.pixels.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_payload_mismatch() {
        assert!(matches!(DemGrid::new(4, 4, 2.0, vec![0.0; 12]), Err(Error::Corrupt(_))));
    }

    #[test]
    fn rejects_bad_cell_size_and_nan() {
        assert!(DemGrid::new(1, 1, 0.0, vec![0.0]).is_err());
        assert!(DemGrid::new(1, 2, 1.0, vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn nodata_is_excluded_from_stats() {
        let g = DemGrid::with_nodata(1, 3, 1.0, Some(-9999.0), vec![1.0, -9999.0, 3.0]).unwrap();
        assert_eq!(g.mean(), Some(2.0));
        assert_eq!(g.range(), Some((1.0, 3.0)));
        assert!(g.has_nodata());
    }

    #[test]
    fn crop_picks_window() {
        let g = DemGrid::from_fn(4, 5, 1.0, |r, c| (r * 10 + c) as f32).unwrap();
        let w = g.crop(1, 2, 2, 3).unwrap();
        assert_eq!(w.heights(), &[12.0, 13.0, 14.0, 22.0, 23.0, 24.0]);
        assert!(g.crop(3, 0, 2, 1).is_err());
    }
}
