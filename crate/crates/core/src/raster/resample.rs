//! Separable Catmull-Rom resampling with replicated borders.
//!
//! When shrinking, the kernel is stretched by the reduction ratio so every
//! source cell contributes (area-style antialiasing). Weights are normalized
//! per output sample, so constants are preserved exactly and linear ramps are
//! reproduced away from the borders.

use super::DemGrid;
use crate::error::{Error, Result};

const A: f64 = -0.5;

/// Cubic convolution kernel with a = -0.5.
pub fn catmull_rom(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Per-output-sample (first tap index, weights) along one axis.
struct AxisTaps {
    starts: Vec<isize>,
    weights: Vec<Vec<f64>>,
}

impl AxisTaps {
    fn new(n_in: usize, n_out: usize) -> Self {
        let ratio = n_in as f64 / n_out as f64;
        let support = ratio.max(1.0);
        let mut starts = Vec::with_capacity(n_out);
        let mut weights = Vec::with_capacity(n_out);
        for j in 0..n_out {
            let center = (j as f64 + 0.5) * ratio - 0.5;
            let lo = (center - 2.0 * support).floor() as isize + 1;
            let hi = (center + 2.0 * support).ceil() as isize - 1;
            let mut w: Vec<f64> = (lo..=hi).map(|i| catmull_rom((i as f64 - center) / support)).collect();
            let sum: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= sum);
            starts.push(lo);
            weights.push(w);
        }
        Self { starts, weights }
    }
}

/// Resamples a row-major plane to `out_rows x out_cols`.
pub(crate) fn resample_plane(src: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), rows * cols);
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let col_taps = AxisTaps::new(cols, out_cols);
    let mut horiz = vec![0.0; rows * out_cols];
    for r in 0..rows {
        let line = &src[r * cols..(r + 1) * cols];
        for (j, (start, w)) in col_taps.starts.iter().zip(&col_taps.weights).enumerate() {
            horiz[r * out_cols + j] = w
                .iter()
                .enumerate()
                .map(|(k, wk)| wk * line[clamp(start + k as isize, cols)])
                .sum();
        }
    }

    let row_taps = AxisTaps::new(rows, out_rows);
    let mut out = vec![0.0; out_rows * out_cols];
    for (i, (start, w)) in row_taps.starts.iter().zip(&row_taps.weights).enumerate() {
        let dst = &mut out[i * out_cols..(i + 1) * out_cols];
        for (k, wk) in w.iter().enumerate() {
            let r = clamp(start + k as isize, rows);
            let srow = &horiz[r * out_cols..(r + 1) * out_cols];
            for (d, s) in dst.iter_mut().zip(srow) {
                *d += wk * s;
            }
        }
    }
    out
}

/// Resamples to explicit output dims with the given output cell size.
pub fn resample_to(grid: &DemGrid, out_rows: usize, out_cols: usize, out_cell_size: f64) -> Result<DemGrid> {
    if out_rows == 0 || out_cols == 0 {
        return Err(Error::InvalidScale(format!("output dims {out_rows}x{out_cols}")));
    }
    if grid.has_nodata() {
        return Err(Error::InvalidArgument("cannot resample a raster containing nodata".into()));
    }
    let src: Vec<f64> = grid.heights().iter().map(|&h| h as f64).collect();
    let out = resample_plane(&src, grid.rows(), grid.cols(), out_rows, out_cols);
    DemGrid::with_nodata(
        out_rows,
        out_cols,
        out_cell_size,
        grid.nodata(),
        out.into_iter().map(|v| v as f32).collect(),
    )
}

/// Scales both dims by `scale` (rounded); output cell size is `cell_size / scale`.
pub fn bicubic_resample(grid: &DemGrid, scale: f64) -> Result<DemGrid> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidScale(format!("scale must be positive, got {scale}")));
    }
    let out_rows = (grid.rows() as f64 * scale).round() as usize;
    let out_cols = (grid.cols() as f64 * scale).round() as usize;
    if out_rows == 0 || out_cols == 0 {
        return Err(Error::InvalidScale(format!(
            "scale {scale} maps {}x{} to {out_rows}x{out_cols}",
            grid.rows(),
            grid.cols()
        )));
    }
    resample_to(grid, out_rows, out_cols, grid.cell_size() / scale)
}
