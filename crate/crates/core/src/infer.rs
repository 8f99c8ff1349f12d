//! Whole-region prediction from overlapping tiles.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Afn;
use crate::raster::{save_gray_png, tile_anchors, AerialPatch, DemGrid, PatchTriple};
use crate::synth::hillshade;
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub patch_size: usize,
    pub overlap: f64,
    pub norm_scale: f64,
    /// Also write a hillshade PNG next to the output raster.
    pub hillshade: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            patch_size: 200,
            overlap: 0.25,
            norm_scale: crate::raster::DEFAULT_NORM_SCALE,
            hillshade: false,
        }
    }
}

/// Tile origins plus separable blend weights that sum to one at every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct TilePlan {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub overlap_fraction: f64,
    pub stride: usize,
    pub row_anchors: Vec<usize>,
    pub col_anchors: Vec<usize>,
    /// Normalized weight profile of each row anchor over its `patch_size` rows.
    row_weights: Vec<Vec<f64>>,
    col_weights: Vec<Vec<f64>>,
}

pub fn plan_tiles(rows: usize, cols: usize, patch_size: usize, overlap_fraction: f64) -> Result<TilePlan> {
    if !(0.0..0.5).contains(&overlap_fraction) {
        return Err(Error::InvalidArgument(format!(
            "overlap must lie in [0, 0.5), got {overlap_fraction}"
        )));
    }
    if patch_size < 8 {
        return Err(Error::InvalidArgument(format!("patch size {patch_size} is below 8")));
    }
    let stride = ((patch_size as f64 * (1.0 - overlap_fraction)).round() as usize).clamp(1, patch_size);
    let row_anchors = tile_anchors(rows, patch_size, stride)?;
    let col_anchors = tile_anchors(cols, patch_size, stride)?;
    Ok(TilePlan {
        rows,
        cols,
        patch_size,
        overlap_fraction,
        stride,
        row_weights: axis_weights(rows, patch_size, &row_anchors),
        col_weights: axis_weights(cols, patch_size, &col_anchors),
        row_anchors,
        col_anchors,
    })
}

/// Linear ramps across each shared margin, then division by the per-pixel total.
fn axis_weights(dim: usize, size: usize, anchors: &[usize]) -> Vec<Vec<f64>> {
    let raw: Vec<Vec<f64>> = anchors
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            let lead = (k > 0).then(|| anchors[k - 1] + size - a);
            let trail = anchors.get(k + 1).map(|&b| a + size - b);
            (0..size)
                .map(|i| {
                    let mut w: f64 = 1.0;
                    if let Some(l) = lead.filter(|&l| l > 0 && i < l) {
                        w = w.min((i as f64 + 0.5) / l as f64);
                    }
                    if let Some(t) = trail.filter(|&t| t > 0 && i >= size - t) {
                        w = w.min(((size - i) as f64 - 0.5) / t as f64);
                    }
                    w
                })
                .collect()
        })
        .collect();
    let mut total = vec![0.0; dim];
    for (w, &a) in raw.iter().zip(anchors) {
        for (i, v) in w.iter().enumerate() {
            total[a + i] += v;
        }
    }
    raw.into_iter()
        .zip(anchors)
        .map(|(w, &a)| w.iter().enumerate().map(|(i, v)| v / total[a + i]).collect())
        .collect()
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.row_anchors.len() * self.col_anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tile origins, row-major.
    pub fn anchors(&self) -> Vec<(usize, usize)> {
        self.row_anchors
            .iter()
            .flat_map(|&r| self.col_anchors.iter().map(move |&c| (r, c)))
            .collect()
    }

    /// Blend weight of tile `(ri, ci)` at tile-local pixel `(y, x)`.
    pub fn weight(&self, ri: usize, ci: usize, y: usize, x: usize) -> f64 {
        self.row_weights[ri][y] * self.col_weights[ci][x]
    }

    /// Per-pixel sum of weights over all covering tiles; one everywhere up to rounding.
    pub fn weight_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.rows * self.cols];
        let p = self.patch_size;
        for (ri, &r0) in self.row_anchors.iter().enumerate() {
            for (ci, &c0) in self.col_anchors.iter().enumerate() {
                for y in 0..p {
                    for x in 0..p {
                        sums[(r0 + y) * self.cols + c0 + x] += self.weight(ri, ci, y, x);
                    }
                }
            }
        }
        sums
    }
}

/// Blends per-tile residual predictions onto `base`; `tile` returns meters for each tile.
pub fn blend_tiles(
    base: &DemGrid,
    plan: &TilePlan,
    mut tile: impl FnMut(usize, usize) -> Result<Vec<f64>>,
) -> Result<DemGrid> {
    if base.dims() != (plan.rows, plan.cols) {
        return Err(Error::Shape(format!(
            "plan covers {}x{}, raster is {}x{}",
            plan.rows,
            plan.cols,
            base.rows(),
            base.cols()
        )));
    }
    let p = plan.patch_size;
    let mut acc = vec![0.0f64; plan.rows * plan.cols];
    for (ri, &r0) in plan.row_anchors.iter().enumerate() {
        for (ci, &c0) in plan.col_anchors.iter().enumerate() {
            let res = tile(r0, c0)?;
            if res.len() != p * p {
                return Err(Error::Shape(format!("tile returned {} values, expected {}", res.len(), p * p)));
            }
            for y in 0..p {
                for x in 0..p {
                    acc[(r0 + y) * plan.cols + c0 + x] += plan.weight(ri, ci, y, x) * res[y * p + x];
                }
            }
        }
    }
    let heights = base
        .heights()
        .iter()
        .zip(&acc)
        .map(|(&b, &r)| (b as f64 + r) as f32)
        .collect();
    base.with_heights(heights)
}

/// Super-resolves a DEM_ILR region tile by tile and stitches the result.
pub fn predict_region(
    model: &Afn<f32>,
    dem_ilr: &DemGrid,
    aerial: &AerialPatch,
    plan: &TilePlan,
    norm_scale: f64,
) -> Result<DemGrid> {
    aerial.check_pairs_with(dem_ilr.rows(), dem_ilr.cols())?;
    if dem_ilr.has_nodata() {
        return Err(Error::InvalidArgument("DEM_ILR region contains nodata cells".into()));
    }
    if dem_ilr.rows() < plan.patch_size || dem_ilr.cols() < plan.patch_size {
        return Err(Error::TooSmall(format!(
            "region {}x{} is smaller than one {} patch",
            dem_ilr.rows(),
            dem_ilr.cols(),
            plan.patch_size
        )));
    }
    let p = plan.patch_size;
    blend_tiles(dem_ilr, plan, |r0, c0| {
        let ilr = dem_ilr.crop(r0, c0, p, p)?;
        let rgb = aerial.crop(2 * r0, 2 * c0, 2 * p, 2 * p)?;
        // the tile's own DEM_ILR doubles as HR here; only the inputs are used
        let sample = PatchTriple::new(ilr.clone(), ilr, rgb, norm_scale)?.normalize();
        let (d, a) = crate::model::sample_inputs::<f32>(&sample);
        let res: FeatureMap<f32> = model.predict_residual(&d, &a)?;
        Ok(res.data().iter().map(|&v| v as f64 * norm_scale).collect())
    })
}

/// 8-bit hillshade render for quick visual checks.
pub fn render_hillshade(dem: &DemGrid, path: impl AsRef<Path>) -> Result<()> {
    let shade = hillshade(dem, 315.0, 45.0);
    let bytes: Vec<u8> = shade.iter().map(|&s| (s.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    save_gray_png(dem.cols(), dem.rows(), &bytes, path)
}
