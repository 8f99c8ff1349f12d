//! WebAssembly bindings for the static demo page in `www/`.
//!
//! The plain functions are what the page calls through the `#[wasm_bindgen]`
//! wrappers; they also run natively so the tests need no browser.

use afn_core::eval::{psnr_from_rmse, region_peak, rmse};
use afn_core::infer::plan_tiles;
use afn_core::raster::{make_lr_ilr, DemGrid};
use afn_core::synth::{gen_dem, hillshade, SynthConfig};
use wasm_bindgen::prelude::*;

fn terrain(seed: u64, size: usize) -> afn_core::Result<DemGrid> {
    gen_dem(&SynthConfig {
        seed,
        size,
        ..SynthConfig::default()
    })
}

/// Gray values in [0, 1] to opaque RGBA bytes.
fn to_rgba(gray: &[f64]) -> Vec<u8> {
    gray.iter()
        .flat_map(|&g| {
            let v = (g.clamp(0.0, 1.0) * 255.0).round() as u8;
            [v, v, v, 255]
        })
        .collect()
}

/// Hillshaded synthetic terrain as `size x size` RGBA.
pub fn terrain_rgba(seed: u64, size: usize) -> afn_core::Result<Vec<u8>> {
    let dem = terrain(seed, size)?;
    Ok(to_rgba(&hillshade(&dem, 315.0, 45.0)))
}

/// Terrain degraded to the 15 m grid and brought back by bicubic interpolation.
#[derive(Debug, Clone)]
pub struct Degraded {
    pub rmse_m: f64,
    pub psnr_db: f64,
    pub lr_dims: (usize, usize),
    pub rgba: Vec<u8>,
}

pub fn degrade(seed: u64, size: usize) -> afn_core::Result<Degraded> {
    let hr = terrain(seed, size)?;
    let (lr, ilr) = make_lr_ilr(&hr)?;
    let r = rmse(&ilr, &hr)?;
    Ok(Degraded {
        rmse_m: r,
        psnr_db: psnr_from_rmse(r, region_peak(&hr)?)?,
        lr_dims: lr.dims(),
        rgba: to_rgba(&hillshade(&ilr, 315.0, 45.0)),
    })
}

/// Blend weight of tile `tile` (row-major) at every pixel of a `rows x cols` region.
pub fn tile_weights(rows: usize, cols: usize, patch: usize, overlap: f64, tile: usize) -> afn_core::Result<Vec<f64>> {
    let plan = plan_tiles(rows, cols, patch, overlap)?;
    let nc = plan.col_anchors.len();
    let (ri, ci) = (tile / nc, tile % nc);
    let (r0, c0) = plan
        .anchors()
        .get(tile)
        .copied()
        .ok_or_else(|| afn_core::Error::InvalidArgument(format!("tile {tile} of {}", plan.len())))?;
    let mut out = vec![0.0; rows * cols];
    for y in 0..patch {
        for x in 0..patch {
            out[(r0 + y) * cols + c0 + x] = plan.weight(ri, ci, y, x);
        }
    }
    Ok(out)
}

fn js(e: afn_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = terrainRgba)]
pub fn terrain_rgba_js(seed: u32, size: usize) -> Result<Vec<u8>, JsError> {
    terrain_rgba(seed as u64, size).map_err(js)
}

#[wasm_bindgen]
pub struct Degradation {
    inner: Degraded,
}

#[wasm_bindgen]
impl Degradation {
    #[wasm_bindgen(getter)]
    pub fn rmse(&self) -> f64 {
        self.inner.rmse_m
    }

    #[wasm_bindgen(getter)]
    pub fn psnr(&self) -> f64 {
        self.inner.psnr_db
    }

    #[wasm_bindgen(getter, js_name = lrRows)]
    pub fn lr_rows(&self) -> usize {
        self.inner.lr_dims.0
    }

    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.inner.rgba.clone()
    }
}

#[wasm_bindgen(js_name = degrade)]
pub fn degrade_js(seed: u32, size: usize) -> Result<Degradation, JsError> {
    degrade(seed as u64, size).map(|inner| Degradation { inner }).map_err(js)
}

#[wasm_bindgen(js_name = tileCount)]
pub fn tile_count_js(rows: usize, cols: usize, patch: usize, overlap: f64) -> Result<usize, JsError> {
    plan_tiles(rows, cols, patch, overlap).map(|p| p.len()).map_err(js)
}

#[wasm_bindgen(js_name = tileWeightsRgba)]
pub fn tile_weights_rgba_js(rows: usize, cols: usize, patch: usize, overlap: f64, tile: usize) -> Result<Vec<u8>, JsError> {
    tile_weights(rows, cols, patch, overlap, tile).map(|w| to_rgba(&w)).map_err(js)
}
