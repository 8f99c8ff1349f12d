use super::{resample_to, AerialPatch, DemGrid};
use crate::error::{Error, Result};

/// Target resolution of the degraded input, meters per pixel.
pub const LR_CELL_SIZE: f64 = 15.0;

/// Fixed height scale applied after per-patch mean removal, meters.
pub const DEFAULT_NORM_SCALE: f64 = 100.0;

/// Channel statistics of the ImageNet-pretrained RGB feature branch.
pub const AERIAL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const AERIAL_STD: [f64; 3] = [0.229, 0.224, 0.225];

const MIN_HR_SIDE: usize = 8;

/// Degrades an HR DEM to 15 m/pixel and interpolates it back onto the HR grid.
pub fn make_lr_ilr(hr: &DemGrid) -> Result<(DemGrid, DemGrid)> {
    make_lr_ilr_at(hr, LR_CELL_SIZE)
}

pub(crate) fn make_lr_ilr_at(hr: &DemGrid, lr_cell_size: f64) -> Result<(DemGrid, DemGrid)> {
    if hr.rows() < MIN_HR_SIDE || hr.cols() < MIN_HR_SIDE {
        return Err(Error::TooSmall(format!(
            "HR raster {}x{} is below {MIN_HR_SIDE}x{MIN_HR_SIDE}",
            hr.rows(),
            hr.cols()
        )));
    }
    let scale = hr.cell_size() / lr_cell_size;
    let lr_rows = ((hr.rows() as f64 * scale).round() as usize).max(1);
    let lr_cols = ((hr.cols() as f64 * scale).round() as usize).max(1);
    let lr = resample_to(hr, lr_rows, lr_cols, lr_cell_size)?;
    let ilr = resample_to(&lr, hr.rows(), hr.cols(), hr.cell_size())?;
    Ok((lr, ilr))
}

/// A geo-registered training/evaluation triple.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTriple {
    pub hr: DemGrid,
    pub dem_ilr: DemGrid,
    pub aerial: AerialPatch,
    pub norm_offset: f64,
    pub norm_scale: f64,
    /// Top-left corner in the source region, HR pixels.
    pub origin: (usize, usize),
}

impl PatchTriple {
    /// Builds the triple from an HR patch and its aerial image; DEM_ILR is derived.
    pub fn from_hr(hr: DemGrid, aerial: AerialPatch, norm_scale: f64) -> Result<Self> {
        let (_, dem_ilr) = make_lr_ilr(&hr)?;
        Self::new(hr, dem_ilr, aerial, norm_scale)
    }

    pub fn new(hr: DemGrid, dem_ilr: DemGrid, aerial: AerialPatch, norm_scale: f64) -> Result<Self> {
        let norm_offset = dem_ilr
            .mean()
            .ok_or_else(|| Error::InvalidArgument("DEM_ILR has no valid cells".into()))?;
        let t = Self {
            hr,
            dem_ilr,
            aerial,
            norm_offset,
            norm_scale,
            origin: (0, 0),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hr.dims() != self.dem_ilr.dims() {
            return Err(Error::Shape(format!(
                "hr {:?} vs dem_ilr {:?}",
                self.hr.dims(),
                self.dem_ilr.dims()
            )));
        }
        if self.hr.cell_size() != self.dem_ilr.cell_size() {
            return Err(Error::Shape("hr and dem_ilr cell sizes differ".into()));
        }
        self.aerial.check_pairs_with(self.hr.rows(), self.hr.cols())?;
        if !(self.norm_scale > 0.0 && self.norm_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("norm_scale {}", self.norm_scale)));
        }
        if self.hr.has_nodata() || self.dem_ilr.has_nodata() {
            return Err(Error::InvalidArgument("training patches must be nodata-free".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.hr.rows()
    }

    pub fn cols(&self) -> usize {
        self.hr.cols()
    }

    /// Network-facing view: heights `(h - offset) / scale`, aerial standardized per channel.
    pub fn normalize(&self) -> NormalizedSample {
        let (off, scale) = (self.norm_offset, self.norm_scale);
        let norm = |g: &DemGrid| g.heights().iter().map(|&h| (h as f64 - off) / scale).collect();
        NormalizedSample {
            rows: self.rows(),
            cols: self.cols(),
            hr: norm(&self.hr),
            dem_ilr: norm(&self.dem_ilr),
            aerial: standardize_aerial(&self.aerial),
            norm_offset: off,
            norm_scale: scale,
        }
    }
}

/// Planar 3 x rows x cols standardized aerial channels.
pub(crate) fn standardize_aerial(img: &AerialPatch) -> Vec<f64> {
    let n = img.rows() * img.cols();
    let mut out = vec![0.0; 3 * n];
    for (i, px) in img.pixels().iter().enumerate() {
        for ch in 0..3 {
            out[ch * n + i] = (px[ch] as f64 / 255.0 - AERIAL_MEAN[ch]) / AERIAL_STD[ch];
        }
    }
    out
}

/// A patch in network units.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSample {
    pub rows: usize,
    pub cols: usize,
    pub hr: Vec<f64>,
    pub dem_ilr: Vec<f64>,
    /// 3 x (2 rows) x (2 cols), planar.
    pub aerial: Vec<f64>,
    pub norm_offset: f64,
    pub norm_scale: f64,
}

impl NormalizedSample {
    pub fn denormalize(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .map(|&v| v * self.norm_scale + self.norm_offset)
            .collect()
    }

    /// Crops a window (HR pixel coordinates); the aerial crop is taken at doubled coordinates.
    pub fn crop(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Self> {
        if row0 + rows > self.rows || col0 + cols > self.cols || rows == 0 || cols == 0 {
            return Err(Error::Shape(format!(
                "crop {rows}x{cols}@({row0},{col0}) outside {}x{}",
                self.rows, self.cols
            )));
        }
        let take = |src: &[f64], src_cols: usize, r0: usize, c0: usize, nr: usize, nc: usize| {
            let mut v = Vec::with_capacity(nr * nc);
            for r in r0..r0 + nr {
                v.extend_from_slice(&src[r * src_cols + c0..r * src_cols + c0 + nc]);
            }
            v
        };
        let plane = 4 * self.rows * self.cols;
        let mut aerial = Vec::with_capacity(12 * rows * cols);
        for ch in 0..3 {
            aerial.extend(take(
                &self.aerial[ch * plane..(ch + 1) * plane],
                2 * self.cols,
                2 * row0,
                2 * col0,
                2 * rows,
                2 * cols,
            ));
        }
        Ok(Self {
            rows,
            cols,
            hr: take(&self.hr, self.cols, row0, col0, rows, cols),
            dem_ilr: take(&self.dem_ilr, self.cols, row0, col0, rows, cols),
            aerial,
            norm_offset: self.norm_offset,
            norm_scale: self.norm_scale,
        })
    }
}

/// Row-major tile origins along one axis: regular stride, final tile flush with the border.
pub fn tile_anchors(dim: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || stride > size {
        return Err(Error::InvalidArgument(format!(
            "stride must lie in 1..={size} for gap-free coverage, got {stride}"
        )));
    }
    if size == 0 || dim < size {
        return Err(Error::TooSmall(format!("extent {dim} is smaller than tile size {size}")));
    }
    let mut anchors = vec![0];
    let mut a = 0;
    while a + size < dim {
        a = (a + stride).min(dim - size);
        anchors.push(a);
    }
    Ok(anchors)
}

/// Tiles an HR region and its 2x aerial image into triples. Patches touching nodata are skipped.
pub fn extract_patches(
    region: &DemGrid,
    aerial: &AerialPatch,
    size: usize,
    stride: usize,
    norm_scale: f64,
) -> Result<Vec<PatchTriple>> {
    aerial.check_pairs_with(region.rows(), region.cols())?;
    let rows = tile_anchors(region.rows(), size, stride)?;
    let cols = tile_anchors(region.cols(), size, stride)?;
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            let hr = region.crop(r, c, size, size)?;
            if hr.has_nodata() {
                continue;
            }
            let img = aerial.crop(2 * r, 2 * c, 2 * size, 2 * size)?;
            let mut t = PatchTriple::from_hr(hr, img, norm_scale)?;
            t.origin = (r, c);
            out.push(t);
        }
    }
    Ok(out)
}
