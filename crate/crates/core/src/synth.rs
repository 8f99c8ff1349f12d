//! Procedural terrain and pseudo-aerial imagery for desk-scale experiments.
//!
//! Heights are multi-octave value noise with Catmull-Rom interpolation between
//! lattice points. The aerial image is a Lambertian hillshade of the HR terrain
//! pushed through a fixed terrain colormap at twice the DEM resolution, so it
//! carries sub-LR-pixel shading detail correlated with the true surface.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::raster::{self, catmull_rom, AerialPatch, DemGrid, PatchTriple};

/// Lattice cells across the patch at octave 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: usize,
    pub octaves: u32,
    pub base_amplitude: f64,
    pub persistence: f64,
    pub sun_azimuth: f64,
    pub sun_altitude: f64,
    pub cell_size: f64,
    pub base_elevation: f64,
    /// Lattice spacing of the coarsest octave, in meters.
    pub feature_size: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size: 200,
            octaves: 6,
            base_amplitude: 120.0,
            persistence: 0.5,
            sun_azimuth: 315.0,
            sun_altitude: 45.0,
            cell_size: 2.0,
            base_elevation: 1500.0,
            feature_size: 200.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::InvalidArgument(format!("size must be >= 16, got {}", self.size)));
        }
        if self.octaves < 1 {
            return Err(Error::InvalidArgument("octaves must be >= 1".into()));
        }
        if !(self.persistence > 0.0 && self.persistence < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "persistence must lie in (0, 1), got {}",
                self.persistence
            )));
        }
        if !(self.sun_altitude > 0.0 && self.sun_altitude <= 90.0) {
            return Err(Error::InvalidArgument(format!(
                "sun altitude must lie in (0, 90], got {}",
                self.sun_altitude
            )));
        }
        if !(self.cell_size > 0.0) {
            return Err(Error::InvalidArgument("cell size must be positive".into()));
        }
        if !(self.feature_size > 0.0) {
            return Err(Error::InvalidArgument("feature size must be positive".into()));
        }
        Ok(())
    }

    /// Config for the `index`-th patch of a dataset.
    pub fn for_patch(&self, index: u64) -> Self {
        Self {
            seed: mix(self.seed ^ mix(index.wrapping_add(0x5eed))),
            ..self.clone()
        }
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, octave: u32, ix: i64, iy: i64) -> f64 {
    let h = mix(seed ^ mix((octave as u64) << 48 ^ mix(ix as u64 ^ mix(iy as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn value_noise(seed: u64, octave: u32, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (ix, iy) = (x0 as i64, y0 as i64);
    let wx: [f64; 4] = std::array::from_fn(|k| catmull_rom(fx - (k as f64 - 1.0)));
    let wy: [f64; 4] = std::array::from_fn(|k| catmull_rom(fy - (k as f64 - 1.0)));
    let mut acc = 0.0;
    for (j, wyj) in wy.iter().enumerate() {
        let mut row = 0.0;
        for (i, wxi) in wx.iter().enumerate() {
            row += wxi * lattice(seed, octave, ix + i as i64 - 1, iy + j as i64 - 1);
        }
        acc += wyj * row;
    }
    acc
}

/// Multi-octave value-noise heightfield; a pure function of `cfg`.
pub fn gen_dem(cfg: &SynthConfig) -> Result<DemGrid> {
    cfg.validate()?;
    let n = cfg.size;
    let mut heights = vec![0.0f64; n * n];
    for o in 0..cfg.octaves {
        let amp = cfg.base_amplitude * cfg.persistence.powi(o as i32);
        // lattice cells per pixel; octaves are fixed in meters so crops and patches agree
        let freq = cfg.cell_size / cfg.feature_size * f64::from(1u32 << o.min(30));
        for r in 0..n {
            for c in 0..n {
                let x = c as f64 * freq;
                let y = r as f64 * freq;
                heights[r * n + c] += amp * value_noise(cfg.seed, o, x, y);
            }
        }
    }
    DemGrid::new(
        n,
        n,
        cfg.cell_size,
        heights.into_iter().map(|h| (cfg.base_elevation + h) as f32).collect(),
    )
}

/// Lambertian shade in [0, 1] at DEM resolution.
pub fn hillshade(dem: &DemGrid, sun_azimuth_deg: f64, sun_altitude_deg: f64) -> Vec<f64> {
    let (rows, cols) = dem.dims();
    let (az, alt) = (sun_azimuth_deg.to_radians(), sun_altitude_deg.to_radians());
    let sun = [az.sin() * alt.cos(), az.cos() * alt.cos(), alt.sin()];
    let cell = dem.cell_size();
    let h = |r: usize, c: usize| dem.get(r, c) as f64;
    let mut shade = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (r0, r1) = (r.saturating_sub(1), (r + 1).min(rows - 1));
        for c in 0..cols {
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(cols - 1));
            let dzdx = if c1 > c0 { (h(r, c1) - h(r, c0)) / ((c1 - c0) as f64 * cell) } else { 0.0 };
            // rows run southward, so north is -row
            let dzdy = if r1 > r0 { -(h(r1, c) - h(r0, c)) / ((r1 - r0) as f64 * cell) } else { 0.0 };
            let norm = (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
            let lit = (-dzdx * sun[0] - dzdy * sun[1] + sun[2]) / norm;
            shade.push(lit.max(0.0));
        }
    }
    shade
}

const COLORMAP: [(f64, [f64; 3]); 5] = [
    (0.0, [28.0, 38.0, 34.0]),
    (0.35, [68.0, 94.0, 58.0]),
    (0.6, [139.0, 128.0, 92.0]),
    (0.85, [201.0, 190.0, 168.0]),
    (1.0, [250.0, 249.0, 244.0]),
];

fn colormap(s: f64) -> [u8; 3] {
    let s = s.clamp(0.0, 1.0);
    let k = COLORMAP.iter().position(|(t, _)| *t >= s).unwrap_or(COLORMAP.len() - 1).max(1);
    let ((t0, c0), (t1, c1)) = (COLORMAP[k - 1], COLORMAP[k]);
    let f = (s - t0) / (t1 - t0);
    std::array::from_fn(|ch| (c0[ch] + f * (c1[ch] - c0[ch])).round() as u8)
}

/// Pseudo-aerial image at twice the DEM resolution.
pub fn gen_aerial(dem: &DemGrid, cfg: &SynthConfig) -> Result<AerialPatch> {
    let (rows, cols) = dem.dims();
    let shade = hillshade(dem, cfg.sun_azimuth, cfg.sun_altitude);
    let up = raster::resample_plane(&shade, rows, cols, 2 * rows, 2 * cols);
    AerialPatch::new(2 * rows, 2 * cols, up.into_iter().map(colormap).collect())
}

/// HR patch, its aerial image and derived DEM_ILR for dataset index `index`.
pub fn gen_triple(cfg: &SynthConfig, index: u64, norm_scale: f64) -> Result<PatchTriple> {
    let pc = cfg.for_patch(index);
    let hr = gen_dem(&pc)?;
    let aerial = gen_aerial(&hr, &pc)?;
    PatchTriple::from_hr(hr, aerial, norm_scale)
}

/// Split sizes for `n` patches: 20% val, 20% test (at least one each), rest train.
pub fn split_counts(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 patches, got {n}")));
    }
    let held = (n / 5).max(1);
    Ok((n - 2 * held, held, held))
}

/// Writes `n` triples plus `manifest.json` under `out_dir`.
pub fn gen_dataset(n: usize, cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let (n_train, n_val, _) = split_counts(n)?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut split_of = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        split_of[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut entries = Vec::with_capacity(n);
    for (i, split) in split_of.into_iter().enumerate() {
        let id = format!("patch_{i:05}");
        let pc = cfg.for_patch(i as u64);
        let hr = gen_dem(&pc)?;
        let aerial = gen_aerial(&hr, &pc)?;
        let (lr, ilr) = raster::make_lr_ilr(&hr)?;
        let entry = ManifestEntry {
            hr: format!("{id}_hr.demf32"),
            lr: format!("{id}_lr.demf32"),
            dem_ilr: format!("{id}_ilr.demf32"),
            aerial: format!("{id}_aerial.png"),
            id,
            split,
        };
        raster::save_dem(&hr, out_dir.join(&entry.hr))?;
        raster::save_dem(&lr, out_dir.join(&entry.lr))?;
        raster::save_dem(&ilr, out_dir.join(&entry.dem_ilr))?;
        raster::save_aerial_png(&aerial, out_dir.join(&entry.aerial))?;
        entries.push(entry);
    }

    let mut manifest = DatasetManifest::new(cfg.seed, entries)?;
    manifest.save(out_dir.join("manifest.json"))?;
    manifest.set_root(out_dir);
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig {
            size: 48,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    /// Mean squared 5-point Laplacian over the interior.
    fn laplacian_energy(g: &DemGrid) -> f64 {
        let (rows, cols) = g.dims();
        let mut acc = 0.0;
        for r in 1..rows - 1 {
            for c in 1..cols - 1 {
                let l = g.get(r - 1, c) + g.get(r + 1, c) + g.get(r, c - 1) + g.get(r, c + 1) - 4.0 * g.get(r, c);
                acc += (l as f64).powi(2);
            }
        }
        acc / ((rows - 2) * (cols - 2)) as f64
    }

    #[test]
    fn dem_is_deterministic() {
        let a = gen_dem(&cfg()).unwrap();
        let b = gen_dem(&cfg()).unwrap();
        assert_eq!(a.heights(), b.heights());
        let c = gen_dem(&SynthConfig { seed: 12, ..cfg() }).unwrap();
        assert_ne!(a.heights(), c.heights());
    }

    #[test]
    fn more_octaves_more_high_frequency_energy() {
        let one = gen_dem(&SynthConfig { octaves: 1, ..cfg() }).unwrap();
        let six = gen_dem(&SynthConfig { octaves: 6, ..cfg() }).unwrap();
        assert!(laplacian_energy(&six) > laplacian_energy(&one));
    }

    #[test]
    fn zero_amplitude_is_flat() {
        let g = gen_dem(&SynthConfig {
            base_amplitude: 0.0,
            base_elevation: 0.0,
            ..cfg()
        })
        .unwrap();
        assert!(g.heights().iter().all(|&h| h == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { size: 15, ..cfg() }.validate().is_err());
        assert!(SynthConfig { octaves: 0, ..cfg() }.validate().is_err());
        assert!(SynthConfig { persistence: 1.0, ..cfg() }.validate().is_err());
        assert!(SynthConfig { sun_altitude: 0.0, ..cfg() }.validate().is_err());
        assert!(SynthConfig { sun_altitude: 90.0, ..cfg() }.validate().is_ok());
    }

    #[test]
    fn flat_dem_gives_uniform_image_at_double_size() {
        let flat = DemGrid::filled(20, 24, 2.0, 700.0).unwrap();
        let img = gen_aerial(&flat, &cfg()).unwrap();
        assert_eq!((img.rows(), img.cols()), (40, 48));
        let first = img.pixels()[0];
        assert!(img.pixels().iter().all(|&p| p == first));
    }

    #[test]
    fn sun_facing_slope_is_brighter() {
        // surface falls toward the east, so it faces east
        let ramp = DemGrid::from_fn(20, 20, 2.0, |_, c| 500.0 - 1.5 * c as f32).unwrap();
        let east = gen_aerial(&ramp, &SynthConfig { sun_azimuth: 90.0, ..cfg() }).unwrap();
        let west = gen_aerial(&ramp, &SynthConfig { sun_azimuth: 270.0, ..cfg() }).unwrap();
        assert!(east.mean_intensity() > west.mean_intensity());
    }

    #[test]
    fn colormap_is_monotone_in_brightness() {
        let lum = |s: f64| colormap(s).iter().map(|&v| v as u32).sum::<u32>();
        let mut prev = 0;
        for k in 0..=20 {
            let l = lum(k as f64 / 20.0);
            assert!(l >= prev);
            prev = l;
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_counts(10).unwrap(), (6, 2, 2));
        assert_eq!(split_counts(3).unwrap(), (1, 1, 1));
        assert!(split_counts(2).is_err());
    }

    #[test]
    fn triples_satisfy_invariants() {
        for i in 0..3 {
            let t = gen_triple(&cfg(), i, 100.0).unwrap();
            t.validate().unwrap();
            assert!(t.hr.heights().iter().all(|h| h.is_finite()));
        }
    }

    #[test]
    fn generated_manifest_loads_without_reopening() {
        let dir = tempfile::tempdir().unwrap();
        let m = gen_dataset(3, &cfg(), dir.path()).unwrap();
        assert_eq!(m.load_split(Split::Train, 100.0).unwrap().len(), 1);
        let mut reread = DatasetManifest::load(dir.path().join("manifest.json")).unwrap();
        reread.set_root(dir.path());
        assert_eq!(reread, m);
    }
}
