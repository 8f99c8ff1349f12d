//! Height-error metrics and method comparison reports.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{plan_tiles, predict_region};
use crate::model::Afn;
use crate::raster::{DemGrid, PatchTriple};

/// Root mean squared height difference in meters, skipping nodata in either raster.
pub fn rmse(pred: &DemGrid, gt: &DemGrid) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (sum, n) = pred
        .heights()
        .iter()
        .zip(gt.heights())
        .filter(|(&p, &g)| !pred.is_nodata(p) && !gt.is_nodata(g))
        .fold((0.0f64, 0usize), |(s, n), (&p, &g)| {
            let d = p as f64 - g as f64;
            (s + d * d, n + 1)
        });
    if n == 0 {
        return Err(Error::EmptyMetric("every pixel is nodata".into()));
    }
    Ok((sum / n as f64).sqrt())
}

pub fn rmse_values(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} predictions vs {} targets", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyMetric("no pixels".into()));
    }
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// `20 log10(peak / rmse)`; infinite for a perfect match.
pub fn psnr_from_rmse(rmse: f64, peak: f64) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::InvalidArgument(format!("PSNR peak must be positive, got {peak}")));
    }
    if rmse < 0.0 || rmse.is_nan() {
        return Err(Error::InvalidArgument(format!("rmse must be non-negative, got {rmse}")));
    }
    if rmse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (peak / rmse).log10())
}

pub fn psnr(pred: &DemGrid, gt: &DemGrid, peak: f64) -> Result<f64> {
    psnr_from_rmse(rmse(pred, gt)?, peak)
}

/// The peak that makes `psnr_db` and `rmse_m` consistent.
pub fn implied_peak(rmse_m: f64, psnr_db: f64) -> Result<f64> {
    if !(rmse_m > 0.0) {
        return Err(Error::InvalidArgument(format!("rmse must be positive, got {rmse_m}")));
    }
    Ok(rmse_m * 10f64.powf(psnr_db / 20.0))
}

/// Elevation range of the ground truth, the default PSNR peak.
pub fn region_peak(gt: &DemGrid) -> Result<f64> {
    let (lo, hi) = gt.range().ok_or_else(|| Error::EmptyMetric("every pixel is nodata".into()))?;
    let peak = hi as f64 - lo as f64;
    if peak <= 0.0 {
        return Err(Error::InvalidArgument("flat region has no elevation range".into()));
    }
    Ok(peak)
}

/// A published (rmse, psnr) result for one test region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub region: &'static str,
    pub method: &'static str,
    pub rmse_m: f64,
    pub psnr_db: f64,
}

const fn row(region: &'static str, method: &'static str, rmse_m: f64, psnr_db: f64) -> ReferenceRow {
    ReferenceRow {
        region,
        method,
        rmse_m,
        psnr_db,
    }
}

/// Reported results of the full network without (AFN) and with (AFNO) overlapped prediction.
pub const REFERENCE_ROWS: [ReferenceRow; 8] = [
    row("Bassiero", "AFN", 0.943, 63.958),
    row("Bassiero", "AFNO", 0.926, 64.113),
    row("Forcanada", "AFN", 1.058, 62.351),
    row("Forcanada", "AFNO", 1.030, 62.574),
    row("Durrenstein", "AFN", 0.877, 63.841),
    row("Durrenstein", "AFNO", 0.854, 64.061),
    row("Monte Magro", "AFN", 0.580, 71.211),
    row("Monte Magro", "AFNO", 0.566, 71.417),
];

/// Per region: peak implied by each reference row and their relative disagreement.
pub fn reference_peak_consistency() -> Result<Vec<(&'static str, f64, f64, f64)>> {
    REFERENCE_ROWS
        .chunks(2)
        .map(|pair| {
            let a = implied_peak(pair[0].rmse_m, pair[0].psnr_db)?;
            let b = implied_peak(pair[1].rmse_m, pair[1].psnr_db)?;
            Ok((pair[0].region, a, b, (a - b).abs() / a.max(b)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Fixed PSNR peak in meters instead of each region's range.
    pub peak_m: Option<f64>,
    pub baseline: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            peak_m: None,
            baseline: true,
        }
    }
}

pub enum Method {
    Bicubic,
    Model { name: String, model: Box<Afn<f32>> },
}

impl Method {
    pub fn name(&self) -> &str {
        match self {
            Method::Bicubic => "bicubic",
            Method::Model { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub region: String,
    pub method: String,
    pub rmse_m: f64,
    pub psnr_db: f64,
    pub peak_m: f64,
    pub params: Option<usize>,
    pub inference_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingRow {
    pub region: String,
    pub method: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub missing: Vec<MissingRow>,
}

/// Scores every method on every region; a method that fails on a region is listed as missing.
pub fn compare_methods(
    regions: &[(String, PatchTriple)],
    methods: &[Method],
    patch_size: usize,
    overlap: f64,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if regions.is_empty() {
        return Err(Error::InvalidArgument("no test regions".into()));
    }
    let mut report = EvalReport::default();
    for (id, t) in regions {
        let peak = match cfg.peak_m {
            Some(p) => p,
            None => region_peak(&t.hr)?,
        };
        for method in methods {
            let start = Instant::now();
            let (pred, params) = match method {
                Method::Bicubic => (Ok(t.dem_ilr.clone()), None),
                Method::Model { model, .. } => {
                    let size = patch_size.min(t.rows()).min(t.cols());
                    let pred = plan_tiles(t.rows(), t.cols(), size, overlap)
                        .and_then(|plan| predict_region(model, &t.dem_ilr, &t.aerial, &plan, t.norm_scale));
                    (pred, Some(model.param_count()))
                }
            };
            let seconds = start.elapsed().as_secs_f64();
            let scored = pred.and_then(|p| {
                let r = rmse(&p, &t.hr)?;
                Ok((r, psnr_from_rmse(r, peak)?))
            });
            match scored {
                Ok((r, db)) => report.rows.push(EvalRow {
                    region: id.clone(),
                    method: method.name().to_string(),
                    rmse_m: r,
                    psnr_db: db,
                    peak_m: peak,
                    params,
                    inference_seconds: seconds,
                }),
                Err(e) => report.missing.push(MissingRow {
                    region: id.clone(),
                    method: method.name().to_string(),
                    reason: e.to_string(),
                }),
            }
        }
    }
    Ok(report)
}

impl EvalReport {
    /// Mean RMSE of one method over the regions it was scored on.
    pub fn mean_rmse(&self, method: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.method == method).map(|r| r.rmse_m).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn to_text(&self) -> String {
        let mw = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
        let rw = self.rows.iter().map(|r| r.region.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<rw$}  {:<mw$}  {:>9}  {:>9}  {:>9}  {:>9}  {:>8}",
            "region", "method", "rmse_m", "psnr_db", "peak_m", "params", "seconds"
        );
        for r in &self.rows {
            let params = r.params.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<rw$}  {:<mw$}  {:>9.3}  {:>9.3}  {:>9.3}  {:>9}  {:>8.3}",
                r.region, r.method, r.rmse_m, r.psnr_db, r.peak_m, params, r.inference_seconds
            );
        }
        for m in &self.missing {
            let _ = writeln!(s, "{:<rw$}  {:<mw$}  missing: {}", m.region, m.method, m.reason);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(v: Vec<f32>) -> DemGrid {
        DemGrid::new(1, v.len(), 2.0, v).unwrap()
    }

    #[test]
    fn rmse_examples() {
        let gt = grid(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(rmse(&gt, &gt).unwrap(), 0.0);
        assert_eq!(rmse(&grid(vec![2.0, 3.0, 4.0, 5.0]), &gt).unwrap(), 1.0);
        assert_eq!(rmse(&grid(vec![3.0, 0.0, 5.0, 2.0]), &gt).unwrap(), 2.0);
        assert!(rmse(&grid(vec![1.0]), &gt).is_err());
    }

    #[test]
    fn all_nodata_is_empty_metric() {
        let a = DemGrid::with_nodata(1, 2, 1.0, Some(-1.0), vec![-1.0, -1.0]).unwrap();
        assert!(matches!(rmse(&a, &a), Err(Error::EmptyMetric(_))));
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_rmse(1.0, 1000.0).unwrap() - 60.0).abs() < 1e-12);
        let d = psnr_from_rmse(1.0, 50.0).unwrap() - psnr_from_rmse(2.0, 50.0).unwrap();
        assert!((d - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!(psnr_from_rmse(1.0, 0.0).is_err());
        assert_eq!(psnr_from_rmse(0.0, 10.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn text_table_lists_rows() {
        let report = EvalReport {
            rows: vec![EvalRow {
                region: "r1".into(),
                method: "bicubic".into(),
                rmse_m: 1.23456,
                psnr_db: 60.0,
                peak_m: 1000.0,
                params: None,
                inference_seconds: 0.0,
            }],
            missing: vec![],
        };
        let t = report.to_text();
        assert!(t.contains("1.235"));
        assert!(t.contains("60.000"));
    }
}
