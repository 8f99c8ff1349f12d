//! Self-checks run by `afn verify`: gradients, kernel oracles, fusion, stitching, sizes, metrics.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{implied_peak, psnr_from_rmse, reference_peak_consistency, REFERENCE_ROWS};
use crate::infer::{plan_tiles, predict_region};
use crate::kernels::{conv2d, prelu};
use crate::model::{fuse_features, param_count, Afn, ModelConfig};
use crate::synth::{gen_triple, SynthConfig};
use crate::tensor::FeatureMap;
use crate::train::gradient_check;

pub const GRAD_TOL: f64 = 1e-3;
pub const CONV_TOL: f64 = 1e-5;
pub const FUSE_TOL: f64 = 1e-7;
pub const PEAK_TOL: f64 = 0.01;
pub const PARAM_BAND: (usize, usize) = (3_000_000, 12_000_000);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            let _ = writeln!(s, "{tag} {:<18} {} ({:.2}s)", c.name, c.detail, c.seconds);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

fn run(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name: name.into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Smallest configuration exercised by the gradient check.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        rgb_width: 8,
        ..ModelConfig::with_base(4, 2, 4)
    }
}

pub fn run_all(seed: u64) -> VerifyReport {
    let checks = vec![
        run("gradient", || check_gradients(seed)),
        run("conv_oracle", || check_conv_oracle(seed)),
        run("fusion_oracle", || check_fusion(seed)),
        run("stitch_partition", || check_stitching(seed)),
        run("param_count", check_param_count),
        run("implied_peaks", check_implied_peaks),
    ];
    VerifyReport { checks }
}

pub fn check_gradients(seed: u64) -> Result<(bool, String)> {
    let r = gradient_check(&grad_check_config(), seed)?;
    let gamma_ok = r.gamma_grad.is_some_and(|g| g != 0.0);
    Ok((
        r.max_rel_error < GRAD_TOL && gamma_ok,
        format!(
            "max relative error {:.3e} over {} entries ({} refined, {} kinked), gamma grad {:?}",
            r.max_rel_error, r.checked_entries, r.refined_entries, r.kinked_entries, r.gamma_grad
        ),
    ))
}

fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
    FeatureMap::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
}

/// Direct zero-padded convolution used as a reference.
fn naive_conv(x: &FeatureMap<f64>, w: &FeatureMap<f64>, b: &FeatureMap<f64>) -> FeatureMap<f64> {
    let [cin, h, wd] = x.shape();
    let cout = w.channels();
    let k = (w.width() as f64).sqrt().round() as usize;
    let r = (k / 2) as isize;
    FeatureMap::from_fn(cout, h, wd, |co, y, xx| {
        let mut s = b.data()[co];
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let sy = y as isize + ky as isize - r;
                    let sx = xx as isize + kx as isize - r;
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                        s += w.at(co, ci, ky * k + kx) * x.at(ci, sy as usize, sx as usize);
                    }
                }
            }
        }
        s
    })
}

fn naive_prelu(x: &FeatureMap<f64>, a: &FeatureMap<f64>) -> FeatureMap<f64> {
    let [c, h, w] = x.shape();
    FeatureMap::from_fn(c, h, w, |ci, y, xx| {
        let v = x.at(ci, y, xx);
        if v > 0.0 {
            v
        } else {
            a.data()[ci] * v
        }
    })
}

/// GEMM convolution and the DEM feature branch against direct loops.
pub fn check_conv_oracle(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_6e76);
    let mut worst: f64 = 0.0;
    for &(cin, cout, k, h, w) in &[(3, 5, 3, 17, 13), (4, 6, 1, 9, 11), (2, 3, 3, 1, 7), (7, 2, 3, 33, 5)] {
        let x = random_map(&mut rng, cin, h, w);
        let wt = random_map(&mut rng, cout, cin, k * k);
        let b = random_map(&mut rng, cout, 1, 1);
        let a = random_map(&mut rng, cout, 1, 1);
        let fast = prelu(&conv2d(&x, &wt, &b), &a);
        let slow = naive_prelu(&naive_conv(&x, &wt, &b), &a);
        worst = worst.max(fast.max_abs_diff(&slow));
    }
    let cfg = ModelConfig::with_base(4, 2, 4);
    let model = Afn::<f64>::init(&cfg, seed)?;
    let dem = random_map(&mut rng, 1, 20, 24);
    let fast = model.feature_extract_dem(&dem)?;
    let p = |n: &str| {
        model
            .param_by_name(n)
            .ok_or_else(|| Error::Config(format!("missing parameter {n}")))
    };
    let h1 = naive_prelu(
        &naive_conv(&dem, p("dem.conv1.weight")?, p("dem.conv1.bias")?),
        p("dem.conv1.prelu")?,
    );
    let slow = naive_prelu(
        &naive_conv(&h1, p("dem.conv2.weight")?, p("dem.conv2.bias")?),
        p("dem.conv2.prelu")?,
    );
    worst = worst.max(fast.max_abs_diff(&slow));
    Ok((worst < CONV_TOL, format!("max abs difference {worst:.3e}")))
}

/// Fusion against an element-wise loop, including gamma = 0.
pub fn check_fusion(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6675_7365);
    let mut worst: f64 = 0.0;
    for gamma in [0.0, 0.37, -1.5] {
        let [f_ru, f_rgb, a_dem, a_rgb] = std::array::from_fn(|_| random_map(&mut rng, 4, 6, 5));
        let fast = fuse_features(&f_ru, &f_rgb, &a_dem, &a_rgb, gamma)?;
        for i in 0..fast.len() {
            let want = f_ru.data()[i] * a_dem.data()[i] + gamma * f_rgb.data()[i] * a_rgb.data()[i];
            worst = worst.max((fast.data()[i] - want).abs());
        }
    }
    Ok((worst < FUSE_TOL, format!("max abs difference {worst:.3e}")))
}

/// Blend weights sum to one and a zero-residual model reproduces DEM_ILR exactly.
pub fn check_stitching(seed: u64) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for &(rows, cols, p, ov) in &[(500, 430, 200, 0.25), (360, 210, 200, 0.25), (97, 64, 32, 0.4), (64, 64, 32, 0.0)] {
        let plan = plan_tiles(rows, cols, p, ov)?;
        for s in plan.weight_sums() {
            worst = worst.max((s - 1.0).abs());
        }
    }
    let mut model = Afn::<f32>::init(&ModelConfig::tiny(), seed)?;
    for name in ["recon.conv2.weight", "recon.conv2.bias"] {
        let p = model
            .param_by_name_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        p.data_mut().fill(0.0);
    }
    let synth = SynthConfig {
        seed,
        size: 80,
        ..SynthConfig::default()
    };
    let t = gen_triple(&synth, 0, 100.0)?;
    let plan = plan_tiles(t.rows(), t.cols(), 32, 0.25)?;
    let out = predict_region(&model, &t.dem_ilr, &t.aerial, &plan, t.norm_scale)?;
    let exact = out.heights() == t.dem_ilr.heights();
    Ok((
        worst < 1e-9 && exact,
        format!("max |weight sum - 1| {worst:.3e}, zero residual reproduces input: {exact}"),
    ))
}

pub fn check_param_count() -> Result<(bool, String)> {
    let cfg = ModelConfig::default();
    let n = param_count(&cfg)?;
    let mut invariant = true;
    for steps in [1, 2, 8] {
        invariant &= param_count(&ModelConfig { steps, ..cfg.clone() })? == n;
    }
    let in_band = (PARAM_BAND.0..=PARAM_BAND.1).contains(&n);
    Ok((
        in_band && invariant && n < 20_000_000,
        format!("{n} parameters at m=64 N=16, independent of steps: {invariant}"),
    ))
}

pub fn check_implied_peaks() -> Result<(bool, String)> {
    let pairs = reference_peak_consistency()?;
    let worst = pairs.iter().map(|p| p.3).fold(0.0, f64::max);
    let mut round_trip: f64 = 0.0;
    for r in &REFERENCE_ROWS {
        let peak = implied_peak(r.rmse_m, r.psnr_db)?;
        round_trip = round_trip.max((psnr_from_rmse(r.rmse_m, peak)? - r.psnr_db).abs());
    }
    let list: Vec<String> = pairs.iter().map(|(n, a, _, d)| format!("{n} {a:.0} m ({:.2}%)", d * 100.0)).collect();
    Ok((
        worst < PEAK_TOL && round_trip < 1e-9,
        format!("{}; round trip {round_trip:.1e} dB", list.join(", ")),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn naive_conv_matches_hand_example() {
        // 1x3x3 input, one 3x3 all-ones kernel: corner sees 4 cells, center all 9
        let x = FeatureMap::from_fn(1, 3, 3, |_, y, x| (y * 3 + x) as f64);
        let w = FeatureMap::full(1, 1, 9, 1.0);
        let b = FeatureMap::full(1, 1, 1, 0.5);
        let y = naive_conv(&x, &w, &b);
        assert_eq!(y.at(0, 0, 0), 0.0 + 1.0 + 3.0 + 4.0 + 0.5);
        assert_eq!(y.at(0, 1, 1), 36.0 + 0.5);
    }

    #[test]
    fn cheap_checks_pass() {
        assert!(check_conv_oracle(1).unwrap().0);
        assert!(check_fusion(1).unwrap().0);
        assert!(check_param_count().unwrap().0);
        assert!(check_implied_peaks().unwrap().0);
    }
}
