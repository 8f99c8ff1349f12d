//! Forward and backward kernels for the layer types the network uses.
//!
//! Convolutions are stride 1 with zero "same" padding (`k / 2`), lowered to
//! GEMM through an im2col buffer built a band of output rows at a time so the
//! buffer stays bounded for wide layers on large patches.

use crate::tensor::{FeatureMap, Scalar};

/// Upper bound on im2col buffer elements.
const COL_BUDGET: usize = 1 << 22;

pub(crate) fn kernel_size(w: &FeatureMap<impl Scalar>) -> usize {
    let kk = w.width();
    let k = (kk as f64).sqrt().round() as usize;
    debug_assert_eq!(k * k, kk, "kernel plane must be square");
    k
}

fn band_rows(k_dim: usize, width: usize, height: usize) -> usize {
    (COL_BUDGET / (k_dim * width).max(1)).clamp(1, height)
}

/// im2col for output rows `r0..r1`: `col[(ci, ky, kx), (r - r0) * w + x]`.
fn im2col<S: Scalar>(x: &FeatureMap<S>, k: usize, r0: usize, r1: usize, col: &mut [S]) {
    let [cin, h, w] = x.shape();
    let pad = (k / 2) as isize;
    let nb = (r1 - r0) * w;
    let src = x.data();
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * nb;
                let dst = &mut col[row..row + nb];
                let dx = kx as isize - pad;
                for (ri, r) in (r0..r1).enumerate() {
                    let sy = r as isize + ky as isize - pad;
                    let line = &mut dst[ri * w..(ri + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.fill(S::zero());
                        continue;
                    }
                    let s = &src[(ci * h + sy as usize) * w..(ci * h + sy as usize + 1) * w];
                    // valid x range: 0 <= x + dx < w
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    line[..lo.min(w)].fill(S::zero());
                    if hi > lo {
                        line[lo..hi].copy_from_slice(&s[(lo as isize + dx) as usize..(hi as isize + dx) as usize]);
                    }
                    line[hi.max(lo)..].fill(S::zero());
                }
            }
        }
    }
}

/// Scatter-add of an im2col gradient back onto the input rows it was built from.
fn col2im<S: Scalar>(col: &[S], k: usize, r0: usize, r1: usize, dx: &mut FeatureMap<S>) {
    let [cin, h, w] = dx.shape();
    let pad = (k / 2) as isize;
    let nb = (r1 - r0) * w;
    let dst = dx.data_mut();
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * nb;
                let src = &col[row..row + nb];
                let ddx = kx as isize - pad;
                for (ri, r) in (r0..r1).enumerate() {
                    let sy = r as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let line = &src[ri * w..(ri + 1) * w];
                    let lo = (-ddx).max(0) as usize;
                    let hi = (w as isize - ddx).min(w as isize).max(0) as usize;
                    if hi <= lo {
                        continue;
                    }
                    let base = (ci * h + sy as usize) * w;
                    let out = &mut dst[base + (lo as isize + ddx) as usize..base + (hi as isize + ddx) as usize];
                    for (o, &v) in out.iter_mut().zip(&line[lo..hi]) {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w) + b`.
pub fn conv2d<S: Scalar>(x: &FeatureMap<S>, w: &FeatureMap<S>, b: &FeatureMap<S>) -> FeatureMap<S> {
    let [cin, h, wd] = x.shape();
    let cout = w.channels();
    let k = kernel_size(w);
    assert_eq!(w.height(), cin, "conv expects {} input channels, got {cin}", w.height());
    assert_eq!(b.len(), cout);
    let hw = h * wd;
    let kdim = cin * k * k;

    let mut y = FeatureMap::zeros(cout, h, wd);
    for (co, bias) in b.data().iter().enumerate() {
        y.data_mut()[co * hw..(co + 1) * hw].fill(*bias);
    }
    if k == 1 {
        // SAFETY: A is cout x cin (row-major), B is cin x hw, C is cout x hw; all dense.
        unsafe {
            S::gemm(
                cout, cin, hw, S::one(),
                w.data().as_ptr(), cin as isize, 1,
                x.data().as_ptr(), hw as isize, 1,
                S::one(),
                y.data_mut().as_mut_ptr(), hw as isize, 1,
            );
        }
        return y;
    }

    let band = band_rows(kdim, wd, h);
    let mut col = vec![S::zero(); kdim * band * wd];
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + band).min(h);
        let nb = (r1 - r0) * wd;
        im2col(x, k, r0, r1, &mut col[..kdim * nb]);
        // SAFETY: C is the cout x nb column band of y starting at r0 * wd with row stride hw.
        unsafe {
            S::gemm(
                cout, kdim, nb, S::one(),
                w.data().as_ptr(), kdim as isize, 1,
                col.as_ptr(), nb as isize, 1,
                S::one(),
                y.data_mut().as_mut_ptr().add(r0 * wd), hw as isize, 1,
            );
        }
        r0 = r1;
    }
    y
}

/// Gradients of `conv2d` given upstream `dy`. Each output is computed only when requested.
pub struct ConvGrads<S> {
    pub dx: Option<FeatureMap<S>>,
    pub dw: Option<FeatureMap<S>>,
    pub db: Option<FeatureMap<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    x: &FeatureMap<S>,
    w: &FeatureMap<S>,
    dy: &FeatureMap<S>,
    want: [bool; 3],
) -> ConvGrads<S> {
    let [cin, h, wd] = x.shape();
    let cout = w.channels();
    let k = kernel_size(w);
    let hw = h * wd;
    let kdim = cin * k * k;
    let [want_dx, want_dw, want_db] = want;

    let db = want_db.then(|| {
        FeatureMap::from_fn(cout, 1, 1, |co, _, _| dy.channel(co).iter().copied().sum())
    });
    let mut dx = want_dx.then(|| FeatureMap::zeros(cin, h, wd));
    let mut dw = want_dw.then(|| FeatureMap::zeros(cout, cin, k * k));
    if !(want_dx || want_dw) {
        return ConvGrads { dx, dw, db };
    }

    if k == 1 {
        if let Some(dw) = dw.as_mut() {
            // dW[cout, cin] = dY[cout, hw] * X^T[hw, cin]
            unsafe {
                S::gemm(
                    cout, hw, cin, S::one(),
                    dy.data().as_ptr(), hw as isize, 1,
                    x.data().as_ptr(), 1, hw as isize,
                    S::zero(),
                    dw.data_mut().as_mut_ptr(), cin as isize, 1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dX[cin, hw] = W^T[cin, cout] * dY[cout, hw]
            unsafe {
                S::gemm(
                    cin, cout, hw, S::one(),
                    w.data().as_ptr(), 1, cin as isize,
                    dy.data().as_ptr(), hw as isize, 1,
                    S::zero(),
                    dx.data_mut().as_mut_ptr(), hw as isize, 1,
                );
            }
        }
        return ConvGrads { dx, dw, db };
    }

    let band = band_rows(kdim, wd, h);
    let mut col = vec![S::zero(); kdim * band * wd];
    let mut r0 = 0;
    while r0 < h {
        let r1 = (r0 + band).min(h);
        let nb = (r1 - r0) * wd;
        let col = &mut col[..kdim * nb];
        // SAFETY (all gemm calls below): dy band is cout x nb at offset r0 * wd with row
        // stride hw; col is a dense kdim x nb buffer; w and dw are dense cout x kdim.
        if let Some(dw) = dw.as_mut() {
            im2col(x, k, r0, r1, col);
            unsafe {
                S::gemm(
                    cout, nb, kdim, S::one(),
                    dy.data().as_ptr().add(r0 * wd), hw as isize, 1,
                    col.as_ptr(), 1, nb as isize,
                    S::one(),
                    dw.data_mut().as_mut_ptr(), kdim as isize, 1,
                );
            }
        }
        if let Some(dx) = dx.as_mut() {
            unsafe {
                S::gemm(
                    kdim, cout, nb, S::one(),
                    w.data().as_ptr(), 1, kdim as isize,
                    dy.data().as_ptr().add(r0 * wd), hw as isize, 1,
                    S::zero(),
                    col.as_mut_ptr(), nb as isize, 1,
                );
            }
            col2im(col, k, r0, r1, dx);
        }
        r0 = r1;
    }
    ConvGrads { dx, dw, db }
}

/// Per-channel PReLU.
pub fn prelu<S: Scalar>(x: &FeatureMap<S>, slope: &FeatureMap<S>) -> FeatureMap<S> {
    let p = x.plane();
    let mut y = x.clone();
    for (c, chunk) in y.data_mut().chunks_mut(p).enumerate() {
        let a = slope.data()[c];
        for v in chunk {
            if *v <= S::zero() {
                *v *= a;
            }
        }
    }
    y
}

/// Returns (dx, dslope).
pub fn prelu_backward<S: Scalar>(
    x: &FeatureMap<S>,
    slope: &FeatureMap<S>,
    dy: &FeatureMap<S>,
) -> (FeatureMap<S>, FeatureMap<S>) {
    let p = x.plane();
    let mut dx = dy.clone();
    let mut ds = FeatureMap::zeros(slope.channels(), 1, 1);
    for c in 0..x.channels() {
        let a = slope.data()[c];
        let xs = x.channel(c);
        let mut acc = S::zero();
        for (i, d) in dx.data_mut()[c * p..(c + 1) * p].iter_mut().enumerate() {
            if xs[i] <= S::zero() {
                acc += *d * xs[i];
                *d *= a;
            }
        }
        ds.data_mut()[c] = acc;
    }
    (dx, ds)
}

pub fn relu<S: Scalar>(x: &FeatureMap<S>) -> FeatureMap<S> {
    x.map(|v| v.max(S::zero()))
}

pub fn sigmoid<S: Scalar>(x: &FeatureMap<S>) -> FeatureMap<S> {
    x.map(|v| S::one() / (S::one() + (-v).exp()))
}

/// 2x2 max pool, stride 2. Returns the pooled map and the flat source index of each maximum.
pub fn maxpool2<S: Scalar>(x: &FeatureMap<S>) -> (FeatureMap<S>, Vec<u32>) {
    let [c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = FeatureMap::zeros(c, oh, ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    let src = x.data();
    let out = y.data_mut();
    let mut o = 0;
    for ci in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                let base = (ci * h + 2 * yy) * w + 2 * xx;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                out[o] = src[best];
                arg.push(best as u32);
                o += 1;
            }
        }
    }
    (y, arg)
}

pub fn concat_channels<S: Scalar>(xs: &[&FeatureMap<S>]) -> FeatureMap<S> {
    let [_, h, w] = xs[0].shape();
    let c: usize = xs.iter().map(|x| x.channels()).sum();
    let mut data = Vec::with_capacity(c * h * w);
    for x in xs {
        assert_eq!((x.height(), x.width()), (h, w), "concat needs equal spatial dims");
        data.extend_from_slice(x.data());
    }
    FeatureMap::from_vec(c, h, w, data).expect("sizes add up")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn rand_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap<f64> {
        let mut r = lcg(seed);
        FeatureMap::from_fn(c, h, w, |_, _, _| r())
    }

    fn naive_conv(x: &FeatureMap<f64>, w: &FeatureMap<f64>, b: &FeatureMap<f64>) -> FeatureMap<f64> {
        let [cin, h, wd] = x.shape();
        let k = kernel_size(w);
        let p = (k / 2) as isize;
        FeatureMap::from_fn(w.channels(), h, wd, |co, y, xx| {
            let mut acc = b.data()[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xx as isize + kx as isize - p;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                            acc += w.at(co, ci, ky * k + kx) * x.at(ci, sy as usize, sx as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_nested_loops() {
        for (cin, cout, k, h, w) in [(1, 3, 3, 5, 7), (4, 2, 1, 6, 3), (3, 5, 3, 1, 1), (2, 2, 3, 9, 2)] {
            let x = rand_map(cin, h, w, 1);
            let wt = rand_map(cout, cin, k * k, 2);
            let b = rand_map(cout, 1, 1, 3);
            let got = conv2d(&x, &wt, &b);
            assert!(got.max_abs_diff(&naive_conv(&x, &wt, &b)) < 1e-12);
        }
    }

    #[test]
    fn conv_banding_matches_single_band() {
        // wide enough that the im2col budget forces several bands
        let x = rand_map(64, 80, 900, 5);
        let wt = rand_map(2, 64, 9, 6);
        let b = rand_map(2, 1, 1, 7);
        assert!(band_rows(64 * 9, 900, 80) < 80);
        let got = conv2d(&x, &wt, &b);
        let want = naive_conv(&x, &wt, &b);
        assert!(got.max_abs_diff(&want) < 1e-10);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let (cin, cout, h, w) = (2, 3, 4, 5);
        for k in [1, 3] {
            let x = rand_map(cin, h, w, 11);
            let wt = rand_map(cout, cin, k * k, 12);
            let b = rand_map(cout, 1, 1, 13);
            let dy = rand_map(cout, h, w, 14);
            let loss = |x: &FeatureMap<f64>, wt: &FeatureMap<f64>, b: &FeatureMap<f64>| -> f64 {
                conv2d(x, wt, b).data().iter().zip(dy.data()).map(|(a, d)| a * d).sum()
            };
            let g = conv2d_backward(&x, &wt, &dy, [true, true, true]);
            let eps = 1e-6;
            let check = |analytic: &FeatureMap<f64>, which: usize| {
                for i in 0..analytic.len() {
                    let (mut xp, mut wp, mut bp) = (x.clone(), wt.clone(), b.clone());
                    let (mut xm, mut wm, mut bm) = (x.clone(), wt.clone(), b.clone());
                    match which {
                        0 => { xp.data_mut()[i] += eps; xm.data_mut()[i] -= eps; }
                        1 => { wp.data_mut()[i] += eps; wm.data_mut()[i] -= eps; }
                        _ => { bp.data_mut()[i] += eps; bm.data_mut()[i] -= eps; }
                    }
                    let fd = (loss(&xp, &wp, &bp) - loss(&xm, &wm, &bm)) / (2.0 * eps);
                    assert!((fd - analytic.data()[i]).abs() < 1e-6, "k={k} which={which} i={i}");
                }
            };
            check(g.dx.as_ref().unwrap(), 0);
            check(g.dw.as_ref().unwrap(), 1);
            check(g.db.as_ref().unwrap(), 2);
        }
    }

    #[test]
    fn prelu_and_backward() {
        let x = FeatureMap::from_vec(2, 1, 2, vec![1.0, -2.0, -1.0, 3.0]).unwrap();
        let a = FeatureMap::from_vec(2, 1, 1, vec![0.25, 0.5]).unwrap();
        assert_eq!(prelu(&x, &a).data(), &[1.0, -0.5, -0.5, 3.0]);
        let dy = FeatureMap::full(2, 1, 2, 1.0);
        let (dx, da) = prelu_backward(&x, &a, &dy);
        assert_eq!(dx.data(), &[1.0, 0.25, 0.5, 1.0]);
        assert_eq!(da.data(), &[-2.0, -1.0]);
    }

    #[test]
    fn maxpool_picks_block_maxima() {
        let x = FeatureMap::from_vec(1, 2, 4, vec![1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0]).unwrap();
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.shape(), [1, 1, 2]);
        assert_eq!(y.data(), &[5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }
}
