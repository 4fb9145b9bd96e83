//! Sparse interval bilinear interpolation.
//!
//! An interpolated transformation moves the sampling grid by the inverse
//! affine map and resamples with the bilinear kernel. Over interval
//! parameters, each output pixel draws from the few source pixels whose
//! interpolation distance can be nonzero; the grid stores exactly those
//! entries. Building the grid depends only on the image size and the
//! parameter intervals, so one grid serves every image and channel of a
//! batch. `reference_interpolate` is the deliberately direct evaluation of
//! the defining double sum, kept as the oracle the fast path is tested
//! against.

use rayon::prelude::*;

use crate::geometry::{apply_pixelwise, coord_grid, inverse_transform, TransformChain};
use crate::interval::{Interval, Scalar};
use crate::tensor::{BoundedTensor, Tensor};

/// Interpolation weights in sparse form. Entries are grouped by output pixel
/// (row-major; `z[p]` entries for pixel `p`) and ordered by source (n, m)
/// row-major within a group. Every stored weight has `hi > 0` and lies in
/// [0, 1].
#[derive(Clone, Debug)]
pub struct SparseInterpGrid<T> {
    pub r: Vec<u32>,
    pub c: Vec<u32>,
    pub w: Vec<Interval<T>>,
    pub z: Vec<u32>,
    pub height: usize,
    pub width: usize,
}

/// How to fill pixels that sample outside the original frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaddingStrategy {
    /// Out-of-frame sources count as zero; this is what plain interpolation
    /// does implicitly.
    Zero,
    /// Border pixels extend outward.
    Replicate,
}

/// Padding amount for running the interpolation at an enlarged size.
#[derive(Clone, Copy, Debug)]
pub struct PaddingPlan {
    pub p: usize,
    pub strategy: PaddingStrategy,
    pub h: usize,
    pub w: usize,
}

/// Integers strictly inside (lo, hi), clamped to [0, max].
fn open_int_range<T: Scalar>(lo: T, hi: T, max: usize) -> std::ops::RangeInclusive<usize> {
    let start = (lo.floor().as_f64() as i64 + 1).max(0) as usize;
    let end = hi.ceil().as_f64() as i64 - 1;
    if end < start as i64 {
        // Empty window.
        return 1..=0;
    }
    start..=(end as usize).min(max)
}

/// Builds the sparse interpolation grid for HxW images under the chain's
/// affine stages. Cost is proportional to the number of nonzero entries,
/// independent of any batch size.
pub fn make_interp_grid<T: Scalar>(
    h: usize,
    w: usize,
    chain: &TransformChain<T>,
) -> SparseInterpGrid<T> {
    let one = Interval::point(T::one());
    if chain.affine.is_empty() {
        // Pixelwise-only chains leave the sampling grid in place.
        let n = h * w;
        return SparseInterpGrid {
            r: (0..n).map(|i| (i / w) as u32).collect(),
            c: (0..n).map(|i| (i % w) as u32).collect(),
            w: vec![one; n],
            z: vec![1; n],
            height: h,
            width: w,
        };
    }

    let grid = coord_grid::<T>(h, w);
    let (u2, v2) = inverse_transform(chain, &grid);
    let cu = T::lit((w as f64 - 1.0) / 2.0);
    let cv = T::lit((h as f64 - 1.0) / 2.0);

    let mut r = Vec::new();
    let mut c = Vec::new();
    let mut wts = Vec::new();
    let mut z = Vec::with_capacity(h * w);
    for px in 0..h * w {
        let iu = u2.get(px);
        let iv = v2.get(px);
        // Sources can contribute only if their center is within distance 1
        // of the inverse coordinate interval: v_c(n) = cv - n in
        // (iv.lo - 1, iv.hi + 1), u_c(m) = m - cu in (iu.lo - 1, iu.hi + 1).
        let rows = open_int_range(cv - iv.hi - T::one(), cv - iv.lo + T::one(), h - 1);
        let cols = open_int_range(iu.lo - T::one() + cu, iu.hi + T::one() + cu, w - 1);
        let mut count = 0u32;
        for n in rows {
            let vc = cv - T::lit(n as f64);
            let dv = (one - (iv - vc).abs()).relu();
            if dv.hi <= T::zero() {
                continue;
            }
            for m in cols.clone() {
                let uc = T::lit(m as f64) - cu;
                let du = (one - (iu - uc).abs()).relu();
                if du.hi <= T::zero() {
                    continue;
                }
                let weight = dv * du;
                if weight.hi > T::zero() {
                    r.push(n as u32);
                    c.push(m as u32);
                    wts.push(weight);
                    count += 1;
                }
            }
        }
        z.push(count);
    }
    SparseInterpGrid { r, c, w: wts, z, height: h, width: w }
}

/// Interpolates a batch of images (shape [..., H, W], values in [0, 1])
/// through a prebuilt grid. Each plane is independent; summation within a
/// pixel's chunk is left to right, so results do not depend on the worker
/// pool.
pub fn interpolate<T: Scalar>(x: &Tensor<T>, grid: &SparseInterpGrid<T>) -> BoundedTensor<T> {
    let shape = x.shape();
    assert!(
        shape.len() >= 2
            && shape[shape.len() - 2] == grid.height
            && shape[shape.len() - 1] == grid.width,
        "image shape {:?} does not match grid {}x{}",
        shape,
        grid.height,
        grid.width
    );
    debug_assert!(
        x.as_slice().iter().all(|&v| v >= T::zero() && v <= T::one()),
        "pixel values must lie in [0, 1]"
    );
    let hw = grid.height * grid.width;
    let planes = x.len() / hw;

    // Flatten source indices and chunk offsets once per call.
    let idx: Vec<u32> = grid
        .r
        .iter()
        .zip(&grid.c)
        .map(|(&n, &m)| n * grid.width as u32 + m)
        .collect();
    let mut offsets = Vec::with_capacity(hw + 1);
    let mut acc = 0usize;
    offsets.push(0);
    for &zi in &grid.z {
        acc += zi as usize;
        offsets.push(acc);
    }

    let mut lo = vec![T::zero(); x.len()];
    let mut hi = vec![T::zero(); x.len()];
    lo.par_chunks_mut(hw)
        .zip(hi.par_chunks_mut(hw))
        .enumerate()
        .for_each(|(p, (lo_plane, hi_plane))| {
            let src = &x.as_slice()[p * hw..(p + 1) * hw];
            for px in 0..hw {
                let mut alo = T::zero();
                let mut ahi = T::zero();
                for e in offsets[px]..offsets[px + 1] {
                    // Source pixels are nonnegative, so scaling the weight
                    // interval by the value keeps endpoint order.
                    let v = src[idx[e] as usize];
                    alo = alo + grid.w[e].lo * v;
                    ahi = ahi + grid.w[e].hi * v;
                }
                let out = Interval::new(alo, ahi).clamp01();
                lo_plane[px] = out.lo;
                hi_plane[px] = out.hi;
            }
        });
    let _ = planes;
    BoundedTensor::new(
        Tensor::from_vec(shape.to_vec(), lo),
        Tensor::from_vec(shape.to_vec(), hi),
    )
}

/// Direct evaluation of the interpolation sum: for every output pixel,
/// computes the full HxW table of interval interpolation distances and sums
/// the nonzero terms. Quadratic per pixel by design; this is the oracle and
/// the baseline that grid amortization is measured against.
pub fn reference_interpolate<T: Scalar>(
    x: &Tensor<T>,
    chain: &TransformChain<T>,
) -> BoundedTensor<T> {
    let shape = x.shape();
    assert!(shape.len() >= 2, "expected an image tensor");
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let hw = h * w;
    let planes = x.len() / hw;

    let grid = coord_grid::<T>(h, w);
    let (u2, v2) = inverse_transform(chain, &grid);
    let cu = T::lit((w as f64 - 1.0) / 2.0);
    let cv = T::lit((h as f64 - 1.0) / 2.0);
    let one = Interval::point(T::one());

    let mut lo = vec![T::zero(); x.len()];
    let mut hi = vec![T::zero(); x.len()];
    for p in 0..planes {
        let src = &x.as_slice()[p * hw..(p + 1) * hw];
        for px in 0..hw {
            let iu = u2.get(px);
            let iv = v2.get(px);
            let mut alo = T::zero();
            let mut ahi = T::zero();
            for n in 0..h {
                let vc = cv - T::lit(n as f64);
                let dv = (one - (iv - vc).abs()).relu();
                for m in 0..w {
                    let uc = T::lit(m as f64) - cu;
                    let du = (one - (iu - uc).abs()).relu();
                    if dv.hi <= T::zero() || du.hi <= T::zero() {
                        continue;
                    }
                    let weight = dv * du;
                    let v = src[n * w + m];
                    alo = alo + weight.lo * v;
                    ahi = ahi + weight.hi * v;
                }
            }
            let out = Interval::new(alo, ahi).clamp01();
            lo[p * hw + px] = out.lo;
            hi[p * hw + px] = out.hi;
        }
    }
    BoundedTensor::new(
        Tensor::from_vec(shape.to_vec(), lo),
        Tensor::from_vec(shape.to_vec(), hi),
    )
}

/// Padding needed so every central pixel keeps a real source: the largest
/// excursion of the inverse coordinates past the frame, rounded up.
pub fn plan_padding<T: Scalar>(
    h: usize,
    w: usize,
    chain: &TransformChain<T>,
    strategy: PaddingStrategy,
) -> PaddingPlan {
    if chain.affine.is_empty() {
        return PaddingPlan { p: 0, strategy, h, w };
    }
    let grid = coord_grid::<T>(h, w);
    let (u2, v2) = inverse_transform(chain, &grid);
    let fold = |t: &Tensor<T>, max: bool| {
        t.as_slice().iter().fold(
            if max { T::neg_infinity() } else { T::infinity() },
            |a, &b| if max { a.max(b) } else { a.min(b) },
        )
    };
    let (u_min, u_max) = (fold(&grid.u, false), fold(&grid.u, true));
    let (v_min, v_max) = (fold(&grid.v, false), fold(&grid.v, true));
    let spill = (fold(&u2.lo, false) - u_min)
        .abs()
        .max((fold(&u2.hi, true) - u_max).abs())
        .max((fold(&v2.lo, false) - v_min).abs())
        .max((fold(&v2.hi, true) - v_max).abs());
    PaddingPlan { p: spill.ceil().as_f64() as usize, strategy, h, w }
}

fn pad_plane<T: Scalar>(src: &[T], h: usize, w: usize, p: usize, strategy: PaddingStrategy) -> Vec<T> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); hp * wp];
    for i in 0..hp {
        for j in 0..wp {
            let (si, sj) = (i as isize - p as isize, j as isize - p as isize);
            out[i * wp + j] = match strategy {
                PaddingStrategy::Zero => {
                    if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                        src[si as usize * w + sj as usize]
                    } else {
                        T::zero()
                    }
                }
                PaddingStrategy::Replicate => {
                    let ci = si.clamp(0, h as isize - 1) as usize;
                    let cj = sj.clamp(0, w as isize - 1) as usize;
                    src[ci * w + cj]
                }
            };
        }
    }
    out
}

/// Pads, interpolates at the enlarged size, and crops back to HxW. With the
/// zero strategy this is bit-identical to plain interpolation, because the
/// padded coordinates of original pixels are exactly the unpadded ones and
/// zero sources add exact zeros.
pub fn pad_crop_pipeline<T: Scalar>(
    x: &Tensor<T>,
    chain: &TransformChain<T>,
    strategy: PaddingStrategy,
) -> BoundedTensor<T> {
    let shape = x.shape();
    assert!(shape.len() >= 2, "expected an image tensor");
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let hw = h * w;
    let planes = x.len() / hw;
    let p = plan_padding(h, w, chain, strategy).p;

    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut padded = Vec::with_capacity(planes * hp * wp);
    for pl in 0..planes {
        padded.extend(pad_plane(&x.as_slice()[pl * hw..(pl + 1) * hw], h, w, p, strategy));
    }
    let grid = make_interp_grid(hp, wp, chain);
    let big = interpolate(&Tensor::from_vec(vec![planes, hp, wp], padded), &grid);

    let mut lo = Vec::with_capacity(x.len());
    let mut hi = Vec::with_capacity(x.len());
    for pl in 0..planes {
        for i in 0..h {
            let row = (pl * hp + i + p) * wp + p;
            lo.extend_from_slice(&big.lo.as_slice()[row..row + w]);
            hi.extend_from_slice(&big.hi.as_slice()[row..row + w]);
        }
    }
    BoundedTensor::new(
        Tensor::from_vec(shape.to_vec(), lo),
        Tensor::from_vec(shape.to_vec(), hi),
    )
}

/// Full perturbation of a batch: interpolation under the chain's affine
/// stages followed by its pixelwise stage, if any.
pub fn perturb<T: Scalar>(x: &Tensor<T>, chain: &TransformChain<T>) -> BoundedTensor<T> {
    let shape = x.shape();
    let grid = make_interp_grid(shape[shape.len() - 2], shape[shape.len() - 1], chain);
    perturb_with_grid(x, &grid, chain)
}

/// Amortized variant: the grid is built once per parameter cell and reused
/// across any number of images.
pub fn perturb_with_grid<T: Scalar>(
    x: &Tensor<T>,
    grid: &SparseInterpGrid<T>,
    chain: &TransformChain<T>,
) -> BoundedTensor<T> {
    let out = interpolate(x, grid);
    match chain.pixelwise {
        Some((alpha, beta)) => apply_pixelwise(&out, alpha, beta),
        None => out,
    }
}
