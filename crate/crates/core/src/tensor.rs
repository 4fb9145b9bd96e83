//! Dense row-major tensors and the linear-algebra kernels everything else
//! lowers to: three GEMM variants and im2col/col2im for convolutions.
//!
//! GEMMs for f32/f64 dispatch to `matrixmultiply`, which is single-threaded
//! with fixed blocking, so results are bitwise reproducible and independent
//! of any worker-pool configuration. Other scalar types take a naive loop.

use std::any::TypeId;

use crate::interval::{Interval, Scalar};

/// Dense tensor, row-major, shape known at runtime.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape does not match data length");
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Reinterprets the buffer under a new shape of equal volume.
    pub fn reshape(self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape changes volume");
        Self { shape: shape.to_vec(), data: self.data }
    }

    /// Contiguous sub-slice `i` of length `len`, e.g. one image of a batch.
    pub fn chunk(&self, i: usize, len: usize) -> &[T] {
        &self.data[i * len..(i + 1) * len]
    }

    pub fn chunk_mut(&mut self, i: usize, len: usize) -> &mut [T] {
        &mut self.data[i * len..(i + 1) * len]
    }
}

/// Elementwise lower/upper bound pair of identical shape; `lo <= hi` holds
/// at every index.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundedTensor<T> {
    pub lo: Tensor<T>,
    pub hi: Tensor<T>,
}

impl<T: Scalar> BoundedTensor<T> {
    pub fn new(lo: Tensor<T>, hi: Tensor<T>) -> Self {
        assert_eq!(lo.shape(), hi.shape(), "bound shapes differ");
        assert!(
            lo.as_slice().iter().zip(hi.as_slice()).all(|(&l, &h)| l <= h),
            "crossed bounds"
        );
        Self { lo, hi }
    }

    /// Degenerate bounds around one tensor.
    pub fn point(t: Tensor<T>) -> Self {
        Self { lo: t.clone(), hi: t }
    }

    pub fn shape(&self) -> &[usize] {
        self.lo.shape()
    }

    pub fn len(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.is_empty()
    }

    pub fn get(&self, i: usize) -> Interval<T> {
        Interval::new(self.lo.as_slice()[i], self.hi.as_slice()[i])
    }

    /// Widest per-element interval, zero for a point.
    pub fn max_width(&self) -> T {
        self.lo
            .as_slice()
            .iter()
            .zip(self.hi.as_slice())
            .fold(T::zero(), |m, (&l, &h)| m.max(h - l))
    }

    pub fn contains_point(&self, x: &[T]) -> bool {
        x.len() == self.len()
            && self
                .lo
                .as_slice()
                .iter()
                .zip(self.hi.as_slice())
                .zip(x)
                .all(|((&l, &h), &v)| l <= v && v <= h)
    }
}

/// C = A * B (or C += with `acc`): A is m x k, B is k x n, all row-major.
pub fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], acc: bool) {
    gemm_strided(m, k, n, a, k, 1, b, n, 1, c, acc)
}

/// C = A * B^T with B stored row-major as n x k.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], bt: &[T], c: &mut [T], acc: bool) {
    gemm_strided(m, k, n, a, k, 1, bt, 1, k, c, acc)
}

/// C = A^T * B with A stored row-major as k x m.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, at: &[T], b: &[T], c: &mut [T], acc: bool) {
    gemm_strided(m, k, n, at, 1, m, b, n, 1, c, acc)
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Scalar>(
    m: usize, k: usize, n: usize,
    a: &[T], rsa: usize, csa: usize,
    b: &[T], rsb: usize, csb: usize,
    c: &mut [T], acc: bool,
) {
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1 || m * k == 0);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1 || k * n == 0);
    assert!(c.len() == m * n);
    if m == 0 || n == 0 || k == 0 {
        if !acc {
            c.fill(T::zero());
        }
        return;
    }
    let beta = if acc { 1.0 } else { 0.0 };
    let t = TypeId::of::<T>();
    if t == TypeId::of::<f64>() {
        // Sound: TypeId equality proves T is f64.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n,
                1.0,
                a.as_ptr() as *const f64, rsa as isize, csa as isize,
                b.as_ptr() as *const f64, rsb as isize, csb as isize,
                beta,
                c.as_mut_ptr() as *mut f64, n as isize, 1,
            );
        }
    } else if t == TypeId::of::<f32>() {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n,
                1.0,
                a.as_ptr() as *const f32, rsa as isize, csa as isize,
                b.as_ptr() as *const f32, rsb as isize, csb as isize,
                beta as f32,
                c.as_mut_ptr() as *mut f32, n as isize, 1,
            );
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut s = T::zero();
                for l in 0..k {
                    s = s + a[i * rsa + l * csa] * b[l * rsb + j * csb];
                }
                let dst = &mut c[i * n + j];
                *dst = if acc { *dst + s } else { s };
            }
        }
    }
}

/// Unpacks conv windows into a `c*kh*kw x oh*ow` matrix (zero padding), so a
/// convolution becomes one GEMM with the `c_out x c*kh*kw` weight matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T], c: usize, h: usize, w: usize,
    kh: usize, kw: usize, stride: usize, pad: usize,
    cols: &mut [T],
) {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad);
    assert_eq!(x.len(), c * h * w);
    assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ic in 0..c {
        let plane = &x[ic * h * w..(ic + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        dst[oi * ow..(oi + 1) * ow].fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        dst[oi * ow + oj] = if jj < 0 || jj as usize >= w {
                            T::zero()
                        } else {
                            src_row[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the image.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T], c: usize, h: usize, w: usize,
    kh: usize, kw: usize, stride: usize, pad: usize,
    x: &mut [T],
) {
    let (oh, ow) = conv_out_dims(h, w, kh, kw, stride, pad);
    assert_eq!(x.len(), c * h * w);
    assert_eq!(cols.len(), c * kh * kw * oh * ow);
    x.fill(T::zero());
    let mut row = 0;
    for ic in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                row += 1;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        let idx = (ic * h + ii as usize) * w + jj as usize;
                        x[idx] = x[idx] + src[oi * ow + oj];
                    }
                }
            }
        }
    }
}

/// Output spatial dims of a convolution.
pub fn conv_out_dims(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    assert!(stride > 0 && h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}
