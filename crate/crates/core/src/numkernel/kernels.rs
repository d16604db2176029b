//! Dense loops behind the graph operators.
//!
//! Matrix products go through `matrixmultiply`; the remaining loops are
//! `y += a * x` sweeps or eight-lane dot products with a fixed reduction
//! tree.

use super::tensor::{Real, Strided};

#[inline]
pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
fn reduce8<T: Real>(acc: &[T; 8]) -> T {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = reduce8(&acc);
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

#[inline]
pub fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let ra = ca.remainder();
    for x in ca {
        for l in 0..8 {
            acc[l] = acc[l] + x[l];
        }
    }
    let mut s = reduce8(&acc);
    for &x in ra {
        s = s + x;
    }
    s
}

fn view<T>(data: &[T], row_stride: usize, col_stride: usize) -> Strided<'_, T> {
    Strided { data, row_stride, col_stride }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    // Single rows skip the packing step of the blocked kernel.
    if m == 1 {
        for (p, &av) in a[..k].iter().enumerate() {
            axpy(&mut c[..n], av, &b[p * n..(p + 1) * n]);
        }
        return;
    }
    T::gemm_acc(m, k, n, view(a, k, 1), view(b, n, 1), c, n);
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub fn matmul_bt_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, n: usize, k: usize) {
    if m == 1 {
        for (p, cv) in c[..k].iter_mut().enumerate() {
            *cv = *cv + dot(&a[..n], &b[p * n..(p + 1) * n]);
        }
        return;
    }
    T::gemm_acc(m, n, k, view(a, n, 1), view(b, 1, n), c, k);
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn matmul_at_acc<T: Real>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    if m == 1 {
        for (p, &av) in a[..k].iter().enumerate() {
            axpy(&mut c[p * n..(p + 1) * n], av, &b[..n]);
        }
        return;
    }
    T::gemm_acc(k, m, n, view(a, 1, k), view(b, n, 1), c, n);
}

/// Geometry of a strided, zero-padded 2-D window sweep over a `[c, h, w]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Rows of the unfolded matrix.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Output columns `ox` whose input column `ox * stride + j - padding`
    /// lands inside the map.
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let ow = self.out_width();
        let lo = self.padding.saturating_sub(j).div_ceil(self.stride);
        let hi = (self.width + self.padding).saturating_sub(j).div_ceil(self.stride).min(ow);
        (lo.min(hi), hi)
    }

    /// Unfold `x` into a `[patch_len, positions]` matrix.
    pub fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (oh, ow) = (self.out_height(), self.out_width());
        let n = oh * ow;
        let mut cols = vec![T::zero(); self.patch_len() * n];
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(j);
                    for oy in 0..oh {
                        let Some(iy) = (oy * self.stride + i).checked_sub(self.padding).filter(|&y| y < self.height)
                        else {
                            continue;
                        };
                        let src = &plane[iy * self.width..(iy + 1) * self.width];
                        let out = &mut dst[oy * ow + lo..oy * ow + hi];
                        let first = lo * self.stride + j - self.padding;
                        if self.stride == 1 {
                            out.copy_from_slice(&src[first..first + out.len()]);
                        } else {
                            for (k, o) in out.iter_mut().enumerate() {
                                *o = src[first + k * self.stride];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Window::im2col`]: scatter-add columns back onto `x`.
    pub fn col2im_acc<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let n = oh * ow;
        for c in 0..self.channels {
            let plane = &mut x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * self.kh + i) * self.kw + j;
                    let src = &cols[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(j);
                    for oy in 0..oh {
                        let Some(iy) = (oy * self.stride + i).checked_sub(self.padding).filter(|&y| y < self.height)
                        else {
                            continue;
                        };
                        let dst = &mut plane[iy * self.width..(iy + 1) * self.width];
                        let vals = &src[oy * ow + lo..oy * ow + hi];
                        let first = lo * self.stride + j - self.padding;
                        if self.stride == 1 {
                            for (d, &v) in dst[first..first + vals.len()].iter_mut().zip(vals) {
                                *d = *d + v;
                            }
                        } else {
                            for (k, &v) in vals.iter().enumerate() {
                                let d = &mut dst[first + k * self.stride];
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
        }
    }
}
