//! Dense matrix and convolution kernels on flat row-major slices.
//!
//! All kernels accumulate into their output (`c += ...`) and use a fixed
//! summation order, so results are reproducible bit for bit.

use super::Real;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av != T::zero() {
                axpy(av, br, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

pub const KERNEL: usize = 3;
pub const STRIDE: usize = 2;

/// Geometry of a 3×3, stride-2 convolution between a "wide" feature map
/// (`wide_c × wide_h × wide_w`) and a "narrow" one (`narrow_c × narrow_h ×
/// narrow_w`). A forward convolution maps wide to narrow; a transposed
/// convolution maps narrow to wide with the same kernel layout
/// `[narrow_c, wide_c, 3, 3]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub wide_c: usize,
    pub wide_h: usize,
    pub wide_w: usize,
    pub narrow_c: usize,
    pub narrow_h: usize,
    pub narrow_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.wide_c * KERNEL * KERNEL
    }

    pub fn narrow_plane(&self) -> usize {
        self.narrow_h * self.narrow_w
    }

    pub fn wide_plane(&self) -> usize {
        self.wide_h * self.wide_w
    }

    /// Columns of the patch matrix: one per (sample, narrow pixel).
    pub fn cols(&self) -> usize {
        self.batch * self.narrow_plane()
    }

    /// Unfolds the wide map `[batch, wide_c, wide_h, wide_w]` into the patch
    /// matrix `[wide_c·9, batch·narrow_h·narrow_w]`.
    pub fn im2col<T: Real>(&self, wide: &[T], cols: &mut [T]) {
        let ncols = self.cols();
        let plane = self.narrow_plane();
        for c in 0..self.wide_c {
            for kh in 0..KERNEL {
                for kw in 0..KERNEL {
                    let r = (c * KERNEL + kh) * KERNEL + kw;
                    let row = &mut cols[r * ncols..(r + 1) * ncols];
                    for n in 0..self.batch {
                        let src = &wide[(n * self.wide_c + c) * self.wide_plane()..][..self.wide_plane()];
                        for oh in 0..self.narrow_h {
                            let ih = (oh * STRIDE + kh) as isize - self.pad_top as isize;
                            let dst = &mut row[n * plane + oh * self.narrow_w..][..self.narrow_w];
                            if ih < 0 || ih >= self.wide_h as isize {
                                dst.iter_mut().for_each(|v| *v = T::zero());
                                continue;
                            }
                            let srow = &src[ih as usize * self.wide_w..][..self.wide_w];
                            for (ow, d) in dst.iter_mut().enumerate() {
                                let iw = (ow * STRIDE + kw) as isize - self.pad_left as isize;
                                *d = if iw >= 0 && iw < self.wide_w as isize { srow[iw as usize] } else { T::zero() };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters the patch matrix back,
    /// accumulating into the wide map.
    pub fn col2im<T: Real>(&self, cols: &[T], wide: &mut [T]) {
        let ncols = self.cols();
        let plane = self.narrow_plane();
        for c in 0..self.wide_c {
            for kh in 0..KERNEL {
                for kw in 0..KERNEL {
                    let r = (c * KERNEL + kh) * KERNEL + kw;
                    let row = &cols[r * ncols..(r + 1) * ncols];
                    for n in 0..self.batch {
                        let base = (n * self.wide_c + c) * self.wide_plane();
                        for oh in 0..self.narrow_h {
                            let ih = (oh * STRIDE + kh) as isize - self.pad_top as isize;
                            if ih < 0 || ih >= self.wide_h as isize {
                                continue;
                            }
                            let src = &row[n * plane + oh * self.narrow_w..][..self.narrow_w];
                            let drow = &mut wide[base + ih as usize * self.wide_w..][..self.wide_w];
                            for (ow, &v) in src.iter().enumerate() {
                                let iw = (ow * STRIDE + kw) as isize - self.pad_left as isize;
                                if iw >= 0 && iw < self.wide_w as isize {
                                    drow[iw as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// `[batch, ch, plane]` → `[ch, batch·plane]`
    pub fn to_channel_major<T: Real>(batch: usize, ch: usize, plane: usize, src: &[T], dst: &mut [T]) {
        for n in 0..batch {
            for c in 0..ch {
                dst[c * batch * plane + n * plane..][..plane].copy_from_slice(&src[(n * ch + c) * plane..][..plane]);
            }
        }
    }

    /// `[ch, batch·plane]` → `[batch, ch, plane]`
    pub fn to_batch_major<T: Real>(batch: usize, ch: usize, plane: usize, src: &[T], dst: &mut [T]) {
        for n in 0..batch {
            for c in 0..ch {
                dst[(n * ch + c) * plane..][..plane].copy_from_slice(&src[c * batch * plane + n * plane..][..plane]);
            }
        }
    }
}

/// Output extent of a 3×3, stride-2 convolution.
pub fn conv_out_len(input: usize, pad_lo: usize, pad_hi: usize) -> Option<usize> {
    let padded = input + pad_lo + pad_hi;
    (padded >= KERNEL).then(|| (padded - KERNEL) / STRIDE + 1)
}

/// Output extent of a 3×3, stride-2 transposed convolution.
pub fn conv_transpose_out_len(input: usize, pad_lo: usize, pad_hi: usize, output_pad: usize) -> Option<usize> {
    let full = (input.checked_sub(1)?) * STRIDE + KERNEL + output_pad;
    full.checked_sub(pad_lo + pad_hi).filter(|&v| v > 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn gemm_variants_agree() {
        // a: 2x3, b: 3x2
        let a = [1.0f64, 2., 3., 4., 5., 6.];
        let b = [7.0f64, 8., 9., 10., 11., 12.];
        let mut c = vec![0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, vec![58., 64., 139., 154.]);
        // bᵀ stored as 2x3
        let bt = [7.0f64, 9., 11., 8., 10., 12.];
        let mut c2 = vec![0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut c2);
        assert_eq!(c2, c);
        // aᵀ stored as 3x2
        let at = [1.0f64, 4., 2., 5., 3., 6.];
        let mut c3 = vec![0.0; 4];
        gemm_tn(2, 3, 2, &at, &b, &mut c3);
        assert_eq!(c3, c);
    }

    #[test]
    fn dot_handles_tails() {
        let a: alloc::vec::Vec<f64> = (0..19).map(|v| v as f64).collect();
        let expect: f64 = a.iter().map(|v| v * v).sum();
        assert_eq!(dot(&a, &a), expect);
    }

    #[test]
    fn output_lengths() {
        assert_eq!(conv_out_len(4, 1, 0), Some(2));
        assert_eq!(conv_out_len(300, 1, 1), Some(150));
        assert_eq!(conv_out_len(1, 0, 0), None);
        assert_eq!(conv_transpose_out_len(5, 1, 1, 1), Some(10));
    }
}
