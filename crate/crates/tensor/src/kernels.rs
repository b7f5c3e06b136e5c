//! Dense row-major kernels. Every routine accumulates into `out` and visits
//! elements in a fixed order, so results are reproducible bit for bit.

use crate::tensor::Scalar;

const LANES: usize = 8;

/// Dot product with eight independent partial sums.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let (x, y) = (&a[c * LANES..(c + 1) * LANES], &b[c * LANES..(c + 1) * LANES]);
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s = s + v;
    }
    for i in chunks * LANES..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// `y += alpha * x`.
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o = *o + alpha * v;
    }
}

/// `out[m, n] += a[m, k] · b[k, n]`.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out[m, n] += a[m, k] · b[n, k]ᵀ`.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m, n] += a[k, m]ᵀ · b[k, n]`.
pub(crate) fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av != T::zero() {
                axpy(av, brow, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Convolution geometry for one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Rows of the patch matrix: `C * kh * kw`.
    pub fn patch_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn patch_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Image offset feeding each patch-matrix entry (`[C*kh*kw, Ho*Wo]`,
    /// row-major), or `None` where the tap falls in the zero padding.
    fn tap_table(&self) -> Vec<Option<usize>> {
        let cols = self.patch_cols();
        let mut table = vec![None; self.patch_rows() * cols];
        for ic in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ic * self.kh + ky) * self.kw + kx;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                table[row * cols + oy * self.wo + ox] = Some((ic * self.h + iy as usize) * self.w + ix as usize);
                            }
                        }
                    }
                }
            }
        }
        table
    }

    /// Patch matrix of a whole batch, `[C*kh*kw, B*Ho*Wo]`: image `n` fills
    /// columns `n*Ho*Wo..(n+1)*Ho*Wo`.
    pub fn im2col_batch<T: Scalar>(&self, images: &[T], batch: usize) -> Vec<T> {
        let (rows, cols, img) = (self.patch_rows(), self.patch_cols(), self.c * self.h * self.w);
        let table = self.tap_table();
        let width = batch * cols;
        let mut out = vec![T::zero(); rows * width];
        for n in 0..batch {
            let image = &images[n * img..(n + 1) * img];
            for r in 0..rows {
                let dst = &mut out[r * width + n * cols..r * width + (n + 1) * cols];
                for (d, t) in dst.iter_mut().zip(&table[r * cols..(r + 1) * cols]) {
                    if let Some(i) = *t {
                        *d = image[i];
                    }
                }
            }
        }
        out
    }

    /// Adds a batched patch-matrix gradient back onto the image gradients.
    pub fn col2im_batch<T: Scalar>(&self, patches: &[T], batch: usize, images: &mut [T]) {
        let (rows, cols, img) = (self.patch_rows(), self.patch_cols(), self.c * self.h * self.w);
        let table = self.tap_table();
        let width = batch * cols;
        for n in 0..batch {
            let image = &mut images[n * img..(n + 1) * img];
            for r in 0..rows {
                let src = &patches[r * width + n * cols..r * width + (n + 1) * cols];
                for (v, t) in src.iter().zip(&table[r * cols..(r + 1) * cols]) {
                    if let Some(i) = *t {
                        image[i] = image[i] + *v;
                    }
                }
            }
        }
    }
}
