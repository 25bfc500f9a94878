//! Dense row-major kernels shared by forward and backward passes.
//!
//! All loops run in a fixed order so reductions are bit-reproducible.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += a · bᵀ` where `a` is `m×n` and `b` is `k×n`.
pub fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + p] += s;
        }
    }
}

/// Geometry of a square-kernel 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(c_in: usize, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            kernel,
            stride,
            pad,
            h_out: (h + 2 * pad - kernel) / stride + 1,
            w_out: (w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds one `c_in×h×w` image into a `(c_in·k·k) × (h_out·w_out)` matrix.
    pub fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let k = self.kernel;
        let np = self.col_cols();
        for c in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let row = &mut cols[r * np..(r + 1) * np];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            row[oy * self.w_out + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                img[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back onto the image.
    pub fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let k = self.kernel;
        let np = self.col_cols();
        for c in 0..self.c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let r = (c * k + ky) * k + kx;
                    let row = &cols[r * np..(r + 1) * np];
                    for oy in 0..self.h_out {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            img[(c * self.h + iy as usize) * self.w + ix as usize] += row[oy * self.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Floor-based adaptive window bounds: window `i` of `k` over `extent` cells.
pub fn adaptive_bounds(i: usize, k: usize, extent: usize) -> (usize, usize) {
    (i * extent / k, (i + 1) * extent / k)
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position of `shape.permute(perm)`, the source offset in the input.
pub fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut idx = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        idx.push(off);
        for d in (0..out_shape.len()).rev() {
            counter[d] += 1;
            off += src_strides[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    idx
}
