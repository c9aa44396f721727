//! Raw forward/backward kernels over flat channels-last buffers.

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`; either operand may be
/// stored transposed (`a` as `k×m`, `b` as `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn rows(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    /// Row-major `[rows, kh·kw·cin]` patch matrix, zero outside the image.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo, patch) = (self.out_h(), self.out_w(), self.patch());
        let mut cols = vec![0.0; self.rows() * patch];
        let mut row = 0;
        for b in 0..self.n {
            let img = &x[b * self.h * self.w * self.cin..][..self.h * self.w * self.cin];
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = &mut cols[row * patch..][..patch];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (iy as usize * self.w + ix as usize) * self.cin;
                            let off = (ky * self.kw + kx) * self.cin;
                            dst[off..off + self.cin].copy_from_slice(&img[src..src + self.cin]);
                        }
                    }
                    row += 1;
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (ho, wo, patch) = (self.out_h(), self.out_w(), self.patch());
        let mut row = 0;
        for b in 0..self.n {
            let img = &mut dx[b * self.h * self.w * self.cin..][..self.h * self.w * self.cin];
            for oy in 0..ho {
                for ox in 0..wo {
                    let src = &cols[row * patch..][..patch];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let dst = (iy as usize * self.w + ix as usize) * self.cin;
                            let off = (ky * self.kw + kx) * self.cin;
                            for (d, s) in img[dst..dst + self.cin].iter_mut().zip(&src[off..off + self.cin]) {
                                *d += s;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], kernel: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let rows = g.rows();
    let mut out = vec![0.0; rows * g.cout];
    let owned;
    let cols: &[f64] = if g.is_pointwise() {
        x
    } else {
        owned = g.im2col(x);
        &owned
    };
    gemm(rows, g.patch(), g.cout, cols, false, kernel, false, 0.0, &mut out);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(g.cout) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    out
}

/// Returns `(dx, dkernel, dbias)` for the requested inputs.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    want_dx: bool,
    want_dkernel: bool,
    want_dbias: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let rows = g.rows();
    let patch = g.patch();
    let owned;
    let cols: &[f64] = if g.is_pointwise() || !want_dkernel {
        x
    } else {
        owned = g.im2col(x);
        &owned
    };
    let dkernel = want_dkernel.then(|| {
        let mut dk = vec![0.0; patch * g.cout];
        gemm(patch, rows, g.cout, cols, true, dout, false, 0.0, &mut dk);
        dk
    });
    let dbias = want_dbias.then(|| {
        let mut db = vec![0.0; g.cout];
        for row in dout.chunks_exact(g.cout) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
        db
    });
    let dx = want_dx.then(|| {
        if g.is_pointwise() {
            let mut dx = vec![0.0; rows * patch];
            gemm(rows, g.cout, patch, dout, false, kernel, true, 0.0, &mut dx);
            dx
        } else if g.stride == 1 && g.kh == g.kw && g.padding < g.kh {
            transposed_conv_stride1(g, kernel, dout)
        } else {
            col2im_input_grad(g, kernel, dout)
        }
    });
    (dx, dkernel, dbias)
}

fn col2im_input_grad(g: &ConvGeometry, kernel: &[f64], dout: &[f64]) -> Vec<f64> {
    let mut dcols = vec![0.0; g.rows() * g.patch()];
    gemm(g.rows(), g.cout, g.patch(), dout, false, kernel, true, 0.0, &mut dcols);
    let mut dx = vec![0.0; g.n * g.h * g.w * g.cin];
    g.col2im(&dcols, &mut dx);
    dx
}

/// Input gradient of a stride-1 convolution as a forward convolution of
/// `dout` with the spatially flipped, channel-transposed kernel.
fn transposed_conv_stride1(g: &ConvGeometry, kernel: &[f64], dout: &[f64]) -> Vec<f64> {
    let (kh, kw, cin, cout) = (g.kh, g.kw, g.cin, g.cout);
    let mut flipped = vec![0.0; kernel.len()];
    for ky in 0..kh {
        for kx in 0..kw {
            let src = ((kh - 1 - ky) * kw + (kw - 1 - kx)) * cin * cout;
            let dst = (ky * kw + kx) * cout * cin;
            for ci in 0..cin {
                for co in 0..cout {
                    flipped[dst + co * cin + ci] = kernel[src + ci * cout + co];
                }
            }
        }
    }
    let back = ConvGeometry {
        n: g.n,
        h: g.out_h(),
        w: g.out_w(),
        cin: cout,
        kh,
        kw,
        cout: cin,
        stride: 1,
        padding: kh - 1 - g.padding,
    };
    debug_assert_eq!((back.out_h(), back.out_w()), (g.h, g.w));
    conv2d_forward(&back, dout, &flipped, None)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct PoolGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub window: usize,
    pub stride: usize,
}

impl PoolGeometry {
    pub fn out_h(&self) -> usize {
        (self.h - self.window) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - self.window) / self.stride + 1
    }
}

pub(crate) fn avg_pool_forward(g: &PoolGeometry, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let area = (g.window * g.window) as f64;
    let mut out = vec![0.0; g.n * ho * wo * g.c];
    for b in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let dst = &mut out[((b * ho + oy) * wo + ox) * g.c..][..g.c];
                for ky in 0..g.window {
                    for kx in 0..g.window {
                        let (iy, ix) = (oy * g.stride + ky, ox * g.stride + kx);
                        let src = &x[((b * g.h + iy) * g.w + ix) * g.c..][..g.c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                dst.iter_mut().for_each(|d| *d /= area);
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(g: &PoolGeometry, dout: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let area = (g.window * g.window) as f64;
    let mut dx = vec![0.0; g.n * g.h * g.w * g.c];
    for b in 0..g.n {
        for oy in 0..ho {
            for ox in 0..wo {
                let src = &dout[((b * ho + oy) * wo + ox) * g.c..][..g.c];
                for ky in 0..g.window {
                    for kx in 0..g.window {
                        let (iy, ix) = (oy * g.stride + ky, ox * g.stride + kx);
                        let dst = &mut dx[((b * g.h + iy) * g.w + ix) * g.c..][..g.c];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s / area;
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) const BN_EPS: f64 = 1e-5;

/// Per-channel mean and biased variance over all leading positions.
pub(crate) fn channel_moments(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for row in x.chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= count);
    (mean, var)
}

pub(crate) fn batchnorm_apply(x: &[f64], c: usize, mean: &[f64], var: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let scale: Vec<f64> = var
        .iter()
        .zip(gamma)
        .map(|(v, g)| g / (v + BN_EPS).sqrt())
        .collect();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        for ch in 0..c {
            out.push((row[ch] - mean[ch]) * scale[ch] + beta[ch]);
        }
    }
    out
}

/// Backward through batch-statistics normalization. Returns `(dx, dgamma, dbeta)`.
pub(crate) fn batchnorm_train_backward(
    x: &[f64],
    c: usize,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let count = (x.len() / c) as f64;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    for (row, drow) in x.chunks_exact(c).zip(dout.chunks_exact(c)) {
        for ch in 0..c {
            let xhat = (row[ch] - mean[ch]) * inv_std[ch];
            dbeta[ch] += drow[ch];
            dgamma[ch] += drow[ch] * xhat;
        }
    }
    let mut dx = Vec::with_capacity(x.len());
    for (row, drow) in x.chunks_exact(c).zip(dout.chunks_exact(c)) {
        for ch in 0..c {
            let xhat = (row[ch] - mean[ch]) * inv_std[ch];
            let k = gamma[ch] * inv_std[ch] / count;
            dx.push(k * (count * drow[ch] - dbeta[ch] - xhat * dgamma[ch]));
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window cross-correlation, independent of im2col/gemm.
    fn conv_oracle(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
        let (ho, wo) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.n * ho * wo * g.cout];
        for b in 0..g.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..g.cout {
                        let mut acc = 0.0;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    let xv = x[((b * g.h + iy as usize) * g.w + ix as usize) * g.cin + ci];
                                    let kv = k[((ky * g.kw + kx) * g.cin + ci) * g.cout + co];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((b * ho + oy) * wo + ox) * g.cout + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_sliding_window() {
        for &(stride, padding, kh) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (1, 0, 3)] {
            let g = ConvGeometry { n: 2, h: 7, w: 6, cin: 3, kh, kw: kh, cout: 4, stride, padding };
            let x: Vec<f64> = (0..g.n * g.h * g.w * g.cin).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
            let k: Vec<f64> = (0..kh * kh * g.cin * g.cout).map(|i| ((i * 13 % 29) as f64) / 14.0 - 1.0).collect();
            let got = conv2d_forward(&g, &x, &k, None);
            let want = conv_oracle(&g, &x, &k);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {padding}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn transposed_conv_matches_col2im() {
        for &(padding, k) in &[(1, 3), (0, 3), (2, 3), (0, 1), (1, 2)] {
            let g = ConvGeometry { n: 2, h: 6, w: 5, cin: 3, kh: k, kw: k, cout: 4, stride: 1, padding };
            let k: Vec<f64> = (0..k * k * g.cin * g.cout).map(|i| ((i * 13 % 29) as f64) / 14.0 - 1.0).collect();
            let dout: Vec<f64> = (0..g.n * g.out_h() * g.out_w() * g.cout).map(|i| ((i * 7 % 23) as f64) / 11.0 - 1.0).collect();
            let a = transposed_conv_stride1(&g, &k, &dout);
            let b = col2im_input_grad(&g, &k, &dout);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12, "pad {padding}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
