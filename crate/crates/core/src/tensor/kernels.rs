//! Convolution and matrix-product kernels over raw row-major buffers.
//!
//! Convolutions lower to im2col + GEMM. Every kernel processes the batch in
//! index order, so reductions across samples always happen in the same order.

/// Stride/padding pair shared by a convolution and its transpose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeom {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent of a forward convolution, `None` when it is not integral.
    pub fn conv_out(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if self.stride == 0 || padded < self.kernel || (padded - self.kernel) % self.stride != 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Output extent of a transposed convolution.
    pub fn transpose_out(&self, len: usize) -> Option<usize> {
        if len == 0 || self.stride == 0 {
            return None;
        }
        ((len - 1) * self.stride + self.kernel).checked_sub(2 * self.padding)
            .filter(|&n| n > 0)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and
/// `op(b)` of shape `k x n`; all matrices row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Unfolds one `[channels, height, width]` image into a
/// `[channels * k * k, out_h * out_w]` column matrix.
pub fn im2col(
    img: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    geom: ConvGeom,
    out_h: usize,
    out_w: usize,
    col: &mut [f64],
) {
    let k = geom.kernel;
    let plane = out_h * out_w;
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..out_h {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    let line = &mut dst[oy * out_w..(oy + 1) * out_w];
                    if iy < 0 || iy >= height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[(c * height + iy as usize) * width..][..width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        *v = if ix < 0 || ix >= width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
pub fn col2im(
    col: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    geom: ConvGeom,
    out_h: usize,
    out_w: usize,
    img: &mut [f64],
) {
    let k = geom.kernel;
    let plane = out_h * out_w;
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..out_h {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= height as isize {
                        continue;
                    }
                    let dst = &mut img[(c * height + iy as usize) * width..][..width];
                    for ox in 0..out_w {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix >= 0 && (ix as usize) < width {
                            dst[ix as usize] += src[oy * out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Shape bundle for a batched NCHW convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Cross-correlation: `x [N, C, H, W]`, `w [O, C, k, k]` -> `y [N, O, H', W']`.
pub fn conv2d_forward(x: &[f64], w: &[f64], d: ConvDims, geom: ConvGeom) -> Vec<f64> {
    let ckk = d.in_channels * geom.kernel * geom.kernel;
    let plane = d.out_h * d.out_w;
    let in_len = d.in_channels * d.in_h * d.in_w;
    let out_len = d.out_channels * plane;
    let mut col = vec![0.0; ckk * plane];
    let mut y = vec![0.0; d.batch * out_len];
    for n in 0..d.batch {
        im2col(
            &x[n * in_len..(n + 1) * in_len],
            d.in_channels,
            d.in_h,
            d.in_w,
            geom,
            d.out_h,
            d.out_w,
            &mut col,
        );
        gemm(
            d.out_channels,
            ckk,
            plane,
            1.0,
            w,
            false,
            &col,
            false,
            0.0,
            &mut y[n * out_len..(n + 1) * out_len],
        );
    }
    y
}

/// Gradients of [`conv2d_forward`]. `gx` is only computed when requested;
/// `gw` is accumulated into.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: ConvDims,
    geom: ConvGeom,
    mut gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
) {
    let ckk = d.in_channels * geom.kernel * geom.kernel;
    let plane = d.out_h * d.out_w;
    let in_len = d.in_channels * d.in_h * d.in_w;
    let out_len = d.out_channels * plane;
    let mut col = vec![0.0; ckk * plane];
    let mut gw = gw;
    for n in 0..d.batch {
        let gy_n = &gy[n * out_len..(n + 1) * out_len];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(
                &x[n * in_len..(n + 1) * in_len],
                d.in_channels,
                d.in_h,
                d.in_w,
                geom,
                d.out_h,
                d.out_w,
                &mut col,
            );
            gemm(d.out_channels, plane, ckk, 1.0, gy_n, false, &col, true, 1.0, gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            gemm(ckk, d.out_channels, plane, 1.0, w, true, gy_n, false, 0.0, &mut col);
            col2im(
                &col,
                d.in_channels,
                d.in_h,
                d.in_w,
                geom,
                d.out_h,
                d.out_w,
                &mut gx[n * in_len..(n + 1) * in_len],
            );
        }
    }
}

/// Transposed convolution: `x [N, C, H, W]`, `w [C, O, k, k]` -> `y [N, O, H', W']`
/// with `H' = (H - 1) * stride - 2 * padding + k`.
///
/// `d.in_*` describes `x`, `d.out_*` describes `y`.
pub fn conv_transpose2d_forward(x: &[f64], w: &[f64], d: ConvDims, geom: ConvGeom) -> Vec<f64> {
    let okk = d.out_channels * geom.kernel * geom.kernel;
    let plane = d.in_h * d.in_w;
    let in_len = d.in_channels * plane;
    let out_len = d.out_channels * d.out_h * d.out_w;
    let mut col = vec![0.0; okk * plane];
    let mut y = vec![0.0; d.batch * out_len];
    for n in 0..d.batch {
        gemm(
            okk,
            d.in_channels,
            plane,
            1.0,
            w,
            true,
            &x[n * in_len..(n + 1) * in_len],
            false,
            0.0,
            &mut col,
        );
        col2im(
            &col,
            d.out_channels,
            d.out_h,
            d.out_w,
            geom,
            d.in_h,
            d.in_w,
            &mut y[n * out_len..(n + 1) * out_len],
        );
    }
    y
}

/// Gradients of [`conv_transpose2d_forward`]; `gw` is accumulated into.
pub fn conv_transpose2d_backward(
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    d: ConvDims,
    geom: ConvGeom,
    mut gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
) {
    let okk = d.out_channels * geom.kernel * geom.kernel;
    let plane = d.in_h * d.in_w;
    let in_len = d.in_channels * plane;
    let out_len = d.out_channels * d.out_h * d.out_w;
    let mut col = vec![0.0; okk * plane];
    let mut gw = gw;
    for n in 0..d.batch {
        im2col(
            &gy[n * out_len..(n + 1) * out_len],
            d.out_channels,
            d.out_h,
            d.out_w,
            geom,
            d.in_h,
            d.in_w,
            &mut col,
        );
        if let Some(gw) = gw.as_deref_mut() {
            gemm(
                d.in_channels,
                plane,
                okk,
                1.0,
                &x[n * in_len..(n + 1) * in_len],
                false,
                &col,
                true,
                1.0,
                gw,
            );
        }
        if let Some(gx) = gx.as_deref_mut() {
            gemm(
                d.in_channels,
                okk,
                plane,
                1.0,
                w,
                false,
                &col,
                false,
                1.0,
                &mut gx[n * in_len..(n + 1) * in_len],
            );
        }
    }
}
