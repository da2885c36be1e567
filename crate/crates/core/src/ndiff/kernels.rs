//! Dense kernels shared by the graph ops: matrix products and 3×3 convolution
//! lowering (im2col / col2im, zero padding 1).

/// `c (m×n) = op(a) · op(b)` (or `+=` when `accumulate`).
///
/// `a` is stored row-major as `m×k`, or `k×m` when `trans_a`; likewise `b`
/// is `k×n`, or `n×k` when `trans_b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe row-major buffers whose lengths were
    // checked against m, k, n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a 3×3 convolution with padding 1.
pub(crate) fn conv_out(extent: usize, stride: usize) -> usize {
    (extent + 2 - 3) / stride + 1
}

/// Lowers a `(batch, c, h, w)` input to a `(c·9, batch·ho·wo)` column matrix.
pub(crate) fn im2col(x: &[f64], batch: usize, c: usize, h: usize, w: usize, stride: usize) -> Vec<f64> {
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let p = ho * wo;
    let cols_n = batch * p;
    let mut cols = vec![0.0; c * 9 * cols_n];
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for b in 0..batch {
                    let img = &x[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    let dst = &mut cols[row + b * p..row + (b + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &img[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    dx: &mut [f64],
) {
    let ho = conv_out(h, stride);
    let wo = conv_out(w, stride);
    let p = ho * wo;
    let cols_n = batch * p;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * cols_n;
                for b in 0..batch {
                    let img = &mut dx[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    let src = &cols[row + b * p..row + (b + 1) * p];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut img[iy as usize * w..(iy as usize + 1) * w];
                        let src_row = &src[oy * wo..(oy + 1) * wo];
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}
