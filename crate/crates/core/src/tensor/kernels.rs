//! Slice-level convolution kernels shared by the plain and taped APIs.
//!
//! Convolutions are lowered to GEMM through an im2col buffer of shape
//! `(C·R·R) × (Ho·Wo)`.

use super::ops::ConvGeometry;

/// Output length of a cross-correlation along one axis.
pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Output length of a transposed convolution along one axis.
pub(crate) fn transposed_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + kernel + out_pad;
    (full > 2 * pad).then(|| full - 2 * pad)
}

pub(crate) struct Plane {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn im2col(
    x: &[f64],
    src: &Plane,
    k: (usize, usize),
    g: &ConvGeometry,
    out: (usize, usize),
    cols: &mut [f64],
) {
    let (kh, kw) = k;
    let (ho, wo) = out;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let npix = ho * wo;
    for c in 0..src.c {
        let xc = &x[c * src.h * src.w..(c + 1) * src.h * src.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= src.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &xc[iy as usize * src.w..(iy as usize + 1) * src.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        *d = if ix < 0 || ix >= src.w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `dst`, accumulating.
pub(crate) fn col2im(
    cols: &[f64],
    dst_plane: &Plane,
    k: (usize, usize),
    g: &ConvGeometry,
    out: (usize, usize),
    dst: &mut [f64],
) {
    let (kh, kw) = k;
    let (ho, wo) = out;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let npix = ho * wo;
    for c in 0..dst_plane.c {
        let dc = &mut dst[c * dst_plane.h * dst_plane.w..(c + 1) * dst_plane.h * dst_plane.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * sh + ky) as isize - ph as isize;
                    if iy < 0 || iy >= dst_plane.h as isize {
                        continue;
                    }
                    let drow = &mut dc[iy as usize * dst_plane.w..(iy as usize + 1) * dst_plane.w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * sw + kx) as isize - pw as isize;
                        if ix >= 0 && ix < dst_plane.w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` with row-major operands; `op` transposes
/// when the corresponding flag is set. `op(a)` is m×k, `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major blocks whose lengths are checked in the debug assertion.
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

fn is_pointwise(k: (usize, usize), g: &ConvGeometry) -> bool {
    k == (1, 1) && g.stride == (1, 1) && g.padding == (0, 0)
}

/// Cross-correlation for one batch element. `w` is `(co, ci, kh, kw)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward_item(
    x: &[f64],
    src: &Plane,
    w: &[f64],
    co: usize,
    k: (usize, usize),
    g: &ConvGeometry,
    out: (usize, usize),
    y: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let rows = src.c * k.0 * k.1;
    let npix = out.0 * out.1;
    if is_pointwise(k, g) {
        gemm(co, rows, npix, w, false, x, false, 0.0, y);
        return;
    }
    scratch.resize(rows * npix, 0.0);
    im2col(x, src, k, g, out, scratch);
    gemm(co, rows, npix, w, false, scratch, false, 0.0, y);
}

/// Adjoint of [`conv_forward_item`] with respect to its input: accumulates
/// `col2im(wᵀ·dy)` into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_input_adjoint_item(
    dy: &[f64],
    w: &[f64],
    co: usize,
    dst: &Plane,
    k: (usize, usize),
    g: &ConvGeometry,
    out: (usize, usize),
    dx: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let rows = dst.c * k.0 * k.1;
    let npix = out.0 * out.1;
    if is_pointwise(k, g) {
        gemm(rows, co, npix, w, true, dy, false, 1.0, dx);
        return;
    }
    scratch.resize(rows * npix, 0.0);
    gemm(rows, co, npix, w, true, dy, false, 0.0, scratch);
    col2im(scratch, dst, k, g, out, dx);
}

/// Accumulates `dw += dy · cols(x)ᵀ` for one batch element.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_weight_grad_item(
    x: &[f64],
    src: &Plane,
    dy: &[f64],
    co: usize,
    k: (usize, usize),
    g: &ConvGeometry,
    out: (usize, usize),
    dw: &mut [f64],
    scratch: &mut Vec<f64>,
) {
    let rows = src.c * k.0 * k.1;
    let npix = out.0 * out.1;
    if is_pointwise(k, g) {
        gemm(co, npix, rows, dy, false, x, true, 1.0, dw);
        return;
    }
    scratch.resize(rows * npix, 0.0);
    im2col(x, src, k, g, out, scratch);
    gemm(co, npix, rows, dy, false, scratch, true, 1.0, dw);
}

/// Depthwise cross-correlation of one channel plane with an `r×r` kernel.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_plane(
    x: &[f64],
    h: usize,
    w: usize,
    kern: &[f64],
    k: (usize, usize),
    g: &ConvGeometry,
    out: (usize, usize),
    y: &mut [f64],
) {
    let (ho, wo) = out;
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = 0.0;
            for ky in 0..k.0 {
                let iy = (oy * g.stride.0 + ky) as isize - g.padding.0 as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k.1 {
                    let ix = (ox * g.stride.1 + kx) as isize - g.padding.1 as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    acc += kern[ky * k.1 + kx] * x[iy as usize * w + ix as usize];
                }
            }
            y[oy * wo + ox] = acc;
        }
    }
}

/// Gradients of [`depthwise_plane`], accumulated into `dx` and `dk`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn depthwise_plane_backward(
    x: &[f64],
    h: usize,
    w: usize,
    kern: &[f64],
    k: (usize, usize),
    g: &ConvGeometry,
    out: (usize, usize),
    dy: &[f64],
    dx: &mut [f64],
    dk: &mut [f64],
) {
    let (ho, wo) = out;
    for oy in 0..ho {
        for ox in 0..wo {
            let gy = dy[oy * wo + ox];
            if gy == 0.0 {
                continue;
            }
            for ky in 0..k.0 {
                let iy = (oy * g.stride.0 + ky) as isize - g.padding.0 as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k.1 {
                    let ix = (ox * g.stride.1 + kx) as isize - g.padding.1 as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xi = iy as usize * w + ix as usize;
                    dx[xi] += kern[ky * k.1 + kx] * gy;
                    dk[ky * k.1 + kx] += x[xi] * gy;
                }
            }
        }
    }
}
