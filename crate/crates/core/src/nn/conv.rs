//! Convolution kernels over contiguous `f32` buffers.
//!
//! Layouts: conv3d input `[N, C, D, H, W]`, kernel `[O, C, KD, KH, KW]`;
//! transposed conv2d input `[N, C, H, W]`, kernel `[C, O, KH, KW]`.

use crate::error::{Error, Result};

/// Stride and zero padding per spatial axis (depth, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// Padding `k / 2` on every axis: with stride 1 and odd kernels every extent is preserved.
    pub fn same(kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            stride,
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn output_extent(&self, axis: usize, input: usize, kernel: usize) -> Result<usize> {
        let s = self.stride[axis];
        let p = self.padding[axis];
        if s == 0 {
            return Err(Error::shape("conv3d", "stride must be positive"));
        }
        if input + 2 * p < kernel {
            return Err(Error::shape(
                "conv3d",
                format!("axis {axis}: padded extent {} smaller than kernel {kernel}", input + 2 * p),
            ));
        }
        Ok((input + 2 * p - kernel) / s + 1)
    }
}

/// Output indices `o < out` whose tap `o*s + k - p` lands inside `[0, input)`.
#[inline]
fn valid_range(k: usize, s: usize, p: usize, input: usize, out: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if input + p <= k {
        0
    } else {
        ((input - 1 + p - k) / s + 1).min(out)
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv3d_out_shape(xs: &[usize], ws: &[usize], g: &Conv3dGeometry) -> Result<[usize; 5]> {
    if xs.len() != 5 || ws.len() != 5 {
        return Err(Error::shape(
            "conv3d",
            format!("expected rank-5 input and kernel, got {xs:?} and {ws:?}"),
        ));
    }
    if xs[1] != ws[1] {
        return Err(Error::shape(
            "conv3d",
            format!("kernel expects {} input channels, input has {}", ws[1], xs[1]),
        ));
    }
    Ok([
        xs[0],
        ws[0],
        g.output_extent(0, xs[2], ws[2])?,
        g.output_extent(1, xs[3], ws[3])?,
        g.output_extent(2, xs[4], ws[4])?,
    ])
}

pub(crate) fn conv3d_forward(
    x: &[f32],
    xs: [usize; 5],
    w: &[f32],
    ws: [usize; 5],
    bias: Option<&[f32]>,
    g: &Conv3dGeometry,
    os: [usize; 5],
) -> Vec<f32> {
    let [n_batch, c_in, d, h, wd] = xs;
    let [c_out, _, kd, kh, kw] = ws;
    let [_, _, od, oh, ow] = os;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let in_vol = d * h * wd;
    let out_vol = od * oh * ow;
    let k_vol = kd * kh * kw;
    let mut out = vec![0.0f32; n_batch * c_out * out_vol];
    for n in 0..n_batch {
        for o in 0..c_out {
            let dst = &mut out[(n * c_out + o) * out_vol..][..out_vol];
            if let Some(b) = bias {
                dst.fill(b[o]);
            }
            for c in 0..c_in {
                let src = &x[(n * c_in + c) * in_vol..][..in_vol];
                let wk = &w[(o * c_in + c) * k_vol..][..k_vol];
                for a in 0..kd {
                    let (d0, d1) = valid_range(a, sd, pd, d, od);
                    for b in 0..kh {
                        let (h0, h1) = valid_range(b, sh, ph, h, oh);
                        for e in 0..kw {
                            let (w0, w1) = valid_range(e, sw, pw, wd, ow);
                            let wv = wk[(a * kh + b) * kw + e];
                            for zo in d0..d1 {
                                let zi = zo * sd + a - pd;
                                for yo in h0..h1 {
                                    let yi = yo * sh + b - ph;
                                    let orow = &mut dst[(zo * oh + yo) * ow..][..ow];
                                    let irow = &src[(zi * h + yi) * wd..][..wd];
                                    for xo in w0..w1 {
                                        orow[xo] += wv * irow[xo * sw + e - pw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; `dx` only when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3d_backward(
    x: &[f32],
    xs: [usize; 5],
    w: &[f32],
    ws: [usize; 5],
    g: &Conv3dGeometry,
    os: [usize; 5],
    grad_out: &[f32],
    want_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let [n_batch, c_in, d, h, wd] = xs;
    let [c_out, _, kd, kh, kw] = ws;
    let [_, _, od, oh, ow] = os;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.padding;
    let in_vol = d * h * wd;
    let out_vol = od * oh * ow;
    let k_vol = kd * kh * kw;
    let mut dx = want_dx.then(|| vec![0.0f32; x.len()]);
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; c_out];
    for n in 0..n_batch {
        for o in 0..c_out {
            let go = &grad_out[(n * c_out + o) * out_vol..][..out_vol];
            db[o] += go.iter().sum::<f32>();
            for c in 0..c_in {
                let src = &x[(n * c_in + c) * in_vol..][..in_vol];
                let wbase = (o * c_in + c) * k_vol;
                for a in 0..kd {
                    let (d0, d1) = valid_range(a, sd, pd, d, od);
                    for b in 0..kh {
                        let (h0, h1) = valid_range(b, sh, ph, h, oh);
                        for e in 0..kw {
                            let (w0, w1) = valid_range(e, sw, pw, wd, ow);
                            let widx = wbase + (a * kh + b) * kw + e;
                            let wv = w[widx];
                            let mut acc = 0.0f32;
                            for zo in d0..d1 {
                                let zi = zo * sd + a - pd;
                                for yo in h0..h1 {
                                    let yi = yo * sh + b - ph;
                                    let grow = &go[(zo * oh + yo) * ow..][..ow];
                                    let irow = &src[(zi * h + yi) * wd..][..wd];
                                    for xo in w0..w1 {
                                        acc += grow[xo] * irow[xo * sw + e - pw];
                                    }
                                    if let Some(dx) = dx.as_mut() {
                                        let drow = &mut dx[(n * c_in + c) * in_vol + (zi * h + yi) * wd..][..wd];
                                        for xo in w0..w1 {
                                            drow[xo * sw + e - pw] += wv * grow[xo];
                                        }
                                    }
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Stride/padding of a 2-D transposed convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvTranspose2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

pub(crate) fn conv_transpose2d_out_shape(
    xs: &[usize],
    ws: &[usize],
    g: &ConvTranspose2dGeometry,
) -> Result<[usize; 4]> {
    if xs.len() != 4 || ws.len() != 4 {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("expected rank-4 input and kernel, got {xs:?} and {ws:?}"),
        ));
    }
    if xs[1] != ws[0] {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("kernel expects {} input channels, input has {}", ws[0], xs[1]),
        ));
    }
    if g.stride == 0 {
        return Err(Error::shape("conv_transpose2d", "stride must be positive"));
    }
    let extent = |i: usize, k: usize| -> Result<usize> {
        let full = (i - 1) * g.stride + k;
        full.checked_sub(2 * g.padding)
            .filter(|&e| e > 0)
            .ok_or_else(|| Error::shape("conv_transpose2d", "padding consumes the whole output"))
    };
    Ok([xs[0], ws[1], extent(xs[2], ws[2])?, extent(xs[3], ws[3])?])
}

/// Row-major `c = beta·c + a · b` for `a: [m, k]` and `b: [k, n]`, with
/// either operand optionally read transposed from its stored layout.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, beta: f32, c: &mut [f32]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the asserted extents.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Transposed conv2d as `cols = Wᵀ · X` per image followed by a scatter of
/// each `(o, a, b)` column row into the output.
pub(crate) fn conv_transpose2d_forward(
    x: &[f32],
    xs: [usize; 4],
    w: &[f32],
    ws: [usize; 4],
    bias: Option<&[f32]>,
    g: &ConvTranspose2dGeometry,
    os: [usize; 4],
) -> Vec<f32> {
    let [n_batch, c_in, h, wd] = xs;
    let [_, c_out, kh, kw] = ws;
    let [_, _, oh, ow] = os;
    let (s, p) = (g.stride, g.padding);
    let (hw, rows) = (h * wd, c_out * kh * kw);
    let mut out = vec![0.0f32; n_batch * c_out * oh * ow];
    let mut cols = vec![0.0f32; rows * hw];
    for n in 0..n_batch {
        gemm(rows, c_in, hw, w, true, &x[n * c_in * hw..][..c_in * hw], false, 0.0, &mut cols);
        for o in 0..c_out {
            let dst = &mut out[(n * c_out + o) * oh * ow..][..oh * ow];
            if let Some(b) = bias {
                dst.fill(b[o]);
            }
            for a in 0..kh {
                let (i0, i1) = valid_range(a, s, p, oh, h);
                for b in 0..kw {
                    let (j0, j1) = valid_range(b, s, p, ow, wd);
                    let col = &cols[((o * kh + a) * kw + b) * hw..][..hw];
                    for i in i0..i1 {
                        let orow = &mut dst[(i * s + a - p) * ow..][..ow];
                        let crow = &col[i * wd..][..wd];
                        for j in j0..j1 {
                            orow[j * s + b - p] += crow[j];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward(
    x: &[f32],
    xs: [usize; 4],
    w: &[f32],
    ws: [usize; 4],
    g: &ConvTranspose2dGeometry,
    os: [usize; 4],
    grad_out: &[f32],
    want_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let [n_batch, c_in, h, wd] = xs;
    let [_, c_out, kh, kw] = ws;
    let [_, _, oh, ow] = os;
    let (s, p) = (g.stride, g.padding);
    let (hw, rows) = (h * wd, c_out * kh * kw);
    let mut dx = want_dx.then(|| vec![0.0f32; x.len()]);
    let mut dw = vec![0.0f32; w.len()];
    let mut db = vec![0.0f32; c_out];
    let mut dcols = vec![0.0f32; rows * hw];
    for n in 0..n_batch {
        // Gather the output gradient back into column form.
        for o in 0..c_out {
            let go = &grad_out[(n * c_out + o) * oh * ow..][..oh * ow];
            db[o] += go.iter().sum::<f32>();
            for a in 0..kh {
                let (i0, i1) = valid_range(a, s, p, oh, h);
                for b in 0..kw {
                    let (j0, j1) = valid_range(b, s, p, ow, wd);
                    let col = &mut dcols[((o * kh + a) * kw + b) * hw..][..hw];
                    col.fill(0.0);
                    for i in i0..i1 {
                        let grow = &go[(i * s + a - p) * ow..][..ow];
                        let crow = &mut col[i * wd..][..wd];
                        for j in j0..j1 {
                            crow[j] = grow[j * s + b - p];
                        }
                    }
                }
            }
        }
        let xn = &x[n * c_in * hw..][..c_in * hw];
        // dW [c_in, rows] += X · dcolsᵀ
        gemm(c_in, hw, rows, xn, false, &dcols, true, 1.0, &mut dw);
        if let Some(dx) = dx.as_mut() {
            // dX [c_in, hw] = W · dcols
            gemm(c_in, rows, hw, w, false, &dcols, false, 0.0, &mut dx[n * c_in * hw..][..c_in * hw]);
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for k in 0..5 {
            for s in 1..4 {
                for p in 0..4 {
                    for input in 1..9 {
                        for out in 0..9 {
                            let expect: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let t = (o * s + k) as isize - p as isize;
                                    t >= 0 && (t as usize) < input
                                })
                                .collect();
                            let (lo, hi) = valid_range(k, s, p, input, out);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), expect, "k={k} s={s} p={p} i={input} o={out}");
                        }
                    }
                }
            }
        }
    }
}
