//! im2col-based 2D convolution kernels (NCHW) and their adjoints.

use super::tensor::Tensor;

/// Geometry of a convolution reading a `c × h × w` plane and producing `oh × ow`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn forward(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "kernel larger than padded input"
        );
        Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where `a` is
/// `m × k` (or `k × m` when `ta`) and `b` is `k × n` (or `n × k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // the strides chosen for each layout.
    unsafe {
        matrixmultiply::sgemm(
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

pub(crate) fn im2col(x: &[f32], g: &ConvGeom, col: &mut [f32]) {
    let plane = g.h * g.w;
    let ncols = g.cols();
    for c in 0..g.c {
        let xc = &x[c * plane..(c + 1) * plane];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let out = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

/// Adjoint of [`im2col`]: scatter-adds `col` back into `dx`.
pub(crate) fn col2im(col: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let plane = g.h * g.w;
    let ncols = g.cols();
    for c in 0..g.c {
        let xc = &mut dx[c * plane..(c + 1) * plane];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &src_row[oy * g.ow..(oy + 1) * g.ow];
                    for (ox, &s) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f32], bias: &[f32], plane: usize) {
    for (o, &b) in bias.iter().enumerate() {
        for v in &mut out[o * plane..(o + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad(dy: &Tensor) -> Tensor {
    let (n, c, h, w) = dy.dims4();
    let plane = h * w;
    let mut db = vec![0f64; c];
    for s in 0..n {
        for (o, acc) in db.iter_mut().enumerate() {
            let off = (s * c + o) * plane;
            *acc += dy.data()[off..off + plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
    }
    Tensor::new(&[c], db.into_iter().map(|v| v as f32).collect())
}

/// Cross-correlation of `x` (`N×C×H×W`) with `w` (`O×C×k×k`), zero padding.
pub(crate) fn conv2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (n, c, h, wd) = x.dims4();
    let (o, wc, k, k2) = w.dims4();
    assert_eq!(c, wc, "conv2d channel mismatch");
    assert_eq!(k, k2, "square kernels only");
    let g = ConvGeom::forward(c, h, wd, k, stride, pad);
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0f32; n * o * cols];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0f32; rows * cols]
    };
    for s in 0..n {
        let xs = &x.data()[s * c * h * wd..(s + 1) * c * h * wd];
        let src: &[f32] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, &g, &mut col);
            &col
        };
        let dst = &mut out[s * o * cols..(s + 1) * o * cols];
        gemm(o, rows, cols, w.data(), false, src, false, 0.0, dst);
        if let Some(b) = b {
            add_bias(dst, b.data(), cols);
        }
    }
    Tensor::new(&[n, o, g.oh, g.ow], out)
}

pub(crate) struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ConvGrads {
    let (n, c, h, wd) = x.dims4();
    let (o, _, k, _) = w.dims4();
    let g = ConvGeom::forward(c, h, wd, k, stride, pad);
    let (rows, cols) = (g.rows(), g.cols());
    let mut dx = need[0].then(|| vec![0f32; x.numel()]);
    let mut dw = need[1].then(|| vec![0f32; w.numel()]);
    let mut col = vec![0f32; rows * cols];
    for s in 0..n {
        let dys = &dy.data()[s * o * cols..(s + 1) * o * cols];
        if let Some(dw) = dw.as_mut() {
            let xs = &x.data()[s * c * h * wd..(s + 1) * c * h * wd];
            let src: &[f32] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            gemm(o, cols, rows, dys, false, src, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[s * c * h * wd..(s + 1) * c * h * wd];
            if g.is_pointwise() {
                gemm(rows, o, cols, w.data(), true, dys, false, 1.0, dxs);
            } else {
                gemm(rows, o, cols, w.data(), true, dys, false, 0.0, &mut col);
                col2im(&col, &g, dxs);
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d)),
        dw: dw.map(|d| Tensor::new(w.shape(), d)),
        db: need[2].then(|| bias_grad(dy)),
    }
}

pub(crate) fn conv_transpose_out(
    size: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> usize {
    (size - 1) * stride + k + out_pad - 2 * pad
}

/// Transposed convolution of `x` (`N×Ci×H×W`) with `w` (`Ci×Co×k×k`).
pub(crate) fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor {
    let (n, ci, h, wd) = x.dims4();
    let (wci, co, k, _) = w.dims4();
    assert_eq!(ci, wci, "conv_transpose2d channel mismatch");
    let oh = conv_transpose_out(h, k, stride, pad, out_pad);
    let ow = conv_transpose_out(wd, k, stride, pad, out_pad);
    let g = ConvGeom::forward(co, oh, ow, k, stride, pad);
    debug_assert_eq!((g.oh, g.ow), (h, wd));
    let (rows, cols) = (g.rows(), g.cols());
    let mut out = vec![0f32; n * co * oh * ow];
    let mut col = vec![0f32; rows * cols];
    for s in 0..n {
        let xs = &x.data()[s * ci * cols..(s + 1) * ci * cols];
        gemm(rows, ci, cols, w.data(), true, xs, false, 0.0, &mut col);
        let dst = &mut out[s * co * oh * ow..(s + 1) * co * oh * ow];
        col2im(&col, &g, dst);
        if let Some(b) = b {
            add_bias(dst, b.data(), oh * ow);
        }
    }
    Tensor::new(&[n, co, oh, ow], out)
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need: [bool; 3],
) -> ConvGrads {
    let (n, ci, h, wd) = x.dims4();
    let (_, co, k, _) = w.dims4();
    let (_, _, oh, ow) = dy.dims4();
    let g = ConvGeom::forward(co, oh, ow, k, stride, pad);
    debug_assert_eq!((g.oh, g.ow), (h, wd));
    let (rows, cols) = (g.rows(), g.cols());
    let mut dx = need[0].then(|| vec![0f32; x.numel()]);
    let mut dw = need[1].then(|| vec![0f32; w.numel()]);
    let mut col = vec![0f32; rows * cols];
    if dx.is_some() || dw.is_some() {
        for s in 0..n {
            im2col(
                &dy.data()[s * co * oh * ow..(s + 1) * co * oh * ow],
                &g,
                &mut col,
            );
            if let Some(dx) = dx.as_mut() {
                gemm(
                    ci,
                    rows,
                    cols,
                    w.data(),
                    false,
                    &col,
                    false,
                    0.0,
                    &mut dx[s * ci * cols..(s + 1) * ci * cols],
                );
            }
            if let Some(dw) = dw.as_mut() {
                let xs = &x.data()[s * ci * cols..(s + 1) * ci * cols];
                gemm(ci, cols, rows, xs, false, &col, true, 1.0, dw);
            }
        }
    }
    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape(), d)),
        dw: dw.map(|d| Tensor::new(w.shape(), d)),
        db: need[2].then(|| bias_grad(dy)),
    }
}
