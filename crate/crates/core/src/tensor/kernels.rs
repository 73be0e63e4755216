//! Raw slice kernels used by the graph evaluator. Layout is NCHW row-major.

/// Row-major matrix view: `rows x cols` with explicit strides, so transposes
/// are free.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        Mat {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = beta * c + a @ b` with `c` dense row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the views were bounds-checked on construction and `c` holds at
    // least m*n elements; strides describe in-bounds row-major/transposed
    // layouts of those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds one `c x h x w` image into `(c*k*k) x (h*w)` patches with zero
/// padding `k/2`.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, o) in out.iter_mut().enumerate() {
                        let sx = xo as isize + dx;
                        *o = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into the image.
pub(crate) fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + dxo;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], d: &ConvDims) -> Vec<f64> {
    let hw = d.h * d.w;
    let patch = d.cin * d.k * d.k;
    let mut out = vec![0.0; d.n * d.cout * hw];
    let mut cols = if d.k == 1 { Vec::new() } else { vec![0.0; patch * hw] };
    let wmat = Mat::new(weight, d.cout, patch);
    for b in 0..d.n {
        let xb = &x[b * d.cin * hw..(b + 1) * d.cin * hw];
        let ob = &mut out[b * d.cout * hw..(b + 1) * d.cout * hw];
        if d.k == 1 {
            gemm(wmat, Mat::new(xb, d.cin, hw), ob, 0.0);
        } else {
            im2col(xb, d.cin, d.h, d.w, d.k, &mut cols);
            gemm(wmat, Mat::new(&cols, patch, hw), ob, 0.0);
        }
    }
    out
}

/// Returns `(dx, dweight)`, each computed only when requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    d: &ConvDims,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let hw = d.h * d.w;
    let patch = d.cin * d.k * d.k;
    let mut dw = want_dw.then(|| vec![0.0; d.cout * patch]);
    let mut dx = want_dx.then(|| vec![0.0; d.n * d.cin * hw]);
    let mut cols = vec![0.0; patch * hw];
    let mut dcols = vec![0.0; patch * hw];
    let wmat = Mat::new(weight, d.cout, patch);
    for b in 0..d.n {
        let xb = &x[b * d.cin * hw..(b + 1) * d.cin * hw];
        let dyb = Mat::new(&dy[b * d.cout * hw..(b + 1) * d.cout * hw], d.cout, hw);
        // batch items accumulate in index order, so the sum is reproducible
        if let Some(dw) = dw.as_mut() {
            if d.k == 1 {
                gemm(dyb, Mat::new(xb, d.cin, hw).t(), dw, 1.0);
            } else {
                im2col(xb, d.cin, d.h, d.w, d.k, &mut cols);
                gemm(dyb, Mat::new(&cols, patch, hw).t(), dw, 1.0);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * d.cin * hw..(b + 1) * d.cin * hw];
            if d.k == 1 {
                gemm(wmat.t(), dyb, dxb, 0.0);
            } else {
                gemm(wmat.t(), dyb, &mut dcols, 0.0);
                col2im(&dcols, d.cin, d.h, d.w, d.k, dxb);
            }
        }
    }
    (dx, dw)
}

pub(crate) fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

pub(crate) fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

pub(crate) struct NormDims {
    pub n: usize,
    pub c: usize,
    pub spatial: usize,
    pub groups: usize,
}

fn group_stats(xg: &[f64], eps: f64) -> (f64, f64) {
    let m = xg.len() as f64;
    let mean = xg.iter().sum::<f64>() / m;
    let var = xg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
    (mean, 1.0 / (var + eps).sqrt())
}

pub(crate) fn group_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    d: &NormDims,
    eps: f64,
) -> Vec<f64> {
    let cg = d.c / d.groups;
    let glen = cg * d.spatial;
    let mut out = vec![0.0; x.len()];
    for b in 0..d.n {
        for g in 0..d.groups {
            let off = (b * d.c + g * cg) * d.spatial;
            let (mean, inv) = group_stats(&x[off..off + glen], eps);
            for cl in 0..cg {
                let ch = g * cg + cl;
                let base = off + cl * d.spatial;
                for i in base..base + d.spatial {
                    out[i] = (x[i] - mean) * inv * gamma[ch] + beta[ch];
                }
            }
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward(
    x: &[f64],
    gamma: &[f64],
    dy: &[f64],
    d: &NormDims,
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cg = d.c / d.groups;
    let glen = cg * d.spatial;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; d.c];
    let mut dbeta = vec![0.0; d.c];
    for b in 0..d.n {
        for g in 0..d.groups {
            let off = (b * d.c + g * cg) * d.spatial;
            let (mean, inv) = group_stats(&x[off..off + glen], eps);
            let mut sum_dxhat = 0.0;
            let mut sum_dxhat_xhat = 0.0;
            for cl in 0..cg {
                let ch = g * cg + cl;
                let base = off + cl * d.spatial;
                for i in base..base + d.spatial {
                    let xhat = (x[i] - mean) * inv;
                    let dxhat = dy[i] * gamma[ch];
                    dgamma[ch] += dy[i] * xhat;
                    dbeta[ch] += dy[i];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
            }
            let m = glen as f64;
            let mean_dxhat = sum_dxhat / m;
            let mean_dxhat_xhat = sum_dxhat_xhat / m;
            for cl in 0..cg {
                let ch = g * cg + cl;
                let base = off + cl * d.spatial;
                for i in base..base + d.spatial {
                    let xhat = (x[i] - mean) * inv;
                    let dxhat = dy[i] * gamma[ch];
                    dx[i] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Nearest-neighbour 2x decimation: keeps the top-left sample of each 2x2 block.
pub(crate) fn downsample2x(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for y in 0..ho {
            for xo in 0..wo {
                out[(p * ho + y) * wo + xo] = x[(p * h + 2 * y) * w + 2 * xo];
            }
        }
    }
    out
}

pub(crate) fn downsample2x_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..ho {
            for xo in 0..wo {
                dx[(p * h + 2 * y) * w + 2 * xo] = dy[(p * ho + y) * wo + xo];
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling of `planes` images of `h x w`.
pub(crate) fn upsample2x(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for y in 0..ho {
            for xo in 0..wo {
                out[(p * ho + y) * wo + xo] = x[(p * h + y / 2) * w + xo / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..ho {
            for xo in 0..wo {
                dx[(p * h + y / 2) * w + xo / 2] += dy[(p * ho + y) * wo + xo];
            }
        }
    }
    dx
}
