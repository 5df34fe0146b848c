//! Raw numeric kernels behind the tape operations.

use crate::tape::ConvGeom;

/// `C[m,n] = A[m,k] * B[k,n] + beta * C`, with arbitrary strides on A and B
/// and a contiguous row-major C.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    }
    // SAFETY: the asserts above bound every index the kernel touches.
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

/// Unfolds one `[C, H, W]` image into `cols` laid out `[C*k*k, H*W]`,
/// zero padded.
fn im2col(geom: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let ConvGeom { cin, h, w, k, .. } = *geom;
    let pad = (k / 2) as isize;
    let hw = h * w;
    cols.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..cin {
        let src = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let dst = &mut cols[r * hw..(r + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                let s0 = (x0 as isize + dx) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sbase = sy as usize * w;
                    dst[y * w + x0..y * w + x1].copy_from_slice(&src[sbase + s0..sbase + s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adds `[C*k*k, H*W]` column gradients back onto one `[C, H, W]` image.
fn col2im(geom: &ConvGeom, dcols: &[f64], dx: &mut [f64]) {
    let ConvGeom { cin, h, w, k, .. } = *geom;
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let dst = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let src = &dcols[r * hw..(r + 1) * hw];
                let dy = ky as isize - pad;
                let ddx = kx as isize - pad;
                let x0 = (-ddx).max(0) as usize;
                let x1 = (w as isize - ddx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                let d0 = (x0 as isize + ddx) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dbase = sy as usize * w;
                    dst[dbase + d0..dbase + d0 + (x1 - x0)]
                        .iter_mut()
                        .zip(&src[y * w + x0..y * w + x1])
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

/// Returns the `[B, C_out, H, W]` output and the unfolded input `[B,
/// C_in*k*k, H*W]`, which the backward pass reuses. A 1x1 kernel needs no
/// unfolding and returns an empty buffer.
pub(crate) fn conv2d_forward(geom: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hw = geom.h * geom.w;
    let ckk = geom.cin * geom.k * geom.k;
    let mut cols = if geom.k == 1 { Vec::new() } else { vec![0.0; geom.batch * ckk * hw] };
    let mut out = vec![0.0; geom.batch * geom.cout * hw];
    for b in 0..geom.batch {
        let src: &[f64] = if geom.k == 1 {
            &x[b * ckk * hw..(b + 1) * ckk * hw]
        } else {
            let c = &mut cols[b * ckk * hw..(b + 1) * ckk * hw];
            im2col(geom, &x[b * geom.cin * hw..(b + 1) * geom.cin * hw], c);
            c
        };
        let dst = &mut out[b * geom.cout * hw..(b + 1) * geom.cout * hw];
        for (o, row) in dst.chunks_mut(hw).enumerate() {
            row.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(geom.cout, ckk, hw, kernel, ckk, 1, src, hw, 1, dst, 1.0);
    }
    (out, cols)
}

pub(crate) type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>);

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    geom: &ConvGeom,
    g: &[f64],
    x: &[f64],
    kernel: &[f64],
    cols: &[f64],
    want_x: bool,
    want_w: bool,
) -> ConvGrads {
    let hw = geom.h * geom.w;
    let ckk = geom.cin * geom.k * geom.k;
    let mut db = vec![0.0; geom.cout];
    let mut dw = want_w.then(|| vec![0.0; geom.cout * ckk]);
    let mut dx = want_x.then(|| vec![0.0; geom.batch * geom.cin * hw]);
    let mut dcols = if want_x && geom.k > 1 { vec![0.0; ckk * hw] } else { Vec::new() };
    for b in 0..geom.batch {
        let gb = &g[b * geom.cout * hw..(b + 1) * geom.cout * hw];
        for (o, row) in gb.chunks(hw).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        if let Some(dw) = dw.as_mut() {
            let src = if geom.k == 1 {
                &x[b * ckk * hw..(b + 1) * ckk * hw]
            } else {
                &cols[b * ckk * hw..(b + 1) * ckk * hw]
            };
            // dW += g_b * cols_b^T
            gemm(geom.cout, hw, ckk, gb, hw, 1, src, 1, hw, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * geom.cin * hw..(b + 1) * geom.cin * hw];
            if geom.k == 1 {
                gemm(ckk, geom.cout, hw, kernel, 1, ckk, gb, hw, 1, dxb, 0.0);
            } else {
                gemm(ckk, geom.cout, hw, kernel, 1, ckk, gb, hw, 1, &mut dcols, 0.0);
                col2im(geom, &dcols, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Geometry of a fused pair projection: `batch` images with `m` channels
/// per operand, `cout` outputs and `spatial` pixels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PairGeom {
    pub batch: usize,
    pub m: usize,
    pub cout: usize,
    pub spatial: usize,
}

/// `out[o] = bias[o] + sum_{i,j} w[o, i*m + j] * x[i] * y[j]`, i.e. a 1x1
/// convolution of the channel outer product, without materializing the
/// `m*m` channel intermediate. Per image, `T = W' y` with `W'` the weight
/// viewed as `[cout*m, m]`, then `out[o] = sum_i x[i] * T[o*m + i]`.
pub(crate) fn pair_project_forward(geom: &PairGeom, x: &[f64], y: &[f64], w: &[f64], bias: &[f64]) -> Vec<f64> {
    let PairGeom { batch, m, cout, spatial: hw } = *geom;
    let mut out = vec![0.0; batch * cout * hw];
    let mut t = vec![0.0; cout * m * hw];
    for b in 0..batch {
        let xb = &x[b * m * hw..(b + 1) * m * hw];
        let yb = &y[b * m * hw..(b + 1) * m * hw];
        gemm(cout * m, m, hw, w, m, 1, yb, hw, 1, &mut t, 0.0);
        for o in 0..cout {
            let dst = &mut out[(b * cout + o) * hw..(b * cout + o + 1) * hw];
            dst.iter_mut().for_each(|v| *v = bias[o]);
            for i in 0..m {
                let ti = &t[(o * m + i) * hw..(o * m + i + 1) * hw];
                let xi = &xb[i * hw..(i + 1) * hw];
                for ((d, a), c) in dst.iter_mut().zip(xi).zip(ti) {
                    *d += a * c;
                }
            }
        }
    }
    out
}

pub(crate) struct PairGrads {
    pub dx: Option<Vec<f64>>,
    pub dy: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pair_project_backward(
    geom: &PairGeom,
    g: &[f64],
    x: &[f64],
    y: &[f64],
    w: &[f64],
    want_x: bool,
    want_y: bool,
    want_w: bool,
) -> PairGrads {
    let PairGeom { batch, m, cout, spatial: hw } = *geom;
    let mut grads = PairGrads {
        dx: want_x.then(|| vec![0.0; batch * m * hw]),
        dy: want_y.then(|| vec![0.0; batch * m * hw]),
        dw: want_w.then(|| vec![0.0; cout * m * m]),
        db: vec![0.0; cout],
    };
    let mut t = vec![0.0; cout * m * hw];
    let mut dt = vec![0.0; cout * m * hw];
    for b in 0..batch {
        let xb = &x[b * m * hw..(b + 1) * m * hw];
        let yb = &y[b * m * hw..(b + 1) * m * hw];
        let gb = &g[b * cout * hw..(b + 1) * cout * hw];
        for (o, row) in gb.chunks(hw).enumerate() {
            grads.db[o] += row.iter().sum::<f64>();
        }
        if let Some(dx) = grads.dx.as_mut() {
            gemm(cout * m, m, hw, w, m, 1, yb, hw, 1, &mut t, 0.0);
            let dxb = &mut dx[b * m * hw..(b + 1) * m * hw];
            for o in 0..cout {
                let go = &gb[o * hw..(o + 1) * hw];
                for i in 0..m {
                    let ti = &t[(o * m + i) * hw..(o * m + i + 1) * hw];
                    for ((d, a), c) in dxb[i * hw..(i + 1) * hw].iter_mut().zip(go).zip(ti) {
                        *d += a * c;
                    }
                }
            }
        }
        if grads.dy.is_none() && grads.dw.is_none() {
            continue;
        }
        for o in 0..cout {
            let go = &gb[o * hw..(o + 1) * hw];
            for i in 0..m {
                let xi = &xb[i * hw..(i + 1) * hw];
                for ((d, a), c) in dt[(o * m + i) * hw..(o * m + i + 1) * hw].iter_mut().zip(go).zip(xi) {
                    *d = a * c;
                }
            }
        }
        if let Some(dw) = grads.dw.as_mut() {
            // dW' += dT * y_b^T
            gemm(cout * m, hw, m, &dt, hw, 1, yb, 1, hw, dw, 1.0);
        }
        if let Some(dy) = grads.dy.as_mut() {
            // dy_b = W'^T * dT
            gemm(m, cout * m, hw, w, 1, m, &dt, hw, 1, &mut dy[b * m * hw..(b + 1) * m * hw], 0.0);
        }
    }
    grads
}

pub(crate) fn channel_outer_forward(
    x: &[f64],
    y: &[f64],
    batch: usize,
    m: usize,
    spatial: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * m * spatial];
    for b in 0..batch {
        for i in 0..m {
            let xi = &x[(b * m + i) * spatial..(b * m + i + 1) * spatial];
            for j in 0..m {
                let yj = &y[(b * m + j) * spatial..(b * m + j + 1) * spatial];
                let o = ((b * m + i) * m + j) * spatial;
                for ((d, a), c) in out[o..o + spatial].iter_mut().zip(xi).zip(yj) {
                    *d = a * c;
                }
            }
        }
    }
    out
}

/// Gradient with respect to the left operand: `dx[i] = sum_j g[i*m+j] * y[j]`.
pub(crate) fn channel_outer_backward_left(
    g: &[f64],
    y: &[f64],
    batch: usize,
    m: usize,
    spatial: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; batch * m * spatial];
    for b in 0..batch {
        for i in 0..m {
            let dst = &mut dx[(b * m + i) * spatial..(b * m + i + 1) * spatial];
            for j in 0..m {
                let yj = &y[(b * m + j) * spatial..(b * m + j + 1) * spatial];
                let o = ((b * m + i) * m + j) * spatial;
                for ((d, gv), yv) in dst.iter_mut().zip(&g[o..o + spatial]).zip(yj) {
                    *d += gv * yv;
                }
            }
        }
    }
    dx
}

/// Gradient with respect to the right operand: `dy[j] = sum_i g[i*m+j] * x[i]`.
pub(crate) fn channel_outer_backward_right(
    g: &[f64],
    x: &[f64],
    batch: usize,
    m: usize,
    spatial: usize,
) -> Vec<f64> {
    let mut dy = vec![0.0; batch * m * spatial];
    for b in 0..batch {
        for i in 0..m {
            let xi = &x[(b * m + i) * spatial..(b * m + i + 1) * spatial];
            for j in 0..m {
                let dst = &mut dy[(b * m + j) * spatial..(b * m + j + 1) * spatial];
                let o = ((b * m + i) * m + j) * spatial;
                for ((d, gv), xv) in dst.iter_mut().zip(&g[o..o + spatial]).zip(xi) {
                    *d += gv * xv;
                }
            }
        }
    }
    dy
}
