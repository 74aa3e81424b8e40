//! Forward and reverse-mode kernels of the denoiser's building blocks.
//!
//! Activations are packed `(positions × channels)` matrices. Every backward
//! function accumulates parameter gradients in place and returns the input
//! gradient.

use rand::Rng;

use super::grid::NONE;
use crate::linalg::{accumulate_at_b, matmul, matmul_t, Mat};

pub const LN_EPS: f64 = 1e-5;
pub const L2_EPS: f64 = 1e-12;

/// `y = x·W (+ b)`, `W` is `(in × out)`.
pub fn linear(x: &Mat, w: &[f64], b: Option<&[f64]>, out: usize) -> Mat {
    let mut y = matmul(x, w, out);
    if let Some(b) = b {
        for r in 0..y.rows {
            for (v, bb) in y.row_mut(r).iter_mut().zip(b) {
                *v += *bb;
            }
        }
    }
    y
}

pub fn linear_backward(x: &Mat, w: &[f64], dy: &Mat, dw: &mut [f64], db: Option<&mut [f64]>) -> Mat {
    accumulate_at_b(x, dy, dw);
    if let Some(db) = db {
        for r in 0..dy.rows {
            for (g, d) in db.iter_mut().zip(dy.row(r)) {
                *g += *d;
            }
        }
    }
    matmul_t(dy, w, x.cols)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Mat) -> Mat {
    Mat::from_vec(x.rows, x.cols, x.data.iter().map(|v| v * sigmoid(*v)).collect())
}

pub fn silu_backward(x: &Mat, dy: &Mat) -> Mat {
    let data = x
        .data
        .iter()
        .zip(&dy.data)
        .map(|(v, d)| {
            let s = sigmoid(*v);
            d * s * (1.0 + v * (1.0 - s))
        })
        .collect();
    Mat::from_vec(x.rows, x.cols, data)
}

pub fn relu(x: &Mat) -> Mat {
    Mat::from_vec(x.rows, x.cols, x.data.iter().map(|v| v.max(0.0)).collect())
}

pub fn relu_backward(x: &Mat, dy: &Mat) -> Mat {
    let data = x.data.iter().zip(&dy.data).map(|(v, d)| if *v > 0.0 { *d } else { 0.0 }).collect();
    Mat::from_vec(x.rows, x.cols, data)
}

pub struct LayerNormCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

/// Layer norm over the channel axis.
pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> (Mat, LayerNormCache) {
    let c = x.cols;
    let mut y = Mat::zeros(x.rows, c);
    let mut xhat = Mat::zeros(x.rows, c);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for i in 0..c {
            xh[i] = (row[i] - mean) * is;
        }
        let yr = y.row_mut(r);
        for i in 0..c {
            yr[i] = gamma[i] * xhat.data[r * c + i] + beta[i];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &Mat,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Mat {
    let c = dy.cols;
    let mut dx = Mat::zeros(dy.rows, c);
    let mut dxh = vec![0.0; c];
    for r in 0..dy.rows {
        let d = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut sum = 0.0;
        let mut sum_x = 0.0;
        for i in 0..c {
            dgamma[i] += d[i] * xh[i];
            dbeta[i] += d[i];
            dxh[i] = d[i] * gamma[i];
            sum += dxh[i];
            sum_x += dxh[i] * xh[i];
        }
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for i in 0..c {
            out[i] = is / c as f64 * (c as f64 * dxh[i] - sum - xh[i] * sum_x);
        }
    }
    dx
}

/// Per-head L2 normalisation of `cols` channels starting at `col0` of `x`.
/// Returns the normalised `(rows × cols)` block and the norms used.
pub fn l2_normalize_heads(x: &Mat, col0: usize, cols: usize, heads: usize) -> (Mat, Vec<f64>) {
    let dh = cols / heads;
    let mut y = Mat::zeros(x.rows, cols);
    let mut norms = Vec::with_capacity(x.rows * heads);
    for r in 0..x.rows {
        let src = &x.row(r)[col0..col0 + cols];
        let dst = y.row_mut(r);
        for h in 0..heads {
            let s = &src[h * dh..(h + 1) * dh];
            let n = s.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            norms.push(n);
            for i in 0..dh {
                dst[h * dh + i] = s[i] / n;
            }
        }
    }
    (y, norms)
}

/// Writes the input gradient of the per-head normalisation into
/// `dx[:, col0..col0+cols]`.
pub fn l2_normalize_heads_backward(y: &Mat, norms: &[f64], dy: &Mat, heads: usize, dx: &mut Mat, col0: usize) {
    let cols = y.cols;
    let dh = cols / heads;
    for r in 0..y.rows {
        let yr = y.row(r);
        let dr = dy.row(r);
        let out = &mut dx.row_mut(r)[col0..col0 + cols];
        for h in 0..heads {
            let n = norms[r * heads + h];
            let sl = h * dh..(h + 1) * dh;
            let dot: f64 = yr[sl.clone()].iter().zip(&dr[sl.clone()]).map(|(a, b)| a * b).sum();
            let exact = n > L2_EPS;
            for i in sl {
                out[i] = if exact { (dr[i] - yr[i] * dot) / n } else { dr[i] / n };
            }
        }
    }
}

/// Weight layout `[head][offset][out][in]` reordered to `[offset][head][out][in]`.
fn offset_major(w: &[f64], heads: usize, n_off: usize, dh: usize) -> Vec<f64> {
    let blk = dh * dh;
    let mut out = vec![0.0; w.len()];
    for h in 0..heads {
        for o in 0..n_off {
            let src = (h * n_off + o) * blk;
            let dst = (o * heads + h) * blk;
            out[dst..dst + blk].copy_from_slice(&w[src..src + blk]);
        }
    }
    out
}

fn head_major_add(acc: &mut [f64], wt: &[f64], heads: usize, n_off: usize, dh: usize) {
    let blk = dh * dh;
    for h in 0..heads {
        for o in 0..n_off {
            let dst = (h * n_off + o) * blk;
            let src = (o * heads + h) * blk;
            for i in 0..blk {
                acc[dst + i] += wt[src + i];
            }
        }
    }
}

/// Grouped convolution over the grid: head `h` maps its `dh` channels with its
/// own `(dh × dh)` matrix per window offset. Weight layout
/// `[head][offset][out][in]`, bias per output channel. `nbr` has one row of
/// `n_off` entries per output position, indexing rows of `x`.
pub fn head_conv(x: &Mat, nbr: &[usize], n_off: usize, w: &[f64], b: &[f64], heads: usize) -> Mat {
    let dh = x.cols / heads;
    match dh {
        1 => conv_impl::<1>(x, nbr, n_off, w, b, heads, dh),
        2 => conv_impl::<2>(x, nbr, n_off, w, b, heads, dh),
        4 => conv_impl::<4>(x, nbr, n_off, w, b, heads, dh),
        8 => conv_impl::<8>(x, nbr, n_off, w, b, heads, dh),
        _ => conv_impl::<0>(x, nbr, n_off, w, b, heads, dh),
    }
}

/// `D` is the head width when known at compile time, 0 otherwise.
fn conv_impl<const D: usize>(
    x: &Mat,
    nbr: &[usize],
    n_off: usize,
    w: &[f64],
    b: &[f64],
    heads: usize,
    dh: usize,
) -> Mat {
    let d = if D == 0 { dh } else { D };
    let c = x.cols;
    let rows = nbr.len() / n_off;
    let wt = offset_major(w, heads, n_off, d);
    let mut y = Mat::zeros(rows, c);
    for p in 0..rows {
        let out = &mut y.data[p * c..(p + 1) * c];
        out.copy_from_slice(b);
        for o in 0..n_off {
            let q = nbr[p * n_off + o];
            if q == NONE {
                continue;
            }
            let xin = &x.data[q * c..(q + 1) * c];
            let wo = &wt[o * c * d..(o + 1) * c * d];
            for ((xi, wb), oh) in xin.chunks_exact(d).zip(wo.chunks_exact(d * d)).zip(out.chunks_exact_mut(d)) {
                for (wr, ov) in wb.chunks_exact(d).zip(oh.iter_mut()) {
                    *ov += wr.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
    }
    y
}

/// Returns the gradient with respect to `x` (shape of `x`).
#[allow(clippy::too_many_arguments)]
pub fn head_conv_backward(
    x: &Mat,
    nbr: &[usize],
    n_off: usize,
    w: &[f64],
    dy: &Mat,
    dw: &mut [f64],
    db: &mut [f64],
    heads: usize,
) -> Mat {
    let dh = x.cols / heads;
    match dh {
        1 => conv_back_impl::<1>(x, nbr, n_off, w, dy, dw, db, heads, dh),
        2 => conv_back_impl::<2>(x, nbr, n_off, w, dy, dw, db, heads, dh),
        4 => conv_back_impl::<4>(x, nbr, n_off, w, dy, dw, db, heads, dh),
        8 => conv_back_impl::<8>(x, nbr, n_off, w, dy, dw, db, heads, dh),
        _ => conv_back_impl::<0>(x, nbr, n_off, w, dy, dw, db, heads, dh),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_back_impl<const D: usize>(
    x: &Mat,
    nbr: &[usize],
    n_off: usize,
    w: &[f64],
    dy: &Mat,
    dw: &mut [f64],
    db: &mut [f64],
    heads: usize,
    dh: usize,
) -> Mat {
    let d = if D == 0 { dh } else { D };
    let c = x.cols;
    let wt = offset_major(w, heads, n_off, d);
    let mut dwt = vec![0.0; wt.len()];
    let mut dx = Mat::zeros(x.rows, c);
    for p in 0..dy.rows {
        let g = &dy.data[p * c..(p + 1) * c];
        for i in 0..c {
            db[i] += g[i];
        }
        for o in 0..n_off {
            let q = nbr[p * n_off + o];
            if q == NONE {
                continue;
            }
            let base = o * c * d;
            let xq = &x.data[q * c..(q + 1) * c];
            let dxq = &mut dx.data[q * c..(q + 1) * c];
            let wo = &wt[base..base + c * d];
            let dwo = &mut dwt[base..base + c * d];
            for ((((gh, xi), wb), dwb), dxi) in g
                .chunks_exact(d)
                .zip(xq.chunks_exact(d))
                .zip(wo.chunks_exact(d * d))
                .zip(dwo.chunks_exact_mut(d * d))
                .zip(dxq.chunks_exact_mut(d))
            {
                for ((gv, wr), dwr) in gh.iter().zip(wb.chunks_exact(d)).zip(dwb.chunks_exact_mut(d)) {
                    for (((dw, dxv), w), xv) in dwr.iter_mut().zip(dxi.iter_mut()).zip(wr).zip(xi) {
                        *dw += gv * xv;
                        *dxv += gv * w;
                    }
                }
            }
        }
    }
    head_major_add(dw, &dwt, heads, n_off, d);
    dx
}

/// Relational kernel and its application.
///
/// For every output position `i`, head `h` and window offset `o` with
/// neighbour `j = nbr[i, o]` (a row of `g` and `a`):
///
/// ```text
/// kernel[i, h, o] = Σ_c q[qmap[i], h, c] · g[j, h, c]
/// out[i, h, c]    = Σ_o a[j, h, c] · kernel[i, h, o]
/// ```
///
/// Missing neighbours contribute nothing.
pub fn relational(
    q: &Mat,
    qmap: &[usize],
    g: &Mat,
    a: &Mat,
    nbr: &[usize],
    n_off: usize,
    heads: usize,
) -> Mat {
    let dh = q.cols / heads;
    match dh {
        1 => rel_impl::<1>(q, qmap, g, a, nbr, n_off, dh),
        2 => rel_impl::<2>(q, qmap, g, a, nbr, n_off, dh),
        4 => rel_impl::<4>(q, qmap, g, a, nbr, n_off, dh),
        8 => rel_impl::<8>(q, qmap, g, a, nbr, n_off, dh),
        _ => rel_impl::<0>(q, qmap, g, a, nbr, n_off, dh),
    }
}

#[allow(clippy::too_many_arguments)]
fn rel_impl<const D: usize>(
    q: &Mat,
    qmap: &[usize],
    g: &Mat,
    a: &Mat,
    nbr: &[usize],
    n_off: usize,
    dh: usize,
) -> Mat {
    let d = if D == 0 { dh } else { D };
    let c = q.cols;
    let mut out = Mat::zeros(qmap.len(), c);
    for (i, &p) in qmap.iter().enumerate() {
        let qr = &q.data[p * c..(p + 1) * c];
        let orow = &mut out.data[i * c..(i + 1) * c];
        for o in 0..n_off {
            let j = nbr[i * n_off + o];
            if j == NONE {
                continue;
            }
            let gr = &g.data[j * c..(j + 1) * c];
            let ar = &a.data[j * c..(j + 1) * c];
            for (((qh, gh), ah), oh) in
                qr.chunks_exact(d).zip(gr.chunks_exact(d)).zip(ar.chunks_exact(d)).zip(orow.chunks_exact_mut(d))
            {
                let kv: f64 = qh.iter().zip(gh).map(|(x, y)| x * y).sum();
                for (ov, av) in oh.iter_mut().zip(ah) {
                    *ov += av * kv;
                }
            }
        }
    }
    out
}

/// Returns `(dq, dg, da)` shaped like `q`, `g` and `a`.
#[allow(clippy::too_many_arguments)]
pub fn relational_backward(
    q: &Mat,
    qmap: &[usize],
    g: &Mat,
    a: &Mat,
    nbr: &[usize],
    n_off: usize,
    heads: usize,
    dout: &Mat,
) -> (Mat, Mat, Mat) {
    let dh = q.cols / heads;
    let args = (q, qmap, g, a, nbr, n_off, dout);
    match dh {
        1 => rel_back_impl::<1>(args, dh),
        2 => rel_back_impl::<2>(args, dh),
        4 => rel_back_impl::<4>(args, dh),
        8 => rel_back_impl::<8>(args, dh),
        _ => rel_back_impl::<0>(args, dh),
    }
}

type RelBackArgs<'a> = (&'a Mat, &'a [usize], &'a Mat, &'a Mat, &'a [usize], usize, &'a Mat);

fn rel_back_impl<const D: usize>(args: RelBackArgs<'_>, dh: usize) -> (Mat, Mat, Mat) {
    let (q, qmap, g, a, nbr, n_off, dout) = args;
    let d = if D == 0 { dh } else { D };
    let c = q.cols;
    let mut dq = Mat::zeros(q.rows, c);
    let mut dg = Mat::zeros(g.rows, c);
    let mut da = Mat::zeros(a.rows, c);
    for (i, &p) in qmap.iter().enumerate() {
        let dr = &dout.data[i * c..(i + 1) * c];
        let qr = &q.data[p * c..(p + 1) * c];
        let mut dqr = vec![0.0; c];
        for o in 0..n_off {
            let j = nbr[i * n_off + o];
            if j == NONE {
                continue;
            }
            let ar = &a.data[j * c..(j + 1) * c];
            let gr = &g.data[j * c..(j + 1) * c];
            let dar = &mut da.data[j * c..(j + 1) * c];
            let dgr = &mut dg.data[j * c..(j + 1) * c];
            for (((((dh_, ah), gh), qh), dah), (dgh, dqh)) in dr
                .chunks_exact(d)
                .zip(ar.chunks_exact(d))
                .zip(gr.chunks_exact(d))
                .zip(qr.chunks_exact(d))
                .zip(dar.chunks_exact_mut(d))
                .zip(dgr.chunks_exact_mut(d).zip(dqr.chunks_exact_mut(d)))
            {
                let kv: f64 = qh.iter().zip(gh).map(|(x, y)| x * y).sum();
                let mut dk = 0.0;
                for ((dv, av), dav) in dh_.iter().zip(ah).zip(dah.iter_mut()) {
                    dk += dv * av;
                    *dav += dv * kv;
                }
                for (((dqv, dgv), gv), qv) in dqh.iter_mut().zip(dgh.iter_mut()).zip(gh).zip(qh) {
                    *dqv += dk * gv;
                    *dgv += dk * qv;
                }
            }
        }
        add_row(&mut dq.data[p * c..(p + 1) * c], &dqr);
    }
    (dq, dg, da)
}

fn add_row(acc: &mut [f64], d: &[f64]) {
    for (a, b) in acc.iter_mut().zip(d) {
        *a += *b;
    }
}

/// Inverted dropout. Returns the output and the per-element scale (0 or
/// `1/(1−p)`) needed by the backward pass.
pub fn dropout<R: Rng + ?Sized>(x: &Mat, p: f64, rng: &mut R) -> (Mat, Vec<f64>) {
    if p <= 0.0 {
        return (x.clone(), Vec::new());
    }
    let keep = 1.0 / (1.0 - p);
    let scale: Vec<f64> = (0..x.data.len())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let data = x.data.iter().zip(&scale).map(|(v, s)| v * s).collect();
    (Mat::from_vec(x.rows, x.cols, data), scale)
}

pub fn dropout_backward(dy: &Mat, scale: &[f64]) -> Mat {
    if scale.is_empty() {
        return dy.clone();
    }
    let data = dy.data.iter().zip(scale).map(|(d, s)| d * s).collect();
    Mat::from_vec(dy.rows, dy.cols, data)
}

/// Rows of `x` selected by `map`.
pub fn gather_rows(x: &Mat, map: &[usize]) -> Mat {
    let mut y = Mat::zeros(map.len(), x.cols);
    for (i, &p) in map.iter().enumerate() {
        y.row_mut(i).copy_from_slice(x.row(p));
    }
    y
}

/// Adjoint of [`gather_rows`]: adds `dy` rows into a zero matrix of `rows` rows.
pub fn scatter_rows(dy: &Mat, map: &[usize], rows: usize) -> Mat {
    let mut x = Mat::zeros(rows, dy.cols);
    for (i, &p) in map.iter().enumerate() {
        for (a, b) in x.row_mut(p).iter_mut().zip(dy.row(i)) {
            *a += *b;
        }
    }
    x
}
