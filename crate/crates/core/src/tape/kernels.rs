//! Raw compute kernels behind the tape ops.
//!
//! Convention: every kernel computes each output element (or row) with a
//! self-contained sequential accumulation, so running rows on the rayon pool
//! cannot change results. Backward kernels are written in gather form for the
//! same reason; the few scatter-style backwards (gather_rows) stay sequential.

use crate::exec::for_each_row;
use crate::scalar::Scalar;

// ---------------------------------------------------------------- matmul ---

/// out[m,n] += a[m,k] * b[k,n]
pub fn mm_nn<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for_each_row(out, n, |i, row| {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != E::zero() {
                let brow = &b[p * n..(p + 1) * n];
                for (r, &bv) in row.iter_mut().zip(brow) {
                    *r = *r + aip * bv;
                }
            }
        }
    });
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub fn mm_nt<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for_each_row(out, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, r) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s = s + av * bv;
            }
            *r = *r + s;
        }
    });
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub fn mm_tn<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for_each_row(out, n, |p, row| {
        for i in 0..m {
            let aip = a[i * k + p];
            if aip != E::zero() {
                let brow = &b[i * n..(i + 1) * n];
                for (r, &bv) in row.iter_mut().zip(brow) {
                    *r = *r + aip * bv;
                }
            }
        }
    });
}

/// Batched variants over a leading axis: shapes [bt, m, k] etc.
pub fn bmm_nn<E: Scalar>(a: &[E], b: &[E], out: &mut [E], bt: usize, m: usize, k: usize, n: usize) {
    for_each_row(out, m * n, |bi, chunk| {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * k * n..(bi + 1) * k * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ab[i * k + p];
                if aip != E::zero() {
                    let brow = &bb[p * n..(p + 1) * n];
                    let row = &mut chunk[i * n..(i + 1) * n];
                    for (r, &bv) in row.iter_mut().zip(brow) {
                        *r = *r + aip * bv;
                    }
                }
            }
        }
    });
    let _ = bt;
}

pub fn bmm_nt<E: Scalar>(a: &[E], b: &[E], out: &mut [E], bt: usize, m: usize, k: usize, n: usize) {
    for_each_row(out, m * n, |bi, chunk| {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * n * k..(bi + 1) * n * k];
        for i in 0..m {
            let arow = &ab[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bb[j * k..(j + 1) * k];
                let mut s = E::zero();
                for (&av, &bv) in arow.iter().zip(brow) {
                    s = s + av * bv;
                }
                chunk[i * n + j] = chunk[i * n + j] + s;
            }
        }
    });
    let _ = bt;
}

pub fn bmm_tn<E: Scalar>(a: &[E], b: &[E], out: &mut [E], bt: usize, m: usize, k: usize, n: usize) {
    for_each_row(out, k * n, |bi, chunk| {
        let ab = &a[bi * m * k..(bi + 1) * m * k];
        let bb = &b[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ab[i * k + p];
                if aip != E::zero() {
                    let brow = &bb[i * n..(i + 1) * n];
                    let row = &mut chunk[p * n..(p + 1) * n];
                    for (r, &bv) in row.iter_mut().zip(brow) {
                        *r = *r + aip * bv;
                    }
                }
            }
        }
    });
    let _ = bt;
}

// ------------------------------------------------------------------ conv ---

/// out[o,oh,ow] += sum_{c,ki,kj} x[c, oh*s-p+ki, ow*s-p+kj] * w[o,c,ki,kj]
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<E: Scalar>(
    x: &[E],
    w: &[E],
    out: &mut [E],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for_each_row(out, ow, |row_idx, row| {
        let o = row_idx / oh;
        let y = row_idx % oh;
        for c in 0..cin {
            for ki in 0..kh {
                let iy = (y * stride + ki) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let xrow = &x[c * h * wd + iy as usize * wd..c * h * wd + (iy as usize + 1) * wd];
                for kj in 0..kw {
                    let wv = w[((o * cin + c) * kh + ki) * kw + kj];
                    if wv == E::zero() {
                        continue;
                    }
                    for (xcol, r) in row.iter_mut().enumerate() {
                        let ix = (xcol * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < wd as isize {
                            *r = *r + wv * xrow[ix as usize];
                        }
                    }
                }
            }
        }
    });
    let _ = cout;
}

/// Gather-form gradient w.r.t. the conv input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_x<E: Scalar>(
    g: &[E],
    w: &[E],
    dx: &mut [E],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for_each_row(dx, wd, |row_idx, row| {
        let c = row_idx / h;
        let i = row_idx % h;
        for o in 0..cout {
            for ki in 0..kh {
                let num = i + pad;
                if num < ki {
                    continue;
                }
                let rem = num - ki;
                if rem % stride != 0 {
                    continue;
                }
                let y = rem / stride;
                if y >= oh {
                    continue;
                }
                let grow = &g[(o * oh + y) * ow..(o * oh + y + 1) * ow];
                for kj in 0..kw {
                    let wv = w[((o * cin + c) * kh + ki) * kw + kj];
                    if wv == E::zero() {
                        continue;
                    }
                    for (j, r) in row.iter_mut().enumerate() {
                        let num = j + pad;
                        if num < kj {
                            continue;
                        }
                        let rem = num - kj;
                        if rem % stride != 0 {
                            continue;
                        }
                        let xcol = rem / stride;
                        if xcol < ow {
                            *r = *r + wv * grow[xcol];
                        }
                    }
                }
            }
        }
    });
}

/// Gradient w.r.t. the conv weights, one output row per (o, c) kernel plane.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd_w<E: Scalar>(
    g: &[E],
    x: &[E],
    dw: &mut [E],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    let _ = cout;
    for_each_row(dw, kh * kw, |plane, chunk| {
        let o = plane / cin;
        let c = plane % cin;
        for ki in 0..kh {
            for kj in 0..kw {
                let mut s = E::zero();
                for y in 0..oh {
                    let iy = (y * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = &x[(c * h + iy as usize) * wd..(c * h + iy as usize + 1) * wd];
                    let grow = &g[(o * oh + y) * ow..(o * oh + y + 1) * ow];
                    for (xcol, &gv) in grow.iter().enumerate() {
                        let ix = (xcol * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < wd as isize {
                            s = s + gv * xrow[ix as usize];
                        }
                    }
                }
                chunk[ki * kw + kj] = chunk[ki * kw + kj] + s;
            }
        }
    });
}

// -------------------------------------------------------------- group ops --

/// Iterate every 1-D fiber along `axis` of `shape` (all other axes held
/// fixed), calling `f(fiber_index, base_offset, stride)`.
pub fn for_each_fiber(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut fiber = 0;
    for oi in 0..outer {
        for ii in 0..stride {
            f(fiber, oi * len * stride + ii, stride);
            fiber += 1;
        }
    }
}

/// Number of fibers along `axis`.
pub fn fiber_count(shape: &[usize], axis: usize) -> usize {
    let len = shape[axis];
    let n: usize = shape.iter().product();
    n / len
}

// ------------------------------------------------------------- pooling -----

pub fn avg_pool2d_fwd<E: Scalar>(
    x: &[E],
    out: &mut [E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let inv = E::of_f64(1.0 / (k * k) as f64);
    for_each_row(out, ow, |row_idx, row| {
        let ch = row_idx / oh;
        let y = row_idx % oh;
        for (xc, r) in row.iter_mut().enumerate() {
            let mut s = E::zero();
            for ki in 0..k {
                let base = (ch * h + y * stride + ki) * w + xc * stride;
                for kj in 0..k {
                    s = s + x[base + kj];
                }
            }
            *r = *r + s * inv;
        }
    });
    let _ = c;
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool2d_bwd<E: Scalar>(
    g: &[E],
    dx: &mut [E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let inv = E::of_f64(1.0 / (k * k) as f64);
    for_each_row(dx, w, |row_idx, row| {
        let ch = row_idx / h;
        let i = row_idx % h;
        for (j, r) in row.iter_mut().enumerate() {
            let mut s = E::zero();
            // windows (y, x) covering pixel (i, j): y*stride <= i < y*stride+k
            let ylo = if i + 1 > k { (i + 1 - k).div_ceil(stride) } else { 0 };
            let xlo = if j + 1 > k { (j + 1 - k).div_ceil(stride) } else { 0 };
            let mut y = ylo;
            while y < oh && y * stride <= i {
                let mut xc = xlo;
                while xc < ow && xc * stride <= j {
                    s = s + g[(ch * oh + y) * ow + xc];
                    xc += 1;
                }
                y += 1;
            }
            *r = *r + s * inv;
        }
    });
    let _ = c;
}

// --------------------------------------------------------------- resize ----

/// Align-corners source coordinate for output index `i`.
#[inline]
pub fn bilinear_src(i: usize, out_len: usize, in_len: usize) -> f64 {
    if out_len <= 1 || in_len <= 1 {
        0.0
    } else {
        i as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

pub fn upsample_bilinear_fwd<E: Scalar>(
    x: &[E],
    out: &mut [E],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    for_each_row(out, ow, |row_idx, row| {
        let ch = row_idx / oh;
        let i = row_idx % oh;
        let sy = bilinear_src(i, oh, h);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = E::of_f64(sy - y0 as f64);
        let one = E::one();
        for (j, r) in row.iter_mut().enumerate() {
            let sx = bilinear_src(j, ow, w);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = E::of_f64(sx - x0 as f64);
            let p00 = x[(ch * h + y0) * w + x0];
            let p01 = x[(ch * h + y0) * w + x1];
            let p10 = x[(ch * h + y1) * w + x0];
            let p11 = x[(ch * h + y1) * w + x1];
            let top = p00 * (one - tx) + p01 * tx;
            let bot = p10 * (one - tx) + p11 * tx;
            *r = *r + top * (one - ty) + bot * ty;
        }
    });
    let _ = c;
}

/// Sequential scatter backward for bilinear upsampling; cheap enough that
/// determinism matters more than parallel speed here.
pub fn upsample_bilinear_bwd<E: Scalar>(
    g: &[E],
    dx: &mut [E],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) {
    let one = 1.0f64;
    for ch in 0..c {
        for i in 0..oh {
            let sy = bilinear_src(i, oh, h);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = sy - y0 as f64;
            for j in 0..ow {
                let sx = bilinear_src(j, ow, w);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = sx - x0 as f64;
                let gv = g[(ch * oh + i) * ow + j];
                let add = |dx: &mut [E], y: usize, x: usize, wgt: f64| {
                    let idx = (ch * h + y) * w + x;
                    dx[idx] = dx[idx] + gv * E::of_f64(wgt);
                };
                add(dx, y0, x0, (one - ty) * (one - tx));
                if x1 != x0 {
                    add(dx, y0, x1, (one - ty) * tx);
                }
                if y1 != y0 {
                    add(dx, y1, x0, ty * (one - tx));
                    if x1 != x0 {
                        add(dx, y1, x1, ty * tx);
                    }
                }
            }
        }
    }
}

// --------------------------------------------------------------- permute ---

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// out[idx] = x[map(idx)] where out axis d draws from input axis `axes[d]`.
pub fn permute_fwd<E: Scalar>(x: &[E], out: &mut [E], shape: &[usize], axes: &[usize]) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let gather_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let nd = out_shape.len();
    let last_len = out_shape[nd - 1];
    let last_stride = gather_strides[nd - 1];
    // Row-major strides over the leading output dims, measured in rows.
    let mut lead_strides = vec![1usize; nd.saturating_sub(1)];
    for d in (0..nd.saturating_sub(2)).rev() {
        lead_strides[d] = lead_strides[d + 1] * out_shape[d + 1];
    }
    for_each_row(out, last_len, |row_idx, row| {
        let mut rem = row_idx;
        let mut base = 0usize;
        for d in 0..nd - 1 {
            let coord = rem / lead_strides[d];
            rem %= lead_strides[d];
            base += coord * gather_strides[d];
        }
        for (j, r) in row.iter_mut().enumerate() {
            *r = *r + x[base + j * last_stride];
        }
    });
}
