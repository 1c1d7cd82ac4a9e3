//! Tape operation builders: shape validation, forward kernel dispatch and
//! registration of the matching backward closure.

use std::sync::Arc;

use super::kernels as k;
use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::exec::for_each_row;
use crate::params::BnState;
use crate::scalar::{sc, Scalar};
use crate::tensor::numel;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<E: Scalar> Tape<E> {
    // ------------------------------------------------------- elementwise ---

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(E, E) -> E,
    ) -> Result<(Var, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        let data: Vec<E> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(self.shape(a).to_vec(), data, needs);
        Ok((out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = self.binary_same_shape("add", a, b, |x, y| x + y)?;
        if needs {
            let (na, nb) = (self.needs(a), self.needs(b));
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    if na {
                        grads.accumulate(a, gout);
                    }
                    if nb {
                        grads.accumulate(b, gout);
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = self.binary_same_shape("sub", a, b, |x, y| x - y)?;
        if needs {
            let (na, nb) = (self.needs(a), self.needs(b));
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    if na {
                        grads.accumulate(a, gout);
                    }
                    if nb {
                        let buf = grads.buf_mut(b);
                        for (bi, &gi) in buf.iter_mut().zip(gout) {
                            *bi = *bi - gi;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, needs) = self.binary_same_shape("mul", a, b, |x, y| x * y)?;
        if needs {
            let (na, nb) = (self.needs(a), self.needs(b));
            self.set_backward(
                out,
                Box::new(move |g, gout, grads| {
                    if na {
                        let bd = g.data(b);
                        let buf = grads.buf_mut(a);
                        for i in 0..gout.len() {
                            buf[i] = buf[i] + gout[i] * bd[i];
                        }
                    }
                    if nb {
                        let ad = g.data(a);
                        let buf = grads.buf_mut(b);
                        for i in 0..gout.len() {
                            buf[i] = buf[i] + gout[i] * ad[i];
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Generic unary elementwise op. `df(x, y)` is the local derivative.
    fn unary_ew(
        &mut self,
        x: Var,
        f: impl Fn(E) -> E,
        df: impl Fn(E, E) -> E + Send + Sync + 'static,
    ) -> Var {
        let data: Vec<E> = self.data(x).iter().map(|&v| f(v)).collect();
        let needs = self.needs(x);
        let out = self.push(self.shape(x).to_vec(), data, needs);
        if needs {
            self.set_backward(
                out,
                Box::new(move |g, gout, grads| {
                    let xd = g.data(x);
                    let yd = g.data(out);
                    let buf = grads.buf_mut(x);
                    for i in 0..gout.len() {
                        buf[i] = buf[i] + gout[i] * df(xd[i], yd[i]);
                    }
                }),
            );
        }
        out
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary_ew(x, |v| -v, |_, _| -E::one())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ce = sc::<E>(c);
        self.unary_ew(x, move |v| v * ce, move |_, _| ce)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary_ew(
            x,
            |v| v.abs(),
            |v, _| {
                if v > E::zero() {
                    E::one()
                } else if v < E::zero() {
                    -E::one()
                } else {
                    E::zero()
                }
            },
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let a = sc::<E>(slope);
        self.unary_ew(
            x,
            move |v| if v > E::zero() { v } else { v * a },
            move |v, _| if v > E::zero() { E::one() } else { a },
        )
    }

    /// tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = sc::<E>((2.0 / std::f64::consts::PI).sqrt());
        let k3 = sc::<E>(0.044715);
        let half = sc::<E>(0.5);
        let one = E::one();
        self.unary_ew(
            x,
            move |v| {
                let u = c * (v + k3 * v * v * v);
                half * v * (one + u.tanh())
            },
            move |v, _| {
                let u = c * (v + k3 * v * v * v);
                let t = u.tanh();
                let sech2 = one - t * t;
                half * (one + t) + half * v * sech2 * c * (one + sc::<E>(3.0 * 0.044715) * v * v)
            },
        )
    }

    /// ln(max(x, floor)); the clamped region has zero slope.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        let m = sc::<E>(floor);
        self.unary_ew(
            x,
            move |v| v.max(m).ln(),
            move |v, _| if v > m { E::one() / v } else { E::zero() },
        )
    }

    /// Elementwise add of a constant buffer (no gradient into the constant).
    pub fn add_const(&mut self, x: Var, c: Arc<Vec<E>>) -> Result<Var> {
        if self.data(x).len() != c.len() {
            return Err(shape_err("add_const", self.shape(x), &[c.len()]));
        }
        let data: Vec<E> = self.data(x).iter().zip(c.iter()).map(|(&a, &b)| a + b).collect();
        let needs = self.needs(x);
        let out = self.push(self.shape(x).to_vec(), data, needs);
        if needs {
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| grads.accumulate(x, gout)),
            );
        }
        Ok(out)
    }

    /// Elementwise multiply by a constant buffer.
    pub fn mul_const(&mut self, x: Var, c: Arc<Vec<E>>) -> Result<Var> {
        if self.data(x).len() != c.len() {
            return Err(shape_err("mul_const", self.shape(x), &[c.len()]));
        }
        let data: Vec<E> = self.data(x).iter().zip(c.iter()).map(|(&a, &b)| a * b).collect();
        let needs = self.needs(x);
        let out = self.push(self.shape(x).to_vec(), data, needs);
        if needs {
            let c = Arc::clone(&c);
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    let buf = grads.buf_mut(x);
                    for i in 0..gout.len() {
                        buf[i] = buf[i] + gout[i] * c[i];
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Multiply every element by a scalar-shaped node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if numel(self.shape(s)) != 1 {
            return Err(shape_err("scale_by", self.shape(s), &[1]));
        }
        let sv = self.data(s)[0];
        let data: Vec<E> = self.data(x).iter().map(|&v| v * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        let out = self.push(self.shape(x).to_vec(), data, needs);
        if needs {
            let (nx, ns) = (self.needs(x), self.needs(s));
            self.set_backward(
                out,
                Box::new(move |g, gout, grads| {
                    let sv = g.data(s)[0];
                    if nx {
                        let buf = grads.buf_mut(x);
                        for i in 0..gout.len() {
                            buf[i] = buf[i] + gout[i] * sv;
                        }
                    }
                    if ns {
                        let xd = g.data(x);
                        let mut acc = E::zero();
                        for i in 0..gout.len() {
                            acc = acc + gout[i] * xd[i];
                        }
                        grads.accumulate(s, &[acc]);
                    }
                }),
            );
        }
        Ok(out)
    }

    // ---------------------------------------------------------- broadcast --

    /// x[n, d] + b[d] broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(shape_err("add_row_bias", &xs, &bs));
        }
        let d = xs[1];
        let bd = self.data(b);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            for (r, &bv) in row.iter_mut().zip(bd) {
                *r = *r + bv;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        let out = self.push(xs, data, needs);
        if needs {
            let (nx, nb) = (self.needs(x), self.needs(b));
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    if nx {
                        grads.accumulate(x, gout);
                    }
                    if nb {
                        let buf = grads.buf_mut(b);
                        for row in gout.chunks(d) {
                            for (bi, &gv) in buf.iter_mut().zip(row) {
                                *bi = *bi + gv;
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// x + t tiled along axis 0: x.shape[0] must be a multiple of t.shape[0],
    /// trailing axes equal.
    pub fn add_tiled(&mut self, x: Var, t: Var) -> Result<Var> {
        let (xs, ts) = (self.shape(x).to_vec(), self.shape(t).to_vec());
        let block = numel(&ts);
        if block == 0
            || numel(&xs) % block != 0
            || xs.len() != ts.len()
            || xs[1..] != ts[1..]
            || xs[0] % ts[0] != 0
        {
            return Err(shape_err("add_tiled", &xs, &ts));
        }
        let td = self.data(t);
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_mut(block) {
            for (r, &tv) in chunk.iter_mut().zip(td) {
                *r = *r + tv;
            }
        }
        let needs = self.needs(x) || self.needs(t);
        let out = self.push(xs, data, needs);
        if needs {
            let (nx, nt) = (self.needs(x), self.needs(t));
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    if nx {
                        grads.accumulate(x, gout);
                    }
                    if nt {
                        let buf = grads.buf_mut(t);
                        for chunk in gout.chunks(block) {
                            for (bi, &gv) in buf.iter_mut().zip(chunk) {
                                *bi = *bi + gv;
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    // ------------------------------------------------------------- matmul --

    /// a[m,k] * b[k,n] -> [m,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![E::zero(); m * n];
        k::mm_nn(self.data(a), self.data(b), &mut data, m, kk, n);
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(vec![m, n], data, needs);
        if needs {
            let (na, nb) = (self.needs(a), self.needs(b));
            self.set_backward(
                out,
                Box::new(move |g, gout, grads| {
                    if na {
                        k::mm_nt(gout, g.data(b), grads.buf_mut(a), m, n, kk);
                    }
                    if nb {
                        k::mm_tn(g.data(a), gout, grads.buf_mut(b), m, kk, n);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// a[m,k] * b[n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", &sa, &sb));
        }
        let (m, kk, n) = (sa[0], sa[1], sb[0]);
        let mut data = vec![E::zero(); m * n];
        k::mm_nt(self.data(a), self.data(b), &mut data, m, kk, n);
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(vec![m, n], data, needs);
        if needs {
            let (na, nb) = (self.needs(a), self.needs(b));
            self.set_backward(
                out,
                Box::new(move |g, gout, grads| {
                    if na {
                        k::mm_nn(gout, g.data(b), grads.buf_mut(a), m, n, kk);
                    }
                    if nb {
                        k::mm_tn(gout, g.data(a), grads.buf_mut(b), m, n, kk);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// a[bt,m,k] * b[bt,k,n] -> [bt,m,n]
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", &sa, &sb));
        }
        let (bt, m, kk, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![E::zero(); bt * m * n];
        k::bmm_nn(self.data(a), self.data(b), &mut data, bt, m, kk, n);
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(vec![bt, m, n], data, needs);
        if needs {
            let (na, nb) = (self.needs(a), self.needs(b));
            self.set_backward(
                out,
                Box::new(move |g, gout, grads| {
                    if na {
                        k::bmm_nt(gout, g.data(b), grads.buf_mut(a), bt, m, n, kk);
                    }
                    if nb {
                        k::bmm_tn(g.data(a), gout, grads.buf_mut(b), bt, m, kk, n);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// a[bt,m,k] * b[bt,n,k]^T -> [bt,m,n]
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(shape_err("bmm_nt", &sa, &sb));
        }
        let (bt, m, kk, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut data = vec![E::zero(); bt * m * n];
        k::bmm_nt(self.data(a), self.data(b), &mut data, bt, m, kk, n);
        let needs = self.needs(a) || self.needs(b);
        let out = self.push(vec![bt, m, n], data, needs);
        if needs {
            let (na, nb) = (self.needs(a), self.needs(b));
            self.set_backward(
                out,
                Box::new(move |g, gout, grads| {
                    if na {
                        k::bmm_nn(gout, g.data(b), grads.buf_mut(a), bt, m, n, kk);
                    }
                    if nb {
                        k::bmm_tn(gout, g.data(a), grads.buf_mut(b), bt, m, n, kk);
                    }
                }),
            );
        }
        Ok(out)
    }

    // --------------------------------------------------------------- conv --

    /// Zero-padded cross-correlation: x[cin,h,w] (*) w[cout,cin,kh,kw].
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 3 || ws.len() != 4 || xs[0] != ws[1] {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if stride == 0 {
            return Err(Error::config("conv2d", "stride must be positive"));
        }
        let num_h = h + 2 * pad;
        let num_w = wd + 2 * pad;
        if num_h < kh || num_w < kw || (num_h - kh) % stride != 0 || (num_w - kw) % stride != 0 {
            return Err(Error::config(
                "conv2d",
                format!(
                    "output size not integral: input {h}x{wd}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
                ),
            ));
        }
        let oh = (num_h - kh) / stride + 1;
        let ow = (num_w - kw) / stride + 1;
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let mut data = vec![E::zero(); cout * oh * ow];
        k::conv2d_fwd(
            self.data(x),
            self.data(w),
            &mut data,
            cin,
            h,
            wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        if let Some(b) = bias {
            let bd = self.data(b);
            for (o, plane) in data.chunks_mut(oh * ow).enumerate() {
                for v in plane.iter_mut() {
                    *v = *v + bd[o];
                }
            }
        }
        let needs =
            self.needs(x) || self.needs(w) || bias.map(|b| self.needs(b)).unwrap_or(false);
        let out = self.push(vec![cout, oh, ow], data, needs);
        if needs {
            let nx = self.needs(x);
            let nw = self.needs(w);
            let nb = bias.map(|b| self.needs(b)).unwrap_or(false);
            self.set_backward(
                out,
                Box::new(move |g, gout, grads| {
                    if nx {
                        k::conv2d_bwd_x(
                            gout,
                            g.data(w),
                            grads.buf_mut(x),
                            cin,
                            h,
                            wd,
                            cout,
                            kh,
                            kw,
                            stride,
                            pad,
                            oh,
                            ow,
                        );
                    }
                    if nw {
                        k::conv2d_bwd_w(
                            gout,
                            g.data(x),
                            grads.buf_mut(w),
                            cin,
                            h,
                            wd,
                            cout,
                            kh,
                            kw,
                            stride,
                            pad,
                            oh,
                            ow,
                        );
                    }
                    if nb {
                        let buf = grads.buf_mut(bias.unwrap());
                        for (o, plane) in gout.chunks(oh * ow).enumerate() {
                            let mut s = E::zero();
                            for &gv in plane {
                                s = s + gv;
                            }
                            buf[o] = buf[o] + s;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    // ------------------------------------------------------- normalization -

    /// Per-channel batch normalization over the spatial extent of x[c,h,w].
    /// Train mode uses the current statistics and updates `state` with
    /// `momentum`; eval mode normalizes with the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<E>,
        train: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || self.shape(gamma) != [xs[0]] || self.shape(beta) != [xs[0]] {
            return Err(shape_err("batch_norm", &xs, self.shape(gamma)));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if state.mean.len() != c {
            return Err(shape_err("batch_norm state", &[state.mean.len()], &[c]));
        }
        let plane = h * w;
        let inv_n = 1.0 / plane as f64;
        let (mean, var): (Vec<E>, Vec<E>) = if train {
            let xd = self.data(x);
            let mut mean = vec![E::zero(); c];
            let mut var = vec![E::zero(); c];
            for ch in 0..c {
                let sl = &xd[ch * plane..(ch + 1) * plane];
                let mut s = E::zero();
                for &v in sl {
                    s = s + v;
                }
                let mu = s * sc::<E>(inv_n);
                let mut q = E::zero();
                for &v in sl {
                    let d = v - mu;
                    q = q + d * d;
                }
                mean[ch] = mu;
                var[ch] = q * sc::<E>(inv_n);
            }
            let mom = sc::<E>(momentum);
            let keep = sc::<E>(1.0 - momentum);
            for ch in 0..c {
                state.mean[ch] = state.mean[ch] * keep + mean[ch] * mom;
                state.var[ch] = state.var[ch] * keep + var[ch] * mom;
            }
            state.batches_seen += 1;
            (mean, var)
        } else {
            if state.batches_seen == 0 {
                log::warn!(
                    "batch_norm `{}` evaluated before any training update; using init stats",
                    state.name
                );
            }
            (state.mean.clone(), state.var.clone())
        };
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let xd = self.data(x);
        let mut data = vec![E::zero(); c * plane];
        let mut invstd = vec![E::zero(); c];
        for ch in 0..c {
            invstd[ch] = E::one() / (var[ch] + sc::<E>(eps)).sqrt();
            let (mu, is, ga, be) = (mean[ch], invstd[ch], gd[ch], bd[ch]);
            let src = &xd[ch * plane..(ch + 1) * plane];
            let dst = &mut data[ch * plane..(ch + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mu) * is * ga + be;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(xs, data, needs);
        if needs {
            let nx = self.needs(x);
            let ng = self.needs(gamma);
            let nb = self.needs(beta);
            self.set_backward(
                out,
                Box::new(move |g, gout, grads| {
                    let xd = g.data(x);
                    let gd = g.data(gamma);
                    let mut dgamma = vec![E::zero(); c];
                    let mut dbeta = vec![E::zero(); c];
                    for ch in 0..c {
                        let (mu, is) = (mean[ch], invstd[ch]);
                        let xs_ = &xd[ch * plane..(ch + 1) * plane];
                        let gs = &gout[ch * plane..(ch + 1) * plane];
                        let mut sum_g = E::zero();
                        let mut sum_gx = E::zero();
                        for (&gv, &xv) in gs.iter().zip(xs_) {
                            sum_g = sum_g + gv;
                            sum_gx = sum_gx + gv * (xv - mu) * is;
                        }
                        dgamma[ch] = sum_gx;
                        dbeta[ch] = sum_g;
                        if nx {
                            let ga = gd[ch];
                            let buf = grads.buf_mut(x);
                            if train {
                                let mg = sum_g * sc::<E>(inv_n);
                                let mgx = sum_gx * sc::<E>(inv_n);
                                for i in 0..plane {
                                    let xh = (xs_[i] - mu) * is;
                                    buf[ch * plane + i] = buf[ch * plane + i]
                                        + ga * is * (gs[i] - mg - xh * mgx);
                                }
                            } else {
                                for i in 0..plane {
                                    buf[ch * plane + i] = buf[ch * plane + i] + ga * is * gs[i];
                                }
                            }
                        }
                    }
                    if ng {
                        grads.accumulate(gamma, &dgamma);
                    }
                    if nb {
                        grads.accumulate(beta, &dbeta);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Normalize each 1-D fiber along `axis` to zero mean / unit variance,
    /// then apply the affine (gamma, beta) indexed along that axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || self.shape(gamma) != [xs[axis]] || self.shape(beta) != [xs[axis]] {
            return Err(shape_err("layer_norm", &xs, self.shape(gamma)));
        }
        let len = xs[axis];
        let inv_n = 1.0 / len as f64;
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut data = vec![E::zero(); xd.len()];
        k::for_each_fiber(&xs, axis, |_, base, stride| {
            let mut s = E::zero();
            for i in 0..len {
                s = s + xd[base + i * stride];
            }
            let mu = s * sc::<E>(inv_n);
            let mut q = E::zero();
            for i in 0..len {
                let d = xd[base + i * stride] - mu;
                q = q + d * d;
            }
            let is = E::one() / (q * sc::<E>(inv_n) + sc::<E>(eps)).sqrt();
            for i in 0..len {
                data[base + i * stride] = (xd[base + i * stride] - mu) * is * gd[i] + bd[i];
            }
        });
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = self.push(xs.clone(), data, needs);
        if needs {
            let nx = self.needs(x);
            let ng = self.needs(gamma);
            let nb = self.needs(beta);
            self.set_backward(
                out,
                Box::new(move |g, gout, grads| {
                    let xd = g.data(x);
                    let gd = g.data(gamma);
                    let mut dgamma = vec![E::zero(); len];
                    let mut dbeta = vec![E::zero(); len];
                    // Recompute fiber statistics; identical arithmetic to the
                    // forward pass, so bitwise consistent.
                    k::for_each_fiber(&xs, axis, |_, base, stride| {
                        let mut s = E::zero();
                        for i in 0..len {
                            s = s + xd[base + i * stride];
                        }
                        let mu = s * sc::<E>(inv_n);
                        let mut q = E::zero();
                        for i in 0..len {
                            let d = xd[base + i * stride] - mu;
                            q = q + d * d;
                        }
                        let is = E::one() / (q * sc::<E>(inv_n) + sc::<E>(eps)).sqrt();
                        let mut sum_dxh = E::zero();
                        let mut sum_dxh_xh = E::zero();
                        for i in 0..len {
                            let idx = base + i * stride;
                            let xh = (xd[idx] - mu) * is;
                            let dxh = gout[idx] * gd[i];
                            sum_dxh = sum_dxh + dxh;
                            sum_dxh_xh = sum_dxh_xh + dxh * xh;
                            dgamma[i] = dgamma[i] + gout[idx] * xh;
                            dbeta[i] = dbeta[i] + gout[idx];
                        }
                        if nx {
                            let m1 = sum_dxh * sc::<E>(inv_n);
                            let m2 = sum_dxh_xh * sc::<E>(inv_n);
                            let buf = grads.buf_mut(x);
                            for i in 0..len {
                                let idx = base + i * stride;
                                let xh = (xd[idx] - mu) * is;
                                let dxh = gout[idx] * gd[i];
                                buf[idx] = buf[idx] + is * (dxh - m1 - xh * m2);
                            }
                        }
                    });
                    if ng {
                        grads.accumulate(gamma, &dgamma);
                    }
                    if nb {
                        grads.accumulate(beta, &dbeta);
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::config("softmax", format!("axis {axis} out of range")));
        }
        let len = xs[axis];
        let xd = self.data(x);
        let mut data = vec![E::zero(); xd.len()];
        if axis == xs.len() - 1 {
            // Contiguous fibers: compute rows in parallel.
            let src = xd.to_vec();
            for_each_row(&mut data, len, |r, row| {
                softmax_fiber(&src[r * len..(r + 1) * len], row);
            });
        } else {
            let mut buf_in = vec![E::zero(); len];
            let mut buf_out = vec![E::zero(); len];
            k::for_each_fiber(&xs, axis, |_, base, stride| {
                for i in 0..len {
                    buf_in[i] = xd[base + i * stride];
                }
                softmax_fiber(&buf_in, &mut buf_out);
                for i in 0..len {
                    data[base + i * stride] = buf_out[i];
                }
            });
        }
        let needs = self.needs(x);
        let out = self.push(xs.clone(), data, needs);
        if needs {
            self.set_backward(
                out,
                Box::new(move |g, gout, grads| {
                    let yd = g.data(out);
                    let buf = grads.buf_mut(x);
                    k::for_each_fiber(&xs, axis, |_, base, stride| {
                        let mut dot = E::zero();
                        for i in 0..len {
                            let idx = base + i * stride;
                            dot = dot + gout[idx] * yd[idx];
                        }
                        for i in 0..len {
                            let idx = base + i * stride;
                            buf[idx] = buf[idx] + yd[idx] * (gout[idx] - dot);
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    // -------------------------------------------------------------- pools --

    pub fn avg_pool2d(&mut self, x: Var, ksize: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("avg_pool2d", &xs, &[0, 0, 0]));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if ksize == 0 || stride == 0 || h < ksize || w < ksize
            || (h - ksize) % stride != 0 || (w - ksize) % stride != 0
        {
            return Err(Error::config(
                "avg_pool2d",
                format!("window {ksize} stride {stride} does not tile {h}x{w}"),
            ));
        }
        let oh = (h - ksize) / stride + 1;
        let ow = (w - ksize) / stride + 1;
        let mut data = vec![E::zero(); c * oh * ow];
        k::avg_pool2d_fwd(self.data(x), &mut data, c, h, w, ksize, stride, oh, ow);
        let needs = self.needs(x);
        let out = self.push(vec![c, oh, ow], data, needs);
        if needs {
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    k::avg_pool2d_bwd(gout, grads.buf_mut(x), c, h, w, ksize, stride, oh, ow);
                }),
            );
        }
        Ok(out)
    }

    /// Mean over the full spatial extent per channel: [c,h,w] -> [c].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("global_avg_pool", &xs, &[0, 0, 0]));
        }
        let (c, plane) = (xs[0], xs[1] * xs[2]);
        let inv = sc::<E>(1.0 / plane as f64);
        let xd = self.data(x);
        let data: Vec<E> = (0..c)
            .map(|ch| {
                let mut s = E::zero();
                for &v in &xd[ch * plane..(ch + 1) * plane] {
                    s = s + v;
                }
                s * inv
            })
            .collect();
        let needs = self.needs(x);
        let out = self.push(vec![c], data, needs);
        if needs {
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    let buf = grads.buf_mut(x);
                    for ch in 0..c {
                        let gv = gout[ch] * inv;
                        for v in &mut buf[ch * plane..(ch + 1) * plane] {
                            *v = *v + gv;
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Align-corners bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("upsample_bilinear", &xs, &[0, 0, 0]));
        }
        if factor == 0 {
            return Err(Error::config("upsample_bilinear", "factor must be >= 1"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![E::zero(); c * oh * ow];
        k::upsample_bilinear_fwd(self.data(x), &mut data, c, h, w, oh, ow);
        let needs = self.needs(x);
        let out = self.push(vec![c, oh, ow], data, needs);
        if needs {
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    k::upsample_bilinear_bwd(gout, grads.buf_mut(x), c, h, w, oh, ow);
                }),
            );
        }
        Ok(out)
    }

    /// Nearest-neighbor upsampling by an integer factor (context broadcast).
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("upsample_nearest", &xs, &[0, 0, 0]));
        }
        if factor == 0 {
            return Err(Error::config("upsample_nearest", "factor must be >= 1"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h * factor, w * factor);
        let xd = self.data(x);
        let mut data = vec![E::zero(); c * oh * ow];
        for_each_row(&mut data, ow, |row_idx, row| {
            let ch = row_idx / oh;
            let i = row_idx % oh;
            let src = &xd[(ch * h + i / factor) * w..(ch * h + i / factor + 1) * w];
            for (j, r) in row.iter_mut().enumerate() {
                *r = src[j / factor];
            }
        });
        let needs = self.needs(x);
        let out = self.push(vec![c, oh, ow], data, needs);
        if needs {
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    let buf = grads.buf_mut(x);
                    for_each_row(buf, w, |row_idx, row| {
                        let ch = row_idx / h;
                        let u = row_idx % h;
                        for (v, r) in row.iter_mut().enumerate() {
                            let mut s = E::zero();
                            for i in u * factor..(u + 1) * factor {
                                let base = (ch * oh + i) * ow;
                                for j in v * factor..(v + 1) * factor {
                                    s = s + gout[base + j];
                                }
                            }
                            *r = *r + s;
                        }
                    });
                }),
            );
        }
        Ok(out)
    }

    // ---------------------------------------------------------- data moves -

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.data(x).len() {
            return Err(shape_err("reshape", self.shape(x), &shape));
        }
        let data = self.data(x).to_vec();
        let needs = self.needs(x);
        let out = self.push(shape, data, needs);
        if needs {
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| grads.accumulate(x, gout)),
            );
        }
        Ok(out)
    }

    /// Axis permutation: output axis d draws from input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len() || axes.iter().any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::config("permute", format!("invalid axes {axes:?} for rank {}", xs.len())));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let mut data = vec![E::zero(); self.data(x).len()];
        k::permute_fwd(self.data(x), &mut data, &xs, axes);
        let needs = self.needs(x);
        let out = self.push(out_shape.clone(), data, needs);
        if needs {
            let mut inverse = vec![0usize; axes.len()];
            for (d, &a) in axes.iter().enumerate() {
                inverse[a] = d;
            }
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    k::permute_fwd(gout, grads.buf_mut(x), &out_shape, &inverse);
                }),
            );
        }
        Ok(out)
    }

    /// Cyclic 2-D roll: out[c,i,j] = x[c,(i+sy) mod h,(j+sx) mod w].
    pub fn roll2d(&mut self, x: Var, sy: isize, sx: isize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("roll2d", &xs, &[0, 0, 0]));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xd = self.data(x);
        let mut data = vec![E::zero(); xd.len()];
        for_each_row(&mut data, w, |row_idx, row| {
            let ch = row_idx / h;
            let i = row_idx % h;
            let si = (i as isize + sy).rem_euclid(h as isize) as usize;
            let src = &xd[(ch * h + si) * w..(ch * h + si + 1) * w];
            for (j, r) in row.iter_mut().enumerate() {
                let sj = (j as isize + sx).rem_euclid(w as isize) as usize;
                *r = src[sj];
            }
        });
        let needs = self.needs(x);
        let out = self.push(xs, data, needs);
        if needs {
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    let buf = grads.buf_mut(x);
                    for ch in 0..c {
                        for i in 0..h {
                            let si = (i as isize + sy).rem_euclid(h as isize) as usize;
                            for j in 0..w {
                                let sj = (j as isize + sx).rem_euclid(w as isize) as usize;
                                let idx = (ch * h + si) * w + sj;
                                buf[idx] = buf[idx] + gout[(ch * h + i) * w + j];
                            }
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Select index `i` along axis 0; output drops that axis.
    pub fn take_axis0(&mut self, x: Var, i: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || i >= xs[0] {
            return Err(Error::config("take_axis0", format!("index {i} out of {xs:?}")));
        }
        let block: usize = xs[1..].iter().product::<usize>().max(1);
        let data = self.data(x)[i * block..(i + 1) * block].to_vec();
        let out_shape = if xs.len() == 1 { vec![1] } else { xs[1..].to_vec() };
        let needs = self.needs(x);
        let out = self.push(out_shape, data, needs);
        if needs {
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    let buf = grads.buf_mut(x);
                    for (b, &gv) in buf[i * block..(i + 1) * block].iter_mut().zip(gout) {
                        *b = *b + gv;
                    }
                }),
            );
        }
        Ok(out)
    }

    /// out[t, :] = table[idx[t], :] — relative-position-bias lookup.
    pub fn gather_rows(&mut self, table: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(shape_err("gather_rows", &ts, &[0, 0]));
        }
        let (rows, d) = (ts[0], ts[1]);
        if idx.iter().any(|&r| r >= rows) {
            return Err(Error::config("gather_rows", "row index out of range"));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &r in idx.iter() {
            data.extend_from_slice(&td[r * d..(r + 1) * d]);
        }
        let needs = self.needs(table);
        let out = self.push(vec![idx.len(), d], data, needs);
        if needs {
            let idx = Arc::clone(&idx);
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    let buf = grads.buf_mut(table);
                    for (t, &r) in idx.iter().enumerate() {
                        for j in 0..d {
                            buf[r * d + j] = buf[r * d + j] + gout[t * d + j];
                        }
                    }
                }),
            );
        }
        Ok(out)
    }

    /// Cut the graph: same values, no gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let data = self.data(x).to_vec();
        self.push(self.shape(x).to_vec(), data, false)
    }

    // --------------------------------------------------------- reductions --

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut s = E::zero();
        for &v in self.data(x) {
            s = s + v;
        }
        let needs = self.needs(x);
        let out = self.push(vec![1], vec![s], needs);
        if needs {
            self.set_backward(
                out,
                Box::new(move |_g, gout, grads| {
                    let gv = gout[0];
                    let buf = grads.buf_mut(x);
                    for v in buf.iter_mut() {
                        *v = *v + gv;
                    }
                }),
            );
        }
        out
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.data(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    // --------------------------------------------------------- composites --

    /// Cyclic-shift by `shift` then tile into non-overlapping windows:
    /// [c,h,w] -> [n_windows, c, win, win].
    pub fn window_partition(&mut self, x: Var, win: usize, shift: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("window_partition", &xs, &[0, 0, 0]));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if win == 0 || h % win != 0 || w % win != 0 {
            return Err(Error::config(
                "window_partition",
                format!("window {win} does not divide {h}x{w}"),
            ));
        }
        if shift >= win {
            return Err(Error::config(
                "window_partition",
                format!("shift {shift} must be < window {win}"),
            ));
        }
        let shifted = if shift > 0 {
            self.roll2d(x, shift as isize, shift as isize)?
        } else {
            x
        };
        let grid = self.reshape(shifted, vec![c, h / win, win, w / win, win])?;
        let perm = self.permute(grid, &[1, 3, 0, 2, 4])?;
        self.reshape(perm, vec![(h / win) * (w / win), c, win, win])
    }

    /// Exact inverse of [`Tape::window_partition`].
    pub fn window_merge(&mut self, v: Var, h: usize, w: usize, win: usize, shift: usize) -> Result<Var> {
        let vs = self.shape(v).to_vec();
        if win == 0 || h % win != 0 || w % win != 0 {
            return Err(Error::config(
                "window_merge",
                format!("window {win} does not divide {h}x{w}"),
            ));
        }
        if vs.len() != 4 || vs[2] != win || vs[3] != win || vs[0] != (h / win) * (w / win) {
            return Err(shape_err("window_merge", &vs, &[(h / win) * (w / win), 0, win, win]));
        }
        let c = vs[1];
        let grid = self.reshape(v, vec![h / win, w / win, c, win, win])?;
        let perm = self.permute(grid, &[2, 0, 3, 1, 4])?;
        let img = self.reshape(perm, vec![c, h, w])?;
        if shift > 0 {
            self.roll2d(img, -(shift as isize), -(shift as isize))
        } else {
            Ok(img)
        }
    }

    /// [c,h,w] -> [(h/p)*(w/p), c*p*p] token matrix of flattened patches.
    pub fn patch_flatten(&mut self, x: Var, p: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("patch_flatten", &xs, &[0, 0, 0]));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::config(
                "patch_flatten",
                format!("patch {p} does not divide {h}x{w}"),
            ));
        }
        let grid = self.reshape(x, vec![c, h / p, p, w / p, p])?;
        let perm = self.permute(grid, &[1, 3, 0, 2, 4])?;
        self.reshape(perm, vec![(h / p) * (w / p), c * p * p])
    }

    /// [c,h,w] -> [h*w, c] row-major token matrix.
    pub fn chw_to_tokens(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err("chw_to_tokens", &xs, &[0, 0, 0]));
        }
        let perm = self.permute(x, &[1, 2, 0])?;
        self.reshape(perm, vec![xs[1] * xs[2], xs[0]])
    }

    /// [h*w, c] -> [c,h,w].
    pub fn tokens_to_chw(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != h * w {
            return Err(shape_err("tokens_to_chw", &xs, &[h * w, 0]));
        }
        let grid = self.reshape(x, vec![h, w, xs[1]])?;
        self.permute(grid, &[2, 0, 1])
    }
}

fn softmax_fiber<E: Scalar>(src: &[E], dst: &mut [E]) {
    let mut mx = src[0];
    for &v in src {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = E::zero();
    for (d, &v) in dst.iter_mut().zip(src) {
        let e = (v - mx).exp();
        *d = e;
        sum = sum + e;
    }
    let inv = E::one() / sum;
    for d in dst.iter_mut() {
        *d = *d * inv;
    }
}
