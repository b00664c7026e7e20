use super::tape::{Op, Sink, Var};
use super::{Float, Tape, Tensor};
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Float> Tape<T> {
    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::dim(op, format!("axis {axis} out of range for {shape:?}")));
        }
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric {
                op,
                detail: "NaN in input".into(),
            });
        }
        Ok(())
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let out = softmax_along(self.value(x), axis, false);
        let r = self.req(x);
        Ok(self.push(out, Op::Softmax { x, axis }, r))
    }

    /// `log(softmax(x))` along `axis`, computed as `x - logsumexp(x)`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let out = softmax_along(self.value(x), axis, true);
        let r = self.req(x);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, r))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "features {n} vs gamma {:?} / beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(m * n);
        let mut means = Vec::with_capacity(m);
        let mut rstds = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j].f64() - mean) * rstd;
                out.push(T::of(xhat * gv[j].f64() + bv[j].f64()));
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let r = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            r,
        ))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2();
        let mut out = Vec::with_capacity(m * n);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let norm = row.iter().map(|v| v.f64().powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numeric {
                    op: "l2_normalize_rows",
                    detail: format!("row {i} has zero norm"),
                });
            }
            out.extend(row.iter().map(|v| T::of(v.f64() / norm)));
            norms.push(norm);
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let r = self.req(x);
        Ok(self.push(out, Op::L2NormRows { x, norms }, r))
    }

    /// Scaled dot-product attention, softmax over keys for each query row.
    ///
    /// `q: nq×d`, `k: nk×d`, `v: nk×dv`. With `causal`, query `i` only sees
    /// keys `0..=i`. Reductions over keys accumulate in `f64`, so in `f32`
    /// the result does not depend on key order.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, causal: bool) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sv.len() != 2 {
            return Err(Error::dim(
                "attention",
                format!("expected 2-D q/k/v, got {sq:?}, {sk:?}, {sv:?}"),
            ));
        }
        let (nq, d) = (sq[0], sq[1]);
        let (nk, dk) = (sk[0], sk[1]);
        let (nv, dv) = (sv[0], sv[1]);
        if d != dk {
            return Err(Error::dim(
                "attention",
                format!("query dim {d} vs key dim {dk}"),
            ));
        }
        if nk != nv {
            return Err(Error::dim(
                "attention",
                format!("{nk} keys vs {nv} values"),
            ));
        }
        if nk == 0 {
            return Err(Error::Input("attention over zero keys".into()));
        }
        if causal && nq > nk {
            return Err(Error::dim(
                "attention",
                format!("causal attention with {nq} queries over {nk} keys"),
            ));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0f64; nq * nk];
        let mut out = Vec::with_capacity(nq * dv);
        let mut acc = vec![0.0f64; dv];
        for i in 0..nq {
            let visible = if causal { i + 1 } else { nk };
            let p = &mut probs[i * nk..(i + 1) * nk];
            let qi = &qv[i * d..(i + 1) * d];
            let mut max = f64::NEG_INFINITY;
            for j in 0..visible {
                let kj = &kv[j * d..(j + 1) * d];
                let s = qi.iter().zip(kj).map(|(a, b)| a.f64() * b.f64()).sum::<f64>() * scale;
                p[j] = s;
                max = max.max(s);
            }
            let mut denom = 0.0;
            for pj in p.iter_mut().take(visible) {
                *pj = (*pj - max).exp();
                denom += *pj;
            }
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (j, pj) in p.iter_mut().enumerate().take(visible) {
                *pj /= denom;
                let vj = &vv[j * dv..(j + 1) * dv];
                for (a, x) in acc.iter_mut().zip(vj) {
                    *a += *pj * x.f64();
                }
            }
            out.extend(acc.iter().map(|&a| T::of(a)));
        }
        let out = Tensor::new(vec![nq, dv], out)?;
        let r = self.req(q) || self.req(k) || self.req(v);
        Ok(self.push(out, Op::Attention { q, k, v, probs }, r))
    }

    /// Valid (unpadded) 2-D convolution on an `h×w×c_in` map with kernel
    /// laid out as `k×k×c_in×c_out`. Output is `h'×w'×c_out` with
    /// `h' = (h - k) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let (h, w, cin, k, cout) = self.conv_dims("conv2d", x, kernel, stride)?;
        if h < k || w < k {
            return Err(Error::dim(
                "conv2d",
                format!("input {h}x{w} smaller than kernel {k}"),
            ));
        }
        let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let cols = im2col(self.value(x).data(), h, w, cin, k, stride, ho, wo);
        let mut out = vec![T::zero(); ho * wo * cout];
        let kk = k * k * cin;
        T::gemm(
            ho * wo,
            kk,
            cout,
            &cols,
            (kk as isize, 1),
            self.value(kernel).data(),
            (cout as isize, 1),
            &mut out,
            T::zero(),
        );
        let r = self.req(x) || self.req(kernel);
        Ok(self.push(
            Tensor::new(vec![ho, wo, cout], out)?,
            Op::Conv2d { x, kernel, stride },
            r,
        ))
    }

    /// Transposed 2-D convolution (zero padding) on `h×w×c_in` with kernel
    /// laid out as `c_in×k×k×c_out`. Output is `h'×w'×c_out` with
    /// `h' = (h - 1)·stride + k`.
    pub fn conv_transpose2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 4 || stride == 0 {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input {xs:?}, kernel {ks:?}, stride {stride}"),
            ));
        }
        let (h, w, cin) = (xs[0], xs[1], xs[2]);
        let (kcin, k, k2, cout) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin || k != k2 {
            return Err(Error::dim(
                "conv_transpose2d",
                format!("input channels {cin} vs kernel {ks:?}"),
            ));
        }
        let (ho, wo) = ((h - 1) * stride + k, (w - 1) * stride + k);
        let per = k * k * cout;
        let mut patches = vec![T::zero(); h * w * per];
        T::gemm(
            h * w,
            cin,
            per,
            self.value(x).data(),
            (cin as isize, 1),
            self.value(kernel).data(),
            (per as isize, 1),
            &mut patches,
            T::zero(),
        );
        let mut out = vec![T::zero(); ho * wo * cout];
        for i in 0..h {
            for j in 0..w {
                let src = &patches[(i * w + j) * per..(i * w + j + 1) * per];
                for di in 0..k {
                    for dj in 0..k {
                        let base = ((i * stride + di) * wo + j * stride + dj) * cout;
                        let s = &src[(di * k + dj) * cout..(di * k + dj + 1) * cout];
                        for (o, &v) in out[base..base + cout].iter_mut().zip(s) {
                            *o += v;
                        }
                    }
                }
            }
        }
        let r = self.req(x) || self.req(kernel);
        Ok(self.push(
            Tensor::new(vec![ho, wo, cout], out)?,
            Op::ConvTranspose2d { x, kernel, stride },
            r,
        ))
    }

    fn conv_dims(
        &self,
        op: &'static str,
        x: Var,
        kernel: Var,
        stride: usize,
    ) -> Result<(usize, usize, usize, usize, usize)> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.len() != 3 || ks.len() != 4 || stride == 0 {
            return Err(Error::dim(
                op,
                format!("input {xs:?}, kernel {ks:?}, stride {stride}"),
            ));
        }
        if ks[0] != ks[1] || ks[2] != xs[2] {
            return Err(Error::dim(
                op,
                format!("input channels {} vs kernel {ks:?}", xs[2]),
            ));
        }
        Ok((xs[0], xs[1], xs[2], ks[0], ks[3]))
    }

    // ---- composites -------------------------------------------------------

    /// `x·w + b` with `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Attention per head on column slices, concatenated, then projected by
    /// `w_out` (`d×d`) when given.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        causal: bool,
        w_out: Option<(Var, Option<Var>)>,
    ) -> Result<Var> {
        let d = *self.shape(q).last().unwrap_or(&0);
        let dv = *self.shape(v).last().unwrap_or(&0);
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(Error::Config(format!(
                "feature dims {d}/{dv} not divisible by {heads} heads"
            )));
        }
        let concat = if heads == 1 {
            self.attention(q, k, v, causal)?
        } else {
            let (hd, hv) = (d / heads, dv / heads);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = self.slice_cols(q, h * hd, hd)?;
                let kh = self.slice_cols(k, h * hd, hd)?;
                let vh = self.slice_cols(v, h * hv, hv)?;
                outs.push(self.attention(qh, kh, vh, causal)?);
            }
            self.concat_cols(&outs)?
        };
        match w_out {
            Some((w, b)) => self.linear(concat, w, b),
            None => Ok(concat),
        }
    }
}

fn softmax_along<T: Float>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, n, inner) = axis_extents(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| src[at(j)].f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..n).map(|j| (src[at(j)].f64() - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..n {
                let z = src[at(j)].f64() - lse;
                out[at(j)] = T::of(if log { z } else { z.exp() });
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    _h: usize,
    w: usize,
    cin: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let kk = k * k * cin;
    let mut cols = vec![T::zero(); ho * wo * kk];
    for oi in 0..ho {
        for oj in 0..wo {
            let row = &mut cols[(oi * wo + oj) * kk..(oi * wo + oj + 1) * kk];
            for di in 0..k {
                for dj in 0..k {
                    let src = ((oi * stride + di) * w + oj * stride + dj) * cin;
                    row[(di * k + dj) * cin..(di * k + dj + 1) * cin]
                        .copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

pub(super) fn backprop_nn<T: Float>(
    g: &[T],
    values: &[Tensor<T>],
    out: &Tensor<T>,
    op: &Op,
    sink: &mut Sink<'_, T>,
) {
    let val = |v: Var| &values[v.0];
    match op {
        Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
            let log = matches!(op, Op::LogSoftmax { .. });
            let (outer, n, inner) = axis_extents(out.shape(), *axis);
            let y = out.data();
            if let Some(gx) = sink.get(*x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        if log {
                            // dx = g - softmax * Σg
                            let s: f64 = (0..n).map(|j| g[at(j)].f64()).sum();
                            for j in 0..n {
                                gx[at(j)] += T::of(g[at(j)].f64() - y[at(j)].f64().exp() * s);
                            }
                        } else {
                            // dx = y * (g - Σ g·y)
                            let s: f64 = (0..n).map(|j| g[at(j)].f64() * y[at(j)].f64()).sum();
                            for j in 0..n {
                                gx[at(j)] += T::of(y[at(j)].f64() * (g[at(j)].f64() - s));
                            }
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            mean,
            rstd,
        } => {
            let xv = val(*x);
            let (m, n) = xv.dims2();
            let gv = val(*gamma).data();
            let xhat = |i: usize, j: usize| (xv.row(i)[j].f64() - mean[i]) * rstd[i];
            if let Some(gb) = sink.get(*beta) {
                for i in 0..m {
                    for j in 0..n {
                        gb[j] += g[i * n + j];
                    }
                }
            }
            if let Some(gg) = sink.get(*gamma) {
                for i in 0..m {
                    for j in 0..n {
                        gg[j] += T::of(g[i * n + j].f64() * xhat(i, j));
                    }
                }
            }
            if let Some(gx) = sink.get(*x) {
                for i in 0..m {
                    let dxhat: Vec<f64> =
                        (0..n).map(|j| g[i * n + j].f64() * gv[j].f64()).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx =
                        (0..n).map(|j| dxhat[j] * xhat(i, j)).sum::<f64>() / n as f64;
                    for j in 0..n {
                        gx[i * n + j] +=
                            T::of(rstd[i] * (dxhat[j] - mean_d - xhat(i, j) * mean_dx));
                    }
                }
            }
        }
        Op::L2NormRows { x, norms } => {
            let (m, n) = out.dims2();
            let y = out.data();
            if let Some(gx) = sink.get(*x) {
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: f64 = y[r.clone()]
                        .iter()
                        .zip(&g[r.clone()])
                        .map(|(a, b)| a.f64() * b.f64())
                        .sum();
                    for j in r {
                        gx[j] += T::of((g[j].f64() - y[j].f64() * dot) / norms[i]);
                    }
                }
            }
        }
        Op::Attention { q, k, v, probs } => {
            let (nq, d) = val(*q).dims2();
            let (nk, dv) = val(*v).dims2();
            let scale = 1.0 / (d as f64).sqrt();
            let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
            // dS = P ⊙ (dP - rowsum(dP ⊙ P)), with dP = G·Vᵀ
            let mut ds = vec![0.0f64; nq * nk];
            for i in 0..nq {
                let gi = &g[i * dv..(i + 1) * dv];
                let p = &probs[i * nk..(i + 1) * nk];
                let mut dp = vec![0.0f64; nk];
                let mut dot = 0.0;
                for j in 0..nk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let vj = &vv[j * dv..(j + 1) * dv];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a.f64() * b.f64()).sum();
                    dot += dp[j] * p[j];
                }
                for j in 0..nk {
                    ds[i * nk + j] = p[j] * (dp[j] - dot);
                }
            }
            if let Some(gvv) = sink.get(*v) {
                for i in 0..nq {
                    for j in 0..nk {
                        let p = probs[i * nk + j];
                        if p == 0.0 {
                            continue;
                        }
                        for c in 0..dv {
                            gvv[j * dv + c] += T::of(p * g[i * dv + c].f64());
                        }
                    }
                }
            }
            if let Some(gq) = sink.get(*q) {
                for i in 0..nq {
                    for c in 0..d {
                        let s: f64 = (0..nk).map(|j| ds[i * nk + j] * kv[j * d + c].f64()).sum();
                        gq[i * d + c] += T::of(s * scale);
                    }
                }
            }
            if let Some(gk) = sink.get(*k) {
                for j in 0..nk {
                    for c in 0..d {
                        let s: f64 = (0..nq).map(|i| ds[i * nk + j] * qv[i * d + c].f64()).sum();
                        gk[j * d + c] += T::of(s * scale);
                    }
                }
            }
        }
        Op::Conv2d { x, kernel, stride } => {
            let xs = val(*x).shape();
            let (h, w, cin) = (xs[0], xs[1], xs[2]);
            let ks = val(*kernel).shape();
            let (k, cout) = (ks[0], ks[3]);
            let os = out.shape();
            let (ho, wo) = (os[0], os[1]);
            let kk = k * k * cin;
            let cols = im2col(val(*x).data(), h, w, cin, k, *stride, ho, wo);
            if let Some(gk) = sink.get(*kernel) {
                // dK = colsᵀ · G
                T::gemm(
                    kk,
                    ho * wo,
                    cout,
                    &cols,
                    (1, kk as isize),
                    g,
                    (cout as isize, 1),
                    gk,
                    T::one(),
                );
            }
            if sink.get(*x).is_some() {
                let mut dcols = vec![T::zero(); ho * wo * kk];
                T::gemm(
                    ho * wo,
                    cout,
                    kk,
                    g,
                    (cout as isize, 1),
                    val(*kernel).data(),
                    (1, cout as isize),
                    &mut dcols,
                    T::zero(),
                );
                let gx = sink.get(*x).expect("checked");
                for oi in 0..ho {
                    for oj in 0..wo {
                        let row = &dcols[(oi * wo + oj) * kk..(oi * wo + oj + 1) * kk];
                        for di in 0..k {
                            for dj in 0..k {
                                let dst = ((oi * stride + di) * w + oj * stride + dj) * cin;
                                for c in 0..cin {
                                    gx[dst + c] += row[(di * k + dj) * cin + c];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::ConvTranspose2d { x, kernel, stride } => {
            let xs = val(*x).shape();
            let (h, w, cin) = (xs[0], xs[1], xs[2]);
            let ks = val(*kernel).shape();
            let (k, cout) = (ks[1], ks[3]);
            let wo = out.shape()[1];
            let per = k * k * cout;
            // gather dP[(i,j), (di,dj,co)] = G[i·s+di, j·s+dj, co]
            let mut dp = vec![T::zero(); h * w * per];
            for i in 0..h {
                for j in 0..w {
                    let dst = &mut dp[(i * w + j) * per..(i * w + j + 1) * per];
                    for di in 0..k {
                        for dj in 0..k {
                            let base = ((i * stride + di) * wo + j * stride + dj) * cout;
                            dst[(di * k + dj) * cout..(di * k + dj + 1) * cout]
                                .copy_from_slice(&g[base..base + cout]);
                        }
                    }
                }
            }
            if let Some(gk) = sink.get(*kernel) {
                // dK = Xᵀ · dP
                T::gemm(
                    cin,
                    h * w,
                    per,
                    val(*x).data(),
                    (1, cin as isize),
                    &dp,
                    (per as isize, 1),
                    gk,
                    T::one(),
                );
            }
            if let Some(gx) = sink.get(*x) {
                // dX = dP · Kᵀ
                T::gemm(
                    h * w,
                    per,
                    cin,
                    &dp,
                    (per as isize, 1),
                    val(*kernel).data(),
                    (1, per as isize),
                    gx,
                    T::one(),
                );
            }
        }
        _ => unreachable!("non-nn op routed to backprop_nn"),
    }
}
