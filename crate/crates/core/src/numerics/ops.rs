//! Differentiable operations on [`Var`].

use super::float::Float;
use super::graph::Var;
use super::kernels::{self, ConvGeom};
use super::tensor::{broadcast_shape, broadcast_strides, for_each_offset, strides_of, Tensor};
use crate::error::{Error, Result};

/// Convolution hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn grouped(stride: usize, pad: usize, groups: usize) -> Self {
        Self {
            stride,
            pad,
            groups,
        }
    }
}

fn unary_map<F: Float>(x: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

impl<'g, F: Float> Var<'g, F> {
    // ---------------------------------------------------------------- unary

    fn unary(
        self,
        forward: impl Fn(F) -> F,
        derivative: impl Fn(F, F) -> F + 'static,
    ) -> Var<'g, F> {
        let x = self.value();
        let y = unary_map(&x, forward);
        let y_saved = y.clone();
        self.graph().push(y, &[self], move |g, _| {
            let d = x
                .data()
                .iter()
                .zip(y_saved.data())
                .zip(g)
                .map(|((&xv, &yv), &gv)| gv * derivative(xv, yv))
                .collect();
            vec![Some(d)]
        })
    }

    pub fn sigmoid(self) -> Var<'g, F> {
        self.unary(kernels::sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn gelu(self) -> Var<'g, F> {
        self.unary(kernels::gelu, |x, _| kernels::gelu_grad(x))
    }

    pub fn relu(self) -> Var<'g, F> {
        self.unary(
            |x| x.max(F::zero()),
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn exp(self) -> Var<'g, F> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, F> {
        self.unary(|x| x.ln(), |x, _| F::one() / x)
    }

    pub fn neg(self) -> Var<'g, F> {
        self.scale(-F::one())
    }

    pub fn scale(self, s: F) -> Var<'g, F> {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: F) -> Var<'g, F> {
        self.unary(move |x| x + s, |_, _| F::one())
    }

    pub fn square(self) -> Var<'g, F> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// Same value, cut from the tape.
    pub fn detach(self) -> Var<'g, F> {
        self.graph().constant(self.value())
    }

    // --------------------------------------------------------------- binary

    fn binary(
        self,
        other: Var<'g, F>,
        op: &'static str,
        f: fn(F, F) -> F,
        da: fn(F, F, F) -> F,
        db: fn(F, F, F) -> F,
    ) -> Result<Var<'g, F>> {
        let a = self.value();
        let b = other.value();
        let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![F::zero(); n];
        let same = a.shape() == b.shape();
        if same {
            for ((o, &x), &y) in out.iter_mut().zip(a.data()).zip(b.data()) {
                *o = f(x, y);
            }
        } else {
            let so = strides_of(&out_shape);
            let sa = broadcast_strides(a.shape(), &out_shape);
            let sb = broadcast_strides(b.shape(), &out_shape);
            let (ad, bd) = (a.data(), b.data());
            for_each_offset(&out_shape, [&so, &sa, &sb], |[o, ia, ib]| {
                out[o] = f(ad[ia], bd[ib]);
            });
        }
        let value = Tensor::from_parts(out_shape.clone(), out);
        Ok(self.graph().push(value, &[self, other], move |g, need| {
            let (ad, bd) = (a.data(), b.data());
            let mut ga = need[0].then(|| vec![F::zero(); ad.len()]);
            let mut gb = need[1].then(|| vec![F::zero(); bd.len()]);
            if same {
                for i in 0..g.len() {
                    if let Some(ga) = ga.as_mut() {
                        ga[i] = da(ad[i], bd[i], g[i]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[i] = db(ad[i], bd[i], g[i]);
                    }
                }
            } else {
                let so = strides_of(&out_shape);
                let sa = broadcast_strides(a.shape(), &out_shape);
                let sb = broadcast_strides(b.shape(), &out_shape);
                for_each_offset(&out_shape, [&so, &sa, &sb], |[o, ia, ib]| {
                    if let Some(ga) = ga.as_mut() {
                        ga[ia] += da(ad[ia], bd[ib], g[o]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[ib] += db(ad[ia], bd[ib], g[o]);
                    }
                });
            }
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, "add", |a, b| a + b, |_, _, g| g, |_, _, g| g)
    }

    pub fn sub(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, "sub", |a, b| a - b, |_, _, g| g, |_, _, g| -g)
    }

    pub fn mul(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(other, "mul", |a, b| a * b, |_, b, g| g * b, |a, _, g| g * a)
    }

    pub fn div(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b, g| g / b,
            |a, b, g| -g * a / (b * b),
        )
    }

    // ---------------------------------------------------------------- linalg

    fn matmul_impl(self, other: Var<'g, F>, b_t: bool) -> Result<Var<'g, F>> {
        let op = if b_t { "matmul_t" } else { "matmul" };
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(op, &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if b_t {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(op, &sa, &sb));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch = broadcast_shape(op, batch_a, batch_b).map_err(|_| Error::shape(op, &sa, &sb))?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);

        // Shared 2-D right operand: fold the left batch into the row dimension.
        if batch_b.is_empty() {
            let rows = a.len() / k;
            let mut out = vec![F::zero(); rows * n];
            kernels::gemm(rows, k, n, a.data(), false, b.data(), b_t, &mut out, false);
            let value = Tensor::from_parts(out_shape, out);
            return Ok(self.graph().push(value, &[self, other], move |g, need| {
                let ga = need[0].then(|| {
                    let mut ga = vec![F::zero(); rows * k];
                    kernels::gemm(rows, n, k, g, false, b.data(), !b_t, &mut ga, false);
                    ga
                });
                let gb = need[1].then(|| {
                    let mut gb = vec![F::zero(); k * n];
                    if b_t {
                        kernels::gemm(n, rows, k, g, true, a.data(), false, &mut gb, false);
                    } else {
                        kernels::gemm(k, rows, n, a.data(), true, g, false, &mut gb, false);
                    }
                    gb
                });
                vec![ga, gb]
            }));
        }

        let nb: usize = batch.iter().product();
        let offsets = batch_offsets(batch_a, batch_b, &batch);
        let mut out = vec![F::zero(); nb * m * n];
        for (i, &(ia, ib)) in offsets.iter().enumerate() {
            kernels::gemm(
                m,
                k,
                n,
                &a.data()[ia * m * k..(ia + 1) * m * k],
                false,
                &b.data()[ib * k * n..(ib + 1) * k * n],
                b_t,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.graph().push(value, &[self, other], move |g, need| {
            let mut ga = need[0].then(|| vec![F::zero(); a.len()]);
            let mut gb = need[1].then(|| vec![F::zero(); b.len()]);
            for (i, &(ia, ib)) in offsets.iter().enumerate() {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &a.data()[ia * m * k..(ia + 1) * m * k];
                let bi = &b.data()[ib * k * n..(ib + 1) * k * n];
                if let Some(ga) = ga.as_mut() {
                    let dst = &mut ga[ia * m * k..(ia + 1) * m * k];
                    kernels::gemm(m, n, k, gi, false, bi, !b_t, dst, true);
                }
                if let Some(gb) = gb.as_mut() {
                    let dst = &mut gb[ib * k * n..(ib + 1) * k * n];
                    if b_t {
                        kernels::gemm(n, m, k, gi, true, ai, false, dst, true);
                    } else {
                        kernels::gemm(k, m, n, ai, true, gi, false, dst, true);
                    }
                }
            }
            vec![ga, gb]
        }))
    }

    /// Batched `self @ other` over the last two axes; batch axes broadcast.
    pub fn matmul(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.matmul_impl(other, false)
    }

    /// Batched `self @ other^T` over the last two axes.
    pub fn matmul_t(self, other: Var<'g, F>) -> Result<Var<'g, F>> {
        self.matmul_impl(other, true)
    }

    /// `self @ weight + bias` with `weight` stored `[in, out]`.
    pub fn linear(self, weight: Var<'g, F>, bias: Option<Var<'g, F>>) -> Result<Var<'g, F>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    // ---------------------------------------------------------------- conv

    pub fn conv2d(
        self,
        weight: Var<'g, F>,
        bias: Option<Var<'g, F>>,
        spec: Conv2dSpec,
    ) -> Result<Var<'g, F>> {
        let x = self.value();
        let w = weight.value();
        let (sx, sw) = (x.shape().to_vec(), w.shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        let groups = spec.groups.max(1);
        if sx[1] % groups != 0 || sw[0] % groups != 0 || sw[1] * groups != sx[1] {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if b.shape() != [sw[0]] {
                return Err(Error::shape("conv2d bias", &b.shape(), &[sw[0]]));
            }
        }
        let k = sw[2];
        let h_out = kernels::conv_out_len(sx[2], k, spec.stride, spec.pad);
        let w_out = kernels::conv_out_len(sx[3], k, spec.stride, spec.pad);
        let (Some(h_out), Some(w_out)) = (h_out, w_out) else {
            return Err(Error::Geometry(format!(
                "conv2d with k={k} stride={} pad={} has no output for input {:?}",
                spec.stride, spec.pad, sx
            )));
        };
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            k,
            stride: spec.stride,
            pad: spec.pad,
            groups,
            h_out,
            w_out,
        };
        let bias_val = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), bias_val.as_ref().map(|b| b.data()));
        let value = Tensor::from_parts(vec![geom.batch, geom.c_out, h_out, w_out], out);
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.graph().push(value, &parents, move |g, need| {
            let want_db = has_bias && need[2];
            let (dx, dw, db) =
                kernels::conv2d_backward(&geom, x.data(), w.data(), g, need[0], need[1], want_db);
            let mut out = vec![dx, dw];
            if has_bias {
                out.push(db);
            }
            out
        }))
    }

    // --------------------------------------------------------------- resize

    /// Bilinear resize (align-corners = false) of the last two axes.
    pub fn resize_bilinear(self, h_out: usize, w_out: usize) -> Result<Var<'g, F>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() < 2 || h_out == 0 || w_out == 0 {
            return Err(Error::shape("resize_bilinear", &s, &[h_out, w_out]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if (h, w) == (h_out, w_out) {
            return Ok(self);
        }
        let planes = x.len() / (h * w);
        let out = kernels::resize_forward(x.data(), planes, (h, w), (h_out, w_out));
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = h_out;
        shape[r - 1] = w_out;
        let value = Tensor::from_parts(shape, out);
        Ok(self.graph().push(value, &[self], move |g, _| {
            vec![Some(kernels::resize_backward(g, planes, (h, w), (h_out, w_out)))]
        }))
    }

    // ---------------------------------------------------------- normalizers

    pub fn softmax_last(self) -> Result<Var<'g, F>> {
        let x = self.value();
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax received NaN input".into()));
        }
        let n = *x.shape().last().expect("non-empty shape");
        let mut y = vec![F::zero(); x.len()];
        for (row, out) in x.data().chunks(n).zip(y.chunks_mut(n)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            out.iter_mut().for_each(|o| *o /= sum);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        let y_saved = value.clone();
        Ok(self.graph().push(value, &[self], move |g, _| {
            let mut d = vec![F::zero(); g.len()];
            for ((yr, gr), dr) in y_saved.data().chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(d)]
        }))
    }

    pub fn log_softmax_last(self) -> Result<Var<'g, F>> {
        let x = self.value();
        if x.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("log_softmax received NaN input".into()));
        }
        let n = *x.shape().last().expect("non-empty shape");
        let mut y = vec![F::zero(); x.len()];
        for (row, out) in x.data().chunks(n).zip(y.chunks_mut(n)) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        let y_saved = value.clone();
        Ok(self.graph().push(value, &[self], move |g, _| {
            let mut d = vec![F::zero(); g.len()];
            for ((yr, gr), dr) in y_saved.data().chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                let gsum: F = gr.iter().copied().sum();
                for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = gv - yv.exp() * gsum;
                }
            }
            vec![Some(d)]
        }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'g, F>, beta: Var<'g, F>, eps: f64) -> Result<Var<'g, F>> {
        let x = self.value();
        let n = *x.shape().last().expect("non-empty shape");
        if gamma.shape() != [n] || beta.shape() != [n] {
            return Err(Error::shape("layer_norm", x.shape(), &gamma.shape()));
        }
        let gv = gamma.value();
        let bv = beta.value();
        let eps = F::from_f64(eps);
        let inv_n = F::one() / F::from_f64(n as f64);
        let rows = x.len() / n;
        let mut xhat = vec![F::zero(); x.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut y = vec![F::zero(); x.len()];
        for r in 0..rows {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<F>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_n;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..n {
                let xh = (row[i] - mean) * rs;
                xhat[r * n + i] = xh;
                y[r * n + i] = xh * gv.data()[i] + bv.data()[i];
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), y);
        Ok(self.graph().push(value, &[self, gamma, beta], move |g, need| {
            let gd = gv.data();
            let dx = need[0].then(|| {
                let mut dx = vec![F::zero(); g.len()];
                for r in 0..rows {
                    let gr = &g[r * n..(r + 1) * n];
                    let xr = &xhat[r * n..(r + 1) * n];
                    let mut sum_d = F::zero();
                    let mut sum_dx = F::zero();
                    for i in 0..n {
                        let d = gr[i] * gd[i];
                        sum_d += d;
                        sum_dx += d * xr[i];
                    }
                    for i in 0..n {
                        let d = gr[i] * gd[i];
                        dx[r * n + i] = rstd[r] * (d - (sum_d + xr[i] * sum_dx) * inv_n);
                    }
                }
                dx
            });
            let dgamma = need[1].then(|| {
                let mut dg = vec![F::zero(); n];
                for r in 0..rows {
                    for i in 0..n {
                        dg[i] += g[r * n + i] * xhat[r * n + i];
                    }
                }
                dg
            });
            let dbeta = need[2].then(|| {
                let mut db = vec![F::zero(); n];
                for r in 0..rows {
                    for i in 0..n {
                        db[i] += g[r * n + i];
                    }
                }
                db
            });
            vec![dx, dgamma, dbeta]
        }))
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, F>> {
        let value = self.value().reshape(shape)?;
        Ok(self.graph().push(value, &[self], |g, _| vec![Some(g.to_vec())]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, F>> {
        let x = self.value();
        let s = x.shape().to_vec();
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", &s, axes));
        }
        if axes.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self);
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| s[a]).collect();
        let sin = strides_of(&s);
        let sin_perm: Vec<usize> = axes.iter().map(|&a| sin[a]).collect();
        let so = strides_of(&out_shape);
        let mut out = vec![F::zero(); x.len()];
        let xd = x.data();
        for_each_offset(&out_shape, [&so, &sin_perm], |[o, i]| out[o] = xd[i]);
        let value = Tensor::from_parts(out_shape.clone(), out);
        Ok(self.graph().push(value, &[self], move |g, _| {
            let mut d = vec![F::zero(); g.len()];
            for_each_offset(&out_shape, [&so, &sin_perm], |[o, i]| d[i] = g[o]);
            vec![Some(d)]
        }))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'g, F>], axis: usize) -> Result<Var<'g, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let values: Vec<Tensor<F>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &d) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        Ok(first.graph().push(value, parts, move |g, need| {
            let mut grads: Vec<Option<Vec<F>>> = need
                .iter()
                .zip(&sizes)
                .map(|(&n, &d)| n.then(|| Vec::with_capacity(outer * d * inner)))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &d) in grads.iter_mut().zip(&sizes) {
                    if let Some(gp) = gp.as_mut() {
                        gp.extend_from_slice(&g[off..off + d * inner]);
                    }
                    off += d * inner;
                }
            }
            grads
        }))
    }

    /// Slice `len` entries of `axis` starting at `start`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, F>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape("narrow", &s, &[axis, start, len]));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = s[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * d + start) * inner..(o * d + start + len) * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let value = Tensor::from_parts(shape, out);
        let n_in = x.len();
        Ok(self.graph().push(value, &[self], move |g, _| {
            let mut dx = vec![F::zero(); n_in];
            for o in 0..outer {
                dx[(o * d + start) * inner..(o * d + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(dx)]
        }))
    }

    // ------------------------------------------------------------ reductions

    /// Sum over `axes`; reduced axes are kept with size 1 when `keepdim`.
    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'g, F>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if axes.iter().any(|&a| a >= s.len()) {
            return Err(Error::shape("sum_axes", &s, axes));
        }
        let kept: Vec<usize> = s
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let sin = strides_of(&s);
        let sout = broadcast_strides(&kept, &s);
        let mut out = vec![F::zero(); kept.iter().product()];
        let xd = x.data();
        for_each_offset(&s, [&sin, &sout], |[i, o]| out[o] += xd[i]);
        let mut shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            s.iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::from_parts(shape, out);
        let n_in = x.len();
        Ok(self.graph().push(value, &[self], move |g, _| {
            let mut dx = vec![F::zero(); n_in];
            for_each_offset(&s, [&sin, &sout], |[i, o]| dx[i] = g[o]);
            vec![Some(dx)]
        }))
    }

    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'g, F>> {
        let s = self.shape();
        let count: usize = axes.iter().filter_map(|&a| s.get(a)).product();
        let inv = F::one() / F::from_f64((count.max(1)) as f64);
        Ok(self.sum_axes(axes, keepdim)?.scale(inv))
    }

    pub fn sum_all(self) -> Var<'g, F> {
        let x = self.value();
        let total = x.sum();
        let n = x.len();
        self.graph()
            .push(Tensor::scalar(total), &[self], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean_all(self) -> Var<'g, F> {
        let n = self.value().len();
        self.sum_all().scale(F::one() / F::from_f64(n as f64))
    }

    // ---------------------------------------------------------------- losses

    /// Mean binary cross-entropy on logits against `{0,1}` targets of the same shape.
    pub fn bce_with_logits(self, targets: &Tensor<F>) -> Result<Var<'g, F>> {
        let x = self.value();
        if x.shape() != targets.shape() {
            return Err(Error::shape("bce_with_logits", x.shape(), targets.shape()));
        }
        let n = F::from_f64((x.len()) as f64);
        let total: F = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&l, &t)| l.max(F::zero()) - l * t + (F::one() + (-l.abs()).exp()).ln())
            .sum();
        let t = targets.clone();
        Ok(self.graph().push(Tensor::scalar(total / n), &[self], move |g, _| {
            let scale = g[0] / n;
            let d = x
                .data()
                .iter()
                .zip(t.data())
                .map(|(&l, &tv)| (kernels::sigmoid(l) - tv) * scale)
                .collect();
            vec![Some(d)]
        }))
    }

    /// Mean softmax cross-entropy of `[B, C]` logits against class indices.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'g, F>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let classes = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        let logp = self.log_softmax_last()?;
        let lp = logp.value();
        let b = labels.len();
        let inv_b = F::one() / F::from_f64(b as f64);
        let loss: F = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -lp.data()[i * classes + l])
            .sum::<F>()
            * inv_b;
        let labels = labels.to_vec();
        Ok(self.graph().push(Tensor::scalar(loss), &[logp], move |g, _| {
            let mut d = vec![F::zero(); b * classes];
            for (i, &l) in labels.iter().enumerate() {
                d[i * classes + l] = -g[0] * inv_b;
            }
            vec![Some(d)]
        }))
    }
}

/// Per-batch (left, right) matrix indices for broadcast batch axes.
fn batch_offsets(batch_a: &[usize], batch_b: &[usize], batch: &[usize]) -> Vec<(usize, usize)> {
    if batch.is_empty() {
        return vec![(0, 0)];
    }
    let sa = broadcast_strides(batch_a, batch);
    let sb = broadcast_strides(batch_b, batch);
    let so = strides_of(batch);
    let mut out = vec![(0, 0); batch.iter().product()];
    for_each_offset(batch, [&so, &sa, &sb], |[o, ia, ib]| out[o] = (ia, ib));
    out
}
