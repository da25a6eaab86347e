//! Linear-algebra and neural-network primitives on `Var`.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::from_parts(shape, data)
}

/// Normalizes rows of length `d` in place; returns (x̂, 1/σ per row).
fn normalize_rows(x: &[f64], d: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut xhat = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv[r] = is;
        for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv)
}

impl<'t> Var<'t> {
    /// `[m, k] · [k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let out = a.matmul(&b)?;
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g| {
                let mut ga = vec![0.0; m * k];
                kernels::matmul_nt_acc(g.data(), b.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                kernels::matmul_tn_acc(a.data(), g.data(), &mut gb, k, m, n);
                vec![Some(t(vec![m, k], ga)), Some(t(vec![k, n], gb))]
            }),
        ))
    }

    /// Batched product `[B, m, k] · [B, k, n]`.
    pub fn bmm(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[1] {
            return Err(Error::Dim(format!("bmm of {:?} and {:?}", a.shape(), b.shape())));
        }
        let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            kernels::matmul_acc(
                &a.data()[i * m * k..(i + 1) * m * k],
                &b.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.tape.push(
            t(vec![bs, m, n], out),
            &[self, other],
            Box::new(move |g| {
                let mut ga = vec![0.0; bs * m * k];
                let mut gb = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    kernels::matmul_nt_acc(gi, &b.data()[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    kernels::matmul_tn_acc(&a.data()[i * m * k..(i + 1) * m * k], gi, &mut gb[i * k * n..(i + 1) * k * n], k, m, n);
                }
                vec![Some(t(vec![bs, m, k], ga)), Some(t(vec![bs, k, n], gb))]
            }),
        ))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || x.is_empty() {
            return Err(Error::Dim(format!("softmax over empty axis of {:?}", x.shape())));
        }
        let mut y = x.to_vec();
        for row in y.chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = t(x.shape().to_vec(), y);
        let ys = y.clone();
        Ok(self.tape.push(
            y,
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; ys.len()];
                for ((gr, yr), out) in g.data().chunks(d).zip(ys.data().chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![Some(t(ys.shape().to_vec(), gx))]
            }),
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || x.is_empty() {
            return Err(Error::Dim(format!("log_softmax over empty axis of {:?}", x.shape())));
        }
        let mut y = x.to_vec();
        let mut p = vec![0.0; y.len()];
        for (row, prow) in y.chunks_mut(d).zip(p.chunks_mut(d)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for (v, pv) in row.iter_mut().zip(prow.iter_mut()) {
                *v -= lse;
                *pv = v.exp();
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape.push(
            t(shape.clone(), y),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; p.len()];
                for ((gr, pr), out) in g.data().chunks(d).zip(p.chunks(d)).zip(gx.chunks_mut(d)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..d {
                        out[j] = gr[j] - pr[j] * s;
                    }
                }
                vec![Some(t(shape.clone(), gx))]
            }),
        ))
    }

    /// `out[i] = x[i, idx[i]]` for `x[N, C]`.
    pub fn pick(self, idx: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != idx.len() || idx.iter().any(|&i| i >= x.shape()[1]) {
            return Err(Error::Dim(format!("pick {} indices from {:?}", idx.len(), x.shape())));
        }
        let c = x.shape()[1];
        let idx = idx.to_vec();
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| x.data()[r * c + i]).collect();
        let shape = x.shape().to_vec();
        Ok(self.tape.push(
            Tensor::from_vec(out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; shape[0] * c];
                for (r, &i) in idx.iter().enumerate() {
                    gx[r * c + i] = g.data()[r];
                }
                vec![Some(t(shape.clone(), gx))]
            }),
        ))
    }

    /// Rows of an embedding table `[vocab, d]` selected by `ids`.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.rank() != 2 || ids.iter().any(|&i| i >= table.shape()[0]) {
            return Err(Error::Dim(format!("embedding lookup of ids {:?} in {:?}", ids, table.shape())));
        }
        let d = table.shape()[1];
        let ids = ids.to_vec();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in &ids {
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let shape = table.shape().to_vec();
        Ok(self.tape.push(
            t(vec![ids.len(), d], out),
            &[self],
            Box::new(move |g| {
                let mut gt = vec![0.0; shape[0] * d];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g.data()[r * d + j];
                    }
                }
                vec![Some(t(shape.clone(), gt))]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 || gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dim(format!(
                "layer_norm: x {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            )));
        }
        self.normalize_last(eps)?.mul_row(gamma)?.add_row(beta)
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn normalize_last(self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Dim(format!("normalize over empty axis of {:?}", x.shape())));
        }
        let (xhat, inv) = normalize_rows(x.data(), d, eps);
        let shape = x.shape().to_vec();
        let xh = xhat.clone();
        Ok(self.tape.push(
            t(shape.clone(), xhat),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; xh.len()];
                for (r, is) in inv.iter().enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xr = &xh[r * d..(r + 1) * d];
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = is * (gr[j] - mg - xr[j] * mgx);
                    }
                }
                vec![Some(t(shape.clone(), gx))]
            }),
        ))
    }

    /// Scales each row of the last axis to unit L2 norm, `x / max(‖x‖, eps)`.
    pub fn l2_normalize_last(self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::Dim(format!("l2 normalize over empty axis of {:?}", x.shape())));
        }
        let mut y = x.to_vec();
        let mut inv = Vec::with_capacity(x.len() / d);
        let mut clipped = Vec::with_capacity(x.len() / d);
        for row in y.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let i = 1.0 / n.max(eps);
            row.iter_mut().for_each(|v| *v *= i);
            inv.push(i);
            clipped.push(n <= eps);
        }
        let shape = x.shape().to_vec();
        let yc = y.clone();
        Ok(self.tape.push(
            t(shape.clone(), y),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; yc.len()];
                for (r, (&i, &c)) in inv.iter().zip(&clipped).enumerate() {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let yr = &yc[r * d..(r + 1) * d];
                    let dot = if c { 0.0 } else { gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() };
                    for j in 0..d {
                        gx[r * d + j] = i * (gr[j] - yr[j] * dot);
                    }
                }
                vec![Some(t(shape.clone(), gx))]
            }),
        ))
    }

    /// Multiplies every element by the single-element `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Result<Var<'t>> {
        let (x, sv) = (self.value(), s.value());
        if sv.len() != 1 {
            return Err(Error::Dim(format!("mul_scalar by {:?}", sv.shape())));
        }
        let c = sv.data()[0];
        let (shape, s_shape) = (x.shape().to_vec(), sv.shape().to_vec());
        Ok(self.tape.push(
            x.map(|v| v * c),
            &[self, s],
            Box::new(move |g| {
                let gs: f64 = g.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
                vec![Some(t(shape.clone(), g.data().iter().map(|v| v * c).collect())), Some(t(s_shape.clone(), vec![gs]))]
            }),
        ))
    }

    /// Training-mode batch normalization of `x[N, C, ...]` over every axis but 1.
    /// Returns the output together with the batch mean and biased variance.
    pub fn batch_norm_train(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
        let x = self.value();
        if x.rank() < 2 || gamma.shape() != [x.shape()[1]] || beta.shape() != [x.shape()[1]] {
            return Err(Error::Dim(format!("batch_norm: x {:?}, gamma {:?}", x.shape(), gamma.shape())));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let inner: usize = x.shape()[2..].iter().product();
        let m = (n * inner) as f64;
        if n * inner < 2 {
            return Err(Error::Dim(format!("batch_norm needs at least 2 values per channel, got {:?}", x.shape())));
        }
        let idx = move |s: usize, ch: usize, i: usize| (s * c + ch) * inner + i;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for smp in 0..n {
                for i in 0..inner {
                    s += x.data()[idx(smp, ch, i)];
                }
            }
            mean[ch] = s / m;
            let mut v = 0.0;
            for smp in 0..n {
                for i in 0..inner {
                    let d = x.data()[idx(smp, ch, i)] - mean[ch];
                    v += d * d;
                }
            }
            var[ch] = v / m;
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        for smp in 0..n {
            for ch in 0..c {
                for i in 0..inner {
                    let k = idx(smp, ch, i);
                    xhat[k] = (x.data()[k] - mean[ch]) * inv[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let xh = xhat.clone();
        let normed = self.tape.push(
            t(shape.clone(), xhat),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; xh.len()];
                for ch in 0..c {
                    let (mut mg, mut mgx) = (0.0, 0.0);
                    for smp in 0..n {
                        for i in 0..inner {
                            let k = idx(smp, ch, i);
                            mg += g.data()[k];
                            mgx += g.data()[k] * xh[k];
                        }
                    }
                    mg /= m;
                    mgx /= m;
                    for smp in 0..n {
                        for i in 0..inner {
                            let k = idx(smp, ch, i);
                            gx[k] = inv[ch] * (g.data()[k] - mg - xh[k] * mgx);
                        }
                    }
                }
                vec![Some(t(shape.clone(), gx))]
            }),
        );
        let out = normed.channel_scale_shift(gamma, beta)?;
        Ok((out, mean, var))
    }

    /// Eval-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(self, gamma: Var<'t>, beta: Var<'t>, mean: &[f64], var: &[f64], eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() < 2 || mean.len() != x.shape()[1] || var.len() != x.shape()[1] {
            return Err(Error::Dim(format!("batch_norm_eval: x {:?}, stats {}", x.shape(), mean.len())));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let inner = x.len() / (n * c).max(1);
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = x.to_vec();
        for (k, v) in xhat.iter_mut().enumerate() {
            let ch = (k / inner) % c;
            *v = (*v - mean[ch]) * inv[ch];
        }
        let shape = x.shape().to_vec();
        let normed = self.tape.push(
            t(shape.clone(), xhat),
            &[self],
            Box::new(move |g| {
                let gx: Vec<f64> = g.data().iter().enumerate().map(|(k, gv)| gv * inv[(k / inner) % c]).collect();
                vec![Some(t(shape.clone(), gx))]
            }),
        );
        normed.channel_scale_shift(gamma, beta)
    }

    /// `x[N, C, ...] · gamma[C] + beta[C]`.
    pub fn channel_scale_shift(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        if x.rank() < 2 || g.shape() != [x.shape()[1]] || b.shape() != [x.shape()[1]] {
            return Err(Error::Dim(format!("channel scale of {:?} by {:?}", x.shape(), g.shape())));
        }
        let (n, c) = (x.shape()[0], x.shape()[1]);
        let inner = x.len() / (n * c).max(1);
        let out: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let ch = (k / inner) % c;
                v * g.data()[ch] + b.data()[ch]
            })
            .collect();
        let shape = x.shape().to_vec();
        Ok(self.tape.push(
            t(shape.clone(), out),
            &[self, gamma, beta],
            Box::new(move |gr| {
                let mut gx = vec![0.0; x.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for (k, &gv) in gr.data().iter().enumerate() {
                    let ch = (k / inner) % c;
                    gx[k] = gv * g.data()[ch];
                    gg[ch] += gv * x.data()[k];
                    gb[ch] += gv;
                }
                vec![Some(t(shape.clone(), gx)), Some(Tensor::from_vec(gg)), Some(Tensor::from_vec(gb))]
            }),
        ))
    }

    /// Inverted dropout; the mask is drawn from `rng` and reused in backward.
    pub fn dropout(self, p: f64, rng: &mut Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self);
        }
        let x = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.len()).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let out: Vec<f64> = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = x.shape().to_vec();
        Ok(self.tape.push(
            t(shape.clone(), out),
            &[self],
            Box::new(move |g| {
                vec![Some(t(shape.clone(), g.data().iter().zip(&mask).map(|(a, m)| a * m).collect()))]
            }),
        ))
    }

    /// 2-D convolution: `x[N, Ci, H, W]`, `w[Co, Ci, kh, kw]`, optional `b[Co]`.
    pub fn conv2d(self, w: Var<'t>, b: Option<Var<'t>>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        if x.rank() != 4 || wv.rank() != 4 || x.shape()[1] != wv.shape()[1] {
            return Err(Error::Dim(format!("conv2d of input {:?} with kernel {:?}", x.shape(), wv.shape())));
        }
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (wv.shape()[0], wv.shape()[2], wv.shape()[3]);
        let g = ConvGeom { channels: ci, h, w: wd, kh, kw, sh: stride.0, sw: stride.1, ph: pad.0, pw: pad.1 };
        if !g.valid() {
            return Err(Error::Dim(format!("conv2d kernel {:?} larger than padded input {:?}", wv.shape(), x.shape())));
        }
        if let Some(b) = b {
            if b.shape() != [co] {
                return Err(Error::Dim(format!("conv2d bias {:?} for {co} output channels", b.shape())));
            }
        }
        let bias = b.map(|b| b.value());
        let (oh, ow) = (g.out_h(), g.out_w());
        let (p, kk) = (oh * ow, ci * kh * kw);
        let in_sz = ci * h * wd;
        let mut out = vec![0.0; n * co * p];
        for s in 0..n {
            let cols = kernels::im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &g);
            let o = &mut out[s * co * p..(s + 1) * co * p];
            kernels::matmul_acc(wv.data(), &cols, o, co, kk, p);
            if let Some(bias) = &bias {
                for (c, row) in o.chunks_mut(p).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias.data()[c]);
                }
            }
        }
        let has_bias = b.is_some();
        let mut parents = vec![self, w];
        parents.extend(b);
        let (xs, ws) = (x.shape().to_vec(), wv.shape().to_vec());
        Ok(self.tape.push(
            t(vec![n, co, oh, ow], out),
            &parents,
            Box::new(move |gr| {
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; co];
                let mut dcols = vec![0.0; kk * p];
                for s in 0..n {
                    let go = &gr.data()[s * co * p..(s + 1) * co * p];
                    let cols = kernels::im2col(&x.data()[s * in_sz..(s + 1) * in_sz], &g);
                    kernels::matmul_nt_acc(go, &cols, &mut gw, co, p, kk);
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    kernels::matmul_tn_acc(wv.data(), go, &mut dcols, kk, co, p);
                    kernels::col2im(&dcols, &g, &mut gx[s * in_sz..(s + 1) * in_sz]);
                    for (c, row) in go.chunks(p).enumerate() {
                        gb[c] += row.iter().sum::<f64>();
                    }
                }
                let mut v = vec![Some(t(xs.clone(), gx)), Some(t(ws.clone(), gw))];
                if has_bias {
                    v.push(Some(Tensor::from_vec(gb)));
                }
                v
            }),
        ))
    }

    /// Transposed 2-D convolution (adjoint of `conv2d` w.r.t. its input):
    /// `x[N, Ci, H, W]`, `w[Ci, Co, kh, kw]`, output side `(H-1)·s - 2p + k`.
    pub fn conv_transpose2d(self, w: Var<'t>, b: Option<Var<'t>>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var<'t>> {
        let (x, wv) = (self.value(), w.value());
        if x.rank() != 4 || wv.rank() != 4 || x.shape()[1] != wv.shape()[0] {
            return Err(Error::Dim(format!("conv_transpose2d of input {:?} with kernel {:?}", x.shape(), wv.shape())));
        }
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        let oh = ((h - 1) * stride.0 + kh).checked_sub(2 * pad.0);
        let ow = ((wd - 1) * stride.1 + kw).checked_sub(2 * pad.1);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Dim(format!("conv_transpose2d padding {pad:?} too large for {:?}", x.shape())));
        };
        let g = ConvGeom { channels: co, h: oh, w: ow, kh, kw, sh: stride.0, sw: stride.1, ph: pad.0, pw: pad.1 };
        if let Some(b) = b {
            if b.shape() != [co] {
                return Err(Error::Dim(format!("conv_transpose2d bias {:?} for {co} channels", b.shape())));
            }
        }
        let bias = b.map(|b| b.value());
        let (p, kk) = (h * wd, co * kh * kw);
        let (in_sz, out_sz) = (ci * p, co * oh * ow);
        let mut out = vec![0.0; n * out_sz];
        let mut cols = vec![0.0; kk * p];
        for s in 0..n {
            cols.iter_mut().for_each(|v| *v = 0.0);
            kernels::matmul_tn_acc(wv.data(), &x.data()[s * in_sz..(s + 1) * in_sz], &mut cols, kk, ci, p);
            let o = &mut out[s * out_sz..(s + 1) * out_sz];
            kernels::col2im(&cols, &g, o);
            if let Some(bias) = &bias {
                for (c, row) in o.chunks_mut(oh * ow).enumerate() {
                    row.iter_mut().for_each(|v| *v += bias.data()[c]);
                }
            }
        }
        let has_bias = b.is_some();
        let mut parents = vec![self, w];
        parents.extend(b);
        let (xs, ws) = (x.shape().to_vec(), wv.shape().to_vec());
        Ok(self.tape.push(
            t(vec![n, co, oh, ow], out),
            &parents,
            Box::new(move |gr| {
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; co];
                for s in 0..n {
                    let go = &gr.data()[s * out_sz..(s + 1) * out_sz];
                    let gcols = kernels::im2col(go, &g);
                    kernels::matmul_acc(wv.data(), &gcols, &mut gx[s * in_sz..(s + 1) * in_sz], ci, kk, p);
                    kernels::matmul_nt_acc(&x.data()[s * in_sz..(s + 1) * in_sz], &gcols, &mut gw, ci, p, kk);
                    for (c, row) in go.chunks(oh * ow).enumerate() {
                        gb[c] += row.iter().sum::<f64>();
                    }
                }
                let mut v = vec![Some(t(xs.clone(), gx)), Some(t(ws.clone(), gw))];
                if has_bias {
                    v.push(Some(Tensor::from_vec(gb)));
                }
                v
            }),
        ))
    }

    /// 1-D convolution: `x[N, Ci, L]`, `w[Co, Ci, K]`.
    pub fn conv1d(self, w: Var<'t>, b: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::Dim(format!("conv1d of input {:?} with kernel {:?}", xs, ws)));
        }
        let x4 = self.reshape(&[xs[0], xs[1], 1, xs[2]])?;
        let w4 = w.reshape(&[ws[0], ws[1], 1, ws[2]])?;
        let y = x4.conv2d(w4, b, (1, stride), (0, pad))?;
        let ys = y.shape();
        y.reshape(&[ys[0], ys[1], ys[3]])
    }

    /// Transposed 1-D convolution: `x[N, Ci, L]`, `w[Ci, Co, K]`.
    pub fn conv_transpose1d(self, w: Var<'t>, b: Option<Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let (xs, ws) = (self.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::Dim(format!("conv_transpose1d of input {:?} with kernel {:?}", xs, ws)));
        }
        let x4 = self.reshape(&[xs[0], xs[1], 1, xs[2]])?;
        let w4 = w.reshape(&[ws[0], ws[1], 1, ws[2]])?;
        let y = x4.conv_transpose2d(w4, b, (1, stride), (0, pad))?;
        let ys = y.shape();
        y.reshape(&[ys[0], ys[1], ys[3]])
    }

    /// Non-overlapping max pooling over the last axis of `x[N, C, L]`;
    /// a trailing remainder shorter than `k` is dropped.
    pub fn max_pool1d(self, k: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 3 || k == 0 || x.shape()[2] < k {
            return Err(Error::Dim(format!("max_pool1d({k}) of {:?}", x.shape())));
        }
        let (rows, l) = (x.shape()[0] * x.shape()[1], x.shape()[2]);
        let lo = l / k;
        let mut out = vec![0.0; rows * lo];
        let mut arg = vec![0usize; rows * lo];
        for r in 0..rows {
            for j in 0..lo {
                let base = r * l + j * k;
                let mut best = base;
                for i in base + 1..base + k {
                    if x.data()[i] > x.data()[best] {
                        best = i;
                    }
                }
                out[r * lo + j] = x.data()[best];
                arg[r * lo + j] = best;
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape.push(
            t(vec![shape[0], shape[1], lo], out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; rows * l];
                for (i, &a) in arg.iter().enumerate() {
                    gx[a] += g.data()[i];
                }
                vec![Some(t(shape.clone(), gx))]
            }),
        ))
    }

    /// Mean pooling with a `k×k` window and stride `k` on `x[N, C, H, W]`.
    pub fn avg_pool2d(self, k: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 4 || k == 0 || !x.shape()[2].is_multiple_of(k) || !x.shape()[3].is_multiple_of(k) {
            return Err(Error::Dim(format!("avg_pool2d({k}) of {:?}", x.shape())));
        }
        let (nc, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h / k, w / k);
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; nc * oh * ow];
        for c in 0..nc {
            for i in 0..h {
                for j in 0..w {
                    out[(c * oh + i / k) * ow + j / k] += x.data()[(c * h + i) * w + j] * norm;
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape.push(
            t(vec![shape[0], shape[1], oh, ow], out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; nc * h * w];
                for c in 0..nc {
                    for i in 0..h {
                        for j in 0..w {
                            gx[(c * h + i) * w + j] = g.data()[(c * oh + i / k) * ow + j / k] * norm;
                        }
                    }
                }
                vec![Some(t(shape.clone(), gx))]
            }),
        ))
    }

    /// Nearest-neighbour upsampling by an integer factor on `x[N, C, H, W]`.
    pub fn upsample_nearest2d(self, f: usize) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 4 || f == 0 {
            return Err(Error::Dim(format!("upsample({f}) of {:?}", x.shape())));
        }
        let (nc, h, w) = (x.shape()[0] * x.shape()[1], x.shape()[2], x.shape()[3]);
        let (oh, ow) = (h * f, w * f);
        let mut out = vec![0.0; nc * oh * ow];
        for c in 0..nc {
            for i in 0..oh {
                for j in 0..ow {
                    out[(c * oh + i) * ow + j] = x.data()[(c * h + i / f) * w + j / f];
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape.push(
            t(vec![shape[0], shape[1], oh, ow], out),
            &[self],
            Box::new(move |g| {
                let mut gx = vec![0.0; nc * h * w];
                for c in 0..nc {
                    for i in 0..oh {
                        for j in 0..ow {
                            gx[(c * h + i / f) * w + j / f] += g.data()[(c * oh + i) * ow + j];
                        }
                    }
                }
                vec![Some(t(shape.clone(), gx))]
            }),
        ))
    }
}
