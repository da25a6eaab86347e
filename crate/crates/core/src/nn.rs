//! Trainable layers built on the autodiff ops.
//!
//! Layers hold `ParamId`s into a `ParamStore` and read their weights from a
//! `Ctx` bound for the current pass.

use crate::error::{Error, Result};
use crate::params::{Ctx, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Affine map on the last axis; weights stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(&[input, output], bound, rng));
        let b = bias.then(|| store.add(format!("{name}.bias"), uniform(&[output], bound, rng)));
        Self { w, b, input, output }
    }

    /// Zero-initialized variant (used for output heads that should start silent).
    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(&[input, output]));
        let b = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[output])));
        Self { w, b, input, output }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.input) {
            return Err(Error::Dim(format!("linear expects last axis {}, got {:?}", self.input, shape)));
        }
        let rows = x.len() / self.input;
        let flat = if shape.len() == 2 { x } else { x.reshape(&[rows, self.input])? };
        let mut y = flat.matmul(ctx.p(self.w))?;
        if let Some(b) = self.b {
            y = y.add_row(ctx.p(b))?;
        }
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = shape;
            *out.last_mut().unwrap() = self.output;
            y.reshape(&out)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(&[cout, cin, k, k], bound, rng));
        let b = Some(store.add(format!("{name}.bias"), uniform(&[cout], bound, rng)));
        Self { w, b, stride, pad }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(ctx.p(self.w), self.b.map(|b| ctx.p(b)), (self.stride, self.stride), (self.pad, self.pad))
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / ((cout * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(&[cin, cout, k, k], bound, rng));
        let b = Some(store.add(format!("{name}.bias"), uniform(&[cout], bound, rng)));
        Self { w, b, stride, pad }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv_transpose2d(ctx.p(self.w), self.b.map(|b| ctx.p(b)), (self.stride, self.stride), (self.pad, self.pad))
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / ((cin * k) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(&[cout, cin, k], bound, rng));
        let b = Some(store.add(format!("{name}.bias"), uniform(&[cout], bound, rng)));
        Self { w, b, stride, pad }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv1d(ctx.p(self.w), self.b.map(|b| ctx.p(b)), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::ones(&[d]));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[d]));
        Self { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), self.eps)
    }
}

/// Batch normalization over axis 1 with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::ones(&[c]));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[c]));
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        let running_var = store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[c]));
        Self { gamma, beta, running_mean, running_var, momentum: 0.1, eps: 1e-5 }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        let rm = ctx.p(self.running_mean).value();
        let rv = ctx.p(self.running_var).value();
        if ctx.is_train() {
            let (y, mean, var) = x.batch_norm_train(g, b, self.eps)?;
            let shape = x.shape();
            let count = (x.len() / shape[1]) as f64;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let m = self.momentum;
            let nm: Vec<f64> = rm.data().iter().zip(&mean).map(|(r, v)| (1.0 - m) * r + m * v).collect();
            let nv: Vec<f64> = rv.data().iter().zip(&var).map(|(r, v)| (1.0 - m) * r + m * v * unbias).collect();
            ctx.push_update(self.running_mean, Tensor::from_vec(nm));
            ctx.push_update(self.running_var, Tensor::from_vec(nv));
            Ok(y)
        } else {
            x.batch_norm_eval(g, b, rm.data(), rv.data(), self.eps)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if ctx.is_train() && self.p > 0.0 {
            x.dropout(self.p, ctx.rng())
        } else {
            Ok(x)
        }
    }
}

/// Single-direction GRU cell with the three-gate layout (reset, update,
/// candidate) and two bias vectors, one on the input side and one on the
/// hidden side: `3·(H·I + H·H + 2·H)` trainable scalars.
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(format!("{name}.weight_ih"), uniform(&[input, 3 * hidden], bound, rng));
        let w_hh = store.add(format!("{name}.weight_hh"), uniform(&[hidden, 3 * hidden], bound, rng));
        let b_ih = store.add(format!("{name}.bias_ih"), uniform(&[3 * hidden], bound, rng));
        let b_hh = store.add(format!("{name}.bias_hh"), uniform(&[3 * hidden], bound, rng));
        Self { w_ih, w_hh, b_ih, b_hh, input, hidden }
    }

    pub fn param_count(input: usize, hidden: usize) -> usize {
        3 * (hidden * input + hidden * hidden + 2 * hidden)
    }

    /// One step: `x[N, I]`, `h[N, H]` → `h'[N, H]`.
    pub fn step<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let hd = self.hidden;
        let gi = x.matmul(ctx.p(self.w_ih))?.add_row(ctx.p(self.b_ih))?;
        let gh = h.matmul(ctx.p(self.w_hh))?.add_row(ctx.p(self.b_hh))?;
        let r = gi.slice(1, 0, hd)?.add(gh.slice(1, 0, hd)?)?.sigmoid();
        let z = gi.slice(1, hd, 2 * hd)?.add(gh.slice(1, hd, 2 * hd)?)?.sigmoid();
        let n = gi.slice(1, 2 * hd, 3 * hd)?.add(r.mul(gh.slice(1, 2 * hd, 3 * hd)?)?)?.tanh();
        // h' = (1 - z)·n + z·h = n + z·(h - n)
        n.add(z.mul(h.sub(n)?)?)
    }

    /// Runs over `x[N, L, I]` (reversed when `reverse`), returning the hidden
    /// state at each position in input order: `[N, L, H]`.
    pub fn sequence<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, reverse: bool) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.input {
            return Err(Error::Dim(format!("GRU expects [N, L, {}], got {:?}", self.input, s)));
        }
        let (n, l) = (s[0], s[1]);
        let mut h = ctx.constant(Tensor::zeros(&[n, self.hidden]));
        let mut outs = vec![None; l];
        let order: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
        for t in order {
            let xt = x.slice(1, t, t + 1)?.reshape(&[n, self.input])?;
            h = self.step(ctx, xt, h)?;
            outs[t] = Some(h.reshape(&[n, 1, self.hidden])?);
        }
        let outs: Vec<Var<'t>> = outs.into_iter().map(|o| o.unwrap()).collect();
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            Var::concat(&outs, 1)
        }
    }
}

/// Bidirectional GRU: forward and reverse passes concatenated on the feature axis.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub fwd: Gru,
    pub bwd: Gru,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let fwd = Gru::new(store, &format!("{name}.fwd"), input, hidden, rng);
        let bwd = Gru::new(store, &format!("{name}.bwd"), input, hidden, rng);
        Self { fwd, bwd }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let f = self.fwd.sequence(ctx, x, false)?;
        let b = self.bwd.sequence(ctx, x, true)?;
        Var::concat(&[f, b], 2)
    }
}

/// Multi-head self-attention over `x[N, L, d]`.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {d} not divisible into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            heads,
            d,
        })
    }

    /// Returns the attended output and the attention weights of each head
    /// (`[N, L, L]` per head).
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<(Var<'t>, Vec<Tensor>)> {
        let (q, k, v) = (self.q.forward(ctx, x)?, self.k.forward(ctx, x)?, self.v.forward(ctx, x)?);
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(2, h * dh, (h + 1) * dh)?;
            let kh = k.slice(2, h * dh, (h + 1) * dh)?;
            let vh = v.slice(2, h * dh, (h + 1) * dh)?;
            let a = qh.bmm(kh.transpose()?)?.scale(scale).softmax()?;
            weights.push(a.value());
            outs.push(a.bmm(vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { Var::concat(&outs, 2)? };
        Ok((self.o.forward(ctx, cat)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub d: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, d: usize, rng: &mut Rng) -> Self {
        let table = store.add(format!("{name}.table"), Tensor::randn(&[vocab, d], 1.0 / (d as f64).sqrt(), rng));
        Self { table, vocab, d }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, ids: &[usize]) -> Result<Var<'t>> {
        ctx.p(self.table).embedding(ids)
    }
}
