//! Conditional latent diffusion: variance schedule, closed-form forward
//! noising, an ε-predicting denoiser and ancestral reverse sampling, plus
//! image-to-image refinement of an initial guess.

use neurodecode_core::nn::{Conv2d, Linear};
use neurodecode_core::optim::Adam;
use neurodecode_core::rng::derive_seed;
use neurodecode_core::{Ctx, Error, ParamStore, Result, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::util::{batches, ensure_finite};

/// Variance schedule `β_1..β_T` with `α_t = 1 − β_t` and `ᾱ_t = ∏ α_s`.
/// Timesteps are 1-based; `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(beta_start) || !ok(beta_end) {
            return Err(Error::Config(format!("betas must lie in (0, 1), got {beta_start} and {beta_end}")));
        }
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| if t_steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64 })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::Config("betas must be non-empty and lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let last = *alpha_bar.last().unwrap();
            alpha_bar.push(last * (1.0 - b));
        }
        Ok(Self { betas, alpha_bar })
    }

    pub fn t_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.t_steps() {
            return Err(Error::Config(format!("timestep {t} outside 0..={}", self.t_steps())));
        }
        Ok(())
    }

    /// `z_t = √ᾱ_t z0 + √(1 − ᾱ_t) ε` for a given `ε`.
    pub fn diffuse_with(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let (a, s) = (self.alpha_bar(t).sqrt(), (1.0 - self.alpha_bar(t)).sqrt());
        z0.zip_map(eps, |z, e| a * z + s * e)
    }

    /// Samples `q(z_t | z0)` in one jump. Composing the per-step Gaussians
    /// `N(√(1 − β_t) z_{t−1}, β_t I)` gives mean `√ᾱ_t z0` and variance
    /// `1 − ᾱ_t`; `t = 0` returns `z0`.
    pub fn forward_diffuse(&self, z0: &Tensor, t: usize, rng: &mut Rng) -> Result<Tensor> {
        self.check_t(t)?;
        if t == 0 {
            return Ok(z0.clone());
        }
        let eps = Tensor::randn(z0.shape(), 1.0, rng);
        self.diffuse_with(z0, t, &eps)
    }

    /// Samples `q(z_t | z0)` by applying the per-step transition `t` times.
    pub fn forward_chain(&self, z0: &Tensor, t: usize, rng: &mut Rng) -> Result<Tensor> {
        self.check_t(t)?;
        let mut z = z0.clone();
        for s in 1..=t {
            let (a, b) = (self.alpha(s).sqrt(), self.beta(s).sqrt());
            let noise = Tensor::randn(z.shape(), 1.0, rng);
            z = z.zip_map(&noise, |v, e| a * v + b * e)?;
        }
        Ok(z)
    }

    /// Clean-latent estimate `(z_t − √(1 − ᾱ_t) ε) / √ᾱ_t`.
    pub fn predict_z0(&self, zt: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_t(t)?;
        let (a, s) = (self.alpha_bar(t).sqrt(), (1.0 - self.alpha_bar(t)).sqrt());
        zt.zip_map(eps, |z, e| (z - s * e) / a)
    }

    /// Reverse-process mean `(z_t − β_t / √(1 − ᾱ_t) ε) / √α_t`.
    pub fn reverse_mean(&self, zt: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if t == 0 {
            return Err(Error::Config("reverse step needs t ≥ 1".into()));
        }
        self.check_t(t)?;
        let c = self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt();
        let a = self.alpha(t).sqrt();
        zt.zip_map(eps, |z, e| (z - c * e) / a)
    }

    /// Mean of the forward posterior `q(z_{t−1} | z_t, z0)`.
    pub fn posterior_mean(&self, zt: &Tensor, z0: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        let (ab, abp, b) = (self.alpha_bar(t), self.alpha_bar(t - 1), self.beta(t));
        let c0 = abp.sqrt() * b / (1.0 - ab);
        let ct = self.alpha(t).sqrt() * (1.0 - abp) / (1.0 - ab);
        z0.zip_map(zt, |x, z| c0 * x + ct * z)
    }
}

/// Image and text embedding rows conditioning one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub vision: Tensor,
    pub text: Tensor,
}

fn unit_mean_row(rows: &Tensor) -> Vec<f64> {
    let (l, d) = (rows.shape()[0], rows.shape()[1]);
    let mut m = vec![0.0; d];
    for r in 0..l {
        for (j, mj) in m.iter_mut().enumerate() {
            *mj += rows.data()[r * d + j];
        }
    }
    let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 1e-12 {
        m.iter_mut().for_each(|v| *v /= n);
    }
    m
}

impl Conditioning {
    /// Unit-norm mean vision row followed by the unit-norm mean text row.
    pub fn pooled(&self) -> Vec<f64> {
        let mut v = unit_mean_row(&self.vision);
        v.extend(unit_mean_row(&self.text));
        v
    }

    /// Vision rows stacked over text rows.
    pub fn rows(&self) -> Result<Tensor> {
        let d = self.vision.shape()[1];
        if self.text.shape()[1] != d {
            return Err(Error::Dim(format!("vision rows {:?} and text rows {:?} differ in width", self.vision.shape(), self.text.shape())));
        }
        let mut data = self.vision.to_vec();
        data.extend_from_slice(self.text.data());
        Tensor::new(&[self.vision.shape()[0] + self.text.shape()[0], d], data)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub t_steps: usize,
    /// Linear β range. The default is the common 1e-4..0.02 range scaled by
    /// five, the smallest integer factor that leaves ᾱ_T below 0.01 at 100
    /// steps.
    pub beta_start: f64,
    pub beta_end: f64,
    /// Latent map shape `[C, S, S]`.
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Embedding width of the conditioning rows.
    pub cond_dim: usize,
    pub channels: usize,
    pub emb_dim: usize,
    /// Adds single-head cross-attention to the conditioning rows at the
    /// bottleneck.
    pub cross_attention: bool,
    /// Ignores the conditioning entirely.
    pub unconditional: bool,
    /// Probability of zeroing a sample's conditioning during training.
    pub cond_dropout: f64,
    /// Fraction of the schedule traversed when refining a guess.
    pub strength: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            t_steps: 100,
            beta_start: 5e-4,
            beta_end: 0.1,
            latent_channels: 4,
            latent_size: 8,
            cond_dim: 64,
            channels: 32,
            emb_dim: 64,
            cross_attention: false,
            unconditional: false,
            cond_dropout: 0.1,
            strength: 0.75,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.t_steps, self.beta_start, self.beta_end)
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_size, self.latent_size]
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_channels * self.latent_size * self.latent_size
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        if self.latent_size < 2 || !self.latent_size.is_multiple_of(2) || self.latent_channels == 0 || self.channels == 0 || self.emb_dim < 2 {
            return Err(Error::Config(format!("denoiser needs an even latent size and positive widths, got {self:?}")));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("conditioning dropout must lie in [0, 1), got {}", self.cond_dropout)));
        }
        strength_step(self.strength, self.t_steps)?;
        Ok(())
    }
}

/// Start timestep `⌈s·T⌉` of a refinement with strength `s ∈ (0, 1]`.
pub fn strength_step(strength: f64, t_steps: usize) -> Result<usize> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::Config(format!("strength must lie in (0, 1], got {strength}")));
    }
    Ok(((strength * t_steps as f64).ceil() as usize).clamp(1, t_steps))
}

/// Sinusoidal embedding of integer timesteps: `[N, dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; t.len() * dim];
    for (i, &ti) in t.iter().enumerate() {
        for k in 0..half {
            let f = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            out[i * dim + k] = (ti as f64 * f).sin();
            out[i * dim + half + k] = (ti as f64 * f).cos();
        }
    }
    Tensor::new(&[t.len(), dim], out).expect("consistent shape")
}

#[derive(Clone, Debug)]
struct FilmBlock {
    c1: Conv2d,
    film: Linear,
    c2: Conv2d,
}

impl FilmBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize, emb: usize, rng: &mut Rng) -> Self {
        Self {
            c1: Conv2d::new(store, &format!("{name}.c1"), c, c, 3, 1, 1, rng),
            film: Linear::zeros(store, &format!("{name}.film"), emb, 2 * c),
            c2: Conv2d::new(store, &format!("{name}.c2"), c, c, 3, 1, 1, rng),
        }
    }

    fn forward<'t>(&self, ctx: &Ctx<'t>, h: Var<'t>, emb: Var<'t>) -> Result<Var<'t>> {
        let c = h.shape()[1];
        let ss = self.film.forward(ctx, emb)?;
        let scale = ss.slice(1, 0, c)?.add_scalar(1.0);
        let shift = ss.slice(1, c, 2 * c)?;
        let r = self.c1.forward(ctx, h.relu())?.channel_affine(scale, shift)?;
        h.add(self.c2.forward(ctx, r.relu())?)
    }
}

#[derive(Clone, Debug)]
struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

/// ε-predicting encoder–decoder over latent maps with one skip connection;
/// timestep and pooled conditioning modulate every residual block.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub cfg: DiffusionConfig,
    pub store: ParamStore,
    pub trained: bool,
    t_proj: Linear,
    c_proj: Linear,
    conv_in: Conv2d,
    block_hi: FilmBlock,
    down: Conv2d,
    block_lo1: FilmBlock,
    attn: Option<CrossAttention>,
    block_lo2: FilmBlock,
    up: Conv2d,
    merge: Conv2d,
    block_out: FilmBlock,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(cfg: &DiffusionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let (c, e, lc) = (cfg.channels, cfg.emb_dim, cfg.latent_channels);
        let t_proj = Linear::new(&mut store, "emb.t", e, e, true, &mut rng);
        let c_proj = Linear::new(&mut store, "emb.cond", 2 * cfg.cond_dim, e, true, &mut rng);
        let conv_in = Conv2d::new(&mut store, "conv_in", lc, c, 3, 1, 1, &mut rng);
        let block_hi = FilmBlock::new(&mut store, "hi", c, e, &mut rng);
        let down = Conv2d::new(&mut store, "down", c, 2 * c, 3, 2, 1, &mut rng);
        let block_lo1 = FilmBlock::new(&mut store, "lo1", 2 * c, e, &mut rng);
        let attn = cfg.cross_attention.then(|| CrossAttention {
            q: Linear::new(&mut store, "attn.q", 2 * c, e, false, &mut rng),
            k: Linear::new(&mut store, "attn.k", cfg.cond_dim, e, false, &mut rng),
            v: Linear::new(&mut store, "attn.v", cfg.cond_dim, e, false, &mut rng),
            o: Linear::zeros(&mut store, "attn.o", e, 2 * c),
        });
        let block_lo2 = FilmBlock::new(&mut store, "lo2", 2 * c, e, &mut rng);
        let up = Conv2d::new(&mut store, "up", 2 * c, c, 3, 1, 1, &mut rng);
        let merge = Conv2d::new(&mut store, "merge", 2 * c, c, 3, 1, 1, &mut rng);
        let block_out = FilmBlock::new(&mut store, "out", c, e, &mut rng);
        let conv_out = Conv2d::new(&mut store, "conv_out", c, lc, 3, 1, 1, &mut rng);
        let mut d = Self {
            cfg: cfg.clone(),
            store,
            trained: false,
            t_proj,
            c_proj,
            conv_in,
            block_hi,
            down,
            block_lo1,
            attn,
            block_lo2,
            up,
            merge,
            block_out,
            conv_out,
        };
        for id in [d.conv_out.w, d.conv_out.b.expect("bias")] {
            let shape = d.store.get(id).shape().to_vec();
            d.store.set(id, Tensor::zeros(&shape))?;
        }
        Ok(d)
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Predicted noise for `z_t[N, C, S, S]` at per-sample timesteps, given
    /// pooled conditioning `[N, 2·cond_dim]` and conditioning rows
    /// `[N, R, cond_dim]` (rows are used only with cross-attention).
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, zt: Var<'t>, t: &[usize], pooled: Var<'t>, rows: Option<Var<'t>>) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        let s = zt.shape();
        let [lc, ls, _] = cfg.latent_shape();
        if s.len() != 4 || s[1] != lc || s[2] != ls || s[3] != ls || t.len() != s[0] {
            return Err(Error::Dim(format!("denoiser takes [N, {lc}, {ls}, {ls}] with N timesteps, got {s:?} and {}", t.len())));
        }
        let n = s[0];
        let temb = ctx.constant(timestep_embedding(t, cfg.emb_dim));
        let pooled = if cfg.unconditional { ctx.constant(Tensor::zeros(&pooled.shape())) } else { pooled };
        let emb = self.t_proj.forward(ctx, temb)?.relu().add(self.c_proj.forward(ctx, pooled)?)?;
        let h = self.conv_in.forward(ctx, zt)?;
        let skip = self.block_hi.forward(ctx, h, emb)?;
        let mut d = self.down.forward(ctx, skip)?;
        d = self.block_lo1.forward(ctx, d, emb)?;
        if let (Some(a), Some(rows), false) = (&self.attn, rows, cfg.unconditional) {
            let (c2, hw) = (2 * cfg.channels, (ls / 2) * (ls / 2));
            let tokens = d.reshape(&[n, c2, hw])?.transpose()?;
            let q = a.q.forward(ctx, tokens)?;
            let k = a.k.forward(ctx, rows)?;
            let v = a.v.forward(ctx, rows)?;
            let w = q.bmm(k.transpose()?)?.scale(1.0 / (cfg.emb_dim as f64).sqrt()).softmax()?;
            let o = a.o.forward(ctx, w.bmm(v)?)?;
            d = d.add(o.transpose()?.reshape(&[n, c2, ls / 2, ls / 2])?)?;
        }
        d = self.block_lo2.forward(ctx, d, emb)?;
        let u = self.up.forward(ctx, d.upsample_nearest2d(2)?)?.relu();
        let m = self.merge.forward(ctx, Var::concat(&[u, skip], 1)?)?;
        let m = self.block_out.forward(ctx, m, emb)?;
        self.conv_out.forward(ctx, m.relu())
    }

    fn inputs<'t>(&self, ctx: &Ctx<'t>, conds: &[&Conditioning], keep: &[bool]) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let width = 2 * self.cfg.cond_dim;
        let mut pooled = Vec::with_capacity(conds.len() * width);
        for (c, &k) in conds.iter().zip(keep) {
            let p = c.pooled();
            if p.len() != width {
                return Err(Error::Dim(format!("conditioning width {} does not match the denoiser's {width}", p.len())));
            }
            if k {
                pooled.extend(p);
            } else {
                pooled.extend(std::iter::repeat_n(0.0, width));
            }
        }
        let pooled = ctx.constant(Tensor::new(&[conds.len(), width], pooled)?);
        let rows = if self.cfg.cross_attention {
            let r: Vec<Tensor> = conds.iter().zip(keep).map(|(c, &k)| Ok(if k { c.rows()? } else { Tensor::zeros(c.rows()?.shape()) })).collect::<Result<_>>()?;
            Some(ctx.constant(Tensor::stack(&r)?))
        } else {
            None
        };
        Ok((pooled, rows))
    }

    /// Mean squared noise-prediction error summed over latent entries.
    pub fn loss<'t>(&self, ctx: &Ctx<'t>, zt: Tensor, t: &[usize], eps: Tensor, conds: &[&Conditioning], keep: &[bool]) -> Result<Var<'t>> {
        let n = t.len();
        let (pooled, rows) = self.inputs(ctx, conds, keep)?;
        let pred = self.forward(ctx, ctx.constant(zt), t, pooled, rows)?;
        Ok(pred.sub(ctx.constant(eps))?.square().sum().scale(1.0 / n as f64))
    }

    /// Noise predictions in evaluation mode.
    pub fn predict(&self, zt: &[Tensor], t: &[usize], conds: &[&Conditioning]) -> Result<Vec<Tensor>> {
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &self.store);
        let keep = vec![true; zt.len()];
        let (pooled, rows) = self.inputs(&ctx, conds, &keep)?;
        let out = self.forward(&ctx, ctx.constant(Tensor::stack(zt)?), t, pooled, rows)?.value();
        Ok((0..zt.len()).map(|i| out.row(i)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self { epochs: 40, batch_size: 32, lr: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// `E‖ε‖²`, the loss of a predictor that always outputs zero.
    pub baseline: f64,
}

/// Noisy inputs, timesteps and noise for `latents`, drawn from `rng`.
fn noised(sched: &NoiseSchedule, latents: &[&Tensor], rng: &mut Rng) -> Result<(Tensor, Vec<usize>, Tensor)> {
    let mut zt = Vec::with_capacity(latents.len());
    let mut eps = Vec::with_capacity(latents.len());
    let mut ts = Vec::with_capacity(latents.len());
    for z0 in latents {
        let t = 1 + rng.below(sched.t_steps());
        let e = Tensor::randn(z0.shape(), 1.0, rng);
        zt.push(sched.diffuse_with(z0, t, &e)?);
        eps.push(e);
        ts.push(t);
    }
    Ok((Tensor::stack(&zt)?, ts, Tensor::stack(&eps)?))
}

/// Mean loss over `latents` with timesteps and noise drawn from `seed`.
pub fn denoiser_eval_loss(model: &Denoiser, latents: &[Tensor], conds: &[Conditioning], seed: u64) -> Result<f64> {
    let sched = model.cfg.schedule()?;
    let mut rng = Rng::new(seed);
    let mut sum = 0.0;
    for (zc, cc) in latents.chunks(64).zip(conds.chunks(64)) {
        let refs: Vec<&Tensor> = zc.iter().collect();
        let (zt, t, eps) = noised(&sched, &refs, &mut rng)?;
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &model.store);
        let c: Vec<&Conditioning> = cc.iter().collect();
        sum += model.loss(&ctx, zt, &t, eps, &c, &vec![true; zc.len()])?.item() * zc.len() as f64;
    }
    Ok(sum / latents.len() as f64)
}

pub fn train_denoiser(
    model: &mut Denoiser,
    train: (&[Tensor], &[Conditioning]),
    val: (&[Tensor], &[Conditioning]),
    cfg: &DenoiserTrainConfig,
) -> Result<DenoiserReport> {
    let (latents, conds) = train;
    if latents.is_empty() || latents.len() != conds.len() || val.0.is_empty() || val.0.len() != val.1.len() {
        return Err(Error::Config("denoiser training needs matched, non-empty latents and conditioning".into()));
    }
    let shape = model.cfg.latent_shape();
    if let Some(bad) = latents.iter().chain(val.0).find(|z| z.shape() != shape) {
        return Err(Error::Dim(format!("denoiser latents must be {shape:?}, got {:?}", bad.shape())));
    }
    let sched = model.cfg.schedule()?;
    let mut opt = Adam::new(cfg.lr).with_clip(10.0);
    let mut rng = Rng::new(cfg.seed);
    let (mut train_loss, mut val_loss) = (Vec::with_capacity(cfg.epochs), Vec::with_capacity(cfg.epochs));
    for epoch in 1..=cfg.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, idx) in batches(latents.len(), cfg.batch_size, &mut rng, false).into_iter().enumerate() {
            let refs: Vec<&Tensor> = idx.iter().map(|&i| &latents[i]).collect();
            let (zt, t, eps) = noised(&sched, &refs, &mut rng)?;
            let keep: Vec<bool> = idx.iter().map(|_| rng.uniform() >= model.cfg.cond_dropout).collect();
            let c: Vec<&Conditioning> = idx.iter().map(|&i| &conds[i]).collect();
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.store, true, Rng::new(0));
            let loss = model.loss(&ctx, zt, &t, eps, &c, &keep)?;
            ensure_finite(loss.item(), epoch, bi, cfg.lr)?;
            sum += loss.item() * idx.len() as f64;
            count += idx.len();
            let grads = loss.backward()?;
            let g = ctx.grads(&grads, &model.store);
            opt.step(&mut model.store, &g)?;
        }
        train_loss.push(sum / count.max(1) as f64);
        val_loss.push(denoiser_eval_loss(model, val.0, val.1, cfg.seed ^ 0x7a11)?);
    }
    model.trained = true;
    Ok(DenoiserReport { train_loss, val_loss, baseline: model.cfg.latent_dim() as f64 })
}

/// Ancestral sampling from `z_start` at `start_t` down to `z_0`, with
/// `σ_t² = β_t` and per-sample noise drawn from `seeds`.
pub fn reverse_generate(model: &Denoiser, z_start: &[Tensor], conds: &[Conditioning], start_t: usize, seeds: &[u64]) -> Result<Vec<Tensor>> {
    if !model.trained {
        return Err(Error::Config("denoiser is untrained; train or load it before sampling".into()));
    }
    let sched = model.cfg.schedule()?;
    if start_t == 0 || start_t > sched.t_steps() {
        return Err(Error::Config(format!("start timestep {start_t} outside 1..={}", sched.t_steps())));
    }
    if z_start.len() != conds.len() || z_start.len() != seeds.len() {
        return Err(Error::Dim(format!("{} latents, {} conditionings and {} seeds", z_start.len(), conds.len(), seeds.len())));
    }
    let mut out = Vec::with_capacity(z_start.len());
    for ((zc, cc), sc) in z_start.chunks(32).zip(conds.chunks(32)).zip(seeds.chunks(32)) {
        let mut rngs: Vec<Rng> = sc.iter().map(|&s| Rng::new(s)).collect();
        let c: Vec<&Conditioning> = cc.iter().collect();
        let mut z: Vec<Tensor> = zc.to_vec();
        for t in (1..=start_t).rev() {
            let eps = model.predict(&z, &vec![t; z.len()], &c)?;
            for (i, zi) in z.iter_mut().enumerate() {
                let mean = sched.reverse_mean(zi, t, &eps[i])?;
                *zi = if t > 1 {
                    let noise = Tensor::randn(mean.shape(), sched.beta(t).sqrt(), &mut rngs[i]);
                    mean.add(&noise)?
                } else {
                    mean
                };
            }
        }
        out.extend(z);
    }
    Ok(out)
}

/// Encodes each guess, noises it to `⌈s·T⌉` and samples back down, decoding
/// the result. Noise for sample `i` derives from `seeds[i]`.
pub fn img2img_refine(
    codec: &LatentCodec,
    model: &Denoiser,
    guesses: &[Tensor],
    conds: &[Conditioning],
    strength: f64,
    seeds: &[u64],
) -> Result<Vec<Tensor>> {
    let sched = model.cfg.schedule()?;
    let t0 = strength_step(strength, sched.t_steps())?;
    if guesses.len() != seeds.len() {
        return Err(Error::Dim(format!("{} guesses with {} seeds", guesses.len(), seeds.len())));
    }
    let z0 = codec.encode(guesses)?;
    let zt: Vec<Tensor> = z0
        .iter()
        .zip(seeds)
        .map(|(z, &s)| sched.forward_diffuse(z, t0, &mut Rng::new(derive_seed(s, 1))))
        .collect::<Result<_>>()?;
    let rev_seeds: Vec<u64> = seeds.iter().map(|&s| derive_seed(s, 2)).collect();
    codec.decode(&reverse_generate(model, &zt, conds, t0, &rev_seeds)?)
}

/// Generation from pure noise at `t = T`.
pub fn generate(codec: &LatentCodec, model: &Denoiser, conds: &[Conditioning], seeds: &[u64]) -> Result<Vec<Tensor>> {
    let shape = model.cfg.latent_shape();
    let zt: Vec<Tensor> = seeds.iter().map(|&s| Tensor::randn(&shape, 1.0, &mut Rng::new(derive_seed(s, 1)))).collect();
    let rev_seeds: Vec<u64> = seeds.iter().map(|&s| derive_seed(s, 2)).collect();
    codec.decode(&reverse_generate(model, &zt, conds, model.cfg.t_steps, &rev_seeds)?)
}

pub const AMPLITUDES: [u32; 6] = [0, 8, 16, 32, 64, 256];
/// Amplitude meaning the guess is replaced by pure noise.
pub const PURE_NOISE: u32 = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbConfig {
    pub amplitudes: Vec<u32>,
    /// Accept amplitudes outside `amplitudes`.
    pub allow_any: bool,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { amplitudes: AMPLITUDES.to_vec(), allow_any: false }
    }
}

/// 8-bit values plus `A·n`, `n ~ N(0, 1)`, before clipping and rounding.
/// At the pure-noise amplitude the values are replaced by mid-grey plus
/// noise.
pub fn perturb_unclipped(values: &[f64], amplitude: f64, pure_noise: bool, rng: &mut Rng) -> Vec<f64> {
    values.iter().map(|&v| if pure_noise { 127.5 } else { v } + amplitude * rng.normal()).collect()
}

/// Perturbs an image in `[0, 1]` on its 8-bit scale and returns it in
/// `[0, 1]`, rounded to the 8-bit grid and clipped to `[0, 255]`.
pub fn perturb_guess(image: &Tensor, amplitude: u32, cfg: &PerturbConfig, rng: &mut Rng) -> Result<Tensor> {
    if !cfg.allow_any && !cfg.amplitudes.contains(&amplitude) {
        return Err(Error::Config(format!("amplitude {amplitude} is not one of {:?}", cfg.amplitudes)));
    }
    if amplitude == 0 {
        return Ok(image.clone());
    }
    let u8s: Vec<f64> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round()).collect();
    let noisy = perturb_unclipped(&u8s, amplitude as f64, amplitude == PURE_NOISE, rng);
    Tensor::new(image.shape(), noisy.iter().map(|v| v.round().clamp(0.0, 255.0) / 255.0).collect())
}
