//! Hierarchical VAE with a top-down decoder whose first layers can take
//! externally predicted latents.
//!
//! Layer `l` of the decoder works at spatial side `layer_res[l]` and owns
//! `layer_res[l]²` latent slots of `latent_width` values each. Flattened
//! latent vectors are slot-major and ordered from the top of the decoder
//! downward: layer 0 first, within a layer slots in row-major spatial order,
//! within a slot the `latent_width` channel values.

use std::collections::BTreeMap;

use neurodecode_core::nn::Conv2d;
use neurodecode_core::optim::Adam;
use neurodecode_core::{Ctx, Error, ParamId, ParamStore, Result, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::util::{batches, ensure_finite};

const LOG_SIGMA_CLAMP: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HvaeConfig {
    pub image_size: usize,
    /// Spatial side of each top-down layer, top of the decoder first.
    pub layer_res: Vec<usize>,
    /// Values per latent slot.
    pub latent_width: usize,
    /// Channels of the decoder and encoder pathways.
    pub channels: usize,
    /// Number of top layers whose latents are supplied externally.
    pub injected_layers: usize,
    /// Floor on the batch-mean KL of every slot, in nats.
    pub free_bits: f64,
    /// Standard deviation of the Gaussian pixel likelihood.
    pub recon_sd: f64,
    /// Scale on the prior standard deviation when sampling free layers.
    pub temperature: f64,
}

impl Default for HvaeConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            layer_res: vec![1, 1, 2, 2, 4, 4, 8, 8],
            latent_width: 16,
            channels: 32,
            injected_layers: 4,
            free_bits: 0.05,
            recon_sd: 0.1,
            temperature: 1.0,
        }
    }
}

impl HvaeConfig {
    /// Full-size slot table: 2 layers at 1×1, 4 at 4×4, 8 at 8×8, 16 at
    /// 16×16 and 1 at 32×32 on 64×64 images. Injecting 15 layers gives a
    /// 13,344-value latent vector, 31 layers a 91,168-value one.
    pub fn paper_dims(injected_layers: usize) -> Self {
        let mut layer_res = vec![1, 1];
        layer_res.extend([4; 4]);
        layer_res.extend([8; 8]);
        layer_res.extend([16; 16]);
        layer_res.push(32);
        Self { image_size: 64, layer_res, channels: 4, injected_layers, ..Self::default() }
    }

    pub fn layer_count(&self) -> usize {
        self.layer_res.len()
    }

    pub fn slots_per_layer(&self) -> Vec<usize> {
        self.layer_res.iter().map(|r| r * r).collect()
    }

    pub fn total_slots(&self) -> usize {
        self.slots_per_layer().iter().sum()
    }

    /// Length of the full latent vector.
    pub fn latent_len(&self) -> usize {
        self.total_slots() * self.latent_width
    }

    /// Length of the latent vector of the first `injected_layers` layers.
    pub fn injected_len(&self) -> usize {
        self.slots_per_layer()[..self.injected_layers.min(self.layer_count())].iter().sum::<usize>() * self.latent_width
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_res.is_empty() || self.latent_width == 0 || self.channels == 0 {
            return Err(Error::Config("hierarchical VAE needs at least one layer and positive widths".into()));
        }
        if self.injected_layers > self.layer_count() {
            return Err(Error::Config(format!(
                "{} injected layers exceed the {} decoder layers",
                self.injected_layers,
                self.layer_count()
            )));
        }
        let pow2 = |v: usize| v > 0 && v.is_power_of_two();
        if !pow2(self.image_size) {
            return Err(Error::Config(format!("image size {} must be a power of two", self.image_size)));
        }
        for w in self.layer_res.windows(2) {
            if w[1] < w[0] {
                return Err(Error::Config(format!("layer resolutions must not decrease, got {:?}", self.layer_res)));
            }
        }
        if self.layer_res.iter().any(|&r| !pow2(r) || r > self.image_size) {
            return Err(Error::Config(format!("layer resolutions {:?} must be powers of two up to {}", self.layer_res, self.image_size)));
        }
        if !(self.recon_sd > 0.0) || !(self.temperature >= 0.0) || !(self.free_bits >= 0.0) {
            return Err(Error::Config("recon_sd must be positive, temperature and free_bits non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut Rng) -> Self {
        Self { c1: Conv2d::new(store, &format!("{name}.c1"), c, c, 3, 1, 1, rng), c2: Conv2d::new(store, &format!("{name}.c2"), c, c, 3, 1, 1, rng) }
    }

    fn forward<'t>(&self, ctx: &Ctx<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let r = self.c2.forward(ctx, self.c1.forward(ctx, h.relu())?.relu())?;
        h.add(r)
    }
}

#[derive(Clone, Debug)]
struct TopDownBlock {
    res: usize,
    prior: Conv2d,
    posterior: Conv2d,
    inject: Conv2d,
    body: ResBlock,
}

/// Posterior summary of one image: slot-major means and standard deviations.
#[derive(Clone, Debug)]
pub struct HvaeLatent {
    pub mean: Tensor,
    pub sigma: Tensor,
}

#[derive(Clone, Debug)]
pub struct Hvae {
    pub cfg: HvaeConfig,
    pub store: ParamStore,
    pub trained: bool,
    h0: ParamId,
    stem: Conv2d,
    enc: Vec<(usize, ResBlock)>,
    blocks: Vec<TopDownBlock>,
    out_body: ResBlock,
    out: Conv2d,
}

enum Source<'a, 't> {
    /// Posterior latents from encoder features; sampled when `sample` is set.
    Posterior { feats: &'a BTreeMap<usize, Var<'t>>, sample: bool },
    /// Injected latents for the first layers, prior samples with the given
    /// standard-normal noise elsewhere.
    Prior { injected: &'a [Tensor], noise: &'a [Tensor] },
}

struct TopDown<'t> {
    x: Var<'t>,
    kl: Vec<Var<'t>>,
    post: Vec<(Tensor, Tensor)>,
    states: Vec<Tensor>,
}

/// KL(q‖p) between diagonal Gaussians, elementwise.
fn gaussian_kl<'t>(mq: Var<'t>, lq: Var<'t>, mp: Var<'t>, lp: Var<'t>) -> Result<Var<'t>> {
    let var_ratio = lq.sub(lp)?.scale(2.0).exp();
    let mean_term = mq.sub(mp)?.square().mul(lp.scale(-2.0).exp())?;
    Ok(lp.sub(lq)?.add(var_ratio.add(mean_term)?.scale(0.5))?.add_scalar(-0.5))
}

/// Per-element KL between two diagonal Gaussians given means and log
/// standard deviations.
pub fn kl_diag_gaussian(mq: f64, lq: f64, mp: f64, lp: f64) -> f64 {
    lp - lq + 0.5 * ((2.0 * (lq - lp)).exp() + (mq - mp).powi(2) * (-2.0 * lp).exp()) - 0.5
}

/// Converts a channel-major `[W, r, r]` latent map to slot-major values.
pub fn to_slot_major(z: &Tensor) -> Vec<f64> {
    let (w, hw) = (z.shape()[0], z.shape()[1] * z.shape()[2]);
    let mut out = vec![0.0; w * hw];
    for c in 0..w {
        for s in 0..hw {
            out[s * w + c] = z.data()[c * hw + s];
        }
    }
    out
}

/// Converts slot-major values to a channel-major `[W, r, r]` latent map.
pub fn from_slot_major(v: &[f64], width: usize, res: usize) -> Tensor {
    let hw = res * res;
    let mut out = vec![0.0; width * hw];
    for s in 0..hw {
        for c in 0..width {
            out[c * hw + s] = v[s * width + c];
        }
    }
    Tensor::new(&[width, res, res], out).expect("slot count matches")
}

fn split_heads<'t>(v: Var<'t>, w: usize) -> Result<(Var<'t>, Var<'t>)> {
    let mu = v.slice(1, 0, w)?;
    let ls = v.slice(1, w, 2 * w)?.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP);
    Ok((mu, ls))
}

impl Hvae {
    pub fn new(cfg: &HvaeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let (c, w) = (cfg.channels, cfg.latent_width);
        let h0 = store.add("dec.h0", Tensor::zeros(&[c]));
        let stem = Conv2d::new(&mut store, "enc.stem", 3, c, 3, 1, 1, &mut rng);
        let min_res = cfg.layer_res[0];
        let mut enc = Vec::new();
        let mut r = cfg.image_size;
        while r >= min_res {
            enc.push((r, ResBlock::new(&mut store, &format!("enc.r{r}"), c, &mut rng)));
            r /= 2;
        }
        let blocks = cfg
            .layer_res
            .iter()
            .enumerate()
            .map(|(l, &res)| {
                let name = format!("dec.l{l}");
                let inject = Conv2d::new(&mut store, &format!("{name}.inject"), w, c, 1, 1, 0, &mut rng);
                TopDownBlock {
                    res,
                    prior: Conv2d::new(&mut store, &format!("{name}.prior"), c, 2 * w, 1, 1, 0, &mut rng),
                    posterior: Conv2d::new(&mut store, &format!("{name}.posterior"), 2 * c, 2 * w, 1, 1, 0, &mut rng),
                    inject,
                    body: ResBlock::new(&mut store, &format!("{name}.body"), c, &mut rng),
                }
            })
            .collect();
        let out_body = ResBlock::new(&mut store, "dec.out_body", c, &mut rng);
        let out = Conv2d::new(&mut store, "dec.out", c, 3, 3, 1, 1, &mut rng);
        let mut m = Self { cfg: cfg.clone(), store, trained: false, h0, stem, enc, blocks, out_body, out };
        let silent: Vec<ParamId> = m
            .blocks
            .iter()
            .flat_map(|b| [b.prior.w, b.posterior.w, b.body.c2.w])
            .chain(m.enc.iter().map(|(_, e)| e.c2.w))
            .collect();
        for id in silent {
            let shape = m.store.get(id).shape().to_vec();
            m.store.set(id, Tensor::zeros(&shape))?;
        }
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn check_images(&self, x: &[usize]) -> Result<()> {
        let s = self.cfg.image_size;
        if x.len() != 4 || x[1] != 3 || x[2] != s || x[3] != s {
            return Err(Error::Dim(format!("hierarchical VAE takes [N, 3, {s}, {s}], got {x:?}")));
        }
        Ok(())
    }

    fn encoder<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<BTreeMap<usize, Var<'t>>> {
        self.check_images(&x.shape())?;
        let mut h = self.stem.forward(ctx, x)?;
        let mut feats = BTreeMap::new();
        for (i, (r, block)) in self.enc.iter().enumerate() {
            h = block.forward(ctx, h)?;
            feats.insert(*r, h);
            if i + 1 < self.enc.len() {
                h = h.avg_pool2d(2)?;
            }
        }
        Ok(feats)
    }

    fn top_down<'t>(&self, ctx: &mut Ctx<'t>, n: usize, source: Source<'_, 't>) -> Result<TopDown<'t>> {
        let (c, w) = (self.cfg.channels, self.cfg.latent_width);
        let first = self.cfg.layer_res[0];
        let mut h = ctx
            .constant(Tensor::zeros(&[n, c]))
            .add_row(ctx.p(self.h0))?
            .reshape(&[n, c, 1, 1])?
            .upsample_nearest2d(first)?;
        let mut cur = first;
        let mut td = TopDown { x: h, kl: Vec::new(), post: Vec::new(), states: Vec::new() };
        for (l, b) in self.blocks.iter().enumerate() {
            if b.res > cur {
                h = h.upsample_nearest2d(b.res / cur)?;
                cur = b.res;
            }
            let (mp, lp) = split_heads(b.prior.forward(ctx, h)?, w)?;
            let z = match &source {
                Source::Posterior { feats, sample } => {
                    let e = feats[&b.res];
                    let (mq, lq) = split_heads(b.posterior.forward(ctx, Var::concat(&[h, e], 1)?)?, w)?;
                    let kl = gaussian_kl(mq, lq, mp, lp)?;
                    let per_slot = kl.sum_axis(1)?.mean_axis(0)?;
                    td.kl.push(per_slot.max_scalar(self.cfg.free_bits).sum());
                    td.post.push((mq.value(), lq.exp().value()));
                    if *sample {
                        let eps = Tensor::randn(&mq.shape(), 1.0, ctx.rng());
                        mq.add(lq.exp().mul(ctx.constant(eps))?)?
                    } else {
                        mq
                    }
                }
                Source::Prior { injected, noise } => {
                    if l < injected.len() {
                        ctx.constant(injected[l].clone())
                    } else {
                        let eps = ctx.constant(noise[l].scale(self.cfg.temperature));
                        mp.add(lp.exp().mul(eps)?)?
                    }
                }
            };
            h = h.add(b.inject.forward(ctx, z)?)?;
            h = b.body.forward(ctx, h)?;
            td.states.push(h.value());
        }
        if cur < self.cfg.image_size {
            h = h.upsample_nearest2d(self.cfg.image_size / cur)?;
        }
        h = self.out_body.forward(ctx, h)?;
        td.x = self.out.forward(ctx, h.relu())?.sigmoid();
        Ok(td)
    }

    /// Negative ELBO per image with free-bits KL, plus the reconstruction
    /// term and per-layer KL values.
    pub fn loss<'t>(&self, ctx: &mut Ctx<'t>, x: Var<'t>) -> Result<(Var<'t>, f64, Vec<f64>)> {
        let n = x.shape()[0];
        let feats = self.encoder(ctx, x)?;
        let td = self.top_down(ctx, n, Source::Posterior { feats: &feats, sample: true })?;
        let k = 0.5 / (self.cfg.recon_sd * self.cfg.recon_sd);
        let recon = td.x.sub(x)?.square().sum().scale(k / n as f64);
        let kl_vals: Vec<f64> = td.kl.iter().map(|v| v.item()).collect();
        let mut total = recon;
        for kl in td.kl {
            total = total.add(kl)?;
        }
        Ok((total, recon.item(), kl_vals))
    }

    fn require_trained(&self) -> Result<()> {
        if !self.trained {
            return Err(Error::Config("hierarchical VAE is untrained; train or load it before encoding targets".into()));
        }
        Ok(())
    }

    /// Posterior means and standard deviations of each image, slot-major.
    pub fn encode_batch(&self, images: &[Tensor]) -> Result<Vec<HvaeLatent>> {
        self.require_trained()?;
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let tape = Tape::no_grad();
            let mut ctx = Ctx::eval(&tape, &self.store);
            let x = ctx.constant(Tensor::stack(chunk)?);
            let feats = self.encoder(&ctx, x)?;
            let td = self.top_down(&mut ctx, chunk.len(), Source::Posterior { feats: &feats, sample: false })?;
            for i in 0..chunk.len() {
                let (mut mean, mut sigma) = (Vec::new(), Vec::new());
                for (mq, sq) in &td.post {
                    mean.extend(to_slot_major(&mq.row(i)));
                    sigma.extend(to_slot_major(&sq.row(i)));
                }
                out.push(HvaeLatent { mean: Tensor::from_vec(mean), sigma: Tensor::from_vec(sigma) });
            }
        }
        Ok(out)
    }

    pub fn encode(&self, image: &Tensor) -> Result<HvaeLatent> {
        Ok(self.encode_batch(std::slice::from_ref(image))?.remove(0))
    }

    /// Decodes every image from its own posterior means.
    pub fn reconstruct(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let tape = Tape::no_grad();
            let mut ctx = Ctx::eval(&tape, &self.store);
            let x = ctx.constant(Tensor::stack(chunk)?);
            let feats = self.encoder(&ctx, x)?;
            let td = self.top_down(&mut ctx, chunk.len(), Source::Posterior { feats: &feats, sample: false })?;
            let v = td.x.value();
            out.extend((0..chunk.len()).map(|i| v.row(i)));
        }
        Ok(out)
    }

    /// Splits a flat injected-latent vector into per-layer `[W, r, r]` maps.
    fn split_injected(&self, latents: &Tensor, k: usize) -> Result<Vec<Tensor>> {
        let w = self.cfg.latent_width;
        let want: usize = self.cfg.layer_res[..k].iter().map(|r| r * r * w).sum();
        if latents.len() != want {
            return Err(Error::Dim(format!("{k} injected layers take {want} latent values, got {}", latents.len())));
        }
        let mut off = 0;
        Ok(self.cfg.layer_res[..k]
            .iter()
            .map(|&r| {
                let n = r * r * w;
                let t = from_slot_major(&latents.data()[off..off + n], w, r);
                off += n;
                t
            })
            .collect())
    }

    fn prior_noise(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = Rng::new(seed);
        let w = self.cfg.latent_width;
        self.cfg.layer_res.iter().map(|&r| Tensor::randn(&[w, r, r], 1.0, &mut rng)).collect()
    }

    fn decode_inner(&self, latents: &[Tensor], k: usize, seeds: &[u64]) -> Result<(Vec<Tensor>, Vec<Vec<Tensor>>)> {
        if latents.len() != seeds.len() {
            return Err(Error::Dim(format!("{} latent vectors with {} seeds", latents.len(), seeds.len())));
        }
        let (mut images, mut states) = (Vec::with_capacity(latents.len()), Vec::new());
        for (lat, sd) in latents.chunks(64).zip(seeds.chunks(64)) {
            let n = lat.len();
            let per: Vec<Vec<Tensor>> = lat.iter().map(|l| self.split_injected(l, k)).collect::<Result<_>>()?;
            let noise_each: Vec<Vec<Tensor>> = sd.iter().map(|&s| self.prior_noise(s)).collect();
            let stack_layer = |src: &Vec<Vec<Tensor>>, l: usize| Tensor::stack(&src.iter().map(|v| v[l].clone()).collect::<Vec<_>>());
            let injected: Vec<Tensor> = (0..k).map(|l| stack_layer(&per, l)).collect::<Result<_>>()?;
            let noise: Vec<Tensor> = (0..self.cfg.layer_count()).map(|l| stack_layer(&noise_each, l)).collect::<Result<_>>()?;
            let tape = Tape::no_grad();
            let mut ctx = Ctx::eval(&tape, &self.store);
            let td = self.top_down(&mut ctx, n, Source::Prior { injected: &injected, noise: &noise })?;
            let x = td.x.value().map(|v| v.clamp(0.0, 1.0));
            images.extend((0..n).map(|i| x.row(i)));
            states.extend((0..n).map(|i| td.states.iter().map(|s| s.row(i)).collect()));
        }
        Ok((images, states))
    }

    /// Decodes images whose first `injected_layers` layers take the given
    /// slot-major latents; the remaining layers sample their priors with
    /// noise drawn from the per-image seed.
    pub fn decode_batch(&self, latents: &[Tensor], seeds: &[u64]) -> Result<Vec<Tensor>> {
        Ok(self.decode_inner(latents, self.cfg.injected_layers, seeds)?.0)
    }

    pub fn decode_with_injected(&self, latents: &Tensor, seed: u64) -> Result<Tensor> {
        Ok(self.decode_batch(std::slice::from_ref(latents), &[seed])?.remove(0))
    }

    /// Like `decode_with_injected`, also returning the decoder state after
    /// every layer.
    pub fn decode_trace(&self, latents: &Tensor, seed: u64) -> Result<(Tensor, Vec<Tensor>)> {
        let (mut img, mut st) = self.decode_inner(std::slice::from_ref(latents), self.cfg.injected_layers, &[seed])?;
        Ok((img.remove(0), st.remove(0)))
    }

    /// Unconditional samples: every layer draws from its prior.
    pub fn sample(&self, seeds: &[u64]) -> Result<Vec<Tensor>> {
        let empty = vec![Tensor::from_vec(Vec::new()); seeds.len()];
        Ok(self.decode_inner(&empty, 0, seeds)?.0)
    }

    /// First `injected_layers` layers of a full slot-major latent vector.
    pub fn injected_part(&self, latent: &Tensor) -> Result<Tensor> {
        let k = self.cfg.injected_len();
        if latent.len() < k {
            return Err(Error::Dim(format!("latent of length {} is shorter than the {k} injected values", latent.len())));
        }
        Ok(Tensor::from_vec(latent.data()[..k].to_vec()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HvaeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for HvaeTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch_size: 32, lr: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HvaeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl_per_layer: Vec<f64>,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HvaeReport {
    pub epochs: Vec<HvaeEpoch>,
    /// Set when every layer's KL sits at the free-bits floor.
    pub collapse_warning: Option<String>,
}

impl Hvae {
    /// Mean loss over `images` with posterior sampling from a fixed seed.
    pub fn eval_loss(&self, images: &[Tensor], seed: u64) -> Result<f64> {
        let mut sum = 0.0;
        for (i, chunk) in images.chunks(64).enumerate() {
            let tape = Tape::no_grad();
            let mut ctx = Ctx::new(&tape, &self.store, false, Rng::new(seed.wrapping_add(i as u64)));
            let x = ctx.constant(Tensor::stack(chunk)?);
            sum += self.loss(&mut ctx, x)?.0.item() * chunk.len() as f64;
        }
        Ok(sum / images.len() as f64)
    }
}

pub fn train_hvae(model: &mut Hvae, train: &[Tensor], val: &[Tensor], cfg: &HvaeTrainConfig) -> Result<HvaeReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("hierarchical VAE training needs non-empty train and validation images".into()));
    }
    let mut opt = Adam::new(cfg.lr).with_clip(100.0);
    let mut rng = Rng::new(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let layers = model.cfg.layer_count();
    for epoch in 1..=cfg.epochs {
        let (mut loss_sum, mut recon_sum, mut kl_sum, mut count) = (0.0, 0.0, vec![0.0; layers], 0usize);
        for (bi, idx) in batches(train.len(), cfg.batch_size, &mut rng, true).into_iter().enumerate() {
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, &model.store, true, rng.derive(bi as u64));
            let x = ctx.constant(Tensor::stack(&idx.iter().map(|&i| train[i].clone()).collect::<Vec<_>>())?);
            let (loss, recon, kl) = model.loss(&mut ctx, x)?;
            ensure_finite(loss.item(), epoch, bi, cfg.lr)?;
            let m = idx.len() as f64;
            loss_sum += loss.item() * m;
            recon_sum += recon * m;
            for (a, b) in kl_sum.iter_mut().zip(&kl) {
                *a += b * m;
            }
            count += idx.len();
            let grads = loss.backward()?;
            let g = ctx.grads(&grads, &model.store);
            opt.step(&mut model.store, &g)?;
        }
        let c = count.max(1) as f64;
        let val_loss = model.eval_loss(val, cfg.seed ^ 0x5eed)?;
        epochs.push(HvaeEpoch {
            epoch,
            loss: loss_sum / c,
            recon: recon_sum / c,
            kl_per_layer: kl_sum.iter().map(|k| k / c).collect(),
            val_loss,
        });
    }
    model.trained = true;
    let collapse_warning = epochs.last().and_then(|e| {
        let floors: Vec<f64> = model.cfg.slots_per_layer().iter().map(|&s| s as f64 * model.cfg.free_bits).collect();
        let collapsed = e.kl_per_layer.iter().zip(&floors).all(|(k, f)| *k <= f * (1.0 + 1e-9));
        collapsed.then(|| format!("all {} layers sit at the free-bits floor; the posterior carries no information", floors.len()))
    });
    Ok(HvaeReport { epochs, collapse_warning })
}
