//! Convolutional autoencoder mapping images to the latent maps the diffusion
//! model works on.

use neurodecode_core::nn::{Conv2d, ConvTranspose2d};
use neurodecode_core::optim::Adam;
use neurodecode_core::{Ctx, Error, ParamStore, Result, Rng, Tape, Tensor, Var};
use neurodecode_metrics::FeatureExtractor;
use serde::{Deserialize, Serialize};

use crate::util::{batches, ensure_finite};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub image_size: usize,
    pub latent_channels: usize,
    pub width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { image_size: 16, latent_channels: 4, width: 32 }
    }
}

impl CodecConfig {
    /// Latent map shape `[channels, side, side]`; the encoder halves the side.
    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.image_size / 2, self.image_size / 2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 || !self.image_size.is_multiple_of(2) || self.latent_channels == 0 || self.width == 0 {
            return Err(Error::Config(format!("codec needs an even image size and positive widths, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LatentCodec {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    /// Latents are divided by this after encoding so they have roughly unit
    /// variance; set from the training set.
    pub scale: f64,
    pub trained: bool,
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    d1: Conv2d,
    d2: ConvTranspose2d,
    d3: Conv2d,
}

impl LatentCodec {
    pub fn new(cfg: &CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let (w, lc) = (cfg.width, cfg.latent_channels);
        Ok(Self {
            cfg: cfg.clone(),
            scale: 1.0,
            trained: false,
            e1: Conv2d::new(&mut store, "enc.c1", 3, w, 3, 1, 1, &mut rng),
            e2: Conv2d::new(&mut store, "enc.c2", w, w, 4, 2, 1, &mut rng),
            e3: Conv2d::new(&mut store, "enc.c3", w, lc, 1, 1, 0, &mut rng),
            d1: Conv2d::new(&mut store, "dec.c1", lc, w, 3, 1, 1, &mut rng),
            d2: ConvTranspose2d::new(&mut store, "dec.up", w, w, 4, 2, 1, &mut rng),
            d3: Conv2d::new(&mut store, "dec.c3", w, 3, 3, 1, 1, &mut rng),
            store,
        })
    }

    fn enc<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.cfg.image_size || s[3] != self.cfg.image_size {
            return Err(Error::Dim(format!("codec takes [N, 3, {0}, {0}], got {s:?}", self.cfg.image_size)));
        }
        let h = self.e1.forward(ctx, x)?.relu();
        let h = self.e2.forward(ctx, h)?.relu();
        self.e3.forward(ctx, h)
    }

    fn dec<'t>(&self, ctx: &Ctx<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let h = self.d1.forward(ctx, z)?.relu();
        let h = self.d2.forward(ctx, h)?.relu();
        Ok(self.d3.forward(ctx, h)?.sigmoid())
    }

    fn loss<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.dec(ctx, self.enc(ctx, x)?)?;
        Ok(y.sub(x)?.square().mean())
    }

    /// Scaled latent maps `[C, S/2, S/2]`.
    pub fn encode(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let tape = Tape::no_grad();
            let ctx = Ctx::eval(&tape, &self.store);
            let z = self.enc(&ctx, ctx.constant(Tensor::stack(chunk)?))?.value().scale(1.0 / self.scale);
            out.extend((0..chunk.len()).map(|i| z.row(i)));
        }
        Ok(out)
    }

    /// Images in `[0, 1]` from scaled latent maps.
    pub fn decode(&self, latents: &[Tensor]) -> Result<Vec<Tensor>> {
        let shape = self.cfg.latent_shape();
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(64) {
            if let Some(bad) = chunk.iter().find(|z| z.shape() != shape) {
                return Err(Error::Dim(format!("codec decodes latents of shape {shape:?}, got {:?}", bad.shape())));
            }
            let tape = Tape::no_grad();
            let ctx = Ctx::eval(&tape, &self.store);
            let z = ctx.constant(Tensor::stack(chunk)?.scale(self.scale));
            let x = self.dec(&ctx, z)?.value().map(|v| v.clamp(0.0, 1.0));
            out.extend((0..chunk.len()).map(|i| x.row(i)));
        }
        Ok(out)
    }

    pub fn round_trip(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        self.decode(&self.encode(images)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self { epochs: 15, batch_size: 32, lr: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecReport {
    pub train_mse: Vec<f64>,
    pub val_psnr: f64,
    pub scale: f64,
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mse = a.sub(b)?.data().iter().map(|v| v * v).sum::<f64>() / a.len() as f64;
    Ok(-10.0 * mse.max(1e-20).log10())
}

pub fn mean_psnr(a: &[Tensor], b: &[Tensor]) -> Result<f64> {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += psnr(x, y)?;
    }
    Ok(s / a.len().max(1) as f64)
}

pub fn train_codec(model: &mut LatentCodec, train: &[Tensor], val: &[Tensor], cfg: &CodecTrainConfig) -> Result<CodecReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("codec training needs non-empty train and validation images".into()));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut rng = Rng::new(cfg.seed);
    let mut train_mse = Vec::with_capacity(cfg.epochs);
    model.scale = 1.0;
    for epoch in 1..=cfg.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, idx) in batches(train.len(), cfg.batch_size, &mut rng, false).into_iter().enumerate() {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.store, true, Rng::new(0));
            let x = ctx.constant(Tensor::stack(&idx.iter().map(|&i| train[i].clone()).collect::<Vec<_>>())?);
            let loss = model.loss(&ctx, x)?;
            ensure_finite(loss.item(), epoch, bi, cfg.lr)?;
            sum += loss.item() * idx.len() as f64;
            count += idx.len();
            let grads = loss.backward()?;
            let g = ctx.grads(&grads, &model.store);
            opt.step(&mut model.store, &g)?;
        }
        train_mse.push(sum / count.max(1) as f64);
    }
    let z = model.encode(train)?;
    let n: usize = z.iter().map(|t| t.len()).sum();
    let sd = (z.iter().flat_map(|t| t.data().iter()).map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    model.scale = if sd > 1e-12 { sd } else { 1.0 };
    model.trained = true;
    let val_psnr = mean_psnr(&model.round_trip(val)?, val)?;
    Ok(CodecReport { train_mse, val_psnr, scale: model.scale })
}

/// Low-level image features: the flattened codec latent map.
pub struct CodecFeatures<'a> {
    pub model: &'a LatentCodec,
}

impl FeatureExtractor for CodecFeatures<'_> {
    fn name(&self) -> &str {
        "codec"
    }

    fn tap(&self) -> &str {
        "latent"
    }

    fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.model.encode(std::slice::from_ref(image))?.remove(0).into_vec())
    }
}
