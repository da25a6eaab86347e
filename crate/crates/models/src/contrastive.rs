//! Dual-encoder image/text embeddings trained with a symmetric contrastive
//! objective.
//!
//! Both towers emit several unit-norm token rows. The image tower yields a
//! global token followed by a `grid × grid` map of regional tokens; the text
//! tower yields one row per caption position. Matching uses the pooled
//! embedding: the (masked) mean of a tower's rows, rescaled to unit norm.

use neurodecode_core::nn::{Conv2d, Embedding, LayerNorm, Linear, SelfAttention};
use neurodecode_core::optim::Adam;
use neurodecode_core::{Ctx, Error, ParamId, ParamStore, Result, Rng, Tape, Tensor, Var};
use neurodecode_metrics::FeatureExtractor;
use serde::{Deserialize, Serialize};

use crate::util::{batches, ensure_finite};

/// Token id for padding; padded positions are left out of the pooled text
/// embedding.
pub const PAD: usize = 0;
/// Token id that out-of-vocabulary ids are mapped to.
pub const UNK: usize = 1;

const NORM_EPS: f64 = 1e-12;
const MIN_TAU: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualEncoderConfig {
    pub image_size: usize,
    /// Embedding width.
    pub d: usize,
    /// Side of the regional token grid; the image tower emits `1 + grid²` rows.
    pub grid: usize,
    /// Text rows (caption positions).
    pub rows_t: usize,
    pub vocab: usize,
    /// Channels of the image tower.
    pub width: usize,
    pub heads: usize,
    pub init_tau: f64,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self { image_size: 16, d: 64, grid: 2, rows_t: 8, vocab: 35, width: 32, heads: 2, init_tau: 1.0 }
    }
}

impl DualEncoderConfig {
    /// Full-size embedding shapes: 257 vision rows (1 + 16×16) and 77 text
    /// rows of width 768.
    pub fn paper_dims(vocab: usize) -> Self {
        Self { image_size: 64, d: 768, grid: 16, rows_t: 77, vocab, width: 16, heads: 8, init_tau: 1.0 }
    }

    pub fn rows_v(&self) -> usize {
        1 + self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        if !self.image_size.is_multiple_of(2) || self.grid == 0 || !(self.image_size / 2).is_multiple_of(self.grid) {
            return Err(Error::Config(format!("image size {} must be even with half divisible by the grid {}", self.image_size, self.grid)));
        }
        if self.d == 0 || self.rows_t == 0 || self.vocab < 2 || self.width == 0 {
            return Err(Error::Config("dual-encoder sizes must be positive and the vocabulary must hold the reserved ids".into()));
        }
        if !(self.init_tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.init_tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub cfg: DualEncoderConfig,
    pub store: ParamStore,
    pub trained: bool,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    img_proj: Linear,
    img_pos: ParamId,
    tok: Embedding,
    txt_pos: ParamId,
    attn: SelfAttention,
    norm1: LayerNorm,
    mlp1: Linear,
    mlp2: Linear,
    norm2: LayerNorm,
    txt_proj: Linear,
    log_tau: ParamId,
}

/// Symmetric cross-entropy over cosine-similarity logits `z_img z_txtᵀ / τ`,
/// averaged over the image→text and text→image directions. Rows are
/// expected to be unit norm; `tau` is a one-element variable.
pub fn contrastive_loss<'t>(z_img: Var<'t>, z_txt: Var<'t>, tau: Var<'t>) -> Result<Var<'t>> {
    let (si, st) = (z_img.shape(), z_txt.shape());
    if si.len() != 2 || si != st {
        return Err(Error::Dim(format!("contrastive loss on {si:?} and {st:?}")));
    }
    let n = si[0];
    if n < 2 {
        return Err(Error::Config(format!("contrastive loss needs at least 2 pairs to have negatives, got {n}")));
    }
    let one = z_img.tape().constant(Tensor::scalar(1.0));
    let logits = z_img.matmul(z_txt.transpose()?)?.mul_scalar(one.div(tau.reshape(&[1])?)?)?;
    let diag: Vec<usize> = (0..n).collect();
    let i2t = logits.log_softmax()?.pick(&diag)?.mean();
    let t2i = logits.transpose()?.log_softmax()?.pick(&diag)?.mean();
    Ok(i2t.add(t2i)?.scale(-0.5))
}

/// Mean of rows `[N, L, d]` weighted by `w[N, L]` (rows of `w` sum to one),
/// rescaled to unit norm: `[N, d]`.
fn pool<'t>(ctx: &Ctx<'t>, rows: Var<'t>, w: Tensor) -> Result<Var<'t>> {
    let s = rows.shape();
    let wv = ctx.constant(w.reshape(&[s[0], 1, s[1]])?);
    wv.bmm(rows)?.reshape(&[s[0], s[2]])?.l2_normalize_last(NORM_EPS)
}

impl DualEncoder {
    pub fn new(cfg: &DualEncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let w = cfg.width;
        let conv1 = Conv2d::new(&mut store, "img.conv1", 3, w, 3, 1, 1, &mut rng);
        let conv2 = Conv2d::new(&mut store, "img.conv2", w, w, 3, 2, 1, &mut rng);
        let conv3 = Conv2d::new(&mut store, "img.conv3", w, w, 3, 1, 1, &mut rng);
        let img_proj = Linear::new(&mut store, "img.proj", w, cfg.d, true, &mut rng);
        let img_pos = store.add("img.pos", Tensor::randn(&[cfg.rows_v() * cfg.d], 0.02, &mut rng));
        let tok = Embedding::new(&mut store, "txt.tok", cfg.vocab, cfg.d, &mut rng);
        let txt_pos = store.add("txt.pos", Tensor::randn(&[cfg.rows_t * cfg.d], 0.02, &mut rng));
        let attn = SelfAttention::new(&mut store, "txt.attn", cfg.d, cfg.heads, &mut rng)?;
        let norm1 = LayerNorm::new(&mut store, "txt.norm1", cfg.d);
        let mlp1 = Linear::new(&mut store, "txt.mlp1", cfg.d, 2 * cfg.d, true, &mut rng);
        let mlp2 = Linear::new(&mut store, "txt.mlp2", 2 * cfg.d, cfg.d, true, &mut rng);
        let norm2 = LayerNorm::new(&mut store, "txt.norm2", cfg.d);
        let txt_proj = Linear::new(&mut store, "txt.proj", cfg.d, cfg.d, true, &mut rng);
        let log_tau = store.add("log_tau", Tensor::scalar(cfg.init_tau.ln()));
        Ok(Self {
            cfg: cfg.clone(),
            store,
            trained: false,
            conv1,
            conv2,
            conv3,
            img_proj,
            img_pos,
            tok,
            txt_pos,
            attn,
            norm1,
            mlp1,
            mlp2,
            norm2,
            txt_proj,
            log_tau,
        })
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).item().max(MIN_TAU.ln()).exp()
    }

    /// Image rows `[N, rows_v, d]`, unit norm, from `x[N, 3, S, S]`.
    pub fn image_rows<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(Error::Dim(format!("image tower takes [N, 3, {0}, {0}], got {s:?}", cfg.image_size)));
        }
        let n = s[0];
        let h = self.conv1.forward(ctx, x)?.relu();
        let h = self.conv2.forward(ctx, h)?.relu();
        let h = self.conv3.forward(ctx, h)?.relu();
        let g = cfg.grid;
        let cells = h.avg_pool2d(cfg.image_size / 2 / g)?.reshape(&[n, cfg.width, g * g])?.transpose()?;
        let global = cells.mean_axis(1)?.reshape(&[n, 1, cfg.width])?;
        let tokens = Var::concat(&[global, cells], 1)?;
        let rows = self.img_proj.forward(ctx, tokens)?;
        let rv = cfg.rows_v();
        let rows = rows.reshape(&[n, rv * cfg.d])?.add_row(ctx.p(self.img_pos))?.reshape(&[n, rv, cfg.d])?;
        rows.l2_normalize_last(NORM_EPS)
    }

    /// Token ids padded or truncated to `rows_t`, unknown ids mapped to `UNK`.
    pub fn prepare_ids(&self, caption: &[usize]) -> Vec<usize> {
        let mut ids: Vec<usize> = caption.iter().take(self.cfg.rows_t).map(|&i| if i < self.cfg.vocab { i } else { UNK }).collect();
        ids.resize(self.cfg.rows_t, PAD);
        ids
    }

    fn text_weights(&self, captions: &[Vec<usize>]) -> Tensor {
        let l = self.cfg.rows_t;
        let mut w = Vec::with_capacity(captions.len() * l);
        for c in captions {
            let mask: Vec<f64> = c.iter().map(|&i| if i == PAD { 0.0 } else { 1.0 }).collect();
            let k = mask.iter().sum::<f64>();
            if k == 0.0 {
                w.extend(std::iter::repeat_n(1.0 / l as f64, l));
            } else {
                w.extend(mask.iter().map(|m| m / k));
            }
        }
        Tensor::new(&[captions.len(), l], w).expect("consistent shape")
    }

    /// Text rows `[N, rows_t, d]`, unit norm, from prepared id lists.
    pub fn text_rows<'t>(&self, ctx: &Ctx<'t>, ids: &[Vec<usize>]) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        let n = ids.len();
        let flat: Vec<usize> = ids.iter().flat_map(|c| c.iter().copied()).collect();
        if flat.len() != n * cfg.rows_t {
            return Err(Error::Dim(format!("captions must be prepared to {} tokens", cfg.rows_t)));
        }
        let e = self.tok.forward(ctx, &flat)?.reshape(&[n, cfg.rows_t * cfg.d])?.add_row(ctx.p(self.txt_pos))?;
        let x = e.reshape(&[n, cfg.rows_t, cfg.d])?;
        let (a, _) = self.attn.forward(ctx, x)?;
        let h = self.norm1.forward(ctx, x.add(a)?)?;
        let m = self.mlp2.forward(ctx, self.mlp1.forward(ctx, h)?.relu())?;
        let h = self.norm2.forward(ctx, h.add(m)?)?;
        self.txt_proj.forward(ctx, h)?.l2_normalize_last(NORM_EPS)
    }

    fn pooled_image<'t>(&self, ctx: &Ctx<'t>, rows: Var<'t>) -> Result<Var<'t>> {
        let (n, rv) = (rows.shape()[0], self.cfg.rows_v());
        pool(ctx, rows, Tensor::full(&[n, rv], 1.0 / rv as f64))
    }

    fn pooled_text<'t>(&self, ctx: &Ctx<'t>, rows: Var<'t>, ids: &[Vec<usize>]) -> Result<Var<'t>> {
        pool(ctx, rows, self.text_weights(ids))
    }

    fn batch_loss<'t>(&self, ctx: &Ctx<'t>, images: Tensor, ids: &[Vec<usize>]) -> Result<Var<'t>> {
        let zi = self.pooled_image(ctx, self.image_rows(ctx, ctx.constant(images))?)?;
        let zt = self.pooled_text(ctx, self.text_rows(ctx, ids)?, ids)?;
        let tau = ctx.p(self.log_tau).clamp(MIN_TAU.ln(), f64::INFINITY).exp();
        contrastive_loss(zi, zt, tau)
    }

    /// Contrastive loss of a batch under the current parameters.
    pub fn loss(&self, images: &[Tensor], captions: &[Vec<usize>]) -> Result<f64> {
        let tape = Tape::no_grad();
        let ctx = Ctx::eval(&tape, &self.store);
        let ids: Vec<Vec<usize>> = captions.iter().map(|c| self.prepare_ids(c)).collect();
        Ok(self.batch_loss(&ctx, Tensor::stack(images)?, &ids)?.item())
    }

    /// Vision embedding rows `[rows_v, d]` of one image.
    pub fn embed_image(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.embed_images(std::slice::from_ref(image))?.remove(0))
    }

    /// Text embedding rows `[rows_t, d]` of one caption.
    pub fn embed_text(&self, caption: &[usize]) -> Result<Tensor> {
        Ok(self.embed_texts(&[caption.to_vec()])?.remove(0))
    }

    pub fn embed_images(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let tape = Tape::no_grad();
            let ctx = Ctx::eval(&tape, &self.store);
            let rows = self.image_rows(&ctx, ctx.constant(Tensor::stack(chunk)?))?.value();
            out.extend((0..chunk.len()).map(|i| rows.row(i)));
        }
        Ok(out)
    }

    pub fn embed_texts(&self, captions: &[Vec<usize>]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(captions.len());
        for chunk in captions.chunks(64) {
            let tape = Tape::no_grad();
            let ctx = Ctx::eval(&tape, &self.store);
            let ids: Vec<Vec<usize>> = chunk.iter().map(|c| self.prepare_ids(c)).collect();
            let rows = self.text_rows(&ctx, &ids)?.value();
            out.extend((0..chunk.len()).map(|i| rows.row(i)));
        }
        Ok(out)
    }

    /// Pooled unit-norm embedding `[d]` from image rows.
    pub fn pool_image_rows(&self, rows: &Tensor) -> Tensor {
        crate::ridge::normalize_rows(&mean_rows(rows, None).reshape(&[1, self.cfg.d]).expect("d values"))
            .reshape(&[self.cfg.d])
            .expect("d values")
    }

    /// Pooled unit-norm embedding `[d]` from text rows and the caption.
    pub fn pool_text_rows(&self, rows: &Tensor, caption: &[usize]) -> Tensor {
        let ids = self.prepare_ids(caption);
        let w = self.text_weights(&[ids]);
        crate::ridge::normalize_rows(&mean_rows(rows, Some(w.data())).reshape(&[1, self.cfg.d]).expect("d values"))
            .reshape(&[self.cfg.d])
            .expect("d values")
    }
}

/// Weighted (default uniform) mean of the rows of `[L, d]`.
fn mean_rows(rows: &Tensor, w: Option<&[f64]>) -> Tensor {
    let (l, d) = (rows.shape()[0], rows.shape()[1]);
    let mut out = vec![0.0; d];
    for r in 0..l {
        let wr = w.map_or(1.0 / l as f64, |w| w[r]);
        for j in 0..d {
            out[j] += wr * rows.data()[r * d + j];
        }
    }
    Tensor::from_vec(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs after which a mean loss still above `ln(batch)` aborts training.
    pub patience: usize,
    pub seed: u64,
}

impl Default for DualTrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 32, lr: 2e-3, patience: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub epoch_loss: Vec<f64>,
    pub gallery: usize,
    pub image_to_text_top1: f64,
    pub text_to_image_top1: f64,
    pub chance: f64,
    /// Fraction of held-out pairs whose matched cosine beats the mismatched
    /// cosine against the next pair in the set.
    pub matched_beats_mismatched: f64,
    pub tau: f64,
}

/// Top-1 retrieval in consecutive galleries of `gallery` held-out pairs,
/// using pooled embeddings.
pub fn retrieval(model: &DualEncoder, images: &[Tensor], captions: &[Vec<usize>], gallery: usize) -> Result<(f64, f64, f64)> {
    let n = images.len();
    if n < 2 || captions.len() != n {
        return Err(Error::Config("retrieval needs at least 2 matched image/caption pairs".into()));
    }
    let g = gallery.min(n).max(2);
    let zi: Vec<Tensor> = model.embed_images(images)?.iter().map(|r| model.pool_image_rows(r)).collect();
    let zt: Vec<Tensor> = model.embed_texts(captions)?.iter().zip(captions).map(|(r, c)| model.pool_text_rows(r, c)).collect();
    let cos = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
    let (mut i2t, mut t2i, mut total) = (0usize, 0usize, 0usize);
    for start in (0..n).step_by(g) {
        if start + g > n {
            break;
        }
        for q in start..start + g {
            let best_t = (start..start + g).max_by(|&a, &b| cos(&zi[q], &zt[a]).total_cmp(&cos(&zi[q], &zt[b]))).unwrap();
            let best_i = (start..start + g).max_by(|&a, &b| cos(&zt[q], &zi[a]).total_cmp(&cos(&zt[q], &zi[b]))).unwrap();
            i2t += (best_t == q) as usize;
            t2i += (best_i == q) as usize;
            total += 1;
        }
    }
    let wins = (0..n).filter(|&q| cos(&zi[q], &zt[q]) > cos(&zi[q], &zt[(q + 1) % n])).count();
    Ok((i2t as f64 / total as f64, t2i as f64 / total as f64, wins as f64 / n as f64))
}

pub fn train_dual_encoder(
    model: &mut DualEncoder,
    train: (&[Tensor], &[Vec<usize>]),
    held_out: (&[Tensor], &[Vec<usize>]),
    cfg: &DualTrainConfig,
) -> Result<RetrievalReport> {
    let (images, captions) = train;
    if images.len() != captions.len() || images.len() < 2 {
        return Err(Error::Config("training needs at least 2 matched image/caption pairs".into()));
    }
    let ids: Vec<Vec<usize>> = captions.iter().map(|c| model.prepare_ids(c)).collect();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = Rng::new(cfg.seed);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut sum, mut count) = (0.0, 0);
        for (bi, idx) in batches(images.len(), cfg.batch_size, &mut rng, true).into_iter().enumerate() {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.store, true, Rng::new(0));
            let batch = Tensor::stack(&idx.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?;
            let bids: Vec<Vec<usize>> = idx.iter().map(|&i| ids[i].clone()).collect();
            let loss = model.batch_loss(&ctx, batch, &bids)?;
            ensure_finite(loss.item(), epoch, bi, cfg.lr)?;
            sum += loss.item();
            count += 1;
            let grads = loss.backward()?;
            let g = ctx.grads(&grads, &model.store);
            opt.step(&mut model.store, &g)?;
        }
        let mean = sum / count.max(1) as f64;
        epoch_loss.push(mean);
        if epoch == cfg.patience && mean > (cfg.batch_size.min(images.len()) as f64).ln() {
            return Err(Error::Numeric(format!(
                "contrastive training diverged: mean loss {mean:.4} after {epoch} epochs is above ln(batch) (lr {})",
                cfg.lr
            )));
        }
    }
    model.trained = true;
    let gallery = 32;
    let (i2t, t2i, wins) = retrieval(model, held_out.0, held_out.1, gallery)?;
    let g = gallery.min(held_out.0.len());
    Ok(RetrievalReport {
        epoch_loss,
        gallery: g,
        image_to_text_top1: i2t,
        text_to_image_top1: t2i,
        chance: 1.0 / g as f64,
        matched_beats_mismatched: wins,
        tau: model.tau(),
    })
}

/// High-level image features: the pooled vision embedding of the dual encoder.
pub struct ContrastiveFeatures<'a> {
    pub model: &'a DualEncoder,
}

impl FeatureExtractor for ContrastiveFeatures<'_> {
    fn name(&self) -> &str {
        "contrastive"
    }

    fn tap(&self) -> &str {
        "pooled"
    }

    fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        let rows = self.model.embed_image(image)?;
        Ok(self.model.pool_image_rows(&rows).into_vec())
    }
}
