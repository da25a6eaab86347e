//! Stage-1 regressors from beta vectors to hierarchical-VAE latents.
//!
//! The reference network is a stack of
//! BiGRU → LayerNorm → Dropout → BiGRU → LayerNorm → Linear → BatchNorm →
//! ReLU → Dropout → Linear. The beta vector enters as a sequence of
//! `seq_len` equal chunks (zero padded); with `seq_len = 1` it is a single
//! step of width `input_len`. With more than one step the second GRU's
//! outputs are averaged over the sequence before the head.
//!
//! GRU parameters follow the three-gate layout with separate input-side and
//! hidden-side bias vectors, `3·(H·I + H·H + 2·H)` scalars per direction.

use neurodecode_core::nn::{BatchNorm, BiGru, Conv1d, Dropout, Gru, LayerNorm, Linear, SelfAttention};
use neurodecode_core::optim::Adam;
use neurodecode_core::{apply_updates, Ctx, Error, ParamStore, Result, Rng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::ridge::RidgeModel;
use crate::util::{batches, ensure_finite, gather};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage1Kind {
    Gru,
    Conv,
    Transformer,
    Ridge,
}

impl Stage1Kind {
    pub fn name(self) -> &'static str {
        match self {
            Stage1Kind::Gru => "gru",
            Stage1Kind::Conv => "conv",
            Stage1Kind::Transformer => "transformer",
            Stage1Kind::Ridge => "ridge",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(Stage1Kind::Gru),
            "conv" => Ok(Stage1Kind::Conv),
            "transformer" => Ok(Stage1Kind::Transformer),
            "ridge" => Ok(Stage1Kind::Ridge),
            other => Err(Error::Config(format!("unknown stage-1 model kind `{other}` (expected gru, conv, transformer or ridge)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GruRegressorConfig {
    pub input_len: usize,
    /// Hidden units per direction.
    pub hidden: usize,
    pub dropout_p: f64,
    pub fc_hidden: usize,
    pub output_len: usize,
    /// Number of chunks the input is split into.
    pub seq_len: usize,
    /// Channels of the convolutional ablation block.
    pub conv_channels: usize,
    /// Heads of the attention ablation block.
    pub heads: usize,
}

impl Default for GruRegressorConfig {
    fn default() -> Self {
        Self { input_len: 200, hidden: 32, dropout_p: 0.5, fc_hidden: 64, output_len: 160, seq_len: 1, conv_channels: 4, heads: 2 }
    }
}

impl GruRegressorConfig {
    /// Full-size dimensions: 15,724 voxels in, 834 latent slots of 16 out.
    pub fn paper() -> Self {
        Self { input_len: 15_724, hidden: 100, dropout_p: 0.5, fc_hidden: 200, output_len: 13_344, seq_len: 1, conv_channels: 4, heads: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.hidden == 0 || self.fc_hidden == 0 || self.seq_len == 0 {
            return Err(Error::Config("stage-1 sizes must be positive".into()));
        }
        if self.output_len == 0 || !self.output_len.is_multiple_of(16) {
            return Err(Error::Config(format!("output length {} is not a whole number of 16-wide latent slots", self.output_len)));
        }
        if self.seq_len > self.input_len {
            return Err(Error::Config(format!("cannot split {} inputs into {} chunks", self.input_len, self.seq_len)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    /// Width of one input chunk.
    pub fn chunk(&self) -> usize {
        self.input_len.div_ceil(self.seq_len)
    }
}

fn conv_width(cfg: &GruRegressorConfig) -> usize {
    cfg.conv_channels * (2 * cfg.hidden / 4)
}

/// Trainable scalars of a variant, summed layer by layer.
pub fn param_count(cfg: &GruRegressorConfig, kind: Stage1Kind) -> usize {
    let h = cfg.hidden;
    let d = 2 * h;
    let bigru = |input: usize| 2 * Gru::param_count(input, h);
    let layer_norm = 2 * d;
    let head = (d * cfg.fc_hidden + cfg.fc_hidden) + 2 * cfg.fc_hidden + (cfg.fc_hidden * cfg.output_len + cfg.output_len);
    match kind {
        Stage1Kind::Gru => bigru(cfg.chunk()) + layer_norm + bigru(d) + layer_norm + head,
        Stage1Kind::Conv => {
            let c = cfg.conv_channels;
            let block = (c * 3 + c) + (c * c * 3 + c);
            bigru(cfg.chunk()) + layer_norm + block + bigru(conv_width(cfg)) + layer_norm + head
        }
        Stage1Kind::Transformer => {
            let attn = 4 * (d * d + d);
            bigru(cfg.chunk()) + layer_norm + attn + layer_norm + bigru(d) + layer_norm + head
        }
        Stage1Kind::Ridge => cfg.input_len * cfg.output_len + cfg.output_len,
    }
}

#[derive(Clone, Debug)]
enum Middle {
    None,
    Conv { c1: Conv1d, c2: Conv1d },
    Attention { attn: SelfAttention, norm: LayerNorm },
}

/// A trainable stage-1 network (GRU reference or one of its ablations).
#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub cfg: GruRegressorConfig,
    pub kind: Stage1Kind,
    pub store: ParamStore,
    gru1: BiGru,
    norm1: LayerNorm,
    middle: Middle,
    gru2: BiGru,
    norm2: LayerNorm,
    fc1: Linear,
    bn: BatchNorm,
    fc2: Linear,
    dropout: Dropout,
}

/// Output of a forward pass; attention weights are filled for the
/// transformer variant (one `[N, L, L]` tensor per head).
pub struct Stage1Output<'t> {
    pub y: Var<'t>,
    pub attention: Vec<Tensor>,
}

impl Stage1Model {
    pub fn new(cfg: &GruRegressorConfig, kind: Stage1Kind, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if kind == Stage1Kind::Ridge {
            return Err(Error::Config("the ridge baseline is closed-form; use ridge_baseline".into()));
        }
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let (h, d) = (cfg.hidden, 2 * cfg.hidden);
        let gru1 = BiGru::new(&mut store, "gru1", cfg.chunk(), h, &mut rng);
        let norm1 = LayerNorm::new(&mut store, "norm1", d);
        let (middle, gru2_in) = match kind {
            Stage1Kind::Conv => {
                if d % 4 != 0 {
                    return Err(Error::Config(format!("conv variant needs 2·hidden divisible by 4, got {d}")));
                }
                let c = cfg.conv_channels;
                let c1 = Conv1d::new(&mut store, "conv1", 1, c, 3, 1, 1, &mut rng);
                let c2 = Conv1d::new(&mut store, "conv2", c, c, 3, 1, 1, &mut rng);
                (Middle::Conv { c1, c2 }, conv_width(cfg))
            }
            Stage1Kind::Transformer => {
                let attn = SelfAttention::new(&mut store, "attn", d, cfg.heads, &mut rng)?;
                let norm = LayerNorm::new(&mut store, "attn_norm", d);
                (Middle::Attention { attn, norm }, d)
            }
            _ => (Middle::None, d),
        };
        let gru2 = BiGru::new(&mut store, "gru2", gru2_in, h, &mut rng);
        let norm2 = LayerNorm::new(&mut store, "norm2", d);
        let fc1 = Linear::new(&mut store, "fc1", d, cfg.fc_hidden, true, &mut rng);
        let bn = BatchNorm::new(&mut store, "bn", cfg.fc_hidden);
        let fc2 = Linear::new(&mut store, "fc2", cfg.fc_hidden, cfg.output_len, true, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            kind,
            store,
            gru1,
            norm1,
            middle,
            gru2,
            norm2,
            fc1,
            bn,
            fc2,
            dropout: Dropout { p: cfg.dropout_p },
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// `x[N, input_len]` → `[N, output_len]`.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t>, x: Var<'t>) -> Result<Stage1Output<'t>> {
        let cfg = &self.cfg;
        let s = x.shape();
        if s.len() != 2 || s[1] != cfg.input_len {
            return Err(Error::Dim(format!("stage-1 input must be [N, {}], got {:?}", cfg.input_len, s)));
        }
        let n = s[0];
        let (l, chunk) = (cfg.seq_len, cfg.chunk());
        let padded = if l * chunk > cfg.input_len {
            let pad = ctx.constant(Tensor::zeros(&[n, l * chunk - cfg.input_len]));
            Var::concat(&[x, pad], 1)?
        } else {
            x
        };
        let seq = padded.reshape(&[n, l, chunk])?;
        let d = 2 * cfg.hidden;
        let mut h = self.norm1.forward(ctx, self.gru1.forward(ctx, seq)?)?;
        h = self.dropout.forward(ctx, h)?;
        let mut attention = Vec::new();
        match &self.middle {
            Middle::None => {}
            Middle::Conv { c1, c2 } => {
                let rows = h.reshape(&[n * l, 1, d])?;
                let a = c1.forward(ctx, rows)?.relu().max_pool1d(2)?;
                let b = c2.forward(ctx, a)?.relu().max_pool1d(2)?;
                h = b.reshape(&[n, l, conv_width(cfg)])?;
            }
            Middle::Attention { attn, norm } => {
                let (a, w) = attn.forward(ctx, h)?;
                attention = w;
                h = norm.forward(ctx, h.add(a)?)?;
            }
        }
        let h = self.norm2.forward(ctx, self.gru2.forward(ctx, h)?)?;
        let pooled = if l == 1 { h.reshape(&[n, d])? } else { h.mean_axis(1)? };
        let f = self.fc1.forward(ctx, pooled)?;
        let f = self.bn.forward(ctx, f)?.relu();
        let f = self.dropout.forward(ctx, f)?;
        Ok(Stage1Output { y: self.fc2.forward(ctx, f)?, attention })
    }

    /// Eval-mode prediction for a batch `[N, input_len]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let mut ctx = Ctx::eval(&tape, &self.store);
        let xv = ctx.constant(x.clone());
        Ok(self.forward(&mut ctx, xv)?.y.value())
    }

    /// Eval-mode prediction for one beta vector.
    pub fn predict_one(&self, beta: &Tensor) -> Result<Tensor> {
        if beta.len() != self.cfg.input_len {
            return Err(Error::Dim(format!("stage-1 input must have length {}, got {}", self.cfg.input_len, beta.len())));
        }
        let y = self.predict(&beta.reshape(&[1, beta.len()])?)?;
        y.reshape(&[self.cfg.output_len])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 32, lr: 1e-3, patience: 20, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_mse: f64,
    pub train_mae: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Row 0 holds the losses before any update.
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,train_mae,val_mse,val_mae\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.train_mse, r.train_mae, r.val_mse, r.val_mae));
        }
        s
    }

    pub fn best(&self) -> &EpochRow {
        &self.rows[self.best_epoch]
    }
}

/// Mean squared and mean absolute error over every element.
pub fn mse_mae(pred: &Tensor, target: &Tensor) -> Result<(f64, f64)> {
    let diff = pred.sub(target)?;
    let n = diff.len() as f64;
    Ok((diff.data().iter().map(|e| e * e).sum::<f64>() / n, diff.data().iter().map(|e| e.abs()).sum::<f64>() / n))
}

/// Minimizes MSE with Adam, keeping the parameters of the epoch with the
/// lowest validation MSE.
pub fn train_regressor(model: &mut Stage1Model, train: (&Tensor, &Tensor), val: (&Tensor, &Tensor), cfg: &TrainConfig) -> Result<TrainReport> {
    let (xt, yt) = train;
    let (xv, yv) = val;
    if xt.shape()[0] == 0 || xv.shape()[0] == 0 {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    if xt.shape()[0] != yt.shape()[0] || xv.shape()[0] != yv.shape()[0] {
        return Err(Error::Dim("inputs and targets disagree on the sample count".into()));
    }
    let eval_row = |m: &Stage1Model, epoch: usize| -> Result<EpochRow> {
        let (train_mse, train_mae) = mse_mae(&m.predict(xt)?, yt)?;
        let (val_mse, val_mae) = mse_mae(&m.predict(xv)?, yv)?;
        Ok(EpochRow { epoch, train_mse, train_mae, val_mse, val_mae })
    };
    let mut rows = vec![eval_row(model, 0)?];
    let mut best = (rows[0].val_mse, 0, model.store.clone());
    let mut opt = Adam::new(cfg.lr);
    let mut rng = Rng::new(cfg.seed);
    let n = xt.shape()[0];
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        for (bi, idx) in batches(n, cfg.batch_size, &mut rng, true).into_iter().enumerate() {
            let tape = Tape::new();
            let mut ctx = Ctx::new(&tape, &model.store, true, rng.derive(epoch as u64 * 100_003 + bi as u64));
            let x = ctx.constant(gather(xt, &idx));
            let y = ctx.constant(gather(yt, &idx));
            let out = model.forward(&mut ctx, x)?;
            let loss = out.y.sub(y)?.square().mean();
            ensure_finite(loss.item(), epoch, bi, cfg.lr)?;
            let grads = loss.backward()?;
            let g = ctx.grads(&grads, &model.store);
            let updates = ctx.take_updates();
            opt.step(&mut model.store, &g)?;
            apply_updates(&mut model.store, updates)?;
        }
        let row = eval_row(model, epoch)?;
        ensure_finite(row.val_mse, epoch, 0, cfg.lr)?;
        if row.val_mse < best.0 {
            best = (row.val_mse, epoch, model.store.clone());
        }
        rows.push(row);
        if epoch - best.1 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    model.store = best.2;
    Ok(TrainReport { rows, best_epoch: best.1, stopped_early })
}

/// Closed-form multi-output ridge from betas to latents, scored on the
/// test split with the same metrics as the trained networks.
pub fn ridge_baseline(train: (&Tensor, &Tensor), test: (&Tensor, &Tensor), alpha: f64) -> Result<(f64, f64)> {
    let m = RidgeModel::fit(train.0, train.1, alpha)?;
    mse_mae(&m.predict_batch(test.0)?, test.1)
}
