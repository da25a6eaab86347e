//! Small convolutional classifier over the semantic labels, used only as a
//! source of shallow and deep image features for evaluation.

use neurodecode_core::nn::{Conv2d, Linear};
use neurodecode_core::optim::Adam;
use neurodecode_core::{Ctx, Error, ParamStore, Result, Rng, Tape, Tensor, Var};
use neurodecode_metrics::FeatureExtractor;
use serde::{Deserialize, Serialize};

use crate::util::{batches, ensure_finite};

/// Pooled grid side of the shallow tap.
const SHALLOW_GRID: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub image_size: usize,
    pub width: usize,
    pub classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { image_size: 16, width: 16, classes: 32 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 * SHALLOW_GRID || !self.image_size.is_multiple_of(2 * SHALLOW_GRID) || self.width == 0 || self.classes < 2 {
            return Err(Error::Config(format!("classifier needs an image size divisible by {}, positive width and ≥ 2 classes, got {self:?}", 2 * SHALLOW_GRID)));
        }
        Ok(())
    }
}

/// Which internal layer a feature tap reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tap {
    /// First convolution, average-pooled to a 4×4 grid.
    Shallow,
    /// Globally pooled last convolution.
    Deep,
}

struct Activations<'t> {
    shallow: Var<'t>,
    deep: Var<'t>,
    logits: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct ConvClassifier {
    pub cfg: ClassifierConfig,
    pub store: ParamStore,
    pub trained: bool,
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    head: Linear,
}

impl ConvClassifier {
    pub fn new(cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let w = cfg.width;
        Ok(Self {
            cfg: cfg.clone(),
            trained: false,
            c1: Conv2d::new(&mut store, "c1", 3, w, 3, 1, 1, &mut rng),
            c2: Conv2d::new(&mut store, "c2", w, 2 * w, 4, 2, 1, &mut rng),
            c3: Conv2d::new(&mut store, "c3", 2 * w, 2 * w, 3, 1, 1, &mut rng),
            head: Linear::new(&mut store, "head", 2 * w, cfg.classes, true, &mut rng),
            store,
        })
    }

    fn run<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Activations<'t>> {
        let s = x.shape();
        let size = self.cfg.image_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::Dim(format!("classifier takes [N, 3, {size}, {size}], got {s:?}")));
        }
        let n = s[0];
        let h1 = self.c1.forward(ctx, x)?.relu();
        let shallow = h1.avg_pool2d(size / SHALLOW_GRID)?.reshape(&[n, self.cfg.width * SHALLOW_GRID * SHALLOW_GRID])?;
        let h2 = self.c2.forward(ctx, h1)?.relu();
        let h3 = self.c3.forward(ctx, h2)?.relu();
        let deep = h3.avg_pool2d(size / 2)?.reshape(&[n, 2 * self.cfg.width])?;
        let logits = self.head.forward(ctx, deep)?;
        Ok(Activations { shallow, deep, logits })
    }

    fn loss<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        Ok(self.run(ctx, x)?.logits.log_softmax()?.pick(labels)?.mean().scale(-1.0))
    }

    /// Features of each image at the given tap.
    pub fn features(&self, images: &[Tensor], tap: Tap) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let tape = Tape::no_grad();
            let ctx = Ctx::eval(&tape, &self.store);
            let a = self.run(&ctx, ctx.constant(Tensor::stack(chunk)?))?;
            let v = match tap {
                Tap::Shallow => a.shallow.value(),
                Tap::Deep => a.deep.value(),
            };
            out.extend((0..chunk.len()).map(|i| v.row(i).into_vec()));
        }
        Ok(out)
    }

    /// Most likely label of each image.
    pub fn predict(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let tape = Tape::no_grad();
            let ctx = Ctx::eval(&tape, &self.store);
            let logits = self.run(&ctx, ctx.constant(Tensor::stack(chunk)?))?.logits.value();
            let c = self.cfg.classes;
            out.extend(logits.data().chunks(c).map(|row| (0..c).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap_or(0)));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 2e-3, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_loss: Vec<f64>,
    pub val_accuracy: f64,
}

pub fn train_classifier(
    model: &mut ConvClassifier,
    train: (&[Tensor], &[usize]),
    val: (&[Tensor], &[usize]),
    cfg: &ClassifierTrainConfig,
) -> Result<ClassifierReport> {
    let (images, labels) = train;
    if images.is_empty() || images.len() != labels.len() || val.0.is_empty() || val.0.len() != val.1.len() {
        return Err(Error::Config("classifier training needs matched, non-empty images and labels".into()));
    }
    if let Some(&bad) = labels.iter().chain(val.1).find(|&&l| l >= model.cfg.classes) {
        return Err(Error::Config(format!("label {bad} outside 0..{}", model.cfg.classes)));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut rng = Rng::new(cfg.seed);
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for (bi, idx) in batches(images.len(), cfg.batch_size, &mut rng, false).into_iter().enumerate() {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &model.store, true, Rng::new(0));
            let x = ctx.constant(Tensor::stack(&idx.iter().map(|&i| images[i].clone()).collect::<Vec<_>>())?);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = model.loss(&ctx, x, &y)?;
            ensure_finite(loss.item(), epoch, bi, cfg.lr)?;
            sum += loss.item() * idx.len() as f64;
            count += idx.len();
            let grads = loss.backward()?;
            let g = ctx.grads(&grads, &model.store);
            opt.step(&mut model.store, &g)?;
        }
        train_loss.push(sum / count.max(1) as f64);
    }
    model.trained = true;
    let pred = model.predict(val.0)?;
    let hits = pred.iter().zip(val.1).filter(|(a, b)| a == b).count();
    Ok(ClassifierReport { train_loss, val_accuracy: hits as f64 / val.1.len() as f64 })
}

/// One tap of a trained classifier as an evaluation feature extractor.
pub struct ClassifierFeatures<'a> {
    pub model: &'a ConvClassifier,
    pub tap: Tap,
}

impl FeatureExtractor for ClassifierFeatures<'_> {
    fn name(&self) -> &str {
        match self.tap {
            Tap::Shallow => "classifier_shallow",
            Tap::Deep => "classifier_deep",
        }
    }

    fn tap(&self) -> &str {
        match self.tap {
            Tap::Shallow => "conv1",
            Tap::Deep => "conv3",
        }
    }

    fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        Ok(self.model.features(std::slice::from_ref(image), self.tap)?.remove(0))
    }
}
