//! Pipeline stages. Each reads its declared upstream artifacts from the run
//! directory, writes its outputs and records a manifest.

use std::fmt::Write as _;
use std::path::Path;

use neurodecode_core::io::{load_archive, load_tensor, save_archive, save_tensor};
use neurodecode_core::rng::derive_seed;
use neurodecode_core::{Error, Result, Rng, Tensor};
use neurodecode_data::scene::generate_stimuli;
use neurodecode_data::{
    condition_betas, fit_glmsingle, split_dataset, zscore_betas, BetaRecord, DesignMatrix, HrfLibrary, SessionSchedule, Stimulus, Vocab,
    generate_dataset,
};
use neurodecode_metrics::{evaluate, FeatureExtractor, MetricReport, RandomProjection};
use neurodecode_models::codec::mean_psnr;
use neurodecode_models::stage1::mse_mae;
use neurodecode_models::util::{gather, load_config, load_params, save_checkpoint};
use neurodecode_models::{
    img2img_refine, perturb_guess, ridge_baseline, select_alpha, train_classifier, train_codec, train_denoiser, train_dual_encoder,
    train_hvae, train_regressor, ClassifierFeatures, CodecConfig, Conditioning, ContrastiveFeatures, ConvClassifier, Denoiser,
    DiffusionConfig, DualEncoder, DualEncoderConfig, GruRegressorConfig, Hvae, HvaeConfig, LatentCodec, PerturbConfig, RidgeModel,
    RowLayout, Stage1Kind, Stage1Model, Tap, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::{read_json, Run, RunManifest, StageLog};
use crate::error::CliResult;

/// Seed streams derived from the experiment seed.
mod stream {
    pub const SYNTH: u64 = 1;
    pub const POOL: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const HVAE: u64 = 4;
    pub const STAGE1: u64 = 5;
    pub const ENCODER: u64 = 6;
    pub const CLASSIFIER: u64 = 7;
    pub const CODEC: u64 = 8;
    pub const DENOISER: u64 = 9;
    pub const DECODE: u64 = 10;
    pub const REFINE: u64 = 11;
    pub const PERTURB: u64 = 12;
    pub const PROJECTION: u64 = 13;
    pub const VAL: u64 = 14;
}

pub const STIMULI: &str = "data/stimuli.json";
pub const IMAGES: &str = "data/images.ndtn";
pub const BOLD: &str = "data/bold.ndta";
pub const SCHEDULES: &str = "data/schedules.json";
pub const POOL: &str = "data/pool.json";
pub const POOL_IMAGES: &str = "data/pool_images.ndtn";
pub const BETAS: &str = "glm/betas.ndtn";
pub const SPLIT: &str = "glm/split.json";
pub const HVAE: &str = "models/hvae";
pub const STAGE1: &str = "models/stage1";
pub const ENCODER: &str = "models/encoder";
pub const CLASSIFIER: &str = "models/classifier";
pub const RIDGE_VISION: &str = "models/ridge_vision";
pub const RIDGE_TEXT: &str = "models/ridge_text";
pub const CODEC: &str = "models/codec";
pub const DENOISER: &str = "models/denoiser";
pub const GUESS: &str = "recon/guess.ndtn";
pub const REFINED: &str = "recon/refined.ndtn";
pub const RECON_IDS: &str = "recon/ids.json";
pub const GUESS_METRICS: &str = "reports/guess_metrics";
pub const REFINED_METRICS: &str = "reports/refined_metrics";
pub const STAGE1_COMPARISON: &str = "reports/stage1_comparison.csv";
pub const NOISE_SWEEP: &str = "reports/noise_sweep";

fn seed(run: &Run, stream: u64) -> u64 {
    derive_seed(run.cfg.seed, stream)
}

/// Seed of a trainer: the stage stream mixed with the trainer's own seed.
fn train_seed(run: &Run, stream: u64, own: u64) -> u64 {
    derive_seed(seed(run, stream), own)
}

fn per_id(base: u64, ids: &[usize]) -> Vec<u64> {
    ids.iter().map(|&i| derive_seed(base, i as u64)).collect()
}

fn require_training(run: &Run, stage: &str) -> CliResult<()> {
    if run.cfg.shapes_only {
        return Err(Error::Config(format!("the config only checks shape contracts; `{stage}` needs a trainable preset such as smoke or desk")).into());
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulusRecord {
    pub id: usize,
    pub label: usize,
    pub caption: Vec<usize>,
    pub text: String,
}

impl StimulusRecord {
    fn from_stimulus(s: &Stimulus, vocab: &Vocab) -> Self {
        Self { id: s.id, label: s.label, caption: s.caption.clone(), text: vocab.decode(&s.caption) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn save_images(path: &Path, images: &[Tensor]) -> Result<()> {
    save_tensor(path, &Tensor::stack(images)?)
}

pub fn load_images(path: &Path) -> Result<Vec<Tensor>> {
    let t = load_tensor(path)?;
    if t.rank() != 4 {
        return Err(Error::Format(format!("{}: expected an image stack [N, 3, H, W], got {:?}", path.display(), t.shape())));
    }
    Ok((0..t.shape()[0]).map(|i| t.row(i)).collect())
}

fn pick<T: Clone>(items: &[T], ids: &[usize]) -> Vec<T> {
    ids.iter().map(|&i| items[i].clone()).collect()
}

/// Holds out the last eighth of a pool for validation.
fn pool_split<T>(items: &[T]) -> (&[T], &[T]) {
    let n_val = (items.len() / 8).max(1);
    items.split_at(items.len() - n_val)
}

pub fn synth(run: &Run) -> CliResult<RunManifest> {
    require_training(run, "synth")?;
    let mut log = StageLog::start(run, "synth")?;
    let cfg = &run.cfg.data;
    let vocab = Vocab::default();
    let ds = generate_dataset(&cfg.synth, &mut Rng::new(seed(run, stream::SYNTH)))?;
    let records: Vec<StimulusRecord> = ds.stimuli.iter().map(|s| StimulusRecord::from_stimulus(s, &vocab)).collect();
    log.write_json(STIMULI, &records)?;
    save_images(&log.output(IMAGES)?, &ds.stimuli.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let sessions: Vec<(String, Tensor)> = ds.bold.iter().enumerate().map(|(i, b)| (format!("session_{i:03}"), b.clone())).collect();
    save_archive(log.output(BOLD)?, &sessions)?;
    log.write_json(SCHEDULES, &ds.schedules)?;
    let pool = generate_stimuli(cfg.pool_images, cfg.synth.n_classes, cfg.synth.image_size, &vocab, &mut Rng::new(seed(run, stream::POOL)))?;
    log.write_json(POOL, &pool.iter().map(|s| StimulusRecord::from_stimulus(s, &vocab)).collect::<Vec<_>>())?;
    save_images(&log.output(POOL_IMAGES)?, &pool.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let trials: usize = ds.schedules.iter().map(|s| s.onsets.len()).sum();
    log.write_json(
        "reports/synth.json",
        &serde_json::json!({
            "stimuli": records.len(),
            "voxels": ds.forward.voxels(),
            "sessions": ds.schedules.len(),
            "trials": trials,
            "pool_images": pool.len(),
        }),
    )?;
    log.finish()
}

fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        (s[m - 1] + s[m]) / 2.0
    } else {
        s[m]
    }
}

pub fn glm(run: &Run) -> CliResult<RunManifest> {
    require_training(run, "glm")?;
    let mut log = StageLog::start(run, "glm")?;
    let cfg = &run.cfg;
    let stimuli: Vec<StimulusRecord> = read_json(&log.input(STIMULI, "synth")?)?;
    let bold: Vec<Tensor> = load_archive(log.input(BOLD, "synth")?)?.into_iter().map(|(_, t)| t).collect();
    let schedules: Vec<SessionSchedule> = read_json(&log.input(SCHEDULES, "synth")?)?;
    let hrfs = HrfLibrary::standard(cfg.data.synth.tr)?;
    let fit = fit_glmsingle(&bold, &DesignMatrix::from_schedules(&schedules), &hrfs, &cfg.glm)?;
    let n = stimuli.len();
    let (cond, counts) = condition_betas(&fit, n)?;
    let v = cond.shape()[0];
    let records: Vec<BetaRecord> = (0..n)
        .map(|m| BetaRecord {
            beta: Tensor::from_vec((0..v).map(|k| cond.data()[k * n + m]).collect()),
            stimulus_id: stimuli[m].id,
            subject_id: 0,
            normalized: false,
        })
        .collect();
    let (z, zero_voxels) = zscore_betas(&records)?;
    let rows: Vec<Tensor> = z.into_iter().map(|r| r.beta).collect();
    save_tensor(log.output(BETAS)?, &Tensor::stack(&rows)?)?;
    let ids: Vec<usize> = (0..n).collect();
    let (train, test) = split_dataset(&ids, cfg.data.train_fraction, &mut Rng::new(seed(run, stream::SPLIT)))?;
    log.write_json(SPLIT, &Split { train, test })?;
    log.write_json(
        "reports/glm.json",
        &serde_json::json!({
            "voxels": v,
            "trials": fit.trial_stimulus.len(),
            "min_repeats": counts.iter().min(),
            "max_repeats": counts.iter().max(),
            "noise_pool": fit.noise_pool.len(),
            "noise_pcs": fit.n_pcs,
            "median_r2_cv": median(fit.r2_cv.data()),
            "median_ridge_fraction": median(&fit.ridge_fraction),
            "zero_variance_voxels": zero_voxels,
        }),
    )?;
    log.finish()
}

fn load_hvae(log: &mut StageLog, run: &Run) -> CliResult<Hvae> {
    let path = log.checkpoint_input(HVAE, "train-hvae")?;
    let hc: HvaeConfig = load_config(&path)?;
    if hc != run.cfg.hvae {
        return Err(Error::Config(format!(
            "{HVAE} was trained with {} injected layers and {:?}, but the config asks for {} and {:?}; rerun train-hvae",
            hc.injected_layers, hc.layer_res, run.cfg.hvae.injected_layers, run.cfg.hvae.layer_res
        ))
        .into());
    }
    let mut m = Hvae::new(&hc, 0)?;
    load_params(&path, &mut m.store)?;
    m.trained = true;
    Ok(m)
}

pub fn train_hvae_stage(run: &Run) -> CliResult<RunManifest> {
    require_training(run, "train-hvae")?;
    let mut log = StageLog::start(run, "train-hvae")?;
    let cfg = &run.cfg;
    let pool = load_images(&log.input(POOL_IMAGES, "synth")?)?;
    let (train, val) = pool_split(&pool);
    let mut model = Hvae::new(&cfg.hvae, seed(run, stream::HVAE))?;
    let tc = neurodecode_models::HvaeTrainConfig { seed: train_seed(run, stream::HVAE, cfg.hvae_train.seed), ..cfg.hvae_train.clone() };
    let report = train_hvae(&mut model, train, val, &tc)?;
    save_checkpoint(log.checkpoint_output(HVAE)?, &model.cfg, &model.store)?;
    let lats = model.encode_batch(val)?;
    let inj: Vec<Tensor> = lats.iter().map(|l| model.injected_part(&l.mean)).collect::<Result<_>>()?;
    let seeds: Vec<u64> = (0..val.len() as u64).map(|i| derive_seed(seed(run, stream::DECODE), i)).collect();
    let ssim_mean = |xs: &[Tensor]| -> Result<f64> {
        let mut s = 0.0;
        for (x, y) in xs.iter().zip(val) {
            s += neurodecode_metrics::ssim(x, y, &cfg.metrics.ssim)?;
        }
        Ok(s / val.len() as f64)
    };
    let injected_ssim = ssim_mean(&model.decode_batch(&inj, &seeds)?)?;
    let unconditional_ssim = ssim_mean(&model.sample(&seeds)?)?;
    log.write_json(
        "reports/hvae.json",
        &serde_json::json!({
            "epochs": report.epochs,
            "collapse_warning": report.collapse_warning,
            "val_psnr": mean_psnr(&model.reconstruct(val)?, val)?,
            "injected_ssim": injected_ssim,
            "unconditional_ssim": unconditional_ssim,
        }),
    )?;
    log.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Checkpoint {
    pub kind: Stage1Kind,
    pub model: GruRegressorConfig,
    pub alpha: Option<f64>,
}

/// A trained stage-1 regressor: a network variant or closed-form ridge.
pub enum Stage1 {
    Net(Stage1Model),
    Ridge(RidgeModel),
}

impl Stage1 {
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Stage1::Net(m) => m.predict(x),
            Stage1::Ridge(m) => m.predict_batch(x),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Stage1::Net(m) => m.cfg.output_len,
            Stage1::Ridge(m) => m.output_len(),
        }
    }
}

fn load_stage1(log: &mut StageLog, hvae: &Hvae) -> CliResult<Stage1> {
    let path = log.checkpoint_input(STAGE1, "train-stage1")?;
    let ck: Stage1Checkpoint = load_config(&path)?;
    let model = match ck.kind {
        Stage1Kind::Ridge => Stage1::Ridge(RidgeModel::from_named(&load_archive(path.with_extension("ndta"))?)?),
        kind => {
            let mut m = Stage1Model::new(&ck.model, kind, 0)?;
            load_params(&path, &mut m.store)?;
            Stage1::Net(m)
        }
    };
    let k = hvae.cfg.injected_len();
    if model.output_len() != k {
        return Err(Error::Config(format!(
            "the stage-1 model predicts {} latent values but the HVAE injects {k} (K = {} layers); rerun train-stage1",
            model.output_len(),
            hvae.cfg.injected_layers
        ))
        .into());
    }
    Ok(model)
}

fn rows_tensor(rows: &[Tensor]) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    let data: Vec<f64> = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    Tensor::new(&[rows.len(), d], data)
}

pub fn train_stage1(run: &Run) -> CliResult<RunManifest> {
    require_training(run, "train-stage1")?;
    let mut log = StageLog::start(run, "train-stage1")?;
    let cfg = &run.cfg.stage1;
    let betas = load_tensor(log.input(BETAS, "glm")?)?;
    let split: Split = read_json(&log.input(SPLIT, "glm")?)?;
    let images = load_images(&log.input(IMAGES, "synth")?)?;
    let hvae = load_hvae(&mut log, run)?;
    let targets: Vec<Tensor> =
        hvae.encode_batch(&images)?.iter().map(|l| hvae.injected_part(&l.mean)).collect::<Result<_>>()?;
    let (fit_ids, val_ids) = split_dataset(&split.train, 1.0 - run.cfg.data.val_fraction, &mut Rng::new(seed(run, stream::VAL)))?;
    let xy = |ids: &[usize]| -> Result<(Tensor, Tensor)> { Ok((gather(&betas, ids), rows_tensor(&pick(&targets, ids))?)) };
    let (x_train, y_train) = xy(&split.train)?;
    let (x_test, y_test) = xy(&split.test)?;
    let alpha = select_alpha(&x_train, &y_train, &cfg.ridge_alphas, cfg.cv_folds.min(split.train.len()))?;
    let baseline = ridge_baseline((&x_train, &y_train), (&x_test, &y_test), alpha)?;
    let path = log.checkpoint_output(STAGE1)?;
    let (model, train_csv) = match cfg.kind {
        Stage1Kind::Ridge => {
            let m = RidgeModel::fit(&x_train, &y_train, alpha)?;
            save_archive(path.with_extension("ndta"), &m.to_named())?;
            (Stage1::Ridge(m), None)
        }
        kind => {
            let mut m = Stage1Model::new(&cfg.model, kind, seed(run, stream::STAGE1))?;
            let tc = TrainConfig { seed: train_seed(run, stream::STAGE1, cfg.train.seed), ..cfg.train.clone() };
            let (x_fit, y_fit) = xy(&fit_ids)?;
            let (x_val, y_val) = xy(&val_ids)?;
            let report = train_regressor(&mut m, (&x_fit, &y_fit), (&x_val, &y_val), &tc)?;
            save_archive(path.with_extension("ndta"), &m.store.named())?;
            (Stage1::Net(m), Some(report.to_csv()))
        }
    };
    let ck = Stage1Checkpoint { kind: cfg.kind, model: cfg.model.clone(), alpha: (cfg.kind == Stage1Kind::Ridge).then_some(alpha) };
    log.write_json(&format!("{STAGE1}.json"), &ck)?;
    if let Some(csv) = train_csv {
        log.write("reports/stage1_train.csv", csv)?;
    }
    let (mse, mae) = mse_mae(&model.predict(&x_test)?, &y_test)?;
    let mut table = String::from("model,test_mse,test_mae\n");
    writeln!(table, "ridge,{},{}", baseline.0, baseline.1).unwrap();
    if cfg.kind != Stage1Kind::Ridge {
        writeln!(table, "{},{mse},{mae}", cfg.kind.name()).unwrap();
    }
    log.write(STAGE1_COMPARISON, table)?;
    log.finish()
}

fn load_encoder(log: &mut StageLog) -> CliResult<DualEncoder> {
    let path = log.checkpoint_input(ENCODER, "train-embed")?;
    let c: DualEncoderConfig = load_config(&path)?;
    let mut m = DualEncoder::new(&c, 0)?;
    load_params(&path, &mut m.store)?;
    m.trained = true;
    Ok(m)
}

fn load_classifier(log: &mut StageLog) -> CliResult<ConvClassifier> {
    let path = log.checkpoint_input(CLASSIFIER, "train-embed")?;
    let mut m = ConvClassifier::new(&load_config(&path)?, 0)?;
    load_params(&path, &mut m.store)?;
    m.trained = true;
    Ok(m)
}

pub fn train_embed(run: &Run) -> CliResult<RunManifest> {
    require_training(run, "train-embed")?;
    let mut log = StageLog::start(run, "train-embed")?;
    let cfg = &run.cfg.embed;
    let pool = load_images(&log.input(POOL_IMAGES, "synth")?)?;
    let meta: Vec<StimulusRecord> = read_json(&log.input(POOL, "synth")?)?;
    let captions: Vec<Vec<usize>> = meta.iter().map(|m| m.caption.clone()).collect();
    let labels: Vec<usize> = meta.iter().map(|m| m.label).collect();
    let ((ti, vi), (tc, vc), (tl, vl)) = (pool_split(&pool), pool_split(&captions), pool_split(&labels));
    let mut enc = DualEncoder::new(&cfg.encoder, seed(run, stream::ENCODER))?;
    let dt = neurodecode_models::DualTrainConfig { seed: train_seed(run, stream::ENCODER, cfg.train.seed), ..cfg.train.clone() };
    let retrieval_report = train_dual_encoder(&mut enc, (ti, tc), (vi, vc), &dt)?;
    save_checkpoint(log.checkpoint_output(ENCODER)?, &enc.cfg, &enc.store)?;
    let mut cls = ConvClassifier::new(&cfg.classifier, seed(run, stream::CLASSIFIER))?;
    let ct = neurodecode_models::ClassifierTrainConfig {
        seed: train_seed(run, stream::CLASSIFIER, cfg.classifier_train.seed),
        ..cfg.classifier_train.clone()
    };
    let cls_report = train_classifier(&mut cls, (ti, tl), (vi, vl), &ct)?;
    save_checkpoint(log.checkpoint_output(CLASSIFIER)?, &cls.cfg, &cls.store)?;
    log.write_json("reports/embed.json", &serde_json::json!({ "dual_encoder": retrieval_report, "classifier": cls_report }))?;
    log.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeEmbedMeta {
    pub alpha: f64,
    pub rows: usize,
    pub d: usize,
}

/// Mean row cosine between unit-row predictions and unit-row targets.
fn mean_row_cosine(pred: &[Tensor], truth: &[Tensor], d: usize) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        for (a, b) in p.data().chunks(d).zip(t.data().chunks(d)) {
            s += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            n += 1;
        }
    }
    s / n.max(1) as f64
}

pub fn fit_ridge_embed(run: &Run) -> CliResult<RunManifest> {
    require_training(run, "fit-ridge-embed")?;
    let mut log = StageLog::start(run, "fit-ridge-embed")?;
    let cfg = &run.cfg.embed;
    let betas = load_tensor(log.input(BETAS, "glm")?)?;
    let split: Split = read_json(&log.input(SPLIT, "glm")?)?;
    let stimuli: Vec<StimulusRecord> = read_json(&log.input(STIMULI, "synth")?)?;
    let images = load_images(&log.input(IMAGES, "synth")?)?;
    let enc = load_encoder(&mut log)?;
    let captions: Vec<Vec<usize>> = stimuli.iter().map(|s| s.caption.clone()).collect();
    let d = enc.cfg.d;
    let targets = [(RIDGE_VISION, enc.embed_images(&images)?, enc.cfg.rows_v()), (RIDGE_TEXT, enc.embed_texts(&captions)?, enc.cfg.rows_t)];
    let x_train = gather(&betas, &split.train);
    let mut summary = serde_json::Map::new();
    for (rel, rows, n_rows) in targets {
        let flat: Vec<Tensor> = rows.iter().map(|r| r.reshape(&[n_rows * d])).collect::<Result<_>>()?;
        let y_train = rows_tensor(&pick(&flat, &split.train))?;
        let alpha = select_alpha(&x_train, &y_train, &cfg.ridge_alphas, cfg.cv_folds.min(split.train.len()))?;
        let model = RidgeModel::fit(&x_train, &y_train, alpha)?;
        let path = log.checkpoint_output(rel)?;
        save_archive(path.with_extension("ndta"), &model.to_named())?;
        log.write_json(&format!("{rel}.json"), &RidgeEmbedMeta { alpha, rows: n_rows, d })?;
        let layout = RowLayout { rows: n_rows, d };
        let pred: Vec<Tensor> = split.test.iter().map(|&i| model.predict_rows(&betas.row(i), layout)).collect::<Result<_>>()?;
        let truth = pick(&rows, &split.test);
        let mut shifted = truth.clone();
        shifted.rotate_left(1);
        let name = rel.trim_start_matches("models/ridge_");
        summary.insert(
            name.to_string(),
            serde_json::json!({
                "alpha": alpha,
                "shape": [n_rows, d],
                "test_cosine": mean_row_cosine(&pred, &truth, d),
                "permuted_cosine": mean_row_cosine(&pred, &shifted, d),
            }),
        );
    }
    log.write_json("reports/ridge_embed.json", &summary)?;
    log.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecCheckpoint {
    pub config: CodecConfig,
    pub scale: f64,
}

fn load_codec(log: &mut StageLog) -> CliResult<LatentCodec> {
    let path = log.checkpoint_input(CODEC, "train-ldm")?;
    let ck: CodecCheckpoint = load_config(&path)?;
    let mut m = LatentCodec::new(&ck.config, 0)?;
    load_params(&path, &mut m.store)?;
    m.scale = ck.scale;
    m.trained = true;
    Ok(m)
}

fn load_denoiser(log: &mut StageLog, run: &Run) -> CliResult<Denoiser> {
    let path = log.checkpoint_input(DENOISER, "train-ldm")?;
    let c: DiffusionConfig = load_config(&path)?;
    let mut m = Denoiser::new(&c, 0)?;
    load_params(&path, &mut m.store)?;
    m.trained = true;
    let want = &run.cfg.ldm.diffusion;
    if (c.t_steps, c.beta_start, c.beta_end) != (want.t_steps, want.beta_start, want.beta_end) {
        return Err(Error::Config(format!(
            "{DENOISER} was trained with T = {} and β {}..{}, but the config asks for T = {} and β {}..{}; rerun train-ldm",
            c.t_steps, c.beta_start, c.beta_end, want.t_steps, want.beta_start, want.beta_end
        ))
        .into());
    }
    Ok(m)
}

pub fn train_ldm(run: &Run) -> CliResult<RunManifest> {
    require_training(run, "train-ldm")?;
    let mut log = StageLog::start(run, "train-ldm")?;
    let cfg = &run.cfg.ldm;
    let pool = load_images(&log.input(POOL_IMAGES, "synth")?)?;
    let meta: Vec<StimulusRecord> = read_json(&log.input(POOL, "synth")?)?;
    let enc = load_encoder(&mut log)?;
    let (train, val) = pool_split(&pool);
    let mut codec = LatentCodec::new(&cfg.codec, seed(run, stream::CODEC))?;
    let ct = neurodecode_models::CodecTrainConfig { seed: train_seed(run, stream::CODEC, cfg.codec_train.seed), ..cfg.codec_train.clone() };
    let codec_report = train_codec(&mut codec, train, val, &ct)?;
    save_checkpoint(log.checkpoint_output(CODEC)?, &CodecCheckpoint { config: codec.cfg.clone(), scale: codec.scale }, &codec.store)?;
    let captions: Vec<Vec<usize>> = meta.iter().map(|m| m.caption.clone()).collect();
    let conds: Vec<Conditioning> =
        enc.embed_images(&pool)?.into_iter().zip(enc.embed_texts(&captions)?).map(|(vision, text)| Conditioning { vision, text }).collect();
    let latents = codec.encode(&pool)?;
    let (zt, zv) = pool_split(&latents);
    let (ct_, cv) = pool_split(&conds);
    let mut model = Denoiser::new(&cfg.diffusion, seed(run, stream::DENOISER))?;
    let dt = neurodecode_models::DenoiserTrainConfig { seed: train_seed(run, stream::DENOISER, cfg.train.seed), ..cfg.train.clone() };
    let report = train_denoiser(&mut model, (zt, ct_), (zv, cv), &dt)?;
    save_checkpoint(log.checkpoint_output(DENOISER)?, &model.cfg, &model.store)?;
    log.write_json("reports/ldm.json", &serde_json::json!({ "codec": codec_report, "denoiser": report }))?;
    log.finish()
}

fn load_ridge(log: &mut StageLog, rel: &str) -> CliResult<(RidgeModel, RowLayout)> {
    let path = log.checkpoint_input(rel, "fit-ridge-embed")?;
    let meta: RidgeEmbedMeta = read_json(&path.with_extension("json"))?;
    let model = RidgeModel::from_named(&load_archive(path.with_extension("ndta"))?)?;
    Ok((model, RowLayout { rows: meta.rows, d: meta.d }))
}

/// Everything needed to refine guesses and score images.
struct Refiner {
    codec: LatentCodec,
    denoiser: Denoiser,
    conds: Vec<Conditioning>,
    encoder: DualEncoder,
    classifier: ConvClassifier,
    projection: RandomProjection,
}

impl Refiner {
    fn load(log: &mut StageLog, run: &Run, betas: &Tensor, ids: &[usize]) -> CliResult<Self> {
        let (rv, lv) = load_ridge(log, RIDGE_VISION)?;
        let (rt, lt) = load_ridge(log, RIDGE_TEXT)?;
        let conds = ids
            .iter()
            .map(|&i| {
                let b = betas.row(i);
                Ok(Conditioning { vision: rv.predict_rows(&b, lv)?, text: rt.predict_rows(&b, lt)? })
            })
            .collect::<Result<_>>()?;
        let size = run.cfg.data.synth.image_size;
        Ok(Self {
            codec: load_codec(log)?,
            denoiser: load_denoiser(log, run)?,
            conds,
            encoder: load_encoder(log)?,
            classifier: load_classifier(log)?,
            projection: RandomProjection::new(3 * size * size, run.cfg.metrics.projection_dim, seed(run, stream::PROJECTION)),
        })
    }

    fn refine(&self, run: &Run, guesses: &[Tensor], ids: &[usize]) -> Result<Vec<Tensor>> {
        let seeds = per_id(seed(run, stream::REFINE), ids);
        img2img_refine(&self.codec, &self.denoiser, guesses, &self.conds, run.cfg.ldm.diffusion.strength, &seeds)
    }

    fn score(&self, run: &Run, preds: &[Tensor], truths: &[Tensor]) -> Result<MetricReport> {
        let shallow = ClassifierFeatures { model: &self.classifier, tap: Tap::Shallow };
        let deep = ClassifierFeatures { model: &self.classifier, tap: Tap::Deep };
        let contrastive = ContrastiveFeatures { model: &self.encoder };
        let fx: [&dyn FeatureExtractor; 4] = [&shallow, &deep, &contrastive, &self.projection];
        evaluate(preds, truths, &fx, &run.cfg.metrics.ssim)
    }
}

fn write_metrics(log: &mut StageLog, rel: &str, report: &MetricReport) -> CliResult<()> {
    log.write(&format!("{rel}.csv"), report.to_csv())?;
    log.write(&format!("{rel}.json"), report.to_json()? + "\n")
}

pub fn reconstruct(run: &Run) -> CliResult<RunManifest> {
    require_training(run, "reconstruct")?;
    let mut log = StageLog::start(run, "reconstruct")?;
    let betas = load_tensor(log.input(BETAS, "glm")?)?;
    let split: Split = read_json(&log.input(SPLIT, "glm")?)?;
    let images = load_images(&log.input(IMAGES, "synth")?)?;
    let hvae = load_hvae(&mut log, run)?;
    let stage1 = load_stage1(&mut log, &hvae)?;
    let ids = &split.test;
    let truths = pick(&images, ids);
    let pred = stage1.predict(&gather(&betas, ids))?;
    let latents: Vec<Tensor> = (0..ids.len()).map(|i| pred.row(i)).collect();
    let guesses = hvae.decode_batch(&latents, &per_id(seed(run, stream::DECODE), ids))?;
    let refiner = Refiner::load(&mut log, run, &betas, ids)?;
    let refined = refiner.refine(run, &guesses, ids)?;
    save_images(&log.output(GUESS)?, &guesses)?;
    save_images(&log.output(REFINED)?, &refined)?;
    log.write_json(RECON_IDS, ids)?;
    write_metrics(&mut log, GUESS_METRICS, &refiner.score(run, &guesses, &truths)?)?;
    write_metrics(&mut log, REFINED_METRICS, &refiner.score(run, &refined, &truths)?)?;
    log.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub amplitude: u32,
    pub report: MetricReport,
}

pub fn noise_sweep(run: &Run) -> CliResult<RunManifest> {
    require_training(run, "noise-sweep")?;
    let mut log = StageLog::start(run, "noise-sweep")?;
    let betas = load_tensor(log.input(BETAS, "glm")?)?;
    let images = load_images(&log.input(IMAGES, "synth")?)?;
    let guesses = load_images(&log.input(GUESS, "reconstruct")?)?;
    let ids: Vec<usize> = read_json(&log.input(RECON_IDS, "reconstruct")?)?;
    let truths = pick(&images, &ids);
    let refiner = Refiner::load(&mut log, run, &betas, &ids)?;
    let pc = PerturbConfig { amplitudes: run.cfg.metrics.amplitudes.clone(), allow_any: false };
    let noise_seeds = per_id(seed(run, stream::PERTURB), &ids);
    let mut rows = Vec::new();
    for &a in &run.cfg.metrics.amplitudes {
        let perturbed: Vec<Tensor> =
            guesses.iter().zip(&noise_seeds).map(|(g, &s)| perturb_guess(g, a, &pc, &mut Rng::new(s))).collect::<Result<_>>()?;
        let refined = refiner.refine(run, &perturbed, &ids)?;
        rows.push(SweepRow { amplitude: a, report: refiner.score(run, &refined, &truths)? });
    }
    let mut csv = String::new();
    if let Some(first) = rows.first() {
        writeln!(csv, "amplitude,{}", first.report.csv_header()).unwrap();
    }
    for r in &rows {
        writeln!(csv, "{},{}", r.amplitude, MetricReport::csv_values(&r.report.mean)).unwrap();
    }
    log.write(&format!("{NOISE_SWEEP}.csv"), csv)?;
    log.write_json(&format!("{NOISE_SWEEP}.json"), &rows)?;
    log.finish()
}
