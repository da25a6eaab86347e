//! Summary tables and side-by-side image grids built from run artifacts
//! alone, plus the full-size shape contracts.

use std::fmt::Write as _;
use std::path::PathBuf;

use neurodecode_core::image::{encode_ppm, montage};
use neurodecode_core::{Error, Tensor};
use neurodecode_metrics::MetricReport;
use neurodecode_models::{param_count, DualEncoderConfig, Stage1Kind};
use serde::{Deserialize, Serialize};

use crate::artifacts::{read_json, Run, RunManifest, StageLog};
use crate::error::CliResult;
use crate::stages::{
    load_images, Split, GUESS, GUESS_METRICS, IMAGES, NOISE_SWEEP, RECON_IDS, REFINED, REFINED_METRICS, SPLIT, STAGE1_COMPARISON,
};

pub const SUMMARY: &str = "reports/summary";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub samples: usize,
    pub extractors: Vec<String>,
    pub mean: neurodecode_metrics::SampleMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub stages: Vec<StageSummary>,
    /// Artifacts that were absent; their panels and rows are placeholders.
    pub missing: Vec<String>,
    pub stage1_comparison: Option<String>,
    pub noise_sweep: Option<String>,
    pub montages: Vec<String>,
}

impl StageLog<'_> {
    /// Declares an artifact that may be absent in a partial run.
    fn optional(&mut self, rel: &str, producer: &'static str, missing: &mut Vec<String>) -> Option<PathBuf> {
        match self.input(rel, producer) {
            Ok(p) => Some(p),
            Err(_) => {
                missing.push(rel.to_string());
                None
            }
        }
    }
}

pub fn report(run: &Run) -> CliResult<RunManifest> {
    let mut log = StageLog::start(run, "report")?;
    let mut missing = Vec::new();
    let images = load_images(&log.input(IMAGES, "synth")?)?;
    let ids: Vec<usize> = match log.optional(RECON_IDS, "reconstruct", &mut missing) {
        Some(p) => read_json(&p)?,
        None => read_json::<Split>(&log.input(SPLIT, "glm")?)?.test,
    };
    let mut load_stage = |rel: &str| -> CliResult<Option<Vec<Tensor>>> {
        Ok(match log.optional(rel, "reconstruct", &mut missing) {
            Some(p) => Some(load_images(&p)?),
            None => None,
        })
    };
    let guess = load_stage(GUESS)?;
    let refined = load_stage(REFINED)?;

    let mut stages = Vec::new();
    let mut csv = String::new();
    for (name, rel) in [("stage1", GUESS_METRICS), ("stage2", REFINED_METRICS)] {
        let Some(p) = log.optional(&format!("{rel}.json"), "reconstruct", &mut missing) else { continue };
        let r: MetricReport = read_json(&p)?;
        let r = MetricReport::from_samples(r.extractors, r.samples);
        if csv.is_empty() {
            writeln!(csv, "stage,samples,{}", r.csv_header()).unwrap();
        }
        writeln!(csv, "{name},{},{}", r.samples.len(), MetricReport::csv_values(&r.mean)).unwrap();
        stages.push(StageSummary { stage: name.to_string(), samples: r.samples.len(), extractors: r.extractors, mean: r.mean });
    }
    let read_text = |log: &mut StageLog, rel: &str, producer: &'static str, missing: &mut Vec<String>| -> CliResult<Option<String>> {
        Ok(match log.optional(rel, producer, missing) {
            Some(p) => Some(std::fs::read_to_string(p).map_err(Error::from)?),
            None => None,
        })
    };
    let stage1_comparison = read_text(&mut log, STAGE1_COMPARISON, "train-stage1", &mut missing)?;
    let noise_sweep = read_text(&mut log, &format!("{NOISE_SWEEP}.csv"), "noise-sweep", &mut missing)?;

    let mut montages = Vec::with_capacity(ids.len());
    for (k, &id) in ids.iter().enumerate() {
        let truth = images.get(id).ok_or_else(|| Error::Format(format!("test id {id} is outside the {} stimuli", images.len())))?;
        let (_, h, w) = neurodecode_core::image::dims(truth)?;
        let grid = montage(&[Some(truth), guess.as_ref().and_then(|v| v.get(k)), refined.as_ref().and_then(|v| v.get(k))], h, w)?;
        let rel = format!("montage/sample_{id:04}.ppm");
        log.write(&rel, encode_ppm(&grid)?)?;
        montages.push(rel);
    }
    log.write(&format!("{SUMMARY}.csv"), csv)?;
    log.write_json(&format!("{SUMMARY}.json"), &Summary { stages, missing, stage1_comparison, noise_sweep, montages })?;
    log.finish()
}

/// Full-size dimensions checked without allocating the models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeContracts {
    pub stage1_input: usize,
    pub stage1_output: usize,
    pub stage1_params: usize,
    pub hvae_layers: usize,
    pub hvae_injected: usize,
    pub hvae_latent: usize,
    pub vision_rows: [usize; 2],
    pub text_rows: [usize; 2],
    pub ridge_vision_outputs: usize,
    pub ridge_text_outputs: usize,
}

pub fn shape_contracts(run: &Run) -> ShapeContracts {
    let cfg = &run.cfg;
    let enc: &DualEncoderConfig = &cfg.embed.encoder;
    ShapeContracts {
        stage1_input: cfg.stage1.model.input_len,
        stage1_output: cfg.stage1.model.output_len,
        stage1_params: param_count(&cfg.stage1.model, Stage1Kind::Gru),
        hvae_layers: cfg.hvae.layer_count(),
        hvae_injected: cfg.hvae.injected_len(),
        hvae_latent: cfg.hvae.latent_len(),
        vision_rows: [enc.rows_v(), enc.d],
        text_rows: [enc.rows_t, enc.d],
        ridge_vision_outputs: enc.rows_v() * enc.d,
        ridge_text_outputs: enc.rows_t * enc.d,
    }
}

pub fn shapes(run: &Run) -> CliResult<RunManifest> {
    let mut log = StageLog::start(run, "shapes")?;
    log.write_json("reports/shapes.json", &shape_contracts(run))?;
    log.finish()
}
