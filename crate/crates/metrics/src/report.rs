//! Per-sample and aggregate metric tables.

use std::fmt::Write as _;

use neurodecode_core::{Error, Result, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::identification::{two_way_scores, FeatureExtractor};
use crate::ssim::{ssim, SsimConfig};
use crate::stats::{mae, mse, pixcorr, sdc};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub pixcorr: f64,
    /// One entry per extractor, in report order.
    pub two_way: Vec<f64>,
    pub sdc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub extractors: Vec<String>,
    pub samples: Vec<SampleMetrics>,
    pub mean: SampleMetrics,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

impl MetricReport {
    pub fn from_samples(extractors: Vec<String>, samples: Vec<SampleMetrics>) -> Self {
        let k = extractors.len();
        let mean = SampleMetrics {
            mse: mean_of(samples.iter().map(|s| s.mse)),
            mae: mean_of(samples.iter().map(|s| s.mae)),
            ssim: mean_of(samples.iter().map(|s| s.ssim)),
            pixcorr: mean_of(samples.iter().map(|s| s.pixcorr)),
            two_way: (0..k).map(|e| mean_of(samples.iter().map(|s| s.two_way[e]))).collect(),
            sdc: (0..k).map(|e| mean_of(samples.iter().map(|s| s.sdc[e]))).collect(),
        };
        Self { extractors, samples, mean }
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("mse,mae,ssim,pixcorr");
        for e in &self.extractors {
            write!(h, ",twoway_{e}").unwrap();
        }
        for e in &self.extractors {
            write!(h, ",sdc_{e}").unwrap();
        }
        h
    }

    pub fn csv_values(m: &SampleMetrics) -> String {
        let mut s = format!("{},{},{},{}", m.mse, m.mae, m.ssim, m.pixcorr);
        for v in m.two_way.iter().chain(&m.sdc) {
            write!(s, ",{v}").unwrap();
        }
        s
    }

    /// One row per sample followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("sample,{}\n", self.csv_header());
        for (i, s) in self.samples.iter().enumerate() {
            writeln!(out, "{i},{}", Self::csv_values(s)).unwrap();
        }
        writeln!(out, "mean,{}", Self::csv_values(&self.mean)).unwrap();
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Mean two-way score for the named extractor.
    pub fn two_way(&self, extractor: &str) -> Option<f64> {
        self.extractors.iter().position(|e| e == extractor).map(|i| self.mean.two_way[i])
    }
}

/// Computes the full metric suite for paired predictions and ground truths.
pub fn evaluate(preds: &[Tensor], truths: &[Tensor], extractors: &[&dyn FeatureExtractor], cfg: &SsimConfig) -> Result<MetricReport> {
    if preds.len() != truths.len() {
        return Err(Error::Dim(format!("{} predictions vs {} truths", preds.len(), truths.len())));
    }
    let low: Vec<(f64, f64, f64, f64)> = preds
        .par_iter()
        .zip(truths.par_iter())
        .map(|(p, t)| Ok((mse(p, t)?, mae(p, t)?, ssim(p, t, cfg)?, pixcorr(p, t)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut two_way = Vec::new();
    let mut sdcs = Vec::new();
    for fx in extractors {
        let fp = preds.iter().map(|p| fx.features(p)).collect::<Result<Vec<_>>>()?;
        let ft = truths.iter().map(|t| fx.features(t)).collect::<Result<Vec<_>>>()?;
        two_way.push(two_way_scores(&fp, &ft, fx.name())?);
        sdcs.push(fp.iter().zip(&ft).map(|(a, b)| sdc(a, b)).collect::<Result<Vec<_>>>()?);
    }
    let samples = low
        .into_iter()
        .enumerate()
        .map(|(i, (mse, mae, ssim, pixcorr))| SampleMetrics {
            mse,
            mae,
            ssim,
            pixcorr,
            two_way: two_way.iter().map(|t| t[i]).collect(),
            sdc: sdcs.iter().map(|s| s[i]).collect(),
        })
        .collect();
    Ok(MetricReport::from_samples(extractors.iter().map(|e| e.name().to_string()).collect(), samples))
}
