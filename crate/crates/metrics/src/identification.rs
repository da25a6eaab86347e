//! Two-way identification over pluggable image feature extractors.

use neurodecode_core::{Error, Result, Rng, Tensor};

use crate::stats::pearson;

/// Maps an image to a fixed-length feature vector.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    /// Which internal layer the features come from.
    fn tap(&self) -> &str {
        "output"
    }
    fn features(&self, image: &Tensor) -> Result<Vec<f64>>;
}

/// Fixed Gaussian projection of the raw pixels; the null baseline extractor.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    name: String,
    input_len: usize,
    /// `[out, input_len]`, row-major.
    matrix: Vec<f64>,
    out: usize,
}

impl RandomProjection {
    pub fn new(input_len: usize, out: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let scale = 1.0 / (input_len as f64).sqrt();
        let matrix = (0..out * input_len).map(|_| scale * rng.normal()).collect();
        Self { name: "random".into(), input_len, matrix, out }
    }
}

impl FeatureExtractor for RandomProjection {
    fn name(&self) -> &str {
        &self.name
    }

    fn tap(&self) -> &str {
        "pixels"
    }

    fn features(&self, image: &Tensor) -> Result<Vec<f64>> {
        if image.len() != self.input_len {
            return Err(Error::Dim(format!("random projection expects {} values, got {}", self.input_len, image.len())));
        }
        let x = image.data();
        Ok((0..self.out).map(|r| self.matrix[r * self.input_len..(r + 1) * self.input_len].iter().zip(x).map(|(a, b)| a * b).sum()).collect())
    }
}

fn corr(a: &[f64], b: &[f64], who: &str) -> Result<f64> {
    pearson(a, b).map_err(|e| match e {
        Error::Numeric(_) => Error::Numeric(format!("two-way identification: constant features from extractor {who:?}")),
        other => other,
    })
}

/// Per-sample two-way scores from a similarity matrix with
/// `sim[i][j] = similarity(pred_i, truth_j)`. Entry `i` is the success
/// fraction of prediction `i` against every distractor `j ≠ i`; a trial
/// succeeds when `sim[i][i] > sim[i][j]` and ties count one half.
pub fn two_way_from_similarity(sim: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = sim.len();
    if n < 2 {
        return Err(Error::Config("two-way identification needs at least 2 samples".into()));
    }
    if let Some(r) = sim.iter().position(|row| row.len() != n) {
        return Err(Error::Dim(format!("similarity row {r} has {} entries, expected {n}", sim[r].len())));
    }
    Ok((0..n)
        .map(|i| {
            let own = sim[i][i];
            let wins: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| match own.partial_cmp(&sim[i][j]) {
                    Some(std::cmp::Ordering::Greater) => 1.0,
                    Some(std::cmp::Ordering::Equal) => 0.5,
                    _ => 0.0,
                })
                .sum();
            wins / (n - 1) as f64
        })
        .collect())
}

/// Per-sample two-way scores from precomputed features, using Pearson
/// correlation as the similarity.
pub fn two_way_scores(preds: &[Vec<f64>], truths: &[Vec<f64>], who: &str) -> Result<Vec<f64>> {
    let n = preds.len();
    if truths.len() != n {
        return Err(Error::Dim(format!("two-way identification: {n} predictions vs {} truths", truths.len())));
    }
    if n < 2 {
        return Err(Error::Config("two-way identification needs at least 2 samples".into()));
    }
    let sim = preds
        .iter()
        .map(|p| truths.iter().map(|t| corr(p, t, who)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    two_way_from_similarity(&sim)
}

/// Fraction of successful trials over all ordered pairs `(i, j)`, `i ≠ j`.
pub fn two_way_identification(preds: &[Tensor], truths: &[Tensor], fx: &dyn FeatureExtractor) -> Result<f64> {
    let fp = preds.iter().map(|p| fx.features(p)).collect::<Result<Vec<_>>>()?;
    let ft = truths.iter().map(|t| fx.features(t)).collect::<Result<Vec<_>>>()?;
    let s = two_way_scores(&fp, &ft, fx.name())?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}
