//! Synthetic nonlinear regression task for comparing stage-1 regressors.
//!
//! Hidden sources `s ~ N(0, I_k)` drive the inputs linearly with additive
//! noise, `x = A s + σ ε`, while each target mixes a linear and a
//! multiplicative term, `y_j = a (b_j·s) + c (u_j·s)(v_j·s)`. A linear map
//! from `x` can only capture the first term.

use neurodecode_core::{Error, Result, Rng, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub input_len: usize,
    pub sources: usize,
    pub output_len: usize,
    pub input_noise: f64,
    /// Weight of the linear target term.
    pub linear: f64,
    /// Weight of the multiplicative target term.
    pub product: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self { n_train: 1200, n_val: 200, n_test: 300, input_len: 64, sources: 6, output_len: 32, input_noise: 0.3, linear: 0.5, product: 0.7 }
    }
}

#[derive(Clone, Debug)]
pub struct Split {
    pub x: Tensor,
    pub y: Tensor,
}

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

fn unit(k: usize, rng: &mut Rng) -> Vec<f64> {
    let v = rng.normal_vec(k);
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn generate(cfg: &BenchmarkConfig, seed: u64) -> Result<Benchmark> {
    if cfg.sources == 0 || cfg.input_len == 0 || cfg.output_len == 0 || cfg.n_train < 2 || cfg.n_val == 0 || cfg.n_test == 0 {
        return Err(Error::Config("benchmark sizes must be positive".into()));
    }
    let mut rng = Rng::new(seed);
    let k = cfg.sources;
    let a: Vec<Vec<f64>> = (0..cfg.input_len).map(|_| rng.normal_vec(k)).collect();
    let b: Vec<Vec<f64>> = (0..cfg.output_len).map(|_| unit(k, &mut rng)).collect();
    let u: Vec<Vec<f64>> = (0..cfg.output_len).map(|_| unit(k, &mut rng)).collect();
    let v: Vec<Vec<f64>> = (0..cfg.output_len).map(|_| unit(k, &mut rng)).collect();
    let mut split = |n: usize| {
        let mut x = Vec::with_capacity(n * cfg.input_len);
        let mut y = Vec::with_capacity(n * cfg.output_len);
        for _ in 0..n {
            let s = rng.normal_vec(k);
            for row in &a {
                x.push(dot(row, &s) + cfg.input_noise * rng.normal());
            }
            for j in 0..cfg.output_len {
                y.push(cfg.linear * dot(&b[j], &s) + cfg.product * dot(&u[j], &s) * dot(&v[j], &s));
            }
        }
        Split {
            x: Tensor::new(&[n, cfg.input_len], x).expect("consistent shape"),
            y: Tensor::new(&[n, cfg.output_len], y).expect("consistent shape"),
        }
    };
    let train = split(cfg.n_train);
    let val = split(cfg.n_val);
    let test = split(cfg.n_test);
    Ok(Benchmark { train, val, test })
}
