//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Lower bound on the denominator of the relative error, so entries whose
    /// true gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { h: 1e-5, tol: 1e-5, floor: 1e-6, max_entries: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn entries(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
        _ => (0..len).collect(),
    }
}

fn finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("objective evaluated to {v}")))
    }
}

fn compare(
    names: &[String],
    params: &[Tensor],
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
    mut eval: impl FnMut(usize, &Tensor) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut reports = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut worst = ParamCheck { name: names[pi].clone(), max_rel_err: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for k in entries(p.len(), cfg.max_entries) {
            let mut d = p.to_vec();
            d[k] += cfg.h;
            let fp = finite(eval(pi, &Tensor::new(p.shape(), d.clone())?)?)?;
            d[k] -= 2.0 * cfg.h;
            let fm = finite(eval(pi, &Tensor::new(p.shape(), d)?)?)?;
            let num = (fp - fm) / (2.0 * cfg.h);
            let an = analytic[pi].data()[k];
            let e = rel_err(an, num, cfg.floor);
            if e > worst.max_rel_err || k == 0 {
                worst = ParamCheck { name: names[pi].clone(), max_rel_err: e.max(worst.max_rel_err), worst_index: k, analytic: an, numeric: num };
            }
        }
        reports.push(worst);
    }
    let max = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { params: reports, max_rel_err: max, passed: max <= cfg.tol })
}

/// Checks the tape gradient of a scalar function of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if cfg.h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", cfg.h)));
    }
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    finite(out.item())?;
    let grads = out.backward()?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let names: Vec<String> = (0..params.len()).map(|i| format!("param{i}")).collect();
    compare(&names, params, &analytic, &cfg, |pi, t| {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = params
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf(if i == pi { t.clone() } else { p.clone() }, false))
            .collect();
        Ok(f(&tape, &vars)?.item())
    })
}

/// Checks every trainable entry of a model's parameter store. The objective
/// sees a training-mode context seeded identically on every evaluation, so
/// dropout masks are frozen across the finite-difference probes.
pub fn grad_check_store<F>(store: &ParamStore, seed: u64, cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Ctx<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, store, true, Rng::new(seed));
    let out = f(&mut ctx)?;
    finite(out.item())?;
    let grads = out.backward()?;
    let all = ctx.grads(&grads, store);
    let ids = store.trainable_ids();
    let names: Vec<String> = ids.iter().map(|id| store.entries()[id.index()].name.clone()).collect();
    let params: Vec<Tensor> = ids.iter().map(|id| store.get(*id).clone()).collect();
    let analytic: Vec<Tensor> = ids
        .iter()
        .map(|id| all[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.get(*id).shape())))
        .collect();
    compare(&names, &params, &analytic, &cfg, |pi, t| {
        let mut s = store.clone();
        s.set(ids[pi], t.clone())?;
        let tape = Tape::no_grad();
        let mut ctx = Ctx::new(&tape, &s, true, Rng::new(seed));
        Ok(f(&mut ctx)?.item())
    })
}
