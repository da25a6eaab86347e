//! Minibatching, row gathering and checkpoint files shared by the trainers.

use std::fs;
use std::path::{Path, PathBuf};

use neurodecode_core::io::{load_archive, save_archive};
use neurodecode_core::{Error, ParamStore, Result, Rng, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Shuffled minibatches of `0..n`. With `drop_singleton` a trailing batch of
/// one sample is dropped (batch statistics are undefined for it).
pub fn batches(n: usize, batch: usize, rng: &mut Rng, drop_singleton: bool) -> Vec<Vec<usize>> {
    let order = rng.permutation(n);
    let mut out: Vec<Vec<usize>> = order.chunks(batch.max(1)).map(|c| c.to_vec()).collect();
    if drop_singleton && out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
    }
    out
}

/// Sub-tensors along axis 0 selected by `idx`.
pub fn gather(x: &Tensor, idx: &[usize]) -> Tensor {
    let inner: usize = x.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * inner);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("consistent shape")
}

/// Stacks equally shaped samples into a batch.
pub fn stack_refs(items: &[&Tensor]) -> Result<Tensor> {
    Tensor::stack(&items.iter().map(|t| (*t).clone()).collect::<Vec<_>>())
}

pub fn ensure_finite(loss: f64, epoch: usize, batch: usize, lr: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss became {loss} at epoch {epoch}, batch {batch} (lr {lr})")))
    }
}

fn paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("ndta"), path.with_extension("json"))
}

/// Writes `<path>.ndta` with the parameters and `<path>.json` with the config.
pub fn save_checkpoint<C: Serialize>(path: impl AsRef<Path>, config: &C, store: &ParamStore) -> Result<()> {
    let (tensors, json) = paths(path.as_ref());
    save_archive(&tensors, &store.named())?;
    let text = serde_json::to_string_pretty(config).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(json, text)?;
    Ok(())
}

pub fn load_config<C: DeserializeOwned>(path: impl AsRef<Path>) -> Result<C> {
    let (_, json) = paths(path.as_ref());
    let text = fs::read_to_string(&json).map_err(|e| Error::Format(format!("{}: {e}", json.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", json.display())))
}

pub fn load_params(path: impl AsRef<Path>, store: &mut ParamStore) -> Result<()> {
    let (tensors, _) = paths(path.as_ref());
    store.load_named(&load_archive(tensors)?)
}
