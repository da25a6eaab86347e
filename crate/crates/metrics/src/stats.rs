use neurodecode_core::{Error, Result, Tensor};

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dim(format!("{what}: lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target, "mse")?;
    let n = pred.len().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target, "mae")?;
    let n = pred.len().max(1) as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Centered copies and their norms.
fn centered(x: &[f64]) -> (Vec<f64>, f64) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    (c, n)
}

/// A centered norm at rounding level relative to the data counts as zero.
fn is_flat(x: &[f64], centered_norm: f64) -> bool {
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    centered_norm <= 1e-13 * scale * (x.len() as f64).sqrt()
}

/// Cosine of the mean-centered vectors; errors when either side is constant.
fn centered_cosine(x: &[f64], y: &[f64], what: &str) -> Result<f64> {
    same_len(x, y, what)?;
    if x.is_empty() {
        return Err(Error::Dim(format!("{what}: empty input")));
    }
    let (cx, nx) = centered(x);
    let (cy, ny) = centered(y);
    if is_flat(x, nx) || is_flat(y, ny) {
        return Err(Error::Numeric(format!("{what}: undefined for a constant input")));
    }
    let dot: f64 = cx.iter().zip(&cy).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Pearson correlation of two vectors.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    centered_cosine(x, y, "pearson correlation")
}

/// Pearson correlation over all flattened pixels.
pub fn pixcorr(x: &Tensor, y: &Tensor) -> Result<f64> {
    same_shape(x, y, "pixcorr")?;
    centered_cosine(x.data(), y.data(), "pixcorr")
}

/// Spatial distance correlation: one minus the cosine of the mean-centered
/// vectors. Lies in `[0, 2]`, lower is more similar.
pub fn sdc(x: &[f64], y: &[f64]) -> Result<f64> {
    Ok(1.0 - centered_cosine(x, y, "sdc")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifted_target_gives_unit_errors() {
        let t = Tensor::from_vec(vec![0.1, 0.5, -2.0]);
        let p = t.map(|v| v + 1.0);
        assert!((mse(&p, &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((mae(&p, &t).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn sdc_identities() {
        let x = [1.0, 4.0, -2.0, 0.5];
        let shifted: Vec<f64> = x.iter().map(|v| v + 7.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(sdc(&x, &x).unwrap().abs() < 1e-15);
        assert!(sdc(&x, &shifted).unwrap().abs() < 1e-15);
        assert!((sdc(&x, &neg).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_is_an_error() {
        assert!(matches!(pearson(&[1.0, 1.0], &[0.0, 1.0]), Err(Error::Numeric(_))));
        assert!(matches!(pearson(&[1.0], &[0.0, 1.0]), Err(Error::Dim(_))));
    }
}
