//! Elementwise, broadcasting, reduction and shape ops on `Var`.

use crate::error::{Error, Result};
use crate::tape::{BackwardFn, Var};
use crate::tensor::Tensor;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// (outer, axis_len, inner) split of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'t> Var<'t> {
    fn unary(self, out: Tensor, bw: impl Fn(&Tensor) -> Tensor + 'static) -> Var<'t> {
        let f: BackwardFn = Box::new(move |g| vec![Some(bw(g))]);
        self.tape.push(out, &[self], f)
    }

    /// Elementwise map with derivative expressed through input and output.
    fn pointwise(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let (xs, ys) = (x.clone(), y.clone());
        self.unary(y, move |g| {
            let d: Vec<f64> = g
                .data()
                .iter()
                .zip(xs.data().iter().zip(ys.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            Tensor::from_parts(g.shape().to_vec(), d)
        })
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.add(&b)?;
        Ok(self.tape.push(out, &[self, other], Box::new(|g| vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.sub(&b)?;
        Ok(self.tape.push(out, &[self, other], Box::new(|g| vec![Some(g.clone()), Some(g.scale(-1.0))])))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g| {
                vec![
                    Some(g.zip_map(&b, |g, y| g * y).unwrap()),
                    Some(g.zip_map(&a, |g, x| g * x).unwrap()),
                ]
            }),
        ))
    }

    /// Elementwise quotient; a zero anywhere in the divisor is a numeric error.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        same_shape("div", &a, &b)?;
        if b.data().contains(&0.0) {
            return Err(Error::Numeric("division by zero".into()));
        }
        let out = a.zip_map(&b, |x, y| x / y)?;
        Ok(self.tape.push(
            out,
            &[self, other],
            Box::new(move |g| {
                let ga = g.zip_map(&b, |g, y| g / y).unwrap();
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(a.data().iter().zip(b.data()))
                    .map(|(&g, (&x, &y))| -g * x / (y * y))
                    .collect();
                vec![Some(ga), Some(Tensor::from_parts(b.shape().to_vec(), gb))]
            }),
        ))
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over all leading axes.
    pub fn add_row(self, b: Var<'t>) -> Result<Var<'t>> {
        let (x, bv) = (self.value(), b.value());
        let n = *x.shape().last().unwrap_or(&0);
        if bv.shape() != [n] {
            return Err(Error::Dim(format!("add_row: {:?} + {:?}", x.shape(), bv.shape())));
        }
        let mut out = x.to_vec();
        for row in out.chunks_mut(n) {
            for (o, &v) in row.iter_mut().zip(bv.data()) {
                *o += v;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape.push(
            out,
            &[self, b],
            Box::new(move |g| {
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (a, &v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_vec(gb))]
            }),
        ))
    }

    /// `x[..., n] * b[n]`, broadcasting `b` over all leading axes.
    pub fn mul_row(self, b: Var<'t>) -> Result<Var<'t>> {
        let (x, bv) = (self.value(), b.value());
        let n = *x.shape().last().unwrap_or(&0);
        if bv.shape() != [n] {
            return Err(Error::Dim(format!("mul_row: {:?} * {:?}", x.shape(), bv.shape())));
        }
        let out: Vec<f64> = x
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv.data()).map(|(a, b)| a * b).collect::<Vec<_>>())
            .collect();
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape.push(
            out,
            &[self, b],
            Box::new(move |g| {
                let mut gb = vec![0.0; n];
                let mut gx = vec![0.0; x.len()];
                for (r, (grow, xrow)) in g.data().chunks(n).zip(x.data().chunks(n)).enumerate() {
                    for j in 0..n {
                        gb[j] += grow[j] * xrow[j];
                        gx[r * n + j] = grow[j] * bv.data()[j];
                    }
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gx)), Some(Tensor::from_vec(gb))]
            }),
        ))
    }

    /// Per-sample, per-channel affine map of `x[N, C, ...]`:
    /// `y = x · scale[N, C] + shift[N, C]`.
    pub fn channel_affine(self, scale: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
        let (x, s, b) = (self.value(), scale.value(), shift.value());
        if x.rank() < 2 || s.shape() != &x.shape()[..2] || b.shape() != &x.shape()[..2] {
            return Err(Error::Dim(format!(
                "channel_affine: x {:?}, scale {:?}, shift {:?}",
                x.shape(),
                s.shape(),
                b.shape()
            )));
        }
        let nc = s.len();
        let inner = x.len() / nc.max(1);
        let mut out = vec![0.0; x.len()];
        for k in 0..nc {
            let (sv, bv) = (s.data()[k], b.data()[k]);
            for i in 0..inner {
                out[k * inner + i] = x.data()[k * inner + i] * sv + bv;
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape.push(
            out,
            &[self, scale, shift],
            Box::new(move |g| {
                let mut gx = vec![0.0; x.len()];
                let mut gs = vec![0.0; nc];
                let mut gb = vec![0.0; nc];
                for k in 0..nc {
                    let sv = s.data()[k];
                    for i in 0..inner {
                        let gi = g.data()[k * inner + i];
                        gx[k * inner + i] = gi * sv;
                        gs[k] += gi * x.data()[k * inner + i];
                        gb[k] += gi;
                    }
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    Some(Tensor::from_parts(s.shape().to_vec(), gs)),
                    Some(Tensor::from_parts(s.shape().to_vec(), gb)),
                ]
            }),
        ))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().scale(c);
        self.unary(out, move |g| g.scale(c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.unary(out, |g| g.clone())
    }

    pub fn relu(self) -> Var<'t> {
        self.pointwise(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.pointwise(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.pointwise(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn exp(self) -> Var<'t> {
        self.pointwise(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.pointwise(f64::ln, |x, _| 1.0 / x)
    }

    pub fn square(self) -> Var<'t> {
        self.pointwise(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.pointwise(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn softplus(self) -> Var<'t> {
        self.pointwise(
            |x| if x > 30.0 { x } else { x.exp().ln_1p() },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    /// Clamps into [lo, hi]; the gradient is zero where the clamp is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.pointwise(move |x| x.clamp(lo, hi), move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 })
    }

    /// `max(x, floor)` elementwise.
    pub fn max_scalar(self, floor: f64) -> Var<'t> {
        self.pointwise(move |x| x.max(floor), move |x, _| if x > floor { 1.0 } else { 0.0 })
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::Dim(format!("sum_axis({axis}) of {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let in_shape = x.shape().to_vec();
        Ok(self.unary(Tensor::from_parts(shape, out), move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for a in 0..len {
                    gx[(o * len + a) * inner..(o * len + a + 1) * inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            Tensor::from_parts(in_shape.clone(), gx)
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::Dim(format!("mean_axis({axis}) of {:?}", self.shape())))?;
        if len == 0 {
            return Err(Error::Dim("mean over empty axis".into()));
        }
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.unary(out, move |g| g.reshape(&in_shape).unwrap()))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let r = x.rank();
        if r < 2 {
            return Err(Error::Dim(format!("transpose of {:?}", x.shape())));
        }
        let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
        let batch = x.len() / (m * n).max(1);
        let swap = move |d: &[f64], m: usize, n: usize| -> Vec<f64> {
            let mut out = Vec::with_capacity(d.len());
            for b in 0..batch {
                out.extend(crate::kernels::transpose(&d[b * m * n..(b + 1) * m * n], m, n));
            }
            out
        };
        let mut shape = x.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let out = Tensor::from_parts(shape, swap(x.data(), m, n));
        let in_shape = x.shape().to_vec();
        Ok(self.unary(out, move |g| Tensor::from_parts(in_shape.clone(), swap(g.data(), n, m))))
    }

    /// Contiguous sub-range `[start, end)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() || start >= end || end > x.shape()[axis] {
            return Err(Error::Dim(format!("slice {start}..{end} on axis {axis} of {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let w = end - start;
        let mut out = Vec::with_capacity(outer * w * inner);
        for o in 0..outer {
            out.extend_from_slice(&x.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = w;
        let in_shape = x.shape().to_vec();
        Ok(self.unary(Tensor::from_parts(shape, out), move |g| {
            let mut gx = vec![0.0; outer * len * inner];
            for o in 0..outer {
                gx[(o * len + start) * inner..(o * len + end) * inner]
                    .copy_from_slice(&g.data()[o * w * inner..(o + 1) * w * inner]);
            }
            Tensor::from_parts(in_shape.clone(), gx)
        }))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::Dim("concat of zero tensors".into()))?;
        let vals: Vec<Tensor> = parts.iter().map(|p| p.value()).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Dim(format!("concat axis {axis} for {:?}", base)));
        }
        for v in &vals {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::Dim(format!("concat of {:?} and {:?} on axis {axis}", base, s)));
            }
        }
        let lens: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in vals.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let out = Tensor::from_parts(shape, out);
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape.push(
            out,
            parts,
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (k, &l) in lens.iter().enumerate() {
                        grads[k].extend_from_slice(&g.data()[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .map(|(d, s)| Some(Tensor::from_parts(s.clone(), d)))
                    .collect()
            }),
        ))
    }
}
