//! Broadcasting binary arithmetic and pointwise activations.

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

/// Numpy-style broadcast of two shapes (trailing axes aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")));
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on
/// broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// `small` repeats contiguously inside `big` (after dropping leading 1s).
fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    let trimmed: &[usize] = {
        let skip = small.iter().take_while(|&&d| d == 1).count();
        &small[skip..]
    };
    trimmed.len() <= big.len() && big[big.len() - trimmed.len()..] == *trimmed
}

fn general_binary(a: &Tensor, b: &Tensor, out_shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let rank = out_shape.len();
    let total: usize = out_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(f(a.data()[oa], b.data()[ob]));
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let data = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if a.shape() == out_shape.as_slice() && is_suffix(b.shape(), &out_shape) {
        let bd = b.data();
        let n = bd.len();
        a.data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect()
    } else if b.shape() == out_shape.as_slice() && is_suffix(a.shape(), &out_shape) {
        let ad = a.data();
        let n = ad.len();
        b.data()
            .chunks_exact(n)
            .flat_map(|row| ad.iter().zip(row).map(|(&x, &y)| f(x, y)))
            .collect()
    } else {
        general_binary(a, b, &out_shape, f)
    };
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sums `grad` over the axes along which `shape` was broadcast.
pub fn reduce_to(grad: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    let out = broadcast_shape(shape, grad.shape())?;
    if out != grad.shape() {
        return Err(Error::dim(format!(
            "cannot reduce {:?} to {shape:?}",
            grad.shape()
        )));
    }
    let n: usize = shape.iter().product();
    let mut acc = vec![0.0; n];
    if is_suffix(shape, grad.shape()) {
        for row in grad.data().chunks_exact(n) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    } else {
        let st = broadcast_strides(shape, grad.shape());
        let rank = out.len();
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for &v in grad.data() {
            acc[off] += v;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += st[ax];
                if idx[ax] < out[ax] {
                    break;
                }
                off -= st[ax] * out[ax];
                idx[ax] = 0;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), acc))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
