//! Data movement: axis permutation, per-axis index gathers (roll, narrow,
//! flip), and concatenation.

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

/// Walks every multi-index of `shape[..shape.len() - inner_axes]` in row-major
/// order and calls `f(outer_linear_index, multi_index)`.
fn for_each_outer(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let total: usize = shape.iter().product();
    if rank == 0 {
        f(0, &idx);
        return;
    }
    for lin in 0..total {
        f(lin, &idx);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub fn permute(input: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = input.ndim();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim(format!(
            "invalid permutation {perm:?} for rank {rank}"
        )));
    }
    let in_strides = input.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| input.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let src = input.data();
    let mut out = Vec::with_capacity(input.numel());
    if rank == 0 {
        out.push(src[0]);
        return Ok(Tensor::from_parts(out_shape, out));
    }
    let last = rank - 1;
    let (inner_n, inner_s) = (out_shape[last], src_strides[last]);
    for_each_outer(&out_shape[..last], |_, idx| {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        if inner_s == 1 {
            out.extend_from_slice(&src[base..base + inner_n]);
        } else {
            out.extend((0..inner_n).map(|j| src[base + j * inner_s]));
        }
    });
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Per-axis index maps: output element `[i0, i1, ..]` reads input element
/// `[maps[0][i0], maps[1][i1], ..]`. Output extents are the map lengths.
pub type AxisMaps = Vec<Vec<usize>>;

fn check_maps(in_shape: &[usize], maps: &[Vec<usize>]) -> Result<()> {
    if maps.len() != in_shape.len() {
        return Err(Error::dim(format!(
            "{} axis maps for rank-{} tensor",
            maps.len(),
            in_shape.len()
        )));
    }
    for (ax, (map, &n)) in maps.iter().zip(in_shape).enumerate() {
        if map.is_empty() || map.iter().any(|&i| i >= n) {
            return Err(Error::dim(format!("axis {ax} map out of range for extent {n}")));
        }
    }
    Ok(())
}

/// Number of trailing axes whose maps are the identity; those axes form a
/// contiguous block that can be copied wholesale.
fn identity_suffix(in_shape: &[usize], maps: &[Vec<usize>]) -> usize {
    let mut count = 0;
    for (map, &n) in maps.iter().zip(in_shape).rev() {
        if map.len() == n && map.iter().enumerate().all(|(i, &m)| i == m) {
            count += 1;
        } else {
            break;
        }
    }
    count
}

pub fn gather_axes(input: &Tensor, maps: &[Vec<usize>]) -> Result<Tensor> {
    check_maps(input.shape(), maps)?;
    let rank = input.ndim();
    let out_shape: Vec<usize> = maps.iter().map(Vec::len).collect();
    let strides = input.strides();
    let keep = identity_suffix(input.shape(), maps).min(rank);
    let block: usize = input.shape()[rank - keep..].iter().product();
    let outer = &out_shape[..rank - keep];
    let src = input.data();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for_each_outer(outer, |_, idx| {
        let base: usize = idx
            .iter()
            .enumerate()
            .map(|(ax, &i)| maps[ax][i] * strides[ax])
            .sum();
        out.extend_from_slice(&src[base..base + block]);
    });
    Ok(Tensor::from_parts(out_shape, out))
}

/// Adjoint of [`gather_axes`]: accumulates `grad` back into a tensor of
/// shape `in_shape`.
pub fn scatter_axes(grad: &Tensor, maps: &[Vec<usize>], in_shape: &[usize]) -> Result<Tensor> {
    check_maps(in_shape, maps)?;
    let out_shape: Vec<usize> = maps.iter().map(Vec::len).collect();
    grad.expect_shape(&out_shape)?;
    let rank = in_shape.len();
    let strides = strides_of(in_shape);
    let keep = identity_suffix(in_shape, maps).min(rank);
    let block: usize = in_shape[rank - keep..].iter().product();
    let mut acc = vec![0.0; in_shape.iter().product()];
    let g = grad.data();
    for_each_outer(&out_shape[..rank - keep], |lin, idx| {
        let base: usize = idx
            .iter()
            .enumerate()
            .map(|(ax, &i)| maps[ax][i] * strides[ax])
            .sum();
        for (a, &v) in acc[base..base + block].iter_mut().zip(&g[lin * block..(lin + 1) * block]) {
            *a += v;
        }
    });
    Ok(Tensor::from_parts(in_shape.to_vec(), acc))
}

/// Index maps for a cyclic shift: `out[.., i, ..] = in[.., (i + shift) mod n, ..]`
/// along each axis, with `shifts[ax] == 0` meaning untouched.
pub fn roll_maps(shape: &[usize], shifts: &[isize]) -> AxisMaps {
    shape
        .iter()
        .zip(shifts)
        .map(|(&n, &s)| {
            let s = s.rem_euclid(n as isize) as usize;
            (0..n).map(|i| (i + s) % n).collect()
        })
        .collect()
}

pub fn narrow_maps(shape: &[usize], axis: usize, start: usize, len: usize) -> Result<AxisMaps> {
    if axis >= shape.len() || len == 0 || start + len > shape[axis] {
        return Err(Error::dim(format!(
            "narrow({axis}, {start}, {len}) out of range for {shape:?}"
        )));
    }
    Ok(shape
        .iter()
        .enumerate()
        .map(|(ax, &n)| {
            if ax == axis {
                (start..start + len).collect()
            } else {
                (0..n).collect()
            }
        })
        .collect())
}

pub fn flip_maps(shape: &[usize], axis: usize) -> AxisMaps {
    shape
        .iter()
        .enumerate()
        .map(|(ax, &n)| {
            if ax == axis {
                (0..n).rev().collect()
            } else {
                (0..n).collect()
            }
        })
        .collect()
}

pub fn concat(inputs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::dim("concat of zero tensors"))?;
    let rank = first.ndim();
    if axis >= rank {
        return Err(Error::dim(format!("concat axis {axis} for rank {rank}")));
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = 0;
    for t in inputs {
        let s = t.shape();
        if s.len() != rank || (0..rank).any(|ax| ax != axis && s[ax] != first.shape()[ax]) {
            return Err(Error::dim(format!(
                "concat along {axis}: {:?} vs {:?}",
                first.shape(),
                s
            )));
        }
        out_shape[axis] += s[axis];
    }
    let outer: usize = out_shape[..axis].iter().product();
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let chunk: usize = t.shape()[axis..].iter().product();
            out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Splits `grad` along `axis` into pieces of the given extents (adjoint of
/// [`concat`]).
pub fn split(grad: &Tensor, axis: usize, extents: &[usize]) -> Result<Vec<Tensor>> {
    let shape = grad.shape();
    if axis >= shape.len() || extents.iter().sum::<usize>() != shape[axis] {
        return Err(Error::dim(format!("split {extents:?} along {axis} of {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let row = shape[axis] * inner;
    let mut offset = 0;
    let mut parts = Vec::with_capacity(extents.len());
    for &e in extents {
        let chunk = e * inner;
        let mut data = Vec::with_capacity(outer * chunk);
        for o in 0..outer {
            let start = o * row + offset;
            data.extend_from_slice(&grad.data()[start..start + chunk]);
        }
        let mut s = shape.to_vec();
        s[axis] = e;
        parts.push(Tensor::from_parts(s, data));
        offset += chunk;
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let t = Tensor::from_fn([2, 3, 4], |i| i as f64);
        let p = permute(&t, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.data()[c * 6 + a * 3 + b], t.data()[a * 12 + b * 4 + c]);
                }
            }
        }
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert!(back.bitwise_eq(&t));
        assert!(permute(&t, &[0, 0, 1]).is_err());
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let t = Tensor::from_fn([3, 4, 2], |i| (i as f64).cos());
        let maps = roll_maps(t.shape(), &[1, -1, 0]);
        let g = gather_axes(&t, &maps).unwrap();
        let w = Tensor::from_fn([3, 4, 2], |i| (i as f64 * 0.3).sin());
        // <gather(t), w> == <t, scatter(w)>
        let lhs: f64 = g.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        let s = scatter_axes(&w, &maps, t.shape()).unwrap();
        let rhs: f64 = t.data().iter().zip(s.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn narrow_and_concat_round_trip() {
        let t = Tensor::from_fn([2, 5, 3], |i| i as f64);
        let a = gather_axes(&t, &narrow_maps(t.shape(), 1, 0, 2).unwrap()).unwrap();
        let b = gather_axes(&t, &narrow_maps(t.shape(), 1, 2, 3).unwrap()).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert!(c.bitwise_eq(&t));
        let parts = split(&t, 1, &[2, 3]).unwrap();
        assert!(parts[0].bitwise_eq(&a) && parts[1].bitwise_eq(&b));
        assert!(narrow_maps(t.shape(), 1, 4, 2).is_err());
    }
}
