//! Batched matrix products on top of `matrixmultiply::dgemm`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = op(a) * op(b) + beta * c` for row-major buffers.
///
/// Logical shapes are `op(a): [m, k]` and `op(b): [k, n]`. With `ta` set, `a`
/// is stored as `[k, m]`; with `tb` set, `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the index ranges implied by the strides above,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` is a single 2-D matrix applied to every batch entry.
    shared_b: bool,
}

fn dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<(Dims, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim(format!("matmul needs matrices, got {a:?} x {b:?}")));
    }
    let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
    let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    if k != kb {
        return Err(Error::dim(format!(
            "matmul inner extents differ: {a:?} x {b:?} (ta={ta}, tb={tb})"
        )));
    }
    let lead = &a[..a.len() - 2];
    let shared_b = b.len() == 2;
    if !shared_b && &b[..b.len() - 2] != lead {
        return Err(Error::dim(format!("matmul batch extents differ: {a:?} x {b:?}")));
    }
    let mut out = lead.to_vec();
    out.extend([m, n]);
    Ok((
        Dims {
            batch: lead.iter().product(),
            m,
            k,
            n,
            shared_b,
        },
        out,
    ))
}

pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let (d, out_shape) = dims(a.shape(), b.shape(), ta, tb)?;
    let mut out = vec![0.0; d.batch * d.m * d.n];
    if d.shared_b && !ta {
        // Fold the batch into the row dimension: one large product.
        gemm(d.batch * d.m, d.k, d.n, a.data(), false, b.data(), tb, 0.0, &mut out);
    } else {
        let (sa, sb, sc) = (d.m * d.k, if d.shared_b { 0 } else { d.k * d.n }, d.m * d.n);
        for i in 0..d.batch {
            gemm(
                d.m,
                d.k,
                d.n,
                &a.data()[i * sa..],
                ta,
                &b.data()[i * sb..],
                tb,
                0.0,
                &mut out[i * sc..(i + 1) * sc],
            );
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Gradients of `matmul(a, b, ta, tb)` given the output gradient `g`.
pub fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (d, out_shape) = dims(a.shape(), b.shape(), ta, tb)?;
    g.expect_shape(&out_shape)?;
    let Dims { batch, m, k, n, .. } = d;

    let ga = need_a.then(|| {
        let mut ga = vec![0.0; a.numel()];
        if d.shared_b && !ta {
            gemm(batch * m, n, k, g.data(), false, b.data(), !tb, 0.0, &mut ga);
        } else {
            let sb = if d.shared_b { 0 } else { k * n };
            for i in 0..batch {
                let gi = &g.data()[i * m * n..];
                let bi = &b.data()[i * sb..];
                let dst = &mut ga[i * m * k..(i + 1) * m * k];
                if ta {
                    gemm(k, n, m, bi, tb, gi, true, 0.0, dst);
                } else {
                    gemm(m, n, k, gi, false, bi, !tb, 0.0, dst);
                }
            }
        }
        Tensor::from_parts(a.shape().to_vec(), ga)
    });

    let gb = need_b.then(|| {
        let mut gb = vec![0.0; b.numel()];
        if d.shared_b && !ta {
            if tb {
                gemm(n, batch * m, k, g.data(), true, a.data(), false, 0.0, &mut gb);
            } else {
                gemm(k, batch * m, n, a.data(), true, g.data(), false, 0.0, &mut gb);
            }
        } else {
            let sb = if d.shared_b { 0 } else { k * n };
            for i in 0..batch {
                let gi = &g.data()[i * m * n..];
                let ai = &a.data()[i * m * k..];
                let beta = if d.shared_b && i > 0 { 1.0 } else { 0.0 };
                let dst = &mut gb[i * sb..i * sb + k * n];
                if tb {
                    gemm(n, m, k, gi, true, ai, ta, beta, dst);
                } else {
                    gemm(k, m, n, ai, !ta, gi, false, beta, dst);
                }
            }
        }
        Tensor::from_parts(b.shape().to_vec(), gb)
    });

    Ok((ga, gb))
}
