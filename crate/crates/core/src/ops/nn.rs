//! Neural-network kernels with hand-written adjoints: softmax, layer norm,
//! 2-D convolution, bilinear resize, average pooling and row gathers.

use crate::error::{Error, Result};
use crate::ops::linalg::gemm;
use crate::tensor::Tensor;

fn last_axis(t: &Tensor, what: &str) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::dim(format!("{what} needs at least one axis")))
}

/// Softmax over the last axis. Rows are shifted by their maximum before
/// exponentiation.
pub fn softmax(input: &Tensor) -> Result<Tensor> {
    let n = last_axis(input, "softmax")?;
    let mut out = input.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        let inv = 1.0 / z;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub fn softmax_backward(output: &Tensor, grad: &Tensor) -> Result<Tensor> {
    grad.expect_shape(output.shape())?;
    let n = last_axis(output, "softmax")?;
    let mut gx = Vec::with_capacity(output.numel());
    for (y, g) in output.data().chunks_exact(n).zip(grad.data().chunks_exact(n)) {
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        gx.extend(y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)));
    }
    Ok(Tensor::from_parts(output.shape().to_vec(), gx))
}

fn check_norm_params(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<usize> {
    let c = last_axis(input, "layer_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::dim(format!(
            "layer_norm over {c} channels with gamma {:?} / beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Normalizes over the last axis (biased variance), then applies the affine
/// `gamma`/`beta`.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = check_norm_params(input, gamma, beta)?;
    if eps <= 0.0 {
        return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let (g, b) = (gamma.data(), beta.data());
    let mut out = Vec::with_capacity(input.numel());
    for row in input.data().chunks_exact(c) {
        let (mean, rstd) = moments(row, eps);
        out.extend((0..c).map(|i| (row[i] - mean) * rstd * g[i] + b[i]));
    }
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}

pub type LayerNormGrads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

pub fn layer_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
    grad: &Tensor,
    need: [bool; 3],
) -> Result<LayerNormGrads> {
    let c = check_norm_params(input, gamma, beta)?;
    grad.expect_shape(input.shape())?;
    let g = gamma.data();
    let mut gx = if need[0] { Vec::with_capacity(input.numel()) } else { Vec::new() };
    let mut gg = vec![0.0; c];
    let mut gb = vec![0.0; c];
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for (row, dy) in input.data().chunks_exact(c).zip(grad.data().chunks_exact(c)) {
        let (mean, rstd) = moments(row, eps);
        for i in 0..c {
            xhat[i] = (row[i] - mean) * rstd;
            gg[i] += dy[i] * xhat[i];
            gb[i] += dy[i];
            dxhat[i] = dy[i] * g[i];
        }
        if need[0] {
            let cf = c as f64;
            let m1 = dxhat.iter().sum::<f64>() / cf;
            let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cf;
            gx.extend((0..c).map(|i| rstd * (dxhat[i] - m1 - xhat[i] * m2)));
        }
    }
    Ok((
        need[0].then(|| Tensor::from_parts(input.shape().to_vec(), gx)),
        need[1].then(|| Tensor::from_parts(vec![c], gg)),
        need[2].then(|| Tensor::from_parts(vec![c], gb)),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], bias: &[usize], padding: usize, stride: usize) -> Result<Self> {
        let (&[batch, in_ch, height, width], &[out_ch, wc, kh, kw]) = (input, weight) else {
            return Err(Error::dim(format!(
                "conv2d wants NCHW input and OCkk weight, got {input:?} / {weight:?}"
            )));
        };
        if wc != in_ch {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input has {in_ch}, weight expects {wc}"
            )));
        }
        if kh != kw {
            return Err(Error::dim(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if bias != [out_ch] {
            return Err(Error::dim(format!("conv2d bias {bias:?} for {out_ch} outputs")));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let span_h = height + 2 * padding;
        let span_w = width + 2 * padding;
        if span_h < kh || span_w < kh || !(span_h - kh).is_multiple_of(stride) || !(span_w - kh).is_multiple_of(stride) {
            return Err(Error::dim(format!(
                "conv2d output extent not integral: {height}x{width}, k={kh}, pad={padding}, stride={stride}"
            )));
        }
        Ok(ConvGeometry {
            batch,
            in_ch,
            out_ch,
            height,
            width,
            kernel: kh,
            padding,
            stride,
            out_h: (span_h - kh) / stride + 1,
            out_w: (span_w - kh) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Maps output row `oy` and kernel row `ky` to an input row, if inside.
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (k, ohw) = (self.kernel, self.col_cols());
        for c in 0..self.in_ch {
            let plane = &image[c * self.height * self.width..];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..self.out_h {
                        let dst = &mut row[oy * self.out_w..(oy + 1) * self.out_w];
                        match self.src(oy, ky, self.height) {
                            None => dst.fill(0.0),
                            Some(iy) => {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.src(ox, kx, self.width) {
                                        Some(ix) => plane[iy * self.width + ix],
                                        None => 0.0,
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (k, ohw) = (self.kernel, self.col_cols());
        for c in 0..self.in_ch {
            let plane = &mut image[c * self.height * self.width..];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..self.out_h {
                        let Some(iy) = self.src(oy, ky, self.height) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(ix) = self.src(ox, kx, self.width) {
                                plane[iy * self.width + ix] += row[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of an NCHW input with an `[O, C, k, k]` kernel.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let geo = ConvGeometry::new(input.shape(), weight.shape(), bias.shape(), padding, stride)?;
    let (rows, ohw) = (geo.col_rows(), geo.col_cols());
    let in_plane = geo.in_ch * geo.height * geo.width;
    let out_plane = geo.out_ch * ohw;
    let mut out = vec![0.0; geo.batch * out_plane];
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * ohw] };
    for n in 0..geo.batch {
        let image = &input.data()[n * in_plane..(n + 1) * in_plane];
        let src: &[f64] = if geo.is_pointwise() {
            image
        } else {
            geo.im2col(image, &mut cols);
            &cols
        };
        let dst = &mut out[n * out_plane..(n + 1) * out_plane];
        for (o, plane) in dst.chunks_exact_mut(ohw).enumerate() {
            plane.fill(bias.data()[o]);
        }
        gemm(geo.out_ch, rows, ohw, weight.data(), false, src, false, 1.0, dst);
    }
    Ok(Tensor::from_parts(
        vec![geo.batch, geo.out_ch, geo.out_h, geo.out_w],
        out,
    ))
}

pub type ConvGrads = (Option<Tensor>, Option<Tensor>, Option<Tensor>);

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    padding: usize,
    stride: usize,
    grad: &Tensor,
    need: [bool; 3],
) -> Result<ConvGrads> {
    let geo = ConvGeometry::new(input.shape(), weight.shape(), bias.shape(), padding, stride)?;
    grad.expect_shape(&[geo.batch, geo.out_ch, geo.out_h, geo.out_w])?;
    let (rows, ohw) = (geo.col_rows(), geo.col_cols());
    let in_plane = geo.in_ch * geo.height * geo.width;
    let out_plane = geo.out_ch * ohw;

    let mut gx = if need[0] { vec![0.0; input.numel()] } else { Vec::new() };
    let mut gw = vec![0.0; weight.numel()];
    let mut gb = vec![0.0; geo.out_ch];
    let mut cols = if geo.is_pointwise() { Vec::new() } else { vec![0.0; rows * ohw] };
    let mut gcols = if need[0] && !geo.is_pointwise() { vec![0.0; rows * ohw] } else { Vec::new() };

    for n in 0..geo.batch {
        let g = &grad.data()[n * out_plane..(n + 1) * out_plane];
        if need[2] {
            for (o, plane) in g.chunks_exact(ohw).enumerate() {
                gb[o] += plane.iter().sum::<f64>();
            }
        }
        if need[1] {
            let image = &input.data()[n * in_plane..(n + 1) * in_plane];
            let src: &[f64] = if geo.is_pointwise() {
                image
            } else {
                geo.im2col(image, &mut cols);
                &cols
            };
            gemm(geo.out_ch, ohw, rows, g, false, src, true, 1.0, &mut gw);
        }
        if need[0] {
            let dst = &mut gx[n * in_plane..(n + 1) * in_plane];
            if geo.is_pointwise() {
                gemm(rows, geo.out_ch, ohw, weight.data(), true, g, false, 0.0, dst);
            } else {
                gemm(rows, geo.out_ch, ohw, weight.data(), true, g, false, 0.0, &mut gcols);
                geo.col2im(&gcols, dst);
            }
        }
    }
    Ok((
        need[0].then(|| Tensor::from_parts(input.shape().to_vec(), gx)),
        need[1].then(|| Tensor::from_parts(weight.shape().to_vec(), gw)),
        need[2].then(|| Tensor::from_parts(bias.shape().to_vec(), gb)),
    ))
}

/// Source taps for one axis of a half-pixel-center bilinear resize:
/// `(lo, hi, weight_hi)` per output index.
fn resize_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            if n_in == n_out {
                return (o, o, 0.0);
            }
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn nchw(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(t.shape())
        .map_err(|_| Error::dim(format!("{what} expects NCHW, got {:?}", t.shape())))
}

/// Bilinear resize of an NCHW tensor using half-pixel centers (no corner
/// alignment); source coordinates below zero clamp to the first row/column.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = nchw(input, "bilinear_resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("bilinear_resize to an empty extent"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(input.clone());
    }
    let (ty, tx) = (resize_taps(h, out_h), resize_taps(w, out_w));
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in input.data().chunks_exact(h * w) {
        for &(y0, y1, wy) in &ty {
            let (r0, r1) = (&plane[y0 * w..(y0 + 1) * w], &plane[y1 * w..(y1 + 1) * w]);
            for &(x0, x1, wx) in &tx {
                let top = r0[x0] * (1.0 - wx) + r0[x1] * wx;
                let bot = r1[x0] * (1.0 - wx) + r1[x1] * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, out_h, out_w], out))
}

pub fn bilinear_resize_backward(in_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let [n, c, out_h, out_w] = nchw(grad, "bilinear_resize")?;
    let &[gn, gc, h, w] = in_shape else {
        return Err(Error::dim(format!("bilinear_resize input shape {in_shape:?}")));
    };
    if (gn, gc) != (n, c) {
        return Err(Error::dim("bilinear_resize gradient batch/channel mismatch"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(grad.clone());
    }
    let (ty, tx) = (resize_taps(h, out_h), resize_taps(w, out_w));
    let mut acc = vec![0.0; n * c * h * w];
    for (plane, g) in acc.chunks_exact_mut(h * w).zip(grad.data().chunks_exact(out_h * out_w)) {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                plane[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                plane[y0 * w + x1] += v * (1.0 - wy) * wx;
                plane[y1 * w + x0] += v * wy * (1.0 - wx);
                plane[y1 * w + x1] += v * wy * wx;
            }
        }
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), acc))
}

/// Non-overlapping `k x k` mean pooling of an NCHW tensor.
pub fn avg_pool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    let [n, c, h, w] = nchw(input, "avg_pool2d")?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::dim(format!("avg_pool2d factor {k} does not divide {h}x{w}")));
    }
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane, dst) in input.data().chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for y in 0..h {
            for x in 0..w {
                dst[(y / k) * ow + x / k] += plane[y * w + x];
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    Ok(Tensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn avg_pool2d_backward(in_shape: &[usize], k: usize, grad: &Tensor) -> Result<Tensor> {
    let &[n, c, h, w] = in_shape else {
        return Err(Error::dim(format!("avg_pool2d input shape {in_shape:?}")));
    };
    let (oh, ow) = (h / k, w / k);
    grad.expect_shape(&[n, c, oh, ow])?;
    let inv = 1.0 / (k * k) as f64;
    let mut out = Vec::with_capacity(n * c * h * w);
    for g in grad.data().chunks_exact(oh * ow) {
        for y in 0..h {
            out.extend((0..w).map(|x| g[(y / k) * ow + x / k] * inv));
        }
    }
    Ok(Tensor::from_parts(in_shape.to_vec(), out))
}

/// Selects rows of a 2-D table: `out[i, :] = table[indices[i], :]`.
pub fn index_select(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let &[rows, width] = table.shape() else {
        return Err(Error::dim(format!("index_select table must be 2-D, got {:?}", table.shape())));
    };
    if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
        return Err(Error::dim(format!("index_select index out of range for {rows} rows")));
    }
    let mut out = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        out.extend_from_slice(&table.data()[i * width..(i + 1) * width]);
    }
    Ok(Tensor::from_parts(vec![indices.len(), width], out))
}

pub fn index_select_backward(table_shape: &[usize], indices: &[usize], grad: &Tensor) -> Result<Tensor> {
    let &[rows, width] = table_shape else {
        return Err(Error::dim("index_select table must be 2-D"));
    };
    grad.expect_shape(&[indices.len(), width])?;
    let mut acc = vec![0.0; rows * width];
    for (&i, g) in indices.iter().zip(grad.data().chunks_exact(width)) {
        for (a, v) in acc[i * width..(i + 1) * width].iter_mut().zip(g) {
            *a += v;
        }
    }
    Ok(Tensor::from_parts(table_shape.to_vec(), acc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_stable() {
        let t = Tensor::zeros([4]);
        assert_eq!(softmax(&t).unwrap().data(), &[0.25; 4]);
        let s = softmax(&Tensor::new([2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-12);
        assert!(s.all_finite());
    }

    #[test]
    fn softmax_masked_entry_vanishes() {
        let s = softmax(&Tensor::new([3], vec![0.3, -1e4, 0.1]).unwrap()).unwrap();
        // exp(-1e4 - 0.3) / Z underflows to zero; the bound is what matters.
        assert!(s.data()[1] < 1e-8);
    }

    #[test]
    fn layer_norm_two_element_case() {
        let x = Tensor::new([2], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &Tensor::ones([2]), &Tensor::zeros([2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let x = Tensor::full([3, 8], 0.625);
        let y = layer_norm(&x, &Tensor::ones([8]), &Tensor::zeros([8]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(layer_norm(&x, &Tensor::ones([7]), &Tensor::zeros([8]), 1e-5).is_err());
    }

    #[test]
    fn conv_identity_and_constant_field() {
        let x = Tensor::from_fn([1, 3, 4, 5], |i| (i as f64).sin());
        let eye = Tensor::from_fn([3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d(&x, &eye, &Tensor::zeros([3]), 0, 1).unwrap();
        assert!(y.bitwise_eq(&x));

        let v = 1.5;
        let c = conv2d(&Tensor::full([1, 1, 5, 5], v), &Tensor::ones([1, 1, 3, 3]), &Tensor::zeros([1]), 1, 1).unwrap();
        assert_eq!(c.data()[2 * 5 + 2], 9.0 * v);
        assert_eq!(c.data()[0], 4.0 * v);
        assert_eq!(c.data()[24], 4.0 * v);
        assert_eq!(c.data()[2], 6.0 * v);
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor::zeros([1, 3, 5, 5]);
        assert!(conv2d(&x, &Tensor::zeros([2, 4, 3, 3]), &Tensor::zeros([2]), 1, 1).is_err());
        // (5 + 0 - 3) / 2 + 1 is integral; (6 - 3) / 2 is not.
        assert!(conv2d(&x, &Tensor::zeros([2, 3, 3, 3]), &Tensor::zeros([2]), 0, 2).is_ok());
        assert!(conv2d(&Tensor::zeros([1, 3, 6, 6]), &Tensor::zeros([2, 3, 3, 3]), &Tensor::zeros([2]), 0, 2).is_err());
    }

    #[test]
    fn resize_identity_and_constants() {
        let x = Tensor::from_fn([1, 2, 3, 5], |i| i as f64 * 0.1);
        assert!(bilinear_resize(&x, 3, 5).unwrap().bitwise_eq(&x));
        let c = bilinear_resize(&Tensor::full([1, 1, 3, 3], 0.7), 7, 5).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn pool_preserves_constants() {
        let p = avg_pool2d(&Tensor::full([2, 3, 4, 4], 2.5), 2).unwrap();
        assert_eq!(p.shape(), &[2, 3, 2, 2]);
        assert!(p.data().iter().all(|&v| v == 2.5));
        assert!(avg_pool2d(&Tensor::zeros([1, 1, 5, 4]), 2).is_err());
    }
}
