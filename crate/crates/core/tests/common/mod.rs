//! Brute-force reference implementations shared by the integration tests
//! and the acceptance suite. Everything here is written as plain loops,
//! independently of the library code it checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use winshade::params::ModelParams;
use winshade::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, shape: &[usize], p: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_bool(p) as u8 as f64).collect()).unwrap()
}

/// Attention parameters under `prefix` with every entry random, including
/// the relative position bias table.
pub fn attention_params(rng: &mut ChaCha8Rng, prefix: &str, c: usize, heads: usize, m: usize) -> ModelParams {
    let mut p = ModelParams::new();
    p.insert(format!("{prefix}.qkv.weight"), random_tensor(rng, &[c, 3 * c], 0.5));
    p.insert(format!("{prefix}.qkv.bias"), random_tensor(rng, &[3 * c], 0.1));
    p.insert(format!("{prefix}.proj.weight"), random_tensor(rng, &[c, c], 0.5));
    p.insert(format!("{prefix}.proj.bias"), random_tensor(rng, &[c], 0.1));
    let side = 2 * m - 1;
    p.insert(
        format!("{prefix}.relative_position_bias_table"),
        random_tensor(rng, &[side * side, heads], 1.0),
    );
    p
}

/// Shifted-window attention of `x: [1, H, W, C]` computed token by token:
/// each token attends densely to the tokens of its shifted window that come
/// from the same contiguous region of the unshifted map. Two tokens share a
/// region exactly when the shift wrapped both or neither along each axis.
pub fn dense_region_attention(x: &Tensor, p: &ModelParams, prefix: &str, heads: usize, m: usize, s: usize) -> Tensor {
    let (h, w, c) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let d = c / heads;
    let get = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap().data().to_vec();
    let (wq, bq, wp, bp, table) = (
        get("qkv.weight"),
        get("qkv.bias"),
        get("proj.weight"),
        get("proj.bias"),
        get("relative_position_bias_table"),
    );
    let xd = x.data();
    // Projections at original positions.
    let qkv: Vec<Vec<f64>> = (0..h * w)
        .map(|t| {
            (0..3 * c)
                .map(|j| bq[j] + (0..c).map(|i| xd[t * c + i] * wq[i * 3 * c + j]).sum::<f64>())
                .collect()
        })
        .collect();
    let mut out = vec![0.0; h * w * c];
    for ty in 0..h {
        for tx in 0..w {
            // Shifted-grid coordinate of this token.
            let (sy, sx) = ((ty + h - s) % h, (tx + w - s) % w);
            let (wy, wx) = (sy / m * m, sx / m * m);
            let wrapped = |y: usize, x: usize| (y + s >= h, x + s >= w);
            let mine = wrapped(sy, sx);
            let mut keys = Vec::new();
            for ky in wy..wy + m {
                for kx in wx..wx + m {
                    if wrapped(ky, kx) == mine {
                        keys.push((ky, kx, ((ky + s) % h) * w + (kx + s) % w));
                    }
                }
            }
            let t = ty * w + tx;
            let mut concat = vec![0.0; c];
            for head in 0..heads {
                let q = |i: usize| qkv[t][head * d + i];
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|&(ky, kx, u)| {
                        let dot: f64 = (0..d).map(|i| q(i) * qkv[u][c + head * d + i]).sum();
                        let dy = sy as isize - ky as isize + m as isize - 1;
                        let dx = sx as isize - kx as isize + m as isize - 1;
                        let idx = (dy * (2 * m as isize - 1) + dx) as usize;
                        dot / (d as f64).sqrt() + table[idx * heads + head]
                    })
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|v| (v - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for i in 0..d {
                    concat[head * d + i] = keys
                        .iter()
                        .zip(&e)
                        .map(|(&(_, _, u), &ei)| ei / z * qkv[u][2 * c + head * d + i])
                        .sum();
                }
            }
            for j in 0..c {
                out[t * c + j] = bp[j] + (0..c).map(|i| concat[i] * wp[i * c + j]).sum::<f64>();
            }
        }
    }
    Tensor::new([1, h, w, c], out).unwrap()
}

/// Region label of a shifted-grid token, comparable within one window.
pub fn region(y: usize, x: usize, h: usize, w: usize, s: usize) -> (bool, bool) {
    (y + s >= h, x + s >= w)
}

/// Balance error rate in percent by direct pixel counting.
pub fn naive_ber(pred: &[f64], gt: &[f64]) -> f64 {
    let (mut tp, mut tn, mut np, mut nn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        if g == 1.0 {
            np += 1;
            if p == 1.0 {
                tp += 1;
            }
        } else {
            nn += 1;
            if p == 0.0 {
                tn += 1;
            }
        }
    }
    // 100 * (1 - (tp/np + tn/nn) / 2) over the common denominator 2*np*nn.
    let missed = 2 * np * nn - (tp * nn + tn * np);
    (100 * missed) as f64 / (2 * np * nn) as f64
}

/// Class-balanced cross entropy, per-image weights, mean over images.
pub fn naive_weighted_ce(logits: &Tensor, mask: &Tensor) -> f64 {
    let n = logits.shape()[0];
    let per = logits.numel() / n;
    let mut total = 0.0;
    for b in 0..n {
        let x = &logits.data()[b * per..(b + 1) * per];
        let y = &mask.data()[b * per..(b + 1) * per];
        let n_pos = y.iter().filter(|&&v| v == 1.0).count() as f64;
        let n_neg = per as f64 - n_pos;
        let mut l = 0.0;
        for i in 0..per {
            let p = 1.0 / (1.0 + (-x[i]).exp());
            l -= n_neg / per as f64 * y[i] * p.ln() + n_pos / per as f64 * (1.0 - y[i]) * (1.0 - p).ln();
        }
        total += l;
    }
    total / n as f64
}
