//! Hand-computed values and naive-loop references for individual kernels.

mod common;

use common::{naive_ber, naive_weighted_ce, random_mask, random_tensor, rng};
use winshade::loss::weighted_ce_loss;
use winshade::metrics::{ber, Confusion};
use winshade::mla::bottom_up;
use winshade::ops::{bilinear_resize, conv2d, layer_norm};
use winshade::{Tape, Tensor};

#[test]
fn bilinear_two_by_two_to_four_by_four() {
    let input = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let got = bilinear_resize(&input, 4, 4).unwrap();
    #[rustfmt::skip]
    let want = [
        0.0, 0.25, 0.75, 1.0,
        0.5, 0.75, 1.25, 1.5,
        1.5, 1.75, 2.25, 2.5,
        2.0, 2.25, 2.75, 3.0,
    ];
    assert_eq!(got.shape(), &[1, 1, 4, 4]);
    for (g, w) in got.data().iter().zip(want) {
        assert!((g - w).abs() < 1e-15, "{g} vs {w}");
    }
}

#[test]
fn bottom_up_three_levels() {
    let tape = Tape::new();
    let z2 = [
        Tensor::from_fn([1, 1, 4, 4], |i| i as f64),
        Tensor::new([1, 1, 2, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap(),
        Tensor::new([1, 1, 1, 1], vec![100.0]).unwrap(),
    ]
    .map(|t| tape.constant(t));
    let z3 = bottom_up(&z2).unwrap();
    assert_eq!(z3[0].value().data(), z2[0].value().data());
    // 2x2 means of 0..16 are 2.5, 4.5, 10.5, 12.5.
    assert_eq!(z3[1].value().data(), &[12.5, 24.5, 40.5, 52.5]);
    // Mean of the previous level is 32.5.
    assert_eq!(z3[2].value().data(), &[132.5]);
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize, stride: usize) -> Tensor {
    let [n, ci, h, wd] = <[usize; 4]>::try_from(x.shape()).unwrap();
    let [co, _, k, _] = <[usize; 4]>::try_from(w.shape()).unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for b_ in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b_ * ci + c) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((o * ci + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b_ * co + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    Tensor::new([n, co, oh, ow], out).unwrap()
}

#[test]
fn conv_matches_naive_loops() {
    let mut r = rng(1);
    for (shape, k, pad, stride) in [([2, 3, 6, 5], 3, 1, 1), ([1, 4, 7, 7], 3, 1, 2), ([2, 5, 4, 4], 1, 0, 1)] {
        let x = random_tensor(&mut r, &shape, 1.0);
        let w = random_tensor(&mut r, &[3, shape[1], k, k], 1.0);
        let b = random_tensor(&mut r, &[3], 1.0);
        let got = conv2d(&x, &w, &b, pad, stride).unwrap();
        let want = naive_conv(&x, &w, &b, pad, stride);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }
}

#[test]
fn layer_norm_moments() {
    // The eps term biases the variance by eps / sigma^2, so keep it tiny.
    let x = random_tensor(&mut rng(2), &[2, 16, 8], 3.0).map(|v| v + 5.0);
    let y = layer_norm(&x, &Tensor::ones([8]), &Tensor::zeros([8]), 1e-9).unwrap();
    for row in y.data().chunks_exact(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10, "{mean:e}");
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }
}

#[test]
fn balanced_half_probability_loss() {
    // Half the pixels are shadow and every logit is 0, so p = 0.5 everywhere.
    let mask = Tensor::from_fn([1, 1, 8, 8], |i| (i % 2) as f64);
    let loss = weighted_ce_loss(&Tensor::zeros([1, 1, 8, 8]), &mask).unwrap();
    assert!((loss - 64.0 * 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
    assert!((loss / 64.0 - 0.3466).abs() < 1e-4);
}

#[test]
fn single_shadow_pixel_contribution() {
    let mask = Tensor::from_fn([1, 1, 2, 2], |i| (i < 2) as u8 as f64);
    let mut logits = vec![40.0, 0.0, -40.0, -40.0];
    let base = weighted_ce_loss(&Tensor::new([1, 1, 2, 2], logits.clone()).unwrap(), &mask).unwrap();
    logits[1] = 1e6;
    let without = weighted_ce_loss(&Tensor::new([1, 1, 2, 2], logits).unwrap(), &mask).unwrap();
    assert!((base - without - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn ber_hand_value() {
    let c = Confusion {
        true_pos: 90,
        false_neg: 10,
        true_neg: 80,
        false_pos: 20,
    };
    assert_eq!(c.ber(), Some(15.0));
}

#[test]
fn metrics_match_naive_loops() {
    let mut r = rng(3);
    for case in 0..10 {
        let shape = [2, 1, 5 + case, 7];
        let gt = random_mask(&mut r, &shape, 0.3);
        let pred = random_mask(&mut r, &shape, 0.5);
        let got = ber(&pred, &gt).unwrap().ber().unwrap();
        assert_eq!(got, naive_ber(pred.data(), gt.data()), "case {case}");
        let logits = random_tensor(&mut r, &shape, 4.0);
        let loss = weighted_ce_loss(&logits, &gt).unwrap();
        assert!((loss - naive_weighted_ce(&logits, &gt)).abs() < 1e-10, "case {case}");
    }
}
