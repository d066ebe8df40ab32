//! Decoder modules: deep supervision on the patch features and double
//! attention on the deeper stage outputs.

use crate::autograd::Var;
use crate::encoder::{init_attention, init_mlp, linear, norm, shifted_window_attention};
use crate::error::{Error, Result};
use crate::params::{Initializer, Scope};

/// Output of the deep-supervision module.
#[derive(Debug, Clone, Copy)]
pub struct DsOutput<'t> {
    /// Re-weighted features, same layout as the input `[N, h, w, C]`.
    pub features: Var<'t>,
    /// Full-resolution single-channel logits `[N, 1, H, W]`.
    pub predicted_map: Var<'t>,
    /// `sigmoid(predicted_map)`.
    pub attention_map: Var<'t>,
}

/// ```text
/// M_p   = up(conv1x1(conv3x3(F_in)))
/// M_a   = sigmoid(M_p)
/// F_out = F_in + down(M_a) * conv1x1(F_in)
/// ```
///
/// `down` is average pooling by the same factor as `up`. Parameters under
/// `p`: `conv3`, `pred` and `proj`.
pub fn ds_forward<'t>(f_in: Var<'t>, p: &Scope<'_, 't>, full_res: (usize, usize)) -> Result<DsOutput<'t>> {
    let &[_, h, w, _] = f_in.shape().as_slice() else {
        return Err(Error::dim(format!("ds_forward expects [N, h, w, C], got {:?}", f_in.shape())));
    };
    let (fh, fw) = full_res;
    if fh % h != 0 || fw % w != 0 || fh / h != fw / w {
        return Err(Error::dim(format!(
            "ds_forward: full resolution {fh}x{fw} is not a uniform multiple of {h}x{w}"
        )));
    }
    let factor = fh / h;
    let conv = |x: Var<'t>, name: &str, pad| -> Result<Var<'t>> {
        let s = p.sub(name);
        x.conv2d(s.var("weight")?, s.var("bias")?, pad, 1)
    };
    let x = f_in.permute([0, 3, 1, 2])?;
    let predicted_map = conv(conv(x, "conv3", 1)?, "pred", 0)?.resize(fh, fw)?;
    let attention_map = predicted_map.sigmoid()?;
    let gate = attention_map.avg_pool(factor)?;
    let out = x.add(gate.mul(conv(x, "proj", 0)?)?)?;
    Ok(DsOutput {
        features: out.permute([0, 2, 3, 1])?,
        predicted_map,
        attention_map,
    })
}

pub fn init_ds(init: &mut Initializer, prefix: &str, channels: usize) {
    init.conv(&format!("{prefix}.conv3"), channels, channels, 3);
    init.conv(&format!("{prefix}.pred"), channels, 1, 1);
    init.conv(&format!("{prefix}.proj"), channels, channels, 1);
}

/// Splits channels in half; the first half gets regular window attention,
/// the second half shifted-window attention, and the halves are
/// concatenated again. Parameters under `p.regular` and `p.shifted`.
pub fn da_core<'t>(x: Var<'t>, p: &Scope<'_, 't>, heads: usize, window: usize) -> Result<Var<'t>> {
    let &[_, _, _, c] = x.shape().as_slice() else {
        return Err(Error::dim(format!("da_forward expects [N, H, W, C], got {:?}", x.shape())));
    };
    if c % 2 != 0 {
        return Err(Error::dim(format!("da_forward needs an even channel count, got {c}")));
    }
    let half = c / 2;
    let first = shifted_window_attention(x.narrow(3, 0, half)?, &p.sub("regular"), heads, window, 0)?;
    let second = shifted_window_attention(x.narrow(3, half, half)?, &p.sub("shifted"), heads, window, window / 2)?;
    Var::concat(&[first, second], 3)
}

/// Double-attention block: `x + core(LN(x))`, then `+ MLP(LN(.))`.
pub fn da_forward<'t>(x: Var<'t>, p: &Scope<'_, 't>, heads: usize, window: usize) -> Result<Var<'t>> {
    let x = x.add(da_core(norm(x, &p.sub("norm1"))?, p, heads, window)?)?;
    let hidden = linear(norm(x, &p.sub("norm2"))?, &p.sub("mlp.fc1"))?.gelu()?;
    x.add(linear(hidden, &p.sub("mlp.fc2"))?)
}

pub fn init_da(init: &mut Initializer, prefix: &str, channels: usize, heads: usize, window: usize, hidden: usize) {
    let half = channels / 2;
    init.norm(&format!("{prefix}.norm1"), channels);
    init_attention(init, &format!("{prefix}.regular"), half, heads, window);
    init_attention(init, &format!("{prefix}.shifted"), half, heads, window);
    init.norm(&format!("{prefix}.norm2"), channels);
    init_mlp(init, &format!("{prefix}.mlp"), channels, hidden);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::params::ModelParams;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
    }

    fn ds_params(c: usize, seed: u64) -> ModelParams {
        let mut init = Initializer::new(seed);
        init_ds(&mut init, "ds", c);
        init.finish()
    }

    fn da_params(c: usize, seed: u64) -> ModelParams {
        let mut init = Initializer::new(seed);
        init_da(&mut init, "da", c, 2, 4, 4 * c);
        let mut p = init.finish();
        // Non-zero position bias so the oracle comparison is not vacuous.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        for branch in ["regular", "shifted"] {
            let t = p.get_mut(&format!("da.{branch}.relative_position_bias_table")).unwrap();
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        p
    }

    fn run_ds(params: &ModelParams, x: &Tensor) -> (Tensor, Tensor, Tensor) {
        let tape = Tape::new();
        let vars = params.register(&tape);
        let out = ds_forward(tape.constant(x.clone()), &vars.scope("ds"), (32, 32)).unwrap();
        (out.features.value(), out.predicted_map.value(), out.attention_map.value())
    }

    #[test]
    fn ds_is_identity_with_zero_convs() {
        let mut params = ds_params(4, 1);
        params.zero_where(|_| true);
        let x = random(&[2, 8, 8, 4], 2);
        let (f, mp, ma) = run_ds(&params, &x);
        assert!(f.bitwise_eq(&x));
        assert_eq!(mp.shape(), &[2, 1, 32, 32]);
        assert!(mp.data().iter().all(|&v| v == 0.0));
        assert!(ma.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn ds_attention_lies_in_unit_interval() {
        let x = random(&[1, 8, 8, 4], 3);
        let (_, _, ma) = run_ds(&ds_params(4, 3), &x);
        assert!(ma.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn saturated_gate_adds_full_projection() {
        let mut params = ds_params(4, 5);
        params.zero_where(|n| n.starts_with("ds.conv3") || n == "ds.pred.weight");
        params.insert("ds.pred.bias", Tensor::full([1], 20.0));
        let x = random(&[1, 8, 8, 4], 6);
        let (f, mp, _) = run_ds(&params, &x);
        assert!(mp.data().iter().all(|&v| v == 20.0));
        let tape = Tape::new();
        let vars = params.register(&tape);
        let s = vars.scope("ds.proj");
        let proj = tape
            .constant(x.clone())
            .permute([0, 3, 1, 2])
            .unwrap()
            .conv2d(s.var("weight").unwrap(), s.var("bias").unwrap(), 0, 1)
            .unwrap()
            .permute([0, 2, 3, 1])
            .unwrap()
            .value();
        let expect = x.zip_map(&proj, |a, b| a + b).unwrap();
        assert!(f.max_abs_diff(&expect).unwrap() < 1e-8);
    }

    #[test]
    fn ds_rejects_non_uniform_resolution() {
        let params = ds_params(4, 1);
        let tape = Tape::new();
        let vars = params.register(&tape);
        let x = tape.constant(Tensor::zeros([1, 8, 8, 4]));
        assert!(ds_forward(x, &vars.scope("ds"), (30, 32)).is_err());
        assert!(ds_forward(x, &vars.scope("ds"), (32, 16)).is_err());
    }

    #[test]
    fn ds_supervision_reaches_the_three_by_three_conv() {
        let params = ds_params(4, 9);
        let tape = Tape::new();
        let vars = params.register(&tape);
        let x = tape.constant(random(&[1, 8, 8, 4], 10));
        let mask = tape.constant(Tensor::from_fn([1, 1, 32, 32], |i| ((i % 32) < 12) as u8 as f64));
        let out = ds_forward(x, &vars.scope("ds"), (32, 32)).unwrap();
        let loss = out.predicted_map.weighted_ce(mask).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get_or_zeros(vars.get("ds.conv3.weight").unwrap());
        assert!(g.max_abs() > 0.0);
    }

    fn run_da(params: &ModelParams, x: &Tensor, block: bool) -> Tensor {
        let tape = Tape::new();
        let vars = params.register(&tape);
        let xv = tape.constant(x.clone());
        let y = if block {
            da_forward(xv, &vars.scope("da"), 2, 4)
        } else {
            da_core(xv, &vars.scope("da"), 2, 4)
        };
        y.unwrap().value()
    }

    #[test]
    fn da_keeps_shape_and_rejects_odd_channels() {
        let x = random(&[1, 8, 8, 8], 1);
        assert_eq!(run_da(&da_params(8, 1), &x, true).shape(), &[1, 8, 8, 8]);
        let params = da_params(8, 1);
        let tape = Tape::new();
        let vars = params.register(&tape);
        let odd = tape.constant(Tensor::zeros([1, 8, 8, 7]));
        assert!(da_core(odd, &vars.scope("da"), 2, 4).is_err());
    }

    #[test]
    fn da_is_identity_with_zero_projections() {
        let mut params = da_params(8, 2);
        params.zero_where(|n| n.contains(".proj.") || n.contains("fc2"));
        let x = random(&[2, 8, 8, 8], 3);
        assert!(run_da(&params, &x, true).bitwise_eq(&x));
    }

    #[test]
    fn da_branches_match_encoder_ops() {
        let params = da_params(8, 4);
        let x = random(&[2, 8, 8, 8], 5);
        let got = run_da(&params, &x, false);

        let tape = Tape::new();
        let vars = params.register(&tape);
        let xv = tape.constant(x.clone());
        let reference = |start, name: &str, shift| {
            let part = xv.narrow(3, start, 4).unwrap();
            crate::encoder::shifted_window_attention(part, &vars.scope("da").sub(name), 2, 4, shift)
                .unwrap()
                .value()
        };
        let (a, b) = (reference(0, "regular", 0), reference(4, "shifted", 2));
        for pix in 0..2 * 64 {
            for ch in 0..4 {
                assert!((got.data()[pix * 8 + ch] - a.data()[pix * 4 + ch]).abs() < 1e-12);
                assert!((got.data()[pix * 8 + 4 + ch] - b.data()[pix * 4 + ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn da_channel_halves_are_disjoint() {
        let mut params = da_params(8, 6);
        params.zero_where(|n| n.contains("relative_position_bias_table"));
        let x = random(&[1, 8, 8, 8], 7);
        let y0 = run_da(&params, &x, false);
        let mut bumped = x.clone();
        for pix in 0..64 {
            bumped.data_mut()[pix * 8 + 1] += 0.3;
        }
        let y1 = run_da(&params, &bumped, false);
        for pix in 0..64 {
            for ch in 4..8 {
                assert_eq!(y0.data()[pix * 8 + ch], y1.data()[pix * 8 + ch]);
            }
        }
    }

    #[test]
    fn da_receptive_field_is_two_windows() {
        let params = da_params(8, 8);
        let x = random(&[1, 8, 8, 8], 9);
        let (py, px) = (3usize, 5usize);
        let y0 = run_da(&params, &x, true);
        let mut bumped = x.clone();
        for ch in 0..8 {
            bumped.data_mut()[(py * 8 + px) * 8 + ch] += 0.25;
        }
        let y1 = run_da(&params, &bumped, true);
        // Shifted windows live on the grid rolled by 2; map back to labels.
        let regular = |y: usize, x: usize| (y / 4, x / 4);
        let shifted = |y: usize, x: usize| (((y + 6) % 8) / 4, ((x + 6) % 8) / 4);
        for y in 0..8 {
            for xx in 0..8 {
                let reachable = regular(y, xx) == regular(py, px) || shifted(y, xx) == shifted(py, px);
                let changed = (0..8).any(|ch| y0.data()[(y * 8 + xx) * 8 + ch] != y1.data()[(y * 8 + xx) * 8 + ch]);
                if !reachable {
                    assert!(!changed, "pixel ({y}, {xx}) changed outside both windows");
                }
            }
        }
    }
}
