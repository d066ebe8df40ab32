mod common;

use common::{attention_params, random_tensor, rng};
use proptest::prelude::*;
use winshade::checkpoint;
use winshade::config::RunConfig;
use winshade::encoder::{cyclic_shift, shifted_window_attention, window_partition, window_reverse};
use winshade::image_io::{load_mask, save_mask};
use winshade::loss::weighted_ce_loss;
use winshade::metrics::{ber, Confusion};
use winshade::ops::softmax;
use winshade::params::ModelParams;
use winshade::{Tape, Tensor};

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-10.0..10.0f64, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn mask(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(any::<bool>(), n)
        .prop_map(move |d| Tensor::new(shape.clone(), d.into_iter().map(|b| b as u8 as f64).collect()).unwrap())
}

/// `[N, H, W, C]` map whose sides are multiples of the window `m`.
fn windowed_map() -> impl Strategy<Value = (Tensor, usize)> {
    (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..4)
        .prop_flat_map(|(n, m, gh, gw, c)| tensor(vec![n, gh * m, gw * m, c]).prop_map(move |t| (t, m)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_then_reverse_is_identity((x, m) in windowed_map()) {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let back = window_reverse(&window_partition(v, m).unwrap()).unwrap().value();
        prop_assert!(back.bitwise_eq(&x));
    }

    #[test]
    fn shift_then_inverse_is_identity((x, _) in windowed_map(), dy in -9isize..9, dx in -9isize..9) {
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let back = cyclic_shift(cyclic_shift(v, dy, dx).unwrap(), -dy, -dx).unwrap().value();
        prop_assert!(back.bitwise_eq(&x));
    }

    #[test]
    fn softmax_rows_are_distributions(x in tensor(vec![4, 9])) {
        let y = softmax(&x.map(|v| 50.0 * v)).unwrap();
        for row in y.data().chunks_exact(9) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_is_symmetric_under_label_swap(x in tensor(vec![2, 1, 4, 5]), y in mask(vec![2, 1, 4, 5])) {
        let a = weighted_ce_loss(&x, &y).unwrap();
        let b = weighted_ce_loss(&x.map(|v| -v), &y.map(|v| 1.0 - v)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn ber_is_invariant_under_relabeling(p in mask(vec![1, 1, 6, 6]), g in mask(vec![1, 1, 6, 6])) {
        let c = ber(&p, &g).unwrap();
        let s = ber(&p.map(|v| 1.0 - v), &g.map(|v| 1.0 - v)).unwrap();
        prop_assert_eq!(c.ber(), s.ber());
        prop_assert_eq!(c.ber_shadow(), s.ber_nonshadow());
        prop_assert_eq!(c.ber_nonshadow(), s.ber_shadow());
    }

    #[test]
    fn pooled_ber_equals_concatenated(ps in prop::collection::vec((mask(vec![1, 1, 3, 4]), mask(vec![1, 1, 3, 4])), 1..5)) {
        let mut pooled = Confusion::default();
        let (mut cp, mut cg) = (Vec::new(), Vec::new());
        for (p, g) in &ps {
            pooled.merge(&ber(p, g).unwrap());
            cp.extend_from_slice(p.data());
            cg.extend_from_slice(g.data());
        }
        let n = cp.len();
        let whole = ber(
            &Tensor::new([1, 1, 1, n], cp).unwrap(),
            &Tensor::new([1, 1, 1, n], cg).unwrap(),
        ).unwrap();
        prop_assert_eq!(pooled, whole);
        prop_assert_eq!(pooled.ber(), whole.ber());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(
        tensors in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,3}", prop::collection::vec(any::<f64>(), 1..20), 0..6),
        config in ".{0,40}",
    ) {
        let mut params = ModelParams::new();
        for (name, data) in &tensors {
            params.insert(name.clone(), Tensor::new([data.len()], data.clone()).unwrap());
        }
        let bytes = checkpoint::to_bytes(&params, &config);
        let back = checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back.config, &config);
        prop_assert_eq!(back.params.len(), params.len());
        for (name, t) in params.iter() {
            prop_assert!(back.params.get(name).unwrap().bitwise_eq(t));
        }
    }

    #[test]
    fn mask_round_trip_is_exact(m in (1usize..12, 1usize..12).prop_flat_map(|(h, w)| mask(vec![1, h, w]))) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        save_mask(&path, &m).unwrap();
        prop_assert!(load_mask(&path).unwrap().bitwise_eq(&m));
    }

    #[test]
    fn config_text_round_trips(
        seed in any::<u64>(),
        iters in 0usize..100_000,
        lr in 0.0..1.0f64,
        ablate in prop::sample::select(vec!["", "ds", "da", "mla", "ds,da", "da,mla", "ds,da,mla"]),
        hflip in any::<bool>(),
    ) {
        let text = format!("seed = {seed}\niterations = {iters}\nlr = {lr:?}\nablate = {ablate}\nhflip = {hflip}\n");
        let cfg = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn window_attention_is_local(seed in any::<u64>(), y in 0usize..8, x in 0usize..8, c in 0usize..4) {
        let mut r = rng(seed);
        let input = random_tensor(&mut r, &[1, 8, 8, 4], 1.0);
        let p = attention_params(&mut r, "attn", 4, 2, 4);
        let run = |t: &Tensor| {
            let tape = Tape::new();
            let vars = p.register(&tape);
            shifted_window_attention(tape.constant(t.clone()), &vars.scope("attn"), 2, 4, 0).unwrap().value()
        };
        let mut poked = input.data().to_vec();
        poked[(y * 8 + x) * 4 + c] += 0.5;
        let (a, b) = (run(&input), run(&Tensor::new([1, 8, 8, 4], poked).unwrap()));
        for pos in 0..64 {
            let same = (0..4).all(|k| a.data()[pos * 4 + k].to_bits() == b.data()[pos * 4 + k].to_bits());
            let inside = (pos / 8 / 4, pos % 8 / 4) == (y / 4, x / 4);
            prop_assert!(same || inside, "pixel {} changed", pos);
        }
    }
}
