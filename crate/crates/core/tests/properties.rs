use pic::config::{DataConfig, Padding, RunConfig, Variant};
use pic::layers::{pic_layer_forward, pic_window, LayerDims, PicParams};
use pic::network::build_cascade;
use pic::ops::NormMode;
use pic::synthdata::{make_taxonomy, permute_protocol, sample_video, Protocol};
use pic::Tensor;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dims(window: usize) -> LayerDims {
    LayerDims {
        channels: 8,
        bottleneck: 2,
        keys: 4,
        values: 3,
        window,
    }
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let data = perm.iter().flat_map(|&r| x.row(r).to_vec()).collect();
    Tensor::new(x.shape(), data).unwrap()
}

fn sorted_rows(x: &Tensor, range: std::ops::Range<usize>) -> Vec<Vec<u64>> {
    let mut rows: Vec<Vec<u64>> = range.map(|r| x.row(r).iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort();
    rows
}

fn small_model(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        depth: 2,
        window: 3,
        keys: 4,
        values: 4,
        channels: 8,
        data: DataConfig {
            num_classes: 3,
            timesteps: 12,
            ..DataConfig::default()
        },
        ..RunConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn window_output_ignores_row_order(t in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PicParams::init(dims(t), &mut rng);
        let xw = Tensor::randn(&[t, 2], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        let a = pic_window(&xw, &p).unwrap();
        let b = pic_window(&permute_rows(&xw, &perm), &p).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn protocols_preserve_segment_multisets(seed in any::<u64>(), class in 0usize..3) {
        let tax = make_taxonomy(seed, 3, 3, 2, 20, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_video(&tax, class, 20, 0.3, 2, &mut rng).unwrap();
        let whole = |x: &Tensor| sorted_rows(x, 0..x.rows());
        for protocol in Protocol::ALL {
            let p = permute_protocol(&s, protocol, &mut rng).unwrap();
            prop_assert_eq!(whole(&p.x), whole(&s.x));
            if protocol == Protocol::Fine {
                for w in s.boundaries.windows(2) {
                    prop_assert_eq!(sorted_rows(&p.x, w[0]..w[1]), sorted_rows(&s.x, w[0]..w[1]));
                }
            }
            if protocol == Protocol::Uniform {
                prop_assert!(p.x.bitwise_eq(&s.x));
            }
        }
    }

    /// Permuting rows inside one aligned window leaves that window's output
    /// and every output whose window does not touch it unchanged.
    #[test]
    fn valid_padding_is_local(seed in any::<u64>(), t in 2usize..5, block in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = PicParams::init(dims(t), &mut rng);
        p.recover_w = Tensor::randn(p.recover_w.shape(), 0.5, &mut rng);
        let n = 4 * t;
        let x = Tensor::randn(&[n, 8], 1.0, &mut rng);
        let start = block * t;
        let mut perm: Vec<usize> = (0..n).collect();
        perm[start..start + t].shuffle(&mut rng);
        let xp = permute_rows(&x, &perm);
        let run = |x: &Tensor| pic_layer_forward(&x.reshape(&[1, n, 8]).unwrap(), &p, t, Padding::Valid).unwrap();
        let (a, b) = (run(&x), run(&xp));
        let out_len = n - t + 1;
        for o in 0..out_len {
            let untouched = o == start || o + t <= start || o >= start + t;
            if untouched {
                prop_assert_eq!(&a.data()[o * 8..(o + 1) * 8], &b.data()[o * 8..(o + 1) * 8], "position {}", o);
            }
        }
    }
}

#[test]
fn batch_of_one_matches_batch_rows_and_eval_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for v in Variant::ALL {
        let mut m = build_cascade(&small_model(v)).unwrap();
        m.calibrate(&Tensor::randn(&[4, 12, 8], 1.0, &mut rng)).unwrap();
        let before = m.clone();
        let x = Tensor::randn(&[8, 12, 8], 1.0, &mut rng);
        let all = m.forward(&x, NormMode::Eval).unwrap();
        for r in 0..8 {
            let one = Tensor::new(&[1, 12, 8], x.data()[r * 96..(r + 1) * 96].to_vec()).unwrap();
            let y = m.forward(&one, NormMode::Eval).unwrap();
            let diff = y.data().iter().zip(all.row(r)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-9, "{v} row {r}: {diff}");
        }
        assert!(m.forward(&x, NormMode::Eval).unwrap().bitwise_eq(&all));
        assert_eq!(m, before);
        let threaded = m.predict(&x, 3).unwrap();
        assert!(threaded.bitwise_eq(&all), "{v}: threaded prediction differs");
    }
}

#[test]
fn global_model_ignores_any_time_order() {
    let mut cfg = small_model(Variant::PicGlobal);
    cfg.depth = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut m = build_cascade(&cfg).unwrap();
    let vals: Vec<Tensor> = m
        .params()
        .iter()
        .map(|(_, t)| Tensor::randn(t.shape(), 0.5, &mut rng))
        .collect();
    m.set_params(&vals).unwrap();
    m.calibrate(&Tensor::randn(&[4, 12, 8], 1.0, &mut rng)).unwrap();
    let x = Tensor::randn(&[12, 8], 1.0, &mut rng);
    let base = m.forward(&x.reshape(&[1, 12, 8]).unwrap(), NormMode::Eval).unwrap();
    for _ in 0..10 {
        let mut perm: Vec<usize> = (0..12).collect();
        perm.shuffle(&mut rng);
        let xp = permute_rows(&x, &perm).into_reshaped(&[1, 12, 8]).unwrap();
        assert!(m.forward(&xp, NormMode::Eval).unwrap().bitwise_eq(&base));
    }
}
