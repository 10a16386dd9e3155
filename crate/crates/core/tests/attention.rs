mod common;

use common::{cal_split, mfsa_split, normal, rng, sum_error};
use occlusion_attn::attention::{CbamBlock, MfsaBlock, FOCAL_MAPS};
use occlusion_attn::nn::{Forward, Mode};
use occlusion_attn::oni::OniConfig;
use occlusion_attn::param::ParamStore;
use occlusion_attn::Tensor;
use proptest::prelude::*;

fn input(seed: u64, n: usize, c: usize, h: usize, w: usize, std: f64) -> Tensor<f64> {
    normal(&mut rng(seed), &[n, c, h, w], std)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cal_maps_are_complementary_in_working_precision(seed in any::<u64>(), std in 0.1f64..20.0) {
        let x: Tensor<f32> = input(seed, 2, 4, 5, 6, std).cast();
        let s = cal_split(seed ^ 1, &x, Mode::Train);
        for (a, b) in s.a_um.data().iter().zip(s.a_m.data()) {
            prop_assert_eq!(a + b, 1.0f32);
            prop_assert!((0.0..=1.0).contains(a));
        }
        let scale = s.whole.data().iter().fold(1.0f64, |m, v| m.max(v.abs() as f64));
        prop_assert!(sum_error(&[&s.x_um, &s.x_m], |i| s.whole.data()[i] as f64) <= 4.0 * f32::EPSILON as f64 * scale);
    }

    #[test]
    fn mfsa_partitions_every_position(seed in any::<u64>(), std in 0.1f64..20.0, eval in any::<bool>()) {
        let x = input(seed, 2, 8, 4, 5, std);
        let mode = if eval { Mode::Eval } else { Mode::Train };
        let s = mfsa_split(seed ^ 2, &x, mode);
        let a_bg = s.a_bg.as_ref().unwrap();
        prop_assert!(sum_error(&[&s.a_um, &s.a_m, a_bg], |_| 1.0) < 1e-12);
        prop_assert!(s.a_um.data().iter().chain(s.a_m.data()).chain(a_bg.data()).all(|a| *a >= 0.0 && *a <= 1.0));
        let x_bg = s.x_bg.as_ref().unwrap();
        prop_assert!(sum_error(&[&s.x_um, &s.x_m, x_bg], |i| x.data()[i]) < 1e-12 * std.max(1.0) * 10.0);
    }
}

#[test]
fn map_shapes_broadcast_over_channels() {
    let x = input(0, 3, 8, 4, 6, 1.0);
    for s in [cal_split(1, &x, Mode::Train), mfsa_split(1, &x, Mode::Train)] {
        assert_eq!(s.a_um.shape(), [3, 1, 4, 6]);
        assert_eq!(s.a_m.shape(), [3, 1, 4, 6]);
        assert_eq!(s.x_um.shape(), [3, 8, 4, 6]);
        assert_eq!(s.x_m.shape(), [3, 8, 4, 6]);
    }
}

#[test]
fn cbam_channel_attention_is_a_gate() {
    let x = input(3, 2, 8, 4, 4, 2.0);
    let mut store = ParamStore::new();
    let block = CbamBlock::new(&mut store, &mut rng(4), "cbam", 8, 4, 3, 1).unwrap();
    let mut fw = Forward::new(&store, Mode::Eval, OniConfig::default());
    let node = fw.graph.input(x.clone()).unwrap();
    let (x_c, a_c) = block.channel_stage(&mut fw, node).unwrap();
    let a_c = fw.graph.value(a_c);
    assert_eq!(a_c.shape(), [2, 8, 1, 1]);
    assert!(a_c.data().iter().all(|a| *a > 0.0 && *a < 1.0));
    let x_c = fw.graph.value(x_c);
    for (i, (xc, xv)) in x_c.data().iter().zip(x.data()).enumerate() {
        let gate = a_c.data()[i / 16];
        assert!((xc - gate * xv).abs() < 1e-15);
    }
}

#[test]
fn mfsa_projections_have_orthonormal_rows() {
    let mut store = ParamStore::<f64>::new();
    let block = MfsaBlock::new(&mut store, &mut rng(9), "mfsa", 16, 4).unwrap();
    let mut fw = Forward::new(&store, Mode::Eval, OniConfig { iterations: 30 });
    for (conv, rows, cols) in [(&block.conv1, 4, 16), (&block.conv2, FOCAL_MAPS, 4)] {
        let node = fw.weight(conv.weight).unwrap();
        let w = fw.graph.value(node).clone().reshape([rows, cols]).unwrap();
        for i in 0..rows {
            for j in 0..rows {
                let dot: f64 = (0..cols).map(|k| w.data()[i * cols + k] * w.data()[j * cols + k]).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-8, "{rows}-row weight: <{i},{j}> = {dot}");
            }
        }
    }
}

#[test]
fn wrong_channel_count_is_rejected() {
    let x = input(0, 2, 6, 4, 4, 1.0);
    let mut store = ParamStore::new();
    let cbam = CbamBlock::new(&mut store, &mut rng(0), "cbam", 8, 4, 3, 1).unwrap();
    let mfsa = MfsaBlock::new(&mut store, &mut rng(0), "mfsa", 8, 2).unwrap();
    let mut fw = Forward::new(&store, Mode::Train, OniConfig::default());
    let node = fw.graph.input(x).unwrap();
    assert!(cbam.forward_cal(&mut fw, node).is_err());
    assert!(mfsa.forward(&mut fw, node).is_err());
}

#[test]
fn invalid_block_shapes_are_rejected() {
    let mut store = ParamStore::<f64>::new();
    assert!(CbamBlock::new(&mut store, &mut rng(0), "a", 8, 3, 3, 1).is_err());
    assert!(CbamBlock::new(&mut store, &mut rng(0), "b", 8, 4, 4, 1).is_err());
    assert!(MfsaBlock::new(&mut store, &mut rng(0), "c", 6, 4).is_err());
    let single = CbamBlock::new(&mut store, &mut rng(0), "d", 8, 4, 3, 1).unwrap();
    let triple = CbamBlock::new(&mut store, &mut rng(0), "e", 8, 4, 3, 3).unwrap();
    let mut fw = Forward::new(&store, Mode::Train, OniConfig::default());
    let node = fw.graph.input(input(0, 2, 8, 4, 4, 1.0)).unwrap();
    assert!(single.forward_softmax(&mut fw, node).is_err());
    assert!(triple.forward_cal(&mut fw, node).is_err());
    assert!(triple.forward_softmax(&mut fw, node).is_ok());
}
