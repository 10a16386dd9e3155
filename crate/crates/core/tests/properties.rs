//! Randomized checks of the tensor ops, ONI, losses and metrics against
//! naive or closed-form oracles.

mod common;

use common::{normal, rng};
use occlusion_attn::evaluation::{tar_at_far, ScoreSet};
use occlusion_attn::losses::{arcface_forward, cross_entropy_forward, ArcfaceConfig};
use occlusion_attn::oni::{convergence_trace, orthogonalize};
use occlusion_attn::{Graph, PoolMode, Tensor};
use proptest::prelude::*;

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * (1.0 + y.abs()))
}

fn eval1(x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, occlusion_attn::NodeId) -> occlusion_attn::Result<occlusion_attn::NodeId>) -> Tensor<f64> {
    let mut g = Graph::new();
    let n = g.input(x.clone()).unwrap();
    let out = f(&mut g, n).unwrap();
    g.value(out).clone()
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, k, _) = w.dims4().unwrap();
    let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (wd + 2 * pad - k) / stride + 1);
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[oi]);
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((oi * c + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Once converged the indicator fluctuates at the float64 round-off floor.
const ROUND_OFF_FLOOR: f64 = 1e-12;

fn gram_residual(w: &Tensor<f64>) -> f64 {
    let (r, c) = w.dims2().unwrap();
    let mut sq = 0.0;
    for i in 0..r {
        for j in 0..r {
            let dot: f64 = (0..c).map(|k| w.data()[i * c + k] * w.data()[j * c + k]).sum();
            let e = dot - if i == j { 1.0 } else { 0.0 };
            sq += e * e;
        }
    }
    sq.sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_direct_loops(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        hw in 3usize..8, k in prop::sample::select(vec![1usize, 3, 5]),
        stride in 1usize..3, bias in any::<bool>(),
    ) {
        prop_assume!(k <= hw + k / 2 * 2);
        let mut r = rng(seed);
        let x = normal::<f64>(&mut r, &[n, c, hw, hw + 1], 1.0);
        let w = normal::<f64>(&mut r, &[o, c, k, k], 1.0);
        let b = normal::<f64>(&mut r, &[o], 1.0);
        let pad = k / 2;
        let mut g = Graph::new();
        let (xn, wn) = (g.input(x.clone()).unwrap(), g.input(w.clone()).unwrap());
        let bn = if bias { Some(g.input(b.clone()).unwrap()) } else { None };
        let out = g.conv2d(xn, wn, bn, stride, pad).unwrap();
        let expected = naive_conv(&x, &w, bias.then_some(&b), stride, pad);
        prop_assert!(close(g.value(out).data(), &expected, 1e-12));
    }

    #[test]
    fn matmul_matches_triple_loop(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, n in 1usize..6) {
        let mut r = rng(seed);
        let a = normal::<f64>(&mut r, &[m, k], 1.0);
        let b = normal::<f64>(&mut r, &[k, n], 1.0);
        let mut g = Graph::new();
        let (an, bn) = (g.input(a.clone()).unwrap(), g.input(b.clone()).unwrap());
        let out = g.matmul(an, bn).unwrap();
        let expected: Vec<f64> = (0..m * n)
            .map(|idx| (0..k).map(|p| a.data()[idx / n * k + p] * b.data()[p * n + idx % n]).sum())
            .collect();
        prop_assert!(close(g.value(out).data(), &expected, 1e-12));
    }

    #[test]
    fn broadcast_mul_repeats_singleton_axes(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, h in 1usize..4, w in 1usize..4, over_channels in any::<bool>()) {
        let mut r = rng(seed);
        let x = normal::<f64>(&mut r, &[n, c, h, w], 1.0);
        let gate_shape = if over_channels { [n, 1, h, w] } else { [n, c, 1, 1] };
        let gate = normal::<f64>(&mut r, &gate_shape, 1.0);
        let mut g = Graph::new();
        let (xn, gn) = (g.input(x.clone()).unwrap(), g.input(gate.clone()).unwrap());
        let ab = g.mul(gn, xn).unwrap();
        let ba = g.mul(xn, gn).unwrap();
        prop_assert_eq!(g.value(ab).data(), g.value(ba).data());
        for (i, v) in g.value(ab).data().iter().enumerate() {
            let (ni, ci, p) = (i / (c * h * w), i / (h * w) % c, i % (h * w));
            let gv = if over_channels { gate.data()[ni * h * w + p] } else { gate.data()[ni * c + ci] };
            prop_assert_eq!(*v, gv * x.data()[i]);
        }
    }

    #[test]
    fn channel_softmax_is_a_shift_invariant_distribution(seed in any::<u64>(), c in 2usize..5, shift in -50.0f64..50.0, std in 0.1f64..30.0) {
        let x = normal::<f64>(&mut rng(seed), &[2, c, 3, 2], std);
        let p = eval1(&x, |g, n| g.softmax_channel(n));
        let shifted = eval1(&x.map(|v| v + shift), |g, n| g.softmax_channel(n));
        prop_assert!(close(p.data(), shifted.data(), 1e-12));
        for ni in 0..2 {
            for pos in 0..6 {
                let col: Vec<f64> = (0..c).map(|ci| p.data()[(ni * c + ci) * 6 + pos]).collect();
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let logits: Vec<f64> = (0..c).map(|ci| x.data()[(ni * c + ci) * 6 + pos]).collect();
                let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
                for (pv, l) in col.iter().zip(&logits) {
                    prop_assert!((pv - (l - top).exp() / z).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pools_match_reductions(seed in any::<u64>(), c in 1usize..5, h in 1usize..4, w in 1usize..4) {
        let x = normal::<f64>(&mut rng(seed), &[2, c, h, w], 1.0);
        let hw = h * w;
        let sp_max = eval1(&x, |g, n| g.pool_spatial(n, PoolMode::Max));
        let sp_avg = eval1(&x, |g, n| g.pool_spatial(n, PoolMode::Avg));
        prop_assert_eq!(sp_max.shape(), &[2, c, 1, 1][..]);
        for (i, plane) in x.data().chunks(hw).enumerate() {
            prop_assert_eq!(sp_max.data()[i], plane.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            prop_assert!((sp_avg.data()[i] - plane.iter().sum::<f64>() / hw as f64).abs() < 1e-14);
        }
        let ch_max = eval1(&x, |g, n| g.pool_channel(n, PoolMode::Max));
        let ch_avg = eval1(&x, |g, n| g.pool_channel(n, PoolMode::Avg));
        prop_assert_eq!(ch_max.shape(), &[2, 1, h, w][..]);
        for ni in 0..2 {
            for p in 0..hw {
                let col: Vec<f64> = (0..c).map(|ci| x.data()[(ni * c + ci) * hw + p]).collect();
                prop_assert_eq!(ch_max.data()[ni * hw + p], col.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                prop_assert!((ch_avg.data()[ni * hw + p] - col.iter().sum::<f64>() / c as f64).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn oni_rows_become_orthonormal(seed in any::<u64>(), rows in 1usize..5, extra in 2usize..12) {
        let z = normal::<f64>(&mut rng(seed), &[rows, rows * 2 + extra], 1.0);
        let w = orthogonalize(&z, 40).unwrap();
        prop_assert!(gram_residual(&w) < 1e-9);
    }

    #[test]
    fn oni_is_scale_invariant(seed in any::<u64>(), rows in 1usize..5, extra in 0usize..6, c in 1e-3f64..1e3) {
        let z = normal::<f64>(&mut rng(seed), &[rows, rows + extra], 1.0);
        let a = orthogonalize(&z, 8).unwrap();
        let b = orthogonalize(&z.map(|v| v * c), 8).unwrap();
        prop_assert!(close(a.data(), b.data(), 1e-10));
    }

    #[test]
    fn oni_convergence_indicator_never_increases(seed in any::<u64>(), rows in 1usize..6, extra in 0usize..8) {
        let z = normal::<f64>(&mut rng(seed), &[rows, rows + extra], 1.0);
        let trace = convergence_trace(&z, 20).unwrap();
        for t in 1..trace.len() {
            prop_assert!(trace[t] <= trace[t - 1] + ROUND_OFF_FLOOR, "t={t}: {:?}", trace);
        }
    }

    #[test]
    fn arcface_ignores_embedding_and_weight_scale(seed in any::<u64>(), a in 1e-3f64..1e3, b in 1e-3f64..1e3, m in 0.0f64..1.0) {
        let mut r = rng(seed);
        let z = normal::<f64>(&mut r, &[4, 5], 1.0);
        let w = normal::<f64>(&mut r, &[5, 3], 1.0);
        let labels = [0, 2, 1, 2];
        let cfg = ArcfaceConfig::new(16.0, m);
        let base = arcface_forward(&z, &w, &labels, &cfg).unwrap().0;
        let scaled = arcface_forward(&z.map(|v| v * a), &w.map(|v| v * b), &labels, &cfg).unwrap().0;
        prop_assert!((base - scaled).abs() < 1e-10);
    }

    #[test]
    fn arcface_without_margin_is_scaled_cosine_softmax(seed in any::<u64>(), s in 1.0f64..64.0) {
        let mut r = rng(seed);
        let z = normal::<f64>(&mut r, &[3, 4], 1.0);
        let w = normal::<f64>(&mut r, &[4, 5], 1.0);
        let labels = [4, 0, 2];
        let loss = arcface_forward(&z, &w, &labels, &ArcfaceConfig::new(s, 0.0)).unwrap().0;
        let logits = Tensor::from_fn([3, 5], |i| {
            let (row, col) = (i / 5, i % 5);
            let zr: Vec<f64> = (0..4).map(|k| z.data()[row * 4 + k]).collect();
            let wc: Vec<f64> = (0..4).map(|k| w.data()[k * 5 + col]).collect();
            let dot: f64 = zr.iter().zip(&wc).map(|(p, q)| p * q).sum();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            s * dot / (norm(&zr) * norm(&wc))
        });
        let ce = cross_entropy_forward(&logits, &labels).unwrap().0;
        prop_assert!((loss - ce).abs() < 1e-8);
    }

    #[test]
    fn larger_margin_never_lowers_the_monotone_loss(seed in any::<u64>(), m1 in 0.0f64..1.5, dm in 0.0f64..0.5) {
        let mut r = rng(seed);
        let z = normal::<f64>(&mut r, &[4, 3], 1.0);
        let w = normal::<f64>(&mut r, &[3, 4], 1.0);
        let labels = [0, 1, 2, 3];
        let loss = |m: f64| {
            let cfg = ArcfaceConfig { monotone_fallback: true, ..ArcfaceConfig::new(8.0, m) };
            arcface_forward(&z, &w, &labels, &cfg).unwrap().0
        };
        let m2 = (m1 + dm).min(std::f64::consts::FRAC_PI_2);
        prop_assert!(loss(m2) >= loss(m1.min(m2)) - 1e-12);
    }

    #[test]
    fn tar_never_decreases_with_far(seed in any::<u64>(), n_gen in 1usize..40, n_imp in 1usize..200) {
        let mut r = rng(seed);
        let genuine = normal::<f64>(&mut r, &[n_gen], 1.0).data().iter().map(|v| v + 1.0).collect();
        let impostor = normal::<f64>(&mut r, &[n_imp], 1.0).into_data();
        let scores = ScoreSet { genuine, impostor };
        let grid = [1e-3, 5e-3, 1e-2, 0.05, 0.1, 0.3, 1.0];
        let tars: Vec<f64> = grid.iter().map(|&f| tar_at_far(&scores, f).unwrap().tar).collect();
        prop_assert!(tars.windows(2).all(|p| p[0] <= p[1]), "{tars:?}");
        prop_assert_eq!(tars[grid.len() - 1], 1.0);
    }
}

#[test]
fn grad_reverse_is_identity_forward_and_negated_backward() {
    let x = normal::<f64>(&mut rng(5), &[2, 3], 1.0);
    let up = normal::<f64>(&mut rng(6), &[2, 3], 1.0);
    for lambda in [0.0, 0.3, 1.0, 2.5] {
        let mut g = Graph::new();
        let xn = g.variable(x.clone()).unwrap();
        let r = g.grad_reverse(xn, lambda).unwrap();
        assert_eq!(g.value(r).data(), x.data());
        let c = g.input(up.clone()).unwrap();
        let prod = g.mul(r, c).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(xn).unwrap();
        for (gv, u) in grad.data().iter().zip(up.data()) {
            assert_eq!(*gv, -lambda * u);
        }
    }
}
