use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::domain::{BBoxMap, MaskStack, NUM_TEETH};

fn tiny(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        variant,
        depth: 2,
        base_filters: 4,
        bb_levels: 2,
        ..Default::default()
    }
}

fn random_image(n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(n, 1, h, w, (0..n * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn box_map(h: usize, w: usize, boxes: &[(usize, usize, usize, usize, usize)]) -> BBoxMap {
    let mut m = BBoxMap::new(h, w);
    for &(c, y0, x0, y1, x1) in boxes {
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(c, y, x, true);
            }
        }
    }
    m
}

fn assert_softmax(p: &Tensor) {
    let plane = p.plane();
    for i in 0..p.n {
        let s = p.sample(i);
        for px in 0..plane {
            let sum: f32 = (0..p.c).map(|c| s[c * plane + px]).sum();
            assert!((sum - 1.0).abs() <= 1e-5, "pixel sum {sum}");
        }
    }
}

#[test]
fn output_shape_and_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Network::new(tiny(Variant::OralBbNet), 1).unwrap();
    let x = random_image(2, 16, 24, &mut rng);
    let b = box_map(16, 24, &[(0, 2, 3, 9, 11), (31, 8, 12, 16, 24)]);
    let prior = PriorPyramid::new(&[&b, &b], 2).unwrap();
    let y = net.forward(&x, Some(&prior)).unwrap();
    assert_eq!(y.shape(), [2, NUM_TEETH + 1, 16, 24]);
    assert_softmax(&y);
}

#[test]
fn rejects_bad_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let net = Network::new(tiny(Variant::OralBbNet), 1).unwrap();
    let x = random_image(1, 16, 16, &mut rng);
    assert!(matches!(net.forward(&x, None), Err(crate::Error::MissingPrior(_))));
    let odd = random_image(1, 18, 16, &mut rng);
    assert!(net.forward(&odd, None).is_err());
    let small = BBoxMap::new(8, 8);
    let p = PriorPyramid::new(&[&small], 2).unwrap();
    assert!(net.forward(&x, Some(&p)).is_err());
    assert!(NetworkConfig {
        bb_levels: 5,
        ..Default::default()
    }
    .validate()
    .is_err());
}

#[test]
fn eval_mode_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Network::new(tiny(Variant::UNet), 9).unwrap();
    let x = random_image(1, 16, 16, &mut rng);
    let a = net.forward(&x, None).unwrap();
    let b = net.forward(&x, None).unwrap();
    assert_eq!(a.data, b.data);
}

#[test]
fn bypassed_gates_equal_plain_unet() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gated = Network::new(tiny(Variant::OralBbNet), 5).unwrap();
    let plain = Network::new(tiny(Variant::UNet), 5).unwrap();
    let x = random_image(2, 16, 16, &mut rng);
    let a = gated.without_gates().forward(&x, None).unwrap();
    let b = plain.forward(&x, None).unwrap();
    assert_eq!(a.data, b.data);
    assert_eq!(gated.without_gates(), plain);
}

#[test]
fn zero_prior_gives_half_gate() {
    let net = Network::new(tiny(Variant::OralBbNet), 5).unwrap();
    let z = BBoxMap::new(16, 16);
    let p = PriorPyramid::new(&[&z], 2).unwrap();
    for level in 0..2 {
        let g = net.gate_map(level, &p).unwrap();
        assert_eq!(g.shape(), [1, net.config.filters(level), 16 >> level, 16 >> level]);
        assert!(g.data.iter().all(|&v| v == 0.5));
    }
    let b = box_map(16, 16, &[(4, 0, 0, 16, 16), (7, 3, 3, 5, 9)]);
    let p = PriorPyramid::new(&[&b], 2).unwrap();
    let g = net.gate_map(1, &p).unwrap();
    assert!(g.data.iter().all(|&v| v > 0.0 && v < 1.0));
}

#[test]
fn pooled_prior_stays_binary() {
    let b = box_map(16, 16, &[(2, 1, 1, 6, 7), (20, 9, 3, 10, 4)]);
    let mut cur = b.clone();
    for _ in 0..4 {
        cur = cur.max_pool2();
        assert!(cur.as_raw().iter().all(|&v| v <= 1));
    }
    let p = PriorPyramid::new(&[&b], 3).unwrap();
    let plane8 = 64u32;
    // the 1x1 box at (9, 3) lands at (4, 1) after one pooling
    assert!(p.level(1)[0].contains(&(20 * plane8 + 4 * 8 + 1)));
}

#[test]
fn gating_is_local() {
    // two 3x3 convolutions: receptive radius 2 at the gate's level
    let net = Network::new(tiny(Variant::OralBbNet), 8).unwrap();
    let near = box_map(32, 32, &[(3, 2, 2, 6, 6)]);
    let far = box_map(32, 32, &[(3, 2, 2, 6, 6), (3, 26, 26, 32, 32), (9, 20, 0, 32, 8)]);
    let pn = PriorPyramid::new(&[&near], 1).unwrap();
    let pf = PriorPyramid::new(&[&far], 1).unwrap();
    let gn = net.gate_map(0, &pn).unwrap();
    let gf = net.gate_map(0, &pf).unwrap();
    for c in 0..gn.c {
        for (y, x) in [(4usize, 4usize), (0, 0), (10, 10), (17, 12)] {
            assert_eq!(gn.channel(0, c)[y * 32 + x], gf.channel(0, c)[y * 32 + x]);
        }
    }
    assert_ne!(gn.channel(0, 0)[28 * 32 + 28], gf.channel(0, 0)[28 * 32 + 28]);
}

#[test]
fn spatial_dropout_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut block = ConvBlock::new(1, 100, 1, 0.12, &mut rng);
    block.conv.bias.value.iter_mut().for_each(|b| *b = 1.0);
    block.conv.weight.value.iter_mut().for_each(|w| *w = 0.0);
    let x = Tensor::zeros(100, 1, 2, 2);
    // constant activations normalize to beta = 0; shift beta so zeros are dropouts
    block.bn.beta.value.iter_mut().for_each(|b| *b = 1.0);
    let (y, _) = block.forward_train(&x, &mut rng);
    let zeroed = y.data.chunks(4).filter(|c| c.iter().all(|&v| v == 0.0)).count();
    let frac = zeroed as f64 / 10_000.0;
    assert!((frac - 0.12).abs() <= 0.02, "{frac}");
    let kept = y.data.chunks(4).find(|c| c[0] != 0.0).unwrap();
    assert!((kept[0] - 1.0 / 0.88).abs() < 1e-5);
}

#[test]
fn zero_input_zero_bias_block_is_zero_before_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let block = ConvBlock::new(3, 4, 3, 0.12, &mut rng);
    let y = block.conv.forward(&Tensor::zeros(1, 3, 4, 4));
    assert!(y.data.iter().all(|v| v.max(0.0) == 0.0));
}

#[test]
fn predict_mask_argmax() {
    let (h, w) = (4, 4);
    let mut probs = Tensor::zeros(1, NUM_TEETH + 1, h, w);
    for c in 0..=NUM_TEETH {
        probs.channel_mut(0, c).iter_mut().for_each(|v| *v = 1.0 / 34.0);
    }
    probs.channel_mut(0, NUM_TEETH).iter_mut().for_each(|v| *v = 2.0 / 34.0);
    assert_eq!(predict_mask(&probs, 0).unwrap(), MaskStack::new(h, w));

    let mut truth = MaskStack::new(h, w);
    truth.set(0, 0, 0, true);
    truth.set(31, 3, 3, true);
    truth.set(12, 1, 2, true);
    let target = target_batch(&[&truth]).unwrap();
    let one_hot = Tensor::from_vec(1, NUM_TEETH + 1, h, w, target.iter().map(|&v| v as f32).collect()).unwrap();
    let back = predict_mask(&one_hot, 0).unwrap();
    assert_eq!(back, truth);
    for px in 0..h * w {
        assert!((0..NUM_TEETH).filter(|&c| back.channel(c)[px] != 0).count() <= 1);
    }
}

fn objective(p: &Tensor, probe: &[f32]) -> f64 {
    p.data.iter().zip(probe).map(|(a, b)| *a as f64 * *b as f64).sum()
}

#[test]
fn network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = NetworkConfig {
        drop_rate: 0.0,
        base_filters: 2,
        ..tiny(Variant::OralBbNet)
    };
    let mut net = Network::new(cfg, 4).unwrap();
    // non-zero gate biases so both gate convolutions carry gradient signal
    for g in net.gates.iter_mut() {
        g.conv2.bias.value.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    let x = random_image(2, 8, 8, &mut rng);
    let b0 = box_map(8, 8, &[(0, 1, 1, 5, 4), (5, 3, 2, 8, 8)]);
    let b1 = box_map(8, 8, &[(0, 0, 0, 3, 3), (17, 4, 4, 7, 6)]);
    let prior = PriorPyramid::new(&[&b0, &b1], 2).unwrap();
    let probe: Vec<f32> = (0..2 * 33 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();

    let eval = |n: &Network| {
        let mut n = n.clone();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let c = n.forward_train(&x, Some(&prior), &mut r).unwrap();
        objective(c.probs(), &probe)
    };

    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut work = net.clone();
    work.zero_grad();
    let cache = work.forward_train(&x, Some(&prior), &mut r).unwrap();
    let dprobs = Tensor::from_vec(2, 33, 8, 8, probe.clone()).unwrap();
    work.backward(&cache, &dprobs, Some(&prior)).unwrap();
    let grads: Vec<Vec<f32>> = work.params_mut().iter().map(|p| p.grad.clone()).collect();

    let n_params = grads.len();
    let mut checked = 0;
    let mut worst = 0f64;
    for pi in 0..n_params {
        let len = grads[pi].len();
        for &j in [0, len / 2, len - 1].iter() {
            let h = 1e-3f32;
            let mut plus = net.clone();
            plus.params_mut()[pi].value[j] += h;
            let mut minus = net.clone();
            minus.params_mut()[pi].value[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h as f64);
            let an = grads[pi][j] as f64;
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-2));
            worst = worst.max(err);
            checked += 1;
        }
    }
    assert!(checked > 100);
    assert!(worst < 0.05, "worst relative error {worst}");
}
