//! Attack loop invariants and variant oracles on small random networks.

mod support;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xpose::attack::{craft, dim_draw, dim_transform, AttackConfig, Ensemble, Surrogate, Variant};
use xpose::tensor::{Dense, Layer, LayerKind, Shape, Tensor};
use xpose::zoo::{InputSpec, ModelGraph};

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn inputs(model: &ModelGraph, b: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let spec = model.input_spec();
    let mut r = support::rng(seed);
    let x = support::uniform_tensor(spec.batch_shape(b), 0.0, 1.0, &mut r);
    let labels = (0..b).map(|_| r.gen_range(0..spec.num_classes)).collect();
    (x, labels)
}

fn cfg(eps: f32, variant: Variant, seed: u64) -> AttackConfig {
    AttackConfig {
        seed,
        ..AttackConfig::new(eps, variant)
    }
}

fn any_variant() -> impl Strategy<Value = Variant> {
    prop_oneof![
        Just(Variant::Ifgsm),
        Just(Variant::Mifgsm),
        (0.0f64..=1.0).prop_map(|p| Variant::Dim { p }),
        prop::sample::select(vec![1usize, 3, 5, 7]).prop_map(|k| Variant::Tim { k }),
        (1usize..4).prop_map(|m| Variant::Sim { m }),
        (1usize..4, 0.0f32..=1.0, 0.0f32..4.0).prop_map(|(n, delta, zeta)| Variant::Pgn { n, delta, zeta }),
        (0usize..4, 1.0f32..12.0).prop_map(|(k_pre, s)| Variant::Gifgsm { k_pre, s }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adversarials_stay_in_the_ball_and_the_pixel_range(
        net in 0u64..10,
        variant in any_variant(),
        eps in 0.0f32..0.2,
        iters in 1usize..6,
        momentum in 0.0f32..2.0,
        step in prop::option::of(0.001f32..0.2),
        seed in any::<u64>(),
    ) {
        let model = support::random_net(net);
        let (x, labels) = inputs(&model, 3, seed);
        let c = AttackConfig { epsilon: eps, iters, step, momentum, variant, seed };
        let adv = craft(&model, &x, &labels, &c).unwrap();
        prop_assert_eq!(adv.shape(), x.shape());
        for (a, b) in adv.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() <= eps + 1e-6);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn dim_keeps_the_input_size(h in 4usize..40, w in 4usize..40, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = dim_draw(&mut r, h, w);
        prop_assert!(d.r_h >= h && d.r_h <= d.canvas_h);
        prop_assert!(d.r_w >= w && d.r_w <= d.canvas_w);
        let x = Tensor::full(Shape::new(2, h, w, 3), 0.5);
        let (y, map) = dim_transform(&x, d);
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert_eq!(map.len(), h * w);
    }
}

#[test]
fn degenerate_variants_equal_the_momentum_baseline_bit_for_bit() {
    for net in 0..4 {
        let model = support::random_net(net);
        let (x, labels) = inputs(&model, 4, 77 + net);
        let base = craft(&model, &x, &labels, &cfg(8.0 / 255.0, Variant::Mifgsm, 5)).unwrap();
        assert_ne!(bits(&base), bits(&x), "net {net}: baseline attack did nothing");
        for v in [
            Variant::Dim { p: 0.0 },
            Variant::Tim { k: 1 },
            Variant::Sim { m: 1 },
            Variant::Pgn { n: 1, delta: 0.0, zeta: 0.0 },
            Variant::Gifgsm { k_pre: 0, s: 10.0 },
        ] {
            let out = craft(&model, &x, &labels, &cfg(8.0 / 255.0, v, 5)).unwrap();
            assert_eq!(bits(&out), bits(&base), "net {net}: {v:?}");
        }
    }
}

#[test]
fn stochastic_variants_are_reproducible_per_seed() {
    let model = support::random_net(3);
    let (x, labels) = inputs(&model, 4, 1);
    for v in [Variant::Dim { p: 1.0 }, Variant::pgn()] {
        let a = craft(&model, &x, &labels, &cfg(0.05, v, 9)).unwrap();
        let b = craft(&model, &x, &labels, &cfg(0.05, v, 9)).unwrap();
        let c = craft(&model, &x, &labels, &cfg(0.05, v, 10)).unwrap();
        assert_eq!(bits(&a), bits(&b), "{v:?}");
        assert_ne!(bits(&a), bits(&c), "{v:?}: seed had no effect");
    }
}

fn l1_normalised(g: &[f64]) -> Vec<f64> {
    let n: f64 = g.iter().map(|v| v.abs()).sum();
    g.iter().map(|v| v / n).collect()
}

/// One attack step from the clean image with an oracle gradient `g`:
/// only pixels whose oracle sign is unambiguous are compared.
fn check_one_step(x: &Tensor, adv: &Tensor, g: &[f64], alpha: f32, eps: f32) {
    let img = x.shape().image_len();
    let mut compared = 0;
    for (n, gi) in g.chunks(img).enumerate() {
        let gi = l1_normalised(gi);
        let scale = gi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (p, &v) in gi.iter().enumerate() {
            if v.abs() < 1e-4 * scale {
                continue;
            }
            let x0 = x.data()[n * img + p];
            let want = (x0 + alpha * v.signum() as f32).clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
            assert_eq!(adv.data()[n * img + p], want, "image {n} pixel {p}");
            compared += 1;
        }
    }
    assert!(compared > g.len() / 2);
}

fn grad64(model: &ModelGraph, x: &Tensor, labels: &[usize]) -> Vec<f64> {
    model.loss_grad(x, labels).unwrap().data().iter().map(|&v| v as f64).collect()
}

#[test]
fn scale_copies_match_a_brute_force_loop() {
    let model = support::random_net(5);
    let (x, labels) = inputs(&model, 3, 4);
    let eps = 0.03;
    let mut c = cfg(eps, Variant::Sim { m: 5 }, 0);
    c.iters = 1;
    let adv = craft(&model, &x, &labels, &c).unwrap();
    let mut acc = vec![0.0f64; x.data().len()];
    for i in 0..5 {
        let scale = 0.5f32.powi(i);
        let g = grad64(&model, &x.map(|v| v * scale), &labels);
        acc.iter_mut().zip(&g).for_each(|(a, b)| *a += scale as f64 * b / 5.0);
    }
    check_one_step(&x, &adv, &acc, c.alpha(), eps);
}

#[test]
fn neighbourhood_samples_match_a_brute_force_accumulation() {
    let model = support::random_net(6);
    let (x, labels) = inputs(&model, 2, 8);
    let eps = 0.03;
    let (n, delta, zeta) = (20usize, 0.5f32, 3.0f32);
    let mut c = cfg(eps, Variant::Pgn { n, delta, zeta }, 31);
    c.iters = 1;
    let adv = craft(&model, &x, &labels, &c).unwrap();

    // Same stream: one uniform draw per pixel per sample, in pixel order.
    let mut r = ChaCha8Rng::seed_from_u64(31);
    let radius = zeta * eps;
    let alpha = c.alpha();
    let img = x.shape().image_len();
    let mut acc = vec![0.0f64; x.data().len()];
    for _ in 0..n {
        let mut xs = x.clone();
        xs.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-radius..=radius));
        let g1 = model.loss_grad(&xs, &labels).unwrap();
        let mut ahead = xs.clone();
        for (xa, gi) in ahead.data_mut().chunks_mut(img).zip(g1.data().chunks(img)) {
            let mean_abs = gi.iter().map(|v| v.abs()).sum::<f32>() / img as f32;
            xa.iter_mut().zip(gi).for_each(|(a, g)| *a -= alpha * g / mean_abs);
        }
        let g2 = model.loss_grad(&ahead, &labels).unwrap();
        for ((a, u), v) in acc.iter_mut().zip(g1.data()).zip(g2.data()) {
            *a += ((1.0 - delta as f64) * *u as f64 + delta as f64 * *v as f64) / n as f64;
        }
    }
    check_one_step(&x, &adv, &acc, alpha, eps);
}

fn linear(name: &str, spec: InputSpec, weight: Vec<f32>, bias: Vec<f32>) -> ModelGraph {
    let d = spec.h * spec.w * spec.c;
    ModelGraph::new(
        name,
        spec,
        vec![
            Layer::new("flatten", LayerKind::Flatten),
            Layer::new(
                "fc",
                LayerKind::Dense(Dense {
                    in_dim: d,
                    out_dim: spec.num_classes,
                    weight,
                    bias,
                }),
            ),
        ],
    )
    .unwrap()
}

#[test]
fn ensemble_of_identical_members_matches_the_single_model() {
    let model = support::random_net(4);
    let mut twin = model.clone();
    twin.set_name("twin");
    let (x, labels) = inputs(&model, 4, 12);
    let single = model.loss_grad(&x, &labels).unwrap();
    let one = Ensemble::new(vec![&model]).unwrap();
    let two = Ensemble::new(vec![&model, &twin]).unwrap();
    assert_eq!(bits(&one.loss_grad(&x, &labels).unwrap()), bits(&single));
    assert_eq!(bits(&two.loss_grad(&x, &labels).unwrap()), bits(&single));
    let c = cfg(8.0 / 255.0, Variant::Mifgsm, 0);
    assert_eq!(
        bits(&craft(&two, &x, &labels, &c).unwrap()),
        bits(&craft(&model, &x, &labels, &c).unwrap())
    );
}

#[test]
fn ensemble_of_linear_models_uses_the_averaged_weights() {
    let spec = InputSpec::new(3, 3, 2, 4);
    let d = 18 * 4;
    let mut r = support::rng(2);
    let w1: Vec<f32> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let w2: Vec<f32> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let b1: Vec<f32> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let b2: Vec<f32> = (0..4).map(|_| r.gen_range(-1.0..1.0)).collect();
    let avg = |a: &[f32], b: &[f32]| -> Vec<f32> { a.iter().zip(b).map(|(p, q)| (p + q) / 2.0).collect() };
    let m1 = linear("a", spec, w1.clone(), b1.clone());
    let m2 = linear("b", spec, w2.clone(), b2.clone());
    let mean = linear("mean", spec, avg(&w1, &w2), avg(&b1, &b2));
    let x = support::uniform_tensor(spec.batch_shape(5), 0.0, 1.0, &mut r);
    let labels = vec![0, 1, 2, 3, 1];
    let ens = Ensemble::new(vec![&m1, &m2]).unwrap();
    let got = ens.loss_grad(&x, &labels).unwrap();
    let want = mean.loss_grad(&x, &labels).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-6, "{}", got.max_abs_diff(&want));
    assert_eq!(ens.id(), "ens-a+b");
}

#[test]
fn ensemble_members_must_share_an_input_spec() {
    let a = support::random_net(0);
    let b = support::random_net(1);
    assert_ne!(a.input_spec(), b.input_spec());
    assert!(Ensemble::new(vec![&a, &b]).is_err());
    assert!(Ensemble::new(vec![]).is_err());
}
