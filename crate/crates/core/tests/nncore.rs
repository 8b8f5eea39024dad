mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transferlab::nncore::layers::{self, Want};
use transferlab::nncore::{
    grad_check, grad_check_model, ConvSpec, DropoutMode, ForwardMode, LayerState, LrnSpec, Model,
    ModelSpec, PoolSpec, Tensor,
};

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(shape, data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn conv_matches_loop_nest_on_reference_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_vec(&mut rng, 2 * 5 * 5);
    let w = rand_vec(&mut rng, 3 * 2 * 3 * 3);
    let b = rand_vec(&mut rng, 3);
    let conv = ConvSpec { out_channels: 3, kernel: 3, stride: 2, pad: 1 };
    let layer = LayerState::new(tensor(&[3, 2, 3, 3], w.clone()), tensor(&[3], b.clone()));
    let fast = layers::conv_forward(&tensor(&[2, 5, 5], x.clone()), &layer, &conv).unwrap();
    let (slow, shape) = brute_conv(&x, [2, 5, 5], &w, &b, 3, 3, 2, 1);
    assert_eq!(fast.shape(), &shape);
    assert_eq!(shape, [3, 3, 3]);
    assert!(max_abs_diff(fast.data(), &slow) < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_fast_path_equals_oracle(
        c in 1usize..4, h in 1usize..9, w in 1usize..9, oc in 1usize..4,
        k in 1usize..5, s in 1usize..4, p in 0usize..3, seed in any::<u64>(),
    ) {
        prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_vec(&mut rng, c * h * w);
        let wt = rand_vec(&mut rng, oc * c * k * k);
        let b = rand_vec(&mut rng, oc);
        let conv = ConvSpec { out_channels: oc, kernel: k, stride: s, pad: p };
        let layer = LayerState::new(tensor(&[oc, c, k, k], wt.clone()), tensor(&[oc], b.clone()));
        let fast = layers::conv_forward(&tensor(&[c, h, w], x.clone()), &layer, &conv).unwrap();
        let (slow, shape) = brute_conv(&x, [c, h, w], &wt, &b, oc, k, s, p);
        prop_assert_eq!(fast.shape(), &shape[..]);
        prop_assert!(max_abs_diff(fast.data(), &slow) < 1e-10);
    }

    #[test]
    fn maxpool_equals_oracle(
        c in 1usize..4, h in 1usize..9, w in 1usize..9, win in 1usize..4, s in 1usize..4,
        seed in any::<u64>(),
    ) {
        prop_assume!(h >= win && w >= win);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_vec(&mut rng, c * h * w);
        let (fast, _) = layers::maxpool_forward(&tensor(&[c, h, w], x.clone()), &PoolSpec { window: win, stride: s }).unwrap();
        let (slow, shape) = brute_maxpool(&x, [c, h, w], win, s);
        prop_assert_eq!(fast.shape(), &shape[..]);
        prop_assert!(max_abs_diff(fast.data(), &slow) < 1e-10);
    }

    #[test]
    fn lrn_equals_oracle(
        c in 1usize..9, h in 1usize..5, w in 1usize..5, size in 1usize..7,
        alpha in 0.0f64..1.0, beta in 0.0f64..1.5, k in 0.5f64..3.0, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_vec(&mut rng, c * h * w);
        let spec = LrnSpec { size, alpha, beta, k };
        let (fast, _) = layers::lrn_forward(&tensor(&[c, h, w], x.clone()), &spec).unwrap();
        let slow = brute_lrn(&x, [c, h, w], size, alpha, beta, k);
        prop_assert!(max_abs_diff(fast.data(), &slow) < 1e-10);
    }
}

#[test]
fn maxpool_reference_6x6() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_vec(&mut rng, 36);
    let (fast, arg) = layers::maxpool_forward(&tensor(&[1, 6, 6], x.clone()), &PoolSpec { window: 2, stride: 2 }).unwrap();
    let (slow, _) = brute_maxpool(&x, [1, 6, 6], 2, 2);
    assert_eq!(fast.data(), slow.as_slice());
    for (v, i) in fast.data().iter().zip(arg) {
        assert_eq!(*v, x[i]);
    }
}

#[test]
fn relu_backward_matches_finite_differences() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // keep inputs away from the kink at zero
        let x: Vec<f64> = rand_vec(&mut rng, 24)
            .into_iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
            .collect();
        let r = rand_vec(&mut rng, 24);
        let analytic = layers::relu_backward(&tensor(&[24], x.clone()), &tensor(&[24], r.clone()));
        let numeric = finite_diff(|v| dot(layers::relu(&tensor(&[24], v.to_vec())).data(), &r), &x, 1e-6);
        assert!(max_rel_err(analytic.data(), &numeric) < 1e-4, "seed {seed}");
    }
}

#[test]
fn lrn_backward_matches_finite_differences() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = [7, 3, 2];
        // large enough alpha that the cross-channel term matters
        let spec = if seed % 2 == 0 { LrnSpec::default() } else { LrnSpec { alpha: 0.3, ..LrnSpec::default() } };
        let x = rand_vec(&mut rng, 42).into_iter().map(|v| 3.0 * v).collect::<Vec<_>>();
        let r = rand_vec(&mut rng, 42);
        let xt = tensor(&shape, x.clone());
        let (_, scale) = layers::lrn_forward(&xt, &spec).unwrap();
        let analytic = layers::lrn_backward(&xt, &scale, &spec, &tensor(&shape, r.clone())).unwrap();
        let numeric = finite_diff(
            |v| dot(layers::lrn_forward(&tensor(&shape, v.to_vec()), &spec).unwrap().0.data(), &r),
            &x,
            1e-6,
        );
        assert!(max_rel_err(analytic.data(), &numeric) < 1e-4, "seed {seed}");
    }
}

#[test]
fn conv_backward_matches_finite_differences() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = ConvSpec { out_channels: 2, kernel: 3, stride: 1 + (seed as usize % 2), pad: 1 };
        let x = rand_vec(&mut rng, 2 * 5 * 5);
        let w = rand_vec(&mut rng, 2 * 2 * 9);
        let b = rand_vec(&mut rng, 2);
        let out = conv.output_extent(5).unwrap();
        let r = rand_vec(&mut rng, 2 * out * out);
        let grads = layers::conv_backward(
            &tensor(&[2, 5, 5], x.clone()),
            &tensor(&[2, 2, 3, 3], w.clone()),
            &conv,
            &tensor(&[2, out, out], r.clone()),
            Want { input: true, params: true },
        )
        .unwrap();
        let f = |x: &[f64], w: &[f64], b: &[f64]| {
            let layer = LayerState::new(tensor(&[2, 2, 3, 3], w.to_vec()), tensor(&[2], b.to_vec()));
            dot(layers::conv_forward(&tensor(&[2, 5, 5], x.to_vec()), &layer, &conv).unwrap().data(), &r)
        };
        let nx = finite_diff(|v| f(v, &w, &b), &x, 1e-6);
        let nw = finite_diff(|v| f(&x, v, &b), &w, 1e-6);
        let nb = finite_diff(|v| f(&x, &w, v), &b, 1e-6);
        assert!(max_rel_err(grads.input.unwrap().data(), &nx) < 1e-4);
        assert!(max_rel_err(grads.weights.unwrap().data(), &nw) < 1e-4);
        assert!(max_rel_err(grads.bias.unwrap().data(), &nb) < 1e-4);
    }
}

#[test]
fn fc_backward_matches_finite_differences() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_vec(&mut rng, 6);
        let w = rand_vec(&mut rng, 4 * 6);
        let b = rand_vec(&mut rng, 4);
        let r = rand_vec(&mut rng, 4);
        let grads = layers::fc_backward(
            &tensor(&[6], x.clone()),
            &tensor(&[4, 6], w.clone()),
            &tensor(&[4], r.clone()),
            Want { input: true, params: true },
        )
        .unwrap();
        let f = |x: &[f64], w: &[f64], b: &[f64]| {
            let layer = LayerState::new(tensor(&[4, 6], w.to_vec()), tensor(&[4], b.to_vec()));
            dot(layers::fc_forward(&tensor(&[6], x.to_vec()), &layer).unwrap().data(), &r)
        };
        assert!(max_rel_err(grads.input.unwrap().data(), &finite_diff(|v| f(v, &w, &b), &x, 1e-6)) < 1e-4);
        assert!(max_rel_err(grads.weights.unwrap().data(), &finite_diff(|v| f(&x, v, &b), &w, 1e-6)) < 1e-4);
        assert!(max_rel_err(grads.bias.unwrap().data(), &finite_diff(|v| f(&x, &w, v), &b, 1e-6)) < 1e-4);
    }
}

#[test]
fn softmax_xent_gradient_and_normalization() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: Vec<f64> = rand_vec(&mut rng, 9).into_iter().map(|v| 4.0 * v).collect();
        let label = rng.random_range(0..9);
        let (loss, grad) = layers::softmax_xent(&tensor(&[9], z.clone()), label).unwrap();
        assert!(loss >= 0.0);
        let probs = layers::softmax(&z);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let numeric = finite_diff(|v| layers::softmax_xent(&tensor(&[9], v.to_vec()), label).unwrap().0, &z, 1e-6);
        assert!(max_rel_err(grad.data(), &numeric) < 1e-4, "seed {seed}");
    }
}

#[test]
fn dropout_train_mode_preserves_expectation() {
    let p = 0.5;
    let trials = 10_000;
    let x = tensor(&[4], vec![1.0, -2.0, 0.5, 3.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut sums = [0.0f64; 4];
    for _ in 0..trials {
        let (y, _) = layers::dropout_forward(&x, p, DropoutMode::Train, &mut rng);
        for (s, v) in sums.iter_mut().zip(y.data()) {
            *s += v;
        }
    }
    for (s, &v) in sums.iter().zip(x.data()) {
        // each output is v / (1 - p) with probability 1 - p, else 0
        let sd = v.abs() * (p / (1.0 - p)).sqrt() / (trials as f64).sqrt();
        assert!((s / trials as f64 - v).abs() <= 3.0 * sd, "mean {} vs {}", s / trials as f64, v);
    }
    let (eval, mask) = layers::dropout_forward(&x, p, DropoutMode::Eval, &mut rng);
    assert_eq!(eval, x);
    assert!(mask.is_none());
}

fn tiny_stack() -> ModelSpec {
    "input 2x8x8 | conv 3 3 1 1 | relu | maxpool 2 2 | lrn 3 0.2 0.75 1 | conv 4 3 1 1 | relu \
     | fc 6 | relu | dropout 0.5 | fc 3 | softmax"
        .parse::<ModelSpec>()
        .unwrap()
        .with_init(transferlab::nncore::InitConfig { weight_std: 0.3, bias: 0.05, layer_std: vec![] })
}

#[test]
fn grad_check_fc_softmax() {
    let spec: ModelSpec = "input 1x3x3 | fc 4 | softmax".parse::<ModelSpec>().unwrap().with_init(
        transferlab::nncore::InitConfig { weight_std: 0.5, bias: 0.0, layer_std: vec![] },
    );
    for seed in 0..10 {
        let report = grad_check(&spec, seed, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-6, "seed {seed}: {report:?}");
    }
}

#[test]
fn grad_check_full_stack() {
    let spec = tiny_stack();
    assert!(spec.num_params() < 10_000);
    for seed in 0..5 {
        let report = grad_check(&spec, seed, 1e-6).unwrap();
        assert!(report.max_relative_error < 1e-4, "seed {seed}: {report:?}");
        assert_eq!(report.checked_params, spec.num_params());
    }
}

#[test]
fn freezing_excludes_layer_from_check_without_changing_math() {
    let spec = tiny_stack();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::<f64>::init_gaussian(spec, &mut rng);
    let full = grad_check_model(&model, 5, 1e-6).unwrap();
    let mut frozen = model.clone();
    frozen.layers_mut()[1].frozen = true;
    let partial = grad_check_model(&frozen, 5, 1e-6).unwrap();
    assert_eq!(partial.per_layer[1], None);
    for i in [0, 2, 3] {
        assert_eq!(partial.per_layer[i], full.per_layer[i]);
    }
    let eval = |m: &Model<f64>| m.logits(&Tensor::filled(&[2, 8, 8], 0.3)).unwrap();
    assert_eq!(eval(&model), eval(&frozen));
}

#[test]
fn forward_is_deterministic_given_seed() {
    let spec = tiny_stack();
    let model = Model::<f32>::init_gaussian(spec, &mut ChaCha8Rng::seed_from_u64(1));
    let image = Tensor::<f32>::filled(&[2, 8, 8], 0.7);
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.forward(&image, ForwardMode::Train(&mut rng)).unwrap().logits().clone()
    };
    assert_eq!(run(3), run(3));
    let logits = model.logits(&image).unwrap();
    assert!(logits.is_finite());
}
