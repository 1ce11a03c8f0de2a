mod common;

use common::{untrained_models, GuidanceState, RandomGraph, FD_STEP};
use latent_aligner::autodiff::{finite_diff_grad, max_relative_error, Graph};
use latent_aligner::nn::Mlp;
use latent_aligner::rng::{normal_tensor, rng};
use latent_aligner::Tensor;
use proptest::prelude::*;

#[test]
fn random_graphs_match_finite_differences() {
    for seed in 0..100 {
        let g = RandomGraph::new(seed);
        let err = g.max_error().unwrap();
        assert!(err < 1e-5, "graph {seed}: relative error {err:e}");
    }
}

#[test]
fn guidance_objective_matches_finite_differences() {
    let models = untrained_models(7);
    for seed in 0..20 {
        let s = GuidanceState::random(&models, 1000 + seed);
        let err = s.max_error(&models).unwrap();
        assert!(
            err < 1e-4,
            "state {seed} ({}): relative error {err:e}",
            s.task
        );
    }
}

#[test]
fn three_layer_tanh_network() {
    let mut r = rng(33);
    let mlp = Mlp::new(&[5, 7, 7, 3], &mut r);
    let x = normal_tensor(&mut r, &[4, 5]);
    let f = |x: &Tensor| {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let out = mlp.bind(&mut g, false).forward(&mut g, xv)?;
        let l = g.sum(out);
        Ok((g, xv, l))
    };
    let (g, xv, l) = f(&x).unwrap();
    let grad = g.backward(l).unwrap().get(xv);
    let fd = finite_diff_grad(|x| f(x).map(|(g, _, l)| g.value(l).item()), &x, FD_STEP).unwrap();
    assert!(max_relative_error(&grad, &fd) < 1e-5);
}

#[test]
fn stop_gradient_removes_prompt_influence() {
    let models = untrained_models(3);
    let mut s = GuidanceState::random(&models, 5);
    s.through_denoiser = false;
    let ev = s.evaluate(&models, &s.latents, &s.prompts, true).unwrap();
    assert!(ev
        .prompt_grads
        .iter()
        .all(|g| g.data().iter().all(|&x| x == 0.0)));
    assert!(ev
        .latent_grads
        .iter()
        .all(|g| g.data().iter().any(|&x| x != 0.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_rows_have_unit_norm(data in prop::collection::vec(-10.0f64..10.0, 6)) {
        prop_assume!(data[..3].iter().map(|x| x * x).sum::<f64>() > 1e-6);
        prop_assume!(data[3..].iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], data).unwrap());
        let n = g.l2_normalize(x).unwrap();
        for row in 0..2 {
            let norm: f64 = g.value(n).row(row).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_is_linear_in_loss_scale(data in prop::collection::vec(-3.0f64..3.0, 4), s in -5.0f64..5.0) {
        let grad_of = |scale: f64| {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(data.clone()));
            let t = g.tanh(x);
            let sq = g.mul(t, x).unwrap();
            let l = g.sum(sq);
            let l = g.scale(l, scale);
            g.backward(l).unwrap().get(x)
        };
        let (g1, gs) = (grad_of(1.0), grad_of(s));
        for (a, b) in g1.data().iter().zip(gs.data()) {
            prop_assert!((a * s - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn cosine_is_bounded_and_symmetric(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-6 && b.iter().map(|x| x * x).sum::<f64>() > 1e-6);
        let mut g = Graph::new();
        let (x, y) = (g.constant(Tensor::vector(a)), g.constant(Tensor::vector(b)));
        let c1 = g.cosine_similarity(x, y).unwrap();
        let c2 = g.cosine_similarity(y, x).unwrap();
        let (c1, c2) = (g.value(c1).item(), g.value(c2).item());
        prop_assert!(c1.abs() <= 1.0 + 1e-12);
        prop_assert!((c1 - c2).abs() < 1e-15);
    }
}
