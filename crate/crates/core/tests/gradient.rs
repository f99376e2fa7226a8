mod common;

use pseudolab::nn::Mlp;

#[test]
fn backprop_matches_central_differences() {
    for seed in 0..3 {
        let err = common::max_gradient_error(seed);
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn zero_weight_samples_contribute_nothing() {
    let model = Mlp::new(&[2, 8, 2], 7).unwrap();
    let xs = vec![vec![0.3, -0.2], vec![1.0, 1.0]];
    let ts = common::pvs(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let mut g = model.zeros_like();
    let (loss, _) = model.loss_and_grad(&xs, &ts, &[0.0, 0.0], &mut g).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.params().all(|v| *v == 0.0));
}
