mod common;

use common::{gradient_check, random_batch};
use gcpmpc::ensemble::LossParams;
use gcpmpc::nn::{sample_dropout_masks, DropoutMask, MlpWeights, VarianceBounds};
use gcpmpc::rng;
use ndarray::Array2;

fn params(layers: usize, predict_delta: bool) -> LossParams {
    LossParams {
        variance_penalty: 30.0,
        l2: (0..layers).map(|l| 1e-3 * (l + 1) as f64).collect(),
        predict_delta,
    }
}

#[test]
fn gradients_match_finite_differences_on_a_4_8_8_8_4_net() {
    let mut r = rng::derive(100, 0, 0);
    let net = MlpWeights::random(&mut r, 6, &[8, 8, 8], 4, VarianceBounds::default()).unwrap();
    let batch = random_batch(&mut r, 12, 4, 2);
    let masks = sample_dropout_masks(&mut r, &[8, 8, 8], 0.8, 12).unwrap();
    let err = gradient_check(&net, &batch, &masks, &params(5, false), 1e-4);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn delta_mode_gradients_match() {
    let mut r = rng::derive(101, 0, 0);
    let net = MlpWeights::random(&mut r, 5, &[6, 6], 3, VarianceBounds::default()).unwrap();
    let batch = random_batch(&mut r, 9, 3, 2);
    let masks = vec![DropoutMask::ones(&[6, 6], 1.0).unwrap()];
    let err = gradient_check(&net, &batch, &masks, &params(4, true), 1e-4);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn shared_mask_gradients_match() {
    let mut r = rng::derive(102, 0, 0);
    let net = MlpWeights::random(&mut r, 3, &[5], 2, VarianceBounds::default()).unwrap();
    let batch = random_batch(&mut r, 7, 2, 1);
    let masks = sample_dropout_masks(&mut r, &[5], 0.6, 1).unwrap();
    let err = gradient_check(&net, &batch, &masks, &params(3, false), 1e-4);
    assert!(err < 1e-4, "relative error {err}");
}

/// With one hidden layer the head is linear in the dropped activations, so
/// the mask average of the mean output converges to the full network.
#[test]
fn inverted_dropout_is_unbiased() {
    let mut r = rng::derive(103, 0, 0);
    let net = MlpWeights::random(&mut r, 3, &[16], 2, VarianceBounds::default()).unwrap();
    let x = Array2::from_shape_vec((1, 3), vec![0.3, -1.2, 0.7]).unwrap();
    let full = net.forward_mean(x.view(), &DropoutMask::ones(&[16], 1.0).unwrap());
    let n = 20_000;
    let masks = sample_dropout_masks(&mut r, &[16], 0.8, n).unwrap();
    let mut acc = Array2::<f64>::zeros((1, 2));
    let mut sq = Array2::<f64>::zeros((1, 2));
    for m in &masks {
        let y = net.forward_mean(x.view(), m);
        sq += &(&y * &y);
        acc += &y;
    }
    let mean = &acc / n as f64;
    let var = &sq / n as f64 - &mean * &mean;
    for j in 0..2 {
        let se = (var[[0, j]] / n as f64).sqrt();
        assert!((mean[[0, j]] - full[[0, j]]).abs() < 5.0 * se + 1e-12, "output {j}");
    }
}
