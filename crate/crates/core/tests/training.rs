use std::borrow::Cow;

use driftscape::nn::{init_params, loss_and_grad, sgd_step};
use driftscape::rng::StreamKey;
use driftscape::tasks::gen_classification;
use rand::seq::SliceRandom;

#[test]
fn centralized_training_learns_stripes() {
    let ds = gen_classification(200, 16, 16, 2, 0.05, 1).unwrap();
    let (train, test) = ds.split_holdout(0.2).unwrap();
    let mut params = init_params(&[256, 32, 2], 7).unwrap();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..200 {
        order.shuffle(&mut StreamKey::root(7).child("epoch", epoch).rng());
        for chunk in order.chunks(16) {
            let batch = train
                .batch(chunk.iter().map(|&i| (Cow::Borrowed(&train.samples[i].image), &train.samples[i].target)))
                .unwrap();
            let (_, grads) = loss_and_grad(&params, &batch).unwrap();
            params = sgd_step(&params, &grads, 0.05).unwrap();
        }
    }
    let acc = test.evaluate(&params).unwrap();
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}
