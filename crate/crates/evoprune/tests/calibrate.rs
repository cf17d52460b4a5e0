//! Temporary calibration probe (removed before release).

use evoprune::data::{load_dataset, DataSource, Split, SyntheticKind, SyntheticSpec};
use evoprune::net::models;
use evoprune::optim::{evaluate, fit, seeded_rng, OptimizerConfig};

#[test]
#[ignore]
fn calibrate_digit_training() {
    for (train_n, noise) in [(800usize, 0.12f64), (2000, 0.12), (10000, 0.12)] {
        let spec = SyntheticSpec {
            kind: SyntheticKind::Digits,
            train: train_n,
            test: 1000,
            classes: 10,
            channels: 1,
            height: 16,
            width: 16,
            noise,
            seed: 100,
        };
        let train = load_dataset(&DataSource::Synthetic(spec.clone()), Split::Train, None).unwrap();
        let test = load_dataset(
            &DataSource::Synthetic(spec),
            Split::Test,
            Some(train.normalization.clone()),
        )
        .unwrap();
        for lr in [0.02, 0.05, 0.1] {
            for epochs in [4usize, 8] {
                let mut rng = seeded_rng(5);
                let mut net = models::desk_cnn(10, &mut rng);
                let opt = OptimizerConfig {
                    learning_rate: lr,
                    momentum: 0.9,
                    weight_decay: 1e-4,
                    batch_size: 64,
                    schedule: vec![(epochs * 6 / 10, 0.1), (epochs * 8 / 10, 0.1)],
                };
                let mut train_rng = seeded_rng(6);
                let t0 = std::time::Instant::now();
                let losses = fit(&mut net, &train, &opt, epochs, &mut train_rng, None).unwrap();
                let acc = evaluate(&net, &test).unwrap();
                println!(
                    "n={train_n} noise={noise} lr={lr} epochs={epochs}: acc={acc:.4} last_loss={:.4} ({:.1?})",
                    losses.last().unwrap(),
                    t0.elapsed()
                );
            }
        }
    }
}
