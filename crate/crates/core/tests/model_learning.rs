mod common;

use common::Linear1d;
use gcpmpc::ensemble::{EnsembleConfig, EnsembleModel, TrainSchedule};
use gcpmpc::rng;

fn config(epochs: usize) -> EnsembleConfig {
    EnsembleConfig {
        members: 5,
        particles: 1,
        hidden: vec![32, 32, 32],
        schedule: TrainSchedule {
            epochs,
            batch_size: 64,
            patience: epochs,
            max_batches: None,
        },
        ..EnsembleConfig::default()
    }
}

fn rmse(model: &EnsembleModel, plant: &Linear1d, seed: u64) -> f64 {
    let test = plant.transitions(&mut rng::derive(seed, 9, 0), 500);
    let se: f64 = test
        .iter()
        .map(|t| (model.predict(&t.s0, &t.a0).unwrap()[0] - t.s1[0]).powi(2))
        .sum();
    (se / test.len() as f64).sqrt()
}

/// Without dropout noise a small net fits the plant closely; the dropout
/// variant at full width runs in the acceptance suite.
#[test]
fn learns_a_linear_plant_and_knows_where_it_has_not_been() {
    let plant = Linear1d { a: 0.9, b: 0.1 };
    let data = plant.transitions(&mut rng::derive(1, 9, 0), 2000);
    let mut model = EnsembleModel::new(
        EnsembleConfig {
            keep_prob: 1.0,
            ..config(50)
        },
        1,
        1,
        4,
    )
    .unwrap();
    let report = model.update(&data).unwrap();
    assert_eq!(report.dataset_size, 2000);
    let err = rmse(&model, &plant, 2);
    assert!(err < 0.005, "held-out RMSE {err}");
    let inside = model.disagreement(&[0.2], &[0.3]).unwrap();
    let outside = model.disagreement(&[8.0], &[0.3]).unwrap();
    assert!(outside > inside, "in {inside} out {outside}");
}

#[test]
fn dropout_particles_fit_less_tightly_than_plain_members() {
    let plant = Linear1d { a: 0.9, b: 0.1 };
    let data = plant.transitions(&mut rng::derive(1, 9, 0), 1000);
    let fit = |keep_prob: f64| {
        let mut m = EnsembleModel::new(
            EnsembleConfig {
                keep_prob,
                ..config(20)
            },
            1,
            1,
            4,
        )
        .unwrap();
        m.update(&data).unwrap();
        rmse(&m, &plant, 2)
    };
    let (plain, dropped) = (fit(1.0), fit(0.9));
    assert!(plain < dropped, "p=1 {plain}, p=0.9 {dropped}");
    assert!(dropped < 0.1);
}

#[test]
fn predictive_variance_shrinks_with_data() {
    let plant = Linear1d { a: 0.9, b: 0.1 };
    let probes = [(-0.5, 0.2), (0.0, -0.4), (0.4, 0.6)];
    let variance = |n: usize| {
        let data = plant.transitions(&mut rng::derive(5, 9, 0), n);
        let mut model = EnsembleModel::new(config(30), 1, 1, 6).unwrap();
        model.update(&data).unwrap();
        probes
            .iter()
            .map(|(s, a)| model.predictive_variance(&[*s], &[*a]).unwrap())
            .sum::<f64>()
    };
    let small = variance(100);
    let large = variance(2000);
    assert!(large < small, "100 samples {small}, 2000 samples {large}");
}

#[test]
fn training_is_deterministic() {
    let plant = Linear1d { a: 0.5, b: 1.0 };
    let data = plant.transitions(&mut rng::derive(3, 9, 0), 300);
    let run = || {
        let mut m = EnsembleModel::new(config(3), 1, 1, 8).unwrap();
        let r = m.update(&data).unwrap();
        (m, r)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
    assert_eq!(a.updates(), 1);
}

#[test]
fn repeated_updates_keep_improving() {
    let plant = Linear1d { a: 0.9, b: 0.1 };
    let data = plant.transitions(&mut rng::derive(7, 9, 0), 500);
    let mut model = EnsembleModel::new(config(2), 1, 1, 1).unwrap();
    let first = model.update(&data).unwrap();
    for _ in 0..5 {
        model.update(&data).unwrap();
    }
    let last = model.update(&data).unwrap();
    let total = |r: &gcpmpc::ensemble::TrainReport| r.members.iter().map(|m| m.last.total).sum::<f64>();
    assert!(total(&last) < total(&first));
}
