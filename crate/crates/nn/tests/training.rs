mod common;

use ndarray::{s, Axis};
use pdo3d_core::GroupSpec;
use pdo3d_nn::model::tetris_model_spec;
use pdo3d_nn::tetris::tetris_dataset;
use pdo3d_nn::train::{accuracy, predict, train, TrainConfig};
use pdo3d_nn::{Model, NnError, SchemeSpec};

#[test]
fn zero_learning_rate_leaves_parameters() {
    let spec = tetris_model_spec(GroupSpec::O, "quotient:T", 2, 8, SchemeSpec::Fd);
    let mut m = Model::build(&spec, 1).unwrap();
    let before = m.params();
    let (x, y) = tetris_dataset(8).unwrap();
    train(
        &mut m,
        &x,
        &y,
        &TrainConfig {
            epochs: 3,
            lr: 0.0,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(before, m.params());
}

#[test]
fn overfits_a_single_sample() {
    let spec = tetris_model_spec(GroupSpec::O, "quotient:V", 2, 8, SchemeSpec::Fd);
    let mut m = Model::build(&spec, 2).unwrap();
    let (x, _) = tetris_dataset(8).unwrap();
    let one = x.slice(s![3..4, .., .., .., ..]).to_owned();
    let log = train(
        &mut m,
        &one,
        &[5],
        &TrainConfig {
            epochs: 30,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(log.last().unwrap().train_accuracy, 1.0);
    assert_eq!(predict(&mut m, &one, 1).unwrap(), vec![5]);
}

#[test]
fn nan_input_aborts_with_divergence() {
    let spec = tetris_model_spec(GroupSpec::O, "quotient:T", 1, 8, SchemeSpec::Fd);
    let mut m = Model::build(&spec, 3).unwrap();
    let (mut x, y) = tetris_dataset(8).unwrap();
    x.index_axis_mut(Axis(0), 0).fill(f64::NAN);
    let err = train(
        &mut m,
        &x,
        &y,
        &TrainConfig {
            epochs: 2,
            ..Default::default()
        },
    )
    .unwrap_err();
    assert!(matches!(err, NnError::Divergence { epoch: 0, .. }));
}

#[test]
fn untrained_model_is_near_chance() {
    let (x, y) = tetris_dataset(8).unwrap();
    let mut hits = 0.0;
    for seed in 0..8 {
        let mut m = Model::build(&tetris_model_spec(GroupSpec::O, "regular", 1, 8, SchemeSpec::Fd), seed).unwrap();
        hits += accuracy(&predict(&mut m, &x, 8).unwrap(), &y);
    }
    // eight seeds, eight classes: mean accuracy far from perfect
    assert!(hits / 8.0 < 0.5);
}
