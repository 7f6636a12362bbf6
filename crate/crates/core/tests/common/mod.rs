#![allow(dead_code)]

use golden_layer::corpus::{build_edit_set, generate_world, EditQuery, FactWorld};
use golden_layer::model::{train_memorize, ModelConfig, ToyModel, TrainOptions};

/// A small world memorized by a small model; a few seconds to build.
pub fn trained() -> (FactWorld, ToyModel) {
    let world = generate_world(11, 8, 2, 10).unwrap();
    let config = ModelConfig {
        n_layers: 3,
        d_model: 32,
        n_heads: 4,
        d_mlp: 64,
        context_len: 16,
        vocab_size: world.vocab.len(),
    };
    let mut model = ToyModel::init(config, 11).unwrap();
    let opts = TrainOptions {
        stop_accuracy: 1.0,
        learning_rate: 1e-2,
        batch_size: 8,
        seed: 11,
        max_steps: 2000,
        ..TrainOptions::default()
    };
    let log = train_memorize(&mut model, &world, &opts).unwrap();
    assert_eq!(log.final_accuracy, 1.0, "fixture failed to memorize");
    (world, model)
}

pub fn edits(world: &FactWorld, n: usize) -> Vec<EditQuery> {
    build_edit_set(world, n, 5).unwrap()
}

pub fn untrained(n_layers: usize) -> (FactWorld, ToyModel) {
    let world = generate_world(4, 10, 3, 20).unwrap();
    let config = ModelConfig {
        n_layers,
        d_model: 16,
        n_heads: 2,
        d_mlp: 32,
        context_len: 16,
        vocab_size: world.vocab.len(),
    };
    (world.clone(), ToyModel::init(config, 4).unwrap())
}
