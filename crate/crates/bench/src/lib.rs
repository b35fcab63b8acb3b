//! Fixtures shared by the kernel benchmarks.

use viplab::encoder::{Activation, Encoder, EncoderConfig};
use viplab::experiments::{generate_dataset, DataConfig};
use viplab::trajstore::TrajectoryDataset;
use viplab::worlds::{Difficulty, ObservationMode, PointMassWorld, World};

pub fn point_mass() -> World {
    World::PointMass(PointMassWorld::default())
}

/// Noisy expert demonstrations on the default point mass.
pub fn dataset(mode: ObservationMode, trajectories: usize) -> TrajectoryDataset {
    let data = DataConfig {
        num_trajectories: trajectories,
        noise: 0.1,
        difficulty: Difficulty::Hard,
        max_len: 200,
    };
    generate_dataset(&point_mass(), mode, &data, 0).expect("fixture dataset")
}

/// Default-sized ReLU encoder for `input_dim` inputs.
pub fn encoder(input_dim: usize) -> Encoder {
    Encoder::init(EncoderConfig {
        input_dim,
        hidden_widths: vec![64, 64],
        output_dim: 8,
        activation: Activation::Relu,
        init_seed: 0,
    })
    .expect("fixture encoder")
}
