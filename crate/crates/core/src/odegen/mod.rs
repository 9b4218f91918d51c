//! Ground-truth systems, a fixed-step integrator, and dataset recipes.

mod dataset;
mod integrate;
mod systems;

pub use dataset::{
    generate_dataset, generate_from_spec, noise_draw, sample_test_initial_conditions, Dataset,
    DatasetSpec, ObservedTrajectory, Preset, Trajectory, DATASET_SCHEMA,
};
pub use integrate::{integrate, integrate_fn, linspace};
pub use systems::{
    double_pendulum_energy, eval_vector_field, linear_block_spectral_radius,
    make_random_linear_system, SystemKind, SystemSpec,
};
