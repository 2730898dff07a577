pub mod backbone;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod par;
pub mod rng;
pub mod schedule;
pub mod synthetic;
pub mod train;
pub mod voxel;
