//! Sparse prototype-guided transformer decoding for 3D semantic occupancy.
pub mod bench;
pub mod decoder;
pub mod denoise;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod metrics;
pub mod rng;
pub mod spotca;
pub mod tensor;
pub mod train;
pub mod voxel;
