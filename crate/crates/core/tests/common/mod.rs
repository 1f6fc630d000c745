#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use spot_core::matrix::Matrix;
use spot_core::voxel::SparseVoxelGrid;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

/// `nv` distinct voxels in an 16×16×16 box with Gaussian features.
pub fn random_grid(rng: &mut ChaCha8Rng, nv: usize, c: usize) -> SparseVoxelGrid {
    let dims = [16u32, 16, 16];
    let picks = rand::seq::index::sample(rng, 4096, nv);
    let mut lin: Vec<usize> = picks.into_iter().collect();
    lin.sort_unstable();
    let coords = lin
        .iter()
        .map(|&i| [(i % 16) as u32, ((i / 16) % 16) as u32, (i / 256) as u32])
        .collect();
    SparseVoxelGrid::new(dims, coords, gaussian(rng, nv, c)).unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random::<f64>() < p).collect()
}

/// Small generated scene: 6×6×4 box, two objects over three classes.
pub fn toy_scene(seed: u64, channels: u32) -> (SparseVoxelGrid, spot_core::voxel::SceneGroundTruth) {
    let spec = spot_core::voxel::SceneSpec {
        dims: [6, 6, 4],
        n_objects: 2,
        n_classes: 3,
        channels,
        seed,
    };
    spot_core::voxel::generate_scene(&spec).unwrap()
}

/// Exhaustive minimum over injections of columns into rows.
pub fn brute_force_assignment(cost: &Matrix<f64>) -> f64 {
    fn go(cost: &Matrix<f64>, col: usize, used: &mut Vec<bool>) -> f64 {
        if col == cost.cols() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for r in 0..cost.rows() {
            if !used[r] {
                used[r] = true;
                best = best.min(cost.get(r, col) + go(cost, col + 1, used));
                used[r] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.rows()])
}
