//! Sparse voxel scenes: the key/value source of the decoder.
//!
//! Active voxels are always stored in canonical order, sorted by the linear
//! index `x + X·(y + Y·z)` (x fastest). Serialization preserves that order.

mod generate;
mod io;
mod upsample;

pub use generate::{generate_scene, SceneSpec, FEATURE_NOISE};
pub use io::{load_scene, read_scene, save_scene, write_scene, SceneIoError, SCENE_MAGIC};
pub use upsample::{densify, upsample_mask, DenseGrid, EMPTY_FILL};

use thiserror::Error;

use crate::matrix::Matrix;

/// Label reserved for "no object". Object classes are `1..n_classes`.
pub const EMPTY_CLASS: u32 = 0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoxelError {
    #[error("voxel {index} at {coord:?} lies outside dims {dims:?}")]
    OutOfBounds {
        index: usize,
        coord: [u32; 3],
        dims: [u32; 3],
    },
    #[error("duplicate voxel coordinate {0:?}")]
    DuplicateCoord([u32; 3]),
    #[error("voxels are not in canonical (x-fastest) order at index {0}")]
    Unsorted(usize),
    #[error("feature rows ({rows}) differ from voxel count ({nv})")]
    FeatureRows { rows: usize, nv: usize },
    #[error("non-finite feature at voxel {0}")]
    NonFinite(usize),
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("objects cannot fit: {0}")]
    CannotFit(String),
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),
    #[error("unsupported upsampling factor {0} (expected 2 or 4)")]
    BadFactor(u32),
}

/// Active voxels of a 3D scene with one feature row each.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseVoxelGrid {
    dims: [u32; 3],
    coords: Vec<[u32; 3]>,
    features: Matrix<f64>,
}

impl SparseVoxelGrid {
    /// Validates every grid invariant. `coords` must already be in canonical
    /// order.
    pub fn new(dims: [u32; 3], coords: Vec<[u32; 3]>, features: Matrix<f64>) -> Result<Self, VoxelError> {
        if dims.contains(&0) {
            return Err(VoxelError::InvalidSpec(format!("zero extent in dims {dims:?}")));
        }
        if features.rows() != coords.len() {
            return Err(VoxelError::FeatureRows {
                rows: features.rows(),
                nv: coords.len(),
            });
        }
        let mut prev: Option<u64> = None;
        for (i, &c) in coords.iter().enumerate() {
            if (0..3).any(|a| c[a] >= dims[a]) {
                return Err(VoxelError::OutOfBounds {
                    index: i,
                    coord: c,
                    dims,
                });
            }
            let lin = linear_index(dims, c);
            if let Some(p) = prev {
                if lin == p {
                    return Err(VoxelError::DuplicateCoord(c));
                }
                if lin < p {
                    return Err(VoxelError::Unsorted(i));
                }
            }
            prev = Some(lin);
        }
        if let Some(i) = (0..features.rows()).find(|&i| !features.row(i).iter().all(|v| v.is_finite())) {
            return Err(VoxelError::NonFinite(i));
        }
        Ok(Self { dims, coords, features })
    }

    /// Builds a grid from voxels in any order; they are sorted canonically.
    pub fn from_unsorted(dims: [u32; 3], voxels: Vec<([u32; 3], Vec<f64>)>) -> Result<Self, VoxelError> {
        let channels = voxels.first().map_or(0, |v| v.1.len());
        let mut voxels = voxels;
        voxels.sort_by_key(|(c, _)| linear_index(dims, *c));
        let coords = voxels.iter().map(|v| v.0).collect();
        let mut data = Vec::with_capacity(voxels.len() * channels);
        for (_, f) in &voxels {
            if f.len() != channels {
                return Err(VoxelError::InvalidSpec("ragged feature rows".into()));
            }
            data.extend_from_slice(f);
        }
        Self::new(dims, coords, Matrix::from_vec(voxels.len(), channels, data))
    }

    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    pub fn coords(&self) -> &[[u32; 3]] {
        &self.coords
    }

    pub fn features(&self) -> &Matrix<f64> {
        &self.features
    }

    /// Number of active voxels.
    pub fn nv(&self) -> usize {
        self.coords.len()
    }

    pub fn channels(&self) -> usize {
        self.features.cols()
    }

    pub fn dense_volume(&self) -> u64 {
        self.dims.iter().map(|&d| u64::from(d)).product()
    }

    /// Voxel index of a coordinate, if active.
    pub fn find(&self, c: [u32; 3]) -> Option<usize> {
        let key = linear_index(self.dims, c);
        self.coords
            .binary_search_by_key(&key, |&x| linear_index(self.dims, x))
            .ok()
    }
}

/// `x + X·(y + Y·z)`.
#[inline]
pub fn linear_index(dims: [u32; 3], c: [u32; 3]) -> u64 {
    u64::from(c[0]) + u64::from(dims[0]) * (u64::from(c[1]) + u64::from(dims[1]) * u64::from(c[2]))
}

/// One ground-truth instance: its class and the sorted voxel indices it
/// covers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GtObject {
    pub class_id: u32,
    pub mask: Vec<u32>,
}

impl GtObject {
    pub fn mask_bool(&self, nv: usize) -> Vec<bool> {
        let mut m = vec![false; nv];
        for &i in &self.mask {
            m[i as usize] = true;
        }
        m
    }
}

/// Per-voxel semantic labels plus the instance decomposition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneGroundTruth {
    pub n_classes: u32,
    pub labels: Vec<u32>,
    pub objects: Vec<GtObject>,
}

impl SceneGroundTruth {
    /// Checks that object masks partition the non-empty voxels and agree
    /// with the labels.
    pub fn validate(&self, nv: usize) -> Result<(), VoxelError> {
        let bad = |m: String| Err(VoxelError::InvalidGroundTruth(m));
        if self.labels.len() != nv {
            return bad(format!("{} labels for {nv} voxels", self.labels.len()));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return bad(format!("label {l} >= n_classes {}", self.n_classes));
        }
        let mut owner = vec![usize::MAX; nv];
        for (k, o) in self.objects.iter().enumerate() {
            if o.mask.is_empty() {
                return bad(format!("object {k} has an empty mask"));
            }
            if o.class_id == EMPTY_CLASS || o.class_id >= self.n_classes {
                return bad(format!("object {k} has class {}", o.class_id));
            }
            for &v in &o.mask {
                let v = v as usize;
                if v >= nv {
                    return bad(format!("object {k} covers voxel {v} >= {nv}"));
                }
                if owner[v] != usize::MAX {
                    return bad(format!("voxel {v} in objects {} and {k}", owner[v]));
                }
                if self.labels[v] != o.class_id {
                    return bad(format!(
                        "voxel {v} labelled {} inside object of class {}",
                        self.labels[v], o.class_id
                    ));
                }
                owner[v] = k;
            }
        }
        if let Some(v) = (0..nv).find(|&v| self.labels[v] != EMPTY_CLASS && owner[v] == usize::MAX) {
            return bad(format!("non-empty voxel {v} belongs to no object"));
        }
        Ok(())
    }
}

/// Halves every coordinate (floor, clamped so that it stays inside the
/// halved dims) and averages features of voxels that merge.
///
/// Returns the coarse grid and, for each input voxel, the index of the
/// coarse voxel it fell into.
pub fn downsample(grid: &SparseVoxelGrid) -> (SparseVoxelGrid, Vec<usize>) {
    let nd = grid.dims.map(|d| (d / 2).max(1));
    let c = grid.channels();
    let mut keyed: Vec<(u64, usize)> = grid
        .coords
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let q = [0, 1, 2].map(|a| (p[a] / 2).min(nd[a] - 1));
            (linear_index(nd, q), i)
        })
        .collect();
    keyed.sort_unstable();

    let mut coords: Vec<[u32; 3]> = Vec::new();
    let mut sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut parent = vec![0usize; grid.nv()];
    let mut last_key = None;
    for &(key, i) in &keyed {
        if last_key != Some(key) {
            let p = grid.coords[i];
            coords.push([0, 1, 2].map(|a| (p[a] / 2).min(nd[a] - 1)));
            sums.extend(std::iter::repeat_n(0.0, c));
            counts.push(0);
            last_key = Some(key);
        }
        let slot = coords.len() - 1;
        for (s, f) in sums[slot * c..(slot + 1) * c].iter_mut().zip(grid.features.row(i)) {
            *s += f;
        }
        counts[slot] += 1;
        parent[i] = slot;
    }
    for (slot, &n) in counts.iter().enumerate() {
        for s in &mut sums[slot * c..(slot + 1) * c] {
            *s /= n as f64;
        }
    }
    let features = Matrix::from_vec(coords.len(), c, sums);
    let out = SparseVoxelGrid {
        dims: nd,
        coords,
        features,
    };
    (out, parent)
}

/// Multi-scale copies of one grid, coarsest first; the last level is the
/// input grid itself.
#[derive(Clone, Debug)]
pub struct ScenePyramid {
    levels: Vec<SparseVoxelGrid>,
    /// `to_level[l][v]`: index in level `l` of finest voxel `v`.
    to_level: Vec<Vec<usize>>,
}

impl ScenePyramid {
    pub fn build(finest: &SparseVoxelGrid, n_levels: usize) -> Self {
        let n_levels = n_levels.max(1);
        let mut levels = vec![finest.clone()];
        let mut to_level = vec![(0..finest.nv()).collect::<Vec<_>>()];
        while levels.len() < n_levels {
            let (coarse, parent) = downsample(levels.last().expect("non-empty"));
            let prev = to_level.last().expect("non-empty");
            let map = prev.iter().map(|&i| parent[i]).collect();
            levels.push(coarse);
            to_level.push(map);
        }
        levels.reverse();
        to_level.reverse();
        Self { levels, to_level }
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &SparseVoxelGrid {
        &self.levels[l]
    }

    pub fn finest(&self) -> &SparseVoxelGrid {
        self.levels.last().expect("non-empty")
    }

    /// Maps a mask over finest voxels onto level `l`: a coarse voxel is set
    /// if any of its finest-level children is.
    pub fn project_mask(&self, l: usize, fine: &[bool]) -> Vec<bool> {
        let mut out = vec![false; self.levels[l].nv()];
        for (v, &on) in fine.iter().enumerate() {
            if on {
                out[self.to_level[l][v]] = true;
            }
        }
        out
    }
}
