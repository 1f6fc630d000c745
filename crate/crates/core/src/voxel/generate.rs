use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{linear_index, GtObject, SceneGroundTruth, SparseVoxelGrid, VoxelError, EMPTY_CLASS};
use crate::matrix::Matrix;
use crate::rng;

/// Per-channel standard deviation of the noise added to class prototypes.
pub const FEATURE_NOISE: f64 = 0.35;

/// Fraction of the dense volume filled with empty-class clutter voxels.
const CLUTTER_FRACTION: f64 = 0.05;

const PLACEMENT_ATTEMPTS: usize = 256;

/// Parameters of a synthetic scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub dims: [u32; 3],
    pub n_objects: u32,
    pub n_classes: u32,
    pub channels: u32,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            dims: [16, 16, 8],
            n_objects: 3,
            n_classes: 4,
            channels: 32,
            seed: 7,
        }
    }
}

/// Places `n_objects` non-touching boxes of distinct classes, sprinkles
/// empty-class clutter, and draws each voxel's feature as its class
/// prototype plus Gaussian noise. Features are rounded to `f32` so the
/// scene file stores them exactly.
pub fn generate_scene(spec: &SceneSpec) -> Result<(SparseVoxelGrid, SceneGroundTruth), VoxelError> {
    let dims = spec.dims;
    if dims.iter().any(|&d| d < 4) {
        return Err(VoxelError::InvalidSpec(format!("dims {dims:?} must all be >= 4")));
    }
    if spec.n_objects < 1 {
        return Err(VoxelError::InvalidSpec("n_objects must be >= 1".into()));
    }
    if spec.n_classes < 2 {
        return Err(VoxelError::InvalidSpec("n_classes must be >= 2".into()));
    }
    if spec.n_objects > spec.n_classes - 1 {
        return Err(VoxelError::InvalidSpec(format!(
            "{} objects of distinct classes need at least {} classes",
            spec.n_objects,
            spec.n_objects + 1
        )));
    }
    if spec.channels < 1 {
        return Err(VoxelError::InvalidSpec("channels must be >= 1".into()));
    }
    let dense: u64 = dims.iter().map(|&d| u64::from(d)).product();
    if 8 * u64::from(spec.n_objects) * 2 > dense {
        return Err(VoxelError::CannotFit(format!(
            "{} objects of at least 2x2x2 exceed half of {dims:?}",
            spec.n_objects
        )));
    }

    let mut rng = rng::stream(spec.seed, "scene");
    let c = spec.channels as usize;
    let prototypes: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..c).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();

    let mut classes: Vec<u32> = sample(&mut rng, (spec.n_classes - 1) as usize, spec.n_objects as usize)
        .into_iter()
        .map(|i| i as u32 + 1)
        .collect();
    classes.sort_unstable();

    let mut boxes: Vec<([u32; 3], [u32; 3])> = Vec::new();
    let mut occupied: u64 = 0;
    for k in 0..spec.n_objects {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let ext = dims.map(|d| rng.random_range(2..=(d / 3).max(2)));
            let lo = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - ext[a]));
            let hi = [0, 1, 2].map(|a| lo[a] + ext[a]);
            // keep a one-voxel gap so instances never touch
            let clear = boxes
                .iter()
                .all(|(blo, bhi)| (0..3).any(|a| hi[a] < blo[a] || bhi[a] < lo[a]));
            if clear {
                placed = Some((lo, hi));
                break;
            }
        }
        let (lo, hi) =
            placed.ok_or_else(|| VoxelError::CannotFit(format!("no free space for object {k} in {dims:?}")))?;
        occupied += (0..3).map(|a| u64::from(hi[a] - lo[a])).product::<u64>();
        boxes.push((lo, hi));
    }
    if 2 * occupied >= dense {
        return Err(VoxelError::CannotFit(format!(
            "objects cover {occupied} of {dense} voxels"
        )));
    }

    let mut label_at = vec![EMPTY_CLASS; dense as usize];
    let mut active = vec![false; dense as usize];
    for (k, (lo, hi)) in boxes.iter().enumerate() {
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let li = linear_index(dims, [x, y, z]) as usize;
                    label_at[li] = classes[k];
                    active[li] = true;
                }
            }
        }
    }
    let free: Vec<usize> = (0..dense as usize).filter(|&i| !active[i]).collect();
    let budget = (dense - 1) / 2 - occupied;
    let clutter = ((CLUTTER_FRACTION * dense as f64) as u64).min(budget) as usize;
    for j in sample(&mut rng, free.len(), clutter.min(free.len())) {
        active[free[j]] = true;
    }

    let (x_dim, y_dim) = (dims[0] as usize, dims[1] as usize);
    let mut coords = Vec::new();
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for li in (0..dense as usize).filter(|&i| active[i]) {
        let coord = [
            (li % x_dim) as u32,
            ((li / x_dim) % y_dim) as u32,
            (li / (x_dim * y_dim)) as u32,
        ];
        let label = label_at[li];
        let proto = &prototypes[label as usize];
        for &p in proto {
            let n: f64 = StandardNormal.sample(&mut rng);
            data.push((p + FEATURE_NOISE * n) as f32 as f64);
        }
        coords.push(coord);
        labels.push(label);
    }
    let nv = coords.len();
    let grid = SparseVoxelGrid::new(dims, coords, Matrix::from_vec(nv, c, data))?;

    let objects = classes
        .iter()
        .map(|&cls| GtObject {
            class_id: cls,
            mask: (0..nv as u32).filter(|&v| labels[v as usize] == cls).collect(),
        })
        .collect();
    let gt = SceneGroundTruth {
        n_classes: spec.n_classes,
        labels,
        objects,
    };
    gt.validate(nv)?;
    Ok((grid, gt))
}
