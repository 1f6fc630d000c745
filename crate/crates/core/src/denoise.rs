//! Noised-query construction for denoising training.
//!
//! Every ground-truth object yields `groups` training-only queries: the
//! embedding of its class (occasionally flipped to another class) plus
//! Gaussian noise. They are guided by the object's true mask and supervised
//! against it with a fixed positional assignment.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::voxel::SceneGroundTruth;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiseError {
    #[error("scene has no objects to denoise")]
    NoObjects,
    #[error("invalid denoising config: {0}")]
    InvalidConfig(String),
    #[error("class {class} outside the {rows}-row embedding table")]
    ClassOutOfRange { class: u32, rows: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DnConfig {
    pub enabled: bool,
    pub label_flip_prob: f64,
    pub noise_std: f64,
    pub groups: usize,
}

impl Default for DnConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            label_flip_prob: 0.2,
            noise_std: 0.1,
            groups: 3,
        }
    }
}

impl DnConfig {
    /// `noise_std = 0` is accepted so the noiseless limit can be exercised.
    pub fn validate(&self) -> Result<(), DenoiseError> {
        if !(0.0..=1.0).contains(&self.label_flip_prob) {
            return Err(DenoiseError::InvalidConfig(format!(
                "label_flip_prob = {} outside [0, 1]",
                self.label_flip_prob
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(DenoiseError::InvalidConfig(format!("noise_std = {}", self.noise_std)));
        }
        if self.groups == 0 {
            return Err(DenoiseError::InvalidConfig("groups must be positive".into()));
        }
        Ok(())
    }
}

/// One learnable embedding row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbeddingTable {
    pub rows: Matrix<f64>,
}

impl ClassEmbeddingTable {
    pub fn init<R: Rng + ?Sized>(n_classes: usize, c: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..n_classes * c).map(|_| normal.sample(rng)).collect();
        Self {
            rows: Matrix::from_vec(n_classes, c, data),
        }
    }
}

/// Training-only queries and what they must reconstruct.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedQueries {
    /// `table[noised_class] + delta`, `Nd × C`.
    pub queries: Matrix<f64>,
    /// Class whose embedding each query was built from.
    pub noised_class: Vec<u32>,
    pub delta: Matrix<f64>,
    pub targets: DnTargets,
}

/// Reconstruction targets: always the true class and mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DnTargets {
    pub gt_class: Vec<u32>,
    /// Object index of each noised query.
    pub object: Vec<usize>,
    /// Guidance and target mask over active voxels.
    pub masks: Vec<Vec<bool>>,
}

impl DnTargets {
    pub fn len(&self) -> usize {
        self.gt_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_class.is_empty()
    }
}

/// Builds `groups × |objects|` noised queries, group-major.
pub fn make_noised_queries<R: Rng + ?Sized>(
    gt: &SceneGroundTruth,
    table: &ClassEmbeddingTable,
    cfg: &DnConfig,
    rng: &mut R,
) -> Result<NoisedQueries, DenoiseError> {
    cfg.validate()?;
    if gt.objects.is_empty() {
        return Err(DenoiseError::NoObjects);
    }
    let n_cls = table.rows.rows();
    let c = table.rows.cols();
    let nv = gt.labels.len();
    let mut noised_class = Vec::new();
    let mut gt_class = Vec::new();
    let mut object = Vec::new();
    let mut masks = Vec::new();
    let mut delta = Vec::new();
    let mut queries = Vec::new();
    for _ in 0..cfg.groups {
        for (i, o) in gt.objects.iter().enumerate() {
            if o.class_id as usize >= n_cls {
                return Err(DenoiseError::ClassOutOfRange {
                    class: o.class_id,
                    rows: n_cls,
                });
            }
            let mut cls = o.class_id;
            if n_cls > 1 && rng.random::<f64>() < cfg.label_flip_prob {
                // uniform over the other classes
                let r = rng.random_range(0..n_cls as u32 - 1);
                cls = if r >= o.class_id { r + 1 } else { r };
            }
            let row = table.rows.row(cls as usize);
            for &e in row {
                let n: f64 = if cfg.noise_std > 0.0 {
                    cfg.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal)
                } else {
                    0.0
                };
                delta.push(n);
                queries.push(e + n);
            }
            noised_class.push(cls);
            gt_class.push(o.class_id);
            object.push(i);
            masks.push(o.mask_bool(nv));
        }
    }
    let nd = noised_class.len();
    Ok(NoisedQueries {
        queries: Matrix::from_vec(nd, c, queries),
        noised_class,
        delta: Matrix::from_vec(nd, c, delta),
        targets: DnTargets {
            gt_class,
            object,
            masks,
        },
    })
}

/// Fixed positional mapping `(query, object)`: noised query `g·n + i`
/// supervises object `i`.
pub fn dn_assignment(targets: &DnTargets) -> Vec<(usize, usize)> {
    targets.object.iter().copied().enumerate().collect()
}
