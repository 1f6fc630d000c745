//! Per-voxel labels from class-scaled mask heatmaps.

use std::io::Write;

use super::{ClassScaling, LayerPrediction};
use crate::matrix::Matrix;
use crate::voxel::{SparseVoxelGrid, EMPTY_CLASS};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// For each voxel `v`, the class `c ≥ 1` of the pair `(q, c)` maximizing
/// `class_scores[q][c] · mask_scores[q][v]`, or the empty class when that
/// maximum is below `threshold`. Ties go to the first pair in `(q, c)`
/// order.
pub fn decode_labels(class_scores: &Matrix<f64>, mask_scores: &Matrix<f64>, threshold: f64) -> Vec<u32> {
    let (nq, ncls) = (class_scores.rows(), class_scores.cols());
    let nv = mask_scores.cols();
    let mut best = vec![f64::NEG_INFINITY; nv];
    let mut label = vec![EMPTY_CLASS; nv];
    for q in 0..nq.min(mask_scores.rows()) {
        let m = mask_scores.row(q);
        for c in 1..ncls {
            let s = class_scores.get(q, c);
            for v in 0..nv {
                let score = s * m[v];
                if score > best[v] {
                    best[v] = score;
                    label[v] = c as u32;
                }
            }
        }
    }
    for v in 0..nv {
        if best[v] < threshold {
            label[v] = EMPTY_CLASS;
        }
    }
    label
}

/// Decodes the match-query rows of `pred` into voxel labels.
pub fn semantic_argmax(pred: &LayerPrediction, scaling: ClassScaling, threshold: f64) -> Vec<u32> {
    let nq = pred.n_match;
    let ncls = pred.class_logits.cols();
    let mut class_scores = Matrix::zeros(nq, ncls);
    for q in 0..nq {
        let row = pred.class_logits.row(q);
        let out = class_scores.row_mut(q);
        match scaling {
            ClassScaling::Logits => out.copy_from_slice(row),
            ClassScaling::Softmax => {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for (o, &z) in out.iter_mut().zip(row) {
                    *o = (z - m).exp();
                    s += *o;
                }
                for o in out.iter_mut() {
                    *o /= s;
                }
            }
        }
    }
    let nv = pred.mask_heatmaps.cols();
    let mut mask_scores = Matrix::zeros(nq, nv);
    for q in 0..nq {
        for (o, &h) in mask_scores.row_mut(q).iter_mut().zip(pred.mask_heatmaps.row(q)) {
            *o = sigmoid(h);
        }
    }
    decode_labels(&class_scores, &mask_scores, threshold)
}

/// `x,y,z,label` per active voxel in grid order.
pub fn write_prediction_csv<W: Write>(mut w: W, grid: &SparseVoxelGrid, labels: &[u32]) -> std::io::Result<()> {
    writeln!(w, "x,y,z,label")?;
    for (c, l) in grid.coords().iter().zip(labels) {
        writeln!(w, "{},{},{},{l}", c[0], c[1], c[2])?;
    }
    Ok(())
}
