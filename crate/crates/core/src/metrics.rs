//! Occupancy metrics: mask IoU, per-class semantic IoU, and the layer-wise
//! consistency of each query's predicted mask.

use std::io::Write;

use thiserror::Error;

use crate::voxel::EMPTY_CLASS;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("label {label} outside {n_classes} classes")]
    LabelOutOfRange { label: u32, n_classes: usize },
    #[error("layer-wise IoU needs a layer index of at least 1")]
    LayerZero,
    #[error("layer {0} out of range")]
    LayerOutOfRange(usize),
    #[error("query count differs between layers: {0} vs {1}")]
    QueryCountMismatch(usize, usize),
}

/// `|a ∩ b| / |a ∪ b|`; 1 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> Result<f64, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Per-class voxel counts; merging two accumulators equals accumulating
/// the concatenated scenes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    /// Geometric counts: occupied means any non-empty class.
    pub occ_tp: u64,
    pub occ_fp: u64,
    pub occ_fn: u64,
}

impl ConfusionAccumulator {
    pub fn new(n_classes: usize) -> Self {
        Self {
            tp: vec![0; n_classes],
            fp: vec![0; n_classes],
            fn_: vec![0; n_classes],
            occ_tp: 0,
            occ_fp: 0,
            occ_fn: 0,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.tp.len()
    }

    pub fn update(&mut self, pred: &[u32], gt: &[u32]) -> Result<(), MetricError> {
        if pred.len() != gt.len() {
            return Err(MetricError::LengthMismatch(pred.len(), gt.len()));
        }
        let n = self.n_classes();
        if let Some(&label) = pred.iter().chain(gt).find(|&&l| l as usize >= n) {
            return Err(MetricError::LabelOutOfRange { label, n_classes: n });
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[g as usize] += 1;
            }
            match (p != EMPTY_CLASS, g != EMPTY_CLASS) {
                (true, true) => self.occ_tp += 1,
                (true, false) => self.occ_fp += 1,
                (false, true) => self.occ_fn += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in [
            (&mut self.tp, &other.tp),
            (&mut self.fp, &other.fp),
            (&mut self.fn_, &other.fn_),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.occ_tp += other.occ_tp;
        self.occ_fp += other.occ_fp;
        self.occ_fn += other.occ_fn;
    }

    /// IoU per class; `None` for a class absent from both prediction and
    /// ground truth.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n_classes())
            .map(|c| {
                let union = self.tp[c] + self.fp[c] + self.fn_[c];
                (union > 0).then(|| self.tp[c] as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over non-empty classes that occur in prediction or ground
    /// truth; 1 when there are none.
    pub fn miou(&self) -> f64 {
        let vals: Vec<f64> = self.class_iou().into_iter().skip(1).flatten().collect();
        if vals.is_empty() {
            1.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    }

    /// Geometric occupancy IoU, ignoring class identity.
    pub fn occupancy_iou(&self) -> f64 {
        let union = self.occ_tp + self.occ_fp + self.occ_fn;
        if union == 0 {
            1.0
        } else {
            self.occ_tp as f64 / union as f64
        }
    }
}

/// Per-class IoU and their mean, see [`ConfusionAccumulator::miou`].
pub fn miou(pred: &[u32], gt: &[u32], n_classes: usize) -> Result<(Vec<Option<f64>>, f64), MetricError> {
    let mut acc = ConfusionAccumulator::new(n_classes);
    acc.update(pred, gt)?;
    Ok((acc.class_iou(), acc.miou()))
}

/// Mean over queries of the IoU between each query's mask at layers
/// `l − 1` and `l`. `layer_masks[l][q]` is a binary mask over voxels.
pub fn lm_iou(layer_masks: &[Vec<Vec<bool>>], l: usize) -> Result<f64, MetricError> {
    if l == 0 {
        return Err(MetricError::LayerZero);
    }
    if l >= layer_masks.len() {
        return Err(MetricError::LayerOutOfRange(l));
    }
    let (prev, cur) = (&layer_masks[l - 1], &layer_masks[l]);
    if prev.len() != cur.len() {
        return Err(MetricError::QueryCountMismatch(prev.len(), cur.len()));
    }
    if cur.is_empty() {
        return Ok(1.0);
    }
    let mut s = 0.0;
    for (a, b) in prev.iter().zip(cur) {
        s += iou(a, b)?;
    }
    Ok(s / cur.len() as f64)
}

/// `class,iou` rows (blank for absent classes) followed by `miou` and
/// `occupancy_iou`.
pub fn write_metrics_csv<W: Write>(mut w: W, acc: &ConfusionAccumulator) -> std::io::Result<()> {
    writeln!(w, "metric,value")?;
    for (c, v) in acc.class_iou().iter().enumerate() {
        match v {
            Some(v) => writeln!(w, "iou_class_{c},{v:.6}")?,
            None => writeln!(w, "iou_class_{c},")?,
        }
    }
    writeln!(w, "miou,{:.6}", acc.miou())?;
    writeln!(w, "occupancy_iou,{:.6}", acc.occupancy_iou())?;
    Ok(())
}

/// `layer,lm_iou` for layers `1..`, one row per adjacent pair.
pub fn write_lm_iou_csv<W: Write>(mut w: W, values: &[f64]) -> std::io::Result<()> {
    writeln!(w, "layer,lm_iou")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{},{v:.6}", i + 1)?;
    }
    Ok(())
}
