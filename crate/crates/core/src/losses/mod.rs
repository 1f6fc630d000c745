//! Training objective: Hungarian-matched set loss for match queries and a
//! positionally assigned reconstruction loss for noised queries.
//!
//! Both share one composition per layer,
//! `w_ce·CE + w_bce·BCE + w_dice·Dice`, with the mask terms evaluated on a
//! sampled subset of voxels, and both are summed uniformly over layers.
//! The class index 0 doubles as the no-object class.

mod hungarian;

pub use hungarian::{hungarian_match, Assignment};

use std::io::Write;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{LayerPrediction, PredictionVars};
use crate::denoise::DnTargets;
use crate::matrix::Matrix;
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::voxel::{SceneGroundTruth, EMPTY_CLASS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("empty point sample")]
    EmptySample,
    #[error("non-finite cost at query {query}, object {object}")]
    NonFiniteCost { query: usize, object: usize },
    #[error("{objects} objects cannot be matched to {queries} queries")]
    TooManyObjects { objects: usize, queries: usize },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_ce: f64,
    pub w_bce: f64,
    pub w_dice: f64,
    pub no_object_weight: f64,
    pub n_sample_points: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_ce: 2.0,
            w_bce: 5.0,
            w_dice: 5.0,
            no_object_weight: 0.1,
            n_sample_points: 2048,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_ce", self.w_ce), ("w_bce", self.w_bce), ("w_dice", self.w_dice)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(LossError::InvalidWeights(format!("{name} = {w}")));
            }
        }
        if !(self.no_object_weight > 0.0 && self.no_object_weight <= 1.0) {
            return Err(LossError::InvalidWeights(format!(
                "no_object_weight = {} outside (0, 1]",
                self.no_object_weight
            )));
        }
        if self.n_sample_points == 0 {
            return Err(LossError::InvalidWeights("n_sample_points must be positive".into()));
        }
        Ok(())
    }

    /// All-zero weights, for checking that the loss vanishes.
    pub fn zero() -> Self {
        Self {
            w_ce: 0.0,
            w_bce: 0.0,
            w_dice: 0.0,
            ..Self::default()
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bce_term(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `1 − (2·Σσ(x)·t + 1) / (Σσ(x) + Σt + 1)`.
pub fn dice_loss(logits: &[f64], target: &[bool]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(LossError::LengthMismatch(format!(
            "{} logits, {} targets",
            logits.len(),
            target.len()
        )));
    }
    let (mut inter, mut psum, mut tsum) = (0.0, 0.0, 0.0);
    for (&x, &t) in logits.iter().zip(target) {
        let p = sigmoid(x);
        let t = indicator(t);
        inter += p * t;
        psum += p;
        tsum += t;
    }
    Ok(1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0))
}

/// Mean binary cross-entropy with logits over `sampled` positions.
pub fn mask_bce(logits: &[f64], target: &[bool], sampled: &[usize]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(LossError::LengthMismatch(format!(
            "{} logits, {} targets",
            logits.len(),
            target.len()
        )));
    }
    if sampled.is_empty() {
        return Err(LossError::EmptySample);
    }
    if let Some(&i) = sampled.iter().find(|&&i| i >= logits.len()) {
        return Err(LossError::LengthMismatch(format!(
            "sample index {i} of {}",
            logits.len()
        )));
    }
    Ok(sampled
        .iter()
        .map(|&i| bce_term(logits[i], indicator(target[i])))
        .sum::<f64>()
        / sampled.len() as f64)
}

/// `−log softmax(logits)[class]`.
pub fn class_nll(logits: &[f64], class: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[class]
}

/// Uniform sample of `min(nv, n)` distinct voxel indices, ascending.
pub fn sample_points<R: Rng + ?Sized>(nv: usize, n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = sample(rng, nv, n.min(nv)).into_vec();
    idx.sort_unstable();
    idx
}

fn gather(values: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| values[i]).collect()
}

fn gather_mask(mask: &[bool], idx: &[usize]) -> Vec<bool> {
    idx.iter().map(|&i| mask[i]).collect()
}

/// Cost of assigning one query (its class logits and heatmap row) to one
/// object: `w_ce·(−log p_class) + w_bce·BCE + w_dice·Dice` on `points`.
pub fn match_cost(
    logits: &[f64],
    heat: &[f64],
    class: u32,
    mask: &[bool],
    points: &[usize],
    w: &LossWeights,
) -> Result<f64> {
    let ce = class_nll(logits, class as usize);
    let bce = mask_bce(heat, mask, points)?;
    let dice = dice_loss(&gather(heat, points), &gather_mask(mask, points))?;
    Ok(w.w_ce * ce + w.w_bce * bce + w.w_dice * dice)
}

/// `Nq × Nobj` matching costs over the first `n_match` rows of a
/// prediction.
pub fn cost_matrix(
    pred: &LayerPrediction,
    gt: &SceneGroundTruth,
    points: &[usize],
    w: &LossWeights,
) -> Result<Matrix<f64>> {
    let nv = pred.mask_heatmaps.cols();
    let masks: Vec<Vec<bool>> = gt.objects.iter().map(|o| o.mask_bool(nv)).collect();
    let mut out = Matrix::zeros(pred.n_match, gt.objects.len());
    for q in 0..pred.n_match {
        for (o, obj) in gt.objects.iter().enumerate() {
            let c = match_cost(
                pred.class_logits.row(q),
                pred.mask_heatmaps.row(q),
                obj.class_id,
                &masks[o],
                points,
                w,
            )?;
            out.set(q, o, c);
        }
    }
    Ok(out)
}

/// Frozen per-layer choices: sampled points and the match assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub points: Vec<usize>,
    pub assignment: Assignment,
}

/// Draws points and runs the matching for every layer, in layer order.
pub fn plan_layers<R: Rng + ?Sized>(
    preds: &[LayerPrediction],
    gt: &SceneGroundTruth,
    w: &LossWeights,
    rng: &mut R,
) -> Result<Vec<LayerPlan>> {
    preds
        .iter()
        .map(|p| {
            let points = sample_points(p.mask_heatmaps.cols(), w.n_sample_points, rng);
            let cost = cost_matrix(p, gt, &points, w)?;
            Ok(LayerPlan {
                assignment: hungarian_match(&cost)?,
                points,
            })
        })
        .collect()
}

/// `w_ce·CE(rows) + w_bce·BCE + w_dice·Dice` for one layer. `pairs` index
/// rows of `logits` and `masks`.
#[allow(clippy::too_many_arguments)]
fn compose(
    tape: &mut Tape,
    logits: Var,
    heat: Var,
    ce_rows: &[usize],
    ce_targets: &[usize],
    ce_weights: &[f64],
    pairs: &[(usize, &[bool])],
    points: &[usize],
    w: &LossWeights,
) -> Result<Var> {
    let rows = tape.gather_rows(logits, ce_rows)?;
    let ce = tape.cross_entropy(rows, ce_targets, ce_weights)?;
    let mut total = tape.scale(ce, w.w_ce)?;
    if !pairs.is_empty() {
        if points.is_empty() {
            return Err(LossError::EmptySample);
        }
        let q: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let sel = tape.gather_rows(heat, &q)?;
        let sel = tape.gather_cols(sel, points)?;
        let targets: Vec<f64> = pairs
            .iter()
            .flat_map(|(_, m)| points.iter().map(|&i| indicator(m[i])))
            .collect();
        let bce = tape.bce_with_logits(sel, &targets)?;
        let dice = tape.dice(sel, &targets)?;
        let bce = tape.scale(bce, w.w_bce)?;
        let dice = tape.scale(dice, w.w_dice)?;
        total = tape.add(total, bce)?;
        total = tape.add(total, dice)?;
    }
    Ok(total)
}

/// Matching loss recorded on the tape, summed over layers. `plans` fixes
/// points and assignment per layer.
pub fn match_loss_on_tape(
    tape: &mut Tape,
    preds: &[PredictionVars],
    n_match: usize,
    gt: &SceneGroundTruth,
    plans: &[LayerPlan],
    w: &LossWeights,
) -> Result<Var> {
    if preds.len() != plans.len() {
        return Err(LossError::LengthMismatch(format!(
            "{} layers, {} plans",
            preds.len(),
            plans.len()
        )));
    }
    let Some(first) = preds.first() else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let nv = tape.value(first.heat).cols();
    let masks: Vec<Vec<bool>> = gt.objects.iter().map(|o| o.mask_bool(nv)).collect();
    let rows: Vec<usize> = (0..n_match).collect();
    let mut total = None;
    for (p, plan) in preds.iter().zip(plans) {
        let matched = plan.assignment.by_query(n_match);
        let targets: Vec<usize> = matched
            .iter()
            .map(|m| m.map_or(EMPTY_CLASS as usize, |o| gt.objects[o].class_id as usize))
            .collect();
        let weights: Vec<f64> = matched
            .iter()
            .map(|m| if m.is_some() { 1.0 } else { w.no_object_weight })
            .collect();
        let pairs: Vec<(usize, &[bool])> = plan
            .assignment
            .pairs
            .iter()
            .map(|&(q, o)| (q, masks[o].as_slice()))
            .collect();
        let l = compose(
            tape,
            p.logits,
            p.heat,
            &rows,
            &targets,
            &weights,
            &pairs,
            &plan.points,
            w,
        )?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

/// Denoising loss recorded on the tape: noised query `i` (row
/// `n_match + i`) reconstructs object `assignment[i]`'s true class and
/// mask. Points are shared with the matching loss via `points[layer]`.
#[allow(clippy::too_many_arguments)]
pub fn dn_loss_on_tape(
    tape: &mut Tape,
    preds: &[PredictionVars],
    n_match: usize,
    targets: &DnTargets,
    assignment: &[(usize, usize)],
    points: &[Vec<usize>],
    w: &LossWeights,
) -> Result<Var> {
    if preds.len() != points.len() {
        return Err(LossError::LengthMismatch(format!(
            "{} layers, {} point sets",
            preds.len(),
            points.len()
        )));
    }
    if assignment.len() != targets.len() {
        return Err(LossError::LengthMismatch(format!(
            "{} assignments for {} noised queries",
            assignment.len(),
            targets.len()
        )));
    }
    if targets.is_empty() || preds.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let rows: Vec<usize> = assignment.iter().map(|&(q, _)| n_match + q).collect();
    let classes: Vec<usize> = assignment.iter().map(|&(q, _)| targets.gt_class[q] as usize).collect();
    let weights = vec![1.0; rows.len()];
    let pairs: Vec<(usize, &[bool])> = assignment
        .iter()
        .map(|&(q, _)| (n_match + q, targets.masks[q].as_slice()))
        .collect();
    let mut total = None;
    for (p, pts) in preds.iter().zip(points) {
        let l = compose(tape, p.logits, p.heat, &rows, &classes, &weights, &pairs, pts, w)?;
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn constant_preds(tape: &mut Tape, preds: &[LayerPrediction]) -> Vec<PredictionVars> {
    preds
        .iter()
        .map(|p| PredictionVars {
            logits: tape.constant(Tensor::from_matrix(&p.class_logits)),
            heat: tape.constant(Tensor::from_matrix(&p.mask_heatmaps)),
        })
        .collect()
}

/// Value of the matching loss for fixed predictions, drawing points from
/// `rng` per layer.
pub fn loss_match<R: Rng + ?Sized>(
    preds: &[LayerPrediction],
    gt: &SceneGroundTruth,
    w: &LossWeights,
    rng: &mut R,
) -> Result<f64> {
    if preds.is_empty() {
        return Ok(0.0);
    }
    let plans = plan_layers(preds, gt, w, rng)?;
    let mut tape = Tape::no_grad();
    let vars = constant_preds(&mut tape, preds);
    let l = match_loss_on_tape(&mut tape, &vars, preds[0].n_match, gt, &plans, w)?;
    Ok(tape.value(l).item())
}

/// Value of the denoising loss for fixed predictions.
pub fn loss_dn<R: Rng + ?Sized>(
    preds: &[LayerPrediction],
    targets: &DnTargets,
    assignment: &[(usize, usize)],
    w: &LossWeights,
    rng: &mut R,
) -> Result<f64> {
    if preds.is_empty() {
        return Ok(0.0);
    }
    let points: Vec<Vec<usize>> = preds
        .iter()
        .map(|p| sample_points(p.mask_heatmaps.cols(), w.n_sample_points, rng))
        .collect();
    let mut tape = Tape::no_grad();
    let vars = constant_preds(&mut tape, preds);
    let l = dn_loss_on_tape(&mut tape, &vars, preds[0].n_match, targets, assignment, &points, w)?;
    Ok(tape.value(l).item())
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_match: f64,
    pub l_dn: f64,
}

impl LossRecord {
    pub fn total(&self) -> f64 {
        self.l_match + self.l_dn
    }
}

pub fn write_loss_csv<W: Write>(mut w: W, records: &[LossRecord]) -> std::io::Result<()> {
    writeln!(w, "step,l_match,l_dn,total")?;
    for r in records {
        writeln!(w, "{},{:e},{:e},{:e}", r.step, r.l_match, r.l_dn, r.total())?;
    }
    Ok(())
}
