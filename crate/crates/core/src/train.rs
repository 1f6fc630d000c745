//! Single-scene training loop and evaluation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{Decoder, DecoderError, LayerPrediction, RunMode, CLASS_EMBED};
use crate::denoise::{dn_assignment, make_noised_queries, ClassEmbeddingTable, DenoiseError, DnConfig};
use crate::losses::{dn_loss_on_tape, match_loss_on_tape, plan_layers, LossError, LossRecord, LossWeights};
use crate::metrics::{lm_iou, ConfusionAccumulator, MetricError};
use crate::rng::{self, stream_seed};
use crate::tensor::{sgd_step, AdamW, Tape, TensorError};
use crate::voxel::{SceneGroundTruth, ScenePyramid, SparseVoxelGrid};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Denoise(#[from] DenoiseError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Adamw,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            lr: 1e-3,
            weight_decay: 1e-4,
            optimizer: Optimizer::Adamw,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::InvalidConfig(format!("lr = {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "weight_decay = {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// A scene prepared for the decoder.
#[derive(Clone, Debug)]
pub struct TrainScene {
    pub pyramid: ScenePyramid,
    pub gt: SceneGroundTruth,
}

impl TrainScene {
    pub fn new(grid: &SparseVoxelGrid, gt: SceneGroundTruth, levels: usize) -> Self {
        Self {
            pyramid: ScenePyramid::build(grid, levels),
            gt,
        }
    }
}

/// Optimizer state plus the random streams consumed by training.
pub struct Trainer {
    pub decoder: Decoder,
    pub dn: DnConfig,
    pub weights: LossWeights,
    cfg: TrainConfig,
    adamw: AdamW,
    sampling: ChaCha8Rng,
    dn_noise: ChaCha8Rng,
    dropout_seed: u64,
    step: usize,
}

impl Trainer {
    /// Streams `"sampling"`, `"dn-noise"` and `"dropout"` are derived from
    /// `seed`.
    pub fn new(decoder: Decoder, dn: DnConfig, weights: LossWeights, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        if dn.enabled {
            dn.validate()?;
        }
        Ok(Self {
            decoder,
            dn,
            weights,
            adamw: AdamW::new(cfg.lr, (0.9, 0.999), cfg.weight_decay),
            cfg,
            sampling: rng::stream(seed, "sampling"),
            dn_noise: rng::stream(seed, "dn-noise"),
            dropout_seed: stream_seed(seed, "dropout"),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn class_table(&self) -> ClassEmbeddingTable {
        let p = &self.decoder.params;
        let id = p.find(CLASS_EMBED).expect("decoder registers the class table");
        ClassEmbeddingTable {
            rows: p.get(id).to_matrix(),
        }
    }

    /// One optimizer step on `scene`.
    pub fn step(&mut self, scene: &TrainScene) -> Result<LossRecord> {
        let noised = if self.dn.enabled && !scene.gt.objects.is_empty() {
            Some(make_noised_queries(
                &scene.gt,
                &self.class_table(),
                &self.dn,
                &mut self.dn_noise,
            )?)
        } else {
            None
        };
        let mode = RunMode {
            train: true,
            step: self.step as u64,
            dropout_seed: self.dropout_seed,
        };
        let mut tape = Tape::new();
        let bound = self.decoder.params.bind(&mut tape);
        let out = self
            .decoder
            .forward(&mut tape, &bound, &scene.pyramid, noised.as_ref(), mode)?;
        let values = out.predictions(&tape);
        let plans = plan_layers(&values, &scene.gt, &self.weights, &mut self.sampling)?;
        let l_match = match_loss_on_tape(&mut tape, &out.preds, out.n_match, &scene.gt, &plans, &self.weights)?;
        let mut total = l_match;
        let mut l_dn_value = 0.0;
        if let Some(dn) = &noised {
            let points: Vec<Vec<usize>> = plans.iter().map(|p| p.points.clone()).collect();
            let l_dn = dn_loss_on_tape(
                &mut tape,
                &out.preds,
                out.n_match,
                &dn.targets,
                &dn_assignment(&dn.targets),
                &points,
                &self.weights,
            )?;
            l_dn_value = tape.value(l_dn).item();
            total = tape.add(total, l_dn)?;
        }
        let record = LossRecord {
            step: self.step,
            l_match: tape.value(l_match).item(),
            l_dn: l_dn_value,
        };
        tape.backward(total)?;
        let params = &mut self.decoder.params;
        params.zero_grads();
        params.accumulate_grads(&tape, &bound);
        match self.cfg.optimizer {
            Optimizer::Adamw => self.adamw.step(params)?,
            Optimizer::Sgd => sgd_step(params, self.cfg.lr)?,
        }
        self.step += 1;
        Ok(record)
    }

    /// Runs `cfg.steps` steps, returning the loss of each.
    pub fn run(&mut self, scene: &TrainScene) -> Result<Vec<LossRecord>> {
        (0..self.cfg.steps).map(|_| self.step(scene)).collect()
    }
}

/// Metrics of one inference pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub labels: Vec<u32>,
    pub confusion: ConfusionAccumulator,
    /// `lm_iou[l − 1]` compares prediction sets `l − 1` and `l`.
    pub lm_iou: Vec<f64>,
    pub predictions: Vec<LayerPrediction>,
}

impl Evaluation {
    pub fn miou(&self) -> f64 {
        self.confusion.miou()
    }
}

pub fn evaluate(decoder: &Decoder, scene: &TrainScene) -> Result<Evaluation> {
    let predictions = decoder.infer(&scene.pyramid)?;
    let labels = decoder.labels(&predictions);
    let mut confusion = ConfusionAccumulator::new(decoder.cfg.n_classes);
    confusion.update(&labels, &scene.gt.labels)?;
    let masks: Vec<Vec<Vec<bool>>> = predictions.iter().map(LayerPrediction::match_masks).collect();
    let lm = (1..masks.len())
        .map(|l| lm_iou(&masks, l))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Evaluation {
        labels,
        confusion,
        lm_iou: lm,
        predictions,
    })
}
