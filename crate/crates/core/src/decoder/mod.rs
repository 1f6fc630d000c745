//! The query-refinement stack.
//!
//! Each layer runs masked self-attention over all queries (match and noised
//! queries cannot see each other), sparse cross-attention against one
//! pyramid level, and a feedforward block. Before the first layer and
//! after every layer the shared heads produce class logits and per-voxel
//! mask heatmaps. The match-query heatmaps of one prediction guide the
//! next layer's selection; noised queries are guided by their target masks.
//!
//! Levels are visited round-robin from coarsest to finest.

mod semantic;

pub use semantic::{decode_labels, semantic_argmax, write_prediction_csv};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoise::NoisedQueries;
use crate::matrix::Matrix;
use crate::rng::{self, DropoutKey};
use crate::spotca::graph::{self, bound_var, DropoutSpec, SpotCaVars, Supports};
use crate::spotca::{Backend, Linear, SpotCaConfig, SpotCaError, SpotCaParams, Temperature};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};
use crate::voxel::{ScenePyramid, SparseVoxelGrid};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("noised queries are training-only")]
    NoisedAtInference,
    #[error(transparent)]
    SpotCa(#[from] SpotCaError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DecoderError>;

/// How class evidence scales mask evidence when decoding voxel labels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassScaling {
    /// `softmax(logits)[c] · sigmoid(heat)`.
    #[default]
    Softmax,
    /// `logits[c] · sigmoid(heat)`.
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub channels: usize,
    pub heads: usize,
    pub layers: usize,
    pub n_queries: usize,
    /// Taken from the scene rather than configured.
    #[serde(skip)]
    pub n_classes: usize,
    pub pyramid_levels: usize,
    pub rho: f64,
    pub backend: Backend,
    pub temperature: Temperature,
    pub value_proj: bool,
    pub dropout: f64,
    pub class_scaling: ClassScaling,
    pub empty_threshold: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            channels: 192,
            heads: 8,
            layers: 9,
            n_queries: 100,
            n_classes: 4,
            pyramid_levels: 3,
            rho: 0.08,
            backend: Backend::Prototype,
            temperature: Temperature::Full,
            value_proj: true,
            dropout: 0.0,
            class_scaling: ClassScaling::Softmax,
            empty_threshold: 0.25,
        }
    }
}

impl DecoderConfig {
    pub fn spot_config(&self) -> SpotCaConfig {
        SpotCaConfig {
            heads: self.heads,
            rho: self.rho,
            dropout_p: self.dropout,
            temperature: self.temperature,
            value_proj: self.value_proj,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spot_config().validate(self.channels)?;
        let bad = |m: String| Err(DecoderError::InvalidConfig(m));
        if self.layers == 0 {
            return bad("layers must be positive".into());
        }
        if self.n_queries == 0 {
            return bad("n_queries must be positive".into());
        }
        if self.n_classes < 2 {
            return bad(format!(
                "n_classes = {} (need the empty class and one more)",
                self.n_classes
            ));
        }
        if self.pyramid_levels == 0 {
            return bad("pyramid_levels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} outside [0, 1)", self.dropout));
        }
        if !self.empty_threshold.is_finite() {
            return bad("empty_threshold must be finite".into());
        }
        Ok(())
    }

    /// Pyramid level attended by `layer`.
    pub fn level_of(&self, layer: usize) -> usize {
        layer % self.pyramid_levels
    }
}

/// One prediction set. Rows are queries (match queries first), heatmap
/// columns are active voxels of the finest level in grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPrediction {
    pub class_logits: Matrix<f64>,
    pub mask_heatmaps: Matrix<f64>,
    pub n_match: usize,
}

impl LayerPrediction {
    /// Binarized match-query masks (`heatmap > 0`).
    pub fn match_masks(&self) -> Vec<Vec<bool>> {
        (0..self.n_match)
            .map(|q| self.mask_heatmaps.row(q).iter().map(|&h| h > 0.0).collect())
            .collect()
    }
}

/// Tape handles of one prediction set.
#[derive(Clone, Copy, Debug)]
pub struct PredictionVars {
    pub logits: Var,
    pub heat: Var,
}

/// What one layer attended to.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub level: usize,
    pub guidance: Vec<Vec<bool>>,
    pub supports: Supports,
}

pub struct ForwardOutput {
    /// `layers + 1` prediction sets; the first precedes any layer.
    pub preds: Vec<PredictionVars>,
    pub n_match: usize,
    pub n_noised: usize,
    pub trace: Vec<LayerTrace>,
}

impl ForwardOutput {
    pub fn predictions(&self, tape: &Tape) -> Vec<LayerPrediction> {
        self.preds
            .iter()
            .map(|p| LayerPrediction {
                class_logits: tape.value(p.logits).to_matrix(),
                mask_heatmaps: tape.value(p.heat).to_matrix(),
                n_match: self.n_match,
            })
            .collect()
    }
}

/// Training context: dropout is active only with `train`, and its masks are
/// addressed by `(dropout_seed, step, op)`.
#[derive(Clone, Copy, Debug)]
pub struct RunMode {
    pub train: bool,
    pub step: u64,
    pub dropout_seed: u64,
}

impl RunMode {
    pub fn inference() -> Self {
        Self {
            train: false,
            step: 0,
            dropout_seed: 0,
        }
    }
}

/// Name of the class-embedding table used only by noised queries.
pub const CLASS_EMBED: &str = "dn.class_embed";
const QUERIES: &str = "queries";

type Lin = (Var, Var);

struct SelfAttnVars {
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    norm: (Var, Var),
}

struct LayerVars {
    self_attn: SelfAttnVars,
    cross: SpotCaVars,
    cross_norm: (Var, Var),
    ffn: [Lin; 2],
    ffn_norm: (Var, Var),
}

struct HeadVars {
    norm: (Var, Var),
    class: [Lin; 2],
    mask: [Lin; 2],
}

fn add_norm(store: &mut ParamStore, name: &str, c: usize) {
    store.add(
        format!("{name}.gain"),
        Tensor::new(vec![c], vec![1.0; c]).expect("length"),
    );
    store.add(format!("{name}.bias"), Tensor::zeros(vec![c]));
}

fn add_gaussian<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rows: usize, cols: usize, std: f64, rng: &mut R) {
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    store.add(name, Tensor::matrix(rows, cols, data).expect("shape"));
}

/// Decoder hyperparameters plus learnable state.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub params: ParamStore,
}

impl Decoder {
    /// Initializes parameters from the `"init"` stream of `seed`. Queries
    /// are drawn from `N(0, 0.02²)`, class embeddings from `N(0, 1)`.
    pub fn new(cfg: DecoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "init");
        let c = cfg.channels;
        let mut store = ParamStore::new();
        add_gaussian(&mut store, QUERIES, cfg.n_queries, c, 0.02, &mut rng);
        for l in 0..cfg.layers {
            let p = format!("layer{l}");
            for s in ["q", "k", "v", "o"] {
                Linear::init(c, c, &mut rng).register(&mut store, &format!("{p}.self.{s}"));
            }
            add_norm(&mut store, &format!("{p}.self.norm"), c);
            SpotCaParams::init(c, &mut rng).register(&mut store, &format!("{p}.cross"));
            add_norm(&mut store, &format!("{p}.cross_norm"), c);
            Linear::init(c, 2 * c, &mut rng).register(&mut store, &format!("{p}.ffn.0"));
            Linear::init(2 * c, c, &mut rng).register(&mut store, &format!("{p}.ffn.1"));
            add_norm(&mut store, &format!("{p}.ffn.norm"), c);
        }
        add_norm(&mut store, "head.norm", c);
        Linear::init(c, c, &mut rng).register(&mut store, "head.class.0");
        Linear::init(c, cfg.n_classes, &mut rng).register(&mut store, "head.class.1");
        Linear::init(c, c, &mut rng).register(&mut store, "head.mask.0");
        Linear::init(c, c, &mut rng).register(&mut store, "head.mask.1");
        add_gaussian(&mut store, CLASS_EMBED, cfg.n_classes, c, 1.0, &mut rng);
        Ok(Self { cfg, params: store })
    }

    fn var(&self, bound: &[Var], name: &str) -> Result<Var> {
        Ok(bound_var(&self.params, bound, name)?)
    }

    fn lin(&self, bound: &[Var], name: &str) -> Result<Lin> {
        Ok((
            self.var(bound, &format!("{name}.w"))?,
            self.var(bound, &format!("{name}.b"))?,
        ))
    }

    fn norm(&self, bound: &[Var], name: &str) -> Result<(Var, Var)> {
        Ok((
            self.var(bound, &format!("{name}.gain"))?,
            self.var(bound, &format!("{name}.bias"))?,
        ))
    }

    fn layer_vars(&self, bound: &[Var], l: usize) -> Result<LayerVars> {
        let p = format!("layer{l}");
        Ok(LayerVars {
            self_attn: SelfAttnVars {
                q: self.lin(bound, &format!("{p}.self.q"))?,
                k: self.lin(bound, &format!("{p}.self.k"))?,
                v: self.lin(bound, &format!("{p}.self.v"))?,
                o: self.lin(bound, &format!("{p}.self.o"))?,
                norm: self.norm(bound, &format!("{p}.self.norm"))?,
            },
            cross: SpotCaVars::bind(&self.params, bound, &format!("{p}.cross"))?,
            cross_norm: self.norm(bound, &format!("{p}.cross_norm"))?,
            ffn: [
                self.lin(bound, &format!("{p}.ffn.0"))?,
                self.lin(bound, &format!("{p}.ffn.1"))?,
            ],
            ffn_norm: self.norm(bound, &format!("{p}.ffn.norm"))?,
        })
    }

    fn head_vars(&self, bound: &[Var]) -> Result<HeadVars> {
        Ok(HeadVars {
            norm: self.norm(bound, "head.norm")?,
            class: [self.lin(bound, "head.class.0")?, self.lin(bound, "head.class.1")?],
            mask: [self.lin(bound, "head.mask.0")?, self.lin(bound, "head.mask.1")?],
        })
    }

    fn dropout(&self, mode: RunMode, layer: usize, site: u64) -> DropoutSpec {
        DropoutSpec {
            p: self.cfg.dropout,
            key: DropoutKey::new(mode.dropout_seed, mode.step, layer as u64 * 4 + site),
            train: mode.train,
        }
    }

    fn check_grid(&self, grid: &SparseVoxelGrid) -> Result<()> {
        if grid.channels() != self.cfg.channels {
            return Err(DecoderError::DimensionMismatch(format!(
                "grid has {} channels, decoder {}",
                grid.channels(),
                self.cfg.channels
            )));
        }
        Ok(())
    }

    fn predict_vars(&self, tape: &mut Tape, h: &HeadVars, x: Var, feat_t: Var) -> Result<PredictionVars> {
        let z = tape.layer_norm(x, h.norm.0, h.norm.1)?;
        let a = tape.linear(z, h.class[0].0, h.class[0].1)?;
        let a = tape.relu(a)?;
        let logits = tape.linear(a, h.class[1].0, h.class[1].1)?;
        let m = tape.linear(z, h.mask[0].0, h.mask[0].1)?;
        let m = tape.relu(m)?;
        let emb = tape.linear(m, h.mask[1].0, h.mask[1].1)?;
        let heat = tape.matmul(emb, feat_t)?;
        Ok(PredictionVars { logits, heat })
    }

    /// Heads applied to `queries` (`N × C`) against the voxels of `grid`.
    pub fn predict(&self, queries: &Matrix<f64>, grid: &SparseVoxelGrid) -> Result<LayerPrediction> {
        self.check_grid(grid)?;
        let mut tape = Tape::no_grad();
        let bound = self.params.bind(&mut tape);
        let h = self.head_vars(&bound)?;
        let x = tape.constant(Tensor::from_matrix(queries));
        let ft = tape.constant(Tensor::from_matrix(&grid.features().transpose()));
        let p = self.predict_vars(&mut tape, &h, x, ft)?;
        Ok(LayerPrediction {
            class_logits: tape.value(p.logits).to_matrix(),
            mask_heatmaps: tape.value(p.heat).to_matrix(),
            n_match: queries.rows(),
        })
    }

    fn self_attention(
        &self,
        tape: &mut Tape,
        v: &SelfAttnVars,
        x: Var,
        n_match: usize,
        drop: DropoutSpec,
    ) -> Result<Var> {
        let n = tape.value(x).rows();
        let q = tape.linear(x, v.q.0, v.q.1)?;
        let k = tape.linear(x, v.k.0, v.k.1)?;
        let vv = tape.linear(x, v.v.0, v.v.1)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, 1.0 / (self.cfg.channels as f64).sqrt())?;
        let allowed: Vec<bool> = (0..n * n).map(|ij| (ij / n < n_match) == (ij % n < n_match)).collect();
        let a = tape.masked_softmax_lastdim(s, &allowed)?;
        let o = tape.matmul(a, vv)?;
        let o = tape.linear(o, v.o.0, v.o.1)?;
        let o = tape.dropout(o, drop.p, drop.key, drop.train)?;
        let r = tape.add(x, o)?;
        Ok(tape.layer_norm(r, v.norm.0, v.norm.1)?)
    }

    /// One layer on `x` (`N × C`, match rows first). `guidance` holds one
    /// mask per row over the voxels of `keys`.
    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape,
        v: &LayerVars,
        layer: usize,
        x: Var,
        n_match: usize,
        keys: Var,
        guidance: &[Vec<bool>],
        mode: RunMode,
    ) -> Result<(Var, Supports)> {
        let x = self.self_attention(tape, &v.self_attn, x, n_match, self.dropout(mode, layer, 0))?;
        let (x, supports) = graph::spot_cross_attention(
            tape,
            &v.cross,
            &self.cfg.spot_config(),
            self.cfg.backend,
            x,
            keys,
            Some(guidance),
            self.dropout(mode, layer, 1),
        )?;
        let x = tape.layer_norm(x, v.cross_norm.0, v.cross_norm.1)?;
        let h = tape.linear(x, v.ffn[0].0, v.ffn[0].1)?;
        let h = tape.relu(h)?;
        let h = tape.linear(h, v.ffn[1].0, v.ffn[1].1)?;
        let d = self.dropout(mode, layer, 2);
        let h = tape.dropout(h, d.p, d.key, d.train)?;
        let r = tape.add(x, h)?;
        Ok((tape.layer_norm(r, v.ffn_norm.0, v.ffn_norm.1)?, supports))
    }

    /// Runs layer `layer` alone on explicit inputs, with `keys` taken from
    /// `grid`.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_layer(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        layer: usize,
        x: Var,
        n_match: usize,
        grid: &SparseVoxelGrid,
        guidance: &[Vec<bool>],
        mode: RunMode,
    ) -> Result<(Var, Supports)> {
        if layer >= self.cfg.layers {
            return Err(DecoderError::InvalidConfig(format!(
                "layer {layer} of {}",
                self.cfg.layers
            )));
        }
        self.check_grid(grid)?;
        let v = self.layer_vars(bound, layer)?;
        let keys = tape.constant(Tensor::from_matrix(grid.features()));
        self.layer(tape, &v, layer, x, n_match, keys, guidance, mode)
    }

    /// Full forward pass. `bound` comes from `self.params.bind(tape)`.
    /// Noised queries are appended after the match queries and require
    /// `mode.train`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        pyramid: &ScenePyramid,
        noised: Option<&NoisedQueries>,
        mode: RunMode,
    ) -> Result<ForwardOutput> {
        if noised.is_some() && !mode.train {
            return Err(DecoderError::NoisedAtInference);
        }
        if pyramid.n_levels() != self.cfg.pyramid_levels {
            return Err(DecoderError::DimensionMismatch(format!(
                "pyramid has {} levels, decoder expects {}",
                pyramid.n_levels(),
                self.cfg.pyramid_levels
            )));
        }
        let finest = pyramid.finest();
        self.check_grid(finest)?;
        let nv = finest.nv();
        let keys: Vec<Var> = (0..pyramid.n_levels())
            .map(|l| tape.constant(Tensor::from_matrix(pyramid.level(l).features())))
            .collect();
        let feat_t = tape.constant(Tensor::from_matrix(&finest.features().transpose()));
        let head = self.head_vars(bound)?;

        let n_match = self.cfg.n_queries;
        let mut x = self.var(bound, QUERIES)?;
        let mut n_noised = 0;
        if let Some(dn) = noised {
            if dn.targets.masks.iter().any(|m| m.len() != nv) {
                return Err(DecoderError::DimensionMismatch(format!(
                    "noised-query masks must cover {nv} voxels"
                )));
            }
            let table = self.var(bound, CLASS_EMBED)?;
            let idx: Vec<usize> = dn.noised_class.iter().map(|&c| c as usize).collect();
            let rows = tape.gather_rows(table, &idx)?;
            let delta = tape.constant(Tensor::from_matrix(&dn.delta));
            let q = tape.add(rows, delta)?;
            x = tape.concat_rows(&[x, q])?;
            n_noised = idx.len();
        }

        let mut preds = vec![self.predict_vars(tape, &head, x, feat_t)?];
        let mut trace = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let level = self.cfg.level_of(l);
            let prev = tape.value(preds[l].heat);
            let mut guidance = Vec::with_capacity(n_match + n_noised);
            for q in 0..n_match {
                let fine: Vec<bool> = prev.row(q).iter().map(|&h| h > 0.0).collect();
                guidance.push(pyramid.project_mask(level, &fine));
            }
            if let Some(dn) = noised {
                for m in &dn.targets.masks {
                    guidance.push(pyramid.project_mask(level, m));
                }
            }
            let v = self.layer_vars(bound, l)?;
            let (nx, supports) = self.layer(tape, &v, l, x, n_match, keys[level], &guidance, mode)?;
            x = nx;
            trace.push(LayerTrace {
                level,
                guidance,
                supports,
            });
            preds.push(self.predict_vars(tape, &head, x, feat_t)?);
        }
        Ok(ForwardOutput {
            preds,
            n_match,
            n_noised,
            trace,
        })
    }

    /// Match-query predictions for every layer, computed without gradient
    /// tracking and without any noised queries.
    pub fn infer(&self, pyramid: &ScenePyramid) -> Result<Vec<LayerPrediction>> {
        let mut tape = Tape::no_grad();
        let bound = self.params.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, pyramid, None, RunMode::inference())?;
        Ok(out.predictions(&tape))
    }

    /// Voxel labels from the last prediction of [`infer`](Self::infer).
    pub fn labels(&self, preds: &[LayerPrediction]) -> Vec<u32> {
        preds
            .last()
            .map(|p| semantic_argmax(p, self.cfg.class_scaling, self.cfg.empty_threshold))
            .unwrap_or_default()
    }
}
