//! Sparse prototype-guided cross-attention.
//!
//! Each query scores every candidate voxel by per-head cosine similarity of
//! projected query and key vectors, keeps the `k = ⌈ρ·Nv⌉` highest-scoring
//! voxels as prototypes, aggregates their values with a temperature-scaled
//! softmax, and refines itself through a gated two-FFN block.
//!
//! Two implementations share these semantics:
//!
//! * [`attend`] / [`spot_cross_attention`] / [`dense_reference`]: forward-only
//!   kernels, generic over `f32`/`f64`, with operation counters and optional
//!   phase timing. The three [`Backend`]s compute in the same order, so a
//!   full selection reproduces the dense result bit for bit.
//! * [`graph`]: the same operator recorded on a [`crate::tensor::Tape`] for
//!   training.

pub mod graph;
mod kernel;
mod params;
mod select;

pub use kernel::{
    aggregate, attend, dense_reference, refine_query, spot_cross_attention, AttentionOptions, AttentionOutput,
    OpCounters, PhaseTimes,
};
pub use params::{Linear, SpotCaParams};
pub use select::{prototype_count, select_top_rho, top_k_support, HeadSelection, PrototypeSelection};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpotCaError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("key set is empty")]
    EmptyKeys,
    #[error("empty selection")]
    EmptySelection,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, SpotCaError>;

/// Attention regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Full softmax over every key.
    Dense,
    /// Full-size score row with excluded keys set to `-inf`.
    Masked,
    /// Top-ρ prototype selection.
    Prototype,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Dense, Backend::Masked, Backend::Prototype];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Dense => "dense",
            Backend::Masked => "masked",
            Backend::Prototype => "prototype",
        }
    }
}

impl std::fmt::Display for Backend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "dense" => Ok(Backend::Dense),
            "masked" => Ok(Backend::Masked),
            "prototype" => Ok(Backend::Prototype),
            other => Err(format!("unknown backend `{other}` (dense, masked, prototype)")),
        }
    }
}

/// Softmax temperature divisor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temperature {
    /// `√C` with `C` the full channel count.
    #[default]
    Full,
    /// `√(C/H)`.
    PerHead,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpotCaConfig {
    pub heads: usize,
    pub rho: f64,
    pub dropout_p: f64,
    pub temperature: Temperature,
    /// Apply a value projection; otherwise raw features are aggregated.
    pub value_proj: bool,
}

impl Default for SpotCaConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            rho: 0.08,
            dropout_p: 0.0,
            temperature: Temperature::Full,
            value_proj: true,
        }
    }
}

impl SpotCaConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || channels % self.heads != 0 {
            return Err(SpotCaError::InvalidConfig(format!(
                "{} heads do not divide {channels} channels",
                self.heads
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(SpotCaError::InvalidConfig(format!("rho = {} outside (0, 1]", self.rho)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(SpotCaError::InvalidConfig(format!(
                "dropout_p = {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// `1/√C` or `1/√(C/H)`.
    pub fn inv_temperature(&self, channels: usize) -> f64 {
        let d = match self.temperature {
            Temperature::Full => channels,
            Temperature::PerHead => channels / self.heads,
        };
        1.0 / (d as f64).sqrt()
    }
}

/// Cosine similarity; 0 if either vector is zero.
pub fn saliency(q: &[f64], k: &[f64]) -> Result<f64> {
    if q.len() != k.len() {
        return Err(SpotCaError::DimensionMismatch(format!(
            "query head has {} dims, key head {}",
            q.len(),
            k.len()
        )));
    }
    let nq = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nk = k.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nq == 0.0 || nk == 0.0 {
        return Ok(0.0);
    }
    Ok(q.iter().zip(k).map(|(a, b)| (a / nq) * (b / nk)).sum())
}
