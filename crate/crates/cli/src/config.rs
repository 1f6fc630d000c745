//! TOML run configuration. Every section is optional; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spot_core::bench::BenchConfig;
use spot_core::decoder::DecoderConfig;
use spot_core::denoise::DnConfig;
use spot_core::losses::LossWeights;
use spot_core::train::TrainConfig;
use spot_core::voxel::SceneSpec;

/// Where the scene comes from: a scene file, or a synthetic scene drawn
/// from the root seed with the model's channel count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: Option<PathBuf>,
    pub dims: [u32; 3],
    pub n_objects: u32,
    pub n_classes: u32,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            scene: None,
            dims: s.dims,
            n_objects: s.n_objects,
            n_classes: s.n_classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub rho: Vec<f64>,
    /// Timed inference passes per table row.
    pub latency_repeats: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            rho: vec![0.02, 0.04, 0.06, 0.08, 0.10, 0.12],
            latency_repeats: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every named random stream.
    pub seed: u64,
    pub model: DecoderConfig,
    pub dn: DnConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
    pub bench: BenchConfig,
    pub ablate: AblateConfig,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

impl RunConfig {
    /// Parses `text`; errors name the source, line and column.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| {
                    let (l, c) = line_col(text, s.start);
                    format!(":{l}:{c}")
                })
                .unwrap_or_default();
            anyhow::anyhow!("{source}{at}: {}", e.message().trim())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.check_paths()?;
        Ok(cfg)
    }

    pub fn check_paths(&self) -> Result<()> {
        if let Some(p) = &self.data.scene {
            if !p.is_file() {
                bail!("data.scene: no such file {}", p.display());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing resolved config")
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            dims: self.data.dims,
            n_objects: self.data.n_objects,
            n_classes: self.data.n_classes,
            channels: self.model.channels as u32,
            seed: self.seed,
        }
    }
}
