//! TOML experiment configuration with CLI flag overrides.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use symlens::metric::CgConfig;
use symlens::models::ModelConfig;
use symlens::pde::dataset::DatasetRequest;
use symlens::pde::{Axis, IcMode};
use symlens::symmetry::OrbitSpec;
use symlens::train::TrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
    #[serde(default = "d_grid")]
    pub grid: usize,
    #[serde(default = "d_trajectories")]
    pub trajectories: usize,
    #[serde(default = "d_states")]
    pub states: usize,
    /// "isotropic" or "anisotropic".
    #[serde(default = "d_ic")]
    pub ic: String,
    /// Stretched axis for anisotropic initial conditions: "x" or "y".
    #[serde(default = "d_axis")]
    pub axis: String,
    #[serde(default = "d_aspect")]
    pub aspect: f64,
    #[serde(default = "d_nu")]
    pub nu: f64,
    #[serde(default = "d_nu")]
    pub kappa: f64,
    /// Explicit time step; omit for the default diffusive margin.
    pub dt: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_train_fraction")]
    pub train_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "conv-unet", "patch-mixer" or "equiv-ref".
    pub family: String,
    #[serde(default = "d_depth")]
    pub depth: usize,
    #[serde(default = "d_width")]
    pub width: usize,
    #[serde(default = "d_patch")]
    pub patch: usize,
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_pos_embed")]
    pub pos_embed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub dir: PathBuf,
    #[serde(default = "d_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub dir: PathBuf,
    /// "d4", "th", "tv" or "grid".
    #[serde(default = "d_group")]
    pub group: String,
    /// Translation stride; defaults to grid/8.
    pub stride: Option<usize>,
    #[serde(default = "d_sweep_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_batches")]
    pub batches: usize,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_tol")]
    pub tol: f64,
    pub max_iters: Option<usize>,
}

fn d_grid() -> usize {
    32
}
fn d_trajectories() -> usize {
    16
}
fn d_states() -> usize {
    8
}
fn d_ic() -> String {
    "isotropic".into()
}
fn d_axis() -> String {
    "x".into()
}
fn d_aspect() -> f64 {
    4.0
}
fn d_nu() -> f64 {
    5e-3
}
fn d_train_fraction() -> f64 {
    0.75
}
fn d_depth() -> usize {
    2
}
fn d_width() -> usize {
    12
}
fn d_patch() -> usize {
    4
}
fn d_layers() -> usize {
    3
}
fn d_pos_embed() -> bool {
    true
}
fn d_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn d_epochs() -> usize {
    40
}
fn d_batch_size() -> usize {
    16
}
fn d_lr() -> f64 {
    5e-4
}
fn d_wd() -> f64 {
    1e-6
}
fn d_group() -> String {
    "d4".into()
}
fn d_sweep_batch_size() -> usize {
    16
}
fn d_batches() -> usize {
    2
}
fn d_lambda() -> f64 {
    1e-6
}
fn d_tol() -> f64 {
    1e-8
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn ic_mode(&self) -> Result<IcMode> {
        let axis = match self.data.axis.as_str() {
            "x" => Axis::X,
            "y" => Axis::Y,
            other => bail!("unknown axis {other:?} (expected \"x\" or \"y\")"),
        };
        match self.data.ic.as_str() {
            "isotropic" => Ok(IcMode::Isotropic),
            "anisotropic" => Ok(IcMode::Anisotropic {
                axis,
                aspect: self.data.aspect,
            }),
            other => bail!("unknown ic mode {other:?}"),
        }
    }

    pub fn dataset_request(&self) -> Result<DatasetRequest> {
        Ok(DatasetRequest {
            grid: self.data.grid,
            trajectories: self.data.trajectories,
            states: self.data.states,
            ic: self.ic_mode()?,
            nu: self.data.nu,
            kappa: self.data.kappa,
            dt: self.data.dt,
            seed: self.data.seed,
            train_fraction: self.data.train_fraction,
        })
    }

    pub fn model_config(&self, seed: u64) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(match m.family.as_str() {
            "conv-unet" => ModelConfig::ConvUnet {
                grid: self.data.grid,
                depth: m.depth,
                width: m.width,
                seed,
            },
            "patch-mixer" => ModelConfig::PatchMixer {
                grid: self.data.grid,
                patch: m.patch,
                layers: m.layers,
                width: m.width,
                pos_embed: m.pos_embed,
                seed,
            },
            "equiv-ref" => ModelConfig::EquivRef {
                grid: self.data.grid,
                layers: m.layers,
                width: m.width,
                seed,
            },
            other => bail!("unknown model family {other:?}"),
        })
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            epochs: self.train.epochs,
            seed,
        }
    }

    pub fn orbit_spec(&self) -> Result<OrbitSpec> {
        let stride = self.sweep.stride.unwrap_or_else(|| (self.data.grid / 8).max(1));
        Ok(match self.sweep.group.as_str() {
            "d4" => OrbitSpec::D4,
            "th" => OrbitSpec::TranslateH { stride },
            "tv" => OrbitSpec::TranslateV { stride },
            "grid" => OrbitSpec::TranslateGrid { stride },
            other => bail!("unknown group {other:?} (expected d4|th|tv|grid)"),
        })
    }

    pub fn cg_config(&self) -> CgConfig {
        CgConfig {
            tol: self.sweep.tol,
            max_iters: self.sweep.max_iters,
            precondition: false,
        }
    }

    /// Checkpoint path for one training seed.
    pub fn checkpoint_path(&self, seed: u64) -> PathBuf {
        self.train
            .dir
            .join(format!("{}_seed{seed}.ckpt", self.model.family))
    }

    /// Write the fully resolved configuration next to a command's outputs.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        std::fs::write(dir.join("resolved_config.toml"), text)?;
        Ok(())
    }
}
