//! Emulator model zoo over 3-channel periodic fields.
//!
//! Three fixed families, all residual (the network predicts Δstate, added to
//! the input), all mapping `Field(N, 3) → Field(N, 3)`:
//!
//! - `conv-unet`: multiscale conv net with average-pool downsampling,
//!   nearest-neighbour upsampling and skip concatenation;
//! - `patch-mixer`: patch-token net with learned absolute position
//!   embeddings, single-head attention and a per-token channel mix;
//! - `equiv-ref`: a stack of stride-1 periodic convolutions, exactly
//!   translation-equivariant by construction — the test oracle.
//!
//! Output heads are zero-initialized, so a freshly built model is exactly
//! the identity map.

mod families;

use crate::autodiff::{OpGraph, ParamVector};
use crate::error::Error;
use crate::field::{Field, CHANNELS};
use crate::rng::{self, labels};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Real, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum ModelConfig {
    /// Multiscale conv emulator; width doubles after the first downsampling.
    #[serde(rename = "conv-unet")]
    ConvUnet {
        grid: usize,
        depth: usize,
        width: usize,
        seed: u64,
    },
    /// Patch-token emulator (single-head attention, per-token channel mix).
    #[serde(rename = "patch-mixer")]
    PatchMixer {
        grid: usize,
        patch: usize,
        layers: usize,
        width: usize,
        /// Learned absolute position embeddings; disabling them makes the
        /// model exactly equivariant under stride-`patch` translations.
        pos_embed: bool,
        seed: u64,
    },
    /// Exactly translation-equivariant reference net.
    #[serde(rename = "equiv-ref")]
    EquivRef {
        grid: usize,
        layers: usize,
        width: usize,
        seed: u64,
    },
}

impl ModelConfig {
    pub fn grid(&self) -> usize {
        match *self {
            ModelConfig::ConvUnet { grid, .. }
            | ModelConfig::PatchMixer { grid, .. }
            | ModelConfig::EquivRef { grid, .. } => grid,
        }
    }

    pub fn seed(&self) -> u64 {
        match *self {
            ModelConfig::ConvUnet { seed, .. }
            | ModelConfig::PatchMixer { seed, .. }
            | ModelConfig::EquivRef { seed, .. } => seed,
        }
    }

    pub fn with_seed(mut self, new_seed: u64) -> Self {
        match &mut self {
            ModelConfig::ConvUnet { seed, .. }
            | ModelConfig::PatchMixer { seed, .. }
            | ModelConfig::EquivRef { seed, .. } => *seed = new_seed,
        }
        self
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            ModelConfig::ConvUnet { .. } => "conv-unet",
            ModelConfig::PatchMixer { .. } => "patch-mixer",
            ModelConfig::EquivRef { .. } => "equiv-ref",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelConfig::ConvUnet { grid, depth, width, .. } => {
                if width == 0 || depth == 0 {
                    return Err(Error::config("conv-unet needs width ≥ 1 and depth ≥ 1"));
                }
                let factor = 1usize << depth;
                if grid % factor != 0 || grid / factor < 2 {
                    return Err(Error::config(format!(
                        "conv-unet: grid {grid} must be divisible by 2^depth = {factor} \
                         with a coarsest extent of at least 2"
                    )));
                }
            }
            ModelConfig::PatchMixer { grid, patch, layers, width, .. } => {
                if width == 0 || layers == 0 {
                    return Err(Error::config("patch-mixer needs width ≥ 1 and layers ≥ 1"));
                }
                if patch == 0 || grid % patch != 0 {
                    return Err(Error::config(format!(
                        "patch-mixer: patch size {patch} must divide grid {grid}"
                    )));
                }
            }
            ModelConfig::EquivRef { grid, layers, width, .. } => {
                if layers == 0 || width == 0 || grid < 4 {
                    return Err(Error::config(
                        "equiv-ref needs layers ≥ 1, width ≥ 1, grid ≥ 4",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Closed-form parameter count; matches graph enumeration exactly.
    pub fn param_count(&self) -> usize {
        match *self {
            ModelConfig::ConvUnet { depth, width, .. } => {
                let stage = |d: usize| if d == 0 { width } else { 2 * width };
                let conv = |ci: usize, co: usize| co * ci * 9 + co;
                let mut p = conv(CHANNELS, stage(0));
                for d in 1..=depth {
                    p += conv(stage(d - 1), stage(d));
                }
                for d in (0..depth).rev() {
                    p += conv(stage(d + 1) + stage(d), stage(d));
                }
                p + conv(stage(0), CHANNELS)
            }
            ModelConfig::PatchMixer { grid, patch, layers, width, pos_embed, .. } => {
                let tokens = (grid / patch) * (grid / patch);
                let dense = |i: usize, o: usize| o * i + o;
                let mut p = dense(CHANNELS * patch * patch, width);
                if pos_embed {
                    p += tokens * width;
                }
                p += layers * 4 * dense(width, width);
                p + dense(width, CHANNELS * patch * patch)
            }
            ModelConfig::EquivRef { layers, width, .. } => {
                let mut p = 0;
                let mut ch = CHANNELS;
                for l in 1..=layers {
                    let out = if l == layers { CHANNELS } else { width };
                    p += out * ch * 9 + out;
                    ch = out;
                }
                p
            }
        }
    }
}

/// A built model: immutable graph plus its flat parameters.
#[derive(Debug, Clone)]
pub struct ModelInstance<T> {
    pub config: ModelConfig,
    pub graph: OpGraph,
    pub params: ParamVector<T>,
}

impl<T: Scalar> ModelInstance<T> {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Next-state prediction; pure, callable concurrently.
    pub fn predict(&self, state: &Field<T>) -> Result<Field<T>> {
        if state.n() != self.config.grid() {
            return Err(Error::shape(format!(
                "model expects grid {}, got {}",
                self.config.grid(),
                state.n()
            )));
        }
        let out = self.graph.forward(&self.params, &state.to_tensor())?;
        Field::from_tensor(&out)
    }

    pub fn predict_tensor(&self, state: &Tensor<T>) -> Result<Tensor<T>> {
        self.graph.forward(&self.params, state)
    }
}

/// Seeded deterministic init: weights uniform in ±1/√fan_in, biases zero,
/// zero-init heads and position embeddings left at zero.
fn init_params<T: Scalar>(graph: &OpGraph, seed: u64) -> ParamVector<T> {
    let mut rng = rng::stream(seed, labels::PARAM_INIT);
    let mut params = ParamVector::zeros(graph.param_len());
    for node in graph.nodes() {
        if node.param_len == 0 || node.zero_init {
            continue;
        }
        let bound = 1.0 / (node.op.fan_in().max(1) as f64).sqrt();
        let weight_len = node.param_len - node.op.bias_len();
        for k in 0..weight_len {
            params[node.param_offset + k] = T::from_f64(rng.gen_range(-bound..bound));
        }
    }
    params
}

/// Build a model instance from its config (validates, constructs the graph,
/// seeds the parameters).
pub fn build<T: Scalar>(config: ModelConfig) -> Result<ModelInstance<T>> {
    config.validate()?;
    let graph = match config {
        ModelConfig::ConvUnet { grid, depth, width, .. } => {
            families::conv_unet(grid, depth, width)?
        }
        ModelConfig::PatchMixer { grid, patch, layers, width, pos_embed, .. } => {
            families::patch_mixer(grid, patch, layers, width, pos_embed)?
        }
        ModelConfig::EquivRef { grid, layers, width, .. } => {
            families::equiv_ref(grid, layers, width)?
        }
    };
    debug_assert_eq!(graph.param_len(), config.param_count());
    let params = init_params(&graph, config.seed());
    Ok(ModelInstance {
        config,
        graph,
        params,
    })
}

/// Optional training provenance stored with a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_test_smse: f64,
    pub final_train_smse: f64,
    pub dataset: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    config: ModelConfig,
    param_count: usize,
    meta: Option<TrainMeta>,
}

const CKPT_MAGIC: &[u8; 4] = b"SLCP";

/// Checkpoint layout: magic, u32 version, u32 JSON length, JSON manifest,
/// then the raw little-endian f64 parameter blob in graph construction
/// order.
pub fn save_checkpoint(
    path: &Path,
    model: &ModelInstance<Real>,
    meta: Option<&TrainMeta>,
) -> Result<()> {
    let manifest = CheckpointManifest {
        format: 1,
        config: model.config,
        param_count: model.params.len(),
        meta: meta.cloned(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(12 + json.len() + model.params.len() * 8);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in model.params.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelInstance<Real>, Option<TrainMeta>)> {
    let bad = |detail: &str| Error::FileFormat {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != CKPT_MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != 1 {
        return Err(bad("unsupported checkpoint version"));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + json_len {
        return Err(bad("truncated manifest"));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..12 + json_len])?;
    let mut model = build::<Real>(manifest.config)?;
    let blob = &bytes[12 + json_len..];
    if blob.len() != manifest.param_count * 8 || manifest.param_count != model.params.len() {
        return Err(bad("parameter blob length mismatch"));
    }
    for (k, chunk) in blob.chunks_exact(8).enumerate() {
        model.params[k] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok((model, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symmetry::{apply, GroupElement, TranslationElement};

    fn desk_unet(seed: u64) -> ModelConfig {
        ModelConfig::ConvUnet {
            grid: 32,
            depth: 2,
            width: 12,
            seed,
        }
    }

    fn desk_mixer(seed: u64) -> ModelConfig {
        ModelConfig::PatchMixer {
            grid: 32,
            patch: 4,
            layers: 3,
            width: 64,
            pos_embed: true,
            seed,
        }
    }

    #[test]
    fn equiv_ref_param_count_closed_form() {
        let cfg = ModelConfig::EquivRef {
            grid: 8,
            layers: 1,
            width: 3,
            seed: 0,
        };
        assert_eq!(cfg.param_count(), 84); // 3·3·k² + 3 for k = 3
        let model = build::<f64>(cfg).unwrap();
        assert_eq!(model.graph.param_len(), 84);
    }

    #[test]
    fn param_count_matches_graph_enumeration() {
        for cfg in [
            desk_unet(0),
            desk_mixer(0),
            ModelConfig::EquivRef {
                grid: 16,
                layers: 3,
                width: 8,
                seed: 1,
            },
            ModelConfig::PatchMixer {
                grid: 16,
                patch: 4,
                layers: 2,
                width: 24,
                pos_embed: false,
                seed: 1,
            },
        ] {
            let model = build::<f64>(cfg).unwrap();
            assert_eq!(
                model.graph.param_len(),
                cfg.param_count(),
                "{}",
                cfg.family_name()
            );
        }
    }

    #[test]
    fn desk_scale_param_budgets() {
        // defaults land near the intended budgets (~20k conv, ~60k mixer)
        assert_eq!(desk_unet(0).param_count(), 22779);
        assert_eq!(desk_mixer(0).param_count(), 60272);
    }

    #[test]
    fn unet_coarsest_extent_is_grid_over_2_pow_depth() {
        let model = build::<f64>(desk_unet(3)).unwrap();
        let coarsest = model
            .graph
            .nodes()
            .iter()
            .filter(|n| n.out_shape.len() == 3)
            .map(|n| n.out_shape[1])
            .min()
            .unwrap();
        assert_eq!(coarsest, 8);
    }

    #[test]
    fn mixer_token_count_is_patch_tiling() {
        let model = build::<f64>(desk_mixer(4)).unwrap();
        let tokens = model
            .graph
            .nodes()
            .iter()
            .find(|n| matches!(n.op, crate::autodiff::Op::PatchEmbed { .. }))
            .map(|n| n.out_shape[0])
            .unwrap();
        assert_eq!(tokens, 64); // (32/4)²
    }

    #[test]
    fn fresh_model_is_identity() {
        for cfg in [
            desk_unet(5),
            desk_mixer(5),
            ModelConfig::EquivRef {
                grid: 16,
                layers: 2,
                width: 6,
                seed: 5,
            },
        ] {
            let model = build::<f64>(cfg).unwrap();
            let x = crate::pde::sample_ic(cfg.grid(), crate::pde::IcMode::Isotropic, 77);
            let y = model.predict(&x).unwrap();
            assert_eq!(x, y, "{} at init", cfg.family_name());
        }
    }

    #[test]
    fn same_seed_same_params() {
        let a = build::<f64>(desk_mixer(9)).unwrap();
        let b = build::<f64>(desk_mixer(9)).unwrap();
        assert_eq!(a.params.0, b.params.0);
        let c = build::<f64>(desk_mixer(10)).unwrap();
        assert_ne!(a.params.0, c.params.0);
    }

    #[test]
    fn config_validation_names_constraint() {
        let bad = ModelConfig::ConvUnet {
            grid: 20,
            depth: 3,
            width: 8,
            seed: 0,
        };
        let err = build::<f64>(bad).unwrap_err().to_string();
        assert!(err.contains("2^depth"), "{err}");

        let bad = ModelConfig::PatchMixer {
            grid: 30,
            patch: 4,
            layers: 2,
            width: 16,
            pos_embed: true,
            seed: 0,
        };
        assert!(build::<f64>(bad).is_err());
    }

    #[test]
    fn equiv_ref_is_exactly_translation_equivariant() {
        let n = 16;
        let model = build::<f64>(ModelConfig::EquivRef {
            grid: n,
            layers: 2,
            width: 6,
            seed: 11,
        })
        .unwrap();
        // random params rather than the zero-init head
        let mut model = model;
        let mut rng = crate::rng::stream(123, 7);
        use rand::Rng;
        for v in model.params.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x: Field<f64> = crate::pde::sample_ic(n, crate::pde::IcMode::Isotropic, 13);
        let fx = model.predict(&x).unwrap();
        let scale = fx.norm();
        for a in 0..n {
            for b in 0..n {
                let g = GroupElement::Translate(TranslationElement::new(a, b, n).unwrap());
                let lhs = model.predict(&apply(g, &x).unwrap()).unwrap();
                let rhs = apply(g, &fx).unwrap();
                let max = lhs
                    .data()
                    .iter()
                    .zip(rhs.data())
                    .map(|(p, q)| (p - q).abs())
                    .fold(0.0f64, f64::max);
                assert!(max <= 1e-12 * scale, "T({a},{b}): {max}");
            }
        }
    }

    #[test]
    fn unet_is_not_translation_equivariant_in_general() {
        // negative control: measure, expect nonzero deviation
        let model = build::<f64>(desk_unet(21)).unwrap();
        let mut model = model;
        let mut rng = crate::rng::stream(321, 7);
        use rand::Rng;
        for v in model.params.iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
        let x: Field<f64> = crate::pde::sample_ic(32, crate::pde::IcMode::Isotropic, 17);
        let g = GroupElement::Translate(TranslationElement::new(1, 0, 32).unwrap());
        let lhs = model.predict(&apply(g, &x).unwrap()).unwrap();
        let rhs = apply(g, &model.predict(&x).unwrap()).unwrap();
        let max = lhs
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f64, f64::max);
        assert!(max > 1e-9, "pooling should break single-cell shifts: {max}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = build::<f64>(desk_mixer(31)).unwrap();
        model.params[17] = 0.125;
        let meta = TrainMeta {
            epochs: 3,
            best_epoch: 2,
            best_test_smse: 0.01,
            final_train_smse: 0.02,
            dataset: "unit".into(),
        };
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, Some(&meta)).unwrap();
        let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.0, model.params.0);
        assert_eq!(loaded.config, model.config);
        assert_eq!(loaded_meta, Some(meta));
    }
}
