//! Run configuration: TOML files, dotted-path overrides, config hashing,
//! deterministic seed fan-out, and run-directory management.
//!
//! A [`RunConfig`] gathers every stage's settings. Configs load from TOML with
//! all fields defaulted, then repeatable `--set a.b.c=value` overrides patch
//! the parsed tree before deserialization, so overrides never bypass
//! validation. Each run directory receives the fully resolved config for
//! reproducibility.

use crate::augment::AugConfig;
use crate::error::{Error, Result};
use crate::losses::MaskRegSpec;
use crate::model::{EncoderConfig, ModelConfig, Pooling, TextConfig};
use crate::optim::LambHyper;
use crate::synth::{default_holdout, MotionConfig, ShapesConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

/// Complete configuration for a pipeline run.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; per-stage seeds derive from it via [`derive_seed`].
    pub seed: u64,
    /// Encoder architecture.
    pub model: ModelSection,
    /// Synthetic dataset sizes and rendering.
    pub data: DataSection,
    /// Contrastive pretraining.
    pub train: TrainSection,
    /// Teacher→student distillation.
    pub distill: DistillSection,
    /// Video finetuning.
    pub video: VideoSection,
    /// Spatial alignment finetuning.
    pub spatial: SpatialSection,
    /// Frozen-feature probes.
    pub probe: ProbeSection,
    /// Zero-shot classification / retrieval.
    pub zeroshot: ZeroshotSection,
    /// Feature visualization.
    pub viz: VizSection,
}

/// Model architecture settings (expanded into [`ModelConfig`]).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Vision transformer width.
    pub width: usize,
    /// Vision transformer depth.
    pub depth: usize,
    /// Vision MLP hidden dimension.
    pub mlp_dim: usize,
    /// Attention heads (vision).
    pub heads: usize,
    /// Patch side in pixels.
    pub patch_size: usize,
    /// Train/eval input resolution (the final schedule resolution).
    pub image_size: usize,
    /// Joint embedding dimension.
    pub clip_dim: usize,
    /// Use a class token in the vision tower.
    pub use_class_token: bool,
    /// Use 2D rotary position embeddings.
    pub use_rope2d: bool,
    /// Use learned absolute position embeddings.
    pub use_abs_pos: bool,
    /// Vision pooling strategy.
    pub pooling: Pooling,
    /// Text transformer width.
    pub text_width: usize,
    /// Text transformer depth.
    pub text_depth: usize,
    /// Text MLP hidden dimension.
    pub text_mlp_dim: usize,
    /// Text attention heads.
    pub text_heads: usize,
    /// Token vocabulary size.
    pub vocab_size: usize,
    /// Text context length in tokens.
    pub context_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 4,
            mlp_dim: 128,
            heads: 4,
            patch_size: 8,
            image_size: 64,
            clip_dim: 32,
            use_class_token: true,
            use_rope2d: true,
            use_abs_pos: true,
            pooling: Pooling::AttentionPool,
            text_width: 64,
            text_depth: 2,
            text_mlp_dim: 128,
            text_heads: 4,
            vocab_size: 32,
            context_len: 32,
        }
    }
}

impl ModelSection {
    /// Expands into the model configuration used by the encoders.
    pub fn to_model_config(&self) -> ModelConfig {
        ModelConfig {
            vision: EncoderConfig {
                width: self.width,
                depth: self.depth,
                mlp_dim: self.mlp_dim,
                heads: self.heads,
                patch_size: self.patch_size,
                image_size: self.image_size,
                clip_dim: self.clip_dim,
                use_class_token: self.use_class_token,
                use_rope2d: self.use_rope2d,
                use_abs_pos: self.use_abs_pos,
                pooling: self.pooling,
            },
            text: TextConfig {
                width: self.text_width,
                depth: self.text_depth,
                mlp_dim: self.text_mlp_dim,
                heads: self.text_heads,
                vocab_size: self.vocab_size,
                context_len: self.context_len,
                clip_dim: self.clip_dim,
            },
        }
    }
}

/// Synthetic dataset settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Rendered image side in pixels.
    pub image_size: usize,
    /// Training caption/image pairs.
    pub n_train: usize,
    /// Held-out evaluation images (drawn from the held-out attribute pairs).
    pub n_eval: usize,
    /// Minimum shapes per image.
    pub min_shapes: usize,
    /// Maximum shapes per image.
    pub max_shapes: usize,
    /// Probability a caption clause mentions the shape's quadrant.
    pub position_prob: f64,
    /// Held-out (color, shape) pairs, excluded from training data.
    pub holdout: Vec<(usize, usize)>,
    /// Training video clips.
    pub n_clips: usize,
    /// Held-out evaluation clips.
    pub n_eval_clips: usize,
    /// Frames per generated clip.
    pub clip_frames: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_train: 5000,
            n_eval: 300,
            min_shapes: 1,
            max_shapes: 1,
            position_prob: 0.5,
            holdout: default_holdout(),
            n_clips: 300,
            n_eval_clips: 60,
            clip_frames: 8,
        }
    }
}

impl DataSection {
    /// Shapes-dataset config for the training split (holdout excluded).
    pub fn train_shapes(&self) -> ShapesConfig {
        ShapesConfig {
            image_size: self.image_size,
            min_shapes: self.min_shapes,
            max_shapes: self.max_shapes,
            holdout: self.holdout.clone(),
            holdout_only: false,
            position_prob: self.position_prob,
        }
    }

    /// Shapes-dataset config for the held-out single-shape evaluation split.
    pub fn eval_shapes(&self) -> ShapesConfig {
        ShapesConfig {
            image_size: self.image_size,
            min_shapes: 1,
            max_shapes: 1,
            holdout: self.holdout.clone(),
            holdout_only: true,
            position_prob: self.position_prob,
        }
    }

    /// Motion-clip config.
    pub fn motion(&self) -> MotionConfig {
        MotionConfig { image_size: self.image_size, n_frames: self.clip_frames }
    }
}

/// Contrastive pretraining settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Total training budget in samples; steps = budget / batch size.
    pub total_samples: usize,
    /// Linear warmup steps.
    pub warmup_steps: usize,
    /// Final cosine-decay learning-rate factor (1.0 = constant after warmup).
    pub final_lr_factor: f64,
    /// Optimizer hyperparameters.
    pub optim: LambHyper,
    /// Progressive-resolution stages as (samples, resolution) pairs; empty
    /// means the model's full resolution throughout.
    pub schedule: Vec<(usize, usize)>,
    /// Augmentation strengths.
    pub aug: AugConfig,
    /// Mask-regularization branch.
    pub mask_reg: MaskRegSpec,
    /// Weight on the mask-regularization loss (CLIP loss has weight 1).
    pub mask_weight: f64,
    /// Enable the mask-regularization branch.
    pub use_mask_reg: bool,
    /// Stop after this many passes over the dataset even if the sample budget
    /// is not reached (0 = cycle indefinitely).
    pub max_epochs: usize,
    /// Checkpoint every this many steps (0 = final checkpoint only).
    pub checkpoint_every: usize,
    /// Emit a metric line every this many steps.
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            batch_size: 32,
            total_samples: 12800,
            warmup_steps: 20,
            final_lr_factor: 0.1,
            optim: LambHyper::default(),
            schedule: vec![],
            aug: AugConfig::default(),
            mask_reg: MaskRegSpec::default(),
            mask_weight: 1.0,
            use_mask_reg: true,
            max_epochs: 0,
            checkpoint_every: 0,
            log_every: 1,
        }
    }
}

/// Distillation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    /// Teacher temperature as a multiple of the student's (0.5 doubles the
    /// teacher's logit scale).
    pub teacher_temp_factor: f64,
    /// Learning rate.
    pub lr: f64,
    /// Weight decay (0 in the reference recipe).
    pub weight_decay: f64,
    /// Samples per step.
    pub batch_size: usize,
    /// Total budget in samples.
    pub total_samples: usize,
    /// Linear warmup steps.
    pub warmup_steps: usize,
    /// Emit a metric line every this many steps.
    pub log_every: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self {
            teacher_temp_factor: 0.5,
            lr: 5e-4,
            weight_decay: 0.0,
            batch_size: 32,
            total_samples: 6400,
            warmup_steps: 10,
            log_every: 1,
        }
    }
}

/// Video finetuning settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoSection {
    /// Frames sampled per clip at encode time.
    pub n_frames: usize,
    /// Average normalized per-frame embeddings instead of raw pooled ones.
    pub average_normalized: bool,
    /// Learning rate.
    pub lr: f64,
    /// Clips per step.
    pub batch_size: usize,
    /// Total budget in clips.
    pub total_samples: usize,
    /// Linear warmup steps.
    pub warmup_steps: usize,
    /// Emit a metric line every this many steps.
    pub log_every: usize,
}

impl Default for VideoSection {
    fn default() -> Self {
        Self {
            n_frames: 4,
            average_normalized: false,
            lr: 5e-4,
            batch_size: 16,
            total_samples: 1600,
            warmup_steps: 5,
            log_every: 1,
        }
    }
}

/// Spatial alignment settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialSection {
    /// Frozen teacher tap layer (1-based block index into the base model).
    pub teacher_layer: usize,
    /// Fraction of tokens masked on the student input.
    pub mask_ratio: f64,
    /// Mask block size in tokens (height, width).
    pub mask_block: (usize, usize),
    /// Stochastic-depth drop rate.
    pub droppath: f64,
    /// LayerScale initialization value.
    pub layerscale_init: f64,
    /// Temperature `t` in the locality target `exp(t·(sim − 1))`.
    pub loc_temperature: f64,
    /// Weight on the self-distillation alignment loss.
    pub weight_core: f64,
    /// Weight on the locality loss.
    pub weight_loc: f64,
    /// Margin of the synthetic mask-logit oracle.
    pub oracle_margin: f64,
    /// Point-query grid side; the oracle emits g² logit channels.
    pub query_grid: usize,
    /// Learning rate.
    pub lr: f64,
    /// Samples per step.
    pub batch_size: usize,
    /// Total budget in samples.
    pub total_samples: usize,
    /// Linear warmup steps.
    pub warmup_steps: usize,
    /// Emit a metric line every this many steps.
    pub log_every: usize,
}

impl Default for SpatialSection {
    fn default() -> Self {
        Self {
            teacher_layer: 3,
            mask_ratio: 0.75,
            mask_block: (2, 2),
            droppath: 0.4,
            layerscale_init: 0.1,
            loc_temperature: 20.0,
            weight_core: 1.0,
            weight_loc: 1.0,
            oracle_margin: 10.0,
            query_grid: 8,
            lr: 5e-4,
            batch_size: 16,
            total_samples: 1600,
            warmup_steps: 5,
            log_every: 1,
        }
    }
}

/// Frozen-feature probe settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Neighbors for the kNN probe.
    pub knn_k: usize,
    /// Training epochs for learned probes.
    pub epochs: usize,
    /// Learning rate for the plain linear probe (full-batch descent).
    pub lr: f64,
    /// Learning rate for Adam-trained probe heads (attention, segmentation).
    pub head_lr: f64,
    /// Layers to sweep (1-based block indices); empty = all layers.
    pub layers: Vec<usize>,
    /// Context frames for label propagation.
    pub context_n: usize,
    /// Nearest patches per vote in label propagation.
    pub top_k: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            knn_k: 5,
            epochs: 30,
            lr: 0.5,
            head_lr: 0.01,
            layers: vec![],
            context_n: 7,
            top_k: 5,
        }
    }
}

/// Zero-shot evaluation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroshotSection {
    /// Prompt templates; `{c}` is replaced by the class name.
    pub templates: Vec<String>,
    /// Apply gallery-softmax score reweighting before ranking retrieval.
    pub use_dsl: bool,
    /// Score each image under both squash-resize and center-crop, keeping the max.
    pub squash_and_crop: bool,
    /// Pixels to strip from each border before evaluation (0 = off).
    pub border_strip: usize,
}

impl Default for ZeroshotSection {
    fn default() -> Self {
        Self {
            templates: vec![
                "a photo of a {c}".to_string(),
                "a photo of a {c} in the top left".to_string(),
                "a photo of a {c} in the top right".to_string(),
                "a photo of a {c} in the bottom left".to_string(),
                "a photo of a {c} in the bottom right".to_string(),
            ],
            use_dsl: false,
            squash_and_crop: false,
            border_strip: 0,
        }
    }
}

/// Feature-visualization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizSection {
    /// Tap layer to visualize (1-based; 0 = last layer).
    pub layer: usize,
    /// Images to render.
    pub n_images: usize,
}

impl Default for VizSection {
    fn default() -> Self {
        Self { layer: 0, n_images: 4 }
    }
}

/// Loads a config from optional TOML `path`, applies dotted-path `overrides`
/// (`a.b.c=value`), and deserializes. Unknown fields are rejected.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut value: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            text.parse::<toml::Value>()
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    value
        .try_into::<RunConfig>()
        .map_err(|e| Error::config(format!("invalid configuration: {e}")))
}

/// Applies one `a.b.c=value` override onto a parsed TOML tree, creating
/// intermediate tables as needed. The value is parsed as TOML (numbers,
/// booleans, arrays, quoted strings); bare words fall back to strings.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override must be key=value: {spec:?}")))?;
    let path = path.trim();
    let raw = raw.trim();
    if path.is_empty() {
        return Err(Error::config(format!("override has empty key: {spec:?}")));
    }
    let parsed: toml::Value = match format!("x = {raw}").parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("x").expect("key x just parsed"),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override path {path:?} crosses a non-table")))?;
        if i + 1 == segments.len() {
            table.insert((*seg).to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry((*seg).to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("override path is non-empty");
}

/// Short hex hash of the resolved config (stable across field-order-preserving
/// serialization), used to name run directories.
pub fn config_hash(cfg: &RunConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::new();
    for b in &digest[..6] {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Derives a per-stage seed from the root seed and a tag string via SHA-256
/// over `root_le_bytes ‖ 0x00 ‖ tag`; the first 8 digest bytes, little-endian,
/// form the seed. Documented so external tools can reproduce the fan-out.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update([0u8]);
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Creates `out_dir/<stage>-<config hash>-<unix seconds>[-k]` and returns it.
pub fn make_run_dir(out_dir: &Path, stage: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let hash = config_hash(cfg);
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut k = 0u32;
    loop {
        let name = if k == 0 {
            format!("{stage}-{hash}-{secs}")
        } else {
            format!("{stage}-{hash}-{secs}-{k}")
        };
        let dir = out_dir.join(name);
        if !dir.exists() {
            std::fs::create_dir_all(&dir)?;
            return Ok(dir);
        }
        k += 1;
    }
}

/// Writes the fully resolved config as `config.toml` inside `dir`.
pub fn write_resolved_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg)
        .map_err(|e| Error::config(format!("config serialization failed: {e}")))?;
    std::fs::write(dir.join("config.toml"), text)?;
    Ok(())
}
