//! Vision and text encoders.
//!
//! Both encoders are standard pre-norm transformers built on the tape engine.
//! The vision side is a ViT: patch embedding, optional class token, optional
//! absolute positional table, optional axial 2-D RoPE inside attention, and a
//! single-query attention-pooling head that produces the shared-space
//! embedding. The text side is a small causal transformer pooled at the EOS
//! position. Parameters live in a flat [`ParamStore`] under `v.*` / `t.*`
//! prefixes plus the shared `logit_scale`.

pub mod checkpoint;
pub mod params;
pub mod rope;
pub mod text;
pub mod vision;

use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};
pub use params::{Bound, ParamStore};

/// How an encoder collapses token features into one embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    AttentionPool,
    EosToken,
}

/// Vision-encoder architecture. `width` must divide evenly into `heads`, and
/// with RoPE enabled each head needs a channel count divisible by 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub width: usize,
    pub depth: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub clip_dim: usize,
    pub use_class_token: bool,
    pub use_rope2d: bool,
    pub use_abs_pos: bool,
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.mlp_dim == 0 || self.heads == 0 {
            return Err(Error::config("encoder dims must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.use_rope2d && (self.width / self.heads) % 4 != 0 {
            return Err(Error::config(format!(
                "2D RoPE needs head dim divisible by 4, got {}",
                self.width / self.heads
            )));
        }
        Ok(())
    }

    /// Token grid shape at the configured resolution.
    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn grid_tokens(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_tokens() + usize::from(self.use_class_token)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Text-encoder architecture (causal transformer, EOS pooling).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub width: usize,
    pub depth: usize,
    pub mlp_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub clip_dim: usize,
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "text width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.vocab_size == 0 || self.context_len == 0 {
            return Err(Error::config("vocab and context length must be positive"));
        }
        Ok(())
    }
}

/// Paired encoders that share an embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vision: EncoderConfig,
    pub text: TextConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.vision.clip_dim != self.text.clip_dim {
            return Err(Error::config("vision and text clip_dim differ"));
        }
        Ok(())
    }
}

/// Architecture plus parameters; the unit that checkpoints serialize.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

pub const LOGIT_SCALE_NAME: &str = "logit_scale";

/// Initial value of the learned temperature: ln(1/0.07).
pub fn logit_scale_init() -> f64 {
    (1.0 / 0.07f64).ln()
}

/// Detached token features from a forward pass, the currency of the probe
/// and visualization modules.
#[derive(Debug, Clone)]
pub struct TokenFeatures {
    pub values: Array3<f64>, // [B, n_tok, width]
    pub grid: (usize, usize),
    pub has_class_token: bool,
}

impl TokenFeatures {
    pub fn validate(&self) -> Result<()> {
        let expect = self.grid.0 * self.grid.1 + usize::from(self.has_class_token);
        if self.values.shape()[1] != expect {
            return Err(Error::shape(format!(
                "token count {} does not match grid {:?} (class token: {})",
                self.values.shape()[1],
                self.grid,
                self.has_class_token
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite token feature"));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.values.shape()[1]
    }

    /// Features of the grid tokens only, class token dropped.
    pub fn grid_values(&self) -> Array3<f64> {
        let skip = usize::from(self.has_class_token);
        self.values.slice(ndarray::s![.., skip.., ..]).to_owned()
    }
}

/// Map pixel values in `[0,1]` to the network input range via the fixed
/// mean/std of 0.5.
pub fn normalize_images(images: &ndarray::Array4<f64>) -> ndarray::Array4<f64> {
    images.mapv(|x| (x - 0.5) / 0.5)
}

fn init_block(store: &mut ParamStore, prefix: &str, width: usize, mlp_dim: usize, rng: &mut ChaCha8Rng) {
    let w_std = 0.02;
    store.init_const(&format!("{prefix}.ln1.g"), &[width], 1.0);
    store.init_const(&format!("{prefix}.ln1.b"), &[width], 0.0);
    for name in ["wq", "wk", "wv", "wo"] {
        store.init_normal(&format!("{prefix}.attn.{name}"), &[width, width], w_std, rng);
    }
    for name in ["bq", "bk", "bv", "bo"] {
        store.init_const(&format!("{prefix}.attn.{name}"), &[width], 0.0);
    }
    store.init_const(&format!("{prefix}.ln2.g"), &[width], 1.0);
    store.init_const(&format!("{prefix}.ln2.b"), &[width], 0.0);
    store.init_normal(&format!("{prefix}.mlp.w1"), &[width, mlp_dim], w_std, rng);
    store.init_const(&format!("{prefix}.mlp.b1"), &[mlp_dim], 0.0);
    store.init_normal(&format!("{prefix}.mlp.w2"), &[mlp_dim, width], w_std, rng);
    store.init_const(&format!("{prefix}.mlp.b2"), &[width], 0.0);
}

/// Fresh parameters for both encoders plus the logit scale, deterministic in
/// `seed`.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let v = &cfg.vision;
    let patch_in = v.patch_size * v.patch_size * 3;
    store.init_normal("v.patch.w", &[patch_in, v.width], 0.02, &mut rng);
    store.init_const("v.patch.b", &[v.width], 0.0);
    if v.use_class_token {
        store.init_normal("v.cls", &[v.width], 0.02, &mut rng);
    }
    store.init_normal("v.mask_token", &[v.width], 0.02, &mut rng);
    if v.use_abs_pos {
        store.init_normal("v.pos", &[v.grid_tokens(), v.width], 0.02, &mut rng);
        if v.use_class_token {
            store.init_normal("v.pos_cls", &[v.width], 0.02, &mut rng);
        }
    }
    for i in 1..=v.depth {
        init_block(&mut store, &format!("v.blk{i}"), v.width, v.mlp_dim, &mut rng);
    }
    store.init_const("v.ln_f.g", &[v.width], 1.0);
    store.init_const("v.ln_f.b", &[v.width], 0.0);
    // attention-pool head: one cross-attention block with a learned query
    store.init_normal("v.pool.q", &[v.width], 0.02, &mut rng);
    for name in ["wq", "wk", "wv", "wo"] {
        store.init_normal(&format!("v.pool.{name}"), &[v.width, v.width], 0.02, &mut rng);
    }
    for name in ["bq", "bk", "bv", "bo"] {
        store.init_const(&format!("v.pool.{name}"), &[v.width], 0.0);
    }
    store.init_const("v.pool.ln.g", &[v.width], 1.0);
    store.init_const("v.pool.ln.b", &[v.width], 0.0);
    store.init_normal("v.pool.mlp.w1", &[v.width, v.mlp_dim], 0.02, &mut rng);
    store.init_const("v.pool.mlp.b1", &[v.mlp_dim], 0.0);
    store.init_normal("v.pool.mlp.w2", &[v.mlp_dim, v.width], 0.02, &mut rng);
    store.init_const("v.pool.mlp.b2", &[v.width], 0.0);
    store.init_normal("v.proj", &[v.width, v.clip_dim], 1.0 / (v.width as f64).sqrt(), &mut rng);

    let t = &cfg.text;
    store.init_normal("t.tok", &[t.vocab_size, t.width], 0.02, &mut rng);
    store.init_normal("t.pos", &[t.context_len, t.width], 0.01, &mut rng);
    for i in 1..=t.depth {
        init_block(&mut store, &format!("t.blk{i}"), t.width, t.mlp_dim, &mut rng);
    }
    store.init_const("t.ln_f.g", &[t.width], 1.0);
    store.init_const("t.ln_f.b", &[t.width], 0.0);
    store.init_normal("t.proj", &[t.width, t.clip_dim], 1.0 / (t.width as f64).sqrt(), &mut rng);

    store.init_const(LOGIT_SCALE_NAME, &[], logit_scale_init());
    Ok(Model { cfg: cfg.clone(), params: store })
}

/// LayerScale parameters (init 0.1 on both branches of every block) for an
/// alignment fine-tune; no-op on blocks that already have them.
pub fn add_layer_scale(store: &mut ParamStore, prefix: &str, depth: usize, width: usize, init: f64) {
    for i in 1..=depth {
        for branch in ["ls1", "ls2"] {
            let name = format!("{prefix}.blk{i}.{branch}");
            if !store.contains(&name) {
                store.init_const(&name, &[width], init);
            }
        }
    }
}

/// Per-block, per-sample stochastic-depth multipliers: 0 for dropped
/// samples, `1/(1-p)` for survivors, so expectations match evaluation mode.
pub struct DropPathPlan {
    pub masks: Vec<Array3<f64>>, // depth × [B,1,1]
}

pub fn drop_path_plan(rng: &mut ChaCha8Rng, depth: usize, batch: usize, p: f64) -> DropPathPlan {
    use rand::Rng;
    let keep = 1.0 - p;
    let masks = (0..depth)
        .map(|_| {
            Array3::from_shape_fn((batch, 1, 1), |_| {
                if rng.gen_range(0.0..1.0) < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        })
        .collect();
    DropPathPlan { masks }
}

/// Options threaded through a transformer stack.
pub(crate) struct BlockCtx {
    pub prefix: String,
    pub heads: usize,
    pub rope: Option<(Arc<Array2<f64>>, Arc<Array2<f64>>)>,
    pub attn_mask: Option<Var>,
    pub drop_path: Option<Var>,
}

/// Pre-norm residual block: attention then MLP, each branch optionally
/// LayerScale-d (when `<prefix>.ls1/.ls2` exist) and DropPath-masked.
pub(crate) fn transformer_block(g: &mut Graph, bound: &Bound, ctx: &BlockCtx, x: Var) -> Var {
    let p = &ctx.prefix;
    let n1 = {
        let gamma = bound.var(&format!("{p}.ln1.g"));
        let beta = bound.var(&format!("{p}.ln1.b"));
        g.layer_norm(x, gamma, beta, 1e-5)
    };
    let mut attn = self_attention(g, bound, ctx, n1);
    if let Some(ls) = bound.try_var(&format!("{p}.ls1")) {
        attn = g.mul(attn, ls);
    }
    if let Some(dp) = ctx.drop_path {
        attn = g.mul(attn, dp);
    }
    let h = g.add(x, attn);
    let n2 = {
        let gamma = bound.var(&format!("{p}.ln2.g"));
        let beta = bound.var(&format!("{p}.ln2.b"));
        g.layer_norm(h, gamma, beta, 1e-5)
    };
    let w1 = bound.var(&format!("{p}.mlp.w1"));
    let b1 = bound.var(&format!("{p}.mlp.b1"));
    let w2 = bound.var(&format!("{p}.mlp.w2"));
    let b2 = bound.var(&format!("{p}.mlp.b2"));
    let hid = g.linear(n2, w1, Some(b1));
    let act = g.gelu(hid);
    let mut mlp = g.linear(act, w2, Some(b2));
    if let Some(ls) = bound.try_var(&format!("{p}.ls2")) {
        mlp = g.mul(mlp, ls);
    }
    if let Some(dp) = ctx.drop_path {
        mlp = g.mul(mlp, dp);
    }
    g.add(h, mlp)
}

fn self_attention(g: &mut Graph, bound: &Bound, ctx: &BlockCtx, x: Var) -> Var {
    let p = &ctx.prefix;
    let shape = g.value(x).shape().to_vec();
    let (b, n, w) = (shape[0], shape[1], shape[2]);
    let heads = ctx.heads;
    let dh = w / heads;
    let proj = |g: &mut Graph, name: &str| -> Var {
        let wv = bound.var(&format!("{p}.attn.w{name}"));
        let bv = bound.var(&format!("{p}.attn.b{name}"));
        g.linear(x, wv, Some(bv))
    };
    let to_heads = |g: &mut Graph, v: Var| -> Var {
        let r = g.reshape(v, &[b, n, heads, dh]);
        g.permute(r, &[0, 2, 1, 3]) // [B,H,N,dh]
    };
    let q = proj(g, "q");
    let k = proj(g, "k");
    let v = proj(g, "v");
    let mut q4 = to_heads(g, q);
    let mut k4 = to_heads(g, k);
    let v4 = to_heads(g, v);
    if let Some((cos, sin)) = &ctx.rope {
        q4 = g.rope2d(q4, cos.clone(), sin.clone());
        k4 = g.rope2d(k4, cos.clone(), sin.clone());
    }
    let qf = g.reshape(q4, &[b * heads, n, dh]);
    let kf = g.reshape(k4, &[b * heads, n, dh]);
    let vf = g.reshape(v4, &[b * heads, n, dh]);
    let kt = g.transpose(kf);
    let raw = g.bmm(qf, kt);
    let mut scores = g.scale(raw, 1.0 / (dh as f64).sqrt());
    if let Some(m) = ctx.attn_mask {
        scores = g.add(scores, m);
    }
    let attn = g.softmax_last(scores);
    let ctx_out = g.bmm(attn, vf); // [BH,N,dh]
    let r = g.reshape(ctx_out, &[b, heads, n, dh]);
    let perm = g.permute(r, &[0, 2, 1, 3]);
    let merged = g.reshape(perm, &[b, n, w]);
    let wo = bound.var(&format!("{p}.attn.wo"));
    let bo = bound.var(&format!("{p}.attn.bo"));
    g.linear(merged, wo, Some(bo))
}
