//! Vision transformer forward pass.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, Array4, Axis};

use crate::error::{Error, Result};
use crate::imgproc;
use crate::model::{
    rope, transformer_block, BlockCtx, Bound, DropPathPlan, EncoderConfig, Model, ParamStore,
    Pooling, TokenFeatures,
};
use crate::tensor::{Arr, Graph, Var};

/// Cut `[B,3,H,W]` images into per-patch pixel vectors `[B, n_tok, P*P*3]`.
///
/// Patch vectors are laid out channel-major (all of channel 0's pixels in
/// row-major order, then channel 1, then 2). When `class_token` is set, a
/// zero vector is prepended at token 0 as the slot the encoder's learned
/// class embedding will occupy.
pub fn patchify(images: &Array4<f64>, patch_size: usize, class_token: bool) -> Result<TokenFeatures> {
    let (b, c, h, w) = images.dim();
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} not divisible by patch size {patch_size}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let plen = patch_size * patch_size * 3;
    let offset = usize::from(class_token);
    let mut out = Array3::<f64>::zeros((b, gh * gw + offset, plen));
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                let tok = offset + py * gw + px;
                let mut k = 0usize;
                for ci in 0..3 {
                    for dy in 0..patch_size {
                        for dx in 0..patch_size {
                            out[[bi, tok, k]] =
                                images[[bi, ci, py * patch_size + dy, px * patch_size + dx]];
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(TokenFeatures { values: out, grid: (gh, gw), has_class_token: class_token })
}

/// Per-forward options.
#[derive(Default)]
pub struct VisionOpts<'a> {
    /// 1-based block indices whose residual-stream output should be kept.
    pub tap_layers: &'a [usize],
    /// `[B, grid_tokens]` with 1.0 marking patches replaced by the learned
    /// mask token (positional embeddings still added afterwards).
    pub mask: Option<&'a Array2<f64>>,
    /// Stochastic-depth multipliers; `None` means evaluation mode.
    pub drop_path: Option<&'a DropPathPlan>,
}

/// Graph handles out of a vision forward.
pub struct VisionOut {
    /// Residual-stream output after each requested block, `[B, n_tok, width]`.
    pub taps: BTreeMap<usize, Var>,
    /// Final-norm token features, `[B, n_tok, width]`.
    pub final_tokens: Var,
    /// Pooled embedding projected to clip space, `[B, clip_dim]`,
    /// not yet L2-normalized.
    pub pooled: Var,
    pub grid: (usize, usize),
}

/// Run the vision encoder inside `g`. `images` must already be normalized
/// (see [`crate::model::normalize_images`]) and square at `cfg.image_size`.
pub fn vision_forward(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    images: &Array4<f64>,
    opts: &VisionOpts<'_>,
) -> Result<VisionOut> {
    cfg.validate()?;
    let (b, _, h, w) = images.dim();
    if h != cfg.image_size || w != cfg.image_size {
        return Err(Error::shape(format!(
            "images are {h}x{w}, encoder expects {}",
            cfg.image_size
        )));
    }
    for &t in opts.tap_layers {
        if t == 0 || t > cfg.depth {
            return Err(Error::config(format!("tap layer {t} outside 1..={}", cfg.depth)));
        }
    }
    let patches = patchify(images, cfg.patch_size, false)?;
    let (gh, gw) = patches.grid;
    let n_grid = gh * gw;
    let px = g.constant(patches.values.into_dyn());
    let pw = bound.var("v.patch.w");
    let pb = bound.var("v.patch.b");
    let mut x = g.linear(px, pw, Some(pb)); // [B, n_grid, width]

    if let Some(mask) = opts.mask {
        if mask.dim() != (b, n_grid) {
            return Err(Error::shape(format!(
                "mask is {:?}, expected ({b}, {n_grid})",
                mask.dim()
            )));
        }
        let m = g.constant(mask.clone().insert_axis(Axis(2)).into_dyn());
        let one_minus = g.scale(m, -1.0);
        let keep = g.add_scalar(one_minus, 1.0);
        let kept = g.mul(x, keep);
        let mtok = bound.var("v.mask_token");
        let masked = g.mul(m, mtok);
        x = g.add(kept, masked);
    }

    if cfg.use_class_token {
        let cls = bound.var("v.cls");
        let cls_row = g.reshape(cls, &[1, 1, cfg.width]);
        let zeros = g.constant(Arr::zeros(ndarray::IxDyn(&[b, 1, cfg.width])));
        let cls_b = g.add(zeros, cls_row); // broadcast to [B,1,width]
        x = g.concat(1, &[cls_b, x]);
    }

    if cfg.use_abs_pos {
        let pos = bound.var("v.pos");
        let pos_row = g.reshape(pos, &[1, n_grid, cfg.width]);
        let pos_full = if cfg.use_class_token {
            let pc = bound.var("v.pos_cls");
            let pc_row = g.reshape(pc, &[1, 1, cfg.width]);
            g.concat(1, &[pc_row, pos_row])
        } else {
            pos_row
        };
        x = g.add(x, pos_full);
    }

    let rope_tables = if cfg.use_rope2d {
        let positions = rope::grid_positions(gh, gw, cfg.use_class_token);
        Some(rope::rope2d_tables(&positions, cfg.head_dim()))
    } else {
        None
    };

    let mut taps = BTreeMap::new();
    for i in 1..=cfg.depth {
        let dp = opts.drop_path.map(|plan| g.constant(plan.masks[i - 1].clone().into_dyn()));
        let ctx = BlockCtx {
            prefix: format!("v.blk{i}"),
            heads: cfg.heads,
            rope: rope_tables.clone(),
            attn_mask: None,
            drop_path: dp,
        };
        x = transformer_block(g, bound, &ctx, x);
        if opts.tap_layers.contains(&i) {
            taps.insert(i, x);
        }
    }

    let gamma = bound.var("v.ln_f.g");
    let beta = bound.var("v.ln_f.b");
    let final_tokens = g.layer_norm(x, gamma, beta, 1e-5);
    let pooled = match cfg.pooling {
        Pooling::AttentionPool => attention_pool(g, bound, cfg, final_tokens),
        Pooling::EosToken => {
            return Err(Error::config("vision encoder does not support EOS pooling"))
        }
    };
    Ok(VisionOut { taps, final_tokens, pooled, grid: (gh, gw) })
}

/// Single-query multi-head attention pool over all tokens (class token
/// included), followed by an MLP residual and the projection to clip space.
/// No positional terms enter this block, so the result is invariant to
/// token order.
pub fn attention_pool(g: &mut Graph, bound: &Bound, cfg: &EncoderConfig, tokens: Var) -> Var {
    let shape = g.value(tokens).shape().to_vec();
    let (b, n, w) = (shape[0], shape[1], shape[2]);
    let heads = cfg.heads;
    let dh = w / heads;

    let q = bound.var("v.pool.q");
    let q_row = g.reshape(q, &[1, w]);
    let wq = bound.var("v.pool.wq");
    let bq = bound.var("v.pool.bq");
    let q_proj = g.linear(q_row, wq, Some(bq)); // [1, w]
    let q4 = g.reshape(q_proj, &[1, heads, 1, dh]);

    let kproj = {
        let wk = bound.var("v.pool.wk");
        let bk = bound.var("v.pool.bk");
        g.linear(tokens, wk, Some(bk))
    };
    let vproj = {
        let wv = bound.var("v.pool.wv");
        let bv = bound.var("v.pool.bv");
        g.linear(tokens, wv, Some(bv))
    };
    let heads_of = |g: &mut Graph, t: Var| -> Var {
        let r = g.reshape(t, &[b, n, heads, dh]);
        g.permute(r, &[0, 2, 1, 3]) // [B,H,N,dh]
    };
    let k4 = heads_of(g, kproj);
    let v4 = heads_of(g, vproj);

    // scores[b,h,n] = (k4[b,h,n,:] . q4[h,:]) / sqrt(dh)
    let prod = g.mul(k4, q4);
    let summed = g.sum_axis_keep(prod, 3); // [B,H,N,1]
    let scaled = g.scale(summed, 1.0 / (dh as f64).sqrt());
    let scores = g.permute(scaled, &[0, 1, 3, 2]); // [B,H,1,N]
    let attn = g.softmax_last(scores);
    let attn3 = g.reshape(attn, &[b * heads, 1, n]);
    let v3 = g.reshape(v4, &[b * heads, n, dh]);
    let pooled_h = g.bmm(attn3, v3); // [BH,1,dh]
    let merged = g.reshape(pooled_h, &[b, w]);
    let wo = bound.var("v.pool.wo");
    let bo = bound.var("v.pool.bo");
    let attn_out = g.linear(merged, wo, Some(bo)); // [B,w]

    // MLP residual on the pooled vector
    let gamma = bound.var("v.pool.ln.g");
    let beta = bound.var("v.pool.ln.b");
    let normed = g.layer_norm(attn_out, gamma, beta, 1e-5);
    let w1 = bound.var("v.pool.mlp.w1");
    let b1 = bound.var("v.pool.mlp.b1");
    let w2 = bound.var("v.pool.mlp.w2");
    let b2 = bound.var("v.pool.mlp.b2");
    let hid = g.linear(normed, w1, Some(b1));
    let act = g.gelu(hid);
    let mlp = g.linear(act, w2, Some(b2));
    let y = g.add(attn_out, mlp);

    let proj = bound.var("v.proj");
    g.matmul(y, proj) // [B, clip_dim]
}

/// Resample the absolute positional table for a new input resolution using
/// align-corners bilinear interpolation; the class-token position (if any)
/// is copied unchanged. Returns the updated parameters and config.
pub fn interpolate_pos_embed(
    params: &ParamStore,
    cfg: &EncoderConfig,
    new_image_size: usize,
) -> Result<(ParamStore, EncoderConfig)> {
    if new_image_size % cfg.patch_size != 0 {
        return Err(Error::config(format!(
            "new size {new_image_size} not a multiple of patch size {}",
            cfg.patch_size
        )));
    }
    let mut new_cfg = cfg.clone();
    new_cfg.image_size = new_image_size;
    let mut out = params.clone();
    if cfg.use_abs_pos {
        let (gh, gw) = cfg.grid();
        let (nh, nw) = new_cfg.grid();
        if (gh, gw) != (nh, nw) {
            let table = params
                .get("v.pos")
                .ok_or_else(|| Error::config("missing v.pos table"))?
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::shape(e.to_string()))?;
            let grid = table.into_shape_with_order((gh, gw, cfg.width)).map_err(|e| Error::shape(e.to_string()))?;
            let resized = imgproc::resize_grid_align_corners(&grid, nh, nw);
            let flat = resized
                .into_shape_with_order((nh * nw, cfg.width))
                .map_err(|e| Error::shape(e.to_string()))?;
            out.insert("v.pos", flat.into_dyn());
        }
    }
    Ok((out, new_cfg))
}

/// Evaluation-mode forward returning detached features per tap layer.
pub fn forward_features(
    model: &Model,
    images: &Array4<f64>,
    tap_layers: &[usize],
) -> Result<BTreeMap<usize, TokenFeatures>> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let out = vision_forward(
        &mut g,
        &bound,
        &model.cfg.vision,
        images,
        &VisionOpts { tap_layers, ..Default::default() },
    )?;
    let mut map = BTreeMap::new();
    for (layer, var) in out.taps {
        let values = g
            .value(var)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|e| Error::shape(e.to_string()))?;
        map.insert(
            layer,
            TokenFeatures { values, grid: out.grid, has_class_token: model.cfg.vision.use_class_token },
        );
    }
    Ok(map)
}

/// Evaluation-mode forward returning unit-norm clip-space embeddings
/// `[B, clip_dim]`.
pub fn encode_images(model: &Model, images: &Array4<f64>) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let out = vision_forward(
        &mut g,
        &bound,
        &model.cfg.vision,
        images,
        &VisionOpts::default(),
    )?;
    let normed = g.normalize_last(out.pooled, 1e-12);
    g.value(normed)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape(e.to_string()))
}

/// Pooled clip-space embeddings before L2 normalization, `[B, clip_dim]`.
/// Video encoding averages these and normalizes once after the mean.
pub fn encode_images_unnormalized(model: &Model, images: &Array4<f64>) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let out = vision_forward(&mut g, &bound, &model.cfg.vision, images, &VisionOpts::default())?;
    g.value(out.pooled)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape(e.to_string()))
}

/// Final-norm token features (pre-pool) in evaluation mode.
pub fn encode_tokens(model: &Model, images: &Array4<f64>) -> Result<TokenFeatures> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let out = vision_forward(&mut g, &bound, &model.cfg.vision, images, &VisionOpts::default())?;
    let values = g
        .value(out.final_tokens)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(TokenFeatures { values, grid: out.grid, has_class_token: model.cfg.vision.use_class_token })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig, TextConfig};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(image_size: usize) -> ModelConfig {
        ModelConfig {
            vision: EncoderConfig {
                width: 16,
                depth: 2,
                mlp_dim: 32,
                heads: 2,
                patch_size: 4,
                image_size,
                clip_dim: 8,
                use_class_token: true,
                use_rope2d: true,
                use_abs_pos: true,
                pooling: Pooling::AttentionPool,
            },
            text: TextConfig {
                width: 16,
                depth: 2,
                mlp_dim: 32,
                heads: 2,
                vocab_size: 32,
                context_len: 8,
                clip_dim: 8,
            },
        }
    }

    fn rand_images(b: usize, s: usize, seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn((b, 3, s, s), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn patchify_token_counts() {
        let img = Array4::<f64>::zeros((2, 3, 32, 32));
        let t = patchify(&img, 4, false).unwrap();
        assert_eq!(t.grid, (8, 8));
        assert_eq!(t.n_tokens(), 64);
        let t = patchify(&img, 4, true).unwrap();
        assert_eq!(t.n_tokens(), 65);
        let big = Array4::<f64>::zeros((1, 3, 448, 448));
        let t = patchify(&big, 14, false).unwrap();
        assert_eq!(t.grid, (32, 32));
        assert_eq!(t.n_tokens(), 1024);
        let tiny = Array4::<f64>::zeros((1, 3, 16, 16));
        let t = patchify(&tiny, 16, false).unwrap();
        assert_eq!(t.n_tokens(), 1);
        assert!(patchify(&img, 5, false).is_err());
    }

    #[test]
    fn forward_shapes_and_taps() {
        let cfg = tiny_config(16);
        let model = init_model(&cfg, 0).unwrap();
        let images = rand_images(3, 16, 1);
        let feats = forward_features(&model, &images, &[1, 2]).unwrap();
        assert_eq!(feats.len(), 2);
        for tf in feats.values() {
            assert_eq!(tf.values.dim(), (3, 17, 16));
            tf.validate().unwrap();
        }
        assert!(forward_features(&model, &images, &[3]).is_err());
    }

    #[test]
    fn tap_of_last_layer_matches_full_stack() {
        let cfg = tiny_config(16);
        let model = init_model(&cfg, 0).unwrap();
        let images = rand_images(2, 16, 2);
        let both = forward_features(&model, &images, &[1, 2]).unwrap();
        let only_last = forward_features(&model, &images, &[2]).unwrap();
        assert_eq!(both[&2].values, only_last[&2].values);
    }

    #[test]
    fn duplicate_rows_get_identical_features() {
        let cfg = tiny_config(16);
        let model = init_model(&cfg, 3).unwrap();
        let one = rand_images(1, 16, 4);
        let mut two = Array4::<f64>::zeros((2, 3, 16, 16));
        two.index_axis_mut(Axis(0), 0).assign(&one.index_axis(Axis(0), 0));
        two.index_axis_mut(Axis(0), 1).assign(&one.index_axis(Axis(0), 0));
        let feats = forward_features(&model, &two, &[1, 2]).unwrap();
        for tf in feats.values() {
            let a = tf.values.index_axis(Axis(0), 0);
            let b = tf.values.index_axis(Axis(0), 1);
            assert_eq!(a, b);
        }
        let emb = encode_images(&model, &two).unwrap();
        assert_eq!(emb.row(0), emb.row(1));
    }

    #[test]
    fn embeddings_unit_norm_and_deterministic() {
        let cfg = tiny_config(16);
        let model = init_model(&cfg, 5).unwrap();
        let images = rand_images(4, 16, 6);
        let e1 = encode_images(&model, &images).unwrap();
        let e2 = encode_images(&model, &images).unwrap();
        assert_eq!(e1, e2);
        for row in e1.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn pool_is_permutation_invariant_over_grid_tokens() {
        let cfg = tiny_config(16);
        let model = init_model(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens = Array3::from_shape_fn((2, 9, 16), |_| rng.gen_range(-1.0..1.0));

        let pool_of = |toks: &Array3<f64>| -> Array2<f64> {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, false);
            let t = g.constant(toks.clone().into_dyn());
            let out = attention_pool(&mut g, &bound, &model.cfg.vision, t);
            g.value(out).clone().into_dimensionality::<ndarray::Ix2>().unwrap()
        };
        let base = pool_of(&tokens);

        // shuffle tokens 1.. (keep the class slot at 0)
        let mut shuffled = tokens.clone();
        let perm = [5usize, 3, 8, 1, 7, 2, 6, 4];
        for (dst, &src) in perm.iter().enumerate() {
            shuffled
                .slice_mut(ndarray::s![.., dst + 1, ..])
                .assign(&tokens.slice(ndarray::s![.., src, ..]));
        }
        let out = pool_of(&shuffled);
        for (a, b) in base.iter().zip(out.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let cfg = tiny_config(16);
        let model = init_model(&cfg, 9).unwrap();
        let images = rand_images(3, 16, 10);
        let batched = encode_images(&model, &images).unwrap();
        for i in 0..3 {
            let single = images.slice(ndarray::s![i..i + 1, .., .., ..]).to_owned();
            let alone = encode_images(&model, &single).unwrap();
            for (a, b) in batched.row(i).iter().zip(alone.row(0).iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pos_embed_interpolation_contracts() {
        let cfg = tiny_config(16);
        let model = init_model(&cfg, 11).unwrap();
        // identity resample is bitwise equal
        let (same, c2) = interpolate_pos_embed(&model.params, &model.cfg.vision, 16).unwrap();
        assert_eq!(same.get("v.pos").unwrap(), model.params.get("v.pos").unwrap());
        assert_eq!(c2.image_size, 16);
        // constant table stays constant at any size
        let mut params = model.params.clone();
        params.insert("v.pos", Arr::from_elem(ndarray::IxDyn(&[16, 16]), 0.3));
        let (up, c3) = interpolate_pos_embed(&params, &model.cfg.vision, 32).unwrap();
        assert_eq!(c3.grid(), (8, 8));
        for v in up.get("v.pos").unwrap().iter() {
            assert_abs_diff_eq!(*v, 0.3, epsilon = 1e-12);
        }
        // linear ramp stays a linear ramp
        let mut cfg2 = model.cfg.vision.clone();
        cfg2.image_size = 8; // 2x2 grid
        let mut params2 = ParamStore::new();
        for (name, value) in model.params.iter() {
            params2.insert(name.clone(), value.clone());
        }
        let ramp = Array2::from_shape_fn((4, 16), |(i, _)| {
            let (r, c) = (i / 2, i % 2);
            r as f64 + 0.5 * c as f64
        });
        params2.insert("v.pos", ramp.into_dyn());
        let (up2, _) = interpolate_pos_embed(&params2, &cfg2, 16).unwrap();
        let table = up2.get("v.pos").unwrap();
        for i in 0..16 {
            let (r, c) = (i / 4, i % 4);
            let want = r as f64 / 3.0 + 0.5 * (c as f64 / 3.0);
            assert_abs_diff_eq!(table[[i, 0]], want, epsilon = 1e-6);
        }
        // non-multiple target size is rejected
        assert!(interpolate_pos_embed(&model.params, &model.cfg.vision, 18).is_err());
    }

    #[test]
    fn mask_replaces_patch_content() {
        let cfg = tiny_config(16);
        let model = init_model(&cfg, 13).unwrap();
        let a = rand_images(1, 16, 14);
        let b = rand_images(1, 16, 15);
        // fully masked forwards of different images must agree exactly
        let run = |imgs: &Array4<f64>| -> Arr {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, false);
            let mask = Array2::from_elem((1, 16), 1.0);
            let out = vision_forward(
                &mut g,
                &bound,
                &model.cfg.vision,
                imgs,
                &VisionOpts { mask: Some(&mask), ..Default::default() },
            )
            .unwrap();
            g.value(out.final_tokens).clone()
        };
        assert_eq!(run(&a), run(&b));
    }
}
