//! Spatial alignment finetuning.
//!
//! Starting from a contrastively pretrained checkpoint, the student is
//! finetuned against two frozen teachers: its own base weights, tapped at an
//! intermediate layer (cosine alignment keeps the semantic features), and a
//! synthetic mask-logit oracle built from ground-truth segmentations
//! (pairwise-similarity alignment injects locality). The student sees masked
//! inputs with stochastic depth; both teachers see the same augmented image
//! unmasked, and the loss covers every token. LayerScale gains are the only
//! parameters added to the architecture.

use crate::augment::{apply_aug_labels, augment};
use crate::config::{derive_seed, RunConfig};
use crate::error::{Error, Result};
use crate::imgproc::{resize_nearest_labels, stack_images};
use crate::losses::spatial_align::{
    core_align_loss_graph, locality_loss_graph, pairwise_cossim, teacher_sim_transform,
};
use crate::losses::sample_block_mask;
use crate::metrics::{MetricsWriter, read_jsonl};
use crate::model::vision::{encode_tokens, forward_features, vision_forward, VisionOpts};
use crate::model::{
    add_layer_scale, checkpoint, drop_path_plan, normalize_images, Model,
};
use crate::optim::{lamb_step, LambHyper, LrSchedule, OptState};
use crate::synth::gen_shapes_dataset;
use crate::tensor::Graph;
use crate::train::{BatchCursor, StageArtifacts};
use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-pixel mask logits from a grid of query points: the locality teacher's
/// feature space. Channel `k` holds the logit map for the region containing
/// query point `k`.
#[derive(Debug, Clone)]
pub struct MaskLogitFeatures {
    /// `[H, W, K]` with `K = g·g`.
    pub logits: Array3<f64>,
    /// Query-point grid side lengths `(g, g)`.
    pub query_grid: (usize, usize),
}

impl MaskLogitFeatures {
    pub fn validate(&self) -> Result<()> {
        let (g0, g1) = self.query_grid;
        if self.logits.dim().2 != g0 * g1 {
            return Err(Error::shape(format!(
                "expected {} logit channels for a {}x{} query grid, got {}",
                g0 * g1,
                g0,
                g1,
                self.logits.dim().2
            )));
        }
        if self.logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::data("non-finite mask logits"));
        }
        Ok(())
    }
}

/// Builds mask logits from a ground-truth label map: query points sit at the
/// centers of a `g × g` cell grid; channel `k` is `+margin` on pixels sharing
/// the label under point `k` and `−margin` elsewhere. A query point on an
/// unlabeled pixel (label 0) yields an all-`−margin` channel.
pub fn mask_logit_teacher(
    seg: &Array2<u32>,
    g: usize,
    margin: f64,
) -> Result<MaskLogitFeatures> {
    let (h, w) = seg.dim();
    if h == 0 || w == 0 || g == 0 {
        return Err(Error::shape("empty segmentation or query grid"));
    }
    let k = g * g;
    let mut logits = Array3::from_elem((h, w, k), -margin);
    for gy in 0..g {
        for gx in 0..g {
            let py = (((gy as f64 + 0.5) * h as f64 / g as f64) as usize).min(h - 1);
            let px = (((gx as f64 + 0.5) * w as f64 / g as f64) as usize).min(w - 1);
            let label = seg[[py, px]];
            if label == 0 {
                continue; // unlabeled: channel stays all -margin
            }
            let ch = gy * g + gx;
            for y in 0..h {
                for x in 0..w {
                    if seg[[y, x]] == label {
                        logits[[y, x, ch]] = margin;
                    }
                }
            }
        }
    }
    let out = MaskLogitFeatures { logits, query_grid: (g, g) };
    out.validate()?;
    Ok(out)
}

/// Area-weighted downsample of a `[H, W, K]` map to `[out_h, out_w, K]`:
/// each output cell averages the input pixels it covers, with fractional
/// rows/columns weighted by overlap. Exact block mean when sizes divide.
pub fn area_downsample(map: &Array3<f64>, out_h: usize, out_w: usize) -> Result<Array3<f64>> {
    let (h, w, k) = map.dim();
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::shape(format!(
            "cannot area-downsample {h}x{w} to {out_h}x{out_w}"
        )));
    }
    // Overlap of input index i (covering [i, i+1)) with output cell o
    // (covering [o·scale, (o+1)·scale)).
    let spans = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let lo = o as f64 * scale;
                let hi = (o + 1) as f64 * scale;
                let mut v = Vec::new();
                for i in lo.floor() as usize..(hi.ceil() as usize).min(n_in) {
                    let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    if overlap > 0.0 {
                        v.push((i, overlap / scale));
                    }
                }
                v
            })
            .collect()
    };
    let rows = spans(h, out_h);
    let cols = spans(w, out_w);
    let mut out = Array3::zeros((out_h, out_w, k));
    for (oy, rv) in rows.iter().enumerate() {
        for (ox, cv) in cols.iter().enumerate() {
            for &(iy, wy) in rv {
                for &(ix, wx) in cv {
                    let wgt = wy * wx;
                    for c in 0..k {
                        out[[oy, ox, c]] += wgt * map[[iy, ix, c]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Locality-teacher token features: mask logits area-downsampled to the token
/// grid and flattened row-major (matching patch order) to `[n_tok, K]`.
pub fn token_mask_logits(
    feats: &MaskLogitFeatures,
    grid: (usize, usize),
) -> Result<Array2<f64>> {
    feats.validate()?;
    let (gh, gw) = grid;
    let down = area_downsample(&feats.logits, gh, gw)?;
    let k = down.dim().2;
    let flat = down.into_shape_with_order((gh * gw, k)).map_err(|e| Error::shape(e.to_string()))?;
    Ok(flat)
}

/// One metrics line per logged alignment step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialMetric {
    pub step: usize,
    pub samples_seen: usize,
    pub core_loss: f64,
    pub loc_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
}

/// Pearson correlation between off-diagonal last-layer pairwise token
/// similarities and oracle co-membership (1 when two token centers fall in
/// the same labeled region, background counted as a region of its own),
/// pooled over the given samples.
pub fn comembership_correlation(
    model: &Model,
    samples: &[(crate::imgproc::Image, Array2<u32>)],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("no samples"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (img, seg) in samples {
        let batch = normalize_images(&stack_images(std::slice::from_ref(img))?);
        let toks = encode_tokens(model, &batch)?;
        let (gh, gw) = toks.grid;
        let start = usize::from(toks.has_class_token);
        let t = toks
            .values
            .index_axis(Axis(0), 0)
            .slice(ndarray::s![start.., ..])
            .to_owned();
        let sim = pairwise_cossim(&t);
        let labels = resize_nearest_labels(seg, gh, gw);
        let flat: Vec<u32> = labels.iter().copied().collect();
        let n = gh * gw;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                xs.push(sim[[i, j]]);
                ys.push(if flat[i] == flat[j] { 1.0 } else { 0.0 });
            }
        }
    }
    pearson(&xs, &ys)
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::data("need at least two paired observations"));
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::data("degenerate correlation (constant inputs)"));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Runs alignment finetuning from a base checkpoint; returns the finetuned
/// checkpoint and the metric stream.
///
/// Teachers are frozen copies of the base weights (feature teacher) and the
/// segmentation-derived mask-logit oracle (locality teacher); their
/// constancy is asserted by content hash at the end of the run.
pub fn spatial_align_run(
    cfg: &RunConfig,
    base_ckpt: &Path,
    run_dir: &Path,
) -> Result<StageArtifacts> {
    let base = checkpoint::load(base_ckpt)?;
    let sp = &cfg.spatial;
    let vision_cfg = base.cfg.vision.clone();
    if sp.teacher_layer == 0 || sp.teacher_layer > vision_cfg.depth {
        return Err(Error::config(format!(
            "teacher layer {} outside 1..={}",
            sp.teacher_layer, vision_cfg.depth
        )));
    }
    if !(0.0..1.0).contains(&sp.mask_ratio) {
        return Err(Error::config("mask_ratio must lie in [0, 1)"));
    }
    if sp.loc_temperature < 0.0 {
        return Err(Error::config("loc_temperature must be nonnegative"));
    }
    if sp.batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }

    // Frozen feature teacher: the base model as loaded.
    let teacher = Model { cfg: base.cfg.clone(), params: base.params.clone() };
    let teacher_hash = teacher.params.content_hash();

    // Student: base weights plus LayerScale on every block.
    let mut params = base.params;
    add_layer_scale(&mut params, "v", vision_cfg.depth, vision_cfg.width, sp.layerscale_init);

    let data = gen_shapes_dataset(
        derive_seed(cfg.seed, "data.train"),
        cfg.data.n_train,
        &cfg.data.train_shapes(),
    )?;
    let steps = sp.total_samples / sp.batch_size;
    let lr_sched = LrSchedule {
        base_lr: sp.lr,
        warmup_steps: sp.warmup_steps,
        total_steps: steps,
        final_factor: 1.0,
    };
    let mut opt_state = OptState::new();
    let mut cursor = BatchCursor::new(
        data.len(),
        sp.batch_size,
        derive_seed(cfg.seed, "spatial.batches"),
        0,
    );
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "spatial.aug"));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "spatial.mask"));
    let mut dp_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "spatial.droppath"));

    let size = vision_cfg.image_size;
    let grid = (size / vision_cfg.patch_size, size / vision_cfg.patch_size);
    let n_grid = grid.0 * grid.1;

    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut samples_seen = 0usize;

    for step in 0..steps {
        let indices = cursor
            .next()
            .ok_or_else(|| Error::data("dataset exhausted"))?;
        let b = indices.len();

        // Augment images and replay the geometry on instance labels so both
        // teachers see exactly the student's view.
        let mut images = Vec::with_capacity(b);
        let mut targets = Array3::zeros((b, n_grid, n_grid));
        for (bi, &di) in indices.iter().enumerate() {
            let sample = &data[di];
            let (img, applied) = augment(&sample.image, &cfg.train.aug, &mut aug_rng, size)?;
            let seg_u32 = sample.seg_instance.mapv(|v| v as u32);
            let seg = apply_aug_labels(&seg_u32, &applied)?;
            let oracle = mask_logit_teacher(&seg, sp.query_grid, sp.oracle_margin)?;
            let toks = token_mask_logits(&oracle, grid)?;
            let sims = pairwise_cossim(&toks);
            targets
                .index_axis_mut(Axis(0), bi)
                .assign(&teacher_sim_transform(&sims, sp.loc_temperature));
            images.push(img);
        }
        let batch = normalize_images(&stack_images(&images)?);

        // Frozen intermediate-layer features on the unmasked view.
        let tap = forward_features(&teacher, &batch, &[sp.teacher_layer])?
            .remove(&sp.teacher_layer)
            .ok_or_else(|| Error::data("missing teacher tap"))?;
        let start = usize::from(tap.has_class_token);
        let teacher_tokens = tap
            .values
            .slice(ndarray::s![.., start.., ..])
            .to_owned();

        // Student sees the masked view with stochastic depth.
        let mut mask = Array2::zeros((b, n_grid));
        for bi in 0..b {
            let m = sample_block_mask(&mut mask_rng, grid, sp.mask_block, sp.mask_ratio)?;
            mask.row_mut(bi).assign(
                &m.into_shape_with_order(n_grid)
                    .map_err(|e| Error::shape(e.to_string()))?,
            );
        }
        let plan = drop_path_plan(&mut dp_rng, vision_cfg.depth, b, sp.droppath);

        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let out = vision_forward(
            &mut g,
            &bound,
            &vision_cfg,
            &batch,
            &VisionOpts { mask: Some(&mask), drop_path: Some(&plan), ..Default::default() },
        )?;
        let s_start = usize::from(vision_cfg.use_class_token);
        let n_tok = n_grid + s_start;
        let student_tokens = if s_start > 0 {
            g.slice_axis(out.final_tokens, 1, s_start, n_tok - s_start)
        } else {
            out.final_tokens
        };

        let core = core_align_loss_graph(&mut g, student_tokens, &teacher_tokens);
        let loc = locality_loss_graph(&mut g, student_tokens, &targets);
        let core_w = g.scale(core, sp.weight_core);
        let loc_w = g.scale(loc, sp.weight_loc);
        let total = g.add(core_w, loc_w);

        let grads = g.backward(total);
        let grad_map = bound.collect_grads(&grads);
        let lr = lr_sched.lr_at(step);
        let hyper = LambHyper { lr, decay_min_ndim: 2, ..cfg.train.optim };
        lamb_step(&mut params, &grad_map, &mut opt_state, &hyper)?;

        samples_seen += b;
        if step % sp.log_every.max(1) == 0 || step + 1 == steps {
            metrics.log(&SpatialMetric {
                step,
                samples_seen,
                core_loss: g.scalar_value(core),
                loc_loss: g.scalar_value(loc),
                total_loss: g.scalar_value(total),
                lr,
            })?;
        }
    }

    if teacher.params.content_hash() != teacher_hash {
        return Err(Error::data("feature teacher changed during the run"));
    }

    let final_model = Model { cfg: base.cfg.clone(), params };
    let ckpt_path = run_dir.join("checkpoint.bin");
    checkpoint::save(&ckpt_path, &final_model)?;
    let _ = read_jsonl::<SpatialMetric>(&metrics_path)?;
    Ok(StageArtifacts { checkpoint: ckpt_path, metrics: metrics_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    #[test]
    fn single_region_oracle_gives_uniform_similarity() {
        let seg = Array2::from_elem((8, 8), 5u32);
        let feats = mask_logit_teacher(&seg, 2, 10.0).unwrap();
        assert_eq!(feats.logits.dim(), (8, 8, 4));
        // all channels identical
        for c in 1..4 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(feats.logits[[y, x, c]], feats.logits[[y, x, 0]]);
                }
            }
        }
        let toks = token_mask_logits(&feats, (4, 4)).unwrap();
        let sim = pairwise_cossim(&toks);
        for v in sim.iter() {
            assert_abs_diff_eq!(*v, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn half_plane_regions_separate_in_similarity() {
        // left half label 1, right half label 2
        let seg = Array2::from_shape_fn((8, 8), |(_, x)| if x < 4 { 1u32 } else { 2 });
        let feats = mask_logit_teacher(&seg, 2, 10.0).unwrap();
        let toks = token_mask_logits(&feats, (2, 2)).unwrap();
        let sim = pairwise_cossim(&toks);
        // token order row-major: (0,0) (0,1) (1,0) (1,1); same column = same half
        assert_abs_diff_eq!(sim[[0, 2]], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sim[[1, 3]], 1.0, epsilon = 1e-9);
        assert!(sim[[0, 1]] < 1.0 - 1e-6, "cross-half similarity not reduced");
        assert!(sim[[2, 3]] < 1.0 - 1e-6);
    }

    #[test]
    fn unlabeled_query_point_yields_all_negative_channel() {
        let mut seg = Array2::from_elem((4, 4), 3u32);
        // query points for g=2 land at (1,1),(1,3),(3,1),(3,3); blank one out
        seg[[1, 1]] = 0;
        let feats = mask_logit_teacher(&seg, 2, 7.0).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(feats.logits[[y, x, 0]], -7.0);
            }
        }
        // other channels still mark the region
        assert_eq!(feats.logits[[3, 3, 3]], 7.0);
    }

    #[test]
    fn query_grid_side_sets_channel_count() {
        let seg = Array2::from_elem((64, 64), 1u32);
        let feats = mask_logit_teacher(&seg, 32, 10.0).unwrap();
        assert_eq!(feats.query_grid, (32, 32));
        assert_eq!(feats.logits.dim().2, 1024);
    }

    #[test]
    fn area_downsample_matches_block_and_overlap_oracles() {
        // divisible: plain 2x2 block mean
        let mut m = Array3::zeros((4, 4, 1));
        for y in 0..4 {
            for x in 0..4 {
                m[[y, x, 0]] = (y * 4 + x) as f64;
            }
        }
        let d = area_downsample(&m, 2, 2).unwrap();
        assert_abs_diff_eq!(d[[0, 0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[[1, 1, 0]], (10.0 + 11.0 + 14.0 + 15.0) / 4.0, epsilon = 1e-12);
        // non-divisible: 3 → 2 splits the middle input half/half
        let mut m = Array3::zeros((3, 1, 1));
        m[[0, 0, 0]] = 1.0;
        m[[1, 0, 0]] = 2.0;
        m[[2, 0, 0]] = 7.0;
        let d = area_downsample(&m, 2, 1).unwrap();
        assert_abs_diff_eq!(d[[0, 0, 0]], (1.0 + 0.5 * 2.0) / 1.5, epsilon = 1e-12);
        assert_abs_diff_eq!(d[[1, 0, 0]], (0.5 * 2.0 + 7.0) / 1.5, epsilon = 1e-12);
        assert!(area_downsample(&m, 5, 1).is_err());
    }

    #[test]
    fn alignment_run_improves_similarity_structure() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = crate::train::tests::micro_run_config();
        cfg.spatial.teacher_layer = 1;
        cfg.spatial.batch_size = 8;
        cfg.spatial.total_samples = 8 * 30;
        cfg.spatial.warmup_steps = 2;
        cfg.spatial.lr = 3e-3;
        cfg.spatial.query_grid = 4;
        cfg.spatial.mask_block = (1, 1);
        cfg.spatial.mask_ratio = 0.5;
        cfg.spatial.droppath = 0.1;
        cfg.data.n_train = 64;
        let base = init_model(&cfg.model.to_model_config(), 31).unwrap();
        let base_path = tmp.path().join("base.bin");
        checkpoint::save(&base_path, &base).unwrap();

        let eval = gen_shapes_dataset(derive_seed(cfg.seed, "data.eval"), 6, &cfg.data.eval_shapes())
            .unwrap();
        let pairs: Vec<_> = eval
            .iter()
            .map(|s| (s.image.clone(), s.seg_instance.mapv(|v| v as u32)))
            .collect();
        let before = comembership_correlation(&base, &pairs).unwrap();

        let dir = tmp.path().join("run");
        std::fs::create_dir_all(&dir).unwrap();
        let art = spatial_align_run(&cfg, &base_path, &dir).unwrap();
        let tuned = checkpoint::load(&art.checkpoint).unwrap();
        let after = comembership_correlation(&tuned, &pairs).unwrap();
        assert!(
            after > before,
            "similarity/co-membership correlation did not improve: {before:.4} -> {after:.4}"
        );

        // LayerScale gains are present in the tuned checkpoint and only there.
        assert!(tuned.params.contains("v.blk1.ls1"));
        assert!(!base.params.contains("v.blk1.ls1"));

        let rows: Vec<SpatialMetric> = read_jsonl(&art.metrics).unwrap();
        assert_eq!(rows.len(), 30);
        assert!(rows.iter().all(|r| r.total_loss.is_finite()));
    }

    #[test]
    fn single_loss_configurations_run() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = crate::train::tests::micro_run_config();
        cfg.spatial.teacher_layer = 2;
        cfg.spatial.batch_size = 4;
        cfg.spatial.total_samples = 4 * 3;
        cfg.spatial.warmup_steps = 1;
        cfg.spatial.query_grid = 2;
        cfg.spatial.mask_block = (1, 1);
        cfg.data.n_train = 16;
        let base = init_model(&cfg.model.to_model_config(), 37).unwrap();
        let base_path = tmp.path().join("base.bin");
        checkpoint::save(&base_path, &base).unwrap();

        for (wc, wl, tag) in [(1.0, 0.0, "core"), (0.0, 1.0, "loc")] {
            cfg.spatial.weight_core = wc;
            cfg.spatial.weight_loc = wl;
            let dir = tmp.path().join(tag);
            std::fs::create_dir_all(&dir).unwrap();
            let art = spatial_align_run(&cfg, &base_path, &dir).unwrap();
            let rows: Vec<SpatialMetric> = read_jsonl(&art.metrics).unwrap();
            assert_eq!(rows.len(), 3);
            for r in &rows {
                let expect = wc * r.core_loss + wl * r.loc_loss;
                assert_abs_diff_eq!(r.total_loss, expect, epsilon = 1e-9);
            }
        }

        // invalid teacher layer is rejected
        cfg.spatial.teacher_layer = 99;
        let dir = tmp.path().join("bad");
        std::fs::create_dir_all(&dir).unwrap();
        assert!(spatial_align_run(&cfg, &base_path, &dir).is_err());
    }
}
