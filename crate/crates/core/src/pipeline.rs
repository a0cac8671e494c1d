//! Stage orchestration.
//!
//! Each stage takes a [`RunConfig`] plus any input checkpoints, creates a
//! fresh run directory named by stage, config hash, and timestamp, writes
//! the fully resolved config into it for reproducibility, and leaves its
//! artifacts (checkpoints, JSONL metric streams, JSON reports, images)
//! inside. Stages never mutate the inputs of other runs, and identical
//! config + seed always produce identical metric streams.

use crate::config::{derive_seed, make_run_dir, write_resolved_config, RunConfig};
use crate::distill::{distill_run, DistillArtifacts};
use crate::error::{Error, Result};
use crate::imgproc::{resize, save_png, stack_images, Image};
use crate::model::vision::forward_features;
use crate::model::{checkpoint, normalize_images, Model, TokenFeatures};
use crate::probe::{
    attention_probe, grid_features, knn_probe, layer_sweep, linear_probe, linear_seg_probe,
    normalize_scores, propagation_j, ProbeResult,
};
use crate::spatial::spatial_align_run;
use crate::synth::{
    gen_motion_clips, gen_shapes_dataset, parse_motion_caption, MotionClip, ShapesConfig,
    SynthImage, N_CLASSES,
};
use crate::train::{pretrain_run, StageArtifacts};
use crate::video::{clip_caption_r1, read_clip_store, video_finetune_run, write_clip_store};
use crate::zeroshot::{
    build_classifier, classification_accuracy, embed_images, embed_texts, eval_with_transforms,
    load_class_folders, load_retrieval_tsv, retrieve, strip_border, PromptBank,
    RetrievalMetrics,
};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

/// Single-shape scene config used for probe and visualization datasets, so
/// per-image classification labels are well-defined. No attribute pairs are
/// held out: probes should see every class.
fn probe_shapes(cfg: &RunConfig) -> ShapesConfig {
    ShapesConfig {
        image_size: cfg.data.image_size,
        min_shapes: 1,
        max_shapes: 1,
        holdout: vec![],
        holdout_only: false,
        position_prob: cfg.data.position_prob,
    }
}

fn single_labels(samples: &[SynthImage]) -> Result<Vec<u32>> {
    samples
        .iter()
        .map(|s| {
            s.single_class()
                .map(|c| c as u32)
                .ok_or_else(|| Error::data("probe sample is not single-class"))
        })
        .collect()
}

/// Token features per tapped layer for an image list, resizing every image
/// to the encoder resolution and batching the forward passes so memory stays
/// bounded.
pub fn features_by_layer(
    model: &Model,
    images: &[Image],
    layers: &[usize],
) -> Result<BTreeMap<usize, TokenFeatures>> {
    if images.is_empty() {
        return Err(Error::data("no images to featurize"));
    }
    let size = model.cfg.vision.image_size;
    let mut chunks: BTreeMap<usize, Vec<Array3<f64>>> = BTreeMap::new();
    let mut grid = (0, 0);
    let mut has_class = false;
    for batch in images.chunks(32) {
        let resized: Vec<Image> = batch
            .iter()
            .map(|img| {
                let (_, h, w) = img.dim();
                if (h, w) == (size, size) { Ok(img.clone()) } else { resize(img, size, size) }
            })
            .collect::<Result<_>>()?;
        let normalized = normalize_images(&stack_images(&resized)?);
        for (layer, tf) in forward_features(model, &normalized, layers)? {
            grid = tf.grid;
            has_class = tf.has_class_token;
            chunks.entry(layer).or_default().push(tf.values);
        }
    }
    let mut out = BTreeMap::new();
    for (layer, parts) in chunks {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let values = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::shape(format!("feature concat failed: {e}")))?;
        out.insert(layer, TokenFeatures { values, grid, has_class_token: has_class });
    }
    Ok(out)
}

/// Mean over the grid tokens (class token excluded): the pooled vector fed
/// to the kNN and linear probes.
fn mean_pooled(tf: &TokenFeatures) -> Array2<f64> {
    let grid = tf.grid_values();
    grid.mean_axis(Axis(1)).expect("nonempty token axis")
}

/// Downsamples a pixel mask to the token grid: a token is foreground when
/// any pixel of its cell is, so small objects never vanish from the grid.
fn mask_to_token_grid(mask: &Array2<u32>, grid: (usize, usize)) -> Array2<u32> {
    let (h, w) = mask.dim();
    let (gh, gw) = grid;
    Array2::from_shape_fn((gh, gw), |(gy, gx)| {
        let y0 = gy * h / gh;
        let y1 = (((gy + 1) * h).div_ceil(gh)).min(h);
        let x0 = gx * w / gw;
        let x1 = (((gx + 1) * w).div_ceil(gw)).min(w);
        let mut label = 0u32;
        'scan: for y in y0..y1 {
            for x in x0..x1 {
                if mask[[y, x]] != 0 {
                    label = mask[[y, x]];
                    break 'scan;
                }
            }
        }
        label
    })
}

/// Foreground mask of a frame rendered over a uniform background: pixels
/// that differ from the corner pixel.
fn frame_foreground(frame: &Image) -> Array2<u32> {
    let (_, h, w) = frame.dim();
    let bg = [frame[[0, 0, 0]], frame[[1, 0, 0]], frame[[2, 0, 0]]];
    Array2::from_shape_fn((h, w), |(y, x)| {
        u32::from((0..3).any(|c| (frame[[c, y, x]] - bg[c]).abs() > 1e-9))
    })
}

fn model_id_of(ckpt: &Path, model: &Model) -> String {
    let stem = ckpt.file_stem().map(|s| s.to_string_lossy().into_owned());
    let hash = model.params.content_hash();
    format!("{}-{}", stem.unwrap_or_else(|| "model".into()), &hash[..8.min(hash.len())])
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

/// On-disk datasets produced by the `gen-data` stage.
#[derive(Debug, Clone)]
pub struct GenDataPaths {
    /// The run directory.
    pub root: PathBuf,
    /// Class-folder classification images.
    pub classification: PathBuf,
    /// Retrieval TSV (`relative/path.png<TAB>caption`).
    pub retrieval_tsv: PathBuf,
    /// Video clip store root.
    pub video_store: PathBuf,
}

/// Writes the evaluation datasets: class folders of single-shape images,
/// an image–caption retrieval list, and a video clip store.
pub fn gen_data_stage(cfg: &RunConfig, out_dir: &Path) -> Result<GenDataPaths> {
    let root = make_run_dir(out_dir, "gen-data", cfg)?;
    write_resolved_config(&root, cfg)?;

    // classification: every class, single shape per image
    let cls_dir = root.join("classification");
    let cls = gen_shapes_dataset(
        derive_seed(cfg.seed, "data.zeroshot"),
        cfg.data.n_eval,
        &probe_shapes(cfg),
    )?;
    for (i, sample) in cls.iter().enumerate() {
        let class = sample
            .single_class()
            .ok_or_else(|| Error::data("classification sample is not single-class"))?;
        let dir = cls_dir.join(crate::synth::class_name(class));
        std::fs::create_dir_all(&dir)?;
        save_png(&sample.image, &dir.join(format!("img{i:04}.png")))?;
    }

    // retrieval: held-out attribute pairs with full captions
    let ret_dir = root.join("retrieval");
    std::fs::create_dir_all(ret_dir.join("imgs"))?;
    let ret = gen_shapes_dataset(
        derive_seed(cfg.seed, "data.retrieval"),
        cfg.data.n_eval,
        &cfg.data.eval_shapes(),
    )?;
    let mut tsv = String::new();
    for (i, sample) in ret.iter().enumerate() {
        let rel = format!("imgs/img{i:04}.png");
        save_png(&sample.image, &ret_dir.join(&rel))?;
        tsv.push_str(&format!("{rel}\t{}\n", sample.caption));
    }
    let retrieval_tsv = ret_dir.join("index.tsv");
    std::fs::write(&retrieval_tsv, tsv)?;

    // video: clip store with motion captions
    let video_store = root.join("video");
    let clips = gen_motion_clips(
        derive_seed(cfg.seed, "data.clips"),
        cfg.data.n_eval_clips,
        &cfg.data.motion(),
    )?;
    write_clip_store(&video_store, &clips)?;

    Ok(GenDataPaths { root, classification: cls_dir, retrieval_tsv, video_store })
}

// ---------------------------------------------------------------------------
// Training stages
// ---------------------------------------------------------------------------

/// Contrastive pretraining in a fresh run directory.
pub fn pretrain_stage(cfg: &RunConfig, out_dir: &Path) -> Result<(PathBuf, StageArtifacts)> {
    let dir = make_run_dir(out_dir, "pretrain", cfg)?;
    write_resolved_config(&dir, cfg)?;
    let art = pretrain_run(cfg, &dir)?;
    Ok((dir, art))
}

/// Distillation from a frozen teacher checkpoint into a freshly initialized
/// student (architecture from the config's model section).
pub fn distill_stage(
    cfg: &RunConfig,
    teacher_ckpt: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, DistillArtifacts)> {
    let dir = make_run_dir(out_dir, "distill", cfg)?;
    write_resolved_config(&dir, cfg)?;
    let student = crate::model::init_model(
        &cfg.model.to_model_config(),
        derive_seed(cfg.seed, "init"),
    )?;
    let student_init = dir.join("student_init.ckpt");
    checkpoint::save(&student_init, &student)?;
    let art = distill_run(cfg, teacher_ckpt, &student_init, &dir)?;
    Ok((dir, art))
}

/// Video finetuning on top of a base checkpoint.
pub fn video_stage(
    cfg: &RunConfig,
    base_ckpt: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, StageArtifacts)> {
    let dir = make_run_dir(out_dir, "video-ft", cfg)?;
    write_resolved_config(&dir, cfg)?;
    let art = video_finetune_run(cfg, base_ckpt, &dir)?;
    Ok((dir, art))
}

/// Spatial alignment finetuning on top of a base checkpoint.
pub fn spatial_stage(
    cfg: &RunConfig,
    base_ckpt: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, StageArtifacts)> {
    let dir = make_run_dir(out_dir, "spatial-align", cfg)?;
    write_resolved_config(&dir, cfg)?;
    let art = spatial_align_run(cfg, base_ckpt, &dir)?;
    Ok((dir, art))
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

/// One probe sweep as persisted to JSON.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProbeReport {
    /// Checkpoint stem plus a parameter-hash prefix.
    pub model_id: String,
    /// Task id: knn, linear, attention, seg, or tracking.
    pub task: String,
    /// Score per tapped layer (1-based block index).
    pub per_layer: BTreeMap<usize, f64>,
    /// Layer with the best score in the task's direction.
    pub best_layer: usize,
    /// Score at `best_layer`.
    pub best: f64,
    /// Score at the deepest tapped layer.
    pub last: f64,
    /// Whether larger scores are better for this task.
    pub higher_is_better: bool,
}

impl ProbeReport {
    fn from_result(model_id: &str, r: ProbeResult) -> Self {
        Self {
            model_id: model_id.to_string(),
            task: r.task_id,
            per_layer: r.per_layer,
            best_layer: r.best_layer,
            best: r.best_score,
            last: r.last_score,
            higher_is_better: r.higher_is_better,
        }
    }
}

/// Runs the full layerwise probe suite (kNN, linear, attention, linear
/// segmentation, tracking) on frozen features of one checkpoint, writing one
/// `probe_<task>.json` per task. The encoder is asserted hash-stable.
pub fn probe_stage(
    cfg: &RunConfig,
    ckpt: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, Vec<ProbeReport>)> {
    let dir = make_run_dir(out_dir, "probe", cfg)?;
    write_resolved_config(&dir, cfg)?;
    let model = checkpoint::load(ckpt)?;
    let hash_before = model.params.content_hash();
    let model_id = model_id_of(ckpt, &model);
    let depth = model.cfg.vision.depth;
    let layers: Vec<usize> = if cfg.probe.layers.is_empty() {
        (1..=depth).collect()
    } else {
        for &l in &cfg.probe.layers {
            if l == 0 || l > depth {
                return Err(Error::config(format!("probe layer {l} outside 1..={depth}")));
            }
        }
        cfg.probe.layers.clone()
    };

    // classification-style datasets (shared across knn/linear/attention/seg)
    let shapes = probe_shapes(cfg);
    let train = gen_shapes_dataset(derive_seed(cfg.seed, "probe.train"), cfg.data.n_eval, &shapes)?;
    let test = gen_shapes_dataset(derive_seed(cfg.seed, "probe.test"), cfg.data.n_eval, &shapes)?;
    let train_imgs: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
    let test_imgs: Vec<Image> = test.iter().map(|s| s.image.clone()).collect();
    let train_labels = single_labels(&train)?;
    let test_labels = single_labels(&test)?;
    let train_feats = features_by_layer(&model, &train_imgs, &layers)?;
    let test_feats = features_by_layer(&model, &test_imgs, &layers)?;
    let grid = train_feats.values().next().expect("at least one layer").grid;

    // segmentation labels at the token grid (background is class 0)
    let seg_label_stack = |set: &[SynthImage]| -> Array3<u32> {
        let mut out = Array3::zeros((set.len(), grid.0, grid.1));
        for (i, s) in set.iter().enumerate() {
            let px = s.seg_class.mapv(|v| v as u32);
            let down = crate::imgproc::resize_nearest_labels(&px, grid.0, grid.1);
            out.index_axis_mut(Axis(0), i).assign(&down);
        }
        out
    };
    let seg_train = seg_label_stack(&train);
    let seg_test = seg_label_stack(&test);

    // tracking clips: per-clip frame features and token-grid foreground masks
    let clips = gen_motion_clips(
        derive_seed(cfg.seed, "probe.clips"),
        cfg.data.n_eval_clips,
        &cfg.data.motion(),
    )?;
    let mut clip_feats: Vec<BTreeMap<usize, TokenFeatures>> = Vec::new();
    let mut clip_masks: Vec<Vec<Array2<u32>>> = Vec::new();
    for clip in &clips {
        clip_feats.push(features_by_layer(&model, &clip.frames, &layers)?);
        clip_masks
            .push(clip.frames.iter().map(|f| mask_to_token_grid(&frame_foreground(f), grid)).collect());
    }

    let p = &cfg.probe;
    let mut reports = Vec::new();

    let knn = layer_sweep(
        &layers,
        |l| knn_probe(&mean_pooled(&train_feats[&l]), &train_labels, &mean_pooled(&test_feats[&l]), &test_labels, p.knn_k),
        "knn",
        true,
    )?;
    reports.push(ProbeReport::from_result(&model_id, knn));

    let linear = layer_sweep(
        &layers,
        |l| {
            linear_probe(
                &mean_pooled(&train_feats[&l]),
                &train_labels,
                &mean_pooled(&test_feats[&l]),
                &test_labels,
                N_CLASSES,
                p.epochs,
                p.lr,
            )
        },
        "linear",
        true,
    )?;
    reports.push(ProbeReport::from_result(&model_id, linear));

    let attn_seed = derive_seed(cfg.seed, "probe.attention");
    let attention = layer_sweep(
        &layers,
        |l| {
            attention_probe(
                &train_feats[&l].values,
                &train_labels,
                &test_feats[&l].values,
                &test_labels,
                N_CLASSES,
                p.epochs,
                p.head_lr,
                attn_seed,
            )
        },
        "attention",
        true,
    )?;
    reports.push(ProbeReport::from_result(&model_id, attention));

    let seg_seed = derive_seed(cfg.seed, "probe.seg");
    let seg = layer_sweep(
        &layers,
        |l| {
            linear_seg_probe(
                &grid_features(&train_feats[&l])?,
                &seg_train,
                &grid_features(&test_feats[&l])?,
                &seg_test,
                (N_CLASSES + 1) as u32,
                p.epochs,
                p.head_lr,
                seg_seed,
            )
        },
        "seg",
        true,
    )?;
    reports.push(ProbeReport::from_result(&model_id, seg));

    let tracking = layer_sweep(
        &layers,
        |l| {
            let mut acc = 0.0;
            for (feats, masks) in clip_feats.iter().zip(&clip_masks) {
                let tf = &feats[&l];
                let frames: Vec<Array2<f64>> = (0..tf.values.shape()[0])
                    .map(|t| tf.grid_values().index_axis(Axis(0), t).to_owned())
                    .collect();
                acc += propagation_j(&frames, grid, masks, p.context_n, p.top_k)?;
            }
            Ok(acc / clip_feats.len() as f64)
        },
        "tracking",
        true,
    )?;
    reports.push(ProbeReport::from_result(&model_id, tracking));

    if model.params.content_hash() != hash_before {
        return Err(Error::data("probe stage mutated the encoder"));
    }
    for report in &reports {
        write_json(&dir.join(format!("probe_{}.json", report.task)), report)?;
    }
    Ok((dir, reports))
}

// ---------------------------------------------------------------------------
// zeroshot
// ---------------------------------------------------------------------------

/// Zero-shot evaluation results as persisted to `zeroshot.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ZeroshotReport {
    pub model_id: String,
    /// Top-1 classification accuracy over the class folders.
    pub accuracy: f64,
    pub n_classes: usize,
    /// Image–text retrieval recalls over the TSV list.
    pub retrieval: RetrievalMetrics,
    /// Clip→caption R@1 over the video store, when present.
    pub video_r1: Option<f64>,
    pub use_dsl: bool,
    pub squash_and_crop: bool,
    pub border_strip: usize,
}

/// Evaluates a checkpoint on the datasets a `gen-data` run wrote.
pub fn zeroshot_stage(
    cfg: &RunConfig,
    ckpt: &Path,
    data_root: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, ZeroshotReport)> {
    let dir = make_run_dir(out_dir, "zeroshot", cfg)?;
    write_resolved_config(&dir, cfg)?;
    let model = checkpoint::load(ckpt)?;
    let model_id = model_id_of(ckpt, &model);
    let zs = &cfg.zeroshot;
    let bank = PromptBank::new(zs.templates.clone())?;

    // classification
    let (mut images, labels, class_names) = load_class_folders(&data_root.join("classification"))?;
    if zs.border_strip > 0 {
        images = images
            .iter()
            .map(|img| strip_border(img, zs.border_strip))
            .collect::<Result<_>>()?;
    }
    let classifier = build_classifier(&model, &class_names, &bank)?;
    let accuracy = if zs.squash_and_crop {
        eval_with_transforms(&images, model.cfg.vision.image_size, |views| {
            classification_accuracy(&embed_images(&model, views)?, &classifier, &labels)
        })?
    } else {
        classification_accuracy(&embed_images(&model, &images)?, &classifier, &labels)?
    };

    // retrieval
    let (ret_images, captions) = load_retrieval_tsv(&data_root.join("retrieval").join("index.tsv"))?;
    let img_embs = embed_images(&model, &ret_images)?;
    let txt_embs = embed_texts(&model, &captions)?;
    let retrieval = retrieve(&img_embs, &txt_embs, zs.use_dsl)?;

    // optional video store
    let video_index = data_root.join("video").join("index.tsv");
    let video_r1 = if video_index.is_file() {
        let stored = read_clip_store(&data_root.join("video"))?;
        let clips: Vec<MotionClip> = stored
            .into_iter()
            .map(|s| {
                let spec = parse_motion_caption(&s.caption)?;
                Ok(MotionClip { frames: s.frames, caption: s.caption, spec, centers: vec![] })
            })
            .collect::<Result<_>>()?;
        Some(clip_caption_r1(&model, &clips, cfg.video.n_frames, cfg.video.average_normalized)?)
    } else {
        None
    };

    let report = ZeroshotReport {
        model_id,
        accuracy,
        n_classes: class_names.len(),
        retrieval,
        video_r1,
        use_dsl: zs.use_dsl,
        squash_and_crop: zs.squash_and_crop,
        border_strip: zs.border_strip,
    };
    write_json(&dir.join("zeroshot.json"), &report)?;
    Ok((dir, report))
}

// ---------------------------------------------------------------------------
// viz
// ---------------------------------------------------------------------------

/// Renders PCA color maps of token features for a few synthetic images,
/// writing `input_<i>.png` / `viz_<i>.png` pairs. Returns the written
/// visualization paths.
pub fn viz_stage(cfg: &RunConfig, ckpt: &Path, out_dir: &Path) -> Result<(PathBuf, Vec<PathBuf>)> {
    let dir = make_run_dir(out_dir, "viz", cfg)?;
    write_resolved_config(&dir, cfg)?;
    let model = checkpoint::load(ckpt)?;
    let depth = model.cfg.vision.depth;
    let layer = if cfg.viz.layer == 0 { depth } else { cfg.viz.layer };
    if layer > depth {
        return Err(Error::config(format!("viz layer {layer} outside 1..={depth}")));
    }
    let samples = gen_shapes_dataset(
        derive_seed(cfg.seed, "viz"),
        cfg.viz.n_images.max(1),
        &probe_shapes(cfg),
    )?;
    let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
    let feats = features_by_layer(&model, &images, &[layer])?;
    let tf = &feats[&layer];
    let cell = (model.cfg.vision.image_size / tf.grid.0.max(1)).max(1);
    let mut written = Vec::new();
    for (i, sample) in samples.iter().enumerate() {
        save_png(&sample.image, &dir.join(format!("input_{i:02}.png")))?;
        let rgb = crate::viz::visualize_tokens(tf, i, true)?;
        let path = dir.join(format!("viz_{i:02}.png"));
        crate::viz::save_viz_png(&rgb, cell, &path)?;
        written.push(path);
    }
    Ok((dir, written))
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Renders one task's layer curves (normalized scores per model) as a small
/// standalone SVG. A dashed vertical line marks each model's best layer.
pub fn svg_layer_curves(
    task: &str,
    normalized: &BTreeMap<String, BTreeMap<usize, f64>>,
    best_layers: &BTreeMap<String, usize>,
) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let layers: Vec<usize> =
        normalized.values().flat_map(|m| m.keys().copied()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let (lmin, lmax) = (*layers.first().unwrap_or(&1), *layers.last().unwrap_or(&1));
    let xof = |layer: usize| {
        if lmax == lmin {
            ml + pw / 2.0
        } else {
            ml + (layer - lmin) as f64 / (lmax - lmin) as f64 * pw
        }
    };
    let yof = |score: f64| mt + (1.0 - score.clamp(0.0, 1.0)) * ph;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
         viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{task}: normalized score by layer</text>\n",
        w / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"#000\"/>\n",
        mt + ph
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#000\"/>\n",
        mt + ph,
        ml + pw
    ));
    for (frac, label) in [(0.0, "0.0"), (0.5, "0.5"), (1.0, "1.0")] {
        let y = yof(frac);
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{label}</text>\n",
            ml - 8.0,
            y + 4.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{ml}\" y2=\"{y:.1}\" stroke=\"#000\"/>\n",
            ml - 4.0
        ));
    }
    for &layer in &layers {
        let x = xof(layer);
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{layer}</text>\n",
            mt + ph + 18.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">layer</text>\n",
        ml + pw / 2.0,
        h - 12.0
    ));
    // curves
    for (mi, (model, scores)) in normalized.iter().enumerate() {
        let color = PALETTE[mi % PALETTE.len()];
        let points: Vec<String> =
            scores.iter().map(|(&l, &s)| format!("{:.1},{:.1}", xof(l), yof(s))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            points.join(" ")
        ));
        if let Some(&best) = best_layers.get(model) {
            let x = xof(best);
            svg.push_str(&format!(
                "<line x1=\"{x:.1}\" y1=\"{mt}\" x2=\"{x:.1}\" y2=\"{}\" stroke=\"{color}\" stroke-dasharray=\"4 3\"/>\n",
                mt + ph
            ));
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" fill=\"{color}\">{model}</text>\n",
            ml + 8.0,
            mt + 16.0 + 16.0 * mi as f64
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn collect_probe_reports(runs_dir: &Path) -> Result<Vec<ProbeReport>> {
    let mut reports = Vec::new();
    let mut dirs = vec![runs_dir.to_path_buf()];
    for entry in std::fs::read_dir(runs_dir)? {
        let path = entry?.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    for dir in dirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| {
                p.file_name()
                    .map(|n| {
                        let n = n.to_string_lossy();
                        n.starts_with("probe_") && n.ends_with(".json")
                    })
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        for file in files {
            let text = std::fs::read_to_string(&file)?;
            let report: ProbeReport = serde_json::from_str(&text)
                .map_err(|e| Error::data(format!("{}: {e}", file.display())))?;
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Aggregated, cross-model normalized probe scores for one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task: String,
    pub higher_is_better: bool,
    /// Min-max normalized per-layer scores per model.
    pub normalized: BTreeMap<String, BTreeMap<usize, f64>>,
    /// Raw best layer per model.
    pub best_layers: BTreeMap<String, usize>,
}

/// Scans a directory (and its immediate children) for `probe_*.json`
/// reports, normalizes scores across models per task, and writes one SVG
/// layer-curve plot per task plus a combined `report.json`.
pub fn report_stage(runs_dir: &Path, out_dir: &Path) -> Result<(PathBuf, Vec<PathBuf>)> {
    let reports = collect_probe_reports(runs_dir)?;
    if reports.is_empty() {
        return Err(Error::data(format!(
            "no probe_*.json reports under {}",
            runs_dir.display()
        )));
    }
    let dir = out_dir.join("report");
    std::fs::create_dir_all(&dir)?;

    let mut by_task: BTreeMap<String, Vec<&ProbeReport>> = BTreeMap::new();
    for r in &reports {
        by_task.entry(r.task.clone()).or_default().push(r);
    }
    let mut plots = Vec::new();
    let mut summaries = Vec::new();
    for (task, group) in by_task {
        let higher = group[0].higher_is_better;
        let mut per_model: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
        let mut best_layers = BTreeMap::new();
        for r in group {
            per_model.insert(r.model_id.clone(), r.per_layer.clone());
            best_layers.insert(r.model_id.clone(), r.best_layer);
        }
        let normalized = normalize_scores(&per_model, higher);
        let svg = svg_layer_curves(&task, &normalized, &best_layers);
        let path = dir.join(format!("report_{task}.svg"));
        std::fs::write(&path, svg)?;
        plots.push(path);
        summaries.push(TaskSummary { task, higher_is_better: higher, normalized, best_layers });
    }
    write_json(&dir.join("report.json"), &summaries)?;
    Ok((dir, plots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::load_config;
    use crate::metrics::read_lines;

    /// A configuration small enough that every stage finishes in seconds.
    fn micro_config() -> RunConfig {
        load_config(
            None,
            &[
                "seed=7".to_string(),
                "model.width=16".to_string(),
                "model.depth=2".to_string(),
                "model.mlp_dim=32".to_string(),
                "model.heads=2".to_string(),
                "model.patch_size=8".to_string(),
                "model.image_size=32".to_string(),
                "model.clip_dim=16".to_string(),
                "model.text_width=16".to_string(),
                "model.text_depth=1".to_string(),
                "model.text_mlp_dim=32".to_string(),
                "model.text_heads=2".to_string(),
                "data.image_size=32".to_string(),
                "data.n_train=48".to_string(),
                "data.n_eval=16".to_string(),
                "data.n_clips=6".to_string(),
                "data.n_eval_clips=3".to_string(),
                "data.clip_frames=4".to_string(),
                "train.batch_size=8".to_string(),
                "train.total_samples=96".to_string(),
                "train.warmup_steps=2".to_string(),
                "train.use_mask_reg=false".to_string(),
                "probe.epochs=5".to_string(),
                "probe.context_n=2".to_string(),
                "viz.n_images=2".to_string(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn gen_data_layouts_load_back_and_are_deterministic() {
        let cfg = micro_config();
        let tmp = tempfile::tempdir().unwrap();
        let a = gen_data_stage(&cfg, tmp.path()).unwrap();
        let b = gen_data_stage(&cfg, tmp.path()).unwrap();
        assert_ne!(a.root, b.root, "each run gets a fresh directory");
        assert!(a.root.join("config.toml").is_file());

        let (images, labels, names) = load_class_folders(&a.classification).unwrap();
        assert_eq!(images.len(), 16);
        assert_eq!(labels.len(), 16);
        assert!(!names.is_empty());

        let (ret_imgs, captions) = load_retrieval_tsv(&a.retrieval_tsv).unwrap();
        assert_eq!(ret_imgs.len(), 16);
        assert!(captions.iter().all(|c| !c.is_empty()));

        let clips = read_clip_store(&a.video_store).unwrap();
        assert_eq!(clips.len(), 3);
        assert_eq!(clips[0].frames.len(), 4);

        // same config + seed => identical dataset bytes
        let tsv_a = std::fs::read(&a.retrieval_tsv).unwrap();
        let tsv_b = std::fs::read(&b.retrieval_tsv).unwrap();
        assert_eq!(tsv_a, tsv_b);
        let idx_a = std::fs::read(a.video_store.join("index.tsv")).unwrap();
        let idx_b = std::fs::read(b.video_store.join("index.tsv")).unwrap();
        assert_eq!(idx_a, idx_b);
    }

    #[test]
    fn pipeline_runs_end_to_end_and_metric_streams_are_reproducible() {
        let cfg = micro_config();
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path();

        // pretrain twice: byte-identical metric streams
        let (dir1, art1) = pretrain_stage(&cfg, out).unwrap();
        let (_dir2, art2) = pretrain_stage(&cfg, out).unwrap();
        assert!(art1.checkpoint.is_file());
        assert!(dir1.join("config.toml").is_file());
        let m1 = std::fs::read(&art1.metrics).unwrap();
        let m2 = std::fs::read(&art2.metrics).unwrap();
        assert!(!m1.is_empty());
        assert_eq!(m1, m2, "pretrain metric streams differ between identical runs");

        // probe: five tasks, JSON reports validate and reload
        let (probe_dir, reports) = probe_stage(&cfg, &art1.checkpoint, out).unwrap();
        let tasks: Vec<&str> = reports.iter().map(|r| r.task.as_str()).collect();
        assert_eq!(tasks, vec!["knn", "linear", "attention", "seg", "tracking"]);
        for report in &reports {
            let path = probe_dir.join(format!("probe_{}.json", report.task));
            let text = std::fs::read_to_string(&path).unwrap();
            let back: ProbeReport = serde_json::from_str(&text).unwrap();
            assert_eq!(&back, report);
            assert_eq!(back.per_layer.len(), 2, "expected one entry per layer");
            assert!(back.per_layer.contains_key(&back.best_layer));
            for v in back.per_layer.values() {
                assert!(v.is_finite());
            }
            assert!((0.0..=1.0).contains(&back.best));
        }

        // zeroshot over gen-data artifacts
        let data = gen_data_stage(&cfg, out).unwrap();
        let (zs_dir, zs) = zeroshot_stage(&cfg, &art1.checkpoint, &data.root, out).unwrap();
        assert!(zs_dir.join("zeroshot.json").is_file());
        assert!((0.0..=1.0).contains(&zs.accuracy));
        assert!((0.0..=1.0).contains(&zs.retrieval.i2t.r1));
        assert!((0.0..=1.0).contains(&zs.retrieval.t2i.r10));
        let video_r1 = zs.video_r1.expect("video store present");
        assert!((0.0..=1.0).contains(&video_r1));

        // viz: one PNG pair per image
        let (viz_dir, pngs) = viz_stage(&cfg, &art1.checkpoint, out).unwrap();
        assert_eq!(pngs.len(), 2);
        for p in &pngs {
            assert!(p.is_file());
        }
        assert!(viz_dir.join("input_00.png").is_file());

        // report over everything written so far
        let (report_dir, plots) = report_stage(out, out).unwrap();
        assert_eq!(plots.len(), 5, "one plot per probe task");
        let svg = std::fs::read_to_string(&plots[0]).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        let summary = std::fs::read_to_string(report_dir.join("report.json")).unwrap();
        let parsed: Vec<TaskSummary> = serde_json::from_str(&summary).unwrap();
        assert_eq!(parsed.len(), 5);
        for task in &parsed {
            for scores in task.normalized.values() {
                for v in scores.values() {
                    assert!((0.0..=1.0).contains(v));
                }
            }
        }
    }

    #[test]
    fn finetune_stages_run_on_a_micro_checkpoint() {
        let mut cfg = micro_config();
        cfg.train.total_samples = 16; // 2 steps: just enough to emit artifacts
        cfg.video.batch_size = 4;
        cfg.video.total_samples = 8;
        cfg.video.n_frames = 2;
        cfg.spatial.batch_size = 4;
        cfg.spatial.total_samples = 8;
        cfg.spatial.teacher_layer = 1;
        cfg.spatial.query_grid = 4;
        cfg.spatial.mask_block = (1, 1);
        cfg.distill.batch_size = 4;
        cfg.distill.total_samples = 8;
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path();
        let (_, base) = pretrain_stage(&cfg, out).unwrap();

        let (_, video_art) = video_stage(&cfg, &base.checkpoint, out).unwrap();
        assert!(video_art.checkpoint.is_file());
        let (_, spatial_art) = spatial_stage(&cfg, &base.checkpoint, out).unwrap();
        assert!(spatial_art.checkpoint.is_file());
        let (distill_dir, distill_art) = distill_stage(&cfg, &base.checkpoint, out).unwrap();
        assert!(distill_art.stage.checkpoint.is_file());
        assert!(distill_dir.join("student_init.ckpt").is_file());
        assert!(!read_lines(&video_art.metrics).unwrap().is_empty());
        assert!(!read_lines(&spatial_art.metrics).unwrap().is_empty());
    }

    #[test]
    fn mask_downsampling_never_loses_a_small_object() {
        // a 3x3 blob in a 32x32 mask survives onto a 4x4 grid
        let mut mask = Array2::zeros((32, 32));
        for y in 10..13 {
            for x in 20..23 {
                mask[[y, x]] = 1u32;
            }
        }
        let grid = mask_to_token_grid(&mask, (4, 4));
        assert_eq!(grid.iter().filter(|&&v| v != 0).count(), 1);
        assert_eq!(grid[[1, 2]], 1);
        // empty mask stays empty
        let empty = mask_to_token_grid(&Array2::zeros((32, 32)), (4, 4));
        assert!(empty.iter().all(|&v| v == 0));
    }

    #[test]
    fn svg_emitter_is_deterministic_and_complete() {
        let mut models = BTreeMap::new();
        let mut best = BTreeMap::new();
        for (name, shift) in [("model-a", 0.0), ("model-b", 0.2)] {
            let scores: BTreeMap<usize, f64> =
                (1..=4).map(|l| (l, (l as f64 / 4.0 - shift).clamp(0.0, 1.0))).collect();
            models.insert(name.to_string(), scores);
            best.insert(name.to_string(), 4usize);
        }
        let a = svg_layer_curves("knn", &models, &best);
        let b = svg_layer_curves("knn", &models, &best);
        assert_eq!(a, b);
        assert!(a.contains("model-a") && a.contains("model-b"));
        assert_eq!(a.matches("<polyline").count(), 2);
        assert_eq!(a.matches("stroke-dasharray").count(), 2);
    }
}
