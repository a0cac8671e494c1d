//! Contrastive pretraining: progressive resolution, augmentation, the
//! combined contrastive + mask-regularization objective, layerwise-adaptive
//! optimization with logit-scale clamping, JSONL metrics, and checkpoints.
//!
//! The per-batch loss builder is exposed separately from the loop so tests can
//! inspect the graph (in particular the gradient-disjointness contract between
//! the contrastive and masked branches).

use crate::augment::{augment, ResolutionSchedule};
use crate::config::{derive_seed, RunConfig};
use crate::error::{Error, Result};
use crate::imgproc::stack_images;
use crate::losses::{
    clamp_logit_scale, clip_loss_graph, duplicated_count, mask_cosine_loss_graph,
    sample_block_mask, MaskRegSpec,
};
use crate::metrics::{MetricsWriter, TrainMetric};
use crate::model::text::{text_forward, TextBatch};
use crate::model::vision::{interpolate_pos_embed, vision_forward, VisionOpts};
use crate::model::{
    checkpoint, init_model, normalize_images, Bound, EncoderConfig, Model, ParamStore,
    TextConfig, LOGIT_SCALE_NAME,
};
use crate::optim::{lamb_step, LrSchedule, OptState};
use crate::synth::{gen_shapes_dataset, SynthImage, Vocab};
use crate::tensor::{Graph, Var};
use ndarray::{s, Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Maximum exponentiated logit scale; the learnable scale is clamped here
/// after every optimizer step.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Files a finished training stage leaves in its run directory.
#[derive(Debug, Clone)]
pub struct StageArtifacts {
    /// Final model checkpoint.
    pub checkpoint: PathBuf,
    /// JSONL metric stream.
    pub metrics: PathBuf,
}

/// Graph handles for one training batch.
pub struct BatchLoss {
    /// Total loss fed to backward.
    pub total: Var,
    /// Contrastive term.
    pub clip: Var,
    /// Mask-regularization term (absent when the branch is off).
    pub mask: Option<Var>,
}

/// Builds the contrastive loss — and, when `mask` is given, the
/// mask-regularization branch — for one batch of normalized images and
/// encoded captions.
///
/// The masked branch re-encodes the first `mask.nrows()` samples with masked
/// patch tokens and aligns their output tokens to the gradient-stopped tokens
/// of the unmasked forward. Masked duplicates never enter the similarity
/// matrix, and the alignment target is detached, so the two objectives have
/// disjoint gradient paths through the activations.
pub fn batch_loss_graph(
    g: &mut Graph,
    bound: &Bound,
    vision_cfg: &EncoderConfig,
    text_cfg: &TextConfig,
    images_norm: &Array4<f64>,
    text: &TextBatch,
    mask: Option<(&Array2<f64>, f64)>,
) -> Result<BatchLoss> {
    let b = images_norm.dim().0;
    if text.len() != b {
        return Err(Error::shape(format!("{b} images but {} captions", text.len())));
    }
    let vis = vision_forward(g, bound, vision_cfg, images_norm, &VisionOpts::default())?;
    let img_embs = g.normalize_last(vis.pooled, 1e-12);
    let txt = text_forward(g, bound, text_cfg, text)?;
    let txt_embs = g.normalize_last(txt, 1e-12);
    let log_scale = bound.var(LOGIT_SCALE_NAME);
    let clip = clip_loss_graph(g, img_embs, txt_embs, log_scale);

    let (total, mask_var) = match mask {
        None => (clip, None),
        Some((mask_rows, weight)) => {
            let dup = mask_rows.nrows();
            if dup == 0 || dup > b {
                return Err(Error::shape(format!("mask has {dup} rows for batch {b}")));
            }
            let dup_images = images_norm.slice(s![0..dup, .., .., ..]).to_owned();
            let masked = vision_forward(
                g,
                bound,
                vision_cfg,
                &dup_images,
                &VisionOpts { mask: Some(mask_rows), ..Default::default() },
            )?;
            let n_grid = vis.grid.0 * vis.grid.1;
            // Align grid tokens only; the class token is never masked.
            let (student, target) = if vision_cfg.use_class_token {
                let s = g.slice_axis(masked.final_tokens, 1, 1, n_grid);
                let t_rows = g.slice_axis(vis.final_tokens, 0, 0, dup);
                let t = g.slice_axis(t_rows, 1, 1, n_grid);
                (s, t)
            } else {
                let t = g.slice_axis(vis.final_tokens, 0, 0, dup);
                (masked.final_tokens, t)
            };
            let mask_loss = mask_cosine_loss_graph(g, student, target, mask_rows);
            let weighted = g.scale(mask_loss, weight);
            (g.add(clip, weighted), Some(mask_loss))
        }
    };
    Ok(BatchLoss { total, clip, mask: mask_var })
}

/// Epoch-shuffled batch cursor over dataset indices. Full batches only;
/// a trailing remainder smaller than the batch is dropped.
pub(crate) struct BatchCursor {
    n: usize,
    batch: usize,
    seed: u64,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
    max_epochs: usize,
}

impl BatchCursor {
    pub(crate) fn new(n: usize, batch: usize, seed: u64, max_epochs: usize) -> Self {
        Self { n, batch, seed, order: Vec::new(), pos: 0, epoch: 0, max_epochs }
    }

    /// Next batch of indices, or `None` when the epoch cap exhausts the data.
    pub(crate) fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos + self.batch > self.order.len() {
            if self.max_epochs > 0 && self.epoch >= self.max_epochs {
                return None;
            }
            self.epoch += 1;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &format!("order.{}", self.epoch)));
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut rng);
            self.pos = 0;
            if self.order.len() < self.batch {
                return None;
            }
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        Some(out)
    }
}

/// Augments and stacks one batch at `resolution`, already normalized for the
/// encoder.
fn make_image_batch(
    data: &[SynthImage],
    indices: &[usize],
    resolution: usize,
    aug_cfg: &crate::augment::AugConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f64>> {
    let mut views = Vec::with_capacity(indices.len());
    for &i in indices {
        let (img, _) = augment(&data[i].image, aug_cfg, rng, resolution)?;
        views.push(img);
    }
    Ok(normalize_images(&stack_images(&views)?))
}

fn sample_batch_mask(
    rng: &mut ChaCha8Rng,
    spec: &MaskRegSpec,
    batch: usize,
    grid: (usize, usize),
) -> Result<Array2<f64>> {
    let dup = duplicated_count(spec.batch_fraction, batch);
    let n_grid = grid.0 * grid.1;
    let mut mask = Array2::zeros((dup, n_grid));
    for r in 0..dup {
        let m = sample_block_mask(rng, grid, spec.mask_block, spec.token_mask_ratio)?;
        let flat = m.into_shape_with_order(n_grid).map_err(|e| Error::shape(e.to_string()))?;
        mask.row_mut(r).assign(&flat);
    }
    Ok(mask)
}

/// Reads the current logit scale (exponentiated) from a parameter store.
fn current_scale(params: &ParamStore) -> f64 {
    params
        .get(LOGIT_SCALE_NAME)
        .map(|a| a.iter().next().copied().unwrap_or(0.0).exp())
        .unwrap_or(1.0)
}

fn clamp_scale_param(params: &mut ParamStore) {
    if let Some(arr) = params.get_mut(LOGIT_SCALE_NAME) {
        let v = arr.iter().next().copied().unwrap_or(0.0);
        let clamped = clamp_logit_scale(v, MAX_LOGIT_SCALE);
        arr.fill(clamped);
    }
}

/// Runs contrastive pretraining per the config, writing `metrics.jsonl`,
/// periodic checkpoints, and the final `checkpoint.bin` into `run_dir`.
///
/// The resolution schedule is a list of `(samples, resolution)` stages whose
/// final resolution must equal the model's configured image size; positional
/// tables are resampled (and their optimizer moments reset) at each stage
/// boundary. An empty schedule trains at full resolution throughout.
pub fn pretrain_run(cfg: &RunConfig, run_dir: &Path) -> Result<StageArtifacts> {
    let model_cfg = cfg.model.to_model_config();
    model_cfg.vision.validate()?;
    model_cfg.text.validate()?;
    cfg.train.optim.validate()?;
    let vocab = Vocab::synthetic();
    if vocab.n_ids() > model_cfg.text.vocab_size {
        return Err(Error::config(format!(
            "vocabulary needs {} ids but the text encoder allows {}",
            vocab.n_ids(),
            model_cfg.text.vocab_size
        )));
    }
    let batch = cfg.train.batch_size;
    if batch == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let steps = cfg.train.total_samples / batch;
    if steps == 0 {
        return Err(Error::config("total_samples smaller than one batch"));
    }

    let schedule = if cfg.train.schedule.is_empty() {
        ResolutionSchedule {
            stages: vec![(cfg.train.total_samples, model_cfg.vision.image_size)],
        }
    } else {
        ResolutionSchedule { stages: cfg.train.schedule.clone() }
    };
    schedule.validate()?;
    if schedule.final_resolution() != model_cfg.vision.image_size {
        return Err(Error::config(format!(
            "schedule ends at {} but the model expects {}",
            schedule.final_resolution(),
            model_cfg.vision.image_size
        )));
    }

    let data = gen_shapes_dataset(
        derive_seed(cfg.seed, "data.train"),
        cfg.data.n_train,
        &cfg.data.train_shapes(),
    )?;

    let model = init_model(&model_cfg, derive_seed(cfg.seed, "init"))?;
    let mut params = model.params;
    let mut vision_cfg = model.cfg.vision.clone();
    let text_cfg = model.cfg.text.clone();

    let lr_sched = LrSchedule {
        base_lr: cfg.train.optim.lr,
        warmup_steps: cfg.train.warmup_steps,
        total_steps: steps,
        final_factor: cfg.train.final_lr_factor,
    };
    let mut opt_state = OptState::new();
    let mut cursor = BatchCursor::new(
        data.len(),
        batch,
        derive_seed(cfg.seed, "train.batches"),
        cfg.train.max_epochs,
    );
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train.aug"));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "train.mask"));

    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = MetricsWriter::create(&metrics_path)?;

    let mut samples_seen = 0usize;
    for step in 0..steps {
        let resolution = schedule.resolution_at(samples_seen);
        if resolution != vision_cfg.image_size {
            let (p, c) = interpolate_pos_embed(&params, &vision_cfg, resolution)?;
            params = p;
            vision_cfg = c;
            opt_state.reset_param("v.pos");
        }
        let Some(indices) = cursor.next() else {
            eprintln!(
                "warning: dataset exhausted after {samples_seen} of {} samples; stopping",
                cfg.train.total_samples
            );
            break;
        };
        let images =
            make_image_batch(&data, &indices, resolution, &cfg.train.aug, &mut aug_rng)?;
        let captions: Vec<&str> = indices.iter().map(|&i| data[i].caption.as_str()).collect();
        let text = vocab.encode_batch(&captions, text_cfg.context_len)?;

        let mask = if cfg.train.use_mask_reg {
            Some(sample_batch_mask(&mut mask_rng, &cfg.train.mask_reg, batch, vision_cfg.grid())?)
        } else {
            None
        };

        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let losses = batch_loss_graph(
            &mut g,
            &bound,
            &vision_cfg,
            &text_cfg,
            &images,
            &text,
            mask.as_ref().map(|m| (m, cfg.train.mask_weight)),
        )?;
        let grads = g.backward(losses.total);
        let grad_map = bound.collect_grads(&grads);
        let lr = lr_sched.lr_at(step);
        let hyper = crate::optim::LambHyper { lr, ..cfg.train.optim };
        lamb_step(&mut params, &grad_map, &mut opt_state, &hyper)?;
        clamp_scale_param(&mut params);

        samples_seen += batch;
        let clip_loss = g.scalar_value(losses.clip);
        let mask_loss = losses.mask.map(|v| g.scalar_value(v)).unwrap_or(0.0);
        if step % cfg.train.log_every.max(1) == 0 || step + 1 == steps {
            metrics.log(&TrainMetric {
                step,
                samples_seen,
                resolution,
                clip_loss,
                mask_loss,
                logit_scale: current_scale(&params),
                lr,
            })?;
        }
        if cfg.train.checkpoint_every > 0 && (step + 1) % cfg.train.checkpoint_every == 0 {
            let model = assemble(&model_cfg, &vision_cfg, &text_cfg, &params)?;
            checkpoint::save(&run_dir.join(format!("checkpoint-{:06}.bin", step + 1)), &model)?;
        }
    }

    let final_model = assemble(&model_cfg, &vision_cfg, &text_cfg, &params)?;
    let ckpt_path = run_dir.join("checkpoint.bin");
    checkpoint::save(&ckpt_path, &final_model)?;
    Ok(StageArtifacts { checkpoint: ckpt_path, metrics: metrics_path })
}

fn assemble(
    model_cfg: &crate::model::ModelConfig,
    vision_cfg: &EncoderConfig,
    text_cfg: &TextConfig,
    params: &ParamStore,
) -> Result<Model> {
    let mut cfg = model_cfg.clone();
    cfg.vision = vision_cfg.clone();
    cfg.text = text_cfg.clone();
    Ok(Model { cfg, params: params.clone() })
}
