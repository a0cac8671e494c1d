//! Frame-averaged video embeddings and contrastive video finetuning.
//!
//! A clip is encoded by uniformly sampling `n` frames, encoding each like an
//! image, averaging the pooled (pre-normalization) embeddings, and
//! L2-normalizing once after the mean. A config flag switches to the
//! alternative order (normalize per frame, then average, then renormalize).
//!
//! Clip storage is a directory of per-clip frame PNGs plus a tab-separated
//! index `{clip_id, n_frames, caption}`; caption lookup is behind the
//! [`CaptionSource`] trait so file-backed and synthetic sources interchange.

use crate::config::{derive_seed, RunConfig};
use crate::error::{Error, Result};
use crate::imgproc::{resize, stack_images, Image};
use crate::losses::{clamp_logit_scale, clip_loss_graph};
use crate::metrics::{MetricsWriter, TrainMetric};
use crate::model::text::text_forward;
use crate::model::vision::{encode_images_unnormalized, vision_forward, VisionOpts};
use crate::model::{checkpoint, normalize_images, Model, LOGIT_SCALE_NAME};
use crate::optim::{lamb_step, LambHyper, LrSchedule, OptState};
use crate::synth::{gen_motion_clips, MotionClip, Vocab};
use crate::tensor::Graph;
use crate::train::{StageArtifacts, MAX_LOGIT_SCALE};
use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// A video clip as a dense frame tensor.
#[derive(Debug, Clone)]
pub struct VideoClip {
    /// Frames `[T, 3, H, W]` in `[0, 1]`, temporal order.
    pub frames: Array4<f64>,
    /// Nominal clip duration in seconds.
    pub duration_s: f64,
}

impl VideoClip {
    /// Builds a clip from per-frame images (all equally shaped).
    pub fn from_images(frames: &[Image], duration_s: f64) -> Result<Self> {
        Ok(Self { frames: stack_images(frames)?, duration_s })
    }

    /// Number of frames.
    pub fn n_frames(&self) -> usize {
        self.frames.dim().0
    }

    /// One frame as an image view.
    pub fn frame(&self, t: usize) -> Array3<f64> {
        self.frames.index_axis(Axis(0), t).to_owned()
    }
}

/// Deterministic clip-id → caption lookup.
pub trait CaptionSource {
    /// Caption for a clip id; errors on unknown ids.
    fn caption(&self, clip_id: &str) -> Result<String>;
}

/// Caption source backed by an in-memory map (used for generated clips).
#[derive(Debug, Clone, Default)]
pub struct MapCaptions {
    map: BTreeMap<String, String>,
}

impl MapCaptions {
    pub fn insert(&mut self, id: impl Into<String>, caption: impl Into<String>) {
        self.map.insert(id.into(), caption.into());
    }
}

impl CaptionSource for MapCaptions {
    fn caption(&self, clip_id: &str) -> Result<String> {
        self.map
            .get(clip_id)
            .cloned()
            .ok_or_else(|| Error::data(format!("unknown clip id {clip_id:?}")))
    }
}

/// Caption source reading a clip-store `index.tsv`.
#[derive(Debug, Clone)]
pub struct TsvCaptions {
    map: BTreeMap<String, String>,
}

impl TsvCaptions {
    /// Parses `{clip_id}\t{n_frames}\t{caption}` lines.
    pub fn open(index_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(index_path)?;
        let mut map = BTreeMap::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let (id, _n, caption) = (parts.next(), parts.next(), parts.next());
            match (id, caption) {
                (Some(id), Some(caption)) => {
                    map.insert(id.to_string(), caption.to_string());
                }
                _ => {
                    return Err(Error::data(format!(
                        "{}:{}: malformed index line",
                        index_path.display(),
                        ln + 1
                    )))
                }
            }
        }
        Ok(Self { map })
    }
}

impl CaptionSource for TsvCaptions {
    fn caption(&self, clip_id: &str) -> Result<String> {
        self.map
            .get(clip_id)
            .cloned()
            .ok_or_else(|| Error::data(format!("unknown clip id {clip_id:?}")))
    }
}

/// Uniformly samples `n` frame indices over `[0, t−1]`, endpoints included
/// when `n ≥ 2`; `n = 1` takes the middle frame. Fractional positions round
/// half down, and duplicates appear when `t < n`.
pub fn sample_frames(t: usize, n: usize) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::data("empty clip"));
    }
    if n == 0 {
        return Err(Error::config("must sample at least one frame"));
    }
    let round_half_down = |x: f64| -> usize { (x - 0.5).ceil().max(0.0) as usize };
    if n == 1 {
        return Ok(vec![round_half_down((t - 1) as f64 / 2.0)]);
    }
    let step = (t - 1) as f64 / (n - 1) as f64;
    Ok((0..n).map(|k| round_half_down(k as f64 * step)).collect())
}

// Same normalization convention as the model's embedding heads: eps added
// under the square root, so still frames reproduce the image embedding
// exactly.
fn l2_normalize(v: &Array1<f64>) -> Array1<f64> {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    v.mapv(|x| x / n)
}

fn average_rows(embs: &Array2<f64>, normalized_first: bool) -> Array1<f64> {
    let mut mean = Array1::zeros(embs.ncols());
    for row in embs.rows() {
        let row = row.to_owned();
        mean = mean + if normalized_first { l2_normalize(&row) } else { row };
    }
    mean /= embs.nrows() as f64;
    l2_normalize(&mean)
}

/// Encodes a clip: sample `n` frames, encode, average pooled embeddings,
/// normalize once (or normalize-first when `average_normalized`).
pub fn encode_video(
    model: &Model,
    clip: &VideoClip,
    n: usize,
    average_normalized: bool,
) -> Result<Array1<f64>> {
    let idx = sample_frames(clip.n_frames(), n)?;
    let size = model.cfg.vision.image_size;
    let mut frames = Vec::with_capacity(idx.len());
    for &t in &idx {
        let f = clip.frame(t);
        let (_, h, w) = f.dim();
        frames.push(if (h, w) == (size, size) { f } else { resize(&f, size, size)? });
    }
    let batch = normalize_images(&stack_images(&frames)?);
    let pooled = encode_images_unnormalized(model, &batch)?;
    Ok(average_rows(&pooled, average_normalized))
}

// ---------------------------------------------------------------------------
// Clip storage
// ---------------------------------------------------------------------------

/// A clip read back from disk.
#[derive(Debug, Clone)]
pub struct StoredClip {
    pub id: String,
    pub frames: Vec<Image>,
    pub caption: String,
}

fn clip_id(i: usize) -> String {
    format!("clip{i:05}")
}

/// Writes clips as `dir/clips/<id>/frame<t>.png` plus `dir/index.tsv` rows
/// `{clip_id}\t{n_frames}\t{caption}`.
pub fn write_clip_store(dir: &Path, clips: &[MotionClip]) -> Result<()> {
    let clips_dir = dir.join("clips");
    std::fs::create_dir_all(&clips_dir)?;
    let mut index = String::new();
    for (i, clip) in clips.iter().enumerate() {
        let id = clip_id(i);
        let cdir = clips_dir.join(&id);
        std::fs::create_dir_all(&cdir)?;
        for (t, frame) in clip.frames.iter().enumerate() {
            crate::imgproc::save_png(frame, &cdir.join(format!("frame{t:03}.png")))?;
        }
        index.push_str(&format!("{id}\t{}\t{}\n", clip.frames.len(), clip.caption));
    }
    std::fs::write(dir.join("index.tsv"), index)?;
    Ok(())
}

/// Reads a clip store in index order.
pub fn read_clip_store(dir: &Path) -> Result<Vec<StoredClip>> {
    let index_path = dir.join("index.tsv");
    let captions = TsvCaptions::open(&index_path)?;
    let text = std::fs::read_to_string(&index_path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let mut parts = line.splitn(3, '\t');
        let id = parts.next().unwrap_or_default().to_string();
        let n: usize = parts
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|_| Error::data(format!("bad frame count for {id:?}")))?;
        let mut frames = Vec::with_capacity(n);
        for t in 0..n {
            frames.push(crate::imgproc::load_png(&dir.join("clips").join(&id).join(format!("frame{t:03}.png")))?);
        }
        let caption = captions.caption(&id)?;
        out.push(StoredClip { id, frames, caption });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Finetuning
// ---------------------------------------------------------------------------

/// Retrieval accuracy of clip → caption over the deduplicated caption gallery
/// (rank-1): the fraction of clips whose best-scoring gallery caption equals
/// their own.
pub fn clip_caption_r1(
    model: &Model,
    clips: &[MotionClip],
    n_frames: usize,
    average_normalized: bool,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::data("no clips to evaluate"));
    }
    let vocab = Vocab::synthetic();
    let gallery: Vec<String> = clips
        .iter()
        .map(|c| c.caption.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let text = vocab.encode_batch(&gallery, model.cfg.text.context_len)?;
    let txt_embs = crate::model::text::encode_texts(model, &text)?;
    let mut correct = 0usize;
    for clip in clips {
        let vc = VideoClip::from_images(&clip.frames, 1.0)?;
        let emb = encode_video(model, &vc, n_frames, average_normalized)?;
        let scores = txt_embs.dot(&emb);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        if gallery[best] == clip.caption {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

/// Contrastively finetunes a pretrained checkpoint on synthetic motion clips,
/// replacing the image embedding with the frame-averaged video embedding.
/// Zero steps (`total_samples < batch_size`) saves the base model unchanged.
pub fn video_finetune_run(
    cfg: &RunConfig,
    base_ckpt: &Path,
    run_dir: &Path,
) -> Result<StageArtifacts> {
    let base = checkpoint::load(base_ckpt)?;
    let mut params = base.params;
    let vision_cfg = base.cfg.vision.clone();
    let text_cfg = base.cfg.text.clone();
    let vocab = Vocab::synthetic();
    let batch = cfg.video.batch_size;
    if batch == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    if cfg.video.n_frames == 0 {
        return Err(Error::config("n_frames must be positive"));
    }
    let steps = cfg.video.total_samples / batch;

    let clips = gen_motion_clips(
        derive_seed(cfg.seed, "data.clips"),
        cfg.data.n_clips,
        &cfg.data.motion(),
    )?;
    let size = vision_cfg.image_size;

    let lr_sched = LrSchedule {
        base_lr: cfg.video.lr,
        warmup_steps: cfg.video.warmup_steps,
        total_steps: steps,
        final_factor: 1.0,
    };
    let mut opt_state = OptState::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "video.batches"));
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0usize;

    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let mut samples_seen = 0usize;

    for step in 0..steps {
        if pos + batch > order.len() {
            order = (0..clips.len()).collect();
            order.shuffle(&mut order_rng);
            pos = 0;
            if order.len() < batch {
                return Err(Error::data("fewer clips than one batch"));
            }
        }
        let indices = &order[pos..pos + batch];
        pos += batch;

        // Stack the sampled frames of every clip into one [B·n, 3, H, W] batch.
        let n = cfg.video.n_frames;
        let mut frames = Vec::with_capacity(batch * n);
        let mut captions = Vec::with_capacity(batch);
        for &ci in indices {
            let clip = &clips[ci];
            let idx = sample_frames(clip.frames.len(), n)?;
            for t in idx {
                let f = &clip.frames[t];
                let (_, h, w) = f.dim();
                frames.push(if (h, w) == (size, size) { f.clone() } else { resize(f, size, size)? });
            }
            captions.push(clip.caption.as_str());
        }
        let images = normalize_images(&stack_images(&frames)?);
        let text = vocab.encode_batch(&captions, text_cfg.context_len)?;

        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let vis = vision_forward(&mut g, &bound, &vision_cfg, &images, &VisionOpts::default())?;
        let clip_dim = text_cfg.clip_dim;
        let per_clip = g.reshape(vis.pooled, &[batch, n, clip_dim]);
        let video_embs = if cfg.video.average_normalized {
            let normed = g.normalize_last(per_clip, 1e-12);
            let mean = g.mean_axis_keep(normed, 1);
            let flat = g.reshape(mean, &[batch, clip_dim]);
            g.normalize_last(flat, 1e-12)
        } else {
            let mean = g.mean_axis_keep(per_clip, 1);
            let flat = g.reshape(mean, &[batch, clip_dim]);
            g.normalize_last(flat, 1e-12)
        };
        let txt = text_forward(&mut g, &bound, &text_cfg, &text)?;
        let txt_embs = g.normalize_last(txt, 1e-12);
        let log_scale = bound.var(LOGIT_SCALE_NAME);
        let loss = clip_loss_graph(&mut g, video_embs, txt_embs, log_scale);

        let grads = g.backward(loss);
        let grad_map = bound.collect_grads(&grads);
        let lr = lr_sched.lr_at(step);
        let hyper = LambHyper { lr, decay_min_ndim: 2, ..cfg.train.optim };
        lamb_step(&mut params, &grad_map, &mut opt_state, &hyper)?;
        if let Some(arr) = params.get_mut(LOGIT_SCALE_NAME) {
            let v = arr.iter().next().copied().unwrap_or(0.0);
            arr.fill(clamp_logit_scale(v, MAX_LOGIT_SCALE));
        }

        samples_seen += batch;
        if step % cfg.video.log_every.max(1) == 0 || step + 1 == steps {
            metrics.log(&TrainMetric {
                step,
                samples_seen,
                resolution: size,
                clip_loss: g.scalar_value(loss),
                mask_loss: 0.0,
                logit_scale: params
                    .get(LOGIT_SCALE_NAME)
                    .and_then(|a| a.iter().next().copied())
                    .unwrap_or(0.0)
                    .exp(),
                lr,
            })?;
        }
    }

    let final_model = Model {
        cfg: crate::model::ModelConfig { vision: vision_cfg, text: text_cfg },
        params,
    };
    let ckpt_path = run_dir.join("checkpoint.bin");
    checkpoint::save(&ckpt_path, &final_model)?;
    Ok(StageArtifacts { checkpoint: ckpt_path, metrics: metrics_path })
}
