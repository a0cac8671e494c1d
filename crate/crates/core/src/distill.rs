//! Teacher→student distillation: the student minimizes KL divergence from a
//! frozen teacher's image↔text similarity distributions, with the teacher's
//! distribution sharpened by dividing the student's temperature by a
//! configurable factor (factor 0.5 doubles the teacher's logit scale).
//!
//! The teacher is loaded once, never bound trainably, and its parameter hash
//! is asserted unchanged at the end of the run.

use crate::config::{derive_seed, RunConfig};
use crate::error::{Error, Result};
use crate::imgproc::{resize, stack_images, Image};
use crate::losses::{clip_loss_graph, distill_loss_graph, similarity_distributions, teacher_scale};
use crate::metrics::MetricsWriter;
use crate::model::text::text_forward;
use crate::model::text::encode_texts;
use crate::model::vision::{encode_images, vision_forward, VisionOpts};
use crate::model::{checkpoint, Model, LOGIT_SCALE_NAME};
use crate::optim::{lamb_step, LambHyper, LrSchedule, OptState};
use crate::synth::{gen_shapes_dataset, Vocab};
use crate::tensor::Graph;
use crate::train::{StageArtifacts, MAX_LOGIT_SCALE};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

/// One distillation metric record. The first seven fields mirror the
/// pretraining schema (`mask_loss` is always 0 here); `distill_loss` is the
/// trained objective and `agreement` is filled at evaluation points.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DistillMetric {
    pub step: usize,
    pub samples_seen: usize,
    pub resolution: usize,
    /// Student's contrastive loss on the batch (monitored, not trained).
    pub clip_loss: f64,
    pub mask_loss: f64,
    pub logit_scale: f64,
    pub lr: f64,
    /// KL distillation objective.
    pub distill_loss: f64,
    /// Student/teacher argmax-agreement on the held-out set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub agreement: Option<f64>,
}

/// Outputs of a distillation run.
#[derive(Debug, Clone)]
pub struct DistillArtifacts {
    /// Final student checkpoint and metric stream.
    pub stage: StageArtifacts,
    /// Student/teacher argmax-agreement on held-out images at the end.
    pub final_agreement: f64,
}

/// Fraction of rows whose argmax position matches between two equally-shaped
/// score matrices. Ties resolve to the first maximal index in both inputs.
pub fn argmax_agreement(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "score shapes differ");
    assert!(a.nrows() > 0, "empty score matrix");
    let argmax = |row: ndarray::ArrayView1<f64>| -> usize {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    };
    let agree = a
        .rows()
        .into_iter()
        .zip(b.rows())
        .filter(|(ra, rb)| argmax(ra.view()) == argmax(rb.view()))
        .count();
    agree as f64 / a.nrows() as f64
}

/// Resizes raw `[0,1]` images to a model's input size and normalizes them.
fn prepare_images(model: &Model, images: &[Image]) -> Result<Array4<f64>> {
    let size = model.cfg.vision.image_size;
    let mut resized = Vec::with_capacity(images.len());
    for img in images {
        let (_, h, w) = img.dim();
        if (h, w) == (size, size) {
            resized.push(img.clone());
        } else {
            resized.push(resize(img, size, size)?);
        }
    }
    Ok(crate::model::normalize_images(&stack_images(&resized)?))
}

/// Computes student/teacher argmax agreement: every image is scored against
/// the deduplicated caption gallery under each model, and the fraction of
/// images whose best caption matches is returned.
pub fn student_teacher_agreement(
    student: &Model,
    teacher: &Model,
    images: &[Image],
    captions: &[String],
) -> Result<f64> {
    if images.len() != captions.len() || images.is_empty() {
        return Err(Error::data("agreement needs equal, non-empty image/caption lists"));
    }
    let vocab = Vocab::synthetic();
    let gallery: Vec<String> = captions.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    let score = |model: &Model| -> Result<Array2<f64>> {
        let imgs = prepare_images(model, images)?;
        let img_embs = encode_images(model, &imgs)?;
        let text = vocab.encode_batch(&gallery, model.cfg.text.context_len)?;
        let txt_embs = encode_texts(model, &text)?;
        Ok(img_embs.dot(&txt_embs.t()))
    };
    Ok(argmax_agreement(&score(student)?, &score(teacher)?))
}

/// Distills `student_init` toward the frozen `teacher`, writing metrics and
/// the final student checkpoint into `run_dir`.
pub fn distill_run(
    cfg: &RunConfig,
    teacher_ckpt: &Path,
    student_init_ckpt: &Path,
    run_dir: &Path,
) -> Result<DistillArtifacts> {
    if cfg.distill.teacher_temp_factor <= 0.0 {
        return Err(Error::config("teacher_temp_factor must be positive"));
    }
    let teacher = checkpoint::load(teacher_ckpt)?;
    let teacher_hash = teacher.params.content_hash();
    let student = checkpoint::load(student_init_ckpt)?;
    let mut params = student.params;
    let vision_cfg = student.cfg.vision.clone();
    let text_cfg = student.cfg.text.clone();
    let vocab = Vocab::synthetic();
    if vocab.n_ids() > text_cfg.vocab_size {
        return Err(Error::config("student vocabulary too small for the tokenizer"));
    }

    let batch = cfg.distill.batch_size;
    if batch == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let steps = cfg.distill.total_samples / batch;
    if steps == 0 {
        return Err(Error::config("total_samples smaller than one batch"));
    }

    let data = gen_shapes_dataset(
        derive_seed(cfg.seed, "data.train"),
        cfg.data.n_train,
        &cfg.data.train_shapes(),
    )?;
    let eval = gen_shapes_dataset(
        derive_seed(cfg.seed, "data.distill_eval"),
        cfg.data.n_eval,
        &cfg.data.train_shapes(),
    )?;
    let eval_images: Vec<Image> = eval.iter().map(|d| d.image.clone()).collect();
    let eval_captions: Vec<String> = eval.iter().map(|d| d.caption.clone()).collect();

    let lr_sched = LrSchedule {
        base_lr: cfg.distill.lr,
        warmup_steps: cfg.distill.warmup_steps,
        total_steps: steps,
        final_factor: 1.0,
    };
    let mut opt_state = OptState::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "distill.batches"));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "distill.aug"));
    let mut order: Vec<usize> = Vec::new();
    let mut pos = 0usize;

    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics = MetricsWriter::create(&metrics_path)?;
    let resolution = vision_cfg.image_size;
    let mut samples_seen = 0usize;

    for step in 0..steps {
        if pos + batch > order.len() {
            order = (0..data.len()).collect();
            order.shuffle(&mut order_rng);
            pos = 0;
            if order.len() < batch {
                return Err(Error::data("dataset smaller than one batch"));
            }
        }
        let indices = &order[pos..pos + batch];
        pos += batch;

        let mut views = Vec::with_capacity(batch);
        for &i in indices {
            let (img, _) =
                crate::augment::augment(&data[i].image, &cfg.train.aug, &mut aug_rng, resolution)?;
            views.push(img);
        }
        let captions: Vec<&str> = indices.iter().map(|&i| data[i].caption.as_str()).collect();
        let text = vocab.encode_batch(&captions, text_cfg.context_len)?;

        // Teacher sees the exact same views; its distributions sharpen by the
        // temperature factor applied to the student's current scale.
        let student_scale = params
            .get(LOGIT_SCALE_NAME)
            .and_then(|a| a.iter().next().copied())
            .unwrap_or(0.0)
            .exp();
        let t_scale = teacher_scale(student_scale, cfg.distill.teacher_temp_factor);
        let teacher_inputs = prepare_images(&teacher, &views)?;
        let t_img = encode_images(&teacher, &teacher_inputs)?;
        let t_txt = encode_texts(&teacher, &text)?;
        let (teacher_i2t, teacher_t2i) = similarity_distributions(&t_img, &t_txt, t_scale)?;

        let student_inputs = crate::model::normalize_images(&stack_images(&views)?);
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let vis = vision_forward(&mut g, &bound, &vision_cfg, &student_inputs, &VisionOpts::default())?;
        let img_embs = g.normalize_last(vis.pooled, 1e-12);
        let txt = text_forward(&mut g, &bound, &text_cfg, &text)?;
        let txt_embs = g.normalize_last(txt, 1e-12);
        let log_scale = bound.var(LOGIT_SCALE_NAME);
        let (s_i2t, s_t2i) =
            crate::losses::similarity_distributions_graph(&mut g, img_embs, txt_embs, log_scale);
        let loss = distill_loss_graph(&mut g, s_i2t, s_t2i, &teacher_i2t, &teacher_t2i);
        let clip = clip_loss_graph(&mut g, img_embs, txt_embs, log_scale);

        let grads = g.backward(loss);
        let grad_map = bound.collect_grads(&grads);
        let lr = lr_sched.lr_at(step);
        let hyper = LambHyper {
            lr,
            weight_decay: cfg.distill.weight_decay,
            decay_min_ndim: 2,
            ..cfg.train.optim
        };
        lamb_step(&mut params, &grad_map, &mut opt_state, &hyper)?;
        if let Some(arr) = params.get_mut(LOGIT_SCALE_NAME) {
            let v = arr.iter().next().copied().unwrap_or(0.0);
            arr.fill(crate::losses::clamp_logit_scale(v, MAX_LOGIT_SCALE));
        }

        samples_seen += batch;
        let is_last = step + 1 == steps;
        let agreement = if is_last {
            let student_now = Model {
                cfg: crate::model::ModelConfig { vision: vision_cfg.clone(), text: text_cfg.clone() },
                params: params.clone(),
            };
            Some(student_teacher_agreement(&student_now, &teacher, &eval_images, &eval_captions)?)
        } else {
            None
        };
        if step % cfg.distill.log_every.max(1) == 0 || is_last {
            metrics.log(&DistillMetric {
                step,
                samples_seen,
                resolution,
                clip_loss: g.scalar_value(clip),
                mask_loss: 0.0,
                logit_scale: params
                    .get(LOGIT_SCALE_NAME)
                    .and_then(|a| a.iter().next().copied())
                    .unwrap_or(0.0)
                    .exp(),
                lr,
                distill_loss: g.scalar_value(loss),
                agreement,
            })?;
        }
    }

    assert_eq!(
        teacher.params.content_hash(),
        teacher_hash,
        "teacher parameters changed during distillation"
    );

    let final_model = Model {
        cfg: crate::model::ModelConfig { vision: vision_cfg, text: text_cfg },
        params,
    };
    let ckpt_path = run_dir.join("checkpoint.bin");
    checkpoint::save(&ckpt_path, &final_model)?;
    let final_agreement =
        student_teacher_agreement(&final_model, &teacher, &eval_images, &eval_captions)?;
    Ok(DistillArtifacts {
        stage: StageArtifacts { checkpoint: ckpt_path, metrics: metrics_path },
        final_agreement,
    })
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::read_jsonl;
    use crate::model::init_model;
    use ndarray::array;

    #[test]
    fn argmax_agreement_counts_matching_rows() {
        let a = array![[0.9, 0.1], [0.2, 0.8]];
        let b = array![[0.6, 0.4], [0.7, 0.3]];
        assert_eq!(argmax_agreement(&a, &a), 1.0);
        assert_eq!(argmax_agreement(&a, &b), 0.5);
        let c = array![[0.1, 0.9], [0.9, 0.1]];
        assert_eq!(argmax_agreement(&a, &c), 0.0);
    }

    #[test]
    fn distill_reduces_loss_and_leaves_teacher_untouched() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = crate::train::tests::micro_run_config();
        cfg.distill.batch_size = 8;
        cfg.distill.total_samples = 8 * 15;
        cfg.distill.warmup_steps = 2;
        cfg.distill.lr = 5e-3;
        let model_cfg = cfg.model.to_model_config();

        let teacher = init_model(&model_cfg, 100).unwrap();
        let teacher_path = tmp.path().join("teacher.bin");
        checkpoint::save(&teacher_path, &teacher).unwrap();
        let teacher_hash = teacher.params.content_hash();

        let student = init_model(&model_cfg, 200).unwrap();
        let student_path = tmp.path().join("student.bin");
        checkpoint::save(&student_path, &student).unwrap();

        let dir = tmp.path().join("run");
        std::fs::create_dir_all(&dir).unwrap();
        let art = distill_run(&cfg, &teacher_path, &student_path, &dir).unwrap();
        let stream: Vec<DistillMetric> = read_jsonl(&art.stage.metrics).unwrap();
        assert_eq!(stream.len(), 15);
        assert!(
            stream.last().unwrap().distill_loss < stream.first().unwrap().distill_loss,
            "distillation made no progress"
        );
        assert!(stream.iter().take(14).all(|m| m.agreement.is_none()));
        let last_agreement = stream.last().unwrap().agreement.unwrap();
        assert_eq!(last_agreement, art.final_agreement);
        assert!((0.0..=1.0).contains(&art.final_agreement));

        // Teacher untouched on disk as well.
        let teacher_back = checkpoint::load(&teacher_path).unwrap();
        assert_eq!(teacher_back.params.content_hash(), teacher_hash);

        // Student changed and remains loadable.
        let student_out = checkpoint::load(&art.stage.checkpoint).unwrap();
        assert_ne!(student_out.params.content_hash(), student.params.content_hash());

        // Determinism.
        let dir2 = tmp.path().join("run2");
        std::fs::create_dir_all(&dir2).unwrap();
        let art2 = distill_run(&cfg, &teacher_path, &student_path, &dir2).unwrap();
        assert_eq!(
            std::fs::read(&art.stage.metrics).unwrap(),
            std::fs::read(&art2.stage.metrics).unwrap()
        );
    }
}
