//! Zero-shot classification and retrieval.
//!
//! Class embeddings come from prompt ensembles (mean of unit text embeddings,
//! renormalized); classification is cosine argmax. Retrieval ranks the
//! gallery axis of the image–text score matrix, optionally after gallery-
//! softmax score reweighting, and reports recall at 1/5/10. Evaluation can
//! score each image under both a center crop and a non-aspect-preserving
//! squash resize and keep the better result, and strip a uniform border
//! beforehand.

use crate::error::{Error, Result};
use crate::imgproc::{crop, load_png, resize, stack_images, Image};
use crate::model::text::encode_texts;
use crate::model::vision::encode_images;
use crate::model::{normalize_images, Model};
use crate::synth::Vocab;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A list of prompt templates, each with exactly one `{c}` class slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBank {
    templates: Vec<String>,
}

impl PromptBank {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::config("empty prompt bank"));
        }
        for t in &templates {
            if t.matches("{c}").count() != 1 {
                return Err(Error::config(format!(
                    "template {t:?} must contain exactly one {{c}} slot"
                )));
            }
        }
        Ok(Self { templates })
    }

    /// Reads one template per line; blank lines are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from)
                .collect(),
        )
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    /// All templates filled with one class name.
    pub fn fill(&self, class_name: &str) -> Vec<String> {
        self.templates.iter().map(|t| t.replace("{c}", class_name)).collect()
    }
}

fn l2_normalize(v: &mut Array1<f64>) {
    let n = (v.iter().map(|x| x * x).sum::<f64>() + 1e-12).sqrt();
    v.mapv_inplace(|x| x / n);
}

/// One row of unit class embeddings per class: each filled template is
/// encoded, the unit embeddings are averaged, and the mean is renormalized.
pub fn build_classifier(
    model: &Model,
    class_names: &[String],
    bank: &PromptBank,
) -> Result<Array2<f64>> {
    if class_names.is_empty() {
        return Err(Error::config("no class names"));
    }
    let vocab = Vocab::synthetic();
    let dim = model.cfg.text.clip_dim;
    let mut out = Array2::zeros((class_names.len(), dim));
    for (ci, name) in class_names.iter().enumerate() {
        let prompts = bank.fill(name);
        let batch = vocab.encode_batch(&prompts, model.cfg.text.context_len)?;
        let embs = encode_texts(model, &batch)?; // unit rows
        let mut mean = Array1::zeros(dim);
        for row in embs.rows() {
            mean = mean + row;
        }
        mean /= embs.nrows() as f64;
        l2_normalize(&mut mean);
        out.row_mut(ci).assign(&mean);
    }
    Ok(out)
}

/// Cosine-argmax class prediction per image embedding (ties take the first
/// class).
pub fn classify(image_embs: &Array2<f64>, class_matrix: &Array2<f64>) -> Vec<usize> {
    let scores = image_embs.dot(&class_matrix.t());
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Top-1 accuracy of [`classify`] against integer labels.
pub fn classification_accuracy(
    image_embs: &Array2<f64>,
    class_matrix: &Array2<f64>,
    labels: &[u32],
) -> Result<f64> {
    if image_embs.nrows() != labels.len() {
        return Err(Error::shape("embedding/label count mismatch"));
    }
    if labels.is_empty() {
        return Err(Error::data("empty evaluation set"));
    }
    let preds = classify(image_embs, class_matrix);
    let correct = preds.iter().zip(labels).filter(|(p, l)| **p as u32 == **l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Column-wise softmax over the gallery axis (rows): the reweighting factor
/// of the dual-softmax trick. Every column sums to 1.
pub fn gallery_softmax(scores: &Array2<f64>) -> Array2<f64> {
    let (g, q) = scores.dim();
    let mut out = Array2::zeros((g, q));
    for j in 0..q {
        let col = scores.column(j);
        let m = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..g {
            let e = (col[i] - m).exp();
            out[[i, j]] = e;
            z += e;
        }
        for i in 0..g {
            out[[i, j]] /= z;
        }
    }
    out
}

/// Score reweighting `scores * softmax(scores)` with the softmax over the
/// gallery axis (rows); shape is preserved.
pub fn dsl_reweight(scores: &Array2<f64>) -> Array2<f64> {
    scores * &gallery_softmax(scores)
}

/// Fraction of queries whose true gallery item lands in the top `k`:
/// `scores` is `[gallery, queries]`, `truth[q]` the correct gallery row.
/// The rank counts strictly-greater scores, so ties favor the true item.
pub fn recall_at_k(scores: &Array2<f64>, truth: &[usize], k: usize) -> Result<f64> {
    let (g, q) = scores.dim();
    if truth.len() != q {
        return Err(Error::shape("one truth index per query required"));
    }
    if k == 0 || k > g {
        return Err(Error::config(format!("recall k={k} outside 1..={g}")));
    }
    let mut hits = 0usize;
    for (j, &t) in truth.iter().enumerate() {
        if t >= g {
            return Err(Error::data(format!("truth index {t} outside gallery of {g}")));
        }
        let col = scores.column(j);
        let higher = col.iter().filter(|&&v| v > col[t]).count();
        if higher < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / q as f64)
}

/// Recall at 1, 5, and 10.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Recalls {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

/// Both retrieval directions of one evaluation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RetrievalMetrics {
    /// Text gallery ranked per image query.
    pub i2t: Recalls,
    /// Image gallery ranked per text query.
    pub t2i: Recalls,
}

/// Recalls over a `[gallery, queries]` score matrix with the given truth,
/// optionally reweighted first.
pub fn recalls_from_scores(
    scores: &Array2<f64>,
    truth: &[usize],
    use_dsl: bool,
) -> Result<Recalls> {
    let ranked = if use_dsl { dsl_reweight(scores) } else { scores.clone() };
    Ok(Recalls {
        r1: recall_at_k(&ranked, truth, 1)?,
        r5: recall_at_k(&ranked, truth, 5)?,
        r10: recall_at_k(&ranked, truth, 10)?,
    })
}

/// Identity-paired retrieval in both directions. The same reweighting rule
/// applies to each direction by transposing, so the softmax always runs over
/// the gallery being ranked.
pub fn retrieve(
    image_embs: &Array2<f64>,
    text_embs: &Array2<f64>,
    use_dsl: bool,
) -> Result<RetrievalMetrics> {
    if image_embs.nrows() != text_embs.nrows() {
        return Err(Error::shape("identity pairing requires equal counts"));
    }
    let s = image_embs.dot(&text_embs.t()); // [images, texts]
    let truth: Vec<usize> = (0..s.nrows()).collect();
    let i2t = recalls_from_scores(&s.t().to_owned(), &truth, use_dsl)?;
    let t2i = recalls_from_scores(&s, &truth, use_dsl)?;
    Ok(RetrievalMetrics { i2t, t2i })
}

/// Input transformation used at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTransform {
    /// Aspect-preserving resize of the short side, then a centered crop.
    CenterCrop,
    /// Non-aspect-preserving resize straight to the target square.
    Squash,
}

/// Applies one evaluation transform, producing a `resolution × resolution`
/// image.
pub fn apply_transform(img: &Image, mode: EvalTransform, resolution: usize) -> Result<Image> {
    let (_, h, w) = img.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape("empty image"));
    }
    match mode {
        EvalTransform::Squash => resize(img, resolution, resolution),
        EvalTransform::CenterCrop => {
            let scale = resolution as f64 / h.min(w) as f64;
            let nh = ((h as f64 * scale).round() as usize).max(resolution);
            let nw = ((w as f64 * scale).round() as usize).max(resolution);
            let scaled = resize(img, nh, nw)?;
            let top = (nh - resolution) / 2;
            let left = (nw - resolution) / 2;
            crop(&scaled, top, left, resolution, resolution)
        }
    }
}

/// Runs the metric under both transforms and keeps the better score.
pub fn eval_with_transforms<F>(
    images: &[Image],
    resolution: usize,
    mut metric: F,
) -> Result<f64>
where
    F: FnMut(&[Image]) -> Result<f64>,
{
    let mut best = f64::NEG_INFINITY;
    for mode in [EvalTransform::CenterCrop, EvalTransform::Squash] {
        let transformed: Vec<Image> = images
            .iter()
            .map(|img| apply_transform(img, mode, resolution))
            .collect::<Result<_>>()?;
        best = best.max(metric(&transformed)?);
    }
    Ok(best)
}

/// Removes a uniform border, keeping the interior.
pub fn strip_border(img: &Image, border_px: usize) -> Result<Image> {
    if border_px == 0 {
        return Ok(img.clone());
    }
    let (_, h, w) = img.dim();
    if 2 * border_px >= h.min(w) {
        return Err(Error::shape(format!(
            "stripping {border_px}px border from a {h}x{w} image leaves nothing"
        )));
    }
    crop(img, border_px, border_px, h - 2 * border_px, w - 2 * border_px)
}

/// Unit image embeddings for a possibly mixed-size image list, resizing each
/// to the encoder's resolution.
pub fn embed_images(model: &Model, images: &[Image]) -> Result<Array2<f64>> {
    let size = model.cfg.vision.image_size;
    let resized: Vec<Image> = images
        .iter()
        .map(|img| {
            let (_, h, w) = img.dim();
            if (h, w) == (size, size) {
                Ok(img.clone())
            } else {
                resize(img, size, size)
            }
        })
        .collect::<Result<_>>()?;
    encode_images(model, &normalize_images(&stack_images(&resized)?))
}

/// Unit text embeddings for a caption list.
pub fn embed_texts(model: &Model, captions: &[String]) -> Result<Array2<f64>> {
    let vocab = Vocab::synthetic();
    let batch = vocab.encode_batch(captions, model.cfg.text.context_len)?;
    encode_texts(model, &batch)
}

/// Loads a class-folder dataset: `dir/<class name>/*.png`. Returns images,
/// labels, and the sorted class names the labels index into.
pub fn load_class_folders(dir: &Path) -> Result<(Vec<Image>, Vec<u32>, Vec<String>)> {
    let mut class_names: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            class_names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    class_names.sort();
    if class_names.is_empty() {
        return Err(Error::data(format!("no class folders under {}", dir.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (ci, name) in class_names.iter().enumerate() {
        let mut files: Vec<_> = std::fs::read_dir(dir.join(name))?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        files.sort();
        for f in files {
            images.push(load_png(&f)?);
            labels.push(ci as u32);
        }
    }
    if images.is_empty() {
        return Err(Error::data("class folders contain no png images"));
    }
    Ok((images, labels, class_names))
}

/// Loads a retrieval dataset from a TSV of `relative/path.png\tcaption`
/// rows; image paths resolve against the TSV's directory.
pub fn load_retrieval_tsv(tsv: &Path) -> Result<(Vec<Image>, Vec<String>)> {
    let base = tsv.parent().unwrap_or_else(|| Path::new("."));
    let text = std::fs::read_to_string(tsv)?;
    let mut images = Vec::new();
    let mut captions = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (path, caption) = line.split_once('\t').ok_or_else(|| {
            Error::data(format!("{}:{}: expected path\\tcaption", tsv.display(), ln + 1))
        })?;
        images.push(load_png(&base.join(path))?);
        captions.push(caption.to_string());
    }
    if images.is_empty() {
        return Err(Error::data("empty retrieval list"));
    }
    Ok((images, captions))
}
