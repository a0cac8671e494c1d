//! Procedural synthetic datasets: captioned shape images, segmentation label
//! maps, and moving-shape video clips with motion captions.
//!
//! Everything here is deterministic given a seed. Images are rendered at a
//! small fixed size with anti-aliasing off so regeneration is bit-exact.
//! Captions are built from fixed templates that are uniquely decodable back to
//! the attribute tuples they describe, so downstream retrieval and
//! classification tasks have a well-defined optimum.
//!
//! A small word-level [`Vocab`] turns captions into [`TextBatch`] rows for the
//! text encoder (id 0 = padding, id 1 = end-of-sequence).

use crate::error::{Error, Result};
use crate::imgproc::Image;
use crate::model::text::TextBatch;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Color attribute names, indexed by color id.
pub const COLORS: [&str; 3] = ["red", "green", "blue"];
/// Shape attribute names, indexed by shape id.
pub const SHAPES: [&str; 2] = ["circle", "square"];
/// Motion attribute names, indexed by motion id. Index 0 is the static class.
pub const MOTIONS: [&str; 5] = ["static", "left", "right", "up", "down"];

/// RGB values for each color id.
const COLOR_RGB: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Number of (color, shape) classes.
pub const N_CLASSES: usize = COLORS.len() * SHAPES.len();

/// Class id for a (color, shape) pair.
pub fn class_id(color: usize, shape: usize) -> usize {
    color * SHAPES.len() + shape
}

/// Human-readable class name, e.g. `"red circle"`.
pub fn class_name(class: usize) -> String {
    let color = class / SHAPES.len();
    let shape = class % SHAPES.len();
    format!("{} {}", COLORS[color], SHAPES[shape])
}

/// All class names in class-id order.
pub fn all_class_names() -> Vec<String> {
    (0..N_CLASSES).map(class_name).collect()
}

/// One rendered shape: attributes plus geometry in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    /// Color id (index into [`COLORS`]).
    pub color: usize,
    /// Shape id (index into [`SHAPES`]).
    pub shape: usize,
    /// Center x in pixels.
    pub cx: f64,
    /// Center y in pixels.
    pub cy: f64,
    /// Radius (circle) or half side length (square) in pixels.
    pub size: f64,
}

impl ShapeSpec {
    /// Class id of this shape's (color, shape) pair.
    pub fn class_id(&self) -> usize {
        class_id(self.color, self.shape)
    }

    /// Quadrant name ("top left", "bottom right", ...) of the center within an
    /// `image_size`-pixel frame.
    pub fn quadrant(&self, image_size: usize) -> String {
        let half = image_size as f64 / 2.0;
        let vert = if self.cy < half { "top" } else { "bottom" };
        let horiz = if self.cx < half { "left" } else { "right" };
        format!("{vert} {horiz}")
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        match self.shape {
            0 => {
                let dx = px - self.cx;
                let dy = py - self.cy;
                dx * dx + dy * dy <= self.size * self.size
            }
            _ => (px - self.cx).abs() <= self.size && (py - self.cy).abs() <= self.size,
        }
    }
}

/// One generated sample: image, caption, per-pixel labels, and the shape list.
#[derive(Debug, Clone)]
pub struct SynthImage {
    /// Rendered image, `[3, S, S]` in `[0, 1]`.
    pub image: Image,
    /// Template caption describing every shape in draw order.
    pub caption: String,
    /// Shapes in draw order (later shapes occlude earlier ones).
    pub shapes: Vec<ShapeSpec>,
    /// Per-pixel class labels: 0 = background, `class_id + 1` inside a shape.
    pub seg_class: Array2<usize>,
    /// Per-pixel instance labels: 0 = background, `i + 1` for draw-order index `i`.
    pub seg_instance: Array2<usize>,
}

impl SynthImage {
    /// Class id when the image contains exactly one shape, else `None`.
    pub fn single_class(&self) -> Option<usize> {
        if self.shapes.len() == 1 {
            Some(self.shapes[0].class_id())
        } else {
            None
        }
    }
}

/// Configuration for [`gen_shapes_dataset`].
#[derive(Debug, Clone)]
pub struct ShapesConfig {
    /// Square image side in pixels.
    pub image_size: usize,
    /// Minimum shapes per image (inclusive).
    pub min_shapes: usize,
    /// Maximum shapes per image (inclusive).
    pub max_shapes: usize,
    /// `(color, shape)` combinations excluded from (or, with `holdout_only`,
    /// exclusively drawn from) the sampling pool.
    pub holdout: Vec<(usize, usize)>,
    /// When true, sample only from `holdout` instead of excluding it.
    pub holdout_only: bool,
    /// Probability that a shape's caption clause mentions its quadrant.
    pub position_prob: f64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_shapes: 1,
            max_shapes: 3,
            holdout: default_holdout(),
            holdout_only: false,
            position_prob: 0.5,
        }
    }
}

/// Default held-out (color, shape) combinations: blue square and red circle.
/// Training never sees these pairs, so classifying them exercises
/// compositional generalization over color and shape words.
pub fn default_holdout() -> Vec<(usize, usize)> {
    vec![(2, 1), (0, 0)]
}

fn per_index_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Renders `shapes` over a uniform `background` gray, returning the image and
/// both label maps. A pixel belongs to a shape when its center lies inside the
/// shape boundary; no anti-aliasing, so regeneration is bit-exact and the
/// label maps agree exactly with the rendered colors.
pub fn render_shapes(
    image_size: usize,
    background: f64,
    shapes: &[ShapeSpec],
) -> (Image, Array2<usize>, Array2<usize>) {
    let mut img = Array3::from_elem((3, image_size, image_size), background);
    let mut seg_class = Array2::zeros((image_size, image_size));
    let mut seg_instance = Array2::zeros((image_size, image_size));
    for y in 0..image_size {
        for x in 0..image_size {
            let px = x as f64 + 0.5;
            let py = y as f64 + 0.5;
            for (i, s) in shapes.iter().enumerate() {
                if s.contains(px, py) {
                    for c in 0..3 {
                        img[[c, y, x]] = COLOR_RGB[s.color][c];
                    }
                    seg_class[[y, x]] = s.class_id() + 1;
                    seg_instance[[y, x]] = i + 1;
                }
            }
        }
    }
    (img, seg_class, seg_instance)
}

fn shape_clause(s: &ShapeSpec, image_size: usize, with_position: bool) -> String {
    let base = format!("a {} {}", COLORS[s.color], SHAPES[s.shape]);
    if with_position {
        format!("{} in the {}", base, s.quadrant(image_size))
    } else {
        base
    }
}

/// Generates `n` captioned shape images. Each image carries 1–3 colored shapes
/// (bounds from the config), a caption listing every shape in draw order, and
/// pixel-level class/instance label maps. Per-index seeding makes the i-th
/// sample independent of `n`.
pub fn gen_shapes_dataset(seed: u64, n: usize, cfg: &ShapesConfig) -> Result<Vec<SynthImage>> {
    if n == 0 {
        return Err(Error::data("gen_shapes_dataset: n must be positive"));
    }
    if cfg.min_shapes == 0 || cfg.min_shapes > cfg.max_shapes {
        return Err(Error::config(format!(
            "shape count bounds invalid: min {} max {}",
            cfg.min_shapes, cfg.max_shapes
        )));
    }
    if cfg.image_size < 8 {
        return Err(Error::config("image_size must be at least 8"));
    }
    let pool = combo_pool(cfg)?;
    let s = cfg.image_size as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = per_index_rng(seed, i as u64);
        let background = rng.gen_range(0.10..0.30);
        let k = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
        let mut shapes = Vec::with_capacity(k);
        let mut clauses = Vec::with_capacity(k);
        for _ in 0..k {
            let (color, shape) = pool[rng.gen_range(0..pool.len())];
            let size = rng.gen_range(0.14..0.24) * s;
            let cx = rng.gen_range(size..(s - size));
            let cy = rng.gen_range(size..(s - size));
            let spec = ShapeSpec { color, shape, cx, cy, size };
            let with_position = rng.gen_bool(cfg.position_prob);
            clauses.push(shape_clause(&spec, cfg.image_size, with_position));
            shapes.push(spec);
        }
        let (image, seg_class, seg_instance) = render_shapes(cfg.image_size, background, &shapes);
        let caption = format!("a photo of {}", clauses.join(" and "));
        out.push(SynthImage { image, caption, shapes, seg_class, seg_instance });
    }
    Ok(out)
}

fn combo_pool(cfg: &ShapesConfig) -> Result<Vec<(usize, usize)>> {
    let all: Vec<(usize, usize)> = (0..COLORS.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |sh| (c, sh)))
        .collect();
    for &(c, sh) in &cfg.holdout {
        if c >= COLORS.len() || sh >= SHAPES.len() {
            return Err(Error::config(format!("holdout pair ({c}, {sh}) out of range")));
        }
    }
    let pool: Vec<(usize, usize)> = if cfg.holdout_only {
        all.into_iter().filter(|p| cfg.holdout.contains(p)).collect()
    } else {
        all.into_iter().filter(|p| !cfg.holdout.contains(p)).collect()
    };
    if pool.is_empty() {
        return Err(Error::config("holdout configuration leaves no (color, shape) pairs"));
    }
    Ok(pool)
}

/// Parses a caption produced by [`gen_shapes_dataset`] back into its
/// per-shape attribute tuples `(color, shape, quadrant)`. Returns an error on
/// any caption the templates cannot produce; the templates are bijective, so
/// parse-then-format round-trips exactly.
pub fn parse_shapes_caption(
    caption: &str,
) -> Result<Vec<(usize, usize, Option<String>)>> {
    let rest = caption
        .strip_prefix("a photo of ")
        .ok_or_else(|| Error::data(format!("caption missing prefix: {caption}")))?;
    let mut out = Vec::new();
    for clause in rest.split(" and ") {
        let body = clause
            .strip_prefix("a ")
            .ok_or_else(|| Error::data(format!("bad clause: {clause}")))?;
        let (attrs, quadrant) = match body.split_once(" in the ") {
            Some((a, q)) => (a, Some(q.to_string())),
            None => (body, None),
        };
        let (color_word, shape_word) = attrs
            .split_once(' ')
            .ok_or_else(|| Error::data(format!("bad attributes: {attrs}")))?;
        let color = COLORS
            .iter()
            .position(|w| *w == color_word)
            .ok_or_else(|| Error::data(format!("unknown color: {color_word}")))?;
        let shape = SHAPES
            .iter()
            .position(|w| *w == shape_word)
            .ok_or_else(|| Error::data(format!("unknown shape: {shape_word}")))?;
        out.push((color, shape, quadrant));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Motion clips
// ---------------------------------------------------------------------------

/// Attribute tuple of a motion clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MotionSpec {
    /// Color id.
    pub color: usize,
    /// Shape id.
    pub shape: usize,
    /// Motion id (index into [`MOTIONS`]; 0 = static).
    pub motion: usize,
}

/// One generated video clip: frames, caption, attributes, and the ground-truth
/// center trajectory in pixels.
#[derive(Debug, Clone)]
pub struct MotionClip {
    /// Frames in temporal order, each `[3, S, S]`.
    pub frames: Vec<Image>,
    /// Motion caption, e.g. `"a red circle moving left"`.
    pub caption: String,
    /// Attribute tuple.
    pub spec: MotionSpec,
    /// Shape center per frame, `(cx, cy)` in pixels.
    pub centers: Vec<(f64, f64)>,
}

/// Configuration for [`gen_motion_clips`].
#[derive(Debug, Clone)]
pub struct MotionConfig {
    /// Square frame side in pixels.
    pub image_size: usize,
    /// Frames per clip; must be at least 2.
    pub n_frames: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self { image_size: 64, n_frames: 8 }
    }
}

/// Caption template for a motion attribute tuple. Static clips use
/// `"a static {color} {shape}"`; moving clips use
/// `"a {color} {shape} moving {direction}"`. The two forms share no template,
/// so captions decode uniquely.
pub fn motion_caption(spec: &MotionSpec) -> String {
    let color = COLORS[spec.color];
    let shape = SHAPES[spec.shape];
    if spec.motion == 0 {
        format!("a static {color} {shape}")
    } else {
        format!("a {color} {shape} moving {}", MOTIONS[spec.motion])
    }
}

/// Parses a motion caption back to its attribute tuple.
pub fn parse_motion_caption(caption: &str) -> Result<MotionSpec> {
    let find_color_shape = |attrs: &str| -> Result<(usize, usize)> {
        let (cw, sw) = attrs
            .split_once(' ')
            .ok_or_else(|| Error::data(format!("bad attributes: {attrs}")))?;
        let color = COLORS
            .iter()
            .position(|w| *w == cw)
            .ok_or_else(|| Error::data(format!("unknown color: {cw}")))?;
        let shape = SHAPES
            .iter()
            .position(|w| *w == sw)
            .ok_or_else(|| Error::data(format!("unknown shape: {sw}")))?;
        Ok((color, shape))
    };
    if let Some(rest) = caption.strip_prefix("a static ") {
        let (color, shape) = find_color_shape(rest)?;
        return Ok(MotionSpec { color, shape, motion: 0 });
    }
    let rest = caption
        .strip_prefix("a ")
        .ok_or_else(|| Error::data(format!("bad caption: {caption}")))?;
    let (attrs, dir) = rest
        .split_once(" moving ")
        .ok_or_else(|| Error::data(format!("bad caption: {caption}")))?;
    let (color, shape) = find_color_shape(attrs)?;
    let motion = MOTIONS
        .iter()
        .position(|w| *w == dir)
        .ok_or_else(|| Error::data(format!("unknown direction: {dir}")))?;
    if motion == 0 {
        return Err(Error::data("\"moving static\" is not a valid caption"));
    }
    Ok(MotionSpec { color, shape, motion })
}

/// All 30 motion attribute tuples in a fixed order (motion-major).
pub fn all_motion_specs() -> Vec<MotionSpec> {
    let mut out = Vec::new();
    for motion in 0..MOTIONS.len() {
        for color in 0..COLORS.len() {
            for shape in 0..SHAPES.len() {
                out.push(MotionSpec { color, shape, motion });
            }
        }
    }
    out
}

/// Generates `n` moving-shape clips. Attribute tuples cycle through all
/// (motion, color, shape) combinations so every class appears; geometry is
/// randomized per clip with per-index seeding.
///
/// Trajectories are direction-biased: a shape "moving left" both travels left
/// and ends in the left half, so direction remains recoverable from
/// order-invariant (time-averaged) features as well as from frame differences.
/// Static clips sit near the center, making motion words discriminative.
pub fn gen_motion_clips(seed: u64, n: usize, cfg: &MotionConfig) -> Result<Vec<MotionClip>> {
    if n == 0 {
        return Err(Error::data("gen_motion_clips: n must be positive"));
    }
    if cfg.n_frames < 2 {
        return Err(Error::config("n_frames must be at least 2"));
    }
    if cfg.image_size < 16 {
        return Err(Error::config("image_size must be at least 16"));
    }
    let specs = all_motion_specs();
    let s = cfg.image_size as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Offset the index stream so shape images and clips with the same
        // root seed do not share random draws.
        let mut rng = per_index_rng(seed ^ 0x4d4f_5449_4f4e, i as u64);
        let spec = specs[i % specs.len()];
        let background = rng.gen_range(0.10..0.30);
        let size = rng.gen_range(0.08..0.12) * s;
        // Start/end in unit coordinates; direction-biased travel of 0.4.
        let (x0, y0, x1, y1) = match spec.motion {
            0 => {
                let x = rng.gen_range(0.30..0.70);
                let y = rng.gen_range(0.30..0.70);
                (x, y, x, y)
            }
            1 => {
                let x = rng.gen_range(0.55..0.65);
                let y = rng.gen_range(0.30..0.70);
                (x, y, x - 0.40, y)
            }
            2 => {
                let x = rng.gen_range(0.35..0.45);
                let y = rng.gen_range(0.30..0.70);
                (x, y, x + 0.40, y)
            }
            3 => {
                let x = rng.gen_range(0.30..0.70);
                let y = rng.gen_range(0.55..0.65);
                (x, y, x, y - 0.40)
            }
            _ => {
                let x = rng.gen_range(0.30..0.70);
                let y = rng.gen_range(0.35..0.45);
                (x, y, x, y + 0.40)
            }
        };
        let mut frames = Vec::with_capacity(cfg.n_frames);
        let mut centers = Vec::with_capacity(cfg.n_frames);
        for t in 0..cfg.n_frames {
            let a = t as f64 / (cfg.n_frames - 1) as f64;
            let cx = (x0 + (x1 - x0) * a) * s;
            let cy = (y0 + (y1 - y0) * a) * s;
            let shape = ShapeSpec { color: spec.color, shape: spec.shape, cx, cy, size };
            let (frame, _, _) = render_shapes(cfg.image_size, background, &[shape]);
            frames.push(frame);
            centers.push((cx, cy));
        }
        out.push(MotionClip { frames, caption: motion_caption(&spec), spec, centers });
    }
    Ok(out)
}

/// Centroid of the non-background pixels of a frame rendered over a uniform
/// background, in pixel coordinates. Returns `None` for a uniform frame.
/// Used as the tracking oracle: frame-to-frame centroid differences recover
/// the motion direction.
pub fn frame_centroid(frame: &Image) -> Option<(f64, f64)> {
    let (_, h, w) = frame.dim();
    let bg = [frame[[0, 0, 0]], frame[[1, 0, 0]], frame[[2, 0, 0]]];
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let differs = (0..3).any(|c| (frame[[c, y, x]] - bg[c]).abs() > 1e-9);
            if differs {
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                count += 1;
            }
        }
    }
    if count == 0 {
        None
    } else {
        Some((sx / count as f64, sy / count as f64))
    }
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

/// Word-level tokenizer over the fixed synthetic vocabulary.
///
/// Id 0 is padding, id 1 is the end-of-sequence marker appended to every
/// encoded caption; words start at id 2 in a fixed order, so ids are stable
/// across runs and machines.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: BTreeMap<String, usize>,
    n_ids: usize,
}

/// Padding token id.
pub const PAD_ID: usize = 0;
/// End-of-sequence token id.
pub const EOS_ID: usize = 1;

/// Every word any synthetic caption or prompt template can contain.
const VOCAB_WORDS: [&str; 23] = [
    "a", "an", "photo", "image", "of", "the", "in", "on", "and", "red", "green", "blue",
    "circle", "square", "top", "bottom", "left", "right", "center", "static", "moving",
    "up", "down",
];

impl Vocab {
    /// The fixed synthetic vocabulary.
    pub fn synthetic() -> Self {
        let mut words = BTreeMap::new();
        for (i, w) in VOCAB_WORDS.iter().enumerate() {
            words.insert((*w).to_string(), i + 2);
        }
        Self { words, n_ids: VOCAB_WORDS.len() + 2 }
    }

    /// Total number of token ids (padding and end-of-sequence included); the
    /// text encoder's vocabulary size must be at least this.
    pub fn n_ids(&self) -> usize {
        self.n_ids
    }

    /// Id of a single word.
    pub fn word_id(&self, word: &str) -> Result<usize> {
        self.words
            .get(word)
            .copied()
            .ok_or_else(|| Error::data(format!("word not in vocabulary: {word:?}")))
    }

    /// Encodes one lowercase whitespace-separated caption into ids followed by
    /// the end-of-sequence token, padded to `context_len`. Returns the ids and
    /// the end-of-sequence position.
    pub fn encode(&self, text: &str, context_len: usize) -> Result<(Vec<usize>, usize)> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            ids.push(self.word_id(&word.to_lowercase())?);
        }
        if ids.len() + 1 > context_len {
            return Err(Error::data(format!(
                "caption needs {} tokens but context length is {context_len}: {text:?}",
                ids.len() + 1
            )));
        }
        let eos_pos = ids.len();
        ids.push(EOS_ID);
        ids.resize(context_len, PAD_ID);
        Ok((ids, eos_pos))
    }

    /// Encodes a batch of captions into a [`TextBatch`].
    pub fn encode_batch<S: AsRef<str>>(
        &self,
        texts: &[S],
        context_len: usize,
    ) -> Result<TextBatch> {
        if texts.is_empty() {
            return Err(Error::data("encode_batch: empty caption list"));
        }
        let mut token_ids = Array2::zeros((texts.len(), context_len));
        let mut eos_positions = Vec::with_capacity(texts.len());
        for (row, text) in texts.iter().enumerate() {
            let (ids, eos) = self.encode(text.as_ref(), context_len)?;
            for (col, id) in ids.into_iter().enumerate() {
                token_ids[[row, col]] = id;
            }
            eos_positions.push(eos);
        }
        Ok(TextBatch { token_ids, eos_positions })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_shape_cfg(image_size: usize) -> ShapesConfig {
        ShapesConfig {
            image_size,
            min_shapes: 1,
            max_shapes: 1,
            holdout: vec![],
            holdout_only: false,
            position_prob: 0.5,
        }
    }

    #[test]
    fn shapes_dataset_is_deterministic_and_prefix_stable() {
        let cfg = ShapesConfig::default();
        let a = gen_shapes_dataset(7, 6, &cfg).unwrap();
        let b = gen_shapes_dataset(7, 6, &cfg).unwrap();
        let longer = gen_shapes_dataset(7, 12, &cfg).unwrap();
        for i in 0..6 {
            assert_eq!(a[i].image, b[i].image);
            assert_eq!(a[i].caption, b[i].caption);
            assert_eq!(a[i].seg_class, b[i].seg_class);
            assert_eq!(a[i].image, longer[i].image, "sample {i} depends on n");
        }
        let other = gen_shapes_dataset(8, 6, &cfg).unwrap();
        assert!((0..6).any(|i| a[i].image != other[i].image));
    }

    #[test]
    fn caption_mentions_attributes_and_round_trips() {
        let cfg = ShapesConfig::default();
        let data = gen_shapes_dataset(3, 40, &cfg).unwrap();
        for sample in &data {
            let parsed = parse_shapes_caption(&sample.caption).unwrap();
            assert_eq!(parsed.len(), sample.shapes.len());
            for (p, s) in parsed.iter().zip(&sample.shapes) {
                assert_eq!(p.0, s.color);
                assert_eq!(p.1, s.shape);
                if let Some(q) = &p.2 {
                    assert_eq!(*q, s.quadrant(cfg.image_size));
                }
            }
            for s in &sample.shapes {
                assert!(sample.caption.contains(COLORS[s.color]));
                assert!(sample.caption.contains(SHAPES[s.shape]));
            }
        }
    }

    #[test]
    fn attribute_marginals_uniform_over_10k() {
        let cfg = single_shape_cfg(16);
        let data = gen_shapes_dataset(11, 10_000, &cfg).unwrap();
        let n = data.len() as f64;
        let mut color_counts = [0usize; 3];
        let mut shape_counts = [0usize; 2];
        for sample in &data {
            color_counts[sample.shapes[0].color] += 1;
            shape_counts[sample.shapes[0].shape] += 1;
        }
        let sigma3_color = 3.0 * (n * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for &c in &color_counts {
            assert!(
                (c as f64 - n / 3.0).abs() <= sigma3_color,
                "color counts {color_counts:?} outside 3 sigma"
            );
        }
        let sigma3_shape = 3.0 * (n * 0.25).sqrt();
        for &c in &shape_counts {
            assert!(
                (c as f64 - n / 2.0).abs() <= sigma3_shape,
                "shape counts {shape_counts:?} outside 3 sigma"
            );
        }
    }

    #[test]
    fn holdout_excludes_and_holdout_only_restricts() {
        let holdout = default_holdout();
        let mut train_cfg = single_shape_cfg(16);
        train_cfg.holdout = holdout.clone();
        let train = gen_shapes_dataset(5, 300, &train_cfg).unwrap();
        for sample in &train {
            let pair = (sample.shapes[0].color, sample.shapes[0].shape);
            assert!(!holdout.contains(&pair), "held-out pair {pair:?} in training data");
        }
        let mut eval_cfg = train_cfg.clone();
        eval_cfg.holdout_only = true;
        let eval = gen_shapes_dataset(6, 100, &eval_cfg).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for sample in &eval {
            let pair = (sample.shapes[0].color, sample.shapes[0].shape);
            assert!(holdout.contains(&pair));
            seen.insert(pair);
        }
        assert_eq!(seen.len(), holdout.len(), "both held-out pairs should appear");
    }

    #[test]
    fn labels_agree_with_rendered_pixels() {
        let cfg = ShapesConfig::default();
        let data = gen_shapes_dataset(21, 10, &cfg).unwrap();
        for sample in &data {
            let (_, h, w) = sample.image.dim();
            // Background is gray (all channels equal, < 0.3); shape colors are
            // saturated. A pixel is labeled iff it is not background.
            for y in 0..h {
                for x in 0..w {
                    let px = [
                        sample.image[[0, y, x]],
                        sample.image[[1, y, x]],
                        sample.image[[2, y, x]],
                    ];
                    let is_bg = px[0] == px[1] && px[1] == px[2];
                    let labeled = sample.seg_class[[y, x]] != 0;
                    assert_eq!(!is_bg, labeled, "pixel ({y},{x}) label/color mismatch");
                    assert_eq!(labeled, sample.seg_instance[[y, x]] != 0);
                    if labeled {
                        let inst = sample.seg_instance[[y, x]] - 1;
                        assert_eq!(
                            sample.seg_class[[y, x]] - 1,
                            sample.shapes[inst].class_id()
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_empty_and_bad_configs() {
        assert!(gen_shapes_dataset(0, 0, &ShapesConfig::default()).is_err());
        let mut bad = ShapesConfig::default();
        bad.min_shapes = 3;
        bad.max_shapes = 1;
        assert!(gen_shapes_dataset(0, 1, &bad).is_err());
        let mut all_held = single_shape_cfg(16);
        all_held.holdout = (0..3)
            .flat_map(|c| (0..2).map(move |s| (c, s)))
            .collect();
        assert!(gen_shapes_dataset(0, 1, &all_held).is_err());
        let mut clips_bad = MotionConfig::default();
        clips_bad.n_frames = 1;
        assert!(gen_motion_clips(0, 1, &clips_bad).is_err());
    }

    #[test]
    fn motion_clips_deterministic_and_static_caption_lacks_motion_verbs() {
        let cfg = MotionConfig { image_size: 32, n_frames: 4 };
        let a = gen_motion_clips(9, 12, &cfg).unwrap();
        let b = gen_motion_clips(9, 12, &cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.caption, y.caption);
            for (fx, fy) in x.frames.iter().zip(&y.frames) {
                assert_eq!(fx, fy);
            }
        }
        let mut saw_static = false;
        for clip in &a {
            if clip.spec.motion == 0 {
                saw_static = true;
                assert!(clip.caption.contains("static"));
                assert!(!clip.caption.contains("moving"));
                for frame in &clip.frames[1..] {
                    assert_eq!(*frame, clip.frames[0], "static clip frames must be identical");
                }
            } else {
                assert!(clip.caption.contains("moving"));
            }
            assert_eq!(parse_motion_caption(&clip.caption).unwrap(), clip.spec);
        }
        assert!(saw_static);
    }

    #[test]
    fn centroid_oracle_recovers_motion_direction() {
        let cfg = MotionConfig { image_size: 48, n_frames: 6 };
        let clips = gen_motion_clips(17, 30, &cfg).unwrap();
        let s = cfg.image_size as f64;
        for clip in &clips {
            let first = frame_centroid(&clip.frames[0]).expect("shape visible");
            let last = frame_centroid(clip.frames.last().unwrap()).expect("shape visible");
            let dx = last.0 - first.0;
            let dy = last.1 - first.1;
            // Pixel-center quantization keeps the centroid within a pixel of
            // the true center; travel is 0.4 of the frame, far above that.
            let travel = 0.4 * s;
            match clip.spec.motion {
                0 => {
                    assert!(dx.abs() < 1.5 && dy.abs() < 1.5, "static clip drifted");
                }
                1 => assert!(dx < -0.8 * travel && dy.abs() < 1.5, "left clip: dx {dx}"),
                2 => assert!(dx > 0.8 * travel && dy.abs() < 1.5, "right clip: dx {dx}"),
                3 => assert!(dy < -0.8 * travel && dx.abs() < 1.5, "up clip: dy {dy}"),
                _ => assert!(dy > 0.8 * travel && dx.abs() < 1.5, "down clip: dy {dy}"),
            }
            // Oracle centroids track the ground-truth trajectory.
            for (t, frame) in clip.frames.iter().enumerate() {
                let (cx, cy) = frame_centroid(frame).unwrap();
                assert!((cx - clip.centers[t].0).abs() < 1.5);
                assert!((cy - clip.centers[t].1).abs() < 1.5);
            }
        }
    }

    #[test]
    fn direction_biased_trajectories_separate_time_averages() {
        // The mean center of "moving left" clips lies in the left half and of
        // "moving right" clips in the right half, so direction survives
        // order-invariant averaging over frames.
        let cfg = MotionConfig { image_size: 32, n_frames: 5 };
        let clips = gen_motion_clips(23, 60, &cfg).unwrap();
        let half = cfg.image_size as f64 / 2.0;
        for clip in &clips {
            let mean_x: f64 =
                clip.centers.iter().map(|c| c.0).sum::<f64>() / clip.centers.len() as f64;
            let mean_y: f64 =
                clip.centers.iter().map(|c| c.1).sum::<f64>() / clip.centers.len() as f64;
            match clip.spec.motion {
                1 => assert!(mean_x < half),
                2 => assert!(mean_x > half),
                3 => assert!(mean_y < half),
                4 => assert!(mean_y > half),
                _ => {}
            }
        }
    }

    #[test]
    fn vocab_encodes_captions_with_eos_and_padding() {
        let vocab = Vocab::synthetic();
        let (ids, eos) = vocab.encode("a red circle", 8).unwrap();
        assert_eq!(ids.len(), 8);
        assert_eq!(eos, 3);
        assert_eq!(ids[3], EOS_ID);
        assert!(ids[4..].iter().all(|&i| i == PAD_ID));
        assert_eq!(ids[0], vocab.word_id("a").unwrap());
        assert_eq!(ids[1], vocab.word_id("red").unwrap());
        assert_eq!(ids[2], vocab.word_id("circle").unwrap());
        assert!(ids.iter().all(|&i| i < vocab.n_ids()));

        let batch = vocab.encode_batch(&["a red circle", "a blue square"], 8).unwrap();
        assert_eq!(batch.token_ids.dim(), (2, 8));
        assert_eq!(batch.eos_positions, vec![3, 3]);

        assert!(vocab.encode("a purple circle", 8).is_err());
        assert!(vocab.encode("a red circle", 3).is_err(), "no room for end marker");
    }

    #[test]
    fn every_generated_caption_fits_vocab_and_context() {
        let vocab = Vocab::synthetic();
        let data = gen_shapes_dataset(31, 50, &ShapesConfig::default()).unwrap();
        let captions: Vec<&str> = data.iter().map(|d| d.caption.as_str()).collect();
        let batch = vocab.encode_batch(&captions, 32).unwrap();
        let text_cfg = crate::model::TextConfig {
            width: 16,
            depth: 1,
            mlp_dim: 32,
            heads: 2,
            vocab_size: vocab.n_ids(),
            context_len: 32,
            clip_dim: 8,
        };
        batch.validate(&text_cfg).unwrap();
        let clips = gen_motion_clips(31, 30, &MotionConfig { image_size: 16, n_frames: 2 }).unwrap();
        for clip in &clips {
            vocab.encode(&clip.caption, 8).unwrap();
        }
    }
}
