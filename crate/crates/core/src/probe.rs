//! Frozen-feature probes and layerwise sweeps.
//!
//! Every probe consumes features extracted from a frozen encoder and never
//! touches encoder parameters: k-nearest-neighbor and linear classification
//! on pooled embeddings, an attention probe on token features, a linear +
//! convolutional segmentation head on the token grid, and training-free
//! label propagation for tracking. `layer_sweep` runs one probe across tap
//! layers and reports best/last scores; `normalize_scores` puts scores from
//! different models on a shared min-max scale.

use crate::error::{Error, Result};
use crate::model::TokenFeatures;
use crate::model::ParamStore;
use crate::optim::{adamw_step, LambHyper, OptState};
use crate::tensor::Graph;
use ndarray::{Array2, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Outcome of a layer sweep for one probe task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task_id: String,
    /// Score per tapped layer (1-based block index).
    pub per_layer: BTreeMap<usize, f64>,
    /// Layer achieving the optimum (respecting direction; earliest on ties).
    pub best_layer: usize,
    pub best_score: f64,
    /// Score at the deepest tapped layer.
    pub last_score: f64,
    pub higher_is_better: bool,
}

fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = (row.iter().map(|v| v * v).sum::<f64>() + 1e-12).sqrt();
        row.mapv_inplace(|v| v / n);
    }
    out
}

/// Top-1 accuracy of cosine k-nearest-neighbor classification: majority vote
/// among the `k` most similar training points, ties broken by summed
/// similarity, then by the smaller label.
pub fn knn_probe(
    train_feats: &Array2<f64>,
    train_labels: &[u32],
    test_feats: &Array2<f64>,
    test_labels: &[u32],
    k: usize,
) -> Result<f64> {
    let n = train_feats.nrows();
    if train_labels.len() != n || test_feats.nrows() != test_labels.len() {
        return Err(Error::shape("feature/label count mismatch"));
    }
    if k == 0 || k > n {
        return Err(Error::config(format!("k={k} outside 1..={n}")));
    }
    if test_labels.is_empty() {
        return Err(Error::data("empty test set"));
    }
    let train = l2_normalize_rows(train_feats);
    let test = l2_normalize_rows(test_feats);
    let sims = test.dot(&train.t()); // [n_test, n_train]
    let mut correct = 0usize;
    for (ti, row) in sims.rows().into_iter().enumerate() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        let mut votes: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
        for &i in idx.iter().take(k) {
            let e = votes.entry(train_labels[i]).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += row[i];
        }
        let (&pred, _) = votes
            .iter()
            .max_by(|a, b| {
                let ka = (a.1 .0, a.1 .1, std::cmp::Reverse(*a.0));
                let kb = (b.1 .0, b.1 .1, std::cmp::Reverse(*b.0));
                ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("nonempty votes");
        if pred == test_labels[ti] {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_labels.len() as f64)
}

fn check_multiclass(labels: &[u32]) -> Result<()> {
    let first = labels.first().ok_or_else(|| Error::data("no labels"))?;
    if labels.iter().all(|l| l == first) {
        return Err(Error::data("degenerate single-class labels"));
    }
    Ok(())
}

fn ce_loss(g: &mut Graph, logits: crate::tensor::Var, labels: &[u32]) -> crate::tensor::Var {
    let shape = g.value(logits).shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let logp = g.log_softmax_last(logits);
    let cols = g.reshape(logp, &[n, c, 1]);
    let idx: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let picked = g.take_per_row(cols, &idx); // [N, 1]
    let mean = g.mean_all(picked);
    g.scale(mean, -1.0)
}

fn accuracy(logits: &Array2<f64>, labels: &[u32]) -> f64 {
    let mut correct = 0usize;
    for (row, &lab) in logits.rows().into_iter().zip(labels) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best as u32 == lab {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Top-1 accuracy of a single affine layer trained with cross-entropy by
/// full-batch gradient descent (zero-initialized, so exactly reproducible).
pub fn linear_probe(
    train_feats: &Array2<f64>,
    train_labels: &[u32],
    test_feats: &Array2<f64>,
    test_labels: &[u32],
    n_classes: usize,
    epochs: usize,
    lr: f64,
) -> Result<f64> {
    if train_feats.nrows() != train_labels.len() || test_feats.nrows() != test_labels.len() {
        return Err(Error::shape("feature/label count mismatch"));
    }
    check_multiclass(train_labels)?;
    let d = train_feats.ncols();
    let mut w = Array2::<f64>::zeros((d, n_classes));
    let mut b = ndarray::Array1::<f64>::zeros(n_classes);
    for _ in 0..epochs {
        let mut g = Graph::new();
        let x = g.constant(train_feats.clone().into_dyn());
        let wv = g.leaf(w.clone().into_dyn());
        let bv = g.leaf(b.clone().into_dyn());
        let logits = g.linear(x, wv, Some(bv));
        let loss = ce_loss(&mut g, logits, train_labels);
        let grads = g.backward(loss);
        let gw = grads.get(wv).expect("weight grad");
        let gb = grads.get(bv).expect("bias grad");
        w.zip_mut_with(
            &gw.clone().into_dimensionality::<ndarray::Ix2>().expect("2-D"),
            |wi, gi| *wi -= lr * gi,
        );
        b.zip_mut_with(
            &gb.clone().into_dimensionality::<ndarray::Ix1>().expect("1-D"),
            |bi, gi| *bi -= lr * gi,
        );
    }
    let logits = test_feats.dot(&w) + &b;
    Ok(accuracy(&logits, test_labels))
}

/// Top-1 accuracy of a randomly initialized single-head cross-attention
/// block (learned query over frozen tokens) followed by a linear classifier,
/// trained with Adam on the frozen features.
pub fn attention_probe(
    train_tokens: &Array3<f64>,
    train_labels: &[u32],
    test_tokens: &Array3<f64>,
    test_labels: &[u32],
    n_classes: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let (n, _, width) = train_tokens.dim();
    if n != train_labels.len() || test_tokens.dim().0 != test_labels.len() {
        return Err(Error::shape("token/label count mismatch"));
    }
    if test_tokens.dim().2 != width {
        return Err(Error::shape(format!(
            "token width mismatch: train {} vs test {}",
            width,
            test_tokens.dim().2
        )));
    }
    check_multiclass(train_labels)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    params.init_normal("q", &[1, width], 0.02, &mut rng);
    params.init_normal("wk", &[width, width], 0.02, &mut rng);
    params.init_normal("wv", &[width, width], 0.02, &mut rng);
    params.init_const("cls.w", &[width, n_classes], 0.0);
    params.init_const("cls.b", &[n_classes], 0.0);
    let mut state = OptState::new();
    let hyper = LambHyper { lr, weight_decay: 0.0, ..Default::default() };

    let forward = |g: &mut Graph,
                   bound: &crate::model::Bound,
                   tokens: &Array3<f64>|
     -> crate::tensor::Var {
        let (nb, ntok, w) = tokens.dim();
        let x = g.constant(tokens.clone().into_dyn());
        let flat = g.reshape(x, &[nb * ntok, w]);
        let wk = bound.var("wk");
        let wv = bound.var("wv");
        let keys = g.matmul(flat, wk);
        let vals = g.matmul(flat, wv);
        let keys = g.reshape(keys, &[nb, ntok, w]);
        let vals = g.reshape(vals, &[nb, ntok, w]);
        let q = bound.var("q");
        let scores = {
            // [N, n_tok, w] · [w] query -> [N, 1, n_tok]
            let kt = g.transpose(keys); // [N, w, n_tok]
            let qb = g.reshape(q, &[1, 1, w]);
            let qrep = g.concat(0, &vec![qb; nb]);
            let s = g.bmm(qrep, kt); // [N, 1, n_tok]
            g.scale(s, 1.0 / (w as f64).sqrt())
        };
        let attn = g.softmax_last(scores);
        let pooled = g.bmm(attn, vals); // [N, 1, w]
        let pooled = g.reshape(pooled, &[nb, w]);
        let cw = bound.var("cls.w");
        let cb = bound.var("cls.b");
        g.linear(pooled, cw, Some(cb))
    };

    for _ in 0..epochs {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let logits = forward(&mut g, &bound, train_tokens);
        let loss = ce_loss(&mut g, logits, train_labels);
        let grads = g.backward(loss);
        let grad_map = bound.collect_grads(&grads);
        adamw_step(&mut params, &grad_map, &mut state, &hyper)?;
    }

    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let logits = forward(&mut g, &bound, test_tokens);
    let vals = g
        .value(logits)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(accuracy(&vals, test_labels))
}

/// Mean IoU over classes, excluding classes absent from both prediction and
/// target (their IoU is undefined, not zero).
pub fn mean_iou(pred: &Array2<u32>, target: &Array2<u32>, n_classes: u32) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape("prediction/target shape mismatch"));
    }
    let mut inter = vec![0usize; n_classes as usize];
    let mut union = vec![0usize; n_classes as usize];
    for (&p, &t) in pred.iter().zip(target.iter()) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::data(format!("label out of range (classes {n_classes})")));
        }
        if p == t {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[t as usize] += 1;
        }
    }
    let mut acc = 0.0;
    let mut counted = 0usize;
    for c in 0..n_classes as usize {
        if union[c] > 0 {
            acc += inter[c] as f64 / union[c] as f64;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::data("no class present in prediction or target"));
    }
    Ok(acc / counted as f64)
}

/// Token-grid features in convolution layout `[B, width, gh, gw]`, class
/// token dropped.
pub fn grid_features(tf: &TokenFeatures) -> Result<Array4<f64>> {
    tf.validate()?;
    let (b, _, width) = tf.values.dim();
    let (gh, gw) = tf.grid;
    let start = usize::from(tf.has_class_token);
    let grid_toks = tf.values.slice(ndarray::s![.., start.., ..]).to_owned();
    let reshaped = grid_toks
        .into_shape_with_order((b, gh, gw, width))
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok(reshaped.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned())
}

fn seg_logits(
    g: &mut Graph,
    bound: &crate::model::Bound,
    feats: &Array4<f64>,
) -> crate::tensor::Var {
    let (b, width, gh, gw) = feats.dim();
    let x = g.constant(feats.clone().into_dyn());
    // per-token linear to class logits …
    let xt = g.permute(x, &[0, 2, 3, 1]);
    let flat = g.reshape(xt, &[b * gh * gw, width]);
    let lw = bound.var("lin.w");
    let lb = bound.var("lin.b");
    let lin = g.linear(flat, lw, Some(lb));
    let n_classes = g.value(lin).shape()[1];
    let lin_grid = g.reshape(lin, &[b, gh, gw, n_classes]);
    let lin_chw = g.permute(lin_grid, &[0, 3, 1, 2]);
    // … refined by a 3×3 convolution over the token grid.
    let cw = bound.var("conv.w");
    let cb = bound.var("conv.b");
    g.conv3x3(lin_chw, cw, cb)
}

/// Mean IoU of a linear + 3×3-convolution head trained to map frozen token
/// features to per-token class labels (labels already at the token grid).
pub fn linear_seg_probe(
    train_feats: &Array4<f64>,
    train_labels: &Array3<u32>,
    test_feats: &Array4<f64>,
    test_labels: &Array3<u32>,
    n_classes: u32,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<f64> {
    let (b, width, gh, gw) = train_feats.dim();
    if train_labels.dim() != (b, gh, gw) {
        return Err(Error::shape("training labels do not match the token grid"));
    }
    if test_labels.dim() != (test_feats.dim().0, test_feats.dim().2, test_feats.dim().3) {
        return Err(Error::shape("test labels do not match the token grid"));
    }
    let c = n_classes as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    params.init_normal("lin.w", &[width, c], 0.02, &mut rng);
    params.init_const("lin.b", &[c], 0.0);
    params.init_normal("conv.w", &[c, c, 3, 3], 0.02, &mut rng);
    params.init_const("conv.b", &[c], 0.0);
    let mut state = OptState::new();
    let hyper = LambHyper { lr, weight_decay: 0.0, ..Default::default() };

    let flat_labels: Vec<u32> = train_labels.iter().copied().collect();
    for _ in 0..epochs {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, true);
        let logits = seg_logits(&mut g, &bound, train_feats);
        let per_tok = g.permute(logits, &[0, 2, 3, 1]);
        let flat = g.reshape(per_tok, &[b * gh * gw, c]);
        let loss = ce_loss(&mut g, flat, &flat_labels);
        let grads = g.backward(loss);
        let grad_map = bound.collect_grads(&grads);
        adamw_step(&mut params, &grad_map, &mut state, &hyper)?;
    }

    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let logits = seg_logits(&mut g, &bound, test_feats);
    let vals = g
        .value(logits)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| Error::shape(e.to_string()))?;
    let (tb, _, tgh, tgw) = vals.dim();
    let mut scores = Vec::with_capacity(tb);
    for i in 0..tb {
        let pred = Array2::from_shape_fn((tgh, tgw), |(y, x)| {
            let mut best = 0usize;
            for ch in 1..c {
                if vals[[i, ch, y, x]] > vals[[i, best, y, x]] {
                    best = ch;
                }
            }
            best as u32
        });
        let target = test_labels.index_axis(Axis(0), i).to_owned();
        scores.push(mean_iou(&pred, &target, n_classes)?);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Propagates token labels through a frame sequence without any training:
/// each token in frame `t` takes a similarity-weighted vote (softmax over
/// the `top_k` most similar patches) from the previous `context_n` frames'
/// features and their propagated labels.
pub fn label_propagation(
    frames: &[Array2<f64>],
    grid: (usize, usize),
    initial: &Array2<u32>,
    context_n: usize,
    top_k: usize,
) -> Result<Vec<Array2<u32>>> {
    let (gh, gw) = grid;
    let n_tok = gh * gw;
    if frames.is_empty() {
        return Err(Error::data("no frames"));
    }
    if context_n == 0 || top_k == 0 {
        return Err(Error::config("context_n and top_k must be positive"));
    }
    if initial.dim() != (gh, gw) {
        return Err(Error::shape("initial mask does not match the token grid"));
    }
    for f in frames {
        if f.nrows() != n_tok {
            return Err(Error::shape("frame token count does not match the grid"));
        }
    }
    let max_label = *initial.iter().max().expect("nonempty mask") as usize;
    let feats: Vec<Array2<f64>> = frames.iter().map(l2_normalize_rows).collect();

    let mut masks: Vec<Array2<u32>> = vec![initial.clone()];
    for t in 1..frames.len() {
        let ctx_start = t.saturating_sub(context_n);
        let mut prev = Array2::<u32>::zeros((gh, gw));
        for ti in 0..n_tok {
            // collect similarities to every context patch
            let mut cands: Vec<(f64, u32)> = Vec::new();
            let cur = feats[t].row(ti);
            for s in ctx_start..t {
                let lab = &masks[s];
                for tj in 0..n_tok {
                    let sim: f64 =
                        cur.iter().zip(feats[s].row(tj).iter()).map(|(a, b)| a * b).sum();
                    cands.push((sim, lab[[tj / gw, tj % gw]]));
                }
            }
            cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
            cands.truncate(top_k);
            // softmax-weighted votes, argmax label (ties -> smaller label)
            let m = cands.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
            let mut weights = vec![0.0f64; max_label + 1];
            let mut z = 0.0;
            for &(s, lab) in &cands {
                let e = (s - m).exp();
                z += e;
                weights[lab as usize] += e;
            }
            let mut best = 0usize;
            for (lab, &wt) in weights.iter().enumerate() {
                if wt > weights[best] + 1e-15 * z {
                    best = lab;
                }
            }
            prev[[ti / gw, ti % gw]] = best as u32;
        }
        masks.push(prev);
    }
    Ok(masks)
}

/// Mean region Jaccard of the foreground classes present in the ground
/// truth (background label 0 excluded).
pub fn mean_jaccard(pred: &Array2<u32>, gt: &Array2<u32>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape("mask shape mismatch"));
    }
    let classes: std::collections::BTreeSet<u32> =
        gt.iter().copied().filter(|&c| c != 0).collect();
    if classes.is_empty() {
        return Err(Error::data("ground truth has no foreground"));
    }
    let mut acc = 0.0;
    for c in &classes {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &t) in pred.iter().zip(gt.iter()) {
            let (ip, it) = (p == *c, t == *c);
            if ip && it {
                inter += 1;
            }
            if ip || it {
                union += 1;
            }
        }
        acc += inter as f64 / union as f64;
    }
    Ok(acc / classes.len() as f64)
}

/// Propagates from the first ground-truth mask and scores the rest:
/// mean Jaccard over frames 1…T−1.
pub fn propagation_j(
    frames: &[Array2<f64>],
    grid: (usize, usize),
    gt_masks: &[Array2<u32>],
    context_n: usize,
    top_k: usize,
) -> Result<f64> {
    if frames.len() != gt_masks.len() || frames.len() < 2 {
        return Err(Error::data("need matching frames and masks, at least two"));
    }
    let masks = label_propagation(frames, grid, &gt_masks[0], context_n, top_k)?;
    let mut acc = 0.0;
    for t in 1..masks.len() {
        acc += mean_jaccard(&masks[t], &gt_masks[t])?;
    }
    Ok(acc / (masks.len() - 1) as f64)
}

/// Runs `eval` once per tapped layer and summarizes the sweep.
pub fn layer_sweep<F>(
    layers: &[usize],
    mut eval: F,
    task_id: &str,
    higher_is_better: bool,
) -> Result<ProbeResult>
where
    F: FnMut(usize) -> Result<f64>,
{
    if layers.is_empty() {
        return Err(Error::config("empty layer list"));
    }
    let mut per_layer = BTreeMap::new();
    for &layer in layers {
        per_layer.insert(layer, eval(layer)?);
    }
    let better = |a: f64, b: f64| if higher_is_better { a > b } else { a < b };
    let (&first_layer, &first_score) = per_layer.iter().next().expect("nonempty");
    let mut best_layer = first_layer;
    let mut best_score = first_score;
    for (&layer, &score) in &per_layer {
        if better(score, best_score) {
            best_layer = layer;
            best_score = score;
        }
    }
    let (&last_layer, &last_score) = per_layer.iter().next_back().expect("nonempty");
    let _ = last_layer;
    Ok(ProbeResult {
        task_id: task_id.to_string(),
        per_layer,
        best_layer,
        best_score,
        last_score,
        higher_is_better,
    })
}

/// Min-max normalization of per-layer scores across the union of all
/// models' scores for one task. Lower-is-better tasks are flipped first so
/// 1 always means best. A degenerate union (max == min) maps everything
/// to 0.5.
pub fn normalize_scores(
    per_model: &BTreeMap<String, BTreeMap<usize, f64>>,
    higher_is_better: bool,
) -> BTreeMap<String, BTreeMap<usize, f64>> {
    let all: Vec<f64> = per_model.values().flat_map(|m| m.values().copied()).collect();
    let min = all.iter().copied().fold(f64::INFINITY, f64::min);
    let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    per_model
        .iter()
        .map(|(model, scores)| {
            let normed = scores
                .iter()
                .map(|(&layer, &s)| {
                    let v = if span <= 0.0 {
                        0.5
                    } else {
                        let x = (s - min) / span;
                        if higher_is_better {
                            x
                        } else {
                            1.0 - x
                        }
                    };
                    (layer, v)
                })
                .collect();
            (model.clone(), normed)
        })
        .collect()
}
