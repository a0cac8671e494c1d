//! Mask regularization: duplicated batch samples are re-encoded with a
//! portion of their token blocks replaced by the learned mask token, and the
//! masked forward's output tokens are pulled toward their unmasked
//! counterparts by cosine distance.
//!
//! Gradient disjointness is structural: the duplicated forward never enters
//! the CLIP similarity matrix, and the unmasked target tokens are
//! gradient-stopped, so the contrastive and alignment objectives touch
//! disjoint activation sets.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Configuration of the duplicated-and-masked branch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskRegSpec {
    /// Fraction of the batch duplicated for the masked forward.
    pub batch_fraction: f64,
    /// Fraction of grid tokens replaced by the mask token.
    pub token_mask_ratio: f64,
    /// Mask granularity in tokens (height, width).
    pub mask_block: (usize, usize),
}

impl Default for MaskRegSpec {
    fn default() -> Self {
        Self { batch_fraction: 1.0 / 16.0, token_mask_ratio: 0.4, mask_block: (2, 2) }
    }
}

impl MaskRegSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.token_mask_ratio > 0.0 && self.token_mask_ratio < 1.0) {
            return Err(Error::config(format!(
                "token_mask_ratio {} outside (0,1)",
                self.token_mask_ratio
            )));
        }
        if self.mask_block.0 == 0 || self.mask_block.1 == 0 {
            return Err(Error::config("mask_block must be positive"));
        }
        Ok(())
    }
}

/// Number of batch samples duplicated for masking: `max(1, round(f·B))`.
pub fn duplicated_count(batch_fraction: f64, batch: usize) -> usize {
    ((batch_fraction * batch as f64).round() as usize).max(1)
}

/// Sample a block-aligned token mask over a `rows × cols` grid.
///
/// The grid is tiled by `mask_block` (edge tiles clipped); tiles are shuffled
/// and taken until at least `round(ratio · n_tokens)` tokens are masked.
/// Returns `[rows, cols]` with 1.0 on masked tokens.
pub fn sample_block_mask(
    rng: &mut ChaCha8Rng,
    grid: (usize, usize),
    block: (usize, usize),
    ratio: f64,
) -> Result<Array2<f64>> {
    let (rows, cols) = grid;
    let (bh, bw) = block;
    if bh > rows || bw > cols {
        return Err(Error::config(format!(
            "mask block {bh}x{bw} larger than token grid {rows}x{cols}"
        )));
    }
    let tiles_y = rows.div_ceil(bh);
    let tiles_x = cols.div_ceil(bw);
    let mut tiles: Vec<(usize, usize)> =
        (0..tiles_y).flat_map(|ty| (0..tiles_x).map(move |tx| (ty, tx))).collect();
    tiles.shuffle(rng);
    let target = ((ratio * (rows * cols) as f64).round() as usize).min(rows * cols);
    let mut mask = Array2::<f64>::zeros((rows, cols));
    let mut masked = 0usize;
    for (ty, tx) in tiles {
        if masked >= target {
            break;
        }
        for y in ty * bh..((ty + 1) * bh).min(rows) {
            for x in tx * bw..((tx + 1) * bw).min(cols) {
                if mask[[y, x]] == 0.0 {
                    mask[[y, x]] = 1.0;
                    masked += 1;
                }
            }
        }
    }
    Ok(mask)
}

/// Mean cosine distance between masked-forward tokens and their
/// gradient-stopped unmasked counterparts, over masked positions only.
///
/// `masked_tokens` / `unmasked_tokens` are `[B, n_tok, width]` graph values
/// from the two forwards; `token_mask` is `[B, n_tok]` with 1.0 where the
/// loss applies. The detach of the target happens here, making the
/// "no gradient into the unmasked branch" contract part of the loss itself.
pub fn mask_cosine_loss_graph(
    g: &mut Graph,
    masked_tokens: Var,
    unmasked_tokens: Var,
    token_mask: &Array2<f64>,
) -> Var {
    let n_masked: f64 = token_mask.sum();
    assert!(n_masked > 0.0, "mask selects no tokens");
    let target = g.detach(unmasked_tokens);
    let a = g.normalize_last(masked_tokens, 1e-12);
    let b = g.normalize_last(target, 1e-12);
    let prod = g.mul(a, b);
    let cos = g.sum_axis_keep(prod, 2); // [B, n_tok, 1]
    let neg = g.scale(cos, -1.0);
    let dist = g.add_scalar(neg, 1.0); // 1 - cos
    let w = g.constant(token_mask.clone().insert_axis(Axis(2)).into_dyn());
    let weighted = g.mul(dist, w);
    let total = g.sum_all(weighted);
    g.scale(total, 1.0 / n_masked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Arr;
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};

    #[test]
    fn duplicated_count_examples() {
        assert_eq!(duplicated_count(1.0 / 16.0, 32), 2);
        assert_eq!(duplicated_count(1.0 / 16.0, 16), 1);
        assert_eq!(duplicated_count(1.0 / 16.0, 4), 1); // floor would be 0
        assert_eq!(duplicated_count(0.5, 7), 4);
    }

    #[test]
    fn block_mask_hits_exact_ratio_when_divisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mask = sample_block_mask(&mut rng, (8, 8), (2, 2), 0.75).unwrap();
        assert_abs_diff_eq!(mask.sum(), 48.0, epsilon = 0.0);
        // every masked cell belongs to a fully masked 2x2 tile
        for ty in 0..4 {
            for tx in 0..4 {
                let tile = mask.slice(ndarray::s![ty * 2..ty * 2 + 2, tx * 2..tx * 2 + 2]);
                let s = tile.sum();
                assert!(s == 0.0 || s == 4.0, "partially masked tile at ({ty},{tx})");
            }
        }
    }

    #[test]
    fn block_mask_meets_target_with_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = sample_block_mask(&mut rng, (8, 8), (2, 2), 0.4).unwrap();
        let target = (0.4f64 * 64.0).round();
        let masked = mask.sum();
        assert!(masked >= target && masked < target + 4.0, "masked {masked}");
    }

    #[test]
    fn block_mask_rejects_oversized_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_block_mask(&mut rng, (2, 2), (3, 3), 0.5).is_err());
    }

    #[test]
    fn loss_zero_when_outputs_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let toks = Arr::from_shape_fn(IxDyn(&[2, 5, 4]), |_| rng.gen_range(-1.0..1.0));
        let mask = Array2::from_shape_fn((2, 5), |(_, t)| if t % 2 == 0 { 1.0 } else { 0.0 });
        let mut g = Graph::new();
        let a = g.leaf(toks.clone());
        let b = g.leaf(toks.clone());
        let loss = mask_cosine_loss_graph(&mut g, a, b, &mask);
        assert_abs_diff_eq!(g.scalar_value(loss), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn loss_counts_masked_positions_only() {
        // one masked token differs; unmasked differences must not register
        let mut toks_a = Arr::zeros(IxDyn(&[1, 3, 2]));
        let mut toks_b = Arr::zeros(IxDyn(&[1, 3, 2]));
        // token 0 (masked): opposite directions -> 1 - cos = 2
        toks_a[[0, 0, 0]] = 1.0;
        toks_b[[0, 0, 0]] = -1.0;
        // token 1 (unmasked): wildly different, must be ignored
        toks_a[[0, 1, 1]] = 5.0;
        toks_b[[0, 1, 0]] = -3.0;
        // token 2 (masked): identical
        toks_a[[0, 2, 0]] = 1.0;
        toks_b[[0, 2, 0]] = 1.0;
        let mask = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(toks_a);
        let b = g.leaf(toks_b);
        let loss = mask_cosine_loss_graph(&mut g, a, b, &mask);
        // (2 + 0) / 2 masked tokens
        assert_abs_diff_eq!(g.scalar_value(loss), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn target_branch_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ta = Arr::from_shape_fn(IxDyn(&[1, 4, 3]), |_| rng.gen_range(-1.0..1.0));
        let tb = Arr::from_shape_fn(IxDyn(&[1, 4, 3]), |_| rng.gen_range(-1.0..1.0));
        let mask = Array2::from_elem((1, 4), 1.0);
        let mut g = Graph::new();
        let a = g.leaf(ta);
        let b = g.leaf(tb);
        let loss = mask_cosine_loss_graph(&mut g, a, b, &mask);
        let grads = g.backward(loss);
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none(), "gradient leaked into the detached target");
    }

    #[test]
    fn gradient_matches_finite_difference() {
        use crate::tensor::gradcheck::{check_grads, finite_difference};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ta = Arr::from_shape_fn(IxDyn(&[2, 3, 4]), |_| rng.gen_range(-1.0..1.0));
        let tb = Arr::from_shape_fn(IxDyn(&[2, 3, 4]), |_| rng.gen_range(-1.0..1.0));
        let mask = Array2::from_shape_fn((2, 3), |(_, t)| if t == 1 { 0.0 } else { 1.0 });
        let run = |a: &Arr| -> (Graph, Var, Var) {
            let mut g = Graph::new();
            let av = g.leaf(a.clone());
            let bv = g.leaf(tb.clone());
            let loss = mask_cosine_loss_graph(&mut g, av, bv, &mask);
            (g, av, loss)
        };
        let (g, av, loss) = run(&ta);
        let grads = g.backward(loss);
        let num = finite_difference(|a| { let (g, _, l) = run(a); g.scalar_value(l) }, &ta, 1e-6);
        check_grads(grads.get(av).unwrap(), &num, 1e-4, 1e-9).unwrap();
    }
}
