//! Axial 2-D rotary position embedding tables.
//!
//! Each attention head's channel pairs are split in half: pairs in the first
//! half rotate with the token's row coordinate, pairs in the second half with
//! its column coordinate. Within each half the rotation frequencies follow
//! the standard geometric schedule `base^(-i / (d/4))`. A class token (and
//! any other position-free token) gets the zero angle, i.e. the identity
//! rotation.

use std::sync::Arc;

use ndarray::Array2;

pub const ROPE_BASE: f64 = 10_000.0;

/// Grid coordinate per token; `None` marks position-free tokens (class
/// token), which receive an identity rotation.
pub type TokenPos = Option<(usize, usize)>;

/// Cos/sin tables of shape `[n_tok, head_dim/2]` for [`crate::tensor::Graph::rope2d`].
///
/// `head_dim` must be divisible by 4 so rows and columns each get an equal
/// number of rotating channel pairs.
pub fn rope2d_tables(positions: &[TokenPos], head_dim: usize) -> (Arc<Array2<f64>>, Arc<Array2<f64>>) {
    assert_eq!(head_dim % 4, 0, "2D RoPE needs head_dim divisible by 4");
    let half_pairs = head_dim / 4; // channel pairs per axis
    let n = positions.len();
    let inv_freq: Vec<f64> =
        (0..half_pairs).map(|i| ROPE_BASE.powf(-(i as f64) / half_pairs as f64)).collect();
    let mut cos = Array2::<f64>::zeros((n, head_dim / 2));
    let mut sin = Array2::<f64>::zeros((n, head_dim / 2));
    for (t, pos) in positions.iter().enumerate() {
        for p in 0..head_dim / 2 {
            let angle = match pos {
                None => 0.0,
                Some((row, col)) => {
                    let (coord, f) = if p < half_pairs {
                        (*row as f64, inv_freq[p])
                    } else {
                        (*col as f64, inv_freq[p - half_pairs])
                    };
                    coord * f
                }
            };
            cos[[t, p]] = angle.cos();
            sin[[t, p]] = angle.sin();
        }
    }
    (Arc::new(cos), Arc::new(sin))
}

/// Token positions for a `rows × cols` grid, optionally preceded by a class
/// token at position `None`.
pub fn grid_positions(rows: usize, cols: usize, class_token: bool) -> Vec<TokenPos> {
    let mut out = Vec::with_capacity(rows * cols + usize::from(class_token));
    if class_token {
        out.push(None);
    }
    for r in 0..rows {
        for c in 0..cols {
            out.push(Some((r, c)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Arr, Graph};
    use approx::assert_abs_diff_eq;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn apply(positions: &[TokenPos], head_dim: usize, x: &Arr) -> Arr {
        let (cos, sin) = rope2d_tables(positions, head_dim);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = g.rope2d(v, cos, sin);
        g.value(y).clone()
    }

    #[test]
    fn origin_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Arr::from_shape_fn(IxDyn(&[1, 1, 2, 8]), |_| rng.gen_range(-1.0..1.0));
        // token 0: class (None); token 1: grid origin (0,0) — both zero angle
        let y = apply(&[None, Some((0, 0))], 8, &x);
        assert_eq!(y, x);
    }

    #[test]
    fn rotation_preserves_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..1000 {
            let pos = Some((rng.gen_range(0..32), rng.gen_range(0..32)));
            let x = Arr::from_shape_fn(IxDyn(&[1, 1, 1, 8]), |_| rng.gen_range(-2.0..2.0));
            let y = apply(&[pos], 8, &x);
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(nx, ny, epsilon = 1e-6);
            let _ = trial;
        }
    }

    #[test]
    fn attention_logits_depend_only_on_relative_position() {
        // dot(rope(q)@p1, rope(k)@p2) must be invariant to a common shift δ
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head_dim = 8;
        for _ in 0..1000 {
            let p1 = (rng.gen_range(0..16), rng.gen_range(0..16));
            let p2 = (rng.gen_range(0..16), rng.gen_range(0..16));
            let d = (rng.gen_range(0..16), rng.gen_range(0..16));
            let q = Arr::from_shape_fn(IxDyn(&[1, 1, 1, head_dim]), |_| rng.gen_range(-1.0..1.0));
            let k = Arr::from_shape_fn(IxDyn(&[1, 1, 1, head_dim]), |_| rng.gen_range(-1.0..1.0));
            let dot = |a: &Arr, b: &Arr| a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
            let base = dot(&apply(&[Some(p1)], head_dim, &q), &apply(&[Some(p2)], head_dim, &k));
            let shifted = dot(
                &apply(&[Some((p1.0 + d.0, p1.1 + d.1))], head_dim, &q),
                &apply(&[Some((p2.0 + d.0, p2.1 + d.1))], head_dim, &k),
            );
            assert_abs_diff_eq!(base, shifted, epsilon = 1e-5);
        }
    }

    #[test]
    fn matches_explicit_rotation_oracle() {
        // independent 4-dim head construction: pair 0 rotates by row*1.0,
        // pair 1 rotates by col*1.0 (single frequency per axis when d/4 == 1)
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let (r, c) = (rng.gen_range(0..8), rng.gen_range(0..8));
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rot = |x0: f64, x1: f64, a: f64| (x0 * a.cos() - x1 * a.sin(), x0 * a.sin() + x1 * a.cos());
            let (e0, e1) = rot(x[0], x[1], r as f64);
            let (e2, e3) = rot(x[2], x[3], c as f64);
            let arr = Arr::from_shape_vec(IxDyn(&[1, 1, 1, 4]), x.clone()).unwrap();
            let y = apply(&[Some((r, c))], 4, &arr);
            assert_abs_diff_eq!(y[[0, 0, 0, 0]], e0, epsilon = 1e-12);
            assert_abs_diff_eq!(y[[0, 0, 0, 1]], e1, epsilon = 1e-12);
            assert_abs_diff_eq!(y[[0, 0, 0, 2]], e2, epsilon = 1e-12);
            assert_abs_diff_eq!(y[[0, 0, 0, 3]], e3, epsilon = 1e-12);
        }
    }

    #[test]
    fn grid_positions_layout() {
        let pos = grid_positions(2, 3, true);
        assert_eq!(pos.len(), 7);
        assert_eq!(pos[0], None);
        assert_eq!(pos[1], Some((0, 0)));
        assert_eq!(pos[3], Some((0, 2)));
        assert_eq!(pos[6], Some((1, 2)));
    }
}
