//! Symmetric InfoNCE over in-batch image↔text pairs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Scaled image×text similarity matrix (`[n_img, n_txt]`).
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub scores: Array2<f64>,
}

impl ScoreMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("non-finite similarity score"));
        }
        Ok(())
    }
}

/// Learnable temperature, stored as a log-scale with a hard cap on the
/// exponentiated value.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogitScale {
    pub log_value: f64,
    pub max_scale: f64,
}

impl LogitScale {
    pub fn new(init_scale: f64, max_scale: f64) -> Self {
        Self { log_value: init_scale.ln(), max_scale }
    }

    pub fn scale(&self) -> f64 {
        self.log_value.exp()
    }
}

/// Clamp a log-scale so the exponentiated scale stays ≤ `max_scale`.
/// Applied after every optimizer step.
pub fn clamp_logit_scale(log_value: f64, max_scale: f64) -> f64 {
    log_value.min(max_scale.ln())
}

/// Scaled similarity matrix from unit-norm embedding sets.
pub fn score_matrix(
    image_embs: &Array2<f64>,
    text_embs: &Array2<f64>,
    scale: f64,
) -> Result<ScoreMatrix> {
    if image_embs.ncols() != text_embs.ncols() {
        return Err(Error::shape("embedding dims differ"));
    }
    let scores = image_embs.dot(&text_embs.t()) * scale;
    let m = ScoreMatrix { scores };
    m.validate()?;
    Ok(m)
}

/// InfoNCE on the graph: `image_embs`/`text_embs` are `[N, D]` with unit-norm
/// rows, `log_scale` a 0-dim var. Matched pairs sit on the diagonal.
///
/// loss = ½·[CE(rows of S, diag) + CE(cols of S, diag)], S = e^{log_scale}·I·Tᵀ
pub fn clip_loss_graph(g: &mut Graph, image_embs: Var, text_embs: Var, log_scale: Var) -> Var {
    let n = g.value(image_embs).shape()[0];
    assert_eq!(n, g.value(text_embs).shape()[0], "clip_loss needs equal counts");
    assert!(n > 0, "clip_loss on empty batch");
    let tt = g.transpose(text_embs);
    let sims = g.matmul(image_embs, tt);
    let scale = g.exp(log_scale);
    let s = g.mul(sims, scale);

    let ce_to_diag = |g: &mut Graph, m: Var| -> Var {
        let logp = g.log_softmax_last(m);
        let d = g.diag(logp);
        let mean = g.mean_all(d);
        g.scale(mean, -1.0)
    };
    let rows = ce_to_diag(g, s);
    let st = g.transpose(s);
    let cols = ce_to_diag(g, st);
    let sum = g.add(rows, cols);
    g.scale(sum, 0.5)
}

/// Evaluation form of [`clip_loss_graph`] on plain arrays.
pub fn clip_loss(image_embs: &Array2<f64>, text_embs: &Array2<f64>, scale: f64) -> Result<f64> {
    if image_embs.nrows() == 0 {
        return Err(Error::data("empty batch"));
    }
    if image_embs.nrows() != text_embs.nrows() {
        return Err(Error::shape("image/text counts differ"));
    }
    let mut g = Graph::new();
    let i = g.constant(image_embs.clone().into_dyn());
    let t = g.constant(text_embs.clone().into_dyn());
    let ls = g.scalar_const(scale.ln());
    let loss = clip_loss_graph(&mut g, i, t, ls);
    Ok(g.scalar_value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Arr;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: usize, dim: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn((rows, dim), |_| rng.gen_range(-1.0..1.0));
        for mut r in m.rows_mut() {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.mapv_inplace(|v| v / n);
        }
        m
    }

    #[test]
    fn orthonormal_pairs_at_high_scale_drive_loss_to_zero() {
        let e = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let loss = clip_loss(&e, &e, 100.0).unwrap();
        assert!(loss < 1e-10, "loss {loss}");
    }

    #[test]
    fn identical_embeddings_give_ln_n() {
        let e = arr2(&[[1.0, 0.0], [1.0, 0.0]]);
        let loss = clip_loss(&e, &e, 37.0).unwrap();
        assert_abs_diff_eq!(loss, (2.0f64).ln(), epsilon = 1e-12);
        // and for N=3 at another scale
        let e3 = arr2(&[[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]);
        let loss3 = clip_loss(&e3, &e3, 5.0).unwrap();
        assert_abs_diff_eq!(loss3, (3.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn matches_independent_ce_oracle() {
        // independent oracle: materialize S, softmax by hand, average the two
        // diagonal cross-entropies
        let img = unit_rows(2, 4, 1);
        let txt = unit_rows(2, 4, 2);
        let scale = 1.0;
        let s = img.dot(&txt.t()) * scale;
        let ce_rows = |m: &Array2<f64>| -> f64 {
            let mut total = 0.0;
            for i in 0..m.nrows() {
                let row = m.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                total += -(m[[i, i]] - mx - denom.ln());
            }
            total / m.nrows() as f64
        };
        let oracle = 0.5 * (ce_rows(&s) + ce_rows(&s.t().to_owned()));
        let loss = clip_loss(&img, &txt, scale).unwrap();
        assert_abs_diff_eq!(loss, oracle, epsilon = 1e-6);
    }

    #[test]
    fn role_swap_symmetry() {
        let img = unit_rows(5, 8, 3);
        let txt = unit_rows(5, 8, 4);
        let a = clip_loss(&img, &txt, 13.0).unwrap();
        let b = clip_loss(&txt, &img, 13.0).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn loss_is_nonnegative() {
        for seed in 0..20 {
            let img = unit_rows(4, 6, 100 + seed);
            let txt = unit_rows(4, 6, 200 + seed);
            let loss = clip_loss(&img, &txt, 10.0).unwrap();
            assert!(loss >= 0.0, "negative loss {loss}");
        }
    }

    #[test]
    fn gradient_matches_finite_difference() {
        use crate::tensor::gradcheck::{check_grads, finite_difference};
        let img = unit_rows(3, 4, 7).into_dyn();
        let txt = unit_rows(3, 4, 8).into_dyn();
        let run = |i: &Arr, t: &Arr, ls: f64| -> (Graph, Var, Var, Var, Var) {
            let mut g = Graph::new();
            let iv = g.leaf(i.clone());
            let tv = g.leaf(t.clone());
            let lv = g.leaf(ndarray::arr0(ls).into_dyn());
            let loss = clip_loss_graph(&mut g, iv, tv, lv);
            (g, iv, tv, lv, loss)
        };
        let (g, iv, tv, lv, loss) = run(&img, &txt, 1.3);
        let grads = g.backward(loss);
        let ni = finite_difference(|x| { let (g, _, _, _, l) = run(x, &txt, 1.3); g.scalar_value(l) }, &img, 1e-6);
        let nt = finite_difference(|x| { let (g, _, _, _, l) = run(&img, x, 1.3); g.scalar_value(l) }, &txt, 1e-6);
        check_grads(grads.get(iv).unwrap(), &ni, 1e-4, 1e-9).unwrap();
        check_grads(grads.get(tv).unwrap(), &nt, 1e-4, 1e-9).unwrap();
        // scalar log-scale gradient
        let ls0 = ndarray::arr0(1.3).into_dyn();
        let nl = finite_difference(
            |x| {
                let (g, _, _, _, l) = run(&img, &txt, x[[]]);
                g.scalar_value(l)
            },
            &ls0,
            1e-6,
        );
        check_grads(grads.get(lv).unwrap(), &nl, 1e-4, 1e-9).unwrap();
    }

    #[test]
    fn scale_clamp_examples() {
        assert_abs_diff_eq!(clamp_logit_scale(50f64.ln(), 100.0).exp(), 50.0, epsilon = 1e-9);
        assert_abs_diff_eq!(clamp_logit_scale(150f64.ln(), 100.0).exp(), 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(clamp_logit_scale(100f64.ln(), 100.0).exp(), 100.0, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_batches() {
        let a = unit_rows(2, 4, 5);
        let b = unit_rows(3, 4, 6);
        assert!(clip_loss(&a, &b, 1.0).is_err());
        let empty = Array2::<f64>::zeros((0, 4));
        assert!(clip_loss(&empty, &empty, 1.0).is_err());
    }
}
