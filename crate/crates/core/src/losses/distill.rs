//! Contrastive distillation: the student's image↔text similarity
//! distributions chase a sharpened teacher's via KL divergence.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Probability floor applied to student distributions inside the KL so a
/// zero student probability under positive teacher mass stays finite.
pub const KL_EPS: f64 = 1e-12;

/// Teacher logit scale from the student's: half the temperature means
/// double the scale.
pub fn teacher_scale(student_scale: f64, temp_factor_on_student_temp: f64) -> f64 {
    student_scale / temp_factor_on_student_temp
}

/// Row-softmaxed image→text and column-softmaxed text→image distributions
/// over the scaled similarity matrix.
pub fn similarity_distributions_graph(
    g: &mut Graph,
    image_embs: Var,
    text_embs: Var,
    log_scale: Var,
) -> (Var, Var) {
    let tt = g.transpose(text_embs);
    let sims = g.matmul(image_embs, tt);
    let scale = g.exp(log_scale);
    let s = g.mul(sims, scale);
    let p_i2t = g.softmax_last(s);
    let st = g.transpose(s);
    let cols = g.softmax_last(st);
    let p_t2i = g.transpose(cols); // columns sum to 1
    (p_i2t, p_t2i)
}

/// Evaluation form of [`similarity_distributions_graph`].
pub fn similarity_distributions(
    image_embs: &Array2<f64>,
    text_embs: &Array2<f64>,
    scale: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
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
    let (a, b) = similarity_distributions_graph(&mut g, i, t, ls);
    let fix = |v: Var, g: &Graph| {
        g.value(v).clone().into_dimensionality::<ndarray::Ix2>().map_err(|e| Error::shape(e.to_string()))
    };
    Ok((fix(a, &g)?, fix(b, &g)?))
}

/// Mean over rows of KL(teacher ‖ student), averaged over both directions.
/// Teacher distributions enter as constants; student probabilities are
/// clamped at [`KL_EPS`].
pub fn distill_loss_graph(
    g: &mut Graph,
    student_i2t: Var,
    student_t2i: Var,
    teacher_i2t: &Array2<f64>,
    teacher_t2i: &Array2<f64>,
) -> Var {
    let n = teacher_i2t.nrows();
    assert_eq!(g.value(student_i2t).shape(), &[n, teacher_i2t.ncols()], "distribution shapes differ");

    // KL(T||S) over the axis the distribution was normalized on; for the
    // column-normalized direction we transpose both sides first.
    let kl_rows = |g: &mut Graph, s: Var, t: &Array2<f64>| -> Var {
        let t_const = g.constant(t.clone().into_dyn());
        let t_lnt: f64 = t
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>();
        let s_safe = g.clamp_min(s, KL_EPS);
        let ln_s = g.ln(s_safe);
        let cross = g.mul(t_const, ln_s);
        let cross_sum = g.sum_all(cross);
        let neg = g.scale(cross_sum, -1.0);
        let ent = g.scalar_const(t_lnt);
        let kl_total = g.add(ent, neg); // Σ t·ln t − Σ t·ln s
        g.scale(kl_total, 1.0 / t.nrows() as f64)
    };
    let a = kl_rows(g, student_i2t, teacher_i2t);
    let st = g.transpose(student_t2i);
    let b = kl_rows(g, st, &teacher_t2i.t().to_owned());
    let sum = g.add(a, b);
    g.scale(sum, 0.5)
}

/// Evaluation form of [`distill_loss_graph`] on plain distribution arrays.
pub fn distill_loss(
    student_i2t: &Array2<f64>,
    student_t2i: &Array2<f64>,
    teacher_i2t: &Array2<f64>,
    teacher_t2i: &Array2<f64>,
) -> Result<f64> {
    if student_i2t.dim() != teacher_i2t.dim() || student_t2i.dim() != teacher_t2i.dim() {
        return Err(Error::shape("distribution shapes differ"));
    }
    let mut g = Graph::new();
    let si = g.constant(student_i2t.clone().into_dyn());
    let st = g.constant(student_t2i.clone().into_dyn());
    let loss = distill_loss_graph(&mut g, si, st, teacher_i2t, teacher_t2i);
    Ok(g.scalar_value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn singleton_distributions() {
        let e = arr2(&[[1.0, 0.0]]);
        let (p, q) = similarity_distributions(&e, &e, 3.0).unwrap();
        assert_abs_diff_eq!(p[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q[[0, 0]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_embeddings_are_uniform() {
        let e = arr2(&[[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]]);
        let (p, q) = similarity_distributions(&e, &e, 7.0).unwrap();
        for v in p.iter().chain(q.iter()) {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn matches_direct_softmax_oracle() {
        let img = unit_rows(2, 4, 1);
        let txt = unit_rows(2, 4, 2);
        let (p, q) = similarity_distributions(&img, &txt, 1.0).unwrap();
        let s = img.dot(&txt.t());
        for i in 0..2 {
            let denom: f64 = (0..2).map(|j| s[[i, j]].exp()).sum();
            for j in 0..2 {
                assert_abs_diff_eq!(p[[i, j]], s[[i, j]].exp() / denom, epsilon = 1e-7);
            }
        }
        for j in 0..2 {
            let denom: f64 = (0..2).map(|i| s[[i, j]].exp()).sum();
            for i in 0..2 {
                assert_abs_diff_eq!(q[[i, j]], s[[i, j]].exp() / denom, epsilon = 1e-7);
            }
        }
        // normalization contracts
        for row in p.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
        }
        for col in q.columns() {
            assert_abs_diff_eq!(col.sum(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn kl_zero_when_equal() {
        let p = arr2(&[[0.3, 0.7], [0.5, 0.5]]);
        let loss = distill_loss(&p, &p, &p, &p).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-10);
    }

    #[test]
    fn kl_closed_form_point_mass() {
        let teacher = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let student = arr2(&[[0.5, 0.5], [0.5, 0.5]]);
        let loss = distill_loss(&student, &student, &teacher, &teacher).unwrap();
        assert_abs_diff_eq!(loss, (2.0f64).ln(), epsilon = 1e-9);
    }

    #[test]
    fn kl_matches_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rand_dist = |rng: &mut ChaCha8Rng, by_rows: bool| -> Array2<f64> {
            let mut m = Array2::from_shape_fn((3, 3), |_| rng.gen_range(0.05..1.0));
            if by_rows {
                for mut r in m.rows_mut() {
                    let s = r.sum();
                    r.mapv_inplace(|v| v / s);
                }
            } else {
                for mut c in m.columns_mut() {
                    let s = c.sum();
                    c.mapv_inplace(|v| v / s);
                }
            }
            m
        };
        let t_r = rand_dist(&mut rng, true);
        let s_r = rand_dist(&mut rng, true);
        let t_c = rand_dist(&mut rng, false);
        let s_c = rand_dist(&mut rng, false);
        let loss = distill_loss(&s_r, &s_c, &t_r, &t_c).unwrap();
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                oracle += 0.5 / 3.0 * t_r[[i, j]] * (t_r[[i, j]] / s_r[[i, j]]).ln();
                oracle += 0.5 / 3.0 * t_c[[i, j]] * (t_c[[i, j]] / s_c[[i, j]]).ln();
            }
        }
        assert_abs_diff_eq!(loss, oracle, epsilon = 1e-7);
    }

    #[test]
    fn teacher_scale_examples() {
        assert_abs_diff_eq!(teacher_scale(100.0, 0.5), 200.0, epsilon = 1e-12);
        assert_abs_diff_eq!(teacher_scale(1.0, 0.5), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(teacher_scale(40.0, 1.0), 40.0, epsilon = 1e-12);
    }

    #[test]
    fn sharper_teacher_has_lower_row_entropy() {
        let img = unit_rows(4, 6, 20);
        let txt = unit_rows(4, 6, 21);
        let entropy = |p: &Array2<f64>| -> f64 {
            p.rows().into_iter().map(|r| -r.iter().map(|&v| v * v.ln()).sum::<f64>()).sum()
        };
        let (p1, _) = similarity_distributions(&img, &txt, 10.0).unwrap();
        let (p2, _) = similarity_distributions(&img, &txt, 20.0).unwrap();
        assert!(entropy(&p2) < entropy(&p1));
    }

    #[test]
    fn teacher_side_gets_no_gradient() {
        let img = unit_rows(3, 4, 30);
        let txt = unit_rows(3, 4, 31);
        let mut g = Graph::new();
        let si = g.leaf(img.clone().into_dyn());
        let st = g.leaf(txt.clone().into_dyn());
        let ls = g.leaf(ndarray::arr0(2.0f64.ln()).into_dyn());
        let (p, q) = similarity_distributions_graph(&mut g, si, st, ls);
        let (tp, tq) = similarity_distributions(&img, &txt, 4.0).unwrap();
        let loss = distill_loss_graph(&mut g, p, q, &tp, &tq);
        let grads = g.backward(loss);
        assert!(grads.get(si).is_some());
        assert!(grads.get(st).is_some());
        assert!(grads.get(ls).is_some());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        use crate::tensor::gradcheck::{check_grads, finite_difference};
        use crate::tensor::Arr;
        let img = unit_rows(3, 4, 40).into_dyn();
        let txt = unit_rows(3, 4, 41).into_dyn();
        let (tp, tq) = similarity_distributions(
            &unit_rows(3, 4, 42),
            &unit_rows(3, 4, 43),
            4.0,
        )
        .unwrap();
        let run = |i: &Arr| -> (Graph, Var, Var) {
            let mut g = Graph::new();
            let iv = g.leaf(i.clone());
            let tv = g.constant(txt.clone());
            let ls = g.scalar_const(1.5f64.ln());
            let (p, q) = similarity_distributions_graph(&mut g, iv, tv, ls);
            let loss = distill_loss_graph(&mut g, p, q, &tp, &tq);
            (g, iv, loss)
        };
        let (g, iv, loss) = run(&img);
        let grads = g.backward(loss);
        let num = finite_difference(|i| { let (g, _, l) = run(i); g.scalar_value(l) }, &img, 1e-6);
        check_grads(grads.get(iv).unwrap(), &num, 1e-4, 1e-9).unwrap();
    }
}
