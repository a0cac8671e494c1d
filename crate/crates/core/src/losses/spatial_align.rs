//! Alignment-finetuning losses: per-token cosine distance to a frozen
//! intermediate-layer teacher, and MSE between pairwise-similarity structure
//! and a sharpened locality teacher.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Mean per-token cosine distance `1 − (1/n_tok)·Σ cos(s_i, t_i)`.
///
/// `student_tokens` is `[B, n_tok, width]` on the graph; `teacher_tokens` a
/// constant of the same shape (class tokens excluded by the caller on both
/// sides). Result lies in `[0, 2]`.
pub fn core_align_loss_graph(g: &mut Graph, student_tokens: Var, teacher_tokens: &Array3<f64>) -> Var {
    assert_eq!(
        g.value(student_tokens).shape(),
        teacher_tokens.shape(),
        "student/teacher token shapes differ"
    );
    let t = g.constant(teacher_tokens.clone().into_dyn());
    let a = g.normalize_last(student_tokens, 1e-12);
    let b = g.normalize_last(t, 1e-12);
    let prod = g.mul(a, b);
    let cos = g.sum_axis_keep(prod, 2);
    let mean = g.mean_all(cos);
    let neg = g.scale(mean, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Evaluation form of [`core_align_loss_graph`] on single-sample token
/// matrices `[n_tok, width]`.
pub fn core_align_loss(student: &Array2<f64>, teacher: &Array2<f64>) -> Result<f64> {
    if student.dim() != teacher.dim() {
        return Err(Error::shape("token count mismatch"));
    }
    let s3 = student.clone().insert_axis(ndarray::Axis(0));
    let t3 = teacher.clone().insert_axis(ndarray::Axis(0));
    let mut g = Graph::new();
    let sv = g.constant(s3.into_dyn());
    let loss = core_align_loss_graph(&mut g, sv, &t3);
    Ok(g.scalar_value(loss))
}

/// Pairwise cosine similarity of tokens on the graph: `[B, n_tok, width]`
/// → `[B, n_tok, n_tok]`.
pub fn pairwise_cossim_graph(g: &mut Graph, tokens: Var) -> Var {
    let n = g.normalize_last(tokens, 1e-12);
    let nt = g.transpose(n);
    g.bmm(n, nt)
}

/// Pairwise cosine similarity of a single token matrix `[n_tok, width]`.
/// Zero-norm tokens are epsilon-guarded rather than rejected.
pub fn pairwise_cossim(tokens: &Array2<f64>) -> Array2<f64> {
    let mut g = Graph::new();
    let t3 = tokens.clone().insert_axis(ndarray::Axis(0));
    let v = g.constant(t3.into_dyn());
    let sim = pairwise_cossim_graph(&mut g, v);
    g.value(sim)
        .index_axis(ndarray::Axis(0), 0)
        .to_owned()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("similarity matrix is 2-D")
}

/// Sharpening transform `exp(t·(x − 1))` applied to teacher similarities:
/// maps `[−1, 1]` into `(0, 1]`, monotone in `x` for `t > 0`, identity-like
/// flattening at `t = 0`.
pub fn teacher_sim_transform(sim: &Array2<f64>, t: f64) -> Array2<f64> {
    sim.mapv(|x| (t * (x - 1.0)).exp())
}

/// MSE between the student's pairwise-similarity matrix and a constant
/// target (the transformed teacher similarities), averaged over all
/// `n_tok²` entries per sample.
pub fn locality_loss_graph(g: &mut Graph, student_tokens: Var, target_sims: &Array3<f64>) -> Var {
    let sim = pairwise_cossim_graph(g, student_tokens);
    assert_eq!(g.value(sim).shape(), target_sims.shape(), "similarity target shape mismatch");
    let t = g.constant(target_sims.clone().into_dyn());
    let diff = g.sub(sim, t);
    let sq = g.sqr(diff);
    g.mean_all(sq)
}

/// Evaluation form of [`locality_loss_graph`] for one sample: student tokens
/// `[n_tok, width]`, teacher similarities `[n_tok, n_tok]` (untransformed),
/// temperature `t` applied to the teacher only.
pub fn locality_loss(student: &Array2<f64>, teacher_sims: &Array2<f64>, t: f64) -> Result<f64> {
    let n = student.nrows();
    if teacher_sims.dim() != (n, n) {
        return Err(Error::shape("teacher similarity grid mismatch"));
    }
    let target = teacher_sim_transform(teacher_sims, t).insert_axis(ndarray::Axis(0));
    let mut g = Graph::new();
    let sv = g.constant(student.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let loss = locality_loss_graph(&mut g, sv, &target);
    Ok(g.scalar_value(loss))
}
