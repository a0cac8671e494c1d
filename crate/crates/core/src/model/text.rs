//! Causal text transformer with EOS-position pooling.

use ndarray::{Array2, IxDyn};

use crate::error::{Error, Result};
use crate::model::{transformer_block, BlockCtx, Bound, Model, TextConfig};
use crate::tensor::{Arr, Graph, Var};

/// Tokenized captions padded to the configured context length.
#[derive(Debug, Clone)]
pub struct TextBatch {
    /// `[B, context_len]` token ids.
    pub token_ids: Array2<usize>,
    /// Index of the EOS token per row; the embedding is read there.
    pub eos_positions: Vec<usize>,
}

impl TextBatch {
    pub fn validate(&self, cfg: &TextConfig) -> Result<()> {
        let (b, l) = self.token_ids.dim();
        if l != cfg.context_len {
            return Err(Error::shape(format!(
                "token rows have length {l}, config says {}",
                cfg.context_len
            )));
        }
        if self.eos_positions.len() != b {
            return Err(Error::shape("eos_positions count != batch size"));
        }
        for (i, &p) in self.eos_positions.iter().enumerate() {
            if p >= l {
                return Err(Error::shape(format!("row {i}: EOS position {p} beyond context {l}")));
            }
        }
        if let Some(&bad) = self.token_ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::data(format!("token id {bad} outside vocab {}", cfg.vocab_size)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.token_ids.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Additive causal mask `[L, L]`: 0 at or below the diagonal, a large
/// negative number above it.
fn causal_mask(l: usize) -> Arr {
    Arr::from_shape_fn(IxDyn(&[l, l]), |ix| if ix[1] > ix[0] { -1e9 } else { 0.0 })
}

/// Run the text encoder inside `g`; result is `[B, clip_dim]`, not yet
/// normalized.
pub fn text_forward(g: &mut Graph, bound: &Bound, cfg: &TextConfig, batch: &TextBatch) -> Result<Var> {
    cfg.validate()?;
    batch.validate(cfg)?;
    let (b, l) = batch.token_ids.dim();
    let flat_ids: Vec<usize> = batch.token_ids.iter().copied().collect();
    let table = bound.var("t.tok");
    let rows = g.gather_rows(table, &flat_ids); // [B*L, width]
    let mut x = g.reshape(rows, &[b, l, cfg.width]);
    let pos = bound.var("t.pos");
    let pos_row = g.reshape(pos, &[1, cfg.context_len, cfg.width]);
    x = g.add(x, pos_row);

    let mask = g.constant(causal_mask(l));
    for i in 1..=cfg.depth {
        let ctx = BlockCtx {
            prefix: format!("t.blk{i}"),
            heads: cfg.heads,
            rope: None,
            attn_mask: Some(mask),
            drop_path: None,
        };
        x = transformer_block(g, bound, &ctx, x);
    }
    let gamma = bound.var("t.ln_f.g");
    let beta = bound.var("t.ln_f.b");
    let normed = g.layer_norm(x, gamma, beta, 1e-5);
    let eos = g.take_per_row(normed, &batch.eos_positions); // [B, width]
    let proj = bound.var("t.proj");
    Ok(g.matmul(eos, proj))
}

/// Evaluation-mode encode returning unit-norm embeddings `[B, clip_dim]`.
pub fn encode_texts(model: &Model, batch: &TextBatch) -> Result<Array2<f64>> {
    let mut g = Graph::new();
    let bound = model.params.bind(&mut g, false);
    let raw = text_forward(&mut g, &bound, &model.cfg.text, batch)?;
    let normed = g.normalize_last(raw, 1e-12);
    g.value(normed)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::model::vision::tests::tiny_config;
    use approx::assert_abs_diff_eq;

    fn batch_of(rows: &[&[usize]], l: usize) -> TextBatch {
        let b = rows.len();
        let mut ids = Array2::<usize>::zeros((b, l));
        let mut eos = Vec::new();
        for (i, row) in rows.iter().enumerate() {
            for (j, &t) in row.iter().enumerate() {
                ids[[i, j]] = t;
            }
            eos.push(row.len() - 1);
        }
        TextBatch { token_ids: ids, eos_positions: eos }
    }

    #[test]
    fn identical_rows_identical_embeddings() {
        let model = init_model(&tiny_config(16), 21).unwrap();
        let batch = batch_of(&[&[5, 9, 2, 1], &[5, 9, 2, 1]], 8);
        let e = encode_texts(&model, &batch).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let model = init_model(&tiny_config(16), 22).unwrap();
        let batch = batch_of(&[&[3, 4, 1], &[7, 7, 7, 7, 1]], 8);
        let e = encode_texts(&model, &batch).unwrap();
        for row in e.rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn swapping_rows_swaps_outputs() {
        let model = init_model(&tiny_config(16), 23).unwrap();
        let ab = batch_of(&[&[3, 4, 1], &[6, 2, 8, 1]], 8);
        let ba = batch_of(&[&[6, 2, 8, 1], &[3, 4, 1]], 8);
        let e1 = encode_texts(&model, &ab).unwrap();
        let e2 = encode_texts(&model, &ba).unwrap();
        assert_eq!(e1.row(0), e2.row(1));
        assert_eq!(e1.row(1), e2.row(0));
    }

    #[test]
    fn causality_padding_after_eos_is_ignored() {
        let model = init_model(&tiny_config(16), 24).unwrap();
        let mut a = batch_of(&[&[3, 4, 1]], 8);
        let mut b = batch_of(&[&[3, 4, 1]], 8);
        // change tokens strictly after the EOS position; with causal
        // attention the EOS activation cannot see them
        a.token_ids[[0, 5]] = 9;
        b.token_ids[[0, 5]] = 17;
        let e1 = encode_texts(&model, &a).unwrap();
        let e2 = encode_texts(&model, &b).unwrap();
        for (x, y) in e1.iter().zip(e2.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_bad_eos() {
        let model = init_model(&tiny_config(16), 25).unwrap();
        let mut batch = batch_of(&[&[3, 4, 1]], 8);
        batch.eos_positions[0] = 8;
        assert!(encode_texts(&model, &batch).is_err());
    }
}
