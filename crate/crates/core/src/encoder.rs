//! Causal transformer over (optionally re-weighted) history embeddings.
//!
//! A learned begin-of-sequence state is prepended, so the output has `L + 1`
//! rows for `L` history items: row `n` has attended to exactly the first `n`
//! items. Row 0 is the empty-prefix state used by the counterfactual
//! prediction for the first item; the guidance vector is the row of the last
//! non-padding item.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Matrix;

/// Embedding-table row reserved for padding. Always zero.
pub const PAD: usize = 0;
/// Embedding-table row holding the learned null guidance `φ`.
pub const NULL_GUIDANCE: usize = 1;
pub const NUM_SPECIAL: usize = 2;

#[inline]
pub fn item_row(item: usize) -> usize {
    item + NUM_SPECIAL
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderParams {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub max_len: usize,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub params: EncoderParams,
    positions: ParamId,
    bos: ParamId,
    layers: Vec<LayerIds>,
    final_g: ParamId,
    final_b: ParamId,
}

pub(crate) fn init_weight<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Matrix {
    let std = 1.0 / (fan_in as f64).sqrt();
    normal_matrix(rng, fan_in, fan_out, std)
}

pub(crate) fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

/// Dropout randomness for a training forward pass.
pub struct DropoutCtx<'r, R: Rng + ?Sized> {
    pub rng: &'r mut R,
    pub p: f64,
}

impl SequenceEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, params: EncoderParams, rng: &mut R) -> Self {
        let d = params.d;
        assert!(d.is_multiple_of(params.heads), "d must be divisible by heads");
        let positions = store.add("encoder.positions", normal_matrix(rng, params.max_len + 1, d, 0.02));
        let bos = store.add("encoder.bos", normal_matrix(rng, 1, d, 1.0 / (d as f64).sqrt()));
        let mut layers = Vec::with_capacity(params.layers);
        for l in 0..params.layers {
            let p = |n: &str| format!("encoder.layer{l}.{n}");
            layers.push(LayerIds {
                ln1_g: store.add(p("ln1.gain"), Matrix::filled(1, d, 1.0)),
                ln1_b: store.add(p("ln1.bias"), Matrix::zeros(1, d)),
                qkv_w: store.add(p("qkv.weight"), init_weight(rng, d, 3 * d)),
                qkv_b: store.add(p("qkv.bias"), Matrix::zeros(1, 3 * d)),
                out_w: store.add(p("out.weight"), init_weight(rng, d, d)),
                out_b: store.add(p("out.bias"), Matrix::zeros(1, d)),
                ln2_g: store.add(p("ln2.gain"), Matrix::filled(1, d, 1.0)),
                ln2_b: store.add(p("ln2.bias"), Matrix::zeros(1, d)),
                ff1_w: store.add(p("ff1.weight"), init_weight(rng, d, params.ffn_hidden)),
                ff1_b: store.add(p("ff1.bias"), Matrix::zeros(1, params.ffn_hidden)),
                ff2_w: store.add(p("ff2.weight"), init_weight(rng, params.ffn_hidden, d)),
                ff2_b: store.add(p("ff2.bias"), Matrix::zeros(1, d)),
            });
        }
        let final_g = store.add("encoder.final.gain", Matrix::filled(1, d, 1.0));
        let final_b = store.add("encoder.final.bias", Matrix::zeros(1, d));
        SequenceEncoder {
            params,
            positions,
            bos,
            layers,
            final_g,
            final_b,
        }
    }

    /// Encodes embedding-table `rows` (use [`PAD`] for padding), each scaled
    /// by the matching entry of `weights` when given. Over-length inputs keep
    /// their most recent `max_len` tokens.
    ///
    /// Returns `(hidden, guidance_row)`: hidden states `(L+1)×d` including the
    /// begin-of-sequence row, and the index of the guidance row.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        table: ParamId,
        rows: &[usize],
        weights: Option<&[f64]>,
        mut dropout: Option<DropoutCtx<'_, R>>,
    ) -> (Var, usize) {
        let start = rows.len().saturating_sub(self.params.max_len);
        let rows = &rows[start..];
        let weights = weights.map(|w| &w[start..]);
        let len = rows.len();
        let d = self.params.d;
        let heads = self.params.heads;
        let dh = d / heads;

        let mut padding = vec![false; len + 1];
        for (i, &r) in rows.iter().enumerate() {
            padding[i + 1] = r == PAD;
        }
        let last_real = rows.iter().rposition(|&r| r != PAD).map_or(0, |i| i + 1);

        let items = tape.gather(table, rows);
        let items = match weights {
            Some(w) => tape.scale_rows(items, w),
            None => items,
        };
        let bos = tape.param(self.bos);
        let tokens = tape.concat_rows(&[bos, items]);
        let pos_idx: Vec<usize> = (0..=len).collect();
        let pos = tape.gather(self.positions, &pos_idx);
        let mut x = tape.add(tokens, pos);
        let any_padding = padding.iter().any(|&p| p);
        let key_mask = any_padding.then_some(&padding[..]);
        let scale = 1.0 / (dh as f64).sqrt();

        for layer in &self.layers {
            let g1 = tape.param(layer.ln1_g);
            let b1 = tape.param(layer.ln1_b);
            let normed = tape.layer_norm(x, g1, b1);
            let qkv = tape.linear(normed, layer.qkv_w, layer.qkv_b);
            let mut head_outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let q = tape.slice_cols(qkv, h * dh, dh);
                let k = tape.slice_cols(qkv, d + h * dh, dh);
                let v = tape.slice_cols(qkv, 2 * d + h * dh, dh);
                let scores = tape.matmul_t(q, k);
                let scores = tape.scale(scores, scale);
                let attn = tape.causal_softmax(scores, key_mask);
                head_outs.push(tape.matmul(attn, v));
            }
            let joined = if heads == 1 {
                head_outs[0]
            } else {
                tape.concat_cols(&head_outs)
            };
            let attn_out = tape.linear(joined, layer.out_w, layer.out_b);
            let attn_out = apply_dropout(tape, attn_out, dropout.as_mut());
            x = tape.add(x, attn_out);

            let g2 = tape.param(layer.ln2_g);
            let b2 = tape.param(layer.ln2_b);
            let normed = tape.layer_norm(x, g2, b2);
            let hidden = tape.linear(normed, layer.ff1_w, layer.ff1_b);
            let hidden = tape.silu(hidden);
            let ff = tape.linear(hidden, layer.ff2_w, layer.ff2_b);
            let ff = apply_dropout(tape, ff, dropout.as_mut());
            x = tape.add(x, ff);
        }
        let gf = tape.param(self.final_g);
        let bf = tape.param(self.final_b);
        (tape.layer_norm(x, gf, bf), last_real)
    }
}

fn apply_dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, ctx: Option<&mut DropoutCtx<'_, R>>) -> Var {
    let Some(ctx) = ctx else { return x };
    if ctx.p <= 0.0 {
        return x;
    }
    let (rows, cols) = tape.value(x).shape();
    let keep = 1.0 - ctx.p;
    let mask: Vec<f64> = (0..rows * cols)
        .map(|_| if ctx.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = tape.constant(Matrix::from_vec(rows, cols, mask));
    tape.mul(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded_rng, CardRng};

    fn setup() -> (ParamStore, ParamId, SequenceEncoder) {
        let mut rng = seeded_rng(3, "init");
        let mut store = ParamStore::new();
        let mut table = normal_matrix(&mut rng, 12, 8, 0.5);
        table.row_mut(PAD).fill(0.0);
        let table = store.add("table", table);
        let enc = SequenceEncoder::new(
            &mut store,
            EncoderParams {
                d: 8,
                layers: 2,
                heads: 2,
                ffn_hidden: 16,
                dropout: 0.0,
                max_len: 10,
            },
            &mut rng,
        );
        (store, table, enc)
    }

    fn hidden(store: &ParamStore, table: ParamId, enc: &SequenceEncoder, rows: &[usize], w: Option<&[f64]>) -> (Matrix, usize) {
        let mut tape = Tape::new(store);
        let (h, g) = enc.encode::<CardRng>(&mut tape, table, rows, w, None);
        (tape.value(h).clone(), g)
    }

    #[test]
    fn changing_last_item_leaves_earlier_states_bit_identical() {
        let (store, table, enc) = setup();
        let (a, _) = hidden(&store, table, &enc, &[2, 3, 4, 5], None);
        let (b, _) = hidden(&store, table, &enc, &[2, 3, 4, 9], None);
        for n in 0..4 {
            assert_eq!(a.row(n), b.row(n), "row {n}");
        }
        assert_ne!(a.row(4), b.row(4));
    }

    #[test]
    fn right_padding_does_not_move_guidance() {
        let (store, table, enc) = setup();
        let (a, ga) = hidden(&store, table, &enc, &[2, 3, 4], None);
        assert_eq!(ga, 3);
        for pads in 1..4 {
            let mut rows = vec![2, 3, 4];
            rows.extend(std::iter::repeat_n(PAD, pads));
            let (b, gb) = hidden(&store, table, &enc, &rows, None);
            assert_eq!(gb, 3);
            for (x, y) in a.row(ga).iter().zip(b.row(gb)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_weights_match_unweighted() {
        let (store, table, enc) = setup();
        let (a, _) = hidden(&store, table, &enc, &[5, 6, 7], None);
        let (b, _) = hidden(&store, table, &enc, &[5, 6, 7], Some(&[1.0, 1.0, 1.0]));
        assert_eq!(a, b);
    }

    #[test]
    fn over_length_input_is_left_truncated() {
        let (store, table, enc) = setup();
        let long: Vec<usize> = (0..14).map(|i| 2 + i % 10).collect();
        let (a, ga) = hidden(&store, table, &enc, &long, None);
        let (b, gb) = hidden(&store, table, &enc, &long[4..], None);
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        assert_eq!(a.rows(), 11);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (store, table, enc) = setup();
        let a = hidden(&store, table, &enc, &[2, 9, 4], None);
        let b = hidden(&store, table, &enc, &[2, 9, 4], None);
        assert_eq!(a, b);
    }
}
