//! Shared building blocks: linear layers, LoRA-adapted projections,
//! normalization handles, and multi-head attention assembled from tape
//! primitives.

use crate::error::Result;
use crate::graph::{Tape, Value};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearIds {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Value,
    ) -> Result<Value> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoraIds {
    pub a: ParamId,
    pub b: ParamId,
    /// alpha / rank, applied multiplicatively to the adapter branch.
    pub scale: f64,
}

/// A frozen base projection with an optional low-rank adapter.
#[derive(Clone, Copy, Debug)]
pub struct PeftLinear {
    pub base: LinearIds,
    pub lora: Option<LoraIds>,
}

impl PeftLinear {
    pub fn plain(base: LinearIds) -> Self {
        PeftLinear { base, lora: None }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Value,
    ) -> Result<Value> {
        let y = self.base.forward(tape, store, x)?;
        match &self.lora {
            None => Ok(y),
            Some(l) => {
                let a = tape.param(store, l.a);
                let b = tape.param(store, l.b);
                let down = tape.matmul(x, a)?;
                let up = tape.matmul(down, b)?;
                let delta = tape.scale(up, T::from_f64(l.scale))?;
                tape.add(y, delta)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl NormIds {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Value,
    ) -> Result<Value> {
        let gain = tape.param(store, self.gain);
        let bias = tape.param(store, self.bias);
        tape.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub q: PeftLinear,
    pub k: PeftLinear,
    pub v: PeftLinear,
    pub o: PeftLinear,
}

/// Multi-head scaled dot-product attention. `mask`, when present, is added
/// to every head's score matrix before the softmax (0 / -1e9 entries).
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    ids: &AttentionIds,
    x_q: Value,
    x_kv: Value,
    heads: usize,
    mask: Option<Value>,
) -> Result<Value> {
    let q = ids.q.forward(tape, store, x_q)?;
    let k = ids.k.forward(tape, store, x_kv)?;
    let v = ids.v.forward(tape, store, x_kv)?;
    let (_, hidden) = tape.shape(q);
    let dh = hidden / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut ctx_heads = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_tb(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let scores = match mask {
            Some(m) => tape.add(scores, m)?,
            None => scores,
        };
        let attn = tape.softmax_rows(scores)?;
        ctx_heads.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat_cols(&ctx_heads)?;
    ids.o.forward(tape, store, ctx)
}

/// Additive causal mask: 0 at or below the diagonal, -1e9 above it.
pub fn causal_mask<T: Real>(tape: &mut Tape<T>, len: usize) -> Result<Value> {
    let neg = T::from_f64(-1e9);
    let mut data = vec![T::ZERO; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = neg;
        }
    }
    tape.constant(data, len, len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ModuleTag, PeftKind, TensorDecl};

    fn tiny_attention_store() -> (ParamStore<f64>, AttentionIds) {
        // hidden 2, one head, hand-set weights
        let mut decls = Vec::new();
        for name in ["q", "k", "v", "o"] {
            decls.push(TensorDecl {
                path: format!("{name}.w"),
                shape: vec![2, 2],
                module: ModuleTag::LmBase,
                kind: PeftKind::Base,
                init: Init::Zeros,
            });
            decls.push(TensorDecl {
                path: format!("{name}.b"),
                shape: vec![2],
                module: ModuleTag::LmBase,
                kind: PeftKind::Base,
                init: Init::Zeros,
            });
        }
        let mut store = ParamStore::init(&decls, 0).unwrap();
        // identity projections
        for i in [0, 2, 4, 6] {
            store
                .data_mut(ParamId(i))
                .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        }
        let lin = |i: usize| LinearIds {
            w: ParamId(i),
            b: ParamId(i + 1),
        };
        let ids = AttentionIds {
            q: PeftLinear::plain(lin(0)),
            k: PeftLinear::plain(lin(2)),
            v: PeftLinear::plain(lin(4)),
            o: PeftLinear::plain(lin(6)),
        };
        (store, ids)
    }

    /// Straight-line transcription of one attention block at head count 1,
    /// identity projections: out[i] = sum_j softmax(q_i · k / sqrt(2))_j v_j.
    #[test]
    fn attention_matches_hand_evaluation() {
        let (store, ids) = tiny_attention_store();
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![0.3, -0.7, 1.1, 0.4], 2, 2).unwrap();
        let out = multi_head_attention(&mut tape, &store, &ids, x, x, 1, None).unwrap();

        let rows = [[0.3, -0.7], [1.1, 0.4]];
        let scale = 1.0 / 2.0f64.sqrt();
        let mut expect = [[0.0; 2]; 2];
        for i in 0..2 {
            let s0 = (rows[i][0] * rows[0][0] + rows[i][1] * rows[0][1]) * scale;
            let s1 = (rows[i][0] * rows[1][0] + rows[i][1] * rows[1][1]) * scale;
            let mx = s0.max(s1);
            let (e0, e1) = ((s0 - mx).exp(), (s1 - mx).exp());
            let z = e0 + e1;
            for c in 0..2 {
                expect[i][c] = (e0 * rows[0][c] + e1 * rows[1][c]) / z;
            }
        }
        let got = tape.data(out);
        for i in 0..2 {
            for c in 0..2 {
                assert!(
                    (got[i * 2 + c] - expect[i][c]).abs() < 1e-14,
                    "({i},{c}): {} vs {}",
                    got[i * 2 + c],
                    expect[i][c]
                );
            }
        }
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        let (store, ids) = tiny_attention_store();
        let run = |x2: f64| {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(vec![0.5, 0.1, x2, -0.2], 2, 2).unwrap();
            let m = causal_mask(&mut tape, 2).unwrap();
            let out = multi_head_attention(&mut tape, &store, &ids, x, x, 1, Some(m)).unwrap();
            tape.data(out).to_vec()
        };
        let a = run(1.0);
        let b = run(-3.0);
        // row 0 may not depend on row 1
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(a[1].to_bits(), b[1].to_bits());
        assert_ne!(a[2].to_bits(), b[2].to_bits());
    }
}
