//! Decoder-style query transformer: self-attention over the query tokens,
//! cross-attention into the projected point features on every
//! `cross_every`-th block (starting at block 0), post-norm residuals.
//!
//! PEFT hooks: LoRA on self/cross Q,K,V (optionally the FFN dense pair) and
//! trainable normalization layers; the base weights stay frozen.

use crate::config::QformerConfig;
use crate::error::Result;
use crate::graph::{Tape, Value};
use crate::nn::{multi_head_attention, AttentionIds, NormIds, PeftLinear};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

pub struct QfBlockIds {
    pub self_attn: AttentionIds,
    pub self_norm: NormIds,
    pub cross_attn: Option<AttentionIds>,
    pub cross_norm: Option<NormIds>,
    pub ffn_in: PeftLinear,
    pub ffn_out: PeftLinear,
    pub ffn_norm: NormIds,
}

pub struct QformerIds {
    pub base_queries: ParamId,
    pub embed_norm: NormIds,
    pub blocks: Vec<QfBlockIds>,
}

impl QformerIds {
    /// One query set plus point features -> refined point queries
    /// (queries × hidden).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &QformerConfig,
        y: Value,
        queries: Value,
    ) -> Result<Value> {
        let mut x = self.embed_norm.forward(tape, store, queries)?;
        for block in &self.blocks {
            let attn = multi_head_attention(tape, store, &block.self_attn, x, x, cfg.heads, None)?;
            let res = tape.add(x, attn)?;
            x = block.self_norm.forward(tape, store, res)?;

            if let (Some(cross), Some(cross_norm)) = (&block.cross_attn, &block.cross_norm) {
                let c = multi_head_attention(tape, store, cross, x, y, cfg.heads, None)?;
                let res = tape.add(x, c)?;
                x = cross_norm.forward(tape, store, res)?;
            }

            let h = block.ffn_in.forward(tape, store, x)?;
            let h = tape.gelu(h)?;
            let h = block.ffn_out.forward(tape, store, h)?;
            let res = tape.add(x, h)?;
            x = block.ffn_norm.forward(tape, store, res)?;
        }
        Ok(x)
    }
}
