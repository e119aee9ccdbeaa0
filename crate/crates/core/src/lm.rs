//! Byte-level causal decoder LM with LoRA on Q/K/V and trainable norms.
//!
//! Blocks are pre-norm with a single shared norm per layer feeding both the
//! attention and the FFN branch (x + attn(n(x)) + ffn(n(x))), plus a final
//! norm — 2·hidden norm parameters per layer and 2·hidden for the final
//! norm. Token ids are raw bytes plus begin/end/pad markers; point tokens
//! occupy a contiguous span right after the begin marker and are injected
//! as rows, bypassing the embedding table.

use crate::config::LmConfig;
use crate::error::{Error, Result};
use crate::graph::{Tape, Value};
use crate::nn::{causal_mask, multi_head_attention, AttentionIds, LinearIds, NormIds};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

pub const BOS: u32 = 256;
pub const EOS: u32 = 257;
pub const PAD: u32 = 258;
pub const BYTE_VOCAB: usize = 259;

pub fn encode_text(s: &str) -> Vec<u32> {
    s.bytes().map(u32::from).collect()
}

pub fn decode_text(ids: &[u32]) -> String {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|id| **id < 256)
        .map(|id| *id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Token layout of one training or decoding sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    /// Token ids; entries inside `point_span` are PAD placeholders (point
    /// positions carry no token id).
    pub ids: Vec<u32>,
    /// (start, len) of the point-token span.
    pub point_span: (usize, usize),
    /// True exactly on generated-text positions (responses and the final
    /// end marker); prompts, questions and point positions are false.
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `[BOS][points][Q: {q}\nA: {a}[EOS]]...` with the loss mask covering
/// response bytes and each turn's end marker. Every response terminates
/// with EOS — also inside multi-round sequences — so the stop behavior is
/// identical across sample kinds.
pub fn build_turn_sequence(turns: &[(String, String)], point_count: usize) -> TokenSequence {
    let mut ids = vec![BOS];
    let mut mask = vec![false];
    ids.extend(std::iter::repeat_n(PAD, point_count));
    mask.extend(std::iter::repeat_n(false, point_count));
    for (q, a) in turns {
        for b in encode_text(&format!("Q: {q}\nA: ")) {
            ids.push(b);
            mask.push(false);
        }
        for b in encode_text(a) {
            ids.push(b);
            mask.push(true);
        }
        ids.push(EOS);
        mask.push(true);
    }
    TokenSequence {
        ids,
        point_span: (1, point_count),
        loss_mask: mask,
    }
}

/// Prompt-only prefix for greedy decoding: `[BOS][points][Q: {q}\nA: ]`.
pub fn build_prompt_sequence(instruction: &str, point_count: usize) -> TokenSequence {
    let mut ids = vec![BOS];
    ids.extend(std::iter::repeat_n(PAD, point_count));
    ids.extend(encode_text(&format!("Q: {instruction}\nA: ")));
    let len = ids.len();
    TokenSequence {
        ids,
        point_span: (1, point_count),
        loss_mask: vec![false; len],
    }
}

pub struct LmBlockIds {
    pub norm: NormIds,
    pub attn: AttentionIds,
    pub ffn_in: LinearIds,
    pub ffn_out: LinearIds,
}

pub struct LmIds {
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<LmBlockIds>,
    pub final_norm: NormIds,
    pub head: LinearIds,
}

impl LmIds {
    /// Interleaved point/text sequence -> per-position hidden states.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &LmConfig,
        seq: &TokenSequence,
        point_tokens: Value,
    ) -> Result<Value> {
        let len = seq.ids.len();
        let (span_start, span_len) = seq.point_span;
        let (pt_rows, pt_cols) = tape.shape(point_tokens);
        if pt_rows != span_len {
            return Err(Error::dim(
                "lm_forward",
                format!("point span {span_len} vs point tokens {pt_rows}"),
            ));
        }
        if pt_cols != cfg.hidden {
            return Err(Error::dim(
                "lm_forward",
                format!("point token width {pt_cols} vs hidden {}", cfg.hidden),
            ));
        }
        if len > cfg.max_seq {
            return Err(Error::Sequence {
                len,
                max: cfg.max_seq,
            });
        }

        let table = tape.param(store, self.tok_embed);
        let pre_ids: Vec<usize> = seq.ids[..span_start].iter().map(|i| *i as usize).collect();
        let post_ids: Vec<usize> = seq.ids[span_start + span_len..]
            .iter()
            .map(|i| *i as usize)
            .collect();
        let mut parts = Vec::new();
        if !pre_ids.is_empty() {
            parts.push(tape.embed(table, &pre_ids)?);
        }
        parts.push(point_tokens);
        if !post_ids.is_empty() {
            parts.push(tape.embed(table, &post_ids)?);
        }
        let tokens = tape.concat_rows(&parts)?;

        let pos_table = tape.param(store, self.pos_embed);
        let positions: Vec<usize> = (0..len).collect();
        let pos = tape.embed(pos_table, &positions)?;
        let mut x = tape.add(tokens, pos)?;

        let mask = causal_mask(tape, len)?;
        for block in &self.blocks {
            let normed = block.norm.forward(tape, store, x)?;
            let attn = multi_head_attention(
                tape,
                store,
                &block.attn,
                normed,
                normed,
                cfg.heads,
                Some(mask),
            )?;
            let h = block.ffn_in.forward(tape, store, normed)?;
            let h = tape.gelu(h)?;
            let ffn = block.ffn_out.forward(tape, store, h)?;
            let x1 = tape.add(x, attn)?;
            x = tape.add(x1, ffn)?;
        }
        self.final_norm.forward(tape, store, x)
    }

    /// Hidden states -> vocabulary logits.
    pub fn vocab_project<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        hidden_states: Value,
    ) -> Result<Value> {
        self.head.forward(tape, store, hidden_states)
    }
}

/// Deterministic argmax with ties toward the lower token id.
pub fn argmax_token<T: Real>(logits_row: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, v) in logits_row.iter().enumerate().skip(1) {
        if *v > logits_row[best] {
            best = i;
        }
    }
    best as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_roundtrips_ascii() {
        let s = "a red sphere";
        assert_eq!(decode_text(&encode_text(s)), s);
    }

    #[test]
    fn turn_sequence_masks_only_responses() {
        let turns = vec![
            ("What is this?".to_string(), "a red sphere".to_string()),
            ("what color is it?".to_string(), "red".to_string()),
        ];
        let seq = build_turn_sequence(&turns, 4);
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(&seq.ids[1..5], &[PAD; 4]);
        assert_eq!(seq.point_span, (1, 4));
        // no prompt/point position is masked in
        for (i, id) in seq.ids.iter().enumerate() {
            if seq.loss_mask[i] {
                assert!(*id == EOS || *id < 256);
            }
        }
        // every response byte is masked in
        let text: Vec<u32> = encode_text("a red sphere");
        let pos = seq
            .ids
            .windows(text.len())
            .position(|w| w == text.as_slice())
            .unwrap();
        assert!(seq.loss_mask[pos..pos + text.len()].iter().all(|m| *m));
        // question bytes are masked out
        let q: Vec<u32> = encode_text("What is this?");
        let qpos = seq
            .ids
            .windows(q.len())
            .position(|w| w == q.as_slice())
            .unwrap();
        assert!(seq.loss_mask[qpos..qpos + q.len()].iter().all(|m| !*m));
        assert_eq!(*seq.ids.last().unwrap(), EOS);
        assert!(*seq.loss_mask.last().unwrap());
    }

    #[test]
    fn prompt_sequence_is_fully_unmasked() {
        let seq = build_prompt_sequence("What is this?", 8);
        assert!(seq.loss_mask.iter().all(|m| !*m));
        assert_eq!(seq.point_span, (1, 8));
        let tail = decode_text(&seq.ids);
        assert!(tail.ends_with("A: "), "{tail:?}");
    }

    #[test]
    fn argmax_ties_break_low() {
        assert_eq!(argmax_token(&[0.5f64, 0.5, 0.1]), 0);
        assert_eq!(argmax_token(&[0.1f64, 0.7, 0.7]), 1);
    }
}
