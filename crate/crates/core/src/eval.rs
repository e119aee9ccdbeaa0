//! Generative classification and caption-reproduction scoring.
//!
//! A response is correct when the object's label appears in it as a
//! case-insensitive whole word — a closed-world stand-in for the external
//! judge pipelines this artifact deliberately omits.

use crate::data::{
    SynthObject, BRIEF_INSTRUCTION, PROMPT_COMPLETION_TYPED, PROMPT_INSTRUCTION_TYPED,
};
use crate::error::Result;
use crate::lm::decode_text;
use crate::model::Model;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptKind {
    /// "What is this?"
    InstructionTyped,
    /// "This is an object of"
    CompletionTyped,
}

impl PromptKind {
    pub fn text(self) -> &'static str {
        match self {
            PromptKind::InstructionTyped => PROMPT_INSTRUCTION_TYPED,
            PromptKind::CompletionTyped => PROMPT_COMPLETION_TYPED,
        }
    }

    pub fn parse(s: &str) -> Result<PromptKind> {
        match s {
            "I" | "i" => Ok(PromptKind::InstructionTyped),
            "C" | "c" => Ok(PromptKind::CompletionTyped),
            _ => Err(crate::error::Error::Config(format!(
                "unknown prompt kind `{s}` (expected I or C)"
            ))),
        }
    }
}

/// Case-insensitive whole-word containment.
pub fn contains_whole_word(haystack: &str, needle: &str) -> bool {
    let h = haystack.to_lowercase();
    let n = needle.to_lowercase();
    let bytes = h.as_bytes();
    let mut from = 0;
    while let Some(pos) = h[from..].find(&n) {
        let start = from + pos;
        let end = start + n.len();
        let left_ok = start == 0 || !bytes[start - 1].is_ascii_alphanumeric();
        let right_ok = end == bytes.len() || !bytes[end].is_ascii_alphanumeric();
        if left_ok && right_ok {
            return true;
        }
        from = start + 1;
    }
    false
}

/// Fraction of objects whose decoded response names their shape label.
pub fn evaluate_classification<T: Real>(
    model: &Model<T>,
    objects: &[SynthObject],
    prompt: PromptKind,
    mqe_active: bool,
    max_new: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    for obj in objects {
        let ids = model.greedy_decode(&obj.cloud, prompt.text(), max_new, mqe_active)?;
        if contains_whole_word(&decode_text(&ids), obj.label()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / objects.len() as f64)
}

/// Fraction of objects whose brief caption decodes back verbatim.
pub fn caption_match_rate<T: Real>(
    model: &Model<T>,
    objects: &[SynthObject],
    mqe_active: bool,
    max_new: usize,
) -> Result<f64> {
    let mut exact = 0usize;
    for obj in objects {
        let ids = model.greedy_decode(&obj.cloud, BRIEF_INSTRUCTION, max_new, mqe_active)?;
        if decode_text(&ids) == obj.brief_caption() {
            exact += 1;
        }
    }
    Ok(exact as f64 / objects.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whole_word_matching() {
        assert!(contains_whole_word("a red sphere", "sphere"));
        assert!(contains_whole_word("A Red SPHERE.", "sphere"));
        assert!(!contains_whole_word("spheres everywhere", "sphere"));
        assert!(!contains_whole_word("hemisphere", "sphere"));
        assert!(contains_whole_word("box", "box"));
    }
}
