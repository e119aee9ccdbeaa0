//! Configuration-only ablation surface: every studied axis is reachable by
//! overriding profile keys, never by code edits. Each axis runs one
//! training step per variant on a fixed synthetic batch and fingerprints
//! the logits of a fixed probe so computation differences are observable.

use crate::config::{Config, RawConfig};
use crate::data::{gen_objects, Dataset};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::lm::build_turn_sequence;
use crate::model::Model;
use crate::optim::AdamW;
use crate::real::Real;
use crate::train::{StagePlan, Trainer};

pub const AXES: [&str; 7] = [
    "stages",
    "mqe-stage",
    "qformer-peft",
    "experts",
    "proj-depth",
    "router",
    "stage4-set",
];

#[derive(Clone, Debug)]
pub struct VariantOutcome {
    pub variant: String,
    /// Loss of the single smoke step (last stage stepped).
    pub step_loss: f64,
    /// FNV over the probe logits bits after the step.
    pub fingerprint: u64,
}

/// Axes whose variants must produce different probe logits.
pub fn axis_requires_distinct_logits(axis: &str) -> bool {
    matches!(axis, "experts" | "proj-depth" | "router")
}

/// (variant name, config overrides, stage whose step is smoked)
type Variant = (String, Vec<(String, String)>, usize);

fn variants_for(axis: &str) -> Result<Vec<Variant>> {
    // (name, overrides, stage whose step to smoke)
    let v = |name: &str, kv: &[(&str, &str)], stage: usize| {
        (
            name.to_string(),
            kv.iter()
                .map(|(k, w)| (k.to_string(), w.to_string()))
                .collect(),
            stage,
        )
    };
    Ok(match axis {
        "stages" => vec![
            v("I", &[("stages.include", "1")], 1),
            v("I-II", &[("stages.include", "1,2")], 2),
            v("I-III", &[("stages.include", "1,2,3")], 3),
            v("I-IV", &[("stages.include", "1,2,3,4")], 4),
            v("II-IV", &[("stages.include", "2,3,4")], 2),
        ],
        "mqe-stage" => (1..=4)
            .map(|s| v(&format!("stage-{s}"), &[("mqe.stage", &s.to_string())], s))
            .collect(),
        "qformer-peft" => vec![
            v("frozen", &[("qformer.peft", "")], 2),
            v("lora_qkv", &[("qformer.peft", "lora_qkv")], 2),
            v(
                "lora_qkv+dense",
                &[("qformer.peft", "lora_qkv,lora_dense")],
                2,
            ),
            v("lora_qkv+norms", &[("qformer.peft", "lora_qkv,norms")], 2),
            v(
                "lora_qkv+dense+norms",
                &[("qformer.peft", "lora_qkv,lora_dense,norms")],
                2,
            ),
        ],
        "experts" => [1usize, 3, 8]
            .iter()
            .map(|k| v(&format!("k={k}"), &[("mqe.experts", &k.to_string())], 4))
            .collect(),
        "proj-depth" => [1usize, 2, 3]
            .iter()
            .map(|d| {
                v(
                    &format!("depth={d}"),
                    &[("pcproj.depth", &d.to_string())],
                    1,
                )
            })
            .collect(),
        "router" => ["constant", "soft", "sparse"]
            .iter()
            .map(|m| v(m, &[("mqe.mode", m)], 4))
            .collect(),
        "stage4-set" => vec![
            v("mqe", &[("stage4.trainable", "")], 4),
            v("mqe+qf", &[("stage4.trainable", "qformer_peft")], 4),
            v(
                "mqe+qf+mproj",
                &[("stage4.trainable", "qformer_peft,modality_projector")],
                4,
            ),
            v(
                "mqe+qf+mproj+lm",
                &[(
                    "stage4.trainable",
                    "qformer_peft,modality_projector,lm_peft",
                )],
                4,
            ),
            v(
                "all",
                &[(
                    "stage4.trainable",
                    "pc_projection,qformer_peft,modality_projector,lm_peft",
                )],
                4,
            ),
        ],
        _ => {
            return Err(Error::Config(format!(
                "unknown ablation axis `{axis}` (expected one of {})",
                AXES.join(", ")
            )))
        }
    })
}

/// Run one axis: for each variant, a fresh model from the shared seed, one
/// training step under the named stage's manifest, then the probe.
pub fn run_axis(base: &Config, axis: &str) -> Result<Vec<VariantOutcome>> {
    let variants = variants_for(axis)?;
    let objects = gen_objects(4, base.model.encoder.points, base.seed ^ 0x0B);
    let mut outcomes = Vec::new();
    for (name, overrides, stage) in variants {
        let mut raw = RawConfig::default();
        for (k, w) in &overrides {
            raw.set(k, w);
        }
        let cfg = base.with_overrides(&raw)?;
        let dataset = Dataset::in_memory(&objects, cfg.seed);
        let model: Model<f32> = Model::new(&cfg)?;
        let mut trainer = Trainer::new(&cfg, model);

        let plan = StagePlan::from_config(&cfg, stage)?;
        crate::ledger::apply_stage_manifest(&mut trainer.model.store, &plan.trainable)?;
        let mut optimizer = AdamW::new(cfg.adam, &trainer.model.store);
        let mut stream =
            crate::data::mixed_batches(&dataset, &cfg.data, &plan.kinds, cfg.seed ^ 0x51)?;
        let batch = stream.next().expect("infinite stream");
        let lr = plan.schedule.lr_at(0)?;
        let step_loss =
            trainer.train_step(&dataset, &batch, &mut optimizer, lr, plan.mqe_active, 0)?;

        let fingerprint = probe_fingerprint(&trainer.model, &objects, plan.mqe_active)?;
        outcomes.push(VariantOutcome {
            variant: name,
            step_loss,
            fingerprint,
        });
    }
    Ok(outcomes)
}

fn probe_fingerprint<T: Real>(
    model: &Model<T>,
    objects: &[crate::data::SynthObject],
    mqe_active: bool,
) -> Result<u64> {
    let seq = build_turn_sequence(
        &[("What is this?".into(), "probe".into())],
        model.point_token_count(),
    );
    let mut tape = Tape::new();
    let logits = model.logits_for(&mut tape, &objects[0].cloud, &seq, mqe_active)?;
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for v in tape.data(logits) {
        h ^= v.to_bits_u64();
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn unknown_axis_rejected() {
        let cfg = Config::desk();
        assert!(run_axis(&cfg, "nonsense").is_err());
    }

    #[test]
    fn router_axis_produces_distinct_logits() {
        let cfg = Config::desk();
        let out = run_axis(&cfg, "router").unwrap();
        assert_eq!(out.len(), 3);
        assert_ne!(out[0].fingerprint, out[1].fingerprint);
        assert_ne!(out[1].fingerprint, out[2].fingerprint);
        assert_ne!(out[0].fingerprint, out[2].fingerprint);
    }
}
