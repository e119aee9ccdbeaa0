//! Finite-difference verification of the reverse pass over every trainable
//! block, end to end through the full pipeline loss.
//!
//! Runs in f64 on desk dimensions. All checked blocks are marked trainable
//! for the check (including the embedding tables, which the stage plans
//! normally freeze) and jittered off their degenerate initial values so
//! zero-initialized LoRA B factors do not make the comparison vacuous.
//! Within each tensor the coordinates with the largest analytic gradients
//! are compared against central differences.

use crate::config::Config;
use crate::data::{gen_objects, SynthObject};
use crate::error::Result;
use crate::graph::Tape;
use crate::lm::build_turn_sequence;
use crate::model::Model;
use crate::params::{ModuleTag, ParamId, PeftKind};
use crate::rng::Rng;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub tensors: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-3)
}

/// Checked blocks, in report order.
fn blocks(model: &Model<f64>) -> Vec<(String, Vec<ParamId>)> {
    let mut out: Vec<(String, Vec<ParamId>)> = vec![
        ("pc_projection".into(), vec![]),
        ("modality_projector".into(), vec![]),
        ("qformer_lora".into(), vec![]),
        ("qformer_norms".into(), vec![]),
        ("expert_queries".into(), vec![]),
        ("router_mlp".into(), vec![]),
        ("lm_lora".into(), vec![]),
        ("lm_norms".into(), vec![]),
        ("embeddings".into(), vec![]),
    ];
    for (i, e) in model.store.entries().iter().enumerate() {
        let id = ParamId(i);
        let slot = match (e.decl.module, e.decl.kind) {
            (ModuleTag::PcProjection, _) => 0,
            (ModuleTag::ModalityProjector, _) => 1,
            (ModuleTag::QformerPeft, PeftKind::LoraA | PeftKind::LoraB) => 2,
            (ModuleTag::QformerPeft, PeftKind::Norm) => 3,
            (ModuleTag::Mqe, PeftKind::QueryExpert) => 4,
            (ModuleTag::Mqe, PeftKind::Router) => 5,
            (ModuleTag::LmPeft, PeftKind::LoraA | PeftKind::LoraB) => 6,
            (ModuleTag::LmPeft, PeftKind::Norm) => 7,
            _ => {
                if e.decl.path == "lm.tok_embed" || e.decl.path == "lm.pos_embed" {
                    8
                } else {
                    continue;
                }
            }
        };
        out[slot].1.push(id);
    }
    out
}

/// Run the suite; every block must come back with max_rel_err below the
/// caller's tolerance (the acceptance gate uses 1e-6).
pub fn run(cfg: &Config, seed: u64, coords_per_tensor: usize) -> Result<Vec<BlockReport>> {
    let mut model: Model<f64> = Model::with_seed(&cfg.model, seed)?;
    let blocks = blocks(&model);

    // the check runs with every listed block trainable and the expert
    // mixture active, so gradients flow through the router and experts
    for (_, ids) in &blocks {
        for id in ids {
            model.store.set_trainable(*id, true);
        }
    }
    // move off degenerate init values (zero LoRA B, unit gains)
    let mut rng = Rng::derive(seed, "gradcheck.jitter");
    for (_, ids) in &blocks {
        for id in ids {
            let data = model.store.data_mut(*id);
            for v in data.iter_mut() {
                *v += rng.normal() * 0.02;
            }
        }
    }

    let objects: Vec<SynthObject> = gen_objects(1, cfg.model.encoder.points, seed ^ 0xA5);
    let obj = &objects[0];
    let seq = build_turn_sequence(
        &[("What is this?".into(), obj.brief_caption())],
        model.point_token_count(),
    );
    let cloud = obj.cloud.clone();

    let eval_loss = |model: &Model<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let logits = model.logits_for(&mut tape, &cloud, &seq, true)?;
        let len = seq.ids.len();
        let targets: Vec<usize> = (0..len - 1).map(|i| seq.ids[i + 1] as usize).collect();
        let mask: Vec<bool> = (0..len - 1).map(|i| seq.loss_mask[i + 1]).collect();
        let head = tape.slice_rows_for_loss(logits, len - 1)?;
        let loss = tape.cross_entropy_masked(head, &targets, &mask)?;
        Ok(tape.data(loss)[0])
    };

    // analytic gradients once
    model.store.zero_grad();
    {
        let mut tape = Tape::new();
        let logits = model.logits_for(&mut tape, &cloud, &seq, true)?;
        let len = seq.ids.len();
        let targets: Vec<usize> = (0..len - 1).map(|i| seq.ids[i + 1] as usize).collect();
        let mask: Vec<bool> = (0..len - 1).map(|i| seq.loss_mask[i + 1]).collect();
        let head = tape.slice_rows_for_loss(logits, len - 1)?;
        let loss = tape.cross_entropy_masked(head, &targets, &mask)?;
        tape.backward(loss, &mut model.store)?;
    }

    let mut reports = Vec::new();
    for (name, ids) in &blocks {
        let mut max_rel = 0.0f64;
        let mut checked = 0usize;
        for id in ids {
            // largest-gradient coordinates are the informative ones
            let grads = model.store.grad(*id).to_vec();
            let mut order: Vec<usize> = (0..grads.len()).collect();
            order.sort_by(|a, b| grads[*b].abs().partial_cmp(&grads[*a].abs()).unwrap());
            for coord in order.into_iter().take(coords_per_tensor) {
                let ad = grads[coord];
                let orig = model.store.data(*id)[coord];
                model.store.data_mut(*id)[coord] = orig + FD_STEP;
                let up = eval_loss(&model)?;
                model.store.data_mut(*id)[coord] = orig - FD_STEP;
                let down = eval_loss(&model)?;
                model.store.data_mut(*id)[coord] = orig;
                let fd = (up - down) / (2.0 * FD_STEP);
                max_rel = max_rel.max(rel_err(ad, fd));
                checked += 1;
            }
        }
        reports.push(BlockReport {
            name: name.clone(),
            tensors: ids.len(),
            coords_checked: checked,
            max_rel_err: max_rel,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn desk_blocks_match_finite_differences() {
        let cfg = Config::desk();
        let reports = run(&cfg, 7, 2).unwrap();
        assert_eq!(reports.len(), 9);
        for r in &reports {
            assert!(r.tensors > 0, "block {} is empty", r.name);
            assert!(
                r.max_rel_err < 1e-6,
                "block {}: max rel err {}",
                r.name,
                r.max_rel_err
            );
        }
    }
}
