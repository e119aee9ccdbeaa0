//! Four-stage training driver: stage plans, the Eq-style masked-loss train
//! step, per-stage freeze manifests, checkpointing, and logging.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint;
use crate::config::{Config, SampleKind};
use crate::data::{mixed_batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::ledger::apply_stage_manifest;
use crate::lm::build_turn_sequence;
use crate::model::Model;
use crate::optim::AdamW;
use crate::params::ModuleTag;
use crate::real::Real;
use crate::schedule::LrSchedule;

#[derive(Clone, Debug)]
pub struct StagePlan {
    pub stage: usize,
    pub trainable: Vec<ModuleTag>,
    pub kinds: Vec<SampleKind>,
    pub epochs: usize,
    pub iters: usize,
    pub schedule: LrSchedule,
    pub mqe_active: bool,
}

impl StagePlan {
    pub fn from_config(cfg: &Config, stage: usize) -> Result<StagePlan> {
        if !(1..=4).contains(&stage) {
            return Err(Error::Config(format!("stage must be 1..=4, got {stage}")));
        }
        let sc = cfg.stage(stage);
        Ok(StagePlan {
            stage,
            trainable: cfg.stage_trainable(stage),
            kinds: sc.kinds.clone(),
            epochs: sc.epochs,
            iters: sc.iters,
            schedule: sc.schedule,
            mqe_active: cfg.mqe_active_in_stage(stage),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LogEntry {
    pub step: usize,
    pub stage: usize,
    pub lr: f64,
    pub loss: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct StageStats {
    pub stage: usize,
    /// Mean training loss per epoch, in order.
    pub epoch_means: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
}

pub struct Trainer<'a, T: Real> {
    pub cfg: &'a Config,
    pub model: Model<T>,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(cfg: &'a Config, model: Model<T>) -> Trainer<'a, T> {
        Trainer { cfg, model }
    }

    /// One optimizer step over a batch: full forward per sample, masked
    /// cross-entropy pooled over every included position in the batch,
    /// reverse pass, AdamW on the trainable set.
    pub fn train_step(
        &mut self,
        dataset: &Dataset,
        batch: &Batch,
        optimizer: &mut AdamW<T>,
        lr: f64,
        mqe_active: bool,
        step: usize,
    ) -> Result<f64> {
        self.model.store.zero_grad();

        // total included positions across the batch (for pooled weighting)
        let mut counts = Vec::with_capacity(batch.items.len());
        let mut total_included = 0usize;
        for idx in &batch.items {
            let sample = &dataset.samples[*idx];
            let turns: Vec<(String, String)> = sample
                .turns
                .iter()
                .map(|t| (t.q.clone(), t.a.clone()))
                .collect();
            let seq = build_turn_sequence(&turns, self.model.point_token_count());
            let n = seq.loss_mask.iter().filter(|m| **m).count();
            counts.push((seq, *idx));
            total_included += n;
        }
        if total_included == 0 {
            return Err(Error::Contract("batch has no included positions".into()));
        }

        let mut batch_loss = 0.0f64;
        for (seq, idx) in &counts {
            let cloud = &dataset.clouds[dataset.sample_cloud[*idx]];
            let mut tape = Tape::new();
            let logits = self.model.logits_for(&mut tape, cloud, seq, mqe_active)?;

            // next-token shift: row i predicts token i+1
            let len = seq.ids.len();
            let targets: Vec<usize> = (0..len - 1).map(|i| seq.ids[i + 1] as usize).collect();
            let mask: Vec<bool> = (0..len - 1).map(|i| seq.loss_mask[i + 1]).collect();
            let logits_head = tape.slice_rows_for_loss(logits, len - 1)?;
            let mean_loss = tape.cross_entropy_masked(logits_head, &targets, &mask)?;
            let included = mask.iter().filter(|m| **m).count();
            let weighted = tape.scale(
                mean_loss,
                T::from_f64(included as f64 / total_included as f64),
            )?;
            let loss_val = tape.data(weighted)[0].to_f64();
            if !loss_val.is_finite() {
                let max_logit = tape
                    .data(logits)
                    .iter()
                    .map(|v| v.to_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                return Err(Error::NonFiniteLoss {
                    step,
                    batch: *idx,
                    loss: loss_val,
                    max_logit,
                });
            }
            batch_loss += loss_val;
            tape.backward(weighted, &mut self.model.store)?;
        }

        if self.cfg.grad_clip > 0.0 {
            clip_gradients(&mut self.model.store, self.cfg.grad_clip);
        }
        optimizer.step(&mut self.model.store, lr)?;
        Ok(batch_loss)
    }

    /// Run one stage end to end: apply the freeze manifest, rebuild the
    /// optimizer, step through the deterministic batch stream, write the
    /// checkpoint and the JSONL log.
    pub fn run_stage(
        &mut self,
        dataset: &Dataset,
        plan: &StagePlan,
        out_dir: Option<&Path>,
    ) -> Result<StageStats> {
        apply_stage_manifest(&mut self.model.store, &plan.trainable)?;
        let mut optimizer = AdamW::new(self.cfg.adam, &self.model.store);
        let mut stream = mixed_batches(
            dataset,
            &self.cfg.data,
            &plan.kinds,
            self.cfg.seed ^ ((plan.stage as u64) << 8),
        )?;

        let mut log_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::fs::File::create(
                    dir.join(format!("stage{}.log.jsonl", plan.stage)),
                )?)
            }
            None => None,
        };

        let total = plan.epochs * plan.iters;
        let mut epoch_means = Vec::with_capacity(plan.epochs);
        let mut epoch_sum = 0.0;
        for step in 0..total {
            let lr = plan.schedule.lr_at(step)?;
            let batch = stream.next().expect("stream is infinite");
            let t0 = Instant::now();
            let loss =
                self.train_step(dataset, &batch, &mut optimizer, lr, plan.mqe_active, step)?;
            epoch_sum += loss;
            if let Some(f) = log_file.as_mut() {
                let entry = LogEntry {
                    step,
                    stage: plan.stage,
                    lr,
                    loss,
                    wall_ms: t0.elapsed().as_millis() as u64,
                };
                writeln!(f, "{}", serde_json::to_string(&entry)?)?;
            }
            if (step + 1) % plan.iters == 0 {
                epoch_means.push(epoch_sum / plan.iters as f64);
                epoch_sum = 0.0;
            }
        }

        let checkpoint = match out_dir {
            Some(dir) => {
                let ckpt = dir.join(format!("stage{}", plan.stage));
                checkpoint::save(
                    &ckpt,
                    &self.model.store,
                    plan.stage,
                    total,
                    self.cfg.raw.hash(),
                )?;
                Some(ckpt)
            }
            None => None,
        };

        Ok(StageStats {
            stage: plan.stage,
            epoch_means,
            checkpoint,
        })
    }

    /// Run the configured stage sequence in order on one in-memory model.
    pub fn train_all(
        &mut self,
        dataset: &Dataset,
        out_dir: Option<&Path>,
    ) -> Result<Vec<StageStats>> {
        let mut stats = Vec::new();
        for stage in self.cfg.stages_include.clone() {
            let plan = StagePlan::from_config(self.cfg, stage)?;
            stats.push(self.run_stage(dataset, &plan, out_dir)?);
        }
        Ok(stats)
    }
}

fn clip_gradients<T: Real>(store: &mut crate::params::ParamStore<T>, max_norm: f64) {
    let mut sq = 0.0f64;
    for id in store.trainable_ids() {
        for g in store.grad(id) {
            let v = g.to_f64();
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = T::from_f64(max_norm / norm);
        for id in store.trainable_ids() {
            let grad: Vec<T> = store.grad(id).iter().map(|g| *g * scale).collect();
            store.set_grad(id, &grad);
        }
    }
}

/// Resume guard: `stage` may only start from a checkpoint of the previous
/// included stage.
pub fn check_stage_order(
    manifest_stage: usize,
    target_stage: usize,
    include: &[usize],
) -> Result<()> {
    let pos = include
        .iter()
        .position(|s| *s == target_stage)
        .ok_or_else(|| Error::Config(format!("stage {target_stage} is not in stages.include")))?;
    if pos == 0 {
        return Ok(());
    }
    let expected = include[pos - 1];
    if manifest_stage != expected {
        return Err(Error::Config(format!(
            "stage-order violation: stage {target_stage} must resume from a stage {expected} checkpoint, found stage {manifest_stage}"
        )));
    }
    Ok(())
}
