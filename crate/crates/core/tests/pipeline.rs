//! Cross-module invariants that need the assembled model.

use mqe_align::config::{Config, RawConfig, RouterMode};
use mqe_align::data::{gen_objects, primitive_cloud, ShapeKind};
use mqe_align::graph::Tape;
use mqe_align::ledger::apply_stage_manifest;
use mqe_align::lm::build_turn_sequence;
use mqe_align::model::Model;
use mqe_align::params::{ModuleTag, PeftKind};
use mqe_align::rng::Rng;

fn desk_f64() -> (Config, Model<f64>) {
    let cfg = Config::desk();
    let model = Model::<f64>::new(&cfg).unwrap();
    (cfg, model)
}

fn sample_cloud(seed: u64) -> mqe_align::pointcloud::PointCloud {
    primitive_cloud(ShapeKind::Torus, [0.0, 0.0, 1.0], 256, seed)
}

fn logits_bits(model: &Model<f64>, mqe_active: bool) -> Vec<u64> {
    let cloud = sample_cloud(11);
    let seq = build_turn_sequence(
        &[("What is this?".into(), "a blue torus".into())],
        model.point_token_count(),
    );
    let mut tape = Tape::new();
    let logits = model
        .logits_for(&mut tape, &cloud, &seq, mqe_active)
        .unwrap();
    tape.data(logits).iter().map(|v| v.to_bits()).collect()
}

#[test]
fn lora_zero_b_matches_base_forward() {
    // fresh model: every LoRA B is zero, so disabling the adapters by
    // zeroing A as well must not change anything either way
    let (_, model) = desk_f64();
    let base = logits_bits(&model, false);

    let mut stripped = Model::<f64>::new(&Config::desk()).unwrap();
    for i in 0..stripped.store.len() {
        let id = mqe_align::params::ParamId(i);
        if stripped.store.entry(id).decl.kind == PeftKind::LoraA {
            stripped.store.data_mut(id).fill(0.0);
        }
    }
    assert_eq!(base, logits_bits(&stripped, false));
}

#[test]
fn lora_merge_matches_adapter_path() {
    let cfg = Config::desk();
    let mut model = Model::<f32>::new(&cfg).unwrap();
    // give the adapters something to say
    let mut rng = Rng::new(31);
    for i in 0..model.store.len() {
        let id = mqe_align::params::ParamId(i);
        if model.store.entry(id).decl.kind == PeftKind::LoraB {
            for v in model.store.data_mut(id) {
                *v = (rng.normal() * 0.02) as f32;
            }
        }
    }
    let cloud = sample_cloud(3);
    let seq = build_turn_sequence(&[("q".into(), "a".into())], model.point_token_count());
    let mut tape = Tape::new();
    let adapter_logits = model
        .logits_for(&mut tape, &cloud, &seq, false)
        .map(|v| tape.data(v).to_vec())
        .unwrap();

    // merge W <- W + (alpha/rank) * A @ B, then silence the adapters
    let lora_pairs: Vec<(String, f64)> = model
        .store
        .entries()
        .iter()
        .filter(|e| e.decl.kind == PeftKind::LoraA)
        .map(|e| {
            let prefix = e.decl.path.strip_suffix(".lora_a").unwrap().to_string();
            let (module, rank) = (e.decl.module, e.decl.shape[1]);
            let alpha = match module {
                ModuleTag::QformerPeft => cfg.model.qformer.lora_alpha,
                _ => cfg.model.lm.lora_alpha,
            };
            (prefix, alpha / rank as f64)
        })
        .collect();
    for (prefix, scale) in lora_pairs {
        let a_id = model.store.find(&format!("{prefix}.lora_a")).unwrap();
        let b_id = model.store.find(&format!("{prefix}.lora_b")).unwrap();
        let w_id = model.store.find(&format!("{prefix}.w")).unwrap();
        let a = model.store.data(a_id).to_vec();
        let b = model.store.data(b_id).to_vec();
        let (inp, rank) = {
            let s = &model.store.entry(a_id).decl.shape;
            (s[0], s[1])
        };
        let out = model.store.entry(b_id).decl.shape[1];
        let w = model.store.data_mut(w_id);
        for i in 0..inp {
            for j in 0..out {
                let mut acc = 0.0f32;
                for r in 0..rank {
                    acc += a[i * rank + r] * b[r * out + j];
                }
                w[i * out + j] += acc * scale as f32;
            }
        }
        model.store.data_mut(b_id).fill(0.0);
    }
    let mut tape = Tape::new();
    let merged_logits = model
        .logits_for(&mut tape, &cloud, &seq, false)
        .map(|v| tape.data(v).to_vec())
        .unwrap();

    for (x, y) in adapter_logits.iter().zip(&merged_logits) {
        let rel = (x - y).abs() / x.abs().max(y.abs()).max(1.0);
        assert!(rel < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn constant_single_expert_mixture_is_bit_identical_to_single_query() {
    let desk = Config::desk();
    let mut ov = RawConfig::default();
    ov.set("mqe.experts", "1");
    ov.set("mqe.mode", "constant");
    let cfg = desk.with_overrides(&ov).unwrap();
    let model = Model::<f64>::new(&cfg).unwrap();

    let cloud = sample_cloud(4);
    let seq = build_turn_sequence(&[("q".into(), "x".into())], model.point_token_count());

    let run = |mqe_active: bool| {
        let mut tape = Tape::new();
        let logits = model
            .logits_for(&mut tape, &cloud, &seq, mqe_active)
            .unwrap();
        tape.data(logits)
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(false), run(true));
}

#[test]
fn encode_is_permutation_invariant() {
    let (cfg, model) = desk_f64();
    let cloud = sample_cloud(9);
    let mut shuffled_data = Vec::new();
    let n = cloud.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(5).shuffle(&mut order);
    for i in order {
        shuffled_data.extend_from_slice(cloud.point(i));
    }
    let shuffled = mqe_align::pointcloud::PointCloud::new(shuffled_data).unwrap();

    let bits = |c: &mqe_align::pointcloud::PointCloud| {
        let mut tape = Tape::new();
        let x = model.encode(&mut tape, c).unwrap();
        tape.data(x)
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<u64>>()
    };
    assert_eq!(bits(&cloud), bits(&shuffled));
    let _ = cfg;
}

#[test]
fn sparse_mode_runs_exactly_g_transformer_passes() {
    let (cfg, model) = desk_f64();
    let cloud = sample_cloud(2);
    let mut tape = Tape::new();
    let x = model.encode(&mut tape, &cloud).unwrap();
    let proj = model.project(&mut tape, x).unwrap();
    model.reset_qf_calls();
    let (_, decision) = model
        .mqe_forward(&mut tape, &proj, RouterMode::Sparse, cfg.model.mqe.top)
        .unwrap();
    assert_eq!(model.qf_call_count(), cfg.model.mqe.top as u64);
    assert_eq!(decision.selected.len(), cfg.model.mqe.top);
}

#[test]
fn unselected_experts_get_exactly_zero_gradient() {
    let (cfg, mut model) = desk_f64();
    apply_stage_manifest(&mut model.store, &[ModuleTag::Mqe]).unwrap();
    let cloud = sample_cloud(6);
    let seq = build_turn_sequence(&[("q".into(), "y".into())], model.point_token_count());

    model.store.zero_grad();
    let mut tape = Tape::new();
    let logits = model.logits_for(&mut tape, &cloud, &seq, true).unwrap();
    let len = seq.ids.len();
    let targets: Vec<usize> = (0..len - 1).map(|i| seq.ids[i + 1] as usize).collect();
    let mask: Vec<bool> = (0..len - 1).map(|i| seq.loss_mask[i + 1]).collect();
    let head = tape.slice_rows_for_loss(logits, len - 1).unwrap();
    let loss = tape.cross_entropy_masked(head, &targets, &mask).unwrap();
    tape.backward(loss, &mut model.store).unwrap();

    // recover the routing decision for the same cloud
    let mut probe = Tape::new();
    let x = model.encode(&mut probe, &cloud).unwrap();
    let proj = model.project(&mut probe, x).unwrap();
    let routed = model
        .layout
        .mqe
        .route(
            &mut probe,
            &model.store,
            proj.hidden,
            RouterMode::Sparse,
            cfg.model.mqe.top,
        )
        .unwrap();

    for e in 0..cfg.model.mqe.experts {
        let id = model.store.find(&format!("mqe.expert{e}")).unwrap();
        let grad = model.store.grad(id);
        let live = model.store.entry(id).grad_live;
        assert!(live, "expert {e} not covered by the gradient pass");
        if routed.decision.selected.contains(&e) {
            assert!(
                grad.iter().any(|g| *g != 0.0),
                "selected expert {e} got no gradient"
            );
        } else {
            assert!(
                grad.iter().all(|g| *g == 0.0),
                "unselected expert {e} got gradient"
            );
        }
    }
    for path in ["mqe.router.l1.w", "mqe.router.l2.w"] {
        let id = model.store.find(path).unwrap();
        assert!(
            model.store.grad(id).iter().any(|g| *g != 0.0),
            "{path} received no gradient"
        );
    }
}

#[test]
fn expert_relabeling_is_bit_exact() {
    let (cfg, model) = desk_f64();
    let k = cfg.model.mqe.experts;
    let cloud = sample_cloud(12);

    let forward_bits = |model: &Model<f64>| {
        let mut tape = Tape::new();
        let x = model.encode(&mut tape, &cloud).unwrap();
        let proj = model.project(&mut tape, x).unwrap();
        let (q, _) = model
            .mqe_forward(&mut tape, &proj, RouterMode::Sparse, 2)
            .unwrap();
        tape.data(q)
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<u64>>()
    };
    let baseline = forward_bits(&model);

    // relabel: new slot i holds old expert perm[i]; router's output layer
    // columns and biases move with them
    let mut perm: Vec<usize> = (0..k).collect();
    Rng::new(77).shuffle(&mut perm);
    let mut permuted = Model::<f64>::new(&cfg).unwrap();
    let old: Vec<Vec<f64>> = (0..k)
        .map(|e| {
            permuted
                .store
                .data(permuted.store.find(&format!("mqe.expert{e}")).unwrap())
                .to_vec()
        })
        .collect();
    for (i, p) in perm.iter().enumerate() {
        let id = permuted.store.find(&format!("mqe.expert{i}")).unwrap();
        permuted.store.data_mut(id).copy_from_slice(&old[*p]);
    }
    let l2w_id = permuted.store.find("mqe.router.l2.w").unwrap();
    let hidden = permuted.store.entry(l2w_id).decl.shape[0];
    let old_w = permuted.store.data(l2w_id).to_vec();
    {
        let w = permuted.store.data_mut(l2w_id);
        for r in 0..hidden {
            for (i, p) in perm.iter().enumerate() {
                w[r * k + i] = old_w[r * k + p];
            }
        }
    }
    let l2b_id = permuted.store.find("mqe.router.l2.b").unwrap();
    let old_b = permuted.store.data(l2b_id).to_vec();
    {
        let b = permuted.store.data_mut(l2b_id);
        for (i, p) in perm.iter().enumerate() {
            b[i] = old_b[*p];
        }
    }
    assert_eq!(baseline, forward_bits(&permuted));
}

#[test]
fn weighted_sum_matches_all_experts_oracle() {
    let (cfg, model) = desk_f64();
    let cloud = sample_cloud(23);

    let mut tape = Tape::new();
    let x = model.encode(&mut tape, &cloud).unwrap();
    let proj = model.project(&mut tape, x).unwrap();
    let (mixed, decision) = model
        .mqe_forward(&mut tape, &proj, RouterMode::Sparse, 2)
        .unwrap();
    let got = tape.data(mixed).to_vec();

    // brute force: every expert's output computed independently, then the
    // selected ones combined in the same order with no renormalization
    let mut oracle_tape = Tape::new();
    let x2 = model.encode(&mut oracle_tape, &cloud).unwrap();
    let proj2 = model.project(&mut oracle_tape, x2).unwrap();
    let all: Vec<Vec<f64>> = (0..cfg.model.mqe.experts)
        .map(|e| {
            let id = model.store.find(&format!("mqe.expert{e}")).unwrap();
            let queries = oracle_tape.param(&model.store, id);
            let out = model
                .qformer_forward(&mut oracle_tape, proj2.y, queries)
                .unwrap();
            oracle_tape.data(out).to_vec()
        })
        .collect();
    let mut expect = vec![0.0f64; got.len()];
    for q in &decision.selected {
        for (acc, v) in expect.iter_mut().zip(&all[*q]) {
            *acc += decision.weights[*q] * v;
        }
    }
    let sum_sel: f64 = decision.selected.iter().map(|q| decision.weights[*q]).sum();
    assert!(
        sum_sel < 0.999,
        "selection should not cover the full simplex here"
    );
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
    }
}

#[test]
fn constant_mode_averages_two_experts() {
    let desk = Config::desk();
    let mut ov = RawConfig::default();
    ov.set("mqe.experts", "2");
    ov.set("mqe.noise_std", "0.3");
    let cfg = desk.with_overrides(&ov).unwrap();
    let model = Model::<f64>::new(&cfg).unwrap();
    let cloud = sample_cloud(19);

    let mut tape = Tape::new();
    let x = model.encode(&mut tape, &cloud).unwrap();
    let proj = model.project(&mut tape, x).unwrap();
    let (mixed, decision) = model
        .mqe_forward(&mut tape, &proj, RouterMode::Constant, 2)
        .unwrap();
    assert_eq!(decision.weights, vec![0.5, 0.5]);
    let got = tape.data(mixed).to_vec();

    let mut oracle = Tape::new();
    let x2 = model.encode(&mut oracle, &cloud).unwrap();
    let proj2 = model.project(&mut oracle, x2).unwrap();
    let mut expect = vec![0.0f64; got.len()];
    for e in 0..2 {
        let id = model.store.find(&format!("mqe.expert{e}")).unwrap();
        let q = oracle.param(&model.store, id);
        let out = model.qformer_forward(&mut oracle, proj2.y, q).unwrap();
        for (acc, v) in expect.iter_mut().zip(oracle.data(out)) {
            *acc += 0.5 * v;
        }
    }
    for (g, e) in got.iter().zip(&expect) {
        assert!((g - e).abs() <= 1e-12, "{g} vs {e}");
    }
}

#[test]
fn frozen_encoder_never_moves() {
    let cfg = Config::desk();
    let mut ov = RawConfig::default();
    ov.set("stage1.iters", "3");
    ov.set("stage1.epochs", "1");
    ov.set("stage1.warmup_steps", "1");
    let cfg = cfg.with_overrides(&ov).unwrap();
    let model = Model::<f32>::new(&cfg).unwrap();
    let objects = gen_objects(4, cfg.model.encoder.points, 3);
    let dataset = mqe_align::data::Dataset::in_memory(&objects, 3);
    let mut trainer = mqe_align::train::Trainer::new(&cfg, model);

    let before: Vec<Vec<u64>> = trainer
        .model
        .store
        .entries()
        .iter()
        .filter(|e| e.decl.module == ModuleTag::PcEncoder)
        .map(|e| e.data.iter().map(|v| v.to_bits() as u64).collect())
        .collect();
    let plan = mqe_align::train::StagePlan::from_config(&cfg, 1).unwrap();
    trainer.run_stage(&dataset, &plan, None).unwrap();
    let after: Vec<Vec<u64>> = trainer
        .model
        .store
        .entries()
        .iter()
        .filter(|e| e.decl.module == ModuleTag::PcEncoder)
        .map(|e| e.data.iter().map(|v| v.to_bits() as u64).collect())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let cfg = Config::desk();
    let model = Model::<f32>::new(&cfg).unwrap();
    let objects = gen_objects(2, cfg.model.encoder.points, 3);
    let dataset = mqe_align::data::Dataset::in_memory(&objects, 3);
    let mut trainer = mqe_align::train::Trainer::new(&cfg, model);
    apply_stage_manifest(&mut trainer.model.store, &[ModuleTag::PcProjection]).unwrap();

    // poison one trainable weight so the forward blows up
    let w = trainer.model.store.find("pcproj.layer1.w").unwrap();
    trainer.model.store.data_mut(w)[0] = f32::INFINITY;

    let mut optimizer = mqe_align::optim::AdamW::new(cfg.adam, &trainer.model.store);
    let mut stream = mqe_align::data::mixed_batches(
        &dataset,
        &cfg.data,
        &[mqe_align::config::SampleKind::BriefCaption],
        1,
    )
    .unwrap();
    let batch = stream.next().unwrap();
    match trainer.train_step(&dataset, &batch, &mut optimizer, 1e-3, false, 7) {
        Err(mqe_align::Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 7),
        other => panic!("expected non-finite abort, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn decode_is_deterministic() {
    let (_, model) = desk_f64();
    let cloud = sample_cloud(8);
    let a = model
        .greedy_decode(&cloud, "What is this?", 12, false)
        .unwrap();
    let b = model
        .greedy_decode(&cloud, "What is this?", 12, false)
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn overlength_sequence_is_rejected() {
    let (cfg, model) = desk_f64();
    let long_answer = "x".repeat(cfg.model.lm.max_seq);
    let seq = build_turn_sequence(&[("q".into(), long_answer)], model.point_token_count());
    let cloud = sample_cloud(1);
    let mut tape = Tape::new();
    match model.logits_for(&mut tape, &cloud, &seq, false) {
        Err(mqe_align::Error::Sequence { .. }) => {}
        other => panic!("expected sequence error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn untrained_model_scores_near_chance() {
    let (_, model) = desk_f64();
    let objects = gen_objects(100, 256, 42);
    let acc = mqe_align::eval::evaluate_classification(
        &model,
        &objects,
        mqe_align::eval::PromptKind::InstructionTyped,
        false,
        8,
    )
    .unwrap();
    assert!(acc <= 0.6, "untrained accuracy {acc}");
}

#[test]
fn stage_order_violation_is_config_error() {
    use mqe_align::train::check_stage_order;
    assert!(check_stage_order(1, 2, &[1, 2, 3, 4]).is_ok());
    assert!(check_stage_order(1, 3, &[1, 2, 3, 4]).is_err());
    assert!(check_stage_order(3, 2, &[1, 2, 3, 4]).is_err());
    assert!(check_stage_order(0, 1, &[1, 2, 3, 4]).is_ok());
    // skipped stages resume from the previous included one
    assert!(check_stage_order(1, 3, &[1, 3]).is_ok());
}
