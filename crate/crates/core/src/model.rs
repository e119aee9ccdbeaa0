//! Architecture census and the assembled model.
//!
//! `declare_model` walks the configured architecture once, declaring every
//! tensor with its path, shape, module tag, PEFT kind, and initializer. The
//! same walk yields the typed id layout the forward passes use, so the
//! parameter accountant and the executable model can never disagree.

use std::cell::Cell;

use crate::config::{Config, ModelConfig, RouterMode};
use crate::encoder::{EncoderBlockIds, EncoderIds, PointEncoder};
use crate::error::{Error, Result};
use crate::graph::{Tape, Value};
use crate::lm::{argmax_token, LmBlockIds, LmIds, TokenSequence, EOS};
use crate::mqe::{MqeIds, RouterIds, RoutingDecision};
use crate::nn::{AttentionIds, LinearIds, LoraIds, NormIds, PeftLinear};
use crate::params::{Init, ModuleTag, ParamStore, PeftKind, TensorDecl};
use crate::pointcloud::PointCloud;
use crate::projectors::{router_input_width, MProjIds, PcProjIds, ProjectedFeatures};
use crate::qformer::{QfBlockIds, QformerIds};
use crate::real::Real;

pub struct ModelLayout {
    pub encoder: EncoderIds,
    pub pcproj: PcProjIds,
    pub qformer: QformerIds,
    pub mqe: MqeIds,
    pub mproj: MProjIds,
    pub lm: LmIds,
}

struct Census {
    decls: Vec<TensorDecl>,
}

impl Census {
    fn declare(
        &mut self,
        path: String,
        shape: Vec<usize>,
        module: ModuleTag,
        kind: PeftKind,
        init: Init,
    ) -> crate::params::ParamId {
        self.decls.push(TensorDecl {
            path,
            shape,
            module,
            kind,
            init,
        });
        crate::params::ParamId(self.decls.len() - 1)
    }

    /// Weight ~ N(0, 1/sqrt(fan_in)), bias zero.
    fn linear(
        &mut self,
        prefix: &str,
        inp: usize,
        out: usize,
        module: ModuleTag,
        kind: PeftKind,
    ) -> LinearIds {
        let std = 1.0 / (inp as f64).sqrt();
        let w = self.declare(
            format!("{prefix}.w"),
            vec![inp, out],
            module,
            kind,
            Init::Normal { std },
        );
        let b = self.declare(format!("{prefix}.b"), vec![out], module, kind, Init::Zeros);
        LinearIds { w, b }
    }

    fn norm(&mut self, prefix: &str, width: usize, module: ModuleTag) -> NormIds {
        let gain = self.declare(
            format!("{prefix}.gain"),
            vec![width],
            module,
            PeftKind::Norm,
            Init::Ones,
        );
        let bias = self.declare(
            format!("{prefix}.bias"),
            vec![width],
            module,
            PeftKind::Norm,
            Init::Zeros,
        );
        NormIds { gain, bias }
    }

    /// A ~ N(0, 0.02), B = 0 so the adapter starts as the identity delta.
    fn lora(
        &mut self,
        prefix: &str,
        inp: usize,
        out: usize,
        rank: usize,
        alpha: f64,
        module: ModuleTag,
    ) -> LoraIds {
        let a = self.declare(
            format!("{prefix}.lora_a"),
            vec![inp, rank],
            module,
            PeftKind::LoraA,
            Init::Normal { std: 0.02 },
        );
        let b = self.declare(
            format!("{prefix}.lora_b"),
            vec![rank, out],
            module,
            PeftKind::LoraB,
            Init::Zeros,
        );
        LoraIds {
            a,
            b,
            scale: alpha / rank as f64,
        }
    }

    fn attention(
        &mut self,
        prefix: &str,
        q_in: usize,
        kv_in: usize,
        hidden: usize,
        base_module: ModuleTag,
        qkv_lora: Option<(usize, f64, ModuleTag)>,
    ) -> AttentionIds {
        let proj = |census: &mut Census, name: &str, inp: usize| -> PeftLinear {
            let base = census.linear(
                &format!("{prefix}.{name}"),
                inp,
                hidden,
                base_module,
                PeftKind::Base,
            );
            let lora = qkv_lora.map(|(rank, alpha, module)| {
                census.lora(
                    &format!("{prefix}.{name}"),
                    inp,
                    hidden,
                    rank,
                    alpha,
                    module,
                )
            });
            PeftLinear { base, lora }
        };
        let q = proj(self, "q", q_in);
        let k = proj(self, "k", kv_in);
        let v = proj(self, "v", kv_in);
        let o = PeftLinear::plain(self.linear(
            &format!("{prefix}.o"),
            hidden,
            hidden,
            base_module,
            PeftKind::Base,
        ));
        AttentionIds { q, k, v, o }
    }
}

/// Enumerate every tensor of the configured architecture.
pub fn declare_model(cfg: &ModelConfig) -> (Vec<TensorDecl>, ModelLayout) {
    let mut c = Census { decls: Vec::new() };

    // ── point encoder (frozen in every stage) ───────────────────────
    let enc = &cfg.encoder;
    let tag = ModuleTag::PcEncoder;
    let point_mlp1 = c.linear(
        "encoder.point_mlp1",
        6,
        enc.pointnet_mid,
        tag,
        PeftKind::Base,
    );
    let point_mlp2 = c.linear(
        "encoder.point_mlp2",
        enc.pointnet_mid,
        enc.hidden,
        tag,
        PeftKind::Base,
    );
    let pos_embed = c.linear("encoder.pos_embed", 3, enc.hidden, tag, PeftKind::Base);
    let mut enc_blocks = Vec::with_capacity(enc.layers);
    for i in 0..enc.layers {
        let p = format!("encoder.block{i}");
        enc_blocks.push(EncoderBlockIds {
            norm1: c.norm(&format!("{p}.norm1"), enc.hidden, tag),
            attn: c.attention(
                &format!("{p}.attn"),
                enc.hidden,
                enc.hidden,
                enc.hidden,
                tag,
                None,
            ),
            norm2: c.norm(&format!("{p}.norm2"), enc.hidden, tag),
            ffn_in: c.linear(
                &format!("{p}.ffn_in"),
                enc.hidden,
                enc.hidden * enc.ffn_mult,
                tag,
                PeftKind::Base,
            ),
            ffn_out: c.linear(
                &format!("{p}.ffn_out"),
                enc.hidden * enc.ffn_mult,
                enc.hidden,
                tag,
                PeftKind::Base,
            ),
        });
    }
    let encoder = EncoderIds {
        point_mlp1,
        point_mlp2,
        pos_embed,
        blocks: enc_blocks,
        final_norm: c.norm("encoder.final_norm", enc.hidden, tag),
    };

    // ── point cloud projection layer ────────────────────────────────
    let pp = &cfg.pcproj;
    let dims: Vec<(usize, usize)> = match pp.depth {
        1 => vec![(enc.hidden, pp.out)],
        2 => vec![(enc.hidden, pp.hidden), (pp.hidden, pp.out)],
        _ => vec![
            (enc.hidden, pp.hidden),
            (pp.hidden, pp.hidden),
            (pp.hidden, pp.out),
        ],
    };
    let pcproj = PcProjIds {
        layers: dims
            .iter()
            .enumerate()
            .map(|(i, (a, b))| {
                c.linear(
                    &format!("pcproj.layer{i}"),
                    *a,
                    *b,
                    ModuleTag::PcProjection,
                    PeftKind::Base,
                )
            })
            .collect(),
    };

    // ── query transformer ───────────────────────────────────────────
    let qf = &cfg.qformer;
    let base_queries = c.declare(
        "qformer.base_queries".into(),
        vec![qf.queries, qf.hidden],
        ModuleTag::QformerBase,
        PeftKind::Base,
        Init::Normal { std: 0.02 },
    );
    let norm_tag = if qf.peft.norms {
        ModuleTag::QformerPeft
    } else {
        ModuleTag::QformerBase
    };
    let qkv_lora = if qf.peft.lora_qkv {
        Some((qf.lora_rank, qf.lora_alpha, ModuleTag::QformerPeft))
    } else {
        None
    };
    let embed_norm = c.norm("qformer.embed_norm", qf.hidden, norm_tag);
    let mut qf_blocks = Vec::with_capacity(qf.layers);
    for i in 0..qf.layers {
        let p = format!("qformer.block{i}");
        let self_attn = c.attention(
            &format!("{p}.self_attn"),
            qf.hidden,
            qf.hidden,
            qf.hidden,
            ModuleTag::QformerBase,
            qkv_lora,
        );
        let self_norm = c.norm(&format!("{p}.self_norm"), qf.hidden, norm_tag);
        let (cross_attn, cross_norm) = if i % qf.cross_every == 0 {
            (
                Some(c.attention(
                    &format!("{p}.cross_attn"),
                    qf.hidden,
                    pp.out,
                    qf.hidden,
                    ModuleTag::QformerBase,
                    qkv_lora,
                )),
                Some(c.norm(&format!("{p}.cross_norm"), qf.hidden, norm_tag)),
            )
        } else {
            (None, None)
        };
        let dense = |census: &mut Census, name: &str, inp: usize, out: usize| -> PeftLinear {
            let base = census.linear(
                &format!("{p}.{name}"),
                inp,
                out,
                ModuleTag::QformerBase,
                PeftKind::Base,
            );
            let lora = if qf.peft.lora_dense {
                Some(census.lora(
                    &format!("{p}.{name}"),
                    inp,
                    out,
                    qf.lora_rank,
                    qf.lora_alpha,
                    ModuleTag::QformerPeft,
                ))
            } else {
                None
            };
            PeftLinear { base, lora }
        };
        let ffn_in = dense(&mut c, "ffn_in", qf.hidden, qf.ffn);
        let ffn_out = dense(&mut c, "ffn_out", qf.ffn, qf.hidden);
        qf_blocks.push(QfBlockIds {
            self_attn,
            self_norm,
            cross_attn,
            cross_norm,
            ffn_in,
            ffn_out,
            ffn_norm: c.norm(&format!("{p}.ffn_norm"), qf.hidden, norm_tag),
        });
    }
    let qformer = QformerIds {
        base_queries,
        embed_norm,
        blocks: qf_blocks,
    };

    // ── mixture of query experts ────────────────────────────────────
    let mq = &cfg.mqe;
    let experts = (0..mq.experts)
        .map(|e| {
            // expert 0 is the exact base copy so a single-expert constant
            // mixture reproduces the single-query path bit for bit
            let std = if e == 0 { 0.0 } else { mq.noise_std };
            c.declare(
                format!("mqe.expert{e}"),
                vec![qf.queries, qf.hidden],
                ModuleTag::Mqe,
                PeftKind::QueryExpert,
                Init::PerturbedCopy {
                    of: "qformer.base_queries".into(),
                    std,
                },
            )
        })
        .collect();
    let rin = router_input_width(cfg);
    let mqe = MqeIds {
        experts,
        router: RouterIds {
            l1: c.linear(
                "mqe.router.l1",
                rin,
                mq.router_hidden,
                ModuleTag::Mqe,
                PeftKind::Router,
            ),
            l2: c.linear(
                "mqe.router.l2",
                mq.router_hidden,
                mq.experts,
                ModuleTag::Mqe,
                PeftKind::Router,
            ),
        },
    };

    // ── modality projector ──────────────────────────────────────────
    let mproj = MProjIds {
        layer1: c.linear(
            "mproj.layer1",
            qf.hidden,
            cfg.mproj_hidden,
            ModuleTag::ModalityProjector,
            PeftKind::Base,
        ),
        layer2: c.linear(
            "mproj.layer2",
            cfg.mproj_hidden,
            cfg.lm.hidden,
            ModuleTag::ModalityProjector,
            PeftKind::Base,
        ),
    };

    // ── LM backbone ─────────────────────────────────────────────────
    let lm = &cfg.lm;
    let tok_embed = c.declare(
        "lm.tok_embed".into(),
        vec![lm.vocab, lm.hidden],
        ModuleTag::LmBase,
        PeftKind::Base,
        Init::Normal { std: 0.02 },
    );
    let lm_pos_embed = c.declare(
        "lm.pos_embed".into(),
        vec![lm.max_seq, lm.hidden],
        ModuleTag::LmBase,
        PeftKind::Base,
        Init::Normal { std: 0.02 },
    );
    let mut lm_blocks = Vec::with_capacity(lm.layers);
    for i in 0..lm.layers {
        let p = format!("lm.block{i}");
        lm_blocks.push(LmBlockIds {
            norm: c.norm(&format!("{p}.norm"), lm.hidden, ModuleTag::LmPeft),
            attn: c.attention(
                &format!("{p}.attn"),
                lm.hidden,
                lm.hidden,
                lm.hidden,
                ModuleTag::LmBase,
                Some((lm.lora_rank, lm.lora_alpha, ModuleTag::LmPeft)),
            ),
            ffn_in: c.linear(
                &format!("{p}.ffn_in"),
                lm.hidden,
                lm.hidden * lm.ffn_mult,
                ModuleTag::LmBase,
                PeftKind::Base,
            ),
            ffn_out: c.linear(
                &format!("{p}.ffn_out"),
                lm.hidden * lm.ffn_mult,
                lm.hidden,
                ModuleTag::LmBase,
                PeftKind::Base,
            ),
        });
    }
    let lm_ids = LmIds {
        tok_embed,
        pos_embed: lm_pos_embed,
        blocks: lm_blocks,
        final_norm: c.norm("lm.final_norm", lm.hidden, ModuleTag::LmPeft),
        head: c.linear(
            "lm.head",
            lm.hidden,
            lm.vocab,
            ModuleTag::LmBase,
            PeftKind::Base,
        ),
    };

    (
        c.decls,
        ModelLayout {
            encoder,
            pcproj,
            qformer,
            mqe,
            mproj,
            lm: lm_ids,
        },
    )
}

pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub layout: ModelLayout,
    pub store: ParamStore<T>,
    qf_calls: Cell<u64>,
}

impl<T: Real> Model<T> {
    pub fn new(config: &Config) -> Result<Model<T>> {
        Model::with_seed(&config.model, config.seed)
    }

    pub fn with_seed(cfg: &ModelConfig, seed: u64) -> Result<Model<T>> {
        cfg.validate()?;
        let (decls, layout) = declare_model(cfg);
        let store = ParamStore::init(&decls, seed)?;
        Ok(Model {
            cfg: cfg.clone(),
            layout,
            store,
            qf_calls: Cell::new(0),
        })
    }

    pub fn point_token_count(&self) -> usize {
        self.cfg.qformer.queries
    }

    /// Query-transformer invocations since the last reset.
    pub fn qf_call_count(&self) -> u64 {
        self.qf_calls.get()
    }

    pub fn reset_qf_calls(&self) {
        self.qf_calls.set(0);
    }

    pub fn encode(&self, tape: &mut Tape<T>, cloud: &PointCloud) -> Result<Value> {
        PointEncoder {
            cfg: &self.cfg.encoder,
            ids: &self.layout.encoder,
        }
        .encode(tape, &self.store, cloud)
    }

    pub fn project(&self, tape: &mut Tape<T>, x: Value) -> Result<ProjectedFeatures> {
        self.layout
            .pcproj
            .forward(tape, &self.store, &self.cfg.pcproj, x, false)
    }

    pub fn qformer_forward(&self, tape: &mut Tape<T>, y: Value, queries: Value) -> Result<Value> {
        self.qf_calls.set(self.qf_calls.get() + 1);
        self.layout
            .qformer
            .forward(tape, &self.store, &self.cfg.qformer, y, queries)
    }

    /// Stage 1-3 path: the single frozen base query set.
    pub fn single_query_forward(&self, tape: &mut Tape<T>, y: Value) -> Result<Value> {
        let queries = tape.param(&self.store, self.layout.qformer.base_queries);
        self.qformer_forward(tape, y, queries)
    }

    /// Expert-mixture path with explicit mode and top-g.
    pub fn mqe_forward(
        &self,
        tape: &mut Tape<T>,
        proj: &ProjectedFeatures,
        mode: RouterMode,
        g: usize,
    ) -> Result<(Value, RoutingDecision)> {
        let routed = self
            .layout
            .mqe
            .route(tape, &self.store, proj.hidden, mode, g)?;
        let y = proj.y;
        let out = self
            .layout
            .mqe
            .combine(tape, &self.store, &routed, |tape, queries| {
                self.qformer_forward(tape, y, queries)
            })?;
        Ok((out, routed.decision))
    }

    /// Point queries via the configured path for the given stage.
    pub fn point_queries(
        &self,
        tape: &mut Tape<T>,
        proj: &ProjectedFeatures,
        mqe_active: bool,
    ) -> Result<(Value, Option<RoutingDecision>)> {
        if mqe_active {
            let (q, d) = self.mqe_forward(tape, proj, self.cfg.mqe.mode, self.cfg.mqe.top)?;
            Ok((q, Some(d)))
        } else {
            // experts and router are off-path; keep them gradient-covered
            for id in self.layout.mqe.experts.iter().chain([
                &self.layout.mqe.router.l1.w,
                &self.layout.mqe.router.l1.b,
                &self.layout.mqe.router.l2.w,
                &self.layout.mqe.router.l2.b,
            ]) {
                tape.register_leaf(&self.store, *id);
            }
            Ok((self.single_query_forward(tape, proj.y)?, None))
        }
    }

    pub fn modality_project(&self, tape: &mut Tape<T>, q_bar: Value) -> Result<Value> {
        self.layout.mproj.forward(tape, &self.store, q_bar, false)
    }

    pub fn lm_hidden(
        &self,
        tape: &mut Tape<T>,
        seq: &TokenSequence,
        point_tokens: Value,
    ) -> Result<Value> {
        self.layout
            .lm
            .forward(tape, &self.store, &self.cfg.lm, seq, point_tokens)
    }

    pub fn vocab_project(&self, tape: &mut Tape<T>, hidden_states: Value) -> Result<Value> {
        self.layout
            .lm
            .vocab_project(tape, &self.store, hidden_states)
    }

    /// Full pipeline: cloud + token sequence -> per-position logits.
    pub fn logits_for(
        &self,
        tape: &mut Tape<T>,
        cloud: &PointCloud,
        seq: &TokenSequence,
        mqe_active: bool,
    ) -> Result<Value> {
        let x = self.encode(tape, cloud)?;
        let proj = self.project(tape, x)?;
        let (q_bar, _) = self.point_queries(tape, &proj, mqe_active)?;
        let pts = self.modality_project(tape, q_bar)?;
        let hidden = self.lm_hidden(tape, seq, pts)?;
        self.vocab_project(tape, hidden)
    }

    /// Autoregressive argmax decoding; stops at the end marker or after
    /// `max_new` tokens. Returns only the generated ids.
    pub fn greedy_decode(
        &self,
        cloud: &PointCloud,
        instruction: &str,
        max_new: usize,
        mqe_active: bool,
    ) -> Result<Vec<u32>> {
        if max_new < 1 {
            return Err(Error::Contract(
                "greedy_decode: max_new must be >= 1".into(),
            ));
        }
        let mut seq = crate::lm::build_prompt_sequence(instruction, self.point_token_count());
        let mut generated = Vec::new();
        while generated.len() < max_new && seq.ids.len() < self.cfg.lm.max_seq {
            let mut tape = Tape::new();
            let logits = self.logits_for(&mut tape, cloud, &seq, mqe_active)?;
            let (rows, vocab) = tape.shape(logits);
            let last = &tape.data(logits)[(rows - 1) * vocab..rows * vocab];
            let next = argmax_token(last);
            if next == EOS {
                break;
            }
            generated.push(next);
            seq.ids.push(next);
            seq.loss_mask.push(false);
        }
        Ok(generated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn desk_model_builds_and_runs_forward() {
        let cfg = Config::desk();
        let model: Model<f32> = Model::new(&cfg).unwrap();
        let cloud = crate::data::primitive_cloud(
            crate::data::ShapeKind::Sphere,
            [1.0, 0.0, 0.0],
            cfg.model.encoder.points,
            77,
        );
        let seq = crate::lm::build_turn_sequence(
            &[("What is this?".into(), "a red sphere".into())],
            model.point_token_count(),
        );
        let mut tape = Tape::new();
        let logits = model.logits_for(&mut tape, &cloud, &seq, false).unwrap();
        let (rows, cols) = tape.shape(logits);
        assert_eq!(rows, seq.ids.len());
        assert_eq!(cols, cfg.model.lm.vocab);
        assert!(tape.data(logits).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn paper_census_never_allocates_yet_counts() {
        let cfg = Config::paper();
        let (decls, _) = declare_model(&cfg.model);
        let total: usize = decls.iter().map(|d| d.numel()).sum();
        assert!(total > 2_900_000_000, "total {total}");
    }
}
