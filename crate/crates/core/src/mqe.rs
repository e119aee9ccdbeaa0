//! Mixture of query experts: a bank of learnable query sets, a pooled
//! router producing simplex weights, sparse top-g selection, and the
//! weighted recombination of per-expert query-transformer outputs.
//!
//! Weights are a single global softmax and are NOT renormalized after
//! selection; only selected experts execute a forward pass.

use crate::config::RouterMode;
use crate::error::{Error, Result};
use crate::graph::{Tape, Value};
use crate::nn::LinearIds;
use crate::params::{ParamId, ParamStore};
use crate::real::Real;

pub struct RouterIds {
    pub l1: LinearIds,
    pub l2: LinearIds,
}

pub struct MqeIds {
    pub experts: Vec<ParamId>,
    pub router: RouterIds,
}

#[derive(Clone, Debug)]
pub struct RoutingDecision {
    /// Simplex weights over all k experts.
    pub weights: Vec<f64>,
    /// Selected expert indices in combination order: descending weight,
    /// ties toward the lower index. The order is index-free so relabeling
    /// experts (together with the router's output layer) is bit-exact.
    pub selected: Vec<usize>,
    pub mode: RouterMode,
}

pub struct RoutedWeights {
    pub decision: RoutingDecision,
    /// 1×k weight row on the tape (router-differentiable unless constant).
    pub weights_value: Value,
}

impl MqeIds {
    pub fn expert_count(&self) -> usize {
        self.experts.len()
    }

    /// Pool the projection activation, run the router MLP, softmax over the
    /// expert logits, then select per `mode`.
    pub fn route<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        hidden: Value,
        mode: RouterMode,
        g: usize,
    ) -> Result<RoutedWeights> {
        let k = self.experts.len();
        if k == 0 {
            return Err(Error::Config("expert bank is empty".into()));
        }
        if g < 1 {
            return Err(Error::Config("top-g must be >= 1".into()));
        }

        let weights_value = match mode {
            RouterMode::Constant => {
                // static average weights; the router is bypassed but stays
                // registered so the optimizer still covers it
                for id in [
                    self.router.l1.w,
                    self.router.l1.b,
                    self.router.l2.w,
                    self.router.l2.b,
                ] {
                    tape.register_leaf(store, id);
                }
                let w = T::from_f64(1.0 / k as f64);
                tape.constant(vec![w; k], 1, k)?
            }
            RouterMode::Soft | RouterMode::Sparse => {
                let pooled = tape.mean_rows(hidden)?;
                let h = self.router.l1.forward(tape, store, pooled)?;
                let h = tape.gelu(h)?;
                let logits = self.router.l2.forward(tape, store, h)?;
                tape.softmax_rows_canonical(logits)?
            }
        };

        let weights: Vec<f64> = tape
            .data(weights_value)
            .iter()
            .map(|v| v.to_f64())
            .collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|a, b| {
            weights[*b]
                .partial_cmp(&weights[*a])
                .unwrap()
                .then(a.cmp(b))
        });
        let selected = match mode {
            RouterMode::Constant | RouterMode::Soft => order,
            RouterMode::Sparse => {
                order.truncate(g.min(k));
                order
            }
        };

        Ok(RoutedWeights {
            decision: RoutingDecision {
                weights,
                selected,
                mode,
            },
            weights_value,
        })
    }

    /// Weighted sum of the selected experts' outputs, accumulated in
    /// selection order. `run_expert` performs one query-transformer pass for the
    /// given expert's query set.
    pub fn combine<T: Real, F>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        routed: &RoutedWeights,
        mut run_expert: F,
    ) -> Result<Value>
    where
        F: FnMut(&mut Tape<T>, Value) -> Result<Value>,
    {
        let mut acc: Option<Value> = None;
        for q in &routed.decision.selected {
            let queries = tape.param(store, self.experts[*q]);
            let out = run_expert(tape, queries)?;
            let w = tape.pick(routed.weights_value, 0, *q)?;
            let scaled = tape.scale_by(out, w)?;
            acc = Some(match acc {
                None => scaled,
                Some(a) => tape.add(a, scaled)?,
            });
        }
        // unselected experts stay covered by the gradient pass (exactly zero)
        for (i, id) in self.experts.iter().enumerate() {
            if !routed.decision.selected.contains(&i) {
                tape.register_leaf(store, *id);
            }
        }
        acc.ok_or_else(|| Error::Config("expert bank is empty".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ModuleTag, PeftKind, TensorDecl};

    fn router_store(k: usize, hid: usize) -> (ParamStore<f64>, MqeIds) {
        let rin = 6;
        let mut decls = vec![
            TensorDecl {
                path: "r.l1.w".into(),
                shape: vec![rin, hid],
                module: ModuleTag::Mqe,
                kind: PeftKind::Router,
                init: Init::Normal { std: 0.3 },
            },
            TensorDecl {
                path: "r.l1.b".into(),
                shape: vec![hid],
                module: ModuleTag::Mqe,
                kind: PeftKind::Router,
                init: Init::Zeros,
            },
            TensorDecl {
                path: "r.l2.w".into(),
                shape: vec![hid, k],
                module: ModuleTag::Mqe,
                kind: PeftKind::Router,
                init: Init::Normal { std: 0.3 },
            },
            TensorDecl {
                path: "r.l2.b".into(),
                shape: vec![k],
                module: ModuleTag::Mqe,
                kind: PeftKind::Router,
                init: Init::Zeros,
            },
        ];
        for e in 0..k {
            decls.push(TensorDecl {
                path: format!("expert{e}"),
                shape: vec![2, 3],
                module: ModuleTag::Mqe,
                kind: PeftKind::QueryExpert,
                init: Init::Normal { std: 0.5 },
            });
        }
        let store = ParamStore::init(&decls, 21).unwrap();
        let ids = MqeIds {
            experts: (0..k).map(|e| ParamId(4 + e)).collect(),
            router: RouterIds {
                l1: LinearIds {
                    w: ParamId(0),
                    b: ParamId(1),
                },
                l2: LinearIds {
                    w: ParamId(2),
                    b: ParamId(3),
                },
            },
        };
        (store, ids)
    }

    fn hidden_input(tape: &mut Tape<f64>) -> Value {
        let data: Vec<f64> = (0..12).map(|i| (i as f64) * 0.17 - 1.0).collect();
        tape.constant(data, 2, 6).unwrap()
    }

    #[test]
    fn constant_mode_is_uniform_and_selects_all() {
        let (store, ids) = router_store(4, 5);
        let mut tape = Tape::new();
        let h = hidden_input(&mut tape);
        let routed = ids
            .route(&mut tape, &store, h, RouterMode::Constant, 2)
            .unwrap();
        assert_eq!(routed.decision.weights, vec![0.25; 4]);
        assert_eq!(routed.decision.selected, vec![0, 1, 2, 3]);
    }

    #[test]
    fn zero_router_gives_uniform_weights() {
        let (mut store, ids) = router_store(8, 5);
        for i in 0..4 {
            store.data_mut(ParamId(i)).fill(0.0);
        }
        let mut tape = Tape::new();
        let h = hidden_input(&mut tape);
        let routed = ids
            .route(&mut tape, &store, h, RouterMode::Soft, 8)
            .unwrap();
        for w in &routed.decision.weights {
            assert!((w - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn weights_lie_on_the_simplex() {
        let (store, ids) = router_store(6, 5);
        let mut tape = Tape::new();
        let h = hidden_input(&mut tape);
        let routed = ids
            .route(&mut tape, &store, h, RouterMode::Sparse, 2)
            .unwrap();
        let sum: f64 = routed.decision.weights.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        assert!(routed.decision.weights.iter().all(|w| *w >= 0.0));
    }

    #[test]
    fn sparse_selection_dominates_unselected() {
        let (store, ids) = router_store(6, 5);
        let mut tape = Tape::new();
        let h = hidden_input(&mut tape);
        let routed = ids
            .route(&mut tape, &store, h, RouterMode::Sparse, 2)
            .unwrap();
        let sel_min = routed
            .decision
            .selected
            .iter()
            .map(|i| routed.decision.weights[*i])
            .fold(f64::INFINITY, f64::min);
        let unsel_max = (0..6)
            .filter(|i| !routed.decision.selected.contains(i))
            .map(|i| routed.decision.weights[i])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(sel_min >= unsel_max);
        assert_eq!(routed.decision.selected.len(), 2);
    }

    #[test]
    fn monotone_logit_order_survives_softmax() {
        // logits [2, 1, 0, -1] via zeroed l1 and bias-only l2
        let (mut store, ids) = router_store(4, 5);
        store.data_mut(ParamId(0)).fill(0.0);
        store.data_mut(ParamId(2)).fill(0.0);
        store
            .data_mut(ParamId(3))
            .copy_from_slice(&[2.0, 1.0, 0.0, -1.0]);
        let mut tape = Tape::new();
        let h = hidden_input(&mut tape);
        let routed = ids
            .route(&mut tape, &store, h, RouterMode::Sparse, 2)
            .unwrap();
        assert_eq!(routed.decision.selected, vec![0, 1]);
    }

    #[test]
    fn invalid_top_g_rejected() {
        let (store, ids) = router_store(4, 5);
        let mut tape = Tape::new();
        let h = hidden_input(&mut tape);
        assert!(ids
            .route(&mut tape, &store, h, RouterMode::Sparse, 0)
            .is_err());
    }
}
