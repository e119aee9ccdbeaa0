//! Named-tensor registry: declarations, storage, gradients, snapshots.
//!
//! Every tensor in the model is declared once by the architecture census
//! (see `model::declare_tensors`), which yields a [`TensorDecl`] list. The
//! same list backs two consumers: the parameter accountant (shape-only, so
//! paper-scale budgets never allocate) and [`ParamStore`], which allocates
//! and initializes the desk-scale weights.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

/// Stable handle into the store; equals the tensor's census index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Which architectural unit a tensor belongs to. Stage plans freeze and
/// thaw whole tags, never individual tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleTag {
    PcEncoder,
    PcProjection,
    QformerBase,
    QformerPeft,
    ModalityProjector,
    Mqe,
    LmBase,
    LmPeft,
}

impl ModuleTag {
    pub const ALL: [ModuleTag; 8] = [
        ModuleTag::PcEncoder,
        ModuleTag::PcProjection,
        ModuleTag::QformerBase,
        ModuleTag::QformerPeft,
        ModuleTag::ModalityProjector,
        ModuleTag::Mqe,
        ModuleTag::LmBase,
        ModuleTag::LmPeft,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModuleTag::PcEncoder => "pc_encoder",
            ModuleTag::PcProjection => "pc_projection",
            ModuleTag::QformerBase => "qformer_base",
            ModuleTag::QformerPeft => "qformer_peft",
            ModuleTag::ModalityProjector => "modality_projector",
            ModuleTag::Mqe => "mqe",
            ModuleTag::LmBase => "lm_base",
            ModuleTag::LmPeft => "lm_peft",
        }
    }

    pub fn parse(s: &str) -> Result<ModuleTag> {
        ModuleTag::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown module tag `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeftKind {
    Base,
    LoraA,
    LoraB,
    Norm,
    QueryExpert,
    Router,
}

impl PeftKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PeftKind::Base => "base",
            PeftKind::LoraA => "lora_A",
            PeftKind::LoraB => "lora_B",
            PeftKind::Norm => "norm",
            PeftKind::QueryExpert => "query_expert",
            PeftKind::Router => "router",
        }
    }
}

/// How a tensor is filled at model construction.
#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal {
        std: f64,
    },
    /// Copy of another declared tensor plus optional gaussian noise.
    /// Resolved after all non-copy tensors exist.
    PerturbedCopy {
        of: String,
        std: f64,
    },
}

#[derive(Clone, Debug)]
pub struct TensorDecl {
    pub path: String,
    pub shape: Vec<usize>,
    pub module: ModuleTag,
    pub kind: PeftKind,
    pub init: Init,
}

impl TensorDecl {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub struct ParamEntry<T> {
    pub decl: TensorDecl,
    pub data: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
    /// Set when backward (or an explicit touch) covered this tensor since
    /// the last zero_grad; AdamW refuses to step a trainable tensor whose
    /// gradient was never populated.
    pub grad_live: bool,
}

/// Allocated model parameters plus the manifest metadata.
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    /// Allocate and deterministically initialize all declared tensors.
    pub fn init(decls: &[TensorDecl], seed: u64) -> Result<Self> {
        let mut entries: Vec<ParamEntry<T>> = Vec::with_capacity(decls.len());
        let mut index = HashMap::with_capacity(decls.len());
        for (i, decl) in decls.iter().enumerate() {
            if index.insert(decl.path.clone(), ParamId(i)).is_some() {
                return Err(Error::Config(format!(
                    "duplicate tensor path `{}` in census",
                    decl.path
                )));
            }
            let n = decl.numel();
            let data = match &decl.init {
                Init::Zeros => vec![T::ZERO; n],
                Init::Ones => vec![T::ONE; n],
                Init::Normal { std } => {
                    let mut rng = Rng::derive(seed, &decl.path);
                    (0..n).map(|_| T::from_f64(rng.normal() * std)).collect()
                }
                // second pass below
                Init::PerturbedCopy { .. } => vec![T::ZERO; n],
            };
            entries.push(ParamEntry {
                decl: decl.clone(),
                data,
                grad: vec![T::ZERO; n],
                trainable: false,
                grad_live: false,
            });
        }
        // Resolve copies now that sources exist.
        for i in 0..entries.len() {
            if let Init::PerturbedCopy { of, std } = entries[i].decl.init.clone() {
                let src = index
                    .get(&of)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("copy source `{of}` not declared")))?;
                if entries[src.0].decl.shape != entries[i].decl.shape {
                    return Err(Error::Config(format!(
                        "copy source `{of}` shape mismatch for `{}`",
                        entries[i].decl.path
                    )));
                }
                let base = entries[src.0].data.clone();
                let path = entries[i].decl.path.clone();
                let mut rng = Rng::derive(seed, &path);
                entries[i].data = base
                    .iter()
                    .map(|v| {
                        if std == 0.0 {
                            *v
                        } else {
                            *v + T::from_f64(rng.normal() * std)
                        }
                    })
                    .collect();
            }
        }
        Ok(ParamStore { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn find(&self, path: &str) -> Option<ParamId> {
        self.index.get(path).copied()
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub fn set_grad(&mut self, id: ParamId, grad: &[T]) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.grad.len(), grad.len());
        e.grad.copy_from_slice(grad);
        e.grad_live = true;
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let e = &mut self.entries[id.0];
        debug_assert_eq!(e.grad.len(), grad.len());
        for (g, d) in e.grad.iter_mut().zip(grad) {
            *g += *d;
        }
        e.grad_live = true;
    }

    /// Mark a tensor as covered by the current gradient pass without adding
    /// anything (e.g. experts left unselected by sparse routing).
    pub fn touch_grad(&mut self, id: ParamId) {
        self.entries[id.0].grad_live = true;
    }

    /// Reset every gradient entry to exactly zero.
    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            for g in &mut e.grad {
                *g = T::ZERO;
            }
            e.grad_live = false;
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.entries.len())
            .filter(|i| self.entries[*i].trainable)
            .map(ParamId)
            .collect()
    }

    /// Bit-exact copy of every tensor, used by the freeze audit and the
    /// stage-delta check.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            tensors: self
                .entries
                .iter()
                .map(|e| {
                    (
                        e.decl.path.clone(),
                        e.data.iter().map(|v| v.to_bits_u64()).collect(),
                    )
                })
                .collect(),
        }
    }
}

/// Bit-level view of all tensors at one instant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Snapshot {
    pub tensors: Vec<(String, Vec<u64>)>,
}

impl Snapshot {
    /// Paths whose bits differ between two snapshots.
    pub fn changed_paths(&self, other: &Snapshot) -> Result<Vec<String>> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Audit(format!(
                "snapshot tensor count drifted: {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        let mut changed = Vec::new();
        for ((pa, da), (pb, db)) in self.tensors.iter().zip(&other.tensors) {
            if pa != pb {
                return Err(Error::Audit(format!(
                    "snapshot path drift: `{pa}` vs `{pb}`"
                )));
            }
            if da.len() != db.len() {
                return Err(Error::Audit(format!("snapshot shape drift for `{pa}`")));
            }
            if da != db {
                changed.push(pa.clone());
            }
        }
        Ok(changed)
    }
}
