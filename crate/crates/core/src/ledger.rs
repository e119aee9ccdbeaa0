//! Parameter accounting: per-module budgets, stage manifests, and the
//! freeze audit.
//!
//! Counting runs on tensor declarations (integer arithmetic over shapes),
//! never on allocated data, so paper-scale budgets are exact and instant.

use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::declare_model;
use crate::params::{ModuleTag, ParamStore, Snapshot, TensorDecl};
use crate::real::Real;

/// Render 0.1M-rounded, the granularity budget tables are quoted at.
pub fn round_to_tenth_million(exact: u64) -> String {
    format!("{:.1} M", (exact as f64 / 100_000.0).round() / 10.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct ModuleCount {
    pub module: String,
    pub exact: u64,
    pub rounded: String,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageCount {
    pub stage: usize,
    pub trainable_exact: u64,
    pub trainable_rounded: String,
    pub frozen_exact: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CountReport {
    /// Fixed module order, with the trainable flag of the requested stage.
    pub modules: Vec<ModuleCount>,
    pub stages: Vec<StageCount>,
    /// Union of every stage's trainable set.
    pub union_exact: u64,
    pub union_rounded: String,
    pub total_exact: u64,
}

pub fn module_total(decls: &[TensorDecl], tag: ModuleTag) -> u64 {
    decls
        .iter()
        .filter(|d| d.module == tag)
        .map(|d| d.numel() as u64)
        .sum()
}

/// Count report for a config: per-module totals, per-stage trainable
/// budgets, and the cross-stage union.
pub fn count_params(cfg: &Config) -> CountReport {
    let (decls, _) = declare_model(&cfg.model);

    let stage_tags: Vec<Vec<ModuleTag>> = (1..=4).map(|s| cfg.stage_trainable(s)).collect();
    let mut union_tags: Vec<ModuleTag> = Vec::new();
    for tags in &stage_tags {
        for t in tags {
            if !union_tags.contains(t) {
                union_tags.push(*t);
            }
        }
    }

    let modules: Vec<ModuleCount> = ModuleTag::ALL
        .iter()
        .map(|tag| {
            let exact = module_total(&decls, *tag);
            ModuleCount {
                module: tag.as_str().to_string(),
                exact,
                rounded: round_to_tenth_million(exact),
                trainable: union_tags.contains(tag),
            }
        })
        .collect();

    let total_exact: u64 = decls.iter().map(|d| d.numel() as u64).sum();
    let stages: Vec<StageCount> = stage_tags
        .iter()
        .enumerate()
        .map(|(i, tags)| {
            let trainable_exact: u64 = tags.iter().map(|t| module_total(&decls, *t)).sum();
            StageCount {
                stage: i + 1,
                trainable_exact,
                trainable_rounded: round_to_tenth_million(trainable_exact),
                frozen_exact: total_exact - trainable_exact,
            }
        })
        .collect();

    let union_exact: u64 = union_tags.iter().map(|t| module_total(&decls, *t)).sum();
    CountReport {
        modules,
        stages,
        union_exact,
        union_rounded: round_to_tenth_million(union_exact),
        total_exact,
    }
}

/// Plain-text rendering: fixed-order module table then stage budgets.
pub fn render_report(report: &CountReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<20} {:>14} {:>10}  {}\n",
        "module", "exact", "rounded", "trainable"
    ));
    for m in &report.modules {
        out.push_str(&format!(
            "{:<20} {:>14} {:>10}  {}\n",
            m.module,
            m.exact,
            m.rounded,
            if m.trainable { "yes" } else { "-" }
        ));
    }
    out.push('\n');
    for s in &report.stages {
        out.push_str(&format!(
            "stage {:<2} trainable {:>14} {:>10}\n",
            s.stage, s.trainable_exact, s.trainable_rounded
        ));
    }
    out.push_str(&format!(
        "union    trainable {:>14} {:>10}\n",
        report.union_exact, report.union_rounded
    ));
    out.push_str(&format!("total registered   {:>14}\n", report.total_exact));
    out
}

/// Set trainable flags exactly per the stage plan; everything else freezes.
pub fn apply_stage_manifest<T: Real>(
    store: &mut ParamStore<T>,
    trainable_tags: &[ModuleTag],
) -> Result<()> {
    for i in 0..store.len() {
        let id = crate::params::ParamId(i);
        let tag = store.entry(id).decl.module;
        store.set_trainable(id, trainable_tags.contains(&tag));
    }
    Ok(())
}

/// Paths of tensors that changed between snapshots although the manifest
/// froze them. Empty iff the freeze contract held.
pub fn freeze_audit<T: Real>(
    store: &ParamStore<T>,
    before: &Snapshot,
    after: &Snapshot,
) -> Result<Vec<String>> {
    let changed = before.changed_paths(after)?;
    let mut violations = Vec::new();
    for path in changed {
        let id = store
            .find(&path)
            .ok_or_else(|| Error::Audit(format!("snapshot path `{path}` not in manifest")))?;
        if !store.entry(id).trainable {
            violations.push(path);
        }
    }
    Ok(violations)
}
