//! The two bridging MLPs: the point-cloud projection layer (encoder width →
//! query-transformer cross-attention width, exposing its intermediate
//! activation for the expert router) and the modality projector (query width
//! → LM token width).

use crate::config::{ModelConfig, PcProjConfig};
use crate::error::Result;
use crate::graph::{Tape, Value};
use crate::nn::LinearIds;
use crate::params::ParamStore;
use crate::real::Real;

/// Projected features: `y` feeds the query transformer's cross-attention,
/// `hidden` feeds the expert router.
pub struct ProjectedFeatures {
    pub y: Value,
    pub hidden: Value,
}

pub struct PcProjIds {
    pub layers: Vec<LinearIds>,
}

/// Router input width: the projection MLP's intermediate activation, or the
/// output itself for the single-layer variant (which has no intermediate).
pub fn router_input_width(cfg: &ModelConfig) -> usize {
    if cfg.pcproj.depth == 1 {
        cfg.pcproj.out
    } else {
        cfg.pcproj.hidden
    }
}

impl PcProjIds {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cfg: &PcProjConfig,
        x: Value,
        identity_activation: bool,
    ) -> Result<ProjectedFeatures> {
        debug_assert_eq!(self.layers.len(), cfg.depth);
        let mut h = x;
        let mut first_hidden = None;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            let last = i + 1 == self.layers.len();
            if !last {
                if !identity_activation {
                    h = tape.gelu(h)?;
                }
                if first_hidden.is_none() {
                    first_hidden = Some(h);
                }
            }
        }
        Ok(ProjectedFeatures {
            y: h,
            hidden: first_hidden.unwrap_or(h),
        })
    }
}

pub struct MProjIds {
    pub layer1: LinearIds,
    pub layer2: LinearIds,
}

impl MProjIds {
    /// Point queries (o×qf_hidden) -> point tokens (o×lm_hidden).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q_bar: Value,
        identity_activation: bool,
    ) -> Result<Value> {
        let h = self.layer1.forward(tape, store, q_bar)?;
        let h = if identity_activation {
            h
        } else {
            tape.gelu(h)?
        };
        self.layer2.forward(tape, store, h)
    }
}
