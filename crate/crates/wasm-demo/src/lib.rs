//! Browser demo bindings: three interactive views over the core crate —
//! primitive clouds with their farthest-point-sampling patches, the
//! warmup+cosine schedule curves, and live expert-router weights.
//!
//! Every export returns a JSON string; the static page in `www/` renders
//! them onto canvases.

use wasm_bindgen::prelude::*;

use mqe_align::config::{Config, RawConfig, RouterMode};
use mqe_align::data::{primitive_cloud, ShapeKind, PALETTE};
use mqe_align::encoder::group_points;
use mqe_align::graph::Tape;
use mqe_align::model::Model;

fn err(e: mqe_align::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn parse_shape(name: &str) -> Result<ShapeKind, JsValue> {
    ShapeKind::ALL
        .iter()
        .copied()
        .find(|s| s.label() == name)
        .ok_or_else(|| JsValue::from_str(&format!("unknown shape `{name}`")))
}

fn parse_color(name: &str) -> Result<[f32; 3], JsValue> {
    PALETTE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, rgb)| *rgb)
        .ok_or_else(|| JsValue::from_str(&format!("unknown color `{name}`")))
}

#[wasm_bindgen]
pub fn shape_names() -> String {
    let names: Vec<&str> = ShapeKind::ALL.iter().map(|s| s.label()).collect();
    serde_json::to_string(&names).unwrap()
}

#[wasm_bindgen]
pub fn color_names() -> String {
    let names: Vec<&str> = PALETTE.iter().map(|(n, _)| *n).collect();
    serde_json::to_string(&names).unwrap()
}

/// Sample a primitive surface and group it into patches.
/// Returns `{points: [[x,y,z,r,g,b]..], centers: [[x,y,z]..], groups: [[idx..]..]}`
/// where point indices refer to the canonicalized order.
#[wasm_bindgen]
pub fn demo_cloud(
    shape: &str,
    color: &str,
    points: u32,
    patches: u32,
    group_size: u32,
    seed: u32,
) -> Result<String, JsValue> {
    let shape = parse_shape(shape)?;
    let rgb = parse_color(color)?;
    let cloud = primitive_cloud(shape, rgb, points as usize, u64::from(seed));

    let mut cfg = Config::desk().model.encoder.clone();
    cfg.points = points as usize;
    cfg.patches = patches as usize;
    cfg.group_size = (group_size as usize).clamp(1, points as usize);
    let (grouping, canon) = group_points(&cloud, &cfg).map_err(err)?;

    let pts: Vec<Vec<f32>> = (0..canon.len()).map(|i| canon.point(i).to_vec()).collect();
    let centers: Vec<[f32; 3]> = grouping.centers.clone();
    let body = serde_json::json!({
        "points": pts,
        "centers": centers,
        "groups": grouping.groups,
    });
    Ok(body.to_string())
}

/// Schedule curve for one stage of a profile.
#[wasm_bindgen]
pub fn demo_lr_curve(profile: &str, stage: u32, samples: u32) -> Result<String, JsValue> {
    let cfg = Config::profile(profile).map_err(err)?;
    if !(1..=4).contains(&(stage as usize)) {
        return Err(JsValue::from_str("stage must be 1..=4"));
    }
    let sched = cfg.stage(stage as usize).schedule;
    let n = samples.clamp(2, 4096) as usize;
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for i in 0..n {
        let step = i * sched.total_steps / (n - 1);
        xs.push(step);
        ys.push(sched.lr_at(step).map_err(err)?);
    }
    let body = serde_json::json!({
        "total_steps": sched.total_steps,
        "warmup_steps": sched.warmup_steps,
        "warmup_lr": sched.warmup_lr,
        "init_lr": sched.init_lr,
        "min_lr": sched.min_lr,
        "xs": xs,
        "ys": ys,
    });
    Ok(body.to_string())
}

/// Build a desk model with `k` experts, push one cloud through the encoder
/// and projection, and report the router's weights and selection.
#[wasm_bindgen]
pub fn demo_route(
    shape: &str,
    color: &str,
    k: u32,
    g: u32,
    mode: &str,
    seed: u32,
) -> Result<String, JsValue> {
    let shape_kind = parse_shape(shape)?;
    let rgb = parse_color(color)?;
    let mode = RouterMode::parse(mode).map_err(err)?;

    let desk = Config::desk();
    let mut ov = RawConfig::default();
    ov.set("mqe.experts", &k.max(1).to_string());
    ov.set("seed", &u64::from(seed).to_string());
    let cfg = desk.with_overrides(&ov).map_err(err)?;

    let model: Model<f32> = Model::new(&cfg).map_err(err)?;
    let cloud = primitive_cloud(
        shape_kind,
        rgb,
        cfg.model.encoder.points,
        u64::from(seed) ^ 0x5EED,
    );

    let mut tape = Tape::new();
    let x = model.encode(&mut tape, &cloud).map_err(err)?;
    let proj = model.project(&mut tape, x).map_err(err)?;
    let routed = model
        .layout
        .mqe
        .route(
            &mut tape,
            &model.store,
            proj.hidden,
            mode,
            g.max(1) as usize,
        )
        .map_err(err)?;

    let body = serde_json::json!({
        "k": k,
        "g": g,
        "mode": mode.as_str(),
        "weights": routed.decision.weights,
        "selected": routed.decision.selected,
        "weight_sum_selected": routed.decision.selected.iter()
            .map(|i| routed.decision.weights[*i]).sum::<f64>(),
    });
    Ok(body.to_string())
}
