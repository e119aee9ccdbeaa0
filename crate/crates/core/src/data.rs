//! Synthetic point-text instruction data: parametric surface primitives
//! with closed-world captions and conversations, the on-disk dataset
//! layout, and the ratio-exact mixed batch stream.
//!
//! Dataset layout: `clouds/obj_NNNN.pcf` binaries plus `samples.jsonl`,
//! one instruction sample per line with fields `cloud`, `kind`, `turns`.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, SampleKind};
use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::rng::Rng;

pub const BRIEF_INSTRUCTION: &str = "Briefly caption this 3D model.";
pub const DETAILED_INSTRUCTION: &str = "Caption this 3D model in detail.";
pub const PROMPT_INSTRUCTION_TYPED: &str = "What is this?";
pub const PROMPT_COMPLETION_TYPED: &str = "This is an object of";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Box,
    Cylinder,
    Cone,
    Torus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Sphere,
        ShapeKind::Box,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::Torus,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::Torus => "torus",
        }
    }

    fn detail(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "the surface is smooth and perfectly round",
            ShapeKind::Box => "it has six flat faces and straight edges",
            ShapeKind::Cylinder => "it has a round side wall and two flat caps",
            ShapeKind::Cone => "it tapers from a round base to a single apex",
            ShapeKind::Torus => "it is a ring with a round cross section",
        }
    }
}

/// Named palette; black doubles as the colorless default (rgb = 0).
pub const PALETTE: [(&str, [f32; 3]); 7] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("purple", [0.6, 0.0, 0.8]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

/// Uniform surface sample of one primitive at canonical size.
pub fn primitive_cloud(kind: ShapeKind, rgb: [f32; 3], n: usize, seed: u64) -> PointCloud {
    let mut rng = Rng::derive(seed, kind.label());
    let mut data = Vec::with_capacity(n * 6);
    for _ in 0..n {
        let [x, y, z] = sample_surface(kind, &mut rng);
        data.extend_from_slice(&[x, y, z, rgb[0], rgb[1], rgb[2]]);
    }
    PointCloud { data }
}

fn sample_surface(kind: ShapeKind, rng: &mut Rng) -> [f32; 3] {
    match kind {
        ShapeKind::Sphere => {
            // unit radius exactly
            loop {
                let (a, b, c) = (rng.normal(), rng.normal(), rng.normal());
                let norm = (a * a + b * b + c * c).sqrt();
                if norm > 1e-9 {
                    return [(a / norm) as f32, (b / norm) as f32, (c / norm) as f32];
                }
            }
        }
        ShapeKind::Box => {
            let (hx, hy, hz) = (0.8, 0.55, 0.35);
            let areas = [hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy];
            let total: f64 = areas.iter().sum::<f64>();
            let mut pick = rng.next_f64() * total;
            let mut face = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < *a {
                    face = i;
                    break;
                }
                pick -= a;
            }
            let u = rng.uniform(-1.0, 1.0);
            let v = rng.uniform(-1.0, 1.0);
            let p = match face {
                0 => [hx, u * hy, v * hz],
                1 => [-hx, u * hy, v * hz],
                2 => [u * hx, hy, v * hz],
                3 => [u * hx, -hy, v * hz],
                4 => [u * hx, v * hy, hz],
                _ => [u * hx, v * hy, -hz],
            };
            [p[0] as f32, p[1] as f32, p[2] as f32]
        }
        ShapeKind::Cylinder => {
            let (r, h) = (0.45, 1.4);
            let lateral = std::f64::consts::TAU * r * h;
            let caps = 2.0 * std::f64::consts::PI * r * r;
            if rng.next_f64() * (lateral + caps) < lateral {
                let theta = rng.uniform(0.0, std::f64::consts::TAU);
                let z = rng.uniform(-h / 2.0, h / 2.0);
                [(r * theta.cos()) as f32, (r * theta.sin()) as f32, z as f32]
            } else {
                let z = if rng.next_f64() < 0.5 {
                    h / 2.0
                } else {
                    -h / 2.0
                };
                let rad = r * rng.next_f64().sqrt();
                let theta = rng.uniform(0.0, std::f64::consts::TAU);
                [
                    (rad * theta.cos()) as f32,
                    (rad * theta.sin()) as f32,
                    z as f32,
                ]
            }
        }
        ShapeKind::Cone => {
            let (r, h) = (0.6f64, 1.2f64);
            let slant = (r * r + h * h).sqrt();
            let lateral = std::f64::consts::PI * r * slant;
            let base = std::f64::consts::PI * r * r;
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            if rng.next_f64() * (lateral + base) < lateral {
                // distance from apex grows as sqrt(u) for uniform area
                let t = rng.next_f64().sqrt();
                let rad = t * r;
                let z = h / 2.0 - t * h; // apex at +h/2, base rim at -h/2
                [
                    (rad * theta.cos()) as f32,
                    (rad * theta.sin()) as f32,
                    z as f32,
                ]
            } else {
                let rad = r * rng.next_f64().sqrt();
                [
                    (rad * theta.cos()) as f32,
                    (rad * theta.sin()) as f32,
                    (-h / 2.0) as f32,
                ]
            }
        }
        ShapeKind::Torus => {
            let (major, minor) = (0.65, 0.22);
            loop {
                let phi = rng.uniform(0.0, std::f64::consts::TAU);
                // density on the minor circle is proportional to R + r cos(phi)
                if rng.next_f64() * (major + minor) <= major + minor * phi.cos() {
                    let theta = rng.uniform(0.0, std::f64::consts::TAU);
                    let ring = major + minor * phi.cos();
                    return [
                        (ring * theta.cos()) as f32,
                        (ring * theta.sin()) as f32,
                        (minor * phi.sin()) as f32,
                    ];
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthObject {
    pub id: usize,
    pub shape: ShapeKind,
    pub color_name: String,
    pub rgb: [f32; 3],
    pub cloud: PointCloud,
}

impl SynthObject {
    pub fn brief_caption(&self) -> String {
        format!("a {} {}", self.color_name, self.shape.label())
    }

    pub fn detailed_caption(&self) -> String {
        format!(
            "this is a 3d model of a {} {}. {}.",
            self.color_name,
            self.shape.label(),
            self.shape.detail()
        )
    }

    pub fn label(&self) -> &'static str {
        self.shape.label()
    }

    fn qa_pool(&self) -> Vec<(String, String)> {
        vec![
            (PROMPT_INSTRUCTION_TYPED.to_string(), self.brief_caption()),
            (
                PROMPT_COMPLETION_TYPED.to_string(),
                self.shape.label().to_string(),
            ),
            (BRIEF_INSTRUCTION.to_string(), self.brief_caption()),
            ("what color is it?".to_string(), self.color_name.clone()),
            ("how many objects are shown?".to_string(), "one".to_string()),
        ]
    }
}

/// Deterministic object set: shapes round-robin for balance, colors seeded.
pub fn gen_objects(n_objects: usize, points: usize, seed: u64) -> Vec<SynthObject> {
    (0..n_objects)
        .map(|i| {
            let shape = ShapeKind::ALL[i % ShapeKind::ALL.len()];
            let mut rng = Rng::derive(seed, &format!("object.{i}"));
            let (color_name, rgb) = PALETTE[rng.range(PALETTE.len())];
            let cloud = primitive_cloud(shape, rgb, points, seed ^ (i as u64).wrapping_mul(0x9E37));
            SynthObject {
                id: i,
                shape,
                color_name: color_name.to_string(),
                rgb,
                cloud,
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Turn {
    pub q: String,
    pub a: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct InstructionSample {
    pub cloud: String,
    pub kind: SampleKind,
    pub turns: Vec<Turn>,
}

/// All instruction samples for one object. Both classification prompts
/// appear as single-round samples so generative evaluation stays
/// in-distribution.
fn object_samples(obj: &SynthObject, cloud_rel: &str, seed: u64) -> Vec<InstructionSample> {
    let mk = |kind: SampleKind, turns: Vec<(String, String)>| InstructionSample {
        cloud: cloud_rel.to_string(),
        kind,
        turns: turns.into_iter().map(|(q, a)| Turn { q, a }).collect(),
    };
    let mut out = vec![
        mk(
            SampleKind::BriefCaption,
            vec![(BRIEF_INSTRUCTION.to_string(), obj.brief_caption())],
        ),
        mk(
            SampleKind::DetailedCaption,
            vec![(DETAILED_INSTRUCTION.to_string(), obj.detailed_caption())],
        ),
    ];
    // both classification prompts and the captioning request appear as
    // single-round samples for every object
    let pool = obj.qa_pool();
    out.push(mk(SampleKind::SingleRound, vec![pool[0].clone()]));
    out.push(mk(SampleKind::SingleRound, vec![pool[1].clone()]));
    out.push(mk(SampleKind::SingleRound, vec![pool[2].clone()]));
    let mut rng = Rng::derive(seed, &format!("turns.{}", obj.id));
    let n_turns = 2 + rng.range(2); // 2-3 turns
    let mut order: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut order);
    let turns: Vec<(String, String)> = order[..n_turns].iter().map(|i| pool[*i].clone()).collect();
    out.push(mk(SampleKind::MultiRound, turns));
    out
}

/// Generate and write a dataset directory; byte-identical under a fixed seed.
pub fn gen_synthetic(
    dir: &Path,
    n_objects: usize,
    points: usize,
    seed: u64,
) -> Result<Vec<SynthObject>> {
    if n_objects < 1 {
        return Err(Error::Config("n_objects must be >= 1".into()));
    }
    let clouds_dir = dir.join("clouds");
    std::fs::create_dir_all(&clouds_dir)?;
    let objects = gen_objects(n_objects, points, seed);
    let mut lines = Vec::new();
    for obj in &objects {
        let rel = format!("clouds/obj_{:04}.pcf", obj.id);
        obj.cloud.write_pcf(&dir.join(&rel))?;
        for sample in object_samples(obj, &rel, seed) {
            lines.push(serde_json::to_string(&sample)?);
        }
    }
    let mut f = std::fs::File::create(dir.join("samples.jsonl"))?;
    for line in lines {
        writeln!(f, "{line}")?;
    }
    Ok(objects)
}

pub struct Dataset {
    pub dir: PathBuf,
    pub samples: Vec<InstructionSample>,
    /// Sample index -> cloud index.
    pub sample_cloud: Vec<usize>,
    pub clouds: Vec<PointCloud>,
}

impl Dataset {
    /// Dataset assembled directly from generated objects, no disk involved.
    pub fn in_memory(objects: &[SynthObject], seed: u64) -> Dataset {
        let mut samples = Vec::new();
        let mut sample_cloud = Vec::new();
        let mut clouds = Vec::with_capacity(objects.len());
        for (i, obj) in objects.iter().enumerate() {
            clouds.push(obj.cloud.clone());
            let rel = format!("clouds/obj_{:04}.pcf", obj.id);
            for s in object_samples(obj, &rel, seed) {
                samples.push(s);
                sample_cloud.push(i);
            }
        }
        Dataset {
            dir: PathBuf::new(),
            samples,
            sample_cloud,
            clouds,
        }
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(dir.join("samples.jsonl"))?;
        let mut samples = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(serde_json::from_str::<InstructionSample>(&line)?);
        }
        let mut cloud_ids: HashMap<String, usize> = HashMap::new();
        let mut clouds = Vec::new();
        let mut sample_cloud = Vec::with_capacity(samples.len());
        for s in &samples {
            let idx = match cloud_ids.get(&s.cloud) {
                Some(i) => *i,
                None => {
                    let cloud = PointCloud::read_pcf(&dir.join(&s.cloud))?;
                    clouds.push(cloud);
                    cloud_ids.insert(s.cloud.clone(), clouds.len() - 1);
                    clouds.len() - 1
                }
            };
            sample_cloud.push(idx);
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            samples,
            sample_cloud,
            clouds,
        })
    }

    pub fn indices_of_kind(&self, kind: SampleKind) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|i| self.samples[*i].kind == kind)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub kind: SampleKind,
    /// Sample indices into the dataset.
    pub items: Vec<usize>,
}

/// Infinite deterministic batch stream. The kind pattern for one window of
/// Σ ratios batches is fixed once (seeded shuffle) and repeated verbatim,
/// so every window of that length — at any offset — carries exactly the
/// configured kind counts.
pub struct BatchStream {
    pattern: Vec<SampleKind>,
    cursor: usize,
    per_kind: HashMap<SampleKind, KindCursor>,
}

struct KindCursor {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

pub fn mixed_batches(
    dataset: &Dataset,
    data_cfg: &DataConfig,
    kinds: &[SampleKind],
    seed: u64,
) -> Result<BatchStream> {
    let mut pattern = Vec::new();
    let mut per_kind = HashMap::new();
    for kind in kinds {
        let plan = data_cfg.plan_for(*kind);
        if plan.ratio < 1 {
            return Err(Error::Config(format!(
                "ratio for {} must be a positive integer",
                kind.as_str()
            )));
        }
        let indices = dataset.indices_of_kind(*kind);
        if indices.is_empty() {
            return Err(Error::Config(format!(
                "dataset has no samples of kind {}",
                kind.as_str()
            )));
        }
        for _ in 0..plan.ratio {
            pattern.push(*kind);
        }
        let mut order = indices;
        Rng::derive(seed, &format!("kind.{}", kind.as_str())).shuffle(&mut order);
        per_kind.insert(
            *kind,
            KindCursor {
                order,
                pos: 0,
                batch: plan.batch,
            },
        );
    }
    Rng::derive(seed, "kind.pattern").shuffle(&mut pattern);
    Ok(BatchStream {
        pattern,
        cursor: 0,
        per_kind,
    })
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let kind = self.pattern[self.cursor % self.pattern.len()];
        self.cursor += 1;
        let kc = self.per_kind.get_mut(&kind).expect("kind registered");
        let mut items = Vec::with_capacity(kc.batch);
        for _ in 0..kc.batch {
            items.push(kc.order[kc.pos % kc.order.len()]);
            kc.pos += 1;
        }
        Some(Batch { kind, items })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn unit_sphere_points_lie_on_the_surface() {
        let cloud = primitive_cloud(ShapeKind::Sphere, [0.2, 0.2, 0.2], 500, 3);
        for i in 0..cloud.len() {
            let [x, y, z] = cloud.xyz(i);
            let n = (x as f64 * x as f64 + y as f64 * y as f64 + z as f64 * z as f64).sqrt();
            assert!((n - 1.0).abs() < 1e-6, "point {i}: norm {n}");
        }
    }

    #[test]
    fn colorless_clouds_are_black() {
        let cloud = primitive_cloud(ShapeKind::Cone, [0.0, 0.0, 0.0], 64, 5);
        for i in 0..cloud.len() {
            assert_eq!(&cloud.point(i)[3..6], &[0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn generation_is_byte_identical_under_a_seed() {
        let base = std::env::temp_dir().join("mqe_align_gen_twice");
        let (a, b) = (base.join("a"), base.join("b"));
        std::fs::remove_dir_all(&base).ok();
        gen_synthetic(&a, 6, 64, 11).unwrap();
        gen_synthetic(&b, 6, 64, 11).unwrap();
        let read = |d: &Path| {
            let mut entries: Vec<PathBuf> = walk(d);
            entries.sort();
            entries
                .iter()
                .map(|p| {
                    (
                        p.strip_prefix(d).unwrap().to_path_buf(),
                        std::fs::read(p).unwrap(),
                    )
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(read(&a), read(&b));
        std::fs::remove_dir_all(&base).ok();
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn stream_windows_match_ratios_at_any_offset() {
        let dir = std::env::temp_dir().join("mqe_align_stream_test");
        std::fs::remove_dir_all(&dir).ok();
        gen_synthetic(&dir, 8, 64, 2).unwrap();
        let ds = Dataset::load(&dir).unwrap();
        let cfg = Config::desk();
        let kinds = [
            SampleKind::DetailedCaption,
            SampleKind::SingleRound,
            SampleKind::MultiRound,
        ];
        let batches: Vec<Batch> = mixed_batches(&ds, &cfg.data, &kinds, 5)
            .unwrap()
            .take(64)
            .collect();
        let window = 8; // ratios 2 + 3 + 3
        for offset in 0..(64 - window) {
            let mut counts: HashMap<SampleKind, usize> = HashMap::new();
            for b in &batches[offset..offset + window] {
                *counts.entry(b.kind).or_insert(0) += 1;
            }
            assert_eq!(counts[&SampleKind::DetailedCaption], 2, "offset {offset}");
            assert_eq!(counts[&SampleKind::SingleRound], 3);
            assert_eq!(counts[&SampleKind::MultiRound], 3);
        }
        // batch sizes honor the per-kind plan
        for b in &batches {
            assert_eq!(b.items.len(), cfg.data.plan_for(b.kind).batch);
        }
        // same seed, same stream
        let again: Vec<Batch> = mixed_batches(&ds, &cfg.data, &kinds, 5)
            .unwrap()
            .take(64)
            .collect();
        for (x, y) in batches.iter().zip(&again) {
            assert_eq!(x.kind, y.kind);
            assert_eq!(x.items, y.items);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn missing_kind_is_a_config_error() {
        let dir = std::env::temp_dir().join("mqe_align_missing_kind");
        std::fs::remove_dir_all(&dir).ok();
        gen_synthetic(&dir, 2, 64, 2).unwrap();
        let mut ds = Dataset::load(&dir).unwrap();
        ds.samples.retain(|s| s.kind != SampleKind::MultiRound);
        let cfg = Config::desk();
        let err = mixed_batches(&ds, &cfg.data, &[SampleKind::MultiRound], 1);
        assert!(err.is_err());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn every_answer_recoverable_from_parameters() {
        let objects = gen_objects(10, 64, 9);
        for obj in &objects {
            for s in object_samples(obj, "x.pcf", 9) {
                for t in &s.turns {
                    let ok = t.a.contains(obj.label())
                        || t.a == obj.color_name
                        || t.a == "one"
                        || t.a == obj.detailed_caption();
                    assert!(ok, "unanswerable turn {t:?}");
                }
            }
        }
    }
}
