//! Flat dotted-key configuration.
//!
//! A profile file (`profiles/desk.profile`, `profiles/paper.profile`) supplies
//! every key; CLI overrides are merged on top. Unknown keys are rejected and
//! the effective, merged key set is echoed into each run directory.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::optim::AdamConfig;
use crate::schedule::LrSchedule;

pub const DESK_PROFILE: &str = include_str!("../profiles/desk.profile");
pub const PAPER_PROFILE: &str = include_str!("../profiles/paper.profile");

/// Raw key=value view, ordered for deterministic echo.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    map: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse_text(text: &str) -> Result<RawConfig> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                ))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(RawConfig { map })
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.map
            .insert(key.trim().to_string(), value.trim().to_string());
    }

    /// Overlay `other` on top of self.
    pub fn merge(&mut self, other: &RawConfig) {
        for (k, v) in &other.map {
            self.map.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    /// Sorted `key = value` lines; this is what gets echoed to disk.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> u64 {
        crate::rng::fnv1a(&self.to_text())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    BriefCaption,
    DetailedCaption,
    SingleRound,
    MultiRound,
}

impl SampleKind {
    pub const ALL: [SampleKind; 4] = [
        SampleKind::BriefCaption,
        SampleKind::DetailedCaption,
        SampleKind::SingleRound,
        SampleKind::MultiRound,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SampleKind::BriefCaption => "brief_caption",
            SampleKind::DetailedCaption => "detailed_caption",
            SampleKind::SingleRound => "single_round",
            SampleKind::MultiRound => "multi_round",
        }
    }

    pub fn parse(s: &str) -> Result<SampleKind> {
        SampleKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sample kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RouterMode {
    Constant,
    Soft,
    Sparse,
}

impl RouterMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RouterMode::Constant => "constant",
            RouterMode::Soft => "soft",
            RouterMode::Sparse => "sparse",
        }
    }

    pub fn parse(s: &str) -> Result<RouterMode> {
        match s {
            "constant" => Ok(RouterMode::Constant),
            "soft" => Ok(RouterMode::Soft),
            "sparse" => Ok(RouterMode::Sparse),
            _ => Err(Error::Config(format!("unknown router mode `{s}`"))),
        }
    }
}

/// Which query-transformer pieces receive PEFT.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QformerPeftSet {
    pub lora_qkv: bool,
    pub lora_dense: bool,
    pub norms: bool,
}

impl QformerPeftSet {
    pub fn parse(s: &str) -> Result<QformerPeftSet> {
        let mut set = QformerPeftSet::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "lora_qkv" => set.lora_qkv = true,
                "lora_dense" => set.lora_dense = true,
                "norms" => set.norms = true,
                _ => return Err(Error::Config(format!(
                    "unknown qformer peft selector `{part}` (expected lora_qkv|lora_dense|norms)"
                ))),
            }
        }
        Ok(set)
    }

    pub fn to_csv(self) -> String {
        let mut parts = Vec::new();
        if self.lora_qkv {
            parts.push("lora_qkv");
        }
        if self.lora_dense {
            parts.push("lora_dense");
        }
        if self.norms {
            parts.push("norms");
        }
        parts.join(",")
    }
}

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub points: usize,
    pub group_size: usize,
    pub patches: usize,
    pub hidden: usize,
    pub pointnet_mid: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
}

#[derive(Clone, Debug)]
pub struct PcProjConfig {
    pub depth: usize,
    pub hidden: usize,
    pub out: usize,
}

#[derive(Clone, Debug)]
pub struct QformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub queries: usize,
    pub cross_every: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub peft: QformerPeftSet,
}

#[derive(Clone, Debug)]
pub struct MqeConfig {
    pub experts: usize,
    pub top: usize,
    pub router_hidden: usize,
    pub mode: RouterMode,
    /// First stage (1-4) whose forward path runs the expert mixture.
    pub stage: usize,
    pub noise_std: f64,
}

#[derive(Clone, Debug)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub vocab: usize,
    pub ffn_mult: usize,
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pcproj: PcProjConfig,
    pub qformer: QformerConfig,
    pub mqe: MqeConfig,
    pub mproj_hidden: usize,
    pub lm: LmConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.encoder.hidden.is_multiple_of(self.encoder.heads) {
            return Err(Error::Config(
                "encoder.hidden must divide by encoder.heads".into(),
            ));
        }
        if !self.qformer.hidden.is_multiple_of(self.qformer.heads) {
            return Err(Error::Config(
                "qformer.hidden must divide by qformer.heads".into(),
            ));
        }
        if !self.lm.hidden.is_multiple_of(self.lm.heads) {
            return Err(Error::Config("lm.hidden must divide by lm.heads".into()));
        }
        if self.qformer.cross_every < 1 {
            return Err(Error::Config("qformer.cross_every must be >= 1".into()));
        }
        if !(1..=3).contains(&self.pcproj.depth) {
            return Err(Error::Config(format!(
                "pcproj.depth must be 1, 2 or 3, got {}",
                self.pcproj.depth
            )));
        }
        if self.mqe.experts < 1 {
            return Err(Error::Config("mqe.experts must be >= 1".into()));
        }
        if self.mqe.top < 1 {
            return Err(Error::Config("mqe.top must be >= 1".into()));
        }
        if !(1..=4).contains(&self.mqe.stage) {
            return Err(Error::Config("mqe.stage must be in 1..=4".into()));
        }
        if self.encoder.points < self.encoder.group_size {
            return Err(Error::Config(
                "encoder.points must cover at least one group".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct KindPlan {
    pub batch: usize,
    pub ratio: usize,
}

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub objects: usize,
    pub brief: KindPlan,
    pub detailed: KindPlan,
    pub single: KindPlan,
    pub multi: KindPlan,
}

impl DataConfig {
    pub fn plan_for(&self, kind: SampleKind) -> &KindPlan {
        match kind {
            SampleKind::BriefCaption => &self.brief,
            SampleKind::DetailedCaption => &self.detailed,
            SampleKind::SingleRound => &self.single,
            SampleKind::MultiRound => &self.multi,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageConfig {
    pub epochs: usize,
    pub iters: usize,
    pub schedule: LrSchedule,
    pub kinds: Vec<SampleKind>,
    pub trainable: Vec<crate::params::ModuleTag>,
}

#[derive(Clone, Debug)]
pub struct Config {
    pub seed: u64,
    pub precision: Precision,
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stages: [StageConfig; 4],
    pub stages_include: Vec<usize>,
    /// The merged raw view, kept for echo and hashing.
    pub raw: RawConfig,
}

struct Reader<'a> {
    raw: &'a RawConfig,
    used: HashSet<String>,
}

impl<'a> Reader<'a> {
    fn new(raw: &'a RawConfig) -> Self {
        Reader {
            raw,
            used: HashSet::new(),
        }
    }

    fn str(&mut self, key: &str) -> Result<&'a str> {
        self.used.insert(key.to_string());
        self.raw
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing config key `{key}`")))
    }

    fn usize(&mut self, key: &str) -> Result<usize> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: expected integer, got `{v}`")))
    }

    fn u64(&mut self, key: &str) -> Result<u64> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: expected integer, got `{v}`")))
    }

    fn f64(&mut self, key: &str) -> Result<f64> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: expected number, got `{v}`")))
    }

    fn finish(self) -> Result<()> {
        let unknown: Vec<&String> = self
            .raw
            .map
            .keys()
            .filter(|k| !self.used.contains(*k))
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown
                    .iter()
                    .map(|s| s.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            )))
        }
    }
}

impl Config {
    pub fn desk() -> Config {
        Config::from_raw(RawConfig::parse_text(DESK_PROFILE).expect("desk profile parses"))
            .expect("desk profile is valid")
    }

    pub fn paper() -> Config {
        Config::from_raw(RawConfig::parse_text(PAPER_PROFILE).expect("paper profile parses"))
            .expect("paper profile is valid")
    }

    pub fn profile(name: &str) -> Result<Config> {
        match name {
            "desk" => Ok(Config::desk()),
            "paper" => Ok(Config::paper()),
            _ => Err(Error::Config(format!(
                "unknown profile `{name}` (expected desk|paper)"
            ))),
        }
    }

    /// Profile + overrides, re-validated.
    pub fn with_overrides(&self, overrides: &RawConfig) -> Result<Config> {
        let mut raw = self.raw.clone();
        raw.merge(overrides);
        Config::from_raw(raw)
    }

    pub fn from_raw(raw: RawConfig) -> Result<Config> {
        let mut r = Reader::new(&raw);

        let seed = r.u64("seed")?;
        let precision = match r.str("precision")? {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => {
                return Err(Error::Config(format!(
                    "precision must be f32 or f64, got `{other}`"
                )))
            }
        };
        let adam = AdamConfig {
            beta1: r.f64("adam.beta1")?,
            beta2: r.f64("adam.beta2")?,
            eps: r.f64("adam.eps")?,
            weight_decay: r.f64("adam.weight_decay")?,
        };
        let grad_clip = r.f64("run.grad_clip")?;

        let model = ModelConfig {
            encoder: EncoderConfig {
                points: r.usize("encoder.points")?,
                group_size: r.usize("encoder.group_size")?,
                patches: r.usize("encoder.patches")?,
                hidden: r.usize("encoder.hidden")?,
                pointnet_mid: r.usize("encoder.pointnet_mid")?,
                heads: r.usize("encoder.heads")?,
                layers: r.usize("encoder.layers")?,
                ffn_mult: r.usize("encoder.ffn_mult")?,
            },
            pcproj: PcProjConfig {
                depth: r.usize("pcproj.depth")?,
                hidden: r.usize("pcproj.hidden")?,
                out: r.usize("pcproj.out")?,
            },
            qformer: QformerConfig {
                layers: r.usize("qformer.layers")?,
                heads: r.usize("qformer.heads")?,
                hidden: r.usize("qformer.hidden")?,
                ffn: r.usize("qformer.ffn")?,
                queries: r.usize("qformer.queries")?,
                cross_every: r.usize("qformer.cross_every")?,
                lora_rank: r.usize("qformer.lora_rank")?,
                lora_alpha: r.f64("qformer.lora_alpha")?,
                peft: QformerPeftSet::parse(r.str("qformer.peft")?)?,
            },
            mqe: MqeConfig {
                experts: r.usize("mqe.experts")?,
                top: r.usize("mqe.top")?,
                router_hidden: r.usize("mqe.router_hidden")?,
                mode: RouterMode::parse(r.str("mqe.mode")?)?,
                stage: r.usize("mqe.stage")?,
                noise_std: r.f64("mqe.noise_std")?,
            },
            mproj_hidden: r.usize("mproj.hidden")?,
            lm: LmConfig {
                layers: r.usize("lm.layers")?,
                heads: r.usize("lm.heads")?,
                hidden: r.usize("lm.hidden")?,
                vocab: r.usize("lm.vocab")?,
                ffn_mult: r.usize("lm.ffn_mult")?,
                max_seq: r.usize("lm.max_seq")?,
                lora_rank: r.usize("lm.lora_rank")?,
                lora_alpha: r.f64("lm.lora_alpha")?,
            },
        };
        model.validate()?;

        let data = DataConfig {
            objects: r.usize("data.objects")?,
            brief: KindPlan {
                batch: r.usize("data.brief_caption.batch")?,
                ratio: r.usize("data.brief_caption.ratio")?,
            },
            detailed: KindPlan {
                batch: r.usize("data.detailed_caption.batch")?,
                ratio: r.usize("data.detailed_caption.ratio")?,
            },
            single: KindPlan {
                batch: r.usize("data.single_round.batch")?,
                ratio: r.usize("data.single_round.ratio")?,
            },
            multi: KindPlan {
                batch: r.usize("data.multi_round.batch")?,
                ratio: r.usize("data.multi_round.ratio")?,
            },
        };

        let mut stages = Vec::with_capacity(4);
        for s in 1..=4usize {
            let epochs = r.usize(&format!("stage{s}.epochs"))?;
            let iters = r.usize(&format!("stage{s}.iters"))?;
            let total = epochs * iters;
            let schedule = LrSchedule::new(
                r.f64(&format!("stage{s}.warmup_lr"))?,
                r.f64(&format!("stage{s}.init_lr"))?,
                r.f64(&format!("stage{s}.min_lr"))?,
                r.usize(&format!("stage{s}.warmup_steps"))?,
                total,
            )?;
            let kinds = r
                .str(&format!("stage{s}.kinds"))?
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(SampleKind::parse)
                .collect::<Result<Vec<_>>>()?;
            if kinds.is_empty() {
                return Err(Error::Config(format!("stage{s}.kinds must not be empty")));
            }
            let trainable = r
                .str(&format!("stage{s}.trainable"))?
                .split(',')
                .map(str::trim)
                .filter(|p| !p.is_empty())
                .map(crate::params::ModuleTag::parse)
                .collect::<Result<Vec<_>>>()?;
            stages.push(StageConfig {
                epochs,
                iters,
                schedule,
                kinds,
                trainable,
            });
        }

        let stages_include = r
            .str("stages.include")?
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(|p| {
                p.parse::<usize>()
                    .ok()
                    .filter(|n| (1..=4).contains(n))
                    .ok_or_else(|| Error::Config(format!("stages.include: bad stage `{p}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if stages_include.is_empty() {
            return Err(Error::Config("stages.include must not be empty".into()));
        }
        if stages_include.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "stages.include must be strictly increasing".into(),
            ));
        }

        r.finish()?;
        let stages: [StageConfig; 4] = stages.try_into().expect("four stages");
        Ok(Config {
            seed,
            precision,
            adam,
            grad_clip,
            model,
            data,
            stages,
            stages_include,
            raw,
        })
    }

    pub fn stage(&self, stage: usize) -> &StageConfig {
        &self.stages[stage - 1]
    }

    /// Trainable tag set for a stage, including the expert mixture once it
    /// becomes active.
    pub fn stage_trainable(&self, stage: usize) -> Vec<crate::params::ModuleTag> {
        let mut tags = self.stage(stage).trainable.clone();
        if stage >= self.model.mqe.stage && !tags.contains(&crate::params::ModuleTag::Mqe) {
            tags.push(crate::params::ModuleTag::Mqe);
        }
        tags
    }

    pub fn mqe_active_in_stage(&self, stage: usize) -> bool {
        stage >= self.model.mqe.stage
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_profiles_parse() {
        let desk = Config::desk();
        assert_eq!(desk.model.mqe.experts, 8);
        let paper = Config::paper();
        assert_eq!(paper.model.qformer.queries, 32);
        assert_eq!(paper.model.lm.hidden, 2560);
        assert_eq!(paper.stage(1).schedule.warmup_steps, 7000);
        assert_eq!(paper.stage(3).epochs, 3);
        assert_eq!(paper.data.detailed.batch, 6);
        assert_eq!(paper.data.single.ratio, 3);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut raw = RawConfig::parse_text(DESK_PROFILE).unwrap();
        raw.set("nonsense.key", "1");
        let err = Config::from_raw(raw).unwrap_err();
        assert!(err.to_string().contains("nonsense.key"));
    }

    #[test]
    fn override_changes_value() {
        let desk = Config::desk();
        let mut ov = RawConfig::default();
        ov.set("mqe.experts", "3");
        let cfg = desk.with_overrides(&ov).unwrap();
        assert_eq!(cfg.model.mqe.experts, 3);
    }

    #[test]
    fn echo_roundtrips() {
        let desk = Config::desk();
        let text = desk.raw.to_text();
        let reparsed = Config::from_raw(RawConfig::parse_text(&text).unwrap()).unwrap();
        assert_eq!(reparsed.raw.to_text(), text);
        assert_eq!(reparsed.raw.hash(), desk.raw.hash());
    }

    #[test]
    fn mqe_joins_trainable_set_from_its_stage() {
        let desk = Config::desk();
        assert!(!desk
            .stage_trainable(3)
            .contains(&crate::params::ModuleTag::Mqe));
        assert_eq!(desk.stage_trainable(4), vec![crate::params::ModuleTag::Mqe]);
        let mut ov = RawConfig::default();
        ov.set("mqe.stage", "2");
        let cfg = desk.with_overrides(&ov).unwrap();
        assert!(cfg
            .stage_trainable(2)
            .contains(&crate::params::ModuleTag::Mqe));
    }
}
