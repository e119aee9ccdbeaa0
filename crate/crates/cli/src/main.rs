//! Command-line entry point: data generation, staged training, parameter
//! accounting, gradient checking, evaluation, decoding, and the ablation
//! matrix. Every run echoes its effective configuration into the output
//! directory; errors print one machine-parsable line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mqe_align::ablate;
use mqe_align::checkpoint;
use mqe_align::config::{Config, Precision, RawConfig};
use mqe_align::data::{gen_synthetic, Dataset, SynthObject};
use mqe_align::error::Error;
use mqe_align::eval::{caption_match_rate, evaluate_classification, PromptKind};
use mqe_align::ledger;
use mqe_align::lm::decode_text;
use mqe_align::model::Model;
use mqe_align::pointcloud::PointCloud;
use mqe_align::real::Real;
use mqe_align::train::{check_stage_order, StagePlan, Trainer};

#[derive(Parser)]
#[command(
    name = "mqe-align",
    about = "Point-cloud/language alignment stack: staged PEFT training, expert routing, parameter accounting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Base profile: desk or paper.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Extra key=value config file applied over the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. -s mqe.experts=3 (repeatable).
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed override (shorthand for -s seed=N).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config, Error> {
        let mut cfg = Config::profile(&self.profile)?;
        let mut overrides = RawConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            overrides.merge(&RawConfig::parse_text(&text)?);
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` must be key=value")))?;
            overrides.set(k, v);
        }
        if let Some(seed) = self.seed {
            overrides.set("seed", &seed.to_string());
        }
        cfg = cfg.with_overrides(&overrides)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic point-text instruction dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Object count (defaults to data.objects).
        #[arg(long)]
        objects: Option<usize>,
    },
    /// Train a single stage, resuming from the previous stage's checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        stage: usize,
        /// Dataset directory (from gen-data).
        #[arg(long)]
        data: PathBuf,
        /// Run directory: logs, config echo, checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to resume from (defaults to <out>/stage<N-1>).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint whose config hash differs.
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Run every configured stage in order.
    TrainAll {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact and rounded parameter budgets per module and stage.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Emit the machine-readable JSON document instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference verification of every trainable block (f64).
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Coordinates checked per tensor.
        #[arg(long, default_value_t = 2)]
        coords: usize,
        /// Maximum accepted relative error.
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Generative classification accuracy over a dataset's objects.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// I ("What is this?") or C ("This is an object of").
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 48)]
        max_new: usize,
        #[arg(long)]
        allow_config_mismatch: bool,
        /// Also report the verbatim brief-caption match rate.
        #[arg(long)]
        captions: bool,
    },
    /// Greedy-decode a response for one point cloud.
    Decode {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Point-cloud file (.pcf).
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long)]
        instruction: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        #[arg(long)]
        allow_config_mismatch: bool,
    },
    /// Run one configuration-ablation axis (one training step per variant).
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// One of: stages, mqe-stage, qformer-peft, experts, proj-depth,
        /// router, stage4-set.
        #[arg(long)]
        axis: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn echo_config(dir: &Path, cfg: &Config) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.txt"), cfg.raw.to_text())?;
    Ok(())
}

/// (cloud index, label, caption) per object, reconstructed from the brief
/// captions ("a <color> <shape>" -> the shape is the final word).
fn objects_from_dataset(dataset: &Dataset) -> Vec<(usize, String, String)> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.kind != mqe_align::config::SampleKind::BriefCaption {
            continue;
        }
        let cloud_idx = dataset.sample_cloud[i];
        if !seen.insert(cloud_idx) {
            continue;
        }
        let caption = s.turns[0].a.clone();
        let label = caption.split_whitespace().last().unwrap_or("").to_string();
        out.push((cloud_idx, label, caption));
    }
    out
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::GenData { cfg, out, objects } => {
            let cfg = cfg.resolve()?;
            let n = objects.unwrap_or(cfg.data.objects);
            echo_config(&out, &cfg)?;
            gen_synthetic(&out, n, cfg.model.encoder.points, cfg.seed)?;
            println!("wrote {n} objects to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            cfg,
            stage,
            data,
            out,
            resume,
            allow_config_mismatch,
        } => {
            let cfg = cfg.resolve()?;
            match cfg.precision {
                Precision::F32 => {
                    train_one::<f32>(&cfg, stage, &data, &out, resume, allow_config_mismatch)
                }
                Precision::F64 => {
                    train_one::<f64>(&cfg, stage, &data, &out, resume, allow_config_mismatch)
                }
            }
        }
        Command::TrainAll { cfg, data, out } => {
            let cfg = cfg.resolve()?;
            match cfg.precision {
                Precision::F32 => train_all::<f32>(&cfg, &data, &out),
                Precision::F64 => train_all::<f64>(&cfg, &data, &out),
            }
        }
        Command::CountParams { cfg, json } => {
            let started = std::time::Instant::now();
            let cfg = cfg.resolve()?;
            let report = ledger::count_params(&cfg);
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", ledger::render_report(&report));
                println!("({} ms)", started.elapsed().as_millis());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            cfg,
            coords,
            tolerance,
        } => {
            let cfg = cfg.resolve()?;
            let reports = mqe_align::gradcheck::run(&cfg, cfg.seed, coords)?;
            let mut ok = true;
            for r in &reports {
                let pass = r.max_rel_err < tolerance;
                ok &= pass;
                println!(
                    "{:<20} tensors {:>3}  coords {:>3}  max_rel_err {:.3e}  {}",
                    r.name,
                    r.tensors,
                    r.coords_checked,
                    r.max_rel_err,
                    if pass { "ok" } else { "FAIL" }
                );
            }
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Eval {
            cfg,
            prompt,
            data,
            ckpt,
            max_new,
            allow_config_mismatch,
            captions,
        } => {
            let cfg = cfg.resolve()?;
            let prompt = PromptKind::parse(&prompt)?;
            match cfg.precision {
                Precision::F32 => eval_cmd::<f32>(
                    &cfg,
                    prompt,
                    &data,
                    &ckpt,
                    max_new,
                    allow_config_mismatch,
                    captions,
                ),
                Precision::F64 => eval_cmd::<f64>(
                    &cfg,
                    prompt,
                    &data,
                    &ckpt,
                    max_new,
                    allow_config_mismatch,
                    captions,
                ),
            }
        }
        Command::Decode {
            cfg,
            ckpt,
            cloud,
            instruction,
            max_new,
            allow_config_mismatch,
        } => {
            let cfg = cfg.resolve()?;
            match cfg.precision {
                Precision::F32 => decode_cmd::<f32>(
                    &cfg,
                    &ckpt,
                    &cloud,
                    &instruction,
                    max_new,
                    allow_config_mismatch,
                ),
                Precision::F64 => decode_cmd::<f64>(
                    &cfg,
                    &ckpt,
                    &cloud,
                    &instruction,
                    max_new,
                    allow_config_mismatch,
                ),
            }
        }
        Command::Ablate { cfg, axis } => {
            let cfg = cfg.resolve()?;
            let outcomes = ablate::run_axis(&cfg, &axis)?;
            println!("axis: {axis}");
            for o in &outcomes {
                println!(
                    "  {:<24} step_loss {:>9.4}  logits {:016x}",
                    o.variant, o.step_loss, o.fingerprint
                );
            }
            if ablate::axis_requires_distinct_logits(&axis) {
                let mut fps: Vec<u64> = outcomes.iter().map(|o| o.fingerprint).collect();
                fps.sort_unstable();
                fps.dedup();
                if fps.len() != outcomes.len() {
                    return Err(Error::Contract(format!(
                        "axis {axis}: variants produced identical logits"
                    )));
                }
                println!("  all variants produce distinct logits");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_model_at<T: Real>(
    cfg: &Config,
    ckpt: &Path,
    allow_config_mismatch: bool,
) -> Result<(Model<T>, checkpoint::CheckpointManifest), Error> {
    let mut model: Model<T> = Model::new(cfg)?;
    let manifest = checkpoint::load(
        ckpt,
        &mut model.store,
        cfg.raw.hash(),
        allow_config_mismatch,
    )?;
    if manifest.config_hash != format!("{:016x}", cfg.raw.hash()) {
        eprintln!(
            "warning: checkpoint config hash {} differs from effective config",
            manifest.config_hash
        );
    }
    Ok((model, manifest))
}

fn train_one<T: Real>(
    cfg: &Config,
    stage: usize,
    data: &Path,
    out: &Path,
    resume: Option<PathBuf>,
    allow_config_mismatch: bool,
) -> Result<ExitCode, Error> {
    echo_config(out, cfg)?;
    let dataset = Dataset::load(data)?;
    let first = *cfg.stages_include.first().expect("validated non-empty");
    let mut model: Model<T> = Model::new(cfg)?;

    if stage != first {
        let pos = cfg
            .stages_include
            .iter()
            .position(|s| *s == stage)
            .ok_or_else(|| Error::Config(format!("stage {stage} is not in stages.include")))?;
        let prev = cfg.stages_include[pos - 1];
        let resume_dir = resume.unwrap_or_else(|| out.join(format!("stage{prev}")));
        if !resume_dir.join("manifest.json").exists() {
            return Err(Error::Config(format!(
                "stage-order violation: stage {stage} requires a stage {prev} checkpoint at {}",
                resume_dir.display()
            )));
        }
        let manifest = checkpoint::load(
            &resume_dir,
            &mut model.store,
            cfg.raw.hash(),
            allow_config_mismatch,
        )?;
        check_stage_order(manifest.stage, stage, &cfg.stages_include)?;
    } else if let Some(r) = resume {
        let manifest =
            checkpoint::load(&r, &mut model.store, cfg.raw.hash(), allow_config_mismatch)?;
        check_stage_order(manifest.stage, stage, &cfg.stages_include)?;
    }

    let mut trainer = Trainer::new(cfg, model);
    let plan = StagePlan::from_config(cfg, stage)?;
    let stats = trainer.run_stage(&dataset, &plan, Some(out))?;
    println!(
        "stage {stage} done; epoch means: {}",
        stats
            .epoch_means
            .iter()
            .map(|m| format!("{m:.4}"))
            .collect::<Vec<_>>()
            .join(" -> ")
    );
    Ok(ExitCode::SUCCESS)
}

fn train_all<T: Real>(cfg: &Config, data: &Path, out: &Path) -> Result<ExitCode, Error> {
    echo_config(out, cfg)?;
    let dataset = Dataset::load(data)?;
    let model: Model<T> = Model::new(cfg)?;
    let mut trainer = Trainer::new(cfg, model);
    let stats = trainer.train_all(&dataset, Some(out))?;
    for s in &stats {
        println!(
            "stage {} epoch means: {}",
            s.stage,
            s.epoch_means
                .iter()
                .map(|m| format!("{m:.4}"))
                .collect::<Vec<_>>()
                .join(" -> ")
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd<T: Real>(
    cfg: &Config,
    prompt: PromptKind,
    data: &Path,
    ckpt: &Path,
    max_new: usize,
    allow_config_mismatch: bool,
    captions: bool,
) -> Result<ExitCode, Error> {
    let dataset = Dataset::load(data)?;
    let (model, manifest) = load_model_at::<T>(cfg, ckpt, allow_config_mismatch)?;
    let mqe_active = cfg.mqe_active_in_stage(manifest.stage.max(1));

    let objs: Vec<SynthObject> = objects_from_dataset(&dataset)
        .into_iter()
        .map(|(cloud_idx, label, caption)| {
            let shape = mqe_align::data::ShapeKind::ALL
                .iter()
                .copied()
                .find(|s| s.label() == label)
                .unwrap_or(mqe_align::data::ShapeKind::Sphere);
            let color = caption
                .trim_start_matches("a ")
                .strip_suffix(&format!(" {label}"))
                .unwrap_or("")
                .to_string();
            SynthObject {
                id: cloud_idx,
                shape,
                color_name: color,
                rgb: [0.0; 3],
                cloud: dataset.clouds[cloud_idx].clone(),
            }
        })
        .collect();

    let acc = evaluate_classification(&model, &objs, prompt, mqe_active, max_new)?;
    println!(
        "{{\"prompt\": \"{}\", \"objects\": {}, \"accuracy\": {acc:.4}}}",
        match prompt {
            PromptKind::InstructionTyped => "I",
            PromptKind::CompletionTyped => "C",
        },
        objs.len()
    );
    if captions {
        let rate = caption_match_rate(&model, &objs, mqe_active, max_new)?;
        println!("{{\"caption_match_rate\": {rate:.4}}}");
    }
    Ok(ExitCode::SUCCESS)
}

fn decode_cmd<T: Real>(
    cfg: &Config,
    ckpt: &Path,
    cloud: &Path,
    instruction: &str,
    max_new: usize,
    allow_config_mismatch: bool,
) -> Result<ExitCode, Error> {
    let (model, manifest) = load_model_at::<T>(cfg, ckpt, allow_config_mismatch)?;
    let pc = PointCloud::read_pcf(cloud)?;
    let mqe_active = cfg.mqe_active_in_stage(manifest.stage.max(1));
    let ids = model.greedy_decode(&pc, instruction, max_new, mqe_active)?;
    println!("{}", decode_text(&ids));
    Ok(ExitCode::SUCCESS)
}
