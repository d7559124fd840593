//! `duet`: data synthesis, training, generation, evaluation and export.

mod anim;
mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::anim::Format;
use crate::commands::{GenerateArgs, Run};
use crate::config::RunConfig;
use crate::failure::Failure;

#[derive(Parser)]
#[command(name = "duet", version, about = "Two-person text-to-motion with discrete motion tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone, Default)]
struct Inputs {
    /// Training dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    vq: Option<PathBuf>,
    #[arg(long)]
    transformer: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Decode {
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic interaction dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        /// Samples per class for the three-class set.
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    TrainVq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    TrainTransformer {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Generate both persons from text.
    Generate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        decode: Decode,
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value_t = 64)]
        frames: usize,
        /// Dataset whose first texts and lengths are used as prompts.
        #[arg(long)]
        prompts: Option<PathBuf>,
        /// Generations per prompt in `--prompts` mode.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
    },
    /// Generate a partner for a reference motion.
    React {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        decode: Decode,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        text: Option<String>,
    },
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Real test dataset.
        #[arg(long)]
        test_data: Option<PathBuf>,
        #[arg(long)]
        generated: Option<PathBuf>,
        /// Trained feature extractor; one is trained on the test set if absent.
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    ExportAnim {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum)]
        format: Format,
    },
}

fn load(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_inputs(cfg: &mut RunConfig, inputs: &Inputs) {
    if inputs.data.is_some() {
        cfg.paths.dataset = inputs.data.clone();
    }
    if inputs.vq.is_some() {
        cfg.paths.vq_checkpoint = inputs.vq.clone();
    }
    if inputs.transformer.is_some() {
        cfg.paths.transformer_checkpoint = inputs.transformer.clone();
    }
}

fn apply_decode(opts: &mut duet_core::generation::DecodeOptions, d: &Decode) {
    if let Some(i) = d.iterations {
        opts.iterations = i;
    }
    if let Some(s) = d.cfg_scale {
        opts.cfg_scale = s;
    }
    if let Some(t) = d.temperature {
        opts.temperature = t;
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SynthData { common, per_class, frames } => {
            let mut cfg = load(&common)?;
            if let Some(n) = per_class {
                cfg.data = duet_core::motion::GeneratorConfig::three_class(n, frames.unwrap_or(cfg.data.frames));
            } else if let Some(f) = frames {
                cfg.data.frames = f;
            }
            let mut r = Run::start(&common.out, "synth-data", &cfg, json!({ "per_class": per_class, "frames": frames }))?;
            commands::synth_data(&cfg, &mut r)
        }
        Command::TrainVq { common, data } => {
            let mut cfg = load(&common)?;
            apply_inputs(&mut cfg, &Inputs { data, ..Inputs::default() });
            let mut r = Run::start(&common.out, "train-vq", &cfg, json!({}))?;
            commands::train_vq(&cfg, &mut r)
        }
        Command::TrainTransformer { common, inputs } => {
            let mut cfg = load(&common)?;
            apply_inputs(&mut cfg, &inputs);
            let mut r = Run::start(&common.out, "train-transformer", &cfg, json!({}))?;
            commands::train_transformer_cmd(&cfg, &mut r)
        }
        Command::Generate { common, inputs, decode, text, frames, prompts, repeats } => {
            let mut cfg = load(&common)?;
            apply_inputs(&mut cfg, &inputs);
            apply_decode(&mut cfg.interaction, &decode);
            let flags = json!({ "text": text, "frames": frames, "prompts": prompts, "repeats": repeats });
            let mut r = Run::start(&common.out, "generate", &cfg, flags)?;
            commands::generate(&cfg, &GenerateArgs { text, frames, prompts, repeats }, &mut r)
        }
        Command::React { common, inputs, decode, reference, text } => {
            let mut cfg = load(&common)?;
            apply_inputs(&mut cfg, &inputs);
            apply_decode(&mut cfg.reaction, &decode);
            if reference.is_some() {
                cfg.paths.reference = reference;
            }
            let mut r = Run::start(&common.out, "react", &cfg, json!({ "text": text }))?;
            commands::react(&cfg, text.as_deref(), &mut r)
        }
        Command::Evaluate { common, test_data, generated, extractor } => {
            let mut cfg = load(&common)?;
            if test_data.is_some() {
                cfg.paths.test_dataset = test_data;
            }
            if generated.is_some() {
                cfg.paths.generated = generated;
            }
            if extractor.is_some() {
                cfg.paths.extractor_checkpoint = extractor;
            }
            let mut r = Run::start(&common.out, "evaluate", &cfg, json!({}))?;
            commands::evaluate(&cfg, &mut r)
        }
        Command::ExportAnim { common, a, b, format } => {
            let cfg = load(&common)?;
            let flags = json!({ "a": a, "b": b, "format": format.extension() });
            let mut r = Run::start(&common.out, "export-anim", &cfg, flags)?;
            commands::export_anim(&a, &b, format, &mut r)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let report = json!({ "error": f.category(), "exit_code": f.exit_code(), "message": f.message() });
            eprintln!("{report}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
