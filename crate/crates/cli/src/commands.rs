use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use duet_core::checkpoint::{bytes_sha256, Checkpoint};
use duet_core::evaluation::{
    diversity, fid, mm_dist, mmodality, mpjpe, r_precision, train_feature_extractor, FeatureExtractor, MetricsReport,
};
use duet_core::generation::{alternative_generate, generate_interaction, generate_reaction, DecodeOptions, Interaction};
use duet_core::motion::io::{read_dataset, read_motion, write_dataset, write_motion};
use duet_core::motion::{generate_synthetic_interactions, InteractionSample, MotionSequence};
use duet_core::text::{encode_text, TextBackend, TextEmbedding};
use duet_core::transformer::{train_transformer, Mode, Transformer};
use duet_core::vq::{train_vqvae, VqModel};
use log::info;
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::anim::{self, Format};
use crate::config::RunConfig;
use crate::failure::Failure;

type Outcome = Result<(), Failure>;

/// Output directory of one command: config echo, JSON-lines log, outputs.
pub struct Run {
    out: PathBuf,
    log: File,
}

impl Run {
    pub fn start(out: &Path, command: &str, config: &RunConfig, flags: Value) -> Result<Self, Failure> {
        fs::create_dir_all(out)?;
        let echo = json!({ "command": command, "flags": flags, "config": config });
        let mut text = serde_json::to_string_pretty(&echo)?;
        text.push('\n');
        fs::write(out.join("config.json"), text)?;
        let log = File::create(out.join("log.jsonl"))?;
        let mut run = Self { out: out.to_path_buf(), log };
        run.event("start", json!({ "command": command, "seed": config.seed }))?;
        Ok(run)
    }

    pub fn event(&mut self, event: &str, fields: Value) -> Outcome {
        let mut line = serde_json::Map::new();
        line.insert("event".into(), event.into());
        if let Value::Object(m) = fields {
            line.extend(m);
        }
        writeln!(self.log, "{}", Value::Object(line))?;
        Ok(())
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_json(&self, name: &str, value: &impl serde::Serialize) -> Outcome {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.path(name), text)?;
        Ok(())
    }
}

fn load_checkpoint(path: Option<&PathBuf>, what: &str) -> Result<(Checkpoint, String), Failure> {
    let path = path.ok_or_else(|| Failure::MissingCheckpoint(format!("no {what} checkpoint configured")))?;
    if !path.is_file() {
        return Err(Failure::MissingCheckpoint(path.display().to_string()));
    }
    let bytes = fs::read(path)?;
    Ok((Checkpoint::from_bytes(&bytes)?, bytes_sha256(&bytes)))
}

fn dataset(path: Option<&PathBuf>, what: &str) -> Result<Vec<InteractionSample>, Failure> {
    let path = path.ok_or_else(|| Failure::MissingInput(format!("no {what} dataset configured")))?;
    if !path.is_dir() {
        return Err(Failure::MissingInput(format!("{what} dataset not found: {}", path.display())));
    }
    Ok(read_dataset(path)?)
}

fn condition(text: Option<&str>, backend: &TextBackend) -> Result<Option<TextEmbedding>, Failure> {
    Ok(text.map(|t| encode_text(t, backend)).transpose()?)
}

fn models(cfg: &RunConfig) -> Result<(VqModel, Transformer, Value), Failure> {
    let (vq_ck, vq_sha) = load_checkpoint(cfg.paths.vq_checkpoint.as_ref(), "tokenizer")?;
    let (tr_ck, tr_sha) = load_checkpoint(cfg.paths.transformer_checkpoint.as_ref(), "transformer")?;
    let vq = VqModel::from_checkpoint(&vq_ck)?;
    let model = Transformer::from_checkpoint(&tr_ck)?;
    model.check_tokenizer(&vq.fingerprint()?)?;
    Ok((vq, model, json!({ "vq_sha256": vq_sha, "transformer_sha256": tr_sha })))
}

pub fn synth_data(cfg: &RunConfig, run: &mut Run) -> Outcome {
    let samples = generate_synthetic_interactions(&cfg.data, cfg.seed)?;
    write_dataset(run.path("dataset"), &samples)?;
    run.event("dataset", json!({ "samples": samples.len(), "frames": cfg.data.frames }))
}

pub fn train_vq(cfg: &RunConfig, run: &mut Run) -> Outcome {
    let data = dataset(cfg.paths.dataset.as_ref(), "training")?;
    let motions: Vec<MotionSequence> = data.into_iter().flat_map(|s| [s.motion_a, s.motion_b]).collect();
    run.event("data", json!({ "motions": motions.len() }))?;
    let (vq, log) = train_vqvae(&motions, cfg.vq.clone(), &cfg.vq_train, cfg.seed)?;
    for (epoch, loss) in log.epochs.iter().enumerate() {
        run.event("epoch", json!({ "epoch": epoch, "loss": loss }))?;
    }
    let ck = vq.to_checkpoint()?;
    ck.save(run.path("vq.ckpt"))?;
    run.write_json("train_log.json", &log)?;
    run.event("saved", json!({ "checkpoint": "vq.ckpt", "fingerprint": vq.fingerprint()? }))
}

pub fn train_transformer_cmd(cfg: &RunConfig, run: &mut Run) -> Outcome {
    let data = dataset(cfg.paths.dataset.as_ref(), "training")?;
    let (vq_ck, vq_sha) = load_checkpoint(cfg.paths.vq_checkpoint.as_ref(), "tokenizer")?;
    let vq = VqModel::from_checkpoint(&vq_ck)?;
    let backend = cfg.text_backend()?;
    run.event("data", json!({ "samples": data.len(), "vq_sha256": vq_sha, "text_backend": backend.name() }))?;
    let (model, log) = train_transformer(&data, &vq, &backend, cfg.transformer.clone(), &cfg.transformer_train, cfg.seed)?;
    for (epoch, loss) in log.epochs.iter().enumerate() {
        run.event("epoch", json!({ "epoch": epoch, "loss": loss }))?;
    }
    model.to_checkpoint()?.save(run.path("transformer.ckpt"))?;
    run.write_json("train_log.json", &log)?;
    run.event("saved", json!({ "checkpoint": "transformer.ckpt" }))
}

fn interaction(
    model: &Transformer,
    vq: &VqModel,
    cond: Option<&TextEmbedding>,
    frames: usize,
    opts: DecodeOptions,
    seed: u64,
) -> Result<Interaction, Failure> {
    Ok(match model.config.mode {
        Mode::Collaborative => generate_interaction(model, vq, cond, frames, opts, seed)?,
        Mode::Alternative => alternative_generate(model, vq, cond, frames, opts, seed)?,
    })
}

pub struct GenerateArgs {
    pub text: Option<String>,
    pub frames: usize,
    pub prompts: Option<PathBuf>,
    pub repeats: usize,
}

pub fn generate(cfg: &RunConfig, args: &GenerateArgs, run: &mut Run) -> Outcome {
    let (vq, model, hashes) = models(cfg)?;
    let backend = cfg.text_backend()?;
    run.event("models", hashes)?;
    let opts = cfg.interaction;
    if let Some(dir) = &args.prompts {
        let prompts = dataset(Some(dir), "prompt")?;
        let mut out = Vec::new();
        for (i, p) in prompts.iter().enumerate() {
            let text = p.texts.first().map(String::as_str);
            let cond = condition(text, &backend)?;
            for r in 0..args.repeats.max(1) {
                let seed = cfg.seed.wrapping_add((i * args.repeats.max(1) + r) as u64);
                let g = interaction(&model, &vq, cond.as_ref(), p.motion_a.frames(), opts, seed)?;
                let id = if r == 0 { p.id.clone() } else { format!("{}_r{r}", p.id) };
                out.push(InteractionSample {
                    id,
                    class: p.class.clone(),
                    texts: p.texts.iter().take(1).cloned().collect(),
                    motion_a: g.a,
                    motion_b: g.b,
                });
            }
        }
        write_dataset(run.path("generated"), &out)?;
        return run.event("generated", json!({ "samples": out.len(), "prompts": prompts.len() }));
    }
    let cond = condition(args.text.as_deref(), &backend)?;
    let g = interaction(&model, &vq, cond.as_ref(), args.frames, opts, cfg.seed)?;
    write_motion(&g.a, run.path("person_a.imk1"))?;
    write_motion(&g.b, run.path("person_b.imk1"))?;
    run.write_json(
        "tokens.json",
        &json!({ "n": g.tokens.n, "j": g.tokens.j, "tokens": g.tokens.tokens, "masked": g.trace.masked }),
    )?;
    run.event("generated", json!({ "frames": g.a.frames(), "schedule_exact": g.trace.schedule_exact() }))
}

pub fn react(cfg: &RunConfig, text: Option<&str>, run: &mut Run) -> Outcome {
    let (vq, model, hashes) = models(cfg)?;
    let backend = cfg.text_backend()?;
    run.event("models", hashes)?;
    let path = cfg.paths.reference.as_ref().ok_or_else(|| Failure::MissingInput("no reference motion given".into()))?;
    if !path.is_file() {
        return Err(Failure::MissingInput(format!("reference not found: {}", path.display())));
    }
    let reference = read_motion(path)?;
    let cond = condition(text, &backend)?;
    let r = generate_reaction(&model, &vq, &reference, cond.as_ref(), cfg.reaction, cfg.seed)?;
    write_motion(&reference, run.path("person_a.imk1"))?;
    write_motion(&r.motion, run.path("person_b.imk1"))?;
    run.write_json(
        "tokens.json",
        &json!({
            "n": r.tokens.n,
            "j": r.tokens.j,
            "tokens": r.tokens.tokens,
            "reference_tokens": r.reference_tokens.as_slice(),
            "masked": r.trace.masked,
        }),
    )?;
    run.event("reaction", json!({ "conditioned": text.is_some(), "frozen_stable": r.trace.frozen_stable() }))
}

fn features(fx: &FeatureExtractor, samples: &[InteractionSample]) -> Result<Array2<f64>, Failure> {
    let mut all = Array2::zeros((0, fx.config.feature_dim));
    for chunk in samples.chunks(64) {
        let pairs: Vec<_> = chunk.iter().map(|s| (&s.motion_a, &s.motion_b)).collect();
        let f = fx.motion_features(&pairs)?;
        all.append(Axis(0), f.view()).expect("same width");
    }
    Ok(all)
}

pub fn evaluate(cfg: &RunConfig, run: &mut Run) -> Outcome {
    let real = dataset(cfg.paths.test_dataset.as_ref(), "test")?;
    let gen = dataset(cfg.paths.generated.as_ref(), "generated")?;
    let backend = cfg.text_backend()?;
    let (fx, fx_sha) = match &cfg.paths.extractor_checkpoint {
        Some(p) => {
            let (ck, sha) = load_checkpoint(Some(p), "feature extractor")?;
            (FeatureExtractor::from_checkpoint(&ck)?, sha)
        }
        None => {
            let (fx, log) = train_feature_extractor(&real, &backend, cfg.extractor.clone(), cfg.seed)?;
            run.event("extractor", json!({ "trained_on": "test", "final_loss": log.last() }))?;
            let bytes = fx.to_checkpoint()?.to_bytes()?;
            fs::write(run.path("extractor.ckpt"), &bytes)?;
            (fx, bytes_sha256(&bytes))
        }
    };
    let real_f = features(&fx, &real)?;
    let gen_f = features(&fx, &gen)?;
    let texts: Vec<&str> = gen
        .iter()
        .map(|s| s.texts.first().map(String::as_str).ok_or_else(|| Failure::MissingInput(format!("{} has no text", s.id))))
        .collect::<Result<_, _>>()?;
    let text_f = fx.text_features(&texts, &backend)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = cfg.evaluation.r_precision_pool.min(gen.len());

    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in texts.iter().enumerate() {
        groups.entry(t).or_default().push(i);
    }
    let repeated: Vec<Array2<f64>> =
        groups.values().filter(|g| g.len() >= 2).map(|g| gen_f.select(Axis(0), g)).collect();
    let mmod = if repeated.is_empty() { None } else { Some(mmodality(&repeated)?) };

    let by_id: BTreeMap<&str, &InteractionSample> = real.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut errs = Vec::new();
    for g in &gen {
        if let Some(r) = by_id.get(g.id.as_str()) {
            errs.push((mpjpe(&r.motion_a, &g.motion_a)? + mpjpe(&r.motion_b, &g.motion_b)?) / 2.0);
        }
    }
    let mpjpe_mean = if errs.is_empty() { None } else { Some(errs.iter().sum::<f64>() / errs.len() as f64) };

    let mut metadata = BTreeMap::new();
    metadata.insert("seed".into(), json!(cfg.seed));
    metadata.insert("real_samples".into(), json!(real.len()));
    metadata.insert("generated_samples".into(), json!(gen.len()));
    metadata.insert("extractor_sha256".into(), json!(fx_sha));
    metadata.insert("r_precision_pool".into(), json!(pool));
    metadata.insert("diversity_pairs".into(), json!(cfg.evaluation.diversity_pairs));
    metadata.insert("mpjpe_pairs".into(), json!(errs.len()));
    let report = MetricsReport {
        fid: fid(real_f.view(), gen_f.view())?,
        r_precision: r_precision(gen_f.view(), text_f.view(), pool, &mut rng)?,
        mm_dist: mm_dist(gen_f.view(), text_f.view())?,
        diversity: diversity(gen_f.view(), cfg.evaluation.diversity_pairs, &mut rng)?,
        mmodality: mmod,
        mpjpe: mpjpe_mean,
        metadata,
    };
    info!("fid {:.4} top1 {:.3}", report.fid, report.r_precision.top1);
    run.write_json("metrics.json", &report)?;
    run.event("metrics", serde_json::to_value(&report)?)
}

pub fn export_anim(a: &Path, b: &Path, format: Format, run: &mut Run) -> Outcome {
    for p in [a, b] {
        if !p.is_file() {
            return Err(Failure::MissingInput(format!("motion not found: {}", p.display())));
        }
    }
    let (ma, mb) = (read_motion(a)?, read_motion(b)?);
    let name = format!("anim.{}", format.extension());
    fs::write(run.path(&name), anim::export(&ma, &mb, format)?)?;
    run.event("exported", json!({ "file": name, "frames": ma.frames() }))
}
