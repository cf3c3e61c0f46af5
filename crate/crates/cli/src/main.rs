use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use vidistill_core::checkpoint::{load_checkpoint, Checkpoint};
use vidistill_core::config::{ConfigError, RunConfig};
use vidistill_core::io::{create_dir, read_tensor, write_tensor, JsonlWriter, Manifest, Split};
use vidistill_core::model::{attention_maps, ModelParams};
use vidistill_core::probe::{
    evaluate, extract_dataset, extract_features, train_linear_probe, write_embeddings, EvalReport, LinearHead,
    ProbeConfig, ViewMode,
};
use vidistill_core::sampling::{inference_clip, RawVideo};
use vidistill_core::synthdata::{generate_dataset, Kernel, MotionClass, SceneConfig};
use vidistill_core::tensor::NdArray;
use vidistill_core::trainer::{pretrain, run_gradcheck, GRADCHECK_EPSILON};

/// Self-supervised spatiotemporal distillation for video transformers.
#[derive(Parser)]
#[command(name = "vidistill", version)]
struct Cli {
    /// Worker threads for view sampling and feature extraction.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic motion dataset.
    Synth(SynthArgs),
    /// Self-supervised pre-training.
    Pretrain(PretrainArgs),
    /// Fit a linear probe on frozen features and report test accuracy.
    Probe(ProbeArgs),
    /// Evaluate a saved probe head on the test split.
    Eval(EvalArgs),
    /// Export class-token attention maps of one video.
    Attn(AttnArgs),
    /// Export frozen clip features.
    Embed(EmbedArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of motion classes, taken in the built-in order.
    #[arg(long, default_value_t = Kernel::ALL.len())]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    frames: usize,
    /// Square canvas side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or manifest (falls back to `data.dataset`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (falls back to `data.out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Check one f64 training step against finite differences instead of training.
    #[arg(long)]
    gradcheck: bool,
    #[arg(long, default_value_t = GRADCHECK_EPSILON, requires = "gradcheck")]
    gradcheck_eps: f64,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fuse predictions over views of several resolutions.
    #[arg(long)]
    multi_view: bool,
    /// Replaces the probe section of the checkpoint's config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    head_out: PathBuf,
    /// Also write the report JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    head: PathBuf,
    /// Override the view mode recorded in the head file.
    #[arg(long)]
    multi_view: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AttnArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A video container file.
    #[arg(long)]
    video: PathBuf,
    /// Block index; defaults to the last one.
    #[arg(long)]
    layer: Option<usize>,
    /// Export a single head instead of the mean over heads.
    #[arg(long)]
    head: Option<usize>,
    /// Use the student weights instead of the teacher.
    #[arg(long)]
    student: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_split)]
    split: Option<Split>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split `{s}` (train or test)")),
    }
}

/// Usage and configuration problems exit with 2, everything else with 1.
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn config_failure(e: ConfigError) -> Failure {
    match e {
        ConfigError::Io(e) => Failure::Runtime(e.into()),
        other => Failure::Usage(other.to_string()),
    }
}

/// What `probe` writes and `eval` reads.
#[derive(Serialize, Deserialize)]
struct HeadFile {
    mode: ViewMode,
    probe: ProbeConfig,
    class_names: Vec<String>,
    head: LinearHead,
    test_report: EvalReport,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Probe(a) => cmd_probe(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Attn(a) => cmd_attn(a),
        Command::Embed(a) => cmd_embed(a),
    };
    match result {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode, Failure> {
    if a.classes < 2 || a.classes > Kernel::ALL.len() {
        return Err(usage(format!("--classes must lie in 2..={}, got {}", Kernel::ALL.len(), a.classes)));
    }
    let cfg = SceneConfig {
        canvas: (a.size, a.size),
        frames: a.frames,
        classes: Kernel::ALL[..a.classes].iter().map(|&k| MotionClass::new(k)).collect(),
        per_class: a.per_class,
        seed: a.seed,
        ..SceneConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = generate_dataset(&cfg, &a.out)?;
    println!("{}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn load_run(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(config_failure),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_pretrain(a: PretrainArgs) -> Result<ExitCode, Failure> {
    let run = match (&a.config, &a.resume) {
        (None, Some(ck)) => load_checkpoint(ck)?.config,
        _ => load_run(a.config.as_deref())?,
    };
    let data = a
        .data
        .clone()
        .or_else(|| run.data.dataset.as_ref().map(PathBuf::from))
        .ok_or_else(|| usage("no dataset: pass --data or set data.dataset"))?;
    let manifest = Manifest::load(&data)?;
    let videos = manifest.load_split(Split::Train)?;
    if a.gradcheck {
        let video = videos.first().context("the training split is empty")?;
        let report = run_gradcheck(&run, video, a.gradcheck_eps)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
        let ok = report.passes(1e-4);
        if let Some((name, err)) = report.worst() {
            log::info!("worst parameter {name}: relative error {err:.3e}");
        }
        return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) });
    }
    let out = a
        .out
        .clone()
        .or_else(|| run.data.out_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| usage("no output directory: pass --out or set data.out_dir"))?;
    create_dir(&out)?;
    let cfg_path = out.join("config.json");
    fs::write(&cfg_path, run.to_json_string() + "\n").with_context(|| cfg_path.display().to_string())?;
    log::info!("pre-training on {} videos into {}", videos.len(), out.display());
    let outcome = pretrain(&videos, &run, &out, a.resume.as_deref(), |_| {})?;
    println!("{}", outcome.checkpoint.display());
    Ok(ExitCode::SUCCESS)
}

fn select_params(ck: &Checkpoint, use_teacher: bool) -> &ModelParams {
    if use_teacher {
        &ck.state.teacher
    } else {
        &ck.state.student
    }
}

fn emit_report(report: &EvalReport, path: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string(report)?;
    println!("{text}");
    if let Some(p) = path {
        JsonlWriter::append(p)?.write(report)?;
    }
    Ok(())
}

fn cmd_probe(a: ProbeArgs) -> Result<ExitCode, Failure> {
    let ck = load_checkpoint(&a.ckpt)?;
    let probe = match &a.config {
        Some(p) => load_run(Some(p))?.probe,
        None => ck.config.probe.clone(),
    };
    let mode = if a.multi_view { ViewMode::Multi } else { ViewMode::Single };
    let manifest = Manifest::load(&a.data)?;
    let classes = manifest.num_classes();
    let params = select_params(&ck, probe.use_teacher);
    let run = &ck.config;
    let train = manifest.load_split(Split::Train)?;
    let test = manifest.load_split(Split::Test)?;
    log::info!("extracting features for {} + {} videos", train.len(), test.len());
    let train = extract_dataset(&train, params, &run.model, &run.view, &probe, mode)?;
    let test = extract_dataset(&test, params, &run.model, &run.view, &probe, mode)?;
    let head = train_linear_probe(&train, classes, &probe)?;
    let report = evaluate(&head, &test, classes)?;
    let file = HeadFile {
        mode,
        probe,
        class_names: manifest.class_names(),
        head,
        test_report: report.clone(),
    };
    let text = serde_json::to_string(&file)?;
    fs::write(&a.head_out, text + "\n").with_context(|| a.head_out.display().to_string())?;
    emit_report(&report, a.report.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode, Failure> {
    let ck = load_checkpoint(&a.ckpt)?;
    let text = fs::read_to_string(&a.head).with_context(|| a.head.display().to_string())?;
    let file: HeadFile = serde_json::from_str(&text).with_context(|| format!("{}: not a head file", a.head.display()))?;
    let mode = if a.multi_view { ViewMode::Multi } else { file.mode };
    let manifest = Manifest::load(&a.data)?;
    let classes = manifest.num_classes();
    let params = select_params(&ck, file.probe.use_teacher);
    let test = manifest.load_split(Split::Test)?;
    let test = extract_dataset(&test, params, &ck.config.model, &ck.config.view, &file.probe, mode)?;
    let report = evaluate(&file.head, &test, classes)?;
    emit_report(&report, a.report.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_attn(a: AttnArgs) -> Result<ExitCode, Failure> {
    let ck = load_checkpoint(&a.ckpt)?;
    let cfg = &ck.config;
    let layer = a.layer.unwrap_or(cfg.model.depth - 1);
    if layer >= cfg.model.depth {
        return Err(usage(format!("--layer {layer} is out of range for depth {}", cfg.model.depth)));
    }
    if let Some(h) = a.head.filter(|&h| h >= cfg.model.heads) {
        return Err(usage(format!("--head {h} is out of range for {} heads", cfg.model.heads)));
    }
    let frames = read_tensor(&a.video)?;
    let id = a.video.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let video = RawVideo::new(&id, frames, None)?;
    let clip = inference_clip(&video, cfg.view.k_g, cfg.view.global_size)?;
    let maps = attention_maps(&clip, select_params(&ck, !a.student), &cfg.model, layer)?;
    let &[t, heads, gh, gw] = maps.shape() else {
        unreachable!("attention maps are rank 4")
    };
    let plane = gh * gw;
    let mut out = vec![0.0f32; t * plane];
    for f in 0..t {
        let dst = &mut out[f * plane..(f + 1) * plane];
        for h in 0..heads {
            if a.head.is_some_and(|sel| sel != h) {
                continue;
            }
            let src = &maps.data()[(f * heads + h) * plane..(f * heads + h + 1) * plane];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        if a.head.is_none() {
            dst.iter_mut().for_each(|d| *d /= heads as f32);
        }
    }
    write_tensor(&a.out, &NdArray::from_vec(&[t, gh, gw], out)?)?;
    println!("{}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_embed(a: EmbedArgs) -> Result<ExitCode, Failure> {
    let ck = load_checkpoint(&a.ckpt)?;
    let cfg = &ck.config;
    let manifest = Manifest::load(&a.data)?;
    let params = select_params(&ck, cfg.probe.use_teacher);
    let mut rows = Vec::new();
    for entry in manifest.entries.iter().filter(|e| a.split.is_none_or(|s| s == e.split)) {
        let video = manifest.load_video(entry)?;
        let mut views = extract_features(&video, params, &cfg.model, &cfg.view, &cfg.probe, ViewMode::Single)?;
        rows.push((entry.id.clone(), Some(entry.label), views.swap_remove(0)));
    }
    write_embeddings(&a.out, &rows)?;
    println!("{}", a.out.display());
    Ok(ExitCode::SUCCESS)
}
