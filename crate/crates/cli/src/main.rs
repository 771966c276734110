//! `gaze`: synthesis, dataset preparation, training, evaluation, ablation,
//! saliency maps, serving and plots. Every flag can also be set through a
//! `GAZE_*` environment variable.

mod manifest;
mod plot;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gaze_core::augment::Sample;
use gaze_core::checkpoint;
use gaze_core::config::{preset, Profile, RunConfig};
use gaze_core::dataio::{load_dataset, DatasetIndex, Part, SplitPolicy};
use gaze_core::eval::{evaluate, fingerprint};
use gaze_core::explain::{disc_mass_fraction, explain, overlay, CamConfig, CamTarget};
use gaze_core::pipeline::{self, load_prepared, make_split, run_ablation, with_seed, AblationSpec};
use gaze_core::predict::InferenceConfig;
use gaze_core::prep::prepare_record;
use gaze_core::synthgen::{self, SynthConfig};
use gaze_core::train::{TrainHistory, TrainOptions};
use gaze_core::GazeError;
use manifest::Manifest;

#[derive(Parser)]
#[command(name = "gaze", version, about = "Appearance-based gaze estimation toolkit")]
struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "GAZE_LOG", default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset with known gaze.
    Synth(SynthArgs),
    /// Catalog a dataset, split it and optionally export the crops.
    Prepare(PrepareArgs),
    /// Train one preset or config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one part of a dataset.
    Eval(EvalArgs),
    /// Train several presets over seeds and tabulate errors.
    Ablate(AblateArgs),
    /// Grad-CAM++ overlays for a few frames.
    Explain(ExplainArgs),
    /// Run the HTTP/WebSocket inference server.
    Serve(ServeArgs),
    /// Draw the error curves of a training history.
    Plot(PlotArgs),
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("expected toy or full, got `{s}`"))
}

fn parse_policy(s: &str) -> Result<SplitPolicy, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("expected strict or relaxed, got `{s}`"))
}

fn parse_part(s: &str) -> Result<Part, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("expected train, val or test, got `{s}`"))
}

fn parse_target(s: &str) -> Result<CamTarget, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("expected x or y, got `{s}`"))
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, env = "GAZE_OUT")]
    out: PathBuf,
    /// TOML file whose `[synth]` table sets the generator.
    #[arg(long, env = "GAZE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "GAZE_SUBJECTS")]
    subjects: Option<usize>,
    #[arg(long, env = "GAZE_FRAMES_PER_SUBJECT")]
    frames_per_subject: Option<usize>,
    #[arg(long, env = "GAZE_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "GAZE_INCOMPLETE_FRACTION")]
    incomplete_fraction: Option<f64>,
    #[arg(long, env = "GAZE_PIXEL_NOISE")]
    pixel_noise: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root (one directory per subject).
    #[arg(long, env = "GAZE_DATA")]
    data: PathBuf,
    #[arg(long, env = "GAZE_SPLIT", value_parser = parse_policy, default_value = "strict")]
    split: SplitPolicy,
    #[arg(long, env = "GAZE_SPLIT_SEED", default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, env = "GAZE_OUT")]
    out: PathBuf,
    /// Preset whose preprocessing is used for exported crops.
    #[arg(long, env = "GAZE_PRESET", default_value_t = 1)]
    preset: u32,
    #[arg(long, env = "GAZE_PROFILE", value_parser = parse_profile, default_value = "full")]
    profile: Profile,
    /// Also write the eye, face and grid crops of every frame.
    #[arg(long, env = "GAZE_EXPORT_CROPS")]
    export_crops: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, env = "GAZE_PRESET", conflicts_with = "config")]
    preset: Option<u32>,
    /// TOML run config; see `configs/example.toml`.
    #[arg(long, env = "GAZE_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "GAZE_PROFILE", value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long, env = "GAZE_DATA")]
    data: Option<PathBuf>,
    #[arg(long, env = "GAZE_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "GAZE_SPLIT", value_parser = parse_policy)]
    split: Option<SplitPolicy>,
    #[arg(long, env = "GAZE_SPLIT_SEED")]
    split_seed: Option<u64>,
    #[arg(long, env = "GAZE_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "GAZE_BATCH_SIZE")]
    batch_size: Option<usize>,
    /// Seeds weights, shuffling, augmentation and dropout.
    #[arg(long, env = "GAZE_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "GAZE_MAX_FRAMES")]
    max_frames: Option<usize>,
    /// Continue from a `last.safetensors` of an interrupted run.
    #[arg(long, env = "GAZE_RESUME")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, env = "GAZE_CHECKPOINT")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, env = "GAZE_PART", value_parser = parse_part, default_value = "test")]
    part: Part,
    #[arg(long, env = "GAZE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated preset numbers.
    #[arg(long, env = "GAZE_PRESETS", value_delimiter = ',', required = true)]
    presets: Vec<u32>,
    #[arg(long, env = "GAZE_SEEDS", value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, env = "GAZE_DATA")]
    data: PathBuf,
    #[arg(long, env = "GAZE_PROFILE", value_parser = parse_profile, default_value = "toy")]
    profile: Profile,
    #[arg(long, env = "GAZE_POLICIES", value_delimiter = ',', value_parser = parse_policy, default_value = "strict,relaxed")]
    policies: Vec<SplitPolicy>,
    #[arg(long, env = "GAZE_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, env = "GAZE_MAX_FRAMES")]
    max_frames: Option<usize>,
    #[arg(long, env = "GAZE_OUT", default_value = "ablation")]
    out: PathBuf,
    /// Keep per-run checkpoints and histories below the output directory.
    #[arg(long, env = "GAZE_KEEP_RUNS")]
    keep_runs: bool,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long, env = "GAZE_CHECKPOINT")]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, env = "GAZE_PART", value_parser = parse_part, default_value = "test")]
    part: Part,
    /// Number of frames to explain, from the start of the part.
    #[arg(long, env = "GAZE_COUNT", default_value_t = 8)]
    count: usize,
    /// Probe layer, e.g. `eye.relu5`; the model default when omitted.
    #[arg(long, env = "GAZE_LAYER")]
    layer: Option<String>,
    #[arg(long, env = "GAZE_TARGET", value_parser = parse_target, default_value = "x")]
    target: CamTarget,
    #[arg(long, env = "GAZE_ALPHA", default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, env = "GAZE_OUT")]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "GAZE_MODEL_PATH")]
    model: PathBuf,
    #[arg(long, env = "GAZE_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "GAZE_QUEUE_DEPTH", default_value_t = 8)]
    queue_depth: usize,
    #[arg(long, env = "GAZE_WORKERS", default_value_t = 1)]
    workers: usize,
    #[arg(long, env = "GAZE_TIMEOUT_MS", default_value_t = 10_000)]
    timeout_ms: u64,
    #[arg(long, env = "GAZE_KEEPALIVE_S", default_value_t = 15)]
    keepalive_s: u64,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long, env = "GAZE_HISTORY")]
    history: PathBuf,
    /// Defaults to `error_curve.png` next to the history.
    #[arg(long, env = "GAZE_OUT")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp_secs().init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 config, 3 data, 4 numerics, 5 checkpoint, 1 anything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let Some(g) = e.chain().find_map(|c| c.downcast_ref::<GazeError>()) else {
        return 1;
    };
    match g {
        GazeError::Config(_)
        | GazeError::UnknownPreset(_)
        | GazeError::UnknownLayer { .. }
        | GazeError::BadRatios(_)
        | GazeError::EpochOutOfRange { .. } => 2,
        GazeError::Io { .. }
        | GazeError::Metadata { .. }
        | GazeError::Image { .. }
        | GazeError::MissingSplitLabels(_)
        | GazeError::EmptySplit(_)
        | GazeError::Degenerate(_)
        | GazeError::InvalidLandmarks(_)
        | GazeError::InvalidRegion(_)
        | GazeError::ImageSize { .. } => 3,
        GazeError::NonFiniteLoss { .. } | GazeError::NonFinitePrediction | GazeError::Shape { .. } => 4,
        GazeError::Checkpoint(_) => 5,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Serve(a) => serve(a),
        Command::Plot(a) => plot_cmd(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?.synth,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.subjects {
        cfg.n_subjects = v;
    }
    if let Some(v) = a.frames_per_subject {
        cfg.frames_per_subject = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.incomplete_fraction {
        cfg.incomplete_fraction = v;
    }
    if let Some(v) = a.pixel_noise {
        cfg.pixel_noise_sigma = v;
    }
    let manifest = synthgen::generate(&cfg, &a.out)?;
    log::info!("wrote {} frames to {}", manifest.frames.len(), a.out.display());
    Manifest::new("synth", serde_json::to_value(&cfg)?, seeds(&[("synth", cfg.seed)])).write(&a.out)?;
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let cfg = preset(a.preset, a.profile)?;
    let index = load_dataset(&a.data.data)?;
    let split = make_split(&index, a.data.split, a.data.split_seed)?;
    create_dir(&a.out)?;
    let (tr, va, te) = split.counts();
    let summary = serde_json::json!({
        "data": a.data.data,
        "frames": index.records.len(),
        "subjects": index.subjects.len(),
        "split": a.data.split,
        "subjects_per_part": {"train": tr, "val": va, "test": te},
        "frames_per_part": {
            "train": index.part_records(&split, Part::Train).len(),
            "val": index.part_records(&split, Part::Val).len(),
            "test": index.part_records(&split, Part::Test).len(),
        },
    });
    write(&a.out.join("catalog.json"), serde_json::to_string_pretty(&summary)?)?;
    write(&a.out.join("split.json"), serde_json::to_string_pretty(&split)?)?;
    if a.export_crops {
        for part in [Part::Train, Part::Val, Part::Test] {
            let dir = a.out.join("crops").join(part.to_string());
            create_dir(&dir)?;
            for i in index.part_records(&split, part) {
                let s = prepare_record(&index, &index.records[i], &cfg.prep)?;
                let stem = s.meta.frame_id.replace(['/', '\\'], "_").trim_end_matches(".png").to_string();
                s.left_eye.save(dir.join(format!("{stem}_left.png")))?;
                s.right_eye.save(dir.join(format!("{stem}_right.png")))?;
                s.face.save(dir.join(format!("{stem}_face.png")))?;
                write(&dir.join(format!("{stem}_grid.json")), serde_json::to_string(&s.grid)?)?;
            }
        }
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    let config = serde_json::json!({"data": a.data.data, "split": a.data.split, "split_seed": a.data.split_seed, "prep": cfg.prep});
    Manifest::new("prepare", config, seeds(&[("split", a.data.split_seed)])).write(&a.out)?;
    Ok(())
}

fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match (&a.config, a.preset) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(n)) => preset(n, a.profile.unwrap_or_default())?,
        (None, None) => bail!(GazeError::Config("pass --preset or --config".into())),
    };
    if a.config.is_some() {
        if let Some(p) = a.profile {
            if p != cfg.profile {
                cfg.profile = p;
                cfg.apply_profile();
            }
        }
    }
    if let Some(d) = &a.data {
        cfg.data.root = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(s) = a.split {
        cfg.data.split = s;
    }
    if let Some(s) = a.split_seed {
        cfg.data.split_seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
        let b = &mut cfg.train.step_decay.boundary_epoch;
        *b = (*b).min(e.saturating_sub(1).max(1));
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg = with_seed(cfg, s);
    }
    if let Some(m) = a.max_frames {
        cfg.data.max_frames_per_part = Some(m);
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from(format!("runs/preset{:02}", cfg.preset.unwrap_or(0))));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    let out = cfg.out_dir.clone().expect("out_dir resolved");
    create_dir(&out)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let data = load_prepared(&cfg)?;
    log::info!("train {} / val {} / test {} frames", data.train.len(), data.val.len(), data.test.len());
    let opts = TrainOptions {
        out_dir: Some(out.clone()),
        resume_from: a.resume.clone(),
        ..TrainOptions::default()
    };
    let outcome = pipeline::run_training(&cfg, &data, &opts)?;
    for (name, report) in [("eval_val.json", &outcome.val), ("eval_test.json", &outcome.test)] {
        if let Some(r) = report {
            write(&out.join(name), r.to_json())?;
        }
    }
    if let Some(best) = outcome.history.best_epoch {
        log::info!("best epoch {best}");
    }
    if let Some(t) = &outcome.test {
        println!("test mean error: {:.4} cm over {} frames", t.mean_error_cm, t.n);
    }
    let seeds = seeds(&[
        ("train", cfg.train.seed),
        ("init", cfg.model.init_seed),
        ("augment", cfg.augment.seed),
        ("split", cfg.data.split_seed),
    ]);
    Manifest::new("train", serde_json::to_value(&cfg)?, seeds).write(&out)?;
    Ok(())
}

/// Catalog, split and prepare one part with the checkpoint's preprocessing.
fn prepared_part(data: &DataArgs, inference: &InferenceConfig, part: Part) -> Result<(DatasetIndex, Vec<Sample>)> {
    let index = load_dataset(&data.data)?;
    let split = make_split(&index, data.split, data.split_seed)?;
    let samples = index
        .part_records(&split, part)
        .into_iter()
        .map(|i| prepare_record(&index, &index.records[i], &inference.prep))
        .collect::<gaze_core::Result<Vec<_>>>()?;
    Ok((index, samples))
}

fn load_checkpoint(path: &Path) -> Result<(gaze_core::model::GazeModel<f32>, InferenceConfig)> {
    let loaded = checkpoint::load::<f32>(path)?;
    let inference = loaded
        .inference
        .ok_or_else(|| GazeError::Checkpoint(format!("{} carries no inference settings", path.display())))?;
    Ok((loaded.model, inference))
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, inference) = load_checkpoint(&a.checkpoint)?;
    let (_, samples) = prepared_part(&a.data, &inference, a.part)?;
    let fp = fingerprint(&inference);
    let report = evaluate(&model, &samples, a.part, &inference.augment, inference.sizes, fp)?;
    create_dir(&a.out)?;
    write(&a.out.join(format!("eval_{}.json", a.part)), report.to_json())?;
    let mut hist = String::from("lower_cm,upper_cm,count\n");
    for (i, c) in report.histogram.counts.iter().enumerate() {
        let lo = i as f64 * report.histogram.bin_width_cm;
        hist.push_str(&format!("{lo},{},{c}\n", lo + report.histogram.bin_width_cm));
    }
    write(&a.out.join(format!("histogram_{}.csv", a.part)), hist)?;
    println!("{} mean error: {:.4} cm over {} frames", a.part, report.mean_error_cm, report.n);
    let config = serde_json::json!({
        "checkpoint": a.checkpoint,
        "data": a.data.data,
        "split": a.data.split,
        "split_seed": a.data.split_seed,
        "part": a.part,
        "inference": inference,
    });
    Manifest::new("eval", config, seeds(&[("split", a.data.split_seed)])).write(&a.out)?;
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let spec = AblationSpec {
        presets: a.presets.clone(),
        seeds: a.seeds.clone(),
        profile: a.profile,
        data_root: a.data.clone(),
        policies: a.policies.clone(),
        out_dir: a.keep_runs.then(|| a.out.join("runs")),
        epochs: a.epochs,
        max_frames_per_part: a.max_frames,
    };
    create_dir(&a.out)?;
    let table = run_ablation(&spec, |row| {
        log::info!(
            "preset {} seed {}: strict test {:?}, relaxed test {:?}",
            row.experiment,
            row.seed,
            row.strict_test_cm,
            row.relaxed_test_cm
        )
    })?;
    let csv = table.to_csv();
    write(&a.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    let seed_map = a.seeds.iter().enumerate().map(|(i, s)| (format!("run{i}"), *s)).collect();
    Manifest::new("ablate", serde_json::to_value(&spec)?, seed_map).write(&a.out)?;
    Ok(())
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    let (model, inference) = load_checkpoint(&a.checkpoint)?;
    let (_, samples) = prepared_part(&a.data, &inference, a.part)?;
    create_dir(&a.out)?;
    let cam = CamConfig {
        layer: a.layer.clone(),
        target: a.target,
    };
    let mut entries = Vec::new();
    for s in samples.iter().take(a.count) {
        let r = explain(&model, s, &inference.augment, inference.sizes, &cam)?;
        let stem = s.meta.frame_id.replace(['/', '\\'], "_").trim_end_matches(".png").to_string();
        let file = format!("{stem}_cam.png");
        overlay(&r.input_image, &r.map, a.alpha).save(a.out.join(&file))?;
        // Mass in the central disc of the eye crop, where the iris sits.
        let side = r.map.dim().0 as f64;
        let (mass, area) = disc_mass_fraction(&r.map, [side / 2.0, side / 2.0], side / 4.0);
        entries.push(serde_json::json!({
            "frame_id": s.meta.frame_id,
            "file": file,
            "layer": r.layer,
            "prediction_cm": r.prediction_cm,
            "truth_cm": s.gaze_cm,
            "central_disc_mass": mass,
            "central_disc_area": area,
        }));
    }
    write(&a.out.join("saliency.json"), serde_json::to_string_pretty(&entries)?)?;
    println!("wrote {} saliency maps to {}", entries.len(), a.out.display());
    let config = serde_json::json!({
        "checkpoint": a.checkpoint,
        "data": a.data.data,
        "split": a.data.split,
        "split_seed": a.data.split_seed,
        "part": a.part,
        "count": a.count,
        "cam": cam,
        "alpha": a.alpha,
    });
    Manifest::new("explain", config, seeds(&[("split", a.data.split_seed)])).write(&a.out)?;
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = gaze_service::ServiceConfig {
        model_path: Some(a.model),
        port: a.port,
        queue_depth: a.queue_depth,
        workers: a.workers,
        timeout: std::time::Duration::from_millis(a.timeout_ms),
        keepalive: std::time::Duration::from_secs(a.keepalive_s),
    };
    cfg.validate().map_err(|m| GazeError::Config(m))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(gaze_service::serve(cfg))?;
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    let history = TrainHistory::load(&a.history)?;
    let dir = a.history.parent().map(Path::to_path_buf).unwrap_or_default();
    let out = a.out.unwrap_or_else(|| dir.join("error_curve.png"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    plot::plot_history(&history, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}
