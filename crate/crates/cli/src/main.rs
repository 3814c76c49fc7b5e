//! Command-line front end: training, evaluation, gradient checking,
//! synthetic dataset generation and density-map export.
//!
//! Exit codes: 0 on success, 1 on usage/configuration errors, 2 on
//! numerical failures (NaN loss, failed gradient check).

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crowdfusion::datagen::{
    load_dataset, save_dataset, synth_dataset, write_pgm, DatasetSpec, Illumination, SceneSpec,
    SigmaMode,
};
use crowdfusion::error::Error;
use crowdfusion::model::{Framework, NetworkConfig};
use crowdfusion::model::parse_kv;
use crowdfusion::train::{
    evaluate, gradcheck, scene_inputs, train, GradCheckConfig, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "crowdfusion",
    about = "Multimodal crowd counting: train, evaluate and inspect density estimators",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset and write a metrics CSV.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic RGB+thermal dataset.
    Synth(SynthArgs),
    /// Run a checkpoint on one scene and export the density map as PGM.
    ExportDensity(ExportArgs),
}

/// Network/trainer settings shared by `train` and `gradcheck`; every flag
/// overrides the config file.
#[derive(Args, Default)]
struct ConfigArgs {
    /// key=value config file (keys: backbone, channel_scale, modalities,
    /// pyramid_levels, injection_points, variant, gating_mode, seed, lr,
    /// epochs, batch_size, checkpoint_interval, sigma_mode).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    channel_scale: Option<String>,
    /// Comma-separated modalities, e.g. `rgb,thermal` or `rgb:3,depth:1`.
    #[arg(long)]
    modalities: Option<String>,
    #[arg(long)]
    pyramid_levels: Option<String>,
    /// Comma-separated layer names, e.g. `conv1_2,conv2_2`.
    #[arg(long)]
    injection_points: Option<String>,
    #[arg(long)]
    gating_mode: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    checkpoint_interval: Option<String>,
    /// `adaptive` or `fixed:<sigma>`.
    #[arg(long)]
    sigma_mode: Option<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig, Error> {
        let mut cfg = TrainConfig::new(NetworkConfig::rgbt(
            crowdfusion::model::Backbone::TinyCsrnet,
        ));
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            cfg.apply_kv(&parse_kv(&text)?)?;
        }
        let mut overrides = Vec::new();
        let mut push = |key: &str, v: &Option<String>| {
            if let Some(v) = v {
                overrides.push((key.to_string(), v.clone()));
            }
        };
        push("backbone", &self.backbone);
        push("variant", &self.variant);
        push("channel_scale", &self.channel_scale);
        push("modalities", &self.modalities);
        push("pyramid_levels", &self.pyramid_levels);
        push("injection_points", &self.injection_points);
        push("gating_mode", &self.gating_mode);
        push("seed", &self.seed);
        push("lr", &self.lr);
        push("epochs", &self.epochs);
        push("batch_size", &self.batch_size);
        push("checkpoint_interval", &self.checkpoint_interval);
        push("sigma_mode", &self.sigma_mode);
        cfg.apply_kv(&overrides)?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory produced by `synth` (or in the same layout).
    #[arg(long)]
    dataset: PathBuf,
    /// Optional validation dataset evaluated after training.
    #[arg(long)]
    val_dataset: Option<PathBuf>,
    /// Output directory for checkpoints and the run record.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Metrics CSV path (default: <dataset>/metrics.csv).
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// When set, writes one PGM density map per scene into this directory.
    #[arg(long)]
    pgm_dir: Option<PathBuf>,
    #[arg(long)]
    sigma_mode: Option<String>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    scenes: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Inclusive person count range, `lo:hi`.
    #[arg(long, default_value = "4:12")]
    persons: String,
    /// `bright`, `dark`, or `split` (alternate per scene).
    #[arg(long, default_value = "split")]
    illumination: String,
    #[arg(long, default_value_t = 2)]
    distractors: usize,
    /// Per-scene misalignment is drawn from [-m, m] pixels.
    #[arg(long, default_value_t = 2)]
    misalign_max: i32,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Names for the two generated modalities.
    #[arg(long, default_value = "rgb,thermal")]
    modality_names: String,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory containing the scene.
    #[arg(long)]
    dataset: PathBuf,
    /// Scene id, e.g. `scene_0003`; defaults to the first scene.
    #[arg(long)]
    scene: Option<String>,
    /// Output PGM path; a sidecar .txt records the counts.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let cfg = args.config.build()?;
    let scenes = load_dataset(&args.dataset)?;
    let val = args.val_dataset.as_ref().map(load_dataset).transpose()?;
    let out = train(&cfg, &scenes, val.as_deref(), Some(&args.out))?;
    for e in &out.record.epochs {
        println!("epoch {} loss {:.6e}", e.epoch, e.mean_loss);
    }
    if let Some(v) = &out.record.validation {
        println!(
            "validation GAME(0) {:.3} RMSE {:.3}",
            v.overall.game[0], v.overall.rmse
        );
    }
    println!(
        "done in {:.1}s; artifacts in {}",
        out.record.wall_seconds,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let (fw, _) = Framework::load_checkpoint(&args.checkpoint)?;
    let scenes = load_dataset(&args.dataset)?;
    let sigma = args
        .sigma_mode
        .as_deref()
        .map(SigmaMode::parse)
        .transpose()?
        .unwrap_or_else(SigmaMode::adaptive);
    let out = evaluate(&fw, &scenes, sigma)?;
    let csv_path = args
        .out_csv
        .clone()
        .unwrap_or_else(|| args.dataset.join("metrics.csv"));
    fs::write(&csv_path, &out.csv)?;
    if let Some(dir) = &args.pgm_dir {
        fs::create_dir_all(dir)?;
        for (i, pred) in out.predictions.iter().enumerate() {
            write_pgm(pred, dir.join(format!("scene_{i:04}.pgm")))?;
        }
    }
    println!(
        "{} scenes: GAME(0) {:.3} GAME(3) {:.3} RMSE {:.3}",
        out.report.overall.n_images,
        out.report.overall.game[0],
        out.report.overall.game[3],
        out.report.overall.rmse
    );
    println!("metrics written to {}", csv_path.display());
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), Error> {
    let cfg = args.config.build()?;
    let mut gc = GradCheckConfig::new(cfg.network);
    gc.samples = args.samples;
    gc.step = args.step;
    gc.tolerance = args.tol;
    gc.input_height = args.height;
    gc.input_width = args.width;
    let report = gradcheck(&gc)?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::numerical("gradient check failed"))
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<(), Error> {
    let (lo, hi) = args
        .persons
        .split_once(':')
        .ok_or_else(|| Error::usage(format!("bad persons range `{}`", args.persons)))?;
    let persons = (
        lo.parse()
            .map_err(|_| Error::usage(format!("bad persons range `{}`", args.persons)))?,
        hi.parse()
            .map_err(|_| Error::usage(format!("bad persons range `{}`", args.persons)))?,
    );
    let (split, illumination) = match args.illumination.as_str() {
        "split" => (true, Illumination::Bright),
        other => (false, Illumination::parse(other)?),
    };
    let spec = DatasetSpec {
        scenes: args.scenes,
        base: SceneSpec {
            height: args.height,
            width: args.width,
            persons,
            illumination,
            distractors: args.distractors,
            misalignment: (0, 0),
            noise: args.noise,
            seed: args.seed,
        },
        illumination_split: split,
        misalign_max: args.misalign_max,
        distractor_range: None,
        seed: args.seed,
    };
    let mut scenes = synth_dataset(&spec)?;
    let names: Vec<&str> = args.modality_names.split(',').collect();
    if names.len() != 2 {
        return Err(Error::usage(format!(
            "expected two modality names, found `{}`",
            args.modality_names
        )));
    }
    for scene in &mut scenes {
        for (slot, name) in scene.modalities.iter_mut().zip(&names) {
            slot.0 = name.to_string();
        }
    }
    save_dataset(&scenes, &args.out)?;
    println!("wrote {} scenes to {}", scenes.len(), args.out.display());
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<(), Error> {
    let (fw, _) = Framework::load_checkpoint(&args.checkpoint)?;
    let scenes = load_dataset(&args.dataset)?;
    let index = match &args.scene {
        None => 0,
        Some(id) => {
            let n: usize = id
                .strip_prefix("scene_")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::usage(format!("bad scene id `{id}`")))?;
            n
        }
    };
    let scene = scenes
        .get(index)
        .ok_or_else(|| Error::usage(format!("dataset has no scene {index}")))?;
    let inputs = scene_inputs(scene, fw.config())?;
    let pred = fw.forward(&inputs)?;
    write_pgm(&pred, &args.out)?;
    let sidecar = args.out.with_extension("txt");
    fs::write(
        &sidecar,
        format!(
            "predicted_count={:.4}\nannotated_count={}\n",
            pred.sum(),
            scene.annotations.count()
        ),
    )?;
    println!(
        "scene {index}: predicted {:.2}, annotated {}; map in {}",
        pred.sum(),
        scene.annotations.count(),
        args.out.display()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::ExportDensity(a) => cmd_export(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through the error path with status 0.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
