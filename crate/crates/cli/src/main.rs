use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use relay_splat::config::PipelineConfig;
use relay_splat::gradsuite::{gradient_suite, SuiteOptions};
use relay_splat::io::{
    export_ply, frame_path, load_checkpoint, read_dataset, read_png, save_checkpoint,
    threads_from_env, write_dataset, write_png, Checkpoint,
};
use relay_splat::metrics::{psnr, MetricReport, Ssim, ViewMetric};
use relay_splat::pipeline::{evaluate, Trainer};
use relay_splat::synth::{generate_scene, DeskMotion, SceneSpec};

mod select;

use select::{parse_list, Selection};

#[derive(Parser)]
#[command(
    name = "relay-splat",
    version,
    about = "Dynamic Gaussian splatting with relay Gaussians"
)]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train one stage or all remaining stages.
    Train(TrainArgs),
    /// Render images from a checkpoint.
    Render(RenderArgs),
    /// Compare a checkpoint or rendered images with a dataset.
    Eval(EvalArgs),
    /// Write the canonical Gaussians of a checkpoint as PLY.
    ExportPly(ExportArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Static,
    Linear,
    Orbit,
    Hops,
}

impl From<Preset> for DeskMotion {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Static => DeskMotion::Static,
            Preset::Linear => DeskMotion::Linear,
            Preset::Orbit => DeskMotion::Orbit,
            Preset::Hops => DeskMotion::Hops,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    /// Scene description (TOML).
    #[arg(long, conflicts_with = "preset")]
    spec: Option<PathBuf>,
    /// Built-in desk scene.
    #[arg(long, value_enum, default_value = "linear")]
    preset: Preset,
    /// Seed of the built-in scene.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum StageArg {
    All,
    One(u8),
}

fn parse_stage(s: &str) -> std::result::Result<StageArg, String> {
    match s {
        "all" => Ok(StageArg::All),
        "1" | "2" | "3" => Ok(StageArg::One(s.parse().unwrap())),
        _ => Err(format!("expected all, 1, 2 or 3, got `{s}`")),
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigPreset {
    /// Full-size step counts.
    Default,
    /// Synthetic desk scene.
    Desk,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and reports.
    #[arg(long)]
    out: PathBuf,
    /// `all` starts from scratch; `n` resumes from the stage n-1 checkpoint.
    #[arg(long, default_value = "all", value_parser = parse_stage)]
    stage: StageArg,
    /// Pipeline configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: ConfigPreset,
    /// Checkpoint to resume from instead of `<out>/stage<n-1>.ckpt`.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible training.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Images go to `<out>/frames/<camera>/<frame>.png`.
    #[arg(long)]
    out: PathBuf,
    /// Camera indices, e.g. `0,3` or `0-7`; default all.
    #[arg(long)]
    cameras: Option<String>,
    /// Frame numbers from 1, e.g. `1-64`; default all.
    #[arg(long)]
    frames: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "images", required_unless_present = "images")]
    checkpoint: Option<PathBuf>,
    /// Directory laid out like a dataset (`frames/<camera>/<frame>.png`).
    #[arg(long)]
    images: Option<PathBuf>,
    /// Default: the held-out cameras of the checkpoint, or every camera.
    #[arg(long)]
    cameras: Option<String>,
    #[arg(long)]
    frames: Option<String>,
    /// Write the full report (TOML) here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    gaussians: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = ["warn", "info", "debug"][cli.verbose.min(2) as usize];
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            // Library errors already quote their source; skip repeats.
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    msg = if msg.is_empty() {
                        cause
                    } else {
                        format!("{msg}: {cause}")
                    };
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    match command {
        Command::Gen(a) => gen(a)?,
        Command::Train(a) => train(a)?,
        Command::Render(a) => render(a)?,
        Command::Eval(a) => eval(a)?,
        Command::ExportPly(a) => {
            let ck = load_checkpoint(&a.checkpoint, None)?;
            export_ply(&a.out, &ck.model.cloud)?;
            println!(
                "wrote {} Gaussians to {}",
                ck.model.cloud.len(),
                a.out.display()
            );
        }
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => SceneSpec::from_toml(&read_text(p)?)
            .with_context(|| format!("invalid scene file {}", p.display()))?,
        None => SceneSpec::desk(a.seed, a.preset.into()),
    };
    let scene = generate_scene(&spec)?;
    write_dataset(&a.out, &scene)?;
    println!(
        "wrote {} cameras × {} frames to {}",
        scene.frames.cameras.len(),
        scene.frames.frame_count,
        a.out.display()
    );
    Ok(())
}

fn checkpoint_path(out: &Path, stage: u8) -> PathBuf {
    out.join(format!("stage{stage}.ckpt"))
}

fn train(a: TrainArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let mut user_config = match &a.config {
        Some(p) => Some(
            PipelineConfig::from_toml(&read_text(p)?)
                .with_context(|| format!("invalid config {}", p.display()))?,
        ),
        None => None,
    };
    let fresh = matches!(a.stage, StageArg::All | StageArg::One(1)) && a.resume.is_none();
    if fresh && user_config.is_none() {
        user_config = Some(match a.preset {
            ConfigPreset::Default => PipelineConfig::default(),
            ConfigPreset::Desk => PipelineConfig::desk(),
        });
    }
    // When resuming, the checkpoint's own configuration wins; a given one is
    // only compared against it.
    if let Some(cfg) = &mut user_config {
        cfg.seed = a.seed.unwrap_or(cfg.seed);
        cfg.deterministic |= a.deterministic;
    }

    let (config, mut model) = if fresh {
        let config = user_config.expect("fresh runs always have a config");
        let points = data
            .points
            .as_ref()
            .ok_or_else(|| anyhow!("{} has no points.ply to start from", a.data.display()))?;
        let model = Trainer::new(config.clone(), &data.frames)?.seeded_model(points);
        (config, model)
    } else {
        let first = match a.stage {
            StageArg::One(n) => n,
            StageArg::All => 1,
        };
        let path = a
            .resume
            .clone()
            .unwrap_or_else(|| checkpoint_path(&a.out, first - 1));
        let ck = load_checkpoint(&path, user_config.as_ref())?;
        let done = ck.model.progress.completed_stage();
        if let StageArg::One(n) = a.stage {
            if done + 1 != n {
                bail!(
                    "{} holds a stage {done} model; stage {n} needs stage {}",
                    path.display(),
                    n - 1
                );
            }
        }
        (ck.config, ck.model)
    };
    if model.frame_count != data.frames.frame_count
        || model.cameras.len() != data.frames.cameras.len()
    {
        bail!("checkpoint does not match the dataset's cameras and frames");
    }

    let mut trainer = Trainer::new(config.clone(), &data.frames)?;
    trainer.pseudo_view_cache = Some(a.out.join("cache"));
    std::fs::create_dir_all(&a.out)
        .with_context(|| format!("cannot create {}", a.out.display()))?;
    std::fs::write(a.out.join("config.toml"), config.to_toml()?)?;
    let last = match a.stage {
        StageArg::All => 3,
        StageArg::One(n) => n,
    };
    while model.progress.completed_stage() < last {
        let (report, adam) = trainer.run_next(&mut model)?;
        let stage = report.stage;
        let path = checkpoint_path(&a.out, stage);
        save_checkpoint(
            &path,
            &Checkpoint {
                config: config.clone(),
                model: model.clone(),
                adam,
            },
        )?;
        std::fs::write(
            a.out.join(format!("report-stage{stage}.toml")),
            toml::to_string(&report)?,
        )?;
        println!(
            "stage {stage}: {} steps, final loss {:.5}, {} Gaussians -> {}",
            report.steps,
            report.losses.last().copied().unwrap_or(f64::NAN),
            report.gaussians,
            path.display()
        );
    }
    if !config.test_cameras.is_empty() {
        let frames: Vec<usize> = (1..=data.frames.frame_count).collect();
        let metrics = trainer.evaluate(&model, None, &frames)?;
        std::fs::write(a.out.join("metrics.toml"), metrics.to_toml()?)?;
        println!("held-out: {}", summary(&metrics));
    }
    Ok(())
}

fn summary(r: &MetricReport) -> String {
    format!(
        "PSNR {:.2} dB, SSIM {:.4} over {} views",
        r.mean_psnr,
        r.mean_ssim,
        r.views.len()
    )
}

fn render(a: RenderArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, None)?;
    let model = &ck.model;
    let cameras = parse_list(
        a.cameras.as_deref(),
        Selection::Cameras(model.cameras.len()),
    )?;
    let frames = parse_list(a.frames.as_deref(), Selection::Frames(model.frame_count))?;
    let settings = ck.config.render.settings();
    for &c in &cameras {
        for &f in &frames {
            let image =
                model.render_frame(&model.cameras[c], f, &settings, ck.config.mask.epsilon)?;
            write_png(&frame_path(&a.out, c, f), &image)?;
        }
    }
    println!(
        "rendered {} images to {}",
        cameras.len() * frames.len(),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let n = data.frames.cameras.len();
    let frames = parse_list(
        a.frames.as_deref(),
        Selection::Frames(data.frames.frame_count),
    )?;
    let report = match (&a.checkpoint, &a.images) {
        (Some(path), _) => {
            let ck = load_checkpoint(path, None)?;
            let cameras = match &a.cameras {
                Some(s) => parse_list(Some(s), Selection::Cameras(n))?,
                None if ck.config.test_cameras.is_empty() => {
                    bail!("the checkpoint has no held-out cameras; pass --cameras")
                }
                None => ck.config.test_cameras.clone(),
            };
            evaluate(&ck.model, &data.frames, &cameras, &frames, &ck.config)?
        }
        (None, Some(dir)) => {
            let cameras = parse_list(a.cameras.as_deref(), Selection::Cameras(n))?;
            let ssim = Ssim::default();
            let mut views = Vec::new();
            for &c in &cameras {
                for &f in &frames {
                    let image = read_png(&frame_path(dir, c, f))?;
                    let target = data.frames.image(c, f);
                    views.push(ViewMetric {
                        camera: c,
                        frame: f,
                        psnr: psnr(&image, target)?,
                        ssim: ssim.ssim(&image, target)?,
                    });
                }
            }
            MetricReport::from_views(views)
        }
        (None, None) => unreachable!("clap requires one of --checkpoint and --images"),
    };
    if let Some(path) = &a.report {
        std::fs::write(path, report.to_toml()?)
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    println!("{}", summary(&report));
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let opts = SuiteOptions {
        seeds: a.seeds,
        image_size: a.size,
        gaussians: a.gaussians,
        step: a.step,
        ..SuiteOptions::default()
    };
    let report = gradient_suite(&opts)?;
    for (group, err) in &report.per_group {
        println!("{group:<28} {err:.3e}");
    }
    let ok = report.max_rel_error < a.tolerance;
    println!(
        "{} values checked, max relative error {:.3e}: {}",
        report.checked,
        report.max_rel_error,
        if ok { "pass" } else { "FAIL" }
    );
    if let (false, Some(w)) = (ok, &report.worst) {
        println!(
            "worst: {} [{}] analytic {:.6e} numeric {:.6e}",
            w.group, w.index, w.analytic, w.numeric
        );
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
