//! `psgan`: train periodic spatial GAN texture models and render from them.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use psgan_core::checkpoint;
use psgan_core::config::{preset, RunConfig};
use psgan_core::data::{synth_texture, FloatImage, SynthKind};
use psgan_core::eval::{autocorrelation, save_heatmap, wavenumber_consistency};
use psgan_core::noise::GlobalMode;
use psgan_core::sampler::{
    disentangle_plan, morph_plan, quilt_plan, render, render_png, sample_corners, tileable_plan, DisentangleMode,
    RenderPlan,
};
use psgan_core::trainer::{train, Checkpoint, TrainEvent};
use psgan_core::Error;

#[derive(Parser)]
#[command(name = "psgan", version, about = "Periodic spatial GAN texture synthesis")]
struct Cli {
    /// Random seed (training seed for train, render seed otherwise).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (train) or output file (render and eval commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset: text-p6, single-honeycomb, merrigum, dtd, facades, sydney.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Configuration override `section.field=value`; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes a run directory with config, metrics and checkpoints.
    Train {
        /// Training image or folder (shorthand for `--override data.path=...`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Continue training from a checkpoint inside a run directory.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Train until this step (default: the configured step count).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Render a texture of arbitrary size.
    Sample {
        #[command(flatten)]
        render: RenderArgs,
        /// Noise extent `LxM` (the image is 2^depth times larger).
        #[arg(long, value_parser = parse_pair)]
        size: Option<(usize, usize)>,
        /// Render a saved plan instead of building one from flags.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Patchwork of textures with one global vector per tile.
    Quilt {
        #[command(flatten)]
        render: RenderArgs,
        #[arg(long, value_parser = parse_pair, default_value = "4x4")]
        tiles: (usize, usize),
        #[arg(long, default_value_t = 15)]
        delta: usize,
    },
    /// Bilinear morph between four random textures in the corners.
    Morph {
        #[command(flatten)]
        render: RenderArgs,
        #[arg(long, value_parser = parse_pair, default_value = "50x50")]
        size: (usize, usize),
    },
    /// Swap global and periodic inputs to separate their roles.
    Disentangle {
        #[command(flatten)]
        render: RenderArgs,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, value_parser = parse_pair, default_value = "2x2")]
        tiles: (usize, usize),
        #[arg(long, default_value_t = 10)]
        delta: usize,
    },
    /// Seamlessly tileable texture.
    Tile {
        #[command(flatten)]
        render: RenderArgs,
        #[arg(long, value_parser = parse_pair, default_value = "10x10")]
        size: (usize, usize),
    },
    /// Compare learned wave numbers with the autocorrelation of a render.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Analyse this image instead of rendering one.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Noise extent of the rendered image (default: four times the training extent).
        #[arg(long, value_parser = parse_pair)]
        size: Option<(usize, usize)>,
    },
    /// Write a synthetic texture PNG.
    Fixtures {
        #[arg(long, value_enum)]
        kind: Fixture,
        #[arg(long, default_value_t = 16.0)]
        period: f64,
        /// Direction of variation for stripes, in degrees.
        #[arg(long, default_value_t = 0.0)]
        angle: f64,
        #[arg(long, default_value_t = 256)]
        size: usize,
    },
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Largest noise extent rendered per pass.
    #[arg(long)]
    chunk: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    VaryGFixP,
    FixGVaryP,
    VaryBoth,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fixture {
    Stripes,
    Checkerboard,
    Hexgrid,
    ColoredNoise,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected AxB, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

/// Exit codes: 2 configuration, 3 divergence, 4 I/O.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } => 3,
        Error::Io(_) | Error::Image { .. } | Error::Checkpoint(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> psgan_core::Result<()> {
    match &cli.command {
        Command::Train { data } => cmd_train(&cli, data.as_deref()),
        Command::Resume { checkpoint, steps } => cmd_resume(&cli, checkpoint, *steps),
        Command::Sample { render, size, plan } => {
            let model = load_model(&render.checkpoint)?;
            let plan = match plan {
                Some(p) => {
                    let text = fs::read_to_string(p)?;
                    let file: PlanFile =
                        toml::from_str(&text).map_err(|e| Error::Config(format!("plan: {}", e.message())))?;
                    file.plan
                }
                None => {
                    let (l, m) = size.unwrap_or((model.noise.l, model.noise.m));
                    RenderPlan::sample(&model, l, m, cli.seed.unwrap_or(0))
                }
            };
            emit(&cli, "sample.png", &model, plan, render)
        }
        Command::Quilt { render, tiles, delta } => {
            let model = load_model(&render.checkpoint)?;
            let plan = quilt_plan(&model, tiles.0, tiles.1, *delta, cli.seed.unwrap_or(0))?;
            emit(&cli, "quilt.png", &model, plan, render)
        }
        Command::Morph { render, size } => {
            let model = load_model(&render.checkpoint)?;
            let seed = cli.seed.unwrap_or(0);
            let plan = morph_plan(&model, sample_corners(&model, seed), size.0, size.1, seed)?;
            emit(&cli, "morph.png", &model, plan, render)
        }
        Command::Disentangle { render, mode, tiles, delta } => {
            let model = load_model(&render.checkpoint)?;
            let mode = match mode {
                Mode::VaryGFixP => DisentangleMode::VaryGFixP,
                Mode::FixGVaryP => DisentangleMode::FixGVaryP,
                Mode::VaryBoth => DisentangleMode::VaryBoth,
            };
            let plan = disentangle_plan(&model, mode, tiles.0, tiles.1, *delta, None, cli.seed.unwrap_or(0))?;
            emit(&cli, "disentangle.png", &model, plan, render)
        }
        Command::Tile { render, size } => {
            let model = load_model(&render.checkpoint)?;
            let plan = tileable_plan(&model, size.0, size.1, cli.seed.unwrap_or(0));
            emit(&cli, "tile.png", &model, plan, render)
        }
        Command::Eval { checkpoint, image, size } => cmd_eval(&cli, checkpoint, image.as_deref(), *size),
        Command::Fixtures {
            kind,
            period,
            angle,
            size,
        } => {
            let kind = match kind {
                Fixture::Stripes => SynthKind::Stripes {
                    period: *period,
                    angle: angle.to_radians(),
                },
                Fixture::Checkerboard => SynthKind::Checkerboard { period: *period },
                Fixture::Hexgrid => SynthKind::Hexgrid { period: *period },
                Fixture::ColoredNoise => SynthKind::ColoredNoise {
                    seed: cli.seed.unwrap_or(0),
                },
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("fixture.png"));
            synth_texture(&kind, *size, *size)?.save_png(&out)?;
            println!("{}", out.display());
            Ok(())
        }
    }
}

/// Configuration from `--config` (preferred) or `--preset`, then `--override`s.
fn resolve_config(cli: &Cli) -> psgan_core::Result<RunConfig> {
    let base = match (&cli.config, &cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => {
            return Err(Error::Config("train needs --config or --preset".into()));
        }
    };
    let mut cfg = base.with_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ckpt_name(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

/// Train from `state`, writing metrics and checkpoints into `dir`.
fn run_training(dir: &Path, cfg: &RunConfig, state: &mut Checkpoint) -> psgan_core::Result<()> {
    let source = cfg.data.load(cfg.train.patch_size)?;
    let ck_dir = dir.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("metrics.jsonl"))?;
    let result = train(state, &source, |event| {
        match event {
            TrainEvent::Metrics(m) => {
                let line = serde_json::to_string(m).map_err(|e| Error::Config(e.to_string()))?;
                writeln!(metrics, "{line}")?;
                eprintln!(
                    "step {:>7}  d_loss {:.4}  g_loss {:.4}  D(real) {:.3}  D(fake) {:.3}",
                    m.step, m.d_loss, m.g_loss, m.d_real_mean, m.d_fake_mean
                );
            }
            TrainEvent::Checkpoint(c) => {
                let path = ck_dir.join(ckpt_name(c.step));
                checkpoint::save(c, &path)?;
                fs::copy(&path, dir.join("latest.ckpt"))?;
            }
        }
        Ok(())
    });
    metrics.flush()?;
    result
}

fn cmd_train(cli: &Cli, data: Option<&Path>) -> psgan_core::Result<()> {
    let mut cfg = resolve_config(cli)?;
    if let Some(p) = data {
        cfg.data.path = Some(p.to_path_buf());
        cfg.data.synth = None;
    }
    // everything is checked before the run directory is created
    cfg.data.load(cfg.train.patch_size)?;
    let mut state = Checkpoint::new(&cfg.noise, &cfg.net, &cfg.train)?;
    let dir = cfg.out_dir.join(&cfg.name);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    run_training(&dir, &cfg, &mut state)?;
    println!("{}", dir.display());
    Ok(())
}

/// The run directory a checkpoint belongs to.
fn run_dir_of(ckpt: &Path) -> PathBuf {
    let parent = ckpt.parent().unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == "checkpoints") {
        parent.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}

fn cmd_resume(cli: &Cli, ckpt: &Path, steps: Option<u64>) -> psgan_core::Result<()> {
    let mut state = checkpoint::load(ckpt)?;
    let dir = run_dir_of(ckpt);
    let snapshot = cli.config.clone().unwrap_or_else(|| dir.join("config.toml"));
    let mut cfg = RunConfig::load(&snapshot)?.with_overrides(&cli.overrides)?;
    if let Some(s) = steps {
        state.config.steps = s;
    }
    cfg.train = state.config.clone();
    cfg.noise = state.model.noise.clone();
    cfg.net = state.model.net.clone();
    fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    run_training(&dir, &cfg, &mut state)?;
    println!("{}", dir.display());
    Ok(())
}

fn load_model(path: &Path) -> psgan_core::Result<psgan_core::trainer::Model> {
    Ok(checkpoint::load(path)?.model)
}

/// Render `plan` to the output PNG and write the plan next to it.
fn emit(
    cli: &Cli,
    default_name: &str,
    model: &psgan_core::trainer::Model,
    plan: RenderPlan,
    args: &RenderArgs,
) -> psgan_core::Result<()> {
    let plan = match args.chunk {
        Some(c) => plan.with_chunk(Some(c)),
        None if plan.chunk.is_none() => {
            // large outputs are rendered in chunks to bound memory
            let (h, w) = plan.pixel_size(model);
            let chunk = (h * w > 1024 * 1024).then_some(16.max(RenderPlan::min_chunk(model)));
            plan.with_chunk(chunk)
        }
        None => plan,
    };
    plan.validate(model)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(default_name));
    let snapshot = toml::to_string(&PlanFile {
        checkpoint: args.checkpoint.clone(),
        plan: plan.clone(),
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    render_png(model, &plan, &out)?;
    fs::write(out.with_extension("plan.toml"), snapshot)?;
    let (h, w) = plan.pixel_size(model);
    println!("{} {}x{}", out.display(), w, h);
    Ok(())
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PlanFile {
    checkpoint: PathBuf,
    plan: RenderPlan,
}

fn cmd_eval(cli: &Cli, ckpt: &Path, image: Option<&Path>, size: Option<(usize, usize)>) -> psgan_core::Result<()> {
    let model = load_model(ckpt)?;
    let seed = cli.seed.unwrap_or(0);
    let (l, m) = size.unwrap_or((4 * model.noise.l, 4 * model.noise.m));
    let plan = RenderPlan::sample(&model, l, m, seed);
    let z_g = match &plan.global {
        Some(GlobalMode::Broadcast { z }) => z.clone(),
        _ => Vec::new(),
    };
    let img = match image {
        Some(p) => FloatImage::load(p)?,
        None => render(&model, &plan)?,
    };
    let report = wavenumber_consistency(&model, &z_g, &img)?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("eval.json"));
    fs::write(&out, &text)?;
    if report.is_periodic() {
        let map = autocorrelation(&img, report.max_lag)?;
        save_heatmap(&map, &report, 3, &out.with_extension("heatmap.png"))?;
    }
    println!("{text}");
    Ok(())
}
