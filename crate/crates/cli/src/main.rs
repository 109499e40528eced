//! `blursplat`: dataset generation, pose initialization, training, rendering,
//! event deblurring and evaluation for blur-aware Gaussian splatting.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use blursplat::edi::{edi_init_views, EdiConfig, EdiView};
use blursplat::harness::{
    evaluate, init_poses, DEFAULT_INIT_POINTS, read_tum_file, train, write_tum_file, Dataset, DatasetConfig, InitSource, Mode, TrainSetup,
};
use blursplat::metrics::{psnr, EvalReport};
use blursplat::optimizer::{OptimConfig, TrainState};
use blursplat::renderer::render;
use blursplat::scene::{load_scene, SceneModel};
use blursplat::sfm_init::write_pointcloud;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "blursplat", version, about = "Blur-aware Gaussian splatting with joint trajectory optimization")]
struct Cli {
    /// Seed for every stochastic step of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for rendering (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file: dataset settings for `generate`, optimizer settings for `train`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config field, applied after `--config`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural dataset: sharp bursts, blur levels, events, poses.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the structure-from-motion stand-in and write initial poses.
    InitPoses {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = Source::Blur)]
        source: Source,
        /// Output TUM file with the initial mid-exposure poses.
        #[arg(long)]
        out: PathBuf,
        /// Optional ASCII PLY file for the sparse point cloud.
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_INIT_POINTS)]
        n_points: usize,
    },
    /// Optimize Gaussians and camera trajectories on blurred views.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "gems")]
        mode: String,
        /// Run directory for the checkpoint, log, renders and report.
        #[arg(long)]
        out: PathBuf,
        /// Start from exact mid-exposure poses.
        #[arg(long)]
        gt_poses: bool,
        /// Optimizer settings that `--set` edits: `full` is the 7000-iteration
        /// schedule, `desk` the 2000-iteration small-scene one. Cannot be
        /// combined with `--config`.
        #[arg(long, value_enum, default_value_t = Preset::Full)]
        preset: Preset,
        #[arg(long, default_value_t = DEFAULT_INIT_POINTS)]
        n_points: usize,
        #[arg(long, default_value_t = 100)]
        log_every: usize,
    },
    /// Render a checkpoint (or scene file) at the poses of a TUM file.
    Render {
        #[command(flatten)]
        model: ModelArgs,
        /// Dataset providing the camera and, by default, the test poses.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Deblur one blur level of a dataset with its events.
    Edi {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Contrast threshold (defaults to the dataset's).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = blursplat::edi::DEFAULT_BINS)]
        bins: usize,
        /// Normalized time of the latent frame within the exposure.
        #[arg(long, default_value_t = 0.5)]
        latent_time: f64,
    },
    /// Test-view PSNR/SSIM and trajectory APE.
    Eval {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Directory for report.txt and report.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 7)]
    level: u32,
}

#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// A bare scene file (no trajectories), e.g. `scene_gt.gspl`.
    #[arg(long)]
    scene: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Source {
    Blur,
    Edi,
    Gt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

/// Misuse of flags that clap cannot detect on its own.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<blursplat::Error>() {
        Some(blursplat::Error::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn split_set(kv: &str) -> Result<(&str, &str)> {
    kv.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{kv}'")))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let uses_config = matches!(cli.command, Command::Generate { .. } | Command::Train { .. });
    if !uses_config && (cli.config.is_some() || !cli.set.is_empty()) {
        return Err(usage("--config and --set apply only to generate and train"));
    }
    match &cli.command {
        Command::Generate { out } => cmd_generate(&cli, out),
        Command::InitPoses {
            data,
            source,
            out,
            points,
            n_points,
        } => cmd_init_poses(&cli, data, *source, out, points.as_deref(), *n_points),
        Command::Train {
            data,
            mode,
            out,
            gt_poses,
            preset,
            n_points,
            log_every,
        } => {
            let mode: Mode = mode.parse().map_err(|e: blursplat::Error| usage(e.to_string()))?;
            if *preset != Preset::Full && cli.config.is_some() {
                return Err(usage("--preset and --config are mutually exclusive"));
            }
            let base = match preset {
                Preset::Full => OptimConfig::default(),
                Preset::Desk => OptimConfig::desk(),
            };
            cmd_train(&cli, data, mode, out, base, *gt_poses, *n_points, *log_every)
        }
        Command::Render { model, data, poses, out } => cmd_render(model, data, poses.as_deref(), out),
        Command::Edi {
            data,
            out,
            threshold,
            bins,
            latent_time,
        } => cmd_edi(data, out, *threshold, *bins, *latent_time),
        Command::Eval { model, data, out } => cmd_eval(model, data, out.as_deref()),
    }
}

fn cmd_generate(cli: &Cli, out: &Path) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => DatasetConfig::load(p)?,
        None => DatasetConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = split_set(kv)?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let ds = Dataset::generate(&cfg)?;
    ds.save(out)?;
    println!(
        "stage=generate out={} views={} test_views={} blur_levels={:?} events={}",
        out.display(),
        ds.views.len(),
        ds.test_views.len(),
        cfg.blur_levels,
        ds.events.as_ref().map_or(0, |e| e.len())
    );
    Ok(())
}

fn cmd_init_poses(
    cli: &Cli,
    data: &DataArgs,
    source: Source,
    out: &Path,
    points: Option<&Path>,
    n_points: usize,
) -> Result<()> {
    let ds = Dataset::load(&data.data)?;
    let source = match source {
        Source::Blur => InitSource::Blur,
        Source::Edi => InitSource::Edi,
        Source::Gt => InitSource::GroundTruth,
    };
    let edi = EdiConfig {
        threshold: ds.config.event_threshold,
        ..EdiConfig::default()
    };
    let mut stdout = io::stdout();
    let init = init_poses(&ds, data.level, source, &edi, n_points, cli.seed.unwrap_or(0), &mut stdout)?;
    let timed: Vec<_> = init.poses.iter().enumerate().map(|(i, p)| (i as f64, *p)).collect();
    write_tum_file(out, &timed)?;
    if let Some(path) = points {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(file);
        write_pointcloud(&mut w, &init.points)
            .and_then(|_| w.flush())
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let gt = ds.gt_mid_poses(data.level)?;
    let ape = blursplat::metrics::ape_poses(&init.poses, &gt, false)?;
    println!("stage=init-poses out={} poses={} ape_rmse={:.6}", out.display(), timed.len(), ape.rmse);
    Ok(())
}

/// Writes every line to both sinks.
struct Tee<A, B>(A, B);

impl<A: Write, B: Write> Write for Tee<A, B> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.write_all(buf)?;
        self.1.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        self.0.flush()?;
        self.1.flush()
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cli: &Cli,
    data: &DataArgs,
    mode: Mode,
    out: &Path,
    base: OptimConfig,
    gt_poses: bool,
    n_points: usize,
    log_every: usize,
) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => OptimConfig::load(p)?,
        None => base,
    };
    for kv in &cli.set {
        let (k, v) = split_set(kv)?;
        cfg.set(k, v)?;
    }
    let ds = Dataset::load(&data.data)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut setup = TrainSetup::new(mode, data.level, cfg);
    setup.seed = cli.seed.unwrap_or(0);
    setup.n_points = n_points;
    setup.log_every = log_every;
    setup.gt_poses = gt_poses;
    setup.edi.threshold = ds.config.event_threshold;

    let log_path = out.join("train.log");
    let log_file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = Tee(BufWriter::new(log_file), io::stdout());
    let outcome = train(&ds, &setup, &mut log)?;
    outcome.state.save(&out.join("checkpoint.gmsk"))?;
    fs::write(out.join("config.toml"), outcome.state.config.to_toml_string())?;
    let timed: Vec<_> = outcome
        .state
        .mid_poses()?
        .into_iter()
        .enumerate()
        .map(|(i, p)| (i as f64, p))
        .collect();
    write_tum_file(&out.join("trajectory_est.tum"), &timed)?;
    let renders = out.join("renders");
    fs::create_dir_all(&renders)?;
    for (k, tv) in ds.test_views.iter().enumerate() {
        render(&outcome.state.scene, &tv.pose, &ds.camera).save_png(&renders.join(format!("test_{k:03}.png")))?;
    }
    let report = evaluate(&outcome.state, &ds, data.level)?;
    write_report(&report, out)?;
    writeln!(
        log,
        "stage=eval psnr_mean={:.4} ssim_mean={:.4} ape_rmse={:.6}",
        report.mean_psnr(),
        report.mean_ssim(),
        outcome.final_ape.rmse
    )?;
    log.flush()?;
    Ok(())
}

fn load_model(model: &ModelArgs) -> Result<(SceneModel, Option<TrainState>)> {
    match (&model.checkpoint, &model.scene) {
        (Some(c), _) => {
            let state = TrainState::load(c)?;
            Ok((state.scene.clone(), Some(state)))
        }
        (None, Some(s)) => Ok((load_scene(s)?, None)),
        (None, None) => Err(usage("one of --checkpoint or --scene is required")),
    }
}

fn cmd_render(model: &ModelArgs, data: &Path, poses: Option<&Path>, out: &Path) -> Result<()> {
    let (scene, _) = load_model(model)?;
    let ds = Dataset::load(data)?;
    let poses = match poses {
        Some(p) => read_tum_file(p)?,
        None => read_tum_file(&data.join("trajectory_test.tum"))?,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (k, (_, pose)) in poses.iter().enumerate() {
        let img = render(&scene, pose, &ds.camera);
        img.save_png(&out.join(format!("view_{k:03}.png")))?;
        img.save_npy(&out.join(format!("view_{k:03}.npy")))?;
    }
    println!("stage=render out={} views={}", out.display(), poses.len());
    Ok(())
}

fn cmd_edi(data: &DataArgs, out: &Path, threshold: Option<f64>, bins: usize, latent_time: f64) -> Result<()> {
    let ds = Dataset::load(&data.data)?;
    if ds.events.is_none() {
        bail!(blursplat::Error::Dataset(
            "dataset has no events; regenerate with events enabled".into()
        ));
    }
    let cfg = EdiConfig {
        threshold: threshold.unwrap_or(ds.config.event_threshold),
        bins,
        latent_time,
    };
    cfg.validate()?;
    let n = ds.views.len();
    let blurs = (0..n).map(|v| ds.observed(v, data.level)).collect::<Result<Vec<_>, _>>()?;
    let streams = (0..n).map(|v| ds.view_events(v, data.level)).collect::<Result<Vec<_>, _>>()?;
    let windows = (0..n).map(|v| ds.exposure_window(v, data.level)).collect::<Result<Vec<_>, _>>()?;
    let views: Vec<EdiView<'_>> = (0..n)
        .map(|v| EdiView {
            blur: &blurs[v],
            window: windows[v],
            stream: &streams[v],
        })
        .collect();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut failed = 0;
    for (v, res) in edi_init_views(&views, &cfg).into_iter().enumerate() {
        match res {
            Ok(img) => {
                img.image().save_png(&out.join(format!("view_{v:03}.png")))?;
                img.image().save_npy(&out.join(format!("view_{v:03}.npy")))?;
                println!(
                    "stage=edi view={v} psnr_blur={:.4} psnr_edi={:.4} degraded={}",
                    psnr(&blurs[v], ds.mid_sharp(v, data.level)?)?,
                    psnr(img.image(), ds.mid_sharp(v, data.level)?)?,
                    img.degraded()
                );
            }
            Err(e) => {
                failed += 1;
                println!("stage=edi view={v} status=failed error=\"{e}\"");
            }
        }
    }
    if failed == n {
        bail!(blursplat::Error::Dataset("EDI failed for every view".into()));
    }
    Ok(())
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("report.txt"), report.to_text())?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    Ok(())
}

fn cmd_eval(model: &ModelArgs, data: &DataArgs, out: Option<&Path>) -> Result<()> {
    let (scene, state) = load_model(model)?;
    let ds = Dataset::load(&data.data)?;
    let report = match state {
        Some(state) => evaluate(&state, &ds, data.level)?,
        None => {
            let mut r = EvalReport::default();
            for (k, tv) in ds.test_views.iter().enumerate() {
                let img = render(&scene, &tv.pose, &ds.camera);
                r.push_view(
                    format!("test_{k:03}"),
                    psnr(&img, &tv.image)?,
                    blursplat::metrics::ssim(&img, &tv.image)?,
                );
            }
            r
        }
    };
    print!("{}", report.to_text());
    if let Some(dir) = out {
        write_report(&report, dir)?;
    }
    Ok(())
}
