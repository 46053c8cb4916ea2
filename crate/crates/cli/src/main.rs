use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use occhuman::benchmark::{evaluate_occluded, occluded_frames, report_csv};
use occhuman::field::Field;
use occhuman::metrics::{evaluate, EvalMode};
use occhuman::motion::MotionField;
use occhuman::occlusion::simulate_occlusion;
use occhuman::renderer::{render_image, FrameContext};
use occhuman::scene_io::{
    load_manifest, read_camera, write_gray16, write_image, write_manifest, Camera, FrameRecord, SceneDataset,
    MANIFEST_FILE,
};
use occhuman::synthgen::{generate_dataset, SynthConfig};
use occhuman::training::{self, checkpoint, key_values, TrainConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "occhuman", version, about = "Occlusion-robust human rendering on desk-scale synthetic scenes")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// `key = value` config file; repeat to layer, later files win.
    #[arg(long = "config", value_name = "FILE")]
    configs: Vec<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Scene directory or its scene.json.
    #[arg(long)]
    data: PathBuf,
    /// Directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_name = "N")]
    iters: Option<usize>,
    /// Extra `key=value` override applied after the config files.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    common: Common,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic benchmark scene.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        /// Square image size in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Mask one rectangle over most training frames.
    Occlude {
        #[arg(long)]
        data: PathBuf,
        /// Output scene directory; defaults to rewriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        coverage: Option<f64>,
        /// Fraction of frames that get the occluder.
        #[arg(long)]
        fraction: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the model to a scene.
    Train(TrainArgs),
    /// Train with components switched off.
    Ablate {
        #[command(flatten)]
        train: TrainArgs,
        /// Point-only field instead of the surface-conditioned one.
        #[arg(long)]
        no_surface: bool,
        /// Uniform neighbor aggregation.
        #[arg(long)]
        no_attention: bool,
        /// Drop the completeness loss.
        #[arg(long)]
        no_comp: bool,
    },
    /// Render frames from a checkpoint.
    Render {
        #[command(flatten)]
        target: RenderTarget,
        /// Output directory for color PNGs and 16-bit alpha maps.
        #[arg(long)]
        out: PathBuf,
        /// Camera JSON file; overrides --view.
        #[arg(long)]
        camera: Option<PathBuf>,
    },
    /// Write per-frame PSNR/SSIM as CSV.
    Eval {
        #[command(flatten)]
        target: RenderTarget,
        /// Metrics CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Also write the occluded-region report for the training camera.
        #[arg(long, value_name = "FILE")]
        occluded_report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RenderTarget {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `train` or the name of a held-out view.
    #[arg(long, default_value = "train")]
    view: String,
    /// Use every N-th frame.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Samples per ray; defaults to the checkpoint's training value.
    #[arg(long)]
    samples: Option<usize>,
    #[command(flatten)]
    common: Common,
}

fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_scene(p: &Path) -> Result<SceneDataset> {
    let path = manifest_path(p);
    load_manifest(&path).with_context(|| format!("loading {}", path.display()))
}

/// Feeds every key of the layered config files to `set`.
fn apply_configs(files: &[PathBuf], mut set: impl FnMut(&str, &str) -> Result<()>) -> Result<()> {
    for path in files {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (line, k, v) in key_values(&text)? {
            set(&k, &v).with_context(|| format!("{}:{line}", path.display()))?;
        }
    }
    Ok(())
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().ok().with_context(|| format!("cannot parse {value:?} for {key}"))
}

fn synth(out: &Path, frames: Option<usize>, size: Option<usize>, common: &Common) -> Result<()> {
    let mut cfg = SynthConfig::default();
    apply_configs(&common.configs, |k, v| {
        match k {
            "frames" => cfg.frames = parse(k, v)?,
            "width" => cfg.width = parse(k, v)?,
            "height" => cfg.height = parse(k, v)?,
            "amplitude" => cfg.amplitude = parse(k, v)?,
            "focal" => cfg.focal = parse(k, v)?,
            "camera_distance" => cfg.camera_distance = parse(k, v)?,
            "seed" => cfg.seed = parse(k, v)?,
            _ => bail!("unknown synth key {k:?}"),
        }
        Ok(())
    })?;
    if let Some(n) = frames {
        cfg.frames = n;
    }
    if let Some(s) = size {
        cfg.width = s;
        cfg.height = s;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let path = generate_dataset(&cfg, out)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn occlude(data: &Path, out: Option<&Path>, coverage: Option<f64>, fraction: Option<f64>, common: &Common) -> Result<()> {
    let (mut cov, mut frac, mut seed) = (0.5, 0.8, 0u64);
    apply_configs(&common.configs, |k, v| {
        match k {
            "coverage" => cov = parse(k, v)?,
            "frame_fraction" => frac = parse(k, v)?,
            "seed" => seed = parse(k, v)?,
            _ => bail!("unknown occlude key {k:?}"),
        }
        Ok(())
    })?;
    let cov = coverage.unwrap_or(cov);
    let frac = fraction.unwrap_or(frac);
    let seed = common.seed.unwrap_or(seed);
    let mut dataset = load_scene(data)?;
    let report = simulate_occlusion(&mut dataset, cov, frac, seed)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => manifest_path(data).parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    write_manifest(&dataset, &dir)?;
    let r = report.rect;
    println!(
        "rect center ({:.2}, {:.2}) half size {:.2} x {:.2}; covered {:.4}; {} of {} frames occluded",
        r.cx,
        r.cy,
        r.half_w,
        r.half_h,
        report.covered_fraction,
        report.occluded_frames.len(),
        dataset.frames.len()
    );
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    apply_configs(&args.common.configs, |k, v| Ok(cfg.set(k, v)?))?;
    for kv in &args.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got {kv:?}");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.common.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.iters {
        cfg.iterations = n;
    }
    Ok(cfg)
}

fn train(args: &TrainArgs, cfg: TrainConfig) -> Result<()> {
    cfg.validate()?;
    let dataset = load_scene(&args.data)?;
    let opts = TrainOptions {
        out_dir: Some(args.out.clone()),
        perceptual: None,
    };
    let (_, report) = training::train(&dataset, &cfg, &opts)?;
    if let Some(last) = report.log.last() {
        info!("final mse {:.6} comp {:.6} total {:.6}", last.mse, last.comp, last.total);
    }
    info!("wrote {}", training::final_checkpoint(&args.out).display());
    Ok(())
}

struct Loaded {
    dataset: SceneDataset,
    field: Field,
    samples: usize,
}

fn load_target(t: &RenderTarget) -> Result<Loaded> {
    let dataset = load_scene(&t.data)?;
    let (cfg, state) = checkpoint::load(&t.checkpoint, &dataset.template)
        .with_context(|| format!("loading {}", t.checkpoint.display()))?;
    let mut samples = cfg.samples;
    apply_configs(&t.common.configs, |k, v| {
        match k {
            "samples" => samples = parse(k, v)?,
            _ => bail!("unknown render key {k:?}"),
        }
        Ok(())
    })?;
    let samples = t.samples.unwrap_or(samples);
    if samples == 0 || t.stride == 0 {
        bail!("samples and stride must be positive");
    }
    Ok(Loaded {
        dataset,
        field: state.field,
        samples,
    })
}

/// Cameras and frame records of a view, every `stride`-th frame.
fn view_frames<'d>(dataset: &'d SceneDataset, view: &str, stride: usize) -> Result<Vec<(&'d Camera, &'d FrameRecord)>> {
    let all: Vec<_> = if view == "train" {
        dataset.cameras.iter().zip(&dataset.frames).collect()
    } else {
        let Some(v) = dataset.eval_views.iter().find(|v| v.name == view) else {
            let names: Vec<&str> = dataset.eval_views.iter().map(|v| v.name.as_str()).collect();
            bail!("no view {view:?}; available: train {}", names.join(" "));
        };
        v.frames.iter().map(|f| (&v.camera, f)).collect()
    };
    Ok(all.into_iter().step_by(stride).collect())
}

fn render(t: &RenderTarget, out: &Path, camera: Option<&Path>) -> Result<()> {
    let l = load_target(t)?;
    let custom = camera.map(read_camera).transpose()?;
    let motion = MotionField::new(&l.dataset.template)?;
    let view = if custom.is_some() { "train" } else { t.view.as_str() };
    for (cam, frame) in view_frames(&l.dataset, view, t.stride)? {
        let cam = custom.as_ref().unwrap_or(cam);
        let ctx = FrameContext::new(&motion, &l.dataset.template, &frame.pose)?;
        let (img, alpha) = render_image(&l.field, &ctx, cam, l.samples)?;
        let i = frame.frame_index;
        write_image(&out.join(format!("{i:04}.png")), &img)?;
        write_gray16(&out.join(format!("{i:04}_alpha.png")), cam.width, cam.height, &alpha)?;
        info!("rendered frame {i}");
    }
    Ok(())
}

fn eval(t: &RenderTarget, out: &Path, occluded_report: Option<&Path>) -> Result<()> {
    let l = load_target(t)?;
    let motion = MotionField::new(&l.dataset.template)?;
    let mut csv = String::from("frame,mode,psnr,ssim\n");
    for (cam, frame) in view_frames(&l.dataset, &t.view, t.stride)? {
        let ctx = FrameContext::new(&motion, &l.dataset.template, &frame.pose)?;
        let (img, alpha) = render_image(&l.field, &ctx, cam, l.samples)?;
        for mode in [EvalMode::Full, EvalMode::Vis] {
            let (p, s) = evaluate(&img, &alpha, &frame.image, mode, &frame.subject_mask, &frame.occlusion_mask)
                .with_context(|| format!("frame {}", frame.frame_index))?;
            let _ = writeln!(csv, "{},{mode},{p},{s}", frame.frame_index);
        }
    }
    write_text(out, &csv)?;
    if let Some(path) = occluded_report {
        let frames = occluded_frames(&l.dataset, t.stride);
        let report = evaluate_occluded(&l.field, &l.dataset, &frames, l.samples)?;
        write_text(path, &report_csv(&[("model", report)]))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Synth { out, frames, size, common } => synth(out, *frames, *size, common),
        Command::Occlude {
            data,
            out,
            coverage,
            fraction,
            common,
        } => occlude(data, out.as_deref(), *coverage, *fraction, common),
        Command::Train(args) => train(args, train_config(args)?),
        Command::Ablate {
            train: args,
            no_surface,
            no_attention,
            no_comp,
        } => {
            let mut cfg = train_config(args)?;
            if *no_surface {
                cfg.set("surface", "false")?;
            }
            if *no_attention {
                cfg.attention = false;
            }
            if *no_comp {
                cfg.lambda_comp = 0.0;
            }
            train(args, cfg)
        }
        Command::Render { target, out, camera } => render(target, out, camera.as_deref()),
        Command::Eval {
            target,
            out,
            occluded_report,
        } => eval(target, out, occluded_report.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
