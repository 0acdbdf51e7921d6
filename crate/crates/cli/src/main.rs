use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use reggan::error::ErrorClass;
use reggan::noise::NoiseSetting;
use reggan::report;
use reggan::synthdata::{generate_dataset, PhantomSpec};
use reggan::train::{run_experiment_with, ExperimentConfig, ModeKind, NetSpecs};
use serde::Serialize;

/// Overrides the default output root (`runs`).
const OUTPUT_ROOT_ENV: &str = "REGGAN_OUTPUT_ROOT";

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "reggan", version, about = "Translation on misaligned pairs with a registration network")]
struct Cli {
    /// Root for default output locations.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-modality dataset.
    Synth(SynthArgs),
    /// Train one mode under one noise setting.
    Train(TrainArgs),
    /// Compare finished runs: table, curves, smoothness plot, error maps.
    Report(ReportArgs),
    /// Render an image under each noise setting with its deformation field.
    NoisePreview(PreviewArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Phantom spec (TOML); command-line values override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: <output-root>/data].
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (TOML); command-line values override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// One of pix2pix, c, c+r, nc, nc+r.
    #[arg(long)]
    mode: Option<ModeKind>,
    /// One of 0..5, na, unpaired.
    #[arg(long)]
    noise: Option<NoiseSetting>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    /// Run directory [default: <output-root>/<mode>_noise<noise>_seed<seed>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use the small desk-scale network sizes.
    #[arg(long)]
    desk: bool,
    /// Draw fresh misalignment every epoch instead of freezing it.
    #[arg(long)]
    redraw_noise: bool,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Output directory [default: <output-root>/report].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PreviewArgs {
    /// Input image (PNG or .rgrf).
    image: PathBuf,
    /// Comma-separated settings.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4,5,na")]
    levels: Vec<NoiseSetting>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Intensity bounds used to map the image into [-1, 1] [default: 0 and 255, or 65535 for 16-bit].
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    range: Option<Vec<f64>>,
    /// Output PNG [default: <output-root>/noise_preview.png].
    #[arg(long)]
    out: Option<PathBuf>,
}

fn write_echo(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = toml::to_string(value).context("serializing config echo")?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

#[derive(Serialize)]
struct SynthEcho<'a> {
    n_train: usize,
    n_test: usize,
    out: &'a Path,
    phantom: PhantomSpec,
}

fn cmd_synth(root: &Path, a: SynthArgs) -> anyhow::Result<()> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| reggan::Error::Io { path: p.clone(), source: e })?;
            toml::from_str(&text).map_err(|e| reggan::Error::Config(format!("{}: {e}", p.display())))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(r) = a.resolution {
        spec.resolution = r;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let out = a.out.clone().unwrap_or_else(|| root.join("data"));
    let manifest = generate_dataset(&spec, a.n_train, a.n_test, &out)?;
    write_echo(&out.join("synth_config.toml"), &SynthEcho { n_train: a.n_train, n_test: a.n_test, out: &out, phantom: spec })?;
    println!("wrote {} train / {} test pairs ({}x{}) to {}", a.n_train, a.n_test, manifest.height, manifest.width, out.display());
    Ok(())
}

fn cmd_train(root: &Path, a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let dataset = a.dataset.clone().ok_or_else(|| reggan::Error::Config("--dataset or --config is required".into()))?;
            let mode = a.mode.ok_or_else(|| reggan::Error::Config("--mode or --config is required".into()))?;
            ExperimentConfig::new(dataset, PathBuf::new(), mode)
        }
    };
    if let Some(d) = a.dataset {
        cfg.dataset = d;
    }
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if let Some(n) = a.noise {
        cfg.noise = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.optimizer.epochs = e;
    }
    if a.desk {
        cfg.nets = NetSpecs::desk();
    }
    if a.redraw_noise {
        cfg.redraw_noise = true;
    }
    if a.resume.is_some() {
        cfg.resume = a.resume;
    }
    if let Some(o) = a.out {
        cfg.output_dir = o;
    } else if a.config.is_none() || cfg.output_dir.as_os_str().is_empty() {
        cfg.output_dir = root.join(format!("{}_noise{}_seed{}", cfg.mode.as_str().replace('+', ""), cfg.noise, cfg.seed));
    }
    eprintln!("training {} (noise {}, seed {}) -> {}", cfg.mode, cfg.noise, cfg.seed, cfg.output_dir.display());
    let out = run_experiment_with(&cfg, |_, r| {
        eprintln!(
            "epoch {:3}  step {:6}  total {:.4}  test PSNR {:.2}  SSIM {:.4}  NMAE {:.4}",
            r.epoch, r.step, r.train_total, r.test_psnr, r.test_ssim, r.test_nmae
        );
    })?;
    let m = &out.report.metrics;
    println!(
        "{}: NMAE {:.4}  PSNR {:.2}  SSIM {:.4}  ({})",
        cfg.mode.label(),
        m.nmae.mean,
        m.psnr.mean,
        m.ssim.mean,
        out.run_dir.display()
    );
    Ok(())
}

fn cmd_report(root: &Path, a: ReportArgs) -> anyhow::Result<()> {
    let out = a.out.clone().unwrap_or_else(|| root.join("report"));
    let runs = report::load_runs(&a.runs)?;
    let summary = report::write_report(&runs, &out)?;
    write_echo(&out.join("report_config.toml"), &a)?;
    print!("{}", summary.table);
    for t in &summary.smoothness {
        println!("{} smoothness vs noise: {}", t.mode.label(), report::monotonicity_note(t));
    }
    println!("wrote {} files to {}", summary.files.len(), out.display());
    Ok(())
}

fn cmd_noise_preview(root: &Path, a: PreviewArgs) -> anyhow::Result<()> {
    let (h, w, raw) = reggan::dataset::read_raster(&a.image)?;
    let (lo, hi) = match &a.range {
        Some(r) => (r[0], r[1]),
        None if a.image.extension().is_some_and(|e| e.eq_ignore_ascii_case(reggan::rawfile::EXTENSION)) => (-1.0, 1.0),
        None if raw.iter().any(|&v| v > 255.0) => (0.0, 65535.0),
        None => (0.0, 255.0),
    };
    let image = reggan::normalize_intensity(&raw, h, w, lo, hi)?;
    let tiles = report::noise_preview(&image, &a.levels, a.seed)?;
    let png = report::preview_png(&tiles)?;
    let out = a.out.clone().unwrap_or_else(|| root.join("noise_preview.png"));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    std::fs::write(&out, png).with_context(|| format!("writing {}", out.display()))?;
    let records: Vec<_> = tiles.iter().map(|t| (t.setting.to_string(), t.transform.clone())).collect();
    let echo_path = out.with_extension("json");
    let echo = serde_json::json!({ "image": a.image, "levels": a.levels, "seed": a.seed, "range": [lo, hi], "transforms": records });
    std::fs::write(&echo_path, serde_json::to_string_pretty(&echo)?).with_context(|| format!("writing {}", echo_path.display()))?;
    println!("wrote {} ({} settings)", out.display(), tiles.len());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<reggan::Error>()).map(reggan::Error::class) {
        Some(ErrorClass::Usage) => EXIT_USAGE,
        Some(ErrorClass::Numeric) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.output_root;
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(&root, a),
        Command::Train(a) => cmd_train(&root, a),
        Command::Report(a) => cmd_report(&root, a),
        Command::NoisePreview(a) => cmd_noise_preview(&root, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
