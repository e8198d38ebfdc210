use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use clgt_core::bev::{panorama_to_bev, BevConfig};
use clgt_core::config::parse_override;
use clgt_core::freq::{cfe_apply, CamConfig};
use clgt_core::gradsuite::{self, SuiteReport, TOLERANCE};
use clgt_core::image::Image;
use clgt_core::pipeline::eval::DEFAULT_CUTOFFS;
use clgt_core::pipeline::{evaluate, load_checkpoint, model_stats, train_on, Dataset, ModelConfig, Recall};
use clgt_core::synth::{generate_dataset, Corruption, SynthConfig};

/// Cross-view geo-localization toolkit.
#[derive(Parser, Debug)]
#[command(name = "clgt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Frequency-domain causal feature extraction.
    #[command(subcommand)]
    Cfe(CfeCommand),
    /// Bird's-eye-view projection.
    #[command(subcommand)]
    Bev(BevCommand),
    /// Synthetic scene generation.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Retrieval recall of a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Parameter and MAC counts of a checkpoint's model.
    Stats(StatsArgs),
}

#[derive(Subcommand, Debug)]
enum CfeCommand {
    /// Randomize the non-causal frequency regions of a PNG.
    Apply(CfeArgs),
}

#[derive(Args, Debug)]
struct CfeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    r1: Option<f64>,
    #[arg(long)]
    r2: Option<f64>,
    #[arg(long)]
    r3: Option<f64>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Perturbation scale below r1.
    #[arg(long)]
    noise_low: Option<f64>,
    /// Perturbation scale in [r2, r3).
    #[arg(long)]
    noise_mid_high: Option<f64>,
    /// Perturbation scale at and above r3.
    #[arg(long)]
    noise_high: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum BevCommand {
    /// Project an equirectangular panorama onto the ground plane.
    Project(BevArgs),
}

#[derive(Args, Debug)]
struct BevArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Output cells per side.
    #[arg(long, default_value_t = 64)]
    grid: usize,
    /// Half-width of the covered square, meters.
    #[arg(long, default_value_t = 20.0)]
    extent: f64,
    /// Camera height above ground, meters.
    #[arg(long, default_value_t = 2.0)]
    height: f64,
}

#[derive(Subcommand, Debug)]
enum SynthCommand {
    /// Write street/aerial/BEV triples and a manifest.
    Generate(SynthArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// `key=value` config file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// `key=value` override applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// gaussian_noise, brightness, fog, snow or motion_blur.
    #[arg(long, value_name = "KIND")]
    corrupt: Option<Corruption>,
    #[arg(long, requires = "corrupt", default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=5))]
    severity: u8,
    /// Comma-separated cutoffs; `N%` is a fraction of the gallery.
    #[arg(long, value_delimiter = ',')]
    k: Vec<Recall>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_name = "NAME", value_parser = clap::builder::PossibleValuesParser::new(gradsuite::modules()))]
    module: Option<String>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

fn cfe(a: &CfeArgs) -> anyhow::Result<()> {
    let mut cam = CamConfig::default();
    for (slot, v) in cam.r_init.iter_mut().zip([a.r1, a.r2, a.r3]) {
        if let Some(v) = v {
            *slot = v;
        }
    }
    for (slot, v) in cam.noise_scale.iter_mut().zip([a.noise_low, a.noise_mid_high, a.noise_high]) {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(k) = a.kappa {
        cam.kappa = k;
    }
    let img = Image::load_png(&a.input)?;
    cfe_apply(&img, &cam, a.seed)?.save_png(&a.out)?;
    Ok(())
}

fn bev(a: &BevArgs) -> anyhow::Result<()> {
    let pano = Image::load_png(&a.input)?;
    let cfg = BevConfig {
        grid_n: a.grid,
        extent_m: a.extent,
        cam_height_m: a.height,
        pano_h: pano.height,
        pano_w: pano.width,
        azimuth_offset_rad: 0.0,
    };
    panorama_to_bev(&pano, &cfg)?.save_png(&a.out)?;
    Ok(())
}

fn synth(a: &SynthArgs) -> anyhow::Result<()> {
    let records = generate_dataset(&a.out, a.count, a.seed, &SynthConfig::default())?;
    println!("wrote {} pairs to {}", records.len(), a.out.display());
    Ok(())
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cfg = ModelConfig::parse(&text).with_context(|| a.config.display().to_string())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    for o in &a.overrides {
        let (k, v) = parse_override(o)?;
        cfg.set(&k, &v)?;
    }
    cfg.validate()?;
    print!("{}", cfg.echo());
    let data = Dataset::load(&a.data, &cfg, None)?;
    let start = Instant::now();
    train_on(&data, &cfg, Some(&a.out), &mut |m| {
        eprintln!(
            "epoch {:>4}  loss {:.4}  main {:.4}  causal {:.4}  geo {:.4}  train R@1 {:.2}  {:.1}s",
            m.epoch,
            m.loss_total,
            m.loss_main,
            m.loss_causal,
            m.loss_geo,
            m.train_r1,
            start.elapsed().as_secs_f64()
        )
    })?;
    Ok(())
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.ckpt)?;
    let corruption = a.corrupt.map(|c| (c, a.severity));
    let data = Dataset::load(&a.data, &ckpt.model.cfg, corruption)?;
    let cutoffs = if a.k.is_empty() { DEFAULT_CUTOFFS.to_vec() } else { a.k.clone() };
    println!("{}", evaluate(&ckpt.model, &data, &cutoffs)?);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> anyhow::Result<bool> {
    let reports = gradsuite::run(a.module.as_deref())?;
    for r in &reports {
        println!("{:<10} {:<20} {:.3e} {}", r.module, r.name, r.max_error, verdict(r.passed()));
    }
    let mut all = true;
    for m in gradsuite::modules() {
        let group: Vec<&SuiteReport> = reports.iter().filter(|r| r.module == m).collect();
        if group.is_empty() {
            continue;
        }
        let worst = group.iter().map(|r| r.max_error).fold(0.0, f64::max);
        let ok = group.iter().all(|r| r.passed());
        all &= ok;
        println!("module {m:<10} max {worst:.3e} {}", verdict(ok));
    }
    println!("tolerance {TOLERANCE:e}");
    Ok(all)
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn stats(a: &StatsArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint::<f32>(&a.ckpt)?;
    let s = model_stats(&ckpt.model.cfg);
    println!("{s}");
    println!("step {}", ckpt.step);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match &cli.command {
        Command::Cfe(CfeCommand::Apply(a)) => cfe(a)?,
        Command::Bev(BevCommand::Project(a)) => bev(a)?,
        Command::Synth(SynthCommand::Generate(a)) => synth(a)?,
        Command::Train(a) => train(a)?,
        Command::Eval(a) => eval(a)?,
        Command::Gradcheck(a) => return gradcheck(a),
        Command::Stats(a) => stats(a)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            // core errors already embed their source in the message
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
