//! Command-line surface: synthetic dataset generation, training, evaluation,
//! inference, cost accounting, and receptive-field maps.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 runtime/numeric
//! error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lcrnet::config::{format_config, parse_config_text};
use lcrnet::data::{
    emit_synth_dataset, load_split, parse_manifest, read_pgm, write_pgm, Pgm, Sample, Split,
    SynthParams,
};
use lcrnet::error::Error;
use lcrnet::net::{build_model, load_checkpoint, segment, LcrNet};
use lcrnet::tensor::Tensor;
use lcrnet::train::{evaluate, train, TrainConfig};

#[derive(Parser)]
#[command(name = "lcrnet", version, about = "Small-target segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (PGM images + masks + manifest).
    Synth(SynthArgs),
    /// Train on a manifest's train split, validating on its val split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Run a checkpoint on one PGM image; write confidence and mask rasters.
    Infer(InferArgs),
    /// Print the per-module trainable-parameter table.
    CountParams(ConfigOnlyArgs),
    /// Print the per-module conv-FLOP table at a given resolution.
    CountFlops(CountFlopsArgs),
    /// Write the normalized effective-receptive-field map as 16-bit PGM.
    Erf(ErfArgs),
    /// Print the full configuration (defaults overlaid with --config).
    ShowConfig(ConfigOnlyArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images, masks, and manifest.csv.
    #[arg(long)]
    out: PathBuf,
    /// Number of training scenes.
    #[arg(long, default_value_t = 200)]
    train: usize,
    /// Number of validation scenes.
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    targets_min: usize,
    #[arg(long, default_value_t = 3)]
    targets_max: usize,
    #[arg(long, default_value_t = 0.8)]
    sigma_min: f64,
    #[arg(long, default_value_t = 2.0)]
    sigma_max: f64,
    #[arg(long, default_value_t = 3.0)]
    scr_min: f64,
    #[arg(long, default_value_t = 8.0)]
    scr_max: f64,
    #[arg(long, default_value_t = 4)]
    octaves: usize,
    #[arg(long, default_value_t = 0.01)]
    noise_sigma: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest path.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint.bin and log.csv.
    #[arg(long)]
    out: PathBuf,
    /// Configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which manifest split to evaluate.
    #[arg(long, default_value = "val")]
    split: String,
    /// Optional directory for metrics.csv and summary.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    /// When given, its network section must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input PGM image.
    #[arg(long)]
    input: PathBuf,
    /// Output confidence map (16-bit PGM).
    #[arg(long)]
    conf: PathBuf,
    /// Output binary mask (8-bit PGM).
    #[arg(long)]
    mask: PathBuf,
}

#[derive(Args)]
struct ConfigOnlyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CountFlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
}

#[derive(Args)]
struct ErfArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output PGM path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    size: usize,
    /// Model initialization seed (the probe input derives from it).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) | Error::Io(_) => 2,
        _ => 1,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<TrainConfig, Error> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            parse_config_text(&text)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn load_manifest_split(manifest: &Path, split: Split) -> Result<Vec<Sample<f32>>, Error> {
    let text = std::fs::read_to_string(manifest)?;
    let entries = parse_manifest(&text)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    load_split(base, &entries, split)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(a) => {
            let params = SynthParams {
                size: a.size,
                n_targets: (a.targets_min, a.targets_max),
                sigma: (a.sigma_min, a.sigma_max),
                scr_target: (a.scr_min, a.scr_max),
                clutter_octaves: a.octaves,
                noise_sigma: a.noise_sigma,
                seed: a.seed,
                ..SynthParams::default()
            };
            let entries = emit_synth_dataset(&a.out, &params, a.train, a.val)?;
            println!(
                "wrote {} scenes ({} train, {} val) to {}",
                entries.len(),
                a.train,
                a.val,
                a.out.display()
            );
        }
        Command::Train(a) => {
            let cfg = load_config(&a.config)?;
            let train_set = load_manifest_split(&a.data, Split::Train)?;
            let val_set = load_manifest_split(&a.data, Split::Val)?;
            let outcome = train(&cfg, &train_set, &val_set, Some(&a.out))?;
            println!(
                "done: best val IoU {:.4} at epoch {}; checkpoint and log in {}",
                outcome.best_val_iou,
                outcome.best_epoch,
                a.out.display()
            );
        }
        Command::Eval(a) => {
            let split = Split::parse(&a.split)
                .ok_or_else(|| Error::Usage(format!("unknown split '{}'", a.split)))?;
            let bytes = std::fs::read(&a.checkpoint)?;
            let model: LcrNet<f32> = load_checkpoint(&bytes)?;
            if let Some(cfg_path) = &a.config {
                let cfg = load_config(&Some(cfg_path.clone()))?;
                if cfg.net != model.cfg {
                    return Err(Error::Validation(
                        "checkpoint network config does not match --config".into(),
                    ));
                }
            }
            let samples = load_manifest_split(&a.data, split)?;
            let report = evaluate(&model, &samples)?;
            print!("{}", report.summary_text());
            if let Some(dir) = a.out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
                std::fs::write(dir.join("summary.txt"), report.summary_text())?;
                println!("reports written to {}", dir.display());
            }
        }
        Command::Infer(a) => {
            let bytes = std::fs::read(&a.checkpoint)?;
            let model: LcrNet<f32> = load_checkpoint(&bytes)?;
            let pgm = read_pgm(&std::fs::read(&a.input)?)?;
            let image: Tensor<f32> = pgm.to_tensor();
            let conf = model.forward(&image)?;
            std::fs::write(&a.conf, write_pgm(&Pgm::from_unit_map(&conf)?))?;
            let masks = segment(&conf, model.cfg.threshold)?;
            std::fs::write(&a.mask, write_pgm(&Pgm::from_mask(&masks[0])))?;
            let positive = masks[0].count_ones();
            println!("wrote confidence and mask ({positive} positive pixels)");
        }
        Command::CountParams(a) => {
            let cfg = load_config(&a.config)?;
            let model = build_model::<f32>(&cfg.net, cfg.seed)?;
            print!("{}", model.count_params());
        }
        Command::CountFlops(a) => {
            let cfg = load_config(&a.config)?;
            let model = build_model::<f32>(&cfg.net, cfg.seed)?;
            let report = model.count_flops(a.height, a.width)?;
            print!("{report}");
        }
        Command::Erf(a) => {
            let cfg = load_config(&a.config)?;
            let model = build_model::<f32>(&cfg.net, a.seed)?;
            let probe = lcrnet::data::seeded_unit_image::<f32>(a.size, a.seed + 1);
            let map = model.erf_map(&probe)?;
            std::fs::write(&a.out, write_pgm(&Pgm::from_unit_map(&map)?))?;
            let inside = central_mass_fraction(&map);
            println!(
                "wrote {}x{} receptive-field map; central half-window mass {:.3}",
                a.size,
                a.size,
                inside
            );
        }
        Command::ShowConfig(a) => {
            let cfg = load_config(&a.config)?;
            print!("{}", format_config(&cfg));
        }
    }
    Ok(())
}

/// Fraction of total map mass inside the centered (h/2, w/2) window.
fn central_mass_fraction(map: &Tensor<f32>) -> f64 {
    let s = map.shape();
    let total: f64 = map.data().iter().map(|&v| v as f64).sum();
    if total == 0.0 {
        return 0.0;
    }
    let (h0, h1) = (s.h / 4, s.h / 4 + s.h / 2);
    let (w0, w1) = (s.w / 4, s.w / 4 + s.w / 2);
    let mut inside = 0.0;
    for y in h0..h1 {
        for x in w0..w1 {
            inside += map.at(0, 0, y, x) as f64;
        }
    }
    inside / total
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
