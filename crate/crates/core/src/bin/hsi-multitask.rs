use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use hsi_multitask::data::{Interleave, SynthConfig};
use hsi_multitask::manifest::RunManifest;
use hsi_multitask::pipeline::{self, RasterKind, RawLayout};
use hsi_multitask::{Error, Result};

/// Multitask CNN training for small-sample hyperspectral classification.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a headerless raw array into a canonical cube or label raster.
    Convert(ConvertArgs),
    /// Generate synthetic multitask scenes plus a ready-to-run manifest.
    Synth(SynthArgs),
    /// Train every (method, samples per class, seed) cell of a manifest.
    Train(RunArgs),
    /// Evaluate trained cells and write the accuracy tables.
    Eval(RunArgs),
    /// Render a classification map from one trained cell.
    Map(MapArgs),
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output data file; the header is written next to it with a `.hdr` extension.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    height: usize,
    #[arg(long)]
    width: usize,
    #[arg(long, default_value_t = 1)]
    bands: usize,
    /// u8, i16, u16, i32, f32, or f64.
    #[arg(long, default_value = "f32")]
    dtype: String,
    /// bsq, bil, or bip.
    #[arg(long, default_value = "bsq")]
    interleave: String,
    #[arg(long)]
    big_endian: bool,
    /// Write a label raster instead of a cube.
    #[arg(long)]
    labels: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// TOML file with synthetic scene settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Serial, bit-reproducible execution.
    #[arg(long)]
    strict: bool,
    /// Invert the band order of this task before training.
    #[arg(long, value_name = "TASK_ID")]
    inverse: Option<String>,
}

#[derive(Args)]
struct MapArgs {
    /// Cell directory, e.g. runs/multitask/n10/seed0.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    task: String,
    /// `class,r,g,b` lines; evenly spaced hues when omitted.
    #[arg(long)]
    palette: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

fn load_manifest(args: &RunArgs) -> Result<RunManifest> {
    let mut m = RunManifest::load(&args.config)?;
    if let Some(seed) = args.seed {
        m = m.with_seed(seed);
    }
    if args.strict {
        m.train.strict_determinism = true;
    }
    if let Some(id) = &args.inverse {
        m.invert_task(id)?;
    }
    m.validate()?;
    Ok(m)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert(a) => {
            let layout = RawLayout {
                height: a.height,
                width: a.width,
                bands: a.bands,
                data_type: pipeline::data_type_code(&a.dtype)?,
                interleave: Interleave::parse(&a.interleave)?,
                big_endian: a.big_endian,
            };
            let kind = if a.labels { RasterKind::Labels } else { RasterKind::Cube };
            let (h, w, c) = pipeline::convert_raw(&a.input, &layout, kind, &a.output)?;
            println!("{}: {h}×{w}×{c}", a.output.display());
        }
        Command::Synth(a) => {
            let mut cfg = match &a.config {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                        path: p.clone(),
                        source: e,
                    })?;
                    toml::from_str::<SynthConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            pipeline::write_synth(&cfg, &a.out)?;
            println!(
                "{} tasks of {}×{}×{} with {} classes ({} shared endmembers) in {}",
                cfg.num_tasks,
                cfg.size,
                cfg.size,
                cfg.bands,
                cfg.classes_per_task,
                cfg.shared_classes(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let m = load_manifest(&a)?;
            let start = Instant::now();
            for cell in pipeline::run_train(&m)? {
                for (net, t) in &cell.times {
                    println!(
                        "{} n={} seed={} [{net}] shared {:.2}s finetune {:.2}s total {:.2}s",
                        cell.method,
                        cell.n_per_class,
                        cell.seed,
                        t.shared.as_secs_f64(),
                        t.finetune.as_secs_f64(),
                        t.total().as_secs_f64()
                    );
                }
            }
            println!("total wall time {:.2}s", start.elapsed().as_secs_f64());
        }
        Command::Eval(a) => {
            let m = load_manifest(&a)?;
            let summary = pipeline::run_eval(&m)?;
            for (task, table) in &summary.tables {
                println!("# {task}\n{table}");
            }
        }
        Command::Map(a) => {
            let (h, w) = pipeline::run_map(&a.run, &a.task, a.palette.as_deref(), &a.output)?;
            println!("{}: {h}×{w}", a.output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
