//! `esa-reid`: dataset generation, training, evaluation, ablations and
//! visualization.
//!
//! Exit status: 0 on success, 1 on runtime errors, 2 on usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use esa_reid::config::{output_root, ExperimentConfig, Variant};
use esa_reid::descfile::DescriptorSet;
use esa_reid::experiment::{ablate_variants, evaluate_sets, run, sweep, write_report, SweepParam, SweepTable};
use esa_reid::model::load_checkpoint;
use esa_reid::synthdata::{generate_dataset, read_image};
use esa_reid::viz::visualize;

#[derive(Parser)]
#[command(name = "esa-reid", version, about = "Entropy-aligned part features for person re-identification")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set mask.tau=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Seed for training (and for the dataset in `gen-data`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; defaults to $ESA_REID_OUT, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData {
        /// Target directory; defaults to `<out>/data-<hash>-s<seed>`.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Train, export descriptors and evaluate.
    Train,
    /// Evaluate exported descriptor files.
    Eval {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        probe: PathBuf,
        /// Where to write the metric files; defaults to the gallery's directory.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Sweep a parameter or compare variants.
    Ablate {
        #[arg(long, requires = "values", conflicts_with = "variants")]
        param: Option<String>,
        #[arg(long, value_delimiter = ',', requires = "param")]
        values: Vec<f64>,
        /// Comma-separated variants (full, g, w, d); empty means all.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        variants: Option<Vec<String>>,
    },
    /// Write parsing, entropy and mask images for each input.
    Viz {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dest: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<esa_reid::Error> for Failure {
    fn from(e: esa_reid::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn print_table(table: &SweepTable, dir: &Path) {
    print!("{}", table.to_tsv());
    println!("written to {}", dir.display());
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let root = output_root(cli.common.out.as_deref());
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::GenData { dest } => {
            if let Some(seed) = cli.common.seed {
                cfg.data.seed = seed;
            }
            let dest = dest.unwrap_or_else(|| root.join(format!("data-{}-s{}", cfg.hash(), cfg.data.seed)));
            let manifest = generate_dataset(&cfg.data, &dest)?;
            manifest.check_split_hygiene()?;
            println!("{} samples written to {}", manifest.entries.len(), dest.display());
        }
        Command::Train => {
            let outcome = run(&cfg, &root)?;
            print!("{}", outcome.report.to_text());
            println!("run directory: {}", outcome.run_dir.display());
        }
        Command::Eval { gallery, probe, dest } => {
            let g = DescriptorSet::read(&gallery)?;
            let p = DescriptorSet::read(&probe)?;
            let report = evaluate_sets(&g, &p, &cfg)?;
            let dest = dest.unwrap_or_else(|| gallery.parent().map(Path::to_path_buf).unwrap_or_default());
            write_report(&report, &dest)?;
            print!("{}", report.to_text());
        }
        Command::Ablate { param, values, variants } => {
            let table = match (param, variants) {
                (Some(p), _) => {
                    let param = SweepParam::parse(&p).map_err(|e| Failure::Usage(e.to_string()))?;
                    sweep(&cfg, param, &values, &root)?
                }
                (None, Some(list)) => {
                    let variants = if list.is_empty() {
                        Variant::ALL.to_vec()
                    } else {
                        list.iter()
                            .map(|v| Variant::parse(v))
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|e| Failure::Usage(e.to_string()))?
                    };
                    ablate_variants(&cfg, &variants, &root)?
                }
                (None, None) => return Err(Failure::Usage("ablate needs --param/--values or --variants".into())),
            };
            print_table(&table, &root);
        }
        Command::Viz { checkpoint, dest, images } => {
            let model = load_checkpoint(&checkpoint)?;
            let inputs = images
                .iter()
                .map(|p| {
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
                    Ok((stem, read_image(p)?))
                })
                .collect::<Result<Vec<_>, esa_reid::Error>>()?;
            let written = visualize(&model, &inputs, cfg.source(), &dest)?;
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
