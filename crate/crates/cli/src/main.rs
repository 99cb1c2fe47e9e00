use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};
use ptyff::evalkit::SweepParameter;
use ptyff_cli::commands::{self, Invocation};
use ptyff_cli::config::{resolve_threads, CliConfig};
use ptyff_cli::{exit_code, pipeline};

/// Ptychographic reconstruction with a learned fast-forward operator.
#[derive(Parser, Debug)]
#[command(name = "ptyff", version, about)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (overrides PTYFF_THREADS); 1 is bitwise deterministic.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset with ground truth.
    Simulate {
        /// Texture seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Mean photons per pattern (Poisson noise); omit for noiseless data.
        #[arg(long)]
        photons: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a dataset, optionally inserting an operator.
    Reconstruct {
        dataset: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        /// Insertion iteration, or `none`.
        #[arg(long)]
        i_ml: Option<String>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Weights directory, or `none`.
        #[arg(long, default_value = "none")]
        operator: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated snapshot iterations.
        #[arg(long, value_delimiter = ',')]
        snapshots: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cut co-located snapshot patches from reconstruction runs.
    BuildPairs {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        n_patches: Option<usize>,
        #[arg(long)]
        input_iteration: Option<usize>,
        #[arg(long)]
        target_iteration: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the fast-forward operator on a pair store.
    TrainFf {
        pairs: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        c_base: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an operator run against its baseline.
    Evaluate {
        baseline: PathBuf,
        ml: PathBuf,
        #[arg(long)]
        i_ref: Option<usize>,
        #[arg(long)]
        epsilon_fraction: Option<f64>,
        /// Pixels cropped from every side of the difference maps.
        #[arg(long, default_value_t = 0)]
        crop: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convergence iteration as a function of one engine parameter.
    Sweep {
        dataset: PathBuf,
        /// One of i_ml, lr, batch_size.
        #[arg(long)]
        parameter: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        operator: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run values on parallel workers.
        #[arg(long)]
        concurrent: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full chain from one master seed.
    Pipeline {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        datasets: Option<usize>,
        #[arg(long)]
        held_out: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration as JSON.
    Config,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_i_ml(s: &str) -> Result<Option<usize>> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    match s.parse() {
        Ok(v) => Ok(Some(v)),
        Err(_) => bail!("--i-ml expects an iteration or `none`, got `{s}`"),
    }
}

fn execute(cli: Cli, cfg: &mut CliConfig) -> Result<()> {
    let ctx = Invocation {
        command: std::env::args().collect(),
        quiet: cli.quiet,
    };
    match cli.command {
        Command::Simulate { seed, photons, out } => {
            set(&mut cfg.sim.texture_seed, seed);
            if photons.is_some() {
                cfg.sim.photons_per_pattern = photons;
            }
            commands::simulate(&cfg.sim, &out, &ctx)?;
        }
        Command::Reconstruct {
            dataset,
            iterations,
            i_ml,
            batch_size,
            lr,
            operator,
            seed,
            snapshots,
            out,
        } => {
            let e = &mut cfg.engine;
            set(&mut e.iterations, iterations);
            set(&mut e.i_ml, i_ml.as_deref().map(parse_i_ml).transpose()?);
            set(&mut e.batch_size, batch_size);
            set(&mut e.lr_schedule.base_lr, lr);
            set(&mut e.rng_seed, seed);
            set(&mut e.snapshot_iterations, snapshots);
            let op = (!operator.eq_ignore_ascii_case("none")).then(|| PathBuf::from(&operator));
            if op.is_none() && i_ml.is_none() {
                e.i_ml = None;
            }
            commands::reconstruct(&dataset, e, op.as_deref(), &out, &ctx)?;
        }
        Command::BuildPairs {
            runs,
            patch_size,
            n_patches,
            input_iteration,
            target_iteration,
            seed,
            out,
        } => {
            let t = &mut cfg.train;
            set(&mut t.patch_size, patch_size);
            set(&mut t.patches_per_dataset, n_patches);
            set(&mut t.input_iteration, input_iteration);
            set(&mut t.target_iteration, target_iteration);
            set(&mut t.rng_seed, seed);
            t.validate(&cfg.unet)?;
            commands::build_pairs(&runs, t, &out, &ctx)?;
        }
        Command::TrainFf {
            pairs,
            epochs,
            batch_size,
            lr,
            seed,
            depth,
            c_base,
            out,
        } => {
            let t = &mut cfg.train;
            set(&mut t.epochs, epochs);
            set(&mut t.batch_size, batch_size);
            set(&mut t.lr, lr);
            set(&mut t.rng_seed, seed);
            set(&mut cfg.unet.depth, depth);
            set(&mut cfg.unet.c_base, c_base);
            cfg.unet.validate()?;
            commands::train_ff(&pairs, &cfg.train, &cfg.unet, &out, &ctx)?;
        }
        Command::Evaluate {
            baseline,
            ml,
            i_ref,
            epsilon_fraction,
            crop,
            out,
        } => {
            set(&mut cfg.eval.i_ref, i_ref);
            set(&mut cfg.eval.epsilon_fraction, epsilon_fraction);
            cfg.eval.validate()?;
            commands::evaluate(&baseline, &ml, &cfg.eval, crop, &out, &ctx)?;
        }
        Command::Sweep {
            dataset,
            parameter,
            values,
            operator,
            iterations,
            seed,
            concurrent,
            out,
        } => {
            let parameter: SweepParameter = parameter.parse()?;
            set(&mut cfg.engine.iterations, iterations);
            set(&mut cfg.engine.rng_seed, seed);
            commands::sweep_command(&dataset, parameter, &values, &cfg.engine, &operator, &cfg.eval, concurrent, &out, &ctx)?;
        }
        Command::Pipeline {
            seed,
            datasets,
            held_out,
            epochs,
            out,
        } => {
            set(&mut cfg.pipeline.seed, seed);
            set(&mut cfg.pipeline.datasets, datasets);
            set(&mut cfg.pipeline.held_out, held_out);
            set(&mut cfg.train.epochs, epochs);
            let summary = pipeline::run_pipeline(cfg, &out, &ctx)?;
            print!("{}", summary.to_text());
        }
        Command::Config => println!("{}", serde_json::to_string_pretty(cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match CliConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    match resolve_threads(cli.threads, cfg.engine.threads) {
        Ok(n) => cfg.engine.threads = n,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    }
    match execute(cli, &mut cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
