//! `hiwae`: experiments and diagnostics for hierarchical importance-weighted bounds.

mod config;
mod experiments;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use hiwae::trainer::{ProposalKind, SchemeSpec, VaeBound};

use config::{resolve, set, CommonArgs, Experiment, RunConfig, TrainArgs};
use run::Output;

#[derive(Parser, Debug)]
#[command(name = "hiwae", version, about = "Hierarchical importance-weighted bounds: experiments and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ToyArgs {
    /// ring, mixture8 or crescent
    #[arg(long)]
    target: Option<String>,
    /// hierarchical, gaussian, independent or markov
    #[arg(long)]
    proposal: Option<ProposalKind>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a proposal to a 2D target density
    FitToy {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        toy: ToyArgs,
    },
    /// Train an amortized VAE on binary data
    FitVae {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Whitespace-separated 0/1 rows; synthetic data when omitted
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long)]
        n_synthetic: Option<usize>,
        #[arg(long)]
        dim_x: Option<usize>,
        #[arg(long)]
        dim_z: Option<usize>,
        /// elbo, iwlb or hiwlb
        #[arg(long)]
        bound: Option<VaeBound>,
        /// K of the final IWLB evaluation
        #[arg(long)]
        eval_k: Option<usize>,
        #[arg(long)]
        eval_passes: Option<usize>,
    },
    /// Common against independent z0, several seeds each
    AblateZ0 {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        seeds: Option<u64>,
    },
    /// Compare weighting schemes on one target
    HeuristicSweep {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        toy: ToyArgs,
        #[arg(long)]
        seeds: Option<u64>,
        /// Comma-separated, e.g. 0,1,3,learned
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<SchemeSpec>>,
    },
    /// Lognormal weights: bound gap against half the log-weight variance
    Prop1 {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        c: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
        #[arg(long)]
        n_mc: Option<usize>,
    },
    /// Closed-form KL and chi^2 divergences for Gaussian pairs
    DivergenceTable {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        random_pairs: Option<usize>,
    },
    /// Characteristic functions of the forward, reverse and chi^2 divergences
    FSweep {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        w_min: Option<f64>,
        #[arg(long)]
        w_max: Option<f64>,
        #[arg(long)]
        points: Option<usize>,
    },
    /// Resample from a fitted proposal
    Sir {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        toy: ToyArgs,
        #[arg(long)]
        n_out: Option<usize>,
        #[arg(long)]
        sir_reps: Option<usize>,
        /// Skip training and load this checkpoint
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}

impl ToyArgs {
    fn apply(&self, e: &mut Experiment) {
        set(&mut e.target, self.target.clone());
        set(&mut e.proposal, self.proposal);
    }
}

fn execute(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let (name, common, cfg): (&str, &CommonArgs, RunConfig) = match &cli.command {
        Command::FitToy { common, train, toy } => {
            ("fit-toy", common, resolve(common, Some(train), |e| toy.apply(e))?)
        }
        Command::FitVae {
            common,
            train,
            data,
            n_synthetic,
            dim_x,
            dim_z,
            bound,
            eval_k,
            eval_passes,
        } => {
            let cfg = resolve(common, Some(train), |e| {
                if data.is_some() {
                    e.data = data.clone();
                }
                set(&mut e.n_synthetic, *n_synthetic);
                set(&mut e.dim_x, *dim_x);
                set(&mut e.dim_z, *dim_z);
                set(&mut e.bound, *bound);
                set(&mut e.eval_k, *eval_k);
                set(&mut e.eval_passes, *eval_passes);
            })?;
            ("fit-vae", common, cfg)
        }
        Command::AblateZ0 {
            common,
            train,
            target,
            seeds,
        } => {
            let cfg = resolve(common, Some(train), |e| {
                set(&mut e.target, target.clone());
                set(&mut e.seeds, *seeds);
            })?;
            ("ablate-z0", common, cfg)
        }
        Command::HeuristicSweep {
            common,
            train,
            toy,
            seeds,
            alphas,
        } => {
            let cfg = resolve(common, Some(train), |e| {
                toy.apply(e);
                set(&mut e.seeds, *seeds);
                set(&mut e.alphas, alphas.clone());
            })?;
            ("heuristic-sweep", common, cfg)
        }
        Command::Prop1 {
            common,
            c,
            sigmas,
            n_mc,
        } => {
            let cfg = resolve(common, None, |e| {
                set(&mut e.c, *c);
                set(&mut e.sigmas, sigmas.clone());
                set(&mut e.n_mc, *n_mc);
            })?;
            ("prop1", common, cfg)
        }
        Command::DivergenceTable {
            common,
            random_pairs,
        } => {
            let cfg = resolve(common, None, |e| set(&mut e.random_pairs, *random_pairs))?;
            ("divergence-table", common, cfg)
        }
        Command::FSweep {
            common,
            w_min,
            w_max,
            points,
        } => {
            let cfg = resolve(common, None, |e| {
                set(&mut e.w_min, *w_min);
                set(&mut e.w_max, *w_max);
                set(&mut e.points, *points);
            })?;
            ("f-sweep", common, cfg)
        }
        Command::Sir {
            common,
            train,
            toy,
            n_out,
            sir_reps,
            checkpoint,
        } => {
            let cfg = resolve(common, Some(train), |e| {
                toy.apply(e);
                set(&mut e.n_out, *n_out);
                set(&mut e.sir_reps, *sir_reps);
                if checkpoint.is_some() {
                    e.checkpoint = checkpoint.clone();
                }
            })?;
            ("sir", common, cfg)
        }
    };
    let out = Output::create(common.out.as_deref(), name)?;
    let quiet = common.quiet;
    let lines = match name {
        "fit-toy" => experiments::fit_toy(&cfg, &out, quiet)?,
        "fit-vae" => experiments::fit_vae(&cfg, &out, quiet)?,
        "ablate-z0" => experiments::ablate_z0(&cfg, &out, quiet)?,
        "heuristic-sweep" => experiments::heuristic_sweep(&cfg, &out, quiet)?,
        "prop1" => experiments::prop1(&cfg, &out)?,
        "divergence-table" => experiments::divergence_table(&cfg, &out)?,
        "f-sweep" => experiments::f_sweep(&cfg, &out)?,
        "sir" => experiments::sir(&cfg, &out, quiet)?,
        _ => unreachable!(),
    };
    out.finish(name, &cfg, started)?;
    for l in lines {
        println!("{l}");
    }
    println!("outputs in {}", out.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first}");
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
