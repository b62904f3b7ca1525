//! Run configuration: defaults, then the TOML file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use hiwae::bounds::GradientMode;
use hiwae::proposals::Z0Mode;
use hiwae::trainer::{ProposalKind, SchemeSpec, TrainConfig, VaeBound};
use serde::{Deserialize, Serialize};

/// Experiment-level settings. Each subcommand reads the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    pub target: String,
    pub proposal: ProposalKind,
    /// Whitespace-separated 0/1 rows; a synthetic set is generated when absent.
    pub data: Option<PathBuf>,
    pub n_synthetic: usize,
    pub dim_x: usize,
    pub dim_z: usize,
    pub bound: VaeBound,
    /// `K` of the held-out IWLB after VAE training.
    pub eval_k: usize,
    /// Passes over the data for the final VAE evaluation.
    pub eval_passes: usize,
    pub seeds: u64,
    pub alphas: Vec<SchemeSpec>,
    pub c: f64,
    pub sigmas: Vec<f64>,
    pub n_mc: usize,
    pub random_pairs: usize,
    pub w_min: f64,
    pub w_max: f64,
    pub points: usize,
    pub n_out: usize,
    pub sir_reps: usize,
    pub checkpoint: Option<PathBuf>,
    pub workers: usize,
}

impl Default for Experiment {
    fn default() -> Self {
        Experiment {
            target: "mixture8".into(),
            proposal: ProposalKind::Hierarchical,
            data: None,
            n_synthetic: 100,
            dim_x: 16,
            dim_z: 2,
            bound: VaeBound::Hiwlb,
            eval_k: 10,
            eval_passes: 10,
            seeds: 10,
            alphas: vec![
                SchemeSpec::Power(0.0),
                SchemeSpec::Power(1.0),
                SchemeSpec::Power(3.0),
            ],
            c: 1.0,
            sigmas: vec![1.0, 0.5, 0.1],
            n_mc: 100_000,
            random_pairs: 20,
            w_min: 0.01,
            w_max: 10.0,
            points: 200,
            n_out: 5000,
            sir_reps: 2000,
            checkpoint: None,
            workers: 1,
        }
    }
}

/// The file layout: a `[train]` and an `[experiment]` section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub experiment: Experiment,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| {
            let msg = e.message().replace('\n', " ");
            anyhow::anyhow!("malformed config {}: {msg}", path.display())
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Files referenced by the config must exist before anything runs.
    pub fn check_paths(&self) -> Result<()> {
        for p in [&self.experiment.data, &self.experiment.checkpoint]
            .into_iter()
            .flatten()
        {
            if !p.is_file() {
                bail!("no such file: {}", p.display());
            }
        }
        if self.experiment.workers == 0 {
            bail!("workers must be at least 1");
        }
        Ok(())
    }
}

pub fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct CommonArgs {
    /// TOML file with [train] and [experiment] sections
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (default: $HIWAE_OUT/<subcommand>, or runs/<subcommand>)
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Parallel workers for multi-seed runs; outputs do not depend on it
    #[arg(long)]
    pub workers: Option<usize>,
    /// Only print the final summary
    #[arg(long)]
    pub quiet: bool,
}

/// Overrides for every training setting.
#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    #[arg(long = "K", value_name = "N")]
    pub k: Option<usize>,
    /// Power alpha, `uniform` or `learned`
    #[arg(long, value_name = "R|learned|uniform")]
    pub alpha: Option<SchemeSpec>,
    #[arg(long, value_name = "common|independent")]
    pub z0_mode: Option<Z0Mode>,
    #[arg(long, value_name = "dreg|reparam")]
    pub grad: Option<GradientMode>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub anneal_steps: Option<u64>,
    #[arg(long)]
    pub polyak: Option<f64>,
    #[arg(long)]
    pub free_bits: Option<f64>,
    #[arg(long)]
    pub encoder_updates: Option<u32>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub per_j_r: Option<bool>,
    #[arg(long)]
    pub pi_z_only: Option<bool>,
    #[arg(long)]
    pub emit_every: Option<u64>,
    #[arg(long)]
    pub eval_reps: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

impl TrainArgs {
    pub fn apply(&self, t: &mut TrainConfig) {
        set(&mut t.k, self.k);
        set(&mut t.alpha, self.alpha);
        set(&mut t.z0_mode, self.z0_mode);
        set(&mut t.gradient_mode, self.grad);
        set(&mut t.steps, self.steps);
        set(&mut t.lr, self.lr);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.anneal_steps, self.anneal_steps);
        set(&mut t.polyak, self.polyak);
        set(&mut t.free_bits, self.free_bits);
        set(&mut t.encoder_updates_per_decoder_update, self.encoder_updates);
        set(&mut t.hidden, self.hidden);
        if self.per_j_r.is_some() {
            t.per_j_r = self.per_j_r;
        }
        set(&mut t.pi_z_only, self.pi_z_only);
        set(&mut t.emit_every, self.emit_every);
        set(&mut t.eval_reps, self.eval_reps);
        set(&mut t.clip_norm, self.clip_norm);
    }
}

/// Builds the effective config for one invocation.
pub fn resolve(
    common: &CommonArgs,
    train: Option<&TrainArgs>,
    experiment: impl FnOnce(&mut Experiment),
) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.train.seed, common.seed);
    set(&mut cfg.experiment.workers, common.workers);
    if let Some(t) = train {
        t.apply(&mut cfg.train);
    }
    experiment(&mut cfg.experiment);
    cfg.check_paths()?;
    Ok(cfg)
}
