//! The subcommands. Each writes CSVs into the output directory and returns
//! summary lines for standard output.

use anyhow::{bail, Context, Result};
use hiwae::densities::{BinaryDataset, DiagGaussian, TargetDensity};
use hiwae::diagnostics::{
    fmt_f64, gaussian_divergences, prop1_harness, sir_resample, weight_stats,
    write_correlation_csv, write_divergence_csv, write_f_sweep_csv, write_metrics_csv,
    write_prop1_csv, write_sir_csv, MetricRow, WeightStats,
};
use hiwae::params::ParamStore;
use hiwae::proposals::{mean_pairwise_distance, Z0Mode};
use hiwae::rng::{stream, TAG_MC, TAG_SIR};
use hiwae::trainer::{
    Checkpoint, FitProblem, Problem, ProposalKind, SchemeSpec, ToyProposal, TrainConfig, Trainer,
    VaeBound, VaeProblem,
};
use rand::Rng;

use crate::config::{Experiment, RunConfig};
use crate::run::{parallel_map, Output};

/// Stream tags private to the runner.
const TAG_SYNTHETIC: u64 = 100;
const TAG_FINAL: u64 = 101;
const TAG_PAIRS: u64 = 102;

fn progress(label: &str, quiet: bool) -> impl FnMut(&MetricRow) + '_ {
    move |m| {
        if !quiet {
            eprintln!(
                "{label}step {} bound {:.4} var_log_w {:.4}",
                m.step, m.bound, m.var_log_w
            );
        }
    }
}

fn write_checkpoint<P: Problem>(t: &Trainer<P>, out: &Output, rel: &str) -> Result<()> {
    t.checkpoint().save(&out.path(rel)?)?;
    Ok(())
}

struct ToyResult {
    last: MetricRow,
    stats: WeightStats,
    spread: Option<f64>,
}

type ToyTrainer = Trainer<FitProblem<TargetDensity>>;

fn toy_trainer(cfg: &TrainConfig, exp: &Experiment, kind: ProposalKind) -> Result<ToyTrainer> {
    let target = TargetDensity::by_name(&exp.target)?;
    let mut store = ParamStore::new();
    let problem = FitProblem::new(target, kind, cfg, &mut store)?;
    Ok(Trainer::new(cfg.clone(), problem, store)?)
}

/// Mean pairwise distance of the head means at the mean of `q0`.
fn head_spread(t: &ToyTrainer) -> Result<Option<f64>> {
    match &t.problem.proposal {
        ToyProposal::Hierarchical(h) => {
            let z0 = h.base_mean(&t.store, None)?;
            Ok(Some(mean_pairwise_distance(&h.head_means(&t.store, &z0, None)?)))
        }
        _ => Ok(None),
    }
}

/// Trains one toy run and writes `metrics.csv`, `correlation.csv` and
/// `checkpoint.json` under `prefix`.
fn run_toy(
    cfg: &TrainConfig,
    exp: &Experiment,
    kind: ProposalKind,
    out: &Output,
    prefix: &str,
    quiet: bool,
) -> Result<(ToyTrainer, ToyResult)> {
    let mut t = toy_trainer(cfg, exp, kind)?;
    t.run(progress(prefix, quiet))?;
    let reports = t.evaluate(&t.store, cfg.eval_reps, t.step)?;
    let stats = weight_stats(&reports)?;
    write_metrics_csv(out.file(&format!("{prefix}metrics.csv"))?, &t.metrics)?;
    write_correlation_csv(out.file(&format!("{prefix}correlation.csv"))?, &stats)?;
    write_checkpoint(&t, out, &format!("{prefix}checkpoint.json"))?;
    let last = t.metrics.last().cloned().context("no metrics recorded")?;
    let spread = head_spread(&t)?;
    Ok((t, ToyResult { last, stats, spread }))
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_else(|| "undefined".into())
}

fn write_rows(out: &Output, rel: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out.file(rel)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn summary_row(key: String, seed: u64, r: &ToyResult) -> Vec<String> {
    vec![
        key,
        seed.to_string(),
        fmt_f64(r.last.bound),
        fmt_f64(r.last.var_log_w),
        opt(r.stats.mean_offdiag_rho),
        opt(r.spread),
    ]
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    (xs[n / 2] + xs[(n - 1) / 2]) / 2.0
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn fit_toy(cfg: &RunConfig, out: &Output, quiet: bool) -> Result<Vec<String>> {
    let (_, r) = run_toy(&cfg.train, &cfg.experiment, cfg.experiment.proposal, out, "", quiet)?;
    Ok(vec![format!(
        "final bound {:.6} var_log_w {:.6} mean_offdiag_rho {}",
        r.last.bound,
        r.last.var_log_w,
        r.stats
            .mean_offdiag_rho
            .map_or("undefined".into(), |v| format!("{v:.6}"))
    )])
}

fn check_seeds(exp: &Experiment) -> Result<()> {
    if exp.seeds == 0 {
        bail!("seeds must be at least 1");
    }
    Ok(())
}

pub fn ablate_z0(cfg: &RunConfig, out: &Output, quiet: bool) -> Result<Vec<String>> {
    let exp = &cfg.experiment;
    check_seeds(exp)?;
    let modes = [Z0Mode::Common, Z0Mode::Independent];
    let jobs: Vec<(Z0Mode, u64)> = modes
        .iter()
        .flat_map(|m| (0..exp.seeds).map(move |s| (*m, cfg.train.seed + s)))
        .collect();
    let results = parallel_map(jobs.clone(), exp.workers, |(mode, seed)| {
        let train = TrainConfig {
            seed: *seed,
            z0_mode: *mode,
            ..cfg.train.clone()
        };
        let prefix = format!("{}/seed_{seed}/", mode_name(*mode));
        let (_, r) = run_toy(&train, exp, ProposalKind::Hierarchical, out, &prefix, quiet)?;
        Ok(r)
    })?;
    let rows: Vec<Vec<String>> = jobs
        .iter()
        .zip(&results)
        .map(|((m, s), r)| summary_row(mode_name(*m).into(), *s, r))
        .collect();
    write_rows(
        out,
        "summary.csv",
        &["z0_mode", "seed", "bound", "var_log_w", "mean_offdiag_rho", "spread"],
        &rows,
    )?;
    let mut lines = Vec::new();
    for mode in modes {
        let picked: Vec<&ToyResult> = jobs
            .iter()
            .zip(&results)
            .filter(|((m, _), _)| *m == mode)
            .map(|(_, r)| r)
            .collect();
        let vars = picked.iter().map(|r| r.last.var_log_w).collect();
        let rhos: Vec<f64> = picked.iter().filter_map(|r| r.stats.mean_offdiag_rho).collect();
        let bounds: Vec<f64> = picked.iter().map(|r| r.last.bound).collect();
        lines.push(format!(
            "{}: median var_log_w {:.6} mean rho {:.6} mean bound {:.6}",
            mode_name(mode),
            median(vars),
            mean(&rhos),
            mean(&bounds)
        ));
    }
    Ok(lines)
}

fn mode_name(m: Z0Mode) -> &'static str {
    match m {
        Z0Mode::Common => "common",
        Z0Mode::Independent => "independent",
    }
}

pub fn heuristic_sweep(cfg: &RunConfig, out: &Output, quiet: bool) -> Result<Vec<String>> {
    let exp = &cfg.experiment;
    check_seeds(exp)?;
    if exp.alphas.is_empty() {
        bail!("alphas must not be empty");
    }
    let jobs: Vec<(SchemeSpec, u64)> = exp
        .alphas
        .iter()
        .flat_map(|a| (0..exp.seeds).map(move |s| (*a, cfg.train.seed + s)))
        .collect();
    let results = parallel_map(jobs.clone(), exp.workers, |(alpha, seed)| {
        let train = TrainConfig {
            seed: *seed,
            alpha: *alpha,
            ..cfg.train.clone()
        };
        let prefix = format!("alpha_{alpha}/seed_{seed}/");
        let (_, r) = run_toy(&train, exp, exp.proposal, out, &prefix, quiet)?;
        Ok(r)
    })?;
    let rows: Vec<Vec<String>> = jobs
        .iter()
        .zip(&results)
        .map(|((a, s), r)| summary_row(a.to_string(), *s, r))
        .collect();
    write_rows(
        out,
        "summary.csv",
        &["alpha", "seed", "bound", "var_log_w", "mean_offdiag_rho", "spread"],
        &rows,
    )?;
    Ok(exp
        .alphas
        .iter()
        .map(|a| {
            let picked: Vec<&ToyResult> = jobs
                .iter()
                .zip(&results)
                .filter(|((b, _), _)| b == a)
                .map(|(_, r)| r)
                .collect();
            let bounds: Vec<f64> = picked.iter().map(|r| r.last.bound).collect();
            let spreads: Vec<f64> = picked.iter().filter_map(|r| r.spread).collect();
            let spread = if spreads.is_empty() {
                "undefined".to_string()
            } else {
                format!("{:.4}", mean(&spreads))
            };
            format!(
                "alpha {a}: mean bound {:.6} mean spread {spread}",
                mean(&bounds)
            )
        })
        .collect())
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, (v / n).sqrt())
}

pub fn fit_vae(cfg: &RunConfig, out: &Output, quiet: bool) -> Result<Vec<String>> {
    let exp = &cfg.experiment;
    let train = &cfg.train;
    let data = match &exp.data {
        Some(p) => BinaryDataset::load(p)?,
        None => {
            if exp.n_synthetic == 0 || exp.dim_x == 0 {
                bail!("n_synthetic and dim_x must be at least 1");
            }
            let mut rng = stream(&[train.seed, TAG_SYNTHETIC]);
            let d = BinaryDataset::synthetic(exp.n_synthetic, exp.dim_x, &mut rng);
            std::fs::write(out.path("data.txt")?, d.to_text())?;
            d
        }
    };
    if exp.dim_z == 0 || exp.eval_k == 0 || exp.eval_passes == 0 {
        bail!("dim_z, eval_k and eval_passes must be at least 1");
    }
    let mut store = ParamStore::new();
    let problem = VaeProblem::new(data, exp.dim_z, exp.bound, train, &mut store)?;
    let mut t = Trainer::new(train.clone(), problem, store)?;
    t.run(progress("", quiet))?;
    write_metrics_csv(out.file("metrics.csv")?, &t.metrics)?;
    write_checkpoint(&t, out, "checkpoint.json")?;

    let polyak = t.polyak_store();
    let mut evals: Vec<(VaeBound, &str, &ParamStore, usize)> = Vec::new();
    match exp.bound {
        VaeBound::Hiwlb => {
            evals.push((VaeBound::Hiwlb, "live", &t.store, train.k));
            evals.push((VaeBound::Hiwlb, "polyak", &polyak, train.k));
        }
        _ => {
            evals.push((VaeBound::Elbo, "live", &t.store, 1));
            evals.push((VaeBound::Iwlb, "polyak", &polyak, exp.eval_k));
        }
    }
    let n = t.problem.data.len();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (i, (kind, label, params, k)) in evals.iter().enumerate() {
        let mut values = Vec::with_capacity(n * exp.eval_passes);
        for pass in 0..exp.eval_passes {
            for item in 0..n {
                let mut rng = stream(&[train.seed, TAG_FINAL, i as u64, pass as u64, item as u64]);
                values.push(t.problem.evaluate(params, *kind, *k, item, &mut rng)?);
            }
        }
        let (m, se) = mean_se(&values);
        let name = format!("{kind:?}").to_lowercase();
        rows.push(vec![
            name.clone(),
            label.to_string(),
            k.to_string(),
            fmt_f64(m),
            fmt_f64(se),
            values.len().to_string(),
        ]);
        lines.push(format!("{name} K={k} ({label} parameters): {m:.4} +- {se:.4}"));
    }
    write_rows(out, "eval.csv", &["bound", "params", "k", "mean", "se", "n"], &rows)?;
    Ok(lines)
}

pub fn sir(cfg: &RunConfig, out: &Output, quiet: bool) -> Result<Vec<String>> {
    let exp = &cfg.experiment;
    if exp.sir_reps < 2 || exp.n_out == 0 {
        bail!("sir_reps must be at least 2 and n_out at least 1");
    }
    let t = match &exp.checkpoint {
        Some(p) => {
            let mut t = toy_trainer(&cfg.train, exp, exp.proposal)?;
            t.restore(Checkpoint::load(p)?)
                .with_context(|| format!("checkpoint {} does not fit this config", p.display()))?;
            t
        }
        None => run_toy(&cfg.train, exp, exp.proposal, out, "", quiet)?.0,
    };
    let reports = t.evaluate(&t.store, exp.sir_reps, u64::MAX)?;
    let mut rng = stream(&[cfg.train.seed, TAG_SIR]);
    let points = sir_resample(&reports, exp.n_out, &mut rng)?;
    write_sir_csv(out.file("sir.csv")?, &points)?;
    Ok(vec![format!(
        "resampled {} points from {} draws of K = {}",
        points.len(),
        reports.len(),
        cfg.train.k
    )])
}

pub fn prop1(cfg: &RunConfig, out: &Output) -> Result<Vec<String>> {
    let exp = &cfg.experiment;
    let mut rng = stream(&[cfg.train.seed, TAG_MC]);
    let rows = prop1_harness(exp.c, &exp.sigmas, exp.n_mc, &mut rng)?;
    write_prop1_csv(out.file("prop1.csv")?, &rows)?;
    Ok(rows
        .iter()
        .map(|r| {
            format!(
                "sigma {}: gap {:.6} var_log_w/2 {:.6} excess {:.2e} +- {:.2e}",
                r.sigma,
                r.gap,
                r.var_log_w / 2.0,
                r.excess,
                r.excess_se
            )
        })
        .collect())
}

pub fn divergence_table(cfg: &RunConfig, out: &Output) -> Result<Vec<String>> {
    let g = |m: f64, s: f64| DiagGaussian::new(vec![m], vec![s]);
    let mut pairs = vec![
        ("N(0,1)|N(0,sqrt2)".to_string(), g(0.0, 1.0)?, g(0.0, 2f64.sqrt())?),
        ("N(0,1)|N(1,1)".to_string(), g(0.0, 1.0)?, g(1.0, 1.0)?),
        ("N(0,1)|N(0,0.8)".to_string(), g(0.0, 1.0)?, g(0.0, 0.8)?),
        ("N(0,1)|N(0,0.6)".to_string(), g(0.0, 1.0)?, g(0.0, 0.6)?),
    ];
    let mut rng = stream(&[cfg.train.seed, TAG_PAIRS]);
    for i in 0..cfg.experiment.random_pairs {
        let d = rng.gen_range(1..=4);
        let mut draw = |lo: f64, hi: f64| (0..d).map(|_| rng.gen_range(lo..hi)).collect();
        let (mp, sp, mq, sq) = (draw(-2.0, 2.0), draw(0.3, 3.0), draw(-2.0, 2.0), draw(0.3, 3.0));
        pairs.push((
            format!("random_{i}"),
            DiagGaussian::new(mp, sp)?,
            DiagGaussian::new(mq, sq)?,
        ));
    }
    let rows = pairs
        .iter()
        .map(|(label, p, q)| Ok((label.clone(), gaussian_divergences(p, q)?)))
        .collect::<Result<Vec<_>>>()?;
    write_divergence_csv(out.file("divergence.csv")?, &rows)?;
    let violations = rows
        .iter()
        .filter(|(_, d)| d.chi2.is_finite() && d.kl_forward > d.chi2)
        .count();
    let infinite = rows.iter().filter(|(_, d)| d.chi2.is_infinite()).count();
    Ok(vec![format!(
        "{} pairs, {infinite} with infinite chi2, {violations} with KL > chi2",
        rows.len()
    )])
}

pub fn f_sweep(cfg: &RunConfig, out: &Output) -> Result<Vec<String>> {
    let exp = &cfg.experiment;
    if !(exp.w_min > 0.0 && exp.w_max > exp.w_min) || exp.points < 2 {
        bail!("need 0 < w_min < w_max and at least 2 points");
    }
    let (a, b) = (exp.w_min.ln(), exp.w_max.ln());
    let last = (exp.points - 1) as f64;
    let grid: Vec<f64> = (0..exp.points)
        .map(|i| (a + (b - a) * i as f64 / last).exp())
        .collect();
    write_f_sweep_csv(out.file("f_sweep.csv")?, &grid)?;
    Ok(vec![format!(
        "{} points on [{}, {}]",
        grid.len(),
        exp.w_min,
        exp.w_max
    )])
}
