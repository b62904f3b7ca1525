//! Weight statistics, resampling, divergence calculators and CSV output.
//!
//! Weight-space statistics are computed on `exp(log w - c)` with one shared
//! shift `c` (the global maximum), so nothing overflows; variances in the
//! original scale are `exp(2c)` times the reported ones, and correlations are
//! unaffected by the shift.

use std::io::Write;

use rand::distributions::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::logsumexp;
use crate::bounds::BoundReport;
use crate::densities::DiagGaussian;
use crate::error::{check_dim, Error, Result};

/// Columns with shifted-space variance below this get an undefined correlation.
pub const DEGENERATE_VARIANCE: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq)]
pub struct WeightStats {
    pub n_reps: usize,
    pub k: usize,
    /// Mean of the per-repetition bound values.
    pub mean_bound: f64,
    /// Mean and variance of `log w`, where `w = (1/K) sum_j w_j` is the plain
    /// average of the per-index weights (the bound itself for uniform `pi`).
    pub mean_log_w: f64,
    pub var_log_w: f64,
    pub shift: f64,
    pub var_w_shifted: f64,
    pub std_w_shifted: f64,
    /// `corr[i][j]` between `w_i` and `w_j`; `None` for degenerate columns.
    pub corr: Vec<Vec<Option<f64>>>,
    /// Mean of the defined off-diagonal entries.
    pub mean_offdiag_rho: Option<f64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by `n`).
fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
}

impl WeightStats {
    /// From per-repetition bound values and per-index log-weights `log w_j`.
    pub fn from_log_weights(values: &[f64], log_w: &[Vec<f64>]) -> Result<Self> {
        let n = values.len();
        check_dim("repetitions", n, log_w.len())?;
        if n < 2 {
            return Err(Error::InvalidArgument(
                "weight statistics need at least two repetitions".into(),
            ));
        }
        let k = log_w[0].len();
        for row in log_w {
            check_dim("samples per repetition", k, row.len())?;
        }
        let shift = log_w
            .iter()
            .flatten()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if !shift.is_finite() {
            return Err(Error::InvalidArgument("log-weights must be finite".into()));
        }
        let ln_k = (k as f64).ln();
        let log_avg: Vec<f64> = log_w.iter().map(|row| logsumexp(row) - ln_k).collect();
        let w: Vec<f64> = log_avg.iter().map(|v| (v - shift).exp()).collect();
        let var_w_shifted = variance(&w);

        let cols: Vec<Vec<f64>> = (0..k)
            .map(|j| log_w.iter().map(|row| (row[j] - shift).exp()).collect())
            .collect();
        let means: Vec<f64> = cols.iter().map(|c| mean(c)).collect();
        let vars: Vec<f64> = cols.iter().map(|c| variance(c)).collect();
        let mut corr = vec![vec![None; k]; k];
        let mut acc = 0.0;
        let mut count = 0usize;
        for i in 0..k {
            if vars[i] < DEGENERATE_VARIANCE {
                continue;
            }
            corr[i][i] = Some(1.0);
            for j in i + 1..k {
                if vars[j] < DEGENERATE_VARIANCE {
                    continue;
                }
                let cov = cols[i]
                    .iter()
                    .zip(&cols[j])
                    .map(|(a, b)| (a - means[i]) * (b - means[j]))
                    .sum::<f64>()
                    / n as f64;
                let rho = (cov / (vars[i] * vars[j]).sqrt()).clamp(-1.0, 1.0);
                corr[i][j] = Some(rho);
                corr[j][i] = Some(rho);
                acc += 2.0 * rho;
                count += 2;
            }
        }
        Ok(WeightStats {
            n_reps: n,
            k,
            mean_bound: mean(values),
            mean_log_w: mean(&log_avg),
            var_log_w: variance(&log_avg),
            shift,
            var_w_shifted,
            std_w_shifted: var_w_shifted.sqrt(),
            corr,
            mean_offdiag_rho: (count > 0).then(|| acc / count as f64),
        })
    }
}

pub fn weight_stats(reports: &[BoundReport]) -> Result<WeightStats> {
    if let Some(first) = reports.first() {
        for r in reports {
            check_dim("samples per report", first.k(), r.k())?;
        }
    }
    let values: Vec<f64> = reports.iter().map(|r| r.value).collect();
    let log_w: Vec<Vec<f64>> = reports.iter().map(|r| r.log_w.clone()).collect();
    WeightStats::from_log_weights(&values, &log_w)
}

/// One resampled point and the norm of the `z0` it was drawn under.
#[derive(Clone, Debug, PartialEq)]
pub struct SirPoint {
    pub z: Vec<f64>,
    pub z0_norm: Option<f64>,
}

/// Sampling importance resampling over every `(z_j, log pi_j + log w_j)` in
/// the reports, with replacement.
pub fn sir_resample<R: Rng + ?Sized>(
    reports: &[BoundReport],
    n_out: usize,
    rng: &mut R,
) -> Result<Vec<SirPoint>> {
    let mut pool = Vec::new();
    let mut logits = Vec::new();
    for r in reports {
        for j in 0..r.k() {
            let z0_norm = r.z0[j]
                .as_ref()
                .map(|z0| z0.iter().map(|v| v * v).sum::<f64>().sqrt());
            pool.push(SirPoint {
                z: r.samples[j].clone(),
                z0_norm,
            });
            logits.push(r.log_pi[j] + r.log_w[j]);
        }
    }
    let idx = resample_indices(&logits, n_out, rng)?;
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

/// Multinomial draw of `n_out` indices with probabilities `softmax(logits)`.
pub fn resample_indices<R: Rng + ?Sized>(
    logits: &[f64],
    n_out: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n_out == 0 {
        return Err(Error::InvalidArgument("n_out must be at least 1".into()));
    }
    if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::InvalidArgument("resampling weights must not be NaN or +inf".into()));
    }
    let lse = logsumexp(logits);
    if lse == f64::NEG_INFINITY || logits.is_empty() {
        return Err(Error::InvalidArgument("all resampling weights are zero".into()));
    }
    let probs: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    let dist = WeightedIndex::new(&probs)
        .map_err(|e| Error::InvalidArgument(format!("resampling weights: {e}")))?;
    Ok((0..n_out).map(|_| dist.sample(rng)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DivergencePair {
    pub kl_forward: f64,
    pub chi2: f64,
    pub kl_reverse: f64,
}

/// `KL(p || q)` for diagonal Gaussians.
pub fn kl_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    p.mean()
        .iter()
        .zip(p.scale())
        .zip(q.mean().iter().zip(q.scale()))
        .map(|((mp, sp), (mq, sq))| {
            (sq / sp).ln() + (sp * sp + (mp - mq).powi(2)) / (2.0 * sq * sq) - 0.5
        })
        .sum()
}

/// `chi^2(p || q) = E_q[(p/q)^2] - 1`; infinite unless `2 sq^2 > sp^2` in every dimension.
pub fn chi2_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> f64 {
    let mut log_moment = 0.0;
    for ((mp, sp), (mq, sq)) in p
        .mean()
        .iter()
        .zip(p.scale())
        .zip(q.mean().iter().zip(q.scale()))
    {
        let denom = 2.0 * sq * sq - sp * sp;
        if denom <= 0.0 {
            return f64::INFINITY;
        }
        log_moment += (sq * sq / (sp * denom.sqrt())).ln() + (mp - mq).powi(2) / denom;
    }
    log_moment.exp_m1()
}

pub fn gaussian_divergences(p: &DiagGaussian, q: &DiagGaussian) -> Result<DivergencePair> {
    check_dim("gaussian", p.dim(), q.dim())?;
    Ok(DivergencePair {
        kl_forward: kl_gaussian(p, q),
        chi2: chi2_gaussian(p, q),
        kl_reverse: kl_gaussian(q, p),
    })
}

/// `(w ln w, -ln w, w^2 - 1)`.
pub fn f_characteristics(w: f64) -> Result<(f64, f64, f64)> {
    if !(w > 0.0) {
        return Err(Error::InvalidArgument(format!("w must be positive, got {w}")));
    }
    Ok((w * w.ln(), -w.ln(), w * w - 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prop1Row {
    pub sigma: f64,
    pub mean_log_w: f64,
    pub var_log_w: f64,
    /// `log c - mean log w`.
    pub gap: f64,
    /// `gap - var_log_w / 2`, zero in expectation.
    pub excess: f64,
    pub excess_se: f64,
}

/// Lognormal weights `w = exp(mu + sigma eps)` with `mu = ln c - sigma^2 / 2`,
/// so `E[w] = c` for every `sigma`.
pub fn prop1_harness<R: Rng + ?Sized>(
    c: f64,
    sigmas: &[f64],
    n_mc: usize,
    rng: &mut R,
) -> Result<Vec<Prop1Row>> {
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!("c must be positive, got {c}")));
    }
    if n_mc < 2 {
        return Err(Error::InvalidArgument("n_mc must be at least 2".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be nonnegative, got {s}")));
    }
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mu = c.ln() - sigma * sigma / 2.0;
        if sigma == 0.0 {
            rows.push(Prop1Row {
                sigma,
                mean_log_w: c.ln(),
                var_log_w: 0.0,
                gap: 0.0,
                excess: 0.0,
                excess_se: 0.0,
            });
            continue;
        }
        let log_w: Vec<f64> = (0..n_mc)
            .map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let m = mean(&log_w);
        let var = variance(&log_w);
        let m4 = log_w.iter().map(|l| (l - m).powi(4)).sum::<f64>() / n_mc as f64;
        let n = n_mc as f64;
        let gap = c.ln() - m;
        rows.push(Prop1Row {
            sigma,
            mean_log_w: m,
            var_log_w: var,
            gap,
            excess: gap - var / 2.0,
            excess_se: (var / n + (m4 - var * var) / (4.0 * n)).sqrt(),
        });
    }
    Ok(rows)
}

/// One line of the training metrics series.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub bound: f64,
    pub var_log_w: f64,
    pub var_w_shifted: f64,
    pub shift: f64,
    pub mean_offdiag_rho: Option<f64>,
}

impl MetricRow {
    pub fn from_stats(step: u64, stats: &WeightStats) -> Self {
        MetricRow {
            step,
            bound: stats.mean_bound,
            var_log_w: stats.var_log_w,
            var_w_shifted: stats.var_w_shifted,
            shift: stats.shift,
            mean_offdiag_rho: stats.mean_offdiag_rho,
        }
    }
}

/// Seventeen significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_else(|| "undefined".into())
}

fn emit<W: Write>(w: W, header: &[String], rows: Vec<Vec<String>>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header)?;
    for row in rows {
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// `K x K` correlation matrix with a leading index column.
pub fn write_correlation_csv<W: Write>(w: W, stats: &WeightStats) -> Result<()> {
    let mut header = vec!["index".to_string()];
    header.extend((1..=stats.k).map(|j| format!("rho_{j}")));
    let rows = stats
        .corr
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = vec![(i + 1).to_string()];
            r.extend(row.iter().map(|v| fmt_opt(*v)));
            r
        })
        .collect();
    emit(w, &header, rows)
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricRow]) -> Result<()> {
    let header = strings(&[
        "step",
        "bound",
        "var_log_w",
        "var_w_shifted",
        "shift",
        "mean_offdiag_rho",
    ]);
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                fmt_f64(r.bound),
                fmt_f64(r.var_log_w),
                fmt_f64(r.var_w_shifted),
                fmt_f64(r.shift),
                fmt_opt(r.mean_offdiag_rho),
            ]
        })
        .collect();
    emit(w, &header, rows)
}

/// Columns `x, y` for 2D points (`z1..zd` otherwise) plus `z0_norm`.
pub fn write_sir_csv<W: Write>(w: W, points: &[SirPoint]) -> Result<()> {
    let dim = points.first().map_or(2, |p| p.z.len());
    let mut header: Vec<String> = if dim == 2 {
        strings(&["x", "y"])
    } else {
        (1..=dim).map(|i| format!("z{i}")).collect()
    };
    header.push("z0_norm".into());
    let rows = points
        .iter()
        .map(|p| {
            let mut r: Vec<String> = p.z.iter().map(|v| fmt_f64(*v)).collect();
            r.push(fmt_opt(p.z0_norm));
            r
        })
        .collect();
    emit(w, &header, rows)
}

pub fn write_f_sweep_csv<W: Write>(w: W, grid: &[f64]) -> Result<()> {
    let header = strings(&["w", "f_forward", "f_reverse", "f_chi"]);
    let rows = grid
        .iter()
        .map(|&x| {
            let (f, r, c) = f_characteristics(x)?;
            Ok(vec![fmt_f64(x), fmt_f64(f), fmt_f64(r), fmt_f64(c)])
        })
        .collect::<Result<Vec<_>>>()?;
    emit(w, &header, rows)
}

pub fn write_prop1_csv<W: Write>(w: W, rows: &[Prop1Row]) -> Result<()> {
    let header = strings(&[
        "sigma",
        "mean_log_w",
        "var_log_w",
        "gap",
        "half_var_log_w",
        "excess",
        "excess_se",
    ]);
    let rows = rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.sigma),
                fmt_f64(r.mean_log_w),
                fmt_f64(r.var_log_w),
                fmt_f64(r.gap),
                fmt_f64(r.var_log_w / 2.0),
                fmt_f64(r.excess),
                fmt_f64(r.excess_se),
            ]
        })
        .collect();
    emit(w, &header, rows)
}

pub fn write_divergence_csv<W: Write>(w: W, rows: &[(String, DivergencePair)]) -> Result<()> {
    let header = strings(&["pair", "kl_forward", "chi2", "kl_reverse", "kl_le_chi2"]);
    let rows = rows
        .iter()
        .map(|(label, d)| {
            vec![
                label.clone(),
                fmt_f64(d.kl_forward),
                fmt_f64(d.chi2),
                fmt_f64(d.kl_reverse),
                (d.kl_forward <= d.chi2).to_string(),
            ]
        })
        .collect();
    emit(w, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_reports_have_zero_variance_and_undefined_correlation() {
        let values = vec![-1.5; 4];
        let log_w = vec![vec![-1.0, -2.0]; 4];
        let s = WeightStats::from_log_weights(&values, &log_w).unwrap();
        assert_eq!(s.var_log_w, 0.0);
        assert_eq!(s.var_w_shifted, 0.0);
        assert_eq!(s.corr, vec![vec![None, None], vec![None, None]]);
        assert_eq!(s.mean_offdiag_rho, None);
        assert_eq!(s.shift, -1.0);
    }

    #[test]
    fn diagonal_is_one_and_shift_does_not_move_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let log_w: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                vec![a, 0.5 * a + b, -b]
            })
            .collect();
        let values: Vec<f64> = log_w.iter().map(|r| logsumexp(r) - 3f64.ln()).collect();
        let s = WeightStats::from_log_weights(&values, &log_w).unwrap();
        for i in 0..3 {
            assert_eq!(s.corr[i][i], Some(1.0));
            for j in 0..3 {
                assert_eq!(s.corr[i][j], s.corr[j][i]);
            }
        }
        let shifted: Vec<Vec<f64>> =
            log_w.iter().map(|r| r.iter().map(|v| v + 123.0).collect()).collect();
        let sv: Vec<f64> = values.iter().map(|v| v + 123.0).collect();
        let t = WeightStats::from_log_weights(&sv, &shifted).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((s.corr[i][j].unwrap() - t.corr[i][j].unwrap()).abs() < 1e-10);
            }
        }
        assert!((s.var_log_w - t.var_log_w).abs() < 1e-10);
        assert_eq!(t.shift, s.shift + 123.0);
    }

    #[test]
    fn too_few_reports_rejected() {
        assert!(WeightStats::from_log_weights(&[0.0], &[vec![0.0]]).is_err());
        assert!(WeightStats::from_log_weights(&[0.0, 0.0], &[vec![0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn degenerate_weights_pick_the_only_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let idx = resample_indices(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY], 1000, &mut rng)
            .unwrap();
        assert!(idx.iter().all(|i| *i == 0));
        assert!(resample_indices(&[f64::NEG_INFINITY; 3], 5, &mut rng).is_err());
        assert!(resample_indices(&[0.0], 0, &mut rng).is_err());
    }

    #[test]
    fn divergence_examples() {
        let p = DiagGaussian::standard(1);
        let d = gaussian_divergences(&p, &p).unwrap();
        assert_eq!((d.kl_forward, d.chi2, d.kl_reverse), (0.0, 0.0, 0.0));
        // q = N(0, 2) has variance 2.
        let q = DiagGaussian::new(vec![0.0], vec![2f64.sqrt()]).unwrap();
        let d = gaussian_divergences(&p, &q).unwrap();
        assert!((d.kl_forward - 0.096574).abs() < 1e-6);
        assert!((d.chi2 - 0.154701).abs() < 1e-6);
        let q = DiagGaussian::new(vec![0.0], vec![0.4f64.sqrt()]).unwrap();
        let d = gaussian_divergences(&p, &q).unwrap();
        assert_eq!(d.chi2, f64::INFINITY);
        assert!(d.kl_forward.is_finite());
    }

    #[test]
    fn f_characteristic_examples() {
        assert_eq!(f_characteristics(1.0).unwrap(), (0.0, 0.0, 0.0));
        let e = std::f64::consts::E;
        let (f, r, c) = f_characteristics(e).unwrap();
        assert!((f - e).abs() < 1e-15 && (r + 1.0).abs() < 1e-15 && (c - (e * e - 1.0)).abs() < 1e-14);
        let (f, _, c) = f_characteristics(1e6).unwrap();
        assert!(c / f > 1e4);
        assert!(f_characteristics(0.0).is_err());
        assert!(f_characteristics(-1.0).is_err());
    }

    #[test]
    fn prop1_zero_sigma_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = prop1_harness(2.0, &[0.0], 10, &mut rng).unwrap();
        assert_eq!(rows[0].gap, 0.0);
        assert_eq!(rows[0].var_log_w, 0.0);
        assert!(prop1_harness(0.0, &[1.0], 10, &mut rng).is_err());
        assert!(prop1_harness(1.0, &[-1.0], 10, &mut rng).is_err());
    }

    #[test]
    fn csv_formats() {
        let mut buf = Vec::new();
        write_metrics_csv(
            &mut buf,
            &[MetricRow {
                step: 5,
                bound: -1.0,
                var_log_w: 0.25,
                var_w_shifted: 0.1,
                shift: 2.0,
                mean_offdiag_rho: None,
            }],
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "step,bound,var_log_w,var_w_shifted,shift,mean_offdiag_rho\n\
             5,-1.0000000000000000e0,2.5000000000000000e-1,1.0000000000000001e-1,2.0000000000000000e0,undefined\n"
        );
        let v: f64 = fmt_f64(0.1).parse().unwrap();
        assert_eq!(v, 0.1);
    }
}
