//! Weight statistics, resampling and divergence calculators against oracles.

use hiwae::bounds::{iwlb, BoundSettings};
use hiwae::densities::{ConjugateGaussianModel, DiagGaussian};
use hiwae::diagnostics::{
    chi2_gaussian, gaussian_divergences, kl_gaussian, prop1_harness, resample_indices,
    sir_resample, WeightStats,
};
use hiwae::params::{Graph, ParamStore};
use hiwae::proposals::JointNoise;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    s * h / 3.0
}

fn ln_pdf(x: f64, m: f64, s: f64) -> f64 {
    -(x - m).powi(2) / (2.0 * s * s) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn pdf(x: f64, m: f64, s: f64) -> f64 {
    ln_pdf(x, m, s).exp()
}

/// `KL(N(0, sp) || N(0, sq))` by quadrature over `[-l, l]`.
fn kl_quad(sp: f64, sq: f64, l: f64) -> f64 {
    simpson(|x| pdf(x, 0.0, sp) * (ln_pdf(x, 0.0, sp) - ln_pdf(x, 0.0, sq)), -l, l, 40_000)
}

#[test]
fn spot_divergences_match_quadrature() {
    let p = DiagGaussian::standard(1);
    let sq = 2f64.sqrt();
    let q = DiagGaussian::new(vec![0.0], vec![sq]).unwrap();
    let kl = kl_quad(1.0, sq, 30.0);
    let chi_quad = simpson(|x| pdf(x, 0.0, 1.0).powi(2) / pdf(x, 0.0, sq), -30.0, 30.0, 20_000) - 1.0;
    let d = gaussian_divergences(&p, &q).unwrap();
    assert!((d.kl_forward - kl).abs() < 1e-6);
    assert!((d.chi2 - chi_quad).abs() < 1e-6);
    assert!((kl - 0.096574).abs() < 1e-6);
    assert!((chi_quad - 0.154701).abs() < 1e-6);
    assert!((d.kl_reverse - kl_quad(sq, 1.0, 40.0)).abs() < 1e-6);
}

#[test]
fn infinite_chi2_shows_as_a_diverging_integral() {
    let narrow = 0.4f64.sqrt();
    let p = DiagGaussian::standard(1);
    let q = DiagGaussian::new(vec![0.0], vec![narrow]).unwrap();
    assert_eq!(chi2_gaussian(&p, &q), f64::INFINITY);
    let partial = |l: f64| simpson(|x| pdf(x, 0.0, 1.0).powi(2) / pdf(x, 0.0, narrow), -l, l, 20_000);
    let (a, b, c) = (partial(5.0), partial(10.0), partial(20.0));
    assert!(b > 10.0 * a && c > 10.0 * b);
    assert!((kl_gaussian(&p, &q) - kl_quad(1.0, narrow, 30.0)).abs() < 1e-6);
}

/// Pairs with `sq / sp > 0.75 > 1 / sqrt(2)` in every dimension, so chi^2
/// exists (it can still overflow for far-apart means).
fn diag_pair() -> impl Strategy<Value = (DiagGaussian, DiagGaussian)> {
    (1usize..5).prop_flat_map(|d| {
        (
            prop::collection::vec(-3.0f64..3.0, d),
            prop::collection::vec(0.2f64..3.0, d),
            prop::collection::vec(-3.0f64..3.0, d),
            prop::collection::vec(0.75f64..3.0, d),
        )
            .prop_map(|(mp, sp, mq, ratio)| {
                let sq = sp.iter().zip(&ratio).map(|(s, r)| s * r).collect();
                (DiagGaussian::new(mp, sp).unwrap(), DiagGaussian::new(mq, sq).unwrap())
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kl_never_exceeds_chi2((p, q) in diag_pair()) {
        let d = gaussian_divergences(&p, &q).unwrap();
        prop_assume!(d.chi2.is_finite());
        prop_assert!(d.kl_forward >= 0.0 && d.kl_reverse >= 0.0);
        prop_assert!(d.kl_forward <= d.chi2 * (1.0 + 1e-12));
    }

    #[test]
    fn adding_a_constant_to_every_log_weight_keeps_rho(seed in any::<u64>(), c in -300.0f64..300.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_w: Vec<Vec<f64>> = (0..100)
            .map(|_| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                vec![a, a - b, 0.3 * b]
            })
            .collect();
        let vals = vec![0.0; 100];
        let moved: Vec<Vec<f64>> = log_w.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
        let s = WeightStats::from_log_weights(&vals, &log_w).unwrap();
        let t = WeightStats::from_log_weights(&vals, &moved).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((s.corr[i][j].unwrap() - t.corr[i][j].unwrap()).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn antithetic_weights_are_perfectly_anticorrelated() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = 1.0;
    let log_w: Vec<Vec<f64>> = (0..10_000)
        .map(|_| {
            let w1 = rng.gen_range(0.05..1.95);
            vec![f64::ln(w1), f64::ln(2.0 * m - w1)]
        })
        .collect();
    let values: Vec<f64> = log_w.iter().map(|_| 0.0).collect();
    let s = WeightStats::from_log_weights(&values, &log_w).unwrap();
    let rho = s.corr[0][1].unwrap();
    assert!((rho + 1.0).abs() < 1e-9);
    // The average is constant, so log of it has no variance.
    assert!(s.var_log_w < 1e-20);
}

#[test]
fn uniform_resampling_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let k = 8;
    let idx = resample_indices(&vec![-3.0; k], n, &mut rng).unwrap();
    let p = 1.0 / k as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    for i in 0..k {
        let freq = idx.iter().filter(|j| **j == i).count() as f64 / n as f64;
        assert!((freq - p).abs() < 3.0 * se, "index {i}: {freq}");
    }
}

#[test]
fn resampling_from_prior_draws_recovers_the_posterior() {
    let model = ConjugateGaussianModel::new(vec![0.8], vec![1.2]).unwrap();
    let q = DiagGaussian::new(vec![0.0], vec![1.5]).unwrap();
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reports: Vec<_> = (0..20_000)
        .map(|_| {
            let noise = JointNoise::draw(&mut rng, 0, 0, 5, 1);
            let mut g = Graph::new(&store);
            iwlb(&mut g, &model, &q, &noise, BoundSettings::default()).unwrap()
        })
        .collect();
    let n = 4000;
    let pts = sir_resample(&reports, n, &mut rng).unwrap();
    let post = model.posterior();
    let (m, s) = (post.mean()[0], post.scale()[0]);
    let xs: Vec<f64> = pts.iter().map(|p| p.z[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let second = xs.iter().map(|x| x * x).sum::<f64>() / n as f64;
    assert!((mean - m).abs() < 3.0 * s / (n as f64).sqrt());
    // Var(z^2) = 2 s^4 + 4 m^2 s^2 under a Gaussian.
    let se2 = ((2.0 * s.powi(4) + 4.0 * m * m * s * s) / n as f64).sqrt();
    assert!((second - (m * m + s * s)).abs() < 3.0 * se2);
    assert!(pts.iter().all(|p| p.z0_norm.is_none()));
}

#[test]
fn exact_posterior_resampling_matches_its_moments() {
    let model = ConjugateGaussianModel::new(vec![1.0], vec![-0.6]).unwrap();
    let q = model.posterior();
    let store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reports: Vec<_> = (0..5000)
        .map(|_| {
            let noise = JointNoise::draw(&mut rng, 0, 0, 2, 1);
            let mut g = Graph::new(&store);
            iwlb(&mut g, &model, &q, &noise, BoundSettings::default()).unwrap()
        })
        .collect();
    let n = 5000;
    let xs: Vec<f64> = sir_resample(&reports, n, &mut rng)
        .unwrap()
        .iter()
        .map(|p| p.z[0])
        .collect();
    let (m, s) = (q.mean()[0], q.scale()[0]);
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    assert!((mean - m).abs() < 3.0 * s / (n as f64).sqrt());
    assert!((var - s * s).abs() < 3.0 * s * s * (2.0 / n as f64).sqrt());
}

#[test]
fn lognormal_gap_is_half_the_log_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rows = prop1_harness(1.0, &[1.0, 0.5, 0.1], 100_000, &mut rng).unwrap();
    let first = &rows[0];
    assert!((first.gap - 0.5).abs() < 3.0 / (1e5f64).sqrt());
    assert!((first.var_log_w - 1.0).abs() < 3.0 * (2.0 / 1e5f64).sqrt());
    for r in &rows {
        assert!(r.excess.abs() < 3.0 * r.excess_se, "{r:?}");
    }
    assert!(rows.windows(2).all(|w| w[1].gap < w[0].gap));
}
