//! Lower bounds on `log p(x)` and their gradient estimators.
//!
//! Every bound is assembled from per-sample log-weights
//!
//! ```text
//! log w_j = log p(x | z_j) + beta * (log p(z_j) + log r(z0 | z_j) - log q_j(z_j | z0) - log q0(z0))
//! bound   = logsumexp_j(log pi_j + log w_j)
//! ```
//!
//! with the `r`/`q0` terms absent for proposals with exact marginals, and
//! `beta = 1` outside of annealing. Unnormalized targets put all of
//! `log p~(z)` in the likelihood slot.
//!
//! Two gradient modes are supported. [`GradientMode::Reparam`] builds one graph
//! with every parameter live and differentiates the bound itself.
//! [`GradientMode::Dreg`] builds the same sample twice and differentiates a
//! surrogate
//!
//! ```text
//! sum_j stop(w~_j) * s_j[shared] + sum_j stop(w~_j^2) * s_j[conditional]
//! ```
//!
//! where `w~ = softmax(s)`, the `conditional` copy only lets gradient reach the
//! conditional parameters through `z_j`, and the `shared` copy carries the
//! `z0` path, the reverse model, the weighting net and the model. Density
//! parameters never enter directly (score terms dropped), including inside the
//! power weights. With `K = 1` this is the sticking-the-landing estimator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{logsumexp, Var};
use crate::densities::{GaussianSource, Model};
use crate::error::{check_dim, Error, Result};
use crate::nn::Mlp;
use crate::params::{Graph, ParamGroup, ParamPath, ParamStore};
use crate::proposals::{
    sample_independent, HierarchicalProposal, JointNoise, JointSample, MarkovProposal, PathPlan,
    Z0Mode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    Reparam,
    Dreg,
}

impl std::str::FromStr for GradientMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reparam" => Ok(GradientMode::Reparam),
            "dreg" => Ok(GradientMode::Dreg),
            other => Err(Error::InvalidArgument(format!(
                "gradient mode must be 'dreg' or 'reparam', got '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundSettings {
    pub mode: GradientMode,
    /// Annealing factor on every log-density except the likelihood.
    pub beta: f64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        BoundSettings {
            mode: GradientMode::Reparam,
            beta: 1.0,
        }
    }
}

impl BoundSettings {
    pub fn dreg() -> Self {
        BoundSettings {
            mode: GradientMode::Dreg,
            beta: 1.0,
        }
    }
}

/// Softmax weighting network over the `K` indices.
#[derive(Clone, Debug)]
pub struct LearnedWeights {
    pub net: Mlp,
    pub k: usize,
    pub dim_z: usize,
    /// Width of the `z0` input; 0 when the net sees `z` only.
    pub dim_z0: usize,
}

impl LearnedWeights {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        dim_z: usize,
        dim_z0: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let net = Mlp::new(
            store,
            name,
            &[dim_z + dim_z0, hidden, k],
            ParamGroup::Inference,
            rng,
        );
        LearnedWeights {
            net,
            k,
            dim_z,
            dim_z0,
        }
    }

    /// Log-softmax vector over the `K` indices at `(z, z0)`.
    pub fn log_weights(
        &self,
        g: &mut Graph<'_>,
        z: Var,
        z0: Option<Var>,
        path: ParamPath,
    ) -> Result<Var> {
        let input = match (self.dim_z0, z0) {
            (0, _) => z,
            (_, Some(z0)) => g.tape.concat(&[z, z0])?,
            (_, None) => {
                return Err(Error::Usage(
                    "learned weights take z0 as input but the proposal has no z0".into(),
                ))
            }
        };
        let out = self.net.forward(g, input, path)?;
        Ok(g.tape.log_softmax(out)?)
    }
}

#[derive(Clone, Debug)]
pub enum WeightingScheme {
    Uniform,
    /// `pi_j proportional to q_j(z | z0)^alpha`.
    Power(f64),
    Learned(LearnedWeights),
}

impl WeightingScheme {
    fn needs_cross(&self) -> bool {
        matches!(self, WeightingScheme::Power(a) if *a != 0.0)
    }

    pub fn label(&self) -> String {
        match self {
            WeightingScheme::Uniform => "uniform".into(),
            WeightingScheme::Power(a) => format!("power({a})"),
            WeightingScheme::Learned(_) => "learned".into(),
        }
    }
}

/// Per-sample terms behind one log-weight, kept for diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTerms {
    pub log_likelihood: f64,
    pub log_prior: Option<f64>,
    pub log_q: f64,
    pub log_q0: Option<f64>,
    pub log_r: Option<f64>,
    pub log_pi: f64,
}

impl SampleTerms {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let named = [
            ("log p(x|z)", Some(self.log_likelihood)),
            ("log p(z)", self.log_prior),
            ("log q(z|z0)", Some(self.log_q)),
            ("log q0(z0)", self.log_q0),
            ("log r(z0|z)", self.log_r),
            ("log pi", Some(self.log_pi)),
        ];
        named
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }
}

#[derive(Clone, Debug)]
pub struct BoundReport {
    pub bound: Var,
    pub value: f64,
    /// Root to differentiate: the bound itself (reparam) or the DReG surrogate.
    pub surrogate: Var,
    pub mode: GradientMode,
    /// `log w_j` (annealed when `beta < 1`).
    pub log_w: Vec<f64>,
    pub log_pi: Vec<f64>,
    /// `max_j log w_j`, the shift for weight-space statistics.
    pub shift: f64,
    pub samples: Vec<Vec<f64>>,
    pub z0: Vec<Option<Vec<f64>>>,
    pub terms: Vec<SampleTerms>,
}

impl BoundReport {
    pub fn k(&self) -> usize {
        self.log_w.len()
    }
}

/// `log pi_i` at one point from the `K` values `log q_i(z | z0)`.
pub fn power_log_pi(alpha: f64, log_q: &[f64]) -> Vec<f64> {
    let scaled: Vec<f64> = log_q.iter().map(|l| alpha * l).collect();
    let lse = logsumexp(&scaled);
    scaled.iter().map(|s| s - lse).collect()
}

fn uniform(g: &mut Graph<'_>, k: usize) -> Result<Vec<Var>> {
    let c = -(k as f64).ln();
    Ok((0..k).map(|_| g.tape.scalar_const(c)).collect())
}

/// `log pi_j(z_j, z0)` for every index of a joint sample.
pub fn pi_weights(
    g: &mut Graph<'_>,
    scheme: &WeightingScheme,
    js: &JointSample,
    path: ParamPath,
) -> Result<Vec<Var>> {
    let k = js.k();
    match scheme {
        WeightingScheme::Power(a) if *a == 0.0 => uniform(g, k),
        WeightingScheme::Uniform => uniform(g, k),
        WeightingScheme::Power(alpha) => {
            let cross = js.cross_log_q.as_ref().ok_or_else(|| {
                Error::Usage("power weights need the cross densities log q_i(z_j | z0)".into())
            })?;
            (0..k)
                .map(|j| {
                    let scaled = g.tape.scale(cross[j], *alpha)?;
                    let lsm = g.tape.log_softmax(scaled)?;
                    Ok(g.tape.index(lsm, j)?)
                })
                .collect()
        }
        WeightingScheme::Learned(net) => {
            check_dim("learned weights K", net.k, k)?;
            (0..k)
                .map(|j| {
                    let lsm = net.log_weights(g, js.z[j], js.z0[j], path)?;
                    Ok(g.tape.index(lsm, j)?)
                })
                .collect()
        }
    }
}

struct Weighed {
    /// `log pi_j + log w_j`.
    s: Vec<Var>,
    log_w: Vec<Var>,
    log_pi: Vec<Var>,
    terms: Vec<SampleTerms>,
}

fn weigh<M: Model + ?Sized>(
    g: &mut Graph<'_>,
    model: &M,
    js: &JointSample,
    scheme: &WeightingScheme,
    plan: &PathPlan,
    beta: f64,
) -> Result<Weighed> {
    let k = js.k();
    let log_pi = pi_weights(g, scheme, js, plan.weights)?;
    let mut out = Weighed {
        s: Vec::with_capacity(k),
        log_w: Vec::with_capacity(k),
        log_pi: log_pi.clone(),
        terms: Vec::with_capacity(k),
    };
    for j in 0..k {
        let jt = model.log_joint(g, js.z[j], plan.model)?;
        let t = &mut g.tape;
        let mut aux = match jt.prior {
            Some(p) => t.sub(p, js.log_q[j])?,
            None => t.neg(js.log_q[j])?,
        };
        if let Some(r) = js.log_r[j] {
            aux = t.add(aux, r)?;
        }
        if let Some(q0) = js.log_q0[j] {
            aux = t.sub(aux, q0)?;
        }
        if beta != 1.0 {
            aux = t.scale(aux, beta)?;
        }
        let log_w = t.add(jt.likelihood, aux)?;
        let s = t.add(log_w, log_pi[j])?;
        out.terms.push(SampleTerms {
            log_likelihood: t.scalar(jt.likelihood),
            log_prior: jt.prior.map(|v| t.scalar(v)),
            log_q: t.scalar(js.log_q[j]),
            log_q0: js.log_q0[j].map(|v| t.scalar(v)),
            log_r: js.log_r[j].map(|v| t.scalar(v)),
            log_pi: t.scalar(log_pi[j]),
        });
        out.log_w.push(log_w);
        out.s.push(s);
    }
    Ok(out)
}

fn finish(
    g: &mut Graph<'_>,
    js: &JointSample,
    main: Weighed,
    conditional: Option<Weighed>,
    mode: GradientMode,
) -> Result<BoundReport> {
    let t = &mut g.tape;
    let s_vec = t.concat(&main.s)?;
    let bound = t.logsumexp(s_vec)?;
    let value = t.scalar(bound);
    let surrogate = match conditional {
        None => bound,
        Some(cond) => {
            let s_vals = t.value(s_vec).to_vec();
            let lse = logsumexp(&s_vals);
            let w: Vec<f64> = s_vals.iter().map(|s| (s - lse).exp()).collect();
            let w2: Vec<f64> = w.iter().map(|w| w * w).collect();
            let wc = t.vector_const(&w);
            let w2c = t.vector_const(&w2);
            let shared = t.mul(wc, s_vec)?;
            let cond_vec = t.concat(&cond.s)?;
            let cond = t.mul(w2c, cond_vec)?;
            let total = t.add(shared, cond)?;
            t.sum(total)?
        }
    };
    let log_w: Vec<f64> = main.log_w.iter().map(|v| t.scalar(*v)).collect();
    let log_pi: Vec<f64> = main.log_pi.iter().map(|v| t.scalar(*v)).collect();
    let shift = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(BoundReport {
        bound,
        value,
        surrogate,
        mode,
        log_w,
        log_pi,
        shift,
        samples: js.z.iter().map(|z| t.value(*z).to_vec()).collect(),
        z0: js.z0.iter().map(|z| z.map(|z| t.value(z).to_vec())).collect(),
        terms: main.terms,
    })
}

/// Builds the sample under one or two plans and assembles the report.
fn build<M, S>(
    g: &mut Graph<'_>,
    model: &M,
    scheme: &WeightingScheme,
    settings: BoundSettings,
    mut sample: S,
) -> Result<BoundReport>
where
    M: Model + ?Sized,
    S: FnMut(&mut Graph<'_>, &PathPlan, bool) -> Result<JointSample>,
{
    let cross = scheme.needs_cross();
    match settings.mode {
        GradientMode::Reparam => {
            let js = sample(g, &PathPlan::LIVE, cross)?;
            let w = weigh(g, model, &js, scheme, &PathPlan::LIVE, settings.beta)?;
            finish(g, &js, w, None, GradientMode::Reparam)
        }
        GradientMode::Dreg => {
            let shared = PathPlan::DREG_SHARED;
            let js = sample(g, &shared, cross)?;
            let w = weigh(g, model, &js, scheme, &shared, settings.beta)?;
            let cond = PathPlan::DREG_CONDITIONAL;
            let js_c = sample(g, &cond, cross)?;
            let w_c = weigh(g, model, &js_c, scheme, &cond, settings.beta)?;
            finish(g, &js, w, Some(w_c), GradientMode::Dreg)
        }
    }
}

/// Single-sample `log p(x, z) - log q(z)`.
pub fn elbo<M: Model + ?Sized>(
    g: &mut Graph<'_>,
    model: &M,
    q: &dyn GaussianSource,
    noise: &[f64],
    settings: BoundSettings,
) -> Result<BoundReport> {
    let noise = JointNoise {
        z0: Vec::new(),
        z: vec![noise.to_vec()],
    };
    iwlb(g, model, q, &noise, settings)
}

/// `log (1/K) sum_j p(x, z_j) / q(z_j)` with `K = noise.z.len()`.
pub fn iwlb<M: Model + ?Sized>(
    g: &mut Graph<'_>,
    model: &M,
    q: &dyn GaussianSource,
    noise: &JointNoise,
    settings: BoundSettings,
) -> Result<BoundReport> {
    check_dim("latent", model.dim(), q.dim())?;
    let qs = vec![q; noise.z.len()];
    build(g, model, &WeightingScheme::Uniform, settings, |g, plan, _| {
        sample_independent(g, &qs, noise, plan, false)
    })
}

/// Joint bound over independent proposals with exact marginals.
pub fn jiwlb<M: Model + ?Sized>(
    g: &mut Graph<'_>,
    model: &M,
    qs: &[&dyn GaussianSource],
    scheme: &WeightingScheme,
    noise: &JointNoise,
    settings: BoundSettings,
) -> Result<BoundReport> {
    if let WeightingScheme::Learned(net) = scheme {
        if net.dim_z0 > 0 {
            return Err(Error::Usage(
                "learned weights on (z, z0) need a hierarchical proposal".into(),
            ));
        }
    }
    for q in qs {
        check_dim("latent", model.dim(), q.dim())?;
    }
    build(g, model, scheme, settings, |g, plan, cross| {
        sample_independent(g, qs, noise, plan, cross)
    })
}

/// Hierarchical bound with a common (or, for the ablation, per-index) `z0`.
#[allow(clippy::too_many_arguments)]
pub fn hiwlb<M: Model + ?Sized>(
    g: &mut Graph<'_>,
    model: &M,
    proposal: &HierarchicalProposal,
    scheme: &WeightingScheme,
    noise: &JointNoise,
    x: Option<&[f64]>,
    z0_mode: Z0Mode,
    settings: BoundSettings,
) -> Result<BoundReport> {
    check_dim("latent", model.dim(), proposal.cfg.dim_z)?;
    if let WeightingScheme::Learned(net) = scheme {
        check_dim("learned weights z input", proposal.cfg.dim_z, net.dim_z)?;
        if net.dim_z0 > 0 {
            check_dim("learned weights z0 input", proposal.cfg.dim_z0, net.dim_z0)?;
        }
    }
    build(g, model, scheme, settings, |g, plan, cross| {
        proposal.sample(g, noise, x, z0_mode, plan, cross)
    })
}

/// Uniformly weighted bound over a Markov-chain joint proposal (reparam only).
pub fn markov_iwlb<M: Model + ?Sized>(
    g: &mut Graph<'_>,
    model: &M,
    proposal: &MarkovProposal,
    noise: &JointNoise,
    settings: BoundSettings,
) -> Result<BoundReport> {
    if settings.mode == GradientMode::Dreg {
        return Err(Error::Usage(
            "the Markov proposal supports reparameterized gradients only".into(),
        ));
    }
    check_dim("latent", model.dim(), proposal.cfg.dim_z)?;
    build(g, model, &WeightingScheme::Uniform, settings, |g, plan, _| {
        proposal.sample_markov(g, noise, plan)
    })
}

/// Total pathwise gradient of the bound over the whole parameter store.
pub fn grad_reparam(g: &Graph<'_>, report: &BoundReport) -> Result<Vec<f64>> {
    if report.mode != GradientMode::Reparam {
        return Err(Error::Usage(
            "report was built for DReG; rebuild it in reparam mode".into(),
        ));
    }
    let grads = g.tape.backward(report.bound)?;
    Ok(g.param_gradient(&grads))
}

/// DReG gradient: inference parameters from the surrogate, generative
/// parameters as in the reparameterized gradient.
pub fn grad_dreg(g: &Graph<'_>, report: &BoundReport) -> Result<Vec<f64>> {
    if report.mode != GradientMode::Dreg {
        return Err(Error::Usage(
            "report has no doubly reparameterized graph; build it in dreg mode".into(),
        ));
    }
    let grads = g.tape.backward(report.surrogate)?;
    Ok(g.param_gradient(&grads))
}
