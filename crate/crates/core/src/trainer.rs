//! Stochastic optimization of the bounds.
//!
//! A [`Trainer`] owns the parameter store, one Adam state per parameter group
//! and the Polyak average, and drives a [`Problem`]: something that can build
//! a bound for a data item on a fresh graph. Two problems are provided:
//! [`FitProblem`] fits a proposal to a fixed model (toy targets, conjugate
//! model) and [`VaeProblem`] trains an amortized encoder together with a
//! Bernoulli decoder.
//!
//! All randomness is derived from `(seed, purpose, step, ...)` through
//! [`crate::rng::stream`], so a run is reproducible from its seed and step
//! counter alone, and resuming from a checkpoint continues bit-identically.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::autodiff::Var;
use crate::bounds::{
    elbo, hiwlb, iwlb, jiwlb, markov_iwlb, BoundReport, BoundSettings, GradientMode,
    LearnedWeights, WeightingScheme,
};
use crate::densities::{
    bernoulli_log_likelihood, BinaryDataset, DiagGaussian, GaussianNode, GaussianSource,
    JointTerms, LearnableGaussian, Model,
};
use crate::diagnostics::{weight_stats, MetricRow};
use crate::error::{check_dim, Error, Result};
use crate::nn::{GaussianMlp, Mlp};
use crate::params::{Graph, ParamGroup, ParamPath, ParamStore};
use crate::proposals::{
    HierarchicalConfig, HierarchicalProposal, JointNoise, MarkovConfig, MarkovProposal,
    ReverseKind, Z0Mode,
};
use crate::rng::{stream, StreamRng, TAG_DATA, TAG_EVAL, TAG_INIT, TAG_STEP};

/// `min(1, step / anneal_steps)`; 1 when annealing is off.
pub fn anneal_beta(step: u64, anneal_steps: u64) -> f64 {
    if anneal_steps == 0 {
        1.0
    } else {
        (step as f64 / anneal_steps as f64).min(1.0)
    }
}

/// `avg <- coeff * avg + (1 - coeff) * live`.
pub fn polyak_update(avg: &mut [f64], live: &[f64], coeff: f64) -> Result<()> {
    check_dim("polyak parameters", avg.len(), live.len())?;
    if !(0.0..1.0).contains(&coeff) {
        return Err(Error::InvalidArgument(format!(
            "polyak coefficient must be in [0, 1), got {coeff}"
        )));
    }
    for (a, l) in avg.iter_mut().zip(live) {
        *a = coeff * *a + (1.0 - coeff) * l;
    }
    Ok(())
}

/// `max(term, lambda)` per entry.
pub fn free_bits_clamp(terms: &[f64], lambda: f64) -> Vec<f64> {
    terms.iter().map(|t| t.max(lambda)).collect()
}

/// Adam over a subset of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub indices: Vec<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(indices: Vec<usize>, lr: f64) -> Self {
        let n = indices.len();
        Adam {
            indices,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One descent step on `params` using the full-length gradient `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        for (slot, &i) in self.indices.iter().enumerate() {
            let g = grad[i];
            self.m[slot] = self.beta1 * self.m[slot] + (1.0 - self.beta1) * g;
            self.v[slot] = self.beta2 * self.v[slot] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[slot] / c1;
            let v_hat = self.v[slot] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Weighting scheme as configured: `uniform`, `learned` or a power `alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SchemeSpec {
    Uniform,
    Power(f64),
    Learned,
}

impl FromStr for SchemeSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "uniform" => Ok(SchemeSpec::Uniform),
            "learned" => Ok(SchemeSpec::Learned),
            other => match other.parse::<f64>() {
                Ok(a) if a >= 0.0 && a.is_finite() => Ok(SchemeSpec::Power(a)),
                _ => Err(Error::InvalidArgument(format!(
                    "alpha must be a nonnegative number, 'uniform' or 'learned', got '{other}'"
                ))),
            },
        }
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemeSpec::Uniform => write!(f, "uniform"),
            SchemeSpec::Learned => write!(f, "learned"),
            SchemeSpec::Power(a) => write!(f, "{a}"),
        }
    }
}

impl Serialize for SchemeSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SchemeSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(a) => SchemeSpec::from_str(&a.to_string()),
            Raw::Text(s) => SchemeSpec::from_str(&s),
        }
        .map_err(serde::de::Error::custom)
    }
}

impl SchemeSpec {
    /// Per-index reverse models by default only with arithmetic averaging.
    pub fn default_per_j_r(&self) -> bool {
        self.is_uniform()
    }

    pub fn is_uniform(&self) -> bool {
        match self {
            SchemeSpec::Uniform => true,
            SchemeSpec::Power(a) => *a == 0.0,
            SchemeSpec::Learned => false,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn build<R: Rng + ?Sized>(
        &self,
        store: &mut ParamStore,
        k: usize,
        dim_z: usize,
        dim_z0: usize,
        hidden: usize,
        rng: &mut R,
    ) -> WeightingScheme {
        match self {
            SchemeSpec::Uniform => WeightingScheme::Uniform,
            SchemeSpec::Power(a) => WeightingScheme::Power(*a),
            SchemeSpec::Learned => WeightingScheme::Learned(LearnedWeights::new(
                store, "pi", k, dim_z, dim_z0, hidden, rng,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub k: usize,
    pub alpha: SchemeSpec,
    /// Learned weights see `z` only instead of `(z, z0)`.
    pub pi_z_only: bool,
    pub anneal_steps: u64,
    pub polyak: f64,
    pub free_bits: f64,
    pub seed: u64,
    pub z0_mode: Z0Mode,
    pub gradient_mode: GradientMode,
    pub encoder_updates_per_decoder_update: u32,
    pub hidden: usize,
    /// `None` picks per-index reverse models only for uniform weights.
    pub per_j_r: Option<bool>,
    pub emit_every: u64,
    /// Value-only bound draws behind each metrics row.
    pub eval_reps: usize,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 20_000,
            lr: 1e-3,
            batch_size: 1,
            k: 5,
            alpha: SchemeSpec::Power(1.0),
            pi_z_only: false,
            anneal_steps: 0,
            polyak: 0.998,
            free_bits: 0.0,
            seed: 0,
            z0_mode: Z0Mode::Common,
            gradient_mode: GradientMode::Dreg,
            encoder_updates_per_decoder_update: 1,
            hidden: 64,
            per_j_r: None,
            emit_every: 1000,
            eval_reps: 200,
            clip_norm: 100.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.polyak) {
            return bad(format!("polyak must be in [0, 1), got {}", self.polyak));
        }
        if !(self.free_bits >= 0.0) {
            return bad(format!("free_bits must be nonnegative, got {}", self.free_bits));
        }
        if self.k == 0 || self.batch_size == 0 || self.hidden == 0 {
            return bad("K, batch_size and hidden must be at least 1".into());
        }
        if self.encoder_updates_per_decoder_update == 0 {
            return bad("encoder_updates_per_decoder_update must be at least 1".into());
        }
        if self.emit_every == 0 {
            return bad("emit_every must be at least 1".into());
        }
        if self.eval_reps < 2 {
            return bad("eval_reps must be at least 2".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    pub fn per_j_r(&self) -> bool {
        self.per_j_r.unwrap_or_else(|| self.alpha.default_per_j_r())
    }

    pub fn settings(&self, step: u64) -> BoundSettings {
        BoundSettings {
            mode: self.gradient_mode,
            beta: anneal_beta(step, self.anneal_steps),
        }
    }
}

/// A training objective over a set of data items.
pub trait Problem {
    /// Number of data items (1 for a single fixed model).
    fn data_len(&self) -> usize;

    /// Draws fresh noise from `rng` and builds the bound for `item` on `g`.
    fn bound(
        &self,
        g: &mut Graph<'_>,
        item: usize,
        rng: &mut StreamRng,
        settings: BoundSettings,
    ) -> Result<BoundReport>;

    /// Scalar to maximize and the report it came from.
    fn objective(
        &self,
        g: &mut Graph<'_>,
        item: usize,
        rng: &mut StreamRng,
        settings: BoundSettings,
        _cfg: &TrainConfig,
    ) -> Result<(Var, BoundReport)> {
        let r = self.bound(g, item, rng, settings)?;
        Ok((r.surrogate, r))
    }
}

/// Proposal families for fitting a fixed model.
#[derive(Clone, Debug)]
pub enum ToyProposal {
    Hierarchical(HierarchicalProposal),
    /// One Gaussian: ELBO for `K = 1`, IWLB otherwise.
    Gaussian(LearnableGaussian),
    /// Distinct independent Gaussians (J-IWLB).
    Independent(Vec<LearnableGaussian>),
    Markov(MarkovProposal),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalKind {
    Hierarchical,
    Gaussian,
    Independent,
    Markov,
}

impl FromStr for ProposalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hierarchical" => Ok(ProposalKind::Hierarchical),
            "gaussian" => Ok(ProposalKind::Gaussian),
            "independent" => Ok(ProposalKind::Independent),
            "markov" => Ok(ProposalKind::Markov),
            other => Err(Error::InvalidArgument(format!(
                "unknown proposal '{other}' (hierarchical, gaussian, independent, markov)"
            ))),
        }
    }
}

pub struct FitProblem<M: Model> {
    pub model: M,
    pub proposal: ToyProposal,
    pub scheme: WeightingScheme,
    pub z0_mode: Z0Mode,
    pub k: usize,
}

impl<M: Model> FitProblem<M> {
    /// Builds the proposal and weighting parameters into `store`.
    pub fn new(
        model: M,
        kind: ProposalKind,
        cfg: &TrainConfig,
        store: &mut ParamStore,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.free_bits > 0.0 {
            return Err(Error::Usage("free bits apply to the VAE ELBO only".into()));
        }
        let mut rng = stream(&[cfg.seed, TAG_INIT]);
        let dim = model.dim();
        let k = cfg.k;
        let (proposal, dim_z0) = match kind {
            ProposalKind::Hierarchical => {
                let mut hc = HierarchicalConfig::toy(k, dim, cfg.hidden);
                hc.per_j_r = cfg.per_j_r();
                let p = HierarchicalProposal::new(store, "q", hc, &mut rng)?;
                (ToyProposal::Hierarchical(p), dim)
            }
            ProposalKind::Gaussian => (
                ToyProposal::Gaussian(LearnableGaussian::new(
                    store,
                    "q",
                    &DiagGaussian::standard(dim),
                    ParamGroup::Inference,
                )),
                0,
            ),
            ProposalKind::Independent => {
                // Spread initial means so the proposals start distinct.
                let qs = (0..k)
                    .map(|j| {
                        let mean = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                        let init = DiagGaussian::new(mean, vec![1.0; dim])?;
                        Ok(LearnableGaussian::new(
                            store,
                            &format!("q{j}"),
                            &init,
                            ParamGroup::Inference,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?;
                (ToyProposal::Independent(qs), 0)
            }
            ProposalKind::Markov => {
                if cfg.gradient_mode == GradientMode::Dreg {
                    return Err(Error::Usage(
                        "the Markov proposal needs --grad reparam".into(),
                    ));
                }
                if !cfg.alpha.is_uniform() {
                    return Err(Error::Usage(
                        "the Markov proposal supports uniform weights only".into(),
                    ));
                }
                let mc = MarkovConfig {
                    k,
                    dim_z: dim,
                    hidden: cfg.hidden,
                };
                (
                    ToyProposal::Markov(MarkovProposal::new(store, "q", mc, &mut rng)?),
                    0,
                )
            }
        };
        if kind == ProposalKind::Gaussian && cfg.alpha == SchemeSpec::Learned {
            return Err(Error::Usage(
                "a single Gaussian proposal uses uniform weights".into(),
            ));
        }
        let pi_z0 = if cfg.pi_z_only { 0 } else { dim_z0 };
        let scheme = cfg.alpha.build(store, k, dim, pi_z0, cfg.hidden, &mut rng);
        Ok(FitProblem {
            model,
            proposal,
            scheme,
            z0_mode: cfg.z0_mode,
            k,
        })
    }
}

impl<M: Model> Problem for FitProblem<M> {
    fn data_len(&self) -> usize {
        1
    }

    fn bound(
        &self,
        g: &mut Graph<'_>,
        _item: usize,
        rng: &mut StreamRng,
        settings: BoundSettings,
    ) -> Result<BoundReport> {
        let dim = self.model.dim();
        match &self.proposal {
            ToyProposal::Hierarchical(p) => {
                let noise = p.draw_noise(rng, self.z0_mode);
                hiwlb(g, &self.model, p, &self.scheme, &noise, None, self.z0_mode, settings)
            }
            ToyProposal::Gaussian(q) => {
                let noise = JointNoise::draw(rng, 0, 0, self.k, dim);
                iwlb(g, &self.model, q, &noise, settings)
            }
            ToyProposal::Independent(qs) => {
                let noise = JointNoise::draw(rng, 0, 0, qs.len(), dim);
                let refs: Vec<&dyn GaussianSource> =
                    qs.iter().map(|q| q as &dyn GaussianSource).collect();
                jiwlb(g, &self.model, &refs, &self.scheme, &noise, settings)
            }
            ToyProposal::Markov(p) => {
                let noise = p.draw_noise(rng);
                markov_iwlb(g, &self.model, p, &noise, settings)
            }
        }
    }
}

/// `p(x | z)` Bernoulli with logits from an MLP, `p(z) = N(0, I)`.
#[derive(Clone, Debug)]
pub struct BernoulliDecoder {
    pub net: Mlp,
    pub dim_z: usize,
}

impl BernoulliDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim_z: usize,
        hidden: usize,
        dim_x: usize,
        rng: &mut R,
    ) -> Self {
        let net = Mlp::new(store, "dec", &[dim_z, hidden, dim_x], ParamGroup::Generative, rng);
        BernoulliDecoder { net, dim_z }
    }
}

/// The decoder with one observation fixed.
pub struct DecoderModel<'a> {
    pub decoder: &'a BernoulliDecoder,
    pub x: &'a [f64],
}

impl Model for DecoderModel<'_> {
    fn dim(&self) -> usize {
        self.decoder.dim_z
    }

    fn log_joint(&self, g: &mut Graph<'_>, z: Var, path: ParamPath) -> Result<JointTerms> {
        let logits = self.decoder.net.forward(g, z, path)?;
        let likelihood = bernoulli_log_likelihood(&mut g.tape, logits, self.x)?;
        let n = self.decoder.dim_z;
        let zero = g.tape.vector_const(&vec![0.0; n]);
        let one = g.tape.vector_const(&vec![1.0; n]);
        let prior = g.tape.normal_logpdf(z, zero, one)?;
        Ok(JointTerms {
            likelihood,
            prior: Some(prior),
        })
    }
}

/// `q(z | x)` from a Gaussian MLP with the input fixed.
pub struct AmortizedGaussian<'a> {
    pub net: &'a GaussianMlp,
    pub x: &'a [f64],
}

impl GaussianSource for AmortizedGaussian<'_> {
    fn dim(&self) -> usize {
        self.net.dim
    }

    fn node(&self, g: &mut Graph<'_>, path: ParamPath) -> Result<GaussianNode> {
        let x = g.tape.vector_const(self.x);
        self.net.forward(g, x, path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VaeBound {
    Elbo,
    Iwlb,
    Hiwlb,
}

impl FromStr for VaeBound {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(VaeBound::Elbo),
            "iwlb" => Ok(VaeBound::Iwlb),
            "hiwlb" => Ok(VaeBound::Hiwlb),
            other => Err(Error::InvalidArgument(format!(
                "unknown bound '{other}' (elbo, iwlb, hiwlb)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Gaussian(GaussianMlp),
    Hierarchical(HierarchicalProposal),
}

pub struct VaeProblem {
    pub data: BinaryDataset,
    pub dim_z: usize,
    pub encoder: Encoder,
    pub decoder: BernoulliDecoder,
    pub bound: VaeBound,
    pub k: usize,
    pub scheme: WeightingScheme,
    pub z0_mode: Z0Mode,
}

impl VaeProblem {
    pub fn new(
        data: BinaryDataset,
        dim_z: usize,
        bound: VaeBound,
        cfg: &TrainConfig,
        store: &mut ParamStore,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        if cfg.free_bits > 0.0 && bound != VaeBound::Elbo {
            return Err(Error::Usage("free bits apply to the ELBO only".into()));
        }
        let mut rng = stream(&[cfg.seed, TAG_INIT]);
        let dim_x = data.dim();
        let hidden = cfg.hidden;
        let k = if bound == VaeBound::Elbo { 1 } else { cfg.k };
        let encoder = match bound {
            VaeBound::Elbo | VaeBound::Iwlb => Encoder::Gaussian(GaussianMlp::new(
                store,
                "enc",
                dim_x,
                &[hidden],
                dim_z,
                ParamGroup::Inference,
                &mut rng,
            )),
            VaeBound::Hiwlb => {
                let hc = HierarchicalConfig {
                    k,
                    dim_z0: dim_z,
                    dim_z,
                    hidden,
                    dim_x,
                    per_j_r: cfg.per_j_r(),
                    r_uses_x: true,
                    reverse: ReverseKind::Learned,
                };
                Encoder::Hierarchical(HierarchicalProposal::new(store, "enc", hc, &mut rng)?)
            }
        };
        let decoder = BernoulliDecoder::new(store, dim_z, hidden, dim_x, &mut rng);
        let scheme = match bound {
            VaeBound::Hiwlb => {
                let pi_z0 = if cfg.pi_z_only { 0 } else { dim_z };
                cfg.alpha.build(store, k, dim_z, pi_z0, hidden, &mut rng)
            }
            _ => WeightingScheme::Uniform,
        };
        Ok(VaeProblem {
            data,
            dim_z,
            encoder,
            decoder,
            bound,
            k,
            scheme,
            z0_mode: cfg.z0_mode,
        })
    }

    /// Bound of the given kind and size for one item (value only).
    pub fn evaluate(
        &self,
        store: &ParamStore,
        kind: VaeBound,
        k: usize,
        item: usize,
        rng: &mut StreamRng,
    ) -> Result<f64> {
        let mut g = Graph::new(store);
        Ok(self.bound_of(&mut g, kind, k, item, rng, BoundSettings::default())?.value)
    }

    fn bound_of(
        &self,
        g: &mut Graph<'_>,
        kind: VaeBound,
        k: usize,
        item: usize,
        rng: &mut StreamRng,
        settings: BoundSettings,
    ) -> Result<BoundReport> {
        let x = self.data.row(item);
        let model = DecoderModel {
            decoder: &self.decoder,
            x,
        };
        match (&self.encoder, kind) {
            (Encoder::Gaussian(net), VaeBound::Elbo | VaeBound::Iwlb) => {
                let q = AmortizedGaussian { net, x };
                let k = if kind == VaeBound::Elbo { 1 } else { k };
                let noise = JointNoise::draw(rng, 0, 0, k, self.dim_z);
                iwlb(g, &model, &q, &noise, settings)
            }
            (Encoder::Hierarchical(p), VaeBound::Hiwlb) => {
                let noise = p.draw_noise(rng, self.z0_mode);
                hiwlb(g, &model, p, &self.scheme, &noise, Some(x), self.z0_mode, settings)
            }
            _ => Err(Error::Usage(format!(
                "bound {kind:?} does not match the encoder type"
            ))),
        }
    }

    /// `log p(x|z) - beta * sum_d max(KL_d, lambda)` with the analytic
    /// per-dimension KL to the standard normal prior.
    fn free_bits_objective(
        &self,
        g: &mut Graph<'_>,
        net: &GaussianMlp,
        item: usize,
        noise: &[f64],
        beta: f64,
        lambda: f64,
    ) -> Result<Var> {
        let x = self.data.row(item);
        let xv = g.tape.vector_const(x);
        let q = net.forward(g, xv, ParamPath::Live)?;
        let z = crate::densities::rsample(&mut g.tape, q, noise)?;
        let logits = self.decoder.net.forward(g, z, ParamPath::Live)?;
        let t = &mut g.tape;
        let lik = bernoulli_log_likelihood(t, logits, x)?;
        let log_s = t.log(q.scale)?;
        let s2 = t.square(q.scale)?;
        let m2 = t.square(q.mean)?;
        let half = t.add(s2, m2)?;
        let half = t.scale(half, 0.5)?;
        let kl = t.sub(half, log_s)?;
        let kl = t.shift(kl, -0.5)?;
        let kl = t.clamp_min(kl, lambda)?;
        let kl = t.sum(kl)?;
        let kl = t.scale(kl, beta)?;
        Ok(t.sub(lik, kl)?)
    }
}

impl Problem for VaeProblem {
    fn data_len(&self) -> usize {
        self.data.len()
    }

    fn bound(
        &self,
        g: &mut Graph<'_>,
        item: usize,
        rng: &mut StreamRng,
        settings: BoundSettings,
    ) -> Result<BoundReport> {
        self.bound_of(g, self.bound, self.k, item, rng, settings)
    }

    fn objective(
        &self,
        g: &mut Graph<'_>,
        item: usize,
        rng: &mut StreamRng,
        settings: BoundSettings,
        cfg: &TrainConfig,
    ) -> Result<(Var, BoundReport)> {
        match (&self.encoder, self.bound) {
            (Encoder::Gaussian(net), VaeBound::Elbo) if cfg.free_bits > 0.0 => {
                let eps: Vec<f64> = (0..self.dim_z).map(|_| rng.sample(StandardNormal)).collect();
                let x = self.data.row(item);
                let model = DecoderModel {
                    decoder: &self.decoder,
                    x,
                };
                let report = elbo(g, &model, &AmortizedGaussian { net, x }, &eps, settings)?;
                let obj =
                    self.free_bits_objective(g, net, item, &eps, settings.beta, cfg.free_bits)?;
                Ok((obj, report))
            }
            _ => {
                let r = self.bound(g, item, rng, settings)?;
                Ok((r.surrogate, r))
            }
        }
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub seed: u64,
    /// Completed updates; together with the seed this is the RNG state.
    pub step: u64,
    pub params: ParamStore,
    pub polyak: Vec<f64>,
    pub inference_adam: Adam,
    pub generative_adam: Adam,
    pub history: Vec<f64>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

pub struct Trainer<P: Problem> {
    pub cfg: TrainConfig,
    pub problem: P,
    pub store: ParamStore,
    pub polyak: Vec<f64>,
    pub inference_adam: Adam,
    pub generative_adam: Adam,
    pub step: u64,
    /// Mean training bound of every update.
    pub history: Vec<f64>,
    pub metrics: Vec<MetricRow>,
}

impl<P: Problem> Trainer<P> {
    pub fn new(cfg: TrainConfig, problem: P, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let inference_adam = Adam::new(store.indices(ParamGroup::Inference), cfg.lr);
        let generative_adam = Adam::new(store.indices(ParamGroup::Generative), cfg.lr);
        Ok(Trainer {
            polyak: store.values().to_vec(),
            cfg,
            problem,
            store,
            inference_adam,
            generative_adam,
            step: 0,
            history: Vec::new(),
            metrics: Vec::new(),
        })
    }

    fn batch(&self) -> Vec<usize> {
        let n = self.problem.data_len();
        let b = self.cfg.batch_size;
        if n <= 1 {
            return vec![0; b];
        }
        let mut rng = stream(&[self.cfg.seed, TAG_DATA, self.step]);
        if b <= n {
            sample_indices(&mut rng, n, b).into_vec()
        } else {
            (0..b).map(|_| rng.gen_range(0..n)).collect()
        }
    }

    /// One update (with extra inference sub-updates when configured).
    /// Returns the mean bound of the last sub-update.
    pub fn train_step(&mut self) -> Result<f64> {
        let items = self.batch();
        let settings = self.cfg.settings(self.step);
        let ratio = self.cfg.encoder_updates_per_decoder_update;
        let mut last = f64::NAN;
        for sub in 0..ratio {
            let (grad, value) = self.gradient(&items, settings, sub)?;
            self.inference_adam.step(self.store.values_mut(), &grad);
            if sub + 1 == ratio {
                self.generative_adam.step(self.store.values_mut(), &grad);
            }
            last = value;
        }
        polyak_update(&mut self.polyak, self.store.values(), self.cfg.polyak)?;
        self.step += 1;
        self.history.push(last);
        Ok(last)
    }

    fn gradient(
        &self,
        items: &[usize],
        settings: BoundSettings,
        sub: u32,
    ) -> Result<(Vec<f64>, f64)> {
        let mut g = Graph::new(&self.store);
        let mut objs = Vec::with_capacity(items.len());
        let mut total = 0.0;
        for (b, &item) in items.iter().enumerate() {
            let mut rng = stream(&[self.cfg.seed, TAG_STEP, self.step, sub as u64, b as u64]);
            let (obj, report) = self.problem.objective(&mut g, item, &mut rng, settings, &self.cfg)?;
            let value = g.tape.scalar(obj);
            if !report.value.is_finite() || !value.is_finite() {
                let term = report
                    .terms
                    .iter()
                    .find_map(|t| t.first_non_finite())
                    .unwrap_or("bound");
                return Err(Error::NonFinite {
                    step: self.step,
                    term: term.to_string(),
                });
            }
            total += report.value;
            objs.push(obj);
        }
        let t = &mut g.tape;
        let stacked = t.concat(&objs)?;
        let sum = t.sum(stacked)?;
        let loss = t.scale(sum, -1.0 / items.len() as f64)?;
        let grads = g.tape.backward(loss)?;
        let mut grad = g.param_gradient(&grads);
        let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                term: "gradient".into(),
            });
        }
        if norm > self.cfg.clip_norm {
            let c = self.cfg.clip_norm / norm;
            grad.iter_mut().for_each(|v| *v *= c);
        }
        Ok((grad, total / items.len() as f64))
    }

    /// `reps` value-only reparameterized bounds with the given parameters.
    pub fn evaluate(&self, params: &ParamStore, reps: usize, tag: u64) -> Result<Vec<BoundReport>> {
        let n = self.problem.data_len().max(1);
        (0..reps)
            .map(|r| {
                let mut rng = stream(&[self.cfg.seed, TAG_EVAL, tag, r as u64]);
                let mut g = Graph::new(params);
                self.problem
                    .bound(&mut g, r % n, &mut rng, BoundSettings::default())
            })
            .collect()
    }

    pub fn metric_row(&self) -> Result<MetricRow> {
        let reports = self.evaluate(&self.store, self.cfg.eval_reps, self.step)?;
        Ok(MetricRow::from_stats(self.step, &weight_stats(&reports)?))
    }

    pub fn polyak_store(&self) -> ParamStore {
        self.store.with_values(&self.polyak)
    }

    /// Runs until `cfg.steps` updates are done, recording metrics at step 0,
    /// every `emit_every` steps and at the end.
    pub fn run(&mut self, mut on_metric: impl FnMut(&MetricRow)) -> Result<()> {
        if self.step == 0 && self.metrics.is_empty() {
            self.record(&mut on_metric)?;
        }
        while self.step < self.cfg.steps {
            self.train_step()?;
            if self.step.is_multiple_of(self.cfg.emit_every) || self.step == self.cfg.steps {
                self.record(&mut on_metric)?;
            }
        }
        Ok(())
    }

    fn record(&mut self, on_metric: &mut impl FnMut(&MetricRow)) -> Result<()> {
        let row = self.metric_row()?;
        on_metric(&row);
        self.metrics.push(row);
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed: self.cfg.seed,
            step: self.step,
            params: self.store.clone(),
            polyak: self.polyak.clone(),
            inference_adam: self.inference_adam.clone(),
            generative_adam: self.generative_adam.clone(),
            history: self.history.clone(),
        }
    }

    pub fn restore(&mut self, ckpt: Checkpoint) -> Result<()> {
        if ckpt.params.blocks() != self.store.blocks() {
            return Err(Error::InvalidArgument(
                "checkpoint parameter layout does not match the model".into(),
            ));
        }
        if ckpt.seed != self.cfg.seed {
            return Err(Error::InvalidArgument(format!(
                "checkpoint seed {} differs from configured seed {}",
                ckpt.seed, self.cfg.seed
            )));
        }
        check_dim("polyak parameters", self.store.len(), ckpt.polyak.len())?;
        self.store = ckpt.params;
        self.polyak = ckpt.polyak;
        self.inference_adam = ckpt.inference_adam;
        self.generative_adam = ckpt.generative_adam;
        self.step = ckpt.step;
        self.history = ckpt.history;
        self.metrics.clear();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{ConjugateGaussianModel, TargetDensity};

    #[test]
    fn anneal_examples() {
        assert_eq!(anneal_beta(0, 100), 0.0);
        assert_eq!(anneal_beta(50, 100), 0.5);
        assert_eq!(anneal_beta(100, 100), 1.0);
        assert_eq!(anneal_beta(5000, 100), 1.0);
        assert_eq!(anneal_beta(0, 0), 1.0);
    }

    #[test]
    fn polyak_examples() {
        let live = vec![1.0, -2.0];
        let mut avg = vec![5.0, 5.0];
        polyak_update(&mut avg, &live, 0.0).unwrap();
        assert_eq!(avg, live);
        polyak_update(&mut avg, &live, 0.9).unwrap();
        assert_eq!(avg, live);
        let mut avg = vec![0.0];
        polyak_update(&mut avg, &[1.0], 0.998).unwrap();
        assert!((avg[0] - 0.002).abs() < 1e-15);
        assert!(polyak_update(&mut avg, &[1.0, 2.0], 0.5).is_err());
        assert!(polyak_update(&mut avg, &[1.0], 1.0).is_err());
    }

    #[test]
    fn free_bits_examples() {
        assert_eq!(free_bits_clamp(&[0.005, 0.5], 0.0), vec![0.005, 0.5]);
        assert_eq!(free_bits_clamp(&[0.005, 0.5], 0.01), vec![0.01, 0.5]);
    }

    #[test]
    fn zero_gradient_adam_step_is_a_no_op() {
        let mut adam = Adam::new(vec![0, 2], 0.1);
        let mut p = vec![1.0, 2.0, 3.0];
        adam.step(&mut p, &[0.0; 3]);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        let mut adam = Adam::new(vec![0, 2], 0.1);
        adam.step(&mut p, &[1.0, 1.0, -1.0]);
        // First real step moves by lr in the sign direction.
        assert!((p[0] - (1.0 - 0.1)).abs() < 1e-6);
        assert_eq!(p[1], 2.0);
        assert!((p[2] - 3.1).abs() < 1e-6);
    }

    #[test]
    fn scheme_spec_parsing() {
        assert_eq!("uniform".parse::<SchemeSpec>().unwrap(), SchemeSpec::Uniform);
        assert_eq!("learned".parse::<SchemeSpec>().unwrap(), SchemeSpec::Learned);
        assert_eq!("3".parse::<SchemeSpec>().unwrap(), SchemeSpec::Power(3.0));
        assert!("-1".parse::<SchemeSpec>().is_err());
        assert!("abc".parse::<SchemeSpec>().is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"alpha": 0.5}"#).unwrap();
        assert_eq!(cfg.alpha, SchemeSpec::Power(0.5));
        let cfg: TrainConfig = serde_json::from_str(r#"{"alpha": "learned"}"#).unwrap();
        assert_eq!(cfg.alpha, SchemeSpec::Learned);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        for bad in [
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { polyak: 1.0, ..ok.clone() },
            TrainConfig { k: 0, ..ok.clone() },
            TrainConfig { encoder_updates_per_decoder_update: 0, ..ok.clone() },
            TrainConfig { free_bits: -1.0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    fn toy_trainer(steps: u64) -> Trainer<FitProblem<TargetDensity>> {
        let cfg = TrainConfig {
            steps,
            k: 3,
            hidden: 8,
            emit_every: 5,
            eval_reps: 4,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut store = ParamStore::new();
        let problem = FitProblem::new(
            TargetDensity::by_name("mixture8").unwrap(),
            ProposalKind::Hierarchical,
            &cfg,
            &mut store,
        )
        .unwrap();
        Trainer::new(cfg, problem, store).unwrap()
    }

    #[test]
    fn checkpoint_resume_is_bit_identical() {
        let mut straight = toy_trainer(20);
        straight.run(|_| {}).unwrap();

        let mut first = toy_trainer(10);
        first.run(|_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        first.checkpoint().save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, first.checkpoint());

        let mut resumed = toy_trainer(20);
        resumed.restore(loaded).unwrap();
        resumed.run(|_| {}).unwrap();
        assert_eq!(resumed.store.values(), straight.store.values());
        assert_eq!(resumed.polyak, straight.polyak);
        assert_eq!(resumed.history, straight.history);
    }

    #[test]
    fn markov_proposal_requires_reparam() {
        let cfg = TrainConfig {
            alpha: SchemeSpec::Uniform,
            ..TrainConfig::default()
        };
        let mut store = ParamStore::new();
        let err = FitProblem::new(
            TargetDensity::by_name("ring").unwrap(),
            ProposalKind::Markov,
            &cfg,
            &mut store,
        )
        .err()
        .unwrap();
        assert!(matches!(err, Error::Usage(_)));
    }

    struct NanProblem;
    impl Problem for NanProblem {
        fn data_len(&self) -> usize {
            1
        }
        fn bound(
            &self,
            g: &mut Graph<'_>,
            _item: usize,
            rng: &mut StreamRng,
            settings: BoundSettings,
        ) -> Result<BoundReport> {
            struct M;
            impl Model for M {
                fn dim(&self) -> usize {
                    1
                }
                fn log_joint(&self, g: &mut Graph<'_>, z: Var, _p: ParamPath) -> Result<JointTerms> {
                    let _ = z;
                    Ok(JointTerms { likelihood: g.tape.scalar_const(f64::NAN), prior: None })
                }
            }
            let noise: Vec<f64> = vec![rng.gen()];
            elbo(g, &M, &DiagGaussian::standard(1), &noise, settings)
        }
    }

    #[test]
    fn non_finite_bound_aborts_with_step_and_term() {
        let cfg = TrainConfig { steps: 3, eval_reps: 2, ..TrainConfig::default() };
        let mut store = ParamStore::new();
        store.add_filled("dummy", 1, 1, ParamGroup::Inference, 0.0);
        let mut t = Trainer::new(cfg, NanProblem, store).unwrap();
        let err = t.train_step().unwrap_err();
        match err {
            Error::NonFinite { step, term } => {
                assert_eq!(step, 0);
                assert_eq!(term, "log p(x|z)");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conjugate_fit_runs() {
        let cfg = TrainConfig {
            steps: 50,
            k: 1,
            alpha: SchemeSpec::Uniform,
            gradient_mode: GradientMode::Reparam,
            eval_reps: 4,
            emit_every: 25,
            ..TrainConfig::default()
        };
        let mut store = ParamStore::new();
        let model = ConjugateGaussianModel::new(vec![1.0], vec![2.0]).unwrap();
        let p = FitProblem::new(model, ProposalKind::Gaussian, &cfg, &mut store).unwrap();
        let mut t = Trainer::new(cfg, p, store).unwrap();
        let mut seen = Vec::new();
        t.run(|m| seen.push(m.step)).unwrap();
        assert_eq!(seen, vec![0, 25, 50]);
        assert_eq!(t.history.len(), 50);
    }
}
