//! Proposal families.
//!
//! The hierarchical proposal draws one `z0 ~ q0` and then `K` conditionally
//! independent samples `zj ~ qj(. | z0)`:
//!
//! ```text
//! h        = elu(W_h z0 + b_h)                 (shared trunk)
//! mu_j     = (W_mu_j h + b_mu_j) + W_s_j z0
//! sigma_j  = softplus(W_sigma_j h + b_sigma_j) + 1e-6
//! ```
//!
//! The reverse model `r(z0 | zj)` is a Gaussian MLP, shared across `j` or one
//! per index. In the amortized setting `x` is concatenated to the inputs of
//! `q0`, the trunk and (optionally) `r`.
//!
//! Every sampler takes a [`PathPlan`] saying which parameters enter with
//! gradient. The doubly reparameterized estimator builds the same sample twice
//! under two plans; see `bounds`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::densities::{
    log_density, positive_scale, raw_for_scale, rsample, DiagGaussian, GaussianNode,
    GaussianSource, LearnableGaussian,
};
use crate::error::{check_dim, Error, Result};
use crate::nn::{GaussianMlp, Linear};
use crate::params::{Graph, ParamGroup, ParamId, ParamPath, ParamStore};

/// Which parameter paths carry gradient while building a sample and its densities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathPlan {
    /// `q0` parameters used to draw `z0`.
    pub base_sample: ParamPath,
    /// `qj` parameters used to draw `zj`.
    pub cond_sample: ParamPath,
    /// `q0` / `qj` parameters inside log-densities (and power weights).
    pub densities: ParamPath,
    pub reverse: ParamPath,
    pub model: ParamPath,
    /// Learned weighting network.
    pub weights: ParamPath,
}

impl PathPlan {
    pub const LIVE: PathPlan = PathPlan {
        base_sample: ParamPath::Live,
        cond_sample: ParamPath::Live,
        densities: ParamPath::Live,
        reverse: ParamPath::Live,
        model: ParamPath::Live,
        weights: ParamPath::Live,
    };

    /// Gradient only through `zj`'s dependence on the conditional parameters.
    pub const DREG_CONDITIONAL: PathPlan = PathPlan {
        base_sample: ParamPath::Detached,
        cond_sample: ParamPath::Live,
        densities: ParamPath::Detached,
        reverse: ParamPath::Detached,
        model: ParamPath::Detached,
        weights: ParamPath::Detached,
    };

    /// Gradient through `z0`, the reverse model, the weighting net and the model.
    pub const DREG_SHARED: PathPlan = PathPlan {
        base_sample: ParamPath::Live,
        cond_sample: ParamPath::Detached,
        densities: ParamPath::Detached,
        reverse: ParamPath::Live,
        model: ParamPath::Live,
        weights: ParamPath::Live,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Z0Mode {
    /// One `z0` shared by all `K` samples.
    Common,
    /// A fresh `z0` per index, which makes the `zj` independent.
    Independent,
}

impl std::str::FromStr for Z0Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "common" => Ok(Z0Mode::Common),
            "independent" => Ok(Z0Mode::Independent),
            other => Err(Error::InvalidArgument(format!(
                "z0 mode must be 'common' or 'independent', got '{other}'"
            ))),
        }
    }
}

/// Standard-normal noise behind one joint draw.
#[derive(Clone, Debug, PartialEq)]
pub struct JointNoise {
    pub z0: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

impl JointNoise {
    pub fn draw<R: Rng + ?Sized>(
        rng: &mut R,
        n_z0: usize,
        dim_z0: usize,
        k: usize,
        dim_z: usize,
    ) -> Self {
        let mut block = |n: usize, d: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
                .collect()
        };
        let z0 = block(n_z0, dim_z0);
        let z = block(k, dim_z);
        JointNoise { z0, z }
    }
}

/// One joint draw and all densities entering the per-sample weights.
#[derive(Clone, Debug)]
pub struct JointSample {
    /// `z0` used for index `j` (same node for every `j` in common mode).
    pub z0: Vec<Option<Var>>,
    pub z: Vec<Var>,
    pub log_q0: Vec<Option<Var>>,
    /// `log qj(zj | z0)`.
    pub log_q: Vec<Var>,
    pub log_r: Vec<Option<Var>>,
    /// Per `j`, the `K`-vector `log qi(zj | z0)` over `i`.
    pub cross_log_q: Option<Vec<Var>>,
    pub noise: JointNoise,
}

impl JointSample {
    pub fn k(&self) -> usize {
        self.z.len()
    }
}

/// Per-index conditional Gaussian head on a shared hidden layer.
#[derive(Clone, Debug)]
pub struct Head {
    pub w_mu: ParamId,
    pub b_mu: ParamId,
    pub w_s: ParamId,
    pub w_sigma: ParamId,
    pub b_sigma: ParamId,
}

impl Head {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        dim_z: usize,
        dim_z0: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Head {
            w_mu: store.add_weight(format!("{name}.w_mu"), dim_z, hidden, group, rng),
            b_mu: store.add_filled(format!("{name}.b_mu"), dim_z, 1, group, 0.0),
            w_s: store.add_weight(format!("{name}.w_s"), dim_z, dim_z0, group, rng),
            w_sigma: store.add_weight(format!("{name}.w_sigma"), dim_z, hidden, group, rng),
            b_sigma: store.add_filled(
                format!("{name}.b_sigma"),
                dim_z,
                1,
                group,
                raw_for_scale(1.0),
            ),
        }
    }

    fn forward(&self, g: &mut Graph<'_>, h: Var, z0: Var, path: ParamPath) -> Result<GaussianNode> {
        let w_mu = g.param(self.w_mu, path);
        let b_mu = g.param(self.b_mu, path);
        let w_s = g.param(self.w_s, path);
        let w_sigma = g.param(self.w_sigma, path);
        let b_sigma = g.param(self.b_sigma, path);
        let t = &mut g.tape;
        let a = t.matvec(w_mu, h)?;
        let a = t.add(a, b_mu)?;
        let skip = t.matvec(w_s, z0)?;
        let mean = t.add(a, skip)?;
        let raw = t.matvec(w_sigma, h)?;
        let raw = t.add(raw, b_sigma)?;
        let scale = positive_scale(t, raw)?;
        Ok(GaussianNode { mean, scale })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReverseKind {
    /// Gaussian MLP `r(z0 | zj)`.
    Learned,
    /// `r = q0`, ignoring `zj`; the auxiliary terms cancel.
    Prior,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HierarchicalConfig {
    pub k: usize,
    pub dim_z0: usize,
    pub dim_z: usize,
    pub hidden: usize,
    /// Width of the conditioning input; 0 disables amortization.
    pub dim_x: usize,
    /// One reverse network per index instead of a shared one.
    pub per_j_r: bool,
    /// Feed `x` to the reverse model in amortized mode.
    pub r_uses_x: bool,
    pub reverse: ReverseKind,
}

impl HierarchicalConfig {
    pub fn toy(k: usize, dim: usize, hidden: usize) -> Self {
        HierarchicalConfig {
            k,
            dim_z0: dim,
            dim_z: dim,
            hidden,
            dim_x: 0,
            per_j_r: false,
            r_uses_x: true,
            reverse: ReverseKind::Learned,
        }
    }
}

#[derive(Clone, Debug)]
pub enum BaseDistribution {
    Free(LearnableGaussian),
    Amortized(GaussianMlp),
}

#[derive(Clone, Debug)]
pub enum ReverseModel {
    Prior,
    Shared(GaussianMlp),
    PerIndex(Vec<GaussianMlp>),
}

#[derive(Clone, Debug)]
pub struct HierarchicalProposal {
    pub cfg: HierarchicalConfig,
    pub q0: BaseDistribution,
    pub trunk: Linear,
    pub heads: Vec<Head>,
    pub reverse: ReverseModel,
}

impl HierarchicalProposal {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: HierarchicalConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        if cfg.dim_z0 == 0 || cfg.dim_z == 0 || cfg.hidden == 0 {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        let group = ParamGroup::Inference;
        let q0 = if cfg.dim_x == 0 {
            BaseDistribution::Free(LearnableGaussian::new(
                store,
                &format!("{name}.q0"),
                &DiagGaussian::standard(cfg.dim_z0),
                group,
            ))
        } else {
            BaseDistribution::Amortized(GaussianMlp::new(
                store,
                &format!("{name}.q0"),
                cfg.dim_x,
                &[cfg.hidden],
                cfg.dim_z0,
                group,
                rng,
            ))
        };
        let trunk = Linear::new(
            store,
            &format!("{name}.trunk"),
            cfg.dim_z0 + cfg.dim_x,
            cfg.hidden,
            group,
            rng,
        );
        let heads = (0..cfg.k)
            .map(|j| {
                Head::new(
                    store,
                    &format!("{name}.head{j}"),
                    cfg.hidden,
                    cfg.dim_z,
                    cfg.dim_z0,
                    group,
                    rng,
                )
            })
            .collect();
        let r_in = cfg.dim_z + if cfg.r_uses_x { cfg.dim_x } else { 0 };
        let mut r_net = |suffix: String| {
            GaussianMlp::new(
                store,
                &format!("{name}.r{suffix}"),
                r_in,
                &[cfg.hidden],
                cfg.dim_z0,
                group,
                rng,
            )
        };
        let reverse = match (cfg.reverse, cfg.per_j_r) {
            (ReverseKind::Prior, _) => ReverseModel::Prior,
            (ReverseKind::Learned, false) => ReverseModel::Shared(r_net(String::new())),
            (ReverseKind::Learned, true) => {
                ReverseModel::PerIndex((0..cfg.k).map(|j| r_net(j.to_string())).collect())
            }
        };
        Ok(HierarchicalProposal {
            cfg,
            q0,
            trunk,
            heads,
            reverse,
        })
    }

    pub fn k(&self) -> usize {
        self.cfg.k
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R, mode: Z0Mode) -> JointNoise {
        let n_z0 = match mode {
            Z0Mode::Common => 1,
            Z0Mode::Independent => self.cfg.k,
        };
        JointNoise::draw(rng, n_z0, self.cfg.dim_z0, self.cfg.k, self.cfg.dim_z)
    }

    fn x_node(&self, g: &mut Graph<'_>, x: Option<&[f64]>) -> Result<Option<Var>> {
        match (self.cfg.dim_x, x) {
            (0, None) => Ok(None),
            (0, Some([])) => Ok(None),
            (d, Some(x)) => {
                check_dim("conditioning input", d, x.len())?;
                Ok(Some(g.tape.vector_const(x)))
            }
            (d, None) => Err(Error::Dimension {
                what: "conditioning input",
                expected: d,
                got: 0,
            }),
        }
    }

    fn q0_node(&self, g: &mut Graph<'_>, x: Option<Var>, path: ParamPath) -> Result<GaussianNode> {
        match &self.q0 {
            BaseDistribution::Free(q) => q.node(g, path),
            BaseDistribution::Amortized(net) => {
                let x = x.expect("amortized proposal without input");
                net.forward(g, x, path)
            }
        }
    }

    fn hidden(&self, g: &mut Graph<'_>, z0: Var, x: Option<Var>, path: ParamPath) -> Result<Var> {
        let input = match x {
            Some(x) => g.tape.concat(&[z0, x])?,
            None => z0,
        };
        let pre = self.trunk.forward(g, input, path)?;
        Ok(g.tape.elu(pre)?)
    }

    /// `qj(. | z0)` as a tape Gaussian.
    pub fn conditional(
        &self,
        g: &mut Graph<'_>,
        z0: Var,
        x: Option<&[f64]>,
        j: usize,
        path: ParamPath,
    ) -> Result<GaussianNode> {
        let x = self.x_node(g, x)?;
        let h = self.hidden(g, z0, x, path)?;
        self.heads[j].forward(g, h, z0, path)
    }

    fn log_r_node(
        &self,
        g: &mut Graph<'_>,
        z0: Var,
        zj: Var,
        j: usize,
        x: Option<Var>,
        path: ParamPath,
    ) -> Result<Var> {
        let net = match &self.reverse {
            ReverseModel::Prior => {
                let q0 = self.q0_node(g, x, path)?;
                return log_density(&mut g.tape, q0, z0);
            }
            ReverseModel::Shared(net) => net,
            ReverseModel::PerIndex(nets) => &nets[j],
        };
        let input = match x {
            Some(x) if self.cfg.r_uses_x => g.tape.concat(&[zj, x])?,
            _ => zj,
        };
        let r = net.forward(g, input, path)?;
        log_density(&mut g.tape, r, z0)
    }

    /// Differentiable `log r(z0 | zj)` for index `j`.
    pub fn log_r(
        &self,
        g: &mut Graph<'_>,
        z0: Var,
        zj: Var,
        j: usize,
        x: Option<&[f64]>,
        path: ParamPath,
    ) -> Result<Var> {
        check_dim("z0", self.cfg.dim_z0, g.tape.shape(z0).len())?;
        check_dim("zj", self.cfg.dim_z, g.tape.shape(zj).len())?;
        if j >= self.cfg.k {
            return Err(Error::InvalidArgument(format!("index {j} out of range")));
        }
        let x = self.x_node(g, x)?;
        self.log_r_node(g, z0, zj, j, x, path)
    }

    /// Common-`z0` joint draw with all densities live.
    pub fn sample_joint(
        &self,
        g: &mut Graph<'_>,
        noise: &JointNoise,
        x: Option<&[f64]>,
    ) -> Result<JointSample> {
        self.sample(g, noise, x, Z0Mode::Common, &PathPlan::LIVE, true)
    }

    /// Fresh `z0` for every index.
    pub fn sample_joint_independent_z0(
        &self,
        g: &mut Graph<'_>,
        noise: &JointNoise,
        x: Option<&[f64]>,
    ) -> Result<JointSample> {
        self.sample(g, noise, x, Z0Mode::Independent, &PathPlan::LIVE, true)
    }

    pub fn sample(
        &self,
        g: &mut Graph<'_>,
        noise: &JointNoise,
        x: Option<&[f64]>,
        mode: Z0Mode,
        plan: &PathPlan,
        need_cross: bool,
    ) -> Result<JointSample> {
        let k = self.cfg.k;
        let n_z0 = match mode {
            Z0Mode::Common => 1,
            Z0Mode::Independent => k,
        };
        check_dim("z0 noise draws", n_z0, noise.z0.len())?;
        check_dim("z noise draws", k, noise.z.len())?;
        let xn = self.x_node(g, x)?;

        let mut out = JointSample {
            z0: Vec::with_capacity(k),
            z: Vec::with_capacity(k),
            log_q0: Vec::with_capacity(k),
            log_q: Vec::with_capacity(k),
            log_r: Vec::with_capacity(k),
            cross_log_q: need_cross.then(|| Vec::with_capacity(k)),
            noise: noise.clone(),
        };

        let q0_s = self.q0_node(g, xn, plan.base_sample)?;
        let q0_d = if plan.densities == plan.base_sample {
            q0_s
        } else {
            self.q0_node(g, xn, plan.densities)?
        };

        for t in 0..n_z0 {
            let z0 = rsample(&mut g.tape, q0_s, &noise.z0[t])?;
            let log_q0 = log_density(&mut g.tape, q0_d, z0)?;
            let h_s = self.hidden(g, z0, xn, plan.cond_sample)?;
            let h_d = if plan.densities == plan.cond_sample {
                h_s
            } else {
                self.hidden(g, z0, xn, plan.densities)?
            };
            // Density heads at this z0, built on demand.
            let mut dens: Vec<Option<GaussianNode>> = vec![None; k];
            let js: Vec<usize> = match mode {
                Z0Mode::Common => (0..k).collect(),
                Z0Mode::Independent => vec![t],
            };
            for j in js {
                let gs = self.heads[j].forward(g, h_s, z0, plan.cond_sample)?;
                if plan.densities == plan.cond_sample {
                    dens[j] = Some(gs);
                }
                let zj = rsample(&mut g.tape, gs, &noise.z[j])?;
                let log_qj = if need_cross {
                    let mut row = Vec::with_capacity(k);
                    for i in 0..k {
                        let gi = match dens[i] {
                            Some(gi) => gi,
                            None => {
                                let gi = self.heads[i].forward(g, h_d, z0, plan.densities)?;
                                dens[i] = Some(gi);
                                gi
                            }
                        };
                        row.push(log_density(&mut g.tape, gi, zj)?);
                    }
                    let diag = row[j];
                    let v = g.tape.concat(&row)?;
                    out.cross_log_q.as_mut().expect("cross requested").push(v);
                    diag
                } else {
                    let gd = match dens[j] {
                        Some(gd) => gd,
                        None => self.heads[j].forward(g, h_d, z0, plan.densities)?,
                    };
                    log_density(&mut g.tape, gd, zj)?
                };
                let log_r = self.log_r_node(g, z0, zj, j, xn, plan.reverse)?;
                out.z0.push(Some(z0));
                out.z.push(zj);
                out.log_q0.push(Some(log_q0));
                out.log_q.push(log_qj);
                out.log_r.push(Some(log_r));
            }
        }
        // Restore index order for the cross-density list (already in order).
        Ok(out)
    }

    /// Means `mu_j(z0)` of every conditional at a fixed `z0`.
    pub fn head_means(
        &self,
        store: &ParamStore,
        z0: &[f64],
        x: Option<&[f64]>,
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(store);
        check_dim("z0", self.cfg.dim_z0, z0.len())?;
        let z0n = g.tape.vector_const(z0);
        let xn = self.x_node(&mut g, x)?;
        let h = self.hidden(&mut g, z0n, xn, ParamPath::Detached)?;
        self.heads
            .iter()
            .map(|head| {
                let gn = head.forward(&mut g, h, z0n, ParamPath::Detached)?;
                Ok(g.tape.value(gn.mean).to_vec())
            })
            .collect()
    }

    /// Current mean of `q0` (for a given input when amortized).
    pub fn base_mean(&self, store: &ParamStore, x: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let xn = self.x_node(&mut g, x)?;
        let q0 = self.q0_node(&mut g, xn, ParamPath::Detached)?;
        Ok(g.tape.value(q0.mean).to_vec())
    }
}

/// Mean pairwise Euclidean distance between vectors.
pub fn mean_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d: f64 = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            acc += d.sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// `K` independent Gaussians with exact marginals (IWLB when all are the same).
pub fn sample_independent(
    g: &mut Graph<'_>,
    proposals: &[&dyn GaussianSource],
    noise: &JointNoise,
    plan: &PathPlan,
    need_cross: bool,
) -> Result<JointSample> {
    let k = proposals.len();
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    check_dim("z noise draws", k, noise.z.len())?;
    let samplers = proposals
        .iter()
        .map(|q| q.node(g, plan.cond_sample))
        .collect::<Result<Vec<_>>>()?;
    let dens = if plan.densities == plan.cond_sample {
        samplers.clone()
    } else {
        proposals
            .iter()
            .map(|q| q.node(g, plan.densities))
            .collect::<Result<Vec<_>>>()?
    };
    let mut z = Vec::with_capacity(k);
    let mut log_q = Vec::with_capacity(k);
    let mut cross = need_cross.then(|| Vec::with_capacity(k));
    for j in 0..k {
        let zj = rsample(&mut g.tape, samplers[j], &noise.z[j])?;
        if let Some(cross) = cross.as_mut() {
            let row = dens
                .iter()
                .map(|d| log_density(&mut g.tape, *d, zj))
                .collect::<Result<Vec<_>>>()?;
            log_q.push(row[j]);
            cross.push(g.tape.concat(&row)?);
        } else {
            log_q.push(log_density(&mut g.tape, dens[j], zj)?);
        }
        z.push(zj);
    }
    Ok(JointSample {
        z0: vec![None; k],
        z,
        log_q0: vec![None; k],
        log_q,
        log_r: vec![None; k],
        cross_log_q: cross,
        noise: noise.clone(),
    })
}

/// One Markov transition `q(z_j | z_{j-1})`.
#[derive(Clone, Debug)]
pub struct Transition {
    pub trunk: Linear,
    pub head: Head,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarkovConfig {
    pub k: usize,
    pub dim_z: usize,
    pub hidden: usize,
}

/// `z1 ~ q1`, `zj ~ qj(. | z_{j-1})`, with reverse kernels `rj(z_{j-1} | zj)`.
///
/// The weight of index `j` treats the prefix `z1..z_{j-1}` as auxiliary:
/// `log w_j = log p(zj) + sum_{i<=j} log r_i(z_{i-1} | z_i) - log q1(z1) - sum_{i<=j} log q_i(z_i | z_{i-1})`,
/// which has expectation `p(x)` for every `j`. In the returned sample,
/// `log_q0[j]` holds `log q1(z1)` and `log_q[j]`, `log_r[j]` hold the two
/// transition sums (for `j = 1`: `log q1(z1)` alone).
#[derive(Clone, Debug)]
pub struct MarkovProposal {
    pub cfg: MarkovConfig,
    pub first: LearnableGaussian,
    pub transitions: Vec<Transition>,
    pub reverse: Vec<GaussianMlp>,
}

impl MarkovProposal {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: MarkovConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.k == 0 {
            return Err(Error::InvalidArgument("K must be at least 1".into()));
        }
        let group = ParamGroup::Inference;
        let first = LearnableGaussian::new(
            store,
            &format!("{name}.q1"),
            &DiagGaussian::standard(cfg.dim_z),
            group,
        );
        let transitions = (1..cfg.k)
            .map(|j| Transition {
                trunk: Linear::new(
                    store,
                    &format!("{name}.t{j}.trunk"),
                    cfg.dim_z,
                    cfg.hidden,
                    group,
                    rng,
                ),
                head: Head::new(
                    store,
                    &format!("{name}.t{j}.head"),
                    cfg.hidden,
                    cfg.dim_z,
                    cfg.dim_z,
                    group,
                    rng,
                ),
            })
            .collect();
        let reverse = (1..cfg.k)
            .map(|j| {
                GaussianMlp::new(
                    store,
                    &format!("{name}.r{j}"),
                    cfg.dim_z,
                    &[cfg.hidden],
                    cfg.dim_z,
                    group,
                    rng,
                )
            })
            .collect();
        Ok(MarkovProposal {
            cfg,
            first,
            transitions,
            reverse,
        })
    }

    pub fn k(&self) -> usize {
        self.cfg.k
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> JointNoise {
        JointNoise::draw(rng, 0, 0, self.cfg.k, self.cfg.dim_z)
    }

    /// Transition `q_{j+1}(. | prev)` (index `j` counts from the second sample).
    pub fn transition(
        &self,
        g: &mut Graph<'_>,
        j: usize,
        prev: Var,
        path: ParamPath,
    ) -> Result<GaussianNode> {
        let tr = &self.transitions[j];
        let pre = tr.trunk.forward(g, prev, path)?;
        let h = g.tape.elu(pre)?;
        tr.head.forward(g, h, prev, path)
    }

    pub fn sample_markov(
        &self,
        g: &mut Graph<'_>,
        noise: &JointNoise,
        plan: &PathPlan,
    ) -> Result<JointSample> {
        let k = self.cfg.k;
        check_dim("z noise draws", k, noise.z.len())?;
        let q1 = self.first.node(g, plan.cond_sample)?;
        let z1 = rsample(&mut g.tape, q1, &noise.z[0])?;
        let q1d = if plan.densities == plan.cond_sample {
            q1
        } else {
            self.first.node(g, plan.densities)?
        };
        let log_q1 = log_density(&mut g.tape, q1d, z1)?;

        let mut z = vec![z1];
        let mut log_q = vec![log_q1];
        let mut log_q0 = vec![None];
        let mut log_r = vec![None];
        let mut fwd_acc: Option<Var> = None;
        let mut rev_acc: Option<Var> = None;
        for j in 1..k {
            let prev = z[j - 1];
            let step = self.transition(g, j - 1, prev, plan.cond_sample)?;
            let zj = rsample(&mut g.tape, step, &noise.z[j])?;
            let step_d = if plan.densities == plan.cond_sample {
                step
            } else {
                self.transition(g, j - 1, prev, plan.densities)?
            };
            let lq = log_density(&mut g.tape, step_d, zj)?;
            let r = self.reverse[j - 1].forward(g, zj, plan.reverse)?;
            let lr = log_density(&mut g.tape, r, prev)?;
            let f = match fwd_acc {
                Some(acc) => g.tape.add(acc, lq)?,
                None => lq,
            };
            let b = match rev_acc {
                Some(acc) => g.tape.add(acc, lr)?,
                None => lr,
            };
            fwd_acc = Some(f);
            rev_acc = Some(b);
            z.push(zj);
            log_q.push(f);
            log_q0.push(Some(log_q1));
            log_r.push(Some(b));
        }
        Ok(JointSample {
            z0: vec![None; k],
            z,
            log_q0,
            log_q,
            log_r,
            cross_log_q: None,
            noise: noise.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(k: usize, seed: u64) -> (ParamStore, HierarchicalProposal) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p =
            HierarchicalProposal::new(&mut store, "h", HierarchicalConfig::toy(k, 2, 8), &mut rng)
                .unwrap();
        (store, p)
    }

    fn values(g: &Graph<'_>, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter().map(|v| g.tape.value(*v).to_vec()).collect()
    }

    #[test]
    fn common_z0_is_shared_and_k1_has_single_sample() {
        let (store, p) = toy(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = p.draw_noise(&mut rng, Z0Mode::Common);
        let mut g = Graph::new(&store);
        let js = p.sample_joint(&mut g, &noise, None).unwrap();
        assert_eq!(js.k(), 3);
        let z0 = js.z0[0].unwrap();
        assert!(js.z0.iter().all(|v| *v == Some(z0)));
        assert_eq!(js.cross_log_q.as_ref().unwrap().len(), 3);
        for (j, row) in js.cross_log_q.as_ref().unwrap().iter().enumerate() {
            assert_eq!(g.tape.value(*row)[j], g.tape.scalar(js.log_q[j]));
        }

        let (store1, p1) = toy(1, 1);
        let noise1 = p1.draw_noise(&mut rng, Z0Mode::Common);
        let mut g1 = Graph::new(&store1);
        let js1 = p1.sample_joint(&mut g1, &noise1, None).unwrap();
        assert_eq!(js1.k(), 1);
    }

    #[test]
    fn fixed_seed_gives_identical_samples() {
        let (store, p) = toy(4, 9);
        for mode in [Z0Mode::Common, Z0Mode::Independent] {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(77);
                let noise = p.draw_noise(&mut rng, mode);
                let mut g = Graph::new(&store);
                let js = p.sample(&mut g, &noise, None, mode, &PathPlan::LIVE, true).unwrap();
                let mut out = values(&g, &js.z);
                out.extend(values(&g, &js.log_q));
                out.extend(values(&g, &js.log_r.iter().map(|v| v.unwrap()).collect::<Vec<_>>()));
                out
            };
            let a = run();
            let b = run();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn independent_mode_k1_matches_common() {
        let (store, p) = toy(1, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let noise = p.draw_noise(&mut rng, Z0Mode::Common);
        let mut g = Graph::new(&store);
        let a = p.sample_joint(&mut g, &noise, None).unwrap();
        let b = p.sample_joint_independent_z0(&mut g, &noise, None).unwrap();
        assert_eq!(g.tape.value(a.z[0]), g.tape.value(b.z[0]));
        assert_eq!(g.tape.scalar(a.log_q[0]), g.tape.scalar(b.log_q[0]));
    }

    #[test]
    fn plans_do_not_change_values() {
        let (store, p) = toy(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let noise = p.draw_noise(&mut rng, Z0Mode::Common);
        let mut g = Graph::new(&store);
        let a = p.sample(&mut g, &noise, None, Z0Mode::Common, &PathPlan::LIVE, true).unwrap();
        for plan in [PathPlan::DREG_CONDITIONAL, PathPlan::DREG_SHARED] {
            let b = p.sample(&mut g, &noise, None, Z0Mode::Common, &plan, true).unwrap();
            assert_eq!(values(&g, &a.z), values(&g, &b.z));
            assert_eq!(values(&g, &a.log_q), values(&g, &b.log_q));
        }
    }

    #[test]
    fn prior_reverse_model_equals_q0_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut cfg = HierarchicalConfig::toy(2, 2, 8);
        cfg.reverse = ReverseKind::Prior;
        let p = HierarchicalProposal::new(&mut store, "h", cfg, &mut rng).unwrap();
        let noise = p.draw_noise(&mut rng, Z0Mode::Common);
        let mut g = Graph::new(&store);
        let js = p.sample_joint(&mut g, &noise, None).unwrap();
        for j in 0..2 {
            assert_eq!(
                g.tape.scalar(js.log_r[j].unwrap()),
                g.tape.scalar(js.log_q0[j].unwrap())
            );
        }
    }

    #[test]
    fn per_index_reverse_models_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut cfg = HierarchicalConfig::toy(3, 2, 8);
        cfg.per_j_r = true;
        let p = HierarchicalProposal::new(&mut store, "h", cfg, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let z0 = g.tape.vector_const(&[0.3, -0.2]);
        let zj = g.tape.vector_const(&[1.0, 0.5]);
        let vals: Vec<f64> = (0..3)
            .map(|j| {
                let v = p.log_r(&mut g, z0, zj, j, None, ParamPath::Live).unwrap();
                g.tape.scalar(v)
            })
            .collect();
        assert!(vals[0] != vals[1] && vals[1] != vals[2] && vals[0] != vals[2]);
        assert!(p.log_r(&mut g, zj, z0, 5, None, ParamPath::Live).is_err());
        let bad = g.tape.vector_const(&[1.0]);
        assert!(p.log_r(&mut g, bad, zj, 0, None, ParamPath::Live).is_err());
    }

    #[test]
    fn log_r_gradient_matches_finite_differences() {
        let (mut store, p) = toy(2, 12);
        let z0v = [0.4, -0.7];
        let zjv = [1.1, 0.2];
        let eval = |store: &ParamStore| -> (f64, Vec<f64>) {
            let mut g = Graph::new(store);
            let z0 = g.tape.vector_const(&z0v);
            let zj = g.tape.vector_const(&zjv);
            let v = p.log_r(&mut g, z0, zj, 1, None, ParamPath::Live).unwrap();
            let grads = g.tape.backward(v).unwrap();
            (g.tape.scalar(v), g.param_gradient(&grads))
        };
        let (_, grad) = eval(&store);
        let ReverseModel::Shared(net) = &p.reverse else { panic!() };
        let mut checked = 0;
        for layer in &net.net.layers {
            for id in [layer.w, layer.b] {
                let off = store.block(id).offset;
                for i in 0..store.block(id).len() {
                    let idx = off + i;
                    let orig = store.values()[idx];
                    let h = 1e-5;
                    store.values_mut()[idx] = orig + h;
                    let up = eval(&store).0;
                    store.values_mut()[idx] = orig - h;
                    let dn = eval(&store).0;
                    store.values_mut()[idx] = orig;
                    let fd = (up - dn) / (2.0 * h);
                    assert!((fd - grad[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad[idx]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 20);
    }

    /// Linear-Gaussian head: W_mu = 0, W_sigma = 0, so q_j(z|z0) = N(b + a z0, s^2).
    fn linear_heads(store: &mut ParamStore, p: &HierarchicalProposal, a: &[f64], b: &[f64], s: &[f64]) {
        for (j, head) in p.heads.iter().enumerate() {
            store.get_mut(head.w_mu).iter_mut().for_each(|w| *w = 0.0);
            store.get_mut(head.w_sigma).iter_mut().for_each(|w| *w = 0.0);
            store.set(head.b_mu, &[b[j]]);
            store.set(head.w_s, &[a[j]]);
            store.set(head.b_sigma, &[raw_for_scale(s[j])]);
        }
    }

    fn toy1d(k: usize, seed: u64) -> (ParamStore, HierarchicalProposal) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p =
            HierarchicalProposal::new(&mut store, "h", HierarchicalConfig::toy(k, 1, 4), &mut rng)
                .unwrap();
        (store, p)
    }

    struct Moments {
        n: f64,
        s1: f64,
        s2: f64,
        s11: f64,
        s22: f64,
        s12: f64,
    }

    impl Moments {
        fn new() -> Self {
            Moments { n: 0.0, s1: 0.0, s2: 0.0, s11: 0.0, s22: 0.0, s12: 0.0 }
        }
        fn push(&mut self, a: f64, b: f64) {
            self.n += 1.0;
            self.s1 += a;
            self.s2 += b;
            self.s11 += a * a;
            self.s22 += b * b;
            self.s12 += a * b;
        }
        fn cov(&self) -> f64 {
            self.s12 / self.n - (self.s1 / self.n) * (self.s2 / self.n)
        }
        fn var1(&self) -> f64 {
            self.s11 / self.n - (self.s1 / self.n).powi(2)
        }
        fn var2(&self) -> f64 {
            self.s22 / self.n - (self.s2 / self.n).powi(2)
        }
        fn mean1(&self) -> f64 {
            self.s1 / self.n
        }
    }

    fn draw_pairs(
        store: &ParamStore,
        p: &HierarchicalProposal,
        mode: Z0Mode,
        n: usize,
    ) -> (Moments, Vec<[f64; 3]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut m = Moments::new();
        let mut raw = Vec::with_capacity(n);
        for _ in 0..n {
            let noise = p.draw_noise(&mut rng, mode);
            let mut g = Graph::new(store);
            let js = p.sample(&mut g, &noise, None, mode, &PathPlan::LIVE, false).unwrap();
            let a = g.tape.value(js.z[0])[0];
            let b = g.tape.value(js.z[1])[0];
            let z0 = g.tape.value(js.z0[0].unwrap())[0];
            m.push(a, b);
            raw.push([a, b, z0]);
        }
        (m, raw)
    }

    #[test]
    fn decoupled_heads_have_head_marginals() {
        let (mut store, p) = toy1d(2, 21);
        linear_heads(&mut store, &p, &[0.0, 0.0], &[1.5, -0.5], &[0.7, 1.3]);
        let n = 100_000;
        let (m, _) = draw_pairs(&store, &p, Z0Mode::Common, n);
        let nf = n as f64;
        assert!((m.mean1() - 1.5).abs() < 3.0 * (0.49 / nf).sqrt());
        assert!((m.var1() - 0.49).abs() < 3.0 * (2.0 * 0.49f64.powi(2) / nf).sqrt());
        assert!((m.s2 / nf + 0.5).abs() < 3.0 * (1.69 / nf).sqrt());
        assert!((m.var2() - 1.69).abs() < 3.0 * (2.0 * 1.69f64.powi(2) / nf).sqrt());
    }

    #[test]
    fn independent_z0_decorrelates_and_common_z0_correlates() {
        let (mut store, p) = toy1d(2, 22);
        linear_heads(&mut store, &p, &[2.0, 1.5], &[0.0, 0.0], &[0.5, 0.5]);
        let n = 100_000;
        let nf = n as f64;
        let (ind, _) = draw_pairs(&store, &p, Z0Mode::Independent, n);
        // Var(z1) = 4.25, Var(z2) = 2.5 under independence; SE of the
        // covariance estimate is sqrt(Var1 Var2 / n).
        let se = (ind.var1() * ind.var2() / nf).sqrt();
        assert!(ind.cov().abs() < 3.0 * se, "cov {}", ind.cov());

        let (com, raw) = draw_pairs(&store, &p, Z0Mode::Common, n);
        // Analytic covariance a1 a2 Var(z0) = 3.
        let se = ((com.var1() * com.var2() + 9.0) / nf).sqrt();
        assert!((com.cov() - 3.0).abs() < 3.0 * se, "cov {}", com.cov());

        // Conditional independence: residuals after removing a_j z0 are uncorrelated.
        let mut res = Moments::new();
        for [a, b, z0] in raw {
            res.push(a - 2.0 * z0, b - 1.5 * z0);
        }
        let se = (res.var1() * res.var2() / nf).sqrt();
        assert!(res.cov().abs() < 3.0 * se, "partial cov {}", res.cov());
    }

    #[test]
    fn hierarchical_marginal_is_the_infinite_mixture() {
        // z0 ~ N(0,1), z | z0 ~ N(b + a z0, s^2)  =>  z ~ N(b, a^2 + s^2).
        let (mut store, p) = toy1d(2, 23);
        linear_heads(&mut store, &p, &[1.2, -0.4], &[0.3, 2.0], &[0.6, 0.9]);
        let n = 100_000;
        let nf = n as f64;
        let (m, _) = draw_pairs(&store, &p, Z0Mode::Common, n);
        let v1 = 1.44 + 0.36;
        let v2 = 0.16 + 0.81;
        assert!((m.mean1() - 0.3).abs() < 3.0 * (v1 / nf).sqrt());
        assert!((m.var1() - v1).abs() < 3.0 * (2.0 * v1 * v1 / nf).sqrt());
        assert!((m.s2 / nf - 2.0).abs() < 3.0 * (v2 / nf).sqrt());
        assert!((m.var2() - v2).abs() < 3.0 * (2.0 * v2 * v2 / nf).sqrt());
    }

    fn markov(k: usize, seed: u64) -> (ParamStore, MarkovProposal) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = MarkovProposal::new(
            &mut store,
            "m",
            MarkovConfig {
                k,
                dim_z: 1,
                hidden: 4,
            },
            &mut rng,
        )
        .unwrap();
        (store, m)
    }

    #[test]
    fn markov_k1_is_a_single_gaussian_draw() {
        let (store, m) = markov(1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise = m.draw_noise(&mut rng);
        let mut g = Graph::new(&store);
        let js = m.sample_markov(&mut g, &noise, &PathPlan::LIVE).unwrap();
        assert_eq!(js.k(), 1);
        assert_eq!(g.tape.value(js.z[0]), noise.z[0].as_slice());
        let expected = DiagGaussian::standard(1).log_density(&noise.z[0]);
        assert!((g.tape.scalar(js.log_q[0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn near_deterministic_identity_chain_repeats_first_sample() {
        let (mut store, m) = markov(4, 2);
        for tr in &m.transitions {
            store.get_mut(tr.head.w_mu).iter_mut().for_each(|w| *w = 0.0);
            store.get_mut(tr.head.w_sigma).iter_mut().for_each(|w| *w = 0.0);
            store.set(tr.head.b_mu, &[0.0]);
            store.set(tr.head.w_s, &[1.0]);
            store.set(tr.head.b_sigma, &[-40.0]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = m.draw_noise(&mut rng);
        let mut g = Graph::new(&store);
        let js = m.sample_markov(&mut g, &noise, &PathPlan::LIVE).unwrap();
        let z1 = g.tape.value(js.z[0])[0];
        for j in 1..4 {
            assert!((g.tape.value(js.z[j])[0] - z1).abs() < 1e-5);
        }
    }

    #[test]
    fn uncoupled_chain_matches_independent_draws() {
        let (mut store, m) = markov(3, 4);
        for tr in &m.transitions {
            store.get_mut(tr.head.w_mu).iter_mut().for_each(|w| *w = 0.0);
            store.get_mut(tr.head.w_sigma).iter_mut().for_each(|w| *w = 0.0);
            store.get_mut(tr.head.w_s).iter_mut().for_each(|w| *w = 0.0);
            store.set(tr.head.b_mu, &[0.0]);
            store.set(tr.head.b_sigma, &[raw_for_scale(1.0)]);
        }
        let n = 100_000;
        let nf = n as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mom = Moments::new();
        for _ in 0..n {
            let noise = m.draw_noise(&mut rng);
            let mut g = Graph::new(&store);
            let js = m.sample_markov(&mut g, &noise, &PathPlan::LIVE).unwrap();
            mom.push(g.tape.value(js.z[0])[0], g.tape.value(js.z[2])[0]);
        }
        // Same statistics as two independent N(0,1) draws.
        assert!(mom.mean1().abs() < 3.0 * (1.0 / nf).sqrt());
        assert!((mom.var2() - 1.0).abs() < 3.0 * (2.0 / nf).sqrt());
        assert!(mom.cov().abs() < 3.0 * (1.0 / nf).sqrt());
    }

    #[test]
    fn pairwise_distance() {
        let pts = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![0.0, 0.0]];
        assert!((mean_pairwise_distance(&pts) - 10.0 / 3.0).abs() < 1e-15);
        assert_eq!(mean_pairwise_distance(&pts[..1]), 0.0);
    }
}
