//! Probability building blocks.
//!
//! [`DiagGaussian`] is the numeric form of a diagonal normal and
//! [`GaussianNode`] its on-tape form. [`LearnableGaussian`] stores the mean
//! and a pre-softplus scale as parameters. Models implement [`Model`], which
//! splits `log p(x, z)` into the likelihood and prior parts so that annealing
//! can scale only the latter.
//!
//! The 2D targets are unnormalized log-densities:
//!
//! - `ring`: `-(|z|^2 - 9)^2 / 18`, an annulus of radius 3 and radial width about 0.5.
//! - `mixture8`: eight equally weighted `N(c_k, 0.3^2 I)` with `c_k` on the circle
//!   of radius 4 at angles `2 pi k / 8`. This one is normalized.
//! - `crescent`: `-0.5 ((|z|^2 - 4) / 1.6)^2 + log(e^{-0.5 ((z_1 - 2)/0.6)^2} + e^{-0.5 ((z_1 + 2)/0.6)^2})`,
//!   two crescents on the circle of radius 2.

use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{self, softplus, softplus_inv, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::params::{Graph, ParamGroup, ParamId, ParamPath, ParamStore};

/// Lower bound added to every learned standard deviation.
pub const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_dim("gaussian scale", mean.len(), scale.len())?;
        if let Some(s) = scale.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "gaussian scale must be positive and finite, got {s}"
            )));
        }
        Ok(DiagGaussian { mean, scale })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        autodiff::normal_logpdf(z, &self.mean, &self.scale)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.scale)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Constant copy on a tape.
    pub fn on_tape(&self, tape: &mut Tape) -> GaussianNode {
        GaussianNode {
            mean: tape.vector_const(&self.mean),
            scale: tape.vector_const(&self.scale),
        }
    }
}

/// A diagonal Gaussian whose mean and scale are tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct GaussianNode {
    pub mean: Var,
    pub scale: Var,
}

impl GaussianNode {
    pub fn dim(&self, tape: &Tape) -> usize {
        tape.shape(self.mean).len()
    }

    pub fn to_diag(&self, tape: &Tape) -> Result<DiagGaussian> {
        DiagGaussian::new(
            tape.value(self.mean).to_vec(),
            tape.value(self.scale).to_vec(),
        )
    }
}

/// Reparameterized sample `mean + scale * noise`.
pub fn rsample(tape: &mut Tape, g: GaussianNode, noise: &[f64]) -> Result<Var> {
    check_dim("rsample noise", g.dim(tape), noise.len())?;
    let eps = tape.vector_const(noise);
    let spread = tape.mul(g.scale, eps)?;
    Ok(tape.add(g.mean, spread)?)
}

pub fn log_density(tape: &mut Tape, g: GaussianNode, z: Var) -> Result<Var> {
    check_dim("log_density point", g.dim(tape), tape.shape(z).len())?;
    Ok(tape.normal_logpdf(z, g.mean, g.scale)?)
}

/// `softplus(raw) + SCALE_FLOOR` on the tape.
pub fn positive_scale(tape: &mut Tape, raw: Var) -> Result<Var> {
    let sp = tape.softplus(raw)?;
    Ok(tape.shift(sp, SCALE_FLOOR)?)
}

/// Raw parameter value giving scale `s` after [`positive_scale`].
pub fn raw_for_scale(s: f64) -> f64 {
    softplus_inv((s - SCALE_FLOOR).max(f64::MIN_POSITIVE))
}

/// Anything that can put a diagonal Gaussian on a graph.
pub trait GaussianSource {
    fn dim(&self) -> usize;
    fn node(&self, g: &mut Graph<'_>, path: ParamPath) -> Result<GaussianNode>;
}

impl GaussianSource for DiagGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn node(&self, g: &mut Graph<'_>, _path: ParamPath) -> Result<GaussianNode> {
        Ok(self.on_tape(&mut g.tape))
    }
}

/// Diagonal Gaussian with a free mean and a softplus-parameterized scale.
#[derive(Clone, Debug)]
pub struct LearnableGaussian {
    pub mean: ParamId,
    pub raw_scale: ParamId,
    dim: usize,
}

impl LearnableGaussian {
    pub fn new(store: &mut ParamStore, name: &str, init: &DiagGaussian, group: ParamGroup) -> Self {
        let dim = init.dim();
        let mean = store.add(format!("{name}.mean"), dim, 1, group, init.mean.clone());
        let raw = init.scale.iter().map(|s| raw_for_scale(*s)).collect();
        let raw_scale = store.add(format!("{name}.raw_scale"), dim, 1, group, raw);
        LearnableGaussian {
            mean,
            raw_scale,
            dim,
        }
    }

    pub fn set(&self, store: &mut ParamStore, value: &DiagGaussian) -> Result<()> {
        check_dim("gaussian", self.dim, value.dim())?;
        store.set(self.mean, &value.mean);
        let raw: Vec<f64> = value.scale.iter().map(|s| raw_for_scale(*s)).collect();
        store.set(self.raw_scale, &raw);
        Ok(())
    }

    pub fn current(&self, store: &ParamStore) -> DiagGaussian {
        DiagGaussian {
            mean: store.get(self.mean).to_vec(),
            scale: store
                .get(self.raw_scale)
                .iter()
                .map(|r| softplus(*r) + SCALE_FLOOR)
                .collect(),
        }
    }
}

impl GaussianSource for LearnableGaussian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn node(&self, g: &mut Graph<'_>, path: ParamPath) -> Result<GaussianNode> {
        let mean = g.param(self.mean, path);
        let raw = g.param(self.raw_scale, path);
        let scale = positive_scale(&mut g.tape, raw)?;
        Ok(GaussianNode { mean, scale })
    }
}

/// `log p(x | z)` and `log p(z)` as scalar nodes.
#[derive(Clone, Copy, Debug)]
pub struct JointTerms {
    pub likelihood: Var,
    /// `None` when the model has no separate prior (unnormalized targets).
    pub prior: Option<Var>,
}

/// A joint density `p(x, z)` with `x` fixed.
pub trait Model {
    fn dim(&self) -> usize;
    fn log_joint(&self, g: &mut Graph<'_>, z: Var, path: ParamPath) -> Result<JointTerms>;
}

/// `z ~ N(0, I)`, `x | z ~ N(z, diag(sigma_x^2))`.
#[derive(Clone, Debug)]
pub struct ConjugateGaussianModel {
    pub sigma_x: Vec<f64>,
    pub x: Vec<f64>,
}

impl ConjugateGaussianModel {
    pub fn new(sigma_x: Vec<f64>, x: Vec<f64>) -> Result<Self> {
        check_dim("observation", sigma_x.len(), x.len())?;
        if sigma_x.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("sigma_x must be positive".into()));
        }
        Ok(ConjugateGaussianModel { sigma_x, x })
    }

    /// Exact `log N(x; 0, (1 + sigma_x^2) I)`.
    pub fn log_marginal(&self) -> f64 {
        let scale: Vec<f64> = self.sigma_x.iter().map(|s| (1.0 + s * s).sqrt()).collect();
        autodiff::normal_logpdf(&self.x, &vec![0.0; self.x.len()], &scale)
    }

    /// `z | x ~ N(x / (1 + s^2), s^2 / (1 + s^2))` per dimension.
    pub fn posterior(&self) -> DiagGaussian {
        let (mean, scale) = self
            .x
            .iter()
            .zip(&self.sigma_x)
            .map(|(x, s)| {
                let prec = 1.0 + 1.0 / (s * s);
                (x / (1.0 + s * s), (1.0 / prec).sqrt())
            })
            .unzip();
        DiagGaussian { mean, scale }
    }

    pub fn log_joint_value(&self, z: &[f64]) -> f64 {
        autodiff::normal_logpdf(&self.x, z, &self.sigma_x)
            + autodiff::normal_logpdf(z, &vec![0.0; z.len()], &vec![1.0; z.len()])
    }
}

impl Model for ConjugateGaussianModel {
    fn dim(&self) -> usize {
        self.x.len()
    }

    fn log_joint(&self, g: &mut Graph<'_>, z: Var, _path: ParamPath) -> Result<JointTerms> {
        let t = &mut g.tape;
        check_dim("latent", self.x.len(), t.shape(z).len())?;
        let x = t.vector_const(&self.x);
        let sx = t.vector_const(&self.sigma_x);
        let likelihood = t.normal_logpdf(x, z, sx)?;
        let zero = t.vector_const(&vec![0.0; self.x.len()]);
        let one = t.vector_const(&vec![1.0; self.x.len()]);
        let prior = t.normal_logpdf(z, zero, one)?;
        Ok(JointTerms {
            likelihood,
            prior: Some(prior),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetKind {
    Ring,
    Mixture8,
    Crescent,
}

const MIX_RADIUS: f64 = 4.0;
const MIX_SCALE: f64 = 0.3;

/// A fixed unnormalized 2D density.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TargetDensity {
    pub kind: TargetKind,
}

impl TargetDensity {
    pub fn new(kind: TargetKind) -> Self {
        TargetDensity { kind }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        let kind = match name {
            "ring" => TargetKind::Ring,
            "mixture8" | "mixture-of-8" => TargetKind::Mixture8,
            "crescent" => TargetKind::Crescent,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown target '{other}' (expected ring, mixture8 or crescent)"
                )))
            }
        };
        Ok(TargetDensity { kind })
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            TargetKind::Ring => "ring",
            TargetKind::Mixture8 => "mixture8",
            TargetKind::Crescent => "crescent",
        }
    }

    pub fn dim(&self) -> usize {
        2
    }

    /// Known log-normalizer, when there is one.
    pub fn log_normalizer(&self) -> Option<f64> {
        match self.kind {
            TargetKind::Mixture8 => Some(0.0),
            _ => None,
        }
    }

    pub fn mixture_centers() -> Vec<[f64; 2]> {
        (0..8)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 8.0;
                [MIX_RADIUS * a.cos(), MIX_RADIUS * a.sin()]
            })
            .collect()
    }

    pub fn log_unnorm(&self, z: &[f64]) -> f64 {
        let r2 = z[0] * z[0] + z[1] * z[1];
        match self.kind {
            TargetKind::Ring => -(r2 - 9.0).powi(2) / 18.0,
            TargetKind::Mixture8 => {
                let terms: Vec<f64> = Self::mixture_centers()
                    .iter()
                    .map(|c| {
                        (0.125f64).ln()
                            + autodiff::normal_logpdf(z, c, &[MIX_SCALE, MIX_SCALE])
                    })
                    .collect();
                autodiff::logsumexp(&terms)
            }
            TargetKind::Crescent => {
                let radial = -0.5 * ((r2 - 4.0) / 1.6).powi(2);
                let a = -0.5 * ((z[0] - 2.0) / 0.6).powi(2);
                let b = -0.5 * ((z[0] + 2.0) / 0.6).powi(2);
                radial + autodiff::logsumexp(&[a, b])
            }
        }
    }

    pub fn log_unnorm_node(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        check_dim("target point", 2, tape.shape(z).len())?;
        let out = match self.kind {
            TargetKind::Ring => {
                let sq = tape.square(z)?;
                let r2 = tape.sum(sq)?;
                let d = tape.shift(r2, -9.0)?;
                let d2 = tape.square(d)?;
                tape.scale(d2, -1.0 / 18.0)?
            }
            TargetKind::Mixture8 => {
                let scale = tape.vector_const(&[MIX_SCALE, MIX_SCALE]);
                let mut parts = Vec::with_capacity(8);
                for c in Self::mixture_centers() {
                    let mean = tape.vector_const(&c);
                    parts.push(tape.normal_logpdf(z, mean, scale)?);
                }
                let all = tape.concat(&parts)?;
                let lse = tape.logsumexp(all)?;
                tape.shift(lse, (0.125f64).ln())?
            }
            TargetKind::Crescent => {
                let sq = tape.square(z)?;
                let r2 = tape.sum(sq)?;
                let d = tape.shift(r2, -4.0)?;
                let d2 = tape.square(d)?;
                let radial = tape.scale(d2, -0.5 / (1.6 * 1.6))?;
                let z1 = tape.index(z, 0)?;
                let mut bumps = Vec::with_capacity(2);
                for c in [2.0, -2.0] {
                    let u = tape.shift(z1, -c)?;
                    let u2 = tape.square(u)?;
                    bumps.push(tape.scale(u2, -0.5 / (0.6 * 0.6))?);
                }
                let both = tape.concat(&bumps)?;
                let lse = tape.logsumexp(both)?;
                tape.add(radial, lse)?
            }
        };
        Ok(out)
    }
}

/// The fixed 2D target suite.
pub fn target_suite() -> Vec<TargetDensity> {
    [TargetKind::Ring, TargetKind::Mixture8, TargetKind::Crescent]
        .into_iter()
        .map(TargetDensity::new)
        .collect()
}

impl Model for TargetDensity {
    fn dim(&self) -> usize {
        2
    }

    fn log_joint(&self, g: &mut Graph<'_>, z: Var, _path: ParamPath) -> Result<JointTerms> {
        let likelihood = self.log_unnorm_node(&mut g.tape, z)?;
        Ok(JointTerms {
            likelihood,
            prior: None,
        })
    }
}

fn check_binary(x: &[f64]) -> Result<()> {
    match x.iter().find(|v| **v != 0.0 && **v != 1.0) {
        Some(v) => Err(Error::InvalidArgument(format!(
            "bernoulli observation must be 0 or 1, got {v}"
        ))),
        None => Ok(()),
    }
}

/// `sum_i x_i l_i - softplus(l_i)`.
pub fn bernoulli_log_likelihood(tape: &mut Tape, logits: Var, x: &[f64]) -> Result<Var> {
    check_dim("bernoulli observation", tape.shape(logits).len(), x.len())?;
    check_binary(x)?;
    let xv = tape.vector_const(x);
    let lin = tape.mul(logits, xv)?;
    let sp = tape.softplus(logits)?;
    let diff = tape.sub(lin, sp)?;
    Ok(tape.sum(diff)?)
}

/// Fixed-width binary vectors, one example per row.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryDataset {
    rows: Vec<Vec<f64>>,
    dim: usize,
}

impl BinaryDataset {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.len())
            .ok_or_else(|| Error::InvalidArgument("dataset is empty".into()))?;
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::Parse {
                    line: i + 1,
                    detail: format!("expected {dim} values, got {}", r.len()),
                });
            }
            check_binary(r).map_err(|e| Error::Parse {
                line: i + 1,
                detail: e.to_string(),
            })?;
        }
        Ok(BinaryDataset { rows, dim })
    }

    /// Parses space-separated 0/1 integers; blank lines are skipped.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self> {
        let mut rows = Vec::new();
        let mut dim = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let row = trimmed
                .split_whitespace()
                .map(|tok| match tok {
                    "0" => Ok(0.0),
                    "1" => Ok(1.0),
                    other => Err(Error::Parse {
                        line: i + 1,
                        detail: format!("expected 0 or 1, got '{other}'"),
                    }),
                })
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::Parse {
                        line: i + 1,
                        detail: format!("expected {d} values, got {}", row.len()),
                    })
                }
                _ => {}
            }
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    /// Noisy copies of four random binary prototypes (bit-flip rate 0.02).
    pub fn synthetic<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Self {
        let prototypes: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..dim).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
            .collect();
        let rows = (0..n)
            .map(|i| {
                prototypes[i % 4]
                    .iter()
                    .map(|b| if rng.gen_bool(0.02) { 1.0 - b } else { *b })
                    .collect()
            })
            .collect();
        BinaryDataset { rows, dim }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let line: Vec<&str> = r.iter().map(|v| if *v == 1.0 { "1" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}
