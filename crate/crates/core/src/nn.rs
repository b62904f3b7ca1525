//! Small dense networks on the tape: affine layers, ELU multilayer
//! perceptrons and MLPs that emit a diagonal Gaussian.

use rand::Rng;

use crate::autodiff::Var;
use crate::densities::{positive_scale, raw_for_scale, GaussianNode};
use crate::error::{check_dim, Result};
use crate::params::{Graph, ParamGroup, ParamId, ParamPath, ParamStore};

/// `W x + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let w = store.add_weight(format!("{name}.w"), out_dim, in_dim, group, rng);
        let b = store.add_filled(format!("{name}.b"), out_dim, 1, group, 0.0);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, path: ParamPath) -> Result<Var> {
        check_dim("linear input", self.in_dim, g.tape.shape(x).len())?;
        let w = g.param(self.w, path);
        let b = g.param(self.b, path);
        let wx = g.tape.matvec(w, x)?;
        Ok(g.tape.add(wx, b)?)
    }
}

/// Affine layers with ELU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists the input width, hidden widths and output width.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], group, rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn output_bias(&self) -> ParamId {
        self.layers[self.layers.len() - 1].b
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, path: ParamPath) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h, path)?;
            if i + 1 < self.layers.len() {
                h = g.tape.elu(h)?;
            }
        }
        Ok(h)
    }
}

/// MLP whose output is split into a mean and a softplus scale.
#[derive(Clone, Debug)]
pub struct GaussianMlp {
    pub net: Mlp,
    pub dim: usize,
}

impl GaussianMlp {
    /// Output scale starts near 1: the raw-scale bias is `softplus^-1(1)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        dim: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![in_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * dim);
        let net = Mlp::new(store, name, &sizes, group, rng);
        let bias = net.output_bias();
        let raw1 = raw_for_scale(1.0);
        store.get_mut(bias)[dim..].iter_mut().for_each(|b| *b = raw1);
        GaussianMlp { net, dim }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, path: ParamPath) -> Result<GaussianNode> {
        let out = self.net.forward(g, x, path)?;
        let mean = g.tape.slice(out, 0, self.dim)?;
        let raw = g.tape.slice(out, self.dim, self.dim)?;
        let scale = positive_scale(&mut g.tape, raw)?;
        Ok(GaussianNode { mean, scale })
    }
}
