//! Flat parameter storage and per-evaluation graph binding.
//!
//! Every learnable tensor is a block in one flat `Vec<f64>`, which keeps the
//! optimizer, Polyak averaging and checkpointing trivial. A [`Graph`] wraps a
//! fresh [`Tape`] and binds blocks to leaves on first use, either live
//! (gradient flows) or detached (stop-gradient).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Shape, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Which side of the model a block belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Proposal, reverse model and weighting networks.
    Inference,
    /// Decoder / likelihood parameters.
    Generative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> Shape {
        Shape::matrix(self.rows, self.cols)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    blocks: Vec<Block>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        init: Vec<f64>,
    ) -> ParamId {
        assert_eq!(init.len(), rows * cols, "initial values do not match shape");
        let offset = self.values.len();
        self.values.extend(init);
        self.blocks.push(Block {
            name: name.into(),
            offset,
            rows,
            cols,
            group,
        });
        ParamId(self.blocks.len() - 1)
    }

    /// Block initialized with N(0, 1/cols) entries.
    pub fn add_weight<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> ParamId {
        let std = 1.0 / (cols.max(1) as f64).sqrt();
        let init = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.add(name, rows, cols, group, init)
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        group: ParamGroup,
        value: f64,
    ) -> ParamId {
        self.add(name, rows, cols, group, vec![value; rows * cols])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, id: ParamId) -> &Block {
        &self.blocks[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        let b = &self.blocks[id.0];
        &self.values[b.offset..b.offset + b.len()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let b = &self.blocks[id.0];
        &mut self.values[b.offset..b.offset + b.len()]
    }

    pub fn set(&mut self, id: ParamId, values: &[f64]) {
        self.get_mut(id).copy_from_slice(values);
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Flat indices of every element belonging to `group`.
    pub fn indices(&self, group: ParamGroup) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.group == group)
            .flat_map(|b| b.offset..b.offset + b.len())
            .collect()
    }

    /// Same layout with different values (e.g. Polyak-averaged parameters).
    pub fn with_values(&self, values: &[f64]) -> ParamStore {
        assert_eq!(values.len(), self.values.len());
        ParamStore {
            blocks: self.blocks.clone(),
            values: values.to_vec(),
        }
    }
}

/// Whether a parameter enters a computation with or without gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamPath {
    Live,
    Detached,
}

/// A tape plus lazily created bindings of parameter blocks.
pub struct Graph<'p> {
    pub tape: Tape,
    store: &'p ParamStore,
    live: Vec<Option<Var>>,
    detached: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        let n = store.blocks.len();
        Graph {
            tape: Tape::new(),
            store,
            live: vec![None; n],
            detached: vec![None; n],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId, path: ParamPath) -> Var {
        let slot = match path {
            ParamPath::Live => &mut self.live[id.0],
            ParamPath::Detached => &mut self.detached[id.0],
        };
        if let Some(v) = *slot {
            return v;
        }
        let block = &self.store.blocks[id.0];
        let values = &self.store.values[block.offset..block.offset + block.len()];
        let v = match path {
            ParamPath::Live => self.tape.leaf(values, block.shape()),
            ParamPath::Detached => self.tape.constant(values, block.shape()),
        };
        *slot = Some(v);
        v
    }

    /// Flat gradient over the whole store. Blocks never bound live get zeros.
    pub fn param_gradient(&self, grads: &Gradients<'_>) -> Vec<f64> {
        let mut out = vec![0.0; self.store.len()];
        for (block, live) in self.store.blocks.iter().zip(&self.live) {
            if let Some(v) = live {
                out[block.offset..block.offset + block.len()].copy_from_slice(grads.wrt(*v));
            }
        }
        out
    }
}
