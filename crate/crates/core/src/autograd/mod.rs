//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Each node keeps
//! its value and a closure mapping the gradient of its output to gradients of
//! its inputs. [`Graph::backward`] walks the nodes in reverse creation order,
//! which is a valid topological order since inputs always precede outputs.
//!
//! Parameters live in a [`ParamStore`] outside the graph, so a graph can be
//! dropped after every step while the store persists across steps. Using the
//! same [`ParamId`] twice in one graph yields the same leaf, which is how
//! weight sharing accumulates gradients from every use.

mod conv;
mod ops;
mod signal_ops;

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

pub use conv::Conv2dSpec;
pub(crate) use signal_ops::{cosine_distance_with_grad, si_sdr_with_grad};

pub type Tensor = ArrayD<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Gradients for each input of a node; `None` where the input does not need one.
type GradList = Vec<Option<Tensor>>;
type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> GradList>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers, gradients recorded.
    Train,
    /// Running statistics, no gradient bookkeeping.
    Eval,
}

/// Batch statistics observed by a normalization layer during a training pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean_buffer: ParamId,
    pub var_buffer: ParamId,
    pub mean: Tensor,
    pub var: Tensor,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    param_leaves: RefCell<BTreeMap<ParamId, Var>>,
    leaf_params: RefCell<Vec<(usize, ParamId)>>,
    norm_stats: RefCell<Vec<NormStats>>,
    mode: Mode,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_leaves: RefCell::new(BTreeMap::new()),
            leaf_params: RefCell::new(Vec::new()),
            norm_stats: RefCell::new(Vec::new()),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    fn grad_enabled(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, parents: &[Var], backward: Option<BackwardFn>) -> Var {
        debug_assert!(value.is_standard_layout());
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.grad_enabled() && parents.iter().any(|p| nodes[p.0].requires_grad);
        let backward = if requires_grad { backward } else { None };
        nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn push_leaf(&self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.grad_enabled(),
        });
        Var(nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value.as_standard_layout().into_owned()), false)
    }

    /// Free input that receives a gradient (useful for tests).
    pub fn input(&self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value.as_standard_layout().into_owned()), true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.borrow().get(&id) {
            return v;
        }
        let entry = &store.entries[id.0];
        let v = self.push_leaf(entry.value.clone(), entry.trainable);
        self.param_leaves.borrow_mut().insert(id, v);
        self.leaf_params.borrow_mut().push((v.0, id));
        v
    }

    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on a tensor of shape {:?}", val.shape());
        val.iter().next().copied().unwrap_or(0.0)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub(crate) fn record_norm_stats(&self, stats: NormStats) {
        self.norm_stats.borrow_mut().push(stats);
    }

    /// Normalization statistics gathered so far, in call order.
    pub fn take_norm_stats(&self) -> Vec<NormStats> {
        std::mem::take(&mut *self.norm_stats.borrow_mut())
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.0].value.len(),
            1,
            "backward() needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_elem(nodes[loss.0].value.raw_dim(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let Some(pg) = pg else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[p].value.shape(), "grad shape of node {p}");
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let mut params = BTreeMap::new();
        for &(node, id) in self.leaf_params.borrow().iter() {
            if let Some(Some(g)) = grads.get_mut(node).map(Option::take) {
                params.insert(id, g);
            }
        }
        Gradients { nodes: grads, params }
    }
}

pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    /// Gradient of a free input created with [`Graph::input`].
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arc<Tensor>,
    /// Buffers (running statistics) are stored alongside weights but not trained.
    pub trainable: bool,
}

/// Named parameters and buffers in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value: Arc::new(value.as_standard_layout().into_owned()),
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let id = self.add(name, value);
        self.entries[id.0].trainable = false;
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.entries[id.0].trainable)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(
            value.shape(),
            self.entries[id.0].value.shape(),
            "shape change for {}",
            self.entries[id.0].name
        );
        self.entries[id.0].value = Arc::new(value.as_standard_layout().into_owned());
    }

    /// Total number of scalar trainable values.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Exponential moving average update of normalization buffers.
    pub fn apply_norm_stats(&mut self, stats: &[NormStats], momentum: f64) {
        for s in stats {
            let m = self.get_mut(s.mean_buffer);
            m.zip_mut_with(&s.mean, |r, &b| *r = (1.0 - momentum) * *r + momentum * b);
            let v = self.get_mut(s.var_buffer);
            v.zip_mut_with(&s.var, |r, &b| *r = (1.0 - momentum) * *r + momentum * b);
        }
    }
}

pub(crate) fn shape_of(dims: &[usize]) -> IxDyn {
    IxDyn(dims)
}
