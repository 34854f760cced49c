//! Parameter storage and the handful of layers the pipeline is built from.

use rand::Rng;

use crate::{Graph, NodeId, Real, Result, Tensor};

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Transformer,
}

impl ParamGroup {
    pub fn tag(self) -> u8 {
        match self {
            ParamGroup::Backbone => 0,
            ParamGroup::Transformer => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamGroup::Backbone),
            1 => Some(ParamGroup::Transformer),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    /// Copies every parameter onto `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bindings {
        Bindings(self.entries.iter().map(|e| g.param(e.tensor.clone())).collect())
    }

    /// Same as [`bind`](Self::bind) but without gradient tracking.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bindings {
        Bindings(self.entries.iter().map(|e| g.constant(e.tensor.clone())).collect())
    }

    /// Gradients of all parameters after `g.backward`, in store order.
    pub fn collect_grads(&self, g: &Graph<T>, bound: &Bindings) -> Vec<Option<Vec<T>>> {
        bound.0.iter().map(|&id| g.grad(id).map(|s| s.to_vec())).collect()
    }

    /// Parameter-wise conversion, e.g. to run the same network in `f64`.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    group: e.group,
                    tensor: e.tensor.cast(),
                })
                .collect(),
        }
    }
}

/// Graph nodes of a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<NodeId>);

impl Bindings {
    /// Wraps nodes created elsewhere, in store order.
    pub fn from_nodes(nodes: Vec<NodeId>) -> Self {
        Self(nodes)
    }

    pub fn node(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.0
    }
}

fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_f64(shape, &data).expect("shape matches data")
}

/// Fully connected layer `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), group, uniform(rng, &[in_dim, out_dim], bound));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, p.node(self.weight))?;
        g.add(y, p.node(self.bias))
    }
}

/// Stack of linear layers with ReLU between them (not after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
    ) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), group, w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, mut x: NodeId) -> Result<NodeId> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Tensor::full(&[dim], T::one())),
            beta: store.add(format!("{name}.beta"), group, Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: NodeId) -> Result<NodeId> {
        g.layer_norm(x, p.node(self.gamma), p.node(self.beta), self.eps)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            group,
            uniform(rng, &[out_c, in_c, kernel, kernel], bound),
        );
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[out_c]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bindings, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, p.node(self.weight), Some(p.node(self.bias)), self.stride, self.pad)
    }
}
