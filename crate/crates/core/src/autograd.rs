//! Define-by-run reverse-mode differentiation.
//!
//! Model code is written once against the [`Graph`] trait and runs on two
//! backends:
//!
//! * [`Tape`] records every primitive application together with its inputs
//!   so that [`Tape::backward`] can replay the backward rules in reverse
//!   creation order (creation order is a topological order).
//! * [`Eval`] executes the same primitives without recording anything, which
//!   keeps inference memory proportional to the live intermediates only.
//!
//! Parameters live in a [`ParamStore`] and are shared into either backend
//! by reference count, so no parameter data is copied per step.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<E> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<E>>>,
    index: HashMap<String, usize>,
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor<E>> {
        Arc::clone(&self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<E>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            index: self.index.clone(),
        }
    }
}

/// A differentiable primitive.
///
/// `forward` may stash whatever it needs for the backward rule when `save`
/// is set; `backward` returns one gradient per input (`None` where the
/// input does not need one).
pub trait Op<E: Element>: 'static {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor<E>], save: bool) -> Result<Tensor<E>>;

    fn backward(
        &self,
        inputs: &[&Tensor<E>],
        output: &Tensor<E>,
        grad: &Tensor<E>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<E>>>;
}

/// Execution backend shared by training and inference code.
pub trait Graph<E: Element> {
    type Var: Clone;

    fn param(&mut self, id: ParamId) -> Self::Var;

    /// A value that takes no part in differentiation.
    fn constant(&mut self, value: Tensor<E>) -> Self::Var;

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<E>;

    fn apply<O: Op<E>>(&mut self, op: O, inputs: &[&Self::Var]) -> Result<Self::Var>;

    fn is_recording(&self) -> bool;
}

struct Node<E: Element> {
    name: &'static str,
    value: Arc<Tensor<E>>,
    op: Option<Box<dyn Op<E>>>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recording backend.
pub struct Tape<'s, E: Element> {
    store: &'s ParamStore<E>,
    nodes: Vec<Node<E>>,
    params: Vec<(ParamId, usize)>,
    param_nodes: HashMap<ParamId, usize>,
}

impl<'s, E: Element> Tape<'s, E> {
    pub fn new(store: &'s ParamStore<E>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    /// Leaf that receives a gradient (used for input-gradient checks).
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        self.push("leaf", Arc::new(value), None, Vec::new(), true)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Arc<Tensor<E>>,
        op: Option<Box<dyn Op<E>>>,
        inputs: Vec<usize>,
        requires_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            name,
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Name of the first op whose output holds a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().find_map(|n| {
            if n.value.all_finite() {
                None
            } else {
                Some(n.name.to_string())
            }
        })
    }

    /// Back-propagate from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients<E>> {
        let out = &self.nodes[output.0];
        if out.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got shape {:?}", out.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(out.value.shape().to_vec(), E::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = node.op.as_ref() else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let inputs: Vec<&Tensor<E>> =
                node.inputs.iter().map(|&i| self.nodes[i].value.as_ref()).collect();
            let in_grads = op.backward(&inputs, &node.value, &g, &needs);
            debug_assert_eq!(in_grads.len(), node.inputs.len(), "{}", op.name());
            for ((&i, gi), &need) in node.inputs.iter().zip(in_grads).zip(&needs) {
                let (Some(gi), true) = (gi, need) else { continue };
                debug_assert_eq!(
                    gi.shape(),
                    self.nodes[i].value.shape(),
                    "gradient shape from {}",
                    op.name()
                );
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        let params = self
            .params
            .iter()
            .filter_map(|&(pid, node)| grads[node].take().map(|g| (pid, g)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

impl<E: Element> Graph<E> for Tape<'_, E> {
    type Var = Var;

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&n) = self.param_nodes.get(&id) {
            return Var(n);
        }
        let v = self.push("param", self.store.shared(id), None, Vec::new(), true);
        self.params.push((id, v.0));
        self.param_nodes.insert(id, v.0);
        v
    }

    fn constant(&mut self, value: Tensor<E>) -> Var {
        self.push("constant", Arc::new(value), None, Vec::new(), false)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<E> {
        &self.nodes[v.0].value
    }

    fn apply<O: Op<E>>(&mut self, mut op: O, inputs: &[&Var]) -> Result<Var> {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let value = {
            let ins: Vec<&Tensor<E>> = inputs.iter().map(|v| self.nodes[v.0].value.as_ref()).collect();
            op.forward(&ins, requires_grad)?
        };
        let ids = inputs.iter().map(|v| v.0).collect();
        let name = op.name();
        let op: Option<Box<dyn Op<E>>> = if requires_grad { Some(Box::new(op)) } else { None };
        Ok(self.push(name, Arc::new(value), op, ids, requires_grad))
    }

    fn is_recording(&self) -> bool {
        true
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
    params: Vec<(ParamId, Tensor<E>)>,
}

impl<E: Element> Gradients<E> {
    /// Gradient of a leaf created with [`Tape::leaf`].
    pub fn get(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &[(ParamId, Tensor<E>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<E>)> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<E>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }
}

/// Non-recording backend. Intermediates are dropped as soon as the model
/// code releases them.
pub struct Eval<'s, E: Element> {
    store: &'s ParamStore<E>,
}

impl<'s, E: Element> Eval<'s, E> {
    pub fn new(store: &'s ParamStore<E>) -> Self {
        Self { store }
    }
}

impl<E: Element> Graph<E> for Eval<'_, E> {
    type Var = Arc<Tensor<E>>;

    fn param(&mut self, id: ParamId) -> Self::Var {
        self.store.shared(id)
    }

    fn constant(&mut self, value: Tensor<E>) -> Self::Var {
        Arc::new(value)
    }

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<E> {
        v
    }

    fn apply<O: Op<E>>(&mut self, mut op: O, inputs: &[&Self::Var]) -> Result<Self::Var> {
        let ins: Vec<&Tensor<E>> = inputs.iter().map(|v| v.as_ref()).collect();
        Ok(Arc::new(op.forward(&ins, false)?))
    }

    fn is_recording(&self) -> bool {
        false
    }
}
