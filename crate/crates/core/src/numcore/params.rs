use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Which training stage updates a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Representation, disentanglement, selector and recommendation head.
    Rec,
    /// Generation soft tokens and output projection.
    Gen,
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    group: ParamGroup,
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors with accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Param { name: name.to_string(), group, value, grad });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.params[id.0].group == group).collect()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                detail: format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Add the gradients of every parameter bound in `binding`.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients) {
        for (id, var) in binding.bound() {
            if let Some(g) = grads.raw(var) {
                for (acc, d) in self.params[id.0].grad.data_mut().iter_mut().zip(g) {
                    *acc += d;
                }
            }
        }
    }

    /// Named snapshot of every value.
    pub fn snapshot(&self) -> BTreeMap<String, Tensor> {
        self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    }

    pub fn restore(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in &self.params {
            if !tensors.contains_key(&p.name) {
                return Err(Error::Checkpoint(format!("missing tensor `{}`", p.name)));
            }
        }
        for p in &mut self.params {
            let t = &tensors[&p.name];
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("tensor `{}` has shape {:?}, expected {:?}", p.name, t.shape(), p.value.shape())));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Lazily binds store parameters as leaves of one tape.
pub struct Binding {
    slots: Vec<Option<Var>>,
    track: Option<Option<ParamGroup>>,
}

impl Binding {
    /// `track = false` binds parameters as constants (evaluation without gradients).
    pub fn new(store: &ParamStore, track: bool) -> Self {
        Self { slots: vec![None; store.len()], track: track.then_some(None) }
    }

    /// Tracks only the parameters of `group`; the rest are constants.
    pub fn for_group(store: &ParamStore, group: ParamGroup) -> Self {
        Self { slots: vec![None; store.len()], track: Some(Some(group)) }
    }

    pub fn get(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.slots[id.0] {
            return v;
        }
        let track = match self.track {
            None => false,
            Some(None) => true,
            Some(Some(g)) => store.group(id) == g,
        };
        let v = tape.leaf(store.value(id).clone(), track);
        self.slots[id.0] = Some(v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.slots.iter().enumerate().filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.slots[id.0]
    }
}

/// Forward context: a tape plus parameter bindings against one store.
pub struct Ctx<'s> {
    pub tape: Tape,
    pub store: &'s ParamStore,
    binding: Binding,
}

impl<'s> Ctx<'s> {
    pub fn new(store: &'s ParamStore, track: bool) -> Self {
        Self { tape: Tape::new(), store, binding: Binding::new(store, track) }
    }

    pub fn for_group(store: &'s ParamStore, group: ParamGroup) -> Self {
        Self { tape: Tape::new(), store, binding: Binding::for_group(store, group) }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.binding.get(&mut self.tape, self.store, id)
    }

    pub fn binding(&self) -> &Binding {
        &self.binding
    }

    /// Backward from `loss`; returns the loss value and the gradients.
    pub fn backward(&self, loss: Var) -> Result<(f64, Gradients)> {
        let g = self.tape.backward(loss)?;
        Ok((self.tape.scalar(loss), g))
    }

    /// Backward from `loss`, releasing the store borrow.
    pub fn finish(self, loss: Var) -> Result<Backprop> {
        let grads = self.tape.backward(loss)?;
        Ok(Backprop { loss: self.tape.scalar(loss), binding: self.binding, grads })
    }
}

/// Result of one backward pass, ready to be accumulated into a store.
pub struct Backprop {
    pub loss: f64,
    pub binding: Binding,
    pub grads: Gradients,
}

/// Gradient descent with moment estimates and decoupled weight decay.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    /// One update of `ids` from their accumulated gradients.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for &id in ids {
            let p = &mut store.params[id.0];
            let n = p.value.len();
            let (m, v) = self.moments.entry(id).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..n {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w[j]);
            }
        }
    }
}
