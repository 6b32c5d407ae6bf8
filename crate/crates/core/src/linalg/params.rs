use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::rng::SeededRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    #[serde(skip, default = "empty_grad")]
    pub grad: Tensor,
}

fn empty_grad() -> Tensor {
    Tensor::scalar(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Insertion-ordered collection of [`ParamTensor`]s with unique names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(ParamTensor { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Adds a tensor drawn from `uniform(-a, a)` with `a = 1/√fan_in`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut SeededRng,
    ) -> Result<ParamId> {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape, rng.fill_uniform(n, -a, a))?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds the gradients of every parameter bound on `graph` into the accumulators.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for &(pid, var) in &graph.bound_params {
            if let Some(g) = grads.get(var) {
                for (acc, v) in self.params[pid].grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += v;
                }
            }
        }
    }

    /// Copies values from `other` by name, checking shapes.
    pub fn load_values(&mut self, other: &[ParamTensor]) -> Result<()> {
        for p in other {
            let Some(dst) = self.by_name_mut(&p.name) else {
                return Err(Error::Format {
                    kind: "checkpoint",
                    detail: format!("unknown parameter {}", p.name),
                });
            };
            if dst.value.shape() != p.value.shape() {
                return Err(Error::shape("checkpoint parameter", dst.value.shape(), p.value.shape()));
            }
            dst.value = p.value.clone();
        }
        if other.len() != self.len() {
            return Err(Error::Format {
                kind: "checkpoint",
                detail: format!("expected {} parameters, found {}", self.len(), other.len()),
            });
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<ParamTensor> {
        self.params.clone()
    }
}

impl Graph {
    /// Binds a stored parameter as a differentiable leaf, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bound_params.iter().find(|(p, _)| *p == id.0) {
            return v;
        }
        let v = self.leaf(store.get(id).value.clone());
        self.bound_params.push((id.0, v));
        v
    }

    pub fn bound_var(&self, id: ParamId) -> Option<Var> {
        self.bound_params.iter().find(|(p, _)| *p == id.0).map(|&(_, v)| v)
    }
}

/// ADAM with the usual moment coefficients.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Applies one update using the accumulated gradients scaled by `grad_scale`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, grad_scale: f64) {
        self.step_where(store, lr, grad_scale, |_| true);
    }

    /// Like [`Adam::step`] but leaves parameters whose name fails `train`
    /// untouched, moments included.
    pub fn step_where(&mut self, store: &mut ParamStore, lr: f64, grad_scale: f64, train: impl Fn(&str) -> bool) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !train(&p.name) {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = p.grad.data();
            let val = p.value.data_mut();
            for j in 0..val.len() {
                let gj = g[j] * grad_scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                val[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
