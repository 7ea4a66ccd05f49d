use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Gradients, Graph, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor with its gradient, Adam moments and (optionally) the
/// persistent spectral-norm vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub sn_u: Option<Vec<T>>,
}

impl<T: Scalar> ParamTensor<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let z = Tensor::zeros(value.shape());
        Self {
            grad: z.clone(),
            adam_m: z.clone(),
            adam_v: z,
            value,
            sn_u: None,
        }
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::c(dist.sample(rng))).collect();
        Self::new(Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    /// Enables spectral normalization with a random unit `u`, warmed up by
    /// `warmup` power iterations so the first estimate is already tight.
    pub fn with_spectral_norm<R: Rng>(mut self, rng: &mut R, warmup: usize) -> Self {
        let cols = *self.value.shape().last().expect("non-empty shape");
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        let mut u: Vec<T> = (0..cols).map(|_| T::c(dist.sample(rng))).collect();
        let n = u.iter().map(|&v| v * v).sum::<T>().sqrt();
        u.iter_mut().for_each(|v| *v = *v / n);
        self.sn_u = Some(u);
        super::spectral::spectral_normalize(&mut self, warmup);
        self
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn cast<U: Scalar>(&self) -> ParamTensor<U> {
        ParamTensor {
            value: self.value.cast(),
            grad: self.grad.cast(),
            adam_m: self.adam_m.cast(),
            adam_v: self.adam_v.cast(),
            sn_u: self
                .sn_u
                .as_ref()
                .map(|u| u.iter().map(|&v| U::c(v.as_f64())).collect()),
        }
    }
}

/// Named parameters of one network plus non-trainable buffers (batch-norm
/// running statistics) and the optimizer step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NetParams<T> {
    pub params: BTreeMap<String, ParamTensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
    pub adam_t: u64,
}

/// Graph leaves created for a network's parameters during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: Vec<(String, Var)>,
}

impl Bindings {
    pub fn push(&mut self, name: &str, v: Var) {
        self.vars.push((name.to_owned(), v));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

impl<T: Scalar> NetParams<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            adam_t: 0,
        }
    }

    pub fn insert(&mut self, name: &str, p: ParamTensor<T>) {
        self.params.insert(name.to_owned(), p);
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamTensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing buffer {name}")))
    }

    /// Puts the parameter on the graph, as a differentiable leaf when
    /// `trainable`, otherwise as a constant.
    pub fn bind(&self, g: &mut Graph<T>, name: &str, trainable: bool, b: &mut Bindings) -> Result<Var> {
        let t = self.get(name)?.value.clone();
        let v = if trainable { g.input(t) } else { g.constant(t) };
        if trainable {
            b.push(name, v);
        }
        Ok(v)
    }

    /// Adds the gradients of bound parameters into their `grad` tensors.
    pub fn accumulate(&mut self, grads: &Gradients<T>, b: &Bindings) -> Result<()> {
        for (name, v) in b.iter() {
            if let Some(g) = grads.get(v) {
                self.get_mut(name)?.grad.add_assign(g);
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(ParamTensor::zero_grad);
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|p| p.value.is_finite())
            && self.buffers.values().all(Tensor::is_finite)
    }

    pub fn cast<U: Scalar>(&self) -> NetParams<U> {
        NetParams {
            params: self.params.iter().map(|(k, p)| (k.clone(), p.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
            adam_t: self.adam_t,
        }
    }
}
