use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
    pub(crate) grad: Option<Tensor<T>>,
    pub(crate) m: Vec<T>,
    pub(crate) v: Vec<T>,
}

impl<T: Real> Parameter<T> {
    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }
}

/// Ordered, named parameters with per-parameter trainable flags and Adam
/// moment estimates.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
    pub(crate) step: u64,
}

/// Tape variables for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps caller-created variables, one per store parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            step: 0,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::arg(format!("duplicate parameter name `{name}`")));
        }
        let n = value.numel();
        self.params.push(Parameter {
            name,
            value,
            trainable,
            grad: None,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn at(&self, index: usize) -> &Parameter<T> {
        &self.params[index]
    }

    /// Value of the named parameter, or a shape error naming it.
    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::shape(format!("missing parameter `{name}`")))
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Records every parameter on the tape; only trainable ones request gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), p.trainable))
                .collect(),
        }
    }

    /// Records every parameter as a constant, for inference and attribution.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Binding {
        Binding {
            vars: self.params.iter().map(|p| tape.leaf(p.value.clone(), false)).collect(),
        }
    }

    /// Stores the gradients of every trainable parameter from a finished
    /// backward pass. Parameters that did not contribute receive zeros.
    pub fn collect_grads(&mut self, grads: &Gradients<T>, binding: &Binding) {
        for (p, &var) in self.params.iter_mut().zip(&binding.vars) {
            if p.trainable {
                p.grad = Some(grads.wrt(var));
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Little-endian bytes of every parameter whose name starts with `prefix`,
    /// in store order.
    pub fn bytes_with_prefix(&self, prefix: &str) -> Vec<u8> {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .flat_map(|p| p.value.to_le_bytes())
            .collect()
    }

    /// Copies values (not optimiser state) from same-named parameters of `other`.
    pub fn copy_values_from(&mut self, other: &ParameterStore<T>, prefix: &str) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            let src = other
                .get(&p.name)
                .ok_or_else(|| Error::shape(format!("source lacks parameter `{}`", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "parameter `{}` has shape {:?} in source but {:?} here",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for p in &self.params {
            out.push(p.name.clone(), p.value.cast(), p.trainable)
                .expect("names are unique in the source store");
        }
        out
    }

    /// Resets Adam moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in &mut self.params {
            p.m.fill(T::zero());
            p.v.fill(T::zero());
            p.grad = None;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_requests_grads_only_for_trainable() {
        let mut store = ParameterStore::<f32>::new();
        store.push("a", Tensor::full(&[2], 1.0), true).unwrap();
        store.push("b", Tensor::full(&[2], 1.0), false).unwrap();
        assert!(store.push("a", Tensor::zeros(&[1]), true).is_err());
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        assert!(tape.requires_grad(bind.var(0)));
        assert!(!tape.requires_grad(bind.var(1)));
        let s = tape.sum_all(bind.var(0)).unwrap();
        let g = tape.backward(s).unwrap();
        store.collect_grads(&g, &bind);
        assert!(store.at(0).grad().is_some());
        assert!(store.at(1).grad().is_none());
        assert_eq!(store.trainable_scalars(), 2);
    }
}
