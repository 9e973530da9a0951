//! Named parameter storage with gradient buffers and seeded initializers.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Accumulated gradient; `None` until a backward pass reaches the parameter.
    pub grad: Option<Tensor<T>>,
    /// Frozen parameters are stored and checkpointed but never updated.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            grad: None,
            trainable,
        });
        id
    }

    /// Kaiming-uniform convolution weight `out × in × k × k`.
    pub fn conv_weight(
        &mut self,
        name: impl Into<String>,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        self.conv_weight_scaled(name, out_ch, in_ch, k, 1.0, rng)
    }

    /// Kaiming-uniform weight with its bound multiplied by `gain`.
    pub fn conv_weight_scaled(
        &mut self,
        name: impl Into<String>,
        out_ch: usize,
        in_ch: usize,
        k: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let fan_in = (in_ch * k * k) as f64;
        let bound = gain * (6.0 / fan_in).sqrt();
        let value = Tensor::from_fn(&[out_ch, in_ch, k, k], |_| {
            T::lit(rng.gen_range(-bound..bound))
        });
        self.insert(name, value, true)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape), true)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    /// Ids of all parameters whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(acc) => {
                debug_assert_eq!(acc.len(), grad.len());
                acc.data_mut()
                    .iter_mut()
                    .zip(grad)
                    .for_each(|(a, &g)| *a = *a + g);
            }
            None => {
                let shape = p.value.shape().to_vec();
                p.grad = Some(Tensor::new(shape, grad.to_vec()).expect("gradient matches parameter"));
            }
        }
    }

    /// Overwrites a parameter's value, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::dim(
                "set_value",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    /// Same structure, values converted to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.cast(), p.trainable);
        }
        out
    }
}
