use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Matrix,
    Embedding,
    /// Norm gains and biases; exempt from weight decay.
    NormAffine,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<T>,
}

impl<T> Param<T> {
    pub fn decays(&self) -> bool {
        self.role != ParamRole::NormAffine
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

/// Tape handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, tensor: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            role,
            tensor: tensor.with_grad(),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Learnable scalars across all tensors.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Records every parameter on `tape`; with `trainable` they become gradient leaves.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    let t = Tensor::new(p.tensor.shape(), p.tensor.data().to_vec())
                        .expect("parameter shape is consistent");
                    if trainable {
                        tape.leaf(t.with_grad())
                    } else {
                        tape.constant(t)
                    }
                })
                .collect(),
        )
    }

    /// Adds the tape's leaf gradients into each parameter's `grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        if bound.0.len() != self.params.len() {
            return Err(Error::contract("binding does not belong to this store"));
        }
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            match tape.grad(v) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => {
                    let zeros = vec![T::zero(); p.tensor.len()];
                    p.tensor.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }
}
