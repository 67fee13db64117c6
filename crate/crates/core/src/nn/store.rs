use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use super::{cast, Float};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Learnable tensor; counted in parameter totals.
    Weight,
    /// State such as running statistics; saved, never optimised.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Entry<F> {
    pub name: String,
    pub value: ArrayD<F>,
    /// Empty for buffers.
    pub grad: ArrayD<F>,
    pub role: Role,
    pub frozen: bool,
}

impl<F: Float> Entry<F> {
    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn is_trainable(&self) -> bool {
        self.role == Role::Weight && !self.frozen
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Owns the named tensors of one model component.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<F>, role: Role) -> ParamId {
        let name = name.into();
        debug_assert!(self.entries.iter().all(|e| e.name != name), "duplicate {name}");
        let grad = match role {
            Role::Weight => ArrayD::zeros(value.raw_dim()),
            Role::Buffer => ArrayD::zeros(IxDyn(&[0])),
        };
        self.entries.push(Entry {
            name,
            value,
            grad,
            role,
            frozen: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn entry(&self, id: ParamId) -> &Entry<F> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut Entry<F> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<F> {
        &self.entries[id.0].value
    }

    pub fn value2(&self, id: ParamId) -> ArrayView2<'_, F> {
        let v = &self.entries[id.0].value;
        let (rows, cols) = (v.shape()[0], v.len() / v.shape()[0].max(1));
        v.view().into_shape_with_order((rows, cols)).expect("contiguous parameter")
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad2_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        let g = &mut self.entries[id.0].grad;
        let rows = g.shape()[0];
        let cols = g.len() / rows.max(1);
        g.view_mut().into_shape_with_order((rows, cols)).expect("contiguous gradient")
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        &mut self.entries[id.0].grad
    }

    /// Whether gradients for this tensor are needed at all.
    pub fn wants_grad(&self, id: ParamId) -> bool {
        self.entries[id.0].is_trainable()
    }

    pub fn entries(&self) -> &[Entry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<F>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::zero());
        }
    }

    /// Number of learnable scalars (buffers excluded).
    pub fn numel(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role == Role::Weight)
            .map(Entry::numel)
            .sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries.iter().filter(|e| e.is_trainable()).map(Entry::numel).sum()
    }

    /// Overwrites every tensor from `other`, matched by name and shape.
    pub fn load_from<G: Float>(&mut self, other: &ParamStore<G>) -> Result<()> {
        for e in &mut self.entries {
            let src = other
                .entries
                .iter()
                .find(|o| o.name == e.name)
                .ok_or_else(|| Error::MissingTensor(e.name.clone()))?;
            if src.value.shape() != e.value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "{}: expected {:?}, found {:?}",
                    e.name,
                    e.value.shape(),
                    src.value.shape()
                )));
            }
            e.value = src.value.mapv(|v| cast(v.to_f64().expect("finite")));
            e.frozen = src.frozen;
        }
        Ok(())
    }
}
