//! Named parameter storage shared by every layer of a model.
//!
//! Layers hold [`ParamId`]s; a [`crate::Graph`] borrows the store during a
//! forward pass and the resulting [`crate::Gradients`] are folded back in with
//! [`ParamStore::accumulate`].

use std::collections::{BTreeMap, HashMap};

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::Gradients;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Trainable, dense gradient.
    Dense,
    /// Trainable lookup table with row-sparse gradients.
    Embedding,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Dense => "dense",
            ParamKind::Embedding => "embedding",
            ParamKind::Buffer => "buffer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "dense" => Some(ParamKind::Dense),
            "embedding" => Some(ParamKind::Embedding),
            "buffer" => Some(ParamKind::Buffer),
            _ => None,
        }
    }

    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    name: String,
    kind: ParamKind,
    tensor: Tensor<T>,
    /// Row index -> accumulated row gradient (embedding tables only).
    sparse_grad: BTreeMap<usize, Vec<T>>,
}

impl<T: Float> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> ParamKind {
        self.kind
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn sparse_grad(&self) -> &BTreeMap<usize, Vec<T>> {
        &self.sparse_grad
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, mut tensor: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::Config(format!("duplicate parameter name `{name}`")));
        }
        if kind == ParamKind::Embedding && tensor.rank() != 2 {
            return Err(TensorError::Config(format!(
                "embedding `{name}` must be rank 2, got {:?}",
                tensor.shape()
            )));
        }
        tensor.set_requires_grad(kind.trainable());
        tensor.zero_grad();
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), kind, tensor, sparse_grad: BTreeMap::new() });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.params[id.0].kind
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Replace a parameter's values, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: &[T]) -> Result<()> {
        let t = &mut self.params[id.0].tensor;
        if t.numel() != data.len() {
            return Err(TensorError::DataLength { shape: t.shape().to_vec(), len: data.len() });
        }
        t.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Number of trainable scalars, optionally restricted to names with `prefix`.
    pub fn count_trainable(&self, prefix: Option<&str>, include_embeddings: bool) -> usize {
        self.params
            .iter()
            .filter(|p| match p.kind {
                ParamKind::Dense => true,
                ParamKind::Embedding => include_embeddings,
                ParamKind::Buffer => false,
            })
            .filter(|p| prefix.is_none_or(|pre| p.name.starts_with(pre)))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
            p.sparse_grad.clear();
        }
    }

    /// Add the gradients of one backward pass into the grad slots.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.dense() {
            let p = &mut self.params[id.0];
            if p.kind == ParamKind::Embedding {
                // a table read densely still updates row-wise
                let dim = p.tensor.shape()[1];
                for (row, gr) in g.chunks(dim).enumerate() {
                    if gr.iter().any(|v| *v != T::zero()) {
                        let acc = p.sparse_grad.entry(row).or_insert_with(|| vec![T::zero(); dim]);
                        acc.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                }
                continue;
            }
            p.tensor.grad_mut().iter_mut().zip(g).for_each(|(a, &b)| *a += b);
        }
        for (id, rows) in grads.sparse() {
            let p = &mut self.params[id.0];
            for (&row, g) in rows {
                let acc = p.sparse_grad.entry(row).or_insert_with(|| vec![T::zero(); g.len()]);
                acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
        }
    }

    /// Overwrite buffers (e.g. running statistics) recorded during a forward pass.
    pub fn apply_buffer_updates(&mut self, updates: Vec<(ParamId, Vec<T>)>) {
        for (id, data) in updates {
            let t = &mut self.params[id.0].tensor;
            t.data_mut().copy_from_slice(&data);
        }
    }

    /// Row indices touched since the last [`ParamStore::zero_grad`].
    pub fn touched_rows(&self, id: ParamId) -> Vec<usize> {
        self.params[id.0].sparse_grad.keys().copied().collect()
    }

    /// Mutable access to the dense grad slot and the data at once (optimizers).
    pub fn data_and_grad_mut(&mut self, id: ParamId) -> (&mut [T], Option<&[T]>) {
        self.params[id.0].tensor.data_and_grad_mut()
    }

    pub fn data_and_sparse_grad_mut(&mut self, id: ParamId) -> (&mut [T], &BTreeMap<usize, Vec<T>>) {
        let p = &mut self.params[id.0];
        (p.tensor.data_mut(), &p.sparse_grad)
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: {
                        let mut t = p.tensor.cast::<U>();
                        t.set_requires_grad(p.kind.trainable());
                        t
                    },
                    sparse_grad: BTreeMap::new(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
