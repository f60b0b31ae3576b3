use dpn_tensor::{Float, ParamId, ParamKind, ParamStore, Tensor};
use rand::RngCore;

use crate::error::Result;
use crate::init;

/// Creates named, initialized parameters under a dotted prefix.
pub struct Builder<'a, T: Float> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut dyn RngCore,
    prefix: String,
}

impl<'a, T: Float> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut dyn RngCore) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    /// Child builder whose parameters are named `<prefix><name>.<role>`.
    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        Builder { store: self.store, rng: self.rng, prefix: format!("{}{}.", self.prefix, name) }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    fn name(&self, role: &str) -> String {
        format!("{}{}", self.prefix, role)
    }

    pub fn tensor(&mut self, role: &str, kind: ParamKind, t: Tensor<T>) -> Result<ParamId> {
        let name = self.name(role);
        Ok(self.store.add(&name, kind, t)?)
    }

    /// Glorot-initialized `rows x cols` weight.
    pub fn weight(&mut self, role: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let t = init::glorot_matrix(self.rng, rows, cols);
        self.tensor(role, ParamKind::Dense, t)
    }

    /// Glorot-initialized tensor with explicit fans.
    pub fn weight_nd(&mut self, role: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let t = init::glorot(self.rng, shape, fan_in, fan_out);
        self.tensor(role, ParamKind::Dense, t)
    }

    pub fn zeros(&mut self, role: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(role, ParamKind::Dense, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, role: &str, shape: &[usize]) -> Result<ParamId> {
        self.tensor(role, ParamKind::Dense, Tensor::ones(shape))
    }

    pub fn buffer(&mut self, role: &str, t: Tensor<T>) -> Result<ParamId> {
        self.tensor(role, ParamKind::Buffer, t)
    }

    pub fn embedding(&mut self, role: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let t = init::glorot_matrix(self.rng, rows, cols);
        self.tensor(role, ParamKind::Embedding, t)
    }
}
