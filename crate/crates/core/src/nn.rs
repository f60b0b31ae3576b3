//! Small static building blocks shared by layers and baselines.

use dpn_tensor::{Float, Graph, ParamId, Tensor, Var};

use crate::builder::Builder;
use crate::error::Result;

/// `y = x W + b` over the last axis of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let w = b.weight("w", d_in, d_out)?;
        let bias = if bias { Some(b.zeros("b", &[d_out])?) } else { None };
        Ok(Self { w, b: bias, d_in, d_out })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let mut y = g.matmul(x, w)?;
        if let Some(b) = self.b {
            let bv = g.param(b);
            y = g.add(y, bv)?;
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

/// Batch normalization over the last axis (leading axes are flattened into rows).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.ones("gamma", &[dim])?,
            beta: b.zeros("beta", &[dim])?,
            running_mean: b.buffer("running_mean", Tensor::zeros(&[dim]))?,
            running_var: b.buffer("running_var", Tensor::ones(&[dim]))?,
            dim,
        })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let rows = shape[..shape.len() - 1].iter().product();
        let flat = if shape.len() == 2 { x } else { g.reshape(x, &[rows, self.dim])? };
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let y = g.batch_norm(flat, gamma, beta, self.running_mean, self.running_var)?;
        Ok(if shape.len() == 2 { y } else { g.reshape(y, &shape)? })
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}
