use dpn_tensor::{Float, Graph, Var};
use serde::{Deserialize, Serialize};

use super::generator::{DynWeights, Generator, GeneratorSpec};
use crate::builder::Builder;
use crate::error::{DpnError, Result};

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureDpoConfig {
    pub m: usize,
    pub n: usize,
    pub c: usize,
    pub generator: GeneratorSpec,
    #[serde(default = "yes")]
    pub bias: bool,
}

/// `y = W(z)^T x + b(z)` on flat vectors.
#[derive(Debug, Clone)]
pub struct FeatureDpo {
    pub cfg: FeatureDpoConfig,
    pub generator: Generator,
}

impl FeatureDpo {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, cfg: &FeatureDpoConfig) -> Result<Self> {
        let generator = Generator::new(b, &cfg.generator, cfg.n, cfg.m, cfg.c, cfg.bias)?;
        Ok(Self { cfg: cfg.clone(), generator })
    }

    pub fn param_count(&self) -> usize {
        self.generator.param_count()
    }

    pub fn weights<T: Float>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<DynWeights> {
        self.generator.generate(g, z)
    }

    /// `x [B, m]`, `z [B, n]` -> `[B, c]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, z: Var) -> Result<Var> {
        let w = self.weights(g, z)?;
        self.forward_with(g, x, &w)
    }

    pub fn forward_with<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, w: &DynWeights) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.cfg.m {
            return Err(DpnError::config(format!("feature DPO expects input [B, {}], got {:?}", self.cfg.m, s)));
        }
        let x3 = g.reshape(x, &[s[0], 1, s[1]])?;
        let y = self.generator.apply(g, x3, w)?;
        Ok(g.reshape(y, &[s[0], self.cfg.c])?)
    }
}
