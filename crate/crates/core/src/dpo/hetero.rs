use dpn_tensor::{Float, Graph, Var};
use serde::{Deserialize, Serialize};

use super::feature::{FeatureDpo, FeatureDpoConfig};
use super::generator::GeneratorSpec;
use crate::builder::Builder;
use crate::error::{DpnError, Result};

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeteroDpoConfig {
    /// Query dim.
    pub m: usize,
    /// Behavior dim.
    pub n: usize,
    pub c: usize,
    pub generator: GeneratorSpec,
    #[serde(default = "yes")]
    pub bias: bool,
}

/// Query transformed by weights generated from mean-pooled behaviors.
#[derive(Debug, Clone)]
pub struct HeteroDpo {
    pub cfg: HeteroDpoConfig,
    pub inner: FeatureDpo,
}

impl HeteroDpo {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, cfg: &HeteroDpoConfig) -> Result<Self> {
        let inner = FeatureDpo::new(
            b,
            &FeatureDpoConfig { m: cfg.m, n: cfg.n, c: cfg.c, generator: cfg.generator.clone(), bias: cfg.bias },
        )?;
        Ok(Self { cfg: cfg.clone(), inner })
    }

    pub fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// `q [B, m]`, `Z [B, t, n]` -> `[B, c]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, q: Var, z: Var) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 3 || s[2] != self.cfg.n {
            return Err(DpnError::config(format!("behavior context must be [B, t, {}], got {s:?}", self.cfg.n)));
        }
        if s[1] == 0 {
            return Err(DpnError::config("empty behavior sequence"));
        }
        let pooled = g.mean(z, 1)?;
        self.inner.forward(g, q, pooled)
    }
}
