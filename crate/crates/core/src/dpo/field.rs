use dpn_tensor::{Float, Graph, ParamId, Var};
use serde::{Deserialize, Serialize};

use super::generator::{DynWeights, Generator, GeneratorSpec};
use crate::baselines::FieldDnn;
use crate::builder::Builder;
use crate::error::{DpnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean of generator outputs over context fields.
    Summation,
    /// Each field generates its own weights from itself.
    #[serde(rename = "self")]
    SelfField,
    /// Softmax-weighted sum with one learned score per context field.
    Attention,
    /// Generator reads the flattened context.
    Concat,
    /// Field `i` averages the generator outputs of every other field.
    SelfExcluded,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDpoConfig {
    pub t1: usize,
    pub t2: usize,
    /// Per-field input dim.
    pub m: usize,
    /// Per-field context dim.
    pub n: usize,
    pub c: usize,
    pub aggregation: Aggregation,
    pub generator: GeneratorSpec,
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default)]
    pub implicit_branch: bool,
}

/// Field-wise dynamic layer: `X [B, t1, m]`, `Z [B, t2, n]` -> `[B, t1, c]`.
#[derive(Debug, Clone)]
pub struct FieldDpo {
    pub cfg: FieldDpoConfig,
    pub generator: Generator,
    pub scores: Option<(ParamId, ParamId)>,
    pub implicit: Option<FieldDnn>,
}

impl FieldDpo {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, cfg: &FieldDpoConfig) -> Result<Self> {
        if cfg.t1 == 0 || cfg.t2 == 0 {
            return Err(DpnError::config("field DPO needs at least one field on each side"));
        }
        let self_mode = matches!(cfg.aggregation, Aggregation::SelfField | Aggregation::SelfExcluded);
        if self_mode && (cfg.t1 != cfg.t2 || cfg.m != cfg.n) {
            return Err(DpnError::config(format!(
                "{:?} aggregation reuses the input as context; needs t1 == t2 and m == n, got t=({}, {}) dims=({}, {})",
                cfg.aggregation, cfg.t1, cfg.t2, cfg.m, cfg.n
            )));
        }
        if cfg.aggregation == Aggregation::SelfExcluded && cfg.t1 < 2 {
            return Err(DpnError::config("self-excluded aggregation needs at least two fields"));
        }
        let n_gen = if cfg.aggregation == Aggregation::Concat { cfg.t2 * cfg.n } else { cfg.n };
        let generator = Generator::new(b, &cfg.generator, n_gen, cfg.m, cfg.c, cfg.bias)?;
        let scores = if cfg.aggregation == Aggregation::Attention {
            Some((b.weight("att_w", cfg.t2, cfg.n)?, b.zeros("att_b", &[cfg.t2])?))
        } else {
            None
        };
        let implicit = if cfg.implicit_branch {
            Some(FieldDnn::new(&mut b.scope("implicit"), cfg.t1, cfg.m, cfg.c)?)
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), generator, scores, implicit })
    }

    pub fn param_count(&self) -> usize {
        self.generator.param_count()
            + if self.scores.is_some() { self.cfg.t2 * self.cfg.n + self.cfg.t2 } else { 0 }
            + self.implicit.as_ref().map_or(0, FieldDnn::param_count)
    }

    fn check(&self, g: &Graph<'_, impl Float>, v: Var, t: usize, d: usize, what: &str) -> Result<usize> {
        let s = g.shape(v);
        if s.len() != 3 || s[1] != t || s[2] != d {
            return Err(DpnError::config(format!("field DPO expects {what} [B, {t}, {d}], got {s:?}")));
        }
        Ok(s[0])
    }

    /// Attention weights over context fields, `[B, t2]`.
    pub fn attention<T: Float>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Option<Var>> {
        let Some((w, b)) = self.scores else { return Ok(None) };
        let (w, b) = (g.param(w), g.param(b));
        let s = g.mul(z, w)?;
        let s = g.sum(s, 2)?;
        let s = g.add(s, b)?;
        Ok(Some(g.softmax(s, 1)?))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, z: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let bsz = self.check(g, x, cfg.t1, cfg.m, "input")?;
        let bz = self.check(g, z, cfg.t2, cfg.n, "context")?;
        if bz != bsz {
            return Err(DpnError::config(format!("input batch {bsz} != context batch {bz}")));
        }
        let gen = &self.generator;
        let explicit = match cfg.aggregation {
            Aggregation::Summation | Aggregation::Attention | Aggregation::Concat => {
                let w = self.pooled_weights(g, z)?;
                gen.apply(g, x, &w)?
            }
            Aggregation::SelfField | Aggregation::SelfExcluded => {
                let rows = bsz * cfg.t1;
                let xf = g.reshape(x, &[rows, cfg.m])?;
                let k = gen.hidden_dim();
                let mut h = gen.hidden(g, xf)?;
                if cfg.aggregation == Aggregation::SelfExcluded {
                    let h3 = g.reshape(h, &[bsz, cfg.t1, k])?;
                    let total = g.sum_keepdim(h3, 1)?;
                    let rest = g.sub(total, h3)?;
                    let rest = g.scale(rest, T::of(1.0 / (cfg.t1 - 1) as f64))?;
                    h = g.reshape(rest, &[rows, k])?;
                }
                let w = gen.expand(g, h)?;
                let x3 = g.reshape(x, &[rows, 1, cfg.m])?;
                let y = gen.apply(g, x3, &w)?;
                g.reshape(y, &[bsz, cfg.t1, cfg.c])?
            }
        };
        match &self.implicit {
            Some(dnn) => {
                let y = dnn.forward(g, x)?;
                Ok(g.add(explicit, y)?)
            }
            None => Ok(explicit),
        }
    }

    /// Shared dynamic weights for the pooled modes (not defined for the self modes).
    pub fn pooled_weights<T: Float>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<DynWeights> {
        let cfg = &self.cfg;
        let bsz = self.check(g, z, cfg.t2, cfg.n, "context")?;
        match cfg.aggregation {
            Aggregation::Concat => {
                let zf = g.reshape(z, &[bsz, cfg.t2 * cfg.n])?;
                self.generator.generate(g, zf)
            }
            Aggregation::Summation | Aggregation::Attention => {
                let k = self.generator.hidden_dim();
                let zf = g.reshape(z, &[bsz * cfg.t2, cfg.n])?;
                let h = self.generator.hidden(g, zf)?;
                let h = g.reshape(h, &[bsz, cfg.t2, k])?;
                let pooled = match self.attention(g, z)? {
                    Some(a) => {
                        let a = g.reshape(a, &[bsz, cfg.t2, 1])?;
                        let wh = g.mul(h, a)?;
                        g.sum(wh, 1)?
                    }
                    None => g.mean(h, 1)?,
                };
                self.generator.expand(g, pooled)
            }
            _ => Err(DpnError::config("self aggregation has no shared weights")),
        }
    }
}
