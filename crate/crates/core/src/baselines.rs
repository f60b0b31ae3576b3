//! Static reference models: MLP, cross layer, factorization machine,
//! field-interaction DNN and multi-head attention.

use dpn_tensor::{Float, Graph, ParamId, Var};
use serde::{Deserialize, Serialize};

use crate::builder::Builder;
use crate::error::{DpnError, Result};
use crate::nn::{BatchNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply<T: Float>(self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(match self {
            Activation::Relu => g.relu(x)?,
            Activation::Identity => x,
        })
    }
}

/// Stack of `linear -> (BN) -> activation` blocks and an optional linear head.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Vec<(Linear, Option<BatchNorm>)>,
    pub head: Option<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<T: Float>(
        b: &mut Builder<'_, T>,
        d_in: usize,
        widths: &[usize],
        batch_norm: bool,
        activation: Activation,
        out_dim: Option<usize>,
    ) -> Result<Self> {
        let mut hidden = Vec::with_capacity(widths.len());
        let mut d = d_in;
        for (i, &w) in widths.iter().enumerate() {
            let mut s = b.scope(&format!("fc{}", i + 1));
            let lin = Linear::new(&mut s, d, w, true)?;
            let bn = if batch_norm { Some(BatchNorm::new(&mut s.scope("bn"), w)?) } else { None };
            hidden.push((lin, bn));
            d = w;
        }
        let head = match out_dim {
            Some(o) => Some(Linear::new(&mut b.scope("out"), d, o, true)?),
            None => None,
        };
        Ok(Self { hidden, head, activation })
    }

    pub fn param_count(&self) -> usize {
        self.hidden
            .iter()
            .map(|(l, bn)| l.param_count() + bn.as_ref().map_or(0, BatchNorm::param_count))
            .sum::<usize>()
            + self.head.as_ref().map_or(0, Linear::param_count)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (lin, bn) in &self.hidden {
            h = lin.forward(g, h)?;
            if let Some(bn) = bn {
                h = bn.forward(g, h)?;
            }
            h = self.activation.apply(g, h)?;
        }
        match &self.head {
            Some(head) => head.forward(g, h),
            None => Ok(h),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `x0 * (xi . w) + b + xi` on plain vectors.
pub fn cross_layer(x0: &[f64], xi: &[f64], w: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let d = x0.len();
    if xi.len() != d || w.len() != d || b.len() != d {
        return Err(DpnError::config(format!(
            "cross layer dims differ: x0 {d}, xi {}, w {}, b {}",
            xi.len(),
            w.len(),
            b.len()
        )));
    }
    let s = dot(xi, w);
    Ok((0..d).map(|k| x0[k] * s + b[k] + xi[k]).collect())
}

/// Graph form of [`cross_layer`] with learned `w` and `b`.
#[derive(Debug, Clone)]
pub struct CrossLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
}

impl CrossLayer {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self { w: b.weight("w", dim, 1)?, b: b.zeros("b", &[dim])?, dim })
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }

    /// `x0, xi [B, d]` -> `[B, d]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x0: Var, xi: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let s = g.matmul(xi, w)?;
        let y = g.mul(x0, s)?;
        let y = g.add(y, b)?;
        Ok(g.add(y, xi)?)
    }
}

fn check_fm(x: &[Vec<f64>]) -> Result<()> {
    if x.len() < 2 {
        return Err(DpnError::config(format!("pairwise interactions need at least 2 fields, got {}", x.len())));
    }
    let e = x[0].len();
    if x.iter().any(|r| r.len() != e) {
        return Err(DpnError::config("field embeddings differ in dim"));
    }
    Ok(())
}

/// Sum of `x_i . x_j` over field pairs `i < j`.
pub fn fm_pairwise(x: &[Vec<f64>]) -> Result<f64> {
    check_fm(x)?;
    let mut s = 0.0;
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            s += dot(&x[i], &x[j]);
        }
    }
    Ok(s)
}

/// Per-field form `y_i = (1 / (t - 1)) sum_{j != i} x_i . x_j`; `sum_i y_i * (t - 1) / 2`
/// recovers [`fm_pairwise`].
pub fn fm_pairwise_normalized(x: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_fm(x)?;
    let t = x.len();
    Ok((0..t)
        .map(|i| (0..t).filter(|&j| j != i).map(|j| dot(&x[i], &x[j])).sum::<f64>() / (t - 1) as f64)
        .collect())
}

/// `((sum x)^2 - sum x^2) / 2`, summed over embedding coordinates.
pub fn fm_square_of_sum(x: &[Vec<f64>]) -> Result<f64> {
    check_fm(x)?;
    let e = x[0].len();
    Ok((0..e)
        .map(|k| {
            let s: f64 = x.iter().map(|r| r[k]).sum();
            let sq: f64 = x.iter().map(|r| r[k] * r[k]).sum();
            (s * s - sq) / 2.0
        })
        .sum())
}

/// Static field-interaction layer `W_f X W_l + b` for `X [B, t, m]`.
#[derive(Debug, Clone)]
pub struct FieldDnn {
    pub w_f: ParamId,
    pub w_l: ParamId,
    pub b: ParamId,
    pub t: usize,
    pub m: usize,
    pub c: usize,
}

impl FieldDnn {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, t: usize, m: usize, c: usize) -> Result<Self> {
        Ok(Self { w_f: b.weight("w_f", t, t)?, w_l: b.weight("w_l", m, c)?, b: b.zeros("b", &[c])?, t, m, c })
    }

    pub fn param_count(&self) -> usize {
        self.t * self.t + self.m * self.c + self.c
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.t || s[2] != self.m {
            return Err(DpnError::config(format!(
                "field DNN expects [B, {}, {}], got {s:?}",
                self.t, self.m
            )));
        }
        let (wf, wl, b) = (g.param(self.w_f), g.param(self.w_l), g.param(self.b));
        let mixed = g.matmul(wf, x)?;
        let y = g.matmul(mixed, wl)?;
        Ok(g.add(y, b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhsaConfig {
    pub d_model: usize,
    pub heads: usize,
}

impl MhsaConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Multi-head scaled dot-product attention with output projection.
#[derive(Debug, Clone)]
pub struct Mhsa {
    pub cfg: MhsaConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl Mhsa {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, cfg: MhsaConfig) -> Result<Self> {
        if cfg.heads == 0 || !cfg.d_model.is_multiple_of(cfg.heads) {
            return Err(DpnError::config(format!(
                "{} heads do not divide d_model {}",
                cfg.heads, cfg.d_model
            )));
        }
        let d = cfg.d_model;
        Ok(Self { cfg, wq: b.weight("wq", d, d)?, wk: b.weight("wk", d, d)?, wv: b.weight("wv", d, d)?, wo: b.weight("wo", d, d)? })
    }

    pub fn param_count(&self) -> usize {
        4 * self.cfg.d_model * self.cfg.d_model
    }

    fn split_heads<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = g.reshape(x, &[s[0], s[1], self.cfg.heads, self.cfg.d_k()])?;
        Ok(g.permute(x, &[0, 2, 1, 3])?)
    }

    /// Attention weights `[B, h, s, t]` together with the attended output `[B, s, d]`.
    pub fn attend<T: Float>(&self, g: &mut Graph<'_, T>, queries: Var, keys: Var, values: Var) -> Result<(Var, Var)> {
        let d = self.cfg.d_model;
        for (v, what) in [(queries, "queries"), (keys, "keys"), (values, "values")] {
            let s = g.shape(v);
            if s.len() != 3 || s[2] != d {
                return Err(DpnError::config(format!("attention {what} must be [B, len, {d}], got {s:?}")));
            }
        }
        let (sq, sk) = (g.shape(queries).to_vec(), g.shape(keys).to_vec());
        if g.shape(values)[..2] != sk[..2] || sq[0] != sk[0] {
            return Err(DpnError::config("attention keys, values and queries disagree in batch or length"));
        }
        let (wq, wk, wv, wo) = (g.param(self.wq), g.param(self.wk), g.param(self.wv), g.param(self.wo));
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(keys, wk)?;
        let v = g.matmul(values, wv)?;
        let (q, k, v) = (self.split_heads(g, q)?, self.split_heads(g, k)?, self.split_heads(g, v)?);
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::of(1.0 / (self.cfg.d_k() as f64).sqrt()))?;
        let att = g.softmax(scores, 3)?;
        let o = g.matmul(att, v)?;
        let o = g.permute(o, &[0, 2, 1, 3])?;
        let o = g.reshape(o, &[sq[0], sq[1], d])?;
        Ok((att, g.matmul(o, wo)?))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, queries: Var, keys: Var, values: Var) -> Result<Var> {
        Ok(self.attend(g, queries, keys, values)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_layer_hand_cases() {
        let x = [1.0, 2.0, 3.0];
        assert_eq!(cross_layer(&x, &x, &[0.0; 3], &[0.5; 3]).unwrap(), vec![1.5, 2.5, 3.5]);
        let ones = [1.0; 4];
        let y = cross_layer(&ones, &ones, &ones, &[0.0; 4]).unwrap();
        // multiplicative term is d, plus the residual 1
        assert_eq!(y, vec![5.0; 4]);
        assert!(cross_layer(&x, &ones, &x, &x).is_err());
    }

    #[test]
    fn fm_hand_cases() {
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(fm_pairwise(&eye).unwrap(), 0.0);
        let ones = vec![vec![1.0; 2]; 3];
        assert_eq!(fm_pairwise(&ones).unwrap(), 6.0);
        assert_eq!(fm_square_of_sum(&ones).unwrap(), 6.0);
        let x = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let y = fm_pairwise_normalized(&x).unwrap();
        assert_eq!(y, vec![0.5, 0.5, 1.0]);
        assert_eq!(y.iter().sum::<f64>() * 2.0 / 2.0, fm_pairwise(&x).unwrap());
        assert!(fm_pairwise(&x[..1]).is_err());
    }
}
