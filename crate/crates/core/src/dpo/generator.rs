//! Weight generators: context vectors in, per-instance weights and bias out.
//!
//! Every generator is split into a nonlinear `hidden` stage and an `expand`
//! stage that is affine in the hidden vector. Averaging (or any convex
//! combination) of generator outputs over context positions can therefore be
//! done on hidden vectors before expansion, which is exact and much cheaper.

use dpn_tensor::{Float, Graph, ParamId, Var};
use serde::{Deserialize, Serialize};

use crate::builder::Builder;
use crate::error::{DpnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// Hidden vector is the context itself and is used verbatim as the flat weights.
    Identity,
    /// Full affine map from context to every weight and bias entry.
    AffineFull,
    /// Gated two-layer generator mixing `rank` expert kernels.
    LowRankMok,
    /// Single bias-free linear map from context to the flat weights.
    HyperDense,
    /// `P phi(z) Q` with a generated `r x r` core and a static bias.
    MatrixDecomp,
    /// `W0 + P phi(z) Q`.
    MatrixDecompResidual,
    /// Squeeze-excitation bottleneck `relu(z W_d + b_d) W_u + b_u`.
    SeLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Identity,
    Sigmoid,
    Softmax,
}

/// Softmax gate logits are clamped to this magnitude.
pub const GATE_CLAMP: f64 = 30.0;

fn default_rank() -> usize {
    4
}
fn default_gate() -> Gate {
    Gate::Softmax
}
fn one() -> usize {
    1
}
fn default_ratio() -> f64 {
    0.25
}
fn default_md_rank() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    /// Number of experts `l` (hidden width of the gated generators).
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_gate")]
    pub gate: Gate,
    #[serde(default = "one")]
    pub heads_in: usize,
    #[serde(default = "one")]
    pub heads_out: usize,
    #[serde(default = "default_ratio")]
    pub se_down_ratio: f64,
    /// Add a learned offset after the expert mix.
    #[serde(default)]
    pub output_bias: bool,
    /// Core size `r` of the matrix-decomposition kinds.
    #[serde(default = "default_md_rank")]
    pub md_rank: usize,
}

impl GeneratorSpec {
    pub fn new(kind: GeneratorKind) -> Self {
        Self {
            kind,
            rank: default_rank(),
            gate: default_gate(),
            heads_in: 1,
            heads_out: 1,
            se_down_ratio: default_ratio(),
            output_bias: false,
            md_rank: default_md_rank(),
        }
    }

    pub fn mok(rank: usize, gate: Gate) -> Self {
        Self { rank, gate, ..Self::new(GeneratorKind::LowRankMok) }
    }

    pub fn with_heads(mut self, heads_in: usize, heads_out: usize) -> Self {
        self.heads_in = heads_in;
        self.heads_out = heads_out;
        self
    }

    pub fn with_output_bias(mut self, on: bool) -> Self {
        self.output_bias = on;
        self
    }

    pub fn se(ratio: f64) -> Self {
        Self { se_down_ratio: ratio, ..Self::new(GeneratorKind::SeLayer) }
    }

    pub fn md(rank: usize, md_rank: usize, residual: bool) -> Self {
        let kind = if residual { GeneratorKind::MatrixDecompResidual } else { GeneratorKind::MatrixDecomp };
        Self { rank, md_rank, output_bias: true, ..Self::new(kind) }
    }

    fn is_md(&self) -> bool {
        matches!(self.kind, GeneratorKind::MatrixDecomp | GeneratorKind::MatrixDecompResidual)
    }
}

/// One active `(input group, output group)` block of a multi-head weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub row0: usize,
    pub rows: usize,
    pub col0: usize,
    pub cols: usize,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Blocks of an `m x c` weight split into `h_in` row groups and `h_out` column
/// groups; a block is kept when the groups overlap on the common refinement of
/// both partitions. Equal head counts give a block diagonal, `(1, 1)` the full matrix.
pub fn head_blocks(m: usize, c: usize, h_in: usize, h_out: usize) -> Result<Vec<Block>> {
    if h_in == 0 || h_out == 0 || !m.is_multiple_of(h_in) || !c.is_multiple_of(h_out) {
        return Err(DpnError::config(format!(
            "heads ({h_in}, {h_out}) must divide the weight extents ({m}, {c})"
        )));
    }
    let lcm = h_in / gcd(h_in, h_out) * h_out;
    let (sa, sb) = (lcm / h_in, lcm / h_out);
    let (rows, cols) = (m / h_in, c / h_out);
    let mut out = Vec::new();
    for a in 0..h_in {
        for b in 0..h_out {
            if a * sa < (b + 1) * sb && b * sb < (a + 1) * sa {
                out.push(Block { row0: a * rows, rows, col0: b * cols, cols });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Params {
    Identity,
    Affine { w_hat: ParamId, b_hat: ParamId, w_dot: Option<ParamId>, b_dot: Option<ParamId> },
    Hyper { w: ParamId },
    Mok { w1: ParamId, b1: ParamId, w2: ParamId, b2: Option<ParamId> },
    Se { wd: ParamId, bd: ParamId, wu: ParamId, bu: ParamId },
    Md { w1: ParamId, b1: ParamId, w2: ParamId, b2: Option<ParamId>, p: ParamId, q: ParamId, w0: Option<ParamId>, bias: Option<ParamId> },
}

/// Generated parameters for a batch of instances.
#[derive(Debug, Clone)]
pub struct DynWeights {
    /// One `[N, rows, cols]` tensor per active block.
    pub blocks: Vec<Var>,
    /// `[N, c]` (generated) or `[c]` (static), if the layer has a bias.
    pub bias: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub spec: GeneratorSpec,
    /// Context width.
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub bias: bool,
    blocks: Vec<Block>,
    hidden_dim: usize,
    params: Params,
}

impl Generator {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, spec: &GeneratorSpec, n: usize, m: usize, c: usize, bias: bool) -> Result<Self> {
        let blocks = head_blocks(m, c, spec.heads_in, spec.heads_out)?;
        let wlen: usize = blocks.iter().map(|bl| bl.rows * bl.cols).sum();
        let flat = wlen + if bias { c } else { 0 };
        if n == 0 || m == 0 || c == 0 {
            return Err(DpnError::config(format!("generator extents must be positive, got n={n} m={m} c={c}")));
        }
        let (params, hidden_dim) = match spec.kind {
            GeneratorKind::Identity => {
                if flat != n {
                    return Err(DpnError::config(format!(
                        "identity generator needs context width {flat} (= weights + bias), got {n}"
                    )));
                }
                (Params::Identity, n)
            }
            GeneratorKind::AffineFull => {
                let w_hat = b.weight("w_hat", n, wlen)?;
                let b_hat = b.zeros("b_hat", &[wlen])?;
                let (w_dot, b_dot) = if bias {
                    (Some(b.weight("w_dot", n, c)?), Some(b.zeros("b_dot", &[c])?))
                } else {
                    (None, None)
                };
                (Params::Affine { w_hat, b_hat, w_dot, b_dot }, n)
            }
            GeneratorKind::HyperDense => (Params::Hyper { w: b.weight("w", n, flat)? }, n),
            GeneratorKind::LowRankMok => {
                let l = check_rank(spec)?;
                let w1 = b.weight("w1", n, l)?;
                let b1 = b.zeros("b1", &[l])?;
                let w2 = b.weight("w2", l, flat)?;
                let b2 = if spec.output_bias { Some(b.zeros("b2", &[flat])?) } else { None };
                (Params::Mok { w1, b1, w2, b2 }, l)
            }
            GeneratorKind::SeLayer => {
                if !(spec.se_down_ratio > 0.0) {
                    return Err(DpnError::config("se_down_ratio must be positive"));
                }
                let r = ((n as f64 * spec.se_down_ratio).round() as usize).max(1);
                let wd = b.weight("w_down", n, r)?;
                let bd = b.zeros("b_down", &[r])?;
                let wu = b.weight("w_up", r, flat)?;
                let bu = b.zeros("b_up", &[flat])?;
                (Params::Se { wd, bd, wu, bu }, r)
            }
            GeneratorKind::MatrixDecomp | GeneratorKind::MatrixDecompResidual => {
                if blocks.len() != 1 {
                    return Err(DpnError::config("matrix decomposition generators are single-head"));
                }
                let l = check_rank(spec)?;
                let r = spec.md_rank;
                if r == 0 {
                    return Err(DpnError::config("md_rank must be at least 1"));
                }
                let w1 = b.weight("w1", n, l)?;
                let b1 = b.zeros("b1", &[l])?;
                let w2 = b.weight("w2", l, r * r)?;
                let b2 = if spec.output_bias { Some(b.zeros("b2", &[r * r])?) } else { None };
                let p = b.weight("p", m, r)?;
                let q = b.weight("q", r, c)?;
                let w0 = if spec.kind == GeneratorKind::MatrixDecompResidual { Some(b.weight("w0", m, c)?) } else { None };
                let bias = if bias { Some(b.zeros("bias", &[c])?) } else { None };
                (Params::Md { w1, b1, w2, b2, p, q, w0, bias }, l)
            }
        };
        Ok(Self { spec: spec.clone(), n, m, c, bias, blocks, hidden_dim, params })
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    fn weight_len(&self) -> usize {
        self.blocks.iter().map(|b| b.rows * b.cols).sum()
    }

    fn flat_len(&self) -> usize {
        self.weight_len() + if self.bias { self.c } else { 0 }
    }

    pub fn param_count(&self) -> usize {
        let (n, m, c, l) = (self.n, self.m, self.c, self.spec.rank);
        let (w, f) = (self.weight_len(), self.flat_len());
        match &self.params {
            Params::Identity => 0,
            Params::Affine { .. } => n * w + w + if self.bias { n * c + c } else { 0 },
            Params::Hyper { .. } => n * f,
            Params::Mok { b2, .. } => n * l + l + l * f + if b2.is_some() { f } else { 0 },
            Params::Se { .. } => {
                let r = self.hidden_dim;
                n * r + r + r * f + f
            }
            Params::Md { b2, w0, bias, .. } => {
                let r = self.spec.md_rank;
                n * l + l + l * r * r
                    + if b2.is_some() { r * r } else { 0 }
                    + m * r
                    + r * c
                    + if w0.is_some() { m * c } else { 0 }
                    + if bias.is_some() { c } else { 0 }
            }
        }
    }

    /// Nonlinear stage: `z [N, n] -> [N, hidden_dim]`.
    pub fn hidden<T: Float>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 2 || s[1] != self.n {
            return Err(DpnError::config(format!(
                "generator expects context [N, {}], got {:?}",
                self.n, s
            )));
        }
        match &self.params {
            Params::Identity | Params::Affine { .. } | Params::Hyper { .. } => Ok(z),
            Params::Mok { w1, b1, .. } | Params::Md { w1, b1, .. } => {
                let (w1, b1) = (g.param(*w1), g.param(*b1));
                let a = g.matmul(z, w1)?;
                let a = g.add(a, b1)?;
                self.gate(g, a)
            }
            Params::Se { wd, bd, .. } => {
                let (wd, bd) = (g.param(*wd), g.param(*bd));
                let a = g.matmul(z, wd)?;
                let a = g.add(a, bd)?;
                Ok(g.relu(a)?)
            }
        }
    }

    fn gate<T: Float>(&self, g: &mut Graph<'_, T>, a: Var) -> Result<Var> {
        Ok(match self.spec.gate {
            Gate::Identity => a,
            Gate::Sigmoid => g.sigmoid(a)?,
            Gate::Softmax => {
                let c = T::of(GATE_CLAMP);
                let a = g.clamp(a, -c, c)?;
                g.softmax(a, 1)?
            }
        })
    }

    /// Affine stage: `h [N, hidden_dim] -> weights and bias`.
    pub fn expand<T: Float>(&self, g: &mut Graph<'_, T>, h: Var) -> Result<DynWeights> {
        let nrow = g.shape(h)[0];
        let flat = match &self.params {
            Params::Identity => h,
            Params::Affine { w_hat, b_hat, w_dot, b_dot } => {
                let (wh, bh) = (g.param(*w_hat), g.param(*b_hat));
                let w = g.matmul(h, wh)?;
                let w = g.add(w, bh)?;
                let bias = match (w_dot, b_dot) {
                    (Some(wd), Some(bd)) => {
                        let (wd, bd) = (g.param(*wd), g.param(*bd));
                        let b = g.matmul(h, wd)?;
                        Some(g.add(b, bd)?)
                    }
                    _ => None,
                };
                return Ok(DynWeights { blocks: self.split_blocks(g, w, nrow)?, bias });
            }
            Params::Hyper { w } => {
                let w = g.param(*w);
                g.matmul(h, w)?
            }
            Params::Mok { w2, b2, .. } => {
                let w2v = g.param(*w2);
                let f = g.matmul(h, w2v)?;
                match b2 {
                    Some(b2) => {
                        let b2 = g.param(*b2);
                        g.add(f, b2)?
                    }
                    None => f,
                }
            }
            Params::Se { wu, bu, .. } => {
                let (wu, bu) = (g.param(*wu), g.param(*bu));
                let f = g.matmul(h, wu)?;
                g.add(f, bu)?
            }
            Params::Md { w2, b2, p, q, w0, bias, .. } => {
                let r = self.spec.md_rank;
                let w2v = g.param(*w2);
                let mut phi = g.matmul(h, w2v)?;
                if let Some(b2) = b2 {
                    let b2 = g.param(*b2);
                    phi = g.add(phi, b2)?;
                }
                let phi = g.reshape(phi, &[nrow, r, r])?;
                let (p, q) = (g.param(*p), g.param(*q));
                let pw = g.matmul(p, phi)?;
                let mut w = g.matmul(pw, q)?;
                if let Some(w0) = w0 {
                    let w0 = g.param(*w0);
                    w = g.add(w, w0)?;
                }
                let bias = bias.map(|b| g.param(b));
                return Ok(DynWeights { blocks: vec![w], bias });
            }
        };
        let wlen = self.weight_len();
        let w = if self.bias { g.narrow(flat, 1, 0, wlen)? } else { flat };
        let bias = if self.bias { Some(g.narrow(flat, 1, wlen, self.c)?) } else { None };
        Ok(DynWeights { blocks: self.split_blocks(g, w, nrow)?, bias })
    }

    fn split_blocks<T: Float>(&self, g: &mut Graph<'_, T>, w: Var, nrow: usize) -> Result<Vec<Var>> {
        if let [b] = self.blocks.as_slice() {
            return Ok(vec![g.reshape(w, &[nrow, b.rows, b.cols])?]);
        }
        let mut off = 0;
        let mut out = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let len = b.rows * b.cols;
            let part = g.narrow(w, 1, off, len)?;
            out.push(g.reshape(part, &[nrow, b.rows, b.cols])?);
            off += len;
        }
        Ok(out)
    }

    pub fn generate<T: Float>(&self, g: &mut Graph<'_, T>, z: Var) -> Result<DynWeights> {
        let h = self.hidden(g, z)?;
        self.expand(g, h)
    }

    /// `y = x W + b` for `x [N, R, m]` with per-instance weights `[N, m, c]`.
    pub fn apply<T: Float>(&self, g: &mut Graph<'_, T>, x: Var, w: &DynWeights) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.m {
            return Err(DpnError::config(format!("dynamic layer expects input [N, R, {}], got {:?}", self.m, s)));
        }
        let y = if let [wv] = w.blocks.as_slice() {
            g.matmul(x, *wv)?
        } else {
            let mut cols: Vec<(usize, Var)> = Vec::new();
            for (b, &wv) in self.blocks.iter().zip(&w.blocks) {
                let xa = g.narrow(x, 2, b.row0, b.rows)?;
                let part = g.matmul(xa, wv)?;
                match cols.iter_mut().find(|(c0, _)| *c0 == b.col0) {
                    Some((_, acc)) => *acc = g.add(*acc, part)?,
                    None => cols.push((b.col0, part)),
                }
            }
            cols.sort_by_key(|(c0, _)| *c0);
            let parts: Vec<Var> = cols.into_iter().map(|(_, v)| v).collect();
            if parts.len() == 1 {
                parts[0]
            } else {
                g.concat(&parts, 2)?
            }
        };
        match w.bias {
            Some(b) => {
                let b = if g.shape(b).len() == 2 {
                    let n = g.shape(b)[0];
                    g.reshape(b, &[n, 1, self.c])?
                } else {
                    b
                };
                Ok(g.add(y, b)?)
            }
            None => Ok(y),
        }
    }

    /// Parameter ids in declaration order (for tests that overwrite them).
    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.params {
            Params::Identity => vec![],
            Params::Affine { w_hat, b_hat, w_dot, b_dot } => {
                let mut v = vec![*w_hat, *b_hat];
                v.extend(w_dot.iter().chain(b_dot.iter()).copied());
                v
            }
            Params::Hyper { w } => vec![*w],
            Params::Mok { w1, b1, w2, b2 } => {
                let mut v = vec![*w1, *b1, *w2];
                v.extend(b2.iter().copied());
                v
            }
            Params::Se { wd, bd, wu, bu } => vec![*wd, *bd, *wu, *bu],
            Params::Md { w1, b1, w2, b2, p, q, w0, bias } => {
                let mut v = vec![*w1, *b1, *w2];
                v.extend(b2.iter().copied());
                v.extend([*p, *q]);
                v.extend(w0.iter().chain(bias.iter()).copied());
                v
            }
        }
    }

    /// Named handles used by the algebraic-identity oracles.
    pub fn affine_params(&self) -> Option<(ParamId, ParamId, Option<ParamId>, Option<ParamId>)> {
        match &self.params {
            Params::Affine { w_hat, b_hat, w_dot, b_dot } => Some((*w_hat, *b_hat, *w_dot, *b_dot)),
            _ => None,
        }
    }

    pub fn mok_params(&self) -> Option<(ParamId, ParamId, ParamId, Option<ParamId>)> {
        match &self.params {
            Params::Mok { w1, b1, w2, b2 } => Some((*w1, *b1, *w2, *b2)),
            _ => None,
        }
    }

    pub fn md_params(&self) -> Option<(ParamId, ParamId, ParamId, Option<ParamId>, ParamId, ParamId, Option<ParamId>)> {
        match &self.params {
            Params::Md { w1, b1, w2, b2, p, q, w0, .. } => Some((*w1, *b1, *w2, *b2, *p, *q, *w0)),
            _ => None,
        }
    }

    pub fn uses_md(&self) -> bool {
        self.spec.is_md()
    }
}

fn check_rank(spec: &GeneratorSpec) -> Result<usize> {
    if spec.rank == 0 {
        return Err(DpnError::config(format!("{:?} generator needs rank >= 1", spec.kind)));
    }
    Ok(spec.rank)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_block_layouts() {
        assert_eq!(head_blocks(4, 6, 1, 1).unwrap(), vec![Block { row0: 0, rows: 4, col0: 0, cols: 6 }]);
        let d = head_blocks(4, 6, 2, 2).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!((d[1].row0, d[1].col0), (2, 3));
        // 2 input groups vs 3 output groups: the middle output group touches both
        let o = head_blocks(4, 6, 2, 3).unwrap();
        assert_eq!(o.len(), 4);
        assert!(head_blocks(5, 6, 2, 1).is_err());
    }
}
