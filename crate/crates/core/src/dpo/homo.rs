use dpn_tensor::{ConvMode, Float, Graph, ParamId, Var};
use serde::{Deserialize, Serialize};

use super::generator::{Generator, GeneratorSpec};
use crate::builder::Builder;
use crate::error::{DpnError, Result};
use crate::nn::Linear;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalEncoder {
    #[default]
    None,
    /// Static full convolution over time before pooling.
    Conv,
    /// Static depthwise convolution followed by a pointwise mix.
    SepConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomoDpoConfig {
    /// Odd kernel size.
    pub k: usize,
    /// Channel dim of the sequence.
    pub n: usize,
    /// Output channels; `c == 1` selects the depthwise form with `n` outputs.
    pub c: usize,
    #[serde(default)]
    pub local_encoder: LocalEncoder,
    pub generator: GeneratorSpec,
    /// Add a bias generated linearly from the pooled context.
    #[serde(default)]
    pub bias_head: bool,
}

impl HomoDpoConfig {
    pub fn depthwise(&self) -> bool {
        self.c == 1
    }

    pub fn out_dim(&self) -> usize {
        if self.depthwise() {
            self.n
        } else {
            self.c
        }
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    None,
    Conv { kernel: ParamId, bias: ParamId },
    SepConv { depth: ParamId, point: Linear },
}

/// Dynamic 1-D convolution whose `k` kernels come from the pooled sequence.
#[derive(Debug, Clone)]
pub struct HomoDpo {
    pub cfg: HomoDpoConfig,
    /// One generator per kernel offset, `-k/2 ..= k/2`.
    pub generators: Vec<Generator>,
    pub bias_head: Option<Linear>,
    encoder: Encoder,
}

impl HomoDpo {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, cfg: &HomoDpoConfig) -> Result<Self> {
        if cfg.k.is_multiple_of(2) {
            return Err(DpnError::config(format!("kernel size must be odd, got {}", cfg.k)));
        }
        if cfg.generator.heads_in != 1 || cfg.generator.heads_out != 1 {
            return Err(DpnError::config("sequence kernels are single-head"));
        }
        let n = cfg.n;
        let encoder = match cfg.local_encoder {
            LocalEncoder::None => Encoder::None,
            LocalEncoder::Conv => Encoder::Conv {
                kernel: b.weight_nd("enc_kernel", &[cfg.k, n, n], cfg.k * n, n)?,
                bias: b.zeros("enc_bias", &[n])?,
            },
            LocalEncoder::SepConv => Encoder::SepConv {
                depth: b.weight_nd("enc_depth", &[cfg.k, n, 1], cfg.k, 1)?,
                point: Linear::new(&mut b.scope("enc_point"), n, n, true)?,
            },
        };
        let mut generators = Vec::with_capacity(cfg.k);
        for l in 0..cfg.k {
            generators.push(Generator::new(&mut b.scope(&format!("g{l}")), &cfg.generator, n, n, cfg.c, false)?);
        }
        let bias_head = if cfg.bias_head {
            Some(Linear::new(&mut b.scope("bias_head"), n, cfg.out_dim(), true)?)
        } else {
            None
        };
        Ok(Self { cfg: cfg.clone(), generators, bias_head, encoder })
    }

    pub fn param_count(&self) -> usize {
        let (k, n) = (self.cfg.k, self.cfg.n);
        let enc = match &self.encoder {
            Encoder::None => 0,
            Encoder::Conv { .. } => k * n * n + n,
            Encoder::SepConv { point, .. } => k * n + point.param_count(),
        };
        enc + self.generators.iter().map(Generator::param_count).sum::<usize>()
            + self.bias_head.as_ref().map_or(0, Linear::param_count)
    }

    fn check<T: Float>(&self, g: &Graph<'_, T>, x: Var) -> Result<(usize, usize)> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.cfg.n {
            return Err(DpnError::config(format!("sequence DPO expects [B, t, {}], got {s:?}", self.cfg.n)));
        }
        if s[1] == 0 {
            return Err(DpnError::config("empty behavior sequence"));
        }
        Ok((s[0], s[1]))
    }

    /// Mean of the (optionally locally encoded) sequence, `[B, n]`.
    pub fn pooled_context<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.check(g, x)?;
        let e = match &self.encoder {
            Encoder::None => x,
            Encoder::Conv { kernel, bias } => {
                let (kv, bv) = (g.param(*kernel), g.param(*bias));
                let y = g.conv1d(x, kv, ConvMode::Full)?;
                g.add(y, bv)?
            }
            Encoder::SepConv { depth, point } => {
                let dv = g.param(*depth);
                let y = g.conv1d(x, dv, ConvMode::Depthwise)?;
                point.forward(g, y)?
            }
        };
        Ok(g.mean(e, 1)?)
    }

    /// Per-instance kernels `[B, k, n, c]`, offsets in ascending order.
    pub fn generate_kernels<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        let (bsz, _) = self.check(g, x)?;
        let ctx = self.pooled_context(g, x)?;
        let mut taps = Vec::with_capacity(self.cfg.k);
        for gen in &self.generators {
            let w = gen.generate(g, ctx)?;
            taps.push(g.reshape(w.blocks[0], &[bsz, 1, self.cfg.n, self.cfg.c])?);
        }
        let kernels = if taps.len() == 1 { taps[0] } else { g.concat(&taps, 1)? };
        Ok((kernels, ctx))
    }

    /// `X [B, t, n]` -> `[B, t, out_dim]`.
    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (kernels, ctx) = self.generate_kernels(g, x)?;
        let mode = if self.cfg.depthwise() { ConvMode::Depthwise } else { ConvMode::Full };
        let y = g.conv1d(x, kernels, mode)?;
        match &self.bias_head {
            Some(head) => {
                let bsz = g.shape(x)[0];
                let b = head.forward(g, ctx)?;
                let b = g.reshape(b, &[bsz, 1, self.cfg.out_dim()])?;
                Ok(g.add(y, b)?)
            }
            None => Ok(y),
        }
    }
}
