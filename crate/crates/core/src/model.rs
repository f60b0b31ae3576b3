//! Model assembly: embeddings, a stack of static or dynamic layers with
//! per-layer context wiring, and a linear click logit.

use std::collections::HashMap;

use dpn_tensor::{Float, Graph, ParamKind, ParamStore, Var};
use serde::{Deserialize, Serialize};

use crate::baselines::{FieldDnn, Mhsa, MhsaConfig};
use crate::builder::Builder;
use crate::data::Batch;
use crate::dpo::{
    Aggregation, FeatureDpo, FeatureDpoConfig, FieldDpo, FieldDpoConfig, GeneratorSpec, HeteroDpo, HeteroDpoConfig,
    HomoDpo, HomoDpoConfig, LocalEncoder,
};
use crate::embeddings::{EmbeddingTable, FieldSchema};
use crate::error::{DpnError, Result};
use crate::nn::{BatchNorm, Linear};
use crate::rng::{SeedStreams, INIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Mlp,
    FeatureDpn,
    FieldDpn,
    Hybrid,
    Sdpn,
}

/// Where a dynamic layer reads its generator context from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    /// Concatenated input embeddings.
    #[default]
    X0,
    /// A second, context-only set of field embeddings.
    Z0,
    /// The layer's own input.
    Prev,
    /// Output of an earlier layer, by name.
    Layer(String),
    /// One field's embedding, by field name.
    Field(String),
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        name: String,
        width: usize,
    },
    FeatureDpo {
        name: String,
        width: usize,
        generator: GeneratorSpec,
        #[serde(default)]
        context: Context,
        #[serde(default = "yes")]
        bias: bool,
        /// Block gradients from flowing into the context tensor.
        #[serde(default)]
        stop_gradient: bool,
    },
    FieldDpo {
        name: String,
        /// Output dim per field.
        width: usize,
        aggregation: Aggregation,
        generator: GeneratorSpec,
        #[serde(default)]
        context: Context,
        #[serde(default = "yes")]
        bias: bool,
        #[serde(default)]
        implicit: bool,
        #[serde(default)]
        stop_gradient: bool,
    },
    FieldDnn {
        name: String,
        width: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Dense { name, .. }
            | LayerSpec::FeatureDpo { name, .. }
            | LayerSpec::FieldDpo { name, .. }
            | LayerSpec::FieldDnn { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SeqEncoder {
    None,
    /// Residual dynamic convolution over the history.
    Homo {
        k: usize,
        generator: GeneratorSpec,
        #[serde(default)]
        local_encoder: LocalEncoder,
        #[serde(default)]
        bias_head: bool,
    },
    /// Residual multi-head self-attention.
    Mhsa { heads: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SeqDecoder {
    MeanPool,
    /// Target embedding transformed by weights generated from the pooled history.
    Hetero { width: usize, generator: GeneratorSpec },
    /// Target embedding attends over the history.
    CrossAttention { heads: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    /// Schema field holding item ids (0 is padding).
    #[serde(default = "item_field")]
    pub item_field: String,
    pub encoder: SeqEncoder,
    pub decoder: SeqDecoder,
}

fn item_field() -> String {
    "item".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub embedding_dim: usize,
    #[serde(default)]
    pub layers: Vec<LayerSpec>,
    /// Batch normalization after every hidden layer, before the ReLU.
    #[serde(default = "yes")]
    pub batch_norm: bool,
    #[serde(default)]
    pub sequence: Option<SequenceSpec>,
}

impl ModelSpec {
    pub fn mlp(embedding_dim: usize, widths: &[usize]) -> Self {
        Self {
            family: Family::Mlp,
            embedding_dim,
            layers: widths
                .iter()
                .enumerate()
                .map(|(i, &w)| LayerSpec::Dense { name: format!("fc{}", i + 1), width: w })
                .collect(),
            batch_norm: true,
            sequence: None,
        }
    }
}

/// Shape of a layer-stack tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dims {
    Flat(usize),
    Fields(usize, usize),
}

impl Dims {
    fn flat(self) -> usize {
        match self {
            Dims::Flat(d) => d,
            Dims::Fields(t, d) => t * d,
        }
    }

    fn fields(self) -> (usize, usize) {
        match self {
            Dims::Flat(d) => (1, d),
            Dims::Fields(t, d) => (t, d),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Dense(Linear),
    Feature(FeatureDpo),
    Field(FieldDpo),
    FieldDnn(FieldDnn),
}

#[derive(Debug, Clone)]
struct Layer {
    name: String,
    op: Op,
    bn: Option<BatchNorm>,
    context: Option<Context>,
    stop_gradient: bool,
    input: Dims,
}

#[derive(Debug, Clone)]
enum Encoder {
    None,
    Homo(HomoDpo),
    Mhsa(Mhsa),
}

#[derive(Debug, Clone)]
enum Decoder {
    MeanPool,
    Hetero(HeteroDpo),
    Cross(Mhsa),
}

#[derive(Debug, Clone)]
struct SeqParts {
    item: usize,
    encoder: Encoder,
    decoder: Decoder,
}

/// A built model owning its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Float> {
    pub spec: ModelSpec,
    pub schema: FieldSchema,
    pub store: ParamStore<T>,
    tables: Vec<EmbeddingTable>,
    ctx_tables: Vec<EmbeddingTable>,
    layers: Vec<Layer>,
    seq: Option<SeqParts>,
    classifier: Linear,
    input: Dims,
}

fn bad(layer: &str, msg: impl std::fmt::Display) -> DpnError {
    DpnError::config(format!("layer `{layer}`: {msg}"))
}

impl<T: Float> Model<T> {
    pub fn build(spec: &ModelSpec, schema: &FieldSchema, seed: u64) -> Result<Self> {
        schema.validate()?;
        if schema.is_empty() {
            return Err(DpnError::config("model needs at least one field"));
        }
        let e = spec.embedding_dim;
        if e == 0 {
            return Err(DpnError::config("embedding_dim must be positive"));
        }
        match (spec.family, &spec.sequence) {
            (Family::Sdpn, None) => return Err(DpnError::config("sdpn family needs a [model.sequence] section")),
            (f, Some(_)) if f != Family::Sdpn => {
                return Err(DpnError::config("only the sdpn family takes a sequence section"))
            }
            _ => {}
        }
        let mut store = ParamStore::new();
        let mut rng = SeedStreams::new(seed).stream(INIT);
        let mut b = Builder::new(&mut store, &mut rng);
        let tables = {
            let mut s = b.scope("emb");
            schema
                .fields
                .iter()
                .map(|f| EmbeddingTable::new(&mut s, &f.name, f.vocab_size, e))
                .collect::<Result<Vec<_>>>()?
        };
        let uses_z0 = spec.layers.iter().any(|l| {
            matches!(l, LayerSpec::FeatureDpo { context: Context::Z0, .. } | LayerSpec::FieldDpo { context: Context::Z0, .. })
        });
        let ctx_tables = if uses_z0 {
            let mut s = b.scope("ctx_emb");
            schema
                .fields
                .iter()
                .map(|f| EmbeddingTable::new(&mut s, &f.name, f.vocab_size, e))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };

        let (seq, input) = match &spec.sequence {
            None => (None, Dims::Fields(schema.len(), e)),
            Some(ss) => {
                let item = schema.index_of(&ss.item_field)?;
                let encoder = match &ss.encoder {
                    SeqEncoder::None => Encoder::None,
                    SeqEncoder::Homo { k, generator, local_encoder, bias_head } => Encoder::Homo(HomoDpo::new(
                        &mut b.scope("encoder"),
                        &HomoDpoConfig {
                            k: *k,
                            n: e,
                            c: 1,
                            local_encoder: *local_encoder,
                            generator: generator.clone(),
                            bias_head: *bias_head,
                        },
                    )?),
                    SeqEncoder::Mhsa { heads } => {
                        Encoder::Mhsa(Mhsa::new(&mut b.scope("encoder"), MhsaConfig { d_model: e, heads: *heads })?)
                    }
                };
                let (decoder, dec_dim) = match &ss.decoder {
                    SeqDecoder::MeanPool => (Decoder::MeanPool, e),
                    SeqDecoder::Hetero { width, generator } => (
                        Decoder::Hetero(HeteroDpo::new(
                            &mut b.scope("decoder"),
                            &HeteroDpoConfig { m: e, n: e, c: *width, generator: generator.clone(), bias: true },
                        )?),
                        *width,
                    ),
                    SeqDecoder::CrossAttention { heads } => (
                        Decoder::Cross(Mhsa::new(&mut b.scope("decoder"), MhsaConfig { d_model: e, heads: *heads })?),
                        e,
                    ),
                };
                (Some(SeqParts { item, encoder, decoder }), Dims::Flat(e + dec_dim))
            }
        };

        let mut outputs: HashMap<String, Dims> = HashMap::new();
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut cur = input;
        let z0 = Dims::Fields(schema.len(), e);
        for ls in &spec.layers {
            let name = ls.name().to_string();
            if name.is_empty() || name.contains('.') || outputs.contains_key(&name) || name == "classifier" {
                return Err(bad(&name, "names must be unique, non-empty, dot-free and not `classifier`"));
            }
            let resolve = |ctx: &Context| -> Result<Dims> {
                Ok(match ctx {
                    Context::X0 => input,
                    Context::Z0 => {
                        if seq.is_some() {
                            return Err(bad(&name, "z0 context is not available for sequence models"));
                        }
                        z0
                    }
                    Context::Prev => cur,
                    Context::Layer(l) => *outputs
                        .get(l)
                        .ok_or_else(|| bad(&name, format!("context layer `{l}` is not an earlier layer")))?,
                    Context::Field(f) => {
                        schema.index_of(f).map_err(|_| bad(&name, format!("context field `{f}` not in schema")))?;
                        Dims::Fields(1, e)
                    }
                })
            };
            let mut s = b.scope(&name);
            let (op, context, stop_gradient, out) = match ls {
                LayerSpec::Dense { width, .. } => {
                    (Op::Dense(Linear::new(&mut s, cur.flat(), *width, true)?), None, false, Dims::Flat(*width))
                }
                LayerSpec::FeatureDpo { width, generator, context, bias, stop_gradient, .. } => {
                    let n = resolve(context)?.flat();
                    let cfg = FeatureDpoConfig { m: cur.flat(), n, c: *width, generator: generator.clone(), bias: *bias };
                    let op = FeatureDpo::new(&mut s, &cfg).map_err(|e| bad(&name, e))?;
                    (Op::Feature(op), Some(context.clone()), *stop_gradient, Dims::Flat(*width))
                }
                LayerSpec::FieldDpo { width, aggregation, generator, context, bias, implicit, stop_gradient, .. } => {
                    let (t1, m) = cur.fields();
                    let (t2, n) = resolve(context)?.fields();
                    let cfg = FieldDpoConfig {
                        t1,
                        t2,
                        m,
                        n,
                        c: *width,
                        aggregation: *aggregation,
                        generator: generator.clone(),
                        bias: *bias,
                        implicit_branch: *implicit,
                    };
                    let self_mode = matches!(aggregation, Aggregation::SelfField | Aggregation::SelfExcluded);
                    if self_mode && *context != Context::Prev {
                        return Err(bad(&name, "self aggregations read their own input; use context = \"prev\""));
                    }
                    let op = FieldDpo::new(&mut s, &cfg).map_err(|e| bad(&name, e))?;
                    (Op::Field(op), Some(context.clone()), *stop_gradient, Dims::Fields(t1, *width))
                }
                LayerSpec::FieldDnn { width, .. } => {
                    let (t, m) = cur.fields();
                    (Op::FieldDnn(FieldDnn::new(&mut s, t, m, *width)?), None, false, Dims::Fields(t, *width))
                }
            };
            let width = match out {
                Dims::Flat(d) | Dims::Fields(_, d) => d,
            };
            if width == 0 {
                return Err(bad(&name, "width must be positive"));
            }
            let bn = if spec.batch_norm { Some(BatchNorm::new(&mut s.scope("bn"), width)?) } else { None };
            layers.push(Layer { name: name.clone(), op, bn, context, stop_gradient, input: cur });
            outputs.insert(name, out);
            cur = out;
        }
        let classifier = Linear::new(&mut b.scope("classifier"), cur.flat(), 1, true)?;
        Ok(Self {
            spec: spec.clone(),
            schema: schema.clone(),
            store,
            tables,
            ctx_tables,
            layers,
            seq,
            classifier,
            input,
        })
    }

    /// Analytic count of non-embedding trainable scalars.
    pub fn param_count(&self) -> usize {
        let layers: usize = self
            .layers
            .iter()
            .map(|l| {
                let op = match &l.op {
                    Op::Dense(x) => x.param_count(),
                    Op::Feature(x) => x.param_count(),
                    Op::Field(x) => x.param_count(),
                    Op::FieldDnn(x) => x.param_count(),
                };
                op + l.bn.as_ref().map_or(0, BatchNorm::param_count)
            })
            .sum();
        let seq = self.seq.as_ref().map_or(0, |s| {
            let enc = match &s.encoder {
                Encoder::None => 0,
                Encoder::Homo(h) => h.param_count(),
                Encoder::Mhsa(m) => m.param_count(),
            };
            let dec = match &s.decoder {
                Decoder::MeanPool => 0,
                Decoder::Hetero(h) => h.param_count(),
                Decoder::Cross(m) => m.param_count(),
            };
            enc + dec
        });
        layers + seq + self.classifier.param_count()
    }

    pub fn embedding_param_count(&self) -> usize {
        self.tables.iter().chain(&self.ctx_tables).map(|t| t.vocab_size * t.dim).sum()
    }

    /// Trainable scalars actually stored, excluding embeddings.
    pub fn stored_param_count(&self) -> usize {
        self.store.count_trainable(None, false)
    }

    pub fn input_dim(&self) -> usize {
        self.input.flat()
    }

    fn embed(&self, g: &mut Graph<'_, T>, tables: &[EmbeddingTable], batch: &Batch) -> Result<(Var, Vec<Var>)> {
        let t = self.schema.len();
        if batch.fields.len() != batch.size * t {
            return Err(DpnError::Data(format!(
                "batch has {} field ids for {} rows of {t} fields",
                batch.fields.len(),
                batch.size
            )));
        }
        let mut per_field = Vec::with_capacity(t);
        for (f, table) in tables.iter().enumerate() {
            let ids: Vec<usize> = (0..batch.size).map(|r| batch.fields[r * t + f]).collect();
            per_field.push(table.lookup(g, &ids)?);
        }
        let flat = if t == 1 { per_field[0] } else { g.concat(&per_field, 1)? };
        let stacked = g.reshape(flat, &[batch.size, t, self.spec.embedding_dim])?;
        Ok((stacked, per_field))
    }

    fn sequence_input(&self, g: &mut Graph<'_, T>, s: &SeqParts, batch: &Batch) -> Result<Var> {
        let (bsz, tlen) = (batch.size, batch.history_len);
        if tlen == 0 || batch.history.len() != bsz * tlen || batch.target.len() != bsz {
            return Err(DpnError::Data("sequence model needs non-empty histories and one target per row".into()));
        }
        let table = &self.tables[s.item];
        let hist = table.lookup_grid(g, &batch.history, bsz)?;
        let tgt = table.lookup(g, &batch.target)?;
        let enc = match &s.encoder {
            Encoder::None => hist,
            Encoder::Homo(h) => {
                let y = h.forward(g, hist)?;
                g.add(hist, y)?
            }
            Encoder::Mhsa(m) => {
                let y = m.forward(g, hist, hist, hist)?;
                g.add(hist, y)?
            }
        };
        let dec = match &s.decoder {
            Decoder::MeanPool => g.mean(enc, 1)?,
            Decoder::Hetero(h) => h.forward(g, tgt, enc)?,
            Decoder::Cross(m) => {
                let e = self.spec.embedding_dim;
                let q = g.reshape(tgt, &[bsz, 1, e])?;
                let y = m.forward(g, q, enc, enc)?;
                g.reshape(y, &[bsz, e])?
            }
        };
        Ok(g.concat(&[tgt, dec], 1)?)
    }

    /// Click logits `[B]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, batch: &Batch) -> Result<Var> {
        let bsz = batch.size;
        if bsz == 0 {
            return Err(DpnError::Data("empty batch".into()));
        }
        let mut fields: Vec<Var> = Vec::new();
        let x0 = match &self.seq {
            Some(s) => self.sequence_input(g, s, batch)?,
            None => {
                let (stacked, per_field) = self.embed(g, &self.tables, batch)?;
                fields = per_field;
                stacked
            }
        };
        let z0 = if self.ctx_tables.is_empty() { None } else { Some(self.embed(g, &self.ctx_tables, batch)?.0) };
        let mut outs: HashMap<&str, Var> = HashMap::new();
        let mut cur = x0;
        for layer in &self.layers {
            let ctx = match &layer.context {
                None => None,
                Some(c) => {
                    let v = match c {
                        Context::X0 => x0,
                        Context::Z0 => z0.expect("z0 tables exist when referenced"),
                        Context::Prev => cur,
                        Context::Layer(l) => outs[l.as_str()],
                        Context::Field(f) => {
                            let i = self.schema.index_of(f)?;
                            fields[i]
                        }
                    };
                    Some(if layer.stop_gradient { g.stop_gradient(v) } else { v })
                }
            };
            let flat = |g: &mut Graph<'_, T>, v: Var| -> Result<Var> {
                let n: usize = g.shape(v)[1..].iter().product();
                Ok(g.reshape(v, &[bsz, n])?)
            };
            let grid = |g: &mut Graph<'_, T>, v: Var, d: Dims| -> Result<Var> {
                let (t, w) = d.fields();
                Ok(g.reshape(v, &[bsz, t, w])?)
            };
            let mut y = match &layer.op {
                Op::Dense(lin) => {
                    let x = flat(g, cur)?;
                    lin.forward(g, x)?
                }
                Op::Feature(f) => {
                    let x = flat(g, cur)?;
                    let z = flat(g, ctx.expect("dynamic layers carry a context"))?;
                    f.forward(g, x, z)?
                }
                Op::Field(f) => {
                    let x = grid(g, cur, layer.input)?;
                    let z = ctx.expect("dynamic layers carry a context");
                    let zt = f.cfg.t2;
                    let z = g.reshape(z, &[bsz, zt, f.cfg.n])?;
                    f.forward(g, x, z)?
                }
                Op::FieldDnn(f) => {
                    let x = grid(g, cur, layer.input)?;
                    f.forward(g, x)?
                }
            };
            if let Some(bn) = &layer.bn {
                y = bn.forward(g, y)?;
            }
            y = g.relu(y)?;
            outs.insert(layer.name.as_str(), y);
            cur = y;
        }
        let x = {
            let n: usize = g.shape(cur)[1..].iter().product();
            g.reshape(cur, &[bsz, n])?
        };
        let logit = self.classifier.forward(g, x)?;
        Ok(g.reshape(logit, &[bsz])?)
    }

    /// Click probabilities in eval mode, computed in chunks.
    pub fn predict(&self, batches: impl IntoIterator<Item = Batch>) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for b in batches {
            let mut g = Graph::eval(&self.store);
            let logit = self.forward(&mut g, &b)?;
            let p = g.sigmoid(logit)?;
            out.extend(g.value(p).data().iter().map(|v| v.as_f64()));
        }
        Ok(out)
    }

    /// Names and kinds of every stored tensor.
    pub fn param_names(&self) -> Vec<(String, ParamKind)> {
        self.store.ids().map(|id| (self.store.name(id).to_string(), self.store.kind(id))).collect()
    }
}
