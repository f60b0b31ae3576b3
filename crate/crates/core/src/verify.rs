//! Verification suites: closed-form identities of the dynamic layers,
//! gradient checks across every layer type, and metric/optimizer oracles.

use std::fmt;
use std::str::FromStr;

use dpn_tensor::{grad_check_all, GradCheckOptions, GradCheckReport, Graph, ParamKind, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{cross_layer, fm_pairwise_normalized, CrossLayer, FieldDnn, Mhsa, MhsaConfig};
use crate::builder::Builder;
use crate::data::Batch;
use crate::dpo::{
    Aggregation, FeatureDpo, FeatureDpoConfig, FieldDpo, FieldDpoConfig, Gate, GeneratorKind, GeneratorSpec, HeteroDpo,
    HeteroDpoConfig, HomoDpo, HomoDpoConfig, LocalEncoder, GATE_CLAMP,
};
use crate::embeddings::{FieldSchema, FieldSpec};
use crate::error::{DpnError, Result};
use crate::metrics::{auc, auc_pairwise};
use crate::model::{Context, Family, LayerSpec, Model, ModelSpec, SeqDecoder, SeqEncoder, SequenceSpec};
use crate::nn::BatchNorm;
use crate::optim::{Adam, AdamConfig};

pub const IDENTITY_TOL: f64 = 1e-10;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const AUC_TOL: f64 = 1e-12;
pub const ADAM_TOL: f64 = 1e-12;
/// Size of the output perturbation applied by fault injection.
pub const FAULT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Identities,
    Gradcheck,
    Oracles,
    All,
}

impl FromStr for Suite {
    type Err = DpnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identities" => Ok(Suite::Identities),
            "gradcheck" => Ok(Suite::Gradcheck),
            "oracles" => Ok(Suite::Oracles),
            "all" => Ok(Suite::All),
            _ => Err(DpnError::config(format!(
                "unknown suite `{s}` (expected identities, gradcheck, oracles or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub max_error: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Instances or seeds checked.
    pub cases: usize,
}

impl PropertyResult {
    pub fn new(name: &str, max_error: f64, threshold: f64, cases: usize) -> Self {
        Self { name: name.into(), max_error, threshold, passed: max_error.is_finite() && max_error < threshold, cases }
    }
}

impl fmt::Display for PropertyResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<40} max_err {:>10.3e}  threshold {:>8.1e}  cases {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_error,
            self.threshold,
            self.cases
        )
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Random instances per identity.
    pub instances: usize,
    /// Seeds per gradient-check case.
    pub seeds: usize,
    /// Perturb every fused layer output by [`FAULT`] before comparison.
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { instances: 100, seeds: 20, inject_fault: false }
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Identities | Suite::All) {
        out.extend(identities(opts)?);
    }
    if matches!(suite, Suite::Gradcheck | Suite::All) {
        out.extend(gradchecks(opts)?);
    }
    if matches!(suite, Suite::Oracles | Suite::All) {
        out.extend(oracles(opts)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------- helpers

fn uni(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, uni(rng, n)).expect("matching length")
}

/// Overwrite every trainable tensor with uniform values so zero-initialized
/// biases take part in the checks.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.kind(id) != ParamKind::Buffer {
            let v = uni(rng, store.get(id).numel());
            store.set_data(id, &v).expect("same length");
        }
    }
}

fn vals(store: &ParamStore<f64>, id: dpn_tensor::ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

fn build<L>(seed: u64, f: impl FnOnce(&mut Builder<'_, f64>) -> Result<L>) -> Result<(ParamStore<f64>, L, ChaCha8Rng)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = {
        let mut b = Builder::new(&mut store, &mut rng);
        f(&mut b.scope("l"))?
    };
    randomize(&mut store, &mut rng);
    Ok((store, layer, rng))
}

fn forward(
    store: &ParamStore<f64>,
    inputs: &[&Tensor<f64>],
    fault: bool,
    f: impl FnOnce(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input((*t).clone())).collect();
    let y = f(&mut g, &vars)?;
    let mut out = g.value(y).data().to_vec();
    if fault {
        out[0] += FAULT;
    }
    Ok(out)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, |m, d| if d.is_nan() { f64::INFINITY } else { m.max(d) })
}

fn gate(kind: Gate, a: &mut [f64]) {
    match kind {
        Gate::Identity => {}
        Gate::Sigmoid => a.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
        Gate::Softmax => {
            a.iter_mut().for_each(|v| *v = v.clamp(-GATE_CLAMP, GATE_CLAMP));
            let mx = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = a.iter().map(|v| (v - mx).exp()).sum();
            a.iter_mut().for_each(|v| *v = (*v - mx).exp() / s);
        }
    }
}

/// `v [len] @ w [len, cols]` (+ `b`).
fn vecmat(v: &[f64], w: &[f64], cols: usize, b: Option<&[f64]>) -> Vec<f64> {
    let mut out = b.map_or_else(|| vec![0.0; cols], <[f64]>::to_vec);
    for (i, &vi) in v.iter().enumerate() {
        for j in 0..cols {
            out[j] += vi * w[i * cols + j];
        }
    }
    out
}

fn mean_rows(x: &[f64], rows: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for r in 0..rows {
        for j in 0..d {
            m[j] += x[r * d + j] / rows as f64;
        }
    }
    m
}

fn result(name: &str, errs: impl IntoIterator<Item = f64>, threshold: f64) -> PropertyResult {
    let mut n = 0;
    let mut worst = 0.0f64;
    for e in errs {
        n += 1;
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
    }
    PropertyResult::new(name, worst, threshold, n)
}

// ------------------------------------------------------------- identities

pub fn identities(opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let n = opts.instances;
    let fault = opts.inject_fault;
    Ok(vec![
        result("feature_dpo_affine_expansion", (0..n).map(|s| affine_expansion(s as u64, fault)).collect::<Result<Vec<_>>>()?, IDENTITY_TOL),
        result("cross_layer_degeneration", (0..n).map(|s| cross_degeneration(s as u64, fault)).collect::<Result<Vec<_>>>()?, IDENTITY_TOL),
        fm_degeneration(n, fault)?,
        result("homo_kernel_expansion", (0..n).map(|s| homo_expansion(s as u64, fault)).collect::<Result<Vec<_>>>()?, IDENTITY_TOL),
        result("hetero_bilinear_expansion", (0..n).map(|s| hetero_expansion(s as u64, fault)).collect::<Result<Vec<_>>>()?, IDENTITY_TOL),
        result("md_dense_product", (0..n).map(|s| md_product(s as u64, fault)).collect::<Result<Vec<_>>>()?, IDENTITY_TOL),
        result("mok_equal_gates", (0..n).map(|s| mok_equal_gates(s as u64, fault)).collect::<Result<Vec<_>>>()?, IDENTITY_TOL),
        result("multi_head_block_layout", (0..n).map(|s| multi_head(s as u64, fault)).collect::<Result<Vec<_>>>()?, IDENTITY_TOL),
        result("single_head_bit_equality", (0..n).map(|s| single_head_bits(s as u64, fault)).collect::<Result<Vec<_>>>()?, f64::MIN_POSITIVE),
        result("field_context_permutation", (0..n).map(|s| context_permutation(s as u64, fault)).collect::<Result<Vec<_>>>()?, IDENTITY_TOL),
    ])
}

fn dims(rng: &mut ChaCha8Rng, hi: usize) -> (usize, usize, usize, usize) {
    (rng.gen_range(1..=hi), rng.gen_range(1..=hi), rng.gen_range(1..=hi), rng.gen_range(1..=3))
}

/// Fused affine DPO vs `z^T W_hat x + W_dot^T z + B_hat^T x + b_dot` written out.
pub fn affine_expansion(seed: u64, fault: bool) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xA11);
    let (m, n, c, bsz) = dims(&mut r, 8);
    let cfg = FeatureDpoConfig { m, n, c, generator: GeneratorSpec::new(GeneratorKind::AffineFull), bias: true };
    let (store, layer, mut rng) = build(seed, |b| FeatureDpo::new(b, &cfg))?;
    let (x, z) = (tensor(&[bsz, m], &mut rng), tensor(&[bsz, n], &mut rng));
    let fused = forward(&store, &[&x, &z], fault, |g, v| layer.forward(g, v[0], v[1]))?;
    let (wh, bh, wd, bd) = layer.generator.affine_params().expect("affine");
    let (wh, bh, wd, bd) = (vals(&store, wh), vals(&store, bh), vals(&store, wd.unwrap()), vals(&store, bd.unwrap()));
    let mut want = Vec::with_capacity(bsz * c);
    for b in 0..bsz {
        let (xb, zb) = (&x.data()[b * m..(b + 1) * m], &z.data()[b * n..(b + 1) * n]);
        for k in 0..c {
            let mut y = bd[k];
            for j in 0..n {
                y += zb[j] * wd[j * c + k];
            }
            for a in 0..m {
                let mut w = bh[a * c + k];
                for j in 0..n {
                    w += zb[j] * wh[j * m * c + a * c + k];
                }
                y += xb[a] * w;
            }
            want.push(y);
        }
    }
    Ok(max_abs(&fused, &want))
}

/// Affine DPO with `W_hat[j, a c + k] = w_a [j == k]`, `B_hat = I`, `W_dot = 0`,
/// `b_dot = b`, context `x0` and input `xi` is a cross layer.
pub fn cross_degeneration(seed: u64, fault: bool) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xC805);
    let (d, _, _, bsz) = dims(&mut r, 8);
    let cfg = FeatureDpoConfig { m: d, n: d, c: d, generator: GeneratorSpec::new(GeneratorKind::AffineFull), bias: true };
    let (mut store, layer, mut rng) = build(seed, |b| FeatureDpo::new(b, &cfg))?;
    let (w, bias) = (uni(&mut rng, d), uni(&mut rng, d));
    let (wh, bh, wd, bd) = layer.generator.affine_params().expect("affine");
    let mut what = vec![0.0; d * d * d];
    let mut bhat = vec![0.0; d * d];
    for a in 0..d {
        bhat[a * d + a] = 1.0;
        for k in 0..d {
            what[k * d * d + a * d + k] = w[a];
        }
    }
    store.set_data(wh, &what)?;
    store.set_data(bh, &bhat)?;
    store.set_data(wd.unwrap(), &vec![0.0; d * d])?;
    store.set_data(bd.unwrap(), &bias)?;
    let (xi, x0) = (tensor(&[bsz, d], &mut rng), tensor(&[bsz, d], &mut rng));
    let fused = forward(&store, &[&xi, &x0], fault, |g, v| layer.forward(g, v[0], v[1]))?;
    let mut want = Vec::new();
    for b in 0..bsz {
        want.extend(cross_layer(&x0.data()[b * d..(b + 1) * d], &xi.data()[b * d..(b + 1) * d], &w, &bias)?);
    }
    Ok(max_abs(&fused, &want))
}

/// Self-excluded field DPO with an identity generator is the per-field FM term.
pub fn fm_degeneration(instances: usize, fault: bool) -> Result<PropertyResult> {
    let mut worst_ratio = 0.0f64;
    let mut worst = PropertyResult::new("fm_degeneration", 0.0, 1e-12, 0);
    for seed in 0..instances as u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xF1);
        let t = r.gen_range(2..=6);
        let e = r.gen_range(1..=6);
        let bsz = r.gen_range(1..=3);
        let cfg = FieldDpoConfig {
            t1: t,
            t2: t,
            m: e,
            n: e,
            c: 1,
            aggregation: Aggregation::SelfExcluded,
            generator: GeneratorSpec::new(GeneratorKind::Identity),
            bias: false,
            implicit_branch: false,
        };
        let (store, layer, mut rng) = build(seed, |b| FieldDpo::new(b, &cfg))?;
        let x = tensor(&[bsz, t, e], &mut rng);
        let fused = forward(&store, &[&x], fault, |g, v| layer.forward(g, v[0], v[0]))?;
        let mut want = Vec::new();
        for b in 0..bsz {
            let rows: Vec<Vec<f64>> = (0..t).map(|i| x.data()[(b * t + i) * e..(b * t + i + 1) * e].to_vec()).collect();
            want.extend(fm_pairwise_normalized(&rows)?);
        }
        let pairs = (t * (t - 1) / 2) as f64;
        let err = max_abs(&fused, &want);
        let threshold = 1e-12 * pairs;
        let ratio = err / threshold;
        if ratio >= worst_ratio || !err.is_finite() {
            worst_ratio = if err.is_finite() { ratio } else { f64::INFINITY };
            worst = PropertyResult::new("fm_degeneration", err, threshold, 0);
        }
    }
    worst.cases = instances;
    Ok(worst)
}

/// Homogeneous layer with identity-gate MoK: kernel at offset `l` is
/// `x_hat W1_l W2_l + b1_l W2_l`, applied as a same-padded convolution.
pub fn homo_expansion(seed: u64, fault: bool) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x4030);
    let k = [1, 3, 5][r.gen_range(0..3)];
    let n = r.gen_range(1..=6);
    let c = r.gen_range(1..=2);
    let t = r.gen_range(1..=7);
    let bsz = r.gen_range(1..=3);
    let l = r.gen_range(1..=4);
    let cfg = HomoDpoConfig {
        k,
        n,
        c,
        local_encoder: LocalEncoder::None,
        generator: GeneratorSpec::mok(l, Gate::Identity),
        bias_head: false,
    };
    let (store, layer, mut rng) = build(seed, |b| HomoDpo::new(b, &cfg))?;
    let x = tensor(&[bsz, t, n], &mut rng);
    let fused = forward(&store, &[&x], fault, |g, v| layer.forward(g, v[0]))?;
    let depthwise = c == 1;
    let cout = if depthwise { n } else { c };
    let mut want = vec![0.0; bsz * t * cout];
    for b in 0..bsz {
        let xb = &x.data()[b * t * n..(b + 1) * t * n];
        let xhat = mean_rows(xb, t, n);
        for (o, gen) in layer.generators.iter().enumerate() {
            let (w1, b1, w2, _) = gen.mok_params().expect("mok");
            let h = vecmat(&xhat, &vals(&store, w1), l, Some(&vals(&store, b1)));
            let kern = vecmat(&h, &vals(&store, w2), n * c, None);
            for i in 0..t {
                let src = i as isize + o as isize - (k / 2) as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let xr = &xb[src as usize * n..(src as usize + 1) * n];
                let yr = &mut want[(b * t + i) * cout..(b * t + i + 1) * cout];
                if depthwise {
                    for j in 0..n {
                        yr[j] += xr[j] * kern[j];
                    }
                } else {
                    for q in 0..c {
                        for j in 0..n {
                            yr[q] += xr[j] * kern[j * c + q];
                        }
                    }
                }
            }
        }
    }
    Ok(max_abs(&fused, &want))
}

/// Heterogeneous layer with identity-gate MoK:
/// `y = z_hat^T W1 W2 q + (b1 W2)^T q + bias(z_hat)` written out.
pub fn hetero_expansion(seed: u64, fault: bool) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x4E7);
    let (m, n, c, bsz) = dims(&mut r, 6);
    let t = r.gen_range(1..=5);
    let l = r.gen_range(1..=4);
    let cfg = HeteroDpoConfig { m, n, c, generator: GeneratorSpec::mok(l, Gate::Identity), bias: true };
    let (store, layer, mut rng) = build(seed, |b| HeteroDpo::new(b, &cfg))?;
    let (q, z) = (tensor(&[bsz, m], &mut rng), tensor(&[bsz, t, n], &mut rng));
    let fused = forward(&store, &[&q, &z], fault, |g, v| layer.forward(g, v[0], v[1]))?;
    let (w1, b1, w2, _) = layer.inner.generator.mok_params().expect("mok");
    let (w1, b1, w2) = (vals(&store, w1), vals(&store, b1), vals(&store, w2));
    let flat = m * c + c;
    let mut want = Vec::new();
    for b in 0..bsz {
        let zhat = mean_rows(&z.data()[b * t * n..(b + 1) * t * n], t, n);
        let qb = &q.data()[b * m..(b + 1) * m];
        for k in 0..c {
            let mut y = 0.0;
            for j in 0..l {
                let mut hj = b1[j];
                for i in 0..n {
                    hj += zhat[i] * w1[i * l + j];
                }
                let mut s = w2[j * flat + m * c + k];
                for a in 0..m {
                    s += qb[a] * w2[j * flat + a * c + k];
                }
                y += hj * s;
            }
            want.push(y);
        }
    }
    Ok(max_abs(&fused, &want))
}

/// Matrix-decomposition generator: `W = P phi(z) Q + W0`.
pub fn md_product(seed: u64, fault: bool) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x3D);
    let (m, n, c, bsz) = dims(&mut r, 6);
    let l = r.gen_range(1..=4);
    let rank = r.gen_range(1..=4);
    let mut spec = GeneratorSpec::md(l, rank, true);
    spec.gate = Gate::Softmax;
    let cfg = FeatureDpoConfig { m, n, c, generator: spec, bias: true };
    let (store, layer, mut rng) = build(seed, |b| FeatureDpo::new(b, &cfg))?;
    let (x, z) = (tensor(&[bsz, m], &mut rng), tensor(&[bsz, n], &mut rng));
    let fused = forward(&store, &[&x, &z], fault, |g, v| layer.forward(g, v[0], v[1]))?;
    let (w1, b1, w2, b2, p, q, w0) = layer.generator.md_params().expect("md");
    let (w1, b1, w2, b2) = (vals(&store, w1), vals(&store, b1), vals(&store, w2), vals(&store, b2.unwrap()));
    let (p, q, w0) = (vals(&store, p), vals(&store, q), vals(&store, w0.unwrap()));
    let bias = vals(&store, store.find("l.bias").expect("bias"));
    let mut want = Vec::new();
    for b in 0..bsz {
        let mut h = vecmat(&z.data()[b * n..(b + 1) * n], &w1, l, Some(&b1));
        gate(Gate::Softmax, &mut h);
        let phi = vecmat(&h, &w2, rank * rank, Some(&b2));
        let xb = &x.data()[b * m..(b + 1) * m];
        for k in 0..c {
            let mut y = bias[k];
            for a in 0..m {
                let mut w = w0[a * c + k];
                for i in 0..rank {
                    for j in 0..rank {
                        w += p[a * rank + i] * phi[i * rank + j] * q[j * c + k];
                    }
                }
                y += xb[a] * w;
            }
            want.push(y);
        }
    }
    Ok(max_abs(&fused, &want))
}

/// A softmax MoK with a constant gate mixes its kernels uniformly, whatever the context.
pub fn mok_equal_gates(seed: u64, fault: bool) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xE9);
    let (m, n, c, bsz) = dims(&mut r, 6);
    let l = r.gen_range(1..=5);
    let cfg = FeatureDpoConfig { m, n, c, generator: GeneratorSpec::mok(l, Gate::Softmax), bias: false };
    let (mut store, layer, mut rng) = build(seed, |b| FeatureDpo::new(b, &cfg))?;
    let (w1, b1, w2, _) = layer.generator.mok_params().expect("mok");
    store.set_data(w1, &vec![0.0; n * l])?;
    store.set_data(b1, &vec![0.0; l])?;
    let w2 = vals(&store, w2);
    let (x, z) = (tensor(&[bsz, m], &mut rng), tensor(&[bsz, n], &mut rng));
    let fused = forward(&store, &[&x, &z], fault, |g, v| layer.forward(g, v[0], v[1]))?;
    let mean: Vec<f64> = (0..m * c).map(|i| (0..l).map(|j| w2[j * m * c + i]).sum::<f64>() / l as f64).collect();
    let mut want = Vec::new();
    for b in 0..bsz {
        want.extend(vecmat(&x.data()[b * m..(b + 1) * m], &mean, c, None));
    }
    Ok(max_abs(&fused, &want))
}

/// Multi-head generation: the flat weight vector fills the head blocks
/// row-major in order and each block maps its input rows to its output columns.
pub fn multi_head(seed: u64, fault: bool) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let h_in = r.gen_range(1..=3);
    let h_out = r.gen_range(1..=3);
    let m = h_in * r.gen_range(1..=3);
    let c = h_out * r.gen_range(1..=3);
    let n = r.gen_range(1..=5);
    let bsz = r.gen_range(1..=3);
    let spec = GeneratorSpec::new(GeneratorKind::HyperDense).with_heads(h_in, h_out);
    let cfg = FeatureDpoConfig { m, n, c, generator: spec, bias: true };
    let (store, layer, mut rng) = build(seed, |b| FeatureDpo::new(b, &cfg))?;
    let (x, z) = (tensor(&[bsz, m], &mut rng), tensor(&[bsz, n], &mut rng));
    let fused = forward(&store, &[&x, &z], fault, |g, v| layer.forward(g, v[0], v[1]))?;
    let w = vals(&store, layer.generator.param_ids()[0]);
    let blocks = layer.generator.blocks();
    let wlen: usize = blocks.iter().map(|b| b.rows * b.cols).sum();
    let flat_len = wlen + c;
    let mut want = Vec::new();
    for b in 0..bsz {
        let flat = vecmat(&z.data()[b * n..(b + 1) * n], &w, flat_len, None);
        let xb = &x.data()[b * m..(b + 1) * m];
        let mut y = flat[wlen..].to_vec();
        let mut off = 0;
        for bl in blocks {
            for a in 0..bl.rows {
                for k in 0..bl.cols {
                    y[bl.col0 + k] += xb[bl.row0 + a] * flat[off + a * bl.cols + k];
                }
            }
            off += bl.rows * bl.cols;
        }
        want.extend(y);
    }
    Ok(max_abs(&fused, &want))
}

/// An explicit (1, 1) head split is bit-identical to the default single head.
pub fn single_head_bits(seed: u64, fault: bool) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x11);
    let (m, n, c, bsz) = dims(&mut r, 6);
    let run = |spec: GeneratorSpec, fault: bool| -> Result<Vec<f64>> {
        let cfg = FeatureDpoConfig { m, n, c, generator: spec, bias: true };
        let (store, layer, mut rng) = build(seed, |b| FeatureDpo::new(b, &cfg))?;
        let (x, z) = (tensor(&[bsz, m], &mut rng), tensor(&[bsz, n], &mut rng));
        forward(&store, &[&x, &z], fault, |g, v| layer.forward(g, v[0], v[1]))
    };
    let a = run(GeneratorSpec::mok(3, Gate::Softmax), false)?;
    let b = run(GeneratorSpec::mok(3, Gate::Softmax).with_heads(1, 1), fault)?;
    Ok(if a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len() { 0.0 } else { max_abs(&a, &b).max(f64::MIN_POSITIVE) })
}

/// Summation and attention pooling do not depend on the order of context fields.
pub fn context_permutation(seed: u64, fault: bool) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x9E);
    let (m, n, c, bsz) = dims(&mut r, 5);
    let t1 = r.gen_range(1..=4);
    let t2 = r.gen_range(2..=4);
    let aggregation = if seed.is_multiple_of(2) { Aggregation::Summation } else { Aggregation::Attention };
    let cfg = FieldDpoConfig {
        t1,
        t2,
        m,
        n,
        c,
        aggregation,
        generator: GeneratorSpec::mok(3, Gate::Softmax),
        bias: true,
        implicit_branch: false,
    };
    let (mut store, layer, mut rng) = build(seed, |b| FieldDpo::new(b, &cfg))?;
    let (x, z) = (tensor(&[bsz, t1, m], &mut rng), tensor(&[bsz, t2, n], &mut rng));
    // Rotate the context fields by one position; attention scores rotate with them.
    let mut zp = z.data().to_vec();
    for b in 0..bsz {
        for i in 0..t2 {
            let src = (i + 1) % t2;
            zp[(b * t2 + i) * n..(b * t2 + i + 1) * n].copy_from_slice(&z.data()[(b * t2 + src) * n..(b * t2 + src + 1) * n]);
        }
    }
    let zp = Tensor::new(&[bsz, t2, n], zp)?;
    let a = forward(&store, &[&x, &z], false, |g, v| layer.forward(g, v[0], v[1]))?;
    if let Some((w, b)) = layer.scores {
        let (wv, bv) = (vals(&store, w), vals(&store, b));
        let mut wr = wv.clone();
        let mut br = bv.clone();
        for i in 0..t2 {
            let src = (i + 1) % t2;
            wr[i * n..(i + 1) * n].copy_from_slice(&wv[src * n..(src + 1) * n]);
            br[i] = bv[src];
        }
        store.set_data(w, &wr)?;
        store.set_data(b, &br)?;
    }
    let b = forward(&store, &[&x, &zp], fault, |g, v| layer.forward(g, v[0], v[1]))?;
    Ok(max_abs(&a, &b))
}

// --------------------------------------------------------- gradient checks

fn gc_opts() -> GradCheckOptions {
    GradCheckOptions { max_coords_per_tensor: Some(12), ..GradCheckOptions::default() }
}

fn gc_layer<L>(
    seed: u64,
    make: impl FnOnce(&mut Builder<'_, f64>) -> Result<L>,
    shapes: &[&[usize]],
    f: impl Fn(&L, &mut Graph<'_, f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let (store, layer, mut rng) = build(seed, make)?;
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| tensor(s, &mut rng)).collect();
    Ok(grad_check_all(&store, &inputs, &gc_opts(), |g, v| {
        f(&layer, g, v).map_err(|e| match e {
            DpnError::Tensor(t) => t,
            other => dpn_tensor::TensorError::Config(other.to_string()),
        })
    })?)
}

type Case = Box<dyn Fn(u64) -> Result<GradCheckReport>>;

fn feature_case(spec: GeneratorSpec, m: usize, n: usize, c: usize, bias: bool) -> Case {
    Box::new(move |seed| {
        let cfg = FeatureDpoConfig { m, n, c, generator: spec.clone(), bias };
        gc_layer(seed, |b| FeatureDpo::new(b, &cfg), &[&[3, m], &[3, n]], |l, g, v| l.forward(g, v[0], v[1]))
    })
}

fn field_case(aggregation: Aggregation, implicit: bool) -> Case {
    Box::new(move |seed| {
        let cfg = FieldDpoConfig {
            t1: 3,
            t2: 3,
            m: 3,
            n: 3,
            c: 2,
            aggregation,
            generator: GeneratorSpec::mok(3, Gate::Softmax),
            bias: true,
            implicit_branch: implicit,
        };
        let self_mode = matches!(aggregation, Aggregation::SelfField | Aggregation::SelfExcluded);
        gc_layer(seed, |b| FieldDpo::new(b, &cfg), &[&[2, 3, 3], &[2, 3, 3]], move |l, g, v| {
            l.forward(g, v[0], if self_mode { v[0] } else { v[1] })
        })
    })
}

fn homo_case(c: usize, enc: LocalEncoder, bias_head: bool) -> Case {
    Box::new(move |seed| {
        let cfg = HomoDpoConfig { k: 3, n: 3, c, local_encoder: enc, generator: GeneratorSpec::mok(2, Gate::Softmax), bias_head };
        gc_layer(seed, |b| HomoDpo::new(b, &cfg), &[&[2, 4, 3]], |l, g, v| l.forward(g, v[0]))
    })
}

fn model_case(spec: ModelSpec, schema: FieldSchema, batch: Batch) -> Case {
    Box::new(move |seed| {
        let mut model = Model::<f64>::build(&spec, &schema, seed)?;
        randomize(&mut model.store, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF));
        Ok(grad_check_all(&model.store, &[], &gc_opts(), |g, _| {
            model.forward(g, &batch).map_err(|e| dpn_tensor::TensorError::Config(e.to_string()))
        })?)
    })
}

fn tabular_batch() -> (FieldSchema, Batch) {
    let schema = FieldSchema::new(vec![FieldSpec::new("user", 5), FieldSpec::new("item", 6), FieldSpec::new("tag", 4)])
        .expect("valid schema");
    let batch = Batch {
        size: 4,
        fields: vec![0, 1, 2, 1, 5, 3, 4, 0, 1, 2, 2, 0],
        history: vec![],
        history_len: 0,
        target: vec![],
        labels: vec![1.0, 0.0, 1.0, 0.0],
    };
    (schema, batch)
}

fn gradcheck_cases() -> Vec<(&'static str, Case)> {
    let mok = GeneratorSpec::mok(3, Gate::Softmax);
    let (schema, batch) = tabular_batch();
    let dpn = ModelSpec {
        family: Family::FeatureDpn,
        embedding_dim: 2,
        layers: vec![
            LayerSpec::FeatureDpo {
                name: "fc1".into(),
                width: 3,
                generator: mok.clone(),
                context: Context::X0,
                bias: true,
                stop_gradient: false,
            },
            LayerSpec::FeatureDpo {
                name: "fc2".into(),
                width: 2,
                generator: mok.clone(),
                context: Context::Layer("fc1".into()),
                bias: true,
                stop_gradient: false,
            },
        ],
        batch_norm: true,
        sequence: None,
    };
    let field = ModelSpec {
        family: Family::FieldDpn,
        embedding_dim: 2,
        layers: vec![LayerSpec::FieldDpo {
            name: "f1".into(),
            width: 2,
            aggregation: Aggregation::Concat,
            generator: mok.clone(),
            context: Context::X0,
            bias: true,
            implicit: true,
            stop_gradient: false,
        }],
        batch_norm: false,
        sequence: None,
    };
    let seq_schema = FieldSchema::new(vec![FieldSpec::new("item", 7)]).expect("valid schema");
    let seq_batch = Batch {
        size: 3,
        fields: vec![],
        history: vec![1, 2, 3, 4, 5, 6, 2, 0, 0],
        history_len: 3,
        target: vec![6, 1, 3],
        labels: vec![1.0, 0.0, 1.0],
    };
    let sdpn = ModelSpec {
        family: Family::Sdpn,
        embedding_dim: 3,
        layers: vec![LayerSpec::Dense { name: "fc1".into(), width: 3 }],
        batch_norm: true,
        sequence: Some(SequenceSpec {
            item_field: "item".into(),
            encoder: SeqEncoder::Homo { k: 3, generator: mok.clone(), local_encoder: LocalEncoder::None, bias_head: false },
            decoder: SeqDecoder::Hetero { width: 2, generator: mok.clone() },
        }),
    };
    let mut mlp = ModelSpec::mlp(2, &[4, 3]);
    mlp.batch_norm = true;
    let mut mok_b2 = GeneratorSpec::mok(2, Gate::Identity);
    mok_b2.output_bias = true;

    vec![
        ("gradcheck_feature_identity", feature_case(GeneratorSpec::new(GeneratorKind::Identity), 2, 6, 3, false)),
        ("gradcheck_feature_affine_full", feature_case(GeneratorSpec::new(GeneratorKind::AffineFull), 3, 4, 2, true)),
        ("gradcheck_feature_mok_softmax", feature_case(mok.clone(), 3, 4, 2, true)),
        ("gradcheck_feature_mok_sigmoid", feature_case(GeneratorSpec::mok(3, Gate::Sigmoid), 3, 4, 2, true)),
        ("gradcheck_feature_mok_identity_b2", feature_case(mok_b2, 3, 4, 2, true)),
        ("gradcheck_feature_mok_multi_head", feature_case(mok.clone().with_heads(2, 2), 4, 3, 4, true)),
        ("gradcheck_feature_hyper_dense", feature_case(GeneratorSpec::new(GeneratorKind::HyperDense), 3, 4, 2, true)),
        ("gradcheck_feature_matrix_decomp", feature_case(GeneratorSpec::md(2, 2, false), 3, 4, 2, true)),
        ("gradcheck_feature_matrix_decomp_residual", feature_case(GeneratorSpec::md(2, 2, true), 3, 4, 2, true)),
        ("gradcheck_feature_se_layer", feature_case(GeneratorSpec::se(0.5), 3, 4, 2, true)),
        ("gradcheck_field_summation", field_case(Aggregation::Summation, false)),
        ("gradcheck_field_self", field_case(Aggregation::SelfField, false)),
        ("gradcheck_field_attention", field_case(Aggregation::Attention, false)),
        ("gradcheck_field_concat", field_case(Aggregation::Concat, false)),
        ("gradcheck_field_self_excluded", field_case(Aggregation::SelfExcluded, false)),
        ("gradcheck_field_concat_implicit", field_case(Aggregation::Concat, true)),
        ("gradcheck_homo_depthwise", homo_case(1, LocalEncoder::None, false)),
        ("gradcheck_homo_conv_encoder", homo_case(2, LocalEncoder::Conv, false)),
        ("gradcheck_homo_sepconv_bias_head", homo_case(1, LocalEncoder::SepConv, true)),
        (
            "gradcheck_hetero",
            Box::new(|seed| {
                let cfg = HeteroDpoConfig { m: 3, n: 3, c: 2, generator: GeneratorSpec::mok(3, Gate::Softmax), bias: true };
                gc_layer(seed, |b| HeteroDpo::new(b, &cfg), &[&[2, 3], &[2, 4, 3]], |l, g, v| l.forward(g, v[0], v[1]))
            }),
        ),
        (
            "gradcheck_batch_norm",
            Box::new(|seed| gc_layer(seed, |b| BatchNorm::new(b, 3), &[&[5, 3]], |l, g, v| l.forward(g, v[0]))),
        ),
        (
            "gradcheck_mhsa",
            Box::new(|seed| {
                gc_layer(
                    seed,
                    |b| Mhsa::new(b, MhsaConfig { d_model: 4, heads: 2 }),
                    &[&[2, 2, 4], &[2, 3, 4]],
                    |l, g, v| l.forward(g, v[0], v[1], v[1]),
                )
            }),
        ),
        (
            "gradcheck_cross_layer",
            Box::new(|seed| gc_layer(seed, |b| CrossLayer::new(b, 4), &[&[3, 4], &[3, 4]], |l, g, v| l.forward(g, v[0], v[1]))),
        ),
        (
            "gradcheck_field_dnn",
            Box::new(|seed| gc_layer(seed, |b| FieldDnn::new(b, 3, 2, 2), &[&[2, 3, 2]], |l, g, v| l.forward(g, v[0]))),
        ),
        ("gradcheck_model_mlp_embeddings", model_case(mlp, schema.clone(), batch.clone())),
        ("gradcheck_model_feature_dpn", model_case(dpn, schema.clone(), batch.clone())),
        ("gradcheck_model_field_dpn", model_case(field, schema, batch)),
        ("gradcheck_model_sdpn", model_case(sdpn, seq_schema, seq_batch)),
    ]
}

pub fn gradchecks(opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let mut out = Vec::new();
    for (name, case) in gradcheck_cases() {
        let mut errs = Vec::with_capacity(opts.seeds);
        for seed in 0..opts.seeds as u64 {
            let r = case(seed)?;
            let mut e = if r.non_finite { f64::INFINITY } else { r.max_rel_error };
            if opts.inject_fault {
                e += FAULT * 1e3;
            }
            errs.push(e);
        }
        out.push(result(name, errs, GRADCHECK_TOL));
    }
    Ok(out)
}

// ----------------------------------------------------------------- oracles

pub fn oracles(opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    Ok(vec![auc_vs_pairs(200, 50, opts.inject_fault)?, adam_trace(10, opts.inject_fault)?])
}

/// Rank AUC against the O(n^2) pair count on tie-heavy score sets.
pub fn auc_vs_pairs(sets: usize, points: usize, fault: bool) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA0C);
    let mut errs = Vec::with_capacity(sets);
    for _ in 0..sets {
        let scores: Vec<f64> = (0..points).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        let mut labels: Vec<f64> = (0..points).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        let fast = auc(&scores, &labels)? + if fault { FAULT } else { 0.0 };
        errs.push((fast - auc_pairwise(&scores, &labels)?).abs());
    }
    Ok(result("auc_vs_pairwise", errs, AUC_TOL))
}

/// Adam (dense and lazy sparse) against a hand-written recurrence on a quadratic.
pub fn adam_trace(steps: usize, fault: bool) -> Result<PropertyResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xADA);
    let a = uni(&mut rng, 5).into_iter().map(|v| v.abs() + 0.5).collect::<Vec<_>>();
    let w0 = uni(&mut rng, 5);
    let e0 = uni(&mut rng, 12);
    let cfg = AdamConfig { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
    let s = 1.7;
    let rows_at = |step: usize| if step.is_multiple_of(2) { vec![1usize, 3] } else { vec![1, 2] };

    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", ParamKind::Dense, Tensor::new(&[5], w0.clone())?)?;
    let e = store.add("e", ParamKind::Embedding, Tensor::new(&[4, 3], e0.clone())?)?;
    let mut adam = Adam::new(cfg, &store);
    for step in 0..steps {
        let grads = {
            let mut g = Graph::new(&store);
            let wv = g.param(w);
            let av = g.constant(Tensor::new(&[5], a.clone())?);
            let sq = g.mul(wv, wv)?;
            let sq = g.mul(sq, av)?;
            let l1 = g.sum_all(sq)?;
            let l1 = g.scale(l1, 0.5)?;
            let rows = rows_at(step);
            let ev = g.gather(e, &rows, &[rows.len()], "e")?;
            let e2 = g.mul(ev, ev)?;
            let l2 = g.sum_all(e2)?;
            let l2 = g.scale(l2, 0.5 * s)?;
            let loss = g.add(l1, l2)?;
            g.backward(loss)?
        };
        store.zero_grad();
        store.accumulate(&grads);
        adam.step(&mut store);
    }

    let (mut pw, mut pe) = (w0, e0);
    let (mut mw, mut vw) = (vec![0.0; 5], vec![0.0; 5]);
    let (mut me, mut ve) = (vec![0.0; 12], vec![0.0; 12]);
    let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64, t: i32| {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mh = *m / (1.0 - cfg.beta1.powi(t));
        let vh = *v / (1.0 - cfg.beta2.powi(t));
        *p -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
    };
    for step in 0..steps {
        let t = step as i32 + 1;
        for i in 0..5 {
            let g = a[i] * pw[i];
            upd(&mut pw[i], &mut mw[i], &mut vw[i], g, t);
        }
        for r in rows_at(step) {
            for j in 0..3 {
                let k = r * 3 + j;
                let g = s * pe[k];
                upd(&mut pe[k], &mut me[k], &mut ve[k], g, t);
            }
        }
    }
    let mut err = max_abs(store.get(w).data(), &pw).max(max_abs(store.get(e).data(), &pe));
    if fault {
        err += FAULT;
    }
    Ok(PropertyResult::new("adam_trace", err, ADAM_TOL, steps))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn identities_hold_on_a_few_instances() {
        let opts = VerifyOptions { instances: 5, seeds: 1, inject_fault: false };
        for r in identities(&opts).unwrap() {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn fault_injection_breaks_identities() {
        let opts = VerifyOptions { instances: 3, seeds: 1, inject_fault: true };
        assert!(identities(&opts).unwrap().iter().all(|r| !r.passed));
    }
}
