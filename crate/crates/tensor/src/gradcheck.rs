//! Central-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::store::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { h: DEFAULT_STEP, max_coords_per_tensor: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)`; infinite on NaN output.
    pub max_rel_error: f64,
    /// Coordinate with the largest error, e.g. `input0[3]` or `layer.w[7]`.
    pub worst: Option<String>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a non-differentiable point.
    pub skipped: usize,
    pub non_finite: bool,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error < tol
    }
}

/// Fixed pseudo-random weights in `[0.5, 1.5)` used to scalarize tensor outputs.
fn projection_weights(n: usize) -> Vec<f64> {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            0.5 + (z >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn scalarize(g: &mut Graph<'_, f64>, out: Var) -> Result<Var> {
    let n = g.value(out).numel();
    if n == 1 && g.shape(out).is_empty() {
        return Ok(out);
    }
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::from_parts(shape, projection_weights(n)));
    let p = g.mul(out, w)?;
    g.sum_all(p)
}

struct Eval {
    value: f64,
    kinks: Vec<bool>,
}

fn evaluate<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: &F) -> Result<Eval>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(store);
    g.track_kinks();
    g.set_check_finite(false);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let s = scalarize(&mut g, out)?;
    Ok(Eval { value: g.value(s).data()[0], kinks: g.kink_signature().to_vec() })
}

fn coords(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < n && c > 0 => {
            let step = n as f64 / c as f64;
            (0..c).map(|i| (i as f64 * step) as usize).collect()
        }
        _ => (0..n).collect(),
    }
}

/// Check `f` against central differences with respect to every input, every
/// dense parameter of `store`, and every embedding row the forward pass reads.
pub fn grad_check_all<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let h = opts.h;
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, skipped: 0, non_finite: false };

    let (base, input_grads, grads) = {
        let mut g = Graph::new(store);
        g.track_kinks();
        g.set_check_finite(false);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone().with_requires_grad())).collect();
        let out = f(&mut g, &vars)?;
        let s = scalarize(&mut g, out)?;
        let base = Eval { value: g.value(s).data()[0], kinks: g.kink_signature().to_vec() };
        let grads = g.backward(s)?;
        let input_grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        (base, input_grads, grads)
    };
    if !base.value.is_finite() {
        report.non_finite = true;
        report.max_rel_error = f64::INFINITY;
        return Ok(report);
    }

    let record = |report: &mut GradCheckReport, label: String, analytic: f64, plus: Eval, minus: Eval| {
        if !plus.value.is_finite() || !minus.value.is_finite() {
            report.non_finite = true;
            report.max_rel_error = f64::INFINITY;
            report.worst = Some(label);
            return;
        }
        if plus.kinks != base.kinks || minus.kinks != base.kinks {
            report.skipped += 1;
            return;
        }
        let numeric = (plus.value - minus.value) / (2.0 * h);
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some(label);
        }
    };

    let mut xs: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, grad) in input_grads.iter().enumerate() {
        for i in coords(xs[ti].numel(), opts.max_coords_per_tensor) {
            let orig = xs[ti].data()[i];
            xs[ti].data_mut()[i] = orig + h;
            let plus = evaluate(store, &xs, &f)?;
            xs[ti].data_mut()[i] = orig - h;
            let minus = evaluate(store, &xs, &f)?;
            xs[ti].data_mut()[i] = orig;
            record(&mut report, format!("input{ti}[{i}]"), grad[i], plus, minus);
        }
    }

    let mut work = store.clone();
    for id in store.ids() {
        let targets: Vec<usize> = match store.kind(id) {
            ParamKind::Buffer => continue,
            ParamKind::Dense => coords(store.get(id).numel(), opts.max_coords_per_tensor),
            ParamKind::Embedding => {
                let dim = store.get(id).shape()[1];
                let rows: Vec<usize> = grads.rows(id).map(|r| r.keys().copied().collect()).unwrap_or_default();
                let all: Vec<usize> = rows.iter().flat_map(|&r| r * dim..(r + 1) * dim).collect();
                coords(all.len(), opts.max_coords_per_tensor).into_iter().map(|i| all[i]).collect()
            }
        };
        let dim = store.get(id).shape().last().copied().unwrap_or(1).max(1);
        for i in targets {
            let analytic = match store.kind(id) {
                ParamKind::Embedding => grads
                    .rows(id)
                    .and_then(|r| r.get(&(i / dim)))
                    .map(|row| row[i % dim])
                    .unwrap_or(0.0)
                    + grads.param(id).map(|g| g[i]).unwrap_or(0.0),
                _ => grads.param(id).map(|g| g[i]).unwrap_or(0.0),
            };
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + h;
            let plus = evaluate(&work, inputs, &f)?;
            work.get_mut(id).data_mut()[i] = orig - h;
            let minus = evaluate(&work, inputs, &f)?;
            work.get_mut(id).data_mut()[i] = orig;
            record(&mut report, format!("{}[{i}]", store.name(id)), analytic, plus, minus);
        }
    }
    Ok(report)
}

/// Single-input convenience form; returns the maximum relative error
/// (infinite when `f` produces NaN).
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let store = ParamStore::new();
    let opts = GradCheckOptions { h, max_coords_per_tensor: None };
    let r = grad_check_all(&store, std::slice::from_ref(x), &opts, |g, v| f(g, v[0]))?;
    Ok(if r.non_finite { f64::INFINITY } else { r.max_rel_error })
}
