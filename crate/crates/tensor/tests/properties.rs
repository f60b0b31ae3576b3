use dpn_tensor::{
    grad_check, grad_check_all, ConvMode, GradCheckOptions, Graph, ParamKind, ParamStore, Result, Tensor, Var,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

/// Gradient-check a two-input op over many seeds.
fn check2(shapes: (&[usize], &[usize]), f: impl Fn(&mut Graph<'_, f64>, Var, Var) -> Result<Var>) {
    let store = ParamStore::new();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, shapes.0);
        let b = rand_tensor(&mut rng, shapes.1);
        let r = grad_check_all(&store, &[a, b], &GradCheckOptions::default(), |g, v| f(g, v[0], v[1])).unwrap();
        assert!(r.passed(TOL), "seed {seed}: {r:?}");
    }
}

fn check1(shape: &[usize], f: impl Fn(&mut Graph<'_, f64>, Var) -> Result<Var>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_tensor(&mut rng, shape);
        let err = grad_check(&f, &x, 1e-5).unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_matmul_3x4_by_4x2() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let r = grad_check_all(&ParamStore::new(), &[a, b], &GradCheckOptions::default(), |g, v| {
            g.matmul(v[0], v[1])
        })
        .unwrap();
        assert!(r.passed(1e-6), "seed {seed}: {r:?}");
    }
}

#[test]
fn gradcheck_batched_matmul() {
    check2((&[2, 3, 4], &[4, 2]), |g, a, b| g.matmul(a, b));
    check2((&[2, 3, 4], &[1, 4, 2]), |g, a, b| g.matmul(a, b));
    check2((&[3, 2, 3], &[3, 3, 2]), |g, a, b| g.matmul(a, b));
}

#[test]
fn gradcheck_broadcast_arithmetic() {
    check2((&[3, 4], &[4]), |g, a, b| g.add(a, b));
    check2((&[3, 1], &[2, 1, 4]), |g, a, b| g.sub(a, b));
    check2((&[2, 3], &[2, 3]), |g, a, b| g.mul(a, b));
    check2((&[2, 3, 1], &[3, 4]), |g, a, b| g.mul(a, b));
}

#[test]
fn gradcheck_unary() {
    check1(&[3, 4], |g, x| g.sigmoid(x));
    check1(&[3, 4], |g, x| g.tanh(x));
    check1(&[3, 4], |g, x| g.relu(x));
    check1(&[3, 4], |g, x| g.clamp(x, -0.5, 0.5));
    check1(&[3, 4], |g, x| g.scale(x, -1.7));
    check1(&[3, 4], |g, x| g.add_scalar(x, 0.3));
    check1(&[2, 3, 4], |g, x| g.softmax(x, 1));
    check1(&[2, 3, 4], |g, x| g.softmax(x, 2));
}

#[test]
fn gradcheck_shape_ops() {
    check1(&[2, 3, 4], |g, x| g.sum(x, 1));
    check1(&[2, 3, 4], |g, x| g.mean(x, 0));
    check1(&[2, 3, 4], |g, x| g.mean_keepdim(x, 2));
    check1(&[2, 3, 4], |g, x| g.sum_all(x));
    check1(&[2, 3, 4], |g, x| g.reshape(x, &[6, 4]));
    check1(&[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]));
    check1(&[2, 3, 4], |g, x| g.transpose(x));
    check1(&[2, 5, 4], |g, x| g.narrow(x, 1, 1, 3));
    check2((&[2, 3], &[2, 5]), |g, a, b| g.concat(&[a, b, a], 1));
}

#[test]
fn gradcheck_conv1d() {
    check2((&[2, 5, 3], &[3, 3, 2]), |g, x, k| g.conv1d(x, k, ConvMode::Full));
    check2((&[2, 5, 3], &[2, 5, 3, 2]), |g, x, k| g.conv1d(x, k, ConvMode::Full));
    check2((&[2, 4, 3], &[3, 3, 2]), |g, x, k| g.conv1d(x, k, ConvMode::Depthwise));
    check2((&[2, 4, 3], &[2, 3, 3, 1]), |g, x, k| g.conv1d(x, k, ConvMode::Depthwise));
    check2((&[1, 2, 3], &[5, 3, 2]), |g, x, k| g.conv1d(x, k, ConvMode::Full));
}

#[test]
fn gradcheck_bce() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = rand_tensor(&mut rng, &[6]);
        let labels: Vec<f64> = (0..6).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let err = grad_check(|g, v| g.bce_with_logits(v, &labels), &z, 1e-5).unwrap();
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn gradcheck_batch_norm_8x4() {
    for training in [true, false] {
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let gamma = store.add("g", ParamKind::Dense, rand_tensor(&mut rng, &[4])).unwrap();
            let beta = store.add("b", ParamKind::Dense, rand_tensor(&mut rng, &[4])).unwrap();
            let rm = store.add("rm", ParamKind::Buffer, rand_tensor(&mut rng, &[4])).unwrap();
            let rv = store.add("rv", ParamKind::Buffer, Tensor::full(&[4], 1.3)).unwrap();
            let x = rand_tensor(&mut rng, &[8, 4]);
            let r = grad_check_all(&store, &[x], &GradCheckOptions::default(), |g, v| {
                g.set_training(training);
                let (gv, bv) = (g.param(gamma), g.param(beta));
                let y = g.batch_norm(v[0], gv, bv, rm, rv)?;
                g.tanh(y)
            })
            .unwrap();
            assert!(r.passed(TOL), "training={training} seed {seed}: {r:?}");
        }
    }
}

#[test]
fn gradcheck_gather_through_embedding_rows() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let tab = store.add("emb", ParamKind::Embedding, rand_tensor(&mut rng, &[6, 3])).unwrap();
        let w = store.add("w", ParamKind::Dense, rand_tensor(&mut rng, &[3, 2])).unwrap();
        let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..6)).collect();
        let r = grad_check_all(&store, &[], &GradCheckOptions::default(), |g, _| {
            let e = g.gather(tab, &ids, &[4], "f")?;
            let wv = g.param(w);
            let y = g.matmul(e, wv)?;
            g.sigmoid(y)
        })
        .unwrap();
        assert!(r.passed(TOL), "seed {seed}: {r:?}");
        assert!(r.checked > 6);
    }
}

fn softmax_of(x: &Tensor<f64>, axis: usize) -> Tensor<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let v = g.input(x.clone());
    let s = g.softmax(v, axis).unwrap();
    g.value(s).clone()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        vals in prop::collection::vec(-15.0f64..15.0, 12),
        axis in 0usize..3,
    ) {
        let x = Tensor::new(&[2, 3, 2], vals).unwrap();
        let y = softmax_of(&x, axis);
        let shape = [2usize, 3, 2];
        let mut sums = std::collections::HashMap::new();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..2 {
                    let v = y.at(&[i, j, k]).unwrap();
                    prop_assert!(v > 0.0 && v < 1.0 || shape[axis] == 1);
                    let mut key = vec![i, j, k];
                    key[axis] = 0;
                    *sums.entry(key).or_insert(0.0) += v;
                }
            }
        }
        for s in sums.values() {
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reshape_and_concat_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 24)) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(&[2, 3, 4], vals.clone()).unwrap());
        let r = g.reshape(x, &[6, 4]).unwrap();
        let back = g.reshape(r, &[2, 3, 4]).unwrap();
        prop_assert_eq!(g.value(back).data(), &vals[..]);
        let a = g.narrow(x, 1, 0, 1).unwrap();
        let b = g.narrow(x, 1, 1, 2).unwrap();
        let cat = g.concat(&[a, b], 1).unwrap();
        prop_assert_eq!(g.value(cat).data(), &vals[..]);
    }

    #[test]
    fn twice_consumed_tensor_sums_path_gradients(vals in prop::collection::vec(-3.0f64..3.0, 6)) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::new(&[2, 3], vals.clone()).unwrap().with_requires_grad());
        let p1 = g.sigmoid(x).unwrap();
        let p2 = g.scale(x, 2.0).unwrap();
        let s = g.add(p1, p2).unwrap();
        let l = g.sum_all(s).unwrap();
        let grads = g.backward(l).unwrap();
        for (i, &v) in vals.iter().enumerate() {
            let sg = 1.0 / (1.0 + (-v).exp());
            let want = sg * (1.0 - sg) + 2.0;
            prop_assert!((grads.wrt(x).unwrap()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_matches_naive(
        a in prop::collection::vec(-2.0f64..2.0, 12),
        b in prop::collection::vec(-2.0f64..2.0, 8),
    ) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let av = g.input(Tensor::new(&[3, 4], a.clone()).unwrap());
        let bv = g.input(Tensor::new(&[4, 2], b.clone()).unwrap());
        let y = g.matmul(av, bv).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|k| a[i * 4 + k] * b[k * 2 + j]).sum();
                prop_assert!((g.value(y).at(&[i, j]).unwrap() - want).abs() < 1e-12);
            }
        }
    }
}
