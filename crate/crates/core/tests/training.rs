use dpn::checkpoint;
use dpn::data::{Dataset, Split, TabularDataset};
use dpn::embeddings::{FieldSchema, FieldSpec};
use dpn::model::{Model, ModelSpec};
use dpn::tensor::ParamKind;
use dpn::train::{evaluate, TrainConfig, Trainer};
use dpn::DpnError;

/// Two fields with four ids each; the label is set by the first field alone.
fn separable(copies: usize) -> Dataset {
    let schema = FieldSchema::new(vec![FieldSpec::new("a", 4), FieldSpec::new("b", 4)]).unwrap();
    let (mut ids, mut labels, mut splits) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..copies {
        for a in 0..4 {
            for b in 0..4 {
                ids.extend([a, b]);
                labels.push(if a < 2 { 1.0 } else { 0.0 });
                splits.push(match c % 5 {
                    3 => Split::Val,
                    4 => Split::Test,
                    _ => Split::Train,
                });
            }
        }
    }
    Dataset::Tabular(TabularDataset::new(schema, ids, labels, splits).unwrap())
}

fn spec() -> ModelSpec {
    ModelSpec::mlp(4, &[8])
}

fn trainer(lr: f64, epochs: usize, seed: u64) -> Trainer<f64> {
    let data = separable(1);
    let model = Model::<f64>::build(&spec(), &data.schema().unwrap(), seed).unwrap();
    let mut cfg = TrainConfig::new(lr, 16, epochs, seed);
    cfg.patience = 0;
    Trainer::new(model, &cfg).unwrap()
}

#[test]
fn separable_toy_converges() {
    let data = separable(20);
    let mut t = trainer(0.1, 50, 3);
    let r = t.fit(&data).unwrap();
    let last = r.epochs.last().unwrap();
    assert!(last.train_loss < 0.05, "train loss {}", last.train_loss);
    let ev = evaluate(&t.model, &data, Split::Test, 64, 1).unwrap();
    assert_eq!(ev.auc, 1.0);
    assert!(ev.logloss < 0.05, "{}", ev.logloss);
    let losses: Vec<f64> = r.epochs.iter().map(|e| e.train_loss).collect();
    for w in losses[5..].windows(2) {
        assert!(w[1] <= w[0] * 1.05 + 1e-3, "loss went up: {losses:?}");
    }
}

#[test]
fn zero_learning_rate_changes_nothing_trainable() {
    let data = separable(5);
    let mut t = trainer(0.0, 3, 1);
    let before = t.model.store.clone();
    t.fit(&data).unwrap();
    for id in before.ids() {
        if before.kind(id) != ParamKind::Buffer {
            assert_eq!(before.get(id).data(), t.model.store.get(id).data(), "{}", before.name(id));
        }
    }
}

#[test]
fn same_seed_same_run() {
    let data = separable(10);
    let run = |seed| {
        let mut t = trainer(0.02, 4, seed);
        let r = t.fit(&data).unwrap();
        (r.epochs.iter().map(|e| e.train_loss).collect::<Vec<_>>(), evaluate(&t.model, &data, Split::Test, 64, 1).unwrap().auc)
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9).0, run(10).0);
}

#[test]
fn threads_do_not_change_predictions() {
    let data = separable(10);
    let mut t = trainer(0.02, 3, 4);
    t.fit(&data).unwrap();
    let one = evaluate(&t.model, &data, Split::Test, 7, 1).unwrap();
    let four = evaluate(&t.model, &data, Split::Test, 7, 4).unwrap();
    assert_eq!(one.auc, four.auc);
    assert_eq!(one.logloss, four.logloss);
}

#[test]
fn checkpoint_reevaluates_identically() {
    let data = separable(10);
    let mut t = trainer(0.02, 3, 5);
    t.fit(&data).unwrap();
    let want = evaluate(&t.model, &data, Split::Test, 64, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.ckpt");
    checkpoint::save(&p, &t.model, Some(&t.adam), Some(&t.rng_state()), &serde_json::json!({})).unwrap();
    let c = checkpoint::load::<f64>(&p).unwrap();
    let got = evaluate(&c.model, &data, Split::Test, 64, 1).unwrap();
    assert_eq!((want.auc, want.logloss), (got.auc, got.logloss));
    assert_eq!(c.adam.as_ref(), Some(&t.adam));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let data = separable(6);
    let rows = data.indices(Split::Train);
    let mut straight = trainer(0.02, 1, 8);
    straight.epoch(&data, &rows).unwrap();
    straight.epoch(&data, &rows).unwrap();

    let mut first = trainer(0.02, 1, 8);
    first.epoch(&data, &rows).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("mid.ckpt");
    checkpoint::save(&p, &first.model, Some(&first.adam), Some(&first.rng_state()), &serde_json::Value::Null).unwrap();
    let c = checkpoint::load::<f64>(&p).unwrap();
    let mut cfg = TrainConfig::new(0.02, 16, 1, 8);
    cfg.patience = 0;
    let mut resumed = Trainer::resume(c.model, c.adam.unwrap(), &c.rng.unwrap(), &cfg).unwrap();
    resumed.epoch(&data, &rows).unwrap();
    for id in straight.model.store.ids() {
        assert_eq!(straight.model.store.get(id).data(), resumed.model.store.get(id).data());
    }
}

#[test]
fn huge_weights_report_divergence_and_restore() {
    let data = separable(4);
    let mut t = trainer(0.01, 2, 2);
    for id in t.model.store.ids().collect::<Vec<_>>() {
        if t.model.store.kind(id) == ParamKind::Embedding {
            let n = t.model.store.get(id).numel();
            t.model.store.set_data(id, &vec![f64::MAX; n]).unwrap();
        }
    }
    let before = t.model.store.clone();
    match t.fit(&data) {
        Err(DpnError::Diverged { epoch, .. }) => assert_eq!(epoch, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
    for id in before.ids() {
        assert_eq!(before.get(id).data(), t.model.store.get(id).data());
    }
}

#[test]
fn batch_norm_needs_two_rows() {
    let data = separable(1);
    let model = Model::<f64>::build(&spec(), &data.schema().unwrap(), 0).unwrap();
    let e = Trainer::new(model, &TrainConfig::new(0.01, 1, 1, 0)).err().unwrap();
    assert!(e.is_usage());
}

#[test]
fn embedding_rows_update_only_when_touched() {
    let data = separable(1);
    // rows with a in {0, 1}: ids 2 and 3 of field `a` get no gradient
    let rows: Vec<usize> = (0..8).collect();
    let mut t = trainer(0.05, 1, 6);
    let before = t.model.store.clone();
    t.step(&data.batch(&rows)).unwrap();
    let id = before.find("a").or_else(|| before.ids().find(|&i| before.kind(i) == ParamKind::Embedding)).unwrap();
    assert_eq!(before.kind(id), ParamKind::Embedding);
    let (old, new) = (before.get(id).data(), t.model.store.get(id).data());
    let e = 4;
    for r in 0..4 {
        let moved = (0..e).map(|k| (old[r * e + k] - new[r * e + k]).abs()).fold(0.0, f64::max);
        if r < 2 {
            // the first Adam step moves each coordinate by about lr
            assert!((moved - 0.05).abs() < 1e-3, "row {r} moved {moved}");
        } else {
            assert_eq!(moved, 0.0, "row {r} moved");
        }
    }
}
