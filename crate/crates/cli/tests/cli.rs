use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpn")).args(args).env_remove("DPN_DATA_DIR").output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const TOY: &str = r#"
name = "toy"

[data]
source = "synthetic"
task = { rows = 600, users = 8, items = 8, dim = 2, scale = 2.0 }

[model]
family = "feature_dpn"
embedding_dim = 3

[[model.layers]]
type = "feature_dpo"
name = "dpo"
width = 2
generator = { kind = "low_rank_mok", rank = 2 }

[train]
lr = 0.02
batch_size = 64
epochs = 3
"#;

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn train_is_deterministic_and_eval_reproduces_it() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "toy.toml", TOY);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = dpn(&["train", &cfg, "--seed", "1", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", text(&o));
        for f in ["metrics.json", "model.ckpt", "config.resolved.toml", "epochs.csv", "splits.tsv"] {
            assert!(out.join(f).exists(), "missing {f}");
        }
    }
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());

    let o = dpn(&["eval", a.join("model.ckpt").to_str().unwrap(), "--slice", "user:inf"]);
    assert!(o.status.success(), "{}", text(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("eval_test.json")).unwrap()).unwrap();
    let m = metrics(&a);
    assert_eq!(report["auc"], m["test"]["auc"]);
    assert_eq!(report["logloss"], m["test"]["logloss"]);
    assert_eq!(report["slices"]["user<inf"]["auc"], report["auc"]);
    assert_eq!(report["slices"]["user<inf"]["n"], report["n"]);

    // the resolved config reproduces the run on its own
    let c = dpn(&["train", a.join("config.resolved.toml").to_str().unwrap(), "--out", tmp.path().join("c").to_str().unwrap()]);
    assert!(c.status.success(), "{}", text(&c));
    assert_eq!(metrics(&a)["test"], metrics(&tmp.path().join("c"))["test"]);

    let d = tmp.path().join("d");
    assert!(dpn(&["train", &cfg, "--seed", "2", "--out", d.to_str().unwrap()]).status.success());
    assert_ne!(metrics(&a)["test"], metrics(&d)["test"]);
}

#[test]
fn eval_names_schema_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "toy.toml", TOY);
    let out = tmp.path().join("run");
    assert!(dpn(&["train", &cfg, "--out", out.to_str().unwrap()]).status.success());
    let other = write(tmp.path(), "other.toml", &TOY.replace("users = 8", "users = 9"));
    let o = dpn(&["eval", out.join("model.ckpt").to_str().unwrap(), "--config", &other]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains("schema mismatch on field `user`"), "{}", text(&o));
}

#[test]
fn missing_data_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let body = TOY.replace(
        "source = \"synthetic\"\ntask = { rows = 600, users = 8, items = 8, dim = 2, scale = 2.0 }",
        &format!("source = \"csv\"\npath = {:?}", missing.to_str().unwrap()),
    );
    let cfg = write(tmp.path(), "csv.toml", &body);
    let o = dpn(&["train", &cfg, "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(text(&o).contains(missing.to_str().unwrap()), "{}", text(&o));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.toml", &TOY.replace("epochs = 3", "epochs = 3\nwarmup = 2"));
    let o = dpn(&["train", &cfg, "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("warmup"), "{}", text(&o));
    assert_eq!(dpn(&["verify", "--suite", "everything"]).status.code(), Some(2));
    assert_eq!(dpn(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn verify_passes_clean_and_fails_with_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = dpn(&["verify", "--suite", "identities", "--instances", "20", "--out", out]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(!text(&o).contains("FAIL"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("verify.json")).unwrap()).unwrap();
    assert!(report["results"].as_array().unwrap().iter().all(|r| r["passed"] == true));

    let o = dpn(&["verify", "--suite", "identities", "--instances", "20", "--inject-fault", "--out", out]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("FAIL"));

    let o = dpn(&["verify", "--suite", "oracles", "--out", out]);
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn gradcheck_suite_fits_its_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    let o = dpn(&["verify", "--suite", "gradcheck", "--out", tmp.path().to_str().unwrap()]);
    let secs = t0.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", text(&o));
    assert!(secs < 60.0, "gradcheck took {secs:.1}s");
}

#[test]
fn bench_prints_a_table() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = write(
        tmp.path(),
        "empty.toml",
        "[data]\nsource = \"synthetic\"\ntask = { rows = 100, users = 4, items = 4, dim = 2, scale = 1.0 }\n",
    );
    let o = dpn(&["bench", &empty, "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout).to_string();
    assert_eq!(out.lines().filter(|l| l.contains("sec/epoch")).count(), 1);
    assert_eq!(fs::read_to_string(tmp.path().join("bench.json")).unwrap().trim(), "[]");

    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/bench_synthetic.toml");
    let o = dpn(&["bench", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let rows: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("bench.json")).unwrap()).unwrap();
    let params: Vec<u64> = rows.as_array().unwrap().iter().map(|r| r["params"].as_u64().unwrap()).collect();
    assert_eq!(params, vec![61, 60]);
}

#[test]
fn ingest_writes_schema_and_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let mut body = String::from("user,movie,tag\n");
    for u in 0..10 {
        for k in 0..2 {
            body.push_str(&format!("u{u},m{k},t{}\n", (u + k) % 6));
        }
    }
    let csv = write(tmp.path(), "pos.csv", &body);
    let out = tmp.path().join("ing");
    let o = dpn(&["ingest", &csv, "--negatives", "user:tag:2", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["rows"], 60);
    assert_eq!(summary["positives"], 20);
    assert_eq!(fs::read_to_string(out.join("splits.tsv")).unwrap().lines().count(), 60);
    assert!(fs::read_to_string(out.join("data.toml")).unwrap().contains("source = \"csv\""));

    let fm = write(tmp.path(), "d.libfm", "1 1:1 2:1\n0 3:1 2:1\n");
    let o = dpn(&["ingest", &fm, "--format", "libfm", "--fields", "a,b", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let o = dpn(&["ingest", &fm, "--format", "libfm", "--fields", "a,b,c", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains(":1:"), "{}", text(&o));
}

#[test]
fn movielens_needs_a_data_dir() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/movielens_mlp.toml");
    let tmp = tempfile::tempdir().unwrap();
    let o = dpn(&["train", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("DPN_DATA_DIR"), "{}", text(&o));
}
