use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dpn::checkpoint;
use dpn::data::{write_split_manifest, Dataset, Split, SplitRatios};
use dpn::embeddings::FieldSchema;
use dpn::metrics::{slice_by_frequency, EvalReport, SliceMetrics};
use dpn::model::Model;
use dpn::tensor::{DType, Float};
use dpn::train::{evaluate, predict_rows, Precision, TrainConfig, TrainReport, Trainer};
use dpn::verify::{self, Suite, VerifyOptions};
use dpn::{DpnError, Result};
use serde::Serialize;
use serde_json::json;

use crate::config::{read_toml, write_toml, BenchConfig, DataConfig, NegativeConfig, RunConfig};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| DpnError::config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| DpnError::io(path, e))
}

fn make_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| DpnError::io(p, e))
}

fn split_json(r: &EvalReport) -> serde_json::Value {
    json!({ "auc": r.auc, "logloss": r.logloss, "n": r.n })
}

// ------------------------------------------------------------------ train

pub struct TrainArgs {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg: RunConfig = read_toml(&args.config)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = args.threads {
        cfg.train.threads = t;
    }
    cfg.train.validate(cfg.model.batch_norm)?;
    let out = args.out.clone().or(cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs/train"));
    make_dir(&out)?;
    cfg.out_dir = Some(std::path::absolute(&out).unwrap_or(out.clone()));
    cfg.data = cfg.data.resolved()?;
    write_toml(&out.join(RESOLVED_CONFIG), &cfg)?;

    let data = cfg.data.load(cfg.train.seed)?;
    write_split_manifest(&out.join("splits.tsv"), data.splits())?;
    match cfg.train.precision {
        Precision::F64 => train_as::<f64>(&cfg, &data, &out),
        Precision::F32 => train_as::<f32>(&cfg, &data, &out),
    }
}

fn train_as<T: Float>(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<()> {
    let tc = &cfg.train;
    let model = Model::<T>::build(&cfg.model, &data.schema()?, tc.seed)?;
    println!(
        "model {:?}: {} params ({} in embeddings), {} rows",
        cfg.model.family,
        model.param_count(),
        model.embedding_param_count(),
        data.len()
    );
    let mut trainer = Trainer::new(model, tc)?;
    let report = trainer.fit(data)?;
    write_epochs(&out.join("epochs.csv"), &report)?;
    for e in &report.epochs {
        let f = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x:.6}"));
        println!(
            "epoch {:>3}  loss {:.6}  val_auc {}  val_logloss {}  {:.2}s",
            e.epoch,
            e.train_loss,
            f(e.val_auc),
            f(e.val_logloss),
            e.wall_time_s
        );
    }
    let m = &trainer.model;
    let val = evaluate(m, data, Split::Val, tc.eval_batch_size, tc.threads).ok();
    let test = evaluate(m, data, Split::Test, tc.eval_batch_size, tc.threads)?;
    let metrics = json!({
        "name": cfg.name,
        "seed": tc.seed,
        "family": cfg.model.family,
        "params": m.param_count(),
        "best_epoch": report.best_epoch,
        "steps": report.steps,
        "epochs": report.epochs.iter().map(|e| json!({
            "epoch": e.epoch, "train_loss": e.train_loss, "val_auc": e.val_auc, "val_logloss": e.val_logloss,
        })).collect::<Vec<_>>(),
        "val": val.as_ref().map(split_json),
        "test": split_json(&test),
    });
    write_json(&out.join(METRICS), &metrics)?;
    checkpoint::save(&out.join(CHECKPOINT), m, Some(&trainer.adam), Some(&trainer.rng_state()), &metrics)?;
    println!("best epoch {}, test auc {:.6}, logloss {:.6}", report.best_epoch, test.auc, test.logloss);
    println!("wrote {}", out.display());
    Ok(())
}

fn write_epochs(path: &Path, r: &TrainReport) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_auc,val_logloss,wall_time_s\n");
    for e in &r.epochs {
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.train_loss, f(e.val_auc), f(e.val_logloss), e.wall_time_s);
    }
    fs::write(path, s).map_err(|e| DpnError::io(path, e))
}

// ------------------------------------------------------------------- eval

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub split: Split,
    pub slices: Vec<String>,
    pub threads: usize,
    pub out: Option<PathBuf>,
}

fn parse_slice(s: &str) -> Result<(String, f64)> {
    let (field, t) = s
        .rsplit_once(':')
        .ok_or_else(|| DpnError::config(format!("slice `{s}` is not field:threshold")))?;
    let t: f64 = t.parse().map_err(|_| DpnError::config(format!("slice `{s}`: bad threshold `{t}`")))?;
    Ok((field.to_string(), t))
}

fn check_schema(ckpt: &FieldSchema, data: &FieldSchema) -> Result<()> {
    if ckpt.len() != data.len() {
        return Err(DpnError::config(format!(
            "schema mismatch: checkpoint has {} fields, dataset has {}",
            ckpt.len(),
            data.len()
        )));
    }
    for (a, b) in ckpt.fields.iter().zip(&data.fields) {
        if a != b {
            return Err(DpnError::config(format!(
                "schema mismatch on field `{}`: checkpoint {} (vocab {}), dataset {} (vocab {})",
                a.name, a.name, a.vocab_size, b.name, b.vocab_size
            )));
        }
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let slices = args.slices.iter().map(|s| parse_slice(s)).collect::<Result<Vec<_>>>()?;
    if !slices.is_empty() && args.split != Split::Test {
        return Err(DpnError::config("slices are defined on the test split"));
    }
    let header = checkpoint::read_header(&args.checkpoint)?;
    let dir = args.checkpoint.parent().unwrap_or(Path::new("."));
    let cfg_path = args.config.clone().unwrap_or_else(|| dir.join(RESOLVED_CONFIG));
    let cfg: RunConfig = read_toml(&cfg_path)?;
    let data = cfg.data.load(cfg.train.seed)?;
    check_schema(&header.schema, &data.schema()?)?;
    let bs = cfg.train.eval_batch_size;
    let report = match checkpoint::header_dtype(&header)? {
        DType::F64 => eval_as::<f64>(args, &data, &slices, bs)?,
        DType::F32 => eval_as::<f32>(args, &data, &slices, bs)?,
    };
    print!("{}", report.to_table());
    let out = args.out.clone().unwrap_or_else(|| dir.join(format!("eval_{}.json", args.split.as_str())));
    write_json(&out, &report)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn eval_as<T: Float>(args: &EvalArgs, data: &Dataset, slices: &[(String, f64)], bs: usize) -> Result<EvalReport> {
    let model = checkpoint::load::<T>(&args.checkpoint)?.model;
    let mut report = evaluate(&model, data, args.split, bs, args.threads)?;
    for (field, t) in slices {
        let tab = match data {
            Dataset::Tabular(t) => t,
            Dataset::Sequence(_) => return Err(DpnError::config("frequency slices need a tabular dataset")),
        };
        let rows = slice_by_frequency(tab, field, *t)?;
        let probs = predict_rows(&model, data, &rows, bs, args.threads)?;
        let labels: Vec<f64> = rows.iter().map(|&i| data.labels()[i]).collect();
        report.slices.insert(format!("{field}<{t}"), SliceMetrics::compute(&probs, &labels));
    }
    Ok(report)
}

// ----------------------------------------------------------------- verify

pub struct VerifyArgs {
    pub suite: Suite,
    pub opts: VerifyOptions,
    pub out: PathBuf,
}

/// Returns whether every property passed.
pub fn verify(args: &VerifyArgs) -> Result<bool> {
    let t0 = Instant::now();
    let results = verify::run(args.suite, &args.opts)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} properties, {} failed, {:.1}s", results.len(), failed, t0.elapsed().as_secs_f64());
    make_dir(&args.out)?;
    let path = args.out.join("verify.json");
    write_json(&path, &json!({ "inject_fault": args.opts.inject_fault, "results": results }))?;
    println!("wrote {}", path.display());
    Ok(failed == 0)
}

// ------------------------------------------------------------------ bench

#[derive(Debug, Serialize)]
struct BenchRow {
    name: String,
    params: usize,
    seconds_per_epoch: f64,
    rows: usize,
}

fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = format!("{:<40} {:>12} {:>14}\n", "model", "params", "sec/epoch");
    for r in rows {
        let _ = writeln!(s, "{:<40} {:>12} {:>14.3}", r.name, r.params, r.seconds_per_epoch);
    }
    s
}

pub fn bench(config: &Path, out: &Path, threads: usize) -> Result<()> {
    let cfg: BenchConfig = read_toml(config)?;
    if cfg.repeats == 0 {
        return Err(DpnError::config("repeats must be positive"));
    }
    let mut rows = Vec::new();
    if !cfg.models.is_empty() {
        let data = cfg.data.load(cfg.seed)?;
        let schema = data.schema()?;
        let mut train = data.indices(Split::Train);
        train.truncate(cfg.subsample);
        for m in &cfg.models {
            let mut tc = TrainConfig::new(cfg.lr, cfg.batch_size, 1, cfg.seed);
            tc.precision = cfg.precision;
            tc.threads = threads;
            let (params, secs) = match cfg.precision {
                Precision::F64 => time_epoch::<f64>(&m.spec, &schema, &data, &train, &tc, cfg.repeats)?,
                Precision::F32 => time_epoch::<f32>(&m.spec, &schema, &data, &train, &tc, cfg.repeats)?,
            };
            rows.push(BenchRow { name: m.name.clone(), params, seconds_per_epoch: secs, rows: train.len() });
        }
    }
    print!("{}", bench_table(&rows));
    make_dir(out)?;
    let path = out.join("bench.json");
    write_json(&path, &rows)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn time_epoch<T: Float>(
    spec: &dpn::model::ModelSpec,
    schema: &FieldSchema,
    data: &Dataset,
    rows: &[usize],
    tc: &TrainConfig,
    repeats: usize,
) -> Result<(usize, f64)> {
    let model = Model::<T>::build(spec, schema, tc.seed)?;
    let params = model.param_count();
    let mut trainer = Trainer::new(model, tc)?;
    let mut total = 0.0;
    for _ in 0..repeats {
        let t0 = Instant::now();
        trainer.epoch(data, rows)?;
        total += t0.elapsed().as_secs_f64();
    }
    Ok((params, total / repeats as f64))
}

// ----------------------------------------------------------------- ingest

pub struct IngestArgs {
    pub input: PathBuf,
    pub format: String,
    pub fields: Vec<String>,
    pub buckets: usize,
    pub negatives: Option<String>,
    pub split: String,
    pub seed: u64,
    pub out: PathBuf,
}

fn parse_split(s: &str) -> Result<SplitRatios> {
    let parts: Vec<u32> = s
        .split(':')
        .map(|p| p.parse().map_err(|_| DpnError::config(format!("split `{s}` is not a:b:c"))))
        .collect::<Result<_>>()?;
    let arr: [u32; 3] = parts.try_into().map_err(|_| DpnError::config(format!("split `{s}` needs three parts")))?;
    Ok(SplitRatios(arr))
}

fn parse_negatives(s: &str) -> Result<NegativeConfig> {
    let p: Vec<&str> = s.split(':').collect();
    let bad = || DpnError::config(format!("negatives `{s}` is not user_field:target_field[:ratio]"));
    match p.as_slice() {
        [u, t] => Ok(NegativeConfig { user_field: u.to_string(), target_field: t.to_string(), ratio: 1 }),
        [u, t, r] => Ok(NegativeConfig {
            user_field: u.to_string(),
            target_field: t.to_string(),
            ratio: r.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

pub fn ingest(args: &IngestArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let negatives = args.negatives.as_deref().map(parse_negatives).transpose()?;
    let path = args.input.clone();
    let data_cfg = match args.format.as_str() {
        "csv" => DataConfig::Csv {
            path,
            schema: None,
            options: dpn::data::IngestOptions { split, ..Default::default() },
            negatives,
        },
        "libfm" => {
            if args.fields.is_empty() {
                return Err(DpnError::config("libfm ingest needs --fields"));
            }
            DataConfig::Libfm { path, fields: args.fields.clone(), split }
        }
        "criteo" | "avazu" => DataConfig::Preset {
            preset: if args.format == "criteo" { dpn::data::Preset::Criteo } else { dpn::data::Preset::Avazu },
            path,
            buckets: args.buckets,
            split,
        },
        "movielens" => DataConfig::Movielens { dir: Some(path) },
        other => return Err(DpnError::config(format!("unknown format `{other}`"))),
    };
    let data_cfg = data_cfg.resolved()?;
    let data = data_cfg.load(args.seed)?;
    let schema = data.schema()?;
    make_dir(&args.out)?;
    write_split_manifest(&args.out.join("splits.tsv"), data.splits())?;
    write_json(&args.out.join("schema.json"), &schema)?;
    let count = |s: Split| data.splits().iter().filter(|&&x| x == s).count();
    let positives = data.labels().iter().filter(|&&y| y == 1.0).count();
    let summary = json!({
        "rows": data.len(),
        "positives": positives,
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
        "fields": schema.fields.iter().map(|f| json!({"name": f.name, "vocab_size": f.vocab_size})).collect::<Vec<_>>(),
    });
    write_json(&args.out.join("summary.json"), &summary)?;
    write_toml(&args.out.join("data.toml"), &json!({ "data": data_cfg }))?;
    println!(
        "{} rows ({} positive), train/val/test {}/{}/{}",
        data.len(),
        positives,
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    for f in &schema.fields {
        println!("  {:<24} vocab {}", f.name, f.vocab_size);
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

