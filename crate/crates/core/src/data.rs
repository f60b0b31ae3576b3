//! Datasets, CSV ingestion, seeded splits, negative sampling and synthetic tasks.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embeddings::{hash_id, FieldSchema, FieldSpec};
use crate::error::{DpnError, Result};
use crate::metrics::auc;
use crate::rng::{SeedStreams, SPLIT, SYNTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Relative split sizes, `7:2:1` by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios(pub [u32; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        Self([7, 2, 1])
    }
}

/// Seeded assignment of `n` rows: train and val get the floor of their share,
/// test the remainder.
pub fn split_rows(n: usize, ratios: SplitRatios, rng: &mut impl Rng) -> Result<Vec<Split>> {
    let total: u64 = ratios.0.iter().map(|&r| r as u64).sum();
    if total == 0 {
        return Err(DpnError::config("split ratios sum to zero"));
    }
    let n_train = (n as u64 * ratios.0[0] as u64 / total) as usize;
    let n_val = (n as u64 * ratios.0[1] as u64 / total) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out = vec![Split::Test; n];
    for (rank, &row) in order.iter().enumerate() {
        if rank < n_train {
            out[row] = Split::Train;
        } else if rank < n_train + n_val {
            out[row] = Split::Val;
        }
    }
    Ok(out)
}

pub fn write_split_manifest(path: &Path, splits: &[Split]) -> Result<()> {
    let f = File::create(path).map_err(|e| DpnError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (i, s) in splits.iter().enumerate() {
        writeln!(w, "{i}\t{}", s.as_str()).map_err(|e| DpnError::io(path, e))?;
    }
    w.flush().map_err(|e| DpnError::io(path, e))
}

pub fn read_split_manifest(path: &Path) -> Result<Vec<Split>> {
    let reader = open_text(path)?;
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DpnError::io(path, e))?;
        let parse_err = |msg: String| DpnError::Parse { path: path.display().to_string(), line: lineno + 1, msg };
        let (idx, split) = line.split_once('\t').ok_or_else(|| parse_err("expected `row<TAB>split`".into()))?;
        let idx: usize = idx.parse().map_err(|_| parse_err(format!("bad row index `{idx}`")))?;
        if idx != out.len() {
            return Err(parse_err(format!("row index {idx} out of order")));
        }
        out.push(Split::parse(split).ok_or_else(|| parse_err(format!("unknown split `{split}`")))?);
    }
    Ok(out)
}

/// One mini-batch in the layout the models consume.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// `[size, fields]` row-major field ids.
    pub fields: Vec<usize>,
    /// `[size, T]` behavior ids, 0 is padding.
    pub history: Vec<usize>,
    pub history_len: usize,
    /// Target item id per row.
    pub target: Vec<usize>,
    pub labels: Vec<f64>,
}

/// Categorical rows with binary labels and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub schema: FieldSchema,
    /// `[rows, fields]` row-major ids.
    pub ids: Vec<usize>,
    pub labels: Vec<f64>,
    pub splits: Vec<Split>,
}

impl TabularDataset {
    pub fn new(schema: FieldSchema, ids: Vec<usize>, labels: Vec<f64>, splits: Vec<Split>) -> Result<Self> {
        let t = schema.len();
        if t == 0 || ids.len() != labels.len() * t || splits.len() != labels.len() {
            return Err(DpnError::Data(format!(
                "inconsistent dataset: {} ids, {} labels, {} split tags, {t} fields",
                ids.len(),
                labels.len(),
                splits.len()
            )));
        }
        for (k, row) in ids.chunks(t).enumerate() {
            for (f, &id) in schema.fields.iter().zip(row) {
                if id >= f.vocab_size {
                    return Err(DpnError::Data(format!(
                        "row {k}: id {id} out of range for field `{}` (vocab {})",
                        f.name, f.vocab_size
                    )));
                }
            }
        }
        if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(DpnError::Data("labels must be 0 or 1".into()));
        }
        Ok(Self { schema, ids, labels, splits })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        let t = self.schema.len();
        &self.ids[i * t..(i + 1) * t]
    }

    pub fn resplit(&mut self, ratios: SplitRatios, seed: u64) -> Result<()> {
        self.splits = split_rows(self.len(), ratios, &mut SeedStreams::new(seed).stream(SPLIT))?;
        Ok(())
    }
}

/// Behavior sequences with a target item and label.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    /// Item ids are in `1..vocab`; 0 is padding.
    pub vocab: usize,
    pub history_len: usize,
    pub history: Vec<usize>,
    pub target: Vec<usize>,
    pub labels: Vec<f64>,
    pub splits: Vec<Split>,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn history_of(&self, i: usize) -> &[usize] {
        &self.history[i * self.history_len..(i + 1) * self.history_len]
    }

    /// Single `item` field covering the id space.
    pub fn schema(&self) -> Result<FieldSchema> {
        FieldSchema::new(vec![FieldSpec::new("item", self.vocab)])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Tabular(TabularDataset),
    Sequence(SequenceDataset),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Tabular(d) => d.len(),
            Dataset::Sequence(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn schema(&self) -> Result<FieldSchema> {
        match self {
            Dataset::Tabular(d) => Ok(d.schema.clone()),
            Dataset::Sequence(d) => d.schema(),
        }
    }

    pub fn labels(&self) -> &[f64] {
        match self {
            Dataset::Tabular(d) => &d.labels,
            Dataset::Sequence(d) => &d.labels,
        }
    }

    pub fn splits(&self) -> &[Split] {
        match self {
            Dataset::Tabular(d) => &d.splits,
            Dataset::Sequence(d) => &d.splits,
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits().iter().enumerate().filter(|(_, &s)| s == split).map(|(i, _)| i).collect()
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        let labels = rows.iter().map(|&i| self.labels()[i]).collect();
        match self {
            Dataset::Tabular(d) => Batch {
                size: rows.len(),
                fields: rows.iter().flat_map(|&i| d.row(i).iter().copied()).collect(),
                labels,
                ..Batch::default()
            },
            Dataset::Sequence(d) => Batch {
                size: rows.len(),
                history: rows.iter().flat_map(|&i| d.history_of(i).iter().copied()).collect(),
                history_len: d.history_len,
                target: rows.iter().map(|&i| d.target[i]).collect(),
                labels,
                ..Batch::default()
            },
        }
    }
}

fn open_text(path: &Path) -> Result<Box<dyn BufRead>> {
    let f = File::open(path).map_err(|e| DpnError::io(path, e))?;
    let inner: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(f))
    } else {
        Box::new(f)
    };
    Ok(Box::new(BufReader::new(inner)))
}

/// Bucket of a numeric value: `floor(ln(v)^2)` above 2, `floor(v)` otherwise.
pub fn log2_bucket(v: f64) -> i64 {
    if v > 2.0 {
        let l = v.ln();
        (l * l).floor() as i64
    } else {
        v.floor() as i64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestOptions {
    /// Label column; when absent from the file every row is a positive.
    #[serde(default = "default_label")]
    pub label_column: String,
    #[serde(default)]
    pub split: SplitRatios,
    /// Columns to ignore.
    #[serde(default)]
    pub skip_columns: Vec<String>,
}

fn default_label() -> String {
    "label".into()
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { label_column: default_label(), split: SplitRatios::default(), skip_columns: Vec::new() }
    }
}

impl Serialize for SplitRatios {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for SplitRatios {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Self(<[u32; 3]>::deserialize(d)?))
    }
}

/// Column layout of the public CTR benchmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `label, I1..I13` numeric, `C1..C26` categorical.
    Criteo,
    /// `click` label and 22 categorical columns (`id` and `hour` are dropped).
    Avazu,
}

pub const AVAZU_FIELDS: [&str; 22] = [
    "C1", "banner_pos", "site_id", "site_domain", "site_category", "app_id", "app_domain", "app_category",
    "device_id", "device_ip", "device_model", "device_type", "device_conn_type", "C14", "C15", "C16", "C17",
    "C18", "C19", "C20", "C21", "hour_of_day",
];

impl Preset {
    pub fn schema(self, buckets: usize) -> (FieldSchema, IngestOptions) {
        match self {
            Preset::Criteo => {
                let mut fields: Vec<FieldSpec> = (1..=13)
                    .map(|i| FieldSpec { numeric: true, ..FieldSpec::hashed(&format!("I{i}"), buckets) })
                    .collect();
                fields.extend((1..=26).map(|i| FieldSpec::hashed(&format!("C{i}"), buckets)));
                (FieldSchema { fields }, IngestOptions::default())
            }
            Preset::Avazu => {
                let fields = AVAZU_FIELDS.iter().map(|n| FieldSpec::hashed(n, buckets)).collect();
                (
                    FieldSchema { fields },
                    IngestOptions { label_column: "click".into(), skip_columns: vec!["id".into()], ..Default::default() },
                )
            }
        }
    }
}

fn field_id(f: &FieldSpec, raw: &str, derived: Option<&HashMap<String, usize>>) -> std::result::Result<usize, String> {
    if f.numeric {
        let key = if raw.is_empty() {
            String::new()
        } else {
            let v: f64 = raw.parse().map_err(|_| format!("field `{}`: `{raw}` is not numeric", f.name))?;
            log2_bucket(v).to_string()
        };
        return Ok(hash_id(&key, f.vocab_size));
    }
    if f.hashed {
        return Ok(hash_id(raw, f.vocab_size));
    }
    if let Some(map) = derived {
        return map.get(raw).copied().ok_or_else(|| format!("field `{}`: unseen value `{raw}`", f.name));
    }
    let id: usize = raw.parse().map_err(|_| format!("field `{}`: `{raw}` is not an integer id", f.name))?;
    if id >= f.vocab_size {
        return Err(format!("field `{}`: id {id} out of range (vocab {})", f.name, f.vocab_size));
    }
    Ok(id)
}

/// Read a headered CSV (gzip when the name ends in `.gz`).
///
/// With a schema, columns are matched by name. Without one, each column gets
/// a dense vocabulary in order of first appearance and the inferred schema is
/// returned frozen in the dataset.
pub fn ingest_csv(path: &Path, schema: Option<&FieldSchema>, opts: &IngestOptions, seed: u64) -> Result<TabularDataset> {
    let pstr = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(open_text(path)?);
    let headers = rdr
        .headers()
        .map_err(|e| DpnError::Parse { path: pstr.clone(), line: 1, msg: e.to_string() })?
        .clone();
    let label_col = headers.iter().position(|h| h == opts.label_column);
    let infer = schema.is_none();
    let data_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| Some(*i) != label_col && !opts.skip_columns.iter().any(|s| s == h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let (mut schema, cols): (FieldSchema, Vec<usize>) = match schema {
        Some(s) => {
            for (_, h) in &data_cols {
                if s.index_of(h).is_err() {
                    return Err(DpnError::Parse { path: pstr, line: 1, msg: format!("unknown column `{h}`") });
                }
            }
            let cols = s
                .fields
                .iter()
                .map(|f| {
                    data_cols.iter().find(|(_, h)| *h == f.name).map(|(i, _)| *i).ok_or_else(|| DpnError::Parse {
                        path: pstr.clone(),
                        line: 1,
                        msg: format!("missing column `{}`", f.name),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (s.clone(), cols)
        }
        None => {
            let fields = data_cols.iter().map(|(_, h)| FieldSpec::new(h, 1)).collect();
            (FieldSchema { fields }, data_cols.iter().map(|(i, _)| *i).collect())
        }
    };
    let mut vocabs: Vec<HashMap<String, usize>> = vec![HashMap::new(); schema.len()];

    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut rec = csv::StringRecord::new();
    loop {
        let line = rdr.position().line() as usize;
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(DpnError::Parse { path: pstr, line: line.max(2), msg: e.to_string() }),
        }
        let line = rec.position().map_or(line, |p| p.line() as usize);
        let perr = |msg: String| DpnError::Parse { path: pstr.clone(), line, msg };
        for (k, &col) in cols.iter().enumerate() {
            let raw = rec.get(col).unwrap_or("");
            let id = if infer {
                let n = vocabs[k].len();
                *vocabs[k].entry(raw.to_string()).or_insert(n)
            } else {
                field_id(&schema.fields[k], raw, None).map_err(perr)?
            };
            ids.push(id);
        }
        let y = match label_col {
            Some(c) => match rec.get(c).unwrap_or("").trim() {
                "1" | "1.0" => 1.0,
                "0" | "0.0" | "-1" => 0.0,
                other => return Err(perr(format!("label `{other}` is not binary"))),
            },
            None => 1.0,
        };
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(DpnError::Data(format!("{pstr}: no data rows")));
    }
    if infer {
        for (f, v) in schema.fields.iter_mut().zip(&vocabs) {
            f.vocab_size = v.len().max(1);
        }
    }
    let splits = split_rows(labels.len(), opts.split, &mut SeedStreams::new(seed).stream(SPLIT))?;
    TabularDataset::new(schema, ids, labels, splits)
}

/// Read a libFM-style file (`label idx:val idx:val ...`, one entry per field,
/// fields in column order). Each field gets a dense vocabulary in order of
/// first appearance; labels `-1`/`0` are negatives.
pub fn ingest_libfm(path: &Path, fields: &[&str], split: SplitRatios, seed: u64) -> Result<TabularDataset> {
    let pstr = path.display().to_string();
    if fields.is_empty() {
        return Err(DpnError::config("libfm ingest needs at least one field name"));
    }
    let mut vocabs: Vec<HashMap<String, usize>> = vec![HashMap::new(); fields.len()];
    let (mut ids, mut labels) = (Vec::new(), Vec::new());
    for (i, line) in open_text(path)?.lines().enumerate() {
        let line = line.map_err(|e| DpnError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| DpnError::Parse { path: pstr.clone(), line: i + 1, msg };
        let mut tok = line.split_whitespace();
        let y = match tok.next().unwrap_or("") {
            "1" | "1.0" | "+1" => 1.0,
            "0" | "0.0" | "-1" | "-1.0" => 0.0,
            other => return Err(perr(format!("label `{other}` is not binary"))),
        };
        let feats: Vec<&str> = tok.collect();
        if feats.len() != fields.len() {
            return Err(perr(format!("expected {} features, found {}", fields.len(), feats.len())));
        }
        for (k, f) in feats.iter().enumerate() {
            let key = f.split(':').next().unwrap_or("");
            if key.is_empty() {
                return Err(perr(format!("malformed feature `{f}`")));
            }
            let n = vocabs[k].len();
            ids.push(*vocabs[k].entry(key.to_string()).or_insert(n));
        }
        labels.push(y);
    }
    if labels.is_empty() {
        return Err(DpnError::Data(format!("{pstr}: no data rows")));
    }
    let schema = FieldSchema::new(fields.iter().zip(&vocabs).map(|(n, v)| FieldSpec::new(n, v.len().max(1))).collect())?;
    let splits = split_rows(labels.len(), split, &mut SeedStreams::new(seed).stream(SPLIT))?;
    TabularDataset::new(schema, ids, labels, splits)
}

/// For every positive, `ratio` copies with the target field resampled
/// uniformly among values the same user never had as a positive.
/// Negatives inherit the split of their positive.
pub fn negative_sample(
    data: &TabularDataset,
    user_field: &str,
    target_field: &str,
    ratio: usize,
    rng: &mut impl Rng,
) -> Result<TabularDataset> {
    if ratio < 1 {
        return Err(DpnError::config("negative ratio must be at least 1"));
    }
    let (uf, tf) = (data.schema.index_of(user_field)?, data.schema.index_of(target_field)?);
    let vocab = data.schema.fields[tf].vocab_size;
    let mut seen: HashMap<usize, HashSet<usize>> = HashMap::new();
    for i in 0..data.len() {
        if data.labels[i] == 1.0 {
            let r = data.row(i);
            seen.entry(r[uf]).or_default().insert(r[tf]);
        }
    }
    let t = data.schema.len();
    let mut ids = Vec::with_capacity(data.ids.len() * (ratio + 1));
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for i in 0..data.len() {
        let row = data.row(i);
        ids.extend_from_slice(row);
        labels.push(data.labels[i]);
        splits.push(data.splits[i]);
        if data.labels[i] != 1.0 {
            continue;
        }
        let excl = &seen[&row[uf]];
        if excl.len() >= vocab {
            return Err(DpnError::Data(format!(
                "user {} has positives on all {vocab} values of `{target_field}`; cannot sample negatives",
                row[uf]
            )));
        }
        for _ in 0..ratio {
            let neg = loop {
                let c = rng.gen_range(0..vocab);
                if !excl.contains(&c) {
                    break c;
                }
            };
            let start = ids.len();
            ids.extend_from_slice(row);
            ids[start + tf] = neg;
            labels.push(0.0);
            splits.push(data.splits[i]);
        }
    }
    debug_assert_eq!(ids.len(), labels.len() * t);
    TabularDataset::new(data.schema.clone(), ids, labels, splits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub rows: usize,
    pub users: usize,
    pub items: usize,
    /// Latent dim.
    pub dim: usize,
    /// Multiplier on the bilinear logit; 0 removes all signal.
    #[serde(default = "one_f")]
    pub scale: f64,
}

fn one_f() -> f64 {
    1.0
}

/// Multiplicative task with the generator's ground truth attached.
#[derive(Debug, Clone)]
pub struct SynthTabular {
    pub data: TabularDataset,
    pub user_latent: Vec<Vec<f64>>,
    pub item_latent: Vec<Vec<f64>>,
    /// `dim x dim`, row-major.
    pub m: Vec<f64>,
    /// True logit per row.
    pub logits: Vec<f64>,
}

impl SynthTabular {
    /// AUC of the true click probabilities on the test split.
    pub fn bayes_auc(&self) -> Result<f64> {
        split_auc(&self.logits, &self.data.labels, &self.data.splits, Split::Test)
    }
}

fn split_auc(scores: &[f64], labels: &[f64], splits: &[Split], which: Split) -> Result<f64> {
    let (mut s, mut y) = (Vec::new(), Vec::new());
    for i in 0..labels.len() {
        if splits[i] == which {
            s.push(scores[i]);
            y.push(labels[i]);
        }
    }
    auc(&s, &y)
}

fn normal_vec(rng: &mut impl Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Rows `(user, item)` with `P(click) = sigmoid(scale * u^T M v)` for latent
/// unit-variance `u`, `v` and a fixed Gaussian `M`.
pub fn synth_multiplicative(cfg: &SynthConfig, seed: u64) -> Result<SynthTabular> {
    if cfg.dim == 0 || cfg.dim > 16 || cfg.users == 0 || cfg.items == 0 {
        return Err(DpnError::config("synthetic task needs 1 <= dim <= 16 and non-empty vocabularies"));
    }
    let mut rng = SeedStreams::new(seed).stream(SYNTH);
    let d = cfg.dim;
    let user_latent: Vec<Vec<f64>> = (0..cfg.users).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
    let item_latent: Vec<Vec<f64>> = (0..cfg.items).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
    let m = normal_vec(&mut rng, d * d, 1.0 / (d as f64).sqrt());
    let mut ids = Vec::with_capacity(cfg.rows * 2);
    let mut labels = Vec::with_capacity(cfg.rows);
    let mut logits = Vec::with_capacity(cfg.rows);
    for _ in 0..cfg.rows {
        let (u, v) = (rng.gen_range(0..cfg.users), rng.gen_range(0..cfg.items));
        let (x, y) = (&user_latent[u], &item_latent[v]);
        let mut s = 0.0;
        for a in 0..d {
            for b in 0..d {
                s += x[a] * m[a * d + b] * y[b];
            }
        }
        let z = cfg.scale * s;
        logits.push(z);
        labels.push(if rng.gen::<f64>() < sigmoid(z) { 1.0 } else { 0.0 });
        ids.extend([u, v]);
    }
    let schema = FieldSchema::new(vec![FieldSpec::new("user", cfg.users), FieldSpec::new("item", cfg.items)])?;
    let splits = split_rows(cfg.rows, SplitRatios::default(), &mut SeedStreams::new(seed).stream(SPLIT))?;
    Ok(SynthTabular { data: TabularDataset::new(schema, ids, labels, splits)?, user_latent, item_latent, m, logits })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSequenceConfig {
    pub rows: usize,
    pub history_len: usize,
    /// Number of real items; ids run `1..=items`.
    pub items: usize,
    pub dim: usize,
    #[serde(default = "one_f")]
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub data: SequenceDataset,
    /// Row `i` is the latent of item `i` (row 0, padding, is zero).
    pub item_latent: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

impl SynthSequence {
    pub fn bayes_auc(&self) -> Result<f64> {
        split_auc(&self.logits, &self.data.labels, &self.data.splits, Split::Test)
    }
}

/// Histories of distinct items and a target outside the history;
/// `P(click) = sigmoid(scale * sqrt(dim * T) * <v_target, mean v_history>)`, a unit-variance logit at scale 1.
pub fn synth_sequence(cfg: &SynthSequenceConfig, seed: u64) -> Result<SynthSequence> {
    if cfg.history_len == 0 || cfg.items <= cfg.history_len || cfg.dim == 0 {
        return Err(DpnError::config("synthetic sequences need 1 <= history_len < items and dim >= 1"));
    }
    let mut rng = SeedStreams::new(seed).stream(SYNTH);
    let d = cfg.dim;
    let mut item_latent = vec![vec![0.0; d]];
    item_latent.extend((0..cfg.items).map(|_| normal_vec(&mut rng, d, 1.0 / (d as f64).sqrt())));
    let t = cfg.history_len;
    let mut history = Vec::with_capacity(cfg.rows * t);
    let (mut target, mut labels, mut logits) = (Vec::new(), Vec::new(), Vec::new());
    let pool: Vec<usize> = (1..=cfg.items).collect();
    for _ in 0..cfg.rows {
        let picks: Vec<usize> = pool.choose_multiple(&mut rng, t + 1).copied().collect();
        let (tgt, hist) = (picks[0], &picks[1..]);
        let mut mean = vec![0.0; d];
        for &h in hist {
            for (a, v) in mean.iter_mut().zip(&item_latent[h]) {
                *a += v / t as f64;
            }
        }
        let s: f64 = mean.iter().zip(&item_latent[tgt]).map(|(a, b)| a * b).sum();
        let z = cfg.scale * (d as f64).sqrt() * s * (t as f64).sqrt();
        logits.push(z);
        labels.push(if rng.gen::<f64>() < sigmoid(z) { 1.0 } else { 0.0 });
        history.extend_from_slice(hist);
        target.push(tgt);
    }
    let splits = split_rows(cfg.rows, SplitRatios::default(), &mut SeedStreams::new(seed).stream(SPLIT))?;
    Ok(SynthSequence {
        data: SequenceDataset { vocab: cfg.items + 1, history_len: t, history, target, labels, splits },
        item_latent,
        logits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn split_sizes_and_determinism() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let s = split_rows(10, SplitRatios::default(), &mut r).unwrap();
        let count = |w| s.iter().filter(|&&x| x == w).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (7, 2, 1));
        let again = split_rows(10, SplitRatios::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn log2_buckets() {
        assert_eq!(log2_bucket(1.0), 1);
        assert_eq!(log2_bucket(-3.5), -4);
        assert_eq!(log2_bucket(100.0), 21);
    }

    #[test]
    fn zero_signal_synth_is_balanced() {
        let s = synth_multiplicative(&SynthConfig { rows: 4000, users: 20, items: 20, dim: 4, scale: 0.0 }, 3).unwrap();
        let pos: f64 = s.data.labels.iter().sum::<f64>() / 4000.0;
        assert!((pos - 0.5).abs() < 0.03, "{pos}");
        assert!(s.logits.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn sequence_targets_not_in_history() {
        let s = synth_sequence(&SynthSequenceConfig { rows: 200, history_len: 5, items: 30, dim: 4, scale: 1.0 }, 2)
            .unwrap();
        for i in 0..s.data.len() {
            let h = s.data.history_of(i);
            assert!(h.iter().all(|&x| (1..=30).contains(&x)));
            assert!(!h.contains(&s.data.target[i]));
        }
    }
}
