//! Run, data and bench configuration files (TOML).

use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use dpn::data::{
    ingest_csv, ingest_libfm, negative_sample, synth_multiplicative, synth_sequence, Dataset, IngestOptions, Preset,
    SplitRatios, SynthConfig, SynthSequenceConfig,
};
use dpn::embeddings::FieldSchema;
use dpn::experiments::load_movielens;
use dpn::model::ModelSpec;
use dpn::rng::{SeedStreams, NEGATIVES};
use dpn::train::TrainConfig;
use dpn::{DpnError, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const DATA_DIR_VAR: &str = "DPN_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NegativeConfig {
    pub user_field: String,
    pub target_field: String,
    #[serde(default = "one")]
    pub ratio: usize,
}

fn one() -> usize {
    1
}

fn default_buckets() -> usize {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Headered CSV, optionally gzipped.
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        schema: Option<FieldSchema>,
        #[serde(default)]
        options: IngestOptions,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        negatives: Option<NegativeConfig>,
    },
    /// A public benchmark layout with hashed fields.
    Preset {
        preset: Preset,
        path: PathBuf,
        #[serde(default = "default_buckets")]
        buckets: usize,
        #[serde(default)]
        split: SplitRatios,
    },
    Libfm {
        path: PathBuf,
        fields: Vec<String>,
        #[serde(default)]
        split: SplitRatios,
    },
    /// `movielens_tag.libfm` or `movielens_tag.csv` under `dir`.
    Movielens {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
    Synthetic {
        task: SynthConfig,
    },
    Sequence {
        task: SynthSequenceConfig,
    },
}

/// Relative data paths resolve against `DPN_DATA_DIR` when it is set.
pub fn resolve_data_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_path_buf();
    }
    match env::var_os(DATA_DIR_VAR) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn require(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(DpnError::config(format!("data path {} does not exist", p.display())))
    }
}

impl DataConfig {
    /// Same config with every path made absolute.
    pub fn resolved(&self) -> Result<Self> {
        let fix = |p: &Path| absolute(&resolve_data_path(p));
        Ok(match self.clone() {
            DataConfig::Csv { path, schema, options, negatives } => {
                DataConfig::Csv { path: fix(&path), schema, options, negatives }
            }
            DataConfig::Preset { preset, path, buckets, split } => {
                DataConfig::Preset { preset, path: fix(&path), buckets, split }
            }
            DataConfig::Libfm { path, fields, split } => DataConfig::Libfm { path: fix(&path), fields, split },
            DataConfig::Movielens { dir } => {
                let dir = match dir {
                    Some(d) => fix(&d),
                    None => match env::var_os(DATA_DIR_VAR) {
                        Some(root) if !root.is_empty() => absolute(Path::new(&root)),
                        _ => {
                            return Err(DpnError::config(format!(
                                "movielens data needs `dir` or the {DATA_DIR_VAR} environment variable"
                            )))
                        }
                    },
                };
                DataConfig::Movielens { dir: Some(dir) }
            }
            other => other,
        })
    }

    pub fn load(&self, seed: u64) -> Result<Dataset> {
        let cfg = self.resolved()?;
        Ok(match &cfg {
            DataConfig::Csv { path, schema, options, negatives } => {
                require(path)?;
                let d = ingest_csv(path, schema.as_ref(), options, seed)?;
                Dataset::Tabular(match negatives {
                    Some(n) => negative_sample(
                        &d,
                        &n.user_field,
                        &n.target_field,
                        n.ratio,
                        &mut SeedStreams::new(seed).stream(NEGATIVES),
                    )?,
                    None => d,
                })
            }
            DataConfig::Preset { preset, path, buckets, split } => {
                require(path)?;
                let (schema, mut opts) = preset.schema(*buckets);
                opts.split = *split;
                Dataset::Tabular(ingest_csv(path, Some(&schema), &opts, seed)?)
            }
            DataConfig::Libfm { path, fields, split } => {
                require(path)?;
                let names: Vec<&str> = fields.iter().map(String::as_str).collect();
                Dataset::Tabular(ingest_libfm(path, &names, *split, seed)?)
            }
            DataConfig::Movielens { dir } => {
                let dir = dir.as_deref().expect("resolved");
                require(dir)?;
                Dataset::Tabular(load_movielens(dir, seed)?)
            }
            DataConfig::Synthetic { task } => Dataset::Tabular(synth_multiplicative(task, seed)?.data),
            DataConfig::Sequence { task } => Dataset::Sequence(synth_sequence(task, seed)?.data),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

fn default_subsample() -> usize {
    10_000
}
fn default_bench_batch() -> usize {
    4096
}
fn default_bench_lr() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchModel {
    pub name: String,
    pub spec: ModelSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default)]
    pub seed: u64,
    /// Train rows timed per epoch.
    #[serde(default = "default_subsample")]
    pub subsample: usize,
    #[serde(default = "default_bench_batch")]
    pub batch_size: usize,
    #[serde(default = "default_bench_lr")]
    pub lr: f64,
    #[serde(default)]
    pub precision: dpn::train::Precision,
    #[serde(default = "one")]
    pub repeats: usize,
    pub data: DataConfig,
    #[serde(default)]
    pub models: Vec<BenchModel>,
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DpnError::io(path, e))?;
    toml::from_str(&text).map_err(|e| DpnError::config(format!("{}: {e}", path.display())))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| DpnError::config(format!("cannot serialize config: {e}")))?;
    fs::write(path, text).map_err(|e| DpnError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dpn::experiments::{movielens_field_dpn, synth_feature_dpn, SYNTH_FEATURE_TASK};

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = r#"
            [data]
            source = "synthetic"
            task = { rows = 10, users = 2, items = 2, dim = 2, scale = 1.0 }
            [model]
            family = "mlp"
            embedding_dim = 4
            colour = "red"
            [train]
            lr = 0.01
            batch_size = 8
            epochs = 1
        "#;
        let e = toml::from_str::<RunConfig>(bad).unwrap_err().to_string();
        assert!(e.contains("colour"), "{e}");
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig {
            name: Some("x".into()),
            out_dir: None,
            data: DataConfig::Synthetic { task: SYNTH_FEATURE_TASK },
            model: synth_feature_dpn(),
            train: TrainConfig::new(0.01, 128, 3, 7),
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), cfg);
        let field = RunConfig { model: movielens_field_dpn(dpn::dpo::Aggregation::Concat, true), ..cfg };
        let text = toml::to_string(&field).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), field);
    }

    fn configs_dir() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
    }

    fn schema_for(data: &DataConfig) -> FieldSchema {
        use dpn::embeddings::FieldSpec;
        match data {
            DataConfig::Synthetic { task } => {
                FieldSchema::new(vec![FieldSpec::new("user", task.users), FieldSpec::new("item", task.items)]).unwrap()
            }
            DataConfig::Sequence { task } => FieldSchema::new(vec![FieldSpec::new("item", task.items + 1)]).unwrap(),
            _ => FieldSchema::new(["user", "movie", "tag"].iter().map(|n| FieldSpec::new(n, 20)).collect()).unwrap(),
        }
    }

    #[test]
    fn committed_configs_parse_and_build() {
        let mut n = 0;
        for entry in fs::read_dir(configs_dir()).unwrap() {
            let path = entry.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            if path.extension().is_none_or(|e| e != "toml") {
                continue;
            }
            let specs: Vec<(ModelSpec, FieldSchema)> = if name.starts_with("bench_") {
                let b: BenchConfig = read_toml(&path).unwrap();
                b.models.iter().map(|m| (m.spec.clone(), schema_for(&b.data))).collect()
            } else {
                let r: RunConfig = read_toml(&path).unwrap();
                r.train.validate(r.model.batch_norm).unwrap();
                vec![(r.model.clone(), schema_for(&r.data))]
            };
            for (spec, schema) in specs {
                dpn::model::Model::<f32>::build(&spec, &schema, 0).unwrap_or_else(|e| panic!("{name}: {e}"));
            }
            n += 1;
        }
        assert!(n >= 10, "only {n} configs found");
    }

    #[test]
    fn reference_configs_match_pinned_setups() {
        use dpn::experiments::*;
        let run = |f: &str| read_toml::<RunConfig>(&configs_dir().join(f)).unwrap();
        let mlp = run("movielens_mlp.toml");
        assert_eq!(mlp.model, movielens_mlp());
        assert_eq!(mlp.train, movielens_train_config(0));
        assert_eq!(run("movielens_context_x0_x0.toml").model, movielens_feature_dpn());
        assert_eq!(
            run("movielens_field_dpn_concat_implicit.toml").model,
            movielens_field_dpn(dpn::dpo::Aggregation::Concat, true)
        );
        assert_eq!(
            run("movielens_field_dpn_summation.toml").model,
            movielens_field_dpn(dpn::dpo::Aggregation::Summation, false)
        );
        let syn = run("synthetic_feature_dpn.toml");
        assert_eq!(syn.model, synth_feature_dpn());
        assert_eq!(syn.train, synth_train_config(0.01, 0));
        assert_eq!(syn.data, DataConfig::Synthetic { task: SYNTH_FEATURE_TASK });
        assert_eq!(run("synthetic_mlp.toml").model, synth_feature_mlp());
        let seq = run("sequence_sdpn.toml");
        assert_eq!(seq.model, synth_sdpn());
        assert_eq!(seq.train, synth_train_config(0.02, 0));
        assert_eq!(seq.data, DataConfig::Sequence { task: SYNTH_SEQUENCE_TASK });
    }
}
