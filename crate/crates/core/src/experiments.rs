//! Pinned experiment setups shared by the acceptance harness and the CLI.

use std::path::Path;

use serde::Serialize;

use crate::data::{
    ingest_csv, ingest_libfm, negative_sample, synth_multiplicative, synth_sequence, Dataset, IngestOptions, Split,
    SplitRatios, SynthConfig, SynthSequenceConfig, TabularDataset,
};
use crate::dpo::{Aggregation, Gate, GeneratorSpec, LocalEncoder};
use crate::error::{DpnError, Result};
use crate::metrics::EvalReport;
use crate::model::{Context, Family, LayerSpec, Model, ModelSpec, SeqDecoder, SeqEncoder, SequenceSpec};
use crate::rng::{SeedStreams, NEGATIVES};
use crate::train::{evaluate, Precision, TrainConfig, TrainReport, Trainer};

/// Train on the train split, then evaluate the kept parameters on `split`.
pub fn fit_and_evaluate(
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
    split: Split,
) -> Result<(EvalReport, TrainReport)> {
    let schema = data.schema()?;
    match cfg.precision {
        Precision::F64 => {
            let mut t = Trainer::new(Model::<f64>::build(spec, &schema, cfg.seed)?, cfg)?;
            let r = t.fit(data)?;
            Ok((evaluate(&t.model, data, split, cfg.eval_batch_size, cfg.threads)?, r))
        }
        Precision::F32 => {
            let mut t = Trainer::new(Model::<f32>::build(spec, &schema, cfg.seed)?, cfg)?;
            let r = t.fit(data)?;
            Ok((evaluate(&t.model, data, split, cfg.eval_batch_size, cfg.threads)?, r))
        }
    }
}

// ------------------------------------------------------------- synthetic

pub const SYNTH_FEATURE_TASK: SynthConfig = SynthConfig { rows: 10_000, users: 50, items: 50, dim: 4, scale: 1.5 };
pub const SYNTH_FEATURE_EMBEDDING: usize = 4;

/// One width-1 dynamic layer whose weights come from the user embedding.
pub fn synth_feature_dpn() -> ModelSpec {
    ModelSpec {
        family: Family::FeatureDpn,
        embedding_dim: SYNTH_FEATURE_EMBEDDING,
        layers: vec![LayerSpec::FeatureDpo {
            name: "dpo".into(),
            width: 1,
            generator: GeneratorSpec::mok(4, Gate::Identity),
            context: Context::Field("user".into()),
            bias: true,
            stop_gradient: false,
        }],
        batch_norm: true,
        sequence: None,
    }
}

/// Plain MLP with the same non-embedding parameter budget (61 vs 60).
pub fn synth_feature_mlp() -> ModelSpec {
    ModelSpec::mlp(SYNTH_FEATURE_EMBEDDING, &[5])
}

pub fn synth_train_config(lr: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(lr, 128, 30, seed);
    cfg.patience = 5;
    cfg
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthFeatureOutcome {
    pub seed: u64,
    pub bayes_auc: f64,
    pub dpn_auc: f64,
    pub mlp_auc: f64,
    pub dpn_params: usize,
    pub mlp_params: usize,
}

pub fn run_synth_feature(seed: u64) -> Result<SynthFeatureOutcome> {
    let task = synth_multiplicative(&SYNTH_FEATURE_TASK, seed)?;
    let data = Dataset::Tabular(task.data.clone());
    let cfg = synth_train_config(0.01, seed);
    let (dpn, _) = fit_and_evaluate(&synth_feature_dpn(), &data, &cfg, Split::Test)?;
    let (mlp, _) = fit_and_evaluate(&synth_feature_mlp(), &data, &cfg, Split::Test)?;
    Ok(SynthFeatureOutcome {
        seed,
        bayes_auc: task.bayes_auc()?,
        dpn_auc: dpn.auc,
        mlp_auc: mlp.auc,
        dpn_params: dpn.params,
        mlp_params: mlp.params,
    })
}

pub const SYNTH_SEQUENCE_TASK: SynthSequenceConfig =
    SynthSequenceConfig { rows: 10_000, history_len: 5, items: 20, dim: 4, scale: 2.0 };

/// Dynamic-convolution encoder with a residual, dynamic-affine decoder on the target.
pub fn synth_sdpn() -> ModelSpec {
    let mok = GeneratorSpec::mok(4, Gate::Identity);
    ModelSpec {
        family: Family::Sdpn,
        embedding_dim: 4,
        layers: vec![],
        batch_norm: true,
        sequence: Some(SequenceSpec {
            item_field: "item".into(),
            encoder: SeqEncoder::Homo { k: 3, generator: mok.clone(), local_encoder: LocalEncoder::None, bias_head: false },
            decoder: SeqDecoder::Hetero { width: 4, generator: mok },
        }),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SynthSequenceOutcome {
    pub seed: u64,
    pub bayes_auc: f64,
    pub sdpn_auc: f64,
    pub sdpn_params: usize,
}

pub fn run_synth_sequence(seed: u64) -> Result<SynthSequenceOutcome> {
    let task = synth_sequence(&SYNTH_SEQUENCE_TASK, seed)?;
    let data = Dataset::Sequence(task.data.clone());
    let (r, _) = fit_and_evaluate(&synth_sdpn(), &data, &synth_train_config(0.02, seed), Split::Test)?;
    Ok(SynthSequenceOutcome { seed, bayes_auc: task.bayes_auc()?, sdpn_auc: r.auc, sdpn_params: r.params })
}

// ---------------------------------------------------------- MovieLens-tag

pub const MOVIELENS_FIELDS: [&str; 3] = ["user", "movie", "tag"];
pub const MOVIELENS_LIBFM: &str = "movielens_tag.libfm";
pub const MOVIELENS_CSV: &str = "movielens_tag.csv";

/// Load MovieLens-tag from `dir`: a labeled libFM file if present, else a
/// `user,movie,tag` CSV of observed tuples with one sampled negative tag each.
pub fn load_movielens(dir: &Path, seed: u64) -> Result<TabularDataset> {
    let libfm = dir.join(MOVIELENS_LIBFM);
    if libfm.exists() {
        return ingest_libfm(&libfm, &MOVIELENS_FIELDS, SplitRatios::default(), seed);
    }
    let csv = dir.join(MOVIELENS_CSV);
    if !csv.exists() {
        return Err(DpnError::Data(format!(
            "no {MOVIELENS_LIBFM} or {MOVIELENS_CSV} under {}",
            dir.display()
        )));
    }
    let data = ingest_csv(&csv, None, &IngestOptions::default(), seed)?;
    if data.labels.contains(&0.0) {
        return Ok(data);
    }
    negative_sample(&data, "user", "tag", 1, &mut SeedStreams::new(seed).stream(NEGATIVES))
}

fn mok_feature(name: &str, context: Context) -> LayerSpec {
    LayerSpec::FeatureDpo {
        name: name.into(),
        width: 300,
        generator: GeneratorSpec::mok(4, Gate::Softmax),
        context,
        bias: true,
        stop_gradient: false,
    }
}

fn field_layer(name: &str, aggregation: Aggregation, implicit: bool, context: Context) -> LayerSpec {
    LayerSpec::FieldDpo {
        name: name.into(),
        width: 64,
        aggregation,
        generator: GeneratorSpec::mok(4, Gate::Softmax),
        context,
        bias: true,
        implicit,
        stop_gradient: false,
    }
}

pub fn movielens_mlp() -> ModelSpec {
    ModelSpec::mlp(10, &[300, 300])
}

/// Both hidden layers dynamic, each generated from `x0`.
pub fn movielens_feature_dpn() -> ModelSpec {
    ModelSpec {
        family: Family::FeatureDpn,
        layers: vec![mok_feature("fc1", Context::X0), mok_feature("fc2", Context::X0)],
        ..movielens_mlp()
    }
}

/// Three field layers of width 64; the first reads `x0`, later ones the previous output.
pub fn movielens_field_dpn(aggregation: Aggregation, implicit: bool) -> ModelSpec {
    ModelSpec {
        family: Family::FieldDpn,
        embedding_dim: 10,
        layers: vec![
            field_layer("f1", aggregation, implicit, Context::X0),
            field_layer("f2", aggregation, implicit, Context::Prev),
            field_layer("f3", aggregation, implicit, Context::Prev),
        ],
        batch_norm: true,
        sequence: None,
    }
}

pub fn movielens_train_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(1e-3, 4096, 20, seed);
    cfg.precision = Precision::F32;
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{FieldSchema, FieldSpec};

    #[test]
    fn synthetic_budgets_match() {
        let schema = FieldSchema::new(vec![FieldSpec::new("user", 50), FieldSpec::new("item", 50)]).unwrap();
        let d = Model::<f64>::build(&synth_feature_dpn(), &schema, 0).unwrap().param_count();
        let m = Model::<f64>::build(&synth_feature_mlp(), &schema, 0).unwrap().param_count();
        assert_eq!((d, m), (60, 61));
    }

    #[test]
    fn movielens_specs_build() {
        let schema =
            FieldSchema::new(MOVIELENS_FIELDS.iter().map(|n| FieldSpec::new(n, 20)).collect()).unwrap();
        for spec in [
            movielens_mlp(),
            movielens_feature_dpn(),
            movielens_field_dpn(Aggregation::Summation, false),
            movielens_field_dpn(Aggregation::Concat, true),
        ] {
            Model::<f32>::build(&spec, &schema, 0).unwrap();
        }
    }
}
