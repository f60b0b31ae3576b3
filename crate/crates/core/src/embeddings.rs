//! Field schemas, ID hashing and embedding lookups.

use std::collections::HashSet;

use dpn_tensor::{Float, Graph, ParamId, Var};
use serde::{Deserialize, Serialize};

use crate::builder::Builder;
use crate::error::{DpnError, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Bucket of a raw categorical value: FNV-1a 64 of its UTF-8 bytes, mod `buckets`.
pub fn hash_id(raw: &str, buckets: usize) -> usize {
    assert!(buckets >= 1, "hash_id needs at least one bucket");
    (fnv1a64(raw.as_bytes()) % buckets as u64) as usize
}

/// Integer keys hash through their decimal form, so `7` and `"7"` agree.
pub fn hash_int(raw: i64, buckets: usize) -> usize {
    hash_id(&raw.to_string(), buckets)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub vocab_size: usize,
    #[serde(default)]
    pub hashed: bool,
    /// Numeric column, bucketized before lookup.
    #[serde(default)]
    pub numeric: bool,
}

impl FieldSpec {
    pub fn new(name: &str, vocab_size: usize) -> Self {
        Self { name: name.to_string(), vocab_size, hashed: false, numeric: false }
    }

    pub fn hashed(name: &str, buckets: usize) -> Self {
        Self { hashed: true, ..Self::new(name, buckets) }
    }
}

/// Ordered categorical fields of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSchema {
    pub fields: Vec<FieldSpec>,
}

impl FieldSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        let s = Self { fields };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.fields {
            if !seen.insert(f.name.as_str()) {
                return Err(DpnError::config(format!("duplicate field name `{}`", f.name)));
            }
            if f.vocab_size == 0 {
                return Err(DpnError::config(format!("field `{}` has an empty vocabulary", f.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.fields
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| DpnError::config(format!("field `{name}` not in schema")))
    }

    pub fn names(&self) -> Vec<&str> {
        self.fields.iter().map(|f| f.name.as_str()).collect()
    }
}

/// One field's lookup table.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub field: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub param: ParamId,
}

impl EmbeddingTable {
    pub fn new<T: Float>(b: &mut Builder<'_, T>, field: &str, vocab_size: usize, dim: usize) -> Result<Self> {
        let param = b.embedding(field, vocab_size, dim)?;
        Ok(Self { field: field.to_string(), vocab_size, dim, param })
    }

    /// Rows for `ids`; output `[ids.len(), dim]`.
    pub fn lookup<T: Float>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        Ok(g.gather(self.param, ids, &[ids.len()], &self.field)?)
    }

    /// Rows for a `[batch, len]` id grid; output `[batch, len, dim]`.
    pub fn lookup_grid<T: Float>(&self, g: &mut Graph<'_, T>, ids: &[usize], batch: usize) -> Result<Var> {
        if batch == 0 || !ids.len().is_multiple_of(batch) {
            return Err(DpnError::Data(format!("id grid of {} entries is not divisible by batch {batch}", ids.len())));
        }
        Ok(g.gather(self.param, ids, &[batch, ids.len() / batch], &self.field)?)
    }
}

/// Per-field lookups joined into model inputs.
#[derive(Debug, Clone, Copy)]
pub struct FieldEmbeddings {
    /// `[batch, sum of dims]`, fields in schema order.
    pub flat: Var,
    /// `[batch, fields, dim]` when every field shares one dim.
    pub stacked: Option<Var>,
}

pub fn concat_fields<T: Float>(g: &mut Graph<'_, T>, lookups: &[Var]) -> Result<FieldEmbeddings> {
    let first = *lookups.first().ok_or_else(|| DpnError::config("no fields to concatenate"))?;
    let batch = g.shape(first)[0];
    for &v in lookups {
        let s = g.shape(v);
        if s.len() != 2 || s[0] != batch {
            return Err(DpnError::Data(format!(
                "field lookup of shape {:?} does not match batch {batch}",
                s
            )));
        }
    }
    let flat = if lookups.len() == 1 { first } else { g.concat(lookups, 1)? };
    let dim = g.shape(first)[1];
    let stacked = if lookups.iter().all(|&v| g.shape(v)[1] == dim) {
        Some(g.reshape(flat, &[batch, lookups.len(), dim])?)
    } else {
        None
    };
    Ok(FieldEmbeddings { flat, stacked })
}
