//! Dynamic parameterized operations: layers whose weights are generated per
//! instance from a context tensor.

pub mod feature;
pub mod field;
pub mod generator;
pub mod hetero;
pub mod homo;

pub use feature::{FeatureDpo, FeatureDpoConfig};
pub use field::{Aggregation, FieldDpo, FieldDpoConfig};
pub use generator::{head_blocks, Block, DynWeights, Gate, Generator, GeneratorKind, GeneratorSpec, GATE_CLAMP};
pub use hetero::{HeteroDpo, HeteroDpoConfig};
pub use homo::{HomoDpo, HomoDpoConfig, LocalEncoder};
