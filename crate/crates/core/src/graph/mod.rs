//! Network description, validation, precision rewriting, memory planning,
//! execution and model storage.

pub mod net;
pub mod params;
pub mod plan;
pub mod precision;
pub mod spec;
pub mod store;
pub mod validate;

pub use net::{attach_quantizers, single_input, LayerQuantizers, Net};
pub use plan::{plan_lives, plan_memory, BlobLife, MemoryPlan};
pub use precision::apply_precision;
pub use spec::{BatchMode, Filler, GraphSpec, LayerKind, LayerSpec, MoeParam};
pub use store::{convert_param, Model};
pub use validate::{validate, ValidGraph, ValidationReport, Violation};
