//! Template-driven synthetic instruction data pipeline.
//!
//! Expert-curated templates are filled from an affordance ontology to produce
//! seed and evaluation questions; seeds prompt a chat model for synthetic
//! variants, which a ROUGE-L gate deduplicates per template. The resulting
//! dataset is split for fine-tuning, and an embedding-cosine harness grades
//! models on the evaluation set per knowledge category.

pub mod analysis;
pub mod dataset;
pub mod evalharness;
pub mod genloop;
pub mod ontology;
pub mod providers;
pub mod record;
pub mod rng;
pub mod templating;
pub mod textsim;

pub use record::{Category, InstructionRecord, Provenance};
