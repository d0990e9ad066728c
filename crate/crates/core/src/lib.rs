//! Search over executable ICD-10 coding workflows.
//!
//! Workflows are typed DAGs over a component library ([`workflow`]). They
//! run the coding operators in [`ops`] against clinical notes, are scored by
//! [`eval`] (micro-F1, guideline compliance, cost), and are improved by a
//! designer/coder/reflector loop ([`agents`], [`search`]) that reads from and
//! appends to a memory [`archive`]. Model calls go through [`llm`].

pub mod taxonomy;
pub mod text;
pub mod llm;
pub mod workflow;
pub mod prompts;
pub mod ops;
pub mod eval;
pub mod archive;
pub mod agents;
pub mod seeds;
pub mod search;
