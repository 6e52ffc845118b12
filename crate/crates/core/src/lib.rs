//! Retrieval-augmented autocompletion of lung-cancer tumour-board forms.
//!
//! The crate is organised along the processing path of a case:
//!
//! * [`datalake`] lands raw documents, normalises their text and cuts it into
//!   span-addressed chunks.
//! * [`embed_index`] embeds chunks through a pluggable provider and serves exact
//!   cosine top-k retrieval.
//! * [`form_model`] holds the declarative seven-block form, value validation and
//!   conditional block activation.
//! * [`generation`] builds per-block prompts from retrieved evidence, calls an
//!   interchangeable backend and parses its structured answer.
//! * [`records_store`] persists cases, form versions and the audit trail.
//! * [`evaluation`] scores completed forms against ground truth and aggregates
//!   accuracy and latency per backend.
//!
//! [`engine::Engine`] wires these together over one data-lake root.

pub mod config;
pub mod datalake;
pub mod embed_index;
pub mod engine;
pub mod evaluation;
pub mod form_model;
pub mod generation;
pub mod records_store;
pub mod text;

mod fsutil;

pub use config::RunConfig;
pub use engine::Engine;
