//! Core library for `emu-triage`: turns binary-emulation API-call reports
//! into unified feature vectors and runs the classification, selection,
//! evaluation, and clustering stages on top of them.
//!
//! The pipeline stages map onto the modules below:
//!
//! * [`ingest`] — report schema, corpus manifest, corpus statistics
//! * [`unify`] — Win32 API name unification into canonical feature tokens
//! * [`pe_static`] — PE import-table parsing and imphash
//! * [`features`] — vocabulary and sparse count-matrix construction
//! * [`select`] — Boruta all-relevant feature selection
//! * [`ml`] — random forest, gradient-boosted trees, k-NN
//! * [`eval`] — cross-validated experiment protocols and metric reports
//! * [`cluster`] — kmeans++ family clustering with silhouette scoring
//! * [`datagen`] — deterministic synthetic corpora for desk-scale runs
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature
//! (default) is enabled and fall back to sequential iterators otherwise.

pub mod cluster;
pub mod datagen;
pub mod eval;
pub mod features;
pub mod ingest;
pub mod ml;
pub mod par;
pub mod pe_static;
pub mod rng;
pub mod select;
pub mod unify;
