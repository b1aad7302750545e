//! Refinable content-based image retrieval over precomputed embeddings.
//!
//! The corpus ([`store`]) is searched exactly ([`knn`]). A [`QueryState`]
//! composes three refinements into one query embedding: a precomputed crop of
//! the query image, the mean of pinned examples, and slider shifts along
//! concept activation vectors ([`cav`]). [`organize`] groups and clusters
//! results, and [`synth`] / [`eval`] provide planted-direction corpora and an
//! oracle-scored evaluation of each tool.

pub mod cav;
pub mod error;
pub mod eval;
pub mod knn;
pub mod organize;
pub mod refinement;
pub mod store;
pub mod synth;

pub use cav::{
    stability_curve, train_cav, train_random_cav, train_relative_cav, CavRegistry, ConceptVector,
    NegativeMode, StabilityCurve, TrainerConfig,
};
pub use error::{Error, Result};
pub use eval::{run_tool_eval, EvalConfig, EvalReport, Tool};
pub use knn::{distance, page, search, Metric, RankedResult, SearchFilter};
pub use organize::{
    cluster_subgroups, group_by_category, scatter_data, CategoryGroup, ScatterPoint, Subgroup,
};
pub use refinement::{compose_query, snap_crop, QueryState, SnappedCrop};
pub use store::{load_corpus, Corpus, CorpusHeader, ImageRecord, ImageSize, Rect, Tier};
pub use synth::{generate_corpus, oracle_presence, SyntheticCorpus, SyntheticSpec};
