//! Graph-stream action anticipation from egocentric hand-object contact
//! traces.
//!
//! The pipeline turns per-frame contact/anticipation detections into
//! deduplicated manipulation-state sequences, consolidates them into a
//! probability-weighted state/action graph, embeds the graph with a small
//! GCN, aggregates observed state histories with an LSTM, and classifies
//! the upcoming action. A late-fusion head combines the graph stream with
//! an external appearance stream supplied as softmax-score files.
//!
//! Everything is plain-CPU `f64` and deterministic: a fixed seed yields
//! bit-identical graphs, checkpoints, and reports.

pub mod autodiff;
pub mod checkpoint;
pub mod embedding;
pub mod eval;
pub mod graph;
pub mod model;
pub mod scores;
pub mod synth;
pub mod trace;
pub mod train;

pub use graph::{ActivityGraph, RowStochasticMatrix};
pub use trace::{
    ActionAnnotation, ActionVocab, ContactRecord, ContactStream, DetectionRecord,
    DetectionStream, ManipulationState, ObjectId, ObjectVocab, StateItem, StateSequence,
};
