//! Anticipation segments, top-k metrics, the anticipation-time grid, and
//! the ablation harness.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::embedding::{build_feature_matrix, EmbeddingTable, FeatureMatrix, FeatureSource};
use crate::graph::ActivityGraph;
use crate::model::{FusionModel, GraphStreamModel};
use crate::scores::ScoreTable;
use crate::trace::{ActionAnnotation, ManipulationState, StateSequence, TraceError};
use crate::train::{
    prepare_segments, score_prepared, sequences_by_video, train_graph_stream, TrainConfig,
    TrainError, TrainInputs, UnseenPolicy,
};

/// The anticipation-time grid reported in the evaluation tables, seconds.
pub const DEFAULT_TAU_GRID: [f64; 6] = [5.0, 2.5, 1.5, 1.0, 0.5, 0.0];
/// The challenge protocol anticipates one second ahead.
pub const DEFAULT_TAU_A: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("top-k requires 1 <= k <= {classes}, got {k}")]
    InvalidK { k: usize, classes: usize },
    #[error("no segments to evaluate")]
    EmptySegments,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("appearance score file has no row for segment `{0}`")]
    MissingSegmentScore(String),
    #[error("fused evaluation requested without an appearance score table")]
    MissingAppearance,
    #[error("fused evaluation requested without a fusion checkpoint")]
    MissingFusion,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// One anticipation instance: observe `observation_seconds` of video
/// ending `anticipation_seconds` before the action starts, then predict
/// the action.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSegment {
    pub segment_id: String,
    pub video_id: String,
    pub action_start_frame: u32,
    pub anticipation_seconds: f64,
    pub observation_seconds: f64,
    pub action_id: u32,
}

/// Builds one segment per annotation. Segments whose observation window
/// would end at or before frame 0 are dropped; the second return value
/// counts them. Segment ids are stable across anticipation times.
pub fn make_segments(
    annotations: &[ActionAnnotation],
    anticipation_seconds: f64,
    observation_seconds: f64,
    fps: f64,
) -> Result<(Vec<EvalSegment>, usize), EvalError> {
    if !(anticipation_seconds >= 0.0) {
        return Err(EvalError::InvalidParam(format!(
            "anticipation_seconds must be non-negative, got {anticipation_seconds}"
        )));
    }
    if !(observation_seconds > 0.0) {
        return Err(EvalError::InvalidParam(format!(
            "observation_seconds must be positive, got {observation_seconds}"
        )));
    }
    if !(fps > 0.0) {
        return Err(EvalError::InvalidParam(format!(
            "fps must be positive, got {fps}"
        )));
    }
    // Ordinals come from a canonical per-video sort so ids do not depend
    // on input order or on the anticipation time.
    let mut by_video: BTreeMap<&str, Vec<&ActionAnnotation>> = BTreeMap::new();
    for ann in annotations {
        by_video.entry(ann.video_id.as_str()).or_default().push(ann);
    }
    let mut segments = Vec::new();
    let mut dropped = 0usize;
    for (video, mut anns) in by_video {
        anns.sort_by_key(|a| (a.start_frame, a.stop_frame, a.action_id));
        for (k, ann) in anns.iter().enumerate() {
            let end = ann.start_frame as f64 - anticipation_seconds * fps;
            if end <= 0.0 {
                dropped += 1;
                continue;
            }
            segments.push(EvalSegment {
                segment_id: format!("{video}#{k:04}"),
                video_id: video.to_string(),
                action_start_frame: ann.start_frame,
                anticipation_seconds,
                observation_seconds,
                action_id: ann.action_id,
            });
        }
    }
    Ok((segments, dropped))
}

/// Fraction of rows whose label ranks among the `k` highest scores. Ties
/// break toward the lower action id, deterministically.
pub fn topk_accuracy(scores: &[Vec<f64>], labels: &[u32], k: usize) -> Result<f64, EvalError> {
    if scores.is_empty() {
        return Err(EvalError::EmptySegments);
    }
    let classes = scores[0].len();
    if k < 1 || k > classes {
        return Err(EvalError::InvalidK { k, classes });
    }
    assert_eq!(
        scores.len(),
        labels.len(),
        "scores and labels must align: {} vs {}",
        scores.len(),
        labels.len()
    );
    let mut correct = 0usize;
    for (row, &label) in scores.iter().zip(labels) {
        let label = label as usize;
        let s_label = row[label];
        // Rank = entries strictly better, plus equal entries with a lower id.
        let rank = row
            .iter()
            .enumerate()
            .filter(|(j, &s)| s > s_label || (s == s_label && *j < label))
            .count();
        if rank < k {
            correct += 1;
        }
    }
    Ok(correct as f64 / scores.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub config: String,
    pub tau_a: f64,
    pub top1: f64,
    pub top5: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Machine-readable TSV with a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("config\ttau_a\ttop1\ttop5\tn\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{:.4}\t{:.4}\t{}\n",
                r.config, r.tau_a, r.top1, r.top5, r.n
            ));
        }
        out
    }

    /// Aligned human-readable table.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<18} {:>6} {:>8} {:>8} {:>6}\n",
            "config", "tau_a", "top1", "top5", "n"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<18} {:>6} {:>8.4} {:>8.4} {:>6}\n",
                r.config, r.tau_a, r.top1, r.top5, r.n
            ));
        }
        out
    }
}

/// Node features used at evaluation time; also defines the fallback
/// feature vector for states missing from the graph (identity features
/// have no row for unseen states, so they fall back to zeros).
pub enum FeatureKind<'a> {
    Identity,
    Table(&'a EmbeddingTable),
}

impl FeatureKind<'_> {
    pub fn fallback(
        &self,
        graph: &ActivityGraph,
        count_duplicate_nouns: bool,
    ) -> impl Fn(&ManipulationState) -> Vec<f64> + '_ {
        let vocab = graph.object_vocab().clone();
        let z = graph.node_count();
        move |state: &ManipulationState| match self {
            FeatureKind::Identity => vec![0.0; z],
            FeatureKind::Table(table) => {
                crate::embedding::state_features(state, &vocab, table, count_duplicate_nouns)
            }
        }
    }
}

/// Everything grid evaluation reads. The graph stream is always scored;
/// the appearance stream joins when a score table is supplied, and the
/// fused stream when a fusion model is also present.
pub struct GridInputs<'a> {
    pub model: &'a GraphStreamModel,
    pub fusion: Option<&'a FusionModel>,
    pub appearance: Option<&'a ScoreTable>,
    pub graph: &'a ActivityGraph,
    pub features: &'a FeatureMatrix,
    pub feature_kind: FeatureKind<'a>,
    pub sequences: &'a [StateSequence],
    pub annotations: &'a [ActionAnnotation],
    pub observation_seconds: f64,
    pub fps: f64,
    pub max_sequence_length: usize,
    pub batch_size: usize,
}

/// Scores the graph stream for a fixed segment list; used both by the
/// grid and to export score files for fusion.
pub fn graph_stream_scores(
    model: &GraphStreamModel,
    graph: &ActivityGraph,
    features: &FeatureMatrix,
    sequences: &[StateSequence],
    segments: &[EvalSegment],
    feature_kind: &FeatureKind<'_>,
    fps: f64,
    max_sequence_length: usize,
    batch_size: usize,
) -> Result<ScoreTable, EvalError> {
    let seqs = sequences_by_video(sequences);
    let fallback = feature_kind.fallback(graph, false);
    let prepared = prepare_segments(
        graph,
        &seqs,
        segments,
        max_sequence_length,
        fps,
        &UnseenPolicy::Fallback(&fallback),
    )?;
    let adjacency = {
        let adj = crate::graph::normalize_adjacency(graph);
        crate::autodiff::Tensor::matrix(adj.size(), adj.size(), adj.to_dense())
    };
    let x = crate::autodiff::Tensor::matrix(features.rows, features.cols, features.data.clone());
    let rows = score_prepared(model, &adjacency, &x, &prepared, batch_size);
    let mut table = ScoreTable::new(model.config.action_count);
    for (seg, row) in segments.iter().zip(rows) {
        table.insert(&seg.segment_id, row);
    }
    Ok(table)
}

fn stream_rows(
    name: &str,
    tau_a: f64,
    scores: &[Vec<f64>],
    labels: &[u32],
) -> Result<EvalRow, EvalError> {
    let classes = scores.first().map(|r| r.len()).unwrap_or(1);
    Ok(EvalRow {
        config: name.to_string(),
        tau_a,
        top1: topk_accuracy(scores, labels, 1)?,
        top5: topk_accuracy(scores, labels, 5.min(classes))?,
        n: scores.len(),
    })
}

/// Evaluates every configured stream at each anticipation time in `grid`,
/// recomputing observation windows per time.
pub fn evaluate_grid(inputs: &GridInputs<'_>, grid: &[f64]) -> Result<EvalReport, EvalError> {
    if inputs.fusion.is_some() && inputs.appearance.is_none() {
        return Err(EvalError::MissingAppearance);
    }
    let mut report = EvalReport::default();
    for &tau_a in grid {
        let (segments, _) =
            make_segments(inputs.annotations, tau_a, inputs.observation_seconds, inputs.fps)?;
        if segments.is_empty() {
            return Err(EvalError::EmptySegments);
        }
        let labels: Vec<u32> = segments.iter().map(|s| s.action_id).collect();
        let graph_table = graph_stream_scores(
            inputs.model,
            inputs.graph,
            inputs.features,
            inputs.sequences,
            &segments,
            &inputs.feature_kind,
            inputs.fps,
            inputs.max_sequence_length,
            inputs.batch_size,
        )?;
        let graph_rows: Vec<Vec<f64>> = segments
            .iter()
            .map(|s| graph_table.get(&s.segment_id).expect("just inserted").to_vec())
            .collect();
        report
            .rows
            .push(stream_rows("graph", tau_a, &graph_rows, &labels)?);

        if let Some(appearance) = inputs.appearance {
            let mut appearance_rows = Vec::with_capacity(segments.len());
            for seg in &segments {
                let row = appearance
                    .get(&seg.segment_id)
                    .ok_or_else(|| EvalError::MissingSegmentScore(seg.segment_id.clone()))?;
                appearance_rows.push(row.to_vec());
            }
            report
                .rows
                .push(stream_rows("appearance", tau_a, &appearance_rows, &labels)?);

            if let Some(fusion) = inputs.fusion {
                let fused_rows: Vec<Vec<f64>> = graph_rows
                    .iter()
                    .zip(&appearance_rows)
                    .map(|(g, a)| fusion.fuse_scores(g, a))
                    .collect();
                report
                    .rows
                    .push(stream_rows("fused", tau_a, &fused_rows, &labels)?);
            }
        }
    }
    Ok(report)
}

/// Inputs for the ablation grid: the harness trains each configuration
/// itself, so it takes raw training material rather than a checkpoint.
pub struct AblationInputs<'a> {
    pub base_config: &'a TrainConfig,
    pub graph: &'a ActivityGraph,
    pub embeddings: &'a EmbeddingTable,
    pub sequences: &'a [StateSequence],
    pub train_segments: &'a [EvalSegment],
    pub val_segments: &'a [EvalSegment],
    pub test_segments: &'a [EvalSegment],
    pub tau_a: f64,
    pub fps: f64,
}

/// The seven ablation rows: three history aggregations (GCN + word
/// embeddings underneath), then the 2x2 grid of {embedding, identity}
/// features by {GCN, no GCN} with LSTM aggregation. Identical
/// configurations train once and share the result.
pub fn run_ablations(inputs: &AblationInputs<'_>) -> Result<EvalReport, EvalError> {
    use crate::model::Aggregation;

    let feature_embedding = build_feature_matrix(
        inputs.graph,
        FeatureSource::Embeddings(inputs.embeddings),
        false,
    );
    let feature_identity = build_feature_matrix(inputs.graph, FeatureSource::Identity, false);

    struct Case {
        name: &'static str,
        aggregation: Aggregation,
        use_gcn: bool,
        identity: bool,
    }
    let cases = [
        Case { name: "lstm-aggr", aggregation: Aggregation::Lstm, use_gcn: true, identity: false },
        Case { name: "term-state-class", aggregation: Aggregation::Terminal, use_gcn: true, identity: false },
        Case { name: "mean-aggr", aggregation: Aggregation::Mean, use_gcn: true, identity: false },
        Case { name: "embed:gcn", aggregation: Aggregation::Lstm, use_gcn: true, identity: false },
        Case { name: "embed:no-gcn", aggregation: Aggregation::Lstm, use_gcn: false, identity: false },
        Case { name: "identity:gcn", aggregation: Aggregation::Lstm, use_gcn: true, identity: true },
        Case { name: "identity:no-gcn", aggregation: Aggregation::Lstm, use_gcn: false, identity: true },
    ];

    let seqs = sequences_by_video(inputs.sequences);
    let test_labels: Vec<u32> = inputs.test_segments.iter().map(|s| s.action_id).collect();

    let mut cache: BTreeMap<(&'static str, bool, bool), (f64, f64, usize)> = BTreeMap::new();
    let mut report = EvalReport::default();
    for case in &cases {
        let key = (case.aggregation.as_str(), case.use_gcn, case.identity);
        let (top1, top5, n) = match cache.get(&key) {
            Some(hit) => *hit,
            None => {
                let features = if case.identity {
                    &feature_identity
                } else {
                    &feature_embedding
                };
                let config = TrainConfig {
                    aggregation: case.aggregation,
                    use_gcn: case.use_gcn,
                    ..*inputs.base_config
                };
                let outcome = train_graph_stream(
                    &config,
                    &TrainInputs {
                        graph: inputs.graph,
                        features,
                        sequences: &seqs,
                        train_segments: inputs.train_segments,
                        val_segments: inputs.val_segments,
                        fps: inputs.fps,
                    },
                )?;
                let feature_kind = if case.identity {
                    FeatureKind::Identity
                } else {
                    FeatureKind::Table(inputs.embeddings)
                };
                let table = graph_stream_scores(
                    &outcome.model,
                    inputs.graph,
                    features,
                    inputs.sequences,
                    inputs.test_segments,
                    &feature_kind,
                    inputs.fps,
                    config.max_sequence_length,
                    config.batch_size.max(16),
                )?;
                let rows: Vec<Vec<f64>> = inputs
                    .test_segments
                    .iter()
                    .map(|s| table.get(&s.segment_id).expect("scored above").to_vec())
                    .collect();
                let classes = inputs.graph.action_count();
                let top1 = topk_accuracy(&rows, &test_labels, 1)?;
                let top5 = topk_accuracy(&rows, &test_labels, 5.min(classes))?;
                let entry = (top1, top5, rows.len());
                cache.insert(key, entry);
                entry
            }
        };
        report.rows.push(EvalRow {
            config: case.name.to_string(),
            tau_a: inputs.tau_a,
            top1,
            top5,
            n,
        });
    }
    Ok(report)
}
