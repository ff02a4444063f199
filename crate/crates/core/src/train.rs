//! Optimizers and training loops for the graph stream and the fusion head.
//!
//! Training is deterministic: one seeded generator drives initialization
//! and shuffling, batches process sequences left-padded with a freeze mask
//! (so batched losses equal per-sample losses), and checkpoints serialize
//! bit-identically for identical configs and seeds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::checkpoint::Checkpoint;
use crate::embedding::FeatureMatrix;
use crate::eval::{topk_accuracy, EvalSegment};
use crate::graph::{normalize_adjacency, ActivityGraph, NodeKind};
use crate::model::{
    fuse, lstm_cell, node_embeddings, score_sequence, Aggregation, BoundModel, FusionModel,
    GraphStreamModel, SeqElem, StreamConfig,
};
use crate::scores::{ScoreError, ScoreTable};
use crate::trace::{window_states, ManipulationState, StateSequence, TraceError};

pub const DEFAULT_LEARNING_RATE: f64 = 7e-5;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_FUSION_LEARNING_RATE: f64 = 0.01;
pub const DEFAULT_MAX_SEQUENCE_LENGTH: usize = 128;
pub const DEFAULT_PATIENCE: usize = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("non-finite loss at epoch {epoch}, batch {batch}; aborting")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient for parameter `{name}`; aborting")]
    NonFiniteGradient { name: String },
    #[error("segment references video `{0}` with no state sequence")]
    UnknownVideo(String),
    #[error("segment observes state {0:?} that is not a graph node")]
    StateNotInGraph(ManipulationState),
    #[error("score tables disagree on class counts: {0} vs {1}")]
    ClassCountMismatch(usize, usize),
    #[error("no label for segment `{0}`")]
    MissingLabel(String),
    #[error("no score row for segment `{0}`")]
    MissingScore(String),
    #[error(transparent)]
    Scores(#[from] ScoreError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrainMode {
    #[default]
    Joint,
    TwoStage,
}

impl TrainMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::Joint => "joint",
            TrainMode::TwoStage => "two_stage",
        }
    }
}

/// Hyperparameters for one training run. Defaults follow the graph
/// stream's published settings (Adam at 7e-5, batch 16; fusion head at
/// 0.01); desk-scale callers usually raise the rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub aggregation: Aggregation,
    pub use_gcn: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub max_sequence_length: usize,
    pub fusion_learning_rate: f64,
    pub two_stage_gcn_epochs: usize,
    pub gcn_hidden: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Joint,
            aggregation: Aggregation::Lstm,
            use_gcn: true,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            max_epochs: 50,
            patience: DEFAULT_PATIENCE,
            seed: 0,
            max_sequence_length: DEFAULT_MAX_SEQUENCE_LENGTH,
            fusion_learning_rate: DEFAULT_FUSION_LEARNING_RATE,
            two_stage_gcn_epochs: 5,
            gcn_hidden: crate::model::DEFAULT_GCN_HIDDEN,
            embed_dim: crate::model::DEFAULT_EMBED_DIM,
            lstm_hidden: crate::model::DEFAULT_LSTM_HIDDEN,
        }
    }
}

impl TrainConfig {
    pub fn stream_config(&self, feature_dim: usize, action_count: usize) -> StreamConfig {
        StreamConfig {
            feature_dim,
            gcn_hidden: self.gcn_hidden,
            embed_dim: self.embed_dim,
            lstm_hidden: self.lstm_hidden,
            action_count,
            use_gcn: self.use_gcn,
            aggregation: self.aggregation,
        }
    }
}

/// Adam with bias correction. Moment buffers are allocated lazily on the
/// first step and keyed by position, so callers must pass parameters in a
/// stable order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies one update. `grads[i]` of `None` means the parameter
    /// received no gradient this step and is treated as zero.
    pub fn step(
        &mut self,
        params: &mut [(&'static str, &mut Tensor)],
        grads: &[Option<Tensor>],
    ) -> Result<(), TrainError> {
        assert_eq!(params.len(), grads.len(), "params/grads length mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (name, param)) in params.iter_mut().enumerate() {
            let zero;
            let grad = match &grads[i] {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; param.len()];
                    &zero
                }
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteGradient {
                    name: name.to_string(),
                });
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// One step of an observed sequence: a graph node, or the designated null
/// state standing in for an empty observation window (zero features, zero
/// embedding).
#[derive(Debug, Clone)]
pub enum SeqStep {
    Node(usize),
    Null,
    Unseen(Vec<f64>),
}

/// One segment prepared for the network: label plus the oldest-to-newest
/// steps, truncated to the most recent `max_sequence_length`.
#[derive(Debug, Clone)]
pub struct SegmentData {
    pub segment_id: String,
    pub label: usize,
    pub steps: Vec<SeqStep>,
}

/// How to embed states that are not graph nodes.
pub enum UnseenPolicy<'a> {
    /// Fail; training data is transductive so every state must be a node.
    Error,
    /// Embed from raw features computed by the callback.
    Fallback(&'a dyn Fn(&ManipulationState) -> Vec<f64>),
}

pub fn sequences_by_video(sequences: &[StateSequence]) -> BTreeMap<String, &StateSequence> {
    sequences.iter().map(|s| (s.video_id.clone(), s)).collect()
}

/// Resolves each segment's observation window to graph node steps.
pub fn prepare_segments(
    graph: &ActivityGraph,
    sequences: &BTreeMap<String, &StateSequence>,
    segments: &[EvalSegment],
    max_sequence_length: usize,
    fps: f64,
    unseen: &UnseenPolicy<'_>,
) -> Result<Vec<SegmentData>, TrainError> {
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments {
        let seq = sequences
            .get(seg.video_id.as_str())
            .ok_or_else(|| TrainError::UnknownVideo(seg.video_id.clone()))?;
        let items = window_states(
            seq,
            seg.action_start_frame,
            seg.anticipation_seconds,
            seg.observation_seconds,
            fps,
        )?;
        let mut steps = Vec::with_capacity(items.len());
        for item in &items {
            match graph.state_node(&item.state) {
                Some(node) => steps.push(SeqStep::Node(node)),
                None => match unseen {
                    UnseenPolicy::Error => {
                        return Err(TrainError::StateNotInGraph(item.state));
                    }
                    UnseenPolicy::Fallback(f) => steps.push(SeqStep::Unseen(f(&item.state))),
                },
            }
        }
        if steps.is_empty() {
            steps.push(SeqStep::Null);
        }
        if steps.len() > max_sequence_length {
            steps.drain(..steps.len() - max_sequence_length);
        }
        out.push(SegmentData {
            segment_id: seg.segment_id.clone(),
            label: seg.action_id as usize,
            steps,
        });
    }
    Ok(out)
}

fn has_unseen(batch: &[&SegmentData]) -> bool {
    batch
        .iter()
        .any(|s| s.steps.iter().any(|e| matches!(e, SeqStep::Unseen(_))))
}

/// Batched forward producing `[batch x actions]` softmax scores.
/// Sequences are left-padded to a common length; padded steps carry a
/// zeroed input and a freeze mask so each row computes exactly what the
/// unbatched path computes.
fn batch_scores(tape: &mut Tape, model: &BoundModel, embeddings: TensorId, batch: &[&SegmentData]) -> TensorId {
    let b = batch.len();
    let t_max = batch.iter().map(|s| s.steps.len()).max().expect("nonempty batch");
    let hidden = model.config.lstm_hidden;

    let mut step_inputs: Vec<TensorId> = Vec::with_capacity(t_max);
    let mut step_masks: Vec<(Tensor, Tensor)> = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let mut indices = Vec::with_capacity(b);
        let mut input_scale = Vec::with_capacity(b);
        let mut mask = Vec::with_capacity(b);
        for seg in batch {
            let pad = t_max - seg.steps.len();
            if t < pad {
                indices.push(0);
                input_scale.push(0.0);
                mask.push(0.0);
            } else {
                match &seg.steps[t - pad] {
                    SeqStep::Node(n) => {
                        indices.push(*n);
                        input_scale.push(1.0);
                        mask.push(1.0);
                    }
                    SeqStep::Null => {
                        indices.push(0);
                        input_scale.push(0.0);
                        mask.push(1.0);
                    }
                    SeqStep::Unseen(_) => {
                        unreachable!("batched path rejects unseen states; see score_segments")
                    }
                }
            }
        }
        let gathered = tape.gather_rows(embeddings, &indices);
        let scale = tape.leaf(Tensor::vector(input_scale));
        step_inputs.push(tape.scale_rows(gathered, scale));
        let inv_mask: Vec<f64> = mask.iter().map(|m| 1.0 - m).collect();
        step_masks.push((Tensor::vector(mask), Tensor::vector(inv_mask)));
    }

    let aggregated = match model.config.aggregation {
        Aggregation::Terminal => *step_inputs.last().expect("nonempty sequence"),
        Aggregation::Mean => {
            let mut acc = step_inputs[0];
            for x in &step_inputs[1..] {
                acc = tape.add(acc, *x);
            }
            let inv_len: Vec<f64> = batch.iter().map(|s| 1.0 / s.steps.len() as f64).collect();
            let inv_len = tape.leaf(Tensor::vector(inv_len));
            tape.scale_rows(acc, inv_len)
        }
        Aggregation::Lstm => {
            let ids = model.lstm.as_ref().expect("lstm aggregation has parameters");
            let mut h = tape.leaf(Tensor::matrix(b, hidden, vec![0.0; b * hidden]));
            let mut c = tape.leaf(Tensor::matrix(b, hidden, vec![0.0; b * hidden]));
            for (x, (mask, inv_mask)) in step_inputs.iter().zip(&step_masks) {
                let (h_new, c_new) = lstm_cell(tape, ids, *x, h, c);
                let m = tape.leaf(mask.clone());
                let im = tape.leaf(inv_mask.clone());
                let h_keep = tape.scale_rows(h, im);
                let h_step = tape.scale_rows(h_new, m);
                h = tape.add(h_step, h_keep);
                let c_keep = tape.scale_rows(c, im);
                let c_step = tape.scale_rows(c_new, m);
                c = tape.add(c_step, c_keep);
            }
            h
        }
    };
    let logits = tape.matmul(aggregated, model.head.0);
    let logits = tape.add_row_broadcast(logits, model.head.1);
    tape.softmax_rows(logits)
}

fn null_features(dim: usize) -> Vec<f64> {
    vec![0.0; dim]
}

/// Softmax scores for each segment, aligned with `segments`. Uses the
/// batched path when possible and the per-sample path when unseen states
/// force feature fallbacks.
pub fn score_prepared(
    model: &GraphStreamModel,
    adjacency: &Tensor,
    features: &Tensor,
    segments: &[SegmentData],
    batch_size: usize,
) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(batch_size.max(1)) {
        let batch: Vec<&SegmentData> = chunk.iter().collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let adj = tape.leaf(adjacency.clone());
        let x = tape.leaf(features.clone());
        let emb = node_embeddings(&mut tape, &bound, adj, x);
        if has_unseen(&batch) {
            for seg in &batch {
                let elems: Vec<SeqElem> = seg
                    .steps
                    .iter()
                    .map(|s| match s {
                        SeqStep::Node(n) => SeqElem::Node(*n),
                        SeqStep::Null => {
                            SeqElem::Unseen(null_features(model.config.feature_dim))
                        }
                        SeqStep::Unseen(f) => SeqElem::Unseen(f.clone()),
                    })
                    .collect();
                let probs = score_sequence(&mut tape, &bound, emb, &elems);
                out.push(tape.value(probs).data().to_vec());
            }
        } else {
            let probs = batch_scores(&mut tape, &bound, emb, &batch);
            let data = tape.value(probs).data();
            let cols = model.config.action_count;
            for r in 0..batch.len() {
                out.push(data[r * cols..(r + 1) * cols].to_vec());
            }
        }
    }
    out
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GraphStreamModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_top1: f64,
}

impl TrainOutcome {
    /// `epoch<TAB>train_loss<TAB>val_top1<TAB>val_top5`, one line per epoch.
    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for s in &self.history {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.4}\t{:.4}\n",
                s.epoch, s.train_loss, s.val_top1, s.val_top5
            ));
        }
        out
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.set_meta("mode", config.mode.as_str());
        ckpt.set_meta("seed", config.seed);
        ckpt.set_meta("learning_rate", format!("{:e}", config.learning_rate));
        ckpt.set_meta("batch_size", config.batch_size);
        ckpt.set_meta("max_sequence_length", config.max_sequence_length);
        ckpt.set_meta("epoch", self.best_epoch);
        ckpt.set_meta("val_top1", format!("{:.6}", self.best_val_top1));
        for s in &self.history {
            ckpt.set_meta(
                &format!("history_{:04}", s.epoch),
                format!("{:.6} {:.4} {:.4}", s.train_loss, s.val_top1, s.val_top5),
            );
        }
        ckpt
    }
}

/// Everything a graph-stream training run reads.
pub struct TrainInputs<'a> {
    pub graph: &'a ActivityGraph,
    pub features: &'a FeatureMatrix,
    pub sequences: &'a BTreeMap<String, &'a StateSequence>,
    pub train_segments: &'a [EvalSegment],
    pub val_segments: &'a [EvalSegment],
    pub fps: f64,
}

fn feature_tensor(features: &FeatureMatrix) -> Tensor {
    Tensor::matrix(features.rows, features.cols, features.data.clone())
}

fn adjacency_tensor(graph: &ActivityGraph) -> Tensor {
    let adj = normalize_adjacency(graph);
    Tensor::matrix(adj.size(), adj.size(), adj.to_dense())
}

fn topk_for(scores: &[Vec<f64>], labels: &[u32], k: usize) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let classes = scores[0].len();
    topk_accuracy(scores, labels, k.min(classes)).expect("k clamped to class count")
}

/// Trains GCN + aggregator + head on anticipation cross-entropy. Joint
/// mode optimizes everything end to end; two-stage mode first fits the GCN
/// to each state node's action distribution (through a throwaway linear
/// probe), freezes it, then trains the rest. Early-stops on validation
/// top-1 and returns the best checkpoint.
pub fn train_graph_stream(
    config: &TrainConfig,
    inputs: &TrainInputs<'_>,
) -> Result<TrainOutcome, TrainError> {
    if inputs.train_segments.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let action_count = inputs.graph.action_count();
    let stream_config = config.stream_config(inputs.features.cols, action_count);
    let mut model = GraphStreamModel::init(stream_config, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));

    let train = prepare_segments(
        inputs.graph,
        inputs.sequences,
        inputs.train_segments,
        config.max_sequence_length,
        inputs.fps,
        &UnseenPolicy::Error,
    )?;
    let val = prepare_segments(
        inputs.graph,
        inputs.sequences,
        inputs.val_segments,
        config.max_sequence_length,
        inputs.fps,
        &UnseenPolicy::Error,
    )?;
    let val_labels: Vec<u32> = val.iter().map(|s| s.label as u32).collect();

    let adjacency = adjacency_tensor(inputs.graph);
    let features = feature_tensor(inputs.features);

    let mut frozen_gcn = false;
    if config.mode == TrainMode::TwoStage && stream_config.use_gcn {
        pretrain_gcn(config, inputs.graph, &adjacency, &features, &mut model, &mut rng)?;
        frozen_gcn = true;
    }

    let mut adam = Adam::new(config.learning_rate);
    let mut best: Option<(GraphStreamModel, usize, f64)> = None;
    let mut history = Vec::new();
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&SegmentData> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let adj = tape.leaf(adjacency.clone());
            let x = tape.leaf(features.clone());
            let emb = node_embeddings(&mut tape, &bound, adj, x);
            let probs = batch_scores(&mut tape, &bound, emb, &batch);
            let losses = tape.cross_entropy_rows(probs, &labels);
            let loss = tape.mean_all(losses);
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            loss_sum += loss_value * batch.len() as f64;
            seen += batch.len();
            tape.backward(loss).expect("scalar loss on a fresh tape");

            let bound_ids = bound_param_ids(&bound);
            let grads: Vec<Option<Tensor>> = bound_ids
                .iter()
                .map(|(_, id)| tape.grad(*id).cloned())
                .collect();
            let params = model.params_mut();
            let (params, grads) = if frozen_gcn {
                let filtered: Vec<usize> = (0..params.len())
                    .filter(|&i| !params[i].0.starts_with("gcn."))
                    .collect();
                let grads: Vec<Option<Tensor>> =
                    filtered.iter().map(|&i| grads[i].clone()).collect();
                let mut kept: Vec<(&'static str, &mut Tensor)> = Vec::new();
                for (i, p) in params.into_iter().enumerate() {
                    if filtered.contains(&i) {
                        kept.push(p);
                    }
                }
                (kept, grads)
            } else {
                (params, grads)
            };
            let mut params = params;
            adam.step(&mut params, &grads)?;
        }
        let train_loss = loss_sum / seen as f64;

        let val_scores = score_prepared(&model, &adjacency, &features, &val, 64);
        let val_top1 = topk_for(&val_scores, &val_labels, 1);
        let val_top5 = topk_for(&val_scores, &val_labels, 5);
        history.push(EpochStats {
            epoch,
            train_loss,
            val_top1,
            val_top5,
        });

        let improved = best.as_ref().map_or(true, |(_, _, b)| val_top1 > *b);
        if improved {
            best = Some((model.clone(), epoch, val_top1));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_model, best_epoch, best_val) = best.unwrap_or((model, 0, 0.0));
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        best_val_top1: best_val,
    })
}

fn bound_param_ids(bound: &BoundModel) -> Vec<(&'static str, TensorId)> {
    let mut out = Vec::new();
    if let Some((w1, w2)) = bound.gcn {
        out.push(("gcn.w1", w1));
        out.push(("gcn.w2", w2));
    }
    if let Some(p) = bound.projection {
        out.push(("projection.w", p));
    }
    if let Some(l) = &bound.lstm {
        out.push(("lstm.wi", l.wi));
        out.push(("lstm.ui", l.ui));
        out.push(("lstm.bi", l.bi));
        out.push(("lstm.wf", l.wf));
        out.push(("lstm.uf", l.uf));
        out.push(("lstm.bf", l.bf));
        out.push(("lstm.wo", l.wo));
        out.push(("lstm.uo", l.uo));
        out.push(("lstm.bo", l.bo));
        out.push(("lstm.wg", l.wg));
        out.push(("lstm.ug", l.ug));
        out.push(("lstm.bg", l.bg));
    }
    out.push(("head.w", bound.head.0));
    out.push(("head.b", bound.head.1));
    out
}

/// Stage one of two-stage training: fit the GCN so each state node's
/// probe-softmax matches its action-edge distribution, then discard the
/// probe.
fn pretrain_gcn(
    config: &TrainConfig,
    graph: &ActivityGraph,
    adjacency: &Tensor,
    features: &Tensor,
    model: &mut GraphStreamModel,
    rng: &mut ChaCha8Rng,
) -> Result<(), TrainError> {
    let action_count = graph.action_count();
    let state_count = graph.state_count();
    // State nodes with at least one action edge, with their target rows.
    let mut nodes: Vec<usize> = Vec::new();
    let mut targets: Vec<Vec<f64>> = Vec::new();
    for node in 0..state_count {
        let mut row = vec![0.0; action_count];
        let mut any = false;
        for (&(src, dst), &w) in graph.edges() {
            if src == node && graph.node_kind(dst) == NodeKind::Action {
                row[dst - state_count] = w;
                any = true;
            }
        }
        if any {
            nodes.push(node);
            targets.push(row);
        }
    }
    if nodes.is_empty() {
        return Ok(());
    }

    let embed_dim = model.config.embed_dim;
    let bound_seed = config.seed.wrapping_add(2);
    let mut probe_rng = ChaCha8Rng::seed_from_u64(bound_seed);
    let bound_probe = (1.0 / embed_dim as f64).sqrt();
    use rand::Rng as _;
    let mut probe_w = Tensor::matrix(
        embed_dim,
        action_count,
        (0..embed_dim * action_count)
            .map(|_| probe_rng.gen_range(-bound_probe..=bound_probe))
            .collect(),
    );
    let mut probe_b = Tensor::vector(vec![0.0; action_count]);

    let mut adam = Adam::new(config.learning_rate);
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    for _ in 0..config.two_stage_gcn_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let idx: Vec<usize> = chunk.iter().map(|&i| nodes[i]).collect();
            let mut target_rows = Vec::with_capacity(chunk.len() * action_count);
            for &i in chunk {
                target_rows.extend_from_slice(&targets[i]);
            }

            let mut tape = Tape::new();
            let gcn = model.gcn.as_ref().expect("two-stage pretraining requires a GCN");
            let w1 = tape.leaf(gcn.w1.clone());
            let w2 = tape.leaf(gcn.w2.clone());
            let adj = tape.leaf(adjacency.clone());
            let x = tape.leaf(features.clone());
            let emb = crate::model::gcn_forward(&mut tape, adj, x, w1, w2);
            let rows = tape.gather_rows(emb, &idx);
            let pw = tape.leaf(probe_w.clone());
            let pb = tape.leaf(probe_b.clone());
            let logits = tape.matmul(rows, pw);
            let logits = tape.add_row_broadcast(logits, pb);
            let probs = tape.softmax_rows(logits);
            let losses = tape.soft_cross_entropy_rows(probs, &target_rows);
            let loss = tape.mean_all(losses);
            if !tape.value(loss).item().is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch: 0, batch: 0 });
            }
            tape.backward(loss).expect("scalar loss on a fresh tape");

            let grads = vec![
                tape.grad(w1).cloned(),
                tape.grad(w2).cloned(),
                tape.grad(pw).cloned(),
                tape.grad(pb).cloned(),
            ];
            let gcn = model.gcn.as_mut().expect("two-stage pretraining requires a GCN");
            let mut params: Vec<(&'static str, &mut Tensor)> = vec![
                ("gcn.w1", &mut gcn.w1),
                ("gcn.w2", &mut gcn.w2),
                ("probe.w", &mut probe_w),
                ("probe.b", &mut probe_b),
            ];
            adam.step(&mut params, &grads)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct FusionOutcome {
    pub model: FusionModel,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_top1: f64,
}

impl FusionOutcome {
    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for s in &self.history {
            out.push_str(&format!(
                "{}\t{:.6}\t{:.4}\t{:.4}\n",
                s.epoch, s.train_loss, s.val_top1, s.val_top5
            ));
        }
        out
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.set_meta("seed", config.seed);
        ckpt.set_meta(
            "learning_rate",
            format!("{:e}", config.fusion_learning_rate),
        );
        ckpt.set_meta("epoch", self.best_epoch);
        ckpt.set_meta("val_top1", format!("{:.6}", self.best_val_top1));
        ckpt
    }
}

/// Trains the fusion head on frozen stream scores. Only `W_f` updates; the
/// inputs are the two streams' L2-normalized softmax scores concatenated.
/// With `max_epochs == 0` the zero-initialized head (uniform output) is
/// returned untouched.
pub fn train_fusion(
    config: &TrainConfig,
    graph_scores: &ScoreTable,
    appearance_scores: &ScoreTable,
    labels: &BTreeMap<String, u32>,
    train_ids: &[String],
    val_ids: &[String],
) -> Result<FusionOutcome, TrainError> {
    graph_scores.check_same_segments(appearance_scores)?;
    if graph_scores.class_count != appearance_scores.class_count {
        return Err(TrainError::ClassCountMismatch(
            graph_scores.class_count,
            appearance_scores.class_count,
        ));
    }
    if train_ids.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let action_count = graph_scores.class_count;

    let fetch = |id: &String| -> Result<(Vec<f64>, Vec<f64>, usize), TrainError> {
        let g = graph_scores
            .get(id)
            .ok_or_else(|| TrainError::MissingScore(id.clone()))?;
        let a = appearance_scores
            .get(id)
            .ok_or_else(|| TrainError::MissingScore(id.clone()))?;
        let label = labels
            .get(id)
            .ok_or_else(|| TrainError::MissingLabel(id.clone()))?;
        Ok((g.to_vec(), a.to_vec(), *label as usize))
    };
    let train: Vec<(Vec<f64>, Vec<f64>, usize)> =
        train_ids.iter().map(fetch).collect::<Result<_, _>>()?;
    let val: Vec<(Vec<f64>, Vec<f64>, usize)> =
        val_ids.iter().map(fetch).collect::<Result<_, _>>()?;
    let val_labels: Vec<u32> = val.iter().map(|(_, _, l)| *l as u32).collect();

    let mut model = FusionModel::init(action_count);
    let mut adam = Adam::new(config.fusion_learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(3));

    let evaluate = |model: &FusionModel| -> (f64, f64) {
        if val.is_empty() {
            return (0.0, 0.0);
        }
        let scores: Vec<Vec<f64>> = val
            .iter()
            .map(|(g, a, _)| model.fuse_scores(g, a))
            .collect();
        (
            topk_for(&scores, &val_labels, 1),
            topk_for(&scores, &val_labels, 5),
        )
    };

    let mut best: Option<(FusionModel, usize, f64)> = None;
    let mut history = Vec::new();
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let w = tape.leaf(model.head.w.clone());
            let b = tape.leaf(model.head.b.clone());
            let mut acc: Option<TensorId> = None;
            for &i in chunk {
                let (g, a, label) = &train[i];
                let gid = tape.leaf(Tensor::vector(g.clone()));
                let aid = tape.leaf(Tensor::vector(a.clone()));
                let probs = fuse(&mut tape, gid, aid, w, b);
                let ce = tape.cross_entropy(probs, *label);
                acc = Some(match acc {
                    Some(prev) => tape.add(prev, ce),
                    None => ce,
                });
            }
            let total = acc.expect("nonempty batch");
            let loss = tape.scale(total, 1.0 / chunk.len() as f64);
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_no,
                });
            }
            loss_sum += loss_value * chunk.len() as f64;
            tape.backward(loss).expect("scalar loss on a fresh tape");
            let grads = vec![tape.grad(w).cloned(), tape.grad(b).cloned()];
            let mut params: Vec<(&'static str, &mut Tensor)> = vec![
                ("fusion.w", &mut model.head.w),
                ("fusion.b", &mut model.head.b),
            ];
            adam.step(&mut params, &grads)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_top1, val_top5) = evaluate(&model);
        history.push(EpochStats {
            epoch,
            train_loss,
            val_top1,
            val_top5,
        });
        let improved = best.as_ref().map_or(true, |(_, _, b)| val_top1 > *b);
        if improved {
            best = Some((model.clone(), epoch, val_top1));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    let (best_model, best_epoch, best_val) = best.unwrap_or((model, 0, 0.0));
    Ok(FusionOutcome {
        model: best_model,
        history,
        best_epoch,
        best_val_top1: best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphOptions};
    use crate::trace::{ActionVocab, ObjectVocab, StateItem};

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::vector(vec![1.0, -2.0]);
        let mut adam = Adam::new(0.1);
        let grads = vec![Some(Tensor::vector(vec![0.0, 0.0]))];
        let mut params: Vec<(&'static str, &mut Tensor)> = vec![("p", &mut p)];
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_magnitude_is_learning_rate() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut adam = Adam::new(0.1);
        let grads = vec![Some(Tensor::vector(vec![3.0]))];
        let mut params: Vec<(&'static str, &mut Tensor)> = vec![("p", &mut p)];
        adam.step(&mut params, &grads).unwrap();
        // Bias-corrected first step is -lr * g / (|g| + eps) ~ -lr.
        assert!((p.data()[0] + 0.1).abs() < 1e-6, "got {}", p.data()[0]);
    }

    #[test]
    fn adam_descends_quadratic() {
        // 100 steps on f(x) = x^2 from x = 1 with lr 0.1.
        let mut x = Tensor::vector(vec![1.0]);
        let mut adam = Adam::new(0.1);
        for _ in 0..100 {
            let g = Tensor::vector(vec![2.0 * x.data()[0]]);
            let mut params: Vec<(&'static str, &mut Tensor)> = vec![("x", &mut x)];
            adam.step(&mut params, &[Some(g)]).unwrap();
        }
        assert!(x.data()[0].abs() < 0.5, "x = {}", x.data()[0]);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = Tensor::vector(vec![0.0]);
        let mut adam = Adam::new(0.1);
        let grads = vec![Some(Tensor::vector(vec![f64::NAN]))];
        let mut params: Vec<(&'static str, &mut Tensor)> = vec![("p", &mut p)];
        assert!(matches!(
            adam.step(&mut params, &grads),
            Err(TrainError::NonFiniteGradient { .. })
        ));
    }

    fn st(contact: u32) -> ManipulationState {
        ManipulationState {
            contact_right: Some(contact),
            ..ManipulationState::NULL
        }
    }

    /// Tiny deterministic fixture: 3 states cycling, 2 actions; the action
    /// is fully determined by the state under it.
    fn fixture() -> (
        ActivityGraph,
        FeatureMatrix,
        Vec<StateSequence>,
        Vec<EvalSegment>,
    ) {
        let objects = ObjectVocab::from_nouns(["a", "b", "c"]);
        let actions = ActionVocab::from_pairs([
            ("take".to_string(), "a".to_string()),
            ("take".to_string(), "b".to_string()),
        ]);
        let mut sequences = Vec::new();
        let mut annotations = Vec::new();
        let mut segments = Vec::new();
        for v in 0..6u32 {
            let video = format!("v{v:02}");
            let states = [st(0), st(1), st(2), st(0), st(1), st(2)];
            let items: Vec<StateItem> = states
                .iter()
                .enumerate()
                .map(|(i, s)| StateItem {
                    state: *s,
                    start_frame: (i * 100) as u32,
                    end_frame: (i * 100 + 99) as u32,
                })
                .collect();
            sequences.push(StateSequence {
                video_id: video.clone(),
                items,
            });
            // Action 0 during state b (index 1 and 4), action 1 during c.
            for (k, (start, action)) in [(150u32, 0u32), (250, 1), (450, 0), (550, 1)]
                .iter()
                .enumerate()
            {
                annotations.push(crate::trace::ActionAnnotation {
                    video_id: video.clone(),
                    start_frame: *start,
                    stop_frame: start + 30,
                    verb: "take".to_string(),
                    noun: if *action == 0 { "a" } else { "b" }.to_string(),
                    action_id: *action,
                });
                segments.push(EvalSegment {
                    segment_id: format!("{video}#{k:04}"),
                    video_id: video.clone(),
                    action_start_frame: *start,
                    anticipation_seconds: 1.0,
                    observation_seconds: 10.0,
                    action_id: *action,
                });
            }
        }
        let graph = build_graph(
            &sequences,
            &annotations,
            &objects,
            &actions,
            GraphOptions::default(),
        )
        .unwrap()
        .graph;
        let features = FeatureMatrix::identity(graph.node_count());
        (graph, features, sequences, segments)
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.02,
            max_epochs: 40,
            patience: 40,
            gcn_hidden: 8,
            embed_dim: 8,
            lstm_hidden: 8,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn overfits_a_single_example() {
        let (graph, features, sequences, segments) = fixture();
        let seqs = sequences_by_video(&sequences);
        let config = TrainConfig {
            max_epochs: 300,
            patience: 300,
            ..small_config()
        };
        let inputs = TrainInputs {
            graph: &graph,
            features: &features,
            sequences: &seqs,
            train_segments: &segments[..1],
            val_segments: &segments[..1],
            fps: 15.0,
        };
        let outcome = train_graph_stream(&config, &inputs).unwrap();
        let last = outcome.history.last().unwrap();
        assert!(
            last.train_loss < 0.01,
            "memorization failed, loss {}",
            last.train_loss
        );
    }

    #[test]
    fn training_loss_non_increasing_at_tenth_rate() {
        let (graph, features, sequences, segments) = fixture();
        let seqs = sequences_by_video(&sequences);
        let config = TrainConfig {
            learning_rate: 0.002,
            max_epochs: 60,
            patience: 60,
            ..small_config()
        };
        let inputs = TrainInputs {
            graph: &graph,
            features: &features,
            sequences: &seqs,
            train_segments: &segments[..1],
            val_segments: &segments[..1],
            fps: 15.0,
        };
        let outcome = train_graph_stream(&config, &inputs).unwrap();
        for pair in outcome.history.windows(2) {
            assert!(
                pair[1].train_loss <= pair[0].train_loss + 1e-9,
                "loss increased: {} -> {}",
                pair[0].train_loss,
                pair[1].train_loss
            );
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (graph, features, sequences, segments) = fixture();
        let seqs = sequences_by_video(&sequences);
        let config = TrainConfig {
            max_epochs: 5,
            ..small_config()
        };
        let run = || {
            let inputs = TrainInputs {
                graph: &graph,
                features: &features,
                sequences: &seqs,
                train_segments: &segments,
                val_segments: &segments,
                fps: 15.0,
            };
            let outcome = train_graph_stream(&config, &inputs).unwrap();
            outcome.to_checkpoint(&config).to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn batched_loss_matches_per_sample_loss() {
        let (graph, features, sequences, segments) = fixture();
        let seqs = sequences_by_video(&sequences);
        let model = GraphStreamModel::init(
            TrainConfig::default().stream_config(features.cols, graph.action_count()),
            11,
        );
        // Mixed-length batch, including an empty-window (null) segment.
        let mut prepared = prepare_segments(
            &graph,
            &seqs,
            &segments[..5],
            DEFAULT_MAX_SEQUENCE_LENGTH,
            15.0,
            &UnseenPolicy::Error,
        )
        .unwrap();
        prepared.push(SegmentData {
            segment_id: "null".to_string(),
            label: 0,
            steps: vec![SeqStep::Null],
        });
        prepared[1].steps.truncate(1);

        let adjacency = adjacency_tensor(&graph);
        let x = feature_tensor(&features);

        // Batched loss.
        let labels: Vec<usize> = prepared.iter().map(|s| s.label).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let adj_id = tape.leaf(adjacency.clone());
        let x_id = tape.leaf(x.clone());
        let emb = node_embeddings(&mut tape, &bound, adj_id, x_id);
        let batch: Vec<&SegmentData> = prepared.iter().collect();
        let probs = batch_scores(&mut tape, &bound, emb, &batch);
        let losses = tape.cross_entropy_rows(probs, &labels);
        let loss = tape.mean_all(losses);
        let batched = tape.value(loss).item();

        // Per-sample path.
        let mut total = 0.0;
        for seg in &prepared {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let adj_id = tape.leaf(adjacency.clone());
            let x_id = tape.leaf(x.clone());
            let emb = node_embeddings(&mut tape, &bound, adj_id, x_id);
            let elems: Vec<SeqElem> = seg
                .steps
                .iter()
                .map(|s| match s {
                    SeqStep::Node(n) => SeqElem::Node(*n),
                    SeqStep::Null => SeqElem::Unseen(null_features(features.cols)),
                    SeqStep::Unseen(f) => SeqElem::Unseen(f.clone()),
                })
                .collect();
            let probs = score_sequence(&mut tape, &bound, emb, &elems);
            let ce = tape.cross_entropy(probs, seg.label);
            total += tape.value(ce).item();
        }
        let unbatched = total / prepared.len() as f64;
        assert!(
            (batched - unbatched).abs() < 1e-10,
            "batched {batched} vs unbatched {unbatched}"
        );
    }

    #[test]
    fn two_stage_freezes_gcn_parameters() {
        let (graph, features, sequences, segments) = fixture();
        let seqs = sequences_by_video(&sequences);
        let config = TrainConfig {
            mode: TrainMode::TwoStage,
            max_epochs: 3,
            two_stage_gcn_epochs: 2,
            ..small_config()
        };
        let inputs = TrainInputs {
            graph: &graph,
            features: &features,
            sequences: &seqs,
            train_segments: &segments,
            val_segments: &segments,
            fps: 15.0,
        };
        let outcome = train_graph_stream(&config, &inputs).unwrap();

        // Re-run the pretraining phase alone: the frozen GCN in the final
        // model must match it exactly.
        let stream_config = config.stream_config(features.cols, graph.action_count());
        let mut reference = GraphStreamModel::init(stream_config, config.seed);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let adjacency = adjacency_tensor(&graph);
        let x = feature_tensor(&features);
        pretrain_gcn(&config, &graph, &adjacency, &x, &mut reference, &mut rng).unwrap();
        assert_eq!(
            outcome.model.gcn.as_ref().unwrap(),
            reference.gcn.as_ref().unwrap()
        );
    }

    fn uniform_scores(ids: &[String], n: usize) -> ScoreTable {
        let mut t = ScoreTable::new(n);
        for id in ids {
            t.insert(id, vec![1.0 / n as f64; n]);
        }
        t
    }

    #[test]
    fn fusion_zero_epochs_is_uniform() {
        let ids: Vec<String> = (0..4).map(|i| format!("s{i}")).collect();
        let graph_scores = uniform_scores(&ids, 3);
        let appearance = uniform_scores(&ids, 3);
        let labels: BTreeMap<String, u32> = ids.iter().map(|i| (i.clone(), 0)).collect();
        let config = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        let outcome =
            train_fusion(&config, &graph_scores, &appearance, &labels, &ids, &ids).unwrap();
        let fused = outcome.model.fuse_scores(&[0.9, 0.05, 0.05], &[0.1, 0.8, 0.1]);
        for v in fused {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_with_one_hot_graph_scores_reaches_perfect_top1() {
        let n = 3;
        let ids: Vec<String> = (0..30).map(|i| format!("s{i:02}")).collect();
        let mut graph_scores = ScoreTable::new(n);
        let mut labels = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            let label = (i % n) as u32;
            let mut row = vec![0.0; n];
            row[label as usize] = 1.0;
            graph_scores.insert(id, row);
            labels.insert(id.clone(), label);
        }
        let appearance = uniform_scores(&ids, n);
        let config = TrainConfig {
            max_epochs: 60,
            patience: 60,
            ..TrainConfig::default()
        };
        let outcome =
            train_fusion(&config, &graph_scores, &appearance, &labels, &ids, &ids).unwrap();
        assert!(
            outcome.best_val_top1 >= 0.999,
            "top1 {}",
            outcome.best_val_top1
        );
    }

    #[test]
    fn fusion_rejects_segment_mismatch() {
        let a_ids = vec!["a".to_string()];
        let b_ids = vec!["b".to_string()];
        let graph_scores = uniform_scores(&a_ids, 2);
        let appearance = uniform_scores(&b_ids, 2);
        let labels = BTreeMap::new();
        let err = train_fusion(
            &TrainConfig::default(),
            &graph_scores,
            &appearance,
            &labels,
            &a_ids,
            &a_ids,
        );
        assert!(err.is_err());
    }
}
