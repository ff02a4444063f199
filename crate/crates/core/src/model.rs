//! The graph-stream network and the late-fusion head.
//!
//! Node features pass through two graph-convolution layers
//! (`relu(A X W1)` then `A H W2`, no output nonlinearity), the observed
//! state history is aggregated by a single-layer LSTM (or mean / terminal
//! pooling in the ablations), and an affine head produces softmax scores
//! over actions. Fusion concatenates the L2-normalized softmax scores of
//! the two streams and applies a second affine head, trained with both
//! streams frozen.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorId};
use crate::checkpoint::{Checkpoint, CheckpointError};

pub const DEFAULT_GCN_HIDDEN: usize = 256;
pub const DEFAULT_EMBED_DIM: usize = 128;
pub const DEFAULT_LSTM_HIDDEN: usize = 128;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("unknown aggregation mode `{0}` (expected lstm, mean, or terminal)")]
    UnknownAggregation(String),
    #[error("checkpoint meta `{key}` has invalid value `{value}`")]
    BadMeta { key: String, value: String },
}

/// How a sequence of state embeddings collapses to one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Lstm,
    Mean,
    Terminal,
}

impl Aggregation {
    pub fn as_str(&self) -> &'static str {
        match self {
            Aggregation::Lstm => "lstm",
            Aggregation::Mean => "mean",
            Aggregation::Terminal => "terminal",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        match s {
            "lstm" => Ok(Aggregation::Lstm),
            "mean" => Ok(Aggregation::Mean),
            "terminal" => Ok(Aggregation::Terminal),
            other => Err(ModelError::UnknownAggregation(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Gate weights for a single-layer LSTM: `w*` maps the input, `u*` the
/// previous hidden state, `b*` is the gate bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub wi: Tensor,
    pub ui: Tensor,
    pub bi: Tensor,
    pub wf: Tensor,
    pub uf: Tensor,
    pub bf: Tensor,
    pub wo: Tensor,
    pub uo: Tensor,
    pub bo: Tensor,
    pub wg: Tensor,
    pub ug: Tensor,
    pub bg: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub w: Tensor,
    pub b: Tensor,
}

/// Layer sizes and mode switches for one graph-stream model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamConfig {
    pub feature_dim: usize,
    pub gcn_hidden: usize,
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub action_count: usize,
    pub use_gcn: bool,
    pub aggregation: Aggregation,
}

impl StreamConfig {
    pub fn new(feature_dim: usize, action_count: usize) -> Self {
        StreamConfig {
            feature_dim,
            gcn_hidden: DEFAULT_GCN_HIDDEN,
            embed_dim: DEFAULT_EMBED_DIM,
            lstm_hidden: DEFAULT_LSTM_HIDDEN,
            action_count,
            use_gcn: true,
            aggregation: Aggregation::Lstm,
        }
    }

    /// Dimension of per-state embeddings entering the aggregator.
    pub fn state_dim(&self) -> usize {
        if self.use_gcn || self.feature_dim != self.embed_dim {
            self.embed_dim
        } else {
            self.feature_dim
        }
    }

    /// Dimension of the aggregated history vector entering the head.
    pub fn aggregate_dim(&self) -> usize {
        match self.aggregation {
            Aggregation::Lstm => self.lstm_hidden,
            Aggregation::Mean | Aggregation::Terminal => self.state_dim(),
        }
    }

    fn needs_projection(&self) -> bool {
        !self.use_gcn && self.feature_dim != self.embed_dim
    }
}

/// Parameters of the graph stream. The projection replaces the GCN in the
/// no-GCN ablation when the raw feature dimension differs from the LSTM
/// input size.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphStreamModel {
    pub config: StreamConfig,
    pub gcn: Option<GcnParams>,
    pub projection: Option<Tensor>,
    pub lstm: Option<LstmParams>,
    pub head: AffineParams,
}

fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (1.0 / rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::matrix(rows, cols, data)
}

impl GraphStreamModel {
    /// Seeded initialization: matrices uniform in
    /// `[-sqrt(1/fan_in), +sqrt(1/fan_in)]`, biases zero. Tensor creation
    /// order is fixed, so a seed fully determines the parameters.
    pub fn init(config: StreamConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gcn = config.use_gcn.then(|| GcnParams {
            w1: init_matrix(&mut rng, config.feature_dim, config.gcn_hidden),
            w2: init_matrix(&mut rng, config.gcn_hidden, config.embed_dim),
        });
        let projection = config
            .needs_projection()
            .then(|| init_matrix(&mut rng, config.feature_dim, config.embed_dim));
        let lstm = (config.aggregation == Aggregation::Lstm).then(|| {
            let (d, h) = (config.state_dim(), config.lstm_hidden);
            let gate = |rng: &mut ChaCha8Rng| {
                (
                    init_matrix(rng, d, h),
                    init_matrix(rng, h, h),
                    Tensor::vector(vec![0.0; h]),
                )
            };
            let (wi, ui, bi) = gate(&mut rng);
            let (wf, uf, bf) = gate(&mut rng);
            let (wo, uo, bo) = gate(&mut rng);
            let (wg, ug, bg) = gate(&mut rng);
            LstmParams {
                wi, ui, bi, wf, uf, bf, wo, uo, bo, wg, ug, bg,
            }
        });
        let head = AffineParams {
            w: init_matrix(&mut rng, config.aggregate_dim(), config.action_count),
            b: Tensor::vector(vec![0.0; config.action_count]),
        };
        GraphStreamModel {
            config,
            gcn,
            projection,
            lstm,
            head,
        }
    }

    /// Parameter tensors in a stable (name, tensor) order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = Vec::new();
        if let Some(g) = &self.gcn {
            out.push(("gcn.w1", &g.w1));
            out.push(("gcn.w2", &g.w2));
        }
        if let Some(p) = &self.projection {
            out.push(("projection.w", p));
        }
        if let Some(l) = &self.lstm {
            out.push(("lstm.wi", &l.wi));
            out.push(("lstm.ui", &l.ui));
            out.push(("lstm.bi", &l.bi));
            out.push(("lstm.wf", &l.wf));
            out.push(("lstm.uf", &l.uf));
            out.push(("lstm.bf", &l.bf));
            out.push(("lstm.wo", &l.wo));
            out.push(("lstm.uo", &l.uo));
            out.push(("lstm.bo", &l.bo));
            out.push(("lstm.wg", &l.wg));
            out.push(("lstm.ug", &l.ug));
            out.push(("lstm.bg", &l.bg));
        }
        out.push(("head.w", &self.head.w));
        out.push(("head.b", &self.head.b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<(&'static str, &mut Tensor)> = Vec::new();
        if let Some(g) = &mut self.gcn {
            out.push(("gcn.w1", &mut g.w1));
            out.push(("gcn.w2", &mut g.w2));
        }
        if let Some(p) = &mut self.projection {
            out.push(("projection.w", p));
        }
        if let Some(l) = &mut self.lstm {
            out.push(("lstm.wi", &mut l.wi));
            out.push(("lstm.ui", &mut l.ui));
            out.push(("lstm.bi", &mut l.bi));
            out.push(("lstm.wf", &mut l.wf));
            out.push(("lstm.uf", &mut l.uf));
            out.push(("lstm.bf", &mut l.bf));
            out.push(("lstm.wo", &mut l.wo));
            out.push(("lstm.uo", &mut l.uo));
            out.push(("lstm.bo", &mut l.bo));
            out.push(("lstm.wg", &mut l.wg));
            out.push(("lstm.ug", &mut l.ug));
            out.push(("lstm.bg", &mut l.bg));
        }
        out.push(("head.w", &mut self.head.w));
        out.push(("head.b", &mut self.head.b));
        out
    }

    /// Registers every parameter on the tape, in `params()` order.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let mut bind = |t: &Tensor| tape.leaf(t.clone());
        let gcn = self.gcn.as_ref().map(|g| (bind(&g.w1), bind(&g.w2)));
        let projection = self.projection.as_ref().map(&mut bind);
        let lstm = self.lstm.as_ref().map(|l| LstmIds {
            wi: bind(&l.wi),
            ui: bind(&l.ui),
            bi: bind(&l.bi),
            wf: bind(&l.wf),
            uf: bind(&l.uf),
            bf: bind(&l.bf),
            wo: bind(&l.wo),
            uo: bind(&l.uo),
            bo: bind(&l.bo),
            wg: bind(&l.wg),
            ug: bind(&l.ug),
            bg: bind(&l.bg),
        });
        let head = (bind(&self.head.w), bind(&self.head.b));
        BoundModel {
            config: self.config,
            gcn,
            projection,
            lstm,
            head,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("feature_dim", self.config.feature_dim);
        ckpt.set_meta("gcn_hidden", self.config.gcn_hidden);
        ckpt.set_meta("embed_dim", self.config.embed_dim);
        ckpt.set_meta("lstm_hidden", self.config.lstm_hidden);
        ckpt.set_meta("action_count", self.config.action_count);
        ckpt.set_meta("use_gcn", self.config.use_gcn);
        ckpt.set_meta("aggregation", self.config.aggregation.as_str());
        for (name, tensor) in self.params() {
            ckpt.push_tensor(name, tensor.clone());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let usize_meta = |key: &str| -> Result<usize, ModelError> {
            let v = ckpt.require_meta(key)?;
            v.parse().map_err(|_| ModelError::BadMeta {
                key: key.to_string(),
                value: v.to_string(),
            })
        };
        let use_gcn = match ckpt.require_meta("use_gcn")? {
            "true" => true,
            "false" => false,
            other => {
                return Err(ModelError::BadMeta {
                    key: "use_gcn".to_string(),
                    value: other.to_string(),
                })
            }
        };
        let config = StreamConfig {
            feature_dim: usize_meta("feature_dim")?,
            gcn_hidden: usize_meta("gcn_hidden")?,
            embed_dim: usize_meta("embed_dim")?,
            lstm_hidden: usize_meta("lstm_hidden")?,
            action_count: usize_meta("action_count")?,
            use_gcn,
            aggregation: Aggregation::parse(ckpt.require_meta("aggregation")?)?,
        };
        let get = |name: &str| -> Result<Tensor, ModelError> { Ok(ckpt.tensor(name)?.clone()) };
        let gcn = if config.use_gcn {
            Some(GcnParams {
                w1: get("gcn.w1")?,
                w2: get("gcn.w2")?,
            })
        } else {
            None
        };
        let projection = if config.needs_projection() {
            Some(get("projection.w")?)
        } else {
            None
        };
        let lstm = if config.aggregation == Aggregation::Lstm {
            Some(LstmParams {
                wi: get("lstm.wi")?,
                ui: get("lstm.ui")?,
                bi: get("lstm.bi")?,
                wf: get("lstm.wf")?,
                uf: get("lstm.uf")?,
                bf: get("lstm.bf")?,
                wo: get("lstm.wo")?,
                uo: get("lstm.uo")?,
                bo: get("lstm.bo")?,
                wg: get("lstm.wg")?,
                ug: get("lstm.ug")?,
                bg: get("lstm.bg")?,
            })
        } else {
            None
        };
        Ok(GraphStreamModel {
            config,
            gcn,
            projection,
            lstm,
            head: AffineParams {
                w: get("head.w")?,
                b: get("head.b")?,
            },
        })
    }
}

/// Tape handles for one bound model.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub config: StreamConfig,
    pub gcn: Option<(TensorId, TensorId)>,
    pub projection: Option<TensorId>,
    pub lstm: Option<LstmIds>,
    pub head: (TensorId, TensorId),
}

#[derive(Debug, Clone, Copy)]
pub struct LstmIds {
    pub wi: TensorId,
    pub ui: TensorId,
    pub bi: TensorId,
    pub wf: TensorId,
    pub uf: TensorId,
    pub bf: TensorId,
    pub wo: TensorId,
    pub uo: TensorId,
    pub bo: TensorId,
    pub wg: TensorId,
    pub ug: TensorId,
    pub bg: TensorId,
}

/// Two graph-convolution layers: `H1 = relu(A X W1)`, `H2 = A H1 W2`.
/// No nonlinearity on the output layer.
pub fn gcn_forward(
    tape: &mut Tape,
    adj: TensorId,
    x: TensorId,
    w1: TensorId,
    w2: TensorId,
) -> TensorId {
    let ax = tape.matmul(adj, x);
    let h1 = tape.matmul(ax, w1);
    let h1 = tape.relu(h1);
    let ah = tape.matmul(adj, h1);
    tape.matmul(ah, w2)
}

/// Per-node embeddings for the whole graph under the bound model: the GCN
/// output, the projected features (no-GCN ablation), or the raw features.
pub fn node_embeddings(
    tape: &mut Tape,
    model: &BoundModel,
    adj: TensorId,
    x: TensorId,
) -> TensorId {
    match (model.gcn, model.projection) {
        (Some((w1, w2)), _) => gcn_forward(tape, adj, x, w1, w2),
        (None, Some(p)) => tape.matmul(x, p),
        (None, None) => x,
    }
}

/// Embedding of a state that is absent from the graph: its raw feature
/// vector pushed through the layers as if it were an isolated node
/// (`relu(x W1) W2` under the GCN).
pub fn fallback_embedding(tape: &mut Tape, model: &BoundModel, features: Tensor) -> TensorId {
    let x = tape.leaf(features);
    match (model.gcn, model.projection) {
        (Some((w1, w2)), _) => {
            let h = tape.matmul(x, w1);
            let h = tape.relu(h);
            tape.matmul(h, w2)
        }
        (None, Some(p)) => tape.matmul(x, p),
        (None, None) => x,
    }
}

fn lstm_gate(
    tape: &mut Tape,
    x: TensorId,
    h: TensorId,
    w: TensorId,
    u: TensorId,
    b: TensorId,
) -> TensorId {
    let xw = tape.matmul(x, w);
    let hu = tape.matmul(h, u);
    let s = tape.add(xw, hu);
    if tape.value(s).rank() == 2 {
        tape.add_row_broadcast(s, b)
    } else {
        tape.add(s, b)
    }
}

/// One LSTM cell step. Works on vectors (single sequence) and on
/// `[batch x dim]` matrices alike.
pub fn lstm_cell(
    tape: &mut Tape,
    ids: &LstmIds,
    x: TensorId,
    h: TensorId,
    c: TensorId,
) -> (TensorId, TensorId) {
    let i = lstm_gate(tape, x, h, ids.wi, ids.ui, ids.bi);
    let i = tape.sigmoid(i);
    let f = lstm_gate(tape, x, h, ids.wf, ids.uf, ids.bf);
    let f = tape.sigmoid(f);
    let o = lstm_gate(tape, x, h, ids.wo, ids.uo, ids.bo);
    let o = tape.sigmoid(o);
    let g = lstm_gate(tape, x, h, ids.wg, ids.ug, ids.bg);
    let g = tape.tanh(g);
    let fc = tape.mul(f, c);
    let ig = tape.mul(i, g);
    let c_next = tape.add(fc, ig);
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc);
    (h_next, c_next)
}

/// Collapses a nonempty sequence of per-state embedding vectors to one
/// vector: final LSTM hidden state, arithmetic mean, or the last embedding.
pub fn aggregate(
    tape: &mut Tape,
    sequence: &[TensorId],
    mode: Aggregation,
    lstm: Option<&LstmIds>,
    lstm_hidden: usize,
) -> TensorId {
    assert!(!sequence.is_empty(), "aggregate requires a nonempty sequence");
    match mode {
        Aggregation::Terminal => *sequence.last().expect("nonempty"),
        Aggregation::Mean => {
            let mut acc = sequence[0];
            for id in &sequence[1..] {
                acc = tape.add(acc, *id);
            }
            tape.scale(acc, 1.0 / sequence.len() as f64)
        }
        Aggregation::Lstm => {
            let ids = lstm.expect("lstm aggregation requires LSTM parameters");
            let mut h = tape.leaf(Tensor::vector(vec![0.0; lstm_hidden]));
            let mut c = tape.leaf(Tensor::vector(vec![0.0; lstm_hidden]));
            for x in sequence {
                let (h2, c2) = lstm_cell(tape, ids, *x, h, c);
                h = h2;
                c = c2;
            }
            h
        }
    }
}

/// Softmax scores over actions from an aggregated history vector.
pub fn anticipate(tape: &mut Tape, aggregated: TensorId, w: TensorId, b: TensorId) -> TensorId {
    let logits = tape.matmul(aggregated, w);
    let logits = tape.add(logits, b);
    tape.softmax_rows(logits)
}

/// Late fusion: softmax over an affine map of the concatenated
/// L2-normalized stream scores.
pub fn fuse(
    tape: &mut Tape,
    scores_graph: TensorId,
    scores_appearance: TensorId,
    w: TensorId,
    b: TensorId,
) -> TensorId {
    let g = tape.l2_normalize(scores_graph);
    let a = tape.l2_normalize(scores_appearance);
    let joint = tape.concat(g, a);
    let logits = tape.matmul(joint, w);
    let logits = tape.add(logits, b);
    tape.softmax_rows(logits)
}

/// One element of an observed state sequence: a graph node index, or raw
/// features for a state missing from the graph.
#[derive(Debug, Clone)]
pub enum SeqElem {
    Node(usize),
    Unseen(Vec<f64>),
}

/// Scores one observation sequence end to end; `embeddings` is the
/// [`node_embeddings`] output for the whole graph.
pub fn score_sequence(
    tape: &mut Tape,
    model: &BoundModel,
    embeddings: TensorId,
    elems: &[SeqElem],
) -> TensorId {
    assert!(!elems.is_empty(), "score_sequence requires a nonempty sequence");
    let seq: Vec<TensorId> = elems
        .iter()
        .map(|e| match e {
            SeqElem::Node(i) => tape.select_row(embeddings, *i),
            SeqElem::Unseen(f) => fallback_embedding(tape, model, Tensor::vector(f.clone())),
        })
        .collect();
    let agg = aggregate(
        tape,
        &seq,
        model.config.aggregation,
        model.lstm.as_ref(),
        model.config.lstm_hidden,
    );
    anticipate(tape, agg, model.head.0, model.head.1)
}

/// The fusion head. Initialized to zeros so an untrained head emits the
/// uniform distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub action_count: usize,
    pub head: AffineParams,
}

impl FusionModel {
    pub fn init(action_count: usize) -> Self {
        FusionModel {
            action_count,
            head: AffineParams {
                w: Tensor::matrix(2 * action_count, action_count, vec![0.0; 2 * action_count * action_count]),
                b: Tensor::vector(vec![0.0; action_count]),
            },
        }
    }

    /// Value-only fusion of two score vectors.
    pub fn fuse_scores(&self, graph: &[f64], appearance: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::vector(graph.to_vec()));
        let a = tape.leaf(Tensor::vector(appearance.to_vec()));
        let w = tape.leaf(self.head.w.clone());
        let b = tape.leaf(self.head.b.clone());
        let out = fuse(&mut tape, g, a, w, b);
        tape.value(out).data().to_vec()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("action_count", self.action_count);
        ckpt.push_tensor("fusion.w", self.head.w.clone());
        ckpt.push_tensor("fusion.b", self.head.b.clone());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, ModelError> {
        let v = ckpt.require_meta("action_count")?;
        let action_count: usize = v.parse().map_err(|_| ModelError::BadMeta {
            key: "action_count".to_string(),
            value: v.to_string(),
        })?;
        Ok(FusionModel {
            action_count,
            head: AffineParams {
                w: ckpt.tensor("fusion.w")?.clone(),
                b: ckpt.tensor("fusion.b")?.clone(),
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_config() -> StreamConfig {
        StreamConfig {
            feature_dim: 3,
            gcn_hidden: 4,
            embed_dim: 2,
            lstm_hidden: 2,
            action_count: 2,
            use_gcn: true,
            aggregation: Aggregation::Lstm,
        }
    }

    #[test]
    fn gcn_single_node_self_loop() {
        // With a 1-node graph the adjacency is [1], so H2 = relu(x W1) W2.
        let mut tape = Tape::new();
        let adj = tape.leaf(Tensor::matrix(1, 1, vec![1.0]));
        let x = tape.leaf(Tensor::matrix(1, 2, vec![0.5, -1.5]));
        let w1 = tape.leaf(Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 0.5]));
        let w2 = tape.leaf(Tensor::matrix(2, 1, vec![0.25, 4.0]));
        let h2 = gcn_forward(&mut tape, adj, x, w1, w2);
        // x W1 = [0.5 - 3.0, -0.5 - 0.75] = [-2.5, -1.25]; relu -> [0, 0].
        assert_eq!(tape.value(h2).data(), &[0.0]);

        let mut tape = Tape::new();
        let adj = tape.leaf(Tensor::matrix(1, 1, vec![1.0]));
        let x = tape.leaf(Tensor::matrix(1, 1, vec![2.0]));
        let w1 = tape.leaf(Tensor::matrix(1, 1, vec![3.0]));
        let w2 = tape.leaf(Tensor::matrix(1, 1, vec![-0.5]));
        let h2 = gcn_forward(&mut tape, adj, x, w1, w2);
        assert_eq!(tape.value(h2).data(), &[-3.0]); // relu(6) * -0.5
    }

    #[test]
    fn gcn_two_node_hand_computation() {
        // A = [[0.5, 0.5], [0, 1]], X = [[1], [2]], W1 = [2], W2 = [0.5].
        let mut tape = Tape::new();
        let adj = tape.leaf(Tensor::matrix(2, 2, vec![0.5, 0.5, 0.0, 1.0]));
        let x = tape.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]));
        let w1 = tape.leaf(Tensor::matrix(1, 1, vec![2.0]));
        let w2 = tape.leaf(Tensor::matrix(1, 1, vec![0.5]));
        let h2 = gcn_forward(&mut tape, adj, x, w1, w2);
        // AX = [1.5, 2]; H1 = relu([3, 4]) = [3, 4]; AH1 = [3.5, 4]; H2 = [1.75, 2].
        assert_eq!(tape.value(h2).data(), &[1.75, 2.0]);
    }

    #[test]
    fn gcn_is_permutation_equivariant() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 5;
        let m = 3;
        let adj_data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x_data: Vec<f64> = (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w1_data: Vec<f64> = (0..m * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w2_data: Vec<f64> = (0..4 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [3usize, 0, 4, 1, 2];

        let forward = |adj: Vec<f64>, x: Vec<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let adj = tape.leaf(Tensor::matrix(n, n, adj));
            let x = tape.leaf(Tensor::matrix(n, m, x));
            let w1 = tape.leaf(Tensor::matrix(m, 4, w1_data.clone()));
            let w2 = tape.leaf(Tensor::matrix(4, 2, w2_data.clone()));
            let h = gcn_forward(&mut tape, adj, x, w1, w2);
            tape.value(h).data().to_vec()
        };

        let base = forward(adj_data.clone(), x_data.clone());

        let mut adj_p = vec![0.0; n * n];
        let mut x_p = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..n {
                adj_p[i * n + j] = adj_data[perm[i] * n + perm[j]];
            }
            for c in 0..m {
                x_p[i * m + c] = x_data[perm[i] * m + c];
            }
        }
        let permuted = forward(adj_p, x_p);
        for i in 0..n {
            for c in 0..2 {
                let got = permuted[i * 2 + c];
                let expect = base[perm[i] * 2 + c];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    fn zero_lstm(dim: usize, hidden: usize) -> LstmParams {
        let z = |r, c| Tensor::matrix(r, c, vec![0.0; r * c]);
        LstmParams {
            wi: z(dim, hidden),
            ui: z(hidden, hidden),
            bi: Tensor::vector(vec![0.0; hidden]),
            wf: z(dim, hidden),
            uf: z(hidden, hidden),
            bf: Tensor::vector(vec![0.0; hidden]),
            wo: z(dim, hidden),
            uo: z(hidden, hidden),
            bo: Tensor::vector(vec![0.0; hidden]),
            wg: z(dim, hidden),
            ug: z(hidden, hidden),
            bg: Tensor::vector(vec![0.0; hidden]),
        }
    }

    fn bind_lstm(tape: &mut Tape, p: &LstmParams) -> LstmIds {
        LstmIds {
            wi: tape.leaf(p.wi.clone()),
            ui: tape.leaf(p.ui.clone()),
            bi: tape.leaf(p.bi.clone()),
            wf: tape.leaf(p.wf.clone()),
            uf: tape.leaf(p.uf.clone()),
            bf: tape.leaf(p.bf.clone()),
            wo: tape.leaf(p.wo.clone()),
            uo: tape.leaf(p.uo.clone()),
            bo: tape.leaf(p.bo.clone()),
            wg: tape.leaf(p.wg.clone()),
            ug: tape.leaf(p.ug.clone()),
            bg: tape.leaf(p.bg.clone()),
        }
    }

    #[test]
    fn aggregate_terminal_and_mean() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let v = tape.leaf(Tensor::vector(vec![3.0, 4.0]));
        let w = tape.leaf(Tensor::vector(vec![5.0, 6.0]));
        let t = aggregate(&mut tape, &[u, v, w], Aggregation::Terminal, None, 2);
        assert_eq!(t, w);
        let m = aggregate(&mut tape, &[u, v], Aggregation::Mean, None, 2);
        assert_eq!(tape.value(m).data(), &[2.0, 3.0]);
    }

    #[test]
    fn aggregate_lstm_zero_params_stays_zero() {
        // With all-zero parameters every gate is 0.5 and the candidate is
        // tanh(0) = 0, so c and h stay exactly zero for any input length.
        let params = zero_lstm(2, 2);
        for len in [1usize, 2, 5] {
            let mut tape = Tape::new();
            let ids = bind_lstm(&mut tape, &params);
            let seq: Vec<TensorId> = (0..len)
                .map(|i| tape.leaf(Tensor::vector(vec![i as f64 + 1.0, -2.0])))
                .collect();
            let h = aggregate(&mut tape, &seq, Aggregation::Lstm, Some(&ids), 2);
            assert_eq!(tape.value(h).data(), &[0.0, 0.0]);
        }
    }

    #[test]
    fn aggregate_lstm_length_one_is_single_cell_step() {
        let model = GraphStreamModel::init(toy_config(), 99);
        let params = model.lstm.as_ref().unwrap();

        let mut tape = Tape::new();
        let ids = bind_lstm(&mut tape, params);
        let x = tape.leaf(Tensor::vector(vec![0.3, -0.9]));
        let agg = aggregate(&mut tape, &[x], Aggregation::Lstm, Some(&ids), 2);

        let mut tape2 = Tape::new();
        let ids2 = bind_lstm(&mut tape2, params);
        let x2 = tape2.leaf(Tensor::vector(vec![0.3, -0.9]));
        let h0 = tape2.leaf(Tensor::vector(vec![0.0, 0.0]));
        let c0 = tape2.leaf(Tensor::vector(vec![0.0, 0.0]));
        let (h1, _) = lstm_cell(&mut tape2, &ids2, x2, h0, c0);

        assert_eq!(tape.value(agg).data(), tape2.value(h1).data());
    }

    #[test]
    fn anticipate_uniform_and_analytic() {
        let mut tape = Tape::new();
        let agg = tape.leaf(Tensor::vector(vec![0.7, -0.3]));
        let w0 = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]));
        let b0 = tape.leaf(Tensor::vector(vec![0.0; 3]));
        let p = anticipate(&mut tape, agg, w0, b0);
        for v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // logits [ln 3, 0] -> [0.75, 0.25].
        let mut tape = Tape::new();
        let agg = tape.leaf(Tensor::vector(vec![1.0]));
        let w = tape.leaf(Tensor::matrix(1, 2, vec![3.0f64.ln(), 0.0]));
        let b = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
        let p = anticipate(&mut tape, agg, w, b);
        let data = tape.value(p).data();
        assert!((data[0] - 0.75).abs() < 1e-12);
        assert!((data[1] - 0.25).abs() < 1e-12);
        assert!((data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fuse_uniform_inputs_and_zero_head() {
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let a = tape.leaf(Tensor::vector(vec![0.5, 0.5]));
        let gn = tape.l2_normalize(g);
        let an = tape.l2_normalize(a);
        let joint = tape.concat(gn, an);
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        for v in tape.value(joint).data() {
            assert!((v - inv_sqrt2).abs() < 1e-12);
        }

        let fusion = FusionModel::init(2);
        let out = fusion.fuse_scores(&[0.9, 0.1], &[0.2, 0.8]);
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn fuse_identity_like_head_preserves_stream1_argmax() {
        // W_f = [c I | 0]: fused logits are a positive multiple of the
        // normalized stream-1 scores, so the argmax carries over.
        let n = 4;
        let c = 3.0;
        let mut w = vec![0.0; 2 * n * n];
        for i in 0..n {
            w[i * n + i] = c;
        }
        let fusion = FusionModel {
            action_count: n,
            head: AffineParams {
                w: Tensor::matrix(2 * n, n, w),
                b: Tensor::vector(vec![0.0; n]),
            },
        };
        let graph = vec![0.1, 0.55, 0.3, 0.05];
        let appearance = vec![0.4, 0.1, 0.1, 0.4];
        let fused = fusion.fuse_scores(&graph, &appearance);
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(&fused), argmax(&graph));
        assert!((fused.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let model = GraphStreamModel::init(toy_config(), 1234);
        let ckpt = model.to_checkpoint();
        let back = GraphStreamModel::from_checkpoint(&ckpt).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = GraphStreamModel::init(toy_config(), 7);
        let b = GraphStreamModel::init(toy_config(), 7);
        let c = GraphStreamModel::init(toy_config(), 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
