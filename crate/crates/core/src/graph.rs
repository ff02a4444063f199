//! The consolidated state/action graph.
//!
//! Nodes are the union of all manipulation states seen in any split plus
//! the full action vocabulary. Every node carries a self edge of weight 1.
//! State-to-state edges hold the empirical transition probability
//! `p(next | current)`; state-to-action edges hold `p(action | state)`
//! estimated from training annotations whose spans overlap the state's
//! span. Node indices are deterministic: states first in canonical tuple
//! order, then actions by id.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::trace::{
    ActionAnnotation, ActionVocab, ManipulationState, ObjectId, ObjectVocab, StateSequence,
};

pub type NodeIndex = usize;

const GRAPH_MAGIC: &str = "EGO-OMG-GRAPH v1";

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: expected header `{GRAPH_MAGIC}`, found `{found}`")]
    VersionMismatch { path: String, found: String },
    #[error("{path}: checksum mismatch (file corrupted or edited)")]
    ChecksumMismatch { path: String },
    #[error("annotation references unknown video `{video}`")]
    UnknownVideo { video: String },
}

/// Orientation of edges linking states with the actions annotated during
/// them. The weight is `p(action | state)` either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ActionEdgeDirection {
    #[default]
    StateToAction,
    ActionToState,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GraphOptions {
    pub action_edge_direction: ActionEdgeDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    State,
    Action,
}

/// Weighted directed graph over manipulation states and actions, together
/// with the vocabularies needed to interpret its nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityGraph {
    object_vocab: ObjectVocab,
    action_vocab: ActionVocab,
    states: Vec<ManipulationState>,
    state_index: BTreeMap<ManipulationState, NodeIndex>,
    edges: BTreeMap<(NodeIndex, NodeIndex), f64>,
}

impl ActivityGraph {
    /// Assembles a graph from already-canonical parts: `states` sorted in
    /// tuple order, edges keyed by node index (states first, then actions
    /// by id), every node carrying its weight-1 self edge.
    pub fn from_parts(
        object_vocab: ObjectVocab,
        action_vocab: ActionVocab,
        states: Vec<ManipulationState>,
        edges: BTreeMap<(NodeIndex, NodeIndex), f64>,
    ) -> Self {
        for pair in states.windows(2) {
            assert!(
                pair[0] < pair[1],
                "states must be sorted and distinct: {:?} !< {:?}",
                pair[0],
                pair[1]
            );
        }
        let node_count = states.len() + action_vocab.len();
        for i in 0..node_count {
            assert_eq!(
                edges.get(&(i, i)),
                Some(&1.0),
                "node {i} is missing its weight-1 self edge"
            );
        }
        for (&(src, dst), &w) in &edges {
            assert!(
                src < node_count && dst < node_count,
                "edge ({src}, {dst}) out of range for {node_count} nodes"
            );
            assert!(
                (0.0..=1.0).contains(&w),
                "edge ({src}, {dst}) weight {w} outside [0, 1]"
            );
        }
        let state_index = states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
        ActivityGraph {
            object_vocab,
            action_vocab,
            states,
            state_index,
            edges,
        }
    }

    pub fn node_count(&self) -> usize {
        self.states.len() + self.action_vocab.len()
    }

    pub fn state_count(&self) -> usize {
        self.states.len()
    }

    pub fn action_count(&self) -> usize {
        self.action_vocab.len()
    }

    pub fn object_vocab(&self) -> &ObjectVocab {
        &self.object_vocab
    }

    pub fn action_vocab(&self) -> &ActionVocab {
        &self.action_vocab
    }

    pub fn states(&self) -> &[ManipulationState] {
        &self.states
    }

    pub fn state_node(&self, state: &ManipulationState) -> Option<NodeIndex> {
        self.state_index.get(state).copied()
    }

    pub fn action_node(&self, action_id: u32) -> NodeIndex {
        self.states.len() + action_id as usize
    }

    pub fn node_kind(&self, node: NodeIndex) -> NodeKind {
        if node < self.states.len() {
            NodeKind::State
        } else {
            NodeKind::Action
        }
    }

    /// All edges including self edges, keyed `(src, dst)`.
    pub fn edges(&self) -> &BTreeMap<(NodeIndex, NodeIndex), f64> {
        &self.edges
    }

    pub fn weight(&self, src: NodeIndex, dst: NodeIndex) -> f64 {
        self.edges.get(&(src, dst)).copied().unwrap_or(0.0)
    }
}

/// `weight(i -> j) = count(i immediately followed by j) / count(i followed
/// by anything)`, pooled over all sequences. Terminal occurrences add to no
/// denominator.
pub fn estimate_transitions(
    sequences: &[StateSequence],
) -> BTreeMap<(ManipulationState, ManipulationState), f64> {
    let mut counts: BTreeMap<ManipulationState, BTreeMap<ManipulationState, usize>> =
        BTreeMap::new();
    for seq in sequences {
        for pair in seq.items.windows(2) {
            *counts
                .entry(pair[0].state)
                .or_default()
                .entry(pair[1].state)
                .or_insert(0) += 1;
        }
    }
    let mut weights = BTreeMap::new();
    for (src, dsts) in counts {
        let denom: usize = dsts.values().sum();
        for (dst, count) in dsts {
            weights.insert((src, dst), count as f64 / denom as f64);
        }
    }
    weights
}

/// `weight(state -> action) = p(action | state)` over co-occurrences: an
/// action co-occurs with a state item when its `[start, stop)` span
/// overlaps the item's inclusive frame span.
pub fn estimate_action_edges(
    sequences: &[StateSequence],
    annotations: &[ActionAnnotation],
) -> Result<BTreeMap<(ManipulationState, u32), f64>, GraphError> {
    let by_video: BTreeMap<&str, &StateSequence> = sequences
        .iter()
        .map(|s| (s.video_id.as_str(), s))
        .collect();
    let mut counts: BTreeMap<ManipulationState, BTreeMap<u32, usize>> = BTreeMap::new();
    for ann in annotations {
        let seq = by_video
            .get(ann.video_id.as_str())
            .ok_or_else(|| GraphError::UnknownVideo {
                video: ann.video_id.clone(),
            })?;
        for item in &seq.items {
            if ann.start_frame <= item.end_frame && ann.stop_frame > item.start_frame {
                *counts
                    .entry(item.state)
                    .or_default()
                    .entry(ann.action_id)
                    .or_insert(0) += 1;
            }
        }
    }
    let mut weights = BTreeMap::new();
    for (state, actions) in counts {
        let denom: usize = actions.values().sum();
        for (action, count) in actions {
            weights.insert((state, action), count as f64 / denom as f64);
        }
    }
    Ok(weights)
}

/// Result of graph construction; `warnings` is non-empty for degenerate
/// inputs (e.g. no state sequences at all).
#[derive(Debug, Clone)]
pub struct GraphBuild {
    pub graph: ActivityGraph,
    pub warnings: Vec<String>,
}

/// Builds the consolidated graph. `sequences` should span every split
/// (transitions carry no labels); `train_annotations` must come from the
/// training split only. Action nodes cover the whole `action_vocab` whether
/// or not they received edges.
pub fn build_graph(
    sequences: &[StateSequence],
    train_annotations: &[ActionAnnotation],
    object_vocab: &ObjectVocab,
    action_vocab: &ActionVocab,
    options: GraphOptions,
) -> Result<GraphBuild, GraphError> {
    let mut warnings = Vec::new();

    let state_set: BTreeMap<ManipulationState, ()> = sequences
        .iter()
        .flat_map(|s| s.items.iter().map(|i| (i.state, ())))
        .collect();
    let states: Vec<ManipulationState> = state_set.into_keys().collect();
    if states.is_empty() {
        warnings.push("no state sequences: graph has only action nodes".to_string());
    }
    let state_index: BTreeMap<ManipulationState, NodeIndex> = states
        .iter()
        .enumerate()
        .map(|(i, s)| (*s, i))
        .collect();

    let mut edges: BTreeMap<(NodeIndex, NodeIndex), f64> = BTreeMap::new();
    let node_count = states.len() + action_vocab.len();
    for i in 0..node_count {
        edges.insert((i, i), 1.0);
    }
    for ((src, dst), w) in estimate_transitions(sequences) {
        let (i, j) = (state_index[&src], state_index[&dst]);
        if i == j {
            // A self transition cannot occur in deduplicated sequences, but
            // guard the self-edge weight anyway.
            continue;
        }
        edges.insert((i, j), w);
    }
    for ((state, action_id), w) in estimate_action_edges(sequences, train_annotations)? {
        let s = state_index[&state];
        let a = states.len() + action_id as usize;
        match options.action_edge_direction {
            ActionEdgeDirection::StateToAction => edges.insert((s, a), w),
            ActionEdgeDirection::ActionToState => edges.insert((a, s), w),
        };
    }

    Ok(GraphBuild {
        graph: ActivityGraph {
            object_vocab: object_vocab.clone(),
            action_vocab: action_vocab.clone(),
            states,
            state_index,
            edges,
        },
        warnings,
    })
}

/// Sparse row-stochastic matrix: every row sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStochasticMatrix {
    size: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl RowStochasticMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .iter()
            .find(|(col, _)| *col == j)
            .map(|(_, w)| *w)
            .unwrap_or(0.0)
    }

    /// Dense row-major copy, `size * size` values.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.size;
        let mut out = vec![0.0; n * n];
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                out[i * n + j] = w;
            }
        }
        out
    }
}

/// Divides each node's out-edge weights (self edge included) by their sum.
/// Self edges guarantee nonzero row sums, so isolated nodes become one-hot
/// rows.
pub fn normalize_adjacency(graph: &ActivityGraph) -> RowStochasticMatrix {
    let n = graph.node_count();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (&(src, dst), &w) in graph.edges() {
        rows[src].push((dst, w));
    }
    for row in &mut rows {
        let sum: f64 = row.iter().map(|(_, w)| w).sum();
        for (_, w) in row.iter_mut() {
            *w /= sum;
        }
    }
    RowStochasticMatrix { size: n, rows }
}

fn state_key(state: &ManipulationState) -> String {
    let slot = |s: Option<ObjectId>| match s {
        Some(id) => id.to_string(),
        None => "-".to_string(),
    };
    format!(
        "{}|{}|{}|{}",
        slot(state.contact_right),
        slot(state.contact_left),
        slot(state.anticipated_right),
        slot(state.anticipated_left)
    )
}

fn parse_state_key(path: &str, line: usize, key: &str) -> Result<ManipulationState, GraphError> {
    let parts: Vec<&str> = key.split('|').collect();
    if parts.len() != 4 {
        return Err(GraphError::Malformed {
            path: path.to_string(),
            line,
            msg: format!("state key `{key}` must have 4 `|`-separated slots"),
        });
    }
    let mut slots = [None; 4];
    for (i, p) in parts.iter().enumerate() {
        slots[i] = if *p == "-" {
            None
        } else {
            Some(p.parse::<ObjectId>().map_err(|_| GraphError::Malformed {
                path: path.to_string(),
                line,
                msg: format!("state key slot `{p}` is not an object id"),
            })?)
        };
    }
    Ok(ManipulationState {
        contact_right: slots[0],
        contact_left: slots[1],
        anticipated_right: slots[2],
        anticipated_left: slots[3],
    })
}

/// Renders the graph in the versioned text format. Identical graphs always
/// produce byte-identical output.
pub fn graph_to_string(graph: &ActivityGraph) -> String {
    let mut body = String::new();
    writeln!(body, "{GRAPH_MAGIC}").unwrap();
    writeln!(body, "objects {}", graph.object_vocab.len()).unwrap();
    for obj in graph.object_vocab.iter() {
        writeln!(body, "O {} {}", obj.id, obj.noun).unwrap();
    }
    writeln!(body, "nodes {}", graph.node_count()).unwrap();
    for (i, state) in graph.states.iter().enumerate() {
        writeln!(body, "N {i} S {}", state_key(state)).unwrap();
    }
    for a in 0..graph.action_vocab.len() as u32 {
        let (verb, noun) = graph.action_vocab.pair(a).expect("action id in range");
        writeln!(body, "N {} A {a} {verb} {noun}", graph.action_node(a)).unwrap();
    }
    writeln!(body, "edges {}", graph.edges.len()).unwrap();
    for (&(src, dst), &w) in &graph.edges {
        writeln!(body, "E {src} {dst} {w:.16e}").unwrap();
    }
    let digest = Sha256::digest(body.as_bytes());
    writeln!(body, "checksum {digest:x}").unwrap();
    body
}

pub fn serialize_graph(graph: &ActivityGraph, path: &Path) -> Result<(), GraphError> {
    fs::write(path, graph_to_string(graph)).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn deserialize_graph(path: &Path) -> Result<ActivityGraph, GraphError> {
    let text = fs::read_to_string(path).map_err(|source| GraphError::Io {
        path: path.display().to_string(),
        source,
    })?;
    graph_from_string(&path.display().to_string(), &text)
}

struct LineReader<'a> {
    path: &'a str,
    lines: std::str::Lines<'a>,
    line_no: usize,
}

impl<'a> LineReader<'a> {
    fn next(&mut self, expect: &str) -> Result<(usize, &'a str), GraphError> {
        match self.lines.next() {
            Some(l) => {
                self.line_no += 1;
                Ok((self.line_no, l))
            }
            None => Err(GraphError::Malformed {
                path: self.path.to_string(),
                line: self.line_no + 1,
                msg: format!("unexpected end of file, expected {expect}"),
            }),
        }
    }
}

fn section_count(
    path: &str,
    line_no: usize,
    line: &str,
    section: &str,
) -> Result<usize, GraphError> {
    let rest = line
        .strip_prefix(section)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| GraphError::Malformed {
            path: path.to_string(),
            line: line_no,
            msg: format!("expected `{section} <count>`, got `{line}`"),
        })?;
    rest.parse::<usize>().map_err(|_| GraphError::Malformed {
        path: path.to_string(),
        line: line_no,
        msg: format!("`{section}` count `{rest}` is not an integer"),
    })
}

pub fn graph_from_string(path: &str, text: &str) -> Result<ActivityGraph, GraphError> {
    // The checksum covers every byte up to and including the final edge
    // line; verify before interpreting anything else.
    let trimmed = text.strip_suffix('\n').unwrap_or(text);
    let (body, checksum_line) = match trimmed.rfind('\n') {
        Some(pos) => (&text[..pos + 1], &trimmed[pos + 1..]),
        None => (text, trimmed),
    };
    let declared = checksum_line.strip_prefix("checksum ").ok_or_else(|| {
        GraphError::Malformed {
            path: path.to_string(),
            line: text.lines().count(),
            msg: "missing trailing `checksum <hex>` line".to_string(),
        }
    })?;
    let digest = format!("{:x}", Sha256::digest(body.as_bytes()));
    if digest != declared {
        return Err(GraphError::ChecksumMismatch {
            path: path.to_string(),
        });
    }

    let mut reader = LineReader {
        path,
        lines: body.lines(),
        line_no: 0,
    };
    let (_, header) = reader.next("header")?;
    if header != GRAPH_MAGIC {
        return Err(GraphError::VersionMismatch {
            path: path.to_string(),
            found: header.to_string(),
        });
    }

    let (ln, line) = reader.next("`objects` section")?;
    let object_count = section_count(path, ln, line, "objects")?;
    let mut nouns = Vec::with_capacity(object_count);
    for expected_id in 0..object_count {
        let (ln, line) = reader.next("object line")?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 || parts[0] != "O" {
            return Err(GraphError::Malformed {
                path: path.to_string(),
                line: ln,
                msg: format!("expected `O <id> <noun>`, got `{line}`"),
            });
        }
        let id: usize = parts[1].parse().map_err(|_| GraphError::Malformed {
            path: path.to_string(),
            line: ln,
            msg: format!("object id `{}` is not an integer", parts[1]),
        })?;
        if id != expected_id {
            return Err(GraphError::Malformed {
                path: path.to_string(),
                line: ln,
                msg: format!("object ids must be dense and ordered; expected {expected_id}, got {id}"),
            });
        }
        nouns.push(parts[2].to_string());
    }
    let object_vocab = ObjectVocab::from_nouns(&nouns);
    if object_vocab.len() != nouns.len() {
        return Err(GraphError::Malformed {
            path: path.to_string(),
            line: reader.line_no,
            msg: "object section contains duplicate nouns".to_string(),
        });
    }
    // Ids in the file must agree with the vocabulary's canonical order.
    for (id, noun) in nouns.iter().enumerate() {
        if object_vocab.id(noun) != Some(id as ObjectId) {
            return Err(GraphError::Malformed {
                path: path.to_string(),
                line: reader.line_no,
                msg: format!("object `{noun}` is out of canonical (sorted) order"),
            });
        }
    }

    let (ln, line) = reader.next("`nodes` section")?;
    let node_count = section_count(path, ln, line, "nodes")?;
    let mut states: Vec<ManipulationState> = Vec::new();
    let mut action_pairs: Vec<(String, String)> = Vec::new();
    let mut in_actions = false;
    for expected_idx in 0..node_count {
        let (ln, line) = reader.next("node line")?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() < 3 || parts[0] != "N" {
            return Err(GraphError::Malformed {
                path: path.to_string(),
                line: ln,
                msg: format!("expected `N <index> <kind> <key>`, got `{line}`"),
            });
        }
        let idx: usize = parts[1].parse().map_err(|_| GraphError::Malformed {
            path: path.to_string(),
            line: ln,
            msg: format!("node index `{}` is not an integer", parts[1]),
        })?;
        if idx != expected_idx {
            return Err(GraphError::Malformed {
                path: path.to_string(),
                line: ln,
                msg: format!("node indices must be dense; expected {expected_idx}, got {idx}"),
            });
        }
        match parts[2] {
            "S" => {
                if in_actions {
                    return Err(GraphError::Malformed {
                        path: path.to_string(),
                        line: ln,
                        msg: "state node after action nodes".to_string(),
                    });
                }
                if parts.len() != 4 {
                    return Err(GraphError::Malformed {
                        path: path.to_string(),
                        line: ln,
                        msg: format!("expected `N <index> S <key>`, got `{line}`"),
                    });
                }
                let state = parse_state_key(path, ln, parts[3])?;
                for id in state.distinct_objects() {
                    if (id as usize) >= object_vocab.len() {
                        return Err(GraphError::Malformed {
                            path: path.to_string(),
                            line: ln,
                            msg: format!("state references unknown object id {id}"),
                        });
                    }
                }
                if let Some(prev) = states.last() {
                    if prev >= &state {
                        return Err(GraphError::Malformed {
                            path: path.to_string(),
                            line: ln,
                            msg: "state nodes out of canonical order".to_string(),
                        });
                    }
                }
                states.push(state);
            }
            "A" => {
                in_actions = true;
                if parts.len() != 6 {
                    return Err(GraphError::Malformed {
                        path: path.to_string(),
                        line: ln,
                        msg: format!("expected `N <index> A <action_id> <verb> <noun>`, got `{line}`"),
                    });
                }
                let action_id: usize = parts[3].parse().map_err(|_| GraphError::Malformed {
                    path: path.to_string(),
                    line: ln,
                    msg: format!("action id `{}` is not an integer", parts[3]),
                })?;
                if action_id != action_pairs.len() || idx != states.len() + action_id {
                    return Err(GraphError::Malformed {
                        path: path.to_string(),
                        line: ln,
                        msg: format!("action id {action_id} inconsistent with node index {idx}"),
                    });
                }
                action_pairs.push((parts[4].to_string(), parts[5].to_string()));
            }
            other => {
                return Err(GraphError::Malformed {
                    path: path.to_string(),
                    line: ln,
                    msg: format!("unknown node kind `{other}` (expected S or A)"),
                });
            }
        }
    }
    let action_vocab = ActionVocab::from_pairs(action_pairs.iter().cloned());
    if action_vocab.len() != action_pairs.len() {
        return Err(GraphError::Malformed {
            path: path.to_string(),
            line: reader.line_no,
            msg: "duplicate action (verb, noun) pairs".to_string(),
        });
    }
    for (id, (verb, noun)) in action_pairs.iter().enumerate() {
        if action_vocab.id(verb, noun) != Some(id as u32) {
            return Err(GraphError::Malformed {
                path: path.to_string(),
                line: reader.line_no,
                msg: format!("action ({verb}, {noun}) is out of canonical order"),
            });
        }
    }

    let (ln, line) = reader.next("`edges` section")?;
    let edge_count = section_count(path, ln, line, "edges")?;
    let mut edges: BTreeMap<(NodeIndex, NodeIndex), f64> = BTreeMap::new();
    for _ in 0..edge_count {
        let (ln, line) = reader.next("edge line")?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 4 || parts[0] != "E" {
            return Err(GraphError::Malformed {
                path: path.to_string(),
                line: ln,
                msg: format!("expected `E <src> <dst> <weight>`, got `{line}`"),
            });
        }
        let src: usize = parts[1].parse().map_err(|_| GraphError::Malformed {
            path: path.to_string(),
            line: ln,
            msg: format!("edge source `{}` is not an integer", parts[1]),
        })?;
        let dst: usize = parts[2].parse().map_err(|_| GraphError::Malformed {
            path: path.to_string(),
            line: ln,
            msg: format!("edge target `{}` is not an integer", parts[2]),
        })?;
        if src >= node_count || dst >= node_count {
            return Err(GraphError::Malformed {
                path: path.to_string(),
                line: ln,
                msg: format!("edge ({src}, {dst}) references a node out of range"),
            });
        }
        let w: f64 = parts[3].parse().map_err(|_| GraphError::Malformed {
            path: path.to_string(),
            line: ln,
            msg: format!("edge weight `{}` is not a decimal", parts[3]),
        })?;
        if !(0.0..=1.0).contains(&w) {
            return Err(GraphError::Malformed {
                path: path.to_string(),
                line: ln,
                msg: format!("edge weight {w} outside [0, 1]"),
            });
        }
        if edges.insert((src, dst), w).is_some() {
            return Err(GraphError::Malformed {
                path: path.to_string(),
                line: ln,
                msg: format!("duplicate edge ({src}, {dst})"),
            });
        }
    }
    for i in 0..node_count {
        if edges.get(&(i, i)) != Some(&1.0) {
            return Err(GraphError::Malformed {
                path: path.to_string(),
                line: reader.line_no,
                msg: format!("node {i} is missing its weight-1 self edge"),
            });
        }
    }

    let state_index = states.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    Ok(ActivityGraph {
        object_vocab,
        action_vocab,
        states,
        state_index,
        edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{StateItem, StateSequence};

    fn st(contact: ObjectId) -> ManipulationState {
        ManipulationState {
            contact_right: Some(contact),
            ..ManipulationState::NULL
        }
    }

    fn seq(video: &str, states: &[ManipulationState]) -> StateSequence {
        // 10 frames per item, back to back.
        StateSequence {
            video_id: video.to_string(),
            items: states
                .iter()
                .enumerate()
                .map(|(i, s)| StateItem {
                    state: *s,
                    start_frame: (i * 10) as u32,
                    end_frame: (i * 10 + 9) as u32,
                })
                .collect(),
        }
    }

    #[test]
    fn transition_estimates_match_counting() {
        let (a, b) = (st(0), st(1));
        let w = estimate_transitions(&[seq("v", &[a, b, a, b])]);
        assert_eq!(w[&(a, b)], 1.0);
        assert_eq!(w[&(b, a)], 1.0);

        let w = estimate_transitions(&[seq("v1", &[a, b]), seq("v2", &[a, st(2)])]);
        assert_eq!(w[&(a, b)], 0.5);
        assert_eq!(w[&(a, st(2))], 0.5);

        let w = estimate_transitions(&[seq("v", &[a])]);
        assert!(w.is_empty());
    }

    fn ann(video: &str, start: u32, stop: u32, action_id: u32) -> ActionAnnotation {
        ActionAnnotation {
            video_id: video.to_string(),
            start_frame: start,
            stop_frame: stop,
            verb: format!("verb{action_id}"),
            noun: format!("noun{action_id}"),
            action_id,
        }
    }

    #[test]
    fn action_edge_weights_are_conditional_on_state() {
        let b = st(1);
        let sequences = vec![
            seq("v1", &[b]),
            seq("v2", &[b]),
            seq("v3", &[b]),
        ];
        let annotations = vec![
            ann("v1", 0, 5, 0),
            ann("v2", 0, 5, 0),
            ann("v3", 0, 5, 1),
        ];
        let w = estimate_action_edges(&sequences, &annotations).unwrap();
        assert!((w[&(b, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((w[&(b, 1)] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn action_edge_overlap_is_half_open() {
        let a = st(0);
        let sequences = vec![seq("v", &[a])]; // span [0, 9]
        // Annotation [9, 20) touches the last frame -> counted.
        let w = estimate_action_edges(&sequences, &[ann("v", 9, 20, 0)]).unwrap();
        assert_eq!(w[&(a, 0)], 1.0);
        // Annotation [10, 20) starts after the span ends -> not counted.
        let w = estimate_action_edges(&sequences, &[ann("v", 10, 20, 0)]).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn action_edges_unknown_video_errors() {
        let err = estimate_action_edges(&[seq("v", &[st(0)])], &[ann("other", 0, 5, 0)]);
        assert!(matches!(err, Err(GraphError::UnknownVideo { .. })));
    }

    fn toy_vocabs() -> (ObjectVocab, ActionVocab) {
        let objects = ObjectVocab::from_nouns(["knife", "pan", "spoon"]);
        let actions = ActionVocab::from_pairs([
            ("cut".to_string(), "pepper".to_string()),
            ("stir".to_string(), "pot".to_string()),
        ]);
        (objects, actions)
    }

    #[test]
    fn build_graph_three_node_example() {
        let (objects, _) = toy_vocabs();
        let actions = ActionVocab::from_pairs([("cut".to_string(), "pepper".to_string())]);
        let (a, b) = (st(0), st(1));
        let sequences = vec![seq("v", &[a, b])];
        let annotations = vec![ann_with("v", 12, 18, 0, "cut", "pepper")];
        let built = build_graph(&sequences, &annotations, &objects, &actions, GraphOptions::default())
            .unwrap();
        let g = built.graph;
        assert!(built.warnings.is_empty());
        assert_eq!(g.node_count(), 3);
        let (ia, ib) = (g.state_node(&a).unwrap(), g.state_node(&b).unwrap());
        let act = g.action_node(0);
        assert_eq!(g.weight(ia, ia), 1.0);
        assert_eq!(g.weight(ib, ib), 1.0);
        assert_eq!(g.weight(act, act), 1.0);
        assert_eq!(g.weight(ia, ib), 1.0);
        assert_eq!(g.weight(ib, act), 1.0);
        assert_eq!(g.edges().len(), 5);
    }

    fn ann_with(
        video: &str,
        start: u32,
        stop: u32,
        action_id: u32,
        verb: &str,
        noun: &str,
    ) -> ActionAnnotation {
        ActionAnnotation {
            video_id: video.to_string(),
            start_frame: start,
            stop_frame: stop,
            verb: verb.to_string(),
            noun: noun.to_string(),
            action_id,
        }
    }

    #[test]
    fn build_graph_without_annotations_has_only_transitions() {
        let (objects, actions) = toy_vocabs();
        let built = build_graph(
            &[seq("v", &[st(0), st(1)])],
            &[],
            &objects,
            &actions,
            GraphOptions::default(),
        )
        .unwrap();
        let g = built.graph;
        // 2 states + 2 actions, self edges + one transition.
        assert_eq!(g.node_count(), 4);
        assert_eq!(g.edges().len(), 5);
    }

    #[test]
    fn build_graph_dedups_states_across_videos() {
        let (objects, actions) = toy_vocabs();
        let built = build_graph(
            &[seq("v1", &[st(0)]), seq("v2", &[st(0)])],
            &[],
            &objects,
            &actions,
            GraphOptions::default(),
        )
        .unwrap();
        assert_eq!(built.graph.state_count(), 1);
    }

    #[test]
    fn build_graph_empty_input_warns() {
        let (objects, actions) = toy_vocabs();
        let built =
            build_graph(&[], &[], &objects, &actions, GraphOptions::default()).unwrap();
        assert_eq!(built.graph.state_count(), 0);
        assert_eq!(built.graph.node_count(), 2);
        assert!(!built.warnings.is_empty());
    }

    #[test]
    fn build_graph_is_permutation_invariant() {
        let (objects, actions) = toy_vocabs();
        let sequences = vec![
            seq("v1", &[st(0), st(1), st(2)]),
            seq("v2", &[st(2), st(0)]),
            seq("v3", &[st(1), st(2)]),
        ];
        let annotations = vec![
            ann_with("v1", 0, 9, 0, "cut", "pepper"),
            ann_with("v2", 0, 9, 1, "stir", "pot"),
        ];
        let forward = build_graph(&sequences, &annotations, &objects, &actions, GraphOptions::default())
            .unwrap()
            .graph;
        let mut shuffled = sequences.clone();
        shuffled.reverse();
        let mut anns = annotations.clone();
        anns.reverse();
        let backward = build_graph(&shuffled, &anns, &objects, &actions, GraphOptions::default())
            .unwrap()
            .graph;
        assert_eq!(forward, backward);
        assert_eq!(graph_to_string(&forward), graph_to_string(&backward));
    }

    #[test]
    fn action_to_state_direction_flips_edges() {
        let (objects, actions) = toy_vocabs();
        let sequences = vec![seq("v", &[st(0)])];
        let annotations = vec![ann_with("v", 0, 5, 0, "cut", "pepper")];
        let g = build_graph(
            &sequences,
            &annotations,
            &objects,
            &actions,
            GraphOptions {
                action_edge_direction: ActionEdgeDirection::ActionToState,
            },
        )
        .unwrap()
        .graph;
        let s = g.state_node(&st(0)).unwrap();
        let a = g.action_node(0);
        assert_eq!(g.weight(a, s), 1.0);
        assert_eq!(g.weight(s, a), 0.0);
    }

    #[test]
    fn normalize_rows_are_stochastic() {
        let (objects, actions) = toy_vocabs();
        let built = build_graph(
            &[seq("v", &[st(0), st(1), st(0), st(2)])],
            &[ann_with("v", 0, 25, 0, "cut", "pepper")],
            &objects,
            &actions,
            GraphOptions::default(),
        )
        .unwrap();
        let adj = normalize_adjacency(&built.graph);
        for i in 0..adj.size() {
            let sum: f64 = adj.row(i).iter().map(|(_, w)| w).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
            assert!(adj.row(i).iter().all(|&(_, w)| w >= 0.0));
        }
        // Isolated action node: one-hot at itself.
        let iso = built.graph.action_node(1);
        assert_eq!(adj.row(iso), &[(iso, 1.0)]);
        // Node with self edge 1 and a single out-edge 1 -> 0.5 / 0.5.
        let b = built.graph.state_node(&st(1)).unwrap();
        let a = built.graph.state_node(&st(0)).unwrap();
        assert_eq!(adj.entry(b, b), 0.5);
        assert_eq!(adj.entry(b, a), 0.5);
    }

    #[test]
    fn serialization_round_trips() {
        let (objects, actions) = toy_vocabs();
        // Empty graph.
        let empty = build_graph(&[], &[], &objects, &actions, GraphOptions::default())
            .unwrap()
            .graph;
        let text = graph_to_string(&empty);
        assert_eq!(graph_from_string("t", &text).unwrap(), empty);

        // Small populated graph.
        let g = build_graph(
            &[seq("v", &[st(0), st(1)])],
            &[ann_with("v", 12, 18, 0, "cut", "pepper")],
            &objects,
            &actions,
            GraphOptions::default(),
        )
        .unwrap()
        .graph;
        let text = graph_to_string(&g);
        assert_eq!(graph_from_string("t", &text).unwrap(), g);
    }

    #[test]
    fn deserialization_rejects_corruption() {
        let (objects, actions) = toy_vocabs();
        let g = build_graph(
            &[seq("v", &[st(0), st(1)])],
            &[],
            &objects,
            &actions,
            GraphOptions::default(),
        )
        .unwrap()
        .graph;
        let text = graph_to_string(&g);

        // Flip one weight digit: checksum must catch it.
        let tampered = text.replace("E 0 0 1.0", "E 0 0 0.9");
        assert!(matches!(
            graph_from_string("t", &tampered),
            Err(GraphError::ChecksumMismatch { .. })
        ));

        // Wrong version header.
        let wrong = text.replace("EGO-OMG-GRAPH v1", "EGO-OMG-GRAPH v9");
        // Re-checksum so the version check is what fires.
        let body_end = wrong.rfind("checksum").unwrap();
        let body = &wrong[..body_end];
        let digest = Sha256::digest(body.as_bytes());
        let rebuilt = format!("{body}checksum {digest:x}\n");
        assert!(matches!(
            graph_from_string("t", &rebuilt),
            Err(GraphError::VersionMismatch { .. })
        ));
    }
}
