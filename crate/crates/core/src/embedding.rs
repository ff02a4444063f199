//! Pretrained word-embedding tables and node feature matrices.
//!
//! State rows average the embeddings of the distinct nouns occupying the
//! state's slots; action rows average the verb and noun embeddings.
//! Multi-word tokens (`cutting:board`) embed as the mean of their
//! sub-token vectors, and out-of-vocabulary sub-tokens contribute zeros.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::ActivityGraph;
use crate::trace::{ManipulationState, ObjectVocab};

const FEATURES_MAGIC: &str = "EGO-OMG-FEATURES v1";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("failed to read {path}: {source}")]
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
    #[error("{path}: expected header `{FEATURES_MAGIC}`, found `{found}`")]
    VersionMismatch { path: String, found: String },
    #[error("{path}: checksum mismatch (file corrupted or edited)")]
    ChecksumMismatch { path: String },
}

/// token -> vector map with a single shared dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dimension: usize) -> Self {
        EmbeddingTable {
            dimension,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) {
        assert_eq!(
            vector.len(),
            self.dimension,
            "embedding for `{token}` has dimension {} but table has {}",
            vector.len(),
            self.dimension
        );
        self.entries.insert(token.to_string(), vector);
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(token).map(|v| v.as_slice())
    }

    /// Embedding of a possibly multi-word token: the mean over ':'-separated
    /// sub-tokens, each OOV sub-token contributing the zero vector.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dimension];
        let mut count = 0usize;
        for sub in token.split(':') {
            count += 1;
            if let Some(v) = self.entries.get(sub) {
                for (a, x) in acc.iter_mut().zip(v) {
                    *a += x;
                }
            }
        }
        if count > 0 {
            for a in &mut acc {
                *a /= count as f64;
            }
        }
        acc
    }
}

/// Parses `token v1 v2 ... vm` lines. The dimension is inferred from the
/// first entry; every later line must agree. Tokens are lowercased.
pub fn parse_embedding_file(path: &Path) -> Result<EmbeddingTable, EmbedError> {
    let text = fs::read_to_string(path).map_err(|source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_embedding_str(&path.display().to_string(), &text)
}

pub fn parse_embedding_str(path: &str, text: &str) -> Result<EmbeddingTable, EmbedError> {
    let mut dimension: Option<usize> = None;
    let mut entries: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let token = fields.next().expect("non-empty line has a first field");
        let mut vector = Vec::new();
        for field in fields {
            let v: f64 = field.parse().map_err(|_| EmbedError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: format!("value `{field}` for token `{token}` is not a decimal"),
            })?;
            if !v.is_finite() {
                return Err(EmbedError::Malformed {
                    path: path.to_string(),
                    line: line_no,
                    msg: format!("value `{field}` for token `{token}` is not finite"),
                });
            }
            vector.push(v);
        }
        if vector.is_empty() {
            return Err(EmbedError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: format!("token `{token}` has no vector values"),
            });
        }
        match dimension {
            None => dimension = Some(vector.len()),
            Some(m) if m != vector.len() => {
                return Err(EmbedError::Malformed {
                    path: path.to_string(),
                    line: line_no,
                    msg: format!(
                        "token `{token}` has dimension {} but the table has {m}",
                        vector.len()
                    ),
                });
            }
            Some(_) => {}
        }
        let token = token.to_lowercase();
        if entries.insert(token.clone(), vector).is_some() {
            return Err(EmbedError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: format!("duplicate token `{token}`"),
            });
        }
    }
    Ok(EmbeddingTable {
        dimension: dimension.unwrap_or(0),
        entries,
    })
}

/// Dense row-major feature matrix, one row per graph node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FeatureMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Which node features to build.
#[derive(Debug, Clone, Copy)]
pub enum FeatureSource<'a> {
    Embeddings(&'a EmbeddingTable),
    Identity,
}

/// Mean embedding over the nouns occupying the state's non-empty slots.
/// With `count_duplicate_nouns` a noun held in two slots is counted twice;
/// by default each distinct noun counts once. The all-`None` state maps to
/// the zero vector.
pub fn state_features(
    state: &ManipulationState,
    vocab: &ObjectVocab,
    table: &EmbeddingTable,
    count_duplicate_nouns: bool,
) -> Vec<f64> {
    let ids: Vec<_> = if count_duplicate_nouns {
        state.slots().into_iter().flatten().collect()
    } else {
        state.distinct_objects()
    };
    let mut acc = vec![0.0; table.dimension()];
    if ids.is_empty() {
        return acc;
    }
    for id in &ids {
        let noun = vocab.noun(*id).expect("state object id is in vocabulary");
        for (a, x) in acc.iter_mut().zip(table.token_vector(noun)) {
            *a += x;
        }
    }
    for a in &mut acc {
        *a /= ids.len() as f64;
    }
    acc
}

/// Mean of the verb and noun embeddings.
pub fn action_features(verb: &str, noun: &str, table: &EmbeddingTable) -> Vec<f64> {
    let v = table.token_vector(verb);
    let n = table.token_vector(noun);
    v.iter().zip(&n).map(|(a, b)| (a + b) / 2.0).collect()
}

/// Builds the node feature matrix in graph node order: states first, then
/// actions. Identity mode yields the z-by-z identity matrix.
pub fn build_feature_matrix(
    graph: &ActivityGraph,
    source: FeatureSource<'_>,
    count_duplicate_nouns: bool,
) -> FeatureMatrix {
    let z = graph.node_count();
    match source {
        FeatureSource::Identity => FeatureMatrix::identity(z),
        FeatureSource::Embeddings(table) => {
            let mut features = FeatureMatrix::zeros(z, table.dimension());
            for (i, state) in graph.states().iter().enumerate() {
                let row = state_features(state, graph.object_vocab(), table, count_duplicate_nouns);
                features.row_mut(i).copy_from_slice(&row);
            }
            for a in 0..graph.action_count() as u32 {
                let (verb, noun) = graph.action_vocab().pair(a).expect("action id in range");
                let row = action_features(verb, noun, table);
                features
                    .row_mut(graph.action_node(a))
                    .copy_from_slice(&row);
            }
            features
        }
    }
}

/// Renders a feature matrix in the versioned text format used by the
/// `features` command. Deterministic for identical inputs.
pub fn features_to_string(features: &FeatureMatrix) -> String {
    let mut body = String::new();
    writeln!(body, "{FEATURES_MAGIC}").unwrap();
    writeln!(body, "rows {}", features.rows).unwrap();
    writeln!(body, "cols {}", features.cols).unwrap();
    for i in 0..features.rows {
        let row: Vec<String> = features.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(body, "{}", row.join(" ")).unwrap();
    }
    let digest = Sha256::digest(body.as_bytes());
    writeln!(body, "checksum {digest:x}").unwrap();
    body
}

pub fn write_features(features: &FeatureMatrix, path: &Path) -> Result<(), EmbedError> {
    fs::write(path, features_to_string(features)).map_err(|source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix, EmbedError> {
    let text = fs::read_to_string(path).map_err(|source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    })?;
    features_from_string(&path.display().to_string(), &text)
}

pub fn features_from_string(path: &str, text: &str) -> Result<FeatureMatrix, EmbedError> {
    let trimmed = text.strip_suffix('\n').unwrap_or(text);
    let (body, checksum_line) = match trimmed.rfind('\n') {
        Some(pos) => (&text[..pos + 1], &trimmed[pos + 1..]),
        None => (text, trimmed),
    };
    let declared = checksum_line
        .strip_prefix("checksum ")
        .ok_or_else(|| EmbedError::Malformed {
            path: path.to_string(),
            line: text.lines().count(),
            msg: "missing trailing `checksum <hex>` line".to_string(),
        })?;
    let digest = format!("{:x}", Sha256::digest(body.as_bytes()));
    if digest != declared {
        return Err(EmbedError::ChecksumMismatch {
            path: path.to_string(),
        });
    }

    let mut lines = body.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| EmbedError::Malformed {
        path: path.to_string(),
        line: 1,
        msg: "empty file".to_string(),
    })?;
    if header != FEATURES_MAGIC {
        return Err(EmbedError::VersionMismatch {
            path: path.to_string(),
            found: header.to_string(),
        });
    }
    let mut dim = |name: &str| -> Result<usize, EmbedError> {
        let (idx, line) = lines.next().ok_or_else(|| EmbedError::Malformed {
            path: path.to_string(),
            line: 2,
            msg: format!("missing `{name} <count>` line"),
        })?;
        line.strip_prefix(name)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|r| r.parse::<usize>().ok())
            .ok_or_else(|| EmbedError::Malformed {
                path: path.to_string(),
                line: idx + 1,
                msg: format!("expected `{name} <count>`, got `{line}`"),
            })
    };
    let rows = dim("rows")?;
    let cols = dim("cols")?;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let (idx, line) = lines.next().ok_or_else(|| EmbedError::Malformed {
            path: path.to_string(),
            line: rows + 3,
            msg: "fewer data rows than declared".to_string(),
        })?;
        let mut count = 0;
        for field in line.split(' ') {
            let v: f64 = field.parse().map_err(|_| EmbedError::Malformed {
                path: path.to_string(),
                line: idx + 1,
                msg: format!("value `{field}` is not a decimal"),
            })?;
            data.push(v);
            count += 1;
        }
        if count != cols {
            return Err(EmbedError::Malformed {
                path: path.to_string(),
                line: idx + 1,
                msg: format!("expected {cols} values, got {count}"),
            });
        }
    }
    Ok(FeatureMatrix { rows, cols, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, GraphOptions};
    use crate::trace::{ActionVocab, StateItem, StateSequence};

    #[test]
    fn parse_infers_dimension_from_first_line() {
        let t = parse_embedding_str("e", "pan 0.5 -0.25 1.0\n").unwrap();
        assert_eq!(t.dimension(), 3);
        assert_eq!(t.get("pan"), Some(&[0.5, -0.25, 1.0][..]));
    }

    #[test]
    fn parse_rejects_dimension_mismatch_naming_line() {
        let err = parse_embedding_str("e", "pan 1 2 3\nknife 1 2 3 4\n").unwrap_err();
        match err {
            EmbedError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_duplicates_and_non_numeric() {
        assert!(parse_embedding_str("e", "pan 1 2\npan 3 4\n").is_err());
        assert!(parse_embedding_str("e", "pan 1 x\n").is_err());
        assert!(parse_embedding_str("e", "pan 1 nan\n").is_err());
    }

    fn toy_table() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(2);
        t.insert("knife", vec![1.0, 0.0]);
        t.insert("board", vec![0.0, 1.0]);
        t.insert("cutting", vec![2.0, 0.0]);
        t.insert("cut", vec![2.0, 0.0]);
        t.insert("pepper", vec![0.0, 2.0]);
        t
    }

    fn state(cr: Option<u32>, al: Option<u32>) -> ManipulationState {
        ManipulationState {
            contact_right: cr,
            contact_left: None,
            anticipated_right: None,
            anticipated_left: al,
        }
    }

    #[test]
    fn state_features_averages_distinct_nouns() {
        let vocab = ObjectVocab::from_nouns(["board", "knife"]);
        let table = toy_table();
        let s = state(vocab.id("knife"), vocab.id("board"));
        let f = state_features(&s, &vocab, &table, false);
        assert_eq!(f, vec![0.5, 0.5]);
    }

    #[test]
    fn state_features_null_state_is_zero() {
        let vocab = ObjectVocab::from_nouns(["knife"]);
        let f = state_features(&ManipulationState::NULL, &vocab, &toy_table(), false);
        assert_eq!(f, vec![0.0, 0.0]);
    }

    #[test]
    fn state_features_duplicate_slot_counts_once_by_default() {
        let vocab = ObjectVocab::from_nouns(["knife"]);
        let table = toy_table();
        let s = ManipulationState {
            contact_right: vocab.id("knife"),
            anticipated_right: vocab.id("knife"),
            ..ManipulationState::NULL
        };
        assert_eq!(state_features(&s, &vocab, &table, false), vec![1.0, 0.0]);
        assert_eq!(state_features(&s, &vocab, &table, true), vec![1.0, 0.0]);
    }

    #[test]
    fn multi_word_noun_averages_sub_tokens() {
        let table = toy_table();
        let v = table.token_vector("cutting:board");
        // mean([2,0], [0,1])
        assert_eq!(v, vec![1.0, 0.5]);
    }

    #[test]
    fn action_features_averages_verb_and_noun() {
        let table = toy_table();
        assert_eq!(action_features("cut", "pepper", &table), vec![1.0, 1.0]);
        // OOV verb contributes the zero vector.
        assert_eq!(action_features("slice", "knife", &table), vec![0.5, 0.0]);
        // verb == noun: mean of identical vectors.
        assert_eq!(action_features("cut", "cut", &table), vec![2.0, 0.0]);
    }

    #[test]
    fn slot_permutation_of_same_noun_set_is_invariant() {
        let vocab = ObjectVocab::from_nouns(["board", "knife"]);
        let table = toy_table();
        let a = ManipulationState {
            contact_right: vocab.id("knife"),
            contact_left: vocab.id("board"),
            ..ManipulationState::NULL
        };
        let b = ManipulationState {
            contact_right: vocab.id("board"),
            anticipated_left: vocab.id("knife"),
            ..ManipulationState::NULL
        };
        assert_eq!(
            state_features(&a, &vocab, &table, false),
            state_features(&b, &vocab, &table, false)
        );
    }

    fn toy_graph() -> ActivityGraph {
        let objects = ObjectVocab::from_nouns(["board", "knife"]);
        let actions = ActionVocab::from_pairs([("cut".to_string(), "pepper".to_string())]);
        let seq = StateSequence {
            video_id: "v".to_string(),
            items: vec![
                StateItem {
                    state: state(objects.id("knife"), None),
                    start_frame: 0,
                    end_frame: 9,
                },
                StateItem {
                    state: state(objects.id("board"), None),
                    start_frame: 10,
                    end_frame: 19,
                },
            ],
        };
        build_graph(&[seq], &[], &objects, &actions, GraphOptions::default())
            .unwrap()
            .graph
    }

    #[test]
    fn identity_mode_is_exact_identity() {
        let graph = toy_graph();
        let f = build_feature_matrix(&graph, FeatureSource::Identity, false);
        assert_eq!(f.rows, 3);
        assert_eq!(f.cols, 3);
        assert_eq!(f, FeatureMatrix::identity(3));
    }

    #[test]
    fn embedding_mode_rows_match_per_node_features() {
        let graph = toy_graph();
        let table = toy_table();
        let f = build_feature_matrix(&graph, FeatureSource::Embeddings(&table), false);
        assert_eq!(f.rows, graph.node_count());
        assert_eq!(f.cols, 2);
        for (i, s) in graph.states().iter().enumerate() {
            assert_eq!(
                f.row(i),
                state_features(s, graph.object_vocab(), &table, false)
            );
        }
        assert_eq!(
            f.row(graph.action_node(0)),
            action_features("cut", "pepper", &table)
        );
        assert!(f.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn all_oov_vocabulary_yields_finite_zero_rows() {
        let graph = toy_graph();
        let empty = EmbeddingTable::new(4);
        let f = build_feature_matrix(&graph, FeatureSource::Embeddings(&empty), false);
        assert!(f.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn feature_file_round_trips() {
        let graph = toy_graph();
        let f = build_feature_matrix(&graph, FeatureSource::Embeddings(&toy_table()), false);
        let text = features_to_string(&f);
        let back = features_from_string("t", &text).unwrap();
        assert_eq!(back, f);

        let tampered = text.replace("rows 3", "rows 2");
        assert!(matches!(
            features_from_string("t", &tampered),
            Err(EmbedError::ChecksumMismatch { .. })
        ));
    }
}
