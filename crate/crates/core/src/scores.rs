//! Per-segment softmax-score files.
//!
//! One line per evaluation segment: `segment_id<TAB>p1,p2,...,pN`. This is
//! how the external appearance stream hands its predictions to fusion and
//! evaluation, and how the graph stream exports its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ScoreError {
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
    #[error("score files disagree on segment ids: {0}")]
    SegmentMismatch(String),
}

/// Scores keyed by segment id; every row has `class_count` probabilities
/// summing to 1 within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub class_count: usize,
    pub scores: BTreeMap<String, Vec<f64>>,
}

impl ScoreTable {
    pub fn new(class_count: usize) -> Self {
        ScoreTable {
            class_count,
            scores: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, segment_id: &str, scores: Vec<f64>) {
        assert_eq!(
            scores.len(),
            self.class_count,
            "segment `{segment_id}` has {} scores, table expects {}",
            scores.len(),
            self.class_count
        );
        self.scores.insert(segment_id.to_string(), scores);
    }

    pub fn get(&self, segment_id: &str) -> Option<&[f64]> {
        self.scores.get(segment_id).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Errors unless `self` and `other` cover exactly the same segments.
    pub fn check_same_segments(&self, other: &ScoreTable) -> Result<(), ScoreError> {
        let a: Vec<&String> = self.scores.keys().collect();
        let b: Vec<&String> = other.scores.keys().collect();
        if a != b {
            let only_a = self
                .scores
                .keys()
                .find(|k| !other.scores.contains_key(*k))
                .map(|k| format!("`{k}` missing from the second file"));
            let only_b = other
                .scores
                .keys()
                .find(|k| !self.scores.contains_key(*k))
                .map(|k| format!("`{k}` missing from the first file"));
            return Err(ScoreError::SegmentMismatch(
                only_a.or(only_b).unwrap_or_else(|| "different sizes".to_string()),
            ));
        }
        Ok(())
    }
}

pub fn parse_score_file(path: &Path) -> Result<ScoreTable, ScoreError> {
    let text = fs::read_to_string(path).map_err(|source| ScoreError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_score_str(&path.display().to_string(), &text)
}

pub fn parse_score_str(path: &str, text: &str) -> Result<ScoreTable, ScoreError> {
    let mut class_count: Option<usize> = None;
    let mut scores = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (segment_id, rest) = line.split_once('\t').ok_or_else(|| ScoreError::Malformed {
            path: path.to_string(),
            line: line_no,
            msg: "expected `segment_id<TAB>p1,p2,...`".to_string(),
        })?;
        if segment_id.is_empty() {
            return Err(ScoreError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: "empty segment id".to_string(),
            });
        }
        let mut row = Vec::new();
        for field in rest.split(',') {
            let v: f64 = field.parse().map_err(|_| ScoreError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: format!("score `{field}` is not a decimal"),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(ScoreError::Malformed {
                    path: path.to_string(),
                    line: line_no,
                    msg: format!("score `{field}` is not a probability"),
                });
            }
            row.push(v);
        }
        match class_count {
            None => class_count = Some(row.len()),
            Some(n) if n != row.len() => {
                return Err(ScoreError::Malformed {
                    path: path.to_string(),
                    line: line_no,
                    msg: format!("row has {} scores but earlier rows have {n}", row.len()),
                });
            }
            Some(_) => {}
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(ScoreError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: format!("scores sum to {sum}, expected 1 within {SUM_TOLERANCE}"),
            });
        }
        if scores.insert(segment_id.to_string(), row).is_some() {
            return Err(ScoreError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: format!("duplicate segment id `{segment_id}`"),
            });
        }
    }
    Ok(ScoreTable {
        class_count: class_count.unwrap_or(0),
        scores,
    })
}

/// Deterministic rendering; rows appear in segment-id order.
pub fn scores_to_string(table: &ScoreTable) -> String {
    let mut out = String::new();
    for (segment_id, row) in &table.scores {
        let joined: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{segment_id}\t{}", joined.join(",")).unwrap();
    }
    out
}

pub fn write_score_file(table: &ScoreTable, path: &Path) -> Result<(), ScoreError> {
    fs::write(path, scores_to_string(table)).map_err(|source| ScoreError::Io {
        path: path.display().to_string(),
        source,
    })
}
