//! Detection traces, the contact-consistency filter, and state extraction.
//!
//! A trace file carries one classified detection tuple per line: the top-5
//! contact candidates and the single anticipated object for each hand. The
//! filter resolves each hand's contact to the best-ranked candidate that was
//! also anticipated by the same hand within a trailing window, run-length
//! deduplication turns the resolved tuples into manipulation-state
//! sequences, and `window_states` slices a sequence to an observation
//! window preceding an action.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use thiserror::Error;

pub type ObjectId = u32;

/// Default trailing window (seconds) for the contact-consistency filter.
pub const DEFAULT_HISTORY_SECONDS: f64 = 7.0;
/// Default video frame rate (60 s of video is 900 frames).
pub const DEFAULT_FPS: f64 = 15.0;
/// Default observation length in seconds.
pub const DEFAULT_OBSERVATION_SECONDS: f64 = 60.0;
/// Default spacing in video frames between consecutive detection records.
pub const DEFAULT_FRAME_STRIDE: u32 = 2;

#[derive(Debug, Error)]
pub enum TraceError {
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
    #[error("{path}:{line}: frame {frame} not increasing within video {video} (previous frame {prev})")]
    NonMonotone {
        path: String,
        line: usize,
        video: String,
        frame: u32,
        prev: u32,
    },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("noun token `{0}` is not in the object vocabulary")]
    UnknownNoun(String),
    #[error("observation window for action start {action_start_frame} ends at or before frame 0")]
    WindowBeforeStart { action_start_frame: u32 },
}

/// One noun in the object vocabulary. Sub-tokens of multi-word nouns are
/// separated by ':' (`cutting:board`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectClass {
    pub id: ObjectId,
    pub noun: String,
}

/// Object vocabulary with ids assigned by lexicographic noun order, so the
/// same set of input files yields the same ids regardless of file or video
/// order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObjectVocab {
    nouns: Vec<String>,
    index: BTreeMap<String, ObjectId>,
}

impl ObjectVocab {
    /// Builds a vocabulary from an arbitrary collection of noun tokens.
    /// Duplicates collapse; ids follow sorted order.
    pub fn from_nouns<I, S>(nouns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = nouns.into_iter().map(|s| s.as_ref().to_string()).collect();
        let nouns: Vec<String> = set.into_iter().collect();
        let index = nouns
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i as ObjectId))
            .collect();
        ObjectVocab { nouns, index }
    }

    /// Returns a vocabulary that keeps every existing id and appends any
    /// new nouns (sorted among themselves) after them. Used when resolving
    /// fresh traces against the vocabulary embedded in a stored graph.
    pub fn extended<I, S>(&self, nouns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = self.clone();
        let extra: BTreeSet<String> = nouns
            .into_iter()
            .map(|s| s.as_ref().to_string())
            .filter(|n| !out.index.contains_key(n))
            .collect();
        for noun in extra {
            let id = out.nouns.len() as ObjectId;
            out.index.insert(noun.clone(), id);
            out.nouns.push(noun);
        }
        out
    }

    pub fn id(&self, noun: &str) -> Option<ObjectId> {
        self.index.get(noun).copied()
    }

    pub fn noun(&self, id: ObjectId) -> Option<&str> {
        self.nouns.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.nouns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nouns.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ObjectClass> + '_ {
        self.nouns.iter().enumerate().map(|(i, n)| ObjectClass {
            id: i as ObjectId,
            noun: n.clone(),
        })
    }
}

/// A trace record before noun tokens are resolved to vocabulary ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawDetectionRecord {
    pub frame: u32,
    pub contact_right_top5: Vec<String>,
    pub contact_left_top5: Vec<String>,
    pub anticipated_right: Option<String>,
    pub anticipated_left: Option<String>,
}

/// Parsed trace file: records grouped by video, frame-sorted, tokens not
/// yet resolved against a vocabulary.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawTraceData {
    pub videos: BTreeMap<String, Vec<RawDetectionRecord>>,
}

impl RawTraceData {
    /// All noun tokens mentioned anywhere in the trace.
    pub fn nouns(&self) -> BTreeSet<&str> {
        let mut set = BTreeSet::new();
        for records in self.videos.values() {
            for r in records {
                for n in r.contact_right_top5.iter().chain(&r.contact_left_top5) {
                    set.insert(n.as_str());
                }
                for n in r.anticipated_right.iter().chain(&r.anticipated_left) {
                    set.insert(n.as_str());
                }
            }
        }
        set
    }

    /// Resolves noun tokens to ids. Fails on any token missing from the
    /// vocabulary.
    pub fn resolve(&self, vocab: &ObjectVocab) -> Result<DetectionStream, TraceError> {
        let lookup = |noun: &str| -> Result<ObjectId, TraceError> {
            vocab
                .id(noun)
                .ok_or_else(|| TraceError::UnknownNoun(noun.to_string()))
        };
        let mut videos = BTreeMap::new();
        for (video, records) in &self.videos {
            let mut out = Vec::with_capacity(records.len());
            for r in records {
                let top5 = |tokens: &[String]| -> Result<Vec<ObjectId>, TraceError> {
                    tokens.iter().map(|t| lookup(t)).collect()
                };
                let slot = |tok: &Option<String>| -> Result<Option<ObjectId>, TraceError> {
                    tok.as_deref().map(lookup).transpose()
                };
                out.push(DetectionRecord {
                    frame: r.frame,
                    contact_right_top5: top5(&r.contact_right_top5)?,
                    contact_left_top5: top5(&r.contact_left_top5)?,
                    anticipated_right: slot(&r.anticipated_right)?,
                    anticipated_left: slot(&r.anticipated_left)?,
                });
            }
            videos.insert(video.clone(), out);
        }
        Ok(DetectionStream { videos })
    }
}

/// Per-timestep classified contact/anticipation tuple for both hands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionRecord {
    pub frame: u32,
    pub contact_right_top5: Vec<ObjectId>,
    pub contact_left_top5: Vec<ObjectId>,
    pub anticipated_right: Option<ObjectId>,
    pub anticipated_left: Option<ObjectId>,
}

/// Detection records grouped by video id, frame-sorted within each video.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DetectionStream {
    pub videos: BTreeMap<String, Vec<DetectionRecord>>,
}

/// A detection record after the contact-consistency filter: at most one
/// resolved contact object per hand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContactRecord {
    pub frame: u32,
    pub contact_right: Option<ObjectId>,
    pub contact_left: Option<ObjectId>,
    pub anticipated_right: Option<ObjectId>,
    pub anticipated_left: Option<ObjectId>,
}

impl ContactRecord {
    pub fn state(&self) -> ManipulationState {
        ManipulationState {
            contact_right: self.contact_right,
            contact_left: self.contact_left,
            anticipated_right: self.anticipated_right,
            anticipated_left: self.anticipated_left,
        }
    }
}

/// Filtered records grouped by video.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContactStream {
    pub videos: BTreeMap<String, Vec<ContactRecord>>,
}

/// The 4-slot object tuple identifying a graph state node. The all-`None`
/// tuple is the designated null state. Field order defines the canonical
/// sort used for node indexing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ManipulationState {
    pub contact_right: Option<ObjectId>,
    pub contact_left: Option<ObjectId>,
    pub anticipated_right: Option<ObjectId>,
    pub anticipated_left: Option<ObjectId>,
}

impl ManipulationState {
    pub const NULL: ManipulationState = ManipulationState {
        contact_right: None,
        contact_left: None,
        anticipated_right: None,
        anticipated_left: None,
    };

    pub fn is_null(&self) -> bool {
        *self == Self::NULL
    }

    pub fn slots(&self) -> [Option<ObjectId>; 4] {
        [
            self.contact_right,
            self.contact_left,
            self.anticipated_right,
            self.anticipated_left,
        ]
    }

    /// Distinct object ids occupying non-empty slots, sorted.
    pub fn distinct_objects(&self) -> Vec<ObjectId> {
        let set: BTreeSet<ObjectId> = self.slots().into_iter().flatten().collect();
        set.into_iter().collect()
    }
}

/// One deduplicated state and the inclusive frame span of its run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateItem {
    pub state: ManipulationState,
    pub start_frame: u32,
    pub end_frame: u32,
}

/// Ordered non-repeating states extracted from one video.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSequence {
    pub video_id: String,
    pub items: Vec<StateItem>,
}

/// One annotated action segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionAnnotation {
    pub video_id: String,
    pub start_frame: u32,
    pub stop_frame: u32,
    pub verb: String,
    pub noun: String,
    pub action_id: u32,
}

/// Annotation before the (verb, noun) pair is resolved to an action id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawAnnotation {
    pub video_id: String,
    pub start_frame: u32,
    pub stop_frame: u32,
    pub verb: String,
    pub noun: String,
}

/// Action vocabulary: (verb, noun) pairs with ids assigned by
/// lexicographic pair order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActionVocab {
    pairs: Vec<(String, String)>,
    index: BTreeMap<(String, String), u32>,
}

impl ActionVocab {
    pub fn from_pairs<I>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let set: BTreeSet<(String, String)> = pairs.into_iter().collect();
        let pairs: Vec<(String, String)> = set.into_iter().collect();
        let index = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i as u32))
            .collect();
        ActionVocab { pairs, index }
    }

    pub fn from_annotations<'a, I>(annotations: I) -> Self
    where
        I: IntoIterator<Item = &'a RawAnnotation>,
    {
        Self::from_pairs(
            annotations
                .into_iter()
                .map(|a| (a.verb.clone(), a.noun.clone())),
        )
    }

    pub fn id(&self, verb: &str, noun: &str) -> Option<u32> {
        self.index
            .get(&(verb.to_string(), noun.to_string()))
            .copied()
    }

    pub fn pair(&self, id: u32) -> Option<(&str, &str)> {
        self.pairs
            .get(id as usize)
            .map(|(v, n)| (v.as_str(), n.as_str()))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Resolves raw annotations to action ids. Fails on pairs missing from
    /// the vocabulary.
    pub fn resolve(&self, raw: &[RawAnnotation]) -> Result<Vec<ActionAnnotation>, TraceError> {
        raw.iter()
            .map(|a| {
                let action_id = self.id(&a.verb, &a.noun).ok_or_else(|| {
                    TraceError::InvalidParam(format!(
                        "action ({}, {}) is not in the action vocabulary",
                        a.verb, a.noun
                    ))
                })?;
                Ok(ActionAnnotation {
                    video_id: a.video_id.clone(),
                    start_frame: a.start_frame,
                    stop_frame: a.stop_frame,
                    verb: a.verb.clone(),
                    noun: a.noun.clone(),
                    action_id,
                })
            })
            .collect()
    }
}

fn validate_token(path: &str, line: usize, tok: &str, what: &str) -> Result<(), TraceError> {
    if tok.is_empty() {
        return Err(TraceError::Malformed {
            path: path.to_string(),
            line,
            msg: format!("empty {what} token"),
        });
    }
    if tok.chars().any(|c| c.is_whitespace()) {
        return Err(TraceError::Malformed {
            path: path.to_string(),
            line,
            msg: format!("{what} token `{tok}` contains whitespace"),
        });
    }
    if tok.chars().any(|c| c.is_ascii_uppercase()) {
        return Err(TraceError::Malformed {
            path: path.to_string(),
            line,
            msg: format!("{what} token `{tok}` must be lowercase"),
        });
    }
    Ok(())
}

fn parse_frame(path: &str, line: usize, field: &str) -> Result<u32, TraceError> {
    field.parse::<u32>().map_err(|_| TraceError::Malformed {
        path: path.to_string(),
        line,
        msg: format!("frame field `{field}` is not a non-negative integer"),
    })
}

fn parse_top5(path: &str, line: usize, field: &str, what: &str) -> Result<Vec<String>, TraceError> {
    if field == "-" {
        return Ok(Vec::new());
    }
    let tokens: Vec<String> = field.split(',').map(|s| s.to_string()).collect();
    if tokens.len() > 5 {
        return Err(TraceError::Malformed {
            path: path.to_string(),
            line,
            msg: format!("{what} has {} entries (max 5)", tokens.len()),
        });
    }
    let mut seen = BTreeSet::new();
    for t in &tokens {
        validate_token(path, line, t, what)?;
        if !seen.insert(t.clone()) {
            return Err(TraceError::Malformed {
                path: path.to_string(),
                line,
                msg: format!("{what} contains duplicate token `{t}`"),
            });
        }
    }
    Ok(tokens)
}

fn parse_slot(
    path: &str,
    line: usize,
    field: &str,
    what: &str,
) -> Result<Option<String>, TraceError> {
    if field == "-" {
        return Ok(None);
    }
    if field.contains(',') {
        return Err(TraceError::Malformed {
            path: path.to_string(),
            line,
            msg: format!("{what} must be a single token or `-`, got `{field}`"),
        });
    }
    validate_token(path, line, field, what)?;
    Ok(Some(field.to_string()))
}

/// Parses a trace file. Records are grouped by video and must be in
/// strictly increasing frame order within each video; videos may
/// interleave freely. Lines starting with `#` and blank lines are skipped.
pub fn parse_trace_file(path: &Path) -> Result<RawTraceData, TraceError> {
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trace_str(&path.display().to_string(), &text)
}

/// Same as [`parse_trace_file`] but over in-memory text; `path` is used
/// only in diagnostics.
pub fn parse_trace_str(path: &str, text: &str) -> Result<RawTraceData, TraceError> {
    let mut videos: BTreeMap<String, Vec<RawDetectionRecord>> = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(TraceError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: format!("expected 6 tab-separated fields, got {}", fields.len()),
            });
        }
        let video = fields[0];
        if video.is_empty() {
            return Err(TraceError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: "empty video id".to_string(),
            });
        }
        let frame = parse_frame(path, line_no, fields[1])?;
        let record = RawDetectionRecord {
            frame,
            contact_right_top5: parse_top5(path, line_no, fields[2], "contact_right_top5")?,
            contact_left_top5: parse_top5(path, line_no, fields[3], "contact_left_top5")?,
            anticipated_right: parse_slot(path, line_no, fields[4], "anticipated_right")?,
            anticipated_left: parse_slot(path, line_no, fields[5], "anticipated_left")?,
        };
        let records = videos.entry(video.to_string()).or_default();
        if let Some(prev) = records.last() {
            if record.frame <= prev.frame {
                return Err(TraceError::NonMonotone {
                    path: path.to_string(),
                    line: line_no,
                    video: video.to_string(),
                    frame: record.frame,
                    prev: prev.frame,
                });
            }
        }
        records.push(record);
    }
    Ok(RawTraceData { videos })
}

/// Parses an annotation file: `video_id<TAB>start<TAB>stop<TAB>verb<TAB>noun`.
pub fn parse_annotation_file(path: &Path) -> Result<Vec<RawAnnotation>, TraceError> {
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_annotation_str(&path.display().to_string(), &text)
}

pub fn parse_annotation_str(path: &str, text: &str) -> Result<Vec<RawAnnotation>, TraceError> {
    let mut out = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(TraceError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let video = fields[0];
        if video.is_empty() {
            return Err(TraceError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: "empty video id".to_string(),
            });
        }
        let start_frame = parse_frame(path, line_no, fields[1])?;
        let stop_frame = parse_frame(path, line_no, fields[2])?;
        if start_frame >= stop_frame {
            return Err(TraceError::Malformed {
                path: path.to_string(),
                line: line_no,
                msg: format!("start_frame {start_frame} must be < stop_frame {stop_frame}"),
            });
        }
        validate_token(path, line_no, fields[3], "verb")?;
        validate_token(path, line_no, fields[4], "noun")?;
        out.push(RawAnnotation {
            video_id: video.to_string(),
            start_frame,
            stop_frame,
            verb: fields[3].to_string(),
            noun: fields[4].to_string(),
        });
    }
    Ok(out)
}

/// Resolves each hand's contact to the best-ranked top-5 candidate that the
/// same hand anticipated within the trailing window of
/// `ceil(history_seconds * fps)` video frames, inclusive of the current
/// record. Anticipated slots pass through unchanged.
pub fn filter_contacts(
    stream: &DetectionStream,
    history_seconds: f64,
    fps: f64,
) -> Result<ContactStream, TraceError> {
    if !(history_seconds > 0.0) {
        return Err(TraceError::InvalidParam(format!(
            "history_seconds must be positive, got {history_seconds}"
        )));
    }
    if !(fps > 0.0) {
        return Err(TraceError::InvalidParam(format!(
            "fps must be positive, got {fps}"
        )));
    }
    let window_frames = (history_seconds * fps).ceil() as i64;
    let mut videos = BTreeMap::new();
    for (video, records) in &stream.videos {
        videos.insert(video.clone(), filter_video(records, window_frames));
    }
    Ok(ContactStream { videos })
}

/// Trailing multiset of anticipated object ids for one hand.
struct HandWindow {
    window_frames: i64,
    entries: VecDeque<(u32, ObjectId)>,
    counts: BTreeMap<ObjectId, usize>,
}

impl HandWindow {
    fn new(window_frames: i64) -> Self {
        HandWindow {
            window_frames,
            entries: VecDeque::new(),
            counts: BTreeMap::new(),
        }
    }

    fn push(&mut self, frame: u32, anticipated: Option<ObjectId>) {
        if let Some(id) = anticipated {
            self.entries.push_back((frame, id));
            *self.counts.entry(id).or_insert(0) += 1;
        }
        let cutoff = frame as i64 - self.window_frames;
        while let Some(&(f, id)) = self.entries.front() {
            if (f as i64) < cutoff {
                self.entries.pop_front();
                let c = self.counts.get_mut(&id).expect("count tracks entries");
                *c -= 1;
                if *c == 0 {
                    self.counts.remove(&id);
                }
            } else {
                break;
            }
        }
    }

    fn resolve(&self, top5: &[ObjectId]) -> Option<ObjectId> {
        top5.iter().copied().find(|id| self.counts.contains_key(id))
    }
}

fn filter_video(records: &[DetectionRecord], window_frames: i64) -> Vec<ContactRecord> {
    let mut right = HandWindow::new(window_frames);
    let mut left = HandWindow::new(window_frames);
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        // Current record's own anticipation is part of the window.
        right.push(r.frame, r.anticipated_right);
        left.push(r.frame, r.anticipated_left);
        out.push(ContactRecord {
            frame: r.frame,
            contact_right: right.resolve(&r.contact_right_top5),
            contact_left: left.resolve(&r.contact_left_top5),
            anticipated_right: r.anticipated_right,
            anticipated_left: r.anticipated_left,
        });
    }
    out
}

/// Run-length deduplication: each maximal run of identical state tuples
/// becomes one item spanning the run's first to last record frame.
pub fn extract_states(video_id: &str, records: &[ContactRecord]) -> StateSequence {
    let mut items: Vec<StateItem> = Vec::new();
    for r in records {
        let state = r.state();
        match items.last_mut() {
            Some(last) if last.state == state => last.end_frame = r.frame,
            _ => items.push(StateItem {
                state,
                start_frame: r.frame,
                end_frame: r.frame,
            }),
        }
    }
    StateSequence {
        video_id: video_id.to_string(),
        items,
    }
}

/// Extracts one state sequence per video from a filtered stream.
pub fn extract_all_states(stream: &ContactStream) -> Vec<StateSequence> {
    stream
        .videos
        .iter()
        .map(|(video, records)| extract_states(video, records))
        .collect()
}

/// Items of `seq` intersecting the half-open observation window
/// `[max(0, action_start - (observation + anticipation) * fps),
///   action_start - anticipation * fps)`, clipped to the window.
pub fn window_states(
    seq: &StateSequence,
    action_start_frame: u32,
    anticipation_seconds: f64,
    observation_seconds: f64,
    fps: f64,
) -> Result<Vec<StateItem>, TraceError> {
    if !(anticipation_seconds >= 0.0) {
        return Err(TraceError::InvalidParam(format!(
            "anticipation_seconds must be non-negative, got {anticipation_seconds}"
        )));
    }
    if !(observation_seconds > 0.0) {
        return Err(TraceError::InvalidParam(format!(
            "observation_seconds must be positive, got {observation_seconds}"
        )));
    }
    if !(fps > 0.0) {
        return Err(TraceError::InvalidParam(format!(
            "fps must be positive, got {fps}"
        )));
    }
    let tau_s = action_start_frame as f64;
    let end = tau_s - anticipation_seconds * fps;
    if end <= 0.0 {
        return Err(TraceError::WindowBeforeStart { action_start_frame });
    }
    let start = (tau_s - (observation_seconds + anticipation_seconds) * fps).max(0.0);
    // Integer frames in [start, end): lo..=hi inclusive.
    let lo = start.ceil() as i64;
    let hi = if end == end.floor() {
        end as i64 - 1
    } else {
        end.floor() as i64
    };
    let mut out = Vec::new();
    for item in &seq.items {
        let s = item.start_frame as i64;
        let e = item.end_frame as i64;
        if s <= hi && e >= lo {
            out.push(StateItem {
                state: item.state,
                start_frame: s.max(lo) as u32,
                end_frame: e.min(hi) as u32,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(vocab: &ObjectVocab, noun: &str) -> ObjectId {
        vocab.id(noun).unwrap()
    }

    #[test]
    fn parse_maps_fields_directly() {
        let data = parse_trace_str(
            "t",
            "P01_01\t10\tknife,spoon\tpan\tknife\t-\n",
        )
        .unwrap();
        let records = &data.videos["P01_01"];
        assert_eq!(records.len(), 1);
        let r = &records[0];
        assert_eq!(r.frame, 10);
        assert_eq!(r.contact_right_top5, vec!["knife", "spoon"]);
        assert_eq!(r.contact_left_top5, vec!["pan"]);
        assert_eq!(r.anticipated_right.as_deref(), Some("knife"));
        assert_eq!(r.anticipated_left, None);
    }

    #[test]
    fn parse_empty_file_is_empty_stream() {
        let data = parse_trace_str("t", "").unwrap();
        assert!(data.videos.is_empty());
        let data = parse_trace_str("t", "# only a comment\n\n").unwrap();
        assert!(data.videos.is_empty());
    }

    #[test]
    fn parse_interleaved_videos_matches_sort_then_group() {
        let text = "B\t0\tknife\t-\t-\t-\n\
                    A\t2\t-\tpan\t-\t-\n\
                    B\t2\tspoon\t-\t-\t-\n\
                    A\t4\t-\t-\tpan\t-\n";
        let data = parse_trace_str("t", text).unwrap();

        // Naive oracle: collect (video, frame) pairs, sort, group.
        let mut pairs: Vec<(String, u32)> = Vec::new();
        for line in text.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            pairs.push((f[0].to_string(), f[1].parse().unwrap()));
        }
        pairs.sort();
        let mut expected: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for (v, f) in pairs {
            expected.entry(v).or_default().push(f);
        }

        let got: BTreeMap<String, Vec<u32>> = data
            .videos
            .iter()
            .map(|(v, rs)| (v.clone(), rs.iter().map(|r| r.frame).collect()))
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn parse_rejects_bad_field_count() {
        let err = parse_trace_str("t", "P01\t0\tknife\t-\t-\n").unwrap_err();
        match err {
            TraceError::Malformed { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_non_monotone_frames() {
        let text = "V\t4\tknife\t-\t-\t-\nV\t2\tknife\t-\t-\t-\n";
        let err = parse_trace_str("t", text).unwrap_err();
        match err {
            TraceError::NonMonotone { line, frame, prev, .. } => {
                assert_eq!(line, 2);
                assert_eq!(frame, 2);
                assert_eq!(prev, 4);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_oversized_top5() {
        let err = parse_trace_str("t", "V\t0\ta,b,c,d,e,f\t-\t-\t-\n").unwrap_err();
        assert!(matches!(err, TraceError::Malformed { line: 1, .. }));
    }

    fn stream_from(text: &str) -> (DetectionStream, ObjectVocab) {
        let raw = parse_trace_str("t", text).unwrap();
        let vocab = ObjectVocab::from_nouns(raw.nouns());
        let stream = raw.resolve(&vocab).unwrap();
        (stream, vocab)
    }

    #[test]
    fn filter_picks_best_ranked_intersection_member() {
        // knife and pan are anticipated in-window; knife outranks pan.
        let text = "V\t0\t-\t-\tpan\t-\n\
                    V\t2\t-\t-\tknife\t-\n\
                    V\t4\tspoon,knife,fork,cup,plate\t-\t-\t-\n";
        let (stream, vocab) = stream_from(text);
        let filtered = filter_contacts(&stream, 7.0, 15.0).unwrap();
        let records = &filtered.videos["V"];
        assert_eq!(records[2].contact_right, Some(obj(&vocab, "knife")));

        // Brute-force oracle: intersect the top-5 with every anticipated id
        // in the window, keep the best rank.
        let win: BTreeSet<ObjectId> =
            [obj(&vocab, "pan"), obj(&vocab, "knife")].into_iter().collect();
        let top5 = ["spoon", "knife", "fork", "cup", "plate"].map(|n| obj(&vocab, n));
        let expect = top5.iter().copied().find(|id| win.contains(id));
        assert_eq!(records[2].contact_right, expect);
    }

    #[test]
    fn filter_empty_intersection_is_none() {
        let text = "V\t0\tspoon\t-\t-\t-\n";
        let (stream, _) = stream_from(text);
        let filtered = filter_contacts(&stream, 7.0, 15.0).unwrap();
        assert_eq!(filtered.videos["V"][0].contact_right, None);
    }

    #[test]
    fn filter_window_boundary_by_frame_arithmetic() {
        // Window is ceil(7 * 15) = 105 frames, inclusive. An anticipation 8
        // seconds back (120 frames) is outside; one exactly 105 frames back
        // is inside.
        let outside = "V\t0\t-\t-\tknife\t-\nV\t120\tknife\t-\t-\t-\n";
        let (stream, _) = stream_from(outside);
        let filtered = filter_contacts(&stream, 7.0, 15.0).unwrap();
        assert_eq!(filtered.videos["V"][1].contact_right, None);

        let boundary = "V\t0\t-\t-\tknife\t-\nV\t105\tknife\t-\t-\t-\n";
        let (stream, vocab) = stream_from(boundary);
        let filtered = filter_contacts(&stream, 7.0, 15.0).unwrap();
        assert_eq!(
            filtered.videos["V"][1].contact_right,
            Some(obj(&vocab, "knife"))
        );
    }

    #[test]
    fn filter_same_record_anticipation_counts() {
        // Simultaneously anticipated and contacted passes the filter.
        let text = "V\t0\tknife\t-\tknife\t-\n";
        let (stream, vocab) = stream_from(text);
        let filtered = filter_contacts(&stream, 7.0, 15.0).unwrap();
        assert_eq!(
            filtered.videos["V"][0].contact_right,
            Some(obj(&vocab, "knife"))
        );
    }

    #[test]
    fn filter_rejects_bad_params() {
        let (stream, _) = stream_from("");
        assert!(filter_contacts(&stream, 0.0, 15.0).is_err());
        assert!(filter_contacts(&stream, 7.0, 0.0).is_err());
        assert!(filter_contacts(&stream, -1.0, 15.0).is_err());
    }

    fn rec(frame: u32, contact_right: Option<ObjectId>) -> ContactRecord {
        ContactRecord {
            frame,
            contact_right,
            contact_left: None,
            anticipated_right: None,
            anticipated_left: None,
        }
    }

    #[test]
    fn extract_states_run_length_spans() {
        let records = [rec(0, Some(1)), rec(2, Some(1)), rec(4, Some(2))];
        let seq = extract_states("V", &records);
        assert_eq!(seq.items.len(), 2);
        assert_eq!((seq.items[0].start_frame, seq.items[0].end_frame), (0, 2));
        assert_eq!((seq.items[1].start_frame, seq.items[1].end_frame), (4, 4));
    }

    #[test]
    fn extract_states_keeps_non_consecutive_repeats() {
        let records = [rec(0, Some(1)), rec(2, Some(2)), rec(4, Some(1))];
        let seq = extract_states("V", &records);
        let states: Vec<_> = seq.items.iter().map(|i| i.state.contact_right).collect();
        assert_eq!(states, vec![Some(1), Some(2), Some(1)]);
    }

    #[test]
    fn extract_states_is_idempotent_and_dedup_holds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let records: Vec<ContactRecord> = (0..10_000)
            .map(|i| rec(2 * i, Some(rng.gen_range(0..3))))
            .collect();
        let seq = extract_states("V", &records);
        for pair in seq.items.windows(2) {
            assert_ne!(pair[0].state, pair[1].state);
        }
        // Treat each item as a unit run; re-extracting must be the identity.
        let unit: Vec<ContactRecord> = seq
            .items
            .iter()
            .map(|i| rec(i.start_frame, i.state.contact_right))
            .collect();
        let again = extract_states("V", &unit);
        let a: Vec<_> = seq.items.iter().map(|i| i.state).collect();
        let b: Vec<_> = again.items.iter().map(|i| i.state).collect();
        assert_eq!(a, b);
    }

    fn seq_of(items: &[(u32, u32, Option<ObjectId>)]) -> StateSequence {
        StateSequence {
            video_id: "V".to_string(),
            items: items
                .iter()
                .map(|&(s, e, c)| StateItem {
                    state: ManipulationState {
                        contact_right: c,
                        ..ManipulationState::NULL
                    },
                    start_frame: s,
                    end_frame: e,
                })
                .collect(),
        }
    }

    #[test]
    fn window_states_interval_arithmetic() {
        let seq = seq_of(&[(0, 2000, Some(1))]);
        let items = window_states(&seq, 1500, 1.0, 60.0, 15.0).unwrap();
        // Window is [585, 1485).
        assert_eq!(items.len(), 1);
        assert_eq!(items[0].start_frame, 585);
        assert_eq!(items[0].end_frame, 1484);
    }

    #[test]
    fn window_states_tau_zero_ends_at_action_start() {
        let seq = seq_of(&[(0, 2000, Some(1))]);
        let items = window_states(&seq, 1500, 0.0, 60.0, 15.0).unwrap();
        assert_eq!(items[0].end_frame, 1499);
    }

    #[test]
    fn window_states_clips_partial_overlap() {
        let seq = seq_of(&[(580, 600, Some(1)), (602, 700, Some(2))]);
        let items = window_states(&seq, 1500, 1.0, 60.0, 15.0).unwrap();
        assert_eq!(items[0].start_frame, 585);
        assert_eq!(items[0].end_frame, 600);
    }

    #[test]
    fn window_states_rejects_window_before_start() {
        let seq = seq_of(&[(0, 100, Some(1))]);
        assert!(matches!(
            window_states(&seq, 10, 1.0, 60.0, 15.0),
            Err(TraceError::WindowBeforeStart { .. })
        ));
    }

    #[test]
    fn shrinking_history_never_adds_contacts() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let nouns = ["a", "b", "c", "d"];
        let mut lines = String::new();
        let mut frame = 0;
        for _ in 0..400 {
            let top5 = nouns[rng.gen_range(0..nouns.len())];
            let ant: &str = if rng.gen_bool(0.5) {
                nouns[rng.gen_range(0..nouns.len())]
            } else {
                "-"
            };
            lines.push_str(&format!("V\t{frame}\t{top5}\t-\t{ant}\t-\n"));
            frame += 2;
        }
        let (stream, _) = stream_from(&lines);
        let long = filter_contacts(&stream, 7.0, 15.0).unwrap();
        let short = filter_contacts(&stream, 2.0, 15.0).unwrap();
        for (l, s) in long.videos["V"].iter().zip(short.videos["V"].iter()) {
            if let Some(c) = s.contact_right {
                assert_eq!(l.contact_right, Some(c), "short window added a contact");
            }
            // Resolved contact must come from the record's own top-5 list.
            if let Some(c) = l.contact_right {
                let rec = stream.videos["V"]
                    .iter()
                    .find(|r| r.frame == l.frame)
                    .unwrap();
                assert!(rec.contact_right_top5.contains(&c));
            }
        }
    }

    #[test]
    fn vocab_ids_are_order_independent() {
        let a = ObjectVocab::from_nouns(["pan", "knife", "spoon"]);
        let b = ObjectVocab::from_nouns(["spoon", "pan", "knife"]);
        assert_eq!(a, b);
        assert_eq!(a.id("knife"), Some(0));
        assert_eq!(a.id("pan"), Some(1));
        assert_eq!(a.id("spoon"), Some(2));
    }

    #[test]
    fn vocab_extension_preserves_existing_ids() {
        let base = ObjectVocab::from_nouns(["knife", "pan"]);
        let ext = base.extended(["apple", "pan", "zucchini"]);
        assert_eq!(ext.id("knife"), base.id("knife"));
        assert_eq!(ext.id("pan"), base.id("pan"));
        assert_eq!(ext.id("apple"), Some(2));
        assert_eq!(ext.id("zucchini"), Some(3));
    }
}
