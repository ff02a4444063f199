//! Synthetic activity grammars with known ground truth, plus the
//! independent brute-force oracles used to cross-check graph construction.
//!
//! A grammar is a Markov chain over explicit 4-slot states with a
//! per-state action distribution. The generator samples state chains with
//! geometric dwell times and emits detection traces the real pipeline can
//! ingest: contacts come from the state, top-5 lists carry the true object
//! at rank 1 with optional distractors behind it, and anticipation slots
//! are emitted either verbatim from the state tuples (`state` mode, which
//! keeps noise-free traces exactly recoverable) or as a 1-3 step lead-in
//! before each contact change (`lead` mode, which exercises the
//! consistency filter's failure paths).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::eval::EvalSegment;
use crate::graph::{ActivityGraph, NodeIndex};
use crate::scores::ScoreTable;
use crate::trace::{
    ActionAnnotation, ActionVocab, ManipulationState, ObjectVocab, StateSequence,
};

const GRAMMAR_MAGIC: &str = "EGO-OMG-GRAMMAR v1";
const PROB_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SynthError {
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
    #[error("invalid grammar: {0}")]
    Invalid(String),
}

/// How anticipation slots appear in emitted traces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnticipationMode {
    /// Emit the state tuple's anticipated slots verbatim.
    #[default]
    FromState,
    /// Emit nothing except a sampled 1-3 step lead before contact changes.
    LeadIn,
}

impl AnticipationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnticipationMode::FromState => "state",
            AnticipationMode::LeadIn => "lead",
        }
    }
}

/// A 4-slot state over indices into the grammar's object list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrammarState {
    pub contact_right: Option<usize>,
    pub contact_left: Option<usize>,
    pub anticipated_right: Option<usize>,
    pub anticipated_left: Option<usize>,
}

impl GrammarState {
    pub const EMPTY: GrammarState = GrammarState {
        contact_right: None,
        contact_left: None,
        anticipated_right: None,
        anticipated_left: None,
    };
}

/// Generative mirror of the activity graph: explicit states, a transition
/// matrix, and per-state action distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityGrammar {
    pub objects: Vec<String>,
    pub actions: Vec<(String, String)>,
    pub states: Vec<GrammarState>,
    pub start: usize,
    /// Row-stochastic `states x states`; the diagonal must be zero because
    /// deduplicated sequences cannot repeat a state.
    pub transitions: Vec<Vec<f64>>,
    /// `states x actions`; each row sums to 1 (emitting state) or 0
    /// (silent state).
    pub emissions: Vec<Vec<f64>>,
    pub mean_dwell_steps: f64,
    /// Dwells are clipped here so anticipations never age out of the
    /// consistency filter's window.
    pub max_dwell_steps: usize,
    pub distractor_rate: f64,
    pub anticipation_dropout: f64,
    pub anticipation_mode: AnticipationMode,
    /// Actions start this many detection steps after their state begins;
    /// dwells too short to fit the offset emit no annotation.
    pub action_offset_steps: usize,
    pub frame_stride: u32,
    pub fps: f64,
}

impl ActivityGrammar {
    pub fn validate(&self) -> Result<(), SynthError> {
        let n = self.states.len();
        if n == 0 {
            return Err(SynthError::Invalid("grammar has no states".to_string()));
        }
        if self.objects.is_empty() {
            return Err(SynthError::Invalid("grammar has no objects".to_string()));
        }
        if self.start >= n {
            return Err(SynthError::Invalid(format!(
                "start state {} out of range for {n} states",
                self.start
            )));
        }
        for (i, a) in self.states.iter().enumerate() {
            for slot in [a.contact_right, a.contact_left, a.anticipated_right, a.anticipated_left]
            {
                if let Some(o) = slot {
                    if o >= self.objects.len() {
                        return Err(SynthError::Invalid(format!(
                            "state {i} references object {o} out of range"
                        )));
                    }
                }
            }
            for (j, b) in self.states.iter().enumerate().skip(i + 1) {
                if a == b {
                    return Err(SynthError::Invalid(format!("states {i} and {j} are equal")));
                }
            }
        }
        if self.transitions.len() != n {
            return Err(SynthError::Invalid(format!(
                "transition matrix has {} rows, expected {n}",
                self.transitions.len()
            )));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            if row.len() != n {
                return Err(SynthError::Invalid(format!(
                    "transition row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            if row[i] != 0.0 {
                return Err(SynthError::Invalid(format!(
                    "transition row {i} has a nonzero diagonal; dedup'd chains cannot self-transition"
                )));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(SynthError::Invalid(format!(
                    "transition row {i} has entries outside [0, 1]"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > PROB_TOLERANCE {
                return Err(SynthError::Invalid(format!(
                    "transition row {i} sums to {sum}, expected 1"
                )));
            }
        }
        if self.emissions.len() != n {
            return Err(SynthError::Invalid(format!(
                "emission matrix has {} rows, expected {n}",
                self.emissions.len()
            )));
        }
        for (i, row) in self.emissions.iter().enumerate() {
            if row.len() != self.actions.len() {
                return Err(SynthError::Invalid(format!(
                    "emission row {i} has {} entries, expected {}",
                    row.len(),
                    self.actions.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if sum != 0.0 && (sum - 1.0).abs() > PROB_TOLERANCE {
                return Err(SynthError::Invalid(format!(
                    "emission row {i} sums to {sum}, expected 0 or 1"
                )));
            }
        }
        if !(self.mean_dwell_steps >= 1.0) {
            return Err(SynthError::Invalid(format!(
                "mean dwell must be >= 1 detection step, got {}",
                self.mean_dwell_steps
            )));
        }
        if self.max_dwell_steps == 0 {
            return Err(SynthError::Invalid("max dwell must be positive".to_string()));
        }
        for (name, rate) in [
            ("distractor_rate", self.distractor_rate),
            ("anticipation_dropout", self.anticipation_dropout),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(SynthError::Invalid(format!("{name} {rate} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn object_vocab(&self) -> ObjectVocab {
        ObjectVocab::from_nouns(&self.objects)
    }

    pub fn action_vocab(&self) -> ActionVocab {
        ActionVocab::from_pairs(self.actions.iter().cloned())
    }

    /// The grammar state as a pipeline state tuple (object indices mapped
    /// through the canonical vocabulary).
    pub fn manipulation_state(&self, index: usize) -> ManipulationState {
        let vocab = self.object_vocab();
        let map = |slot: Option<usize>| slot.map(|o| vocab.id(&self.objects[o]).expect("own noun"));
        let s = &self.states[index];
        ManipulationState {
            contact_right: map(s.contact_right),
            contact_left: map(s.contact_left),
            anticipated_right: map(s.anticipated_right),
            anticipated_left: map(s.anticipated_left),
        }
    }

    /// The exact generating graph: grammar transitions as state edges and
    /// emission rows as action edges, over the full vocabularies.
    pub fn truth_graph(&self) -> ActivityGraph {
        let object_vocab = self.object_vocab();
        let action_vocab = self.action_vocab();
        let mut tuples: Vec<(ManipulationState, usize)> = (0..self.states.len())
            .map(|i| (self.manipulation_state(i), i))
            .collect();
        tuples.sort_by_key(|(s, _)| *s);
        let states: Vec<ManipulationState> = tuples.iter().map(|(s, _)| *s).collect();
        let node_of: BTreeMap<usize, NodeIndex> = tuples
            .iter()
            .enumerate()
            .map(|(node, (_, grammar_idx))| (*grammar_idx, node))
            .collect();

        let mut edges: BTreeMap<(NodeIndex, NodeIndex), f64> = BTreeMap::new();
        let node_count = states.len() + action_vocab.len();
        for i in 0..node_count {
            edges.insert((i, i), 1.0);
        }
        for (i, row) in self.transitions.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    edges.insert((node_of[&i], node_of[&j]), p);
                }
            }
        }
        for (i, row) in self.emissions.iter().enumerate() {
            for (a, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    let (verb, noun) = &self.actions[a];
                    let action_id = action_vocab.id(verb, noun).expect("own action");
                    edges.insert((node_of[&i], states.len() + action_id as usize), p);
                }
            }
        }
        ActivityGraph::from_parts(object_vocab, action_vocab, states, edges)
    }

    /// Cycle grammar over `n_states` states (a contact-free start state
    /// plus one state per object) where every state anticipates the next
    /// contact, so noise-free traces are exactly recoverable, and the
    /// state fully determines the emitted action.
    pub fn deterministic_cycle(n_states: usize, n_actions: usize, mean_dwell_steps: f64) -> Self {
        assert!(n_states >= 3, "cycle grammar needs at least 3 states");
        assert!(n_actions >= 1);
        let n_objects = n_states - 1;
        let objects: Vec<String> = (0..n_objects).map(|i| format!("obj{i:02}")).collect();
        let actions: Vec<(String, String)> = (0..n_actions)
            .map(|i| (format!("verb{i:02}"), format!("item{i:02}")))
            .collect();
        // State 0: hands free, anticipating object 0. State i (1-based):
        // holding object i-1, anticipating the cycle successor.
        let mut states = vec![GrammarState {
            anticipated_right: Some(0),
            ..GrammarState::EMPTY
        }];
        for i in 0..n_objects {
            states.push(GrammarState {
                contact_right: Some(i),
                anticipated_right: Some((i + 1) % n_objects),
                ..GrammarState::EMPTY
            });
        }
        let n = states.len();
        let mut transitions = vec![vec![0.0; n]; n];
        transitions[0][1] = 1.0;
        for i in 0..n_objects {
            let from = i + 1;
            let to = (i + 1) % n_objects + 1;
            transitions[from][to] = 1.0;
        }
        let mut emissions = vec![vec![0.0; n_actions]; n];
        for i in 0..n_objects {
            emissions[i + 1][i % n_actions] = 1.0;
        }
        ActivityGrammar {
            objects,
            actions,
            states,
            start: 0,
            transitions,
            emissions,
            mean_dwell_steps,
            max_dwell_steps: 40,
            distractor_rate: 0.0,
            anticipation_dropout: 0.0,
            anticipation_mode: AnticipationMode::FromState,
            action_offset_steps: 8,
            frame_stride: crate::trace::DEFAULT_FRAME_STRIDE,
            fps: crate::trace::DEFAULT_FPS,
        }
    }

    /// Branching grammar: a random walk over objects with `branch` uniform
    /// successors each. States are (current contact, committed next
    /// contact) pairs, so anticipation still leads every contact change
    /// and the walk stays recoverable, while the upcoming action is only
    /// predictable from recently observed states.
    pub fn branching(
        n_objects: usize,
        branch: usize,
        n_actions: usize,
        mean_dwell_steps: f64,
        seed: u64,
    ) -> Self {
        assert!(n_objects >= 3);
        assert!(branch >= 1 && branch < n_objects);
        assert!(n_actions >= 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objects: Vec<String> = (0..n_objects).map(|i| format!("obj{i:02}")).collect();
        let actions: Vec<(String, String)> = (0..n_actions)
            .map(|i| (format!("verb{i:02}"), format!("item{i:02}")))
            .collect();

        // Successor sets for the object-level walk: `branch` distinct
        // non-self objects each.
        let successors: Vec<Vec<usize>> = (0..n_objects)
            .map(|x| {
                let mut pool: Vec<usize> = (0..n_objects).filter(|&y| y != x).collect();
                let mut chosen = Vec::with_capacity(branch);
                for _ in 0..branch {
                    let k = rng.gen_range(0..pool.len());
                    chosen.push(pool.swap_remove(k));
                }
                chosen.sort_unstable();
                chosen
            })
            .collect();

        // States: (None, 0) start, then (x, y) for each y in successors(x).
        let mut states = vec![GrammarState {
            anticipated_right: Some(0),
            ..GrammarState::EMPTY
        }];
        let mut index: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (x, succ) in successors.iter().enumerate() {
            for &y in succ {
                index.insert((x, y), states.len());
                states.push(GrammarState {
                    contact_right: Some(x),
                    anticipated_right: Some(y),
                    ..GrammarState::EMPTY
                });
            }
        }
        let n = states.len();
        let mut transitions = vec![vec![0.0; n]; n];
        // Start commits to object 0: move to (0, z) for z uniform.
        for &z in &successors[0] {
            transitions[0][index[&(0, z)]] = 1.0 / branch as f64;
        }
        for (x, succ) in successors.iter().enumerate() {
            for &y in succ {
                let from = index[&(x, y)];
                for &z in &successors[y] {
                    transitions[from][index[&(y, z)]] = 1.0 / branch as f64;
                }
            }
        }
        // Deterministic emission per pair state; the start state is silent.
        let mut emissions = vec![vec![0.0; n_actions]; n];
        for i in 1..n {
            emissions[i][(i - 1) % n_actions] = 1.0;
        }
        ActivityGrammar {
            objects,
            actions,
            states,
            start: 0,
            transitions,
            emissions,
            mean_dwell_steps,
            max_dwell_steps: 40,
            distractor_rate: 0.0,
            anticipation_dropout: 0.0,
            anticipation_mode: AnticipationMode::FromState,
            action_offset_steps: 8,
            frame_stride: crate::trace::DEFAULT_FRAME_STRIDE,
            fps: crate::trace::DEFAULT_FPS,
        }
    }
}

/// One sampled dwell: grammar state index plus its inclusive detection
/// step span.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dwell {
    pub state: usize,
    pub first_step: usize,
    pub last_step: usize,
}

/// Everything one generation run produces.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub trace_text: String,
    pub annotation_text: String,
    pub truth_graph: ActivityGraph,
    /// Sampled ground-truth dwell chains per video, aligned with
    /// `video_ids`.
    pub chains: Vec<Vec<Dwell>>,
    pub video_ids: Vec<String>,
}

fn derive_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 over (seed, index) for independent per-video streams.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn sample_geometric(rng: &mut ChaCha8Rng, mean: f64, cap: usize) -> usize {
    // Geometric with mean `mean` over {1, 2, ...}, clipped at `cap`.
    let p = (1.0 / mean).clamp(0.0, 1.0);
    let mut k = 1usize;
    while k < cap && rng.gen_range(0.0..1.0) >= p {
        k += 1;
    }
    k
}

fn slot_token<'a>(grammar: &'a ActivityGrammar, slot: Option<usize>) -> &'a str {
    slot.map(|o| grammar.objects[o].as_str()).unwrap_or("-")
}

/// Samples traces, annotations, and the generating graph. Deterministic in
/// `seed`; each video draws from an independently derived stream so
/// per-video generation order does not matter.
pub fn generate_traces(
    grammar: &ActivityGrammar,
    n_videos: usize,
    steps_per_video: usize,
    seed: u64,
) -> Result<SynthDataset, SynthError> {
    grammar.validate()?;
    let action_vocab = grammar.action_vocab();
    let mut trace_text = String::new();
    let mut annotation_text = String::new();
    let mut chains = Vec::with_capacity(n_videos);
    let mut video_ids = Vec::with_capacity(n_videos);

    let transition_samplers: Vec<Option<WeightedIndex<f64>>> = grammar
        .transitions
        .iter()
        .map(|row| WeightedIndex::new(row.iter().copied()).ok())
        .collect();
    let emission_samplers: Vec<Option<WeightedIndex<f64>>> = grammar
        .emissions
        .iter()
        .map(|row| {
            if row.iter().sum::<f64>() > 0.0 {
                WeightedIndex::new(row.iter().copied()).ok()
            } else {
                None
            }
        })
        .collect();

    for v in 0..n_videos {
        let video_id = format!("synth{v:04}");
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, v as u64));

        // Sample the dwell chain.
        let mut dwells: Vec<Dwell> = Vec::new();
        let mut state = grammar.start;
        let mut step = 0usize;
        while step < steps_per_video {
            let dwell =
                sample_geometric(&mut rng, grammar.mean_dwell_steps, grammar.max_dwell_steps)
                    .min(steps_per_video - step);
            dwells.push(Dwell {
                state,
                first_step: step,
                last_step: step + dwell - 1,
            });
            step += dwell;
            match &transition_samplers[state] {
                Some(sampler) => state = sampler.sample(&mut rng),
                None => break,
            }
        }

        // Anticipation emission per step and hand.
        let per_step_state: Vec<usize> = dwells
            .iter()
            .flat_map(|d| std::iter::repeat(d.state).take(d.last_step - d.first_step + 1))
            .collect();
        let total_steps = per_step_state.len();
        let mut anticipated: Vec<[Option<usize>; 2]> = vec![[None, None]; total_steps];
        match grammar.anticipation_mode {
            AnticipationMode::FromState => {
                for (s, &st) in per_step_state.iter().enumerate() {
                    anticipated[s] = [
                        grammar.states[st].anticipated_right,
                        grammar.states[st].anticipated_left,
                    ];
                }
            }
            AnticipationMode::LeadIn => {
                for pair in dwells.windows(2) {
                    let (prev, next) = (&pair[0], &pair[1]);
                    let change_step = next.first_step;
                    let prev_contacts = [
                        grammar.states[prev.state].contact_right,
                        grammar.states[prev.state].contact_left,
                    ];
                    let next_contacts = [
                        grammar.states[next.state].contact_right,
                        grammar.states[next.state].contact_left,
                    ];
                    for hand in 0..2 {
                        if let Some(obj) = next_contacts[hand] {
                            if prev_contacts[hand] != Some(obj) {
                                let lead = rng.gen_range(1..=3usize);
                                let from = change_step.saturating_sub(lead).max(prev.first_step);
                                for slot in anticipated[from..change_step].iter_mut() {
                                    slot[hand] = Some(obj);
                                }
                            }
                        }
                    }
                }
            }
        }

        // Emit records.
        for (s, &st) in per_step_state.iter().enumerate() {
            let frame = s as u32 * grammar.frame_stride;
            let state = &grammar.states[st];
            let top5 = |rng: &mut ChaCha8Rng, contact: Option<usize>| -> String {
                let Some(true_obj) = contact else {
                    return "-".to_string();
                };
                let mut list = vec![true_obj];
                for _ in 1..5 {
                    if rng.gen_range(0.0..1.0) < grammar.distractor_rate {
                        // Distinct distractor behind the true object.
                        let candidates: Vec<usize> = (0..grammar.objects.len())
                            .filter(|o| !list.contains(o))
                            .collect();
                        if candidates.is_empty() {
                            break;
                        }
                        list.push(candidates[rng.gen_range(0..candidates.len())]);
                    }
                }
                list.iter()
                    .map(|&o| grammar.objects[o].as_str())
                    .collect::<Vec<_>>()
                    .join(",")
            };
            let right_top5 = top5(&mut rng, state.contact_right);
            let left_top5 = top5(&mut rng, state.contact_left);
            let mut ant = anticipated[s];
            for slot in ant.iter_mut() {
                if slot.is_some() && rng.gen_range(0.0..1.0) < grammar.anticipation_dropout {
                    *slot = None;
                }
            }
            writeln!(
                trace_text,
                "{video_id}\t{frame}\t{right_top5}\t{left_top5}\t{}\t{}",
                slot_token(grammar, ant[0]),
                slot_token(grammar, ant[1]),
            )
            .unwrap();
        }

        // Emit annotations: one sampled action per sufficiently long dwell
        // of an emitting state, starting `action_offset_steps` into it.
        for d in &dwells {
            let dwell_steps = d.last_step - d.first_step + 1;
            if dwell_steps <= grammar.action_offset_steps {
                continue;
            }
            let Some(sampler) = &emission_samplers[d.state] else {
                continue;
            };
            let action = sampler.sample(&mut rng);
            let (verb, noun) = &grammar.actions[action];
            let start_frame = (d.first_step + grammar.action_offset_steps) as u32
                * grammar.frame_stride;
            let stop_frame = d.last_step as u32 * grammar.frame_stride + 1;
            writeln!(
                annotation_text,
                "{video_id}\t{start_frame}\t{stop_frame}\t{verb}\t{noun}"
            )
            .unwrap();
            let _ = action_vocab; // ids are assigned at parse time
        }

        chains.push(dwells);
        video_ids.push(video_id);
    }

    Ok(SynthDataset {
        trace_text,
        annotation_text,
        truth_graph: grammar.truth_graph(),
        chains,
        video_ids,
    })
}

/// Naive run-length dedup: keep elements that differ from their successor,
/// plus the last element.
pub fn oracle_dedup(raw: &[ManipulationState]) -> Vec<ManipulationState> {
    let mut out = Vec::new();
    for (i, s) in raw.iter().enumerate() {
        if i + 1 == raw.len() || raw[i + 1] != *s {
            out.push(*s);
        }
    }
    out
}

/// Brute-force graph construction by exhaustive nested-loop counting.
/// Shares no counting logic with the production builder; used only to
/// cross-check it.
pub fn oracle_graph(
    sequences: &[StateSequence],
    annotations: &[ActionAnnotation],
    object_vocab: &ObjectVocab,
    action_vocab: &ActionVocab,
) -> ActivityGraph {
    // Unique states by repeated linear scans.
    let mut states: Vec<ManipulationState> = Vec::new();
    for seq in sequences {
        for item in &seq.items {
            if !states.contains(&item.state) {
                states.push(item.state);
            }
        }
    }
    states.sort();

    let node_count = states.len() + action_vocab.len();
    let mut edges: BTreeMap<(NodeIndex, NodeIndex), f64> = BTreeMap::new();
    for i in 0..node_count {
        edges.insert((i, i), 1.0);
    }

    // Transition probabilities by counting every pair for every source.
    for (i, src) in states.iter().enumerate() {
        let mut denom = 0usize;
        for seq in sequences {
            for pair in seq.items.windows(2) {
                if pair[0].state == *src {
                    denom += 1;
                }
            }
        }
        if denom == 0 {
            continue;
        }
        for (j, dst) in states.iter().enumerate() {
            let mut count = 0usize;
            for seq in sequences {
                for pair in seq.items.windows(2) {
                    if pair[0].state == *src && pair[1].state == *dst {
                        count += 1;
                    }
                }
            }
            if count > 0 {
                edges.insert((i, j), count as f64 / denom as f64);
            }
        }
    }

    // Action probabilities by counting overlapping annotations per state.
    for (i, src) in states.iter().enumerate() {
        let mut denom = 0usize;
        for ann in annotations {
            for seq in sequences {
                if seq.video_id != ann.video_id {
                    continue;
                }
                for item in &seq.items {
                    if item.state == *src
                        && ann.start_frame <= item.end_frame
                        && ann.stop_frame > item.start_frame
                    {
                        denom += 1;
                    }
                }
            }
        }
        if denom == 0 {
            continue;
        }
        for action_id in 0..action_vocab.len() as u32 {
            let mut count = 0usize;
            for ann in annotations {
                if ann.action_id != action_id {
                    continue;
                }
                for seq in sequences {
                    if seq.video_id != ann.video_id {
                        continue;
                    }
                    for item in &seq.items {
                        if item.state == *src
                            && ann.start_frame <= item.end_frame
                            && ann.stop_frame > item.start_frame
                        {
                            count += 1;
                        }
                    }
                }
            }
            if count > 0 {
                edges.insert(
                    (i, states.len() + action_id as usize),
                    count as f64 / denom as f64,
                );
            }
        }
    }

    ActivityGraph::from_parts(object_vocab.clone(), action_vocab.clone(), states, edges)
}

/// Edge-for-edge comparison with a weight tolerance; `Err` describes the
/// first difference found.
pub fn graphs_equal_within(a: &ActivityGraph, b: &ActivityGraph, tol: f64) -> Result<(), String> {
    if a.states() != b.states() {
        return Err(format!(
            "state node sets differ: {} vs {} states",
            a.state_count(),
            b.state_count()
        ));
    }
    if a.action_count() != b.action_count() {
        return Err(format!(
            "action node counts differ: {} vs {}",
            a.action_count(),
            b.action_count()
        ));
    }
    let ea = a.edges();
    let eb = b.edges();
    for (key, wa) in ea {
        match eb.get(key) {
            None => return Err(format!("edge {key:?} missing from second graph")),
            Some(wb) if (wa - wb).abs() >= tol => {
                return Err(format!("edge {key:?} weights differ: {wa} vs {wb}"));
            }
            Some(_) => {}
        }
    }
    if let Some((key, _)) = eb.iter().find(|(k, _)| !ea.contains_key(*k)) {
        return Err(format!("edge {key:?} missing from first graph"));
    }
    Ok(())
}

/// Random state sequences and annotations for oracle cross-checks:
/// arbitrary 4-slot states (all hands exercised), deduplicated, with
/// annotations scattered over each video's span.
pub fn random_sequences(
    seed: u64,
    n_videos: usize,
    max_items: usize,
    n_objects: usize,
    n_actions: usize,
) -> (
    Vec<StateSequence>,
    Vec<ActionAnnotation>,
    ObjectVocab,
    ActionVocab,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let object_vocab =
        ObjectVocab::from_nouns((0..n_objects).map(|i| format!("obj{i:02}")).collect::<Vec<_>>());
    let action_vocab = ActionVocab::from_pairs(
        (0..n_actions).map(|i| (format!("verb{i:02}"), format!("item{i:02}"))),
    );

    let mut sequences = Vec::with_capacity(n_videos);
    let mut annotations = Vec::new();
    for v in 0..n_videos {
        let video_id = format!("rand{v:04}");
        let len = rng.gen_range(1..=max_items.max(1));
        let mut items = Vec::with_capacity(len);
        let mut frame = 0u32;
        let mut prev: Option<ManipulationState> = None;
        for _ in 0..len {
            let slot = |rng: &mut ChaCha8Rng| -> Option<u32> {
                rng.gen_bool(0.6).then(|| rng.gen_range(0..n_objects) as u32)
            };
            let mut state = ManipulationState {
                contact_right: slot(&mut rng),
                contact_left: slot(&mut rng),
                anticipated_right: slot(&mut rng),
                anticipated_left: slot(&mut rng),
            };
            // Respect the no-consecutive-duplicates invariant.
            while prev == Some(state) {
                state.anticipated_left = slot(&mut rng);
                state.contact_right = slot(&mut rng);
            }
            prev = Some(state);
            let span = rng.gen_range(2..40u32);
            items.push(crate::trace::StateItem {
                state,
                start_frame: frame,
                end_frame: frame + span,
            });
            frame += span + 2;
        }
        let video_end = frame;
        for _ in 0..rng.gen_range(0..6usize) {
            let start = rng.gen_range(0..video_end.max(1));
            let stop = (start + rng.gen_range(1..30u32)).min(video_end + 30);
            let action_id = rng.gen_range(0..n_actions) as u32;
            let (verb, noun) = action_vocab.pair(action_id).expect("id in range");
            annotations.push(ActionAnnotation {
                video_id: video_id.clone(),
                start_frame: start,
                stop_frame: stop,
                verb: verb.to_string(),
                noun: noun.to_string(),
                action_id,
            });
        }
        sequences.push(StateSequence { video_id, items });
    }
    (sequences, annotations, object_vocab, action_vocab)
}

/// Random unit-ish embedding vectors for the given tokens, rendered in the
/// embedding file format.
pub fn toy_embeddings(tokens: &[String], dimension: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for token in tokens {
        let mut v: Vec<f64> = (0..dimension).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        for x in &mut v {
            *x /= norm;
        }
        let rendered: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
        writeln!(out, "{token} {}", rendered.join(" ")).unwrap();
    }
    out
}

/// Synthetic appearance-stream scores: the argmax matches the ground truth
/// with probability `accuracy`, otherwise a uniformly random wrong class.
/// The winning class receives 0.7 mass; the rest share the remainder.
pub fn synthetic_appearance_scores(
    segments: &[EvalSegment],
    action_count: usize,
    accuracy: f64,
    seed: u64,
) -> ScoreTable {
    assert!((0.0..=1.0).contains(&accuracy));
    assert!(action_count >= 2, "appearance scores need at least 2 classes");
    let mut table = ScoreTable::new(action_count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for seg in segments {
        let truth = seg.action_id as usize;
        let winner = if rng.gen_range(0.0..1.0) < accuracy {
            truth
        } else {
            let mut w = rng.gen_range(0..action_count - 1);
            if w >= truth {
                w += 1;
            }
            w
        };
        let rest = 0.3 / (action_count - 1) as f64;
        let mut row = vec![rest; action_count];
        row[winner] = 0.7;
        table.insert(&seg.segment_id, row);
    }
    table
}

fn fmt_prob(p: f64) -> String {
    // Shortest exact form keeps grammar files human-editable.
    if p == p.trunc() {
        format!("{p:.0}")
    } else {
        format!("{p}")
    }
}

/// Renders a grammar in the versioned config format.
pub fn grammar_to_string(grammar: &ActivityGrammar) -> String {
    let mut out = String::new();
    writeln!(out, "{GRAMMAR_MAGIC}").unwrap();
    writeln!(out, "fps = {}", grammar.fps).unwrap();
    writeln!(out, "frame_stride = {}", grammar.frame_stride).unwrap();
    writeln!(out, "mean_dwell = {}", grammar.mean_dwell_steps).unwrap();
    writeln!(out, "max_dwell = {}", grammar.max_dwell_steps).unwrap();
    writeln!(out, "distractor_rate = {}", grammar.distractor_rate).unwrap();
    writeln!(out, "anticipation_dropout = {}", grammar.anticipation_dropout).unwrap();
    writeln!(out, "anticipation_mode = {}", grammar.anticipation_mode.as_str()).unwrap();
    writeln!(out, "action_offset_steps = {}", grammar.action_offset_steps).unwrap();
    writeln!(out, "start = {}", grammar.start).unwrap();
    writeln!(out, "\nobjects:").unwrap();
    for o in &grammar.objects {
        writeln!(out, "{o}").unwrap();
    }
    writeln!(out, "\nactions:").unwrap();
    for (v, n) in &grammar.actions {
        writeln!(out, "{v} {n}").unwrap();
    }
    writeln!(out, "\nstates:").unwrap();
    for s in &grammar.states {
        let tok = |slot: Option<usize>| {
            slot.map(|o| grammar.objects[o].clone())
                .unwrap_or_else(|| "-".to_string())
        };
        writeln!(
            out,
            "{} {} {} {}",
            tok(s.contact_right),
            tok(s.contact_left),
            tok(s.anticipated_right),
            tok(s.anticipated_left)
        )
        .unwrap();
    }
    writeln!(out, "\ntransitions:").unwrap();
    for row in &grammar.transitions {
        let rendered: Vec<String> = row.iter().map(|p| fmt_prob(*p)).collect();
        writeln!(out, "{}", rendered.join(" ")).unwrap();
    }
    writeln!(out, "\nemissions:").unwrap();
    for row in &grammar.emissions {
        let rendered: Vec<String> = row.iter().map(|p| fmt_prob(*p)).collect();
        writeln!(out, "{}", rendered.join(" ")).unwrap();
    }
    out
}

pub fn write_grammar(grammar: &ActivityGrammar, path: &Path) -> Result<(), SynthError> {
    fs::write(path, grammar_to_string(grammar)).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_grammar(path: &Path) -> Result<ActivityGrammar, SynthError> {
    let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.display().to_string(),
        source,
    })?;
    grammar_from_string(&path.display().to_string(), &text)
}

pub fn grammar_from_string(path: &str, text: &str) -> Result<ActivityGrammar, SynthError> {
    let malformed = |line: usize, msg: String| SynthError::Malformed {
        path: path.to_string(),
        line,
        msg,
    };

    #[derive(PartialEq, Clone, Copy)]
    enum Section {
        Header,
        Objects,
        Actions,
        States,
        Transitions,
        Emissions,
    }

    let mut fps = crate::trace::DEFAULT_FPS;
    let mut frame_stride = crate::trace::DEFAULT_FRAME_STRIDE;
    let mut mean_dwell = 4.0;
    let mut max_dwell = 40usize;
    let mut distractor_rate = 0.0;
    let mut anticipation_dropout = 0.0;
    let mut anticipation_mode = AnticipationMode::FromState;
    let mut action_offset_steps = 8usize;
    let mut start = 0usize;
    let mut objects: Vec<String> = Vec::new();
    let mut actions: Vec<(String, String)> = Vec::new();
    let mut state_rows: Vec<(usize, String)> = Vec::new();
    let mut transition_rows: Vec<(usize, String)> = Vec::new();
    let mut emission_rows: Vec<(usize, String)> = Vec::new();

    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| malformed(1, "empty grammar file".to_string()))?;
    if header.trim_end() != GRAMMAR_MAGIC {
        return Err(malformed(
            1,
            format!("expected header `{GRAMMAR_MAGIC}`, found `{header}`"),
        ));
    }

    let mut section = Section::Header;
    for (idx, raw_line) in lines {
        let line_no = idx + 1;
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match line {
            "objects:" => {
                section = Section::Objects;
                continue;
            }
            "actions:" => {
                section = Section::Actions;
                continue;
            }
            "states:" => {
                section = Section::States;
                continue;
            }
            "transitions:" => {
                section = Section::Transitions;
                continue;
            }
            "emissions:" => {
                section = Section::Emissions;
                continue;
            }
            _ => {}
        }
        match section {
            Section::Header => {
                let (key, value) = line
                    .split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| {
                        malformed(line_no, format!("expected `key = value`, got `{line}`"))
                    })?;
                let bad = |what: &str| {
                    malformed(line_no, format!("`{key}` value `{value}` is not {what}"))
                };
                match key {
                    "fps" => fps = value.parse().map_err(|_| bad("a number"))?,
                    "frame_stride" => {
                        frame_stride = value.parse().map_err(|_| bad("an integer"))?
                    }
                    "mean_dwell" => mean_dwell = value.parse().map_err(|_| bad("a number"))?,
                    "max_dwell" => max_dwell = value.parse().map_err(|_| bad("an integer"))?,
                    "distractor_rate" => {
                        distractor_rate = value.parse().map_err(|_| bad("a number"))?
                    }
                    "anticipation_dropout" => {
                        anticipation_dropout = value.parse().map_err(|_| bad("a number"))?
                    }
                    "anticipation_mode" => {
                        anticipation_mode = match value {
                            "state" => AnticipationMode::FromState,
                            "lead" => AnticipationMode::LeadIn,
                            _ => return Err(bad("`state` or `lead`")),
                        }
                    }
                    "action_offset_steps" => {
                        action_offset_steps = value.parse().map_err(|_| bad("an integer"))?
                    }
                    "start" => start = value.parse().map_err(|_| bad("an integer"))?,
                    other => {
                        return Err(malformed(line_no, format!("unknown key `{other}`")));
                    }
                }
            }
            Section::Objects => objects.push(line.to_string()),
            Section::Actions => {
                let (v, n) = line.split_once(' ').ok_or_else(|| {
                    malformed(line_no, format!("expected `verb noun`, got `{line}`"))
                })?;
                actions.push((v.to_string(), n.trim().to_string()));
            }
            Section::States => state_rows.push((line_no, line.to_string())),
            Section::Transitions => transition_rows.push((line_no, line.to_string())),
            Section::Emissions => emission_rows.push((line_no, line.to_string())),
        }
    }

    let object_index: BTreeMap<&str, usize> = objects
        .iter()
        .enumerate()
        .map(|(i, o)| (o.as_str(), i))
        .collect();
    if object_index.len() != objects.len() {
        return Err(SynthError::Invalid("duplicate object nouns".to_string()));
    }

    let mut states = Vec::with_capacity(state_rows.len());
    for (line_no, row) in &state_rows {
        let parts: Vec<&str> = row.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(malformed(
                *line_no,
                format!("state row needs 4 slots, got {}", parts.len()),
            ));
        }
        let mut slots = [None; 4];
        for (i, p) in parts.iter().enumerate() {
            slots[i] = if *p == "-" {
                None
            } else {
                Some(*object_index.get(p).ok_or_else(|| {
                    malformed(*line_no, format!("unknown object `{p}` in state row"))
                })?)
            };
        }
        states.push(GrammarState {
            contact_right: slots[0],
            contact_left: slots[1],
            anticipated_right: slots[2],
            anticipated_left: slots[3],
        });
    }

    let parse_matrix = |rows: &[(usize, String)],
                        cols: usize,
                        what: &str|
     -> Result<Vec<Vec<f64>>, SynthError> {
        let mut out = Vec::with_capacity(rows.len());
        for (line_no, row) in rows {
            let values: Result<Vec<f64>, _> =
                row.split_whitespace().map(|f| f.parse::<f64>()).collect();
            let values = values.map_err(|_| {
                malformed(*line_no, format!("{what} row has a non-numeric entry"))
            })?;
            if values.len() != cols {
                return Err(malformed(
                    *line_no,
                    format!("{what} row has {} entries, expected {cols}", values.len()),
                ));
            }
            out.push(values);
        }
        Ok(out)
    };
    let transitions = parse_matrix(&transition_rows, states.len(), "transition")?;
    let emissions = parse_matrix(&emission_rows, actions.len(), "emission")?;

    let grammar = ActivityGrammar {
        objects,
        actions,
        states,
        start,
        transitions,
        emissions,
        mean_dwell_steps: mean_dwell,
        max_dwell_steps: max_dwell,
        distractor_rate,
        anticipation_dropout,
        anticipation_mode,
        action_offset_steps,
        frame_stride,
        fps,
    };
    grammar.validate()?;
    Ok(grammar)
}
