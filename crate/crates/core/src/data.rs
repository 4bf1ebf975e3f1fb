//! Ontology and corpus ingestion, the held-out-value split, and the seeded
//! synthetic dialogue generator.
//!
//! Corpora use one canonical JSON layout:
//!
//! ```json
//! {"ontology": {"food": ["thai", "italian"]},
//!  "dialogues": [{"turns": [{"system_acts": [{"act": "request", "slot": "food"}],
//!                            "utterance": "i want thai food",
//!                            "turn_label": {"food": "thai"},
//!                            "goal": {"food": "thai"}}]}]}
//! ```
//!
//! All slot values are normalized with [`crate::embeddings::tokenize`] so
//! that ontology entries, labels and utterance tokens compare equal.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{tokenize, WordVectors};
use crate::eval::accumulate_goal;

/// Slot → value assignment; absent slots are `None`.
pub type Goal = BTreeMap<String, String>;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed JSON at byte {offset} (line {line}, column {column}): {message}")]
    Syntax {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("ontology error: {0}")]
    Ontology(String),
    #[error("unknown slot {0:?}")]
    UnknownSlot(String),
    #[error("{0}")]
    Contract(String),
}

/// Canonical form of a slot value: lowercase tokens joined by single spaces.
pub fn normalize_value(value: &str) -> String {
    tokenize(value).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "IndexMap<String, Vec<String>>", into = "IndexMap<String, Vec<String>>")]
pub struct Ontology {
    slots: IndexMap<String, Vec<String>>,
}

impl TryFrom<IndexMap<String, Vec<String>>> for Ontology {
    type Error = DataError;

    fn try_from(raw: IndexMap<String, Vec<String>>) -> Result<Self, DataError> {
        let mut ont = Ontology::default();
        for (slot, values) in raw {
            ont.add_slot(&slot, values)?;
        }
        Ok(ont)
    }
}

impl From<Ontology> for IndexMap<String, Vec<String>> {
    fn from(o: Ontology) -> Self {
        o.slots
    }
}

impl Ontology {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_slot<I, S>(&mut self, slot: &str, values: I) -> Result<(), DataError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if self.slots.contains_key(slot) {
            return Err(DataError::Ontology(format!("duplicate slot {slot:?}")));
        }
        self.slots.insert(slot.to_owned(), Vec::new());
        for v in values {
            self.push_value(slot, v.as_ref())?;
        }
        Ok(())
    }

    /// Appends a value to `slot`; returns its index.
    pub fn push_value(&mut self, slot: &str, value: &str) -> Result<usize, DataError> {
        let norm = normalize_value(value);
        if norm.is_empty() {
            return Err(DataError::Ontology(format!(
                "value {value:?} of slot {slot:?} has no tokens"
            )));
        }
        let values = self
            .slots
            .get_mut(slot)
            .ok_or_else(|| DataError::UnknownSlot(slot.to_owned()))?;
        if let Some(i) = values.iter().position(|v| *v == norm) {
            return Err(DataError::Ontology(format!(
                "duplicate value {norm:?} in slot {slot:?} (index {i})"
            )));
        }
        values.push(norm);
        Ok(values.len() - 1)
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn has_slot(&self, slot: &str) -> bool {
        self.slots.contains_key(slot)
    }

    pub fn values(&self, slot: &str) -> Option<&[String]> {
        self.slots.get(slot).map(Vec::as_slice)
    }

    pub fn contains(&self, slot: &str, value: &str) -> bool {
        let norm = normalize_value(value);
        self.values(slot).is_some_and(|vs| vs.contains(&norm))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.slots.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemAct {
    pub act: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
}

impl SystemAct {
    pub fn new(act: &str, slot: Option<&str>, value: Option<&str>) -> Self {
        Self {
            act: act.to_owned(),
            slot: slot.map(str::to_owned),
            value: value.map(str::to_owned),
        }
    }
}

impl fmt::Display for SystemAct {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.slot, &self.value) {
            (Some(s), Some(v)) => write!(f, "{}({s}={v})", self.act),
            (Some(s), None) => write!(f, "{}({s})", self.act),
            _ => write!(f, "{}()", self.act),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    #[serde(default)]
    pub system_acts: Vec<SystemAct>,
    pub utterance: String,
    #[serde(skip)]
    pub tokens: Vec<String>,
    #[serde(default)]
    pub turn_label: Goal,
    #[serde(default)]
    pub goal: Goal,
}

impl Turn {
    pub fn new(system_acts: Vec<SystemAct>, utterance: &str, turn_label: Goal, goal: Goal) -> Self {
        Self {
            system_acts,
            tokens: tokenize(utterance),
            utterance: utterance.to_owned(),
            turn_label,
            goal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DialogueCorpus {
    pub dialogues: Vec<Dialogue>,
}

impl DialogueCorpus {
    pub fn num_turns(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    pub fn turns(&self) -> impl Iterator<Item = &Turn> {
        self.dialogues.iter().flat_map(|d| &d.turns)
    }

    /// Every slot named by a label or goal.
    pub fn slots(&self) -> BTreeSet<String> {
        self.turns()
            .flat_map(|t| t.turn_label.keys().chain(t.goal.keys()))
            .cloned()
            .collect()
    }

    /// Distinct truth values of `slot` (turn labels and goals).
    pub fn truth_values(&self, slot: &str) -> BTreeSet<String> {
        self.turns()
            .flat_map(|t| [t.turn_label.get(slot), t.goal.get(slot)])
            .flatten()
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutOfOntology {
    pub dialogue: usize,
    pub turn: usize,
    pub slot: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LoadReport {
    pub dialogues: usize,
    pub turns: usize,
    pub unknown_slot_labels: usize,
    pub out_of_ontology: Vec<OutOfOntology>,
    /// `(dialogue, turn)` positions whose stored goal disagrees with the fold of turn labels.
    pub goal_mismatches: Vec<(usize, usize)>,
}

/// A parsed corpus file.
#[derive(Debug, Clone)]
pub struct CorpusFile {
    pub ontology: Ontology,
    pub corpus: DialogueCorpus,
    pub report: LoadReport,
}

#[derive(Serialize, Deserialize)]
struct RawCorpusFile {
    #[serde(default)]
    ontology: Option<Ontology>,
    dialogues: Vec<Dialogue>,
}

pub fn load_corpus(path: &Path) -> Result<CorpusFile, DataError> {
    load_corpus_with(path, None)
}

/// Loads a corpus, validating it against `ontology` instead of the file's own
/// when one is given. The file may then omit its `ontology` key.
pub fn load_corpus_with(path: &Path, ontology: Option<&Ontology>) -> Result<CorpusFile, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus_with(&bytes, ontology)
}

pub fn parse_corpus(bytes: &[u8]) -> Result<CorpusFile, DataError> {
    parse_corpus_with(bytes, None)
}

pub fn parse_corpus_with(bytes: &[u8], ontology: Option<&Ontology>) -> Result<CorpusFile, DataError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let raw: RawCorpusFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        if inner.is_syntax() || inner.is_eof() {
            DataError::Syntax {
                offset: byte_offset(bytes, inner.line(), inner.column()),
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            }
        } else {
            DataError::Schema {
                path: e.path().to_string(),
                message: inner.to_string(),
            }
        }
    })?;
    let ontology = match (ontology, raw.ontology) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => o,
        (None, None) => {
            return Err(DataError::Schema {
                path: "ontology".into(),
                message: "missing field `ontology`".into(),
            })
        }
    };
    let mut corpus = DialogueCorpus {
        dialogues: raw.dialogues,
    };
    let report = validate_corpus(&mut corpus, &ontology);
    log::info!(
        "loaded {} dialogues / {} turns ({} out-of-ontology labels, {} goal mismatches)",
        report.dialogues,
        report.turns,
        report.out_of_ontology.len(),
        report.goal_mismatches.len()
    );
    Ok(CorpusFile {
        ontology,
        corpus,
        report,
    })
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1).min(l.len());
        }
        offset += l.len() + 1;
    }
    bytes.len()
}

/// Tokenizes utterances, normalizes values, drops labels of unknown slots,
/// and flags out-of-ontology values and goal-fold mismatches.
fn validate_corpus(corpus: &mut DialogueCorpus, ontology: &Ontology) -> LoadReport {
    let mut report = LoadReport {
        dialogues: corpus.dialogues.len(),
        ..LoadReport::default()
    };
    for (di, dialogue) in corpus.dialogues.iter_mut().enumerate() {
        let mut folded = Goal::new();
        for (ti, turn) in dialogue.turns.iter_mut().enumerate() {
            report.turns += 1;
            turn.tokens = tokenize(&turn.utterance);
            for map in [&mut turn.turn_label, &mut turn.goal] {
                let entries = std::mem::take(map);
                for (slot, value) in entries {
                    if !ontology.has_slot(&slot) {
                        log::warn!("dialogue {di} turn {ti}: skipping label for unknown slot {slot:?}");
                        report.unknown_slot_labels += 1;
                        continue;
                    }
                    map.insert(slot, normalize_value(&value));
                }
            }
            for (slot, value) in &turn.turn_label {
                if !ontology.contains(slot, value) {
                    report.out_of_ontology.push(OutOfOntology {
                        dialogue: di,
                        turn: ti,
                        slot: slot.clone(),
                        value: value.clone(),
                    });
                }
            }
            folded = accumulate_goal(&folded, &turn.turn_label);
            if folded != turn.goal {
                report.goal_mismatches.push((di, ti));
            }
        }
    }
    report
}

pub fn corpus_to_json(ontology: &Ontology, corpus: &DialogueCorpus) -> String {
    #[derive(Serialize)]
    struct Out<'a> {
        ontology: &'a Ontology,
        dialogues: &'a [Dialogue],
    }
    serde_json::to_string_pretty(&Out {
        ontology,
        dialogues: &corpus.dialogues,
    })
    .expect("corpus serializes")
}

pub fn save_corpus(path: &Path, ontology: &Ontology, corpus: &DialogueCorpus) -> Result<(), DataError> {
    std::fs::write(path, corpus_to_json(ontology, corpus)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `⌊fraction · n + 0.5⌋`.
pub fn holdout_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64 + 0.5).floor() as usize
}

/// Holds out a seeded random subset of `slot`'s values and discards every
/// dialogue that has one of them as a truth value for that slot. The held-out
/// values stay in the ontology; they are returned in ontology order.
pub fn make_unseen_split(
    corpus: &DialogueCorpus,
    ontology: &Ontology,
    slot: &str,
    fraction: f64,
    seed: u64,
) -> Result<(DialogueCorpus, Vec<String>), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Contract(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    let values = ontology
        .values(slot)
        .ok_or_else(|| DataError::UnknownSlot(slot.to_owned()))?;
    let count = holdout_count(fraction, values.len());
    if count == 0 || count >= values.len() {
        return Err(DataError::Contract(format!(
            "fraction {fraction} of {} values holds out {count}; need between 1 and {}",
            values.len(),
            values.len().saturating_sub(1)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, values.len(), count).into_vec();
    picked.sort_unstable();
    let heldout: Vec<String> = picked.into_iter().map(|i| values[i].clone()).collect();
    let held: BTreeSet<&str> = heldout.iter().map(String::as_str).collect();

    let dialogues = corpus
        .dialogues
        .iter()
        .filter(|d| {
            !d.turns.iter().any(|t| {
                [t.turn_label.get(slot), t.goal.get(slot)]
                    .into_iter()
                    .flatten()
                    .any(|v| held.contains(v.as_str()))
            })
        })
        .cloned()
        .collect();
    Ok((DialogueCorpus { dialogues }, heldout))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSplit {
    pub slot: String,
    pub total: usize,
    pub seen: usize,
    pub unseen: usize,
    pub unseen_values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub slots: Vec<SlotSplit>,
}

impl SplitReport {
    pub fn slot(&self, slot: &str) -> Option<&SlotSplit> {
        self.slots.iter().find(|s| s.slot == slot)
    }

    /// `(total, seen, unseen)` over all slots.
    pub fn totals(&self) -> (usize, usize, usize) {
        self.slots.iter().fold((0, 0, 0), |(a, b, c), s| {
            (a + s.total, b + s.seen, c + s.unseen)
        })
    }
}

impl fmt::Display for SplitReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<14} {:>7} {:>6} {:>7}", "slot", "#values", "seen", "unseen")?;
        for s in &self.slots {
            writeln!(f, "{:<14} {:>7} {:>6} {:>7}", s.slot, s.total, s.seen, s.unseen)?;
        }
        let (t, s, u) = self.totals();
        write!(f, "{:<14} {:>7} {:>6} {:>7}", "", t, s, u)
    }
}

/// Per slot, counts the distinct truth values of the test corpus and how many
/// of them also occur as truth values in training.
pub fn split_report(train: &DialogueCorpus, test: &DialogueCorpus, ontology: &Ontology) -> SplitReport {
    let slots = ontology
        .slots()
        .map(|slot| {
            let seen_set = train.truth_values(slot);
            let test_values = test.truth_values(slot);
            // ontology order first, then anything out-of-ontology
            let mut ordered: Vec<String> = ontology
                .values(slot)
                .unwrap_or_default()
                .iter()
                .filter(|v| test_values.contains(*v))
                .cloned()
                .collect();
            let extra: Vec<String> = test_values.iter().filter(|v| !ordered.contains(v)).cloned().collect();
            ordered.extend(extra);
            let unseen_values: Vec<String> = ordered
                .iter()
                .filter(|v| !seen_set.contains(*v))
                .cloned()
                .collect();
            SlotSplit {
                slot: slot.to_owned(),
                total: ordered.len(),
                seen: ordered.len() - unseen_values.len(),
                unseen: unseen_values.len(),
                unseen_values,
            }
        })
        .collect();
    SplitReport { slots }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotGrammar {
    pub name: String,
    pub values: Vec<String>,
    /// Inform templates; `VALUE` is replaced by the value verbatim.
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub slots: Vec<SlotGrammar>,
    pub openings: Vec<String>,
    pub affirmations: Vec<String>,
    pub negations: Vec<String>,
    pub closings: Vec<String>,
    pub distractors: Vec<String>,
    /// Names used in the system's closing `offer(name=...)` act.
    pub venue_names: Vec<String>,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Probability that a slot is part of a dialogue's user goal.
    pub slot_probability: f64,
    /// Probability that the user rejects a confirmation with a new value.
    pub change_probability: f64,
    pub distractor_probability: f64,
    /// Phrases naming a value the user does not want; `VALUE` is replaced.
    #[serde(default)]
    pub rejections: Vec<String>,
    /// Probability that an inform is preceded by a rejected other value.
    #[serde(default)]
    pub rejection_probability: f64,
    /// Whether the closing offer restates the goal as `inform` acts.
    #[serde(default)]
    pub offer_restates_goal: bool,
    /// Probability that a mid-dialogue system turn implicitly confirms the
    /// goal so far with `impl-conf` acts.
    #[serde(default)]
    pub implicit_confirm_probability: f64,
}

const FOOD_VALUES: [&str; 40] = [
    "italian", "chinese", "indian", "thai", "french", "japanese", "korean", "vietnamese",
    "turkish", "greek", "spanish", "mexican", "lebanese", "british", "european",
    "modern european", "north american", "portuguese", "moroccan", "persian", "polish",
    "russian", "german", "swedish", "danish", "african", "caribbean", "cuban", "brazilian",
    "peruvian", "jamaican", "malaysian", "indonesian", "singaporean", "tuscan", "basque",
    "catalan", "belgian", "austrian", "hungarian",
];

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| (*s).to_owned()).collect()
}

impl GrammarConfig {
    /// Restaurant domain with a 40-value food slot, 5 areas and 3 price ranges.
    pub fn restaurant() -> Self {
        Self {
            slots: vec![
                SlotGrammar {
                    name: "food".into(),
                    values: strings(&FOOD_VALUES),
                    templates: strings(&[
                        "i want VALUE food",
                        "i am looking for a VALUE restaurant",
                        "VALUE food please",
                        "how about VALUE food",
                        "a restaurant serving VALUE food",
                        "i would like VALUE cuisine",
                    ]),
                },
                SlotGrammar {
                    name: "area".into(),
                    values: strings(&["north", "south", "east", "west", "centre"]),
                    templates: strings(&[
                        "in the VALUE",
                        "VALUE part of town",
                        "the VALUE area",
                        "somewhere in the VALUE of town",
                    ]),
                },
                SlotGrammar {
                    name: "pricerange".into(),
                    values: strings(&["cheap", "moderate", "expensive"]),
                    templates: strings(&[
                        "VALUE price range",
                        "something VALUE",
                        "in the VALUE price range",
                        "a VALUE priced restaurant",
                    ]),
                },
            ],
            openings: strings(&["hello", "hi", "", "", ""]),
            affirmations: strings(&["yes", "yes that is right", "correct", "yeah"]),
            negations: strings(&["no", "no sorry", "not really"]),
            closings: strings(&["thank you goodbye", "thanks bye", "great thank you"]),
            distractors: strings(&["uh", "um", "okay", "well", "please"]),
            venue_names: strings(&["the golden curry", "saint johns chop house", "the nirala"]),
            min_turns: 2,
            max_turns: 6,
            slot_probability: 0.7,
            change_probability: 0.3,
            distractor_probability: 0.2,
            rejections: strings(&["not VALUE", "i don't want VALUE", "no VALUE"]),
            rejection_probability: 0.0,
            offer_restates_goal: false,
            implicit_confirm_probability: 0.0,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.slots.is_empty() {
            return Err(DataError::Contract("grammar has no slots".into()));
        }
        for s in &self.slots {
            if s.values.is_empty() {
                return Err(DataError::Contract(format!("slot {:?} has an empty value inventory", s.name)));
            }
            if s.templates.is_empty() || s.templates.iter().any(|t| !t.contains("VALUE")) {
                return Err(DataError::Contract(format!(
                    "slot {:?} needs templates containing VALUE",
                    s.name
                )));
            }
        }
        if self.min_turns < 2 || self.max_turns < self.min_turns {
            return Err(DataError::Contract(format!(
                "turn range {}..={} must start at 2 or more",
                self.min_turns, self.max_turns
            )));
        }
        for (name, list) in [
            ("affirmations", &self.affirmations),
            ("negations", &self.negations),
            ("closings", &self.closings),
            ("venue_names", &self.venue_names),
        ] {
            if list.is_empty() {
                return Err(DataError::Contract(format!("grammar list {name} is empty")));
            }
        }
        Ok(())
    }

    pub fn ontology(&self) -> Result<Ontology, DataError> {
        let mut ont = Ontology::new();
        for s in &self.slots {
            ont.add_slot(&s.name, &s.values)?;
        }
        Ok(ont)
    }
}

struct DialogueBuilder<'a> {
    config: &'a GrammarConfig,
    ontology: &'a Ontology,
    rng: ChaCha8Rng,
}

impl DialogueBuilder<'_> {
    fn pick<'s>(&mut self, items: &'s [String]) -> &'s str {
        &items[self.rng.random_range(0..items.len())]
    }

    fn inform_phrase(&mut self, slot: usize, value: &str) -> String {
        let cfg = self.config;
        let phrase = self.pick(&cfg.slots[slot].templates).replace("VALUE", value);
        let n_values = cfg.slots[slot].values.len();
        if cfg.rejections.is_empty() || n_values < 2 || !self.rng.random_bool(cfg.rejection_probability) {
            return phrase;
        }
        let mut other = value.to_owned();
        while other == value {
            other = self.value_for(slot);
        }
        let rejection = self.pick(&cfg.rejections).replace("VALUE", &other);
        format!("{rejection} {phrase}")
    }

    fn decorate(&mut self, text: String) -> String {
        let mut parts: Vec<String> = vec![text];
        let cfg = self.config;
        if !cfg.distractors.is_empty() && self.rng.random_bool(cfg.distractor_probability) {
            let d = self.pick(&cfg.distractors).to_owned();
            if self.rng.random_bool(0.5) {
                parts.insert(0, d);
            } else {
                parts.push(d);
            }
        }
        parts.retain(|p| !p.is_empty());
        parts.join(" ")
    }

    fn value_for(&mut self, slot: usize) -> String {
        let values = self
            .ontology
            .values(&self.config.slots[slot].name)
            .expect("slot in ontology");
        values[self.rng.random_range(0..values.len())].clone()
    }

    fn build(&mut self) -> Dialogue {
        let cfg = self.config;
        let n_slots = cfg.slots.len();
        let mut goal_slots: Vec<usize> = (0..n_slots)
            .filter(|_| self.rng.random_bool(cfg.slot_probability))
            .collect();
        if goal_slots.is_empty() {
            goal_slots.push(self.rng.random_range(0..n_slots));
        }
        goal_slots.shuffle(&mut self.rng);
        let mut pending: Vec<(usize, String)> = goal_slots
            .iter()
            .map(|&s| (s, self.value_for(s)))
            .collect();
        let n_turns = self.rng.random_range(cfg.min_turns..=cfg.max_turns);

        let mut turns = Vec::with_capacity(n_turns);
        let mut goal = Goal::new();
        let mut informed: Vec<usize> = Vec::new();

        for t in 0..n_turns {
            let last = t + 1 == n_turns;
            let mut acts = Vec::new();
            let closing = last || (pending.is_empty() && informed.is_empty());
            if t > 0 && !closing && self.rng.random_bool(cfg.implicit_confirm_probability) {
                for (slot, value) in &goal {
                    acts.push(SystemAct::new("impl-conf", Some(slot), Some(value)));
                }
            }
            let mut label = Goal::new();
            let utterance;
            if t == 0 {
                let k = pending.len().min(self.rng.random_range(1..=2));
                let mut phrases = Vec::new();
                for (slot, value) in pending.drain(..k) {
                    phrases.push(self.inform_phrase(slot, &value));
                    label.insert(cfg.slots[slot].name.clone(), value);
                    informed.push(slot);
                }
                let opening = self.pick(&cfg.openings).to_owned();
                let body = phrases.join(" and ");
                utterance = self.decorate(format!("{opening} {body}").trim().to_owned());
            } else if !pending.is_empty() {
                let (slot, value) = pending.remove(0);
                let name = cfg.slots[slot].name.clone();
                acts.push(SystemAct::new("request", Some(&name), None));
                let phrase = self.inform_phrase(slot, &value);
                utterance = self.decorate(phrase);
                label.insert(name, value);
                informed.push(slot);
            } else if last || informed.is_empty() {
                let venue = self.pick(&cfg.venue_names).to_owned();
                acts.push(SystemAct::new("offer", Some("name"), Some(&venue)));
                if cfg.offer_restates_goal {
                    for (slot, value) in &goal {
                        acts.push(SystemAct::new("inform", Some(slot), Some(value)));
                    }
                }
                let closing = self.pick(&cfg.closings).to_owned();
                utterance = self.decorate(closing);
            } else {
                let slot = informed[self.rng.random_range(0..informed.len())];
                let name = cfg.slots[slot].name.clone();
                let current = goal.get(&name).cloned().expect("informed slot has a goal");
                acts.push(SystemAct::new("confirm", Some(&name), Some(&current)));
                let values = self.ontology.values(&name).expect("slot in ontology");
                if values.len() > 1 && self.rng.random_bool(cfg.change_probability) {
                    let mut new = current.clone();
                    while new == current {
                        new = self.value_for(slot);
                    }
                    let neg = self.pick(&cfg.negations).to_owned();
                    let phrase = self.inform_phrase(slot, &new);
                    utterance = self.decorate(format!("{neg} {phrase}"));
                    label.insert(name, new);
                } else {
                    let yes = self.pick(&cfg.affirmations).to_owned();
                    utterance = self.decorate(yes);
                }
            }
            goal = accumulate_goal(&goal, &label);
            turns.push(Turn::new(acts, &utterance, label, goal.clone()));
        }
        Dialogue { id: None, turns }
    }
}

/// Generates `n_dialogues` dialogues of `min_turns..=max_turns` turns. Every
/// labelled value is realized verbatim in its utterance.
pub fn generate_synthetic(
    config: &GrammarConfig,
    n_dialogues: usize,
    seed: u64,
) -> Result<(DialogueCorpus, Ontology), DataError> {
    config.validate()?;
    let ontology = config.ontology()?;
    let mut builder = DialogueBuilder {
        config,
        ontology: &ontology,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let dialogues = (0..n_dialogues)
        .map(|i| {
            let mut d = builder.build();
            d.id = Some(format!("syn-{seed}-{i:05}"));
            d
        })
        .collect();
    Ok((DialogueCorpus { dialogues }, ontology))
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Unit word vectors for every token the grammar can emit, standing in for
/// pretrained semantic embeddings: the tokens of each slot's values lie near a
/// shared slot direction (`spread` weights the per-token noise), all other
/// tokens are independent random directions. A token shared by several slots
/// joins the first.
pub fn synthetic_word_vectors(config: &GrammarConfig, dim: usize, spread: f64, seed: u64) -> WordVectors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vectors: IndexMap<String, Vec<f64>> = IndexMap::new();
    for slot in &config.slots {
        let centre = random_unit(&mut rng, dim);
        for token in slot.values.iter().flat_map(|v| tokenize(v)) {
            if vectors.contains_key(&token) {
                continue;
            }
            let noise = random_unit(&mut rng, dim);
            let v: Vec<f64> = centre.iter().zip(&noise).map(|(c, n)| c + spread * n).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            vectors.insert(token, v.into_iter().map(|x| x / norm).collect());
        }
    }
    let phrases = config
        .slots
        .iter()
        .flat_map(|s| s.templates.iter().map(|t| t.replace("VALUE", " ")).chain([s.name.clone()]))
        .chain(
            [
                &config.openings,
                &config.affirmations,
                &config.negations,
                &config.closings,
                &config.distractors,
                &config.venue_names,
            ]
            .into_iter()
            .flatten()
            .cloned(),
        )
        .chain(config.rejections.iter().map(|r| r.replace("VALUE", " ")))
        .chain(["request", "confirm", "offer", "inform", "impl-conf", "name"].map(String::from));
    for phrase in phrases {
        for token in tokenize(&phrase) {
            if !vectors.contains_key(&token) {
                let v = random_unit(&mut rng, dim);
                vectors.insert(token, v);
            }
        }
    }
    WordVectors {
        dim,
        loaded: vectors.len(),
        vectors,
        malformed_skipped: 0,
        duplicates: 0,
    }
}
