//! Goal accumulation and the per-turn metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{DialogueCorpus, Goal};
use crate::model::Tracker;
use crate::Error;

/// Slot to values considered unseen during training.
pub type UnseenValues = BTreeMap<String, BTreeSet<String>>;

/// Turn predictions overwrite, absent slots carry over.
pub fn accumulate_goal(prev: &Goal, turn: &Goal) -> Goal {
    let mut next = prev.clone();
    for (slot, value) in turn {
        next.insert(slot.clone(), value.clone());
    }
    next
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub correct: usize,
    pub turns: usize,
    pub accuracy: f64,
}

impl Tally {
    fn add(&mut self, hit: bool) {
        self.turns += 1;
        self.correct += usize::from(hit);
    }

    fn finish(&mut self) {
        self.accuracy = if self.turns == 0 {
            0.0
        } else {
            self.correct as f64 / self.turns as f64
        };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotReport {
    pub slot: String,
    pub overall: Tally,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seen: Option<Tally>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unseen: Option<Tally>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dialogues: usize,
    pub turns: usize,
    pub joint_correct: usize,
    pub joint_goal: f64,
    pub slots: Vec<SlotReport>,
}

impl EvalReport {
    pub fn slot(&self, slot: &str) -> Option<&SlotReport> {
        self.slots.iter().find(|s| s.slot == slot)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores accumulated predicted goals against gold goals at every turn.
///
/// `predicted[d][t]` is the accumulated goal after turn `t` of dialogue `d`.
/// Seen/unseen tallies only count turns whose gold goal names a value.
pub fn evaluate_predictions(
    corpus: &DialogueCorpus,
    predicted: &[Vec<Goal>],
    slots: &[String],
    unseen: Option<&UnseenValues>,
) -> Result<EvalReport, Error> {
    if predicted.len() != corpus.dialogues.len() {
        return Err(Error::Contract("one prediction sequence per dialogue required".into()));
    }
    let mut tallies: Vec<(Tally, Tally, Tally)> = vec![Default::default(); slots.len()];
    let mut joint = Tally::default();
    for (dialogue, preds) in corpus.dialogues.iter().zip(predicted) {
        if preds.len() != dialogue.turns.len() {
            return Err(Error::Contract("one prediction per turn required".into()));
        }
        for (turn, pred) in dialogue.turns.iter().zip(preds) {
            let mut all = true;
            for (slot, (overall, seen, unseen_t)) in slots.iter().zip(tallies.iter_mut()) {
                let gold = turn.goal.get(slot);
                let hit = gold == pred.get(slot);
                all &= hit;
                overall.add(hit);
                if let (Some(u), Some(v)) = (unseen, gold) {
                    if u.get(slot).is_some_and(|set| set.contains(v)) {
                        unseen_t.add(hit);
                    } else {
                        seen.add(hit);
                    }
                }
            }
            joint.add(all);
        }
    }
    joint.finish();
    let slots = slots
        .iter()
        .zip(tallies)
        .map(|(slot, (mut o, mut s, mut u))| {
            o.finish();
            s.finish();
            u.finish();
            SlotReport {
                slot: slot.clone(),
                overall: o,
                seen: unseen.map(|_| s),
                unseen: unseen.map(|_| u),
            }
        })
        .collect();
    Ok(EvalReport {
        dialogues: corpus.dialogues.len(),
        turns: joint.turns,
        joint_correct: joint.correct,
        joint_goal: joint.accuracy,
        slots,
    })
}

/// Accumulated predicted goals for every turn of every dialogue.
pub fn predict_corpus(tracker: &Tracker, corpus: &DialogueCorpus) -> Result<Vec<Vec<Goal>>, Error> {
    let mut cache = HashMap::new();
    corpus
        .dialogues
        .iter()
        .map(|d| {
            let mut goal = Goal::new();
            d.turns
                .iter()
                .map(|t| {
                    let prepared = tracker.prepare_turn(t, &mut cache);
                    goal = accumulate_goal(&goal, &tracker.predict(&prepared)?);
                    Ok(goal.clone())
                })
                .collect()
        })
        .collect()
}

/// Runs the tracker over `corpus` and scores it on every model slot.
pub fn evaluate(tracker: &Tracker, corpus: &DialogueCorpus, unseen: Option<&UnseenValues>) -> Result<EvalReport, Error> {
    let slots: Vec<String> = tracker.slots().map(str::to_owned).collect();
    if let Some(s) = corpus.slots().into_iter().find(|s| !slots.contains(s)) {
        return Err(Error::UnknownSlot(s));
    }
    let predicted = predict_corpus(tracker, corpus)?;
    evaluate_predictions(corpus, &predicted, &slots, unseen)
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let breakdown = self.slots.iter().any(|s| s.seen.is_some());
        let width = self.slots.iter().map(|s| s.slot.len()).max().unwrap_or(0).max(9);
        write!(f, "{:<width$}  {:>8}  {:>6}", "slot", "accuracy", "turns")?;
        if breakdown {
            write!(f, "  {:>8}  {:>6}  {:>8}  {:>6}", "seen", "turns", "unseen", "turns")?;
        }
        writeln!(f)?;
        let cell = |t: &Tally| format!("{:>8.4}  {:>6}", t.accuracy, t.turns);
        for s in &self.slots {
            write!(f, "{:<width$}  {}", s.slot, cell(&s.overall))?;
            if let (Some(seen), Some(unseen)) = (&s.seen, &s.unseen) {
                write!(f, "  {}  {}", cell(seen), cell(unseen))?;
            }
            writeln!(f)?;
        }
        writeln!(f, "{:<width$}  {:>8.4}  {:>6}", "joint", self.joint_goal, self.turns)
    }
}
