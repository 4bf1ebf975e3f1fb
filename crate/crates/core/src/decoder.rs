//! Per-slot scoring head.
//!
//! For a slot `s` with candidate embeddings `V_s` (one row per value):
//!
//! ```text
//! Z_s    = W_s · V_sᵀ                  candidate representations, [2h × |V_s|]
//! S      = tanh(W_h · h_L)             slot-specific summary, [2h]
//! a_i    = tanh(W_c · [S ; h_i])       attention score per input token
//! ψ_c(v) = Σ a_t over tokens t of v    copy score
//! α      = softmax(a),  C = Σ α_i h_i
//! ψ_p    = C · Z_s                     value score
//! p(v)   = σ(ψ_p(v) + ψ_c(v))
//! ```
//!
//! Each candidate gets an independent sigmoid, so appending candidates never
//! changes the probability of an existing one.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{sigmoid, AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::data::{normalize_value, Goal};
use crate::embeddings::{tokenize, EmbeddingError, EmbeddingTable};
use crate::encoder::EncodedTurn;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("slot {0:?} has no candidates")]
    NoCandidates(String),
    #[error("value {value:?} already present in slot {slot:?} at index {index}")]
    Duplicate {
        slot: String,
        value: String,
        index: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub value: String,
    pub tokens: Vec<String>,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotDecoder {
    pub slot: String,
    /// `W_s`: `[2h × d]`.
    pub w_value: ParamId,
    /// `W_h`: `[2h × 2h]`.
    pub w_summary: ParamId,
    /// `W_c`: `[1 × 4h]`.
    pub w_attention: ParamId,
    candidates: Vec<Candidate>,
}

fn uniform_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let values = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, values).expect("shape")
}

impl SlotDecoder {
    /// Registers `decoder.<slot>.*` parameters, uniform in `±1/√fan_in`.
    pub fn init(
        store: &mut ParamStore,
        slot: &str,
        embed_dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let z = 2 * hidden;
        let w_value = store.add(format!("decoder.{slot}.w_value"), uniform_matrix(z, embed_dim, rng));
        let w_summary = store.add(format!("decoder.{slot}.w_summary"), uniform_matrix(z, z, rng));
        let w_attention = store.add(format!("decoder.{slot}.w_attention"), uniform_matrix(1, 2 * z, rng));
        Self {
            slot: slot.to_owned(),
            w_value,
            w_summary,
            w_attention,
            candidates: Vec::new(),
        }
    }

    pub fn from_store(store: &ParamStore, slot: &str) -> Option<Self> {
        Some(Self {
            slot: slot.to_owned(),
            w_value: store.find(&format!("decoder.{slot}.w_value"))?,
            w_summary: store.find(&format!("decoder.{slot}.w_summary"))?,
            w_attention: store.find(&format!("decoder.{slot}.w_attention"))?,
            candidates: Vec::new(),
        })
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.value.as_str())
    }

    pub fn index_of(&self, value: &str) -> Option<usize> {
        let norm = normalize_value(value);
        self.candidates.iter().position(|c| c.value == norm)
    }

    /// Appends a candidate value. Parameters are untouched.
    pub fn extend_candidates(&mut self, value: &str, table: &EmbeddingTable) -> Result<usize, DecoderError> {
        let norm = normalize_value(value);
        if let Some(index) = self.index_of(&norm) {
            return Err(DecoderError::Duplicate {
                slot: self.slot.clone(),
                value: norm,
                index,
            });
        }
        let embedding = table.embed_value(&norm)?;
        self.candidates.push(Candidate {
            tokens: tokenize(&norm),
            value: norm,
            embedding,
        });
        Ok(self.candidates.len() - 1)
    }

    /// Plain evaluation of `Z_s` as a row-major `[2h × |V_s|]` matrix.
    pub fn z_matrix(&self, store: &ParamStore) -> Result<Vec<f64>, DecoderError> {
        let all: Vec<usize> = (0..self.candidates.len()).collect();
        let mut g = Graph::new();
        let z = self.z_var(&mut g, store, &all)?;
        Ok(g.value(z).values().to_vec())
    }

    fn z_var(&self, g: &mut Graph, store: &ParamStore, subset: &[usize]) -> Result<Var, DecoderError> {
        if subset.is_empty() {
            return Err(DecoderError::NoCandidates(self.slot.clone()));
        }
        let d = self.candidates[subset[0]].embedding.len();
        let m = subset.len();
        // Vᵀ: [d × m], column j is candidate subset[j]
        let mut vt = vec![0.0; d * m];
        for (j, &c) in subset.iter().enumerate() {
            for (k, x) in self.candidates[c].embedding.iter().enumerate() {
                vt[k * m + j] = *x;
            }
        }
        let vt = g.constant(Tensor::matrix(d, m, vt)?);
        let ws = g.param(store, self.w_value);
        Ok(g.matmul(ws, vt)?)
    }

    /// Scores the candidates listed in `subset` (indices into the cache).
    pub fn score_vars(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoded: &EncodedTurn,
        subset: &[usize],
    ) -> Result<SlotScoreVars, DecoderError> {
        let wh = g.param(store, self.w_summary);
        let pre = g.matmul(wh, encoded.summary)?;
        let summary = g.tanh(pre);
        let wc = g.param(store, self.w_attention);
        let attention = attention_scores(g, summary, &encoded.token_states, wc)?;

        let groups = subset
            .iter()
            .map(|&c| copy_positions(&encoded.tokens, &self.candidates[c].tokens))
            .collect();
        let copy = g.gather_sum(attention, groups)?;

        let z = self.z_var(g, store, subset)?;
        let value = value_score(g, attention, &encoded.token_states, z)?;
        let logits = g.add(value.scores, copy)?;
        let probability = g.sigmoid(logits);
        Ok(SlotScoreVars {
            attention,
            alpha: value.alpha,
            copy,
            value: value.scores,
            logits,
            probability,
        })
    }
}

/// Graph handles produced by [`SlotDecoder::score_vars`].
#[derive(Debug, Clone, Copy)]
pub struct SlotScoreVars {
    pub attention: Var,
    pub alpha: Var,
    pub copy: Var,
    pub value: Var,
    pub logits: Var,
    pub probability: Var,
}

/// `a_i = tanh(W_c · [S ; h_i])` for every token.
pub fn attention_scores(g: &mut Graph, summary: Var, token_states: &[Var], w_c: Var) -> Result<Var, AutodiffError> {
    if token_states.is_empty() {
        return Err(AutodiffError::Contract("attention over zero tokens".into()));
    }
    let mut raw = Vec::with_capacity(token_states.len());
    for &h in token_states {
        let joined = g.concat(&[summary, h], 0)?;
        raw.push(g.matmul(w_c, joined)?);
    }
    let stacked = g.concat(&raw, 0)?;
    Ok(g.tanh(stacked))
}

/// Input positions whose token belongs to the candidate; each position once.
pub fn copy_positions(input_tokens: &[String], candidate_tokens: &[String]) -> Vec<usize> {
    input_tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| candidate_tokens.contains(t))
        .map(|(i, _)| i)
        .collect()
}

/// `ψ_c(v) = Σ a_t` over input positions `t` whose token occurs in `v`.
pub fn copy_score(attention: &[f64], input_tokens: &[String], candidate: &str) -> f64 {
    copy_positions(input_tokens, &tokenize(candidate))
        .into_iter()
        .map(|t| attention[t])
        .sum()
}

pub struct ValueScore {
    pub alpha: Var,
    pub context: Var,
    pub scores: Var,
}

/// `α = softmax(a)`, `C = Σ α_i h_i`, `ψ_p = C · Z_s`.
pub fn value_score(g: &mut Graph, attention: Var, token_states: &[Var], z: Var) -> Result<ValueScore, AutodiffError> {
    let n = token_states.len();
    if n == 0 {
        return Err(AutodiffError::Contract("value score over zero tokens".into()));
    }
    let width = g.shape(token_states[0])[0];
    if g.shape(z).len() != 2 || g.shape(z)[0] != width {
        return Err(AutodiffError::Dimension {
            op: "value_score",
            lhs: vec![width],
            rhs: g.shape(z).to_vec(),
        });
    }
    let alpha = g.softmax(attention)?;
    let flat = g.concat(token_states, 0)?;
    let states = g.reshape(flat, vec![n, width])?;
    let context = g.matmul(alpha, states)?;
    let scores = g.matmul(context, z)?;
    Ok(ValueScore { alpha, context, scores })
}

/// Plain-valued scores of one slot on one turn.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotScores {
    pub slot: String,
    pub values: Vec<String>,
    pub copy: Vec<f64>,
    pub value: Vec<f64>,
    pub probability: Vec<f64>,
    /// Raw attention scores `a_i`, one per input token.
    pub attention: Vec<f64>,
    /// Normalized attention `α_i`.
    pub alpha: Vec<f64>,
}

impl SlotScores {
    pub fn from_vars(g: &Graph, decoder: &SlotDecoder, subset: &[usize], vars: &SlotScoreVars) -> Self {
        let vals = |v: Var| g.value(v).values().to_vec();
        Self {
            slot: decoder.slot.clone(),
            values: subset.iter().map(|&i| decoder.candidates[i].value.clone()).collect(),
            copy: vals(vars.copy),
            value: vals(vars.value),
            probability: vals(vars.probability),
            attention: vals(vars.attention),
            alpha: vals(vars.alpha),
        }
    }

    /// Highest-probability candidate, lowest index on ties.
    pub fn top(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &p) in self.probability.iter().enumerate() {
            if best.is_none_or(|(_, bp)| p > bp) {
                best = Some((i, p));
            }
        }
        best
    }
}

/// Scores every candidate of `decoder` on an encoded turn.
pub fn score_slot(
    g: &mut Graph,
    store: &ParamStore,
    encoded: &EncodedTurn,
    decoder: &SlotDecoder,
) -> Result<SlotScores, DecoderError> {
    if decoder.candidates.is_empty() {
        return Err(DecoderError::NoCandidates(decoder.slot.clone()));
    }
    let all: Vec<usize> = (0..decoder.candidates.len()).collect();
    let vars = decoder.score_vars(g, store, encoded, &all)?;
    Ok(SlotScores::from_vars(g, decoder, &all, &vars))
}

/// Per slot, the top candidate when its probability reaches `threshold`.
pub fn predict_turn(scores: &[SlotScores], threshold: f64) -> Goal {
    scores
        .iter()
        .filter_map(|s| {
            let (i, p) = s.top()?;
            (p >= threshold).then(|| (s.slot.clone(), s.values[i].clone()))
        })
        .collect()
}

/// `σ(ψ_p + ψ_c)` recomputed from plain scores.
pub fn combine(value: f64, copy: f64) -> f64 {
    sigmoid(value + copy)
}
