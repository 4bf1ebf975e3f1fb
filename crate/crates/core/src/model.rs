//! The full tracker: frozen embeddings, shared encoder, one decoder per slot.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamStore};
use crate::data::{Goal, Ontology, SystemAct, Turn};
use crate::decoder::{score_slot, predict_turn, SlotDecoder, SlotScores};
use crate::embeddings::EmbeddingTable;
use crate::encoder::{linearize_turn, BiLstmEncoder, Dropout, EncodedTurn};
use crate::train::TrainConfig;
use crate::Error;

/// A linearized, embedded turn ready for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTurn {
    pub tokens: Vec<String>,
    pub embedded: Vec<Vec<f64>>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracker {
    config: TrainConfig,
    embeddings: EmbeddingTable,
    encoder: BiLstmEncoder,
    decoders: Vec<SlotDecoder>,
    params: ParamStore,
}

impl Tracker {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: &TrainConfig, embeddings: EmbeddingTable, ontology: &Ontology) -> Result<Self, Error> {
        config.validate()?;
        if ontology.num_slots() == 0 {
            return Err(Error::Contract("ontology has no slots".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = embeddings.dim();
        let encoder = BiLstmEncoder::init(&mut params, d, config.hidden_size, &mut rng);
        let mut decoders = Vec::new();
        for (slot, values) in ontology.iter() {
            let mut dec = SlotDecoder::init(&mut params, slot, d, config.hidden_size, &mut rng);
            for v in values {
                dec.extend_candidates(v, &embeddings)?;
            }
            decoders.push(dec);
        }
        Ok(Self {
            config: config.clone(),
            embeddings,
            encoder,
            decoders,
            params,
        })
    }

    /// Reassembles a tracker around existing parameters.
    pub fn from_parts(
        config: TrainConfig,
        embeddings: EmbeddingTable,
        params: ParamStore,
        ontology: &Ontology,
    ) -> Result<Self, Error> {
        let encoder = BiLstmEncoder::from_store(&params)
            .ok_or_else(|| Error::Contract("encoder parameters missing".into()))?;
        let mut decoders = Vec::new();
        for (slot, values) in ontology.iter() {
            let mut dec = SlotDecoder::from_store(&params, slot)
                .ok_or_else(|| Error::Contract(format!("decoder parameters for slot {slot:?} missing")))?;
            for v in values {
                dec.extend_candidates(v, &embeddings)?;
            }
            decoders.push(dec);
        }
        Ok(Self {
            config,
            embeddings,
            encoder,
            decoders,
            params,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn embeddings(&self) -> &EmbeddingTable {
        &self.embeddings
    }

    pub fn encoder(&self) -> &BiLstmEncoder {
        &self.encoder
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn decoders(&self) -> &[SlotDecoder] {
        &self.decoders
    }

    pub fn decoder(&self, slot: &str) -> Option<&SlotDecoder> {
        self.decoders.iter().find(|d| d.slot == slot)
    }

    pub fn slots(&self) -> impl Iterator<Item = &str> {
        self.decoders.iter().map(|d| d.slot.as_str())
    }

    pub fn ontology(&self) -> Ontology {
        let mut o = Ontology::new();
        for d in &self.decoders {
            o.add_slot(&d.slot, d.values()).expect("decoder candidates are unique");
        }
        o
    }

    /// Appends a candidate to `slot` without touching any parameter.
    pub fn extend_candidates(&mut self, slot: &str, value: &str) -> Result<usize, Error> {
        let dec = self
            .decoders
            .iter_mut()
            .find(|d| d.slot == slot)
            .ok_or_else(|| Error::UnknownSlot(slot.to_owned()))?;
        Ok(dec.extend_candidates(value, &self.embeddings)?)
    }

    pub fn prepare(&self, system_acts: &[SystemAct], utterance: &[String]) -> PreparedTurn {
        self.prepare_cached(system_acts, utterance, &mut HashMap::new())
    }

    /// Like [`Tracker::prepare`], memoizing token embeddings in `cache`.
    pub fn prepare_cached(
        &self,
        system_acts: &[SystemAct],
        utterance: &[String],
        cache: &mut HashMap<String, Vec<f64>>,
    ) -> PreparedTurn {
        let lin = linearize_turn(system_acts, utterance);
        let embedded = lin
            .tokens
            .iter()
            .map(|t| {
                cache
                    .entry(t.clone())
                    .or_insert_with(|| self.embeddings.embed_token(t))
                    .clone()
            })
            .collect();
        PreparedTurn {
            tokens: lin.tokens,
            embedded,
            degenerate: lin.degenerate,
        }
    }

    pub fn prepare_turn(&self, turn: &Turn, cache: &mut HashMap<String, Vec<f64>>) -> PreparedTurn {
        self.prepare_cached(&turn.system_acts, std::slice::from_ref(&turn.utterance), cache)
    }

    pub fn encode(&self, g: &mut Graph, turn: &PreparedTurn, dropout: Option<&mut Dropout>) -> Result<EncodedTurn, Error> {
        Ok(self
            .encoder
            .encode(g, &self.params, &turn.tokens, &turn.embedded, dropout)?)
    }

    /// Eval-mode scores of every candidate of every slot.
    pub fn score_turn(&self, turn: &PreparedTurn) -> Result<Vec<SlotScores>, Error> {
        let mut g = Graph::new();
        let encoded = self.encode(&mut g, turn, None)?;
        self.decoders
            .iter()
            .map(|d| Ok(score_slot(&mut g, &self.params, &encoded, d)?))
            .collect()
    }

    /// Turn-level prediction (before goal accumulation).
    pub fn predict(&self, turn: &PreparedTurn) -> Result<Goal, Error> {
        Ok(predict_turn(&self.score_turn(turn)?, self.config.threshold))
    }
}
