//! Loss, optimizer and the training loop.

use std::collections::{BTreeSet, HashMap};

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::data::{DialogueCorpus, Ontology, Turn};
use crate::decoder::{copy_positions, SlotDecoder};
use crate::embeddings::{EmbeddingConfig, EmbeddingTable};
use crate::encoder::Dropout;
use crate::eval::evaluate;
use crate::model::{PreparedTurn, Tracker};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden_size: usize,
    pub word_dim: usize,
    pub ngram_dim: usize,
    pub hash_seed: u64,
    pub dropout: f64,
    pub learning_rate: f64,
    /// Turns per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub negatives: usize,
    pub threshold: f64,
    /// Decoupled weight decay applied at every optimizer step.
    pub weight_decay: f64,
    /// Weight the gold target and the negatives of a slot equally instead of
    /// averaging over all targets.
    pub balanced_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_size: 200,
            word_dim: 300,
            ngram_dim: 100,
            hash_seed: 0,
            dropout: 0.2,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 30,
            patience: 5,
            seed: 1,
            negatives: 5,
            threshold: 0.5,
            weight_decay: 0.0,
            balanced_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.hidden_size == 0 || self.word_dim == 0 || self.ngram_dim == 0 {
            return bad("dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch size and epochs must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad("threshold must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            word_dim: self.word_dim,
            ngram_dim: self.ngram_dim,
            hash_seed: self.hash_seed,
        }
    }

    /// Independent stream seeds derived from `seed`.
    fn stream_seed(&self, stream: u64) -> u64 {
        splitmix(self.seed ^ splitmix(stream.wrapping_add(0x5eed)))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies `grad * scale` from every parameter and clears the grads.
    pub fn step(&mut self, store: &mut ParamStore, scale: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            if self.lr != 0.0 {
                for (i, w) in t.values_mut().iter_mut().enumerate() {
                    let gi = grad[i] * scale;
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    *w -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
                }
            }
            t.zero_grad();
        }
    }
}

/// Candidates scored for one slot on one turn, with their BCE targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotTargets {
    pub candidates: Vec<usize>,
    pub targets: Vec<f64>,
}

/// Gold (if any), every non-gold candidate spelled in the input, then up to
/// `negatives` further non-gold candidates drawn without replacement. With a
/// `pool`, only candidates whose value it contains are drawn.
///
/// Returns `Err(())` when the gold value is absent from the cache.
#[allow(clippy::result_unit_err)]
pub fn select_targets(
    decoder: &SlotDecoder,
    gold: Option<&str>,
    input_tokens: &[String],
    negatives: usize,
    pool: Option<&BTreeSet<String>>,
    rng: &mut impl Rng,
) -> Result<SlotTargets, ()> {
    let gold_index = match gold {
        Some(v) => Some(decoder.index_of(v).ok_or(())?),
        None => None,
    };
    let mut candidates = Vec::new();
    let mut targets = Vec::new();
    if let Some(i) = gold_index {
        candidates.push(i);
        targets.push(1.0);
    }
    let mut rest = Vec::new();
    for (i, c) in decoder.candidates().iter().enumerate() {
        if Some(i) == gold_index {
            continue;
        }
        if !copy_positions(input_tokens, &c.tokens).is_empty() {
            candidates.push(i);
            targets.push(0.0);
        } else if pool.is_none_or(|p| p.contains(&c.value)) {
            rest.push(i);
        }
    }
    let k = negatives.min(rest.len());
    for j in rand::seq::index::sample(rng, rest.len(), k).into_iter() {
        candidates.push(rest[j]);
        targets.push(0.0);
    }
    Ok(SlotTargets { candidates, targets })
}

/// Per-target weights of one slot's BCE: a plain mean, or with `balanced`
/// the positives and the negatives each carry half the weight when both are
/// present.
pub fn target_weights(targets: &[f64], balanced: bool) -> Vec<f64> {
    let pos = targets.iter().filter(|&&t| t > 0.5).count();
    let neg = targets.len() - pos;
    if !balanced || pos == 0 || neg == 0 {
        return vec![1.0 / targets.len().max(1) as f64; targets.len()];
    }
    targets
        .iter()
        .map(|&t| if t > 0.5 { 0.5 / pos as f64 } else { 0.5 / neg as f64 })
        .collect()
}

/// Sum over slots of each slot's binary cross-entropy, weighted per
/// [`target_weights`].
pub fn turn_loss(g: &mut Graph, slots: &[(Var, Vec<f64>)], balanced: bool) -> Result<Var, Error> {
    let mut total: Option<Var> = None;
    for (logits, targets) in slots {
        if targets.is_empty() {
            continue;
        }
        let weights = target_weights(targets, balanced);
        let l = g.weighted_bce_with_logits(*logits, targets.clone(), weights)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(crate::autodiff::Tensor::scalar(0.0)),
    })
}

/// Per slot, the values negatives are sampled from.
pub type NegativePools = HashMap<String, BTreeSet<String>>;

/// Values that occur as a truth value somewhere in `corpus`. A value that is
/// never gold in training would otherwise only ever be seen as a negative.
pub fn attested_values(corpus: &DialogueCorpus) -> NegativePools {
    corpus
        .slots()
        .into_iter()
        .map(|slot| {
            let values = corpus.truth_values(&slot);
            (slot, values)
        })
        .collect()
}

/// Builds the loss graph of one turn. `None` when no slot has any target.
fn turn_graph(
    tracker: &Tracker,
    g: &mut Graph,
    turn: &PreparedTurn,
    label: &crate::data::Goal,
    pools: &NegativePools,
    rng: &mut impl Rng,
    dropout: Option<&mut Dropout>,
    missing: &mut usize,
) -> Result<Option<Var>, Error> {
    let encoded = tracker.encode(g, turn, dropout)?;
    let negatives = tracker.config().negatives;
    let empty = BTreeSet::new();
    let mut slots = Vec::new();
    for dec in tracker.decoders() {
        let gold = label.get(&dec.slot).map(String::as_str);
        let pool = pools.get(&dec.slot).unwrap_or(&empty);
        let Ok(sel) = select_targets(dec, gold, &turn.tokens, negatives, Some(pool), rng) else {
            *missing += 1;
            continue;
        };
        if sel.candidates.is_empty() {
            continue;
        }
        let vars = dec.score_vars(g, tracker.params(), &encoded, &sel.candidates)?;
        slots.push((vars.logits, sel.targets));
    }
    if slots.is_empty() {
        return Ok(None);
    }
    Ok(Some(turn_loss(g, &slots, tracker.config().balanced_loss)?))
}

fn prepare_all<'c>(tracker: &Tracker, corpus: &'c DialogueCorpus) -> Vec<(PreparedTurn, &'c Turn)> {
    let mut cache = HashMap::new();
    corpus
        .turns()
        .map(|t| (tracker.prepare_turn(t, &mut cache), t))
        .collect()
}

/// Mean eval-mode turn loss over `corpus`, with negatives drawn from a fixed
/// stream so repeated calls are comparable.
pub fn corpus_loss(tracker: &Tracker, corpus: &DialogueCorpus, seed: u64) -> Result<f64, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut missing = 0;
    let mut sum = 0.0;
    let mut n = 0usize;
    let pools = attested_values(corpus);
    for (turn, raw) in prepare_all(tracker, corpus) {
        let mut g = Graph::new();
        if let Some(l) = turn_graph(tracker, &mut g, &turn, &raw.turn_label, &pools, &mut rng, None, &mut missing)? {
            sum += g.value(l).item();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_joint_goal: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub tracker: Tracker,
    pub history: Vec<EpochStats>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    /// Gold labels skipped because the value was not a candidate.
    pub skipped_gold: usize,
    /// Per-step mean batch loss, in order.
    pub step_losses: Vec<f64>,
}

/// Trains a fresh tracker on turn labels.
///
/// With a dev corpus the parameters of the best dev joint-goal epoch are kept
/// and training stops after `patience` epochs without improvement; without
/// one, the final parameters are kept.
pub fn train(
    corpus: &DialogueCorpus,
    dev: Option<&DialogueCorpus>,
    ontology: &Ontology,
    embeddings: EmbeddingTable,
    config: &TrainConfig,
) -> Result<TrainOutcome, Error> {
    let tracker = Tracker::new(config, embeddings, ontology)?;
    train_from(tracker, corpus, dev)
}

/// Continues from an existing tracker using its own config.
pub fn train_from(
    mut tracker: Tracker,
    corpus: &DialogueCorpus,
    dev: Option<&DialogueCorpus>,
) -> Result<TrainOutcome, Error> {
    let config = tracker.config().clone();
    config.validate()?;
    if corpus.num_turns() == 0 {
        return Err(Error::Contract("training corpus has no turns".into()));
    }
    let prepared = prepare_all(&tracker, corpus);
    let pools = attested_values(corpus);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.stream_seed(1));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.stream_seed(2));
    let mut dropout = Dropout::new(config.dropout, config.stream_seed(3));
    let dev_seed = config.stream_seed(4);
    let mut adam = Adam::new(config.learning_rate, tracker.params());
    adam.weight_decay = config.weight_decay;
    tracker.params_mut().zero_grads();

    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut skipped_gold = 0;
    let mut last_finite: Option<f64> = None;
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut stale = 0;
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut pending = 0usize;
        let mut batch_loss = 0.0;
        let mut epoch_loss = 0.0;
        let mut epoch_turns = 0usize;
        let mut missing = 0;
        for &i in &order {
            let (turn, raw) = &prepared[i];
            let mut g = Graph::new();
            let Some(loss) = turn_graph(
                &tracker,
                &mut g,
                turn,
                &raw.turn_label,
                &pools,
                &mut sample_rng,
                Some(&mut dropout),
                &mut missing,
            )?
            else {
                continue;
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: step_losses.len() + 1,
                    last_finite_loss: last_finite,
                });
            }
            last_finite = Some(value);
            g.backward_to(loss, tracker.params_mut())?;
            pending += 1;
            batch_loss += value;
            epoch_loss += value;
            epoch_turns += 1;
            if pending == config.batch_size {
                adam.step(tracker.params_mut(), 1.0 / pending as f64);
                step_losses.push(batch_loss / pending as f64);
                pending = 0;
                batch_loss = 0.0;
            }
        }
        if pending > 0 {
            adam.step(tracker.params_mut(), 1.0 / pending as f64);
            step_losses.push(batch_loss / pending as f64);
        }
        if epoch == 1 {
            skipped_gold = missing;
            if missing > 0 {
                warn!("{missing} gold labels per epoch are not candidates and were skipped");
            }
        }
        let train_loss = if epoch_turns == 0 { 0.0 } else { epoch_loss / epoch_turns as f64 };
        let mut stats = EpochStats {
            epoch,
            train_loss,
            dev_loss: None,
            dev_joint_goal: None,
        };
        if let Some(dev) = dev {
            let dl = corpus_loss(&tracker, dev, dev_seed)?;
            let jg = evaluate(&tracker, dev, None)?.joint_goal;
            stats.dev_loss = Some(dl);
            stats.dev_joint_goal = Some(jg);
            info!("epoch {epoch}: train loss {train_loss:.4}, dev loss {dl:.4}, dev joint goal {jg:.4}");
            if best.as_ref().is_none_or(|(b, _, _)| jg > *b) {
                best = Some((jg, epoch, tracker.params().clone()));
                stale = 0;
            } else {
                stale += 1;
            }
        } else {
            info!("epoch {epoch}: train loss {train_loss:.4}");
        }
        history.push(stats);
        if dev.is_some() && stale >= config.patience {
            debug!("early stop after epoch {epoch}");
            break;
        }
    }

    let mut best_epoch = history.len();
    if let Some((_, epoch, params)) = best {
        *tracker.params_mut() = params;
        best_epoch = epoch;
    }
    tracker.params_mut().zero_grads();
    Ok(TrainOutcome {
        tracker,
        history,
        best_epoch,
        skipped_gold,
        step_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn loss_of(logits: &[f64], targets: &[f64]) -> f64 {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(logits.to_vec()));
        let l = turn_loss(&mut g, &[(x, targets.to_vec())], false).unwrap();
        g.value(l).item()
    }

    #[test]
    fn loss_half_probabilities_is_ln2() {
        let l = loss_of(&[0.0, 0.0], &[1.0, 0.0]);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_hand_case() {
        let l = loss_of(&[logit(0.8), logit(0.3)], &[1.0, 0.0]);
        let oracle = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.2899).abs() < 1e-4);
    }

    #[test]
    fn loss_vanishes_with_confidence() {
        let l = loss_of(&[40.0, -40.0, -40.0], &[1.0, 0.0, 0.0]);
        assert!(l >= 0.0 && l < 1e-15);
    }

    #[test]
    fn loss_sums_over_slots() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![0.0]));
        let b = g.input(Tensor::vector(vec![0.0, 0.0]));
        let l = turn_loss(&mut g, &[(a, vec![1.0]), (b, vec![0.0, 0.0])], false).unwrap();
        assert!((g.value(l).item() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for c in [
            TrainConfig { dropout: 1.0, ..Default::default() },
            TrainConfig { hidden_size: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { learning_rate: f64::NAN, ..Default::default() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: TrainConfig = serde_json::from_str(r#"{"hidden_size": 8}"#).unwrap();
        assert_eq!(c.hidden_size, 8);
        assert_eq!(c.word_dim, 300);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"hiden": 8}"#).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -1.0]));
        store.get_mut(id).accumulate_grad(&[2.0, -0.5]);
        let mut adam = Adam::new(0.1, &store);
        adam.step(&mut store, 1.0);
        // The bias-corrected first step is lr * sign(g) up to eps.
        let w = store.get(id).values();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
        assert!(store.get(id).grad().unwrap().iter().all(|&g| g == 0.0));
    }
}
