//! Central finite differences against reverse-mode gradients for every
//! learned tensor of a small tracker.

use copydst::autodiff::{Graph, ParamStore};
use copydst::data::Ontology;
use copydst::embeddings::EmbeddingTable;
use copydst::train::{turn_loss, TrainConfig};
use copydst::Tracker;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-7;

pub fn tiny(seed: u64) -> Tracker {
    let cfg = TrainConfig {
        hidden_size: 4,
        word_dim: 3,
        ngram_dim: 2,
        seed,
        ..Default::default()
    };
    let mut ont = Ontology::new();
    ont.add_slot("food", ["thai", "north indian"]).unwrap();
    Tracker::new(&cfg, EmbeddingTable::hashed(cfg.embedding_config()), &ont).unwrap()
}

fn tokens(s: &str) -> Vec<String> {
    s.split(' ').map(str::to_owned).collect()
}

/// Loss on "want thai food" with thai as gold and north indian as negative.
pub fn loss(tracker: &Tracker, store: Option<&mut ParamStore>) -> f64 {
    let turn = tracker.prepare(&[], &tokens("want thai food"));
    assert_eq!(turn.tokens.len(), 3);
    let mut g = Graph::new();
    let enc = tracker.encode(&mut g, &turn, None).unwrap();
    let dec = tracker.decoder("food").unwrap();
    let vars = dec.score_vars(&mut g, tracker.params(), &enc, &[0, 1]).unwrap();
    let l = turn_loss(&mut g, &[(vars.logits, vec![1.0, 0.0])], false).unwrap();
    if let Some(store) = store {
        g.backward_to(l, store).unwrap();
    }
    g.value(l).item()
}

pub fn check(seed: u64) -> Vec<String> {
    let tracker = tiny(seed);
    let mut store = tracker.params().clone();
    store.zero_grads();
    loss(&tracker, Some(&mut store));
    let mut failures = Vec::new();
    let mut checked = 0;
    for id in tracker.params().ids() {
        let name = tracker.params().name(id).to_owned();
        let analytic = store.get(id).grad().expect("grad").to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = tracker.clone();
            plus.params_mut().get_mut(id).values_mut()[k] += STEP;
            let mut minus = tracker.clone();
            minus.params_mut().get_mut(id).values_mut()[k] -= STEP;
            let numeric = (loss(&plus, None) - loss(&minus, None)) / (2.0 * STEP);
            let diff = (a - numeric).abs();
            let rel = diff / a.abs().max(numeric.abs());
            if diff > ABS_FLOOR && rel > REL_TOL {
                failures.push(format!("{name}[{k}]: analytic {a:e}, numeric {numeric:e}"));
            }
            checked += 1;
        }
    }
    assert_eq!(checked, tracker.params().num_scalars());
    failures
}
