//! Plain-loop reimplementation of the encoder and decoder, for checking
//! `score_slot` on random small instances.

use copydst::autodiff::Graph;
use copydst::data::Ontology;
use copydst::decoder::score_slot;
use copydst::embeddings::EmbeddingTable;
use copydst::train::TrainConfig;
use copydst::Tracker;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const POOL: [&str; 10] = ["i", "want", "thai", "north", "indian", "food", "cheap", "no", "request", "area"];
const VALUES: [&str; 6] = ["thai", "north indian", "indian", "cheap", "korean", "north"];

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec(m: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    m.chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

struct Lstm<'a> {
    wx: &'a [f64],
    wh: &'a [f64],
    b: &'a [f64],
    d: usize,
    h: usize,
}

impl Lstm<'_> {
    fn step(&self, h: &[f64], c: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let ax = matvec(self.wx, self.d, x);
        let ah = matvec(self.wh, self.h, h);
        let pre: Vec<f64> = (0..4 * self.h).map(|k| ax[k] + ah[k] + self.b[k]).collect();
        let mut h2 = vec![0.0; self.h];
        let mut c2 = vec![0.0; self.h];
        for k in 0..self.h {
            let i = sig(pre[k]);
            let f = sig(pre[self.h + k]);
            let g = pre[2 * self.h + k].tanh();
            let o = sig(pre[3 * self.h + k]);
            c2[k] = f * c[k] + i * g;
            h2[k] = o * c2[k].tanh();
        }
        (h2, c2)
    }
}

/// Returns `(a, alpha, copy, value, probability)`.
#[allow(clippy::type_complexity)]
pub fn oracle(tracker: &Tracker, tokens: &[String], xs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let p = tracker.params();
    let get = |name: &str| p.get(p.find(name).unwrap()).values();
    let h = tracker.config().hidden_size;
    let d = xs[0].len();
    let cell = |dir: &str| Lstm {
        wx: get(&format!("encoder.{dir}.w_input")),
        wh: get(&format!("encoder.{dir}.w_hidden")),
        b: get(&format!("encoder.{dir}.bias")),
        d,
        h,
    };
    let (fw, bw) = (cell("forward"), cell("backward"));
    let n = xs.len();
    let mut fwd = Vec::new();
    let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
    for x in xs {
        (hs, cs) = fw.step(&hs, &cs, x);
        fwd.push(hs.clone());
    }
    let mut bwd = vec![Vec::new(); n];
    let (mut hs, mut cs) = (vec![0.0; h], vec![0.0; h]);
    for t in (0..n).rev() {
        (hs, cs) = bw.step(&hs, &cs, &xs[t]);
        bwd[t] = hs.clone();
    }
    let states: Vec<Vec<f64>> = (0..n).map(|t| [fwd[t].clone(), bwd[t].clone()].concat()).collect();
    let summary = [fwd[n - 1].clone(), bwd[0].clone()].concat();

    let z = 2 * h;
    let ws = get("decoder.food.w_value");
    let wh = get("decoder.food.w_summary");
    let wc = get("decoder.food.w_attention");
    let s: Vec<f64> = matvec(wh, z, &summary).into_iter().map(f64::tanh).collect();
    let a: Vec<f64> = states
        .iter()
        .map(|ht| {
            let joined = [s.clone(), ht.clone()].concat();
            joined.iter().zip(wc).map(|(x, w)| x * w).sum::<f64>().tanh()
        })
        .collect();
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = e.iter().sum();
    let alpha: Vec<f64> = e.iter().map(|x| x / total).collect();
    let context: Vec<f64> = (0..z).map(|k| (0..n).map(|t| alpha[t] * states[t][k]).sum()).collect();

    let dec = tracker.decoder("food").unwrap();
    let mut copy = Vec::new();
    let mut value = Vec::new();
    let mut prob = Vec::new();
    for cand in dec.candidates() {
        let cand_tokens: Vec<&str> = cand.value.split(' ').collect();
        let mut v = vec![0.0; d];
        for t in &cand_tokens {
            for (acc, x) in v.iter_mut().zip(tracker.embeddings().embed_token(t)) {
                *acc += x;
            }
        }
        let zv = matvec(ws, d, &v);
        let psi_p: f64 = context.iter().zip(&zv).map(|(a, b)| a * b).sum();
        let psi_c: f64 = (0..n).filter(|&t| cand_tokens.contains(&tokens[t].as_str())).map(|t| a[t]).sum();
        copy.push(psi_c);
        value.push(psi_p);
        prob.push(sig(psi_p + psi_c));
    }
    (a, alpha, copy, value, prob)
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> (Tracker, Vec<String>) {
    let cfg = TrainConfig {
        hidden_size: rng.random_range(1..=4),
        word_dim: rng.random_range(1..=4),
        ngram_dim: rng.random_range(1..=3),
        hash_seed: rng.random(),
        seed: rng.random(),
        ..Default::default()
    };
    let k = rng.random_range(1..=4);
    let mut values: Vec<&str> = VALUES.to_vec();
    for i in 0..k {
        let j = rng.random_range(i..values.len());
        values.swap(i, j);
    }
    let mut ont = Ontology::new();
    ont.add_slot("food", &values[..k]).unwrap();
    let mut tracker = Tracker::new(&cfg, EmbeddingTable::hashed(cfg.embedding_config()), &ont).unwrap();
    let ids: Vec<_> = tracker.params().ids().collect();
    for id in ids {
        for w in tracker.params_mut().get_mut(id).values_mut() {
            *w = rng.random_range(-1.5..1.5);
        }
    }
    let n = rng.random_range(1..=6);
    let tokens = (0..n).map(|_| POOL[rng.random_range(0..POOL.len())].to_owned()).collect();
    (tracker, tokens)
}


/// Largest absolute deviation between `score_slot` and the oracle over `n`
/// random instances, across attention, weights, copy, value and probability.
pub fn max_deviation(seed: u64, n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let (tracker, tokens) = random_instance(&mut rng);
        let turn = tracker.prepare(&[], &[tokens.join(" ")]);
        assert_eq!(turn.tokens, tokens);
        let mut g = Graph::new();
        let enc = tracker.encode(&mut g, &turn, None).unwrap();
        let got = score_slot(&mut g, tracker.params(), &enc, tracker.decoder("food").unwrap()).unwrap();
        let (a, alpha, copy, value, prob) = oracle(&tracker, &tokens, &turn.embedded);
        for (x, y) in [
            (&got.attention, &a),
            (&got.alpha, &alpha),
            (&got.copy, &copy),
            (&got.value, &value),
            (&got.probability, &prob),
        ] {
            assert_eq!(x.len(), y.len());
            worst = x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
        }
    }
    worst
}
