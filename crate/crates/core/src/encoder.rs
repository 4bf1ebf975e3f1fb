//! Shared bidirectional LSTM over `[system action tokens ; user tokens]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Graph, ParamId, ParamStore, Tensor, Var};
use crate::data::SystemAct;
use crate::embeddings::{tokenize, PAD_TOKEN};

/// Encoder input for one turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinearizedTurn {
    pub tokens: Vec<String>,
    /// Set when both the action list and the utterance were empty and a
    /// single padding token was emitted instead.
    pub degenerate: bool,
}

/// Emits `act slot value` tokens for each system act, in order, followed by
/// the utterance tokens.
pub fn linearize_turn(system_actions: &[SystemAct], utterance: &[String]) -> LinearizedTurn {
    let mut tokens = Vec::new();
    for a in system_actions {
        tokens.extend(tokenize(&a.act));
        if let Some(slot) = &a.slot {
            tokens.extend(tokenize(slot));
        }
        if let Some(value) = &a.value {
            tokens.extend(tokenize(value));
        }
    }
    tokens.extend(utterance.iter().flat_map(|u| tokenize(u)));
    if tokens.is_empty() {
        return LinearizedTurn {
            tokens: vec![PAD_TOKEN.to_owned()],
            degenerate: true,
        };
    }
    LinearizedTurn {
        tokens,
        degenerate: false,
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
pub struct Dropout {
    pub rate: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var, AutodiffError> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let n = g.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let shape = g.shape(x).to_vec();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

fn maybe_dropout(g: &mut Graph, x: Var, dropout: &mut Option<&mut Dropout>) -> Result<Var, AutodiffError> {
    match dropout {
        Some(d) => d.apply(g, x),
        None => Ok(x),
    }
}

/// Gate order in the stacked matrices: input, forget, cell, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
    pub input_dim: usize,
}

impl LstmCell {
    /// Weights uniform in `±1/√hidden`, biases zero except the forget gate at 1.
    pub fn init(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut uniform = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let w_input = store.add(
            format!("{prefix}.w_input"),
            Tensor::matrix(4 * hidden, input_dim, uniform(4 * hidden * input_dim)).expect("shape"),
        );
        let w_hidden = store.add(
            format!("{prefix}.w_hidden"),
            Tensor::matrix(4 * hidden, hidden, uniform(4 * hidden * hidden)).expect("shape"),
        );
        let mut b = vec![0.0; 4 * hidden];
        b[hidden..2 * hidden].iter_mut().for_each(|x| *x = 1.0);
        let bias = store.add(format!("{prefix}.bias"), Tensor::vector(b));
        Self {
            w_input,
            w_hidden,
            bias,
            hidden,
            input_dim,
        }
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Option<Self> {
        let w_input = store.find(&format!("{prefix}.w_input"))?;
        let w_hidden = store.find(&format!("{prefix}.w_hidden"))?;
        let bias = store.find(&format!("{prefix}.bias"))?;
        let shape = store.get(w_input).shape();
        let (rows, input_dim) = (shape[0], shape[1]);
        Some(Self {
            w_input,
            w_hidden,
            bias,
            hidden: rows / 4,
            input_dim,
        })
    }
}

/// One LSTM step; returns `(h, c)`.
pub fn lstm_step(
    g: &mut Graph,
    store: &ParamStore,
    cell: &LstmCell,
    prev_h: Var,
    prev_c: Var,
    x: Var,
) -> Result<(Var, Var), AutodiffError> {
    let h = cell.hidden;
    for (v, want) in [(prev_h, h), (prev_c, h), (x, cell.input_dim)] {
        if g.shape(v) != [want] {
            return Err(AutodiffError::Dimension {
                op: "lstm_step",
                lhs: g.shape(v).to_vec(),
                rhs: vec![want],
            });
        }
    }
    let wx = g.param(store, cell.w_input);
    let wh = g.param(store, cell.w_hidden);
    let b = g.param(store, cell.bias);
    let from_x = g.matmul(wx, x)?;
    let from_h = g.matmul(wh, prev_h)?;
    let pre = g.add(from_x, from_h)?;
    let pre = g.add(pre, b)?;
    let i = g.slice(pre, 0, h)?;
    let f = g.slice(pre, h, h)?;
    let cand = g.slice(pre, 2 * h, h)?;
    let o = g.slice(pre, 3 * h, h)?;
    let i = g.sigmoid(i);
    let f = g.sigmoid(f);
    let cand = g.tanh(cand);
    let o = g.sigmoid(o);
    let keep = g.mul(f, prev_c)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c);
    let h_new = g.mul(o, tc)?;
    Ok((h_new, c))
}

/// Encoder output for one turn.
#[derive(Debug, Clone)]
pub struct EncodedTurn {
    /// `h_t = [forward_t ; backward_t]`, one `[2h]` vector per token.
    pub token_states: Vec<Var>,
    /// `[forward_n ; backward_1]`.
    pub summary: Var,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BiLstmEncoder {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstmEncoder {
    pub fn init(store: &mut ParamStore, input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            forward: LstmCell::init(store, "encoder.forward", input_dim, hidden, rng),
            backward: LstmCell::init(store, "encoder.backward", input_dim, hidden, rng),
        }
    }

    pub fn from_store(store: &ParamStore) -> Option<Self> {
        Some(Self {
            forward: LstmCell::from_store(store, "encoder.forward")?,
            backward: LstmCell::from_store(store, "encoder.backward")?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward.hidden
    }

    /// Runs both directions from zero state. With `dropout`, it is applied to
    /// the embedded inputs and to every vector handed to the decoders.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[String],
        embedded: &[Vec<f64>],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<EncodedTurn, AutodiffError> {
        let n = embedded.len();
        if n == 0 || tokens.len() != n {
            return Err(AutodiffError::Contract(format!(
                "encode needs at least one token and one vector per token (got {} tokens, {n} vectors)",
                tokens.len()
            )));
        }
        let mut inputs = Vec::with_capacity(n);
        for e in embedded {
            let x = g.constant(Tensor::vector(e.clone()));
            inputs.push(maybe_dropout(g, x, &mut dropout)?);
        }
        let h = self.hidden();
        let zero = g.constant(Tensor::zeros(vec![h]));

        let mut fwd = Vec::with_capacity(n);
        let (mut hs, mut cs) = (zero, zero);
        for &x in &inputs {
            (hs, cs) = lstm_step(g, store, &self.forward, hs, cs, x)?;
            fwd.push(hs);
        }
        let mut bwd = vec![zero; n];
        let (mut hs, mut cs) = (zero, zero);
        for t in (0..n).rev() {
            (hs, cs) = lstm_step(g, store, &self.backward, hs, cs, inputs[t])?;
            bwd[t] = hs;
        }

        let mut token_states = Vec::with_capacity(n);
        for t in 0..n {
            let ht = g.concat(&[fwd[t], bwd[t]], 0)?;
            token_states.push(maybe_dropout(g, ht, &mut dropout)?);
        }
        let summary = g.concat(&[fwd[n - 1], bwd[0]], 0)?;
        let summary = maybe_dropout(g, summary, &mut dropout)?;
        Ok(EncodedTurn {
            token_states,
            summary,
            tokens: tokens.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sigmoid;

    fn s(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn linearizes_confirm_action() {
        let acts = [SystemAct::new("confirm", Some("food"), Some("italian"))];
        let out = linearize_turn(&acts, &s(&["i", "want", "thai"]));
        assert_eq!(out.tokens, s(&["confirm", "food", "italian", "i", "want", "thai"]));
        assert!(!out.degenerate);
    }

    #[test]
    fn linearizes_without_actions() {
        assert_eq!(linearize_turn(&[], &s(&["hello"])).tokens, s(&["hello"]));
    }

    #[test]
    fn linearizes_multiple_actions_in_order() {
        let acts = [
            SystemAct::new("request", Some("area"), None),
            SystemAct::new("confirm", Some("food"), Some("thai")),
        ];
        let out = linearize_turn(&acts, &s(&["north"]));
        assert_eq!(out.tokens, s(&["request", "area", "confirm", "food", "thai", "north"]));
    }

    #[test]
    fn empty_turn_is_padded_and_flagged() {
        let out = linearize_turn(&[], &[]);
        assert_eq!(out.tokens, s(&[PAD_TOKEN]));
        assert!(out.degenerate);
    }

    fn zero_cell(store: &mut ParamStore, d: usize, h: usize) -> LstmCell {
        let w_input = store.add("wx", Tensor::zeros(vec![4 * h, d]));
        let w_hidden = store.add("wh", Tensor::zeros(vec![4 * h, h]));
        let bias = store.add("b", Tensor::zeros(vec![4 * h]));
        LstmCell {
            w_input,
            w_hidden,
            bias,
            hidden: h,
            input_dim: d,
        }
    }

    #[test]
    fn zero_parameters_give_zero_state() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store, 3, 2);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![2]));
        let x = g.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let (h, c) = lstm_step(&mut g, &store, &cell, z, z, x).unwrap();
        assert_eq!(g.value(h).values(), &[0.0, 0.0]);
        assert_eq!(g.value(c).values(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_step_matches_hand_computation() {
        let mut store = ParamStore::new();
        // gates i, f, c, o with scalar weights
        let wx = [0.5, -0.3, 0.8, 0.1];
        let wh = [0.2, 0.4, -0.6, 0.7];
        let b = [0.1, 1.0, -0.2, 0.05];
        let w_input = store.add("wx", Tensor::matrix(4, 1, wx.to_vec()).unwrap());
        let w_hidden = store.add("wh", Tensor::matrix(4, 1, wh.to_vec()).unwrap());
        let bias = store.add("b", Tensor::vector(b.to_vec()));
        let cell = LstmCell {
            w_input,
            w_hidden,
            bias,
            hidden: 1,
            input_dim: 1,
        };
        let (x, h0, c0) = (1.5, -0.4, 0.25);
        let pre: Vec<f64> = (0..4).map(|k| wx[k] * x + wh[k] * h0 + b[k]).collect();
        let c1 = sigmoid(pre[1]) * c0 + sigmoid(pre[0]) * pre[2].tanh();
        let h1 = sigmoid(pre[3]) * c1.tanh();

        let mut g = Graph::new();
        let xv = g.constant(Tensor::vector(vec![x]));
        let hv = g.constant(Tensor::vector(vec![h0]));
        let cv = g.constant(Tensor::vector(vec![c0]));
        let (h, c) = lstm_step(&mut g, &store, &cell, hv, cv, xv).unwrap();
        assert!((g.value(h).item() - h1).abs() < 1e-15);
        assert!((g.value(c).item() - c1).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_wrong_shapes() {
        let mut store = ParamStore::new();
        let cell = zero_cell(&mut store, 3, 2);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![2]));
        let x = g.constant(Tensor::zeros(vec![4]));
        assert!(matches!(
            lstm_step(&mut g, &store, &cell, z, z, x),
            Err(AutodiffError::Dimension { .. })
        ));
    }

    #[test]
    fn init_sets_forget_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::init(&mut store, "c", 5, 3, &mut rng);
        let b = store.get(cell.bias).values();
        assert_eq!(&b[3..6], &[1.0, 1.0, 1.0]);
        assert!(b[..3].iter().chain(&b[6..]).all(|&x| x == 0.0));
        let bound = 1.0 / 3f64.sqrt();
        assert!(store.get(cell.w_input).values().iter().all(|w| w.abs() <= bound));
        assert_eq!(LstmCell::from_store(&store, "c"), Some(cell));
    }

    #[test]
    fn single_token_summary_equals_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = BiLstmEncoder::init(&mut store, 4, 3, &mut rng);
        let mut g = Graph::new();
        let out = enc
            .encode(&mut g, &store, &s(&["a"]), &[vec![0.1, 0.2, -0.3, 0.4]], None)
            .unwrap();
        assert_eq!(out.token_states.len(), 1);
        assert_eq!(g.value(out.summary).values(), g.value(out.token_states[0]).values());
    }

    #[test]
    fn encode_rejects_empty_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = BiLstmEncoder::init(&mut store, 4, 3, &mut rng);
        let mut g = Graph::new();
        assert!(matches!(
            enc.encode(&mut g, &store, &[], &[], None),
            Err(AutodiffError::Contract(_))
        ));
    }

    #[test]
    fn paper_sized_shapes() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = BiLstmEncoder::init(&mut store, 400, 200, &mut rng);
        let mut g = Graph::new();
        let emb = vec![vec![0.01; 400]; 5];
        let out = enc.encode(&mut g, &store, &s(&["a", "b", "c", "d", "e"]), &emb, None).unwrap();
        assert_eq!(out.token_states.len(), 5);
        for &t in &out.token_states {
            assert_eq!(g.shape(t), &[400]);
        }
        assert_eq!(g.shape(out.summary), &[400]);
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_scales_kept_units() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0; 1000]));
        let mut none = Dropout::new(0.0, 1);
        assert_eq!(none.apply(&mut g, x).unwrap(), x);
        let mut d = Dropout::new(0.2, 1);
        let y = d.apply(&mut g, x).unwrap();
        let vals = g.value(y).values();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
        let dropped = vals.iter().filter(|&&v| v == 0.0).count();
        assert!((100..300).contains(&dropped), "{dropped}");
    }
}
