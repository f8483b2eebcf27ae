//! Shared building blocks: LSTM cell, embedding table, MLP and Gaussian
//! parameter heads. Each block owns a parameter namespace inside a
//! [`ParameterStore`] and records its forward pass on a [`Tape`].

use crate::autodiff::{Init, NodeId, ParameterStore, Tape, Tensor};
use crate::error::Result;

/// Clamp range for log-variance heads.
pub const LOG_VAR_CLAMP: (f64, f64) = (-10.0, 10.0);

/// Hidden/cell pair of one LSTM step, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

/// Gaussian parameters (mean, log-variance) as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct GaussianNodes {
    pub mean: NodeId,
    pub log_var: NodeId,
}

const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// Single-layer LSTM cell. Eight weight matrices (input and recurrent per
/// gate) plus four biases; forget-gate bias initialized to +1.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub name: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new(name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        LstmCell { name: name.to_string(), input_dim, hidden_dim }
    }

    pub fn create_params(&self, store: &mut ParameterStore) {
        for gate in GATES {
            store.create(
                &format!("{}.w_x{gate}", self.name),
                vec![self.hidden_dim, self.input_dim],
                Init::FanIn(self.input_dim),
            );
            store.create(
                &format!("{}.w_h{gate}", self.name),
                vec![self.hidden_dim, self.hidden_dim],
                Init::FanIn(self.hidden_dim),
            );
            let bias_init = if gate == "f" { Init::Constant(1.0) } else { Init::Zeros };
            store.create(&format!("{}.b_{gate}", self.name), vec![self.hidden_dim], bias_init);
        }
    }

    pub fn zero_state(&self, tape: &mut Tape) -> LstmState {
        let h = tape.constant(Tensor::zeros(vec![self.hidden_dim]));
        let c = tape.constant(Tensor::zeros(vec![self.hidden_dim]));
        LstmState { h, c }
    }

    /// Standard gate equations; returns the new state, the old one is
    /// untouched.
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        frozen: bool,
        input: NodeId,
        state: LstmState,
    ) -> Result<LstmState> {
        let mut pre = Vec::with_capacity(4);
        for gate in GATES {
            let wx = store.inject(tape, &format!("{}.w_x{gate}", self.name), frozen);
            let wh = store.inject(tape, &format!("{}.w_h{gate}", self.name), frozen);
            let b = store.inject(tape, &format!("{}.b_{gate}", self.name), frozen);
            let xi = tape.matmul(wx, input)?;
            let hi = tape.matmul(wh, state.h)?;
            let s = tape.add(xi, hi)?;
            pre.push(tape.add(s, b)?);
        }
        let i = tape.sigmoid(pre[0])?;
        let f = tape.sigmoid(pre[1])?;
        let g = tape.tanh(pre[2])?;
        let o = tape.sigmoid(pre[3])?;
        let fc = tape.mul(f, state.c)?;
        let ig = tape.mul(i, g)?;
        let c = tape.add(fc, ig)?;
        let ct = tape.tanh(c)?;
        let h = tape.mul(o, ct)?;
        Ok(LstmState { h, c })
    }
}

/// Token embedding table of shape `[vocab, dim]`.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(name: &str, vocab: usize, dim: usize) -> Self {
        EmbeddingTable { name: name.to_string(), vocab, dim }
    }

    pub fn create_params(&self, store: &mut ParameterStore) {
        store.create(&format!("{}.weight", self.name), vec![self.vocab, self.dim], Init::FanIn(self.dim));
    }

    pub fn lookup(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        frozen: bool,
        token: usize,
    ) -> Result<NodeId> {
        let table = store.inject(tape, &format!("{}.weight", self.name), frozen);
        tape.embed(table, token)
    }
}

/// Affine maps from a hidden vector to Gaussian mean and log-variance;
/// log-variance clamped to [−10, 10].
#[derive(Debug, Clone)]
pub struct GaussianHead {
    pub name: String,
    pub input_dim: usize,
    pub z_dim: usize,
}

impl GaussianHead {
    pub fn new(name: &str, input_dim: usize, z_dim: usize) -> Self {
        GaussianHead { name: name.to_string(), input_dim, z_dim }
    }

    pub fn create_params(&self, store: &mut ParameterStore) {
        store.create(&format!("{}.w_mean", self.name), vec![self.z_dim, self.input_dim], Init::FanIn(self.input_dim));
        store.create(&format!("{}.b_mean", self.name), vec![self.z_dim], Init::Zeros);
        store.create(&format!("{}.w_logvar", self.name), vec![self.z_dim, self.input_dim], Init::FanIn(self.input_dim));
        store.create(&format!("{}.b_logvar", self.name), vec![self.z_dim], Init::Zeros);
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        frozen: bool,
        h: NodeId,
    ) -> Result<GaussianNodes> {
        let wm = store.inject(tape, &format!("{}.w_mean", self.name), frozen);
        let bm = store.inject(tape, &format!("{}.b_mean", self.name), frozen);
        let wv = store.inject(tape, &format!("{}.w_logvar", self.name), frozen);
        let bv = store.inject(tape, &format!("{}.b_logvar", self.name), frozen);
        let m = tape.matmul(wm, h)?;
        let mean = tape.add(m, bm)?;
        let v = tape.matmul(wv, h)?;
        let v = tape.add(v, bv)?;
        let log_var = tape.clamp(v, LOG_VAR_CLAMP.0, LOG_VAR_CLAMP.1)?;
        Ok(GaussianNodes { mean, log_var })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
}

/// Feed-forward net: affine + activation layers applied in order.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub input_dim: usize,
    pub layers: Vec<(usize, Activation)>,
}

impl Mlp {
    pub fn new(name: &str, input_dim: usize, layers: Vec<(usize, Activation)>) -> Self {
        assert!(!layers.is_empty(), "MLP layer list must be nonempty");
        Mlp { name: name.to_string(), input_dim, layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().0
    }

    pub fn create_params(&self, store: &mut ParameterStore) {
        let mut in_dim = self.input_dim;
        for (idx, (out_dim, _)) in self.layers.iter().enumerate() {
            store.create(&format!("{}.l{idx}.w", self.name), vec![*out_dim, in_dim], Init::FanIn(in_dim));
            store.create(&format!("{}.l{idx}.b", self.name), vec![*out_dim], Init::Zeros);
            in_dim = *out_dim;
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        frozen: bool,
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        for (idx, (_, act)) in self.layers.iter().enumerate() {
            let w = store.inject(tape, &format!("{}.l{idx}.w", self.name), frozen);
            let b = store.inject(tape, &format!("{}.l{idx}.b", self.name), frozen);
            let a = tape.matmul(w, h)?;
            h = tape.add(a, b)?;
            h = match act {
                Activation::Linear => h,
                Activation::Tanh => tape.tanh(h)?,
                Activation::Sigmoid => tape.sigmoid(h)?,
            };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::Rng;

    fn zeroed_cell(seed: u64) -> (LstmCell, ParameterStore) {
        let cell = LstmCell::new("cell", 3, 2);
        let mut store = ParameterStore::new(seed);
        cell.create_params(&mut store);
        (cell, store)
    }

    #[test]
    fn zero_everything_gives_zero_state() {
        let (cell, mut store) = zeroed_cell(0);
        // zero all params including the forget bias
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            for v in store.get_mut(&n).data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(vec![3]));
        let s0 = cell.zero_state(&mut tape);
        let s1 = cell.step(&mut tape, &store, false, x, s0).unwrap();
        assert_eq!(tape.value(s1.h).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(s1.c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn lstm_step_is_deterministic() {
        let (cell, store) = zeroed_cell(5);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(vec![0.2, -0.4, 0.9]));
            let s0 = cell.zero_state(&mut tape);
            let s1 = cell.step(&mut tape, &store, false, x, s0).unwrap();
            tape.value(s1.h).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lstm_step_matches_hand_coded_gates() {
        // second straight-line implementation of the gate formulas
        let (cell, store) = zeroed_cell(11);
        let x = [0.3, -0.2, 0.7];
        let h0 = [0.1, -0.5];
        let c0 = [0.4, 0.2];

        let mut tape = Tape::new();
        let xn = tape.constant(Tensor::vector(x.to_vec()));
        let s0 = LstmState {
            h: tape.constant(Tensor::vector(h0.to_vec())),
            c: tape.constant(Tensor::vector(c0.to_vec())),
        };
        let s1 = cell.step(&mut tape, &store, false, xn, s0).unwrap();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let gate = |g: &str, row: usize| {
            let wx = store.get(&format!("cell.w_x{g}"));
            let wh = store.get(&format!("cell.w_h{g}"));
            let b = store.get(&format!("cell.b_{g}"));
            let mut v = b.data()[row];
            for j in 0..3 {
                v += wx.data()[row * 3 + j] * x[j];
            }
            for j in 0..2 {
                v += wh.data()[row * 2 + j] * h0[j];
            }
            v
        };
        for row in 0..2 {
            let i = sig(gate("i", row));
            let f = sig(gate("f", row));
            let g = gate("g", row).tanh();
            let o = sig(gate("o", row));
            let c = f * c0[row] + i * g;
            let h = o * c.tanh();
            assert!((tape.value(s1.c).data()[row] - c).abs() < 1e-12);
            assert!((tape.value(s1.h).data()[row] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_gradients_check_out() {
        let (cell, store) = zeroed_cell(23);
        let mut rng = crate::rng::stream_rng(23, "lstm-gc");
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = grad_check(
            |p, tape| {
                let xn = tape.constant(Tensor::vector(x.clone()));
                let s0 = cell.zero_state(tape);
                let s1 = cell.step(tape, p, false, xn, s0)?;
                let s2 = {
                    let xn2 = tape.constant(Tensor::vector(x.clone()));
                    cell.step(tape, p, false, xn2, s1)?
                };
                tape.sq_l2(s2.h)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn gaussian_head_zero_params_is_standard_normal() {
        let head = GaussianHead::new("head", 4, 3);
        let mut store = ParameterStore::new(0);
        head.create_params(&mut store);
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            for v in store.get_mut(&n).data_mut() {
                *v = 0.0;
            }
        }
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let g = head.forward(&mut tape, &store, false, h).unwrap();
        assert_eq!(tape.value(g.mean).data(), &[0.0; 3]);
        assert_eq!(tape.value(g.log_var).data(), &[0.0; 3]);
    }

    #[test]
    fn log_var_bias_clamped() {
        let head = GaussianHead::new("head", 2, 1);
        let mut store = ParameterStore::new(0);
        head.create_params(&mut store);
        for v in store.get_mut("head.w_logvar").data_mut() {
            *v = 0.0;
        }
        store.get_mut("head.b_logvar").data_mut()[0] = -30.0;
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let g = head.forward(&mut tape, &store, false, h).unwrap();
        assert_eq!(tape.value(g.log_var).data(), &[-10.0]);
    }

    #[test]
    fn mean_head_gradient_matches_finite_differences() {
        let head = GaussianHead::new("head", 3, 2);
        let mut store = ParameterStore::new(9);
        head.create_params(&mut store);
        let report = grad_check(
            |p, tape| {
                let h = tape.constant(Tensor::vector(vec![0.5, -0.3, 0.8]));
                let g = head.forward(tape, p, false, h)?;
                tape.sq_l2(g.mean)
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(report.per_param["head.w_mean"] < 1e-6, "{report:?}");
        assert!(report.per_param["head.b_mean"] < 1e-6, "{report:?}");
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mlp = Mlp::new("mlp", 3, vec![(3, Activation::Linear)]);
        let mut store = ParameterStore::new(0);
        mlp.create_params(&mut store);
        let w = store.get_mut("mlp.l0.w");
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            *v = if i % 4 == 0 { 1.0 } else { 0.0 };
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.1, -2.0, 3.5]));
        let y = mlp.forward(&mut tape, &store, false, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, -2.0, 3.5]);
    }

    #[test]
    fn zero_weights_yield_bias() {
        let mlp = Mlp::new("mlp", 2, vec![(2, Activation::Linear)]);
        let mut store = ParameterStore::new(0);
        mlp.create_params(&mut store);
        for v in store.get_mut("mlp.l0.w").data_mut() {
            *v = 0.0;
        }
        store.get_mut("mlp.l0.b").data_mut().copy_from_slice(&[0.7, -0.2]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![5.0, 5.0]));
        let y = mlp.forward(&mut tape, &store, false, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, -0.2]);
    }

    #[test]
    fn two_layer_tanh_mlp_matches_hand_computation() {
        let mlp = Mlp::new("mlp", 3, vec![(2, Activation::Tanh), (1, Activation::Linear)]);
        let mut store = ParameterStore::new(31);
        mlp.create_params(&mut store);
        let x = [0.2, -0.6, 1.1];
        let mut tape = Tape::new();
        let xn = tape.constant(Tensor::vector(x.to_vec()));
        let y = mlp.forward(&mut tape, &store, false, xn).unwrap();

        let w0 = store.get("mlp.l0.w");
        let b0 = store.get("mlp.l0.b");
        let mut h = [0.0f64; 2];
        for r in 0..2 {
            let mut v = b0.data()[r];
            for j in 0..3 {
                v += w0.data()[r * 3 + j] * x[j];
            }
            h[r] = v.tanh();
        }
        let w1 = store.get("mlp.l1.w");
        let b1 = store.get("mlp.l1.b");
        let out = b1.data()[0] + w1.data()[0] * h[0] + w1.data()[1] * h[1];
        assert!((tape.value(y).data()[0] - out).abs() < 1e-12);
    }
}
