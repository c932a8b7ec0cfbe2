//! Minimal dense MLP stack with reverse-mode gradients and Adam.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SfError};
use crate::matrix::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Fully connected network: affine layers with an activation between them
/// and none after the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    /// weights[l] is widths[l] x widths[l+1]
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f64>>,
    activation: Activation,
}

/// Cached activations from a forward pass, consumed by `backward`.
pub struct MlpTrace {
    /// acts[0] is the input batch; acts[l+1] the output of layer l.
    acts: Vec<DenseMatrix>,
}

impl MlpTrace {
    pub fn output(&self) -> &DenseMatrix {
        self.acts.last().unwrap()
    }
}

/// Per-layer parameter gradients.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Seeded uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases.
    pub fn new(widths: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs an input and an output width");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
            weights.push(DenseMatrix::from_vec(fan_in, fan_out, data).unwrap());
            biases.push(vec![0.0; fan_out]);
        }
        Self { widths: widths.to_vec(), weights, biases, activation }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn weights_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn forward(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        let mut trace = self.forward_trace(batch)?;
        Ok(trace.acts.pop().unwrap())
    }

    pub fn forward_trace(&self, batch: &DenseMatrix) -> Result<MlpTrace> {
        if batch.cols() != self.in_dim() {
            return Err(SfError::ShapeMismatch(format!(
                "mlp expects input width {}, got {}",
                self.in_dim(),
                batch.cols()
            )));
        }
        let last = self.weights.len() - 1;
        let mut acts = vec![batch.clone()];
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].matmul(w)?;
            for r in 0..z.rows() {
                let row = z.row_mut(r);
                for (x, bias) in row.iter_mut().zip(b) {
                    *x += bias;
                }
            }
            if l < last {
                match self.activation {
                    Activation::Tanh => z.data_mut().iter_mut().for_each(|x| *x = x.tanh()),
                    Activation::Relu => {
                        z.data_mut().iter_mut().for_each(|x| *x = x.max(0.0))
                    }
                }
            }
            acts.push(z);
        }
        Ok(MlpTrace { acts })
    }

    /// Reverse-mode gradients for the batch that produced `trace`.
    /// Returns parameter gradients and the gradient w.r.t. the input batch.
    pub fn backward(&self, trace: &MlpTrace, upstream: &DenseMatrix) -> (MlpGrads, DenseMatrix) {
        let last = self.weights.len() - 1;
        let out = trace.output();
        assert_eq!(
            (upstream.rows(), upstream.cols()),
            (out.rows(), out.cols()),
            "upstream gradient shape"
        );
        let mut grads = MlpGrads {
            weights: self
                .weights
                .iter()
                .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        };
        let mut delta = upstream.clone();
        for l in (0..=last).rev() {
            if l < last {
                // delta currently holds dL/d acts[l+1]; fold in the activation
                let a = &trace.acts[l + 1];
                match self.activation {
                    Activation::Tanh => {
                        for (d, &y) in delta.data_mut().iter_mut().zip(a.data()) {
                            *d *= 1.0 - y * y;
                        }
                    }
                    Activation::Relu => {
                        for (d, &y) in delta.data_mut().iter_mut().zip(a.data()) {
                            if y <= 0.0 {
                                *d = 0.0;
                            }
                        }
                    }
                }
            }
            let input = &trace.acts[l];
            grads.weights[l] = input.transpose().matmul(&delta).unwrap();
            for r in 0..delta.rows() {
                for (g, &d) in grads.biases[l].iter_mut().zip(delta.row(r)) {
                    *g += d;
                }
            }
            delta = delta.matmul(&self.weights[l].transpose()).unwrap();
        }
        (grads, delta)
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.data().len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Append all parameters (per layer: weights then bias) to `out`.
    pub fn write_params(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
    }

    /// Read parameters back in `write_params` order; returns values consumed.
    pub fn read_params(&mut self, flat: &[f64]) -> usize {
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let len = w.data().len();
            w.data_mut().copy_from_slice(&flat[pos..pos + len]);
            pos += len;
            let blen = b.len();
            b.copy_from_slice(&flat[pos..pos + blen]);
            pos += blen;
        }
        pos
    }
}

impl MlpGrads {
    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.scale(s);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self::with_lr(1e-3)
    }
}

/// Adam moment buffers for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(param_len: usize, hyper: AdamHyper) -> Self {
        Self { m: vec![0.0; param_len], v: vec![0.0; param_len], t: 0, hyper }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    let h = state.hyper;
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - h.beta1.powf(t);
    let bc2 = 1.0 - h.beta2.powf(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= h.lr * mhat / (vhat.sqrt() + h.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_identity_layer_is_passthrough() {
        let mut m = Mlp::new(&[3, 3], Activation::Tanh, &mut rng(0));
        let id = DenseMatrix::identity(3);
        m.weights_mut()[0] = id;
        m.biases_mut()[0] = vec![0.0; 3];
        let x = DenseMatrix::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        assert_eq!(m.forward(&x).unwrap(), x);
    }

    #[test]
    fn two_layer_tanh_matches_hand_trace() {
        // widths 1-2-1, fixed weights; trace computed by hand
        let mut m = Mlp::new(&[1, 2, 1], Activation::Tanh, &mut rng(0));
        m.weights_mut()[0] = DenseMatrix::from_vec(1, 2, vec![0.5, -1.0]).unwrap();
        m.biases_mut()[0] = vec![0.1, 0.2];
        m.weights_mut()[1] = DenseMatrix::from_vec(2, 1, vec![2.0, 3.0]).unwrap();
        m.biases_mut()[1] = vec![-0.5];
        let x = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let h1 = (0.5f64 * 1.0 + 0.1).tanh();
        let h2 = (-1.0f64 + 0.2).tanh();
        let want = 2.0 * h1 + 3.0 * h2 - 0.5;
        let got = m.forward(&x).unwrap().get(0, 0);
        assert!((got - want).abs() <= 1e-14, "{got} vs {want}");
    }

    #[test]
    fn zero_weights_yield_last_bias() {
        let mut m = Mlp::new(&[4, 3, 2], Activation::Relu, &mut rng(0));
        for w in m.weights_mut() {
            w.scale(0.0);
        }
        m.biases_mut()[1] = vec![0.7, -0.3];
        let x = DenseMatrix::from_vec(3, 4, vec![1.0; 12]).unwrap();
        let out = m.forward(&x).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.7, -0.3]);
        }
    }

    #[test]
    fn backward_linear_identity_passes_upstream() {
        let mut m = Mlp::new(&[3, 3], Activation::Tanh, &mut rng(0));
        m.weights_mut()[0] = DenseMatrix::identity(3);
        m.biases_mut()[0] = vec![0.0; 3];
        let x = DenseMatrix::from_vec(2, 3, vec![0.3; 6]).unwrap();
        let g = DenseMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let trace = m.forward_trace(&x).unwrap();
        let (_, input_grad) = m.backward(&trace, &g);
        assert_eq!(input_grad, g);
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let m = Mlp::new(&[3, 5, 2], Activation::Tanh, &mut rng(3));
        let x = DenseMatrix::from_vec(2, 3, vec![0.4; 6]).unwrap();
        let trace = m.forward_trace(&x).unwrap();
        let (grads, input_grad) = m.backward(&trace, &DenseMatrix::zeros(2, 2));
        assert!(grads.weights.iter().all(|w| w.data().iter().all(|&v| v == 0.0)));
        assert!(grads.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
        assert!(input_grad.data().iter().all(|&v| v == 0.0));
    }

    /// Scalar loss: sum of outputs. Central finite differences on every
    /// parameter and every input entry.
    #[test]
    fn grads_match_finite_differences() {
        let mut rng = rng(7);
        let mut m = Mlp::new(&[4, 6, 3], Activation::Tanh, &mut rng);
        let x = DenseMatrix::from_vec(
            3,
            4,
            (0..12).map(|i| ((i as f64) * 0.37).sin()).collect(),
        )
        .unwrap();
        let upstream = DenseMatrix::from_vec(3, 3, vec![1.0; 9]).unwrap();
        let trace = m.forward_trace(&x).unwrap();
        let (grads, input_grad) = m.backward(&trace, &upstream);
        let mut flat_g = Vec::new();
        grads.write_flat(&mut flat_g);
        let mut params = Vec::new();
        m.write_params(&mut params);
        let h = 1e-5;
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            m.read_params(&p);
            let up: f64 = m.forward(&x).unwrap().data().iter().sum();
            p[i] -= 2.0 * h;
            m.read_params(&p);
            let dn: f64 = m.forward(&x).unwrap().data().iter().sum();
            m.read_params(&params);
            let fd = (up - dn) / (2.0 * h);
            let denom = fd.abs().max(flat_g[i].abs()).max(1e-8);
            assert!(
                (fd - flat_g[i]).abs() / denom <= 1e-6,
                "param {i}: analytic {} vs fd {fd}",
                flat_g[i]
            );
        }
        // inputs too
        for i in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let up: f64 = m.forward(&xp).unwrap().data().iter().sum();
            xp.data_mut()[i] -= 2.0 * h;
            let dn: f64 = m.forward(&xp).unwrap().data().iter().sum();
            let fd = (up - dn) / (2.0 * h);
            let g = input_grad.data()[i];
            let denom = fd.abs().max(g.abs()).max(1e-8);
            assert!((fd - g).abs() / denom <= 1e-6, "input {i}: {g} vs {fd}");
        }
    }

    #[test]
    fn param_roundtrip() {
        let mut a = Mlp::new(&[3, 4, 2], Activation::Relu, &mut rng(9));
        let b = Mlp::new(&[3, 4, 2], Activation::Relu, &mut rng(10));
        let mut flat = Vec::new();
        b.write_params(&mut flat);
        assert_eq!(flat.len(), a.param_count());
        let consumed = a.read_params(&flat);
        assert_eq!(consumed, flat.len());
        let mut back = Vec::new();
        a.write_params(&mut back);
        assert_eq!(back, flat);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut params = vec![1.0, -2.0, 0.5];
        let grads = vec![10.0, -0.003, 4.0];
        let mut st = AdamState::new(3, AdamHyper::with_lr(1e-3));
        adam_step(&mut params, &grads, &mut st);
        // bias-corrected first step is lr * g/|g| up to eps
        assert!((params[0] - (1.0 - 1e-3)).abs() <= 1e-6);
        assert!((params[1] - (-2.0 + 1e-3)).abs() <= 1e-6);
        assert!((params[2] - (0.5 - 1e-3)).abs() <= 1e-6);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut params = vec![1.0, -2.0];
        let mut st = AdamState::new(2, AdamHyper::default());
        adam_step(&mut params, &[0.0, 0.0], &mut st);
        assert_eq!(params, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_matches_scalar_recurrence_oracle() {
        let g = 0.3;
        let h = AdamHyper { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut params = vec![0.2];
        let mut st = AdamState::new(1, h);
        adam_step(&mut params, &[g], &mut st);
        adam_step(&mut params, &[g], &mut st);
        // scripted recurrence
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 0.2f64);
        for t in 1..=2u32 {
            m = h.beta1 * m + (1.0 - h.beta1) * g;
            v = h.beta2 * v + (1.0 - h.beta2) * g * g;
            let mhat = m / (1.0 - h.beta1.powi(t as i32));
            let vhat = v / (1.0 - h.beta2.powi(t as i32));
            p -= h.lr * mhat / (vhat.sqrt() + h.eps);
        }
        assert!((params[0] - p).abs() <= 1e-15, "{} vs {p}", params[0]);
    }
}
