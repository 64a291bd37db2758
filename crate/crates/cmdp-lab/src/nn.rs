//! Small dense networks used by the learners: tanh multilayer perceptrons
//! with identity output, reverse-mode gradients, Adam, and Polyak target
//! updates. Everything is `f64` and allocation-light; the models here are a
//! few thousand parameters, so plain `Vec` storage beats any BLAS detour.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite {kind} in layer {layer} of `{net}` at index {index}")]
    NonFinite { net: String, kind: &'static str, layer: usize, index: usize },
}

/// Fully connected network; `weights[l]` is row-major `[out x in]` for layer
/// `l`, hidden layers apply `tanh`, the output layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-layer activations from a cached forward pass: `activations[0]` is the
/// input, `activations[L]` the network output.
#[derive(Debug, Clone)]
pub struct MlpCache {
    activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }
}

impl Mlp {
    /// Initializes weights and biases uniformly in `[-1/sqrt(fan_in),
    /// 1/sqrt(fan_in)]` per layer.
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect());
            biases.push((0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect());
        }
        Self { sizes: sizes.to_vec(), weights, biases }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Zeroed gradient accumulators shaped like this network.
    pub fn zero_grads(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            self.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            self.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        )
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).activations.pop().unwrap()
    }

    pub fn forward_cached(&self, x: &[f64]) -> MlpCache {
        assert_eq!(x.len(), self.sizes[0], "input arity");
        let mut activations = Vec::with_capacity(self.sizes.len());
        activations.push(x.to_vec());
        for l in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = activations.last().unwrap();
            let mut z = self.biases[l].clone();
            for o in 0..fan_out {
                let row = &self.weights[l][o * fan_in..(o + 1) * fan_in];
                z[o] += row.iter().zip(input).map(|(w, xi)| w * xi).sum::<f64>();
            }
            if l < self.num_layers() - 1 {
                for v in &mut z {
                    *v = v.tanh();
                }
            }
            activations.push(z);
        }
        MlpCache { activations }
    }

    /// Accumulates parameter gradients for one cached sample given the
    /// gradient of the loss with respect to the network output, and returns
    /// the gradient with respect to the input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &[f64],
        grad_w: &mut [Vec<f64>],
        grad_b: &mut [Vec<f64>],
    ) -> Vec<f64> {
        assert_eq!(grad_out.len(), self.output_dim(), "output gradient arity");
        let mut delta = grad_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &cache.activations[l];
            for o in 0..fan_out {
                grad_b[l][o] += delta[o];
                let row = &mut grad_w[l][o * fan_in..(o + 1) * fan_in];
                for (gi, xi) in row.iter_mut().zip(input) {
                    *gi += delta[o] * xi;
                }
            }
            let mut grad_in = vec![0.0; fan_in];
            for o in 0..fan_out {
                let row = &self.weights[l][o * fan_in..(o + 1) * fan_in];
                for (g, w) in grad_in.iter_mut().zip(row) {
                    *g += delta[o] * w;
                }
            }
            if l > 0 {
                // cache.activations[l] is tanh output, so the local
                // derivative is 1 - a^2.
                for (g, a) in grad_in.iter_mut().zip(&cache.activations[l]) {
                    *g *= 1.0 - a * a;
                }
            }
            delta = grad_in;
        }
        delta
    }
}

/// Adam moment estimates for one [`Mlp`]; the step counter is shared across
/// all layers.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_w: Vec<Vec<f64>>,
    v_w: Vec<Vec<f64>>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
    t: i32,
}

impl AdamState {
    pub fn new(net: &Mlp) -> Self {
        let (m_w, m_b) = net.zero_grads();
        let (v_w, v_b) = net.zero_grads();
        Self { m_w, v_w, m_b, v_b, t: 0 }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam descent step `theta <- theta - lr * mhat / (sqrt(vhat) + eps)`.
///
/// Fails if any gradient or updated parameter is non-finite, reporting the
/// offending layer and flat index.
pub fn adam_step(
    net: &mut Mlp,
    grad_w: &[Vec<f64>],
    grad_b: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    net_name: &str,
) -> Result<(), NnError> {
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t);
    let apply = |params: &mut [Vec<f64>],
                     grads: &[Vec<f64>],
                     m: &mut [Vec<f64>],
                     v: &mut [Vec<f64>],
                     kind: &'static str|
     -> Result<(), NnError> {
        for (layer, (p_layer, g_layer)) in params.iter_mut().zip(grads).enumerate() {
            for (index, (p, &g)) in p_layer.iter_mut().zip(g_layer).enumerate() {
                if !g.is_finite() {
                    return Err(NnError::NonFinite { net: net_name.into(), kind, layer, index });
                }
                let mi = &mut m[layer][index];
                let vi = &mut v[layer][index];
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    };
    apply(&mut net.weights, grad_w, &mut state.m_w, &mut state.v_w, "weight gradient")?;
    apply(&mut net.biases, grad_b, &mut state.m_b, &mut state.v_b, "bias gradient")?;
    Ok(())
}

/// Polyak averaging `target <- tau * source + (1 - tau) * target`.
pub fn soft_update(target: &mut Mlp, source: &Mlp, tau: f64) {
    assert_eq!(target.sizes, source.sizes, "target/source shape");
    let blend = |dst: &mut Vec<Vec<f64>>, src: &[Vec<f64>]| {
        for (d_layer, s_layer) in dst.iter_mut().zip(src) {
            for (d, &s) in d_layer.iter_mut().zip(s_layer) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
    };
    blend(&mut target.weights, &source.weights);
    blend(&mut target.biases, &source.biases);
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Draws an action index from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
