//! Dense feedforward networks with exact reverse-mode gradients and Adam.
//!
//! Two models are trained from this module: an ε-prediction score network
//! (denoising score matching; its implied score is -ε̂/sqrt(1-ᾱ)) and a
//! timestep classifier trained with softmax cross-entropy on one-hot labels.
//! The classifier's input gradient of a log-softmax component is the learned
//! time-linked score.
//!
//! Hidden layers use a smooth activation so input gradients are continuous.
//! Training is full batch and bit-deterministic under a fixed seed: each
//! gradient entry is a fixed-order reduction (see [`crate::linalg`]) and all
//! randomness flows through per-epoch derived streams.

use crate::error::{Error, Result};
use crate::linalg::{col_sums, matmul_nn, matmul_nt, matmul_tn, Matrix};
use crate::rng::Rng;
use crate::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};

/// Elementwise hidden-layer nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh; smooth, so predictor input-gradients are continuous.
    Tanh,
    /// max(0, x); kept for experiments, not used by the default configs.
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Dense feedforward network. `weights[l]` has shape
/// `layer_dims[l+1] × layer_dims[l]` (row-major, one row per output unit);
/// the activation applies to every layer except the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

/// Per-layer post-activations of one batch forward pass (index 0 = input).
pub struct ForwardCache {
    pub activations: Vec<Matrix>,
}

/// Parameter and input gradients from one backward pass.
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub input: Matrix,
}

impl Mlp {
    /// Seeded Gaussian init with 1/fan-in variance; biases start at zero.
    pub fn init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidParameter(
                "layer_dims needs at least input and output widths, all nonzero".into(),
            ));
        }
        let mut rng = Rng::from_stream(seed, &[0x494e_4954]);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = (1.0 / fan_in as f64).sqrt();
            let data: Vec<f64> =
                (0..fan_in * fan_out).map(|_| scale * rng.next_gaussian()).collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data));
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Mlp { layer_dims: layer_dims.to_vec(), weights, biases, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Batch forward pass; rows of `input` are samples.
    pub fn forward_batch(&self, input: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if input.cols != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: input.cols });
        }
        let mut acts: Vec<Matrix> = Vec::with_capacity(self.n_layers() + 1);
        acts.push(input.clone());
        for l in 0..self.n_layers() {
            let mut z = matmul_nt(acts.last().unwrap(), &self.weights[l]);
            let b = &self.biases[l];
            for r in 0..z.rows {
                let row = z.row_mut(r);
                for (v, &bj) in row.iter_mut().zip(b) {
                    *v += bj;
                }
            }
            if l + 1 < self.n_layers() {
                for v in z.data.iter_mut() {
                    *v = self.activation.apply(*v);
                }
            }
            acts.push(z);
        }
        let out = acts.last().unwrap().clone();
        Ok((out, ForwardCache { activations: acts }))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let input = Matrix::from_vec(1, x.len(), x.to_vec());
        let (out, _) = self.forward_batch(&input)?;
        Ok(out.data)
    }

    /// Exact reverse-mode gradients for all parameters and the input, given
    /// d(loss)/d(output) for each row of the cached forward pass.
    pub fn backward_batch(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<Gradients> {
        self.check_cache(cache)?;
        if output_grad.cols != self.output_dim() || output_grad.rows != cache.activations[0].rows {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                got: output_grad.cols,
            });
        }
        let mut w_grads: Vec<Matrix> = Vec::with_capacity(self.n_layers());
        let mut b_grads: Vec<Vec<f64>> = Vec::with_capacity(self.n_layers());
        let mut delta = output_grad.clone();
        for l in (0..self.n_layers()).rev() {
            // delta is d(loss)/d(pre-activation of layer l) once the
            // activation derivative has been folded in (not needed for the
            // linear output layer).
            if l + 1 < self.n_layers() {
                let a = &cache.activations[l + 1];
                for (dv, &av) in delta.data.iter_mut().zip(&a.data) {
                    *dv *= self.activation.derivative_from_output(av);
                }
            }
            w_grads.push(matmul_tn(&delta, &cache.activations[l]));
            b_grads.push(col_sums(&delta));
            delta = matmul_nn(&delta, &self.weights[l]);
        }
        w_grads.reverse();
        b_grads.reverse();
        Ok(Gradients { weights: w_grads, biases: b_grads, input: delta })
    }

    /// Input gradient only; skips parameter-gradient products.
    pub fn input_gradient_batch(&self, cache: &ForwardCache, output_grad: &Matrix) -> Result<Matrix> {
        self.check_cache(cache)?;
        let mut delta = output_grad.clone();
        for l in (0..self.n_layers()).rev() {
            if l + 1 < self.n_layers() {
                let a = &cache.activations[l + 1];
                for (dv, &av) in delta.data.iter_mut().zip(&a.data) {
                    *dv *= self.activation.derivative_from_output(av);
                }
            }
            delta = matmul_nn(&delta, &self.weights[l]);
        }
        Ok(delta)
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        let ok = cache.activations.len() == self.n_layers() + 1
            && cache
                .activations
                .iter()
                .zip(&self.layer_dims)
                .all(|(a, &d)| a.cols == d);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("forward cache does not match this network".into()))
        }
    }

    /// Checkpoint JSON: `{"layer_dims":…, "activation":…, "weights":[[row-major]],
    /// "biases":[[…]]}`. Loading reproduces forward outputs bit-exactly.
    pub fn to_json(&self) -> String {
        let ckpt = Checkpoint {
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            weights: self.weights.iter().map(|w| w.data.clone()).collect(),
            biases: self.biases.clone(),
        };
        serde_json::to_string(&ckpt).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.layer_dims.len() < 2
            || ckpt.weights.len() != ckpt.layer_dims.len() - 1
            || ckpt.biases.len() != ckpt.weights.len()
        {
            return Err(Error::InvalidParameter("checkpoint shape mismatch".into()));
        }
        let mut weights = Vec::new();
        for (l, data) in ckpt.weights.into_iter().enumerate() {
            let (rows, cols) = (ckpt.layer_dims[l + 1], ckpt.layer_dims[l]);
            if data.len() != rows * cols || ckpt.biases[l].len() != rows {
                return Err(Error::InvalidParameter(format!("checkpoint layer {l} shape mismatch")));
            }
            weights.push(Matrix::from_vec(rows, cols, data));
        }
        Ok(Mlp {
            layer_dims: ckpt.layer_dims,
            weights,
            biases: ckpt.biases,
            activation: ckpt.activation,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    layer_dims: Vec<usize>,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

/// Adam with bias correction; moment buffers are shaped like the parameters.
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: usize,
    m_w: Vec<Matrix>,
    v_w: Vec<Matrix>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(mlp: &Mlp, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            m_w: mlp.weights.iter().map(|w| Matrix::zeros(w.rows, w.cols)).collect(),
            v_w: mlp.weights.iter().map(|w| Matrix::zeros(w.rows, w.cols)).collect(),
            m_b: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: mlp.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn apply(&mut self, mlp: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for l in 0..mlp.weights.len() {
            adam_update(
                &mut mlp.weights[l].data,
                &grads.weights[l].data,
                &mut self.m_w[l].data,
                &mut self.v_w[l].data,
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
                bc1,
                bc2,
            );
            adam_update(
                &mut mlp.biases[l],
                &grads.biases[l],
                &mut self.m_b[l],
                &mut self.v_b[l],
                self.learning_rate,
                self.beta1,
                self.beta2,
                self.epsilon,
                bc1,
                bc2,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..params.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer settings shared by both training loops.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5000, learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Width of the timestep features appended to the score-model input:
/// the scalar t/T plus four sin/cos pairs.
pub const TIME_EMBED_DIM: usize = 9;

/// Fill `out` with the timestep features for step t of T.
pub fn time_embedding(t: usize, t_total: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), TIME_EMBED_DIM);
    let tau = t as f64 / t_total as f64;
    out[0] = tau;
    for j in 0..4 {
        let freq = std::f64::consts::PI * (1 << j) as f64;
        out[1 + 2 * j] = (freq * tau).sin();
        out[2 + 2 * j] = (freq * tau).cos();
    }
}

/// Assemble the score-model input batch `[x_t | time features]` for one step.
pub fn score_model_inputs(xs: &Matrix, t: usize, t_total: usize) -> Matrix {
    let d = xs.cols;
    let mut embed = [0.0; TIME_EMBED_DIM];
    time_embedding(t, t_total, &mut embed);
    let mut input = Matrix::zeros(xs.rows, d + TIME_EMBED_DIM);
    for r in 0..xs.rows {
        let row = input.row_mut(r);
        row[..d].copy_from_slice(xs.row(r));
        row[d..].copy_from_slice(&embed);
    }
    input
}

/// A trained model together with its training trace.
pub struct Trained {
    pub mlp: Mlp,
    pub loss_history: Vec<f64>,
}

/// Denoising score matching: train an ε-prediction network on
/// (x_t, t) → ε pairs with squared error. Fresh timesteps and noise are
/// drawn every epoch; the batch is the full data set.
pub fn train_score_model(
    data: &Matrix,
    schedule: &NoiseSchedule,
    hidden: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<Trained> {
    if data.rows == 0 {
        return Err(Error::InvalidParameter("training data is empty".into()));
    }
    let d = data.cols;
    let t_total = schedule.num_steps;
    let mut dims = vec![d + TIME_EMBED_DIM];
    dims.extend_from_slice(hidden);
    dims.push(d);
    let mut mlp = Mlp::init(&dims, Activation::Tanh, seed)?;
    let mut adam = AdamState::new(&mlp, config.learning_rate, config.beta1, config.beta2, config.epsilon);

    let n = data.rows;
    let mut input = Matrix::zeros(n, d + TIME_EMBED_DIM);
    let mut target = Matrix::zeros(n, d);
    let mut loss_history = Vec::with_capacity(config.epochs);
    let mut embed = [0.0; TIME_EMBED_DIM];

    for epoch in 0..config.epochs {
        let mut rng = Rng::from_stream(seed, &[0x5343_4f52, epoch as u64]);
        for r in 0..n {
            let t = 1 + rng.next_range(t_total);
            let ab = schedule.alpha_bar(t);
            let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
            time_embedding(t, t_total, &mut embed);
            let x0 = data.row(r);
            let row = input.row_mut(r);
            for j in 0..d {
                let eps = rng.next_gaussian();
                row[j] = signal * x0[j] + noise * eps;
                target.set(r, j, eps);
            }
            row[d..].copy_from_slice(&embed);
        }
        let (pred, cache) = mlp.forward_batch(&input)?;
        let mut loss = 0.0;
        let mut dy = Matrix::zeros(n, d);
        let inv_n = 1.0 / n as f64;
        for i in 0..pred.data.len() {
            let diff = pred.data[i] - target.data[i];
            loss += 0.5 * diff * diff;
            dy.data[i] = diff * inv_n;
        }
        loss *= inv_n;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        loss_history.push(loss);
        let grads = mlp.backward_batch(&cache, &dy)?;
        adam.apply(&mut mlp, &grads);
    }
    Ok(Trained { mlp, loss_history })
}

/// Softmax cross-entropy over the rows of `logits` against integer labels;
/// returns (mean loss, d(loss)/d(logits)).
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> (f64, Matrix) {
    let n = logits.rows;
    let k = logits.cols;
    let mut grad = Matrix::zeros(n, k);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &v in row {
            total += (v - m).exp();
        }
        let log_total = total.ln() + m;
        loss += (log_total - row[labels[r]]) * inv_n;
        let g = grad.row_mut(r);
        for (j, &v) in row.iter().enumerate() {
            let p = (v - log_total).exp();
            g[j] = (p - if j == labels[r] { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    (loss, grad)
}

/// Train a timestep classifier on forward-perturbed samples with hard
/// one-hot labels. Output width is the number of schedule steps.
pub fn train_time_predictor(
    data: &Matrix,
    schedule: &NoiseSchedule,
    hidden: &[usize],
    config: &TrainConfig,
    seed: u64,
) -> Result<Trained> {
    if data.rows == 0 {
        return Err(Error::InvalidParameter("training data is empty".into()));
    }
    let d = data.cols;
    let t_total = schedule.num_steps;
    let mut dims = vec![d];
    dims.extend_from_slice(hidden);
    dims.push(t_total);
    let mut mlp = Mlp::init(&dims, Activation::Tanh, seed)?;
    let mut adam = AdamState::new(&mlp, config.learning_rate, config.beta1, config.beta2, config.epsilon);

    let n = data.rows;
    let mut input = Matrix::zeros(n, d);
    let mut labels = vec![0usize; n];
    let mut loss_history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = Rng::from_stream(seed, &[0x5450_5245, epoch as u64]);
        for r in 0..n {
            let t = 1 + rng.next_range(t_total);
            let ab = schedule.alpha_bar(t);
            let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
            labels[r] = t - 1;
            let x0 = data.row(r);
            let row = input.row_mut(r);
            for j in 0..d {
                row[j] = signal * x0[j] + noise * rng.next_gaussian();
            }
        }
        let (logits, cache) = mlp.forward_batch(&input)?;
        let (loss, dy) = softmax_cross_entropy(&logits, &labels);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        loss_history.push(loss);
        let grads = mlp.backward_batch(&cache, &dy)?;
        adam.apply(&mut mlp, &grads);
    }
    Ok(Trained { mlp, loss_history })
}

/// Per-timestep argmax accuracy of a trained predictor on fresh forward
/// samples of `data` (one pass per step).
pub fn per_step_accuracy(
    mlp: &Mlp,
    data: &Matrix,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    let t_total = schedule.num_steps;
    let mut out = Vec::with_capacity(t_total);
    for t in 1..=t_total {
        let mut rng = Rng::from_stream(seed, &[0x4143_43, t as u64]);
        let ab = schedule.alpha_bar(t);
        let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
        let mut input = Matrix::zeros(data.rows, data.cols);
        for r in 0..data.rows {
            for j in 0..data.cols {
                input.set(r, j, signal * data.get(r, j) + noise * rng.next_gaussian());
            }
        }
        let (logits, _) = mlp.forward_batch(&input)?;
        let mut hits = 0usize;
        for r in 0..logits.rows {
            if argmax(logits.row(r)) == t - 1 {
                hits += 1;
            }
        }
        out.push(hits as f64 / data.rows as f64);
    }
    Ok(out)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Learned TLS: ∇ₓ log softmax(logits)[t] by backprop to the input.
pub fn predictor_tls(mlp: &Mlp, x: &[f64], t: usize) -> Result<Vec<f64>> {
    let grad = predictor_tls_batch(mlp, &Matrix::from_vec(1, x.len(), x.to_vec()), t)?;
    Ok(grad.data)
}

/// Batch form of [`predictor_tls`]: one row per sample.
pub fn predictor_tls_batch(mlp: &Mlp, xs: &Matrix, t: usize) -> Result<Matrix> {
    let k = mlp.output_dim();
    if t == 0 || t > k {
        return Err(Error::IndexOutOfRange { index: t, max: k });
    }
    let (logits, cache) = mlp.forward_batch(xs)?;
    // d/d(logits) of log softmax[t] = e_t - softmax.
    let mut dy = Matrix::zeros(logits.rows, k);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &v in row {
            total += (v - m).exp();
        }
        let g = dy.row_mut(r);
        for (j, &v) in row.iter().enumerate() {
            g[j] = (if j == t - 1 { 1.0 } else { 0.0 }) - (v - m).exp() / total;
        }
    }
    mlp.input_gradient_batch(&cache, &dy)
}

/// Batch ε-prediction of a trained score model at step t.
pub fn eps_predict_batch(mlp: &Mlp, xs: &Matrix, t: usize, t_total: usize) -> Result<Matrix> {
    let input = score_model_inputs(xs, t, t_total);
    let (out, _) = mlp.forward_batch(&input)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_and_identity_layer() {
        let mut mlp = Mlp::init(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        for w in &mut mlp.weights {
            w.data.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(mlp.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);

        // Single linear layer with identity weights: output = input.
        let mut id = Mlp::init(&[3, 3], Activation::Tanh, 2).unwrap();
        id.weights[0].data.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..3 {
            id.weights[0].set(i, i, 1.0);
        }
        assert_eq!(id.forward(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    // Straight-line reimplementation of the same arithmetic, kept independent
    // of the Matrix-based forward pass.
    fn naive_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in 0..mlp.weights.len() {
            let w = &mlp.weights[l];
            let mut next = vec![0.0; w.rows];
            for (i, nv) in next.iter_mut().enumerate() {
                let mut acc = mlp.biases[l][i];
                for (j, &aj) in a.iter().enumerate() {
                    acc += w.get(i, j) * aj;
                }
                *nv = if l + 1 < mlp.weights.len() { mlp.activation.apply(acc) } else { acc };
            }
            a = next;
        }
        a
    }

    #[test]
    fn forward_matches_duplicate_arithmetic() {
        let mlp = Mlp::init(&[2, 16, 3], Activation::Tanh, 7).unwrap();
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let x: Vec<f64> = rng.gaussian_vec(2);
            let fast = mlp.forward(&x).unwrap();
            let slow = naive_forward(&mlp, &x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_layer_input_gradient_is_w_transpose_g() {
        let mlp = Mlp::init(&[3, 2], Activation::Tanh, 5).unwrap();
        let x = Matrix::from_vec(1, 3, vec![0.4, -1.0, 2.2]);
        let (_, cache) = mlp.forward_batch(&x).unwrap();
        let g = Matrix::from_vec(1, 2, vec![0.7, -0.2]);
        let grads = mlp.backward_batch(&cache, &g).unwrap();
        for j in 0..3 {
            let expect = mlp.weights[0].get(0, j) * 0.7 + mlp.weights[0].get(1, j) * (-0.2);
            assert!((grads.input.get(0, j) - expect).abs() < 1e-14);
        }
    }

    fn loss_of(mlp: &Mlp, x: &Matrix, g: &Matrix) -> f64 {
        let (y, _) = mlp.forward_batch(x).unwrap();
        y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(17);
        for arch in [vec![2, 8, 3], vec![4, 6, 6, 2], vec![3, 5, 1]] {
            let mut mlp = Mlp::init(&arch, Activation::Tanh, rng.next_u64()).unwrap();
            let n = 3;
            let x = Matrix::from_vec(n, arch[0], rng.gaussian_vec(n * arch[0]));
            let g = Matrix::from_vec(n, *arch.last().unwrap(), rng.gaussian_vec(n * arch.last().unwrap()));
            let (_, cache) = mlp.forward_batch(&x).unwrap();
            let grads = mlp.backward_batch(&cache, &g).unwrap();
            let h = 1e-5;

            for l in 0..mlp.weights.len() {
                for idx in 0..mlp.weights[l].data.len() {
                    let orig = mlp.weights[l].data[idx];
                    mlp.weights[l].data[idx] = orig + h;
                    let up = loss_of(&mlp, &x, &g);
                    mlp.weights[l].data[idx] = orig - h;
                    let dn = loss_of(&mlp, &x, &g);
                    mlp.weights[l].data[idx] = orig;
                    let fd = (up - dn) / (2.0 * h);
                    let an = grads.weights[l].data[idx];
                    let denom = an.abs().max(fd.abs()).max(1e-4);
                    assert!((an - fd).abs() / denom < 1e-4, "W[{l}][{idx}]: {an} vs {fd}");
                }
                for idx in 0..mlp.biases[l].len() {
                    let orig = mlp.biases[l][idx];
                    mlp.biases[l][idx] = orig + h;
                    let up = loss_of(&mlp, &x, &g);
                    mlp.biases[l][idx] = orig - h;
                    let dn = loss_of(&mlp, &x, &g);
                    mlp.biases[l][idx] = orig;
                    let fd = (up - dn) / (2.0 * h);
                    let an = grads.biases[l][idx];
                    let denom = an.abs().max(fd.abs()).max(1e-4);
                    assert!((an - fd).abs() / denom < 1e-4, "b[{l}][{idx}]: {an} vs {fd}");
                }
            }

            // Input gradient.
            let mut xv = x.clone();
            for idx in 0..xv.data.len() {
                let orig = xv.data[idx];
                xv.data[idx] = orig + h;
                let up = loss_of(&mlp, &xv, &g);
                xv.data[idx] = orig - h;
                let dn = loss_of(&mlp, &xv, &g);
                xv.data[idx] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads.input.data[idx];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!((an - fd).abs() / denom < 1e-4, "x[{idx}]: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn softmax_ce_gradient_is_probs_minus_onehot() {
        let logits = Matrix::from_vec(2, 3, vec![0.2, -1.0, 0.5, 2.0, 0.0, -0.3]);
        let labels = [2usize, 0];
        let (_, grad) = softmax_cross_entropy(&logits, &labels);
        for r in 0..2 {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..3 {
                let p = exps[j] / total;
                let expect = (p - if j == labels[r] { 1.0 } else { 0.0 }) / 2.0;
                assert!((grad.get(r, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stale_cache_rejected() {
        let a = Mlp::init(&[2, 4, 2], Activation::Tanh, 1).unwrap();
        let b = Mlp::init(&[2, 5, 2], Activation::Tanh, 1).unwrap();
        let x = Matrix::from_vec(1, 2, vec![0.1, 0.2]);
        let (_, cache) = a.forward_batch(&x).unwrap();
        let g = Matrix::from_vec(1, 2, vec![1.0, 0.0]);
        assert!(b.backward_batch(&cache, &g).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = Rng::new(100);
        let data = Matrix::from_vec(32, 2, rng.gaussian_vec(64));
        let schedule = NoiseSchedule::linear(5, 0.05, 0.3).unwrap();
        let config = TrainConfig { epochs: 30, learning_rate: 1e-3, ..Default::default() };
        let a = train_score_model(&data, &schedule, &[8], &config, 9).unwrap();
        let b = train_score_model(&data, &schedule, &[8], &config, 9).unwrap();
        for (wa, wb) in a.mlp.weights.iter().zip(&b.mlp.weights) {
            assert_eq!(wa.data, wb.data);
        }
        let c = train_time_predictor(&data, &schedule, &[8], &config, 9).unwrap();
        let d = train_time_predictor(&data, &schedule, &[8], &config, 9).unwrap();
        for (wc, wd) in c.mlp.weights.iter().zip(&d.mlp.weights) {
            assert_eq!(wc.data, wd.data);
        }
    }

    #[test]
    fn score_training_beats_zero_predictor_on_point_mass() {
        // Single data point at the origin, ᾱ near 1: x_t = sqrt(1-ᾱ)ε reveals
        // the noise, so the trained net must beat the ε̂ = 0 baseline of d/2.
        let data = Matrix::zeros(64, 2);
        let schedule = NoiseSchedule::from_betas(vec![0.01]).unwrap();
        let config = TrainConfig { epochs: 400, learning_rate: 3e-3, ..Default::default() };
        let trained = train_score_model(&data, &schedule, &[16], &config, 3).unwrap();
        let final_loss = *trained.loss_history.last().unwrap();
        assert!(final_loss < 0.9, "loss {final_loss} should beat the 1.0 baseline");
    }

    #[test]
    fn single_class_predictor_has_zero_loss_and_zero_tls() {
        let mut rng = Rng::new(2);
        let data = Matrix::from_vec(16, 2, rng.gaussian_vec(32));
        let schedule = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        let config = TrainConfig { epochs: 5, learning_rate: 1e-3, ..Default::default() };
        let trained = train_time_predictor(&data, &schedule, &[4], &config, 1).unwrap();
        assert!(trained.loss_history.iter().all(|l| *l == 0.0));
        let tls = predictor_tls(&trained.mlp, &[0.3, -0.4], 1).unwrap();
        assert_eq!(tls, vec![0.0, 0.0]);
    }

    #[test]
    fn predictor_tls_matches_finite_differences() {
        let mlp = Mlp::init(&[2, 12, 6], Activation::Tanh, 8).unwrap();
        let log_softmax = |x: &[f64], t: usize| {
            let logits = mlp.forward(x).unwrap();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|v| (v - m).exp()).sum();
            logits[t - 1] - m - total.ln()
        };
        let x = [0.3, -0.8];
        let h = 1e-5;
        for t in [1usize, 4, 6] {
            let an = predictor_tls(&mlp, &x, t).unwrap();
            for i in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[i] += h;
                xm[i] -= h;
                let fd = (log_softmax(&xp, t) - log_softmax(&xm, t)) / (2.0 * h);
                let denom = an[i].abs().max(fd.abs()).max(1e-4);
                assert!((an[i] - fd).abs() / denom < 1e-4, "t={t} i={i}: {} vs {fd}", an[i]);
            }
        }
        assert!(predictor_tls(&mlp, &x, 0).is_err());
        assert!(predictor_tls(&mlp, &x, 7).is_err());
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let mlp = Mlp::init(&[3, 7, 2], Activation::Tanh, 12).unwrap();
        let loaded = Mlp::from_json(&mlp.to_json()).unwrap();
        let mut rng = Rng::new(1);
        for _ in 0..10 {
            let x: Vec<f64> = rng.gaussian_vec(3);
            assert_eq!(mlp.forward(&x).unwrap(), loaded.forward(&x).unwrap());
        }
    }
}
