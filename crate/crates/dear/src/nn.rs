//! Minimal differentiable feedforward networks with explicit forward and
//! backward passes, plus an Adam optimizer over flat parameter groups.
//!
//! Everything is double precision. Forward is pure; backward never mutates
//! the net and returns exact Jacobian-vector products, so the trainer can
//! assemble its gradient estimators from per-sample upstream vectors.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid net spec: {0}")]
    InvalidSpec(String),
    #[error("input has width {got}, net expects {want}")]
    InputWidth { got: usize, want: usize },
    #[error("upstream has shape ({rows}, {cols}), tape expects ({want_rows}, {want_cols})")]
    UpstreamShape { rows: usize, cols: usize, want_rows: usize, want_cols: usize },
    #[error("tape does not match this net (layer {layer} shapes differ)")]
    TapeMismatch { layer: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// max(x, 0.2 x)
    LeakyRelu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if x >= 0.0 {
                    x
                } else {
                    0.2 * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation value.
    pub fn deriv(self, pre: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if pre >= 0.0 {
                    1.0
                } else {
                    0.2
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-pre).exp());
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

/// What a net plays in the bidirectional model. The role constrains the spec
/// (scalar discriminator output, bounded generator pixels) and is echoed in
/// checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Encoder,
    Generator,
    Discriminator,
}

/// Layer layout: `layer_sizes` lists the input width followed by each layer's
/// output width, so a net with L layers has `layer_sizes.len() == L + 1` and
/// one activation per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    pub input_role: Role,
}

impl NetSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.len() < 2 {
            return Err(NnError::InvalidSpec("need at least one layer".into()));
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return Err(NnError::InvalidSpec("layer sizes must be positive".into()));
        }
        if self.activations.len() != self.layer_sizes.len() - 1 {
            return Err(NnError::InvalidSpec(format!(
                "{} layers but {} activations",
                self.layer_sizes.len() - 1,
                self.activations.len()
            )));
        }
        let last_act = *self.activations.last().expect("at least one layer");
        match self.input_role {
            Role::Discriminator => {
                if *self.layer_sizes.last().expect("nonempty") != 1 {
                    return Err(NnError::InvalidSpec("discriminator output size must be 1".into()));
                }
            }
            Role::Generator => {
                if !matches!(last_act, Activation::Tanh | Activation::Sigmoid) {
                    return Err(NnError::InvalidSpec(
                        "generator head must be tanh or sigmoid".into(),
                    ));
                }
            }
            Role::Encoder => {}
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("nonempty")
    }
}

/// Feedforward net. `weights[l]` is (out, in); a layer computes
/// `act(x Wᵀ + b)` on row-major batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Net {
    pub spec: NetSpec,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Cached layer inputs and pre-activations from one forward pass.
#[derive(Debug)]
pub struct Tape {
    /// Input to each layer, (n, in_l); `inputs[0]` is the net input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer, (n, out_l).
    pres: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_len(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Per-layer parameter gradients, shaped like the net's weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Net) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn scale(&mut self, a: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|x| x * a);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|x| x * a);
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            *w += o;
        }
        for (b, o) in self.biases.iter_mut().zip(&other.biases) {
            *b += o;
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m: f64 = 0.0;
        for w in &self.weights {
            for &x in w.iter() {
                m = m.max(x.abs());
            }
        }
        for b in &self.biases {
            for &x in b.iter() {
                m = m.max(x.abs());
            }
        }
        m
    }
}

impl Net {
    /// Xavier-uniform weights on ±√(6/(fan_in+fan_out)), zero biases,
    /// deterministic in the seed.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Net, NnError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..spec.n_layers() {
            let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-bound..bound));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Net { spec, weights, biases })
    }

    pub fn forward(&self, input: &Array1<f64>) -> Result<(Array1<f64>, Tape), NnError> {
        let batch = input.clone().insert_axis(Axis(0));
        let (out, tape) = self.forward_batch(&batch)?;
        Ok((out.index_axis(Axis(0), 0).to_owned(), tape))
    }

    /// Forward over a row-major batch (n, input_size).
    pub fn forward_batch(&self, input: &Array2<f64>) -> Result<(Array2<f64>, Tape), NnError> {
        if input.ncols() != self.spec.input_size() {
            return Err(NnError::InputWidth { got: input.ncols(), want: self.spec.input_size() });
        }
        let mut inputs = Vec::with_capacity(self.spec.n_layers());
        let mut pres = Vec::with_capacity(self.spec.n_layers());
        let mut cur = input.clone();
        for l in 0..self.spec.n_layers() {
            let pre = cur.dot(&self.weights[l].t()) + &self.biases[l];
            let act = self.spec.activations[l];
            let out = pre.mapv(|x| act.apply(x));
            inputs.push(cur);
            pres.push(pre);
            cur = out;
        }
        Ok((cur, tape_from(inputs, pres)))
    }

    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &Array1<f64>,
    ) -> Result<(ParamGrads, Array1<f64>), NnError> {
        let up = upstream.clone().insert_axis(Axis(0));
        let (grads, input_grads) = self.backward_batch(tape, &up)?;
        Ok((grads, input_grads.index_axis(Axis(0), 0).to_owned()))
    }

    /// Batch backward: parameter gradients are summed over the batch rows
    /// (fold per-sample weights into `upstream` rows first); the returned
    /// input gradients stay per-row.
    pub fn backward_batch(
        &self,
        tape: &Tape,
        upstream: &Array2<f64>,
    ) -> Result<(ParamGrads, Array2<f64>), NnError> {
        self.check_backward_shapes(tape, upstream)?;
        let layers = self.spec.n_layers();
        let mut weight_grads = vec![Array2::zeros((0, 0)); layers];
        let mut bias_grads = vec![Array1::zeros(0); layers];
        let mut delta =
            pre_delta(upstream, &tape.pres[layers - 1], self.spec.activations[layers - 1]);
        for l in (0..layers).rev() {
            weight_grads[l] = to_standard(delta.t().dot(&tape.inputs[l]));
            bias_grads[l] = delta.sum_axis(Axis(0));
            let up_prev = delta.dot(&self.weights[l]);
            if l > 0 {
                delta = pre_delta(&up_prev, &tape.pres[l - 1], self.spec.activations[l - 1]);
            } else {
                delta = up_prev;
            }
        }
        Ok((ParamGrads { weights: weight_grads, biases: bias_grads }, delta))
    }

    /// Batch backward that skips every parameter-gradient GEMM, for callers
    /// that only need gradients w.r.t. the input.
    pub fn backward_batch_input_only(
        &self,
        tape: &Tape,
        upstream: &Array2<f64>,
    ) -> Result<Array2<f64>, NnError> {
        self.check_backward_shapes(tape, upstream)?;
        let mut delta = pre_delta(upstream, &tape.pres[self.spec.n_layers() - 1], self.spec.activations[self.spec.n_layers() - 1]);
        for l in (0..self.spec.n_layers()).rev() {
            if l > 0 {
                let up_prev = delta.dot(&self.weights[l]);
                delta = pre_delta(&up_prev, &tape.pres[l - 1], self.spec.activations[l - 1]);
            } else {
                return Ok(delta.dot(&self.weights[0]));
            }
        }
        unreachable!("loop returns at layer 0");
    }

    fn check_backward_shapes(&self, tape: &Tape, upstream: &Array2<f64>) -> Result<(), NnError> {
        let layers = self.spec.n_layers();
        if tape.inputs.len() != layers || tape.pres.len() != layers {
            return Err(NnError::TapeMismatch { layer: tape.inputs.len().min(tape.pres.len()) });
        }
        for l in 0..layers {
            if tape.inputs[l].ncols() != self.spec.layer_sizes[l]
                || tape.pres[l].ncols() != self.spec.layer_sizes[l + 1]
            {
                return Err(NnError::TapeMismatch { layer: l });
            }
        }
        let n = tape.batch_len();
        if upstream.nrows() != n || upstream.ncols() != self.spec.output_size() {
            return Err(NnError::UpstreamShape {
                rows: upstream.nrows(),
                cols: upstream.ncols(),
                want_rows: n,
                want_cols: self.spec.output_size(),
            });
        }
        Ok(())
    }

    /// Flat views over all parameters, weights then bias per layer, for the
    /// optimizer and the checkpointer. Order is stable.
    pub fn param_tensors(&self) -> Vec<(&[f64], &str)> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.push((self.weights[l].as_slice().expect("standard layout"), "weight"));
            out.push((self.biases[l].as_slice().expect("standard layout"), "bias"));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Apply one Adam step using `grads` (summed convention is the caller's
    /// concern; pass already-averaged gradients).
    pub fn adam_update(&mut self, grads: &ParamGrads, state: &mut AdamState) {
        let mut params: Vec<&mut [f64]> = Vec::new();
        let mut gs: Vec<&[f64]> = Vec::new();
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            params.push(w.as_slice_mut().expect("standard layout"));
            gs.push(g.as_slice().expect("standard layout"));
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            params.push(b.as_slice_mut().expect("standard layout"));
            gs.push(g.as_slice().expect("standard layout"));
        }
        state.step_group(&mut params, &gs);
    }
}

fn pre_delta(upstream: &Array2<f64>, pre: &Array2<f64>, act: Activation) -> Array2<f64> {
    let mut delta = upstream.clone();
    delta.zip_mut_with(pre, |d, &p| *d *= act.deriv(p));
    delta
}

fn tape_from(inputs: Vec<Array2<f64>>, pres: Vec<Array2<f64>>) -> Tape {
    Tape { inputs, pres }
}

/// GEMM on a transposed view can hand back an f-order result; the optimizer
/// and checkpointer need contiguous c-order slices.
fn to_standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Adam over one flat parameter group. β1 defaults to 0 so the first moment
/// is the raw gradient; bias correction is standard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update over a group of tensors laid end to end in the state's
    /// flat moment buffers. Tensor order must stay fixed across calls.
    pub fn step_group(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), grads.len(), "tensor count mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut off = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            assert_eq!(p.len(), g.len(), "tensor length mismatch");
            assert!(off + p.len() <= self.m.len(), "group larger than state");
            for i in 0..p.len() {
                let j = off + i;
                self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * g[i];
                self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = self.m[j] / bc1;
                let v_hat = self.v[j] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            off += p.len();
        }
        assert_eq!(off, self.m.len(), "group smaller than state");
    }

    /// Convenience for a single flat tensor.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step_group(&mut [params], &[grads]);
    }
}
