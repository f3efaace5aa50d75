//! Multilayer perceptrons with exact reverse-mode gradients and an
//! adaptive-moment optimizer.
//!
//! Parameters live in one flat buffer. Layer `l` stores its `out x in` weight
//! matrix row-major followed by its `out` biases. Batches are row-major
//! `batch x features` buffers and every dense product goes through
//! `matrixmultiply::dgemm`.

use std::cell::Cell;

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::io::{put_f64s, Reader};
use crate::rng::rng_from_seed;

thread_local! {
    static GRADIENT_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of parameter-gradient evaluations performed on this thread.
pub fn gradient_evaluations() -> u64 {
    GRADIENT_EVALS.with(Cell::get)
}

fn count_gradient_eval() {
    GRADIENT_EVALS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `ln(1 + e^z)`
    SmoothRelu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn id(self) -> u8 {
        match self {
            Activation::SmoothRelu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Activation::SmoothRelu),
            1 => Ok(Activation::Tanh),
            2 => Ok(Activation::Identity),
            other => Err(Error::format(format!("unknown activation id {other}"))),
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        self.apply_with_slope(z).0
    }

    /// Activation value and derivative at `z`.
    #[inline]
    fn apply_with_slope(self, z: f64) -> (f64, f64) {
        match self {
            Activation::SmoothRelu => {
                // ln(1 + e^z) = max(z, 0) + ln(1 + e^-|z|); slope is the logistic.
                let e = (-z.abs()).exp();
                let value = z.max(0.0) + (1.0 + e).ln();
                let slope = if z >= 0.0 { 1.0 } else { e } / (1.0 + e);
                (value, slope)
            }
            Activation::Tanh => {
                // One exp instead of libm's expm1-based tanh; absolute error ~1e-16.
                let a = 1.0 - 2.0 / ((2.0 * z).exp() + 1.0);
                (a, 1.0 - a * a)
            }
            Activation::Identity => (z, 1.0),
        }
    }
}

/// Dense feed-forward network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    activation: Activation,
    output_activation: Activation,
    residual: bool,
    seed: u64,
}

/// Cached intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    input: Vec<f64>,
    /// Activation derivatives per layer (empty for identity layers).
    slope: Vec<Vec<f64>>,
    /// Post-activations per layer (before any residual add on the last).
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Result of a batched reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Option<Vec<f64>>,
}

impl Mlp {
    /// Network with fan-in uniform initialization `U(-1/sqrt(in), 1/sqrt(in))`
    /// drawn from `seed`. Hidden layers use `activation`; the output layer is
    /// linear.
    pub fn new(layer_sizes: &[usize], activation: Activation, residual: bool, seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::arg("an MLP needs at least two positive layer sizes"));
        }
        if residual && layer_sizes[0] < *layer_sizes.last().unwrap() {
            return Err(Error::arg("residual passthrough needs input dim >= output dim"));
        }
        let count = parameter_count(layer_sizes);
        let mut rng = rng_from_seed(seed);
        let mut params = Vec::with_capacity(count);
        for w in layer_sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] + 1) * w[1] {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            params,
            activation,
            output_activation: Activation::Identity,
            residual,
            seed,
        })
    }

    /// Apply an activation on the output layer too.
    pub fn with_output_activation(mut self, activation: Activation) -> Self {
        self.output_activation = activation;
        self
    }

    /// Zero the output layer so a residual network starts as the passthrough.
    pub fn zero_output_layer(mut self) -> Self {
        let l = self.layer_sizes.len() - 2;
        let (start, end) = self.layer_range(l);
        self.params[start..end].iter_mut().for_each(|p| *p = 0.0);
        self
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        check_dim("MLP parameter count", self.params.len(), params.len())?;
        self.params = params;
        Ok(())
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn layer_range(&self, l: usize) -> (usize, usize) {
        let start = parameter_count(&self.layer_sizes[..=l]);
        (start, start + (self.layer_sizes[l] + 1) * self.layer_sizes[l + 1])
    }

    fn layer_activation(&self, l: usize) -> Activation {
        if l + 1 == self.layer_count() {
            self.output_activation
        } else {
            self.activation
        }
    }

    /// Evaluate one input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim("MLP input", self.input_dim(), input.len())?;
        Ok(self.forward_batch(input, 1)?.0)
    }

    /// Evaluate a batch; returns outputs and the tape needed for `backward`.
    pub fn forward_batch(&self, input: &[f64], batch: usize) -> Result<(Vec<f64>, Tape)> {
        check_dim("MLP batch input", batch * self.input_dim(), input.len())?;
        let mut slope = Vec::with_capacity(self.layer_count());
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layer_count());
        for l in 0..self.layer_count() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let (start, _) = self.layer_range(l);
            let weights = &self.params[start..start + fan_in * fan_out];
            let bias = &self.params[start + fan_in * fan_out..start + (fan_in + 1) * fan_out];
            let prev: &[f64] = if l == 0 { input } else { &post[l - 1] };
            let mut z = Vec::with_capacity(batch * fan_out);
            for _ in 0..batch {
                z.extend_from_slice(bias);
            }
            // z (batch x out) += prev (batch x in) * W^T (in x out)
            unsafe {
                matrixmultiply::dgemm(
                    batch,
                    fan_in,
                    fan_out,
                    1.0,
                    prev.as_ptr(),
                    fan_in as isize,
                    1,
                    weights.as_ptr(),
                    1,
                    fan_in as isize,
                    1.0,
                    z.as_mut_ptr(),
                    fan_out as isize,
                    1,
                );
            }
            let act = self.layer_activation(l);
            if act == Activation::Identity {
                slope.push(Vec::new());
                post.push(z);
            } else {
                let mut s = Vec::with_capacity(z.len());
                for v in z.iter_mut() {
                    let (a, d) = act.apply_with_slope(*v);
                    *v = a;
                    s.push(d);
                }
                slope.push(s);
                post.push(z);
            }
        }
        let mut output = post.last().unwrap().clone();
        if self.residual {
            let (din, dout) = (self.input_dim(), self.output_dim());
            for (o, x) in output.chunks_exact_mut(dout).zip(input.chunks_exact(din)) {
                for (ov, xv) in o.iter_mut().zip(x) {
                    *ov += xv;
                }
            }
        }
        Ok((
            output,
            Tape {
                batch,
                input: input.to_vec(),
                slope,
                post,
            },
        ))
    }

    /// Reverse pass. `upstream` is `dL/d(output)` for each batch row. Returns
    /// the parameter gradient (when `want_params`) and the input gradient
    /// (when `want_input`).
    pub fn backward(&self, tape: &Tape, upstream: &[f64], want_params: bool, want_input: bool) -> Result<Gradients> {
        let batch = tape.batch;
        check_dim("MLP upstream gradient", batch * self.output_dim(), upstream.len())?;
        if want_params {
            count_gradient_eval();
        }
        let mut grad_params = if want_params {
            vec![0.0; self.params.len()]
        } else {
            Vec::new()
        };
        let mut delta = upstream.to_vec();
        let mut input_grad = None;
        for l in (0..self.layer_count()).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let act = self.layer_activation(l);
            if act != Activation::Identity {
                for (d, &s) in delta.iter_mut().zip(&tape.slope[l]) {
                    *d *= s;
                }
            }
            let prev: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            let (start, _) = self.layer_range(l);
            if want_params {
                let gw = &mut grad_params[start..start + fan_in * fan_out];
                // gW (out x in) = delta^T (out x batch) * prev (batch x in)
                unsafe {
                    matrixmultiply::dgemm(
                        fan_out,
                        batch,
                        fan_in,
                        1.0,
                        delta.as_ptr(),
                        1,
                        fan_out as isize,
                        prev.as_ptr(),
                        fan_in as isize,
                        1,
                        0.0,
                        gw.as_mut_ptr(),
                        fan_in as isize,
                        1,
                    );
                }
                let gb = &mut grad_params[start + fan_in * fan_out..start + (fan_in + 1) * fan_out];
                for row in delta.chunks_exact(fan_out) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            if l > 0 || want_input {
                let weights = &self.params[start..start + fan_in * fan_out];
                let mut next = vec![0.0; batch * fan_in];
                // d prev (batch x in) = delta (batch x out) * W (out x in)
                unsafe {
                    matrixmultiply::dgemm(
                        batch,
                        fan_out,
                        fan_in,
                        1.0,
                        delta.as_ptr(),
                        fan_out as isize,
                        1,
                        weights.as_ptr(),
                        fan_in as isize,
                        1,
                        0.0,
                        next.as_mut_ptr(),
                        fan_in as isize,
                        1,
                    );
                }
                if l == 0 {
                    input_grad = Some(next);
                    break;
                }
                delta = next;
            }
        }
        if let (Some(g), true) = (input_grad.as_mut(), self.residual) {
            let (din, dout) = (self.input_dim(), self.output_dim());
            for (gi, u) in g.chunks_exact_mut(din).zip(upstream.chunks_exact(dout)) {
                for (a, b) in gi.iter_mut().zip(u) {
                    *a += b;
                }
            }
        }
        Ok(Gradients {
            params: grad_params,
            input: input_grad,
        })
    }

    /// Versioned little-endian container: magic, version, layer sizes,
    /// activation ids, residual flag, seed, then the parameters as f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.params.len());
        out.extend_from_slice(MLP_MAGIC);
        out.extend_from_slice(&MLP_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            out.extend_from_slice(&(s as u32).to_le_bytes());
        }
        out.push(self.activation.id());
        out.push(self.output_activation.id());
        out.push(self.residual as u8);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        put_f64s(&mut out, &self.params);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let net = Self::read_from(&mut r)?;
        if !r.is_done() {
            return Err(Error::format("trailing bytes after MLP container"));
        }
        Ok(net)
    }

    pub(crate) fn read_from(r: &mut Reader<'_>) -> Result<Self> {
        if r.take(4)? != MLP_MAGIC {
            return Err(Error::format("not an MLP container"));
        }
        let version = r.u32()?;
        if version != MLP_FORMAT_VERSION {
            return Err(Error::format(format!("unsupported MLP container version {version}")));
        }
        let layers = r.u32()? as usize;
        if !(2..=64).contains(&layers) {
            return Err(Error::format("implausible layer count"));
        }
        let layer_sizes = (0..layers)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_id(r.u8()?)?;
        let output_activation = Activation::from_id(r.u8()?)?;
        let residual = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(Error::format("bad residual flag")),
        };
        let seed = r.u64()?;
        let count = r.u64()? as usize;
        if count != parameter_count(&layer_sizes) {
            return Err(Error::format("parameter count does not match layer sizes"));
        }
        let params = r.f64s(count)?;
        Ok(Mlp {
            layer_sizes,
            params,
            activation,
            output_activation,
            residual,
            seed,
        })
    }
}

const MLP_MAGIC: &[u8; 4] = b"MLP\0";
const MLP_FORMAT_VERSION: u32 = 1;

/// `sum (in_i + 1) * out_i` over consecutive layer pairs.
pub fn parameter_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

/// Adaptive-moment (Adam) optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Self::with_decay(param_count, learning_rate, 0.9, 0.999, 1e-8)
    }

    pub fn with_decay(param_count: usize, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        OptimizerState {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step: 0,
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
        }
    }

    /// Descent step `params -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_dim("optimizer parameters", self.first_moment.len(), params.len())?;
        check_dim("optimizer gradients", params.len(), grads.len())?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::step`].
pub fn optimizer_step(state: &OptimizerState, params: &[f64], grads: &[f64]) -> Result<(Vec<f64>, OptimizerState)> {
    let mut state = state.clone();
    let mut params = params.to_vec();
    state.step(&mut params, grads)?;
    Ok((params, state))
}
