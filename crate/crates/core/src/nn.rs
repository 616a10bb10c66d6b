//! Dense feed-forward networks with exact reverse-mode gradients and Adam.
//!
//! Batches are `(features, samples)` matrices: every column is one sample.
//! Gradients returned by [`MlpNet::backward`] are the derivatives of
//! `sum(dy ⊙ y)` over the whole batch, i.e. per-sample contributions are
//! summed, never averaged. Every learner in this crate relies on that
//! convention and folds batch size into its learning rate.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn next_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn slope(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
        }
    }
}

/// Layer widths (input, hidden..., output) plus activation tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        let spec = MlpSpec {
            layer_sizes,
            hidden_activation,
            output_activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Rectifier hidden layers with the given output activation.
    pub fn relu(layer_sizes: Vec<usize>, output_activation: Activation) -> Result<Self> {
        Self::new(layer_sizes, Activation::Relu, output_activation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 3 {
            return Err(Error::InvalidSpec(format!(
                "need at least input, one hidden and output layer, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "layer sizes must be positive, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }

    /// Number of weight layers (one less than the number of layer sizes).
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.depth() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// Σ over layers of `fan_in * fan_out + fan_out`.
pub fn param_count(spec: &MlpSpec) -> usize {
    spec.layer_sizes
        .windows(2)
        .map(|w| w[0] * w[1] + w[1])
        .sum()
}

/// A dense network. Weight matrices are `(fan_out, fan_in)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpNet {
    spec: MlpSpec,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    /// Identifies the current parameter values; refreshed on every mutation.
    #[serde(skip, default = "next_stamp")]
    stamp: u64,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    /// `activations[0]` is the input; `activations[l + 1]` is the output of layer `l`.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("non-empty cache")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.activations[0]
    }

    pub fn batch_size(&self) -> usize {
        self.activations[0].ncols()
    }
}

/// Parameter-shaped gradient (or moment) buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Gradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()))
    }

    pub fn is_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|&x| x == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|&x| x == 0.0))
    }

    /// Same ordering as [`MlpNet::params_flat`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    fn matches(&self, net: &MlpNet) -> bool {
        self.weights.len() == net.weights.len()
            && self
                .weights
                .iter()
                .zip(&net.weights)
                .all(|(g, w)| g.dim() == w.dim())
            && self
                .biases
                .iter()
                .zip(&net.biases)
                .all(|(g, b)| g.dim() == b.dim())
    }
}

impl MlpNet {
    /// Uniform ±√(6/(fan_in+fan_out)) weights, zero biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::with_capacity(spec.depth());
        let mut biases = Vec::with_capacity(spec.depth());
        for w in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(rng)));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(MlpNet {
            spec,
            weights,
            biases,
            stamp: next_stamp(),
        })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let weights = spec
            .layer_sizes
            .windows(2)
            .map(|w| Array2::zeros((w[1], w[0])))
            .collect();
        let biases = spec.layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(MlpNet {
            spec,
            weights,
            biases,
            stamp: next_stamp(),
        })
    }

    /// Builds a network from explicit parameters, checking shapes and finiteness.
    pub fn from_parts(
        spec: MlpSpec,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        let net = MlpNet {
            spec,
            weights,
            biases,
            stamp: next_stamp(),
        };
        net.check_consistent()?;
        Ok(net)
    }

    pub(crate) fn check_consistent(&self) -> Result<()> {
        self.spec.validate()?;
        if self.weights.len() != self.spec.depth() || self.biases.len() != self.spec.depth() {
            return Err(Error::InvalidSpec(format!(
                "expected {} layers, found {} weight and {} bias arrays",
                self.spec.depth(),
                self.weights.len(),
                self.biases.len()
            )));
        }
        for (l, w) in self.spec.layer_sizes.windows(2).enumerate() {
            if self.weights[l].dim() != (w[1], w[0]) || self.biases[l].len() != w[1] {
                return Err(Error::InvalidSpec(format!("layer {l} has inconsistent shape")));
            }
        }
        let finite = self.weights.iter().all(|w| w.iter().all(|x| x.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::NonFinite("network parameters".into()));
        }
        Ok(())
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Mutable access to parameters; invalidates outstanding caches.
    pub fn params_mut(&mut self) -> (&mut [Array2<f64>], &mut [Array1<f64>]) {
        self.stamp = next_stamp();
        (&mut self.weights, &mut self.biases)
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.spec)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::shape("set_params_flat", self.param_count(), flat.len()));
        }
        let mut it = flat.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            w.iter_mut().for_each(|x| *x = it.next().expect("length checked"));
            b.iter_mut().for_each(|x| *x = it.next().expect("length checked"));
        }
        self.stamp = next_stamp();
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>, context: &'static str) -> Result<()> {
        if x.nrows() != self.spec.input_dim() {
            return Err(Error::shape(context, self.spec.input_dim(), x.nrows()));
        }
        if x.ncols() == 0 {
            return Err(Error::shape(context, "at least one sample", 0));
        }
        Ok(())
    }

    fn affine(&self, layer: usize, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.weights[layer].dot(x);
        z += &self.biases[layer].view().insert_axis(Axis(1));
        z
    }

    /// Output only; no cache is built.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x, "predict")?;
        let mut a = self.affine(0, &x);
        let act = self.spec.activation(0);
        a.mapv_inplace(|z| act.apply(z));
        for l in 1..self.spec.depth() {
            let mut z = self.affine(l, &a.view());
            let act = self.spec.activation(l);
            z.mapv_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x, "forward")?;
        let depth = self.spec.depth();
        let mut activations = Vec::with_capacity(depth + 1);
        let mut pre_activations = Vec::with_capacity(depth);
        activations.push(x.to_owned());
        for l in 0..depth {
            let z = self.affine(l, &activations[l].view());
            let act = self.spec.activation(l);
            let a = z.mapv(|v| act.apply(v));
            pre_activations.push(z);
            activations.push(a);
        }
        let y = activations[depth].clone();
        Ok((
            y,
            ForwardCache {
                stamp: self.stamp,
                activations,
                pre_activations,
            },
        ))
    }

    fn check_cache(&self, cache: &ForwardCache, dy: &ArrayView2<f64>) -> Result<()> {
        if cache.stamp != self.stamp || cache.pre_activations.len() != self.spec.depth() {
            return Err(Error::StaleCache);
        }
        let expected = (self.spec.output_dim(), cache.batch_size());
        if dy.dim() != expected {
            return Err(Error::shape("backward dy", format!("{expected:?}"), format!("{:?}", dy.dim())));
        }
        Ok(())
    }

    fn backprop(
        &self,
        cache: &ForwardCache,
        dy: ArrayView2<f64>,
        want_params: bool,
    ) -> Result<(Option<Gradients>, Array2<f64>)> {
        self.check_cache(cache, &dy)?;
        let depth = self.spec.depth();
        let mut grads = want_params.then(|| Gradients::zeros_like(self));
        let mut delta = dy.to_owned();
        for l in (0..depth).rev() {
            let act = self.spec.activation(l);
            if act != Activation::Linear {
                Zip::from(&mut delta)
                    .and(&cache.pre_activations[l])
                    .and(&cache.activations[l + 1])
                    .for_each(|d, &z, &a| *d *= act.slope(z, a));
            }
            if let Some(g) = grads.as_mut() {
                g.weights[l] = delta.dot(&cache.activations[l].t());
                g.biases[l] = delta.sum_axis(Axis(1));
            }
            delta = self.weights[l].t().dot(&delta);
        }
        Ok((grads, delta))
    }

    /// Parameter gradients and input gradient of `sum(dy ⊙ y)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dy: ArrayView2<f64>,
    ) -> Result<(Gradients, Array2<f64>)> {
        let (g, dx) = self.backprop(cache, dy, true)?;
        Ok((g.expect("requested"), dx))
    }

    /// Input gradient only (vector-Jacobian product with `dy`).
    pub fn input_grad(&self, cache: &ForwardCache, dy: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.backprop(cache, dy, false)?.1)
    }

    /// θ ← θ + τ·(θ_other − θ). Exact at τ = 0, at τ = 1 and wherever the
    /// two parameters already agree.
    pub fn soft_update_toward(&mut self, other: &MlpNet, tau: f64) -> Result<()> {
        if other.spec != self.spec {
            return Err(Error::InvalidSpec("soft update between different architectures".into()));
        }
        let mix = |a: &mut f64, b: f64| *a = if tau == 1.0 { b } else { *a + tau * (b - *a) };
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            Zip::from(w).and(o).for_each(|a, &b| mix(a, b));
        }
        for (w, o) in self.biases.iter_mut().zip(&other.biases) {
            Zip::from(w).and(o).for_each(|a, &b| mix(a, b));
        }
        self.stamp = next_stamp();
        Ok(())
    }

    /// Squared Euclidean distance between two parameter vectors.
    pub fn param_distance_sq(&self, other: &MlpNet) -> f64 {
        self.params_flat()
            .iter()
            .zip(other.params_flat())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Bitwise parameter equality.
    pub fn same_params(&self, other: &MlpNet) -> bool {
        self.spec == other.spec
            && self
                .params_flat()
                .iter()
                .zip(other.params_flat())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    SkippedNonFinite,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &MlpNet) -> Self {
        AdamState {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step descending `grads`.
pub fn adam_step(
    net: &mut MlpNet,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<AdamOutcome> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    if !grads.matches(net) || !state.m.matches(net) || !state.v.matches(net) {
        return Err(Error::shape("adam_step", "parameter-shaped gradients", "mismatched shapes"));
    }
    if !grads.is_finite() {
        return Ok(AdamOutcome::SkippedNonFinite);
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powf(state.step as f64);
    let c2 = 1.0 - b2.powf(state.step as f64);
    let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for l in 0..net.weights.len() {
        Zip::from(&mut net.weights[l])
            .and(&mut state.m.weights[l])
            .and(&mut state.v.weights[l])
            .and(&grads.weights[l])
            .for_each(|p, m, v, &g| update(p, m, v, g));
        Zip::from(&mut net.biases[l])
            .and(&mut state.m.biases[l])
            .and(&mut state.v.biases[l])
            .and(&grads.biases[l])
            .for_each(|p, m, v, &g| update(p, m, v, g));
    }
    net.stamp = next_stamp();
    Ok(AdamOutcome::Applied)
}

const CHECKPOINT_FORMAT: &str = "costate-mlp";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct NetCheckpoint {
    format: String,
    version: u32,
    net: MlpNet,
}

impl MlpNet {
    /// Versioned JSON text. Floats are written in shortest round-trip form,
    /// so `from_checkpoint_str(to_checkpoint_string(n))` is bit-exact.
    pub fn to_checkpoint_string(&self) -> Result<String> {
        Ok(serde_json::to_string(&NetCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            net: self.clone(),
        })?)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: NetCheckpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.net.check_consistent()?;
        Ok(ck.net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}
