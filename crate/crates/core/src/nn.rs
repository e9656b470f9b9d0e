//! Small differentiable building blocks with hand-written backward passes:
//! dense layers, ReLU MLP stacks with dropout, MSE losses, Adam, instance
//! normalization and a binary parameter checkpoint.

use std::fs;
use std::path::Path;

use ndarray::{Array, Array1, Array2, ArrayView, ArrayView2, Axis, Dimension, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything with trainable parameters and matching gradient buffers.
///
/// Visit order is fixed per type, which makes it the layout for optimizer
/// state and checkpoints.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p, _| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, g| g.fill(0.0));
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |p, _| out.extend_from_slice(p));
        out
    }

    fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, g| out.extend_from_slice(g));
        out
    }

    fn load_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(Error::shape(&[expected], &[flat.len()]));
        }
        let mut offset = 0;
        self.visit_mut(&mut |p, _| {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        });
        Ok(())
    }
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    weight: Array2<f64>,
    bias: Array1<f64>,
    grad_weight: Array2<f64>,
    grad_bias: Array1<f64>,
    input: Option<Array2<f64>>,
}

impl DenseLayer {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization.
    pub fn new(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((outputs, inputs), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(outputs, || rng.random_range(-bound..bound));
        Self::from_parts(weight, bias).expect("consistent shapes")
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self::from_parts(Array2::zeros((outputs, inputs)), Array1::zeros(outputs)).expect("consistent shapes")
    }

    pub fn from_parts(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::shape(&[weight.nrows()], &[bias.len()]));
        }
        Ok(Self {
            grad_weight: Array2::zeros(weight.raw_dim()),
            grad_bias: Array1::zeros(bias.raw_dim()),
            weight,
            bias,
            input: None,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn weight(&self) -> &Array2<f64> {
        &self.weight
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn grad_weight(&self) -> &Array2<f64> {
        &self.grad_weight
    }

    pub fn grad_bias(&self) -> &Array1<f64> {
        &self.grad_bias
    }

    fn check(&self, cols: usize, rows: usize) -> Result<()> {
        if cols != self.inputs() {
            return Err(Error::shape(&[rows, self.inputs()], &[rows, cols]));
        }
        Ok(())
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check(x.ncols(), x.nrows())?;
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Forward pass; keeps the input for [`DenseLayer::backward`].
    pub fn forward(&mut self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let y = self.infer(x)?;
        self.input = Some(x.to_owned());
        Ok(y)
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// input of the last forward call.
    pub fn backward(&mut self, upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| Error::Config("backward called before forward".into()))?;
        if upstream.dim() != (input.nrows(), self.outputs()) {
            return Err(Error::shape(
                &[input.nrows(), self.outputs()],
                &[upstream.nrows(), upstream.ncols()],
            ));
        }
        self.grad_weight += &upstream.t().dot(input);
        self.grad_bias += &upstream.sum_axis(Axis(0));
        Ok(upstream.dot(&self.weight))
    }
}

impl Parameterized for DenseLayer {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        f(
            self.weight.as_slice().expect("standard layout"),
            self.grad_weight.as_slice().expect("standard layout"),
        );
        f(
            self.bias.as_slice().expect("standard layout"),
            self.grad_bias.as_slice().expect("standard layout"),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(
            self.weight.as_slice_mut().expect("standard layout"),
            self.grad_weight.as_slice_mut().expect("standard layout"),
        );
        f(
            self.bias.as_slice_mut().expect("standard layout"),
            self.grad_bias.as_slice_mut().expect("standard layout"),
        );
    }
}

/// Dense layers with ReLU and inverted dropout between them (none after the
/// last layer).
#[derive(Clone, Debug)]
pub struct MlpStack {
    layers: Vec<DenseLayer>,
    dropout: f64,
    rng: ChaCha8Rng,
    /// Per hidden boundary: ReLU gate times dropout scale.
    gates: Vec<Array2<f64>>,
}

impl MlpStack {
    /// `widths = [in, h1, ..., out]`; `init` seeds the weights, `dropout_rng`
    /// drives the dropout masks.
    pub fn new(widths: &[usize], dropout: f64, init: &mut ChaCha8Rng, dropout_rng: ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths.windows(2).map(|w| DenseLayer::new(w[0], w[1], init)).collect();
        Self::from_layers(layers, dropout, dropout_rng)
    }

    pub fn from_layers(layers: Vec<DenseLayer>, dropout: f64, dropout_rng: ChaCha8Rng) -> Self {
        assert!((0.0..1.0).contains(&dropout), "dropout must lie in [0, 1)");
        Self {
            layers,
            dropout,
            rng: dropout_rng,
            gates: Vec::new(),
        }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn forward(&mut self, x: ArrayView2<'_, f64>, train: bool) -> Result<Array2<f64>> {
        self.gates.clear();
        let last = self.layers.len() - 1;
        let keep = 1.0 - self.dropout;
        let mut h = self.layers[0].forward(x)?;
        for i in 1..=last {
            let use_dropout = train && self.dropout > 0.0;
            let rng = &mut self.rng;
            let gate = h.mapv(|v| {
                let relu = if v > 0.0 { 1.0 } else { 0.0 };
                if use_dropout {
                    if rng.random::<f64>() < keep {
                        relu / keep
                    } else {
                        0.0
                    }
                } else {
                    relu
                }
            });
            h *= &gate;
            self.gates.push(gate);
            h = self.layers[i].forward(h.view())?;
        }
        Ok(h)
    }

    pub fn infer(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let mut h = self.layers[0].infer(x)?;
        for layer in &self.layers[1..] {
            h.mapv_inplace(|v| v.max(0.0));
            h = layer.infer(h.view())?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, upstream: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let last = self.layers.len() - 1;
        if self.gates.len() != last {
            return Err(Error::Config("backward called before forward".into()));
        }
        let mut g = self.layers[last].backward(upstream)?;
        for i in (0..last).rev() {
            g *= &self.gates[i];
            g = self.layers[i].backward(g.view())?;
        }
        Ok(g)
    }
}

impl Parameterized for MlpStack {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.layers.iter().for_each(|l| l.visit(f));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.layers.iter_mut().for_each(|l| l.visit_mut(f));
    }
}

fn check_same_shape<D: Dimension>(a: &ArrayView<'_, f64, D>, b: &ArrayView<'_, f64, D>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean squared error over all cells and its gradient w.r.t. `pred`.
pub fn mse_loss<D: Dimension>(
    pred: ArrayView<'_, f64, D>,
    target: ArrayView<'_, f64, D>,
) -> Result<(f64, Array<f64, D>)> {
    check_same_shape(&pred, &target)?;
    let n = pred.len().max(1) as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// Mean squared error over the cells where `selected` is true; zero loss and
/// gradient when nothing is selected.
pub fn masked_mse_loss<D: Dimension>(
    pred: ArrayView<'_, f64, D>,
    target: ArrayView<'_, f64, D>,
    selected: ArrayView<'_, bool, D>,
) -> Result<(f64, Array<f64, D>)> {
    check_same_shape(&pred, &target)?;
    if selected.shape() != pred.shape() {
        return Err(Error::shape(pred.shape(), selected.shape()));
    }
    let count = selected.iter().filter(|&&s| s).count();
    let mut grad = Array::zeros(pred.raw_dim());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut loss = 0.0;
    Zip::from(&mut grad)
        .and(&pred)
        .and(&target)
        .and(&selected)
        .for_each(|g, &p, &t, &s| {
            if s {
                loss += (p - t) * (p - t);
                *g = 2.0 * (p - t) / n;
            }
        });
    Ok((loss / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are allocated lazily, one per visited
/// parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter of `model` from its accumulated grads.
    pub fn step<P: Parameterized + ?Sized>(&mut self, model: &mut P) {
        self.step += 1;
        let mut slot = 0;
        model.visit_mut(&mut |p, g| {
            self.update_slot(slot, p, g);
            slot += 1;
        });
    }

    fn update_slot(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) {
        if self.first.len() <= slot {
            self.first.resize_with(slot + 1, Vec::new);
            self.second.resize_with(slot + 1, Vec::new);
        }
        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
        if m.len() != params.len() {
            *m = vec![0.0; params.len()];
            *v = vec![0.0; params.len()];
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Single-tensor Adam update: advances the step counter and updates `params`
/// in place.
pub fn adam_step(state: &mut Adam, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(&[params.len()], &[grads.len()]));
    }
    state.step += 1;
    state.update_slot(0, params, grads);
    Ok(())
}

/// Lower bound on the per-variable scale.
pub const EPS_NORM: f64 = 1e-5;

/// Per-variable statistics captured at normalization time.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNormState {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl InstanceNormState {
    /// Statistics that make normalization the identity.
    pub fn identity(n: usize) -> Self {
        Self {
            mean: Array1::zeros(n),
            std: Array1::ones(n),
        }
    }

    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.std
    }
}

/// Standardizes each column of an `L x N` window with its own mean and
/// population standard deviation (floored at [`EPS_NORM`]).
pub fn instance_normalize(x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, InstanceNormState)> {
    if x.nrows() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: x.nrows(),
        });
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let std = x.var_axis(Axis(0), 0.0).mapv(|v| v.sqrt().max(EPS_NORM));
    let state = InstanceNormState { mean, std };
    Ok((state.apply(x), state))
}

/// Like [`instance_normalize`] but statistics use observed cells only and
/// missing cells are set to zero (the observed mean) in the output.
pub fn instance_normalize_masked(
    x: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, bool>,
) -> Result<(Array2<f64>, InstanceNormState)> {
    if x.dim() != mask.dim() {
        return Err(Error::shape(x.shape(), mask.shape()));
    }
    if x.nrows() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: x.nrows(),
        });
    }
    let n = x.ncols();
    let mut mean = Array1::zeros(n);
    let mut std = Array1::zeros(n);
    for c in 0..n {
        let observed: Vec<f64> = x
            .column(c)
            .iter()
            .zip(mask.column(c))
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .collect();
        if observed.is_empty() {
            return Err(Error::AllMasked { variable: c });
        }
        let mu = observed.iter().sum::<f64>() / observed.len() as f64;
        let var = observed.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / observed.len() as f64;
        mean[c] = mu;
        std[c] = var.sqrt().max(EPS_NORM);
    }
    let state = InstanceNormState { mean, std };
    let mut out = state.apply(x);
    Zip::from(&mut out).and(&mask).for_each(|o, &m| {
        if !m {
            *o = 0.0;
        }
    });
    Ok((out, state))
}

/// Inverse of [`instance_normalize`] for an `H x N` output.
pub fn instance_denormalize(y: ArrayView2<'_, f64>, state: &InstanceNormState) -> Result<Array2<f64>> {
    if y.ncols() != state.mean.len() {
        return Err(Error::shape(&[y.nrows(), state.mean.len()], &[y.nrows(), y.ncols()]));
    }
    Ok(&y * &state.std + &state.mean)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"TATSCK1\n";

/// Writes `magic | u64 header_len | header JSON | u64 count | f64 params`,
/// all little-endian.
pub fn encode_checkpoint(header: &serde_json::Value, params: &[f64]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(8 + 8 + header.len() + 8 + 8 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(serde_json::Value, Vec<f64>)> {
    let bad = |what: &str| Error::Checkpoint(what.to_string());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let read_u64 = |at: usize| -> Result<u64> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| bad("truncated"))
    };
    let header_len = read_u64(8)? as usize;
    let header_end = 16 + header_len;
    let header_bytes = bytes.get(16..header_end).ok_or_else(|| bad("truncated header"))?;
    let header = serde_json::from_slice(header_bytes)?;
    let count = read_u64(header_end)? as usize;
    let payload = bytes
        .get(header_end + 8..header_end + 8 + 8 * count)
        .ok_or_else(|| bad("truncated payload"))?;
    let params = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, params))
}

pub fn write_checkpoint(path: impl AsRef<Path>, header: &serde_json::Value, params: &[f64]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(header, params)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(serde_json::Value, Vec<f64>)> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}


#[cfg(test)]
mod tests {
    use super::gradcheck::*;
    use super::*;
    use crate::rng::{seeded, Stream};
    use ndarray::{array, Array3};
    use rand::SeedableRng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn dense_identity_and_zero() {
        let x = array![[1.0, -2.0], [3.0, 0.5]];
        let id = DenseLayer::from_parts(Array2::eye(2), Array1::zeros(2)).unwrap();
        assert_eq!(id.infer(x.view()).unwrap(), x);
        let zero = DenseLayer::from_parts(Array2::zeros((3, 2)), array![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(zero.infer(x.view()).unwrap(), array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        assert!(matches!(
            zero.infer(array![[1.0]].view()),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        for seed in 0..5 {
            let mut layer = DenseLayer::new(4, 3, &mut seeded(seed, Stream::BaseInit));
            let x = random_matrix(5, 4, seed + 100);
            let target = random_matrix(5, 3, seed + 200);
            let y = layer.forward(x.view()).unwrap();
            let (_, g) = mse_loss(y.view(), target.view()).unwrap();
            layer.zero_grad();
            let gx = layer.backward(g.view()).unwrap();
            let err = max_param_rel_error(&mut layer, 1e-5, |l| {
                mse_loss(l.infer(x.view()).unwrap().view(), target.view()).unwrap().0
            });
            assert!(err < 1e-6, "param rel err {err}");

            // input gradient
            let h = 1e-5;
            for idx in [(0, 0), (2, 3), (4, 1)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let up = mse_loss(layer.infer(xp.view()).unwrap().view(), target.view())
                    .unwrap()
                    .0;
                xp[idx] -= 2.0 * h;
                let down = mse_loss(layer.infer(xp.view()).unwrap().view(), target.view())
                    .unwrap()
                    .0;
                assert!(rel_error(gx[idx], (up - down) / (2.0 * h)) < 1e-6);
            }
        }
    }

    #[test]
    fn mlp_stack_gradients() {
        for seed in 0..5 {
            let mut stack = MlpStack::new(
                &[6, 8, 5, 3],
                0.0,
                &mut seeded(seed, Stream::BaseInit),
                seeded(seed, Stream::BaseDropout),
            );
            let x = random_matrix(7, 6, seed + 1);
            let target = random_matrix(7, 3, seed + 2);
            stack.zero_grad();
            let y = stack.forward(x.view(), true).unwrap();
            let (_, g) = mse_loss(y.view(), target.view()).unwrap();
            stack.backward(g.view()).unwrap();
            let err = max_param_rel_error(&mut stack, 1e-5, |s| {
                mse_loss(s.infer(x.view()).unwrap().view(), target.view()).unwrap().0
            });
            assert!(err < 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn dropout_only_in_training() {
        let mut stack = MlpStack::new(
            &[4, 16, 2],
            0.5,
            &mut seeded(1, Stream::BaseInit),
            seeded(1, Stream::BaseDropout),
        );
        let x = random_matrix(3, 4, 9);
        let eval = stack.forward(x.view(), false).unwrap();
        assert_eq!(eval, stack.infer(x.view()).unwrap());
        let train = stack.forward(x.view(), true).unwrap();
        assert_ne!(train, eval);
    }

    #[test]
    fn mse_examples() {
        let t = array![[1.0, 2.0]];
        let (l, g) = mse_loss(t.view(), t.view()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, _) = mse_loss(array![[0.0, 0.0]].view(), array![[1.0, 1.0]].view()).unwrap();
        assert_eq!(l, 1.0);
        assert!(mse_loss(array![[0.0]].view(), array![[0.0, 1.0]].view()).is_err());

        let pred = Array3::from_shape_fn((2, 3, 2), |(a, b, c)| (a + b * c) as f64 * 0.3);
        let target = Array3::from_shape_fn((2, 3, 2), |(a, b, c)| (a * b + c) as f64 * 0.1);
        let (_, g) = mse_loss(pred.view(), target.view()).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 1), (0, 1, 1)] {
            let mut p = pred.clone();
            p[idx] += h;
            let up = mse_loss(p.view(), target.view()).unwrap().0;
            p[idx] -= 2.0 * h;
            let down = mse_loss(p.view(), target.view()).unwrap().0;
            assert!(rel_error(g[idx], (up - down) / (2.0 * h)) < 1e-6);
        }
    }

    #[test]
    fn masked_mse_selects_cells() {
        let pred = array![[1.0, 5.0], [0.0, 2.0]];
        let target = array![[0.0, 0.0], [0.0, 0.0]];
        let sel = array![[true, false], [false, true]];
        let (l, g) = masked_mse_loss(pred.view(), target.view(), sel.view()).unwrap();
        assert_eq!(l, 2.5);
        assert_eq!(g, array![[1.0, 0.0], [0.0, 2.0]]);
        let none = Array2::from_elem((2, 2), false);
        let (l, g) = masked_mse_loss(pred.view(), target.view(), none.view()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_behaviour() {
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        let mut p = vec![1.0, -2.0];
        adam_step(&mut adam, &mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        // first step with constant gradient moves each parameter by ~lr
        let mut adam = Adam::new(AdamConfig::with_lr(0.01));
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut adam, &mut p, &[3.0, -0.2, 1e-3]).unwrap();
        let expected = [
            1.0 - 0.01 * 3.0 / (3.0 + 1e-8),
            -2.0 + 0.01 * 0.2 / (0.2 + 1e-8),
            0.5 - 0.01 * 1e-3 / (1e-3 + 1e-8),
        ];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }

        let mut frozen = Adam::new(AdamConfig::with_lr(0.0));
        let mut layer = DenseLayer::new(3, 2, &mut seeded(4, Stream::BaseInit));
        let before = layer.flat_params();
        layer.visit_mut(&mut |_, g| g.fill(1.5));
        frozen.step(&mut layer);
        assert_eq!(layer.flat_params(), before);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut layer = DenseLayer::new(3, 2, &mut seeded(4, Stream::BaseInit));
            let mut adam = Adam::new(AdamConfig::default());
            let x = random_matrix(4, 3, 1);
            let t = random_matrix(4, 2, 2);
            let mut trace = Vec::new();
            for _ in 0..20 {
                layer.zero_grad();
                let y = layer.forward(x.view()).unwrap();
                let (l, g) = mse_loss(y.view(), t.view()).unwrap();
                layer.backward(g.view()).unwrap();
                adam.step(&mut layer);
                trace.push(l.to_bits());
            }
            (trace, layer.flat_params())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn instance_norm_examples() {
        let (z, s) = instance_normalize(array![[0.0], [2.0]].view()).unwrap();
        assert_eq!(s.mean, array![1.0]);
        assert_eq!(s.std, array![1.0]);
        assert_eq!(z, array![[-1.0], [1.0]]);

        let (z, s) = instance_normalize(array![[3.0, 1.0], [3.0, 2.0], [3.0, 4.0]].view()).unwrap();
        assert!(z.column(0).iter().all(|&v| v == 0.0));
        assert_eq!(s.std[0], EPS_NORM);
        assert!(instance_normalize(array![[1.0]].view()).is_err());
    }

    #[test]
    fn masked_instance_norm() {
        let x = array![[1.0, 10.0], [100.0, 20.0], [3.0, 30.0]];
        let m = array![[true, false], [false, true], [true, true]];
        let (z, s) = instance_normalize_masked(x.view(), m.view()).unwrap();
        assert_eq!(s.mean, array![2.0, 25.0]);
        assert_eq!(z[[1, 0]], 0.0);
        assert_eq!(z[[0, 1]], 0.0);
        assert_eq!(z[[0, 0]], -1.0);
        let none = array![[false, true], [false, true], [false, true]];
        assert!(matches!(
            instance_normalize_masked(x.view(), none.view()),
            Err(Error::AllMasked { variable: 0 })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let header = serde_json::json!({"kind": "linear", "shape": [2, 3]});
        let params = vec![0.5, -1.25, f64::MIN_POSITIVE, 3.0];
        let bytes = encode_checkpoint(&header, &params).unwrap();
        assert_eq!(encode_checkpoint(&header, &params).unwrap(), bytes);
        let (h, p) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(h, header);
        assert_eq!(p, params);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode_checkpoint(b"garbage!garbage!").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalize_round_trip(values in proptest::collection::vec(-1e3f64..1e3, 6..40)) {
                let x = Array2::from_shape_vec((values.len() / 2, 2), values[..values.len() / 2 * 2].to_vec()).unwrap();
                let (z, s) = instance_normalize(x.view()).unwrap();
                prop_assume!(s.std.iter().all(|&v| v > EPS_NORM));
                let back = instance_denormalize(z.view(), &s).unwrap();
                for (a, b) in back.iter().zip(x.iter()) {
                    prop_assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
                }
            }
        }
    }
}
