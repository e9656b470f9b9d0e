//! Base forecasters and imputers that the text-augmentation wrapper plugs
//! into. All of them work on batches shaped `B x L x C` and know their
//! channel count `C` at construction.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenseLayer, MlpStack, Parameterized};
use crate::rng::{seeded, Stream};

/// How a linear head treats channels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMixing {
    /// One `H x L` map shared by every channel; channels never interact.
    Shared,
    /// One map over the flattened window, so every output channel sees every
    /// input channel.
    #[default]
    Mixing,
}

/// Shape contract of a forecasting model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForecastShape {
    pub seq_len: usize,
    pub pred_len: usize,
    pub channels: usize,
}

pub trait ForecastModel: Parameterized + Send + Sync {
    fn shape(&self) -> ForecastShape;
    fn kind(&self) -> &'static str;
    /// `B x L x C -> B x H x C`; caches what [`ForecastModel::backward`] needs.
    fn forward(&mut self, x: ArrayView3<'_, f64>, train: bool) -> Result<Array3<f64>>;
    /// Inference without touching caches.
    fn predict(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>>;
    /// Accumulates parameter gradients; returns `dLoss/dx`.
    fn backward(&mut self, grad: ArrayView3<'_, f64>) -> Result<Array3<f64>>;
}

pub trait ImputeModel: Parameterized + Send + Sync {
    fn seq_len(&self) -> usize;
    fn channels(&self) -> usize;
    fn kind(&self) -> &'static str;
    /// `(values, mask)` both `B x L x C`, mask as 0/1 -> `B x L x C`.
    fn forward(&mut self, values: ArrayView3<'_, f64>, mask: ArrayView3<'_, f64>, train: bool) -> Result<Array3<f64>>;
    fn predict(&self, values: ArrayView3<'_, f64>, mask: ArrayView3<'_, f64>) -> Result<Array3<f64>>;
    /// Returns the gradient w.r.t. `values` only.
    fn backward(&mut self, grad: ArrayView3<'_, f64>) -> Result<Array3<f64>>;
}

fn check_input(x: &ArrayView3<'_, f64>, rows: usize, channels: usize) -> Result<()> {
    let (b, l, c) = x.dim();
    if l != rows || c != channels {
        return Err(Error::shape(&[b, rows, channels], &[b, l, c]));
    }
    Ok(())
}

/// `B x L x C -> B x (L*C)`.
fn flatten(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (b, l, c) = x.dim();
    x.as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, l * c))
        .expect("contiguous")
}

fn standard(y: Array2<f64>) -> Array2<f64> {
    if y.is_standard_layout() {
        y
    } else {
        y.as_standard_layout().into_owned()
    }
}

fn unflatten(y: Array2<f64>, rows: usize, channels: usize) -> Array3<f64> {
    let b = y.nrows();
    standard(y)
        .into_shape_with_order((b, rows, channels))
        .expect("contiguous")
}

/// `B x L x C -> (B*C) x L`.
fn channel_rows(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (b, l, c) = x.dim();
    x.permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * c, l))
        .expect("contiguous")
}

/// `(B*C) x H -> B x H x C`.
fn from_channel_rows(y: Array2<f64>, channels: usize) -> Array3<f64> {
    let (rows, h) = y.dim();
    standard(y)
        .into_shape_with_order((rows / channels, channels, h))
        .expect("contiguous")
        .permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned()
}

/// A single linear map from an `L x C` window to an `H x C` output.
#[derive(Clone, Debug)]
struct LinearHead {
    mixing: ChannelMixing,
    layer: DenseLayer,
    shape: ForecastShape,
}

impl LinearHead {
    fn new(mixing: ChannelMixing, shape: ForecastShape, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let ForecastShape {
            seq_len: l,
            pred_len: h,
            channels: c,
        } = shape;
        let layer = match mixing {
            ChannelMixing::Shared => DenseLayer::new(l, h, rng),
            ChannelMixing::Mixing => DenseLayer::new(l * c, h * c, rng),
        };
        Self { mixing, layer, shape }
    }

    fn rows(&self, x: ArrayView3<'_, f64>) -> Array2<f64> {
        match self.mixing {
            ChannelMixing::Shared => channel_rows(x),
            ChannelMixing::Mixing => flatten(x),
        }
    }

    fn unrows(&self, y: Array2<f64>, rows: usize) -> Array3<f64> {
        match self.mixing {
            ChannelMixing::Shared => from_channel_rows(y, self.shape.channels),
            ChannelMixing::Mixing => unflatten(y, rows, self.shape.channels),
        }
    }

    fn forward(&mut self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let y = self.layer.forward(self.rows(x).view())?;
        Ok(self.unrows(y, self.shape.pred_len))
    }

    fn predict(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let y = self.layer.infer(self.rows(x).view())?;
        Ok(self.unrows(y, self.shape.pred_len))
    }

    fn backward(&mut self, grad: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let g = self.layer.backward(self.rows(grad).view())?;
        Ok(self.unrows(g, self.shape.seq_len))
    }
}

impl Parameterized for LinearHead {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.layer.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.layer.visit_mut(f)
    }
}

/// Direct linear map from the input window to the horizon.
#[derive(Clone, Debug)]
pub struct LinearForecaster {
    head: LinearHead,
}

impl LinearForecaster {
    pub fn new(shape: ForecastShape, mixing: ChannelMixing, seed: u64) -> Self {
        let mut rng = seeded(seed, Stream::BaseInit);
        Self {
            head: LinearHead::new(mixing, shape, &mut rng),
        }
    }

    /// Channel-shared model with explicit `H x L` weights.
    pub fn from_temporal(weight: Array2<f64>, bias: ndarray::Array1<f64>, channels: usize) -> Result<Self> {
        let shape = ForecastShape {
            seq_len: weight.ncols(),
            pred_len: weight.nrows(),
            channels,
        };
        Ok(Self {
            head: LinearHead {
                mixing: ChannelMixing::Shared,
                layer: DenseLayer::from_parts(weight, bias)?,
                shape,
            },
        })
    }

    pub fn mixing(&self) -> ChannelMixing {
        self.head.mixing
    }
}

impl Parameterized for LinearForecaster {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.head.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.head.visit_mut(f)
    }
}

impl ForecastModel for LinearForecaster {
    fn shape(&self) -> ForecastShape {
        self.head.shape
    }

    fn kind(&self) -> &'static str {
        "linear"
    }

    fn forward(&mut self, x: ArrayView3<'_, f64>, _train: bool) -> Result<Array3<f64>> {
        check_input(&x, self.head.shape.seq_len, self.head.shape.channels)?;
        self.head.forward(x)
    }

    fn predict(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        check_input(&x, self.head.shape.seq_len, self.head.shape.channels)?;
        self.head.predict(x)
    }

    fn backward(&mut self, grad: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        check_input(&grad, self.head.shape.pred_len, self.head.shape.channels)?;
        self.head.backward(grad)
    }
}

pub const DEFAULT_KERNEL: usize = 25;

/// Largest odd kernel not above `min(DEFAULT_KERNEL, seq_len)`.
pub fn default_kernel(seq_len: usize) -> usize {
    let k = DEFAULT_KERNEL.min(seq_len.max(1));
    if k % 2 == 0 {
        k - 1
    } else {
        k
    }
}

fn check_kernel(kernel: usize, seq_len: usize) -> Result<()> {
    if kernel == 0 || kernel % 2 == 0 || kernel > seq_len {
        return Err(Error::BadKernel { kernel, seq_len });
    }
    Ok(())
}

/// `L x L` centered moving-average operator with edge replication.
pub fn moving_average_matrix(seq_len: usize, kernel: usize) -> Result<Array2<f64>> {
    check_kernel(kernel, seq_len)?;
    let half = (kernel / 2) as isize;
    let w = 1.0 / kernel as f64;
    let mut a = Array2::zeros((seq_len, seq_len));
    for t in 0..seq_len as isize {
        for j in -half..=half {
            let src = (t + j).clamp(0, seq_len as isize - 1) as usize;
            a[[t as usize, src]] += w;
        }
    }
    Ok(a)
}

/// Splits each column of `x` into a moving-average trend and the remainder
/// `x - trend`.
pub fn moving_average_decompose(x: ArrayView2<'_, f64>, kernel: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let l = x.nrows();
    check_kernel(kernel, l)?;
    if kernel == 1 {
        return Ok((x.to_owned(), Array2::zeros(x.raw_dim())));
    }
    let half = (kernel / 2) as isize;
    let mut trend = Array2::zeros(x.raw_dim());
    for (c, col) in x.columns().into_iter().enumerate() {
        for t in 0..l as isize {
            let sum: f64 = (-half..=half)
                .map(|j| col[(t + j).clamp(0, l as isize - 1) as usize])
                .sum();
            trend[[t as usize, c]] = sum / kernel as f64;
        }
    }
    let remainder = &x - &trend;
    Ok((trend, remainder))
}

/// Seasonal/trend decomposition followed by two linear heads whose outputs
/// are summed.
#[derive(Clone, Debug)]
pub struct DLinearForecaster {
    kernel: usize,
    average: Array2<f64>,
    trend_head: LinearHead,
    remainder_head: LinearHead,
}

impl DLinearForecaster {
    /// `kernel = None` picks [`default_kernel`].
    pub fn new(shape: ForecastShape, kernel: Option<usize>, mixing: ChannelMixing, seed: u64) -> Result<Self> {
        let kernel = kernel.unwrap_or_else(|| default_kernel(shape.seq_len));
        let average = moving_average_matrix(shape.seq_len, kernel)?;
        let mut rng = seeded(seed, Stream::BaseInit);
        Ok(Self {
            kernel,
            average,
            trend_head: LinearHead::new(mixing, shape, &mut rng),
            remainder_head: LinearHead::new(mixing, shape, &mut rng),
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    /// Applies the moving average along the time axis of every sample.
    fn trend(&self, x: ArrayView3<'_, f64>) -> Array3<f64> {
        let mut out = Array3::zeros(x.raw_dim());
        for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            dst.assign(&self.average.dot(&src));
        }
        out
    }

    fn trend_transpose(&self, g: ArrayView3<'_, f64>) -> Array3<f64> {
        let at = self.average.t();
        let mut out = Array3::zeros(g.raw_dim());
        for (src, mut dst) in g.outer_iter().zip(out.outer_iter_mut()) {
            dst.assign(&at.dot(&src));
        }
        out
    }
}

impl Parameterized for DLinearForecaster {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.trend_head.visit(f);
        self.remainder_head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.trend_head.visit_mut(f);
        self.remainder_head.visit_mut(f);
    }
}

impl ForecastModel for DLinearForecaster {
    fn shape(&self) -> ForecastShape {
        self.trend_head.shape
    }

    fn kind(&self) -> &'static str {
        "dlinear"
    }

    fn forward(&mut self, x: ArrayView3<'_, f64>, _train: bool) -> Result<Array3<f64>> {
        let s = self.shape();
        check_input(&x, s.seq_len, s.channels)?;
        let trend = self.trend(x);
        let remainder = &x - &trend;
        Ok(self.trend_head.forward(trend.view())? + self.remainder_head.forward(remainder.view())?)
    }

    fn predict(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let s = self.shape();
        check_input(&x, s.seq_len, s.channels)?;
        let trend = self.trend(x);
        let remainder = &x - &trend;
        Ok(self.trend_head.predict(trend.view())? + self.remainder_head.predict(remainder.view())?)
    }

    fn backward(&mut self, grad: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let s = self.shape();
        check_input(&grad, s.pred_len, s.channels)?;
        let g_trend = self.trend_head.backward(grad)?;
        let g_rem = self.remainder_head.backward(grad)?;
        // x -> (A x, x - A x)
        let mixed = self.trend_transpose((&g_trend - &g_rem).view());
        Ok(g_rem + mixed)
    }
}

/// Two hidden ReLU layers over the flattened window.
#[derive(Clone, Debug)]
pub struct MlpForecaster {
    stack: MlpStack,
    shape: ForecastShape,
}

impl MlpForecaster {
    pub fn new(shape: ForecastShape, hidden: usize, dropout: f64, seed: u64) -> Self {
        let ForecastShape {
            seq_len: l,
            pred_len: h,
            channels: c,
        } = shape;
        let stack = MlpStack::new(
            &[l * c, hidden, hidden, h * c],
            dropout,
            &mut seeded(seed, Stream::BaseInit),
            seeded(seed, Stream::BaseDropout),
        );
        Self { stack, shape }
    }

    pub fn stack_mut(&mut self) -> &mut MlpStack {
        &mut self.stack
    }
}

impl Parameterized for MlpForecaster {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.stack.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.stack.visit_mut(f)
    }
}

impl ForecastModel for MlpForecaster {
    fn shape(&self) -> ForecastShape {
        self.shape
    }

    fn kind(&self) -> &'static str {
        "mlp"
    }

    fn forward(&mut self, x: ArrayView3<'_, f64>, train: bool) -> Result<Array3<f64>> {
        check_input(&x, self.shape.seq_len, self.shape.channels)?;
        let y = self.stack.forward(flatten(x).view(), train)?;
        Ok(unflatten(y, self.shape.pred_len, self.shape.channels))
    }

    fn predict(&self, x: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        check_input(&x, self.shape.seq_len, self.shape.channels)?;
        let y = self.stack.infer(flatten(x).view())?;
        Ok(unflatten(y, self.shape.pred_len, self.shape.channels))
    }

    fn backward(&mut self, grad: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        check_input(&grad, self.shape.pred_len, self.shape.channels)?;
        let g = self.stack.backward(flatten(grad).view())?;
        Ok(unflatten(g, self.shape.seq_len, self.shape.channels))
    }
}

/// Reconstructs a window from `[values | mask]` flattened side by side.
#[derive(Clone, Debug)]
pub struct MlpImputer {
    stack: MlpStack,
    seq_len: usize,
    channels: usize,
}

impl MlpImputer {
    pub fn new(seq_len: usize, channels: usize, hidden: usize, dropout: f64, seed: u64) -> Self {
        let width = seq_len * channels;
        let stack = MlpStack::new(
            &[2 * width, hidden, hidden, width],
            dropout,
            &mut seeded(seed, Stream::BaseInit),
            seeded(seed, Stream::BaseDropout),
        );
        Self {
            stack,
            seq_len,
            channels,
        }
    }

    fn input(&self, values: ArrayView3<'_, f64>, mask: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        check_input(&values, self.seq_len, self.channels)?;
        if mask.dim() != values.dim() {
            return Err(Error::shape(values.shape(), mask.shape()));
        }
        let v = flatten(values);
        let m = flatten(mask);
        Ok(ndarray::concatenate(Axis(1), &[v.view(), m.view()]).expect("equal rows"))
    }
}

impl Parameterized for MlpImputer {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.stack.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.stack.visit_mut(f)
    }
}

impl ImputeModel for MlpImputer {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn kind(&self) -> &'static str {
        "mlp"
    }

    fn forward(&mut self, values: ArrayView3<'_, f64>, mask: ArrayView3<'_, f64>, train: bool) -> Result<Array3<f64>> {
        let input = self.input(values, mask)?;
        let y = self.stack.forward(input.view(), train)?;
        Ok(unflatten(y, self.seq_len, self.channels))
    }

    fn predict(&self, values: ArrayView3<'_, f64>, mask: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        let input = self.input(values, mask)?;
        let y = self.stack.infer(input.view())?;
        Ok(unflatten(y, self.seq_len, self.channels))
    }

    fn backward(&mut self, grad: ArrayView3<'_, f64>) -> Result<Array3<f64>> {
        check_input(&grad, self.seq_len, self.channels)?;
        let g = self.stack.backward(flatten(grad).view())?;
        let width = self.seq_len * self.channels;
        Ok(unflatten(
            g.slice(s![.., ..width]).to_owned(),
            self.seq_len,
            self.channels,
        ))
    }
}

pub const DEFAULT_MLP_HIDDEN: usize = 256;

/// Serializable choice of backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneConfig {
    Linear {
        #[serde(default)]
        mixing: ChannelMixing,
    },
    Dlinear {
        #[serde(default)]
        kernel: Option<usize>,
        #[serde(default)]
        mixing: ChannelMixing,
    },
    Mlp {
        hidden: usize,
        dropout: f64,
    },
}

impl BackboneConfig {
    pub fn linear() -> Self {
        Self::Linear {
            mixing: ChannelMixing::Mixing,
        }
    }

    pub fn dlinear() -> Self {
        Self::Dlinear {
            kernel: None,
            mixing: ChannelMixing::Mixing,
        }
    }

    pub fn mlp() -> Self {
        Self::Mlp {
            hidden: DEFAULT_MLP_HIDDEN,
            dropout: 0.1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Linear { .. } => "linear",
            Self::Dlinear { .. } => "dlinear",
            Self::Mlp { .. } => "mlp",
        }
    }

    /// Parses `linear`, `dlinear` or `mlp` with default settings.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::linear()),
            "dlinear" => Ok(Self::dlinear()),
            "mlp" => Ok(Self::mlp()),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

pub fn build_forecaster(cfg: &BackboneConfig, shape: ForecastShape, seed: u64) -> Result<Box<dyn ForecastModel>> {
    if shape.seq_len == 0 || shape.pred_len == 0 || shape.channels == 0 {
        return Err(Error::Config(format!("degenerate model shape {shape:?}")));
    }
    Ok(match *cfg {
        BackboneConfig::Linear { mixing } => Box::new(LinearForecaster::new(shape, mixing, seed)),
        BackboneConfig::Dlinear { kernel, mixing } => Box::new(DLinearForecaster::new(shape, kernel, mixing, seed)?),
        BackboneConfig::Mlp { hidden, dropout } => {
            check_dropout(dropout)?;
            Box::new(MlpForecaster::new(shape, hidden, dropout, seed))
        }
    })
}

pub fn build_imputer(cfg: &BackboneConfig, seq_len: usize, channels: usize, seed: u64) -> Result<Box<dyn ImputeModel>> {
    match *cfg {
        BackboneConfig::Mlp { hidden, dropout } => {
            check_dropout(dropout)?;
            Ok(Box::new(MlpImputer::new(seq_len, channels, hidden, dropout, seed)))
        }
        _ => Err(Error::Config(format!("{} cannot impute; use mlp", cfg.name()))),
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::max_param_rel_error;
    use crate::nn::{instance_normalize, mse_loss, Adam, AdamConfig};
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};

    fn random3(dims: (usize, usize, usize), seed: u64) -> Array3<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_simple_fn(dims, || rng.random_range(-1.0..1.0))
    }

    fn shape(l: usize, h: usize, c: usize) -> ForecastShape {
        ForecastShape {
            seq_len: l,
            pred_len: h,
            channels: c,
        }
    }

    #[test]
    fn last_value_repeater() {
        let (l, h) = (5, 3);
        let mut w = Array2::zeros((h, l));
        w.column_mut(l - 1).fill(1.0);
        let model = LinearForecaster::from_temporal(w, Array1::zeros(h), 2).unwrap();
        let x = random3((4, l, 2), 1);
        let y = model.predict(x.view()).unwrap();
        for b in 0..4 {
            for t in 0..h {
                assert_eq!(y.slice(s![b, t, ..]), x.slice(s![b, l - 1, ..]));
            }
        }
    }

    #[test]
    fn zero_weights_give_bias() {
        let model = LinearForecaster::from_temporal(Array2::zeros((2, 4)), array![0.5, -1.0], 3).unwrap();
        let y = model.predict(random3((2, 4, 3), 2).view()).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                assert_eq!(y[[b, 0, c]], 0.5);
                assert_eq!(y[[b, 1, c]], -1.0);
            }
        }

        let mut mlp = MlpForecaster::new(shape(4, 2, 3), 8, 0.0, 1);
        let n = mlp.num_params();
        let mut flat = vec![0.0; n];
        // bias of the output layer is the last H*C entries
        for (i, v) in flat[n - 6..].iter_mut().enumerate() {
            *v = i as f64;
        }
        mlp.load_flat_params(&flat).unwrap();
        let y = mlp.predict(random3((2, 4, 3), 3).view()).unwrap();
        assert_eq!(y.slice(s![1, .., ..]), array![[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]);
    }

    #[test]
    fn shared_linear_ignores_other_channels() {
        let model = LinearForecaster::new(shape(6, 2, 3), ChannelMixing::Shared, 4);
        let x = random3((1, 6, 3), 5);
        let mut x2 = x.clone();
        x2.slice_mut(s![.., .., 1..]).fill(9.0);
        let a = model.predict(x.view()).unwrap();
        let b = model.predict(x2.view()).unwrap();
        assert_eq!(a.slice(s![.., .., 0]), b.slice(s![.., .., 0]));

        let mixing = LinearForecaster::new(shape(6, 2, 3), ChannelMixing::Mixing, 4);
        let a = mixing.predict(x.view()).unwrap();
        let b = mixing.predict(x2.view()).unwrap();
        assert_ne!(a.slice(s![.., .., 0]), b.slice(s![.., .., 0]));
    }

    fn check_forecaster_grads(model: &mut dyn ForecastModel, seed: u64) {
        let s = model.shape();
        let x = random3((3, s.seq_len, s.channels), seed);
        let target = random3((3, s.pred_len, s.channels), seed + 1);
        model.zero_grad();
        let y = model.forward(x.view(), true).unwrap();
        let (_, g) = mse_loss(y.view(), target.view()).unwrap();
        let gx = model.backward(g.view()).unwrap();

        struct Dyn<'a>(&'a mut dyn ForecastModel);
        impl Parameterized for Dyn<'_> {
            fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
                self.0.visit(f)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
                self.0.visit_mut(f)
            }
        }
        let mut wrapped = Dyn(model);
        let err = max_param_rel_error(&mut wrapped, 1e-5, |m| {
            mse_loss(m.0.predict(x.view()).unwrap().view(), target.view())
                .unwrap()
                .0
        });
        assert!(err < 1e-5, "{} param rel err {err}", wrapped.0.kind());

        let h = 1e-5;
        for idx in [(0, 0, 0), (1, s.seq_len - 1, s.channels - 1), (2, s.seq_len / 2, 0)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let up = mse_loss(wrapped.0.predict(xp.view()).unwrap().view(), target.view())
                .unwrap()
                .0;
            xp[idx] -= 2.0 * h;
            let down = mse_loss(wrapped.0.predict(xp.view()).unwrap().view(), target.view())
                .unwrap()
                .0;
            let numeric = (up - down) / (2.0 * h);
            let rel = crate::nn::gradcheck::rel_error(gx[idx], numeric);
            assert!(rel < 1e-5, "{} input rel err {rel}", wrapped.0.kind());
        }
    }

    #[test]
    fn forecaster_gradients() {
        for seed in 0..3 {
            for mixing in [ChannelMixing::Shared, ChannelMixing::Mixing] {
                check_forecaster_grads(&mut LinearForecaster::new(shape(7, 3, 2), mixing, seed), seed);
                check_forecaster_grads(
                    &mut DLinearForecaster::new(shape(9, 4, 3), Some(5), mixing, seed).unwrap(),
                    seed,
                );
            }
            check_forecaster_grads(&mut MlpForecaster::new(shape(6, 2, 2), 10, 0.0, seed), seed);
        }
    }

    #[test]
    fn imputer_gradients() {
        for seed in 0..3 {
            let mut model = MlpImputer::new(5, 2, 8, 0.0, seed);
            let v = random3((3, 5, 2), seed);
            let m = random3((3, 5, 2), seed + 7).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
            let target = random3((3, 5, 2), seed + 9);
            model.zero_grad();
            let y = model.forward(v.view(), m.view(), true).unwrap();
            let (_, g) = mse_loss(y.view(), target.view()).unwrap();
            let gv = model.backward(g.view()).unwrap();
            let err = max_param_rel_error(&mut model, 1e-5, |mm| {
                mse_loss(mm.predict(v.view(), m.view()).unwrap().view(), target.view())
                    .unwrap()
                    .0
            });
            assert!(err < 1e-5, "rel err {err}");
            let h = 1e-5;
            let mut vp = v.clone();
            vp[[1, 2, 1]] += h;
            let up = mse_loss(model.predict(vp.view(), m.view()).unwrap().view(), target.view())
                .unwrap()
                .0;
            vp[[1, 2, 1]] -= 2.0 * h;
            let down = mse_loss(model.predict(vp.view(), m.view()).unwrap().view(), target.view())
                .unwrap()
                .0;
            let numeric = (up - down) / (2.0 * h);
            assert!(crate::nn::gradcheck::rel_error(gv[[1, 2, 1]], numeric) < 1e-5);
        }
    }

    #[test]
    fn decomposition_examples() {
        let x = Array2::from_shape_fn((12, 2), |(t, c)| (t * (c + 1)) as f64 * 0.7 + 1.0);
        let (trend, rem) = moving_average_decompose(x.view(), 1).unwrap();
        assert_eq!(trend, x);
        assert!(rem.iter().all(|&v| v == 0.0));

        let flat = Array2::from_elem((10, 1), 3.25);
        for k in [1, 3, 5, 9] {
            let (trend, rem) = moving_average_decompose(flat.view(), k).unwrap();
            assert!(trend.iter().all(|&v| (v - 3.25).abs() < 1e-15));
            assert!(rem.iter().all(|&v| v.abs() < 1e-15));
        }

        assert!(matches!(
            moving_average_decompose(x.view(), 4),
            Err(Error::BadKernel { .. })
        ));
        assert!(matches!(
            moving_average_decompose(x.view(), 13),
            Err(Error::BadKernel { .. })
        ));
        assert!(matches!(
            moving_average_decompose(x.view(), 0),
            Err(Error::BadKernel { .. })
        ));
    }

    #[test]
    fn decomposition_separates_cosine() {
        let l = 48;
        let x = Array2::from_shape_fn((l, 1), |(t, _)| {
            t as f64 + (2.0 * std::f64::consts::PI * t as f64 / 6.0).cos()
        });
        let (_, rem) = moving_average_decompose(x.view(), 7).unwrap();
        for t in 3..l - 3 {
            let cosine = (2.0 * std::f64::consts::PI * t as f64 / 6.0).cos();
            assert!((rem[[t, 0]] - cosine).abs() < 0.15, "t={t}");
        }
    }

    #[test]
    fn decomposition_reconstructs_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = Array2::from_shape_simple_fn((24, 3), || rng.random_range(-5.0..5.0));
            let (trend, rem) = moving_average_decompose(x.view(), 7).unwrap();
            let back = &trend + &rem;
            for (a, b) in back.iter().zip(x.iter()) {
                assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0));
            }
        }
        // the operator form agrees with the direct average
        let x = Array2::from_shape_fn((10, 2), |(t, c)| ((t * 7 + c * 3) % 5) as f64);
        let (trend, _) = moving_average_decompose(x.view(), 5).unwrap();
        let via_matrix = moving_average_matrix(10, 5).unwrap().dot(&x);
        for (a, b) in trend.iter().zip(via_matrix.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn default_kernel_clamps() {
        assert_eq!(default_kernel(24), 23);
        assert_eq!(default_kernel(96), 25);
        assert_eq!(default_kernel(25), 25);
        assert_eq!(default_kernel(4), 3);
    }

    #[test]
    fn zero_heads_give_zero_forecast() {
        let mut m = DLinearForecaster::new(shape(8, 3, 2), None, ChannelMixing::Shared, 0).unwrap();
        let n = m.num_params();
        m.load_flat_params(&vec![0.0; n]).unwrap();
        assert!(m
            .predict(random3((2, 8, 2), 0).view())
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    fn train_on_trend(mut model: Box<dyn ForecastModel>, steps: usize) -> f64 {
        // y_t = 2t over random offsets, normalized per window
        let s = model.shape();
        let make = |start: usize| {
            let series: Vec<f64> = (start..start + s.seq_len + s.pred_len)
                .map(|t| 2.0 * t as f64)
                .collect();
            let x = Array2::from_shape_vec((s.seq_len, 1), series[..s.seq_len].to_vec()).unwrap();
            let y = Array2::from_shape_vec((s.pred_len, 1), series[s.seq_len..].to_vec()).unwrap();
            let (xn, st) = instance_normalize(x.view()).unwrap();
            (xn, st.apply(y.view()))
        };
        let batch = |starts: &[usize]| {
            let mut xb = Array3::zeros((starts.len(), s.seq_len, 1));
            let mut yb = Array3::zeros((starts.len(), s.pred_len, 1));
            for (i, &st) in starts.iter().enumerate() {
                let (x, y) = make(st);
                xb.slice_mut(s![i, .., ..]).assign(&x);
                yb.slice_mut(s![i, .., ..]).assign(&y);
            }
            (xb, yb)
        };
        let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
        let (xb, yb) = batch(&[0, 5, 17, 40, 90, 200, 333, 512]);
        for _ in 0..steps {
            model.zero_grad();
            let y = model.forward(xb.view(), true).unwrap();
            let (_, g) = mse_loss(y.view(), yb.view()).unwrap();
            model.backward(g.view()).unwrap();
            adam.step(model.as_mut());
        }
        let (xt, yt) = batch(&[1000, 2500]);
        mse_loss(model.predict(xt.view()).unwrap().view(), yt.view()).unwrap().0
    }

    #[test]
    fn linear_learns_trend() {
        let s = shape(24, 12, 1);
        let mse = train_on_trend(Box::new(LinearForecaster::new(s, ChannelMixing::Shared, 0)), 500);
        assert!(mse < 1e-3, "linear mse {mse}");
        let mse = train_on_trend(
            Box::new(DLinearForecaster::new(s, Some(1), ChannelMixing::Shared, 0).unwrap()),
            500,
        );
        assert!(mse < 1e-3, "dlinear mse {mse}");
    }

    #[test]
    fn shape_law_for_any_channel_count() {
        for c in 1..5 {
            for cfg in [
                BackboneConfig::linear(),
                BackboneConfig::dlinear(),
                BackboneConfig::mlp(),
            ] {
                let m = build_forecaster(&cfg, shape(24, 6, c), 0).unwrap();
                assert_eq!(m.predict(random3((2, 24, c), 1).view()).unwrap().dim(), (2, 6, c));
            }
            let imp = build_imputer(&BackboneConfig::mlp(), 24, c, 0).unwrap();
            let v = random3((2, 24, c), 1);
            assert_eq!(imp.predict(v.view(), v.view()).unwrap().dim(), (2, 24, c));
        }
        assert!(build_imputer(&BackboneConfig::linear(), 24, 1, 0).is_err());
    }

    #[test]
    fn construction_is_deterministic() {
        for cfg in [
            BackboneConfig::linear(),
            BackboneConfig::dlinear(),
            BackboneConfig::mlp(),
        ] {
            let a = build_forecaster(&cfg, shape(24, 6, 2), 9).unwrap().flat_params();
            let b = build_forecaster(&cfg, shape(24, 6, 2), 9).unwrap().flat_params();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn config_round_trips() {
        for cfg in [
            BackboneConfig::linear(),
            BackboneConfig::dlinear(),
            BackboneConfig::mlp(),
        ] {
            let json = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<BackboneConfig>(&json).unwrap(), cfg);
            assert_eq!(BackboneConfig::from_name(cfg.name()).unwrap(), cfg);
        }
    }
}
