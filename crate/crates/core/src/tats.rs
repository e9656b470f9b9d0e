//! Texts as auxiliary series: project per-timestamp embeddings to a few
//! channels, append them to the (normalized) numerical window, run any base
//! model over the widened input and keep the first `N` output channels.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, Array3, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ImputeWindow, WindowSample};
use crate::error::{Error, Result};
use crate::models::{build_forecaster, build_imputer, BackboneConfig, ForecastModel, ForecastShape, ImputeModel};
use crate::nn::{
    instance_normalize, instance_normalize_masked, masked_mse_loss, mse_loss, read_checkpoint, write_checkpoint, Adam,
    AdamConfig, InstanceNormState, MlpStack, Parameterized,
};
use crate::rng::{seeded, Stream};

/// Three-layer MLP applied row-wise to embeddings.
#[derive(Clone, Debug)]
pub struct MlpProjector {
    stack: MlpStack,
}

impl MlpProjector {
    pub fn hidden_width(d_mapped: usize) -> usize {
        (4 * d_mapped).max(32)
    }

    pub fn new(d_text: usize, d_mapped: usize, dropout: f64, seed: u64) -> Result<Self> {
        if d_mapped == 0 || d_mapped >= d_text {
            return Err(Error::Config(format!(
                "projector needs 1 <= d_mapped < d_text, got d_mapped={d_mapped}, d_text={d_text}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let hidden = Self::hidden_width(d_mapped);
        let stack = MlpStack::new(
            &[d_text, hidden, hidden, d_mapped],
            dropout,
            &mut seeded(seed, Stream::ProjectorInit),
            seeded(seed, Stream::ProjectorDropout),
        );
        Ok(Self { stack })
    }

    pub fn from_stack(stack: MlpStack) -> Self {
        Self { stack }
    }

    pub fn d_text(&self) -> usize {
        self.stack.inputs()
    }

    pub fn d_mapped(&self) -> usize {
        self.stack.outputs()
    }

    /// `rows x d_text -> rows x d_mapped`; dropout only when `train`.
    pub fn project(&mut self, e: ArrayView2<'_, f64>, train: bool) -> Result<Array2<f64>> {
        self.stack.forward(e, train)
    }

    pub fn predict(&self, e: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.stack.infer(e)
    }

    pub fn backward(&mut self, grad: ArrayView2<'_, f64>) -> Result<()> {
        self.stack.backward(grad).map(|_| ())
    }
}

impl Parameterized for MlpProjector {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.stack.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.stack.visit_mut(f)
    }
}

/// `[x | z]`, original channels first.
pub fn augment(x: ArrayView2<'_, f64>, z: Option<ArrayView2<'_, f64>>) -> Result<Array2<f64>> {
    match z {
        None => Ok(x.to_owned()),
        Some(z) if z.nrows() != x.nrows() => Err(Error::shape(&[x.nrows(), z.ncols()], &[z.nrows(), z.ncols()])),
        Some(z) => Ok(ndarray::concatenate(Axis(1), &[x, z]).expect("equal rows")),
    }
}

/// Where the training loss is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpace {
    /// Against the target normalized with the input window's statistics.
    #[default]
    Normalized,
    /// Against the raw target after denormalizing the prediction.
    Original,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TatsConfig {
    /// Width of the projected text channels; 0 disables the text path.
    pub d_mapped: usize,
    pub dropout: f64,
    pub use_norm: bool,
}

impl Default for TatsConfig {
    fn default() -> Self {
        Self {
            d_mapped: 12,
            dropout: 0.1,
            use_norm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub lr2: f64,
    pub batch: usize,
    pub seed: u64,
    #[serde(default)]
    pub loss_space: LossSpace,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            patience: 20,
            lr: 1e-4,
            lr2: 0.01,
            batch: 32,
            seed: 1,
            loss_space: LossSpace::Normalized,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored, if any epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

impl TrainHistory {
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
    }
}

/// Mini-batch Adam with early stopping on the validation loss; restores the
/// best parameters at the end.
fn fit<M: Parameterized + ?Sized, S>(
    model: &mut M,
    train: &[S],
    val: &[S],
    cfg: &TrainConfig,
    mut batch_grad: impl FnMut(&mut M, &[&S]) -> Result<f64>,
    mut eval: impl FnMut(&M, &[S]) -> Result<f64>,
    mut step: impl FnMut(&mut M, &mut Adam, &mut Adam),
) -> Result<TrainHistory> {
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut base_opt = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut proj_opt = Adam::new(AdamConfig::with_lr(cfg.lr2));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = seeded(cfg.seed, Stream::BatchOrder);
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_loss: None,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch) {
            let samples: Vec<&S> = chunk.iter().map(|&i| &train[i]).collect();
            model.zero_grad();
            total += batch_grad(model, &samples)?;
            step(model, &mut base_opt, &mut proj_opt);
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val_loss = if val.is_empty() {
            eval(model, train)?
        } else {
            eval(model, val)?
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if !val_loss.is_finite() {
            return Err(Error::Config(format!("training diverged at epoch {epoch}")));
        }
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.flat_params()));
            history.best_epoch = Some(epoch);
            history.best_val_loss = Some(val_loss);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.load_flat_params(&params)?;
    }
    Ok(history)
}

/// Batches evaluated at once during validation and prediction.
const EVAL_BATCH: usize = 256;

/// Base forecaster over `N + d_mapped` channels plus an optional projector.
pub struct AugmentedForecaster {
    projector: Option<MlpProjector>,
    base: Box<dyn ForecastModel>,
    n_vars: usize,
    d_text: usize,
    use_norm: bool,
}

struct ForecastBatch {
    inputs: Array3<f64>,
    targets: Array3<f64>,
    raw_targets: Array3<f64>,
    states: Vec<InstanceNormState>,
    embeddings: Array2<f64>,
}

impl AugmentedForecaster {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        backbone: &BackboneConfig,
        seq_len: usize,
        pred_len: usize,
        n_vars: usize,
        d_text: usize,
        cfg: &TatsConfig,
        seed: u64,
    ) -> Result<Self> {
        let projector = match cfg.d_mapped {
            0 => None,
            d => Some(MlpProjector::new(d_text, d, cfg.dropout, seed)?),
        };
        let shape = ForecastShape {
            seq_len,
            pred_len,
            channels: n_vars + cfg.d_mapped,
        };
        let base = build_forecaster(backbone, shape, seed)?;
        Self::from_parts(projector, base, n_vars, d_text, cfg.use_norm)
    }

    pub fn from_parts(
        projector: Option<MlpProjector>,
        base: Box<dyn ForecastModel>,
        n_vars: usize,
        d_text: usize,
        use_norm: bool,
    ) -> Result<Self> {
        let d_mapped = projector.as_ref().map_or(0, MlpProjector::d_mapped);
        if let Some(p) = &projector {
            if p.d_text() != d_text {
                return Err(Error::shape(&[d_text], &[p.d_text()]));
            }
        }
        if base.shape().channels != n_vars + d_mapped {
            return Err(Error::shape(&[n_vars + d_mapped], &[base.shape().channels]));
        }
        Ok(Self {
            projector,
            base,
            n_vars,
            d_text,
            use_norm,
        })
    }

    pub fn shape(&self) -> ForecastShape {
        self.base.shape()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn d_mapped(&self) -> usize {
        self.projector.as_ref().map_or(0, MlpProjector::d_mapped)
    }

    pub fn base(&self) -> &dyn ForecastModel {
        self.base.as_ref()
    }

    pub fn projector(&self) -> Option<&MlpProjector> {
        self.projector.as_ref()
    }

    pub fn base_params(&self) -> usize {
        self.base.num_params()
    }

    pub fn projector_params(&self) -> usize {
        self.projector.as_ref().map_or(0, |p| p.num_params())
    }

    fn prepare(&self, samples: &[&WindowSample]) -> Result<ForecastBatch> {
        let ForecastShape { seq_len, pred_len, .. } = self.shape();
        let n = self.n_vars;
        let b = samples.len();
        let mut inputs = Array3::zeros((b, seq_len, n));
        let mut targets = Array3::zeros((b, pred_len, n));
        let mut raw_targets = Array3::zeros((b, pred_len, n));
        let mut states = Vec::with_capacity(b);
        let d_text = if self.projector.is_some() { self.d_text } else { 0 };
        let mut embeddings = Array2::zeros((b * seq_len, d_text));
        for (i, sample) in samples.iter().enumerate() {
            if sample.input_series.dim() != (seq_len, n) {
                return Err(Error::shape(&[seq_len, n], sample.input_series.shape()));
            }
            if sample.target.dim() != (pred_len, n) {
                return Err(Error::shape(&[pred_len, n], sample.target.shape()));
            }
            let (xn, state) = if self.use_norm {
                instance_normalize(sample.input_series.view())?
            } else {
                (sample.input_series.clone(), InstanceNormState::identity(n))
            };
            inputs.slice_mut(s![i, .., ..]).assign(&xn);
            targets
                .slice_mut(s![i, .., ..])
                .assign(&state.apply(sample.target.view()));
            raw_targets.slice_mut(s![i, .., ..]).assign(&sample.target);
            if d_text > 0 {
                if sample.input_embeddings.dim() != (seq_len, d_text) {
                    return Err(Error::shape(&[seq_len, d_text], sample.input_embeddings.shape()));
                }
                embeddings
                    .slice_mut(s![i * seq_len..(i + 1) * seq_len, ..])
                    .assign(&sample.input_embeddings);
            }
            states.push(state);
        }
        Ok(ForecastBatch {
            inputs,
            targets,
            raw_targets,
            states,
            embeddings,
        })
    }

    fn widen(&self, inputs: &Array3<f64>, z: Option<Array2<f64>>) -> Array3<f64> {
        match z {
            None => inputs.clone(),
            Some(z) => {
                let (b, l, _) = inputs.dim();
                let z = z
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((b, l, self.d_mapped()))
                    .expect("contiguous");
                ndarray::concatenate(Axis(2), &[inputs.view(), z.view()]).expect("equal leading dims")
            }
        }
    }

    fn denormalize(&self, pred: &mut Array3<f64>, states: &[InstanceNormState]) {
        for (mut p, st) in pred.outer_iter_mut().zip(states) {
            p *= &st.std;
            p += &st.mean;
        }
    }

    /// Normalized-space predictions for a batch, without caching.
    fn predict_normalized(&self, batch: &ForecastBatch) -> Result<Array3<f64>> {
        let z = match &self.projector {
            Some(p) => Some(p.predict(batch.embeddings.view())?),
            None => None,
        };
        let out = self.base.predict(self.widen(&batch.inputs, z).view())?;
        Ok(out.slice(s![.., .., ..self.n_vars]).to_owned())
    }

    /// Loss of one batch in the given space; adds its gradient to the
    /// parameter gradient buffers (call `zero_grad` first for a fresh one).
    pub fn accumulate_gradients(&mut self, samples: &[&WindowSample], space: LossSpace) -> Result<f64> {
        let batch = self.prepare(samples)?;
        let z = match &mut self.projector {
            Some(p) => Some(p.project(batch.embeddings.view(), true)?),
            None => None,
        };
        let widened = self.widen(&batch.inputs, z);
        let out = self.base.forward(widened.view(), true)?;
        let mut pred = out.slice(s![.., .., ..self.n_vars]).to_owned();
        let (loss, grad) = match space {
            LossSpace::Normalized => mse_loss(pred.view(), batch.targets.view())?,
            LossSpace::Original => {
                self.denormalize(&mut pred, &batch.states);
                let (loss, mut grad) = mse_loss(pred.view(), batch.raw_targets.view())?;
                for (mut g, st) in grad.outer_iter_mut().zip(&batch.states) {
                    g *= &st.std;
                }
                (loss, grad)
            }
        };
        let mut full = Array3::zeros(out.raw_dim());
        full.slice_mut(s![.., .., ..self.n_vars]).assign(&grad);
        let grad_in = self.base.backward(full.view())?;
        if let Some(p) = &mut self.projector {
            let (b, l, _) = grad_in.dim();
            let gz = grad_in
                .slice(s![.., .., self.n_vars..])
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((b * l, p.d_mapped()))
                .expect("contiguous");
            p.backward(gz.view())?;
        }
        Ok(loss)
    }

    /// Loss over `samples` without gradients or dropout.
    pub fn loss(&self, samples: &[WindowSample], space: LossSpace) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for chunk in samples.chunks(EVAL_BATCH) {
            let refs: Vec<&WindowSample> = chunk.iter().collect();
            let batch = self.prepare(&refs)?;
            let mut pred = self.predict_normalized(&batch)?;
            let l = match space {
                LossSpace::Normalized => mse_loss(pred.view(), batch.targets.view())?.0,
                LossSpace::Original => {
                    self.denormalize(&mut pred, &batch.states);
                    mse_loss(pred.view(), batch.raw_targets.view())?.0
                }
            };
            total += l * chunk.len() as f64;
            count += chunk.len();
        }
        Ok(if count == 0 { 0.0 } else { total / count as f64 })
    }

    /// `H x N` forecast in the original scale.
    pub fn forecast(&self, sample: &WindowSample) -> Result<Array2<f64>> {
        let mut out = self.forecast_all(std::slice::from_ref(sample))?;
        Ok(out.pop().expect("one sample"))
    }

    pub fn forecast_all(&self, samples: &[WindowSample]) -> Result<Vec<Array2<f64>>> {
        let mut result = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(EVAL_BATCH) {
            let refs: Vec<&WindowSample> = chunk.iter().collect();
            let batch = self.prepare(&refs)?;
            let mut pred = self.predict_normalized(&batch)?;
            self.denormalize(&mut pred, &batch.states);
            result.extend(pred.outer_iter().map(|p| p.to_owned()));
        }
        Ok(result)
    }

    fn step(&mut self, base_opt: &mut Adam, proj_opt: &mut Adam) {
        base_opt.step(self.base.as_mut());
        if let Some(p) = &mut self.projector {
            proj_opt.step(p);
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let header = serde_json::json!({
            "format": "tats-forecaster/1",
            "base_kind": self.base.kind(),
            "shape": self.shape(),
            "n_vars": self.n_vars,
            "d_text": self.d_text,
            "d_mapped": self.d_mapped(),
            "use_norm": self.use_norm,
            "base_params": self.base_params(),
            "projector_params": self.projector_params(),
            "meta": meta,
        });
        write_checkpoint(path, &header, &self.flat_params())
    }

    /// Rebuilds a model saved with [`AugmentedForecaster::save`]; `meta` must
    /// carry `backbone` and `tats` configs.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let (header, params) = read_checkpoint(path)?;
        let field = |name: &str| {
            header
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing header field {name}")))
        };
        let shape: ForecastShape = serde_json::from_value(field("shape")?)?;
        let n_vars: usize = serde_json::from_value(field("n_vars")?)?;
        let d_text: usize = serde_json::from_value(field("d_text")?)?;
        let meta = field("meta")?;
        let backbone: BackboneConfig = serde_json::from_value(
            meta.get("backbone")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing meta.backbone".into()))?,
        )?;
        let tats: TatsConfig = serde_json::from_value(
            meta.get("tats")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing meta.tats".into()))?,
        )?;
        let mut model = Self::new(&backbone, shape.seq_len, shape.pred_len, n_vars, d_text, &tats, 0)?;
        model
            .load_flat_params(&params)
            .map_err(|_| Error::Checkpoint("parameter count does not match the header".into()))?;
        Ok((model, meta))
    }
}

impl Parameterized for AugmentedForecaster {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.base.visit(f);
        if let Some(p) = &self.projector {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.base.visit_mut(f);
        if let Some(p) = &mut self.projector {
            p.visit_mut(f);
        }
    }
}

/// Trains base and projector jointly, with `lr` for the base and `lr2` for
/// the projector.
pub fn train_forecast(
    model: &mut AugmentedForecaster,
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    let space = cfg.loss_space;
    fit(
        model,
        train,
        val,
        cfg,
        |m, batch| m.accumulate_gradients(batch, space),
        |m, samples| m.loss(samples, space),
        |m, a, b| m.step(a, b),
    )
}

/// Base imputer over `N + d_mapped` channels plus an optional projector.
pub struct AugmentedImputer {
    projector: Option<MlpProjector>,
    base: Box<dyn ImputeModel>,
    n_vars: usize,
    d_text: usize,
}

struct ImputeBatch {
    inputs: Array3<f64>,
    mask: Array3<f64>,
    targets: Array3<f64>,
    missing: Array3<bool>,
    states: Vec<InstanceNormState>,
    embeddings: Array2<f64>,
}

impl AugmentedImputer {
    pub fn new(
        backbone: &BackboneConfig,
        seq_len: usize,
        n_vars: usize,
        d_text: usize,
        cfg: &TatsConfig,
        seed: u64,
    ) -> Result<Self> {
        let projector = match cfg.d_mapped {
            0 => None,
            d => Some(MlpProjector::new(d_text, d, cfg.dropout, seed)?),
        };
        let base = build_imputer(backbone, seq_len, n_vars + cfg.d_mapped, seed)?;
        Ok(Self {
            projector,
            base,
            n_vars,
            d_text,
        })
    }

    pub fn d_mapped(&self) -> usize {
        self.projector.as_ref().map_or(0, MlpProjector::d_mapped)
    }

    pub fn base_params(&self) -> usize {
        self.base.num_params()
    }

    pub fn projector_params(&self) -> usize {
        self.projector.as_ref().map_or(0, |p| p.num_params())
    }

    fn prepare(&self, windows: &[&ImputeWindow]) -> Result<ImputeBatch> {
        let l = self.base.seq_len();
        let n = self.n_vars;
        let c = n + self.d_mapped();
        let b = windows.len();
        let mut inputs = Array3::zeros((b, l, n));
        let mut mask = Array3::ones((b, l, c));
        let mut targets = Array3::zeros((b, l, n));
        let mut missing = Array3::from_elem((b, l, n), false);
        let mut states = Vec::with_capacity(b);
        let d_text = if self.projector.is_some() { self.d_text } else { 0 };
        let mut embeddings = Array2::zeros((b * l, d_text));
        for (i, w) in windows.iter().enumerate() {
            if w.values.dim() != (l, n) {
                return Err(Error::shape(&[l, n], w.values.shape()));
            }
            if w.mask.dim() != (l, n) {
                return Err(Error::shape(&[l, n], w.mask.shape()));
            }
            let (xn, state) = instance_normalize_masked(w.values.view(), w.mask.view())?;
            inputs.slice_mut(s![i, .., ..]).assign(&xn);
            targets.slice_mut(s![i, .., ..]).assign(&state.apply(w.values.view()));
            Zip::from(mask.slice_mut(s![i, .., ..n]))
                .and(missing.slice_mut(s![i, .., ..]))
                .and(&w.mask)
                .for_each(|m, miss, &observed| {
                    *m = if observed { 1.0 } else { 0.0 };
                    *miss = !observed;
                });
            if d_text > 0 {
                if w.embeddings.dim() != (l, d_text) {
                    return Err(Error::shape(&[l, d_text], w.embeddings.shape()));
                }
                embeddings.slice_mut(s![i * l..(i + 1) * l, ..]).assign(&w.embeddings);
            }
            states.push(state);
        }
        Ok(ImputeBatch {
            inputs,
            mask,
            targets,
            missing,
            states,
            embeddings,
        })
    }

    fn widen(&self, inputs: &Array3<f64>, z: Option<Array2<f64>>) -> Array3<f64> {
        match z {
            None => inputs.clone(),
            Some(z) => {
                let (b, l, _) = inputs.dim();
                let z = z
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((b, l, self.d_mapped()))
                    .expect("contiguous");
                ndarray::concatenate(Axis(2), &[inputs.view(), z.view()]).expect("equal leading dims")
            }
        }
    }

    fn predict_normalized(&self, batch: &ImputeBatch) -> Result<Array3<f64>> {
        let z = match &self.projector {
            Some(p) => Some(p.predict(batch.embeddings.view())?),
            None => None,
        };
        let out = self
            .base
            .predict(self.widen(&batch.inputs, z).view(), batch.mask.view())?;
        Ok(out.slice(s![.., .., ..self.n_vars]).to_owned())
    }

    /// Masked-cell loss of one batch; adds its gradient to the buffers.
    pub fn accumulate_gradients(&mut self, windows: &[&ImputeWindow]) -> Result<f64> {
        let batch = self.prepare(windows)?;
        let z = match &mut self.projector {
            Some(p) => Some(p.project(batch.embeddings.view(), true)?),
            None => None,
        };
        let widened = self.widen(&batch.inputs, z);
        let out = self.base.forward(widened.view(), batch.mask.view(), true)?;
        let pred = out.slice(s![.., .., ..self.n_vars]);
        let (loss, grad) = masked_mse_loss(pred, batch.targets.view(), batch.missing.view())?;
        let mut full = Array3::zeros(out.raw_dim());
        full.slice_mut(s![.., .., ..self.n_vars]).assign(&grad);
        let grad_in = self.base.backward(full.view())?;
        if let Some(p) = &mut self.projector {
            let (b, l, _) = grad_in.dim();
            let gz = grad_in
                .slice(s![.., .., self.n_vars..])
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((b * l, p.d_mapped()))
                .expect("contiguous");
            p.backward(gz.view())?;
        }
        Ok(loss)
    }

    /// Normalized masked-cell loss over `windows`, no gradients.
    pub fn loss(&self, windows: &[ImputeWindow]) -> Result<f64> {
        let mut total = 0.0;
        let mut cells = 0usize;
        for chunk in windows.chunks(EVAL_BATCH) {
            let refs: Vec<&ImputeWindow> = chunk.iter().collect();
            let batch = self.prepare(&refs)?;
            let pred = self.predict_normalized(&batch)?;
            let n = batch.missing.iter().filter(|&&m| m).count();
            let (l, _) = masked_mse_loss(pred.view(), batch.targets.view(), batch.missing.view())?;
            total += l * n as f64;
            cells += n;
        }
        Ok(if cells == 0 { 0.0 } else { total / cells as f64 })
    }

    /// `L x N` reconstruction: observed cells are passed through, missing
    /// cells come from the model.
    pub fn impute(&self, window: &ImputeWindow) -> Result<Array2<f64>> {
        let mut out = self.impute_all(std::slice::from_ref(window))?;
        Ok(out.pop().expect("one window"))
    }

    pub fn impute_all(&self, windows: &[ImputeWindow]) -> Result<Vec<Array2<f64>>> {
        let mut result = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(EVAL_BATCH) {
            let refs: Vec<&ImputeWindow> = chunk.iter().collect();
            let batch = self.prepare(&refs)?;
            let pred = self.predict_normalized(&batch)?;
            for ((p, st), w) in pred.outer_iter().zip(&batch.states).zip(chunk) {
                let mut filled = &p * &st.std + &st.mean;
                Zip::from(&mut filled)
                    .and(&w.values)
                    .and(&w.mask)
                    .for_each(|f, &v, &observed| {
                        if observed {
                            *f = v;
                        }
                    });
                result.push(filled);
            }
        }
        Ok(result)
    }

    fn step(&mut self, base_opt: &mut Adam, proj_opt: &mut Adam) {
        base_opt.step(self.base.as_mut());
        if let Some(p) = &mut self.projector {
            proj_opt.step(p);
        }
    }
}

impl Parameterized for AugmentedImputer {
    fn visit(&self, f: &mut dyn FnMut(&[f64], &[f64])) {
        self.base.visit(f);
        if let Some(p) = &self.projector {
            p.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        self.base.visit_mut(f);
        if let Some(p) = &mut self.projector {
            p.visit_mut(f);
        }
    }
}

pub fn train_impute(
    model: &mut AugmentedImputer,
    train: &[ImputeWindow],
    val: &[ImputeWindow],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    fit(
        model,
        train,
        val,
        cfg,
        |m, batch| m.accumulate_gradients(batch),
        |m, windows| m.loss(windows),
        |m, a, b| m.step(a, b),
    )
}

/// Fills each missing cell with the mean of the observed cells of the same
/// variable in the same window.
pub fn mean_fill(window: &ImputeWindow) -> Result<Array2<f64>> {
    let mut out = window.values.clone();
    for (c, (mut col, mask)) in out.columns_mut().into_iter().zip(window.mask.columns()).enumerate() {
        let observed: Vec<f64> = col.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        if observed.is_empty() {
            return Err(Error::AllMasked { variable: c });
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        col.iter_mut()
            .zip(mask)
            .filter(|(_, &m)| !m)
            .for_each(|(v, _)| *v = mean);
    }
    Ok(out)
}
