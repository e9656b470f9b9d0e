//! Experiment plumbing: CSV ingestion, the hidden-driver synthetic dataset,
//! and the (pred_len x seed x mode) training grid with its results document.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_mask, make_impute_windows, make_windows, BinaryMask, EmbeddingSequence, ImputeWindow, MultimodalDataset,
    SplitKind, TimeSeries, WindowSample,
};
use crate::error::{Error, Result};
use crate::metrics::{promotion, Accumulator, EvalReport};
use crate::models::BackboneConfig;
use crate::rng::{seeded, Stream};
use crate::tats::{
    mean_fill, train_forecast, train_impute, AugmentedForecaster, AugmentedImputer, TatsConfig, TrainConfig,
};

pub const RESULTS_SCHEMA: &str = "tats-results/1";

const TIME_COLUMNS: [&str; 4] = ["t", "time", "date", "timestamp"];

/// Parsed CSV: numeric columns become the series, the optional text column
/// is returned verbatim.
#[derive(Clone, Debug)]
pub struct CsvData {
    pub series: TimeSeries,
    pub columns: Vec<String>,
    pub texts: Option<Vec<String>>,
}

/// Reads a headed CSV. A leading column named `t`, `time`, `date` or
/// `timestamp` is treated as the time index (kept as timestamps when
/// numeric); the named text column is split off; every other column must be
/// numeric.
pub fn load_csv(path: impl AsRef<Path>, text_column: Option<&str>) -> Result<CsvData> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let time_col = headers
        .iter()
        .position(|h| TIME_COLUMNS.contains(&h.to_ascii_lowercase().as_str()));
    let text_col = match text_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))?,
        ),
        None => None,
    };
    let value_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| Some(c) != time_col && Some(c) != text_col)
        .collect();
    if value_cols.is_empty() {
        return Err(Error::InvalidSeries("no numeric value columns".into()));
    }

    let mut values = Vec::new();
    let mut times = Vec::new();
    let mut texts = Vec::new();
    let mut rows = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for &c in &value_cols {
            let cell = record.get(c).unwrap_or("");
            let parsed = cell.parse::<f64>().ok().filter(|v| v.is_finite());
            values.push(parsed.ok_or_else(|| Error::Parse {
                row: row + 1,
                col: c + 1,
                message: format!("`{cell}` is not a finite number in column `{}`", headers[c]),
            })?);
        }
        if let Some(c) = time_col {
            times.push(record.get(c).and_then(|v| v.parse::<f64>().ok()));
        }
        if let Some(c) = text_col {
            texts.push(record.get(c).unwrap_or("").to_string());
        }
        rows += 1;
    }
    let matrix = Array2::from_shape_vec((rows, value_cols.len()), values).expect("row-major fill");
    let mut series = TimeSeries::new(matrix)?;
    if time_col.is_some() {
        if let Some(ts) = times.into_iter().collect::<Option<Vec<f64>>>() {
            if ts.windows(2).all(|w| w[0] < w[1]) {
                series = series.with_timestamps(ts)?;
            }
        }
    }
    Ok(CsvData {
        series,
        columns: value_cols.iter().map(|&c| headers[c].clone()).collect(),
        texts: text_col.map(|_| texts),
    })
}

/// Period of the latent driver.
pub const DRIVER_PERIOD: f64 = 12.0;
/// Steps by which the driver leads the series.
pub const DRIVER_LEAD: usize = 12;
const DRIFT_PHI: f64 = 0.95;
const DRIFT_STD: f64 = 0.5;
const SERIES_AR: f64 = 0.5;
const SERIES_NOISE: f64 = 0.1;
pub const DRIVER_EMBED_DIM: usize = 16;
const EMBED_NOISE: f64 = 0.05;

/// Generated dataset plus the latent driver it was built from.
#[derive(Clone, Debug)]
pub struct HiddenDriver {
    pub dataset: MultimodalDataset,
    pub latent: Vec<f64>,
}

/// Latent `h_t = cos(2 pi t / 12) + r_t` with `r` a slow AR(1) drift; series
/// `x_t = 0.5 x_{t-1} + h_{t-12} + noise`; embeddings are a fixed random
/// linear map of `[h_t, h_{t-1}]` plus noise. The text therefore sees the
/// driver a full period before it reaches the series.
pub fn hidden_driver(t: usize, seed: u64) -> Result<HiddenDriver> {
    if t < 200 {
        return Err(Error::TooShort { needed: 200, got: t });
    }
    let mut rng = seeded(seed, Stream::Synthetic);
    let mut noise = seeded(seed, Stream::Noise);
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    let burn = DRIVER_LEAD + 1;
    let total = t + burn;
    let innovation = DRIFT_STD * (1.0 - DRIFT_PHI * DRIFT_PHI).sqrt();
    let mut drift = 0.0;
    let h: Vec<f64> = (0..total)
        .map(|i| {
            if i > 0 {
                drift = DRIFT_PHI * drift + innovation * std_normal.sample(&mut rng);
            }
            (2.0 * std::f64::consts::PI * i as f64 / DRIVER_PERIOD).cos() + drift
        })
        .collect();
    let mut x = vec![0.0; total];
    for i in 1..total {
        let driver = if i >= DRIVER_LEAD { h[i - DRIVER_LEAD] } else { 0.0 };
        x[i] = SERIES_AR * x[i - 1] + driver + SERIES_NOISE * std_normal.sample(&mut noise);
    }
    let map = Array2::from_shape_simple_fn((DRIVER_EMBED_DIM, 2), || std_normal.sample(&mut rng));
    let emb = Array2::from_shape_fn((t, DRIVER_EMBED_DIM), |(row, k)| {
        let i = row + burn;
        map[[k, 0]] * h[i] + map[[k, 1]] * h[i - 1]
    }) + Array2::from_shape_simple_fn((t, DRIVER_EMBED_DIM), || EMBED_NOISE * std_normal.sample(&mut noise));
    let series = TimeSeries::univariate(&x[burn..])?;
    let dataset = MultimodalDataset::with_default_split(series, EmbeddingSequence::new(emb)?)?;
    Ok(HiddenDriver {
        dataset,
        latent: h[burn..].to_vec(),
    })
}

pub fn make_synthetic_hidden_driver(t: usize, seed: u64) -> Result<MultimodalDataset> {
    hidden_driver(t, seed).map(|d| d.dataset)
}

/// Embedding rows permuted across timestamps.
pub fn shuffle_embeddings(ds: &MultimodalDataset, seed: u64) -> Result<MultimodalDataset> {
    let e = ds.embeddings().vectors();
    let mut order: Vec<usize> = (0..e.nrows()).collect();
    order.shuffle(&mut seeded(seed, Stream::Shuffle));
    ds.with_embeddings(EmbeddingSequence::new(e.select(Axis(0), &order))?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Forecast,
    Impute,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Projected text channels appended to the series.
    Tats,
    /// The same pipeline with no text channels.
    NumericalOnly,
    /// Text channels from embeddings shuffled across timestamps.
    TextShuffle,
    /// The first series variable replaced by the first embedding dimension;
    /// no text channels, no instance normalization.
    TextOnly1d,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Tats, Mode::NumericalOnly, Mode::TextShuffle, Mode::TextOnly1d];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Tats => "tats",
            Mode::NumericalOnly => "numerical_only",
            Mode::TextShuffle => "text_shuffle",
            Mode::TextOnly1d => "text_only_1d",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown mode {name:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub backbone: BackboneConfig,
    pub seq_len: usize,
    /// Ignored for imputation.
    pub pred_lens: Vec<usize>,
    pub tats: TatsConfig,
    pub lr: f64,
    pub lr2: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub modes: Vec<Mode>,
    /// Fraction of cells hidden for imputation.
    pub missing_ratio: f64,
    /// Parallel cells; 0 lets the thread pool decide.
    #[serde(skip)]
    pub jobs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: Task::Forecast,
            backbone: BackboneConfig::mlp(),
            seq_len: 24,
            pred_lens: vec![6, 8, 10, 12],
            tats: TatsConfig::default(),
            lr: 1e-4,
            lr2: 0.01,
            batch: 32,
            epochs: 50,
            patience: 20,
            seeds: vec![1],
            modes: vec![Mode::Tats, Mode::NumericalOnly],
            missing_ratio: 0.25,
            jobs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub base: usize,
    pub projector: usize,
    pub total: usize,
    /// Projector share of all parameters, in percent.
    pub overhead_percent: f64,
}

impl ParamCounts {
    fn new(base: usize, projector: usize) -> Self {
        let total = base + projector;
        Self {
            base,
            projector,
            total,
            overhead_percent: if total == 0 {
                0.0
            } else {
                100.0 * projector as f64 / total as f64
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: String,
    pub pred_len: Option<usize>,
    pub seed: u64,
    pub mode: Mode,
    pub metrics: EvalReport,
    /// Mean-fill reference on the same masked cells (imputation only).
    pub mean_fill: Option<EvalReport>,
    pub params: ParamCounts,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Mean wall-clock seconds per epoch.
    pub seconds_per_epoch: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mode: Mode,
    /// `None` averages over every horizon.
    pub pred_len: Option<usize>,
    pub mse: f64,
    pub mae: f64,
    pub cells: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Promotion {
    pub mode: Mode,
    pub pred_len: Option<usize>,
    pub mse_percent: f64,
    pub mae_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub schema: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<Aggregate>,
    /// Relative to `numerical_only`, when it is part of the grid.
    pub promotions: Vec<Promotion>,
}

impl ResultsDocument {
    /// Copy with wall-clock fields zeroed, for byte-level comparisons.
    pub fn without_timing(&self) -> Self {
        let mut doc = self.clone();
        doc.cells.iter_mut().for_each(|c| c.seconds_per_epoch = 0.0);
        doc
    }

    pub fn aggregate(&self, mode: Mode, pred_len: Option<usize>) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.mode == mode && a.pred_len == pred_len)
    }

    pub fn promotion(&self, mode: Mode, pred_len: Option<usize>) -> Option<&Promotion> {
        self.promotions
            .iter()
            .find(|p| p.mode == mode && p.pred_len == pred_len)
    }
}

fn validate(ds: &MultimodalDataset, cfg: &ExperimentConfig) -> Result<()> {
    if cfg.seeds.is_empty() || cfg.modes.is_empty() {
        return Err(Error::Config("need at least one seed and one mode".into()));
    }
    if cfg.task == Task::Forecast && (cfg.pred_lens.is_empty() || cfg.pred_lens.contains(&0)) {
        return Err(Error::Config("pred_lens must be non-empty and positive".into()));
    }
    if cfg.task == Task::Impute && cfg.modes.contains(&Mode::TextOnly1d) {
        return Err(Error::Config("text_only_1d applies to forecasting only".into()));
    }
    // d_mapped = 0 is allowed: it reduces every mode to the numerical pipeline
    let uses_text = cfg.modes.iter().any(|m| matches!(m, Mode::Tats | Mode::TextShuffle));
    if uses_text && cfg.tats.d_mapped >= ds.embeddings().dim() {
        return Err(Error::Config(format!(
            "d_mapped {} must be below the embedding width {}",
            cfg.tats.d_mapped,
            ds.embeddings().dim()
        )));
    }
    if !(0.0..1.0).contains(&cfg.missing_ratio) {
        return Err(Error::Config(format!(
            "missing ratio {} outside [0, 1)",
            cfg.missing_ratio
        )));
    }
    Ok(())
}

struct CellSpec {
    pred_len: Option<usize>,
    seed: u64,
    mode: Mode,
}

impl CellSpec {
    fn key(&self) -> String {
        match self.pred_len {
            Some(h) => format!("h{h}/seed{}/{}", self.seed, self.mode.name()),
            None => format!("seed{}/{}", self.seed, self.mode.name()),
        }
    }
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        patience: cfg.patience,
        lr: cfg.lr,
        lr2: cfg.lr2,
        batch: cfg.batch,
        seed,
        ..TrainConfig::default()
    }
}

/// Dataset and text settings the given mode trains on.
fn mode_inputs(
    ds: &MultimodalDataset,
    cfg: &ExperimentConfig,
    mode: Mode,
    seed: u64,
) -> Result<(MultimodalDataset, TatsConfig)> {
    let without_text = TatsConfig {
        d_mapped: 0,
        ..cfg.tats.clone()
    };
    Ok(match mode {
        Mode::Tats => (ds.clone(), cfg.tats.clone()),
        Mode::NumericalOnly => (ds.clone(), without_text),
        Mode::TextShuffle => (shuffle_embeddings(ds, seed)?, cfg.tats.clone()),
        Mode::TextOnly1d => (
            ds.clone(),
            TatsConfig {
                use_norm: false,
                ..without_text
            },
        ),
    })
}

fn history_fields(h: &crate::tats::TrainHistory) -> (usize, Option<usize>, Vec<f64>, Vec<f64>, f64) {
    (
        h.epochs.len(),
        h.best_epoch,
        h.epochs.iter().map(|e| e.train_loss).collect(),
        h.epochs.iter().map(|e| e.val_loss).collect(),
        h.mean_epoch_seconds(),
    )
}

/// Replaces the first input variable with the first embedding dimension.
fn text_only_windows(mut windows: Vec<WindowSample>) -> Vec<WindowSample> {
    for w in &mut windows {
        let first = w.input_embeddings.column(0).to_owned();
        w.input_series.column_mut(0).assign(&first);
    }
    windows
}

fn run_forecast_cell(ds: &MultimodalDataset, cfg: &ExperimentConfig, spec: &CellSpec) -> Result<CellResult> {
    let pred_len = spec.pred_len.expect("forecast cells carry a horizon");
    let (data, tats) = mode_inputs(ds, cfg, spec.mode, spec.seed)?;
    let split = |kind| make_windows(&data, cfg.seq_len, pred_len, kind);
    let (mut train, mut val, mut test) = (
        split(SplitKind::Train)?,
        split(SplitKind::Val)?,
        split(SplitKind::Test)?,
    );
    if spec.mode == Mode::TextOnly1d {
        train = text_only_windows(train);
        val = text_only_windows(val);
        test = text_only_windows(test);
    }
    let mut model = AugmentedForecaster::new(
        &cfg.backbone,
        cfg.seq_len,
        pred_len,
        data.series().n_vars(),
        data.embeddings().dim(),
        &tats,
        spec.seed,
    )?;
    let history = train_forecast(&mut model, &train, &val, &train_config(cfg, spec.seed))?;
    let mut acc = Accumulator::default();
    for (pred, sample) in model.forecast_all(&test)?.iter().zip(&test) {
        acc.extend(pred.view(), sample.target.view())?;
    }
    let (epochs_run, best_epoch, train_loss, val_loss, seconds_per_epoch) = history_fields(&history);
    Ok(CellResult {
        key: spec.key(),
        pred_len: spec.pred_len,
        seed: spec.seed,
        mode: spec.mode,
        metrics: acc.finish()?,
        mean_fill: None,
        params: ParamCounts::new(model.base_params(), model.projector_params()),
        epochs_run,
        best_epoch,
        train_loss,
        val_loss,
        seconds_per_epoch,
    })
}

/// Drops windows in which some variable has no observed cell.
fn usable(windows: Vec<ImputeWindow>) -> Vec<ImputeWindow> {
    windows
        .into_iter()
        .filter(|w| w.mask.columns().into_iter().all(|c| c.iter().any(|&m| m)))
        .collect()
}

fn run_impute_cell(ds: &MultimodalDataset, cfg: &ExperimentConfig, spec: &CellSpec) -> Result<CellResult> {
    let (data, tats) = mode_inputs(ds, cfg, spec.mode, spec.seed)?;
    let mask = generate_mask(data.series().values().dim(), cfg.missing_ratio, spec.seed)?;
    let split = |kind| make_impute_windows(&data, &mask, cfg.seq_len, kind).map(usable);
    let (train, val, test) = (
        split(SplitKind::Train)?,
        split(SplitKind::Val)?,
        split(SplitKind::Test)?,
    );
    let mut model = AugmentedImputer::new(
        &cfg.backbone,
        cfg.seq_len,
        data.series().n_vars(),
        data.embeddings().dim(),
        &tats,
        spec.seed,
    )?;
    let history = train_impute(&mut model, &train, &val, &train_config(cfg, spec.seed))?;
    let (mut ours, mut reference) = (Accumulator::default(), Accumulator::default());
    for (filled, w) in model.impute_all(&test)?.iter().zip(&test) {
        let oracle = mean_fill(w)?;
        for ((idx, &observed), &truth) in w.mask.indexed_iter().zip(w.values.iter()) {
            if !observed {
                ours.push(filled[idx], truth);
                reference.push(oracle[idx], truth);
            }
        }
    }
    let (epochs_run, best_epoch, train_loss, val_loss, seconds_per_epoch) = history_fields(&history);
    Ok(CellResult {
        key: spec.key(),
        pred_len: None,
        seed: spec.seed,
        mode: spec.mode,
        metrics: ours.finish()?,
        mean_fill: Some(reference.finish()?),
        params: ParamCounts::new(model.base_params(), model.projector_params()),
        epochs_run,
        best_epoch,
        train_loss,
        val_loss,
        seconds_per_epoch,
    })
}

fn aggregate(cells: &[CellResult], cfg: &ExperimentConfig) -> (Vec<Aggregate>, Vec<Promotion>) {
    let mut groups: BTreeMap<(Mode, Option<usize>), Vec<&CellResult>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.mode, None)).or_default().push(c);
        if cfg.task == Task::Forecast {
            groups.entry((c.mode, c.pred_len)).or_default().push(c);
        }
    }
    let aggregates: Vec<Aggregate> = groups
        .iter()
        .map(|(&(mode, pred_len), members)| {
            let n = members.len() as f64;
            Aggregate {
                mode,
                pred_len,
                mse: members.iter().map(|c| c.metrics.mse).sum::<f64>() / n,
                mae: members.iter().map(|c| c.metrics.mae).sum::<f64>() / n,
                cells: members.len(),
            }
        })
        .collect();
    let promotions = aggregates
        .iter()
        .filter(|a| a.mode != Mode::NumericalOnly)
        .filter_map(|a| {
            let base = aggregates
                .iter()
                .find(|b| b.mode == Mode::NumericalOnly && b.pred_len == a.pred_len)?;
            Some(Promotion {
                mode: a.mode,
                pred_len: a.pred_len,
                mse_percent: promotion(base.mse, a.mse),
                mae_percent: promotion(base.mae, a.mae),
            })
        })
        .collect();
    (aggregates, promotions)
}

/// Trains and evaluates every grid cell; cells run in parallel up to
/// `cfg.jobs` and are reported in (pred_len, seed, mode) order.
pub fn run_experiment(ds: &MultimodalDataset, cfg: &ExperimentConfig) -> Result<ResultsDocument> {
    validate(ds, cfg)?;
    let horizons: Vec<Option<usize>> = match cfg.task {
        Task::Forecast => cfg.pred_lens.iter().copied().map(Some).collect(),
        Task::Impute => vec![None],
    };
    let mut specs = Vec::new();
    for &pred_len in &horizons {
        for &seed in &cfg.seeds {
            for &mode in &cfg.modes {
                specs.push(CellSpec { pred_len, seed, mode });
            }
        }
    }
    let run = |spec: &CellSpec| {
        let result = match cfg.task {
            Task::Forecast => run_forecast_cell(ds, cfg, spec),
            Task::Impute => run_impute_cell(ds, cfg, spec),
        };
        result
            .inspect(|cell| {
                log::info!(
                    "{}: mse {:.6} mae {:.6} projector overhead {:.2}%",
                    cell.key,
                    cell.metrics.mse,
                    cell.metrics.mae,
                    cell.params.overhead_percent
                );
            })
            .map_err(|e| Error::Cell {
                context: spec.key(),
                source: Box::new(e),
            })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells = pool.install(|| specs.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    let (aggregates, promotions) = aggregate(&cells, cfg);
    Ok(ResultsDocument {
        schema: RESULTS_SCHEMA.to_string(),
        config: cfg.clone(),
        cells,
        aggregates,
        promotions,
    })
}

/// A whole series with its missing cells filled in.
#[derive(Clone, Debug, Serialize)]
pub struct SeriesImputation {
    #[serde(skip)]
    pub values: Array2<f64>,
    pub missing_cells: usize,
    /// Windows where some variable had no observed cell; those variables are
    /// filled with their observed mean over the full series instead.
    pub fallback_windows: usize,
    pub params: ParamCounts,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
}

/// Trains a TaTS imputer on the train/val segments under `mask` and fills
/// every missing cell of the series. Uses `cfg`'s backbone, text and training
/// settings; modes, seeds and pred_lens are ignored.
pub fn impute_series(
    ds: &MultimodalDataset,
    mask: &BinaryMask,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<SeriesImputation> {
    let (t, n) = ds.series().values().dim();
    if mask.shape() != (t, n) {
        let (mt, mn) = mask.shape();
        return Err(Error::shape(&[t, n], &[mt, mn]));
    }
    if cfg.seq_len == 0 || cfg.seq_len > t {
        return Err(Error::TooShort {
            needed: cfg.seq_len.max(1),
            got: t,
        });
    }
    if cfg.tats.d_mapped >= ds.embeddings().dim() {
        return Err(Error::Config(format!(
            "d_mapped {} must be below the embedding width {}",
            cfg.tats.d_mapped,
            ds.embeddings().dim()
        )));
    }
    let entries = mask.entries();
    let mut means = Vec::with_capacity(n);
    for (variable, (col, observed)) in ds
        .series()
        .values()
        .columns()
        .into_iter()
        .zip(entries.columns())
        .enumerate()
    {
        let seen: Vec<f64> = col.iter().zip(observed).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        if seen.is_empty() {
            return Err(Error::AllMasked { variable });
        }
        means.push(seen.iter().sum::<f64>() / seen.len() as f64);
    }

    let split = |kind| make_impute_windows(ds, mask, cfg.seq_len, kind).map(usable);
    let (train, val) = (split(SplitKind::Train)?, split(SplitKind::Val)?);
    let mut model = AugmentedImputer::new(&cfg.backbone, cfg.seq_len, n, ds.embeddings().dim(), &cfg.tats, seed)?;
    let history = train_impute(&mut model, &train, &val, &train_config(cfg, seed))?;

    // tile the series; the last window is pinned to the end
    let mut starts: Vec<usize> = (0..=t - cfg.seq_len).step_by(cfg.seq_len).collect();
    if starts.last() != Some(&(t - cfg.seq_len)) {
        starts.push(t - cfg.seq_len);
    }
    let mut values = ds.series().values().to_owned();
    let mut fallback_windows = 0;
    for start in starts {
        let rows = start..start + cfg.seq_len;
        let window = ImputeWindow {
            start,
            values: values.slice(s![rows.clone(), ..]).to_owned(),
            mask: entries.slice(s![rows.clone(), ..]).to_owned(),
            embeddings: ds.embeddings().vectors().slice(s![rows.clone(), ..]).to_owned(),
        };
        let filled = match model.impute(&window) {
            Ok(f) => f,
            Err(Error::AllMasked { .. }) => {
                fallback_windows += 1;
                let mut f = window.values.clone();
                for ((r, c), v) in f.indexed_iter_mut() {
                    if !window.mask[[r, c]] {
                        *v = means[c];
                    }
                }
                f
            }
            Err(e) => return Err(e),
        };
        values.slice_mut(s![rows, ..]).assign(&filled);
    }
    Ok(SeriesImputation {
        values,
        missing_cells: entries.iter().filter(|&&m| !m).count(),
        fallback_windows,
        params: ParamCounts::new(model.base_params(), model.projector_params()),
        epochs_run: history.epochs.len(),
        best_epoch: history.best_epoch,
    })
}

/// Residual variance of least-squares AR(`order`) on the series alone,
/// fitted on the first `fit_len` points and evaluated on the rest.
pub fn ar_residual_variance(x: &[f64], order: usize, fit_len: usize) -> Result<f64> {
    if order == 0 || fit_len <= 2 * order + 1 || fit_len >= x.len() {
        return Err(Error::TooShort {
            needed: 2 * order + 2,
            got: fit_len,
        });
    }
    let design = |range: std::ops::Range<usize>| {
        let rows: Vec<usize> = range.collect();
        let a = Array2::from_shape_fn((rows.len(), order + 1), |(r, c)| {
            if c == order {
                1.0
            } else {
                x[rows[r] - 1 - c]
            }
        });
        let y: Array1<f64> = rows.iter().map(|&t| x[t]).collect();
        (a, y)
    };
    let (a, y) = design(order..fit_len);
    let coef = solve_normal_equations(&a, &y)?;
    let (b, z) = design(fit_len..x.len());
    let resid = &z - &b.dot(&coef);
    Ok(resid.mapv(|v| v * v).mean().unwrap_or(0.0))
}

/// Least squares through the normal equations with partial-pivot Gaussian
/// elimination; fine for the handful of columns used here.
fn solve_normal_equations(a: &Array2<f64>, y: &Array1<f64>) -> Result<Array1<f64>> {
    let mut m = a.t().dot(a);
    let mut v = a.t().dot(y);
    let n = m.nrows();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .expect("non-empty");
        if m[[pivot, col]].abs() < 1e-12 {
            return Err(Error::Config("singular least-squares system".into()));
        }
        if pivot != col {
            for k in 0..n {
                m.swap([col, k], [pivot, k]);
            }
            v.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = m[[row, col]] / m[[col, col]];
            for k in col..n {
                m[[row, k]] -= f * m[[col, k]];
            }
            v[row] -= f * v[col];
        }
    }
    let mut out = Array1::zeros(n);
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| m[[row, k]] * out[k]).sum();
        out[row] = (v[row] - tail) / m[[row, row]];
    }
    Ok(out)
}

/// Uniform random embeddings for timestamps without text (testing aid).
pub fn random_embeddings(t: usize, d: usize, seed: u64) -> Result<EmbeddingSequence> {
    let mut rng = seeded(seed, Stream::Synthetic);
    EmbeddingSequence::new(Array2::from_shape_simple_fn((t, d), || rng.random_range(-1.0..1.0)))
}
