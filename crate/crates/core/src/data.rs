//! Aligned multimodal dataset types, chronological splits, masks and
//! stride-1 windowing.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, Stream};

/// A `T x N` matrix of finite observations, optionally with timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeries {
    values: Array2<f64>,
    timestamps: Option<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (t, n) = values.dim();
        if t < 2 {
            return Err(Error::InvalidSeries(format!("need T >= 2, got {t}")));
        }
        if n == 0 {
            return Err(Error::InvalidSeries("need at least one variable".into()));
        }
        if let Some(((row, col), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self {
            values,
            timestamps: None,
        })
    }

    /// Builds a univariate series from a slice.
    pub fn univariate(values: &[f64]) -> Result<Self> {
        Self::new(Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("column shape"))
    }

    pub fn with_timestamps(mut self, timestamps: Vec<f64>) -> Result<Self> {
        if timestamps.len() != self.len() {
            return Err(Error::shape(&[self.len()], &[timestamps.len()]));
        }
        if timestamps.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSeries("timestamps must be strictly increasing".into()));
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn timestamps(&self) -> Option<&[f64]> {
        self.timestamps.as_deref()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// Per-timestamp text embeddings, `T x d_text`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    vectors: Array2<f64>,
}

impl EmbeddingSequence {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.ncols() == 0 {
            return Err(Error::InvalidEmbeddings("d_text must be at least 1".into()));
        }
        if let Some(((row, col), _)) = vectors.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { row, col });
        }
        Ok(Self { vectors })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidEmbeddings("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((rows.len(), d), flat).expect("rectangular rows"))
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn into_vectors(self) -> Array2<f64> {
        self.vectors
    }
}

/// Observation mask: `true` = observed, `false` = missing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    entries: Array2<bool>,
}

impl BinaryMask {
    pub fn new(entries: Array2<bool>) -> Self {
        Self { entries }
    }

    pub fn all_observed(shape: (usize, usize)) -> Self {
        Self {
            entries: Array2::from_elem(shape, true),
        }
    }

    pub fn entries(&self) -> ArrayView2<'_, bool> {
        self.entries.view()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.dim()
    }

    pub fn observed_fraction(&self) -> f64 {
        let n = self.entries.len().max(1);
        self.entries.iter().filter(|&&b| b).count() as f64 / n as f64
    }
}

/// Chronological split boundaries: train = `[0, train_end)`,
/// val = `[train_end, val_end)`, test = `[val_end, T)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_end: usize,
    pub val_end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

/// A series with its paired embeddings and split boundaries.
#[derive(Clone, Debug)]
pub struct MultimodalDataset {
    series: TimeSeries,
    embeddings: EmbeddingSequence,
    split: Split,
}

impl MultimodalDataset {
    pub fn new(series: TimeSeries, embeddings: EmbeddingSequence, split: Split) -> Result<Self> {
        let t = series.len();
        if embeddings.len() != t {
            return Err(Error::shape(
                &[t, embeddings.dim()],
                &[embeddings.len(), embeddings.dim()],
            ));
        }
        if !(0 < split.train_end && split.train_end < split.val_end && split.val_end < t) {
            return Err(Error::Config(format!(
                "split {split:?} must satisfy 0 < train_end < val_end < {t}"
            )));
        }
        Ok(Self {
            series,
            embeddings,
            split,
        })
    }

    /// Builds a dataset with the default 7:1:2 chronological split.
    pub fn with_default_split(series: TimeSeries, embeddings: EmbeddingSequence) -> Result<Self> {
        let (train_end, val_end) = chronological_split(series.len(), DEFAULT_SPLIT)?;
        Self::new(series, embeddings, Split { train_end, val_end })
    }

    pub fn series(&self) -> &TimeSeries {
        &self.series
    }

    pub fn embeddings(&self) -> &EmbeddingSequence {
        &self.embeddings
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn segment(&self, kind: SplitKind) -> std::ops::Range<usize> {
        match kind {
            SplitKind::Train => 0..self.split.train_end,
            SplitKind::Val => self.split.train_end..self.split.val_end,
            SplitKind::Test => self.split.val_end..self.len(),
        }
    }

    /// Same split, different embeddings (used by ablations).
    pub fn with_embeddings(&self, embeddings: EmbeddingSequence) -> Result<Self> {
        Self::new(self.series.clone(), embeddings, self.split)
    }

    pub fn with_series(&self, series: TimeSeries) -> Result<Self> {
        Self::new(series, self.embeddings.clone(), self.split)
    }
}

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// One forecasting window: `L` input steps and the `H` steps after them.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// Index of the first input step in the full series.
    pub start: usize,
    pub input_series: Array2<f64>,
    pub input_embeddings: Array2<f64>,
    pub target: Array2<f64>,
}

/// One imputation window: values, their mask and the paired embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct ImputeWindow {
    pub start: usize,
    pub values: Array2<f64>,
    pub mask: Array2<bool>,
    pub embeddings: Array2<f64>,
}

/// Every stride-1 forecasting window fully inside the chosen split segment.
pub fn make_windows(
    ds: &MultimodalDataset,
    seq_len: usize,
    pred_len: usize,
    split: SplitKind,
) -> Result<Vec<WindowSample>> {
    let seg = ds.segment(split);
    let span = seq_len + pred_len;
    if seq_len == 0 || pred_len == 0 || seg.len() < span {
        return Err(Error::SegmentTooShort {
            segment: seg.len(),
            seq_len,
            pred_len,
        });
    }
    let x = ds.series.values();
    let e = ds.embeddings.vectors();
    Ok((seg.start..=seg.end - span)
        .map(|start| WindowSample {
            start,
            input_series: x.slice(s![start..start + seq_len, ..]).to_owned(),
            input_embeddings: e.slice(s![start..start + seq_len, ..]).to_owned(),
            target: x.slice(s![start + seq_len..start + span, ..]).to_owned(),
        })
        .collect())
}

/// Every stride-1 imputation window of length `seq_len` inside the segment.
pub fn make_impute_windows(
    ds: &MultimodalDataset,
    mask: &BinaryMask,
    seq_len: usize,
    split: SplitKind,
) -> Result<Vec<ImputeWindow>> {
    if mask.shape() != ds.series.values().dim() {
        let (t, n) = ds.series.values().dim();
        let (mt, mn) = mask.shape();
        return Err(Error::shape(&[t, n], &[mt, mn]));
    }
    let seg = ds.segment(split);
    if seq_len == 0 || seg.len() < seq_len {
        return Err(Error::SegmentTooShort {
            segment: seg.len(),
            seq_len,
            pred_len: 0,
        });
    }
    let x = ds.series.values();
    let e = ds.embeddings.vectors();
    let m = mask.entries();
    Ok((seg.start..=seg.end - seq_len)
        .map(|start| ImputeWindow {
            start,
            values: x.slice(s![start..start + seq_len, ..]).to_owned(),
            mask: m.slice(s![start..start + seq_len, ..]).to_owned(),
            embeddings: e.slice(s![start..start + seq_len, ..]).to_owned(),
        })
        .collect())
}

/// Chronological (unshuffled) split boundaries from ratios summing to one.
pub fn chronological_split(t: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize)> {
    let (train, val, test) = ratios;
    let positive = [train, val, test].iter().all(|r| r.is_finite() && *r > 0.0);
    if !positive || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::BadRatios(ratios));
    }
    // ratios like 0.7 + 0.1 land a hair below the intended boundary
    let boundary = |r: f64| (t as f64 * r + 1e-9).floor() as usize;
    let train_end = boundary(train);
    let val_end = boundary(train + val);
    Ok((train_end, val_end))
}

/// I.i.d. Bernoulli(1 - `missing_ratio`) observation mask from a seeded
/// generator.
pub fn generate_mask(shape: (usize, usize), missing_ratio: f64, seed: u64) -> Result<BinaryMask> {
    if !(0.0..1.0).contains(&missing_ratio) {
        return Err(Error::Config(format!(
            "missing ratio must lie in [0, 1), got {missing_ratio}"
        )));
    }
    let mut rng = seeded(seed, Stream::Mask);
    let entries = Array2::from_shape_simple_fn(shape, || rng.random::<f64>() >= missing_ratio);
    Ok(BinaryMask { entries })
}
