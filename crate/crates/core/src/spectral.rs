//! Frequency analysis of series and paired texts: differencing, one-sided
//! magnitude spectra, non-maximum suppression, lag similarity of embeddings
//! and top-l frequency extraction.

use ndarray::{Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSequence, MultimodalDataset};
use crate::error::{Error, Result};

/// One-sided magnitude spectrum. Frequencies are in cycles per sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub frequencies: Vec<f64>,
    pub amplitudes: Vec<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Index of the largest amplitude (first one on ties).
    pub fn argmax(&self) -> Option<usize> {
        self.amplitudes
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, &a)| match best {
                Some((_, b)) if b >= a => best,
                _ => Some((i, a)),
            })
            .map(|(i, _)| i)
    }

    /// Spacing between adjacent bins.
    pub fn bin_width(&self) -> f64 {
        match self.frequencies.as_slice() {
            [a, b, ..] => b - a,
            [f] => *f,
            [] => 0.0,
        }
    }
}

/// Mean cosine similarity between centered embeddings `k` steps apart, for
/// `k = 1..=K` (stored at index `k - 1`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LagSimilarityCurve {
    pub values: Vec<f64>,
}

/// First-order difference `x[t+1] - x[t]`.
pub fn difference(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: x.len(),
        });
    }
    Ok(x.windows(2).map(|w| w[1] - w[0]).collect())
}

/// One-sided DFT magnitude at `k / T` for `k = 1..=T/2`; the DC bin is
/// dropped and no window function is applied.
pub fn magnitude_spectrum(x: &[f64]) -> Result<Spectrum> {
    let n = x.len();
    if n < 2 {
        return Err(Error::TooShort { needed: 2, got: n });
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let frequencies = (1..=half).map(|k| k as f64 / n as f64).collect();
    let amplitudes = buf[1..=half]
        .iter()
        .map(|c| (c.re * c.re + c.im * c.im).sqrt())
        .collect();
    Ok(Spectrum {
        frequencies,
        amplitudes,
    })
}

/// Keeps a bin only if it is strictly larger than every other bin within
/// `radius`; all other amplitudes become zero.
pub fn nms(s: &Spectrum, radius: usize) -> Spectrum {
    let a = &s.amplitudes;
    let n = a.len();
    let amplitudes = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n.saturating_sub(1));
            let dominant = (lo..=hi).filter(|&j| j != i).all(|j| a[i] > a[j]);
            if dominant {
                a[i]
            } else {
                0.0
            }
        })
        .collect();
    Spectrum {
        frequencies: s.frequencies.clone(),
        amplitudes,
    }
}

fn centered_rows(e: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = e.mean_axis(Axis(0)).expect("non-empty embeddings");
    &e - &mean
}

/// Lag-similarity curve of mean-centered embeddings.
///
/// Pairs where either centered row is (numerically) zero are skipped and do
/// not count toward the mean.
pub fn lag_similarity(e: &EmbeddingSequence, max_lag: usize) -> Result<LagSimilarityCurve> {
    let t = e.len();
    if max_lag == 0 || max_lag >= t {
        return Err(Error::TooShort {
            needed: max_lag + 1,
            got: t,
        });
    }
    let centered = centered_rows(e.vectors());
    let scale = e.vectors().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-10 * scale;
    let norms: Vec<f64> = centered.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    if norms.iter().all(|&n| n <= tol) {
        return Err(Error::DegenerateEmbeddings);
    }
    let units: Vec<Option<ndarray::Array1<f64>>> = centered
        .outer_iter()
        .zip(&norms)
        .map(|(r, &n)| (n > tol).then(|| &r / n))
        .collect();

    let values = (1..=max_lag)
        .map(|k| {
            let (sum, count) = (0..t - k).fold((0.0, 0usize), |(s, c), i| match (&units[i], &units[i + k]) {
                (Some(a), Some(b)) => (s + a.dot(b), c + 1),
                _ => (s, c),
            });
            if count == 0 {
                0.0
            } else {
                sum / count as f64
            }
        })
        .collect();
    Ok(LagSimilarityCurve { values })
}

/// Magnitude spectrum of the differenced lag-similarity curve.
pub fn text_spectrum(e: &EmbeddingSequence, max_lag: usize) -> Result<Spectrum> {
    if max_lag < 4 {
        return Err(Error::Config(format!("max_lag must be at least 4, got {max_lag}")));
    }
    let curve = lag_similarity(e, max_lag)?;
    magnitude_spectrum(&difference(&curve.values)?)
}

/// Default lag horizon: `min(T - 1, T / 2)`.
pub fn default_max_lag(t: usize) -> usize {
    (t.saturating_sub(1)).min(t / 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPeak {
    pub frequency: f64,
    pub amplitude: f64,
}

/// The `l` largest bins, by descending amplitude then ascending frequency.
pub fn top_frequencies(s: &Spectrum, l: usize) -> Vec<FrequencyPeak> {
    let mut peaks: Vec<FrequencyPeak> = s
        .frequencies
        .iter()
        .zip(&s.amplitudes)
        .map(|(&frequency, &amplitude)| FrequencyPeak { frequency, amplitude })
        .collect();
    peaks.sort_by(|a, b| {
        b.amplitude
            .total_cmp(&a.amplitude)
            .then(a.frequency.total_cmp(&b.frequency))
    });
    peaks.truncate(l);
    peaks
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrConfig {
    pub nms_radius: usize,
    /// Number of text frequencies to overlay.
    pub top_l: usize,
    /// Lag horizon; `None` uses [`default_max_lag`].
    pub max_lag: Option<usize>,
    /// NMS survivors below this fraction of the variable's strongest peak are
    /// not treated as peaks when matching.
    pub min_peak_ratio: f64,
}

impl Default for CtrConfig {
    fn default() -> Self {
        Self {
            nms_radius: 2,
            top_l: 4,
            max_lag: None,
            min_peak_ratio: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableSpectrum {
    pub variable: usize,
    pub spectrum: Spectrum,
    pub nms_amplitudes: Vec<f64>,
    /// Frequencies of the NMS survivors used for matching.
    pub peaks: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedFrequency {
    pub frequency: f64,
    pub amplitude: f64,
    pub matched: bool,
}

/// Spectra and text/series frequency overlay for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrReport {
    pub config: CtrConfig,
    pub max_lag: usize,
    pub series_spectra: Vec<VariableSpectrum>,
    pub lag_similarity: Vec<f64>,
    pub text_spectrum: Spectrum,
    pub top_text_frequencies: Vec<MatchedFrequency>,
    pub match_tolerance: f64,
    pub matched_count: usize,
}

/// Runs the full resonance analysis: per-variable differenced and NMS-filtered
/// series spectra, the text spectrum, and which top-l text frequencies land
/// within one bin of a series peak.
pub fn analyze_ctr(ds: &MultimodalDataset, cfg: &CtrConfig) -> Result<CtrReport> {
    if cfg.nms_radius == 0 || cfg.top_l == 0 {
        return Err(Error::Config("nms_radius and top_l must be positive".into()));
    }
    let t = ds.len();
    let max_lag = cfg.max_lag.unwrap_or_else(|| default_max_lag(t));
    let x = ds.series().values();

    let series_spectra = x
        .axis_iter(Axis(1))
        .enumerate()
        .map(|(variable, col)| {
            let col: Vec<f64> = col.to_vec();
            let spectrum = magnitude_spectrum(&difference(&col)?)?;
            let filtered = nms(&spectrum, cfg.nms_radius);
            let strongest = filtered.amplitudes.iter().cloned().fold(0.0, f64::max);
            let peaks = filtered
                .frequencies
                .iter()
                .zip(&filtered.amplitudes)
                .filter(|(_, &a)| a > 0.0 && a >= cfg.min_peak_ratio * strongest)
                .map(|(&f, _)| f)
                .collect();
            Ok(VariableSpectrum {
                variable,
                spectrum,
                nms_amplitudes: filtered.amplitudes,
                peaks,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    if max_lag < 4 {
        return Err(Error::Config(format!("max_lag must be at least 4, got {max_lag}")));
    }
    let curve = lag_similarity(ds.embeddings(), max_lag)?;
    let text = magnitude_spectrum(&difference(&curve.values)?)?;

    let series_bin = series_spectra.first().map_or(0.0, |v| v.spectrum.bin_width());
    let tolerance = series_bin.max(text.bin_width()) * (1.0 + 1e-9);

    let top_text_frequencies: Vec<MatchedFrequency> = top_frequencies(&text, cfg.top_l)
        .into_iter()
        .map(|p| MatchedFrequency {
            frequency: p.frequency,
            amplitude: p.amplitude,
            matched: series_spectra
                .iter()
                .flat_map(|v| &v.peaks)
                .any(|&f| (f - p.frequency).abs() <= tolerance),
        })
        .collect();
    let matched_count = top_text_frequencies.iter().filter(|m| m.matched).count();

    Ok(CtrReport {
        config: *cfg,
        max_lag,
        series_spectra,
        lag_similarity: curve.values,
        text_spectrum: text,
        top_text_frequencies,
        match_tolerance: tolerance,
        matched_count,
    })
}
