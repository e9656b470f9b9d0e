//! Spectral alignment between texts and series via 1-D optimal transport.
//!
//! Spectra are turned into probability measures over normalized frequency
//! (`frequency / 0.5`, so supports lie in `[0, 1]`) and compared with the
//! Wasserstein-1 distance. The closed-form CDF sweep is paired with an exact
//! transportation-simplex solver used as an independent check.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{EmbeddingSequence, MultimodalDataset, TimeSeries};
use crate::error::{Error, Result};
use crate::rng::{seeded, Stream};
use crate::spectral::{default_max_lag, difference, magnitude_spectrum, text_spectrum, Spectrum};

/// A discrete probability measure on `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSpectrum {
    pub support: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NormalizedSpectrum {
    /// Validates and wraps a support/weight pair; weights are rescaled to sum
    /// to exactly one.
    pub fn new(support: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if support.len() != weights.len() {
            return Err(Error::shape(&[support.len()], &[weights.len()]));
        }
        if support.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("support must be strictly increasing".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroSpectrum("input"));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { support, weights })
    }

    pub fn dirac(at: f64) -> Self {
        Self {
            support: vec![at],
            weights: vec![1.0],
        }
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }
}

/// Feasible coupling between two measures.
#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub gamma: Array2<f64>,
}

/// Drops zero-amplitude bins and rescales frequencies by Nyquist and
/// amplitudes to unit mass.
pub fn normalize_spectrum(s: &Spectrum) -> Result<NormalizedSpectrum> {
    let total: f64 = s.amplitudes.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroSpectrum("input"));
    }
    let (support, weights) = s
        .frequencies
        .iter()
        .zip(&s.amplitudes)
        .filter(|(_, &a)| a > 0.0)
        .map(|(&f, &a)| (f / 0.5, a / total))
        .unzip();
    Ok(NormalizedSpectrum { support, weights })
}

/// Exact W1 distance by sweeping the merged supports and integrating
/// `|F_p - F_q|`.
pub fn wasserstein_1d(p: &NormalizedSpectrum, q: &NormalizedSpectrum) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut cdf_p, mut cdf_q) = (0.0f64, 0.0f64);
    let mut prev: Option<f64> = None;
    let mut total = 0.0;
    while i < p.len() || j < q.len() {
        let next = match (p.support.get(i), q.support.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => unreachable!(),
        };
        if let Some(x) = prev {
            total += (cdf_p - cdf_q).abs() * (next - x);
        }
        while i < p.len() && p.support[i] == next {
            cdf_p += p.weights[i];
            i += 1;
        }
        while j < q.len() && q.support[j] == next {
            cdf_q += q.weights[j];
            j += 1;
        }
        prev = Some(next);
    }
    total
}

/// Cell limit for [`lp_oracle`].
pub const LP_ORACLE_LIMIT: usize = 64;

/// Solves the transport linear program exactly with a transportation simplex
/// seeded by the north-west-corner rule (Bland's rule for pivoting).
pub fn lp_oracle(p: &NormalizedSpectrum, q: &NormalizedSpectrum) -> Result<(f64, TransportPlan)> {
    let (n, m) = (p.len(), q.len());
    if n * m > LP_ORACLE_LIMIT {
        return Err(Error::TooLarge {
            rows: n,
            cols: m,
            limit: LP_ORACLE_LIMIT,
        });
    }
    if n == 0 || m == 0 {
        return Err(Error::ZeroSpectrum("input"));
    }
    let cost = Array2::from_shape_fn((n, m), |(i, j)| (p.support[i] - q.support[j]).abs());
    let gamma = transportation_simplex(&p.weights, &q.weights, &cost);
    let value = (&gamma * &cost).sum();
    Ok((value, TransportPlan { gamma }))
}

fn transportation_simplex(supply: &[f64], demand: &[f64], cost: &Array2<f64>) -> Array2<f64> {
    let (n, m) = cost.dim();
    let mut x = Array2::<f64>::zeros((n, m));
    let mut basic = Array2::from_elem((n, m), false);

    // North-west corner: a staircase of n + m - 1 basic cells.
    let (mut ra, mut rb) = (supply.to_vec(), demand.to_vec());
    let (mut i, mut j) = (0, 0);
    loop {
        let amount = ra[i].min(rb[j]).max(0.0);
        x[[i, j]] = amount;
        basic[[i, j]] = true;
        ra[i] -= amount;
        rb[j] -= amount;
        if i == n - 1 && j == m - 1 {
            break;
        }
        if j == m - 1 || (i < n - 1 && ra[i] <= rb[j]) {
            i += 1;
        } else {
            j += 1;
        }
    }

    let tol = 1e-14;
    for _ in 0..10_000 {
        let (u, v) = potentials(&basic, cost);
        let entering = (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .find(|&(i, j)| !basic[[i, j]] && cost[[i, j]] - u[i] - v[j] < -tol);
        let Some((ei, ej)) = entering else { break };

        // Tree path from row ei to column ej; alternating signs start with
        // "-" on the first edge out of row ei.
        let path = tree_path(&basic, ei, ej);
        let minus: Vec<(usize, usize)> = path.iter().step_by(2).copied().collect();
        let plus: Vec<(usize, usize)> = path.iter().skip(1).step_by(2).copied().collect();
        let theta = minus.iter().map(|&c| x[c]).fold(f64::INFINITY, f64::min);
        let leaving = *minus
            .iter()
            .filter(|&&c| x[c] == theta)
            .min()
            .expect("cycle has a minus cell");

        x[[ei, ej]] += theta;
        for &c in &plus {
            x[c] += theta;
        }
        for &c in &minus {
            x[c] -= theta;
        }
        x[leaving] = 0.0;
        basic[leaving] = false;
        basic[[ei, ej]] = true;
    }
    x.mapv_inplace(|v| v.max(0.0));
    x
}

/// Dual potentials with `u[0] = 0` on the spanning tree of basic cells.
fn potentials(basic: &Array2<bool>, cost: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, m) = basic.dim();
    let mut u = vec![f64::NAN; n];
    let mut v = vec![f64::NAN; m];
    u[0] = 0.0;
    let mut changed = true;
    while changed {
        changed = false;
        for i in 0..n {
            for j in 0..m {
                if !basic[[i, j]] {
                    continue;
                }
                if !u[i].is_nan() && v[j].is_nan() {
                    v[j] = cost[[i, j]] - u[i];
                    changed = true;
                } else if u[i].is_nan() && !v[j].is_nan() {
                    u[i] = cost[[i, j]] - v[j];
                    changed = true;
                }
            }
        }
    }
    (u, v)
}

/// Cells along the unique tree path from row `row` to column `col`.
fn tree_path(basic: &Array2<bool>, row: usize, col: usize) -> Vec<(usize, usize)> {
    let (n, m) = basic.dim();
    // Nodes 0..n are rows, n..n+m are columns.
    let mut parent: Vec<Option<usize>> = vec![None; n + m];
    let mut seen = vec![false; n + m];
    let mut queue = std::collections::VecDeque::from([row]);
    seen[row] = true;
    while let Some(node) = queue.pop_front() {
        let neighbours: Vec<usize> = if node < n {
            (0..m).filter(|&j| basic[[node, j]]).map(|j| n + j).collect()
        } else {
            (0..n).filter(|&i| basic[[i, node - n]]).collect()
        };
        for next in neighbours {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some(node);
                queue.push_back(next);
            }
        }
    }
    let mut nodes = vec![n + col];
    while let Some(p) = parent[*nodes.last().unwrap()] {
        nodes.push(p);
    }
    nodes.reverse();
    debug_assert_eq!(nodes[0], row);
    nodes
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            if a < n {
                (a, b - n)
            } else {
                (b, a - n)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransportConfig {
    /// Lag horizon for the text spectrum; `None` uses the default.
    pub max_lag: Option<usize>,
}

/// Mean of the per-variable differenced spectra, each scaled to unit mass
/// before averaging. Variables with a flat (all-zero) spectrum are skipped.
pub fn series_spectrum(series: &TimeSeries) -> Result<Spectrum> {
    let x = series.values();
    let mut acc: Option<Spectrum> = None;
    let mut used = 0usize;
    for col in x.axis_iter(Axis(1)) {
        let s = magnitude_spectrum(&difference(&col.to_vec())?)?;
        let total: f64 = s.amplitudes.iter().sum();
        if !(total > 0.0) {
            continue;
        }
        used += 1;
        match acc.as_mut() {
            None => {
                acc = Some(Spectrum {
                    frequencies: s.frequencies,
                    amplitudes: s.amplitudes.iter().map(|a| a / total).collect(),
                })
            }
            Some(a) => {
                for (dst, src) in a.amplitudes.iter_mut().zip(&s.amplitudes) {
                    *dst += src / total;
                }
            }
        }
    }
    let mut spectrum = acc.ok_or(Error::ZeroSpectrum("series"))?;
    for a in spectrum.amplitudes.iter_mut() {
        *a /= used as f64;
    }
    Ok(spectrum)
}

/// Text spectrum for transport; all-identical embeddings surface as a zero
/// spectrum.
fn text_measure(e: &EmbeddingSequence, max_lag: usize) -> Result<NormalizedSpectrum> {
    let s = text_spectrum(e, max_lag).map_err(|err| match err {
        Error::DegenerateEmbeddings => Error::ZeroSpectrum("text"),
        other => other,
    })?;
    normalize_spectrum(&s).map_err(|_| Error::ZeroSpectrum("text"))
}

/// Wasserstein distance between the normalized text and series spectra.
pub fn tt_wasserstein(ds: &MultimodalDataset, cfg: &TransportConfig) -> Result<f64> {
    tt_wasserstein_parts(ds.series(), ds.embeddings(), cfg)
}

fn tt_wasserstein_parts(series: &TimeSeries, embeddings: &EmbeddingSequence, cfg: &TransportConfig) -> Result<f64> {
    let max_lag = cfg.max_lag.unwrap_or_else(|| default_max_lag(series.len()));
    let ts = normalize_spectrum(&series_spectrum(series)?).map_err(|_| Error::ZeroSpectrum("series"))?;
    let text = text_measure(embeddings, max_lag)?;
    Ok(wasserstein_1d(&text, &ts))
}

/// Original vs. shuffled alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShuffleReport {
    pub original: f64,
    pub ts_shuffled: Vec<f64>,
    pub text_shuffled: Vec<f64>,
    pub ts_shuffled_mean: f64,
    pub text_shuffled_mean: f64,
    pub ratio_percent: f64,
}

/// `100 * original / mean(ts_shuffled, text_shuffled)`.
pub fn shuffle_ratio_percent(original: f64, ts_shuffled: f64, text_shuffled: f64) -> f64 {
    100.0 * original / ((ts_shuffled + text_shuffled) / 2.0)
}

fn permute_rows(m: ndarray::ArrayView2<'_, f64>, perm: &[usize]) -> Array2<f64> {
    m.select(Axis(0), perm)
}

/// TT-Wasserstein of the dataset and of row-permuted copies (series rows only,
/// then embedding rows only), one permutation per seed.
pub fn shuffle_ratio(ds: &MultimodalDataset, seeds: &[u64], cfg: &TransportConfig) -> Result<ShuffleReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one shuffle seed is required".into()));
    }
    let original = tt_wasserstein(ds, cfg)?;
    let t = ds.len();
    let mut ts_shuffled = Vec::with_capacity(seeds.len());
    let mut text_shuffled = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut rng = seeded(seed, Stream::Shuffle);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut rng);
        let series = TimeSeries::new(permute_rows(ds.series().values(), &perm))?;
        ts_shuffled.push(tt_wasserstein_parts(&series, ds.embeddings(), cfg)?);

        perm.shuffle(&mut rng);
        let emb = EmbeddingSequence::new(permute_rows(ds.embeddings().vectors(), &perm))?;
        text_shuffled.push(tt_wasserstein_parts(ds.series(), &emb, cfg)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ts_shuffled_mean = mean(&ts_shuffled);
    let text_shuffled_mean = mean(&text_shuffled);
    Ok(ShuffleReport {
        original,
        ratio_percent: shuffle_ratio_percent(original, ts_shuffled_mean, text_shuffled_mean),
        ts_shuffled,
        text_shuffled,
        ts_shuffled_mean,
        text_shuffled_mean,
    })
}
