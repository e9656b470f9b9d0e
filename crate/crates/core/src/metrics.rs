//! Point-forecast error metrics.

use ndarray::{ArrayView, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every selected target is zero.
    pub mape: Option<f64>,
    pub mspe: Option<f64>,
    pub n: usize,
    /// Selected cells with a zero target, left out of MAPE and MSPE.
    pub zero_targets: usize,
}

/// MSE, MAE, RMSE, MAPE (x100) and MSPE over the cells selected by `mask`
/// (all cells when `None`).
pub fn evaluate<D: Dimension>(
    pred: ArrayView<'_, f64, D>,
    target: ArrayView<'_, f64, D>,
    mask: Option<ArrayView<'_, bool, D>>,
) -> Result<EvalReport> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(target.shape(), pred.shape()));
    }
    if let Some(m) = &mask {
        if m.shape() != pred.shape() {
            return Err(Error::shape(pred.shape(), m.shape()));
        }
    }
    let mut acc = Accumulator::default();
    match mask {
        Some(m) => pred
            .iter()
            .zip(target.iter())
            .zip(m.iter())
            .filter(|(_, &keep)| keep)
            .for_each(|((&p, &y), _)| acc.push(p, y)),
        None => pred.iter().zip(target.iter()).for_each(|(&p, &y)| acc.push(p, y)),
    }
    acc.finish()
}

/// Running sums so reports can be built from many windows without
/// concatenating them.
#[derive(Clone, Debug, Default)]
pub struct Accumulator {
    n: usize,
    sq: f64,
    abs: f64,
    ape: f64,
    spe: f64,
    nonzero: usize,
}

impl Accumulator {
    pub fn push(&mut self, pred: f64, target: f64) {
        let e = target - pred;
        self.n += 1;
        self.sq += e * e;
        self.abs += e.abs();
        if target != 0.0 {
            let r = e / target;
            self.ape += r.abs();
            self.spe += r * r;
            self.nonzero += 1;
        }
    }

    pub fn extend<D: Dimension>(&mut self, pred: ArrayView<'_, f64, D>, target: ArrayView<'_, f64, D>) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::shape(target.shape(), pred.shape()));
        }
        pred.iter().zip(target.iter()).for_each(|(&p, &y)| self.push(p, y));
        Ok(())
    }

    pub fn finish(&self) -> Result<EvalReport> {
        if self.n == 0 {
            return Err(Error::EmptySelection);
        }
        let n = self.n as f64;
        let mse = self.sq / n;
        let zero_targets = self.n - self.nonzero;
        if zero_targets > 0 {
            log::warn!("{zero_targets} zero targets excluded from MAPE/MSPE");
        }
        let (mape, mspe) = if self.nonzero == 0 {
            (None, None)
        } else {
            let m = self.nonzero as f64;
            (Some(100.0 * self.ape / m), Some(self.spe / m))
        };
        Ok(EvalReport {
            mse,
            mae: self.abs / n,
            rmse: mse.sqrt(),
            mape,
            mspe,
            n: self.n,
            zero_targets,
        })
    }
}

/// Percentage reduction of `ours` relative to `baseline`; negative when
/// `ours` is worse.
pub fn promotion(baseline: f64, ours: f64) -> f64 {
    100.0 * (baseline - ours) / baseline
}
