//! Masked depth metrics: δ thresholds, RMSE, AbsRel.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::ValidMask;
use crate::tensor::{Element, Tensor};
use crate::DEPTH_CAP;

/// Base of the threshold accuracies `δₙ < 1.25ⁿ`.
pub const DELTA_BASE: f64 = 1.25;
/// Predictions are clamped to `[PRED_FLOOR, DEPTH_CAP]` for ratio metrics.
pub const PRED_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AbsRelDenominator {
    #[default]
    Target,
    Prediction,
}

impl FromStr for AbsRelDenominator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(AbsRelDenominator::Target),
            "prediction" => Ok(AbsRelDenominator::Prediction),
            o => Err(Error::Config(format!("absrel denominator `{o}` (expected target|prediction)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub rmse: f64,
    pub absrel: f64,
    pub n_pixels: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "mode,seed,delta1,delta2,delta3,rmse,absrel,n_pixels";

    pub fn csv_row(&self, mode: &str, seed: u64) -> String {
        format!(
            "{mode},{seed},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.delta1, self.delta2, self.delta3, self.rmse, self.absrel, self.n_pixels
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "d1={:.4} d2={:.4} d3={:.4} rmse={:.4} absrel={:.4} n={}",
            self.delta1, self.delta2, self.delta3, self.rmse, self.absrel, self.n_pixels
        )
    }
}

/// Pixel-weighted running sums across samples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    hits: [usize; 3],
    sq_err: f64,
    rel_err: f64,
    n: usize,
    pub skipped: usize,
    pub denominator: AbsRelDenominator,
}

impl MetricsAccumulator {
    pub fn new(denominator: AbsRelDenominator) -> Self {
        MetricsAccumulator {
            denominator,
            ..Default::default()
        }
    }

    /// Adds one sample; a sample without valid pixels is counted as skipped.
    pub fn add<T: Element>(&mut self, pred: &Tensor<T>, target: &Tensor<T>, mask: &ValidMask) -> Result<()> {
        if pred.numel() != target.numel() || mask.valid.len() != pred.numel() {
            return Err(Error::shape("metrics", pred.shape(), target.shape()));
        }
        if mask.is_empty() {
            self.skipped += 1;
            return Ok(());
        }
        let thresholds = [DELTA_BASE, DELTA_BASE.powi(2), DELTA_BASE.powi(3)];
        for ((&p, &t), &ok) in pred.data().iter().zip(target.data()).zip(&mask.valid) {
            if !ok {
                continue;
            }
            let (p, t) = (p.as_f64(), t.as_f64());
            let pc = p.clamp(PRED_FLOOR, DEPTH_CAP);
            let ratio = (t / pc).max(pc / t);
            for (h, &th) in self.hits.iter_mut().zip(&thresholds) {
                if ratio < th {
                    *h += 1;
                }
            }
            self.sq_err += (p - t) * (p - t);
            let denom = match self.denominator {
                AbsRelDenominator::Target => t,
                AbsRelDenominator::Prediction => pc,
            };
            self.rel_err += (pc - t).abs() / denom;
            self.n += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::EmptyMask);
        }
        let n = self.n as f64;
        Ok(MetricsReport {
            delta1: self.hits[0] as f64 / n,
            delta2: self.hits[1] as f64 / n,
            delta3: self.hits[2] as f64 / n,
            rmse: (self.sq_err / n).sqrt(),
            absrel: self.rel_err / n,
            n_pixels: self.n,
        })
    }
}

pub fn compute_metrics<T: Element>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    mask: &ValidMask,
    denominator: AbsRelDenominator,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::new(denominator);
    acc.add(pred, target, mask)?;
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, v.len()], v).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let y = t(&[1.0, 5.0, 79.0]);
        let m = ValidMask::from_target(&y).unwrap();
        let r = compute_metrics(&y, &y, &m, AbsRelDenominator::Target).unwrap();
        assert_eq!((r.delta1, r.delta2, r.delta3, r.rmse, r.absrel), (1.0, 1.0, 1.0, 0.0, 0.0));
        assert_eq!(r.n_pixels, 3);
    }

    #[test]
    fn ratio_two_hand_case() {
        let (y, ys) = (t(&[2.0]), t(&[1.0]));
        let m = ValidMask::from_target(&ys).unwrap();
        let r = compute_metrics(&y, &ys, &m, AbsRelDenominator::Target).unwrap();
        // ratio 2 exceeds 1.25³ = 1.953125, so even δ₃ misses
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 0.0, 0.0));
        let r3 = compute_metrics(&t(&[1.9]), &ys, &m, AbsRelDenominator::Target).unwrap();
        assert_eq!((r3.delta1, r3.delta2, r3.delta3), (0.0, 0.0, 1.0));
        assert_eq!((r.rmse, r.absrel), (1.0, 1.0));
        let rp = compute_metrics(&y, &ys, &m, AbsRelDenominator::Prediction).unwrap();
        assert_eq!(rp.absrel, 0.5);
    }

    #[test]
    fn empty_mask_errors_and_is_skipped_in_aggregate() {
        let ys = t(&[0.0, 90.0]);
        let m = ValidMask::from_target(&ys).unwrap();
        assert!(matches!(compute_metrics(&ys, &ys, &m, AbsRelDenominator::Target), Err(Error::EmptyMask)));
        let mut acc = MetricsAccumulator::new(AbsRelDenominator::Target);
        acc.add(&ys, &ys, &m).unwrap();
        assert_eq!(acc.skipped, 1);
    }

    #[test]
    fn csv_row_has_eight_columns() {
        let r = MetricsReport { delta1: 1.0, delta2: 1.0, delta3: 1.0, rmse: 0.0, absrel: 0.0, n_pixels: 4 };
        assert_eq!(r.csv_row("early", 3).split(',').count(), MetricsReport::CSV_HEADER.split(',').count());
    }
}
