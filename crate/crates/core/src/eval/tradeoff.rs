use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bins smaller than this are merged into a neighbour.
pub const MIN_BIN: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub count: usize,
    pub trace_lo: f64,
    pub trace_hi: f64,
    pub mean_trace: f64,
    pub mean_error: f64,
    pub std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub bins: Vec<Bin>,
    /// Index of the bin with the lowest mean error.
    pub argmin: usize,
    /// Whether small bins had to be merged.
    pub merged: bool,
}

impl TradeoffCurve {
    /// The minimum is neither the first nor the last bin.
    pub fn interior_min(&self) -> bool {
        self.bins.len() >= 3 && self.argmin > 0 && self.argmin + 1 < self.bins.len()
    }
}

fn summarize(items: &[(f64, f64)]) -> Bin {
    let n = items.len() as f64;
    let mean_trace = items.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_error = items.iter().map(|p| p.1).sum::<f64>() / n;
    let var = items.iter().map(|p| (p.1 - mean_error).powi(2)).sum::<f64>() / n;
    Bin {
        count: items.len(),
        trace_lo: items.first().unwrap().0,
        trace_hi: items.last().unwrap().0,
        mean_trace,
        mean_error,
        std_error: var.sqrt(),
    }
}

/// Groups `(trace, error)` pairs into `bins` equal-count bins by trace and
/// averages the error per bin.
pub fn tradeoff_curve(trace: &[f64], error: &[f64], bins: usize) -> Result<TradeoffCurve> {
    if trace.len() != error.len() || trace.is_empty() {
        return Err(Error::InvalidArgument("need equal-length, non-empty trace and error vectors".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut pairs: Vec<(f64, f64)> = trace.iter().copied().zip(error.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = pairs.len();
    let mut bounds: Vec<(usize, usize)> = (0..bins)
        .map(|k| (k * n / bins, (k + 1) * n / bins))
        .filter(|(a, b)| b > a)
        .collect();
    let mut merged = false;
    while bounds.len() > 1 {
        let Some(i) = bounds.iter().position(|(a, b)| b - a < MIN_BIN) else {
            break;
        };
        merged = true;
        if i + 1 < bounds.len() {
            bounds[i + 1].0 = bounds[i].0;
        } else {
            bounds[i - 1].1 = bounds[i].1;
        }
        bounds.remove(i);
    }
    let bins: Vec<Bin> = bounds.iter().map(|&(a, b)| summarize(&pairs[a..b])).collect();
    let argmin = bins
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean_error.total_cmp(&b.1.mean_error))
        .map(|(i, _)| i)
        .unwrap();
    Ok(TradeoffCurve { bins, argmin, merged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_bin_is_global_mean() {
        let c = tradeoff_curve(&[3.0, 1.0, 2.0], &[0.3, 0.1, 0.2], 1).unwrap();
        assert_eq!(c.bins.len(), 1);
        assert!((c.bins[0].mean_error - 0.2).abs() < 1e-15);
        assert!(!c.interior_min());
    }

    #[test]
    fn u_shape_has_interior_minimum_and_counts_are_kept() {
        let trace: Vec<f64> = (0..40).map(f64::from).collect();
        let error: Vec<f64> = trace.iter().map(|t| ((t - 18.0) / 20.0).powi(2)).collect();
        let c = tradeoff_curve(&trace, &error, 4).unwrap();
        assert!(c.interior_min());
        assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), 40);
    }

    #[test]
    fn small_bins_are_merged() {
        let c = tradeoff_curve(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.0; 5], 4).unwrap();
        assert!(c.merged);
        assert_eq!(c.bins.iter().map(|b| b.count).sum::<usize>(), 5);
        assert!(c.bins.iter().all(|b| b.count >= MIN_BIN) || c.bins.len() == 1);
    }
}
