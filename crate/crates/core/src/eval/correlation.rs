use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pearson, Spearman and Kendall tau-b between two score vectors. When
/// either vector is constant the coefficients are undefined: they are then
/// reported as 0 with `degenerate` set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
    pub n: usize,
    pub degenerate: bool,
    pub a: String,
    pub b: String,
}

fn pearson_raw(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties given their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && v[idx[end]] == v[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

fn kendall_tau_b(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = (a[i] - a[j]).partial_cmp(&0.0).unwrap();
            let db = (b[i] - b[j]).partial_cmp(&0.0).unwrap();
            use std::cmp::Ordering::Equal;
            match (da, db) {
                (Equal, Equal) => {}
                (Equal, _) => ties_a += 1,
                (_, Equal) => ties_b += 1,
                _ if da == db => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n1 = (concordant + discordant + ties_a) as f64;
    let n2 = (concordant + discordant + ties_b) as f64;
    if n1 == 0.0 || n2 == 0.0 {
        return None;
    }
    Some(((concordant - discordant) as f64 / (n1 * n2).sqrt()).clamp(-1.0, 1.0))
}

pub fn correlation(a: &[f64], b: &[f64]) -> Result<CorrelationReport> {
    correlation_labeled(a, b, "a", "b")
}

pub fn correlation_labeled(a: &[f64], b: &[f64], a_name: &str, b_name: &str) -> Result<CorrelationReport> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation needs two equal-length vectors of at least 2 entries, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "correlation input".into(),
        });
    }
    let p = pearson_raw(a, b);
    let s = pearson_raw(&average_ranks(a), &average_ranks(b));
    let k = kendall_tau_b(a, b);
    let degenerate = p.is_none() || s.is_none() || k.is_none();
    Ok(CorrelationReport {
        pearson: p.unwrap_or(0.0),
        spearman: s.unwrap_or(0.0),
        kendall: k.unwrap_or(0.0),
        n: a.len(),
        degenerate,
        a: a_name.to_string(),
        b: b_name.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_reversed() {
        let a = [1.0, 4.0, 2.0, 8.0];
        let r = correlation(&a, &a).unwrap();
        assert!((r.pearson - 1.0).abs() < 1e-15 && r.spearman == 1.0 && r.kendall == 1.0);
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        let r = correlation(&a, &b).unwrap();
        assert_eq!((r.spearman, r.kendall), (-1.0, -1.0));
    }

    #[test]
    fn kendall_hand_example() {
        let r = correlation(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((r.kendall - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn constant_input_is_degenerate_not_nan() {
        let r = correlation(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!((r.pearson, r.spearman, r.kendall), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn short_or_mismatched_inputs_fail() {
        assert!(correlation(&[1.0], &[1.0]).is_err());
        assert!(correlation(&[1.0, 2.0], &[1.0]).is_err());
    }
}
