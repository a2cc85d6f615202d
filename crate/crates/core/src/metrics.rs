//! Lattice statistics and discrepancies between sample sets and exact tables.
//!
//! Spins use the `±1` convention: token 1 is `+1`, token 0 is `−1`.

use std::collections::HashMap;

use rand::Rng;

use serde::Serialize;

use crate::energy::{check_capacity, state_index, SequenceState, DEFAULT_STATE_CAP};
use crate::error::{invalid, Result};
use crate::oracle::ExactDistributionTable;
use crate::{par, rng};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorrelationCurve {
    /// `G(r)` for `r = 0..=floor(L/2)`.
    pub values: Vec<f64>,
    pub sample_count: usize,
}

impl CorrelationCurve {
    pub fn r_max(&self) -> usize {
        self.values.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MagnetizationHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub sample_count: usize,
}

impl MagnetizationHistogram {
    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Counts as fractions of the sample count.
    pub fn frequencies(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64 / self.sample_count as f64).collect()
    }
}

#[inline]
fn spin(token: u8) -> f64 {
    2.0 * token as f64 - 1.0
}

fn check_lattice<'a, I: IntoIterator<Item = &'a [u8]>>(rows: I, side: usize) -> Result<()> {
    for tokens in rows {
        if tokens.len() != side * side {
            return invalid(format!("sample of length {} is not an {side}×{side} lattice", tokens.len()));
        }
        if tokens.iter().any(|&t| t > 1) {
            return invalid("two-point correlation needs binary samples");
        }
    }
    Ok(())
}

/// `G(r)` under an arbitrary weighting of configurations (weights are normalized).
///
/// Averages `E[s_i s_{i+r}] − E[s_i] E[s_{i+r}]` over every site and both axes
/// with periodic displacement.
pub fn two_point_correlation_weighted(rows: &[(&[u8], f64)], side: usize) -> Result<CorrelationCurve> {
    if rows.is_empty() {
        return invalid("cannot compute correlations of an empty sample set");
    }
    if side == 0 {
        return invalid("lattice side must be positive");
    }
    check_lattice(rows.iter().map(|r| r.0), side)?;
    let total: f64 = rows.iter().map(|r| r.1).sum();
    if !(total.is_finite() && total > 0.0) || rows.iter().any(|r| r.1 < 0.0) {
        return invalid("weights must be non-negative with a positive finite sum");
    }
    let n_sites = side * side;
    let r_max = side / 2;
    let mut mean = vec![0.0; n_sites];
    // pair[r][axis][site]
    let mut pair = vec![vec![vec![0.0; n_sites]; 2]; r_max + 1];
    for &(tokens, w) in rows {
        let w = w / total;
        for i in 0..n_sites {
            mean[i] += w * spin(tokens[i]);
        }
        for (r, by_axis) in pair.iter_mut().enumerate() {
            for (axis, acc) in by_axis.iter_mut().enumerate() {
                for i in 0..n_sites {
                    let j = displaced(i, side, axis, r);
                    acc[i] += w * spin(tokens[i]) * spin(tokens[j]);
                }
            }
        }
    }
    let values = (0..=r_max)
        .map(|r| {
            let mut g = 0.0;
            for axis in 0..2 {
                for i in 0..n_sites {
                    let j = displaced(i, side, axis, r);
                    g += pair[r][axis][i] - mean[i] * mean[j];
                }
            }
            g / (2 * n_sites) as f64
        })
        .collect();
    Ok(CorrelationCurve { values, sample_count: rows.len() })
}

fn displaced(i: usize, side: usize, axis: usize, r: usize) -> usize {
    let (row, col) = (i / side, i % side);
    if axis == 0 {
        row * side + (col + r) % side
    } else {
        ((row + r) % side) * side + col
    }
}

pub fn two_point_correlation(samples: &[SequenceState], side: usize) -> Result<CorrelationCurve> {
    let rows: Vec<(&[u8], f64)> = samples.iter().map(|s| (s.tokens(), 1.0)).collect();
    two_point_correlation_weighted(&rows, side)
}

/// Histogram of `Σ_i s_i` over `bins` equal-width bins spanning `[−d − ½, d + ½]`.
///
/// With `bins = 2d + 1` every bin is centred on one integer.
pub fn magnetization_histogram(samples: &[SequenceState], bins: Option<usize>) -> Result<MagnetizationHistogram> {
    let Some(first) = samples.first() else {
        return invalid("cannot histogram an empty sample set");
    };
    let d = first.dim();
    let bins = bins.unwrap_or(2 * d + 1);
    if bins == 0 {
        return invalid("histogram needs at least one bin");
    }
    let lo = -(d as f64) - 0.5;
    let width = (2 * d + 1) as f64 / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for s in samples {
        if s.dim() != d || s.vocab() != 2 {
            return invalid("magnetization needs binary samples of one dimension");
        }
        let m: f64 = s.tokens().iter().map(|&t| spin(t)).sum();
        let k = (((m - lo) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(MagnetizationHistogram { edges, counts, sample_count: samples.len() })
}

/// `max_r |a(r) − b(r)|`.
pub fn curve_discrepancy(a: &CorrelationCurve, b: &CorrelationCurve) -> Result<f64> {
    if a.values.len() != b.values.len() {
        return invalid(format!("curves have r_max {} and {}", a.r_max(), b.r_max()));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Total-variation distance between two magnetization histograms with equal binning.
pub fn histogram_tv(a: &MagnetizationHistogram, b: &MagnetizationHistogram) -> Result<f64> {
    if a.edges != b.edges {
        return invalid("histograms use different binning");
    }
    Ok(0.5 * a.frequencies().iter().zip(b.frequencies()).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Empirical probability of each visited state, keyed by lexicographic index.
pub fn empirical_distribution(samples: &[SequenceState]) -> HashMap<u64, f64> {
    let mut counts: HashMap<u64, f64> = HashMap::new();
    for s in samples {
        *counts.entry(s.index()).or_default() += 1.0;
    }
    let n = samples.len() as f64;
    counts.values_mut().for_each(|c| *c /= n);
    counts
}

/// `½ Σ_x |empirical(x) − exact(x)|`.
pub fn tv_distance(samples: &[SequenceState], exact: &ExactDistributionTable) -> Result<f64> {
    check_capacity(exact.dim, exact.vocab, DEFAULT_STATE_CAP)?;
    if samples.is_empty() {
        return invalid("cannot compare an empty sample set");
    }
    let mut counts = vec![0u64; exact.len()];
    for s in samples {
        if s.dim() != exact.dim || s.vocab() != exact.vocab {
            return invalid("sample shape does not match the exact table");
        }
        counts[state_index(s.tokens(), s.vocab()) as usize] += 1;
    }
    let n = samples.len() as f64;
    Ok(0.5 * counts.iter().enumerate().map(|(k, &c)| (c as f64 / n - exact.prob(k)).abs()).sum::<f64>())
}

/// Correlation discrepancy between two disjoint halves of one sample set.
pub fn split_half_noise_floor(samples: &[SequenceState], side: usize) -> Result<f64> {
    if samples.len() < 2 {
        return invalid("noise floor needs at least two samples");
    }
    let half = samples.len() / 2;
    let a = two_point_correlation(&samples[..half], side)?;
    let b = two_point_correlation(&samples[half..2 * half], side)?;
    curve_discrepancy(&a, &b)
}

/// Bootstrap noise floor of a correlation curve: the 95th percentile of
/// `max_r |G_boot(r) − G(r)|` over `resamples` resamplings with replacement.
pub fn bootstrap_noise_floor(samples: &[SequenceState], side: usize, resamples: usize, seed: u64) -> Result<f64> {
    if resamples == 0 {
        return invalid("bootstrap needs at least one resample");
    }
    let base = two_point_correlation(samples, side)?;
    let n = samples.len();
    let mut spread = par::map_range(resamples, |b| -> Result<f64> {
        let mut r = rng::stream(seed, &[b as u64]);
        let boot: Vec<SequenceState> = (0..n).map(|_| samples[r.random_range(0..n)].clone()).collect();
        curve_discrepancy(&two_point_correlation(&boot, side)?, &base)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    spread.sort_by(f64::total_cmp);
    Ok(spread[((resamples as f64 * 0.95).ceil() as usize).clamp(1, resamples) - 1])
}
