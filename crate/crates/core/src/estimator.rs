//! Monte-Carlo concrete scores from the target concrete score identity.
//!
//! Kernel symmetry gives `p_t(x) ∝ E_{x0 ~ p_{t|0}(·|x)}[p̄(x0)]`, so the
//! unnormalized marginal is estimated by noising `x` forward `N` times and
//! summing Boltzmann factors:
//!
//! ```text
//! p̂̄_t(x) = Σ_{i=1..N} p̄(x0^i),   x0^i ~ p_{t|0}(· | x)
//! ```
//!
//! This estimates `N·p̄_t(x)`; the factor `N` cancels in every score ratio.
//! Scores are differences of log estimates, each marginal with its own samples.

use rand::Rng;

use crate::energy::{EnergyModel, SequenceState};
use crate::error::{invalid, Error, Result};
use crate::kernel::{for_each_move, noise_in_place, single_token_kernel, SingleTokenKernel};
use crate::math::LogSumExp;
use crate::par;
use crate::rng::{fork_seed, stream};
use crate::score::ConcreteScoreMatrix;

/// A Monte-Carlo concrete score estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct McScoreEstimate {
    pub scores: ConcreteScoreMatrix,
    pub sample_count: usize,
}

impl McScoreEstimate {
    pub fn a_bar(&self) -> f64 {
        self.scores.a_bar
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EstimatorOptions {
    /// Reuse one random stream for every marginal of a score matrix.
    pub common_random_numbers: bool,
}

/// `log Σ_i p̄(x0^i)` over `n` forward draws from `tokens`.
pub(crate) fn log_marginal_sum<M, R>(
    model: &M,
    tokens: &[u8],
    kernel: &SingleTokenKernel,
    n: usize,
    rng: &mut R,
    scratch: &mut Vec<u8>,
) -> f64
where
    M: EnergyModel + ?Sized,
    R: Rng + ?Sized,
{
    let mut acc = LogSumExp::default();
    if !(model.local_flips() && kernel.is_sparse()) {
        for _ in 0..n {
            scratch.clear();
            scratch.extend_from_slice(tokens);
            noise_in_place(scratch, kernel, rng);
            acc.push(model.log_density(scratch));
        }
        return acc.value();
    }
    scratch.clear();
    scratch.extend_from_slice(tokens);
    let base = model.log_density(tokens);
    let mut undo: Vec<(usize, u8)> = Vec::with_capacity(tokens.len());
    for _ in 0..n {
        let mut delta = 0.0;
        for_each_move(scratch, kernel, rng, |s, i, u| {
            delta += model.flip_delta(s, i, u);
            undo.push((i, s[i]));
            s[i] = u;
        });
        acc.push(base + delta);
        for &(i, old) in undo.iter().rev() {
            scratch[i] = old;
        }
        undo.clear();
    }
    acc.value()
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        return invalid("Monte-Carlo sample count must be at least 1");
    }
    Ok(())
}

/// Log of the summed Boltzmann factors of `n` forward draws from `x`.
pub fn estimate_log_unnorm_marginal<M, R>(model: &M, x: &SequenceState, a_bar: f64, n: usize, rng: &mut R) -> Result<f64>
where
    M: EnergyModel + ?Sized,
    R: Rng + ?Sized,
{
    check_count(n)?;
    model.check_state(x)?;
    let kernel = single_token_kernel(a_bar, x.vocab())?;
    let mut scratch = Vec::with_capacity(x.dim());
    Ok(log_marginal_sum(model, x.tokens(), &kernel, n, rng, &mut scratch))
}

pub fn estimate_concrete_score<M, R>(
    model: &M,
    x: &SequenceState,
    a_bar: f64,
    n: usize,
    rng: &mut R,
) -> Result<McScoreEstimate>
where
    M: EnergyModel + ?Sized,
    R: Rng + ?Sized,
{
    estimate_concrete_score_with(model, x, a_bar, n, EstimatorOptions::default(), rng)
}

/// Monte-Carlo concrete scores for every 1-Hamming neighbour of `x`.
///
/// Marginal `j` (0 for `x`, then neighbours in `(site, token)` order) draws
/// from its own stream keyed by a seed taken from `rng`, so the result does
/// not depend on worker scheduling.
pub fn estimate_concrete_score_with<M, R>(
    model: &M,
    x: &SequenceState,
    a_bar: f64,
    n: usize,
    options: EstimatorOptions,
    rng: &mut R,
) -> Result<McScoreEstimate>
where
    M: EnergyModel + ?Sized,
    R: Rng + ?Sized,
{
    check_count(n)?;
    model.check_state(x)?;
    let kernel = single_token_kernel(a_bar, x.vocab())?;
    let base_seed = fork_seed(rng);
    let (d, v) = (x.dim(), x.vocab());
    let neighbours: Vec<(usize, u8)> = (0..d)
        .flat_map(|i| (0..v as u8).map(move |u| (i, u)))
        .filter(|&(i, u)| x.tokens()[i] != u)
        .collect();
    let logs = par::map_range(neighbours.len() + 1, |j| {
        let mut r = stream(base_seed, &[if options.common_random_numbers { 0 } else { j as u64 }]);
        let mut tokens = x.tokens().to_vec();
        if j > 0 {
            let (i, u) = neighbours[j - 1];
            tokens[i] = u;
        }
        let mut scratch = Vec::with_capacity(d);
        log_marginal_sum(model, &tokens, &kernel, n, &mut r, &mut scratch)
    });
    let mut values = vec![0.0; d * v];
    for (&(i, u), &lm) in neighbours.iter().zip(&logs[1..]) {
        values[i * v + u as usize] = lm - logs[0];
    }
    Ok(McScoreEstimate { scores: ConcreteScoreMatrix::new(x.clone(), a_bar, values)?, sample_count: n })
}

/// Softmax of log Boltzmann factors: the self-normalized importance weights.
pub fn snis_weights(log_boltzmann: &[f64]) -> Result<Vec<f64>> {
    if log_boltzmann.is_empty() {
        return invalid("no importance weights to normalize");
    }
    if log_boltzmann.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return invalid("log weights must be finite or -inf");
    }
    let max = log_boltzmann.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Degenerate("every log weight is -inf".into()));
    }
    let w: Vec<f64> = log_boltzmann.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{enumerate_states, IsingModel, Shifted};
    use crate::math::{mean_std, median};
    use crate::oracle::ExactOracle;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ising2() -> IsingModel {
        IsingModel::new(2, 0.4407, true).unwrap()
    }

    #[test]
    fn zero_noise_is_exact() {
        let m = ising2();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = SequenceState::new(vec![1, 1, 0, 1], 2).unwrap();
        for n in [1, 7, 100] {
            let est = estimate_log_unnorm_marginal(&m, &x, 0.0, n, &mut rng).unwrap();
            let expected = (n as f64).ln() + m.log_unnormalized(&x).unwrap();
            assert!((est - expected).abs() < 1e-12);
            let s = estimate_concrete_score(&m, &x, 0.0, n, &mut rng).unwrap();
            for (i, v, val) in s.scores.neighbors() {
                assert!((val - m.flip_log_delta(&x, i, v).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_zero_samples() {
        let m = ising2();
        let x = SequenceState::new(vec![0; 4], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(estimate_log_unnorm_marginal(&m, &x, 0.1, 0, &mut rng).is_err());
        assert!(estimate_concrete_score(&m, &x, 0.1, 0, &mut rng).is_err());
    }

    #[test]
    fn marginal_estimate_matches_oracle() {
        let m = ising2();
        let o = ExactOracle::new(&m, 1 << 20).unwrap();
        let x = SequenceState::new(vec![1, 0, 1, 1], 2).unwrap();
        let a_bar = 0.3;
        let exact = o.log_marginal(a_bar, x.tokens()).unwrap().exp();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // per-draw Boltzmann factors give the standard error of the mean
        let kernel = single_token_kernel(a_bar, 2).unwrap();
        let mut scratch = Vec::new();
        let draws: Vec<f64> = (0..n)
            .map(|_| log_marginal_sum(&m, x.tokens(), &kernel, 1, &mut rng, &mut scratch).exp())
            .collect();
        let (mean, sd) = mean_std(&draws);
        assert!((mean - exact).abs() < 3.0 * sd / (n as f64).sqrt());
        let est = estimate_log_unnorm_marginal(&m, &x, a_bar, n, &mut rng).unwrap();
        assert!(((est - (n as f64).ln()).exp() - exact).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn estimator_spread_shrinks_with_samples() {
        let m = ising2();
        let x = SequenceState::new(vec![1, 0, 0, 1], 2).unwrap();
        let spread = |n: usize| {
            let vals: Vec<f64> = (0..100)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    (estimate_log_unnorm_marginal(&m, &x, 0.3, n, &mut rng).unwrap() - (n as f64).ln()).exp()
                })
                .collect();
            mean_std(&vals).1
        };
        let ratio = spread(1_000) / spread(10_000);
        assert!(ratio > 10f64.sqrt() * 0.7 && ratio < 10f64.sqrt() * 1.4, "ratio {ratio}");
    }

    #[test]
    fn uniform_limit_scores_vanish() {
        let m = ising2();
        let x = SequenceState::new(vec![1, 1, 1, 0], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = estimate_concrete_score(&m, &x, 50.0, 100_000, &mut rng).unwrap();
        let entries: Vec<f64> = s.scores.neighbors().map(|(_, _, v)| v.abs()).collect();
        assert!(median(&entries) < 0.05);
    }

    #[test]
    fn scores_shift_invariant_and_deterministic() {
        let m = ising2();
        let shifted = Shifted { inner: ising2(), offset: -40.0 };
        let x = SequenceState::new(vec![1, 0, 1, 0], 2).unwrap();
        let a = estimate_concrete_score(&m, &x, 0.2, 500, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = estimate_concrete_score(&shifted, &x, 0.2, 500, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = estimate_concrete_score(&m, &x, 0.2, 500, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for (p, q) in a.scores.values().iter().zip(b.scores.values()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(a, c);
        for (i, &t) in x.tokens().iter().enumerate() {
            assert_eq!(a.scores.get(i, t), 0.0);
        }
    }

    #[test]
    fn common_random_numbers_reduce_error() {
        let m = ising2();
        let o = ExactOracle::new(&m, 1 << 20).unwrap();
        let mut errs = [Vec::new(), Vec::new()];
        for x in enumerate_states(4, 2, 1 << 20).unwrap() {
            let exact = o.concrete_score(0.1, &x).unwrap();
            for (k, crn) in [false, true].into_iter().enumerate() {
                let opts = EstimatorOptions { common_random_numbers: crn };
                for seed in 0..20 {
                    let mut rng = ChaCha8Rng::seed_from_u64(x.index() * 100 + seed);
                    let est = estimate_concrete_score_with(&m, &x, 0.1, 200, opts, &mut rng).unwrap();
                    for ((_, _, e), (_, _, g)) in est.scores.neighbors().zip(exact.neighbors()) {
                        errs[k].push((e - g).abs());
                    }
                }
            }
        }
        assert!(median(&errs[1]) < median(&errs[0]));
    }

    #[test]
    fn snis_examples() {
        let w = snis_weights(&[0.3; 8]).unwrap();
        assert!(w.iter().all(|x| (x - 0.125).abs() < 1e-15));
        let w = snis_weights(&[0.0, 50.0, 0.0]).unwrap();
        assert!(w[1] >= 1.0 - 1e-10);
        let base = [0.1, -3.0, 2.2, 0.7];
        let shifted: Vec<f64> = base.iter().map(|x| x + 17.5).collect();
        let (a, b) = (snis_weights(&base).unwrap(), snis_weights(&shifted).unwrap());
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(matches!(snis_weights(&[f64::NEG_INFINITY; 2]), Err(Error::Degenerate(_))));
        assert!(snis_weights(&[]).is_err());
    }
}
