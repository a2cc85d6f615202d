//! Brute-force exact quantities on enumerable state spaces.
//!
//! The marginal of the noised chain is kept unnormalized:
//! `log p̄_t(x) = log Σ_{x0} p_{t|0}(x0 | x) p̄(x0)`, which equals `log p_t(x)`
//! up to the constant `log Z` that cancels in every score.

use rand::Rng;

use crate::energy::{check_capacity, EnergyModel, SequenceState, DEFAULT_STATE_CAP};
use crate::error::{invalid, Result};
use crate::kernel::{matrix_exponential_oracle, single_token_kernel};
use crate::math::{log_sum_exp, LogSumExp};
use crate::par;
use crate::score::ConcreteScoreMatrix;

const CHUNK: usize = 4096;

/// `log p̄` for every state of an enumerable model, with cached token digits.
#[derive(Clone, Debug)]
pub struct ExactOracle {
    dim: usize,
    vocab: usize,
    log_p: Vec<f64>,
    // flattened tokens of every state; empty for binary models
    digits: Vec<u8>,
}

impl ExactOracle {
    pub fn new<M: EnergyModel + ?Sized>(model: &M, cap: u64) -> Result<Self> {
        let (dim, vocab) = model.dims();
        let n = check_capacity(dim, vocab, cap)? as usize;
        let log_p = par::map_range(n, |k| {
            model.log_density(SequenceState::from_index(k as u64, dim, vocab).tokens())
        });
        let digits = if vocab == 2 {
            Vec::new()
        } else {
            (0..n).flat_map(|k| SequenceState::from_index(k as u64, dim, vocab).into_tokens()).collect()
        };
        Ok(Self { dim, vocab, log_p, digits })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim, self.vocab)
    }

    pub fn len(&self) -> usize {
        self.log_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_p.is_empty()
    }

    pub fn log_densities(&self) -> &[f64] {
        &self.log_p
    }

    fn distance(&self, a: usize, tokens_b: &[u8], index_b: usize) -> usize {
        if self.vocab == 2 {
            (a ^ index_b).count_ones() as usize
        } else {
            let da = &self.digits[a * self.dim..(a + 1) * self.dim];
            da.iter().zip(tokens_b).filter(|(x, y)| x != y).count()
        }
    }

    /// `log Σ_{x0} p_{t|0}(x0 | x) p̄(x0)` at cumulative noise `ā`.
    pub fn log_marginal(&self, a_bar: f64, tokens: &[u8]) -> Result<f64> {
        if tokens.len() != self.dim || tokens.iter().any(|&t| t as usize >= self.vocab) {
            return invalid("state does not match the oracle's model");
        }
        let kernel = single_token_kernel(a_bar, self.vocab)?;
        let by_distance: Vec<f64> = (0..=self.dim).map(|k| kernel.log_prob_at_distance(k, self.dim)).collect();
        let index = crate::energy::state_index(tokens, self.vocab) as usize;
        let chunks = self.log_p.len().div_ceil(CHUNK);
        let partial = par::map_range(chunks, |c| {
            let mut acc = LogSumExp::default();
            let hi = ((c + 1) * CHUNK).min(self.log_p.len());
            for k in c * CHUNK..hi {
                acc.push(by_distance[self.distance(k, tokens, index)] + self.log_p[k]);
            }
            acc.value()
        });
        Ok(log_sum_exp(&partial))
    }

    /// Exact concrete scores of `x` at cumulative noise `ā`.
    pub fn concrete_score(&self, a_bar: f64, x: &SequenceState) -> Result<ConcreteScoreMatrix> {
        let base = self.log_marginal(a_bar, x.tokens())?;
        let v = self.vocab;
        let mut scores = vec![0.0; self.dim * v];
        let mut moved = x.tokens().to_vec();
        for i in 0..self.dim {
            let own = moved[i];
            for u in 0..v as u8 {
                if u != own {
                    moved[i] = u;
                    scores[i * v + u as usize] = self.log_marginal(a_bar, &moved)? - base;
                }
            }
            moved[i] = own;
        }
        ConcreteScoreMatrix::new(x.clone(), a_bar, scores)
    }

    /// Log marginals of every state, in lexicographic order, by the identity route.
    pub fn all_log_marginals(&self, a_bar: f64) -> Result<Vec<f64>> {
        single_token_kernel(a_bar, self.vocab)?;
        let n = self.log_p.len();
        let out = par::map_range(n, |k| {
            let x = SequenceState::from_index(k as u64, self.dim, self.vocab);
            self.log_marginal(a_bar, x.tokens()).expect("enumerated state is valid")
        });
        Ok(out)
    }

    pub fn target(&self) -> ExactDistributionTable {
        ExactDistributionTable::from_log_masses(self.dim, self.vocab, self.log_p.clone())
    }
}

/// The normalized target distribution.
#[derive(Clone, Debug)]
pub struct ExactDistributionTable {
    pub dim: usize,
    pub vocab: usize,
    pub log_masses: Vec<f64>,
    pub log_normalizer: f64,
    pub(crate) cumulative: Vec<f64>,
}

impl ExactDistributionTable {
    pub fn from_log_masses(dim: usize, vocab: usize, log_masses: Vec<f64>) -> Self {
        let log_normalizer = log_sum_exp(&log_masses);
        let mut cumulative = Vec::with_capacity(log_masses.len());
        let mut acc = 0.0;
        for &lm in &log_masses {
            acc += (lm - log_normalizer).exp();
            cumulative.push(acc);
        }
        Self { dim, vocab, log_masses, log_normalizer, cumulative }
    }

    pub fn len(&self) -> usize {
        self.log_masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_masses.is_empty()
    }

    pub fn prob(&self, index: usize) -> f64 {
        (self.log_masses[index] - self.log_normalizer).exp()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.prob(k)).collect()
    }

    /// Draws an exact sample by inverse-CDF lookup.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SequenceState {
        let total = *self.cumulative.last().expect("non-empty table");
        let u = rng.random::<f64>() * total;
        let k = self.cumulative.partition_point(|&c| c <= u).min(self.len() - 1);
        SequenceState::from_index(k as u64, self.dim, self.vocab)
    }
}

pub fn exact_log_marginal<M: EnergyModel + ?Sized>(model: &M, a_bar: f64, x: &SequenceState) -> Result<f64> {
    model.check_state(x)?;
    ExactOracle::new(model, DEFAULT_STATE_CAP)?.log_marginal(a_bar, x.tokens())
}

pub fn exact_concrete_score<M: EnergyModel + ?Sized>(
    model: &M,
    a_bar: f64,
    x: &SequenceState,
) -> Result<ConcreteScoreMatrix> {
    model.check_state(x)?;
    ExactOracle::new(model, DEFAULT_STATE_CAP)?.concrete_score(a_bar, x)
}

pub fn exact_target_distribution<M: EnergyModel + ?Sized>(model: &M) -> Result<ExactDistributionTable> {
    Ok(ExactOracle::new(model, DEFAULT_STATE_CAP)?.target())
}

/// Log marginals of the noised chain by pushing the target forward through
/// the per-coordinate transition matrix, one coordinate at a time.
///
/// This is the definitional route `p_t = K^{⊗d} p_0`; the per-coordinate
/// matrix comes from [`matrix_exponential_oracle`], so the result shares no
/// arithmetic with [`ExactOracle::log_marginal`]. Values carry the same
/// unnormalized offset as the input.
pub fn pushforward_log_marginals(log_p: &[f64], dim: usize, vocab: usize, a_bar: f64) -> Result<Vec<f64>> {
    let n = check_capacity(dim, vocab, DEFAULT_STATE_CAP)? as usize;
    if log_p.len() != n {
        return invalid(format!("expected {n} log masses, got {}", log_p.len()));
    }
    let k = matrix_exponential_oracle(a_bar, vocab)?;
    let max = log_p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut mass: Vec<f64> = log_p.iter().map(|&l| (l - max).exp()).collect();
    let mut next = vec![0.0; n];
    let mut stride = n / vocab;
    for _ in 0..dim {
        let block = stride * vocab;
        for base in (0..n).step_by(block) {
            for offset in 0..stride {
                for to in 0..vocab {
                    let mut acc = 0.0;
                    for from in 0..vocab {
                        acc += k[to * vocab + from] * mass[base + from * stride + offset];
                    }
                    next[base + to * stride + offset] = acc;
                }
            }
        }
        std::mem::swap(&mut mass, &mut next);
        stride /= vocab.max(1);
        if stride == 0 {
            stride = 1;
        }
    }
    Ok(mass.iter().map(|&m| m.ln() + max).collect())
}
