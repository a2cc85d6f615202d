//! Unnormalized target densities over token sequences.
//!
//! Everything here works in log space: a model reports `log p̄(x)` and the
//! exact change of `log p̄` under a single-token substitution. The partition
//! function is never computed in this module.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default cap on the number of states any enumeration may visit.
pub const DEFAULT_STATE_CAP: u64 = 1 << 20;

/// A point of `{0,…,V−1}^d`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SequenceState {
    tokens: Vec<u8>,
    vocab: usize,
}

impl SequenceState {
    pub fn new(tokens: Vec<u8>, vocab: usize) -> Result<Self> {
        check_vocab(vocab)?;
        if tokens.is_empty() {
            return invalid("a state needs at least one token");
        }
        if let Some(pos) = tokens.iter().position(|&t| t as usize >= vocab) {
            return invalid(format!("token {} at position {pos} is not below vocab {vocab}", tokens[pos]));
        }
        Ok(Self { tokens, vocab })
    }

    /// Builds a state without validating tokens. Callers guarantee the invariant.
    pub(crate) fn from_raw(tokens: Vec<u8>, vocab: usize) -> Self {
        debug_assert!(tokens.iter().all(|&t| (t as usize) < vocab));
        Self { tokens, vocab }
    }

    pub fn uniform<R: Rng + ?Sized>(dim: usize, vocab: usize, rng: &mut R) -> Self {
        let tokens = (0..dim).map(|_| rng.random_range(0..vocab) as u8).collect();
        Self { tokens, vocab }
    }

    /// The `index`-th state in lexicographic order (token 0 most significant).
    pub fn from_index(mut index: u64, dim: usize, vocab: usize) -> Self {
        let mut tokens = vec![0u8; dim];
        for slot in tokens.iter_mut().rev() {
            *slot = (index % vocab as u64) as u8;
            index /= vocab as u64;
        }
        Self { tokens, vocab }
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }

    pub fn into_tokens(self) -> Vec<u8> {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.tokens.len()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    /// Lexicographic position of this state, the inverse of [`Self::from_index`].
    pub fn index(&self) -> u64 {
        state_index(&self.tokens, self.vocab)
    }

    /// Copy with token `site` replaced by `token`.
    pub fn with_token(&self, site: usize, token: u8) -> Self {
        let mut tokens = self.tokens.clone();
        tokens[site] = token;
        Self { tokens, vocab: self.vocab }
    }

    /// Maps every token `v` to `V−1−v`; for binary models this is the global spin flip.
    pub fn inverted(&self) -> Self {
        let top = (self.vocab - 1) as u8;
        Self { tokens: self.tokens.iter().map(|&t| top - t).collect(), vocab: self.vocab }
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.tokens.iter().zip(&other.tokens).filter(|(a, b)| a != b).count()
    }
}

pub(crate) fn check_vocab(vocab: usize) -> Result<()> {
    if !(2..=256).contains(&vocab) {
        return invalid(format!("vocabulary size {vocab} outside 2..=256"));
    }
    Ok(())
}

pub fn state_index(tokens: &[u8], vocab: usize) -> u64 {
    tokens.iter().fold(0u64, |acc, &t| acc * vocab as u64 + t as u64)
}

/// Number of states `V^d`, or `None` when it does not fit in a `u64`.
pub fn state_count(dim: usize, vocab: usize) -> Option<u64> {
    (vocab as u64).checked_pow(u32::try_from(dim).ok()?)
}

pub fn check_capacity(dim: usize, vocab: usize, cap: u64) -> Result<u64> {
    match state_count(dim, vocab) {
        Some(n) if n <= cap => Ok(n),
        _ => Err(Error::Capacity { states: (vocab as f64).powi(dim as i32), cap }),
    }
}

/// An unnormalized density `p̄` on `{0,…,V−1}^d`, exposed in log space.
///
/// `log_density` and `flip_delta` are the unchecked hot-path entry points;
/// they may panic on malformed input. The `log_unnormalized` and
/// `flip_log_delta` wrappers validate first.
pub trait EnergyModel: Send + Sync {
    /// `(d, V)`.
    fn dims(&self) -> (usize, usize);

    fn log_density(&self, tokens: &[u8]) -> f64;

    /// `log p̄(x with token site := token) − log p̄(x)`.
    fn flip_delta(&self, tokens: &[u8], site: usize, token: u8) -> f64 {
        if tokens[site] == token {
            return 0.0;
        }
        let mut moved = tokens.to_vec();
        moved[site] = token;
        self.log_density(&moved) - self.log_density(tokens)
    }

    /// Gradient of a continuous relaxation of `log p̄` at `x`, if the model has one.
    fn relaxed_gradient(&self, _tokens: &[u8]) -> Option<Vec<f64>> {
        None
    }

    /// True when `flip_delta` is cheaper than a fresh `log_density`.
    fn local_flips(&self) -> bool {
        false
    }

    fn log_unnormalized(&self, x: &SequenceState) -> Result<f64> {
        self.check_state(x)?;
        Ok(self.log_density(x.tokens()))
    }

    fn flip_log_delta(&self, x: &SequenceState, site: usize, token: u8) -> Result<f64> {
        self.check_state(x)?;
        let (d, v) = self.dims();
        if site >= d {
            return invalid(format!("site {site} out of range for dimension {d}"));
        }
        if token as usize >= v {
            return invalid(format!("token {token} out of range for vocab {v}"));
        }
        Ok(self.flip_delta(x.tokens(), site, token))
    }

    fn check_state(&self, x: &SequenceState) -> Result<()> {
        let (d, v) = self.dims();
        if x.dim() != d || x.vocab() != v {
            return invalid(format!(
                "state has shape ({}, {}) but model expects ({d}, {v})",
                x.dim(),
                x.vocab()
            ));
        }
        Ok(())
    }
}

impl<M: EnergyModel + ?Sized> EnergyModel for &M {
    fn dims(&self) -> (usize, usize) {
        (**self).dims()
    }
    fn log_density(&self, tokens: &[u8]) -> f64 {
        (**self).log_density(tokens)
    }
    fn flip_delta(&self, tokens: &[u8], site: usize, token: u8) -> f64 {
        (**self).flip_delta(tokens, site, token)
    }
    fn relaxed_gradient(&self, tokens: &[u8]) -> Option<Vec<f64>> {
        (**self).relaxed_gradient(tokens)
    }
    fn local_flips(&self) -> bool {
        (**self).local_flips()
    }
}

impl<M: EnergyModel + ?Sized> EnergyModel for Box<M> {
    fn dims(&self) -> (usize, usize) {
        (**self).dims()
    }
    fn log_density(&self, tokens: &[u8]) -> f64 {
        (**self).log_density(tokens)
    }
    fn flip_delta(&self, tokens: &[u8], site: usize, token: u8) -> f64 {
        (**self).flip_delta(tokens, site, token)
    }
    fn relaxed_gradient(&self, tokens: &[u8]) -> Option<Vec<f64>> {
        (**self).relaxed_gradient(tokens)
    }
    fn local_flips(&self) -> bool {
        (**self).local_flips()
    }
}

/// Square-lattice Ising model without external field.
///
/// Tokens map to spins by `s = 2x − 1` and `log p̄(x) = β Σ_{⟨i,j⟩} s_i s_j`
/// with every lattice bond counted once. On a periodic lattice there are
/// `2L²` bonds; for `L = 2` the wrap-around bond and the direct bond join the
/// same pair of sites and both are counted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsingModel {
    side: usize,
    beta: f64,
    periodic: bool,
    #[serde(skip)]
    edges: Vec<(u32, u32)>,
    #[serde(skip)]
    neighbors: Vec<Vec<u32>>,
}

impl IsingModel {
    pub fn new(side: usize, beta: f64, periodic: bool) -> Result<Self> {
        if side < 2 {
            return invalid(format!("lattice side {side} must be at least 2"));
        }
        if !(beta >= 0.0) || !beta.is_finite() {
            return invalid(format!("inverse temperature {beta} must be finite and non-negative"));
        }
        let n = side * side;
        let mut edges = Vec::with_capacity(2 * n);
        for r in 0..side {
            for c in 0..side {
                let i = (r * side + c) as u32;
                if c + 1 < side || periodic {
                    edges.push((i, (r * side + (c + 1) % side) as u32));
                }
                if r + 1 < side || periodic {
                    edges.push((i, (((r + 1) % side) * side + c) as u32));
                }
            }
        }
        let mut neighbors = vec![Vec::with_capacity(4); n];
        for &(a, b) in &edges {
            neighbors[a as usize].push(b);
            neighbors[b as usize].push(a);
        }
        Ok(Self { side, beta, periodic, edges, neighbors })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn periodic(&self) -> bool {
        self.periodic
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    /// Sites bonded to `site`, with multiplicity.
    pub fn neighbors(&self, site: usize) -> &[u32] {
        &self.neighbors[site]
    }

    fn local_field(&self, tokens: &[u8], site: usize) -> f64 {
        self.neighbors[site].iter().map(|&j| spin(tokens[j as usize])).sum()
    }
}

#[inline]
fn spin(token: u8) -> f64 {
    2.0 * token as f64 - 1.0
}

impl EnergyModel for IsingModel {
    fn dims(&self) -> (usize, usize) {
        (self.side * self.side, 2)
    }

    fn log_density(&self, tokens: &[u8]) -> f64 {
        let aligned = self
            .edges
            .iter()
            .filter(|&&(a, b)| tokens[a as usize] == tokens[b as usize])
            .count() as i64;
        let bonds = self.edges.len() as i64;
        self.beta * (2 * aligned - bonds) as f64
    }

    fn flip_delta(&self, tokens: &[u8], site: usize, token: u8) -> f64 {
        let old = tokens[site];
        if old == token {
            return 0.0;
        }
        self.beta * (spin(token) - spin(old)) * self.local_field(tokens, site)
    }

    /// Gradient in token coordinates of `β Σ (2x_i−1)(2x_j−1)` on `[0,1]^d`.
    fn relaxed_gradient(&self, tokens: &[u8]) -> Option<Vec<f64>> {
        Some((0..tokens.len()).map(|i| 2.0 * self.beta * self.local_field(tokens, i)).collect())
    }

    fn local_flips(&self) -> bool {
        true
    }
}

/// Adds a constant to another model's log density.
#[derive(Clone, Debug)]
pub struct Shifted<M> {
    pub inner: M,
    pub offset: f64,
}

impl<M: EnergyModel> EnergyModel for Shifted<M> {
    fn dims(&self) -> (usize, usize) {
        self.inner.dims()
    }
    fn log_density(&self, tokens: &[u8]) -> f64 {
        self.inner.log_density(tokens) + self.offset
    }
    fn flip_delta(&self, tokens: &[u8], site: usize, token: u8) -> f64 {
        self.inner.flip_delta(tokens, site, token)
    }
    fn relaxed_gradient(&self, tokens: &[u8]) -> Option<Vec<f64>> {
        self.inner.relaxed_gradient(tokens)
    }
    fn local_flips(&self) -> bool {
        self.inner.local_flips()
    }
}

/// A density given by an explicit table of log masses indexed lexicographically.
#[derive(Clone, Debug)]
pub struct TableModel {
    dim: usize,
    vocab: usize,
    log_masses: Vec<f64>,
}

impl TableModel {
    pub fn new(dim: usize, vocab: usize, log_masses: Vec<f64>) -> Result<Self> {
        check_vocab(vocab)?;
        let n = check_capacity(dim, vocab, DEFAULT_STATE_CAP)?;
        if log_masses.len() as u64 != n {
            return invalid(format!("table has {} entries, expected {n}", log_masses.len()));
        }
        if log_masses.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return invalid("table log masses must be finite or -inf");
        }
        Ok(Self { dim, vocab, log_masses })
    }
}

impl EnergyModel for TableModel {
    fn dims(&self) -> (usize, usize) {
        (self.dim, self.vocab)
    }
    fn log_density(&self, tokens: &[u8]) -> f64 {
        self.log_masses[state_index(tokens, self.vocab) as usize]
    }
}

/// Lexicographic enumeration of `{0,…,V−1}^d`.
#[derive(Clone, Debug)]
pub struct StateIter {
    next: Option<Vec<u8>>,
    vocab: usize,
}

impl Iterator for StateIter {
    type Item = SequenceState;

    fn next(&mut self) -> Option<Self::Item> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let top = (self.vocab - 1) as u8;
        let mut carry = true;
        for slot in succ.iter_mut().rev() {
            if *slot < top {
                *slot += 1;
                carry = false;
                break;
            }
            *slot = 0;
        }
        if !carry {
            self.next = Some(succ);
        }
        Some(SequenceState::from_raw(current, self.vocab))
    }
}

/// Every state of `{0,…,V−1}^d` exactly once, lexicographically.
pub fn enumerate_states(dim: usize, vocab: usize, cap: u64) -> Result<StateIter> {
    check_vocab(vocab)?;
    if dim == 0 {
        return invalid("dimension must be positive");
    }
    check_capacity(dim, vocab, cap)?;
    Ok(StateIter { next: Some(vec![0; dim]), vocab })
}
