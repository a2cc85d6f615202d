use crate::energy::SequenceState;
use crate::error::{invalid, Result};

/// Log concrete scores of a state against its 1-Hamming neighbours.
///
/// Entry `(i, v)` is `log p_t(x with token i := v) − log p_t(x)`; entries at
/// `(i, x_i)` are exactly zero. Stored row-major as `d × V`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcreteScoreMatrix {
    pub base_state: SequenceState,
    /// Cumulative forward noise `ā` the scores refer to.
    pub a_bar: f64,
    log_scores: Vec<f64>,
}

impl ConcreteScoreMatrix {
    /// Wraps raw values, forcing the self-token entries to zero.
    pub fn new(base_state: SequenceState, a_bar: f64, mut log_scores: Vec<f64>) -> Result<Self> {
        let (d, v) = (base_state.dim(), base_state.vocab());
        if log_scores.len() != d * v {
            return invalid(format!("score matrix has {} entries, expected {}", log_scores.len(), d * v));
        }
        for (i, &t) in base_state.tokens().iter().enumerate() {
            log_scores[i * v + t as usize] = 0.0;
        }
        Ok(Self { base_state, a_bar, log_scores })
    }

    pub fn dim(&self) -> usize {
        self.base_state.dim()
    }

    pub fn vocab(&self) -> usize {
        self.base_state.vocab()
    }

    pub fn get(&self, site: usize, token: u8) -> f64 {
        self.log_scores[site * self.vocab() + token as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.log_scores
    }

    /// Off-diagonal `(site, token, log score)` triples.
    pub fn neighbors(&self) -> impl Iterator<Item = (usize, u8, f64)> + '_ {
        let v = self.vocab();
        self.base_state.tokens().iter().enumerate().flat_map(move |(i, &t)| {
            (0..v as u8).filter(move |&u| u != t).map(move |u| (i, u, self.log_scores[i * v + u as usize]))
        })
    }

    pub fn all_finite(&self) -> bool {
        self.log_scores.iter().all(|x| x.is_finite())
    }
}
