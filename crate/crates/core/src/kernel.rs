//! The uniform noising kernel of the forward chain.
//!
//! Per coordinate the generator is `σ_t (J − V·I)`, so the transition matrix
//! after cumulative noise `ā` is `e^{ā(J − V·I)}`, which has the closed form
//!
//! ```text
//! p_stay  = 1/V + (1 − 1/V) e^{−Vā}
//! p_other = (1 − e^{−Vā}) / V
//! ```
//!
//! Sequence kernels factor over coordinates and are symmetric in their two
//! arguments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{check_vocab, SequenceState};
use crate::error::{invalid, Result};

const TIME_SLACK: f64 = 1e-12;

/// Shape of the noise rate `σ_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `σ_t = sigma`, so `ā(t) = sigma·t`.
    Constant { sigma: f64 },
    /// `ā(t) = a_min·((a_max/a_min)^{t/T} − 1)`.
    Geometric { a_min: f64, a_max: f64 },
}

/// Noise rate `σ_t` on `[0, T]` and its integral `ā(t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub horizon: f64,
}

impl NoiseSchedule {
    pub fn constant(sigma: f64, horizon: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return invalid(format!("constant rate {sigma} must be positive"));
        }
        check_horizon(horizon)?;
        Ok(Self { kind: ScheduleKind::Constant { sigma }, horizon })
    }

    /// Geometric schedule whose terminal kernel sits within `eps_uniform` of
    /// uniform: `p_stay(ā(T)) − 1/V = eps_uniform`.
    pub fn geometric(vocab: usize, eps_uniform: f64, a_min: f64, horizon: f64) -> Result<Self> {
        check_vocab(vocab)?;
        check_horizon(horizon)?;
        let v = vocab as f64;
        if !(eps_uniform > 0.0 && eps_uniform < 1.0 - 1.0 / v) {
            return invalid(format!("eps_uniform {eps_uniform} must lie in (0, 1 - 1/V)"));
        }
        if !(a_min > 0.0 && a_min.is_finite()) {
            return invalid(format!("a_min {a_min} must be positive"));
        }
        let terminal = terminal_noise(vocab, eps_uniform);
        Ok(Self { kind: ScheduleKind::Geometric { a_min, a_max: terminal + a_min }, horizon })
    }

    /// The default schedule: geometric, `eps_uniform = 1e-3`, `a_min = 1e-3`, `T = 1`.
    pub fn default_for(vocab: usize) -> Self {
        Self::geometric(vocab, 1e-3, 1e-3, 1.0).expect("default schedule parameters are valid")
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        if !(t >= -TIME_SLACK && t <= self.horizon + TIME_SLACK) {
            return invalid(format!("time {t} outside [0, {}]", self.horizon));
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    /// `ā(t) = ∫₀ᵗ σ_s ds`.
    pub fn cumulative(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::Constant { sigma } => sigma * t,
            ScheduleKind::Geometric { a_min, a_max } => {
                a_min * ((t / self.horizon) * (a_max / a_min).ln()).exp_m1()
            }
        })
    }

    /// `σ_t`.
    pub fn rate(&self, t: f64) -> Result<f64> {
        let t = self.check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::Constant { sigma } => sigma,
            ScheduleKind::Geometric { a_min, a_max } => {
                let log_ratio = (a_max / a_min).ln();
                a_min * log_ratio / self.horizon * ((t / self.horizon) * log_ratio).exp()
            }
        })
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return invalid(format!("horizon {horizon} must be positive"));
    }
    Ok(())
}

/// The `ā` at which `p_stay − 1/V = eps`.
pub fn terminal_noise(vocab: usize, eps: f64) -> f64 {
    let v = vocab as f64;
    ((1.0 - 1.0 / v) / eps).ln() / v
}

/// Per-coordinate transition probabilities after cumulative noise `ā`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SingleTokenKernel {
    pub p_stay: f64,
    pub p_other: f64,
    pub log_p_stay: f64,
    pub log_p_other: f64,
    pub vocab: usize,
}

impl SingleTokenKernel {
    /// Probability that a coordinate leaves its token.
    pub fn p_change(&self) -> f64 {
        (self.vocab - 1) as f64 * self.p_other
    }

    /// Log-probability of a sequence transition at Hamming distance `k` in dimension `d`.
    pub fn log_prob_at_distance(&self, k: usize, d: usize) -> f64 {
        let moved = if k == 0 { 0.0 } else { k as f64 * self.log_p_other };
        let kept = if k == d { 0.0 } else { (d - k) as f64 * self.log_p_stay };
        moved + kept
    }
}

pub fn single_token_kernel(a_bar: f64, vocab: usize) -> Result<SingleTokenKernel> {
    check_vocab(vocab)?;
    if !(a_bar >= 0.0) || a_bar.is_nan() {
        return invalid(format!("cumulative noise {a_bar} must be non-negative"));
    }
    let v = vocab as f64;
    // 1 − e^{−Vā} without cancellation for small ā
    let mixed = -(-v * a_bar).exp_m1();
    let p_other = mixed / v;
    let p_change = (v - 1.0) * p_other;
    let p_stay = 1.0 - p_change;
    Ok(SingleTokenKernel {
        p_stay,
        p_other,
        log_p_stay: (-p_change).ln_1p(),
        log_p_other: mixed.ln() - v.ln(),
        vocab,
    })
}

/// `e^{ā(J − V·I)}` by scaling and squaring of a truncated power series.
///
/// Independent of the closed form; used to validate it. Returned row-major.
pub fn matrix_exponential_oracle(a_bar: f64, vocab: usize) -> Result<Vec<f64>> {
    check_vocab(vocab)?;
    if vocab > 64 {
        return invalid(format!("matrix exponential oracle limited to V <= 64, got {vocab}"));
    }
    if !(a_bar >= 0.0) || !a_bar.is_finite() {
        return invalid(format!("cumulative noise {a_bar} must be finite and non-negative"));
    }
    let n = vocab;
    let mut generator = vec![a_bar; n * n];
    for i in 0..n {
        generator[i * n + i] = a_bar * (1.0 - n as f64);
    }
    // infinity norm of āQ is 2ā(V−1)
    let norm = 2.0 * a_bar * (n as f64 - 1.0);
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        squarings += 1;
    }
    generator.iter_mut().for_each(|g| *g *= scale);

    let mut result = identity(n);
    let mut term = identity(n);
    for k in 1..=24 {
        term = matmul(&term, &generator, n);
        term.iter_mut().for_each(|x| *x /= k as f64);
        result.iter_mut().zip(&term).for_each(|(r, t)| *r += t);
    }
    for _ in 0..squarings {
        result = matmul(&result, &result, n);
    }
    Ok(result)
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    (0..n).for_each(|i| m[i * n + i] = 1.0);
    m
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

/// `log p_{t|0}(x_b | x_a)` for cumulative noise `ā`; symmetric in its state arguments.
pub fn log_transition_prob(x_a: &SequenceState, x_b: &SequenceState, a_bar: f64) -> Result<f64> {
    if x_a.dim() != x_b.dim() || x_a.vocab() != x_b.vocab() {
        return invalid("transition between states of different shapes");
    }
    let kernel = single_token_kernel(a_bar, x_a.vocab())?;
    Ok(kernel.log_prob_at_distance(x_a.hamming(x_b), x_a.dim()))
}

/// Below this change probability moves are drawn by geometric skipping.
const SPARSE_BELOW: f64 = 0.12;

impl SingleTokenKernel {
    /// Whether draws move few enough coordinates to be visited one by one.
    pub fn is_sparse(&self) -> bool {
        self.p_change() < SPARSE_BELOW
    }
}

/// Visits the coordinates moved by one draw of the kernel from `tokens`, in
/// increasing site order, calling `apply(tokens, site, new_token)` for each.
/// `apply` is responsible for writing the new token.
#[inline]
pub fn for_each_move<R, F>(tokens: &mut [u8], kernel: &SingleTokenKernel, rng: &mut R, mut apply: F)
where
    R: Rng + ?Sized,
    F: FnMut(&mut [u8], usize, u8),
{
    let p_change = kernel.p_change();
    if p_change <= 0.0 {
        return;
    }
    let v = kernel.vocab;
    let pick = |old: u8, rng: &mut R| {
        if v == 2 {
            old ^ 1
        } else {
            let r = rng.random_range(0..v - 1) as u8;
            if r >= old {
                r + 1
            } else {
                r
            }
        }
    };
    let d = tokens.len();
    if p_change < SPARSE_BELOW {
        let log_stay = kernel.log_p_stay;
        let mut i = 0usize;
        loop {
            let u = 1.0 - rng.random::<f64>();
            let gap = (u.ln() / log_stay).floor();
            if !(gap < (d - i) as f64) {
                break;
            }
            i += gap as usize;
            let to = pick(tokens[i], rng);
            apply(tokens, i, to);
            i += 1;
            if i >= d {
                break;
            }
        }
    } else {
        for i in 0..d {
            if rng.random::<f64>() < p_change {
                let to = pick(tokens[i], rng);
                apply(tokens, i, to);
            }
        }
    }
}

/// Resamples `tokens` in place: every coordinate keeps its token with
/// probability `p_stay`, otherwise moves uniformly to one of the other `V−1`.
#[inline]
pub fn noise_in_place<R: Rng + ?Sized>(tokens: &mut [u8], kernel: &SingleTokenKernel, rng: &mut R) {
    if kernel.vocab == 2 && !kernel.is_sparse() {
        let p_change = kernel.p_change();
        for slot in tokens.iter_mut() {
            *slot ^= u8::from(rng.random::<f64>() < p_change);
        }
    } else {
        for_each_move(tokens, kernel, rng, |t, i, u| t[i] = u);
    }
}

/// Draws `x_t ~ p_{t|0}(· | x_0)` for cumulative noise `ā`.
pub fn sample_forward<R: Rng + ?Sized>(x0: &SequenceState, a_bar: f64, rng: &mut R) -> Result<SequenceState> {
    let kernel = single_token_kernel(a_bar, x0.vocab())?;
    let mut tokens = x0.tokens().to_vec();
    noise_in_place(&mut tokens, &kernel, rng);
    Ok(SequenceState::from_raw(tokens, x0.vocab()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn log_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64)).collect()
    }

    #[test]
    fn cumulative_examples() {
        let c = NoiseSchedule::constant(2.0, 1.0).unwrap();
        assert_eq!(c.cumulative(0.0).unwrap(), 0.0);
        assert_eq!(c.cumulative(0.5).unwrap(), 1.0);
        let g = NoiseSchedule::default_for(2);
        assert_eq!(g.cumulative(0.0).unwrap(), 0.0);
        let terminal = g.cumulative(1.0).unwrap();
        let k = single_token_kernel(terminal, 2).unwrap();
        assert!(k.p_stay - 0.5 <= 1e-3 + 1e-12);
        assert!((k.p_stay - 0.5 - 1e-3).abs() < 1e-12);
        assert!(g.cumulative(1.5).is_err());
        assert!(g.cumulative(-0.1).is_err());
    }

    #[test]
    fn geometric_is_increasing_and_rate_is_derivative() {
        for v in [2, 3, 5] {
            let g = NoiseSchedule::geometric(v, 1e-3, 1e-3, 1.0).unwrap();
            let mut prev = -1.0;
            for k in 0..=100 {
                let t = k as f64 / 100.0;
                let a = g.cumulative(t).unwrap();
                assert!(a > prev);
                prev = a;
            }
            for &t in &[0.1, 0.5, 0.9] {
                let h = 1e-6;
                let fd = (g.cumulative(t + h).unwrap() - g.cumulative(t - h).unwrap()) / (2.0 * h);
                assert!((fd - g.rate(t).unwrap()).abs() / fd < 1e-6);
            }
        }
    }

    #[test]
    fn kernel_examples() {
        let k = single_token_kernel(0.0, 4).unwrap();
        assert_eq!((k.p_stay, k.p_other), (1.0, 0.0));
        let k = single_token_kernel(50.0, 2).unwrap();
        assert!((k.p_stay - 0.5).abs() < 1e-12 && (k.p_other - 0.5).abs() < 1e-12);
        let k = single_token_kernel(2f64.ln() / 2.0, 2).unwrap();
        assert!((k.p_stay - 0.75).abs() < 1e-15 && (k.p_other - 0.25).abs() < 1e-15);
        assert!(single_token_kernel(-1e-3, 2).is_err());
    }

    #[test]
    fn kernel_normalization_and_ordering() {
        for v in [2, 3, 5, 17] {
            for a in log_grid(60, 1e-6, 50.0) {
                let k = single_token_kernel(a, v).unwrap();
                assert!((k.p_stay + (v - 1) as f64 * k.p_other - 1.0).abs() < 1e-12);
                let inv = 1.0 / v as f64;
                assert!(k.p_stay >= inv - 1e-15 && inv >= k.p_other - 1e-15 && k.p_other >= 0.0);
                assert!((k.log_p_stay - k.p_stay.ln()).abs() < 1e-12);
                assert!((k.log_p_other - k.p_other.ln()).abs() < 1e-10 * k.log_p_other.abs().max(1.0));
            }
        }
    }

    #[test]
    fn small_noise_has_no_cancellation() {
        let k = single_token_kernel(1e-12, 2).unwrap();
        assert!((k.p_other - 1e-12).abs() / 1e-12 < 1e-9);
    }

    #[test]
    fn chapman_kolmogorov() {
        for v in [2usize, 3, 5] {
            let vf = v as f64;
            for (a1, a2) in [(0.01, 0.3), (0.5, 0.5), (1e-5, 2.0), (3.0, 0.2)] {
                let k1 = single_token_kernel(a1, v).unwrap();
                let k2 = single_token_kernel(a2, v).unwrap();
                let k = single_token_kernel(a1 + a2, v).unwrap();
                let stay = k1.p_stay * k2.p_stay + (vf - 1.0) * k1.p_other * k2.p_other;
                let other = k1.p_stay * k2.p_other + k1.p_other * k2.p_stay + (vf - 2.0) * k1.p_other * k2.p_other;
                assert!((stay - k.p_stay).abs() < 1e-10);
                assert!((other - k.p_other).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn matrix_exponential_examples() {
        let m = matrix_exponential_oracle(0.0, 3).unwrap();
        assert_eq!(m, identity(3));
        for v in [2, 3, 5] {
            for a in log_grid(20, 1e-4, 20.0) {
                let m = matrix_exponential_oracle(a, v).unwrap();
                let k = single_token_kernel(a, v).unwrap();
                for i in 0..v {
                    let col: f64 = (0..v).map(|j| m[j * v + i]).sum();
                    assert!((col - 1.0).abs() < 1e-10);
                    for j in 0..v {
                        assert!((m[i * v + j] - m[j * v + i]).abs() < 1e-10);
                        let closed = if i == j { k.p_stay } else { k.p_other };
                        assert!((m[i * v + j] - closed).abs() < 1e-10);
                    }
                }
            }
        }
        assert!(matrix_exponential_oracle(1.0, 65).is_err());
    }

    #[test]
    fn transition_prob_examples() {
        let a = SequenceState::new(vec![0, 1], 2).unwrap();
        let b = SequenceState::new(vec![1, 1], 2).unwrap();
        assert_eq!(log_transition_prob(&a, &a, 0.0).unwrap(), 0.0);
        let lp = log_transition_prob(&a, &b, 2f64.ln() / 2.0).unwrap();
        assert!((lp - (0.75f64 * 0.25).ln()).abs() < 1e-14);
        assert_eq!(log_transition_prob(&a, &b, 0.0).unwrap(), f64::NEG_INFINITY);
        let c = SequenceState::new(vec![1, 1, 1], 2).unwrap();
        assert!(log_transition_prob(&a, &c, 0.1).is_err());
    }

    #[test]
    fn transition_prob_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..1000 {
            let v = 2 + k % 4;
            let a = SequenceState::uniform(6, v, &mut rng);
            let b = SequenceState::uniform(6, v, &mut rng);
            let abar = rng.random::<f64>() * 2.0;
            assert_eq!(log_transition_prob(&a, &b, abar).unwrap(), log_transition_prob(&b, &a, abar).unwrap());
        }
    }

    #[test]
    fn forward_sampling_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = SequenceState::new(vec![1, 0, 1, 1], 2).unwrap();
        assert_eq!(sample_forward(&x0, 0.0, &mut rng).unwrap(), x0);

        let one = SequenceState::new(vec![1], 2).unwrap();
        let n = 100_000;
        let stays = (0..n).filter(|_| sample_forward(&one, 50.0, &mut rng).unwrap() == one).count();
        assert!((stays as f64 / n as f64 - 0.5).abs() < 0.01);

        let abar = 2f64.ln() / 2.0;
        let mut kept = [0usize; 4];
        for _ in 0..n {
            let x = sample_forward(&x0, abar, &mut rng).unwrap();
            for i in 0..4 {
                kept[i] += (x.tokens()[i] == x0.tokens()[i]) as usize;
            }
        }
        for k in kept {
            assert!((k as f64 / n as f64 - 0.75).abs() < 0.01);
        }
    }

    #[test]
    fn forward_sampling_uniform_over_others() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x0 = SequenceState::new(vec![2], 5).unwrap();
        let mut counts = [0usize; 5];
        for _ in 0..50_000 {
            counts[sample_forward(&x0, 50.0, &mut rng).unwrap().tokens()[0] as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / 50_000.0 - 0.2).abs() < 0.01);
        }
    }

    #[test]
    fn sparse_draws_match_the_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = single_token_kernel(0.02, 3).unwrap();
        assert!(k.is_sparse());
        let p = k.p_change();
        let x0 = vec![0u8, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        let n = 200_000;
        let mut moved = [0usize; 10];
        let mut by_count = [0usize; 11];
        let mut targets = [0usize; 3];
        for _ in 0..n {
            let mut x = x0.clone();
            noise_in_place(&mut x, &k, &mut rng);
            let mut c = 0;
            for i in 0..10 {
                if x[i] != x0[i] {
                    moved[i] += 1;
                    c += 1;
                    if x0[i] == 0 {
                        targets[x[i] as usize] += 1;
                    }
                }
            }
            by_count[c] += 1;
        }
        for m in moved {
            assert!((m as f64 / n as f64 - p).abs() < 0.002);
        }
        let p0 = (1.0 - p).powi(10);
        let p1 = 10.0 * p * (1.0 - p).powi(9);
        assert!((by_count[0] as f64 / n as f64 - p0).abs() < 0.005);
        assert!((by_count[1] as f64 / n as f64 - p1).abs() < 0.005);
        let half = (targets[1] + targets[2]) as f64 / 2.0;
        assert!((targets[1] as f64 - half).abs() < 4.0 * half.sqrt());
    }
}
