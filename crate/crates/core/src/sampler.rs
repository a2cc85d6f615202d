//! Reverse-time simulation of the uniform-kernel chain from any concrete-score source.

use std::collections::HashMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyModel, SequenceState};
use crate::error::{invalid, Error, Result};
use crate::estimator::{estimate_concrete_score_with, EstimatorOptions};
use crate::kernel::NoiseSchedule;
use crate::neural::{Head, Network};
use crate::oracle::ExactOracle;
use crate::score::ConcreteScoreMatrix;
use crate::{par, rng};

/// Anything that can report log concrete scores at a state and time.
pub trait ScoreSource: Sync {
    /// `(d, V)`.
    fn dims(&self) -> (usize, usize);

    fn schedule(&self) -> &NoiseSchedule;

    fn query(&self, x: &SequenceState, t: f64, rng: &mut dyn RngCore) -> Result<ConcreteScoreMatrix>;

    /// Deterministic sources ignore the rng, so identical states can share one query.
    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Log marginal densities at a state and at each of its 1-Hamming neighbours.
pub trait MarginalDensity: Sync {
    fn dims(&self) -> (usize, usize);

    fn schedule(&self) -> &NoiseSchedule;

    /// Returns `log p_t(x)` and a `d × V` row-major table whose entry `(i, v)`
    /// is `log p_t(x with token i := v)`; self-token entries repeat `log p_t(x)`.
    fn log_density_neighbourhood(&self, x: &SequenceState, t: f64) -> Result<(f64, Vec<f64>)>;
}

/// Scores as differences of log densities: `d(V − 1) + 1` density evaluations.
pub fn assemble_density_score<D: MarginalDensity + ?Sized>(
    density: &D,
    x: &SequenceState,
    t: f64,
) -> Result<ConcreteScoreMatrix> {
    let (own, table) = density.log_density_neighbourhood(x, t)?;
    if !own.is_finite() || table.iter().any(|v| !v.is_finite()) {
        return Err(Error::SamplingFailure(format!("non-finite log density at t = {t}")));
    }
    let scores: Vec<f64> = table.iter().map(|&v| v - own).collect();
    ConcreteScoreMatrix::new(x.clone(), density.schedule().cumulative(t)?, scores)
}

fn check_dims(expected: (usize, usize), x: &SequenceState) -> Result<()> {
    if (x.dim(), x.vocab()) != expected {
        return invalid(format!(
            "state has shape ({}, {}) but the source expects ({}, {})",
            x.dim(),
            x.vocab(),
            expected.0,
            expected.1
        ));
    }
    Ok(())
}

/// Exact scores from brute-force enumeration.
pub struct OracleSource {
    pub oracle: ExactOracle,
    pub schedule: NoiseSchedule,
}

impl ScoreSource for OracleSource {
    fn dims(&self) -> (usize, usize) {
        self.oracle.dims()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn query(&self, x: &SequenceState, t: f64, _rng: &mut dyn RngCore) -> Result<ConcreteScoreMatrix> {
        check_dims(self.dims(), x)?;
        self.oracle.concrete_score(self.schedule.cumulative(t)?, x)
    }
}

/// The exact noised marginal exposed as a density, for checking the assembly route.
pub struct OracleMarginal {
    pub oracle: ExactOracle,
    pub schedule: NoiseSchedule,
}

impl MarginalDensity for OracleMarginal {
    fn dims(&self) -> (usize, usize) {
        self.oracle.dims()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn log_density_neighbourhood(&self, x: &SequenceState, t: f64) -> Result<(f64, Vec<f64>)> {
        check_dims(self.dims(), x)?;
        let a_bar = self.schedule.cumulative(t)?;
        let own = self.oracle.log_marginal(a_bar, x.tokens())?;
        let (d, v) = self.dims();
        let mut table = vec![own; d * v];
        let mut moved = x.tokens().to_vec();
        for i in 0..d {
            let keep = moved[i];
            for u in 0..v as u8 {
                if u != keep {
                    moved[i] = u;
                    table[i * v + u as usize] = self.oracle.log_marginal(a_bar, &moved)?;
                }
            }
            moved[i] = keep;
        }
        Ok((own, table))
    }
}

/// Scores re-estimated online from forward-kernel draws.
pub struct MonteCarloSource<M> {
    pub model: M,
    pub samples: usize,
    pub options: EstimatorOptions,
    pub schedule: NoiseSchedule,
}

impl<M: EnergyModel> ScoreSource for MonteCarloSource<M> {
    fn dims(&self) -> (usize, usize) {
        self.model.dims()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn query(&self, x: &SequenceState, t: f64, rng: &mut dyn RngCore) -> Result<ConcreteScoreMatrix> {
        let a_bar = self.schedule.cumulative(t)?;
        let est = estimate_concrete_score_with(&self.model, x, a_bar, self.samples, self.options, rng)?;
        if !est.scores.all_finite() {
            return Err(Error::SamplingFailure(format!("Monte-Carlo score is not finite at t = {t}")));
        }
        Ok(est.scores)
    }

    fn is_deterministic(&self) -> bool {
        false
    }
}

/// A network with a score head.
pub struct NeuralScoreSource {
    pub network: Network,
    pub schedule: NoiseSchedule,
}

impl NeuralScoreSource {
    pub fn new(network: Network, schedule: NoiseSchedule) -> Result<Self> {
        if network.head() != Head::Score {
            return invalid("score source needs a network with a score head");
        }
        Ok(Self { network, schedule })
    }
}

impl ScoreSource for NeuralScoreSource {
    fn dims(&self) -> (usize, usize) {
        (self.network.spec().dim, self.network.spec().vocab)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn query(&self, x: &SequenceState, t: f64, _rng: &mut dyn RngCore) -> Result<ConcreteScoreMatrix> {
        check_dims(self.dims(), x)?;
        let scores = self.network.score_forward(x, t)?;
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplingFailure(format!("network score is not finite at t = {t}")));
        }
        ConcreteScoreMatrix::new(x.clone(), self.schedule.cumulative(t)?, scores)
    }
}

/// A density-head network preconditioned by the target energy shifted by `energy_reference`.
pub struct NeuralDensity<M> {
    pub network: Network,
    pub model: M,
    pub energy_reference: f64,
    pub schedule: NoiseSchedule,
}

impl<M: EnergyModel> NeuralDensity<M> {
    pub fn new(network: Network, model: M, energy_reference: f64, schedule: NoiseSchedule) -> Result<Self> {
        if network.head() != Head::Density {
            return invalid("density source needs a network with a density head");
        }
        if (network.spec().dim, network.spec().vocab) != model.dims() {
            return invalid("network and energy model disagree on the state shape");
        }
        Ok(Self { network, model, energy_reference, schedule })
    }
}

impl<M: EnergyModel> MarginalDensity for NeuralDensity<M> {
    fn dims(&self) -> (usize, usize) {
        self.model.dims()
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn log_density_neighbourhood(&self, x: &SequenceState, t: f64) -> Result<(f64, Vec<f64>)> {
        check_dims(self.dims(), x)?;
        let (d, v) = self.dims();
        let e = self.model.log_density(x.tokens()) - self.energy_reference;
        let neighbours: Vec<(usize, u8, f64)> = (0..d)
            .flat_map(|i| (0..v as u8).filter(move |&u| u != x.tokens()[i]).map(move |u| (i, u)))
            .map(|(i, u)| (i, u, e + self.model.flip_delta(x.tokens(), i, u)))
            .collect();
        let (own, outs) = self.network.density_neighborhood(x, t, e, &neighbours)?;
        let mut table = vec![own; d * v];
        for (&(i, u, _), o) in neighbours.iter().zip(outs) {
            table[i * v + u as usize] = o;
        }
        Ok((own, table))
    }
}

/// Adapts any [`MarginalDensity`] into a score source by assembly.
pub struct DensityScoreSource<D>(pub D);

impl<D: MarginalDensity> ScoreSource for DensityScoreSource<D> {
    fn dims(&self) -> (usize, usize) {
        self.0.dims()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.0.schedule()
    }

    fn query(&self, x: &SequenceState, t: f64, _rng: &mut dyn RngCore) -> Result<ConcreteScoreMatrix> {
        assemble_density_score(&self.0, x, t)
    }
}

/// Jump probabilities of one coordinate: entry `v` is the chance of moving to
/// token `v`, zero at the current token. The flag reports whether the row was
/// renormalized because the clamped jump mass exceeded one.
pub fn jump_row(scores: &ConcreteScoreMatrix, site: usize, rate_dt: f64) -> (Vec<f64>, bool) {
    let v = scores.vocab();
    let own = scores.base_state.tokens()[site];
    let mut row: Vec<f64> = (0..v as u8)
        .map(|u| if u == own { 0.0 } else { (rate_dt * scores.get(site, u).exp()).clamp(0.0, 1.0) })
        .collect();
    let total: f64 = row.iter().sum();
    let overflow = total > 1.0;
    if overflow {
        row.iter_mut().for_each(|p| *p /= total);
    }
    (row, overflow)
}

fn apply_jumps<R: Rng + ?Sized>(tokens: &mut [u8], scores: &ConcreteScoreMatrix, rate_dt: f64, rng: &mut R) -> u64 {
    let mut overflows = 0;
    for i in 0..tokens.len() {
        let (row, overflow) = jump_row(scores, i, rate_dt);
        overflows += u64::from(overflow);
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        for (tok, p) in row.iter().enumerate() {
            acc += p;
            if p > &0.0 && u < acc {
                tokens[i] = tok as u8;
                break;
            }
        }
    }
    overflows
}

/// One Euler step of the reverse chain from time `t` to `t − dt`.
///
/// The rate is evaluated at `t`. Returns the new state and how many
/// coordinates needed row renormalization.
pub fn euler_reverse_step<S: ScoreSource + ?Sized>(
    x: &SequenceState,
    t: f64,
    dt: f64,
    source: &S,
    rng: &mut dyn RngCore,
) -> Result<(SequenceState, u64)> {
    if !(dt > 0.0 && dt <= t + 1e-12) {
        return invalid(format!("step {dt} must satisfy 0 < dt <= t = {t}"));
    }
    let scores = source.query(x, t, rng)?;
    let rate_dt = source.schedule().rate(t)? * dt;
    let mut tokens = x.tokens().to_vec();
    let overflows = apply_jumps(&mut tokens, &scores, rate_dt, rng);
    Ok((SequenceState::new(tokens, x.vocab())?, overflows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SamplerConfig {
    /// 24 steps up to a 4×4 lattice, 64 beyond.
    pub fn default_steps(side: usize) -> usize {
        if side <= 4 {
            24
        } else {
            64
        }
    }
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub states: Vec<SequenceState>,
    pub overflow_count: u64,
    pub coordinate_steps: u64,
}

impl SampleOutput {
    /// Fraction of coordinate updates whose jump row was renormalized.
    pub fn clamp_rate(&self) -> f64 {
        if self.coordinate_steps == 0 {
            0.0
        } else {
            self.overflow_count as f64 / self.coordinate_steps as f64
        }
    }
}

struct Chain {
    tokens: Vec<u8>,
    rng: rng::StreamRng,
    overflows: u64,
}

/// Draws `n_samples` states: uniform at `t = T`, then `n_steps` Euler steps on a
/// uniform grid down to `t = 0`.
pub fn sample<S: ScoreSource + ?Sized>(source: &S, cfg: &SamplerConfig) -> Result<SampleOutput> {
    if cfg.n_steps == 0 {
        return invalid("sampler needs at least one step");
    }
    let (d, v) = source.dims();
    let horizon = source.schedule().horizon();
    let dt = horizon / cfg.n_steps as f64;
    let mut chains: Vec<Chain> = (0..cfg.n_samples)
        .map(|c| {
            let mut r = rng::stream(cfg.seed, &[0, c as u64]);
            let tokens = SequenceState::uniform(d, v, &mut r).into_tokens();
            Chain { tokens, rng: r, overflows: 0 }
        })
        .collect();
    for step in 0..cfg.n_steps {
        let t = horizon - step as f64 * dt;
        let rate_dt = source.schedule().rate(t)? * dt;
        let (scores, lookup): (Vec<Result<ConcreteScoreMatrix>>, Vec<usize>) = if source.is_deterministic() {
            let mut seen: HashMap<&[u8], usize> = HashMap::new();
            let mut distinct: Vec<&[u8]> = Vec::new();
            let lookup = chains
                .iter()
                .map(|c| {
                    *seen.entry(&c.tokens).or_insert_with(|| {
                        distinct.push(&c.tokens);
                        distinct.len() - 1
                    })
                })
                .collect();
            let scores = par::map_slice(&distinct, |tokens| {
                let x = SequenceState::new(tokens.to_vec(), v)?;
                source.query(&x, t, &mut rng::stream(cfg.seed, &[2]))
            });
            (scores, lookup)
        } else {
            let scores = par::map_range(chains.len(), |c| {
                let x = SequenceState::new(chains[c].tokens.clone(), v)?;
                let mut r = rng::stream(cfg.seed, &[1, step as u64, c as u64]);
                source.query(&x, t, &mut r)
            });
            (scores, (0..chains.len()).collect())
        };
        let scores = scores.into_iter().collect::<Result<Vec<_>>>()?;
        par::for_each_mut(&mut chains, |c, chain| {
            let s = &scores[lookup[c]];
            chain.overflows += apply_jumps(&mut chain.tokens, s, rate_dt, &mut chain.rng);
        });
    }
    let overflow_count = chains.iter().map(|c| c.overflows).sum();
    let states = chains
        .into_iter()
        .map(|c| SequenceState::new(c.tokens, v))
        .collect::<Result<Vec<_>>>()?;
    Ok(SampleOutput { states, overflow_count, coordinate_steps: (cfg.n_samples * cfg.n_steps * d) as u64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::IsingModel;
    use crate::oracle::exact_target_distribution;

    fn oracle_source(beta: f64) -> OracleSource {
        let m = IsingModel::new(2, beta, true).unwrap();
        OracleSource { oracle: ExactOracle::new(&m, 1 << 10).unwrap(), schedule: NoiseSchedule::default_for(2) }
    }

    struct Flat(NoiseSchedule);

    impl MarginalDensity for Flat {
        fn dims(&self) -> (usize, usize) {
            (3, 3)
        }
        fn schedule(&self) -> &NoiseSchedule {
            &self.0
        }
        fn log_density_neighbourhood(&self, _x: &SequenceState, _t: f64) -> Result<(f64, Vec<f64>)> {
            Ok((2.5, vec![2.5; 9]))
        }
    }

    #[test]
    fn uniform_score_rows() {
        let x = SequenceState::new(vec![0, 2, 1], 3).unwrap();
        let s = ConcreteScoreMatrix::new(x, 0.1, vec![0.0; 9]).unwrap();
        let (row, overflow) = jump_row(&s, 1, 0.15);
        assert!(!overflow);
        assert_eq!(row, vec![0.15, 0.15, 0.0]);
        let (row, overflow) = jump_row(&s, 0, 0.8);
        assert!(overflow);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(row[0], 0.0);
    }

    #[test]
    fn uniform_score_flip_frequency() {
        let x = SequenceState::new(vec![0; 4], 3).unwrap();
        let s = ConcreteScoreMatrix::new(x.clone(), 0.1, vec![0.0; 12]).unwrap();
        let mut r = rng::stream(0, &[]);
        let n = 200_000;
        let mut to = [0usize; 3];
        for _ in 0..n {
            let mut t = x.tokens().to_vec();
            apply_jumps(&mut t, &s, 0.1, &mut r);
            to[t[0] as usize] += 1;
        }
        // total flip probability q = 0.2, split evenly
        for k in 1..3 {
            let p = to[k] as f64 / n as f64;
            assert!((p - 0.1).abs() < 4.0 * (0.1 * 0.9 / n as f64).sqrt(), "{p}");
        }
    }

    #[test]
    fn tiny_steps_rarely_move() {
        let src = oracle_source(0.4407);
        let x = SequenceState::new(vec![1, 0, 0, 1], 2).unwrap();
        let mut r = rng::stream(1, &[]);
        let moved = (0..10_000)
            .filter(|_| euler_reverse_step(&x, 0.5, 1e-9, &src, &mut r).unwrap().0 != x)
            .count();
        assert_eq!(moved, 0);
        assert!(euler_reverse_step(&x, 0.5, 0.6, &src, &mut r).is_err());
    }

    #[test]
    fn single_step_matches_categorical() {
        let src = oracle_source(0.4407);
        let x = SequenceState::new(vec![1, 1, 0, 1], 2).unwrap();
        let (t, dt) = (0.3, 0.05);
        let scores = src.oracle.concrete_score(src.schedule.cumulative(t).unwrap(), &x).unwrap();
        let rate_dt = src.schedule.rate(t).unwrap() * dt;
        let flip: Vec<f64> = (0..4).map(|i| jump_row(&scores, i, rate_dt).0[1 - x.tokens()[i] as usize]).collect();
        let expected: Vec<f64> = (0..16u64)
            .map(|k| {
                let y = SequenceState::from_index(k, 4, 2);
                (0..4)
                    .map(|i| if y.tokens()[i] != x.tokens()[i] { flip[i] } else { 1.0 - flip[i] })
                    .product()
            })
            .collect();
        let n = 1_000_000;
        let mut counts = [0f64; 16];
        let mut r = rng::stream(2, &[]);
        for _ in 0..n {
            let (y, _) = euler_reverse_step(&x, t, dt, &src, &mut r).unwrap();
            counts[y.index() as usize] += 1.0;
        }
        for k in 0..16 {
            let p = expected[k];
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((counts[k] / n as f64 - p).abs() <= 3.0 * se + 1e-12, "state {k}");
        }
    }

    #[test]
    fn assembly_examples() {
        let flat = Flat(NoiseSchedule::default_for(3));
        let x = SequenceState::new(vec![0, 2, 1], 3).unwrap();
        let s = assemble_density_score(&flat, &x, 0.4).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));

        let m = IsingModel::new(2, 0.6, true).unwrap();
        let marginal = OracleMarginal { oracle: ExactOracle::new(&m, 1 << 10).unwrap(), schedule: NoiseSchedule::default_for(2) };
        let x = SequenceState::new(vec![1, 0, 0, 0], 2).unwrap();
        for t in [0.05, 0.5, 0.95] {
            let a = assemble_density_score(&marginal, &x, t).unwrap();
            let exact = marginal.oracle.concrete_score(marginal.schedule.cumulative(t).unwrap(), &x).unwrap();
            for (p, q) in a.values().iter().zip(exact.values()) {
                assert!((p - q).abs() < 1e-10);
            }
            let y = x.with_token(2, 1);
            let back = assemble_density_score(&marginal, &y, t).unwrap();
            assert!((back.get(2, 0) + a.get(2, 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn density_route_reproduces_oracle_path() {
        let src = oracle_source(0.4407);
        let via_density = DensityScoreSource(OracleMarginal { oracle: src.oracle.clone(), schedule: src.schedule.clone() });
        let cfg = SamplerConfig { n_steps: 24, n_samples: 500, seed: 5 };
        let a = sample(&src, &cfg).unwrap();
        let b = sample(&via_density, &cfg).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(sample(&src, &cfg).unwrap().states, a.states);
    }

    #[test]
    fn infinite_temperature_gives_uniform_samples() {
        let src = oracle_source(0.0);
        let out = sample(&src, &SamplerConfig { n_steps: 16, n_samples: 32_000, seed: 6 }).unwrap();
        let mut counts = [0f64; 16];
        for s in &out.states {
            counts[s.index() as usize] += 1.0;
        }
        let e = 2000.0;
        let chi2: f64 = counts.iter().map(|c| (c - e).powi(2) / e).sum();
        assert!(chi2 < 37.7, "{chi2}");
    }

    #[test]
    fn oracle_sampling_approaches_target() {
        let src = oracle_source(0.4407);
        let table = exact_target_distribution(&IsingModel::new(2, 0.4407, true).unwrap()).unwrap();
        let out = sample(&src, &SamplerConfig { n_steps: 128, n_samples: 20_000, seed: 7 }).unwrap();
        let tv = crate::metrics::tv_distance(&out.states, &table).unwrap();
        assert!(tv < 0.05, "{tv}");
    }

    #[test]
    fn monte_carlo_source_runs_and_is_reproducible() {
        let m = IsingModel::new(2, 0.4407, true).unwrap();
        let src = MonteCarloSource { model: m, samples: 50, options: EstimatorOptions::default(), schedule: NoiseSchedule::default_for(2) };
        let cfg = SamplerConfig { n_steps: 8, n_samples: 40, seed: 8 };
        let a = sample(&src, &cfg).unwrap();
        let b = sample(&src, &cfg).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.coordinate_steps, 8 * 40 * 4);
    }
}
