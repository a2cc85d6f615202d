//! Simulation-free training of score and density networks from Monte-Carlo targets.
//!
//! Each iteration draws clean states from a proposal, noises them to a uniform
//! random time, builds fresh Monte-Carlo targets for every 1-Hamming neighbour
//! (score head) or for the state itself (density head), and takes one Adam step.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{check_capacity, EnergyModel, SequenceState, Shifted};
use crate::error::{invalid, Error, Result};
use crate::estimator::{estimate_concrete_score_with, log_marginal_sum, EstimatorOptions};
use crate::kernel::{noise_in_place, single_token_kernel, NoiseSchedule};
use crate::mcmc::{advance, ChainSampler};
use crate::neural::{save_checkpoint, AdamConfig, Checkpoint, Head, Network, NetworkSpec, OptimizerState};
use crate::oracle::ExactOracle;
use crate::{par, rng};

/// Gradient partial sums are accumulated in this many fixed chunks, then added
/// in order, so results do not depend on the worker count.
const GRAD_CHUNKS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SelfNormalized,
    Unbiased,
}

impl Variant {
    pub fn head(&self) -> Head {
        match self {
            Variant::SelfNormalized => Head::Score,
            Variant::Unbiased => Head::Density,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Proposal {
    /// Clean states uniform over `V^d`.
    Noise,
    /// With probability `weight`, a recent sample of the current model from the
    /// replay buffer; otherwise uniform noise. Model samples are refreshed every
    /// `refresh_every` steps.
    ModelMix {
        weight: f64,
        #[serde(default = "default_refresh")]
        refresh_every: usize,
    },
    /// Persistent Gibbs-With-Gradients chains on the target, warmed up for
    /// `steps` updates and advanced `refresh` updates per iteration; every chain
    /// state is pushed to the replay buffer and clean states are drawn from it.
    McmcGwg {
        steps: usize,
        #[serde(default = "default_gwg_refresh")]
        refresh: usize,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
}

fn default_refresh() -> usize {
    100
}

fn default_gwg_refresh() -> usize {
    1
}

fn default_temperature() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Batch size `M`.
    pub batch_size: usize,
    /// Monte-Carlo draws `N` per marginal estimate.
    pub mc_samples: usize,
    pub grad_steps: usize,
    pub lr: f64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    pub proposal: Proposal,
    #[serde(default = "default_replay")]
    pub replay_capacity: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_time_dim")]
    pub time_dim: usize,
    #[serde(default = "default_gate_hidden")]
    pub gate_hidden: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Steps between oracle score-error evaluations; 0 disables them.
    #[serde(default)]
    pub eval_every: usize,
    /// Oracle evaluation is skipped above this many states.
    #[serde(default = "default_eval_cap")]
    pub eval_state_cap: u64,
    /// States drawn to set the energy reference of the density head.
    #[serde(default = "default_probe")]
    pub energy_probe: usize,
    /// Record elapsed time in the metrics log (makes the log non-reproducible).
    #[serde(default)]
    pub log_wallclock: bool,
}

fn default_ema() -> f64 {
    0.999
}
fn default_replay() -> usize {
    10_000
}
fn default_hidden() -> Vec<usize> {
    vec![256, 256]
}
fn default_time_dim() -> usize {
    64
}
fn default_gate_hidden() -> usize {
    32
}
fn default_log_every() -> usize {
    100
}
fn default_eval_cap() -> u64 {
    1 << 12
}
fn default_probe() -> usize {
    1024
}

impl TrainConfig {
    pub fn new(variant: Variant, batch_size: usize, mc_samples: usize, grad_steps: usize, lr: f64, proposal: Proposal) -> Self {
        Self {
            variant,
            batch_size,
            mc_samples,
            grad_steps,
            lr,
            ema_decay: default_ema(),
            proposal,
            replay_capacity: default_replay(),
            hidden: default_hidden(),
            time_dim: default_time_dim(),
            gate_hidden: default_gate_hidden(),
            seed: 0,
            log_every: default_log_every(),
            eval_every: 0,
            eval_state_cap: default_eval_cap(),
            energy_probe: default_probe(),
            log_wallclock: false,
        }
    }

    /// Self-normalized settings for a 4×4 lattice.
    pub fn self_normalized_l4() -> Self {
        Self::new(Variant::SelfNormalized, 64, 500, 50_000, 1e-5, Proposal::Noise)
    }

    /// Unbiased settings for a 4×4 lattice.
    pub fn unbiased_l4() -> Self {
        let gwg = Proposal::McmcGwg { steps: 1000, refresh: default_gwg_refresh(), temperature: 2.0 };
        Self::new(Variant::Unbiased, 64, 100, 50_000, 1e-4, gwg)
    }

    /// Self-normalized settings for a 10×10 lattice.
    pub fn self_normalized_l10() -> Self {
        let mix = Proposal::ModelMix { weight: 0.9, refresh_every: default_refresh() };
        Self::new(Variant::SelfNormalized, 64, 2000, 150_000, 3e-6, mix)
    }

    /// Unbiased settings for a 10×10 lattice.
    pub fn unbiased_l10() -> Self {
        let gwg = Proposal::McmcGwg { steps: 1000, refresh: default_gwg_refresh(), temperature: 2.0 };
        Self::new(Variant::Unbiased, 64, 500, 100_000, 1e-4, gwg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.mc_samples == 0 {
            return invalid("batch size and Monte-Carlo sample count must be at least 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return invalid(format!("learning rate {} must be finite and non-negative", self.lr));
        }
        match self.proposal {
            Proposal::ModelMix { weight, refresh_every } => {
                if !(0.0..=1.0).contains(&weight) {
                    return invalid(format!("model mix weight {weight} must lie in [0, 1]"));
                }
                if refresh_every == 0 {
                    return invalid("model sample refresh interval must be positive");
                }
            }
            Proposal::McmcGwg { temperature, .. } => {
                if !(temperature.is_finite() && temperature > 0.0) {
                    return invalid(format!("GWG temperature {temperature} must be positive"));
                }
            }
            Proposal::Noise => {}
        }
        if self.replay_capacity == 0 && self.proposal != Proposal::Noise {
            return invalid("replay buffer capacity must be positive for this proposal");
        }
        if self.log_every == 0 {
            return invalid("log interval must be positive");
        }
        Ok(())
    }

    pub fn network_spec(&self, dim: usize, vocab: usize) -> NetworkSpec {
        NetworkSpec::new(dim, vocab, self.variant.head())
            .with_hidden(self.hidden.clone())
            .with_time_dim(self.time_dim)
            .with_gate_hidden(self.gate_hidden)
    }
}

/// Fixed-capacity ring of states with uniform sampling over its contents.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    items: Vec<SequenceState>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { items: Vec::with_capacity(capacity.min(1 << 16)), capacity, next: 0 }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Overwrites the oldest entry once full.
    pub fn push(&mut self, x: SequenceState) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() < self.capacity {
            self.items.push(x);
        } else {
            self.items[self.next] = x;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&SequenceState> {
        if self.items.is_empty() {
            None
        } else {
            Some(&self.items[rng.random_range(0..self.items.len())])
        }
    }
}

/// Draws clean states from the current model, supplied by the caller.
pub trait ModelSampler: Sync {
    fn draw(&self, network: &Network, energy_reference: f64, count: usize, seed: u64) -> Result<Vec<SequenceState>>;
}

/// A noised training input.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedItem {
    pub x_t: SequenceState,
    pub t: f64,
    /// Whether the clean state came from the model or MCMC rather than uniform noise.
    pub from_buffer: bool,
}

/// Proposal state carried across iterations.
pub struct Proposer {
    proposal: Proposal,
    buffer: ReplayBuffer,
    chains: Vec<Vec<u8>>,
    seed: u64,
    dims: (usize, usize),
}

impl Proposer {
    /// Sets up the proposal; GWG chains are warmed up here.
    pub fn new<M: EnergyModel + ?Sized>(cfg: &TrainConfig, model: &M) -> Result<Self> {
        cfg.validate()?;
        let (d, v) = model.dims();
        let mut chain_rng = rng::stream(cfg.seed, &[20]);
        let mut chains = Vec::new();
        let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
        if let Proposal::McmcGwg { steps, temperature, .. } = cfg.proposal {
            if v != 2 {
                return invalid("the GWG proposal needs a binary vocabulary");
            }
            chains = (0..cfg.batch_size)
                .map(|_| SequenceState::uniform(d, v, &mut chain_rng).into_tokens())
                .collect();
            let sampler = ChainSampler::Gwg { temperature, taylor: false };
            let warm = rng::derive_seed(cfg.seed, &[21]);
            par::for_each_mut(&mut chains, |c, tokens| {
                advance(model, sampler, tokens, steps, &mut rng::stream(warm, &[c as u64]));
            });
            for tokens in &chains {
                buffer.push(SequenceState::new(tokens.clone(), v)?);
            }
        }
        Ok(Self { proposal: cfg.proposal, buffer, chains, seed: cfg.seed, dims: (d, v) })
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    /// Adds externally produced clean states (model samples) to the buffer.
    pub fn push_samples(&mut self, samples: Vec<SequenceState>) {
        for s in samples {
            self.buffer.push(s);
        }
    }

    /// Advances proposal chains, if any, by one iteration's worth of updates.
    pub fn refresh<M: EnergyModel + ?Sized>(&mut self, model: &M, step: usize) -> Result<()> {
        if let Proposal::McmcGwg { refresh, temperature, .. } = self.proposal {
            let sampler = ChainSampler::Gwg { temperature, taylor: false };
            let base = rng::derive_seed(self.seed, &[22, step as u64]);
            par::for_each_mut(&mut self.chains, |c, tokens| {
                advance(model, sampler, tokens, refresh, &mut rng::stream(base, &[c as u64]));
            });
            for tokens in &self.chains {
                self.buffer.push(SequenceState::new(tokens.clone(), self.dims.1)?);
            }
        }
        Ok(())
    }

    /// `batch` noised inputs for iteration `step`.
    pub fn noised_batch(&self, schedule: &NoiseSchedule, batch: usize, step: usize) -> Result<Vec<NoisedItem>> {
        let (d, v) = self.dims;
        let horizon = schedule.horizon();
        (0..batch)
            .map(|m| {
                let mut r = rng::stream(self.seed, &[10, step as u64, m as u64]);
                let use_buffer = match self.proposal {
                    Proposal::Noise => false,
                    Proposal::ModelMix { weight, .. } => r.random::<f64>() < weight && !self.buffer.is_empty(),
                    Proposal::McmcGwg { .. } => !self.buffer.is_empty(),
                };
                let mut tokens = if use_buffer {
                    self.buffer.sample(&mut r).expect("buffer is non-empty").tokens().to_vec()
                } else {
                    SequenceState::uniform(d, v, &mut r).into_tokens()
                };
                let t = r.random::<f64>() * horizon;
                let kernel = single_token_kernel(schedule.cumulative(t)?, v)?;
                noise_in_place(&mut tokens, &kernel, &mut r);
                Ok(NoisedItem { x_t: SequenceState::new(tokens, v)?, t, from_buffer: use_buffer })
            })
            .collect()
    }
}

/// `exp(ℓ) − ŝ·ℓ` and its derivative in `ℓ`.
pub fn score_entropy_term(ell: f64, target: f64) -> (f64, f64) {
    let e = ell.exp();
    (e - target * ell, e - target)
}

/// The density-loss term has the same form as the score-entropy term.
pub fn unbiased_term(ell: f64, target: f64) -> (f64, f64) {
    score_entropy_term(ell, target)
}

/// Batch loss and parameter gradient.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    /// Elements dropped because their Monte-Carlo target was not finite.
    pub skipped: usize,
}

enum ElementResult {
    Done(f64),
    Skipped,
}

fn batch_loss<F>(net: &Network, batch: &[NoisedItem], element: F) -> Result<LossOutput>
where
    F: Fn(usize, &NoisedItem, f64, &mut [f64]) -> Result<ElementResult> + Sync + Send,
{
    if batch.is_empty() {
        return invalid("empty training batch");
    }
    let scale = 1.0 / batch.len() as f64;
    let chunks = GRAD_CHUNKS.min(batch.len());
    let per = batch.len().div_ceil(chunks);
    let partial = par::map_range(chunks, |c| -> Result<(f64, usize, Vec<f64>)> {
        let mut grads = vec![0.0; net.param_count()];
        let mut loss = 0.0;
        let mut skipped = 0;
        for m in c * per..((c + 1) * per).min(batch.len()) {
            match element(m, &batch[m], scale, &mut grads)? {
                ElementResult::Done(l) => loss += l * scale,
                ElementResult::Skipped => skipped += 1,
            }
        }
        Ok((loss, skipped, grads))
    });
    let mut out = LossOutput { loss: 0.0, grads: vec![0.0; net.param_count()], skipped: 0 };
    for p in partial {
        let (loss, skipped, grads) = p?;
        out.loss += loss;
        out.skipped += skipped;
        out.grads.iter_mut().zip(&grads).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

/// Score-entropy loss against Monte-Carlo score targets, summed over
/// neighbours and averaged over the batch. Element `m` draws from a stream keyed
/// by `(seed, m)`.
pub fn snis_loss<M: EnergyModel + ?Sized>(
    net: &Network,
    model: &M,
    batch: &[NoisedItem],
    mc_samples: usize,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LossOutput> {
    if net.head() != Head::Score {
        return invalid("self-normalized loss needs a score network");
    }
    batch_loss(net, batch, |m, item, scale, grads| {
        let mut r = rng::stream(seed, &[m as u64]);
        let a_bar = schedule.cumulative(item.t)?;
        let est = estimate_concrete_score_with(model, &item.x_t, a_bar, mc_samples, EstimatorOptions::default(), &mut r)?;
        if !est.scores.all_finite() {
            return Ok(ElementResult::Skipped);
        }
        let (out, trace) = net.score_forward_traced(item.x_t.tokens(), item.t)?;
        let v = item.x_t.vocab();
        let mut dy = vec![0.0; out.len()];
        let mut loss = 0.0;
        for (i, u, log_s) in est.scores.neighbors() {
            let k = i * v + u as usize;
            let (l, g) = score_entropy_term(out[k], log_s.exp());
            loss += l;
            dy[k] = g * scale;
        }
        if !loss.is_finite() {
            return Err(Error::TrainingFailure(format!("non-finite score-entropy loss at t = {}", item.t)));
        }
        net.backward_into(&trace, &dy, grads)?;
        Ok(ElementResult::Done(loss))
    })
}

/// Monte-Carlo estimate of the shifted noised density at `x`:
/// `(1/N) Σ_i p̄(x0^i) e^{−E_ref}` with `x0^i ~ p_{t|0}(· | x)`.
pub fn density_target<M, R>(model: &M, x: &SequenceState, a_bar: f64, n: usize, energy_reference: f64, rng: &mut R) -> Result<f64>
where
    M: EnergyModel + ?Sized,
    R: Rng + ?Sized,
{
    model.check_state(x)?;
    if n == 0 {
        return invalid("Monte-Carlo sample count must be at least 1");
    }
    let kernel = single_token_kernel(a_bar, x.vocab())?;
    let shifted = Shifted { inner: model, offset: -energy_reference };
    let mut scratch = Vec::with_capacity(x.dim());
    let log_sum = log_marginal_sum(&shifted, x.tokens(), &kernel, n, rng, &mut scratch);
    Ok((log_sum - (n as f64).ln()).exp())
}

/// The single-element density loss `p_θ(x) − p̂·log p_θ(x)` at fixed parameters.
pub fn unbiased_element_loss<M, R>(
    net: &Network,
    model: &M,
    item: &NoisedItem,
    mc_samples: usize,
    schedule: &NoiseSchedule,
    energy_reference: f64,
    rng: &mut R,
) -> Result<f64>
where
    M: EnergyModel + ?Sized,
    R: Rng + ?Sized,
{
    let target = density_target(model, &item.x_t, schedule.cumulative(item.t)?, mc_samples, energy_reference, rng)?;
    let e = model.log_density(item.x_t.tokens()) - energy_reference;
    let ell = net.density_forward(&item.x_t, item.t, e)?;
    Ok(unbiased_term(ell, target).0)
}

/// Density loss against Monte-Carlo marginal targets, averaged over the batch.
pub fn unbiased_loss<M: EnergyModel + ?Sized>(
    net: &Network,
    model: &M,
    batch: &[NoisedItem],
    mc_samples: usize,
    schedule: &NoiseSchedule,
    energy_reference: f64,
    seed: u64,
) -> Result<LossOutput> {
    if net.head() != Head::Density {
        return invalid("unbiased loss needs a density network");
    }
    batch_loss(net, batch, |m, item, scale, grads| {
        let mut r = rng::stream(seed, &[m as u64]);
        let a_bar = schedule.cumulative(item.t)?;
        let target = density_target(model, &item.x_t, a_bar, mc_samples, energy_reference, &mut r)?;
        if target.is_nan() {
            return Ok(ElementResult::Skipped);
        }
        let e = model.log_density(item.x_t.tokens()) - energy_reference;
        let (ell, trace) = net.density_forward_traced(item.x_t.tokens(), item.t, e)?;
        let (l, g) = unbiased_term(ell, target);
        if !l.is_finite() || !g.is_finite() {
            return Err(Error::TrainingFailure(format!(
                "density loss overflowed (log p_θ = {ell}, target = {target}); raise the energy reference"
            )));
        }
        net.backward_into(&trace, &[g * scale], grads)?;
        Ok(ElementResult::Done(l))
    })
}

/// Mean `|log s_θ − log s_exact|` over every state, every neighbour and times
/// `t_k = (k + ½)·T/K`, using `net` as given (pass the moving-average weights).
pub fn oracle_score_error<M: EnergyModel + ?Sized>(
    net: &Network,
    model: &M,
    oracle: &ExactOracle,
    schedule: &NoiseSchedule,
    energy_reference: f64,
    times: usize,
) -> Result<f64> {
    let (d, v) = oracle.dims();
    let n = oracle.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..times {
        let t = (k as f64 + 0.5) * schedule.horizon() / times as f64;
        let exact = oracle.all_log_marginals(schedule.cumulative(t)?)?;
        let per_state = par::map_range(n, |idx| -> Result<(f64, usize)> {
            let x = SequenceState::from_index(idx as u64, d, v);
            let mut err = 0.0;
            let mut cnt = 0;
            let neighbours: Vec<(usize, u8)> = (0..d)
                .flat_map(|i| (0..v as u8).map(move |u| (i, u)))
                .filter(|&(i, u)| x.tokens()[i] != u)
                .collect();
            let predicted: Vec<f64> = match net.head() {
                Head::Score => {
                    let s = net.score_forward(&x, t)?;
                    neighbours.iter().map(|&(i, u)| s[i * v + u as usize]).collect()
                }
                Head::Density => {
                    let e = model.log_density(x.tokens()) - energy_reference;
                    let list: Vec<(usize, u8, f64)> =
                        neighbours.iter().map(|&(i, u)| (i, u, e + model.flip_delta(x.tokens(), i, u))).collect();
                    let (own, outs) = net.density_neighborhood(&x, t, e, &list)?;
                    outs.iter().map(|o| o - own).collect()
                }
            };
            for (&(i, u), p) in neighbours.iter().zip(&predicted) {
                let y = x.with_token(i, u);
                let truth = exact[y.index() as usize] - exact[idx];
                err += (p - truth).abs();
                cnt += 1;
            }
            Ok((err, cnt))
        });
        for r in per_state {
            let (e, c) = r?;
            total += e;
            count += c;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub score_err_oracle: Option<f64>,
    pub nonfinite_targets: usize,
    pub wallclock_s: f64,
}

pub const METRICS_HEADER: &str = "step,loss,score_err_oracle,nonfinite_targets,wallclock_s";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let err = self.score_err_oracle.map(|e| format!("{e:.8}")).unwrap_or_default();
        format!("{},{:.10e},{},{},{:.3}", self.step, self.loss, err, self.nonfinite_targets, self.wallclock_s)
    }
}

/// Optional collaborators of [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Needed by the model-mix proposal.
    pub model_sampler: Option<&'a dyn ModelSampler>,
    /// Periodic checkpoint target, rewritten every `checkpoint_every` steps.
    pub checkpoint_path: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub on_log: Option<&'a (dyn Fn(&MetricsRow) + Sync)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<MetricsRow>,
    /// Batch-mean loss at every step.
    pub losses: Vec<f64>,
    pub nonfinite_targets: usize,
    pub model_fraction: f64,
}

/// Largest log density over a probe of uniform states and any proposal states.
fn energy_reference<M: EnergyModel + ?Sized>(model: &M, cfg: &TrainConfig, proposer: &Proposer) -> f64 {
    let (d, v) = model.dims();
    let mut r = rng::stream(cfg.seed, &[30]);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..cfg.energy_probe.max(1) {
        best = best.max(model.log_density(SequenceState::uniform(d, v, &mut r).tokens()));
    }
    for x in &proposer.buffer.items {
        best = best.max(model.log_density(x.tokens()));
    }
    best
}

/// Runs `cfg.grad_steps` iterations of propose → estimate → loss → Adam → EMA.
pub fn train<M: EnergyModel + ?Sized>(
    cfg: &TrainConfig,
    model: &M,
    schedule: &NoiseSchedule,
    hooks: &TrainHooks,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let (d, v) = model.dims();
    let start = Instant::now();
    let mut network = Network::new(cfg.network_spec(d, v), &mut rng::stream(cfg.seed, &[1]))?;
    let mut opt = OptimizerState::new(AdamConfig { lr: cfg.lr, ema_decay: cfg.ema_decay, ..AdamConfig::default() }, network.params())?;
    let mut proposer = Proposer::new(cfg, model)?;
    if matches!(cfg.proposal, Proposal::ModelMix { .. }) && hooks.model_sampler.is_none() {
        return invalid("the model-mix proposal needs a model sampler");
    }
    let energy_ref = match cfg.variant {
        Variant::SelfNormalized => 0.0,
        Variant::Unbiased => energy_reference(model, cfg, &proposer),
    };
    let oracle = if cfg.eval_every > 0 && check_capacity(d, v, cfg.eval_state_cap).is_ok() {
        Some(ExactOracle::new(model, cfg.eval_state_cap)?)
    } else {
        None
    };
    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(cfg.grad_steps);
    let mut nonfinite = 0;
    let mut from_buffer = 0usize;
    let mut window = Vec::new();
    let snapshot = |network: &Network, opt: &OptimizerState, step: usize| Checkpoint {
        network: network.clone(),
        ema: opt.ema().to_vec(),
        seed: cfg.seed,
        step: step as u64,
        energy_reference: energy_ref,
    };
    for step in 0..cfg.grad_steps {
        if let Proposal::ModelMix { refresh_every, .. } = cfg.proposal {
            if step % refresh_every == 0 && step > 0 {
                let ema_net = network.with_params(opt.ema())?;
                let sampler = hooks.model_sampler.expect("checked above");
                let seed = rng::derive_seed(cfg.seed, &[40, step as u64]);
                proposer.push_samples(sampler.draw(&ema_net, energy_ref, cfg.batch_size, seed)?);
            }
        }
        proposer.refresh(model, step)?;
        let batch = proposer.noised_batch(schedule, cfg.batch_size, step)?;
        from_buffer += batch.iter().filter(|b| b.from_buffer).count();
        let seed = rng::derive_seed(cfg.seed, &[50, step as u64]);
        let out = match cfg.variant {
            Variant::SelfNormalized => snis_loss(&network, model, &batch, cfg.mc_samples, schedule, seed)?,
            Variant::Unbiased => unbiased_loss(&network, model, &batch, cfg.mc_samples, schedule, energy_ref, seed)?,
        };
        if !out.loss.is_finite() {
            return Err(Error::TrainingFailure(format!("loss became {} at step {}", out.loss, step + 1)));
        }
        nonfinite += out.skipped;
        opt.adam_step(network.params_mut(), &out.grads)?;
        losses.push(out.loss);
        window.push(out.loss);
        let done = step + 1;
        let eval_now = oracle.is_some() && (done % cfg.eval_every == 0 || done == cfg.grad_steps);
        if done % cfg.log_every == 0 || eval_now || done == cfg.grad_steps {
            let score_err = match (&oracle, eval_now) {
                (Some(o), true) => {
                    let ema_net = network.with_params(opt.ema())?;
                    Some(oracle_score_error(&ema_net, model, o, schedule, energy_ref, 10)?)
                }
                _ => None,
            };
            let row = MetricsRow {
                step: done,
                loss: window.iter().sum::<f64>() / window.len() as f64,
                score_err_oracle: score_err,
                nonfinite_targets: nonfinite,
                wallclock_s: if cfg.log_wallclock { start.elapsed().as_secs_f64() } else { 0.0 },
            };
            window.clear();
            if let Some(cb) = hooks.on_log {
                cb(&row);
            }
            log.push(row);
        }
        if let Some(path) = &hooks.checkpoint_path {
            if hooks.checkpoint_every > 0 && done % hooks.checkpoint_every == 0 {
                save_checkpoint(path, &snapshot(&network, &opt, done))?;
            }
        }
    }
    let checkpoint = snapshot(&network, &opt, cfg.grad_steps);
    if let Some(path) = &hooks.checkpoint_path {
        save_checkpoint(path, &checkpoint)?;
    }
    let total = cfg.grad_steps * cfg.batch_size;
    Ok(TrainOutput {
        checkpoint,
        log,
        losses,
        nonfinite_targets: nonfinite,
        model_fraction: if total == 0 { 0.0 } else { from_buffer as f64 / total as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::IsingModel;
    use std::collections::HashSet;

    fn cfg(variant: Variant, proposal: Proposal) -> TrainConfig {
        let mut c = TrainConfig::new(variant, 16, 20, 5, 1e-3, proposal);
        c.hidden = vec![16];
        c.time_dim = 8;
        c.gate_hidden = 4;
        c
    }

    #[test]
    fn replay_buffer_ring() {
        let mut b = ReplayBuffer::new(3);
        let mut r = rng::stream(0, &[]);
        assert!(b.sample(&mut r).is_none());
        let given: Vec<SequenceState> = (0..5u64).map(|k| SequenceState::from_index(k, 4, 2)).collect();
        for g in &given {
            b.push(g.clone());
            assert!(b.len() <= 3);
        }
        let kept: HashSet<u64> = given[2..].iter().map(|s| s.index()).collect();
        for _ in 0..200 {
            assert!(kept.contains(&b.sample(&mut r).unwrap().index()));
        }
    }

    #[test]
    fn noise_proposal_is_uniform() {
        let m = IsingModel::new(3, 0.4, true).unwrap();
        let c = cfg(Variant::SelfNormalized, Proposal::Noise);
        let p = Proposer::new(&c, &m).unwrap();
        let schedule = NoiseSchedule::default_for(2);
        let mut ones = 0usize;
        let mut coords = 0usize;
        let mut times = Vec::new();
        for step in 0..200 {
            for item in p.noised_batch(&schedule, 64, step).unwrap() {
                ones += item.x_t.tokens().iter().filter(|&&t| t == 1).count();
                coords += 9;
                times.push(item.t);
                assert!(!item.from_buffer);
            }
        }
        let frac = ones as f64 / coords as f64;
        let chi2 = (2.0 * frac - 1.0).powi(2) * coords as f64;
        assert!(chi2 < 10.83, "{chi2}");
        times.sort_by(f64::total_cmp);
        let n = times.len() as f64;
        let ks = times
            .iter()
            .enumerate()
            .map(|(k, &t)| (t - k as f64 / n).abs().max(((k + 1) as f64 / n - t).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / n.sqrt(), "{ks}");
    }

    #[test]
    fn model_mix_fraction() {
        let m = IsingModel::new(2, 0.4, true).unwrap();
        let c = cfg(Variant::SelfNormalized, Proposal::ModelMix { weight: 0.9, refresh_every: 10 });
        let mut p = Proposer::new(&c, &m).unwrap();
        p.push_samples(vec![SequenceState::new(vec![1, 1, 1, 1], 2).unwrap()]);
        let schedule = NoiseSchedule::default_for(2);
        let batch: Vec<NoisedItem> = (0..100).flat_map(|s| p.noised_batch(&schedule, 100, s).unwrap()).collect();
        let frac = batch.iter().filter(|b| b.from_buffer).count() as f64 / batch.len() as f64;
        assert!((frac - 0.9).abs() < 0.02, "{frac}");
    }

    #[test]
    fn gwg_proposal_fills_buffer_with_chain_states() {
        let m = IsingModel::new(2, 0.6, true).unwrap();
        let c = cfg(Variant::Unbiased, Proposal::McmcGwg { steps: 10, refresh: 2, temperature: 2.0 });
        let mut p = Proposer::new(&c, &m).unwrap();
        assert_eq!(p.buffer().len(), 16);
        p.refresh(&m, 0).unwrap();
        assert_eq!(p.buffer().len(), 32);
        let batch = p.noised_batch(&NoiseSchedule::default_for(2), 8, 0).unwrap();
        assert!(batch.iter().all(|b| b.from_buffer));
    }

    #[test]
    fn loss_terms_are_minimized_at_target() {
        for target in [0.3, 1.0, 2.5, 40.0] {
            let ell = f64::ln(target);
            let (l, g) = score_entropy_term(ell, target);
            assert!((l - (target - target * ell)).abs() < 1e-12);
            assert!(g.abs() < 1e-12);
            let h = 1e-5;
            let fd = (score_entropy_term(ell + h, target).0 - score_entropy_term(ell - h, target).0) / (2.0 * h);
            assert!(fd.abs() < 1e-8 * target.max(1.0), "{fd}");
            for off in [-0.5, 0.5] {
                assert!(score_entropy_term(ell + off, target).0 > l);
            }
            // doubling the target moves the minimizer by ln 2
            let (_, g2) = unbiased_term(ell + std::f64::consts::LN_2, 2.0 * target);
            assert!(g2.abs() < 1e-12);
        }
        assert_eq!(score_entropy_term(0.0, 1.0).0, 1.0);
    }

    #[test]
    fn losses_reject_wrong_heads() {
        let m = IsingModel::new(2, 0.4, true).unwrap();
        let schedule = NoiseSchedule::default_for(2);
        let dens = Network::new(NetworkSpec::new(4, 2, Head::Density).with_hidden(vec![4]), &mut rng::stream(0, &[])).unwrap();
        let item = NoisedItem { x_t: SequenceState::new(vec![0, 1, 0, 0], 2).unwrap(), t: 0.3, from_buffer: false };
        assert!(snis_loss(&dens, &m, &[item.clone()], 5, &schedule, 0).is_err());
        assert!(unbiased_loss(&dens, &m, &[item], 5, &schedule, 0.0, 0).is_ok());
    }

    #[test]
    fn batch_gradient_matches_finite_difference() {
        let m = IsingModel::new(2, 0.4407, true).unwrap();
        let schedule = NoiseSchedule::default_for(2);
        let mut net = Network::new(NetworkSpec::new(4, 2, Head::Score).with_hidden(vec![3]).with_time_dim(2), &mut rng::stream(1, &[])).unwrap();
        let mut r = rng::stream(2, &[]);
        for p in net.params_mut() {
            *p = r.random::<f64>() - 0.5;
        }
        let batch: Vec<NoisedItem> = (0..5u64)
            .map(|k| NoisedItem { x_t: SequenceState::from_index(k * 3, 4, 2), t: 0.1 + 0.15 * k as f64, from_buffer: false })
            .collect();
        let out = snis_loss(&net, &m, &batch, 30, &schedule, 9).unwrap();
        let h = 1e-6;
        for k in [0, 5, net.param_count() - 1] {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + h;
            let up = snis_loss(&net, &m, &batch, 30, &schedule, 9).unwrap().loss;
            net.params_mut()[k] = orig - h;
            let down = snis_loss(&net, &m, &batch, 30, &schedule, 9).unwrap().loss;
            net.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - out.grads[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{k}: {fd} vs {}", out.grads[k]);
        }
    }

    #[test]
    fn zero_steps_return_initialization() {
        let m = IsingModel::new(2, 0.4407, true).unwrap();
        let mut c = cfg(Variant::SelfNormalized, Proposal::Noise);
        c.grad_steps = 0;
        let out = train(&c, &m, &NoiseSchedule::default_for(2), &TrainHooks::default()).unwrap();
        let init = Network::new(c.network_spec(4, 2), &mut rng::stream(c.seed, &[1])).unwrap();
        assert_eq!(out.checkpoint.network, init);
        assert_eq!(out.checkpoint.ema, init.params());
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let m = IsingModel::new(2, 0.4407, true).unwrap();
        for variant in [Variant::SelfNormalized, Variant::Unbiased] {
            let mut c = cfg(variant, Proposal::Noise);
            c.grad_steps = 20;
            c.log_every = 10;
            c.eval_every = 10;
            let schedule = NoiseSchedule::default_for(2);
            let a = train(&c, &m, &schedule, &TrainHooks::default()).unwrap();
            let b = train(&c, &m, &schedule, &TrainHooks::default()).unwrap();
            assert_eq!(a.checkpoint, b.checkpoint);
            assert_eq!(a.log, b.log);
            assert_eq!(a.log.len(), 2);
            assert!(a.log.iter().all(|r| r.score_err_oracle.is_some()));
            assert_eq!(a.losses.len(), 20);
        }
    }
}
