//! Single-site MCMC for binary models: Glauber heat-bath updates and
//! Gibbs-With-Gradients with locally informed flip proposals.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{EnergyModel, SequenceState};
use crate::error::{invalid, Result};
use crate::math::{log_sum_exp, sigmoid};
use crate::{par, rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChainSampler {
    Glauber,
    Gwg {
        #[serde(default = "default_temperature")]
        temperature: f64,
        /// Use a first-order expansion of the relaxed energy for flip deltas.
        #[serde(default)]
        taylor: bool,
    },
}

fn default_temperature() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub n_steps: usize,
    pub n_chains: usize,
    #[serde(default)]
    pub burn_in: usize,
    #[serde(default)]
    pub seed: u64,
    pub sampler: ChainSampler,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if let ChainSampler::Gwg { temperature, .. } = self.sampler {
            if !(temperature.is_finite() && temperature > 0.0) {
                return invalid(format!("GWG temperature {temperature} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ChainOutput {
    pub states: Vec<SequenceState>,
    pub proposals: u64,
    pub accepted: u64,
}

impl ChainOutput {
    /// Fraction of GWG proposals accepted; 1 for Glauber.
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            1.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

fn check_binary<M: EnergyModel + ?Sized>(model: &M) -> Result<()> {
    if model.dims().1 != 2 {
        return invalid("single-flip samplers need a binary vocabulary");
    }
    Ok(())
}

/// Heat-bath update of one uniformly chosen site, in place.
pub fn glauber_update<M, R>(model: &M, tokens: &mut [u8], rng: &mut R)
where
    M: EnergyModel + ?Sized,
    R: Rng + ?Sized,
{
    let i = rng.random_range(0..tokens.len());
    let delta = model.flip_delta(tokens, i, 1) - model.flip_delta(tokens, i, 0);
    tokens[i] = u8::from(rng.random::<f64>() < sigmoid(delta));
}

pub fn glauber_step<M, R>(model: &M, x: &SequenceState, rng: &mut R) -> Result<SequenceState>
where
    M: EnergyModel + ?Sized,
    R: Rng + ?Sized,
{
    check_binary(model)?;
    model.check_state(x)?;
    let mut tokens = x.tokens().to_vec();
    glauber_update(model, &mut tokens, rng);
    SequenceState::new(tokens, 2)
}

fn flip_deltas<M: EnergyModel + ?Sized>(model: &M, tokens: &[u8], taylor: bool) -> Vec<f64> {
    if taylor {
        if let Some(grad) = model.relaxed_gradient(tokens) {
            return grad
                .iter()
                .zip(tokens)
                .map(|(g, &t)| g * (1.0 - 2.0 * t as f64))
                .collect();
        }
    }
    (0..tokens.len()).map(|i| model.flip_delta(tokens, i, 1 - tokens[i])).collect()
}

/// Proposal probabilities over sites: softmax of flip deltas divided by `temperature`.
pub fn gwg_proposal<M: EnergyModel + ?Sized>(model: &M, tokens: &[u8], temperature: f64, taylor: bool) -> Vec<f64> {
    let logits: Vec<f64> = flip_deltas(model, tokens, taylor).iter().map(|d| d / temperature).collect();
    let norm = log_sum_exp(&logits);
    logits.iter().map(|l| (l - norm).exp()).collect()
}

/// One Metropolis-Hastings single-flip step in place; returns whether it was accepted.
pub fn gwg_update<M, R>(model: &M, tokens: &mut [u8], temperature: f64, taylor: bool, rng: &mut R) -> bool
where
    M: EnergyModel + ?Sized,
    R: Rng + ?Sized,
{
    let forward: Vec<f64> = flip_deltas(model, tokens, taylor).iter().map(|d| d / temperature).collect();
    let fwd_norm = log_sum_exp(&forward);
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    let mut site = forward.len() - 1;
    for (i, l) in forward.iter().enumerate() {
        acc += (l - fwd_norm).exp();
        if u < acc {
            site = i;
            break;
        }
    }
    let gain = model.flip_delta(tokens, site, 1 - tokens[site]);
    tokens[site] = 1 - tokens[site];
    let reverse: Vec<f64> = flip_deltas(model, tokens, taylor).iter().map(|d| d / temperature).collect();
    let rev_norm = log_sum_exp(&reverse);
    let log_ratio = gain + (reverse[site] - rev_norm) - (forward[site] - fwd_norm);
    let accept = log_ratio >= 0.0 || rng.random::<f64>() < log_ratio.exp();
    if !accept {
        tokens[site] = 1 - tokens[site];
    }
    accept
}

pub fn gwg_step<M, R>(model: &M, x: &SequenceState, temperature: f64, rng: &mut R) -> Result<(SequenceState, bool)>
where
    M: EnergyModel + ?Sized,
    R: Rng + ?Sized,
{
    check_binary(model)?;
    model.check_state(x)?;
    if !(temperature.is_finite() && temperature > 0.0) {
        return invalid(format!("GWG temperature {temperature} must be positive"));
    }
    let mut tokens = x.tokens().to_vec();
    let accepted = gwg_update(model, &mut tokens, temperature, false, rng);
    Ok((SequenceState::new(tokens, 2)?, accepted))
}

/// Advances `tokens` by `steps` updates of the configured sampler; returns accepted count.
pub fn advance<M, R>(model: &M, sampler: ChainSampler, tokens: &mut [u8], steps: usize, rng: &mut R) -> u64
where
    M: EnergyModel + ?Sized,
    R: Rng + ?Sized,
{
    match sampler {
        ChainSampler::Glauber => {
            for _ in 0..steps {
                glauber_update(model, tokens, rng);
            }
            steps as u64
        }
        ChainSampler::Gwg { temperature, taylor } => {
            (0..steps).filter(|_| gwg_update(model, tokens, temperature, taylor, rng)).count() as u64
        }
    }
}

/// Runs independent chains from uniform initial states.
pub fn run_chain<M: EnergyModel + ?Sized>(cfg: &ChainConfig, model: &M) -> Result<ChainOutput> {
    let (d, v) = model.dims();
    let initial: Vec<SequenceState> = (0..cfg.n_chains)
        .map(|c| SequenceState::uniform(d, v, &mut rng::stream(cfg.seed, &[0, c as u64])))
        .collect();
    run_chains_from(cfg, model, initial)
}

/// Runs one chain from each given state for `burn_in + n_steps` updates.
pub fn run_chains_from<M: EnergyModel + ?Sized>(
    cfg: &ChainConfig,
    model: &M,
    initial: Vec<SequenceState>,
) -> Result<ChainOutput> {
    check_binary(model)?;
    cfg.validate()?;
    for x in &initial {
        model.check_state(x)?;
    }
    let steps = cfg.burn_in + cfg.n_steps;
    let mut chains: Vec<(Vec<u8>, u64)> = initial.into_iter().map(|x| (x.into_tokens(), 0)).collect();
    par::for_each_mut(&mut chains, |c, (tokens, accepted)| {
        let mut r = rng::stream(cfg.seed, &[1, c as u64]);
        *accepted = advance(model, cfg.sampler, tokens, steps, &mut r);
    });
    let proposals = match cfg.sampler {
        ChainSampler::Glauber => 0,
        ChainSampler::Gwg { .. } => (steps * chains.len()) as u64,
    };
    let accepted = match cfg.sampler {
        ChainSampler::Glauber => 0,
        ChainSampler::Gwg { .. } => chains.iter().map(|c| c.1).sum(),
    };
    let states = chains
        .into_iter()
        .map(|(t, _)| SequenceState::new(t, 2))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainOutput { states, proposals, accepted })
}
