//! Compact feedforward networks for concrete scores and marginal densities.
//!
//! The input is the one-hot encoding of a state (`d·V` features) concatenated
//! with a sinusoidal embedding of the time. Two heads exist:
//!
//! * `Score`: a `d × V` matrix of log concrete scores. Self-token entries are
//!   overwritten with zero after the forward pass.
//! * `Density`: a scalar `f(x, t) + g(t)·e(x)`, where `e(x)` is the caller's
//!   (shifted) log target density and `g` is a small gate network on the time
//!   embedding that starts at 1.
//!
//! Parameters live in one flat `Vec<f64>` so the optimizer, the moving average
//! and the checkpoint format can treat them uniformly. Weights of a dense layer
//! are stored input-major: `w[j * outputs + o]` connects input `j` to output `o`.

mod adam;
mod checkpoint;

pub use adam::{AdamConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::energy::SequenceState;
use crate::error::{invalid, Error, Result};

/// Which quantity the network outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Score,
    Density,
}

impl Head {
    pub fn as_str(&self) -> &'static str {
        match self {
            Head::Score => "score",
            Head::Density => "density",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub dim: usize,
    pub vocab: usize,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
    pub gate_hidden: usize,
    pub head: Head,
}

impl NetworkSpec {
    pub fn new(dim: usize, vocab: usize, head: Head) -> Self {
        Self { dim, vocab, hidden: vec![256, 256], time_dim: 64, gate_hidden: 32, head }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_time_dim(mut self, time_dim: usize) -> Self {
        self.time_dim = time_dim;
        self
    }

    pub fn with_gate_hidden(mut self, gate_hidden: usize) -> Self {
        self.gate_hidden = gate_hidden;
        self
    }

    fn validate(&self) -> Result<()> {
        crate::energy::check_vocab(self.vocab)?;
        if self.dim == 0 {
            return invalid("network input dimension must be positive");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return invalid("hidden widths must be non-empty and positive");
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return invalid(format!("time embedding width {} must be even and at least 2", self.time_dim));
        }
        if self.head == Head::Density && self.gate_hidden == 0 {
            return invalid("density head needs a positive gate width");
        }
        Ok(())
    }

    fn output_width(&self) -> usize {
        match self.head {
            Head::Score => self.dim * self.vocab,
            Head::Density => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    fn forward(&self, params: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&params[self.b..self.b + self.outputs]);
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                let row = &params[self.w + j * self.outputs..self.w + (j + 1) * self.outputs];
                out.iter_mut().zip(row).for_each(|(o, w)| *o += xj * w);
            }
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, params: &[f64], x: &[f64], dy: &[f64], grads: &mut [f64], want_dx: bool) -> Vec<f64> {
        grads[self.b..self.b + self.outputs].iter_mut().zip(dy).for_each(|(g, d)| *g += d);
        let mut dx = if want_dx { vec![0.0; self.inputs] } else { Vec::new() };
        for (j, &xj) in x.iter().enumerate() {
            let base = self.w + j * self.outputs;
            if xj != 0.0 {
                grads[base..base + self.outputs].iter_mut().zip(dy).for_each(|(g, d)| *g += xj * d);
            }
            if want_dx {
                let row = &params[base..base + self.outputs];
                dx[j] = row.iter().zip(dy).map(|(w, d)| w * d).sum();
            }
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Sinusoidal features of `t` at log-spaced frequencies from `π` to `64π`.
pub fn time_embedding(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = std::f64::consts::PI * 64f64.powf(frac);
        out[k] = (freq * t).sin();
        out[half + k] = (freq * t).cos();
    }
    out
}

/// Intermediate values of one forward pass, consumed by [`Network::backward`].
#[derive(Clone, Debug)]
pub struct Trace {
    head: Head,
    n_params: usize,
    tokens: Vec<u8>,
    embedding: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    gate_pre: Vec<f64>,
    gate_post: Vec<f64>,
    energy: f64,
}

/// A feedforward network with either a score or a density head.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    layers: Vec<Dense>,
    gate: Option<(Dense, Dense)>,
    params: Vec<f64>,
}

impl Network {
    /// Random hidden layers, zero final layer, gate starting at 1.
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let (d, tdim) = (net.spec.dim, net.spec.time_dim);
        let last = net.layers.len() - 1;
        for (l, layer) in net.layers.clone().iter().enumerate() {
            if l == last {
                continue;
            }
            let fan_in = if l == 0 { d + tdim } else { layer.inputs };
            let std = (1.0 / fan_in as f64).sqrt();
            for w in &mut net.params[layer.w..layer.w + layer.inputs * layer.outputs] {
                *w = std * normal(rng);
            }
        }
        if let Some((g1, g2)) = net.gate {
            let std = (1.0 / g1.inputs as f64).sqrt();
            for w in &mut net.params[g1.w..g1.w + g1.inputs * g1.outputs] {
                *w = std * normal(rng);
            }
            net.params[g2.b] = 1.0;
        }
        Ok(net)
    }

    /// Layout only; every parameter zero except the gate bias.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut offset = 0;
        let mut layers = Vec::new();
        let mut inputs = spec.dim * spec.vocab + spec.time_dim;
        let widths: Vec<usize> = spec.hidden.iter().copied().chain([spec.output_width()]).collect();
        for &outputs in &widths {
            let layer = Dense { inputs, outputs, w: offset, b: offset + inputs * outputs };
            offset += layer.len();
            layers.push(layer);
            inputs = outputs;
        }
        let gate = match spec.head {
            Head::Score => None,
            Head::Density => {
                let g1 = Dense { inputs: spec.time_dim, outputs: spec.gate_hidden, w: offset, b: offset + spec.time_dim * spec.gate_hidden };
                offset += g1.len();
                let g2 = Dense { inputs: spec.gate_hidden, outputs: 1, w: offset, b: offset + spec.gate_hidden };
                offset += g2.len();
                Some((g1, g2))
            }
        };
        let mut params = vec![0.0; offset];
        if let Some((_, g2)) = gate {
            params[g2.b] = 1.0;
        }
        Ok(Self { spec, layers, gate, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn head(&self) -> Head {
        self.spec.head
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return invalid(format!("expected {} parameters, got {}", self.params.len(), params.len()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// A copy of this network carrying `params` (for example the moving average).
    pub fn with_params(&self, params: &[f64]) -> Result<Self> {
        let mut net = self.clone();
        net.set_params(params)?;
        Ok(net)
    }

    fn check_tokens(&self, tokens: &[u8]) -> Result<()> {
        if tokens.len() != self.spec.dim || tokens.iter().any(|&t| t as usize >= self.spec.vocab) {
            return invalid(format!(
                "state does not fit a network over ({}, {})",
                self.spec.dim, self.spec.vocab
            ));
        }
        Ok(())
    }

    fn first_layer(&self, tokens: &[u8], embedding: &[f64]) -> Vec<f64> {
        let layer = self.layers[0];
        let v = self.spec.vocab;
        let mut h = self.params[layer.b..layer.b + layer.outputs].to_vec();
        for (i, &t) in tokens.iter().enumerate() {
            let j = i * v + t as usize;
            let row = &self.params[layer.w + j * layer.outputs..layer.w + (j + 1) * layer.outputs];
            h.iter_mut().zip(row).for_each(|(o, w)| *o += w);
        }
        let base = self.spec.dim * v;
        for (k, &e) in embedding.iter().enumerate() {
            let j = base + k;
            let row = &self.params[layer.w + j * layer.outputs..layer.w + (j + 1) * layer.outputs];
            h.iter_mut().zip(row).for_each(|(o, w)| *o += e * w);
        }
        h
    }

    /// Layers after the first, from its pre-activation to the raw output.
    fn trunk_from(&self, h0: Vec<f64>, mut trace: Option<(&mut Vec<Vec<f64>>, &mut Vec<Vec<f64>>)>) -> Vec<f64> {
        let mut pre = h0;
        let mut out = Vec::new();
        for layer in &self.layers[1..] {
            let post: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            layer.forward(&self.params, &post, &mut out);
            if let Some((pres, posts)) = trace.as_mut() {
                pres.push(std::mem::take(&mut pre));
                posts.push(post);
            }
            pre = std::mem::take(&mut out);
        }
        pre
    }

    fn gate_value(&self, embedding: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let (g1, g2) = self.gate.expect("density network has a gate");
        let mut pre = Vec::new();
        g1.forward(&self.params, embedding, &mut pre);
        let post: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let mut out = Vec::new();
        g2.forward(&self.params, &post, &mut out);
        (out[0], pre, post)
    }

    fn run(&self, tokens: &[u8], t: f64, energy: f64, traced: bool) -> (Vec<f64>, Option<Trace>) {
        let embedding = time_embedding(t, self.spec.time_dim);
        let h0 = self.first_layer(tokens, &embedding);
        let mut pres = Vec::new();
        let mut posts = Vec::new();
        let raw = if traced {
            self.trunk_from(h0, Some((&mut pres, &mut posts)))
        } else {
            self.trunk_from(h0, None)
        };
        let (output, gate_pre, gate_post) = match self.spec.head {
            Head::Score => {
                let mut scores = raw;
                let v = self.spec.vocab;
                for (i, &tk) in tokens.iter().enumerate() {
                    scores[i * v + tk as usize] = 0.0;
                }
                (scores, Vec::new(), Vec::new())
            }
            Head::Density => {
                let (g, gp, gq) = self.gate_value(&embedding);
                (vec![raw[0] + g * energy], gp, gq)
            }
        };
        let trace = traced.then(|| Trace {
            head: self.spec.head,
            n_params: self.params.len(),
            tokens: tokens.to_vec(),
            embedding,
            pre: pres,
            post: posts,
            gate_pre,
            gate_post,
            energy,
        });
        (output, trace)
    }

    /// Log concrete scores, `d × V` row-major, zero at the self-token entries.
    pub fn score_forward(&self, x: &SequenceState, t: f64) -> Result<Vec<f64>> {
        self.expect_head(Head::Score)?;
        self.check_tokens(x.tokens())?;
        Ok(self.run(x.tokens(), t, 0.0, false).0)
    }

    pub fn score_forward_traced(&self, tokens: &[u8], t: f64) -> Result<(Vec<f64>, Trace)> {
        self.expect_head(Head::Score)?;
        self.check_tokens(tokens)?;
        let (out, trace) = self.run(tokens, t, 0.0, true);
        Ok((out, trace.expect("traced run")))
    }

    /// `f(x, t) + g(t)·log_p_bar`.
    pub fn density_forward(&self, x: &SequenceState, t: f64, log_p_bar: f64) -> Result<f64> {
        self.expect_head(Head::Density)?;
        self.check_tokens(x.tokens())?;
        check_energy(log_p_bar)?;
        Ok(self.run(x.tokens(), t, log_p_bar, false).0[0])
    }

    pub fn density_forward_traced(&self, tokens: &[u8], t: f64, log_p_bar: f64) -> Result<(f64, Trace)> {
        self.expect_head(Head::Density)?;
        self.check_tokens(tokens)?;
        check_energy(log_p_bar)?;
        let (out, trace) = self.run(tokens, t, log_p_bar, true);
        Ok((out[0], trace.expect("traced run")))
    }

    /// Density outputs at `x` and at each listed neighbour `(site, token, log_p_bar)`.
    ///
    /// The first layer is updated incrementally per neighbour since a single
    /// substitution changes only two one-hot inputs.
    pub fn density_neighborhood(
        &self,
        x: &SequenceState,
        t: f64,
        log_p_bar: f64,
        neighbours: &[(usize, u8, f64)],
    ) -> Result<(f64, Vec<f64>)> {
        self.expect_head(Head::Density)?;
        self.check_tokens(x.tokens())?;
        check_energy(log_p_bar)?;
        let embedding = time_embedding(t, self.spec.time_dim);
        let (g, _, _) = self.gate_value(&embedding);
        let h0 = self.first_layer(x.tokens(), &embedding);
        let own = self.trunk_from(h0.clone(), None)[0] + g * log_p_bar;
        let layer = self.layers[0];
        let v = self.spec.vocab;
        let mut outs = Vec::with_capacity(neighbours.len());
        for &(site, token, e) in neighbours {
            check_energy(e)?;
            if site >= self.spec.dim || token as usize >= v {
                return invalid("neighbour outside the network's state space");
            }
            let mut h = h0.clone();
            let old = site * v + x.tokens()[site] as usize;
            let new = site * v + token as usize;
            if old != new {
                let w = &self.params[layer.w..];
                for (o, hv) in h.iter_mut().enumerate() {
                    *hv += w[new * layer.outputs + o] - w[old * layer.outputs + o];
                }
            }
            outs.push(self.trunk_from(h, None)[0] + g * e);
        }
        Ok((own, outs))
    }

    fn expect_head(&self, head: Head) -> Result<()> {
        if self.spec.head != head {
            return invalid(format!("network has a {} head, not {}", self.spec.head.as_str(), head.as_str()));
        }
        Ok(())
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to the network output.
    pub fn backward(&self, trace: &Trace, output_grad: &[f64]) -> Result<Vec<f64>> {
        let mut grads = vec![0.0; self.params.len()];
        self.backward_into(trace, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Self::backward`] but accumulates into `grads`.
    pub fn backward_into(&self, trace: &Trace, output_grad: &[f64], grads: &mut [f64]) -> Result<()> {
        if trace.head != self.spec.head || trace.n_params != self.params.len() || trace.post.len() != self.layers.len() - 1 {
            return Err(Error::State("trace was not recorded by this network".into()));
        }
        if grads.len() != self.params.len() {
            return invalid("gradient buffer has the wrong length");
        }
        let expected = self.spec.output_width();
        if output_grad.len() != expected {
            return invalid(format!("output gradient has {} entries, expected {expected}", output_grad.len()));
        }
        let mut dy: Vec<f64> = output_grad.to_vec();
        match self.spec.head {
            Head::Score => {
                let v = self.spec.vocab;
                for (i, &tk) in trace.tokens.iter().enumerate() {
                    dy[i * v + tk as usize] = 0.0;
                }
            }
            Head::Density => {
                let (g1, g2) = self.gate.expect("density network has a gate");
                let dg = [output_grad[0] * trace.energy];
                let dpost = g2.backward(&self.params, &trace.gate_post, &dg, grads, true);
                let dpre: Vec<f64> = dpost.iter().zip(&trace.gate_pre).map(|(d, &z)| d * gelu_grad(z)).collect();
                g1.backward(&self.params, &trace.embedding, &dpre, grads, false);
            }
        }
        for l in (1..self.layers.len()).rev() {
            let post = &trace.post[l - 1];
            let dpost = self.layers[l].backward(&self.params, post, &dy, grads, true);
            let pre = &trace.pre[l - 1];
            dy = dpost.iter().zip(pre).map(|(d, &z)| d * gelu_grad(z)).collect();
        }
        // first layer: sparse one-hot plus the dense time embedding
        let layer = self.layers[0];
        let v = self.spec.vocab;
        grads[layer.b..layer.b + layer.outputs].iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
        for (i, &tk) in trace.tokens.iter().enumerate() {
            let j = i * v + tk as usize;
            let base = layer.w + j * layer.outputs;
            grads[base..base + layer.outputs].iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
        }
        let offset = self.spec.dim * v;
        for (k, &e) in trace.embedding.iter().enumerate() {
            let base = layer.w + (offset + k) * layer.outputs;
            grads[base..base + layer.outputs].iter_mut().zip(&dy).for_each(|(g, d)| *g += e * d);
        }
        Ok(())
    }
}

fn check_energy(e: f64) -> Result<()> {
    if !e.is_finite() {
        return invalid(format!("log target density {e} is not finite"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize(net: &mut Network, rng: &mut ChaCha8Rng) {
        for p in net.params_mut() {
            *p = rng.random::<f64>() * 1.2 - 0.6;
        }
    }

    fn state(tokens: Vec<u8>, v: usize) -> SequenceState {
        SequenceState::new(tokens, v).unwrap()
    }

    #[test]
    fn zero_init_score_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Network::new(NetworkSpec::new(4, 3, Head::Score), &mut rng).unwrap();
        let x = state(vec![0, 2, 1, 1], 3);
        let s = net.score_forward(&x, 0.3).unwrap();
        assert_eq!(s.len(), 12);
        assert!(s.iter().all(|&v| v == 0.0));
        assert!(net.param_count() < 1_000_000);
    }

    #[test]
    fn score_diagonal_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::new(NetworkSpec::new(4, 2, Head::Score).with_hidden(vec![16]), &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        let x = state(vec![1, 0, 0, 1], 2);
        let a = net.score_forward(&x, 0.7).unwrap();
        let b = net.score_forward(&x, 0.7).unwrap();
        assert_eq!(a, b);
        for (i, &t) in x.tokens().iter().enumerate() {
            assert_eq!(a[i * 2 + t as usize], 0.0);
        }
        assert!(a.iter().all(|v| v.is_finite()));
        assert!(a.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn density_init_is_preconditioner() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(NetworkSpec::new(9, 2, Head::Density), &mut rng).unwrap();
        let x = state(vec![1, 0, 1, 1, 0, 0, 1, 0, 1], 2);
        for (t, e) in [(0.0, -3.2), (0.5, 1.7), (1.0, 0.0)] {
            let out = net.density_forward(&x, t, e).unwrap();
            assert!((out - e).abs() < 1e-15);
            assert_eq!(out, net.density_forward(&x, t, e).unwrap());
        }
        assert!(net.density_forward(&x, 0.1, f64::NAN).is_err());
        assert!(net.score_forward(&x, 0.1).is_err());
    }

    #[test]
    fn neighbourhood_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::new(NetworkSpec::new(4, 3, Head::Density).with_hidden(vec![8, 8]), &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        let x = state(vec![2, 0, 1, 1], 3);
        let neighbours: Vec<(usize, u8, f64)> = (0..4)
            .flat_map(|i| (0..3u8).map(move |u| (i, u, 0.1 * (i as f64) - 0.2 * u as f64)))
            .collect();
        let (own, outs) = net.density_neighborhood(&x, 0.4, 0.25, &neighbours).unwrap();
        assert!((own - net.density_forward(&x, 0.4, 0.25).unwrap()).abs() < 1e-12);
        for (&(i, u, e), o) in neighbours.iter().zip(&outs) {
            let direct = net.density_forward(&x.with_token(i, u), 0.4, e).unwrap();
            assert!((direct - o).abs() < 1e-12);
        }
    }

    fn fd_check(net: &mut Network, loss: &dyn Fn(&Network) -> (f64, Vec<f64>, Trace)) {
        let (_, out_grad, trace) = loss(net);
        let analytic = net.backward(&trace, &out_grad).unwrap();
        let h = 1e-5;
        let mut num = vec![0.0; analytic.len()];
        for k in 0..analytic.len() {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + h;
            let up = loss(net).0;
            net.params_mut()[k] = orig - h;
            let down = loss(net).0;
            net.params_mut()[k] = orig;
            num[k] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|b| b * b).sum::<f64>().sqrt();
        assert!(diff / scale < 1e-6, "relative gradient error {}", diff / scale);
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = NetworkSpec::new(2, 2, Head::Score).with_hidden(vec![2]).with_time_dim(2);
        let mut net = Network::new(spec, &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        let x = vec![1u8, 0];
        let target = [0.3, -0.2, 0.8, 0.1];
        let loss = |n: &Network| {
            let (out, trace) = n.score_forward_traced(&x, 0.37).unwrap();
            let l: f64 = out.iter().zip(&target).map(|(o, t)| o.exp() - t * o).sum();
            let g: Vec<f64> = out.iter().zip(&target).map(|(o, t)| o.exp() - t).collect();
            (l, g, trace)
        };
        fd_check(&mut net, &loss);
    }

    #[test]
    fn density_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = NetworkSpec::new(3, 2, Head::Density).with_hidden(vec![3, 2]).with_time_dim(2).with_gate_hidden(2);
        let mut net = Network::new(spec, &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        let x = vec![1u8, 0, 1];
        let loss = |n: &Network| {
            let (out, trace) = n.density_forward_traced(&x, 0.81, -1.3).unwrap();
            (out.exp() - 0.7 * out, vec![out.exp() - 0.7], trace)
        };
        fd_check(&mut net, &loss);
    }

    #[test]
    fn sixteen_parameter_micro_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = NetworkSpec::new(1, 2, Head::Density).with_hidden(vec![1]).with_time_dim(2).with_gate_hidden(2);
        let mut net = Network::new(spec, &mut rng).unwrap();
        assert_eq!(net.param_count(), 16);
        randomize(&mut net, &mut rng);
        let loss = |n: &Network| {
            let (out, trace) = n.density_forward_traced(&[1], 0.6, 0.9).unwrap();
            (out.exp() - 1.4 * out, vec![out.exp() - 1.4], trace)
        };
        fd_check(&mut net, &loss);
    }

    #[test]
    fn wide_network_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let spec = NetworkSpec::new(4, 3, Head::Score).with_hidden(vec![6, 5]).with_time_dim(4);
        let mut net = Network::new(spec, &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        let x = vec![2u8, 0, 1, 2];
        let loss = |n: &Network| {
            let (out, trace) = n.score_forward_traced(&x, 0.05).unwrap();
            let l: f64 = out.iter().map(|o| o * o).sum();
            (l, out.iter().map(|o| 2.0 * o).collect(), trace)
        };
        fd_check(&mut net, &loss);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = Network::new(NetworkSpec::new(3, 2, Head::Score).with_hidden(vec![4]), &mut rng).unwrap();
        randomize(&mut net, &mut rng);
        let (_, trace) = net.score_forward_traced(&[0, 1, 1], 0.2).unwrap();
        let g = net.backward(&trace, &[0.0; 6]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squared_output_at_zero_final_layer() {
        // with a zero final layer the output is zero, so d‖y‖²/dy = 0 and every
        // gradient vanishes, including the final layer's own weights
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::new(NetworkSpec::new(3, 2, Head::Score).with_hidden(vec![4]), &mut rng).unwrap();
        let (out, trace) = net.score_forward_traced(&[0, 1, 1], 0.2).unwrap();
        let g = net.backward(&trace, &out.iter().map(|o| 2.0 * o).collect::<Vec<_>>()).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        // a unit upstream gradient reaches only final-layer weights and biases
        let g = net.backward(&trace, &[1.0; 6]).unwrap();
        let last = net.layers[1];
        assert!(g[..last.w].iter().all(|&v| v == 0.0));
        assert!(g[last.w..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn foreign_trace_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Network::new(NetworkSpec::new(3, 2, Head::Score).with_hidden(vec![4]), &mut rng).unwrap();
        let b = Network::new(NetworkSpec::new(3, 2, Head::Density).with_hidden(vec![4]), &mut rng).unwrap();
        let (_, trace) = a.score_forward_traced(&[0, 1, 1], 0.2).unwrap();
        assert!(matches!(b.backward(&trace, &[1.0]), Err(Error::State(_))));
    }
}
