use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;
use tcsis_core::energy::{check_capacity, EnergyModel, IsingModel, DEFAULT_STATE_CAP};
use tcsis_core::estimator::{estimate_concrete_score_with, EstimatorOptions};
use tcsis_core::kernel::{matrix_exponential_oracle, single_token_kernel, NoiseSchedule};
use tcsis_core::math::median;
use tcsis_core::mcmc::{run_chain, ChainConfig, ChainSampler};
use tcsis_core::metrics::{
    bootstrap_noise_floor, curve_discrepancy, histogram_tv, magnetization_histogram, split_half_noise_floor, tv_distance,
    two_point_correlation, two_point_correlation_weighted, CorrelationCurve, MagnetizationHistogram,
};
use tcsis_core::neural::{load_checkpoint, Head, Network};
use tcsis_core::oracle::{pushforward_log_marginals, ExactDistributionTable, ExactOracle};
use tcsis_core::rng::stream;
use tcsis_core::sampler::{
    sample, DensityScoreSource, MonteCarloSource, NeuralDensity, NeuralScoreSource, OracleSource, SampleOutput,
    SamplerConfig, ScoreSource,
};
use tcsis_core::training::{train, MetricsRow, ModelSampler, Proposal, TrainConfig, TrainHooks, METRICS_HEADER};
use tcsis_core::SequenceState;

use crate::config::{ExperimentConfig, ModelConfig, SeedRole};
use crate::error::{user, CliError, CliResult};
use crate::io::{ensure_dir, read_samples, write_json, write_resolved, write_samples};

/// States whose scores are compared exhaustively; larger spaces use an even subset.
const FULL_CHECK_STATES: u64 = 1024;
const SUBSET_STATES: u64 = 256;
const BOOTSTRAP_RESAMPLES: usize = 200;

fn check_states(n: u64) -> Vec<u64> {
    if n <= FULL_CHECK_STATES {
        (0..n).collect()
    } else {
        (0..SUBSET_STATES).map(|k| k * (n / SUBSET_STATES)).collect()
    }
}

fn check_times(schedule: &NoiseSchedule) -> Vec<f64> {
    (0..10).map(|k| (k as f64 + 0.5) / 10.0 * schedule.horizon()).collect()
}

pub fn oracle_check(cfg: &ExperimentConfig, out: &Path, mc_counts: &[usize]) -> CliResult<()> {
    let model = cfg.model.build()?;
    let (d, v) = model.dims();
    let schedule = cfg.schedule.build(v)?;
    let oracle = ExactOracle::new(&model, DEFAULT_STATE_CAP)?;
    ensure_dir(out)?;
    write_resolved(out, "oracle-check", cfg, json!({ "mc_samples": mc_counts }))?;
    let states = check_states(oracle.len() as u64);
    let mut report = String::from("t,a_bar,kernel_max_err,identity_max_err");
    for n in mc_counts {
        write!(report, ",mc_median_err_n{n}").unwrap();
    }
    report.push('\n');
    let mut scores_csv = String::from("t,state,site,token,log_score_exact\n");
    let mut worst_identity: f64 = 0.0;
    let mut worst_kernel: f64 = 0.0;
    for (k, t) in check_times(&schedule).into_iter().enumerate() {
        let a_bar = schedule.cumulative(t)?;
        let closed = single_token_kernel(a_bar, v)?;
        let expm = matrix_exponential_oracle(a_bar, v)?;
        let kernel_err = (0..v * v)
            .map(|e| {
                let p = if e / v == e % v { closed.p_stay } else { closed.p_other };
                (p - expm[e]).abs()
            })
            .fold(0.0, f64::max);
        let pushed = pushforward_log_marginals(oracle.log_densities(), d, v, a_bar)?;
        let mut identity_err: f64 = 0.0;
        let mut exact_scores = Vec::new();
        for &idx in &states {
            let x = SequenceState::from_index(idx, d, v);
            let s = oracle.concrete_score(a_bar, &x)?;
            for (i, u, ls) in s.neighbors() {
                let y = x.with_token(i, u);
                let reference = pushed[y.index() as usize] - pushed[idx as usize];
                identity_err = identity_err.max((ls - reference).abs());
                if oracle.len() as u64 <= FULL_CHECK_STATES {
                    writeln!(scores_csv, "{t},{idx},{i},{u},{ls}").unwrap();
                }
            }
            exact_scores.push(s);
        }
        worst_identity = worst_identity.max(identity_err);
        worst_kernel = worst_kernel.max(kernel_err);
        write!(report, "{t},{a_bar},{kernel_err:e},{identity_err:e}").unwrap();
        for &n in mc_counts {
            let seed = tcsis_core::rng::derive_seed(cfg.seed_for(SeedRole::Estimator), &[k as u64, n as u64]);
            let mut errs = Vec::new();
            for (j, exact) in exact_scores.iter().enumerate() {
                let mut r = stream(seed, &[j as u64]);
                let est = estimate_concrete_score_with(&model, &exact.base_state, a_bar, n, EstimatorOptions::default(), &mut r)?;
                for ((_, _, a), (_, _, b)) in est.scores.neighbors().zip(exact.neighbors()) {
                    errs.push((a - b).abs());
                }
            }
            write!(report, ",{}", median(&errs)).unwrap();
        }
        report.push('\n');
    }
    fs::write(out.join("oracle_check.csv"), report)?;
    if oracle.len() as u64 <= FULL_CHECK_STATES {
        fs::write(out.join("exact_scores.csv"), scores_csv)?;
    }
    write_json(
        &out.join("oracle_check_summary.json"),
        &json!({
            "states_checked": states.len(),
            "identity_max_err": worst_identity,
            "kernel_max_err": worst_kernel,
        }),
    )?;
    eprintln!("identity max error {worst_identity:e}, kernel max error {worst_kernel:e}");
    Ok(())
}

/// Draws model samples for the model-mix proposal by simulating the reverse chain.
struct ReverseModelSampler {
    model: IsingModel,
    schedule: NoiseSchedule,
    n_steps: usize,
}

impl ModelSampler for ReverseModelSampler {
    fn draw(&self, network: &Network, energy_reference: f64, count: usize, seed: u64) -> tcsis_core::Result<Vec<SequenceState>> {
        let cfg = SamplerConfig { n_steps: self.n_steps, n_samples: count, seed };
        let out = match network.head() {
            Head::Score => sample(&NeuralScoreSource::new(network.clone(), self.schedule.clone())?, &cfg)?,
            Head::Density => {
                let d = NeuralDensity::new(network.clone(), self.model.clone(), energy_reference, self.schedule.clone())?;
                sample(&DensityScoreSource(d), &cfg)?
            }
        };
        Ok(out.states)
    }
}

fn run_training(cfg: &ExperimentConfig, tc: &TrainConfig, out: &Path, label: &str) -> CliResult<PathBuf> {
    let model = cfg.model.build()?;
    let schedule = cfg.schedule.build(model.dims().1)?;
    ensure_dir(out)?;
    let ckpt = out.join("checkpoint.tcsis");
    let mix = ReverseModelSampler { model: model.clone(), schedule: schedule.clone(), n_steps: cfg.sampler_steps() };
    let progress = |r: &MetricsRow| {
        let err = r.score_err_oracle.map(|e| format!(" score_err={e:.4}")).unwrap_or_default();
        eprintln!("[{label}] step {} loss {:.6}{err}", r.step, r.loss);
    };
    let hooks = TrainHooks {
        model_sampler: matches!(tc.proposal, Proposal::ModelMix { .. }).then_some(&mix as &dyn ModelSampler),
        checkpoint_path: Some(ckpt.clone()),
        checkpoint_every: 0,
        on_log: Some(&progress),
    };
    let result = train(tc, &model, &schedule, &hooks)?;
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    for row in &result.log {
        csv.push_str(&row.csv_line());
        csv.push('\n');
    }
    fs::write(out.join("metrics.csv"), csv)?;
    write_json(
        &out.join("train_summary.json"),
        &json!({
            "variant": tc.variant,
            "grad_steps": tc.grad_steps,
            "final_loss": result.losses.last(),
            "nonfinite_targets": result.nonfinite_targets,
            "buffer_fraction": result.model_fraction,
            "energy_reference": result.checkpoint.energy_reference,
            "parameters": result.checkpoint.network.param_count(),
        }),
    )?;
    Ok(ckpt)
}

pub fn train_cmd(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let tc = cfg.resolved_train();
    write_resolved(out, "train", cfg, json!({ "train": tc }))?;
    let ckpt = run_training(cfg, &tc, out, "train")?;
    eprintln!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn build_source(cfg: &ExperimentConfig, spec: &str) -> CliResult<Box<dyn ScoreSource>> {
    let model = cfg.model.build()?;
    let schedule = cfg.schedule.build(model.dims().1)?;
    if spec == "oracle" {
        let oracle = ExactOracle::new(&model, DEFAULT_STATE_CAP)?;
        return Ok(Box::new(OracleSource { oracle, schedule }));
    }
    if let Some(n) = spec.strip_prefix("mc:") {
        let samples: usize = n.parse().map_err(|_| CliError::User(format!("bad Monte-Carlo count in `{spec}`")))?;
        if samples == 0 {
            return user("Monte-Carlo source needs at least one sample");
        }
        let options = EstimatorOptions { common_random_numbers: cfg.sampler.common_random_numbers };
        return Ok(Box::new(MonteCarloSource { model, samples, options, schedule }));
    }
    let path = Path::new(spec.strip_prefix("checkpoint:").unwrap_or(spec));
    if !path.exists() {
        return user(format!("checkpoint {} does not exist", path.display()));
    }
    let ckpt = load_checkpoint(path)?;
    let net = if cfg.sampler.use_ema { ckpt.ema_network()? } else { ckpt.network.clone() };
    if (net.spec().dim, net.spec().vocab) != model.dims() {
        return user(format!(
            "checkpoint is for shape ({}, {}) but the model has shape {:?}",
            net.spec().dim,
            net.spec().vocab,
            model.dims()
        ));
    }
    Ok(match net.head() {
        Head::Score => Box::new(NeuralScoreSource::new(net, schedule)?),
        Head::Density => Box::new(DensityScoreSource(NeuralDensity::new(net, model, ckpt.energy_reference, schedule)?)),
    })
}

fn run_sampling(cfg: &ExperimentConfig, source_spec: &str, seed: u64, out: &Path) -> CliResult<SampleOutput> {
    let source = build_source(cfg, source_spec)?;
    let scfg = SamplerConfig { n_steps: cfg.sampler_steps(), n_samples: cfg.sampler.n_samples, seed };
    let result = sample(source.as_ref(), &scfg)?;
    ensure_dir(out)?;
    write_samples(&out.join("samples.csv"), &result.states)?;
    // Checkpoints inside the output directory are recorded relative to it.
    let recorded = Path::new(source_spec).strip_prefix(out).map_or(source_spec.to_string(), |p| p.display().to_string());
    write_json(
        &out.join("samples.json"),
        &json!({
            "source": recorded,
            "sampler": scfg,
            "model": cfg.model,
            "schedule": cfg.schedule,
            "clamp_rate": result.clamp_rate(),
            "overflow_count": result.overflow_count,
            "coordinate_steps": result.coordinate_steps,
        }),
    )?;
    if result.clamp_rate() >= 0.01 {
        eprintln!("warning: {:.2}% of coordinate updates needed jump-row renormalization", 100.0 * result.clamp_rate());
    }
    Ok(result)
}

pub fn sample_cmd(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let seed = cfg.seed_for(SeedRole::Sampler);
    write_resolved(out, "sample", cfg, json!({ "n_steps": cfg.sampler_steps(), "seed": seed }))?;
    run_sampling(cfg, &cfg.sampler.source, seed, out)?;
    Ok(())
}

fn run_mcmc(cfg: &ExperimentConfig, chain: &ChainConfig, out: &Path) -> CliResult<Vec<SequenceState>> {
    let model = cfg.model.build()?;
    let result = run_chain(chain, &model)?;
    ensure_dir(out)?;
    write_samples(&out.join("samples.csv"), &result.states)?;
    write_json(
        &out.join("samples.json"),
        &json!({
            "chain": chain,
            "model": cfg.model,
            "acceptance_rate": result.acceptance_rate(),
        }),
    )?;
    Ok(result.states)
}

pub fn mcmc_cmd(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    let chain = ChainConfig {
        n_steps: cfg.mcmc.n_steps,
        n_chains: cfg.mcmc.n_chains,
        burn_in: cfg.mcmc.burn_in,
        seed: cfg.seed_for(SeedRole::Mcmc),
        sampler: cfg.mcmc.sampler,
    };
    write_resolved(out, "mcmc", cfg, json!({ "chain": chain }))?;
    run_mcmc(cfg, &chain, out)?;
    Ok(())
}

fn exact_table(cfg: &ExperimentConfig) -> CliResult<Option<(IsingModel, ExactDistributionTable)>> {
    let model = cfg.model.build()?;
    let (d, v) = model.dims();
    if check_capacity(d, v, DEFAULT_STATE_CAP).is_err() {
        return Ok(None);
    }
    let oracle = ExactOracle::new(&model, DEFAULT_STATE_CAP)?;
    Ok(Some((model, oracle.target())))
}

struct Truth {
    curve: CorrelationCurve,
    counts: Vec<f64>,
    histogram: Option<MagnetizationHistogram>,
    label: &'static str,
}

fn exact_truth(table: &ExactDistributionTable, side: usize, bins: usize, scale: f64) -> CliResult<Truth> {
    let states: Vec<SequenceState> = (0..table.len()).map(|k| SequenceState::from_index(k as u64, table.dim, table.vocab)).collect();
    let rows: Vec<(&[u8], f64)> = states.iter().enumerate().map(|(k, s)| (s.tokens(), table.prob(k))).collect();
    let curve = two_point_correlation_weighted(&rows, side)?;
    let mut counts = vec![0.0; bins];
    let d = table.dim as i64;
    for (k, s) in states.iter().enumerate() {
        let m: i64 = s.tokens().iter().map(|&t| 2 * t as i64 - 1).sum();
        counts[(m + d) as usize] += table.prob(k) * scale;
    }
    Ok(Truth { curve, counts, histogram: None, label: "exact" })
}

/// Writes correlation and magnetization reports of `samples` against `truth`.
fn compare(samples: &[SequenceState], truth: &Truth, side: usize, out: &Path, prefix: &str) -> CliResult<serde_json::Value> {
    let curve = two_point_correlation(samples, side)?;
    let hist = magnetization_histogram(samples, None)?;
    let disc = curve_discrepancy(&curve, &truth.curve)?;
    let mut csv = String::from("r,G_model,G_truth,abs_err\n");
    for (r, (a, b)) in curve.values.iter().zip(&truth.curve.values).enumerate() {
        writeln!(csv, "{r},{a},{b},{}", (a - b).abs()).unwrap();
    }
    fs::write(out.join(format!("{prefix}correlation.csv")), csv)?;
    let mut csv = String::from("bin_center,count_model,count_truth\n");
    for ((c, m), t) in hist.centers().iter().zip(&hist.counts).zip(&truth.counts) {
        writeln!(csv, "{c},{m},{t}").unwrap();
    }
    fs::write(out.join(format!("{prefix}magnetization.csv")), csv)?;
    let hist_tv = match &truth.histogram {
        Some(h) => histogram_tv(&hist, h)?,
        None => {
            let n = samples.len() as f64;
            let total: f64 = truth.counts.iter().sum();
            0.5 * hist.counts.iter().zip(&truth.counts).map(|(&a, b)| (a as f64 / n - b / total).abs()).sum::<f64>()
        }
    };
    Ok(json!({
        "samples": samples.len(),
        "truth": truth.label,
        "curve_discrepancy": disc,
        "histogram_tv": hist_tv,
        "G_model": curve.values,
        "G_truth": truth.curve.values,
    }))
}

fn check_lattice(samples: &[SequenceState], cfg: &ExperimentConfig, what: &Path) -> CliResult<()> {
    let side = cfg.model.side();
    if samples[0].dim() != side * side {
        return user(format!(
            "{} has {} tokens per sample but the model lattice has {} sites",
            what.display(),
            samples[0].dim(),
            side * side
        ));
    }
    if samples.iter().any(|s| s.dim() != samples[0].dim()) {
        return user(format!("{} mixes sample lengths", what.display()));
    }
    Ok(())
}

fn file_truth(reference: &[SequenceState], side: usize) -> CliResult<Truth> {
    let hist = magnetization_histogram(reference, None)?;
    Ok(Truth {
        curve: two_point_correlation(reference, side)?,
        counts: hist.counts.iter().map(|&c| c as f64).collect(),
        histogram: Some(hist),
        label: "reference",
    })
}

pub fn metrics_cmd(cfg: &ExperimentConfig, samples_path: &Path, reference: Option<&Path>, out: &Path) -> CliResult<()> {
    let side = cfg.model.side();
    let samples = read_samples(samples_path, 2)?;
    check_lattice(&samples, cfg, samples_path)?;
    let exact = exact_table(cfg)?;
    let truth = match reference {
        Some(p) => {
            let r = read_samples(p, 2)?;
            check_lattice(&r, cfg, p)?;
            file_truth(&r, side)?
        }
        None => match &exact {
            Some((_, table)) => exact_truth(table, side, 2 * side * side + 1, samples.len() as f64)?,
            None => return user("no reference samples given and the model is too large to enumerate"),
        },
    };
    write_resolved(
        out,
        "metrics",
        cfg,
        json!({ "samples": samples_path, "reference": reference }),
    )?;
    let mut summary = compare(&samples, &truth, side, out, "")?;
    if let Some((_, table)) = &exact {
        summary["tv_to_exact"] = json!(tv_distance(&samples, table)?);
    }
    write_json(&out.join("metrics_summary.json"), &summary)?;
    eprintln!("correlation discrepancy {}", summary["curve_discrepancy"]);
    Ok(())
}

pub fn preset_beta(name: &str) -> CliResult<f64> {
    match name {
        "l4-high" => Ok(0.28),
        "l4-critical" => Ok(0.4407),
        "l4-low" => Ok(0.6),
        other => user(format!("unknown preset `{other}` (expected l4-high, l4-critical or l4-low)")),
    }
}

/// Base document for a preset; further overrides apply on top.
pub fn preset_config(name: &str) -> CliResult<serde_json::Value> {
    let beta = preset_beta(name)?;
    Ok(json!({ "model": ModelConfig::ising(4, beta) }))
}

pub fn reproduce_cmd(cfg: &ExperimentConfig, preset: &str, out: &Path) -> CliResult<()> {
    let side = cfg.model.side();
    let mut sn = cfg.resolved_train();
    let mut unbiased = cfg.train_unbiased.clone();
    unbiased.seed = cfg.seed_for(SeedRole::TrainUnbiased);
    sn.log_wallclock = false;
    unbiased.log_wallclock = false;
    let ground = ChainConfig {
        n_steps: cfg.mcmc.n_steps,
        n_chains: cfg.mcmc.n_chains,
        burn_in: cfg.mcmc.burn_in,
        seed: cfg.seed_for(SeedRole::Mcmc),
        sampler: ChainSampler::Glauber,
    };
    let baseline = ChainConfig {
        n_steps: cfg.sampler_steps(),
        n_chains: cfg.sampler.n_samples,
        burn_in: 0,
        seed: cfg.seed_for(SeedRole::Baseline),
        sampler: ChainSampler::Gwg { temperature: 2.0, taylor: false },
    };
    write_resolved(
        out,
        "reproduce",
        cfg,
        json!({ "preset": preset, "train_self_normalized": sn, "train_unbiased": unbiased, "ground_truth": ground, "baseline": baseline }),
    )?;
    eprintln!("[reproduce] ground truth: {} Glauber chains x {} steps", ground.n_chains, ground.n_steps);
    let truth_states = run_mcmc(cfg, &ground, &out.join("ground_truth"))?;
    let noise_floor = split_half_noise_floor(&truth_states, side)?;
    let truth = file_truth(&truth_states, side)?;
    eprintln!("[reproduce] GWG baseline: {} steps", baseline.n_steps);
    let gwg_states = run_mcmc(cfg, &baseline, &out.join("gwg"))?;

    let reports = out.join("reports");
    ensure_dir(&reports)?;
    let mut summary = json!({
        "preset": preset,
        "ground_truth_split_half_discrepancy": noise_floor,
    });
    summary["gwg"] = compare(&gwg_states, &truth, side, &reports, "gwg_")?;
    let gwg_floor = bootstrap_noise_floor(&gwg_states, side, BOOTSTRAP_RESAMPLES, cfg.seed_for(SeedRole::Baseline))?;
    let gwg_disc = summary["gwg"]["curve_discrepancy"].as_f64().unwrap_or(f64::NAN);
    summary["gwg"]["bootstrap_noise_floor"] = json!(gwg_floor);
    summary["gwg"]["within_noise_floor"] = json!(gwg_disc <= gwg_floor);
    for (label, tc, seed_role) in [("self_normalized", &sn, SeedRole::Sampler), ("unbiased", &unbiased, SeedRole::Estimator)] {
        let dir = out.join(label);
        let ckpt = run_training(cfg, tc, &dir, label)?;
        let result = run_sampling(cfg, ckpt.to_str().expect("utf-8 path"), cfg.seed_for(seed_role), &dir)?;
        let mut report = compare(&result.states, &truth, side, &reports, &format!("{label}_"))?;
        report["clamp_rate"] = json!(result.clamp_rate());
        summary[label] = report;
    }
    write_json(&out.join("summary.json"), &summary)?;
    eprintln!(
        "[reproduce] correlation discrepancy vs ground truth: self-normalized {}, unbiased {}, gwg {} (noise floor {noise_floor})",
        summary["self_normalized"]["curve_discrepancy"], summary["unbiased"]["curve_discrepancy"], summary["gwg"]["curve_discrepancy"]
    );
    Ok(())
}
