use tcsis_core::energy::IsingModel;
use tcsis_core::kernel::NoiseSchedule;
use tcsis_core::oracle::ExactOracle;
use tcsis_core::training::{oracle_score_error, train, Proposal, TrainConfig, TrainHooks, Variant};

fn small(variant: Variant, steps: usize, lr: f64) -> TrainConfig {
    let mut cfg = TrainConfig::new(variant, 64, 500, steps, lr, Proposal::Noise);
    cfg.hidden = vec![64, 64];
    cfg.time_dim = 16;
    cfg.gate_hidden = 8;
    cfg.ema_decay = 0.99;
    cfg.seed = 11;
    cfg.log_every = steps;
    cfg
}

fn trained_error(cfg: &TrainConfig) -> (f64, f64, Vec<f64>) {
    let model = IsingModel::new(2, 0.4407, true).unwrap();
    let schedule = NoiseSchedule::default_for(2);
    let out = train(cfg, &model, &schedule, &TrainHooks::default()).unwrap();
    let oracle = ExactOracle::new(&model, 1 << 10).unwrap();
    let e_ref = out.checkpoint.energy_reference;
    let init = train(&TrainConfig { grad_steps: 0, ..cfg.clone() }, &model, &schedule, &TrainHooks::default()).unwrap();
    let before = oracle_score_error(&init.checkpoint.network, &model, &oracle, &schedule, e_ref, 10).unwrap();
    let after = oracle_score_error(&out.checkpoint.ema_network().unwrap(), &model, &oracle, &schedule, e_ref, 10).unwrap();
    (before, after, out.losses)
}

#[test]
fn self_normalized_learns_small_lattice_scores() {
    let (before, after, losses) = trained_error(&small(Variant::SelfNormalized, 1500, 1e-3));
    assert!(after < 0.1, "score error {after} (initial {before})");
    let head: f64 = losses[..100].iter().sum::<f64>() / 100.0;
    let tail: f64 = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < head, "loss {head} -> {tail}");
}

#[test]
fn unbiased_learns_small_lattice_scores() {
    let (before, after, losses) = trained_error(&small(Variant::Unbiased, 1500, 1e-3));
    assert!(after < 0.15, "score error {after} (initial {before})");
    let head: f64 = losses[..100].iter().sum::<f64>() / 100.0;
    let tail: f64 = losses[losses.len() - 100..].iter().sum::<f64>() / 100.0;
    assert!(tail < head, "loss {head} -> {tail}");
}
