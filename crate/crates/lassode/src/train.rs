//! ELBO training with AdamW, plus low-rank adapter fine-tuning.
//!
//! Every step draws a fresh prefix ratio and reparameterization noise per
//! trajectory, accumulates per-sample gradients in path order, and applies
//! one averaged optimizer step. Samples whose latent solve diverges are
//! skipped and counted rather than aborting the run.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{LoraConfig, ModelConfig, TrainConfig};
use crate::encoder::{LatentPosterior, SampleMode};
use crate::error::LassError;
use crate::model::{self, ForwardOutput};
use crate::optim::{AdamW, AdamWConfig};
use crate::pipeline::{slice_prefix, NormalizedTrajectory, PrefixedSample};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    /// samples dropped because the forward pass diverged
    pub skipped_samples: usize,
    /// optimizer steps dropped because of non-finite gradients
    pub skipped_steps: usize,
}

pub fn write_loss_log(records: &[StepRecord], path: &Path) -> Result<(), LassError> {
    let mut text = String::from("step,loss,recon,kl\n");
    for r in records {
        text.push_str(&format!(
            "{},{:.15},{:.15},{:.15}\n",
            r.step, r.loss, r.recon, r.kl
        ));
    }
    std::fs::write(path, text).map_err(|e| LassError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// KL(q || N(0, I)) summed over latent coordinates:
/// 0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2).
pub fn kl_standard_normal(tape: &mut Tape, post: &LatentPosterior) -> Var {
    let mu2 = tape.mul(post.mean, post.mean);
    let s2 = tape.mul(post.sigma, post.sigma);
    let ln_s2 = tape.ln(s2);
    let a = tape.add(mu2, s2);
    let b = tape.sub(a, ln_s2);
    let c = tape.add_const(b, -1.0);
    let summed = tape.sum_all(c);
    tape.scale(summed, 0.5)
}

/// Negative ELBO: channel-averaged reconstruction MSE over every timestamp
/// plus `kl_weight` times the channel-averaged KL. Returns the scalar loss
/// and the two detached components.
pub fn elbo_loss(
    tape: &mut Tape,
    out: &ForwardOutput,
    sample: &PrefixedSample,
    kl_weight: f64,
) -> (Var, f64, f64) {
    let d_x = out.predictions.len();
    let mut recon = None;
    for (pred, ch) in out.predictions.iter().zip(&sample.traj.channels) {
        let target = tape.constant(Tensor::from_vec(ch.len(), 1, ch.clone()));
        let diff = tape.sub(*pred, target);
        let sq = tape.mul(diff, diff);
        let mse = tape.mean_all(sq);
        recon = Some(match recon {
            None => mse,
            Some(acc) => tape.add(acc, mse),
        });
    }
    let recon = recon.expect("at least one channel");
    let recon = tape.scale(recon, 1.0 / d_x as f64);
    let mut kl = None;
    for post in &out.posteriors {
        let k = kl_standard_normal(tape, post);
        kl = Some(match kl {
            None => k,
            Some(acc) => tape.add(acc, k),
        });
    }
    let kl = kl.expect("at least one channel");
    let kl = tape.scale(kl, 1.0 / d_x as f64);
    let recon_val = tape.value(recon).get(0, 0);
    let kl_val = tape.value(kl).get(0, 0);
    let weighted = tape.scale(kl, kl_weight);
    let total = tape.add(recon, weighted);
    (total, recon_val, kl_val)
}

fn draw_eps<R: Rng>(rng: &mut R, d_x: usize, d_z: usize) -> Vec<Vec<f64>> {
    (0..d_x)
        .map(|_| (0..d_z).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

struct LoopSettings {
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
    batch_size: usize,
    epochs: usize,
    kl_weight: f64,
    prefix_ratios: Vec<f64>,
    seed: u64,
}

fn run_loop(
    model_cfg: &ModelConfig,
    settings: &LoopSettings,
    data: &[NormalizedTrajectory],
    store: &mut ParamStore,
) -> Result<TrainReport, LassError> {
    if data.is_empty() {
        return Err(LassError::Data("training set is empty".into()));
    }
    model_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: settings.lr,
        betas: settings.betas,
        weight_decay: settings.weight_decay,
    });
    let mut report = TrainReport::default();
    let mut step = 0usize;
    for _epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(settings.batch_size.max(1)) {
            let mut acc: HashMap<String, Tensor> = HashMap::new();
            let mut n_ok = 0usize;
            let (mut loss_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);
            for &idx in batch {
                let nt = &data[idx];
                let ratio = settings.prefix_ratios[rng.gen_range(0..settings.prefix_ratios.len())];
                let sample = match slice_prefix(nt, ratio) {
                    Ok(s) => s,
                    Err(_) => {
                        report.skipped_samples += 1;
                        continue;
                    }
                };
                let eps = draw_eps(&mut rng, nt.state_dim(), model_cfg.d_z);
                let mut tape = Tape::new();
                let out = match model::forward(
                    model_cfg,
                    store,
                    &mut tape,
                    &sample,
                    SampleMode::Sample,
                    Some(&eps),
                    false,
                ) {
                    Ok(o) => o,
                    Err(LassError::NonFinite { .. }) => {
                        report.skipped_samples += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let (loss, recon, kl) = elbo_loss(&mut tape, &out, &sample, settings.kl_weight);
                loss_sum += tape.value(loss).get(0, 0);
                recon_sum += recon;
                kl_sum += kl;
                let grads = tape.backward(loss);
                for (path, g) in grads.into_path_map() {
                    match acc.get_mut(&path) {
                        Some(t) => {
                            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            acc.insert(path, g);
                        }
                    }
                }
                n_ok += 1;
            }
            if n_ok == 0 {
                continue;
            }
            let inv = 1.0 / n_ok as f64;
            for g in acc.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            let grads = Gradients::from_path_map(acc);
            match opt.step(store, &grads) {
                Ok(()) => {
                    step += 1;
                    report.records.push(StepRecord {
                        step,
                        loss: loss_sum * inv,
                        recon: recon_sum * inv,
                        kl: kl_sum * inv,
                    });
                }
                Err(LassError::NanGradient { .. }) => report.skipped_steps += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(report)
}

/// Full training over `data` with the settings in `cfg`, mutating `store`
/// in place.
pub fn train(
    cfg: &TrainConfig,
    data: &[NormalizedTrajectory],
    store: &mut ParamStore,
) -> Result<TrainReport, LassError> {
    run_loop(
        &cfg.model,
        &LoopSettings {
            lr: cfg.lr,
            betas: cfg.betas,
            weight_decay: cfg.weight_decay,
            batch_size: cfg.batch_size,
            epochs: cfg.epochs,
            kl_weight: cfg.kl_weight,
            prefix_ratios: cfg.prefix_ratios.clone(),
            seed: cfg.seed,
        },
        data,
        store,
    )
}

/// Attention projection matrices of every layer — the default adapter
/// targets.
pub fn default_lora_targets(cfg: &ModelConfig) -> Vec<String> {
    let mut targets = Vec::new();
    for layer in 0..cfg.n_layers {
        for proj in ["wq", "wk", "wv", "wo"] {
            targets.push(format!("backbone/l{layer}/attn/{proj}"));
        }
    }
    targets
}

/// Attaches zero-initialized low-rank adapters to `targets` and freezes the
/// target weights. The B factor starts at zero, so the model output is
/// bit-identical until the adapters move.
pub fn lora_attach(
    store: &mut ParamStore,
    lora: &LoraConfig,
    targets: &[String],
    seed: u64,
) -> Result<(), LassError> {
    if lora.rank == 0 {
        return Err(LassError::Config("adapter rank must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for path in targets {
        let (rows, cols) = match store.get(path) {
            Some(e) => e.tensor.shape(),
            None => return Err(LassError::UnknownParam { path: path.clone() }),
        };
        let limit = (6.0 / (lora.rank + cols) as f64).sqrt();
        let a = Tensor::uniform(lora.rank, cols, limit, &mut rng);
        store.insert_adapter(&format!("{path}.lora_a"), a);
        store.insert_adapter(&format!("{path}.lora_b"), Tensor::zeros(rows, lora.rank));
        store.insert_frozen(
            &format!("{path}.lora_scale"),
            Tensor::scalar(lora.alpha / lora.rank as f64),
        );
        store.get_mut(path).unwrap().trainable = false;
    }
    Ok(())
}

/// Adapter-only fine-tuning: freezes every base parameter, attaches
/// adapters to the attention projections, and trains with the adapter
/// learning rate.
pub fn finetune(
    cfg: &TrainConfig,
    lora: &LoraConfig,
    data: &[NormalizedTrajectory],
    store: &mut ParamStore,
) -> Result<TrainReport, LassError> {
    store.freeze_all();
    lora_attach(
        store,
        lora,
        &default_lora_targets(&cfg.model),
        cfg.seed ^ 0x7a5c,
    )?;
    run_loop(
        &cfg.model,
        &LoopSettings {
            lr: lora.lr,
            betas: cfg.betas,
            weight_decay: cfg.weight_decay,
            batch_size: cfg.batch_size,
            epochs: lora.epochs,
            kl_weight: cfg.kl_weight,
            prefix_ratios: cfg.prefix_ratios.clone(),
            seed: cfg.seed.wrapping_add(1),
        },
        data,
        store,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::ode;
    use crate::pipeline::normalize;

    fn toy_data(n_traj: usize, n_points: usize) -> Vec<NormalizedTrajectory> {
        let systems = ode::register_builtin_systems();
        let sys = systems
            .iter()
            .find(|s| s.name == "harmonic_oscillator")
            .unwrap();
        let t_max = 2.0;
        let dt = t_max / (n_points - 1) as f64;
        (0..n_traj)
            .map(|i| {
                let x0 = [0.5 + 0.1 * i as f64, 0.0];
                let traj = ode::simulate(sys, &x0, t_max, dt).unwrap();
                normalize(&traj, t_max).unwrap()
            })
            .collect()
    }

    fn toy_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batch_size: 2,
            prefix_ratios: vec![0.5],
            model: ModelConfig::toy(),
            ..TrainConfig::default()
        }
    }

    fn posterior_of(tape: &mut Tape, mu: f64, sigma: f64, d: usize) -> LatentPosterior {
        LatentPosterior {
            mean: tape.constant(Tensor::row_vec(vec![mu; d])),
            sigma: tape.constant(Tensor::row_vec(vec![sigma; d])),
        }
    }

    #[test]
    fn kl_of_standard_normal_is_zero() {
        let mut tape = Tape::new();
        let post = posterior_of(&mut tape, 0.0, 1.0, 4);
        let kl = kl_standard_normal(&mut tape, &post);
        assert!(tape.value(kl).get(0, 0).abs() < 1e-14);
    }

    #[test]
    fn kl_closed_form_values() {
        // mu=1, sigma=1: 0.5 per coordinate
        let mut tape = Tape::new();
        let post = posterior_of(&mut tape, 1.0, 1.0, 1);
        let kl = kl_standard_normal(&mut tape, &post);
        assert!((tape.value(kl).get(0, 0) - 0.5).abs() < 1e-14);
        // mu=0, sigma=2: 0.5 * (4 - 1 - ln 4) = 0.80685...
        let post = posterior_of(&mut tape, 0.0, 2.0, 1);
        let kl = kl_standard_normal(&mut tape, &post);
        let want = 0.5 * (4.0 - 1.0 - 4.0f64.ln());
        assert!((tape.value(kl).get(0, 0) - want).abs() < 1e-14);
        assert!((want - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn training_reduces_the_loss() {
        let data = toy_data(2, 8);
        let mut cfg = toy_train_cfg();
        cfg.epochs = 40;
        cfg.lr = 3e-3;
        let mut store = init_params(&cfg.model, 3);
        let report = train(&cfg, &data, &mut store).unwrap();
        let first: f64 = report.records[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        let n = report.records.len();
        let last: f64 = report.records[n - 5..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert_eq!(report.skipped_steps, 0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = toy_data(2, 6);
        let mut cfg = toy_train_cfg();
        cfg.lr = 0.0;
        let mut store = init_params(&cfg.model, 3);
        let before: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, e)| e.tensor.data().to_vec())
            .collect();
        train(&cfg, &data, &mut store).unwrap();
        let after: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, e)| e.tensor.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn same_seed_reproduces_parameters() {
        let data = toy_data(3, 6);
        let cfg = toy_train_cfg();
        let run = || {
            let mut store = init_params(&cfg.model, 3);
            train(&cfg, &data, &mut store).unwrap();
            store
                .iter()
                .map(|(_, e)| e.tensor.data().to_vec())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_log_format() {
        let dir = std::env::temp_dir().join("lassode_loss_log_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("loss.csv");
        let records = vec![StepRecord {
            step: 1,
            loss: 0.5,
            recon: 0.4,
            kl: 100.0,
        }];
        write_loss_log(&records, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,loss,recon,kl\n1,0.5"));
    }

    #[test]
    fn lora_rank_zero_is_rejected() {
        let cfg = ModelConfig::toy();
        let mut store = init_params(&cfg, 1);
        let lora = LoraConfig {
            rank: 0,
            ..LoraConfig::default()
        };
        let err = lora_attach(&mut store, &lora, &default_lora_targets(&cfg), 0).unwrap_err();
        assert!(matches!(err, LassError::Config(_)));
    }

    #[test]
    fn lora_unknown_target_is_rejected() {
        let cfg = ModelConfig::toy();
        let mut store = init_params(&cfg, 1);
        let err = lora_attach(
            &mut store,
            &LoraConfig::default(),
            &["backbone/l9/attn/wq".to_string()],
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("backbone/l9/attn/wq"));
    }

    #[test]
    fn fresh_adapters_leave_the_forward_pass_bit_identical() {
        let cfg = ModelConfig::toy();
        let mut store = init_params(&cfg, 7);
        let data = toy_data(1, 6);
        let sample = slice_prefix(&data[0], 0.5).unwrap();
        let mut t1 = Tape::new();
        let o1 = model::forward(
            &cfg,
            &store,
            &mut t1,
            &sample,
            SampleMode::Mean,
            None,
            false,
        )
        .unwrap();
        lora_attach(
            &mut store,
            &LoraConfig::default(),
            &default_lora_targets(&cfg),
            0,
        )
        .unwrap();
        let mut t2 = Tape::new();
        let o2 = model::forward(
            &cfg,
            &store,
            &mut t2,
            &sample,
            SampleMode::Mean,
            None,
            false,
        )
        .unwrap();
        assert_eq!(
            t1.value(o1.predictions[0]).data(),
            t2.value(o2.predictions[0]).data()
        );
    }

    #[test]
    fn finetune_touches_only_adapters() {
        let data = toy_data(2, 6);
        let mut cfg = toy_train_cfg();
        cfg.epochs = 2;
        let mut store = init_params(&cfg.model, 11);
        let lora = LoraConfig {
            epochs: 3,
            ..LoraConfig::default()
        };
        let base_before: Vec<(String, Vec<f64>)> = store
            .iter()
            .map(|(p, e)| (p.to_string(), e.tensor.data().to_vec()))
            .collect();
        finetune(&cfg, &lora, &data, &mut store).unwrap();
        let mut adapters_moved = false;
        for (path, before) in &base_before {
            let after = store.tensor(path);
            assert_eq!(before, after.data(), "base parameter {path} changed");
        }
        for (path, entry) in store.iter() {
            if entry.lora_adapter && path.ends_with(".lora_b") && entry.tensor.max_abs() > 0.0 {
                adapters_moved = true;
            }
        }
        assert!(adapters_moved, "no adapter received an update");
    }
}
