//! Time-aware GRU channel summaries and the posterior over the initial
//! latent state.
//!
//! The GRU consumes `[value; dt]` per step. The whole sequence is encoded
//! once and the summary is read at the last prefix index, which equals a
//! prefix-only run because the recurrence is causal.

use rand::Rng;

use crate::config::ModelConfig;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 1e2;

fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(rows, cols, limit, rng)
}

/// 2-layer tanh MLP parameters under `prefix/{w1,b1,w2,b2}`.
pub fn register_mlp2<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
    rng: &mut R,
) {
    store.insert(&format!("{prefix}/w1"), xavier(in_dim, hidden, rng));
    store.insert(&format!("{prefix}/b1"), Tensor::zeros(1, hidden));
    store.insert(&format!("{prefix}/w2"), xavier(hidden, out_dim, rng));
    store.insert(&format!("{prefix}/b2"), Tensor::zeros(1, out_dim));
}

pub fn mlp2_tanh(store: &ParamStore, tape: &mut Tape, prefix: &str, x: Var) -> Var {
    let w1 = tape.param(store, &format!("{prefix}/w1"));
    let b1 = tape.param(store, &format!("{prefix}/b1"));
    let w2 = tape.param(store, &format!("{prefix}/w2"));
    let b2 = tape.param(store, &format!("{prefix}/b2"));
    let h = tape.affine(x, w1, b1);
    let h = tape.tanh(h);
    tape.affine(h, w2, b2)
}

pub fn gru_input_dim(cfg: &ModelConfig) -> usize {
    if cfg.ablation.channel_dependent_encoder {
        cfg.d_x_max + 1
    } else {
        2
    }
}

pub fn register_params<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let h = cfg.gru_hidden;
    let mut in_dim = gru_input_dim(cfg);
    for layer in 0..cfg.gru_layers {
        // gate layout along columns: [reset | update | candidate]
        store.insert(&format!("gru/l{layer}/wx"), xavier(in_dim, 3 * h, rng));
        store.insert(&format!("gru/l{layer}/wh"), xavier(h, 3 * h, rng));
        store.insert(&format!("gru/l{layer}/bx"), Tensor::zeros(1, 3 * h));
        store.insert(&format!("gru/l{layer}/bh"), Tensor::zeros(1, 3 * h));
        in_dim = h;
    }
    register_mlp2(store, "enc/mu", h, cfg.hidden, cfg.d_z, rng);
    register_mlp2(store, "enc/logvar", h, cfg.hidden, cfg.d_z, rng);
}

fn gru_cell(
    store: &ParamStore,
    tape: &mut Tape,
    layer: usize,
    hidden: usize,
    x: Var,
    h: Var,
) -> Var {
    let wx = tape.param(store, &format!("gru/l{layer}/wx"));
    let wh = tape.param(store, &format!("gru/l{layer}/wh"));
    let bx = tape.param(store, &format!("gru/l{layer}/bx"));
    let bh = tape.param(store, &format!("gru/l{layer}/bh"));

    let gx = tape.affine(x, wx, bx);
    let gh = tape.affine(h, wh, bh);

    let gx_r = tape.slice_cols(gx, 0, hidden);
    let gx_z = tape.slice_cols(gx, hidden, hidden);
    let gx_n = tape.slice_cols(gx, 2 * hidden, hidden);
    let gh_r = tape.slice_cols(gh, 0, hidden);
    let gh_z = tape.slice_cols(gh, hidden, hidden);
    let gh_n = tape.slice_cols(gh, 2 * hidden, hidden);

    let r_pre = tape.add(gx_r, gh_r);
    let r = tape.sigmoid(r_pre);
    let z_pre = tape.add(gx_z, gh_z);
    let z = tape.sigmoid(z_pre);
    let gated = tape.mul(r, gh_n);
    let n_pre = tape.add(gx_n, gated);
    let n = tape.tanh(n_pre);

    let one_minus_z = tape.one_minus(z);
    let a = tape.mul(one_minus_z, n);
    let b = tape.mul(z, h);
    tape.add(a, b)
}

/// Runs the stacked GRU over `inputs` (one 1 x in_dim row per step) and
/// returns the top-layer hidden state at index `prefix_len - 1`.
pub fn gru_summary(
    cfg: &ModelConfig,
    store: &ParamStore,
    tape: &mut Tape,
    inputs: &[Tensor],
    prefix_len: usize,
) -> Var {
    assert!(prefix_len >= 2, "prefix must hold at least 2 observations");
    assert!(prefix_len <= inputs.len());
    let hidden = cfg.gru_hidden;
    let mut layer_inputs: Vec<Var> = inputs
        .iter()
        .take(prefix_len)
        .map(|t| tape.constant(t.clone()))
        .collect();
    let mut summary = None;
    for layer in 0..cfg.gru_layers {
        let mut h = tape.constant(Tensor::zeros(1, hidden));
        let mut outputs = Vec::with_capacity(layer_inputs.len());
        for &x in &layer_inputs {
            h = gru_cell(store, tape, layer, hidden, x, h);
            outputs.push(h);
        }
        summary = Some(*outputs.last().unwrap());
        layer_inputs = outputs;
    }
    summary.expect("at least one GRU layer")
}

/// Builds the `[value; dt]` input rows for one channel.
pub fn channel_inputs(values: &[f64], norm_dt: f64) -> Vec<Tensor> {
    values
        .iter()
        .map(|v| Tensor::row_vec(vec![*v, norm_dt]))
        .collect()
}

pub struct LatentPosterior {
    pub mean: Var,
    pub sigma: Var,
}

pub fn posterior(
    cfg: &ModelConfig,
    store: &ParamStore,
    tape: &mut Tape,
    h: Var,
) -> LatentPosterior {
    let _ = cfg;
    let mean = mlp2_tanh(store, tape, "enc/mu", h);
    let logvar = mlp2_tanh(store, tape, "enc/logvar", h);
    let half = tape.scale(logvar, 0.5);
    let sigma_raw = tape.exp(half);
    let sigma = tape.clamp(sigma_raw, SIGMA_MIN, SIGMA_MAX);
    LatentPosterior { mean, sigma }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    Sample,
    Mean,
}

/// Reparameterized draw: mean + sigma .* eps. `eps` enters as a constant so
/// gradients flow to the posterior parameters only.
pub fn sample_z0(
    tape: &mut Tape,
    post: &LatentPosterior,
    mode: SampleMode,
    eps: Option<&[f64]>,
) -> Var {
    match mode {
        SampleMode::Mean => post.mean,
        SampleMode::Sample => {
            let d = tape.value(post.mean).cols();
            let eps = eps.expect("sample mode needs noise");
            assert_eq!(eps.len(), d);
            let noise = tape.constant(Tensor::row_vec(eps.to_vec()));
            let scaled = tape.mul(post.sigma, noise);
            tape.add(post.mean, scaled)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_store(zero: bool) -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        register_params(&cfg, &mut store, &mut rng);
        if zero {
            for (_, e) in store.iter_mut() {
                for v in e.tensor.data_mut() {
                    *v = 0.0;
                }
            }
        }
        (cfg, store)
    }

    #[test]
    fn zero_weight_gru_keeps_hidden_at_zero() {
        let (cfg, store) = toy_store(true);
        let mut tape = Tape::new();
        let inputs = channel_inputs(&[0.5, -0.3, 0.9, 0.1], 0.01);
        let h = gru_summary(&cfg, &store, &mut tape, &inputs, 4);
        assert!(tape.value(h).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn full_prefix_summary_is_last_hidden_state() {
        let (cfg, store) = toy_store(false);
        let values = vec![0.1, 0.4, -0.2, 0.8, 0.3];
        let inputs = channel_inputs(&values, 0.05);
        let mut t1 = Tape::new();
        let full = gru_summary(&cfg, &store, &mut t1, &inputs, 5);
        let mut t2 = Tape::new();
        let prefix = gru_summary(&cfg, &store, &mut t2, &inputs, 5);
        assert_eq!(t1.value(full).data(), t2.value(prefix).data());
    }

    #[test]
    fn prefix_causality_is_exact() {
        let (cfg, store) = toy_store(false);
        let prefix_len = 3;
        let a = channel_inputs(&[0.1, 0.4, -0.2, 0.8, 0.3], 0.05);
        let b = channel_inputs(&[0.1, 0.4, -0.2, -5.0, 99.0], 0.05);
        let mut t1 = Tape::new();
        let ha = gru_summary(&cfg, &store, &mut t1, &a, prefix_len);
        let mut t2 = Tape::new();
        let hb = gru_summary(&cfg, &store, &mut t2, &b, prefix_len);
        assert_eq!(t1.value(ha).data(), t2.value(hb).data());
    }

    #[test]
    fn zero_weight_posterior_is_standard_normal() {
        let (cfg, store) = toy_store(true);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::row_vec(vec![0.3; cfg.gru_hidden]));
        let post = posterior(&cfg, &store, &mut tape, h);
        assert!(tape.value(post.mean).data().iter().all(|v| *v == 0.0));
        assert!(tape.value(post.sigma).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sigma_clamps_at_floor() {
        let (cfg, mut store) = toy_store(true);
        // drive logvar strongly negative via its output bias
        let b2 = &mut store.get_mut("enc/logvar/b2").unwrap().tensor;
        for v in b2.data_mut() {
            *v = -1e3;
        }
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::row_vec(vec![0.0; cfg.gru_hidden]));
        let post = posterior(&cfg, &store, &mut tape, h);
        assert!(tape
            .value(post.sigma)
            .data()
            .iter()
            .all(|v| *v == SIGMA_MIN));
    }

    #[test]
    fn mean_mode_returns_mu_and_floor_sigma_sample_is_close() {
        let (cfg, store) = toy_store(false);
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::row_vec(vec![0.2; cfg.gru_hidden]));
        let post = posterior(&cfg, &store, &mut tape, h);
        let mean = sample_z0(&mut tape, &post, SampleMode::Mean, None);
        assert_eq!(tape.value(mean).data(), tape.value(post.mean).data());

        // with sigma forced to the clamp floor a 3-sigma draw stays within 1e-3
        let mut floor_tape = Tape::new();
        let mu = floor_tape.constant(Tensor::row_vec(vec![0.5; cfg.d_z]));
        let sigma = floor_tape.constant(Tensor::row_vec(vec![SIGMA_MIN; cfg.d_z]));
        let post = LatentPosterior { mean: mu, sigma };
        let eps = vec![3.0; cfg.d_z];
        let s = sample_z0(&mut floor_tape, &post, SampleMode::Sample, Some(&eps));
        for (a, b) in floor_tape
            .value(s)
            .data()
            .iter()
            .zip(floor_tape.value(mu).data())
        {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn reparameterization_gradient_matches_finite_differences() {
        let (cfg, store) = toy_store(false);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps: Vec<f64> = (0..cfg.d_z).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values = vec![0.3, -0.6, 0.2, 0.9];
        let err = grad_check(
            &store,
            |s, tape| {
                let inputs = channel_inputs(&values, 0.05);
                let h = gru_summary(&cfg, s, tape, &inputs, 4);
                let post = posterior(&cfg, s, tape, h);
                let z = sample_z0(tape, &post, SampleMode::Sample, Some(&eps));
                let sq = tape.mul(z, z);
                tape.sum_all(sq)
            },
            1e-5,
            40,
        );
        assert!(err < 1e-4, "reparameterization grad error {err}");
    }
}
