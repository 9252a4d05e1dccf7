//! Token embeddings: a localized time code per token start, FiLM-style
//! modulation of the channel summary, and additive channel encoding.
//!
//! Every token on [0,1] gets an embedding whether or not its segment was
//! observed, since the code depends only on the token start time and the
//! prefix summary. Row order is channel-major: row = j * k_token + k.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::{mlp2_tanh, register_mlp2};
use crate::error::LassError;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Uniform partition of [0,1] into k_token half-open intervals.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub k_token: usize,
}

impl TokenGrid {
    pub fn new(k_token: usize) -> Self {
        assert!(k_token > 0);
        TokenGrid { k_token }
    }

    pub fn start(&self, k: usize) -> f64 {
        k as f64 / self.k_token as f64
    }

    pub fn end(&self, k: usize) -> f64 {
        (k + 1) as f64 / self.k_token as f64
    }

    /// Interval index holding normalized time t (t=1 maps to the last token).
    pub fn interval_of(&self, t: f64) -> usize {
        ((t * self.k_token as f64).floor() as usize).min(self.k_token - 1)
    }
}

#[derive(Clone, Debug)]
pub struct RbfBank {
    pub centers: Vec<f64>,
    pub sigma: f64,
}

impl RbfBank {
    pub fn new(k_rbf: usize, sigma: f64) -> Self {
        assert!(k_rbf >= 2 && sigma > 0.0);
        let centers = (0..k_rbf).map(|l| l as f64 / (k_rbf - 1) as f64).collect();
        RbfBank { centers, sigma }
    }
}

/// Gaussian kernel responses exp(-(t - mu)^2 / (2 sigma^2)).
pub fn rbf_embed(t: f64, bank: &RbfBank) -> Vec<f64> {
    let two_s2 = 2.0 * bank.sigma * bank.sigma;
    bank.centers
        .iter()
        .map(|mu| (-(t - mu).powi(2) / two_s2).exp())
        .collect()
}

fn fourier_embed(t: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for f in 1..=dim.div_ceil(2) {
        let phase = 2.0 * std::f64::consts::PI * f as f64 * t;
        out.push(phase.sin());
        if out.len() < dim {
            out.push(phase.cos());
        }
    }
    out
}

/// (k_token x code_dim) matrix of time codes at every token start.
pub fn time_code_matrix(cfg: &ModelConfig) -> Tensor {
    let grid = TokenGrid::new(cfg.k_token);
    let bank = RbfBank::new(cfg.k_rbf, cfg.rbf_sigma);
    let mut rows = Vec::with_capacity(cfg.k_token * cfg.k_rbf);
    for k in 0..cfg.k_token {
        let t = grid.start(k);
        let code = if cfg.ablation.fourier_time {
            fourier_embed(t, cfg.k_rbf)
        } else {
            rbf_embed(t, &bank)
        };
        rows.extend(code);
    }
    Tensor::from_vec(cfg.k_token, cfg.k_rbf, rows)
}

pub fn register_params<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let limit = (6.0 / (cfg.d_x_max + cfg.d_model) as f64).sqrt();
    if !cfg.ablation.no_channel_encoding {
        store.insert(
            "tok/channel_table",
            Tensor::uniform(cfg.d_x_max, cfg.d_model, limit, rng),
        );
    }
    if cfg.ablation.mlp_tokenizer {
        register_mlp2(store, "tok/seg", 3, cfg.hidden, cfg.d_model, rng);
        register_mlp2(store, "tok/time", cfg.k_rbf, cfg.hidden, cfg.d_model, rng);
        return;
    }
    register_mlp2(store, "tok/h", cfg.gru_hidden, cfg.hidden, cfg.d_model, rng);
    if !cfg.ablation.rope_time {
        store.insert(
            "tok/ln/gamma",
            Tensor::from_vec(1, cfg.k_rbf, vec![1.0; cfg.k_rbf]),
        );
        store.insert("tok/ln/beta", Tensor::zeros(1, cfg.k_rbf));
        register_mlp2(
            store,
            "tok/mod",
            cfg.k_rbf,
            cfg.hidden,
            2 * cfg.d_model,
            rng,
        );
    }
}

/// FiLM scale/shift per token, shared across channels: both are
/// (k_token x d_model), split from one MLP over the normalized time code.
pub fn film_gamma_beta(cfg: &ModelConfig, store: &ParamStore, tape: &mut Tape) -> (Var, Var) {
    let codes = tape.constant(time_code_matrix(cfg));
    let gamma_ln = tape.param(store, "tok/ln/gamma");
    let beta_ln = tape.param(store, "tok/ln/beta");
    let normed = tape.layer_norm(codes, gamma_ln, beta_ln, LN_EPS);
    let out = mlp2_tanh(store, tape, "tok/mod", normed);
    let gamma = tape.slice_cols(out, 0, cfg.d_model);
    let beta = tape.slice_cols(out, cfg.d_model, cfg.d_model);
    (gamma, beta)
}

/// Repeats a 1 x d row k times via a ones-column matmul (so the gradient
/// sums back over the repeats).
fn repeat_row(tape: &mut Tape, row: Var, k: usize) -> Var {
    let ones = tape.constant(Tensor::from_vec(k, 1, vec![1.0; k]));
    tape.matmul(ones, row)
}

/// Pair-rotation matrix used by the rotary time-code variant:
/// (m P)[2i] = -m[2i+1], (m P)[2i+1] = m[2i].
fn rope_swap_matrix(d: usize) -> Tensor {
    let mut p = Tensor::zeros(d, d);
    let mut i = 0;
    while i + 1 < d {
        p.set(i + 1, i, -1.0);
        p.set(i, i + 1, 1.0);
        i += 2;
    }
    p
}

fn rope_angle_matrices(cfg: &ModelConfig) -> (Tensor, Tensor) {
    let grid = TokenGrid::new(cfg.k_token);
    let d = cfg.d_model;
    let mut cos_m = Tensor::zeros(cfg.k_token, d);
    let mut sin_m = Tensor::zeros(cfg.k_token, d);
    for k in 0..cfg.k_token {
        // positions scaled so a full trajectory spans a wide phase range
        let t = grid.start(k) * cfg.k_token as f64;
        for i in 0..d / 2 {
            let omega = 10_000f64.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = (t * omega).sin_cos();
            cos_m.set(k, 2 * i, c);
            cos_m.set(k, 2 * i + 1, c);
            sin_m.set(k, 2 * i, s);
            sin_m.set(k, 2 * i + 1, s);
        }
    }
    (cos_m, sin_m)
}

/// Per-channel, per-token segment features for the MLP-tokenizer ablation:
/// [mean, first, last] of the observed prefix values in each token interval,
/// zeros for unobserved segments.
pub fn segment_features(
    cfg: &ModelConfig,
    norm_times: &[f64],
    values: &[f64],
    prefix_len: usize,
) -> Tensor {
    let grid = TokenGrid::new(cfg.k_token);
    let mut feats = Tensor::zeros(cfg.k_token, 3);
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); cfg.k_token];
    for (t, v) in norm_times.iter().zip(values).take(prefix_len) {
        buckets[grid.interval_of(*t)].push(*v);
    }
    for (k, bucket) in buckets.iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let mean = bucket.iter().sum::<f64>() / bucket.len() as f64;
        feats.set(k, 0, mean);
        feats.set(k, 1, bucket[0]);
        feats.set(k, 2, *bucket.last().unwrap());
    }
    feats
}

/// Stacks per-channel token embeddings into the (k_token * d_x) x d_model
/// system matrix. `summaries` carries one GRU summary per channel (FiLM and
/// rotary paths); `seg_feats` carries per-channel segment features (MLP
/// tokenizer path).
pub fn tokenize(
    cfg: &ModelConfig,
    store: &ParamStore,
    tape: &mut Tape,
    summaries: &[Var],
    seg_feats: Option<&[Tensor]>,
) -> Result<Var, LassError> {
    let d_x = if cfg.ablation.mlp_tokenizer {
        seg_feats
            .expect("mlp tokenizer needs segment features")
            .len()
    } else {
        summaries.len()
    };
    if d_x > cfg.d_x_max {
        return Err(LassError::ChannelOutOfRange {
            channel: d_x,
            max: cfg.d_x_max,
        });
    }

    let film = (!cfg.ablation.mlp_tokenizer && !cfg.ablation.rope_time)
        .then(|| film_gamma_beta(cfg, store, tape));
    let rope = cfg.ablation.rope_time.then(|| {
        let (c, s) = rope_angle_matrices(cfg);
        (
            tape.constant(c),
            tape.constant(s),
            tape.constant(rope_swap_matrix(cfg.d_model)),
        )
    });
    let time_add = cfg.ablation.mlp_tokenizer.then(|| {
        let codes = tape.constant(time_code_matrix(cfg));
        mlp2_tanh(store, tape, "tok/time", codes)
    });

    let mut blocks: Option<Var> = None;
    for j in 0..d_x {
        let mut block = if cfg.ablation.mlp_tokenizer {
            let feats = tape.constant(seg_feats.unwrap()[j].clone());
            let seg = mlp2_tanh(store, tape, "tok/seg", feats);
            tape.add(seg, time_add.unwrap())
        } else {
            let m = mlp2_tanh(store, tape, "tok/h", summaries[j]);
            let rep = repeat_row(tape, m, cfg.k_token);
            if let Some((cos_m, sin_m, swap)) = rope {
                let straight = tape.mul(rep, cos_m);
                let swapped = tape.matmul(rep, swap);
                let rotated = tape.mul(swapped, sin_m);
                tape.add(straight, rotated)
            } else {
                let (gamma, beta) = film.unwrap();
                let scaled = tape.mul(gamma, rep);
                tape.add(scaled, beta)
            }
        };
        if !cfg.ablation.no_channel_encoding {
            let table = tape.param(store, "tok/channel_table");
            let c_row = tape.slice_rows(table, j, 1);
            block = tape.add_row(block, c_row);
        }
        blocks = Some(match blocks {
            None => block,
            Some(acc) => tape.concat_rows(acc, block),
        });
    }
    Ok(blocks.expect("at least one channel"))
}
