//! End-to-end differentiable forward pass: channel summaries, posterior
//! sampling, token embedding, backbone, per-token field estimation, the
//! tape-based piecewise RK4 solve, and the linear readout.
//!
//! The plain-f64 solver in `decoder` is the numerical reference; this module
//! mirrors its stepping scheme on the tape so training gradients flow
//! through the integrator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneTrace};
use crate::config::ModelConfig;
use crate::decoder::{self, LATENT_BLOWUP};
use crate::encoder::{self, LatentPosterior, SampleMode};
use crate::error::LassError;
use crate::pipeline::PrefixedSample;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::{self, TokenGrid};

/// Registers every parameter group with a deterministic seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    encoder::register_params(cfg, &mut store, &mut rng);
    tokenizer::register_params(cfg, &mut store, &mut rng);
    backbone::register_params(cfg, &mut store, &mut rng);
    decoder::register_params(cfg, &mut store, &mut rng);
    store
}

pub struct ForwardOutput {
    /// per channel, (n_eval x 1) predictions in normalized units
    pub predictions: Vec<Var>,
    pub posteriors: Vec<LatentPosterior>,
    /// per channel, (n_eval x d_z) latent trajectory
    pub latents: Vec<Var>,
    /// per channel, (k_token x (d_z^2 + d_z)) field parameters; empty under
    /// the nonlinear-field ablation
    pub thetas: Vec<Var>,
    pub trace: BackboneTrace,
}

/// Joint-encoder input rows for the channel-dependent ablation: all
/// channels zero-padded to d_x_max, plus dt.
fn joint_inputs(cfg: &ModelConfig, sample: &PrefixedSample) -> Vec<Tensor> {
    let nt = &sample.traj;
    (0..nt.num_points())
        .map(|i| {
            let mut row = vec![0.0; cfg.d_x_max + 1];
            for (j, ch) in nt.channels.iter().enumerate() {
                row[j] = ch[i];
            }
            row[cfg.d_x_max] = nt.norm_dt;
            Tensor::from_vec(1, cfg.d_x_max + 1, row)
        })
        .collect()
}

fn check_latent(tape: &Tape, z: Var) -> Result<(), LassError> {
    let v = tape.value(z);
    if !v.is_finite() || v.max_abs() > LATENT_BLOWUP {
        return Err(LassError::NonFinite {
            context: "latent solve".into(),
            limit: LATENT_BLOWUP,
        });
    }
    Ok(())
}

/// One RK4 step of dz/dt = rhs(z) on the tape.
fn rk4_tape<F: FnMut(&mut Tape, Var) -> Var>(tape: &mut Tape, z: Var, h: f64, mut rhs: F) -> Var {
    let k1 = rhs(tape, z);
    let half_k1 = tape.scale(k1, 0.5 * h);
    let z2 = tape.add(z, half_k1);
    let k2 = rhs(tape, z2);
    let half_k2 = tape.scale(k2, 0.5 * h);
    let z3 = tape.add(z, half_k2);
    let k3 = rhs(tape, z3);
    let full_k3 = tape.scale(k3, h);
    let z4 = tape.add(z, full_k3);
    let k4 = rhs(tape, z4);
    let mut acc = k1;
    let two_k2 = tape.scale(k2, 2.0);
    acc = tape.add(acc, two_k2);
    let two_k3 = tape.scale(k3, 2.0);
    acc = tape.add(acc, two_k3);
    acc = tape.add(acc, k4);
    let delta = tape.scale(acc, h / 6.0);
    tape.add(z, delta)
}

enum FieldKind {
    /// per-token (A, b) unpacked from theta
    Affine { mats: Vec<Var>, vecs: Vec<Var> },
    /// shared MLP over [z | token row]
    Mlp { token_rows: Var },
}

/// Tape twin of `decoder::solve_piecewise`: same interval grid, eval times
/// merged into the substep knots.
fn solve_tape(
    cfg: &ModelConfig,
    store: &ParamStore,
    tape: &mut Tape,
    field: &FieldKind,
    z0: Var,
    eval_times: &[f64],
) -> Result<Var, LassError> {
    let k = cfg.k_token;
    let grid = TokenGrid::new(k);
    let mut z = z0;
    let mut rows: Vec<Var> = Vec::with_capacity(eval_times.len());
    let mut next_eval = 0usize;
    let mut t = 0.0f64;
    check_latent(tape, z)?;
    while next_eval < eval_times.len() && eval_times[next_eval] <= t {
        rows.push(z);
        next_eval += 1;
    }
    for piece in 0..k {
        let (start, end) = (grid.start(piece), grid.end(piece));
        let mut knots: Vec<f64> = (1..=cfg.n_step)
            .map(|s| start + (end - start) * s as f64 / cfg.n_step as f64)
            .collect();
        let mut e = next_eval;
        while e < eval_times.len() && eval_times[e] <= end + 1e-15 {
            knots.push(eval_times[e].min(end));
            e += 1;
        }
        knots.sort_by(|a, b| a.partial_cmp(b).unwrap());
        knots.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        for knot in knots {
            let h = knot - t;
            if h > 1e-15 {
                z = match field {
                    FieldKind::Affine { mats, vecs } => {
                        let (a, b) = (mats[piece], vecs[piece]);
                        rk4_tape(tape, z, h, |tp, zz| {
                            let az = tp.matmul_nt(zz, a);
                            tp.add(az, b)
                        })
                    }
                    FieldKind::Mlp { token_rows } => {
                        let e_k = tape.slice_rows(*token_rows, piece, 1);
                        rk4_tape(tape, z, h, |tp, zz| {
                            let joined = tp.concat_cols(zz, e_k);
                            encoder::mlp2_tanh(store, tp, "dec/field", joined)
                        })
                    }
                };
                check_latent(tape, z)?;
                t = knot;
            }
            while next_eval < eval_times.len() && eval_times[next_eval] <= t + 1e-15 {
                rows.push(z);
                next_eval += 1;
            }
        }
        t = end;
    }
    let mut out = rows[0];
    for &r in &rows[1..] {
        out = tape.concat_rows(out, r);
    }
    Ok(out)
}

/// Full forward pass over one prefixed sample. `eps` supplies the
/// reparameterization noise per channel when sampling; `Mean` mode ignores
/// it. Predictions cover every timestamp of the trajectory.
pub fn forward(
    cfg: &ModelConfig,
    store: &ParamStore,
    tape: &mut Tape,
    sample: &PrefixedSample,
    mode: SampleMode,
    eps: Option<&[Vec<f64>]>,
    want_trace: bool,
) -> Result<ForwardOutput, LassError> {
    let nt = &sample.traj;
    let d_x = nt.state_dim();
    if d_x == 0 || d_x > cfg.d_x_max {
        return Err(LassError::ChannelOutOfRange {
            channel: d_x,
            max: cfg.d_x_max,
        });
    }

    // channel summaries
    let summaries: Vec<Var> = if cfg.ablation.channel_dependent_encoder {
        let inputs = joint_inputs(cfg, sample);
        let h = encoder::gru_summary(cfg, store, tape, &inputs, sample.prefix_len);
        vec![h; d_x]
    } else {
        nt.channels
            .iter()
            .map(|ch| {
                let inputs = encoder::channel_inputs(ch, nt.norm_dt);
                encoder::gru_summary(cfg, store, tape, &inputs, sample.prefix_len)
            })
            .collect()
    };

    // posterior and initial latent per channel
    let posteriors: Vec<LatentPosterior> = summaries
        .iter()
        .map(|&h| encoder::posterior(cfg, store, tape, h))
        .collect();
    let z0s: Vec<Var> = posteriors
        .iter()
        .enumerate()
        .map(|(j, p)| encoder::sample_z0(tape, p, mode, eps.map(|e| e[j].as_slice())))
        .collect();

    // token embeddings and backbone
    let seg_feats: Option<Vec<Tensor>> = cfg.ablation.mlp_tokenizer.then(|| {
        nt.channels
            .iter()
            .map(|ch| tokenizer::segment_features(cfg, &nt.norm_times, ch, sample.prefix_len))
            .collect()
    });
    let tokens = tokenizer::tokenize(cfg, store, tape, &summaries, seg_feats.as_deref())?;
    let mut trace = BackboneTrace::default();
    let out = backbone::stack(cfg, store, tape, tokens, want_trace.then_some(&mut trace));

    // per-channel field estimation, latent solve, readout
    let w_dec = tape.param(store, "dec/readout/w");
    let b_dec = tape.param(store, "dec/readout/b");
    let mut predictions = Vec::with_capacity(d_x);
    let mut latents = Vec::with_capacity(d_x);
    let mut thetas = Vec::new();
    for j in 0..d_x {
        let rows = tape.slice_rows(out, j * cfg.k_token, cfg.k_token);
        let field = if cfg.ablation.mlp_ode_field {
            FieldKind::Mlp { token_rows: rows }
        } else {
            let theta = decoder::estimate_params(store, tape, rows);
            let d_z = cfg.d_z;
            let mut mats = Vec::with_capacity(cfg.k_token);
            let mut vecs = Vec::with_capacity(cfg.k_token);
            for k in 0..cfg.k_token {
                let row = tape.slice_rows(theta, k, 1);
                let a_flat = tape.slice_cols(row, 0, d_z * d_z);
                mats.push(tape.reshape(a_flat, d_z, d_z));
                vecs.push(tape.slice_cols(row, d_z * d_z, d_z));
            }
            thetas.push(theta);
            FieldKind::Affine { mats, vecs }
        };
        let zs = solve_tape(cfg, store, tape, &field, z0s[j], &nt.norm_times)?;
        let pred = tape.affine(zs, w_dec, b_dec);
        latents.push(zs);
        predictions.push(pred);
    }

    Ok(ForwardOutput {
        predictions,
        posteriors,
        latents,
        thetas,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::theta_dim;
    use crate::ode;
    use crate::pipeline::{normalize, slice_prefix};
    use crate::tape::grad_check;

    fn toy_sample(n_points: usize) -> PrefixedSample {
        let systems = ode::register_builtin_systems();
        let sys = systems
            .iter()
            .find(|s| s.name == "harmonic_oscillator")
            .unwrap();
        let t_max = 2.0;
        let dt = t_max / (n_points - 1) as f64;
        let traj = ode::simulate(sys, &[0.8, 0.0], t_max, dt).unwrap();
        let nt = normalize(&traj, t_max).unwrap();
        slice_prefix(&nt, 0.5).unwrap()
    }

    fn toy_model() -> (ModelConfig, ParamStore) {
        let cfg = ModelConfig::toy();
        let store = init_params(&cfg, 17);
        (cfg, store)
    }

    #[test]
    fn forward_shapes_cover_every_timestamp() {
        let (cfg, store) = toy_model();
        let sample = toy_sample(9);
        let mut tape = Tape::new();
        let out = forward(
            &cfg,
            &store,
            &mut tape,
            &sample,
            SampleMode::Mean,
            None,
            true,
        )
        .unwrap();
        assert_eq!(out.predictions.len(), 2);
        for p in &out.predictions {
            assert_eq!(tape.value(*p).shape(), (9, 1));
        }
        for z in &out.latents {
            assert_eq!(tape.value(*z).shape(), (9, cfg.d_z));
        }
        assert_eq!(out.thetas.len(), 2);
        assert_eq!(
            tape.value(out.thetas[0]).shape(),
            (cfg.k_token, theta_dim(cfg.d_z))
        );
        assert!(out.trace.first_layer_attention.is_some());
    }

    #[test]
    fn mean_mode_is_deterministic() {
        let (cfg, store) = toy_model();
        let sample = toy_sample(7);
        let mut t1 = Tape::new();
        let o1 = forward(
            &cfg,
            &store,
            &mut t1,
            &sample,
            SampleMode::Mean,
            None,
            false,
        )
        .unwrap();
        let mut t2 = Tape::new();
        let o2 = forward(
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
    fn predictions_depend_only_on_the_prefix() {
        let (cfg, store) = toy_model();
        let sample = toy_sample(10);
        let mut perturbed = sample.clone();
        // corrupt values strictly past the prefix
        for ch in &mut perturbed.traj.channels {
            for v in ch.iter_mut().skip(sample.prefix_len) {
                *v = -*v + 0.123;
            }
        }
        let mut t1 = Tape::new();
        let o1 = forward(
            &cfg,
            &store,
            &mut t1,
            &sample,
            SampleMode::Mean,
            None,
            false,
        )
        .unwrap();
        let mut t2 = Tape::new();
        let o2 = forward(
            &cfg,
            &store,
            &mut t2,
            &perturbed,
            SampleMode::Mean,
            None,
            false,
        )
        .unwrap();
        for (a, b) in o1.predictions.iter().zip(&o2.predictions) {
            assert_eq!(t1.value(*a).data(), t2.value(*b).data());
        }
    }

    #[test]
    fn tape_solver_matches_f64_reference() {
        let (cfg, store) = toy_model();
        let sample = toy_sample(8);
        let mut tape = Tape::new();
        let out = forward(
            &cfg,
            &store,
            &mut tape,
            &sample,
            SampleMode::Mean,
            None,
            false,
        )
        .unwrap();
        // rebuild the same field in plain f64 and integrate independently
        let theta = tape.value(out.thetas[0]).clone();
        let field = decoder::PiecewiseField::from_theta(&theta, cfg.d_z);
        let z0 = tape.value(out.latents[0]).row(0).to_vec();
        let (z_ref, _) =
            decoder::solve_piecewise(&field, &z0, &sample.traj.norm_times, cfg.n_step).unwrap();
        let z_tape = tape.value(out.latents[0]);
        for i in 0..z_ref.shape().0 {
            for d in 0..cfg.d_z {
                assert!((z_ref.get(i, d) - z_tape.get(i, d)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_ablation_variants_run_forward() {
        for name in [
            "channel_dependent_encoder",
            "mlp_tokenizer",
            "fourier_time",
            "rope_time",
            "no_channel_encoding",
            "no_csh",
            "single_mlp_ffn",
            "mlp_ode_field",
        ] {
            let mut cfg = ModelConfig::toy();
            cfg.ablation = crate::config::AblationToggles::from_name(name).unwrap();
            let store = init_params(&cfg, 23);
            let sample = toy_sample(6);
            let mut tape = Tape::new();
            let out = forward(
                &cfg,
                &store,
                &mut tape,
                &sample,
                SampleMode::Mean,
                None,
                false,
            )
            .unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(tape.value(out.predictions[0]).shape(), (6, 1), "{name}");
        }
    }

    #[test]
    fn divergent_estimated_field_is_reported() {
        let (cfg, mut store) = toy_model();
        // force an explosive diagonal via the estimator bias
        {
            let b2 = &mut store.get_mut("dec/param/b2").unwrap().tensor;
            for i in 0..cfg.d_z {
                b2.set(0, i * cfg.d_z + i, 60.0);
            }
        }
        let sample = toy_sample(6);
        let mut tape = Tape::new();
        let err = forward(
            &cfg,
            &store,
            &mut tape,
            &sample,
            SampleMode::Mean,
            None,
            false,
        )
        .map(|_| ())
        .unwrap_err();
        assert!(matches!(err, LassError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let (cfg, store) = toy_model();
        let sample = toy_sample(6);
        let eps: Vec<Vec<f64>> = vec![vec![0.3, -0.7, 0.1]; 2];
        let start = std::time::Instant::now();
        let err = grad_check(
            &store,
            |s, tape| {
                let out = forward(
                    &cfg,
                    s,
                    tape,
                    &sample,
                    SampleMode::Sample,
                    Some(&eps),
                    false,
                )
                .unwrap();
                let mut loss = None;
                for p in &out.predictions {
                    let sq = tape.mul(*p, *p);
                    let m = tape.mean_all(sq);
                    loss = Some(match loss {
                        None => m,
                        Some(acc) => tape.add(acc, m),
                    });
                }
                loss.unwrap()
            },
            1e-5,
            6,
        );
        assert!(err < 1e-4, "end-to-end grad error {err}");
        assert!(start.elapsed().as_secs() < 60, "gradient check too slow");
    }
}
