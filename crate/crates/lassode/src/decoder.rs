//! Latent decoding: per-token affine vector fields, the piecewise RK4
//! solver, an exact affine-flow oracle, and the parameter-estimation cost
//! model.
//!
//! The solver here is plain f64 (no tape) and serves as the reference for
//! oracle tests, evaluation, and wall-clock benchmarks; the differentiable
//! twin used during training lives in `model`.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::{mlp2_tanh, register_mlp2};
use crate::error::LassError;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::TokenGrid;

/// Latent states past this magnitude abort the solve as divergent.
pub const LATENT_BLOWUP: f64 = 1e9;

pub fn theta_dim(d_z: usize) -> usize {
    d_z * d_z + d_z
}

pub fn register_params<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    if cfg.ablation.mlp_ode_field {
        register_mlp2(
            store,
            "dec/field",
            cfg.d_z + cfg.d_model,
            cfg.hidden,
            cfg.d_z,
            rng,
        );
    } else {
        register_mlp2(
            store,
            "dec/param",
            cfg.d_model,
            cfg.d_model,
            theta_dim(cfg.d_z),
            rng,
        );
        // small output scale keeps the initial fields well inside stability
        for v in store.get_mut("dec/param/w2").unwrap().tensor.data_mut() {
            *v *= 0.1;
        }
    }
    let limit = (6.0 / (cfg.d_z + 1) as f64).sqrt();
    store.insert("dec/readout/w", Tensor::uniform(cfg.d_z, 1, limit, rng));
    store.insert("dec/readout/b", Tensor::zeros(1, 1));
}

/// Maps one channel's token rows (k_token x d_model) to stacked field
/// parameters (k_token x (d_z^2 + d_z)).
pub fn estimate_params(store: &ParamStore, tape: &mut Tape, rows: Var) -> Var {
    mlp2_tanh(store, tape, "dec/param", rows)
}

/// One token interval's affine field dz/dt = A z + b.
#[derive(Clone, Debug)]
pub struct AffinePiece {
    /// d_z x d_z, row-major
    pub a: Tensor,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PiecewiseField {
    pub pieces: Vec<AffinePiece>,
    pub d_z: usize,
}

impl PiecewiseField {
    /// Unpacks a (k_token x (d_z^2 + d_z)) parameter matrix; each row is
    /// [A row-major | b].
    pub fn from_theta(theta: &Tensor, d_z: usize) -> Self {
        let (k, width) = theta.shape();
        assert_eq!(width, theta_dim(d_z), "theta width");
        let pieces = (0..k)
            .map(|r| {
                let row = theta.row(r);
                AffinePiece {
                    a: Tensor::from_vec(d_z, d_z, row[..d_z * d_z].to_vec()),
                    b: row[d_z * d_z..].to_vec(),
                }
            })
            .collect();
        PiecewiseField { pieces, d_z }
    }

    fn rhs(&self, piece: usize, z: &[f64], out: &mut [f64]) {
        let p = &self.pieces[piece];
        for i in 0..self.d_z {
            let mut acc = p.b[i];
            for j in 0..self.d_z {
                acc += p.a.get(i, j) * z[j];
            }
            out[i] = acc;
        }
    }
}

fn rk4_step<F: FnMut(&[f64], &mut [f64])>(z: &mut [f64], h: f64, mut rhs: F, stages: &mut usize) {
    let d = z.len();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    rhs(z, &mut k1);
    for i in 0..d {
        tmp[i] = z[i] + 0.5 * h * k1[i];
    }
    rhs(&tmp, &mut k2);
    for i in 0..d {
        tmp[i] = z[i] + 0.5 * h * k2[i];
    }
    rhs(&tmp, &mut k3);
    for i in 0..d {
        tmp[i] = z[i] + h * k3[i];
    }
    rhs(&tmp, &mut k4);
    for i in 0..d {
        z[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    *stages += 4;
}

fn check_finite(z: &[f64]) -> Result<(), LassError> {
    if z.iter().any(|v| !v.is_finite() || v.abs() > LATENT_BLOWUP) {
        return Err(LassError::NonFinite {
            context: "latent solve".into(),
            limit: LATENT_BLOWUP,
        });
    }
    Ok(())
}

/// Integrates the piecewise field over [0, 1] with `n_step` RK4 steps per
/// token interval, landing exactly on every requested eval time.
///
/// `eval_times` must be sorted, within [0, 1]. Returns the latent state at
/// each eval time and the number of field-evaluation stages consumed.
pub fn solve_piecewise(
    field: &PiecewiseField,
    z0: &[f64],
    eval_times: &[f64],
    n_step: usize,
) -> Result<(Tensor, usize), LassError> {
    let k = field.pieces.len();
    let grid = TokenGrid::new(k);
    let mut z = z0.to_vec();
    let mut out = Tensor::zeros(eval_times.len(), field.d_z);
    let mut stages = 0usize;
    let mut next_eval = 0usize;
    let mut t = 0.0f64;
    check_finite(&z)?;
    while next_eval < eval_times.len() && eval_times[next_eval] <= t {
        for i in 0..field.d_z {
            out.set(next_eval, i, z[i]);
        }
        next_eval += 1;
    }
    for piece in 0..k {
        let (start, end) = (grid.start(piece), grid.end(piece));
        // merge the uniform substep grid with eval times inside the interval
        let mut knots: Vec<f64> = (1..=n_step)
            .map(|s| start + (end - start) * s as f64 / n_step as f64)
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
                rk4_step(&mut z, h, |zz, o| field.rhs(piece, zz, o), &mut stages);
                check_finite(&z)?;
                t = knot;
            }
            while next_eval < eval_times.len() && eval_times[next_eval] <= t + 1e-15 {
                for i in 0..field.d_z {
                    out.set(next_eval, i, z[i]);
                }
                next_eval += 1;
            }
        }
        t = end;
    }
    debug_assert_eq!(next_eval, eval_times.len(), "eval times past t=1");
    Ok((out, stages))
}

/// f64 twin of the nonlinear-field ablation: dz/dt = MLP([z; e_k]) with the
/// token embedding of the active interval. Weights are read straight from
/// the store.
pub fn solve_mlp_field(
    store: &ParamStore,
    token_rows: &Tensor,
    z0: &[f64],
    eval_times: &[f64],
    n_step: usize,
) -> Result<(Tensor, usize), LassError> {
    let (k, d_model) = token_rows.shape();
    let d_z = z0.len();
    let grid = TokenGrid::new(k);
    let w1 = store.tensor("dec/field/w1");
    let b1 = store.tensor("dec/field/b1");
    let w2 = store.tensor("dec/field/w2");
    let b2 = store.tensor("dec/field/b2");
    let hidden = w1.shape().1;
    let rhs = |piece: usize, z: &[f64], out: &mut [f64]| {
        let mut h = b1.row(0).to_vec();
        for (j, hj) in h.iter_mut().enumerate() {
            for (i, zi) in z.iter().enumerate() {
                *hj += zi * w1.get(i, j);
            }
            for c in 0..d_model {
                *hj += token_rows.get(piece, c) * w1.get(d_z + c, j);
            }
            *hj = hj.tanh();
        }
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = b2.get(0, i);
            for j in 0..hidden {
                acc += h[j] * w2.get(j, i);
            }
            *o = acc;
        }
    };
    let mut z = z0.to_vec();
    let mut out = Tensor::zeros(eval_times.len(), d_z);
    let mut stages = 0usize;
    let mut next_eval = 0usize;
    let mut t = 0.0f64;
    check_finite(&z)?;
    while next_eval < eval_times.len() && eval_times[next_eval] <= t {
        for i in 0..d_z {
            out.set(next_eval, i, z[i]);
        }
        next_eval += 1;
    }
    for piece in 0..k {
        let (start, end) = (grid.start(piece), grid.end(piece));
        let mut knots: Vec<f64> = (1..=n_step)
            .map(|s| start + (end - start) * s as f64 / n_step as f64)
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
                rk4_step(&mut z, h, |zz, o| rhs(piece, zz, o), &mut stages);
                check_finite(&z)?;
                t = knot;
            }
            while next_eval < eval_times.len() && eval_times[next_eval] <= t + 1e-15 {
                for i in 0..d_z {
                    out.set(next_eval, i, z[i]);
                }
                next_eval += 1;
            }
        }
        t = end;
    }
    Ok((out, stages))
}

/// Exact solution of dz/dt = A z + b via the matrix exponential of the
/// augmented (d+1)-dimensional system, by scaling-and-squaring Taylor
/// summation.
pub fn affine_oracle(a: &Tensor, b: &[f64], z0: &[f64], t: f64) -> Vec<f64> {
    let d = z0.len();
    assert_eq!(a.shape(), (d, d));
    let n = d + 1;
    let mut m = Tensor::zeros(n, n);
    for i in 0..d {
        for j in 0..d {
            m.set(i, j, a.get(i, j) * t);
        }
        m.set(i, d, b[i] * t);
    }
    let norm: f64 = (0..n)
        .map(|i| (0..n).map(|j| m.get(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let s = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as u32
    } else {
        0
    };
    let scale = 0.5f64.powi(s as i32);
    for v in m.data_mut() {
        *v *= scale;
    }
    // Taylor series of exp(M/2^s)
    let mut result = Tensor::identity(n);
    let mut term = Tensor::identity(n);
    for order in 1..200 {
        term = mat_mul(&term, &m);
        for v in term.data_mut() {
            *v /= order as f64;
        }
        for (r, tv) in result.data_mut().iter_mut().zip(term.data()) {
            *r += tv;
        }
        if term.max_abs() < 1e-18 {
            break;
        }
    }
    for _ in 0..s {
        result = mat_mul(&result, &result);
    }
    let mut aug = z0.to_vec();
    aug.push(1.0);
    (0..d)
        .map(|i| (0..n).map(|j| result.get(i, j) * aug[j]).sum())
        .collect()
}

fn mat_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    assert_eq!(ac, br);
    let mut out = Tensor::zeros(ar, bc);
    for i in 0..ar {
        for k in 0..ac {
            let av = a.get(i, k);
            if av == 0.0 {
                continue;
            }
            for j in 0..bc {
                out.set(i, j, out.get(i, j) + av * b.get(k, j));
            }
        }
    }
    out
}

/// Linear readout per channel: x_hat(t) = z(t) . w + b.
pub fn readout(store: &ParamStore, z_rows: &Tensor) -> Vec<f64> {
    let w = store.tensor("dec/readout/w");
    let b = store.tensor("dec/readout/b").get(0, 0);
    let (rows, d_z) = z_rows.shape();
    (0..rows)
        .map(|r| {
            (0..d_z)
                .map(|i| z_rows.get(r, i) * w.get(i, 0))
                .sum::<f64>()
                + b
        })
        .collect()
}

/// Multiply-accumulate counts for producing and evaluating the latent field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostModel {
    /// one-off cost of estimating (A, b) for a token
    pub c_param: usize,
    /// cost of one affine field evaluation
    pub c_lin: usize,
    /// cost of one nonlinear MLP field evaluation
    pub c_mlp: usize,
}

impl CostModel {
    /// `l_layers` counts weight matrices in the estimation MLP (2 = one
    /// hidden layer).
    pub fn new(d_model: usize, k_width: usize, l_layers: usize, d_z: usize) -> Self {
        let inner = l_layers.saturating_sub(2) * k_width * k_width;
        CostModel {
            c_param: d_model * k_width + inner + k_width * (d_z * d_z + d_z),
            c_lin: d_z * d_z,
            c_mlp: (d_z + d_model) * k_width + inner + k_width * d_z,
        }
    }

    /// Predicted MAC ratio of the nonlinear field to the amortized affine
    /// field over `n_step` evaluations.
    pub fn amortized_ratio(&self, n_step: usize) -> f64 {
        (n_step * self.c_mlp) as f64 / (self.c_param + n_step * self.c_lin) as f64
    }
}
