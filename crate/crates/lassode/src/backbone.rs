//! Pre-norm transformer backbone with a sparse expert mixture and a shared
//! bank of learned hub rows.
//!
//! Each layer re-appends the hub rows to the data rows, runs attention plus
//! the expert feed-forward, then drops the hub rows again, so the hubs act
//! as a per-layer global workspace rather than carrying state forward.

use rand::Rng;

use crate::config::ModelConfig;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamStore, Tensor};

pub const LN_EPS: f64 = 1e-5;

fn xavier<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform(rows, cols, limit, rng)
}

fn register_ln(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(
        &format!("{prefix}/gamma"),
        Tensor::from_vec(1, dim, vec![1.0; dim]),
    );
    store.insert(&format!("{prefix}/beta"), Tensor::zeros(1, dim));
}

fn register_ffn<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut R) {
    store.insert(
        &format!("{prefix}/w1"),
        xavier(cfg.d_model, cfg.hidden, rng),
    );
    store.insert(&format!("{prefix}/b1"), Tensor::zeros(1, cfg.hidden));
    store.insert(
        &format!("{prefix}/w2"),
        xavier(cfg.hidden, cfg.d_model, rng),
    );
    store.insert(&format!("{prefix}/b2"), Tensor::zeros(1, cfg.d_model));
}

pub fn register_params<R: Rng>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) {
    let d = cfg.d_model;
    if cfg.k_csh > 0 && !cfg.ablation.no_csh {
        if cfg.per_layer_csh {
            for layer in 0..cfg.n_layers {
                store.insert(&format!("csh/l{layer}"), xavier(cfg.k_csh, d, rng));
            }
        } else {
            store.insert("csh/bank", xavier(cfg.k_csh, d, rng));
        }
    }
    for layer in 0..cfg.n_layers {
        let p = format!("backbone/l{layer}");
        register_ln(store, &format!("{p}/ln1"), d);
        register_ln(store, &format!("{p}/ln2"), d);
        for proj in ["wq", "wk", "wv", "wo"] {
            store.insert(&format!("{p}/attn/{proj}"), xavier(d, d, rng));
        }
        if cfg.ablation.single_mlp_ffn {
            register_ffn(store, &format!("{p}/ffn"), cfg, rng);
        } else {
            store.insert(&format!("{p}/moe/gate"), xavier(d, cfg.n_experts, rng));
            for e in 0..cfg.n_experts {
                register_ffn(store, &format!("{p}/moe/e{e}"), cfg, rng);
            }
        }
    }
}

fn ffn_gelu(store: &ParamStore, tape: &mut Tape, prefix: &str, x: Var) -> Var {
    let w1 = tape.param(store, &format!("{prefix}/w1"));
    let b1 = tape.param(store, &format!("{prefix}/b1"));
    let w2 = tape.param(store, &format!("{prefix}/w2"));
    let b2 = tape.param(store, &format!("{prefix}/b2"));
    let h = tape.affine(x, w1, b1);
    let h = tape.gelu(h);
    tape.affine(h, w2, b2)
}

/// Full (non-causal) multi-head attention over all rows.
pub fn mha(
    cfg: &ModelConfig,
    store: &ParamStore,
    tape: &mut Tape,
    prefix: &str,
    x: Var,
    trace_attn: Option<&mut Option<Tensor>>,
) -> Var {
    let d_k = cfg.d_model / cfg.n_heads;
    let wq = tape.param(store, &format!("{prefix}/wq"));
    let wk = tape.param(store, &format!("{prefix}/wk"));
    let wv = tape.param(store, &format!("{prefix}/wv"));
    let wo = tape.param(store, &format!("{prefix}/wo"));
    let q = tape.matmul(x, wq);
    let k = tape.matmul(x, wk);
    let v = tape.matmul(x, wv);
    let mut heads: Option<Var> = None;
    let mut mean_attn: Option<Tensor> = None;
    for h in 0..cfg.n_heads {
        let qh = tape.slice_cols(q, h * d_k, d_k);
        let kh = tape.slice_cols(k, h * d_k, d_k);
        let vh = tape.slice_cols(v, h * d_k, d_k);
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
        let attn = tape.softmax(scores);
        if trace_attn.is_some() {
            let a = tape.value(attn);
            match &mut mean_attn {
                None => mean_attn = Some(a.clone()),
                Some(acc) => {
                    for (dst, src) in acc.data_mut().iter_mut().zip(a.data()) {
                        *dst += src;
                    }
                }
            }
        }
        let out = tape.matmul(attn, vh);
        heads = Some(match heads {
            None => out,
            Some(acc) => tape.concat_cols(acc, out),
        });
    }
    if let Some(slot) = trace_attn {
        let mut a = mean_attn.expect("at least one head");
        for v in a.data_mut() {
            *v /= cfg.n_heads as f64;
        }
        *slot = Some(a);
    }
    tape.matmul(heads.expect("n_heads > 0"), wo)
}

/// Row-wise top-k expert mask over gate logits. Ties resolve toward the
/// lower expert index.
pub fn top_k_mask(logits: &Tensor, k: usize) -> Tensor {
    let (rows, cols) = logits.shape();
    let mut mask = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&a, &b| {
            logits
                .get(r, b)
                .partial_cmp(&logits.get(r, a))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &e in order.iter().take(k) {
            mask.set(r, e, 1.0);
        }
    }
    mask
}

/// Sparse mixture feed-forward: top-k gating with the softmax renormalized
/// over the selected experts, rows dispatched per expert.
pub fn moe_forward(
    cfg: &ModelConfig,
    store: &ParamStore,
    tape: &mut Tape,
    prefix: &str,
    x: Var,
    expert_load: Option<&mut Vec<usize>>,
) -> Var {
    let gate = tape.param(store, &format!("{prefix}/gate"));
    let logits = tape.matmul(x, gate);
    let mask = top_k_mask(tape.value(logits), cfg.top_k);
    let weights = tape.masked_softmax(logits, mask.clone());
    let n_rows = tape.value(x).shape().0;
    let mut out: Option<Var> = None;
    let mut load = vec![0usize; cfg.n_experts];
    for e in 0..cfg.n_experts {
        let idx: Vec<usize> = (0..n_rows).filter(|&r| mask.get(r, e) > 0.5).collect();
        load[e] = idx.len();
        if idx.is_empty() {
            continue;
        }
        let rows = tape.gather_rows(x, &idx);
        let transformed = ffn_gelu(store, tape, &format!("{prefix}/e{e}"), rows);
        let wcol = tape.slice_cols(weights, e, 1);
        let wsel = tape.gather_rows(wcol, &idx);
        let weighted = tape.scale_rows_by_col(transformed, wsel);
        let placed = tape.scatter_rows(weighted, &idx, n_rows);
        out = Some(match out {
            None => placed,
            Some(acc) => tape.add(acc, placed),
        });
    }
    if let Some(slot) = expert_load {
        *slot = load;
    }
    out.expect("top_k >= 1 selects at least one expert per row")
}

/// Telemetry from one forward pass, for the introspection exports.
#[derive(Clone, Debug, Default)]
pub struct BackboneTrace {
    /// head-averaged attention of the first layer, hub rows included
    pub first_layer_attention: Option<Tensor>,
    /// rows routed to each expert, per layer
    pub expert_load: Vec<Vec<usize>>,
}

fn block(
    cfg: &ModelConfig,
    store: &ParamStore,
    tape: &mut Tape,
    layer: usize,
    x: Var,
    trace: Option<&mut BackboneTrace>,
) -> Var {
    let p = format!("backbone/l{layer}");
    let g1 = tape.param(store, &format!("{p}/ln1/gamma"));
    let b1 = tape.param(store, &format!("{p}/ln1/beta"));
    let normed = tape.layer_norm(x, g1, b1, LN_EPS);
    let mut attn_slot = None;
    let want_trace = trace.is_some();
    let attn = mha(
        cfg,
        store,
        tape,
        &format!("{p}/attn"),
        normed,
        (want_trace && layer == 0).then_some(&mut attn_slot),
    );
    let e1 = tape.add(x, attn);
    let g2 = tape.param(store, &format!("{p}/ln2/gamma"));
    let b2 = tape.param(store, &format!("{p}/ln2/beta"));
    let normed2 = tape.layer_norm(e1, g2, b2, LN_EPS);
    let mut load = Vec::new();
    let ffn = if cfg.ablation.single_mlp_ffn {
        ffn_gelu(store, tape, &format!("{p}/ffn"), normed2)
    } else {
        moe_forward(
            cfg,
            store,
            tape,
            &format!("{p}/moe"),
            normed2,
            want_trace.then_some(&mut load),
        )
    };
    if let Some(t) = trace {
        if layer == 0 {
            t.first_layer_attention = attn_slot;
        }
        t.expert_load.push(load);
    }
    tape.add(e1, ffn)
}

fn hub_rows(cfg: &ModelConfig) -> usize {
    if cfg.ablation.no_csh {
        0
    } else {
        cfg.k_csh
    }
}

/// Runs the full stack over the token rows, re-appending the hub bank at
/// every layer and slicing it back off, and returns the data rows.
pub fn stack(
    cfg: &ModelConfig,
    store: &ParamStore,
    tape: &mut Tape,
    tokens: Var,
    mut trace: Option<&mut BackboneTrace>,
) -> Var {
    let n_data = tape.value(tokens).shape().0;
    let hubs = hub_rows(cfg);
    let mut h = tokens;
    for layer in 0..cfg.n_layers {
        let with_hubs = if hubs > 0 {
            let bank_path = if cfg.per_layer_csh {
                format!("csh/l{layer}")
            } else {
                "csh/bank".to_string()
            };
            let bank = tape.param(store, &bank_path);
            tape.concat_rows(h, bank)
        } else {
            h
        };
        let out = block(cfg, store, tape, layer, with_hubs, trace.as_deref_mut());
        h = if hubs > 0 {
            tape.slice_rows(out, 0, n_data)
        } else {
            out
        };
    }
    h
}
