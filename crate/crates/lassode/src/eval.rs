//! Evaluation, baselines, ablation sweeps, integration benchmarks, and
//! introspection exports.
//!
//! Evaluation decodes with the posterior mean and scores MSE over every
//! timestamp in normalized units, grouped by system and prefix ratio.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AblationToggles, ModelConfig, TrainConfig};
use crate::decoder::{self, CostModel, PiecewiseField};
use crate::encoder::SampleMode;
use crate::error::LassError;
use crate::model;
use crate::pipeline::{slice_prefix, NormalizedTrajectory};
use crate::tape::Tape;
use crate::tensor::{ParamStore, Tensor};
use crate::train;

#[derive(Clone, Debug)]
pub struct EvalCell {
    pub system: String,
    pub ratio: f64,
    pub mse: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub cells: Vec<EvalCell>,
    /// grand mean over every scored (trajectory, ratio) pair
    pub avg: f64,
    pub skipped: usize,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("system,ratio,mse,count\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{:.15},{}\n",
                c.system, c.ratio, c.mse, c.count
            ));
        }
        out.push_str(&format!(
            "Avg,,{:.15},{}\n",
            self.avg,
            self.cells.iter().map(|c| c.count).sum::<usize>()
        ));
        out
    }

    pub fn mse_for(&self, system: &str, ratio: f64) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.system == system && (c.ratio - ratio).abs() < 1e-12)
            .map(|c| c.mse)
    }
}

fn group_cells(scores: Vec<(String, f64, f64)>) -> EvalReport {
    let mut groups: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    for (system, ratio, mse) in &scores {
        let key = (system.clone(), format!("{ratio:.4}"));
        let e = groups.entry(key).or_insert((0.0, 0));
        e.0 += mse;
        e.1 += 1;
        total += mse;
    }
    let cells = groups
        .into_iter()
        .map(|((system, ratio), (sum, count))| EvalCell {
            system,
            ratio: ratio.parse().unwrap(),
            mse: sum / count as f64,
            count,
        })
        .collect();
    let avg = if scores.is_empty() {
        f64::NAN
    } else {
        total / scores.len() as f64
    };
    EvalReport {
        cells,
        avg,
        skipped: 0,
    }
}

fn traj_mse(pred: &[Vec<f64>], nt: &NormalizedTrajectory) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, target) in pred.iter().zip(&nt.channels) {
        for (a, b) in p.iter().zip(target) {
            sum += (a - b) * (a - b);
            n += 1;
        }
    }
    sum / n as f64
}

/// Mean-decoded model MSE over all timestamps, per system and prefix ratio.
pub fn evaluate(
    cfg: &ModelConfig,
    store: &ParamStore,
    data: &[NormalizedTrajectory],
    ratios: &[f64],
) -> Result<EvalReport, LassError> {
    let mut scores = Vec::new();
    let mut skipped = 0usize;
    for nt in data {
        for &ratio in ratios {
            let sample = match slice_prefix(nt, ratio) {
                Ok(s) => s,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let mut tape = Tape::new();
            let out = match model::forward(
                cfg,
                store,
                &mut tape,
                &sample,
                SampleMode::Mean,
                None,
                false,
            ) {
                Ok(o) => o,
                Err(LassError::NonFinite { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let pred: Vec<Vec<f64>> = out
                .predictions
                .iter()
                .map(|p| {
                    let t = tape.value(*p);
                    (0..t.shape().0).map(|i| t.get(i, 0)).collect()
                })
                .collect();
            scores.push((nt.system.clone(), ratio, traj_mse(&pred, nt)));
        }
    }
    let mut report = group_cells(scores);
    report.skipped = skipped;
    Ok(report)
}

/// Persistence forecast: every timestamp is predicted as the last observed
/// prefix value of its channel.
pub fn persistence_baseline(
    data: &[NormalizedTrajectory],
    ratios: &[f64],
) -> Result<EvalReport, LassError> {
    let mut scores = Vec::new();
    let mut skipped = 0usize;
    for nt in data {
        for &ratio in ratios {
            let sample = match slice_prefix(nt, ratio) {
                Ok(s) => s,
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let pred: Vec<Vec<f64>> = nt
                .channels
                .iter()
                .map(|ch| vec![ch[sample.prefix_len - 1]; ch.len()])
                .collect();
            scores.push((nt.system.clone(), ratio, traj_mse(&pred, nt)));
        }
    }
    let mut report = group_cells(scores);
    report.skipped = skipped;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub name: String,
    pub avg_mse: f64,
    pub final_train_loss: f64,
}

/// Trains a fresh model per variant ("full" plus each toggle) with the same
/// budget and data, then scores each on `eval_data`.
pub fn run_ablation(
    train_cfg: &TrainConfig,
    variants: &[&str],
    train_data: &[NormalizedTrajectory],
    eval_data: &[NormalizedTrajectory],
    ratios: &[f64],
) -> Result<Vec<AblationResult>, LassError> {
    let mut results = Vec::new();
    for name in variants {
        let mut cfg = train_cfg.clone();
        cfg.model.ablation = if *name == "full" {
            AblationToggles::default()
        } else {
            AblationToggles::from_name(name)?
        };
        let mut store = model::init_params(&cfg.model, cfg.seed);
        let report = train::train(&cfg, train_data, &mut store)?;
        let eval = evaluate(&cfg.model, &store, eval_data, ratios)?;
        results.push(AblationResult {
            name: name.to_string(),
            avg_mse: eval.avg,
            final_train_loss: report.records.last().map_or(f64::NAN, |r| r.loss),
        });
    }
    Ok(results)
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub cost: CostModel,
    pub predicted_ratio: f64,
    /// median wall-clock of estimate + affine solve, nanoseconds
    pub affine_ns: u128,
    /// median wall-clock of the nonlinear-field solve, nanoseconds
    pub mlp_ns: u128,
    pub measured_ratio: f64,
}

fn median(mut xs: Vec<u128>) -> u128 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

/// Plain-f64 evaluation of the parameter-estimation MLP for one channel's
/// token rows, mirroring `decoder::estimate_params`.
fn estimate_params_f64(store: &ParamStore, rows: &Tensor, d_z: usize) -> Tensor {
    let w1 = store.tensor("dec/param/w1");
    let b1 = store.tensor("dec/param/b1");
    let w2 = store.tensor("dec/param/w2");
    let b2 = store.tensor("dec/param/b2");
    let (k, d_model) = rows.shape();
    let hidden = w1.shape().1;
    let out_dim = decoder::theta_dim(d_z);
    let mut out = Tensor::zeros(k, out_dim);
    let mut h = vec![0.0; hidden];
    for r in 0..k {
        for (j, hj) in h.iter_mut().enumerate() {
            let mut acc = b1.get(0, j);
            for c in 0..d_model {
                acc += rows.get(r, c) * w1.get(c, j);
            }
            *hj = acc.tanh();
        }
        for o in 0..out_dim {
            let mut acc = b2.get(0, o);
            for (j, hj) in h.iter().enumerate() {
                acc += hj * w2.get(j, o);
            }
            out.set(r, o, acc);
        }
    }
    out
}

/// Times the two decoding strategies on one synthetic token matrix: the
/// token-wise affine field (estimation amortized once, cheap field evals)
/// against the shared nonlinear field (expensive field evals).
pub fn bench_integration(cfg: &ModelConfig, repeats: usize, seed: u64) -> BenchReport {
    let mut bench_cfg = cfg.clone();
    // the cost model assumes one estimator width for both strategies
    bench_cfg.hidden = bench_cfg.d_model;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    decoder::register_params(&bench_cfg, &mut store, &mut rng);
    crate::encoder::register_mlp2(
        &mut store,
        "dec/field",
        bench_cfg.d_z + bench_cfg.d_model,
        bench_cfg.hidden,
        bench_cfg.d_z,
        &mut rng,
    );
    // damp the nonlinear field's output layer so neither path blows up
    for path in ["dec/field/w2", "dec/param/w2"] {
        for v in store.get_mut(path).unwrap().tensor.data_mut() {
            *v *= 0.05;
        }
    }

    let tokens = Tensor::uniform(bench_cfg.k_token, bench_cfg.d_model, 0.5, &mut rng);
    let z0 = vec![0.1; bench_cfg.d_z];
    let eval_times: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();

    let mut affine_times = Vec::with_capacity(repeats);
    let mut mlp_times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        let theta = estimate_params_f64(&store, &tokens, bench_cfg.d_z);
        let field = PiecewiseField::from_theta(&theta, bench_cfg.d_z);
        let (za, _) = decoder::solve_piecewise(&field, &z0, &eval_times, bench_cfg.n_step).unwrap();
        affine_times.push(t0.elapsed().as_nanos());
        std::hint::black_box(za);

        let t1 = Instant::now();
        let (zm, _) =
            decoder::solve_mlp_field(&store, &tokens, &z0, &eval_times, bench_cfg.n_step).unwrap();
        mlp_times.push(t1.elapsed().as_nanos());
        std::hint::black_box(zm);
    }
    let cost = CostModel::new(bench_cfg.d_model, bench_cfg.d_model, 2, bench_cfg.d_z);
    let affine_ns = median(affine_times);
    let mlp_ns = median(mlp_times);
    BenchReport {
        cost,
        predicted_ratio: cost.amortized_ratio(bench_cfg.n_step),
        affine_ns,
        mlp_ns,
        measured_ratio: mlp_ns as f64 / affine_ns as f64,
    }
}

fn write_file(dir: &Path, name: &str, text: &str) -> Result<(), LassError> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| LassError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn tensor_csv(header: &str, t: &Tensor, index: Option<&[f64]>) -> String {
    let (rows, cols) = t.shape();
    let mut out = String::from(header);
    out.push('\n');
    for r in 0..rows {
        let mut fields = Vec::with_capacity(cols + 1);
        if let Some(idx) = index {
            fields.push(format!("{:.15}", idx[r]));
        }
        for c in 0..cols {
            fields.push(format!("{:.15}", t.get(r, c)));
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

/// Dumps one trajectory's internals: predictions vs targets, latent paths,
/// per-token field parameters, the first-layer attention map, and expert
/// routing counts.
pub fn export_introspection(
    cfg: &ModelConfig,
    store: &ParamStore,
    nt: &NormalizedTrajectory,
    ratio: f64,
    dir: &Path,
) -> Result<(), LassError> {
    std::fs::create_dir_all(dir).map_err(|e| LassError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let sample = slice_prefix(nt, ratio)?;
    let mut tape = Tape::new();
    let out = model::forward(cfg, store, &mut tape, &sample, SampleMode::Mean, None, true)?;

    let d_x = nt.state_dim();
    let mut pred_csv = String::from("t");
    for j in 0..d_x {
        pred_csv.push_str(&format!(",pred_{j},target_{j}"));
    }
    pred_csv.push('\n');
    for (i, t) in nt.norm_times.iter().enumerate() {
        pred_csv.push_str(&format!("{t:.15}"));
        for j in 0..d_x {
            pred_csv.push_str(&format!(
                ",{:.15},{:.15}",
                tape.value(out.predictions[j]).get(i, 0),
                nt.channels[j][i]
            ));
        }
        pred_csv.push('\n');
    }
    write_file(dir, "predictions.csv", &pred_csv)?;

    for j in 0..d_x {
        let z = tape.value(out.latents[j]);
        let header = std::iter::once("t".to_string())
            .chain((0..cfg.d_z).map(|d| format!("z{d}")))
            .collect::<Vec<_>>()
            .join(",");
        write_file(
            dir,
            &format!("latent_ch{j}.csv"),
            &tensor_csv(&header, z, Some(&nt.norm_times)),
        )?;
    }
    for (j, theta) in out.thetas.iter().enumerate() {
        let t = tape.value(*theta);
        let header = (0..t.shape().1)
            .map(|c| format!("p{c}"))
            .collect::<Vec<_>>()
            .join(",");
        write_file(
            dir,
            &format!("theta_ch{j}.csv"),
            &tensor_csv(&header, t, None),
        )?;
    }
    if let Some(attn) = &out.trace.first_layer_attention {
        let header = (0..attn.shape().1)
            .map(|c| format!("k{c}"))
            .collect::<Vec<_>>()
            .join(",");
        write_file(dir, "attention_l0.csv", &tensor_csv(&header, attn, None))?;
    }
    let mut load_csv = String::from("layer,expert,rows\n");
    for (layer, loads) in out.trace.expert_load.iter().enumerate() {
        for (expert, rows) in loads.iter().enumerate() {
            load_csv.push_str(&format!("{layer},{expert},{rows}\n"));
        }
    }
    write_file(dir, "expert_load.csv", &load_csv)?;
    Ok(())
}
