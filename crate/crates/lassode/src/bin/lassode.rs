//! Command-line driver: dataset generation, training, evaluation, adapter
//! fine-tuning, integration benchmarks, ablation sweeps, and introspection
//! exports.
//!
//! Training writes a run directory (`checkpoint.json`, `model.json`,
//! `loss.csv`); downstream commands take that directory via `--run`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use lassode::config::{LoraConfig, ModelConfig, TrainConfig};
use lassode::error::LassError;
use lassode::eval;
use lassode::model;
use lassode::ode;
use lassode::pipeline::{self, NormalizedTrajectory};
use lassode::tensor::ParamStore;
use lassode::train;

#[derive(Parser)]
#[command(name = "lassode", version, about = "latent-ODE sequence model toolkit")]
struct Cli {
    /// rayon worker threads (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// model size preset
    #[arg(long, default_value = "desk", value_parser = ["desk", "full", "toy"])]
    preset: String,
    /// JSON training config; overrides the preset, flags override both
    #[arg(long)]
    config: Option<PathBuf>,
    /// single ablation toggle by name
    #[arg(long)]
    ablation: Option<String>,
    /// master seed (falls back to the LASSODE_SEED environment variable)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate trajectories and write a dataset directory with a manifest
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// comma-separated system names (default: every registered system)
        #[arg(long)]
        systems: Option<String>,
        /// trajectories per system
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// horizon override applied to every listed system
        #[arg(long)]
        t_max: Option<f64>,
        /// sampling-interval override applied to every listed system
        #[arg(long)]
        dt: Option<f64>,
        /// JSON dataset spec with per-system counts, ranges, t_max and dt;
        /// overrides the flags above except --seed
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train a model on a dataset directory
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        kl_weight: Option<f64>,
    },
    /// Score a trained run on a dataset
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// training output directory
        #[arg(long)]
        run: PathBuf,
        /// comma-separated prefix ratios
        #[arg(long, default_value = "0.3,0.6,0.9")]
        ratios: String,
        /// also report the persistence baseline
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapter-only fine-tuning of a trained run on a new dataset
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        rank: usize,
        #[arg(long, default_value_t = 8.0)]
        alpha: f64,
        #[arg(long, default_value_t = 5e-3)]
        ft_lr: f64,
        #[arg(long, default_value_t = 50)]
        ft_epochs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Wall-clock comparison of the affine and nonlinear field decoders
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 9)]
        repeats: usize,
        #[arg(long)]
        n_step: Option<usize>,
    },
    /// Train and score the full model against ablation variants
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// comma-separated variant names; "full" is always included
        #[arg(long, default_value = "no_csh,single_mlp_ffn,mlp_ode_field")]
        variants: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "0.3,0.6,0.9")]
        ratios: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export model internals for one trajectory of a dataset
    Introspect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// trajectory index within the dataset
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("worker pool already initialized");
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn env_seed() -> Option<u64> {
    std::env::var("LASSODE_SEED")
        .ok()
        .and_then(|s| s.parse().ok())
}

fn parse_list(text: &str) -> Result<Vec<f64>, LassError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| LassError::Config(format!("bad number in list: {s}")))
        })
        .collect()
}

/// Preset -> config file -> flags, later entries winning.
fn resolve_train_config(args: &ModelArgs) -> Result<TrainConfig, LassError> {
    let mut cfg = match args.preset.as_str() {
        "full" => TrainConfig::full_scale(),
        "toy" => TrainConfig {
            model: ModelConfig::toy(),
            ..TrainConfig::default()
        },
        _ => TrainConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| LassError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        cfg = serde_json::from_str(&text).map_err(|e| LassError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    }
    if let Some(name) = &args.ablation {
        cfg.model.ablation = lassode::config::AblationToggles::from_name(name)?;
    }
    if let Some(seed) = args.seed.or_else(env_seed) {
        cfg.seed = seed;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn load_normalized(dir: &Path) -> Result<Vec<NormalizedTrajectory>, LassError> {
    let entries = pipeline::load_dataset(dir)?;
    entries
        .iter()
        .map(|(e, traj)| pipeline::normalize(traj, e.t_max))
        .collect()
}

fn load_run(run: &Path) -> Result<(TrainConfig, ParamStore), LassError> {
    let cfg_path = run.join("model.json");
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| LassError::Io {
        path: cfg_path.display().to_string(),
        source: e,
    })?;
    let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| LassError::Parse {
        path: cfg_path.display().to_string(),
        message: e.to_string(),
    })?;
    let store = ParamStore::load(&run.join("checkpoint.json"))?;
    Ok((cfg, store))
}

fn save_run(
    dir: &Path,
    cfg: &TrainConfig,
    store: &ParamStore,
    report: &train::TrainReport,
) -> Result<(), LassError> {
    std::fs::create_dir_all(dir).map_err(|e| LassError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    store.save(&dir.join("checkpoint.json"))?;
    let cfg_path = dir.join("model.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string_pretty(cfg).expect("config serialization"),
    )
    .map_err(|e| LassError::Io {
        path: cfg_path.display().to_string(),
        source: e,
    })?;
    train::write_loss_log(&report.records, &dir.join("loss.csv"))
}

fn run(command: Command) -> Result<(), LassError> {
    match command {
        Command::Generate {
            out,
            systems,
            count,
            seed,
            t_max,
            dt,
            spec,
        } => {
            let registry = ode::register_builtin_systems();
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| LassError::Data(format!("{}: {e}", path.display())))?;
                    let mut parsed: ode::DatasetSpec = serde_json::from_str(&text)
                        .map_err(|e| LassError::Data(format!("{}: {e}", path.display())))?;
                    if let Some(s) = seed.or_else(env_seed) {
                        parsed.seed = s;
                    }
                    parsed
                }
                None => {
                    let names: Vec<String> = match systems {
                        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
                        None => registry.iter().map(|s| s.name.clone()).collect(),
                    };
                    ode::DatasetSpec {
                        systems: names
                            .into_iter()
                            .map(|system| ode::SystemSampleSpec {
                                system,
                                count,
                                x0_range: None,
                                param_ranges: Default::default(),
                                t_max,
                                dt,
                            })
                            .collect(),
                        seed: seed.or_else(env_seed).unwrap_or(0),
                    }
                }
            };
            let trajectories = ode::sample_dataset(&registry, &spec)?;
            let manifest = pipeline::write_dataset(&trajectories, &out)?;
            println!(
                "wrote {} trajectories across {} systems to {}",
                manifest.entries.len(),
                spec.systems.len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            data,
            out,
            model,
            epochs,
            lr,
            batch_size,
            kl_weight,
        } => {
            let mut cfg = resolve_train_config(&model)?;
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            if let Some(v) = lr {
                cfg.lr = v;
            }
            if let Some(v) = batch_size {
                cfg.batch_size = v;
            }
            if let Some(v) = kl_weight {
                cfg.kl_weight = v;
            }
            let dataset = load_normalized(&data)?;
            let mut store = model::init_params(&cfg.model, cfg.seed);
            let report = train::train(&cfg, &dataset, &mut store)?;
            save_run(&out, &cfg, &store, &report)?;
            let last = report.records.last();
            println!(
                "trained {} steps (skipped {} samples, {} steps); final loss {}",
                report.records.len(),
                report.skipped_samples,
                report.skipped_steps,
                last.map_or(f64::NAN, |r| r.loss)
            );
            Ok(())
        }
        Command::Eval {
            data,
            run,
            ratios,
            baseline,
            out,
        } => {
            let (cfg, store) = load_run(&run)?;
            let dataset = load_normalized(&data)?;
            let ratios = parse_list(&ratios)?;
            let report = eval::evaluate(&cfg.model, &store, &dataset, &ratios)?;
            let mut text = report.to_csv();
            if baseline {
                let base = eval::persistence_baseline(&dataset, &ratios)?;
                text.push_str("\npersistence baseline\n");
                text.push_str(&base.to_csv());
            }
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| LassError::Io {
                    path: path.display().to_string(),
                    source: e,
                })?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Finetune {
            data,
            run,
            out,
            rank,
            alpha,
            ft_lr,
            ft_epochs,
            seed,
        } => {
            let (mut cfg, mut store) = load_run(&run)?;
            if let Some(s) = seed.or_else(env_seed) {
                cfg.seed = s;
            }
            let lora = LoraConfig {
                rank,
                alpha,
                lr: ft_lr,
                epochs: ft_epochs,
            };
            let dataset = load_normalized(&data)?;
            let report = train::finetune(&cfg, &lora, &dataset, &mut store)?;
            save_run(&out, &cfg, &store, &report)?;
            println!(
                "finetuned {} steps; final loss {}",
                report.records.len(),
                report.records.last().map_or(f64::NAN, |r| r.loss)
            );
            Ok(())
        }
        Command::Bench {
            model,
            repeats,
            n_step,
        } => {
            let mut cfg = resolve_train_config(&model)?.model;
            if let Some(n) = n_step {
                cfg.n_step = n;
            }
            let report = eval::bench_integration(&cfg, repeats, 1);
            println!("c_param={}", report.cost.c_param);
            println!("c_lin={}", report.cost.c_lin);
            println!("c_mlp={}", report.cost.c_mlp);
            println!("predicted_ratio={:.3}", report.predicted_ratio);
            println!("affine_ns={}", report.affine_ns);
            println!("mlp_ns={}", report.mlp_ns);
            println!("measured_ratio={:.3}", report.measured_ratio);
            Ok(())
        }
        Command::Ablate {
            data,
            model,
            variants,
            epochs,
            ratios,
            out,
        } => {
            let mut cfg = resolve_train_config(&model)?;
            if let Some(v) = epochs {
                cfg.epochs = v;
            }
            let dataset = load_normalized(&data)?;
            let ratios = parse_list(&ratios)?;
            let mut names = vec!["full".to_string()];
            names.extend(variants.split(',').map(|s| s.trim().to_string()));
            names.dedup();
            let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
            let results = eval::run_ablation(&cfg, &name_refs, &dataset, &dataset, &ratios)?;
            let mut text = String::from("variant,avg_mse,final_train_loss\n");
            for r in &results {
                text.push_str(&format!(
                    "{},{:.15},{:.15}\n",
                    r.name, r.avg_mse, r.final_train_loss
                ));
            }
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| LassError::Io {
                    path: path.display().to_string(),
                    source: e,
                })?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Introspect {
            data,
            run,
            out,
            index,
            ratio,
        } => {
            let (cfg, store) = load_run(&run)?;
            let dataset = load_normalized(&data)?;
            let nt = dataset.get(index).ok_or_else(|| {
                LassError::Config(format!(
                    "index {index} out of range (dataset has {} trajectories)",
                    dataset.len()
                ))
            })?;
            eval::export_introspection(&cfg.model, &store, nt, ratio, &out)?;
            println!("wrote introspection files to {}", out.display());
            Ok(())
        }
    }
}
