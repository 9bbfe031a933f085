//! Command-line surface. Every subcommand prints human-readable text by
//! default and machine-readable JSON under `--json`. Exit codes: 0 success,
//! 1 verification or assertion failure, 2 usage/config/data error.
//!
//! Checkpoints written by `init`, `train`, and `merge` get a `<path>.json`
//! sidecar holding the run config, so later commands can recover the model
//! geometry, plan, and adapter spec without repeating `--config`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::accounting::{assert_zero_extra, cost_report, count_flops, count_params, Views};
use crate::checkpoint::{load_checkpoint, save_checkpoint, LoadedStore};
use crate::config::{Precision, RunConfig};
use crate::data::{gen_synthetic, load_dataset, save_dataset, SyntheticVideoSpec, VideoDataset};
use crate::error::{Error, Result};
use crate::merge::{merge_model, verify_equivalence};
use crate::rng::SeededRng;
use crate::stdha::HeadOffsetPlan;
use crate::tensor::Elem;
use crate::train::{compare_strategies, evaluate, train, ModelSetup, Strategy, TrainConfig};
use crate::weights::{init_backbone, TrainableMask, WeightStore};

#[derive(Parser)]
#[command(
    name = "zeroi2v",
    version,
    about = "Zero-inference-cost video adaptation toolkit"
)]
struct Cli {
    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a model (with adapters, when configured) and write a checkpoint.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic train/test datasets described by the config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing); writes train.bin and test.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a checkpoint on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Which file of the dataset directory to use.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Fold adapters into the backbone; fails on nonlinear adapters.
    Merge {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare adapted vs merged models over seeded random inputs.
    Verify {
        #[arg(long)]
        adapted: PathBuf,
        #[arg(long)]
        merged: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Analytic FLOP count for a config at the given views.
    Flops {
        #[arg(long)]
        config: PathBuf,
        /// frames x crops x clips, e.g. 8x3x1.
        #[arg(long)]
        views: String,
    },
    /// Parameter counts of a checkpoint, with the zero-extra-cost audit.
    Params {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Temporal receptive field of an offset plan.
    Rf {
        /// JSON array ("[1,-1,0,0]") or multiset ("{1*1,-1*1,0*2}").
        #[arg(long)]
        plan: String,
        /// Stacked depth; omit for a single layer.
        #[arg(long)]
        layers: Option<usize>,
    },
    /// Train each strategy under a shared budget and tabulate.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated strategy names.
        #[arg(long)]
        strategies: String,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_sidecar(ckpt: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(sidecar_path(ckpt), cfg.to_json())?;
    Ok(())
}

/// Run config from an explicit path or the checkpoint's sidecar.
fn resolve_config(explicit: Option<&PathBuf>, ckpt: &Path) -> Result<RunConfig> {
    if let Some(path) = explicit {
        return RunConfig::from_file(path);
    }
    let side = sidecar_path(ckpt);
    if side.exists() {
        return RunConfig::from_file(&side);
    }
    Err(Error::Config(format!(
        "no --config given and no sidecar at {}",
        side.display()
    )))
}

fn test_spec(train_spec: &SyntheticVideoSpec) -> SyntheticVideoSpec {
    let mut spec = train_spec.clone();
    spec.dataset_size = (train_spec.dataset_size / 4).max(2);
    spec.seed = train_spec.seed ^ 0x7465_7374; // disjoint stream for held-out data
    spec
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Init { config, out } => {
            let rc = RunConfig::from_file(&config)?;
            match rc.model.precision {
                Precision::F32 => cmd_init::<f32>(&rc, &out, cli.json),
                Precision::F64 => cmd_init::<f64>(&rc, &out, cli.json),
            }
        }
        Cmd::GenData { config, out } => {
            let rc = RunConfig::from_file(&config)?;
            match rc.model.precision {
                Precision::F32 => cmd_gen_data::<f32>(&rc, &out, cli.json),
                Precision::F64 => cmd_gen_data::<f64>(&rc, &out, cli.json),
            }
        }
        Cmd::Train {
            config,
            ckpt,
            data,
            out,
        } => {
            let rc = resolve_config(config.as_ref(), &ckpt)?;
            match load_checkpoint(&ckpt)? {
                LoadedStore::F32(store) => cmd_train(rc, store, &data, &out, cli.json),
                LoadedStore::F64(store) => cmd_train(rc, store, &data, &out, cli.json),
            }
        }
        Cmd::Eval {
            ckpt,
            data,
            config,
            split,
        } => {
            let rc = resolve_config(config.as_ref(), &ckpt)?;
            match load_checkpoint(&ckpt)? {
                LoadedStore::F32(store) => cmd_eval(rc, store, &data, &split, cli.json),
                LoadedStore::F64(store) => cmd_eval(rc, store, &data, &split, cli.json),
            }
        }
        Cmd::Merge { ckpt, out, config } => {
            let rc = resolve_config(config.as_ref(), &ckpt)?;
            match load_checkpoint(&ckpt)? {
                LoadedStore::F32(store) => cmd_merge(rc, store, &out, cli.json),
                LoadedStore::F64(store) => cmd_merge(rc, store, &out, cli.json),
            }
        }
        Cmd::Verify {
            adapted,
            merged,
            samples,
            tol,
            seed,
            config,
        } => {
            let rc = resolve_config(config.as_ref(), &adapted)?;
            let a = load_checkpoint(&adapted)?;
            let m = load_checkpoint(&merged)?;
            match (a, m) {
                (LoadedStore::F32(a), LoadedStore::F32(m)) => {
                    cmd_verify(rc, a, m, samples, tol, seed, cli.json)
                }
                (LoadedStore::F64(a), LoadedStore::F64(m)) => {
                    cmd_verify(rc, a, m, samples, tol, seed, cli.json)
                }
                _ => Err(Error::Config(
                    "adapted and merged checkpoints differ in dtype".into(),
                )),
            }
        }
        Cmd::Flops { config, views } => {
            let rc = RunConfig::from_file(&config)?;
            let views = Views::parse(&views)?;
            cmd_flops(&rc, views, cli.json)
        }
        Cmd::Params { ckpt, config } => {
            let rc = resolve_config(config.as_ref(), &ckpt).ok();
            match load_checkpoint(&ckpt)? {
                LoadedStore::F32(store) => cmd_params(rc, store, cli.json),
                LoadedStore::F64(store) => cmd_params(rc, store, cli.json),
            }
        }
        Cmd::Rf { plan, layers } => {
            let plan = HeadOffsetPlan::parse(&plan)?;
            let rf = match layers {
                Some(l) => {
                    if l == 0 {
                        return Err(Error::Config("layer count must be positive".into()));
                    }
                    plan.stacked_receptive_field(l)
                }
                None => plan.temporal_receptive_field(),
            };
            if cli.json {
                println!(
                    "{}",
                    serde_json::json!({
                        "plan": plan.offsets(),
                        "multiset": plan.multiset_string(),
                        "layers": layers.unwrap_or(1),
                        "rf": rf,
                    })
                );
            } else {
                println!("{rf}");
            }
            Ok(0)
        }
        Cmd::Compare {
            config,
            strategies,
            data,
        } => {
            let rc = RunConfig::from_file(&config)?;
            let strategies: Vec<Strategy> = strategies
                .split(',')
                .map(|s| Strategy::parse(s.trim()))
                .collect::<Result<_>>()?;
            match rc.model.precision {
                Precision::F32 => cmd_compare::<f32>(&rc, &strategies, data.as_deref(), cli.json),
                Precision::F64 => cmd_compare::<f64>(&rc, &strategies, data.as_deref(), cli.json),
            }
        }
    }
}

fn init_seed(rc: &RunConfig) -> u64 {
    rc.train.as_ref().map(|t| t.seed).unwrap_or(0)
}

fn cmd_init<E: Elem>(rc: &RunConfig, out: &Path, json: bool) -> Result<i32> {
    let cfg = rc.vit_config();
    let seed = init_seed(rc);
    let backbone = init_backbone::<E>(&cfg, seed)?;
    let store = match &rc.adapter {
        Some(spec) => crate::adapt::build_adapted_model(&backbone, &cfg, spec, seed)?.0,
        None => backbone,
    };
    save_checkpoint(&store, out)?;
    write_sidecar(out, rc)?;
    let params = count_params(&store, None);
    if json {
        println!(
            "{}",
            serde_json::json!({
                "checkpoint": out.display().to_string(),
                "dtype": E::DTYPE.name(),
                "params": params,
                "plan": rc.plan.as_ref().map(|p| p.multiset_string()),
            })
        );
    } else {
        println!(
            "wrote {} ({}, {} tensors, {} backbone + {} adapter params)",
            out.display(),
            E::DTYPE.name(),
            store.len(),
            params.backbone,
            params.new_at_inference
        );
        if let Some(plan) = &rc.plan {
            println!("offset plan {}", plan.multiset_string());
        }
    }
    Ok(0)
}

fn cmd_gen_data<E: Elem>(rc: &RunConfig, out: &Path, json: bool) -> Result<i32> {
    let train_spec = rc
        .data
        .clone()
        .ok_or_else(|| Error::Config("config has no `data` section".into()))?;
    let test = test_spec(&train_spec);
    std::fs::create_dir_all(out)?;
    let train_ds = gen_synthetic::<E>(&train_spec)?;
    let test_ds = gen_synthetic::<E>(&test)?;
    save_dataset(&train_ds, &out.join("train.bin"))?;
    save_dataset(&test_ds, &out.join("test.bin"))?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "dir": out.display().to_string(),
                "train": train_spec,
                "test": test,
            })
        );
    } else {
        println!(
            "wrote {}/train.bin ({} samples) and test.bin ({} samples)",
            out.display(),
            train_ds.samples.len(),
            test_ds.samples.len()
        );
    }
    Ok(0)
}

fn setup_from_config(rc: &RunConfig) -> ModelSetup {
    ModelSetup {
        cfg: rc.vit_config(),
        attn: rc.attention_op(),
        adapters: rc.adapter.clone(),
    }
}

fn cmd_train<E: Elem>(
    rc: RunConfig,
    mut store: WeightStore<E>,
    data_dir: &Path,
    out: &Path,
    json: bool,
) -> Result<i32> {
    let setup = setup_from_config(&rc);
    let tcfg = rc.train.clone().unwrap_or_default();
    let dataset: VideoDataset<E> = load_dataset(&data_dir.join("train.bin"))?;
    let mask = TrainableMask::from_frozen_flags(&store);
    let metrics = train(&mut store, &setup, &dataset, &tcfg, &mask)?;
    save_checkpoint(&store, out)?;
    write_sidecar(out, &rc)?;
    if json {
        for (epoch, loss) in metrics.loss_curve.iter().enumerate() {
            println!("{}", serde_json::json!({"epoch": epoch, "loss": loss}));
        }
        println!(
            "{}",
            serde_json::json!({
                "checkpoint": out.display().to_string(),
                "steps": metrics.steps,
                "train_top1": metrics.top1,
                "per_class": metrics.per_class,
            })
        );
    } else {
        for (epoch, loss) in metrics.loss_curve.iter().enumerate() {
            println!("epoch {epoch}: loss {loss:.5}");
        }
        println!(
            "trained {} steps, final train top-1 {:.3}; wrote {}",
            metrics.steps,
            metrics.top1,
            out.display()
        );
    }
    Ok(0)
}

fn cmd_eval<E: Elem>(
    rc: RunConfig,
    store: WeightStore<E>,
    data_dir: &Path,
    split: &str,
    json: bool,
) -> Result<i32> {
    let setup = setup_from_config(&rc);
    let file = match split {
        "train" => "train.bin",
        "test" => "test.bin",
        other => return Err(Error::Config(format!("unknown split `{other}`"))),
    };
    let dataset: VideoDataset<E> = load_dataset(&data_dir.join(file))?;
    let metrics = evaluate(&store, &setup, &dataset)?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "split": split,
                "samples": dataset.samples.len(),
                "top1": metrics.top1,
                "per_class": metrics.per_class,
            })
        );
    } else {
        println!(
            "{split} top-1 {:.4} over {} samples (per-class {:?})",
            metrics.top1,
            dataset.samples.len(),
            metrics.per_class
        );
    }
    Ok(0)
}

fn cmd_merge<E: Elem>(
    mut rc: RunConfig,
    store: WeightStore<E>,
    out: &Path,
    json: bool,
) -> Result<i32> {
    let cfg = rc.vit_config();
    let merged = merge_model(&store, &cfg, rc.adapter.as_ref())?;
    save_checkpoint(&merged, out)?;
    rc.adapter = None;
    write_sidecar(out, &rc)?;
    let params = count_params(&merged, None);
    if json {
        println!(
            "{}",
            serde_json::json!({
                "checkpoint": out.display().to_string(),
                "params": params,
            })
        );
    } else {
        println!(
            "merged to {} ({} params, {} new at inference)",
            out.display(),
            params.backbone,
            params.new_at_inference
        );
    }
    Ok(0)
}

fn cmd_verify<E: Elem>(
    rc: RunConfig,
    adapted: WeightStore<E>,
    merged: WeightStore<E>,
    samples: usize,
    tol: f64,
    seed: u64,
    json: bool,
) -> Result<i32> {
    let cfg = rc.vit_config();
    let attn = rc.attention_op();
    let report = verify_equivalence(
        &adapted,
        rc.adapter.as_ref(),
        &merged,
        &cfg,
        &attn,
        samples,
        tol,
        seed,
    )?;
    if json {
        println!(
            "{}",
            serde_json::to_string(&report).expect("report serializes")
        );
    } else {
        println!(
            "{} samples: max abs diff {:.3e}, max rel diff {:.3e}, tolerance {:.1e} -> {}",
            report.samples,
            report.max_abs_diff,
            report.max_rel_diff,
            report.tolerance,
            if report.pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(if report.pass { 0 } else { 1 })
}

fn cmd_flops(rc: &RunConfig, views: Views, json: bool) -> Result<i32> {
    let cfg = rc.vit_config();
    let flops = count_flops(&cfg, rc.plan.as_ref(), views)?;
    if json {
        let store = init_backbone::<f32>(&cfg, 0)?;
        let report = cost_report(
            &store,
            None,
            &cfg,
            rc.plan.as_ref(),
            rc.adapter.as_ref(),
            views,
        )?;
        println!(
            "{}",
            serde_json::to_string(&report).expect("report serializes")
        );
    } else {
        let g = flops.gflops_table();
        if g >= 10.0 {
            println!("{} GFLOPs", g.round() as u64);
        } else {
            println!("{g:.3} GFLOPs");
        }
    }
    Ok(0)
}

fn cmd_params<E: Elem>(rc: Option<RunConfig>, store: WeightStore<E>, json: bool) -> Result<i32> {
    let params = count_params(&store, None);
    let audit = match rc.as_ref() {
        Some(rc) => {
            let cfg = rc.vit_config();
            Some(assert_zero_extra(
                &store,
                &cfg,
                rc.plan.as_ref(),
                rc.adapter.as_ref(),
                Views::new(cfg.frames, 1, 1),
            )?)
        }
        None => None,
    };
    if json {
        println!(
            "{}",
            serde_json::json!({
                "dtype": E::DTYPE.name(),
                "params": params,
                "zero_extra": audit,
            })
        );
    } else {
        println!(
            "backbone {} ({:.2} M), new at inference {}, trainable {}",
            params.backbone,
            params.backbone as f64 / 1e6,
            params.new_at_inference,
            params.trainable
        );
        if let Some(a) = &audit {
            println!(
                "zero-extra audit: {} (param delta {}, flop delta {})",
                if a.pass { "PASS" } else { "FAIL" },
                a.params_delta,
                a.flops_delta
            );
        }
    }
    Ok(match &audit {
        Some(a) if !a.pass => 1,
        _ => 0,
    })
}

fn cmd_compare<E: Elem>(
    rc: &RunConfig,
    strategies: &[Strategy],
    data_dir: Option<&Path>,
    json: bool,
) -> Result<i32> {
    let cfg = rc.vit_config();
    let plan = rc
        .plan
        .clone()
        .unwrap_or_else(|| HeadOffsetPlan::default_for(cfg.heads, cfg.frames));
    let tcfg: TrainConfig = rc.train.clone().unwrap_or_default();
    let (train_ds, test_ds): (VideoDataset<E>, VideoDataset<E>) = match data_dir {
        Some(dir) => (
            load_dataset(&dir.join("train.bin"))?,
            load_dataset(&dir.join("test.bin"))?,
        ),
        None => {
            let spec = rc
                .data
                .clone()
                .ok_or_else(|| Error::Config("config has no `data` section".into()))?;
            (gen_synthetic(&spec)?, gen_synthetic(&test_spec(&spec))?)
        }
    };
    let mut seed_rng = SeededRng::new(tcfg.seed);
    let backbone = init_backbone::<E>(&cfg, seed_rng.next_u64())?;
    let rows = compare_strategies(
        &backbone, &cfg, &plan, &train_ds, &test_ds, &tcfg, strategies,
    )?;
    if json {
        println!("{}", serde_json::to_string(&rows).expect("rows serialize"));
    } else {
        println!(
            "{:<20} {:>14} {:>12} {:>12}",
            "strategy", "tunable", "train top-1", "test top-1"
        );
        for row in &rows {
            println!(
                "{:<20} {:>14} {:>12.3} {:>12.3}",
                row.strategy, row.tunable_params, row.train_top1, row.test_top1
            );
        }
    }
    Ok(0)
}
