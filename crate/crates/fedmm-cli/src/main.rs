//! Pipeline driver for federated multi-market CTR experiments.
//!
//! Commands run stages of one experiment directory: `pretrain` builds the
//! datasets and collaborative embeddings, `federate` trains the quantizers
//! through federated rounds, `tokenize` assigns token pairs, `train-ctr`
//! fits and evaluates the per-market CTR models, `sweep` grids one knob,
//! and `report` prints what a finished run produced.
//!
//! Configuration comes from an optional `key = value` file (`--config`),
//! overridden by typed flags, overridden by generic `--set key=value`
//! pairs. The output root defaults to `$FEDMM_OUT` or `./runs`.
//!
//! Exit codes: 0 success, 2 configuration error, 1 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedmm_core::ctr::AblationMode;
use fedmm_core::federation::comm_cost_report;
use fedmm_core::pipeline::{
    read_summary, run_sweep, stage_federate, stage_pretrain, stage_tokenize, stage_train_ctr,
    ExperimentConfig, SweepAxis,
};
use fedmm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fedmm", version, about = "Federated collaborative-signal quantization pipeline")]
struct Cli {
    /// Experiment output directory (default: $FEDMM_OUT or ./runs)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Plain-text `key = value` config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Generic config override, repeatable: --set key=value
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed controlling the full run
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Ablation mode: full | no_local | no_global | random_codebook | local_only
    #[arg(long, global = true)]
    mode: Option<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Ingest/generate data, preprocess, and pretrain collaborative embeddings
    Pretrain {
        /// Restrict embedding training to one market id
        #[arg(long)]
        market: Option<String>,
        /// Embedding dimension
        #[arg(long)]
        dim: Option<usize>,
        /// Propagation layers
        #[arg(long)]
        layers: Option<usize>,
        /// Keep users with more than this many interactions
        #[arg(long)]
        min_interactions: Option<usize>,
        /// CTR split ratio, e.g. 8:1:1
        #[arg(long)]
        ratio: Option<String>,
        /// Split RNG root (defaults to the master seed)
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Run federated codebook training rounds
    Federate {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        local_epochs: Option<usize>,
        #[arg(long)]
        adapt_epochs: Option<usize>,
        /// Laplace noise scale for uploads
        #[arg(long)]
        ldp_b: Option<f64>,
        /// Codebook size T
        #[arg(long)]
        codebook_size: Option<usize>,
    },
    /// Assign (id_fed, id_local) token pairs to every entity
    Tokenize,
    /// Train and evaluate the per-market CTR models
    TrainCtr {
        #[arg(long)]
        ctr_epochs: Option<usize>,
        #[arg(long)]
        ctr_lr: Option<f64>,
        #[arg(long)]
        ctr_l2: Option<f64>,
    },
    /// Run one pipeline per grid point along an axis
    Sweep {
        /// Axis: t (codebook size) | b (noise scale) | mode
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values (defaults per axis)
        #[arg(long)]
        values: Option<String>,
    },
    /// Print the results of a finished run
    Report,
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("FEDMM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_key_value_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(mode) = &cli.mode {
        cfg.mode = AblationMode::parse(mode)?;
    }
    match &cli.cmd {
        Cmd::Pretrain {
            dim,
            layers,
            min_interactions,
            ratio,
            split_seed,
            ..
        } => {
            if let Some(d) = dim {
                cfg.apply_override("dim", &d.to_string())?;
            }
            if let Some(l) = layers {
                cfg.cf.layers = *l;
            }
            if let Some(m) = min_interactions {
                cfg.min_interactions = *m;
            }
            if let Some(r) = ratio {
                cfg.apply_override("ratio", r)?;
            }
            if let Some(s) = split_seed {
                cfg.split_seed = Some(*s);
            }
        }
        Cmd::Federate {
            rounds,
            local_epochs,
            adapt_epochs,
            ldp_b,
            codebook_size,
        } => {
            if let Some(r) = rounds {
                cfg.rounds = *r;
            }
            if let Some(e) = local_epochs {
                cfg.local_epochs = *e;
            }
            if let Some(a) = adapt_epochs {
                cfg.adapt_epochs = *a;
            }
            if let Some(b) = ldp_b {
                cfg.ldp_b = *b;
            }
            if let Some(t) = codebook_size {
                cfg.codebook_size = *t;
            }
        }
        Cmd::TrainCtr {
            ctr_epochs,
            ctr_lr,
            ctr_l2,
        } => {
            if let Some(e) = ctr_epochs {
                cfg.ctr.epochs = *e;
            }
            if let Some(lr) = ctr_lr {
                cfg.ctr.lr = *lr;
            }
            if let Some(l2) = ctr_l2 {
                cfg.ctr.l2 = *l2;
            }
        }
        _ => {}
    }
    for pair in &cli.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key=value, found `{pair}`"))
        })?;
        cfg.apply_override(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_sweep_axis(axis: &str, values: Option<&str>) -> Result<SweepAxis> {
    match axis {
        "t" | "codebook_size" => {
            let vals = match values {
                Some(v) => v
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad codebook size `{x}`")))
                    })
                    .collect::<Result<Vec<usize>>>()?,
                None => vec![64, 128, 256, 512],
            };
            Ok(SweepAxis::CodebookSize(vals))
        }
        "b" | "ldp_b" => {
            let vals = match values {
                Some(v) => v
                    .split(',')
                    .map(|x| {
                        x.trim()
                            .parse()
                            .map_err(|_| Error::Config(format!("bad noise scale `{x}`")))
                    })
                    .collect::<Result<Vec<f64>>>()?,
                None => vec![0.001, 0.01, 0.1, 0.5],
            };
            Ok(SweepAxis::NoiseScale(vals))
        }
        "mode" => {
            let vals = match values {
                Some(v) => v
                    .split(',')
                    .map(|x| AblationMode::parse(x.trim()))
                    .collect::<Result<Vec<_>>>()?,
                None => vec![
                    AblationMode::Full,
                    AblationMode::NoLocal,
                    AblationMode::NoGlobal,
                    AblationMode::RandomCodebook,
                    AblationMode::LocalOnly,
                ],
            };
            Ok(SweepAxis::Mode(vals))
        }
        other => Err(Error::Config(format!(
            "unknown sweep axis `{other}` (expected t, b, or mode)"
        ))),
    }
}

fn print_report(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let out = out_dir(cli);
    let summary = read_summary(&out)?;
    println!("run: {}", out.display());
    println!("mode: {}", summary.mode.as_str());
    println!("{:<12} {:>10} {:>10} {:>10}", "market", "test_auc", "valid_auc", "test_n");
    for m in &summary.per_market {
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>10}",
            m.market_id, m.test_auc, m.best_valid_auc, m.test_size
        );
    }
    println!("{:<12} {:>10.4}", "overall", summary.overall_auc);

    let (num_users, num_items) = dataset_counts(&out).unwrap_or((0, 0));
    let cost = comm_cost_report(
        cfg.codebook_size,
        cfg.d_latent,
        cfg.rounds,
        2,
        cfg.ctr.emb_dim,
        &cfg.ctr.tower,
        num_users,
        num_items,
    );
    println!("\n{cost}");

    let sweep_csv = out.join("sweep.csv");
    if sweep_csv.exists() {
        println!("\nsweep results:\n{}", std::fs::read_to_string(sweep_csv)?);
    }
    Ok(())
}

fn dataset_counts(out: &std::path::Path) -> Option<(usize, usize)> {
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("data/manifest.json")).ok()?).ok()?;
    let markets = manifest["markets"].as_array()?;
    let users = markets.iter().filter_map(|m| m["num_users"].as_u64()).sum::<u64>();
    let items = markets.iter().filter_map(|m| m["num_items"].as_u64()).sum::<u64>();
    let n = markets.len().max(1) as u64;
    Some(((users / n) as usize, (items / n) as usize))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    let out = out_dir(cli);
    match &cli.cmd {
        Cmd::Pretrain { market, .. } => {
            stage_pretrain(&cfg, &out, market.as_deref())?;
            println!("pretrain done: {}", out.display());
        }
        Cmd::Federate { .. } => {
            stage_federate(&cfg, &out)?;
            println!("federate done: {} rounds in {}", cfg.rounds, out.display());
        }
        Cmd::Tokenize => {
            stage_tokenize(&cfg, &out)?;
            println!("tokenize done: {}", out.join("tokens").display());
        }
        Cmd::TrainCtr { .. } => {
            let summary = stage_train_ctr(&cfg, &out)?;
            for m in &summary.per_market {
                println!("market {}: test AUC {:.4}", m.market_id, m.test_auc);
            }
            println!("overall test AUC: {:.4}", summary.overall_auc);
        }
        Cmd::Sweep { axis, values } => {
            let axis = parse_sweep_axis(axis, values.as_deref())?;
            let report = run_sweep(&cfg, &axis, &out)?;
            println!("{:<18} {:>12}", report.axis, "overall_auc");
            for p in &report.points {
                match (p.overall_auc, &p.error) {
                    (Some(a), _) => println!("{:<18} {:>12.4}", p.label, a),
                    (None, Some(e)) => println!("{:<18} failed: {e}", p.label),
                    _ => {}
                }
            }
        }
        Cmd::Report => print_report(cli, &cfg)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
