//! `connect` — train, prune, fine-tune, analyze, and verify small
//! feed-forward networks under the connectivity regularizer.
//!
//! Exit codes: 0 success, 1 usage error, 2 run failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use connect_core::connectivity::{detect_collapse, node_connectivity, normalize, Mode};
use connect_core::data::generate_toy;
use connect_core::experiment::{run_experiment, ExperimentPlan, PruneMethod};
use connect_core::matrix::Mat;
use connect_core::model_io;
use connect_core::network::LayeredNetwork;
use connect_core::pruning::{
    build_mask, score_channels, score_loss_aware, score_magnitude, score_synflow, Granularity,
    LossAwareConfig, PruneSpec, Scope,
};
use connect_core::training::{evaluate, fine_tune, train, RegularizerConfig, TrainConfig};
use connect_core::verify;

#[derive(Parser)]
#[command(
    name = "connect",
    version,
    about = "Connectivity-regularized training and pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataOpts {
    /// Seed for the synthetic dataset.
    #[arg(long, default_value_t = 42)]
    data_seed: u64,
    #[arg(long, default_value_t = 10_000)]
    n_train: usize,
    #[arg(long, default_value_t = 2_000)]
    n_test: usize,
}

#[derive(Args)]
struct RegOpts {
    /// L1 coefficient.
    #[arg(long, default_value_t = 0.0)]
    lambda1: f64,
    /// Connectivity barrier coefficient.
    #[arg(long, default_value_t = 0.0)]
    lambda2: f64,
    /// L2 (weight decay) coefficient.
    #[arg(long, default_value_t = 5e-4)]
    lambda3: f64,
}

impl RegOpts {
    fn to_config(&self) -> RegularizerConfig {
        RegularizerConfig {
            l1: self.lambda1,
            connect: self.lambda2,
            l2: self.lambda3,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh network on the synthetic task.
    Train {
        /// Layer widths, comma-separated.
        #[arg(long, default_value = "6,5,5,5,1", value_delimiter = ',')]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        /// Epochs over which the connectivity coefficient ramps in.
        #[arg(long, default_value_t = 0)]
        connect_warmup: usize,
        #[command(flatten)]
        reg: RegOpts,
        #[command(flatten)]
        data: DataOpts,
        /// Where to write the trained model.
        #[arg(long)]
        out: PathBuf,
        /// Optional per-epoch metrics stream (JSON lines).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Score a model's parameters and write the pruned model.
    Prune {
        model: PathBuf,
        #[arg(long, default_value = "magnitude")]
        prune_method: String,
        #[arg(long, default_value_t = 0.96)]
        prune_fraction: f64,
        /// local or global.
        #[arg(long, default_value = "local")]
        scope: String,
        /// Connectivity weight inside the loss-aware objective.
        #[arg(long, default_value_t = 0.0)]
        lambda2: f64,
        #[command(flatten)]
        data: DataOpts,
        #[arg(long)]
        out: PathBuf,
        /// Write the importance table as structured text.
        #[arg(long)]
        emit_scores: Option<PathBuf>,
    },
    /// Fine-tune a pruned model; masked entries stay at zero.
    Finetune {
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        /// Keep the sparsity regularizers on instead of the post-pruning
        /// default (L1 and connectivity off).
        #[arg(long)]
        keep_regularizers: bool,
        #[command(flatten)]
        reg: RegOpts,
        #[command(flatten)]
        data: DataOpts,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Print connectivity structure: phi, per-layer mass, per-node values.
    Analyze {
        model: PathBuf,
        /// normalized or signal-flow.
        #[arg(long, default_value = "normalized")]
        mode: String,
    },
    /// Run a multi-seed train/prune/fine-tune sweep and report clusters.
    Experiment {
        /// Plan file (JSON). Without it, the default plan is used.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Seed count for the default plan.
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Use one of the coefficient-strength ablation grids (1..=4).
        #[arg(long)]
        ablation: Option<usize>,
        /// Output directory for per-run artifacts and the cluster report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the effective plan to this path and exit.
        #[arg(long)]
        write_plan: Option<PathBuf>,
    },
    /// Run a property suite: oracle, gradients, conservation,
    /// theorem-convergence, or all.
    Verify {
        suite: String,
        /// Write the per-case report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_scope(s: &str) -> Result<Scope, String> {
    match s {
        "local" => Ok(Scope::Local),
        "global" => Ok(Scope::Global),
        other => Err(format!("unknown scope {other:?} (local|global)")),
    }
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "normalized" => Ok(Mode::Normalized),
        "signal-flow" => Ok(Mode::SignalFlow),
        other => Err(format!("unknown mode {other:?} (normalized|signal-flow)")),
    }
}

// restore the default SIGPIPE disposition so `connect analyze | head`
// terminates quietly instead of panicking on a closed stdout
#[cfg(unix)]
fn reset_sigpipe() {
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

#[cfg(not(unix))]
fn reset_sigpipe() {}

fn main() -> ExitCode {
    reset_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is usage
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(RunError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(RunError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

enum RunError {
    Usage(String),
    Run(String),
}

impl From<connect_core::Error> for RunError {
    fn from(e: connect_core::Error) -> Self {
        RunError::Run(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Train {
            sizes,
            seed,
            epochs,
            lr,
            batch_size,
            connect_warmup,
            reg,
            data,
            out,
            metrics,
        } => {
            let net = LayeredNetwork::init_random(&sizes, seed)?;
            let dataset = generate_toy(data.n_train, data.n_test, data.data_seed);
            let mut cfg = TrainConfig::new(epochs, batch_size, lr, seed);
            cfg.connect_warmup_epochs = connect_warmup;
            let (trained, run_metrics) = train(&net, &dataset, &reg.to_config(), &cfg)?;
            model_io::save(&trained, &out)?;
            if let Some(path) = metrics {
                std::fs::write(path, run_metrics.to_jsonl())
                    .map_err(|e| RunError::Run(e.to_string()))?;
            }
            let last = run_metrics.epochs.last().expect("epochs >= 1");
            println!(
                "trained {} epochs: test_acc {:.4}, phi {:.6}",
                epochs, last.test_acc, last.phi_tot
            );
            Ok(())
        }
        Command::Prune {
            model,
            prune_method,
            prune_fraction,
            scope,
            lambda2,
            data,
            out,
            emit_scores,
        } => {
            let net = model_io::load(&model)?;
            let method =
                PruneMethod::from_str(&prune_method).map_err(|e| RunError::Usage(e.to_string()))?;
            let scope = parse_scope(&scope).map_err(RunError::Usage)?;
            let table = match method {
                PruneMethod::Magnitude => score_magnitude(&net),
                PruneMethod::Synflow => score_synflow(&net),
                PruneMethod::Channel => score_channels(&net)?,
                PruneMethod::LossAware => {
                    let dataset = generate_toy(data.n_train, data.n_test, data.data_seed);
                    let batch = 256.min(dataset.train_len());
                    let mut x = Mat::zeros(net.sizes()[0], batch);
                    let mut y = Vec::with_capacity(batch);
                    for i in 0..batch {
                        for f in 0..net.sizes()[0] {
                            x.set(f, i, dataset.train_x.get(i, f));
                        }
                        y.push(dataset.train_y[i]);
                    }
                    let cfg = LossAwareConfig {
                        lambda: lambda2,
                        connectivity_samples: 1,
                        sample_seed: data.data_seed,
                    };
                    score_loss_aware(&net, &x, &y, &cfg)?
                }
            };
            if let Some(path) = emit_scores {
                std::fs::write(path, table.to_text()).map_err(|e| RunError::Run(e.to_string()))?;
            }
            let granularity = match method {
                PruneMethod::Channel => Granularity::ScalingEntry,
                _ => Granularity::Weight,
            };
            let spec = PruneSpec {
                scope,
                fraction: prune_fraction,
                granularity,
            };
            let mask = build_mask(&net, &table, &spec)?;
            let pruned = net.apply_mask(&mask)?;
            model_io::save(&pruned, &out)?;
            let report = detect_collapse(&pruned);
            println!(
                "pruned {} of {} weights: phi {:.6}, collapsed {}",
                mask.dropped_weight_count(),
                net.weight_count(),
                report.phi_total,
                report.collapsed
            );
            Ok(())
        }
        Command::Finetune {
            model,
            seed,
            epochs,
            lr,
            batch_size,
            keep_regularizers,
            reg,
            data,
            out,
            metrics,
        } => {
            let net = model_io::load(&model)?;
            let dataset = generate_toy(data.n_train, data.n_test, data.data_seed);
            let cfg = TrainConfig::new(epochs, batch_size, lr, seed);
            let effective = if keep_regularizers {
                reg.to_config()
            } else {
                reg.to_config().for_finetune()
            };
            let (tuned, run_metrics) = fine_tune(&net, &dataset, &effective, &cfg)?;
            model_io::save(&tuned, &out)?;
            if let Some(path) = metrics {
                std::fs::write(path, run_metrics.to_jsonl())
                    .map_err(|e| RunError::Run(e.to_string()))?;
            }
            let (_, acc) = evaluate(&tuned, &dataset.test_x, &dataset.test_y)?;
            println!("fine-tuned {epochs} epochs: test_acc {acc:.4}");
            Ok(())
        }
        Command::Analyze { model, mode } => {
            let net = model_io::load(&model)?;
            let mode = parse_mode(&mode).map_err(RunError::Usage)?;
            let view = normalize(&net, mode);
            let profile = node_connectivity(&view);
            let report = detect_collapse(&net);
            println!("phi_total {:.12}", profile.phi_total());
            println!("collapsed {}", report.collapsed);
            for layer in &report.layers {
                println!(
                    "mass {} l1={:.6} surviving_edges={}",
                    layer.stage, layer.l1_mass, layer.surviving_edges
                );
            }
            for (k, &width) in net.sizes().iter().enumerate() {
                let a_in = profile.a_in_layer(k);
                let a_out = profile.a_out_layer(k);
                for node in 0..width {
                    println!(
                        "node layer={k} index={node} a_in={:.9e} a_out={:.9e}",
                        a_in[node], a_out[node]
                    );
                }
            }
            Ok(())
        }
        Command::Experiment {
            plan,
            seeds,
            ablation,
            out,
            write_plan,
        } => {
            let plan = match (plan, ablation) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| RunError::Usage(format!("cannot read plan {path:?}: {e}")))?;
                    ExperimentPlan::from_json(&text)?
                }
                (None, Some(n)) => ExperimentPlan::ablation_plan(n, seeds)
                    .ok_or_else(|| RunError::Usage(format!("ablation {n} not in 1..=4")))?,
                (None, None) => ExperimentPlan::default_plan(seeds),
            };
            if let Some(path) = write_plan {
                std::fs::write(&path, plan.to_json()).map_err(|e| RunError::Run(e.to_string()))?;
                println!("wrote plan to {}", path.display());
                return Ok(());
            }
            let report = run_experiment(&plan, out.as_deref())?;
            for g in &report.groups {
                println!(
                    "{}/{}: full {} partial {} low {} collapse {} failures {}",
                    g.preset,
                    g.method.name(),
                    g.counts.full,
                    g.counts.partial,
                    g.counts.low,
                    g.counts.collapse,
                    g.failures()
                );
            }
            if let Some(dir) = out {
                println!(
                    "report written to {}",
                    dir.join("cluster_report.json").display()
                );
            }
            Ok(())
        }
        Command::Verify { suite, out } => {
            let names: Vec<&str> = if suite == "all" {
                verify::SUITES.to_vec()
            } else {
                vec![suite.as_str()]
            };
            let mut all_passed = true;
            let mut reports = Vec::new();
            for name in names {
                let report = verify::run_suite(name).map_err(|e| RunError::Usage(e.to_string()))?;
                for case in &report.cases {
                    println!(
                        "[{}] {} — {}",
                        if case.passed { "PASS" } else { "FAIL" },
                        case.name,
                        case.detail
                    );
                }
                all_passed &= report.passed;
                reports.push(report);
            }
            if let Some(path) = out {
                let json = serde_json::to_string_pretty(&reports).expect("serializable reports");
                std::fs::write(path, json).map_err(|e| RunError::Run(e.to_string()))?;
            }
            if all_passed {
                Ok(())
            } else {
                Err(RunError::Run(
                    "one or more verification cases failed".into(),
                ))
            }
        }
    }
}
