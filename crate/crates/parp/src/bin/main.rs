//! Command-line front end for sparse subnetwork experiments.
//!
//! Exit codes: 0 on success, 1 on configuration errors, 2 on run errors.
//! The output root comes from --out or the PARP_OUT environment variable
//! (default ./runs).

use clap::{Args, Parser, Subcommand};
use parp::analytics::{layerwise_sparsity, mask_trajectory};
use parp::error::Error;
use parp::harness::{
    collect_records, iou_report, report_csv, run, ExperimentConfig, ExperimentKind, MethodId,
    TransferMode,
};
use parp::methods::TrainConfig;
use parp::nn::EncoderConfig;
use parp::pruning::Mask;
use parp::tasks::{Flavor, TaskSpec};
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "parp", about = "Sparse subnetwork discovery and finetuning experiments")]
struct Cli {
    /// Output root directory (overrides PARP_OUT).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Random seed(s), comma separated.
    #[arg(long, default_value = "0", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Optimizer updates per finetuning run.
    #[arg(long, default_value_t = 200)]
    updates: usize,
    /// Batch size.
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// Peak learning rate of the tri-phase schedule.
    #[arg(long, default_value_t = 2e-3)]
    peak_lr: f64,
    /// Encoder input dimension.
    #[arg(long, default_value_t = 16)]
    input_dim: usize,
    /// Encoder hidden dimension.
    #[arg(long, default_value_t = 32)]
    hidden_dim: usize,
    /// Encoder block count.
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    /// Initial weights checkpoint (e.g. from `parp pretrain`).
    #[arg(long)]
    from: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder on the synthetic corpus.
    Pretrain {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, default_value = "masked-recon")]
        objective: String,
    },
    /// Dense finetuning on one task.
    Finetune {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "frame-classification")]
        flavor: String,
    },
    /// Discover a subnetwork with a mask-first method and finetune it.
    Prune {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "frame-classification")]
        flavor: String,
        /// One of rp, mpi, omp, imp.
        #[arg(long)]
        method: String,
        #[arg(long)]
        sparsity: f64,
    },
    /// Prune-adjust-re-prune on one task.
    Parp {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "frame-classification")]
        flavor: String,
        #[arg(long)]
        sparsity: f64,
        /// Start sparsity for the progressive variant.
        #[arg(long)]
        start_sparsity: Option<f64>,
        /// Updates between re-prune events.
        #[arg(long)]
        interval: Option<usize>,
    },
    /// Sparsity sweep over methods.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "frame-classification")]
        flavor: String,
        #[arg(long, value_delimiter = ',', default_value = "rp,mpi,omp,parp")]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        sparsities: Vec<f64>,
    },
    /// Cross-task mask transfer matrix.
    Transfer {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long, default_value = "frozen")]
        mode: String,
        #[arg(long, default_value_t = 0.5)]
        sparsity: f64,
    },
    /// Joint multi-task subnetwork discovery.
    Joint {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        #[arg(long, default_value = "omp")]
        method: String,
        #[arg(long, default_value_t = 0.5)]
        sparsity: f64,
    },
    /// Mask analytics over saved mask files.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Merge run records under a directory into one CSV table.
    Report {
        /// Directory (searched recursively) or single record file.
        path: PathBuf,
    },
}

#[derive(Subcommand)]
enum Analyze {
    /// Pairwise IOU and overlap matrices over mask files.
    Iou {
        #[arg(required = true)]
        masks: Vec<PathBuf>,
    },
    /// Per-layer sparsity profile of one mask.
    Layerwise {
        mask: PathBuf,
    },
    /// IOU of consecutive masks in a sequence.
    Trajectory {
        #[arg(required = true)]
        masks: Vec<PathBuf>,
    },
}

fn parse_flavor(s: &str) -> Result<Flavor, Error> {
    match s {
        "frame-classification" => Ok(Flavor::FrameClassification),
        "ctc-sequence" | "ctc" => Ok(Flavor::CtcSequence),
        other => Err(Error::config(format!("unknown task flavor {other:?}"))),
    }
}

fn task_spec(id: &str, flavor: &str, feat_dim: usize) -> Result<TaskSpec, Error> {
    let mut spec = TaskSpec::new(id, parse_flavor(flavor)?);
    spec.feat_dim = feat_dim;
    Ok(spec)
}

fn base_config(
    kind: ExperimentKind,
    common: &CommonOpts,
    out: PathBuf,
) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(kind, out);
    cfg.encoder = EncoderConfig::new(common.input_dim, common.hidden_dim, common.blocks);
    let mut train = TrainConfig::new(common.updates, common.seeds[0]);
    train.batch_size = common.batch_size;
    train.peak_lr = common.peak_lr;
    cfg.train = train;
    cfg.seeds = common.seeds.clone();
    cfg.init_ckpt = common.from.clone();
    cfg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os("PARP_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    match dispatch(cli, out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cli: Cli, out: PathBuf) -> Result<(), Error> {
    match cli.command {
        Command::Pretrain { common, objective } => {
            let mut cfg = base_config(ExperimentKind::Pretrain, &common, out);
            cfg.pretrain_objective = Some(match objective.as_str() {
                "masked-recon" => parp::tasks::PretrainObjective::MaskedRecon,
                "contrastive" => parp::tasks::PretrainObjective::Contrastive,
                other => {
                    return Err(Error::config(format!("unknown pretrain objective {other:?}")))
                }
            });
            summarize(&run(&cfg)?);
            Ok(())
        }
        Command::Finetune { common, task, flavor } => {
            let mut cfg = base_config(ExperimentKind::Single, &common, out);
            cfg.method = Some(MethodId::Dense);
            cfg.tasks = vec![task_spec(&task, &flavor, common.input_dim)?];
            summarize(&run(&cfg)?);
            Ok(())
        }
        Command::Prune { common, task, flavor, method, sparsity } => {
            let method = MethodId::from_str(&method)?;
            if matches!(method, MethodId::Dense | MethodId::Parp | MethodId::ParpP) {
                return Err(Error::config(format!(
                    "method: prune expects rp, mpi, omp, or imp, got {method}"
                )));
            }
            let mut cfg = base_config(ExperimentKind::Single, &common, out);
            cfg.method = Some(method);
            cfg.sparsities = vec![sparsity];
            cfg.tasks = vec![task_spec(&task, &flavor, common.input_dim)?];
            summarize(&run(&cfg)?);
            Ok(())
        }
        Command::Parp { common, task, flavor, sparsity, start_sparsity, interval } => {
            let mut cfg = base_config(ExperimentKind::Single, &common, out);
            cfg.method = Some(if start_sparsity.is_some() { MethodId::ParpP } else { MethodId::Parp });
            cfg.sparsities = vec![sparsity];
            cfg.start_sparsity = start_sparsity;
            if let Some(n) = interval {
                cfg.train.reprune_interval = n;
            }
            cfg.tasks = vec![task_spec(&task, &flavor, common.input_dim)?];
            summarize(&run(&cfg)?);
            Ok(())
        }
        Command::Sweep { common, task, flavor, methods, sparsities } => {
            let mut cfg = base_config(ExperimentKind::Sweep, &common, out);
            cfg.sparsities = sparsities;
            cfg.tasks = vec![task_spec(&task, &flavor, common.input_dim)?];
            let methods = methods
                .iter()
                .map(|m| MethodId::from_str(m))
                .collect::<Result<Vec<_>, _>>()?;
            cfg.validate()?;
            let sweep = parp::harness::sparsity_sweep(&cfg, &methods, &cfg.tasks[0])?;
            let dir = cfg.out_dir.join(&cfg.digest()[..16]);
            parp::harness::atomic_write(&dir.join("sweep.csv"), sweep.to_csv().as_bytes())?;
            println!("{}", sweep.to_csv());
            Ok(())
        }
        Command::Transfer { common, tasks, mode, sparsity } => {
            let mut cfg = base_config(ExperimentKind::TransferMatrix, &common, out);
            cfg.transfer_mode = Some(TransferMode::from_str(&mode)?);
            cfg.sparsities = vec![sparsity];
            cfg.tasks = tasks
                .iter()
                .map(|t| task_spec(t, "frame-classification", common.input_dim))
                .collect::<Result<Vec<_>, _>>()?;
            cfg.validate()?;
            let m = parp::harness::transfer_matrix(
                &cfg,
                cfg.transfer_mode.unwrap(),
                sparsity,
            )?;
            let dir = cfg.out_dir.join(&cfg.digest()[..16]);
            parp::harness::atomic_write(&dir.join("transfer.csv"), m.to_csv().as_bytes())?;
            println!("{}", m.to_csv());
            Ok(())
        }
        Command::Joint { common, tasks, method, sparsity } => {
            let mut cfg = base_config(ExperimentKind::Joint, &common, out);
            cfg.method = Some(MethodId::from_str(&method)?);
            cfg.sparsities = vec![sparsity];
            cfg.tasks = tasks
                .iter()
                .map(|t| task_spec(t, "frame-classification", common.input_dim))
                .collect::<Result<Vec<_>, _>>()?;
            summarize(&run(&cfg)?);
            Ok(())
        }
        Command::Analyze { what } => analyze(what),
        Command::Report { path } => {
            let records = collect_records(&path)?;
            print!("{}", report_csv(&records));
            Ok(())
        }
    }
}

fn analyze(what: Analyze) -> Result<(), Error> {
    match what {
        Analyze::Iou { masks } => {
            let loaded = masks
                .iter()
                .map(|p| Ok((p.display().to_string(), Mask::load(p)?)))
                .collect::<Result<Vec<_>, Error>>()?;
            let (iou, overlap) = iou_report(&loaded)?;
            println!("{}", iou.to_csv());
            println!("{}", overlap.to_csv());
            Ok(())
        }
        Analyze::Layerwise { mask } => {
            let m = Mask::load(&mask)?;
            println!("{}", layerwise_sparsity(&m).to_csv());
            Ok(())
        }
        Analyze::Trajectory { masks } => {
            let loaded = masks
                .iter()
                .map(|p| Mask::load(p))
                .collect::<Result<Vec<_>, Error>>()?;
            let traj = mask_trajectory(&loaded[1..], &loaded[0])?;
            println!("step,iou_with_first");
            for (i, v) in traj.iter().enumerate() {
                println!("{},{}", i + 1, v);
            }
            Ok(())
        }
    }
}

fn summarize(records: &[parp::harness::RunRecord]) {
    for r in records {
        println!(
            "{} task={} s={} seed={} runs={} steps={} dev_loss={:.6} dev_err={:.4}",
            r.method,
            r.task,
            r.sparsity,
            r.seed,
            r.runs_consumed,
            r.total_update_steps,
            r.final_dev_loss,
            r.final_dev_err
        );
    }
}
