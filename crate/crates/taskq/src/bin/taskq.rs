//! Thin CLI over the library: `serve` runs the service, `consumer` runs
//! the mock downstream, `bench` drives the benchmark harness.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use taskq::consumer::{ConsumerScript, FailureMode};
use taskq::harness::{self, BenchConfig};
use taskq::service::{self, ServeConfig};
use taskq::store::StoreConfig;
use taskq::worker::WorkerPoolConfig;

#[derive(Parser)]
#[command(name = "taskq", version, about = "Rate-limited, durable task delivery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the task-queue service.
    Serve(ServeArgs),
    /// Run the mock consumer (test double for a downstream service).
    Consumer(ConsumerArgs),
    /// Benchmark harness.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StoreKind {
    Memory,
    File,
}

#[derive(Args)]
struct ServeArgs {
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:7420", env = "TASKQ_LISTEN")]
    listen: String,
    /// Persistence backend.
    #[arg(long, value_enum, default_value = "memory", env = "TASKQ_STORE")]
    store: StoreKind,
    /// Store directory (file backend).
    #[arg(long, default_value = "./taskq-data", env = "TASKQ_STORE_DIR")]
    store_dir: PathBuf,
    /// Fsync each write (file backend).
    #[arg(long, default_value_t = true, action = ArgAction::Set, env = "TASKQ_FSYNC")]
    fsync: bool,
    /// Worker pool size.
    #[arg(long, default_value_t = 16, env = "TASKQ_WORKERS")]
    workers: usize,
    /// Bounded handoff buffer between dispatch and workers.
    #[arg(long, default_value_t = 256, env = "TASKQ_HANDOFF_BUFFER")]
    handoff_buffer: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum FailureModeArg {
    None,
    FailFirstK,
    FailRate,
    AlwaysFail,
    BlackHole,
}

#[derive(Args)]
struct ConsumerArgs {
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1:7431")]
    listen: String,
    /// Sleep before responding, per request.
    #[arg(long, default_value_t = 0)]
    latency_ms: u64,
    #[arg(long, value_enum, default_value = "none")]
    failure_mode: FailureModeArg,
    /// k for fail-first-k.
    #[arg(long, default_value_t = 0)]
    k: u32,
    /// p for fail-rate.
    #[arg(long, default_value_t = 0.0)]
    p: f64,
    /// Status returned on scripted failures.
    #[arg(long, default_value_t = 500)]
    status_on_fail: u16,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark config file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Also write per-run rows as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Override the config's completion deadline.
    #[arg(long)]
    deadline_s: Option<u64>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run the workload and report wall time to all-finished.
    Run(BenchArgs),
    /// Run the workload under memory, file+fsync, and file-fsync stores.
    CompareStores(BenchArgs),
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;

    runtime.block_on(async {
        match cli.command {
            Command::Serve(args) => {
                let store = match args.store {
                    StoreKind::Memory => StoreConfig::memory(),
                    StoreKind::File => StoreConfig::file(args.store_dir, args.fsync),
                };
                service::serve(ServeConfig {
                    listen: args.listen,
                    store,
                    pool: WorkerPoolConfig {
                        worker_count: args.workers,
                        handoff_buffer: args.handoff_buffer,
                    },
                })
                .await
            }
            Command::Consumer(args) => {
                let failure_mode = match args.failure_mode {
                    FailureModeArg::None => FailureMode::None,
                    FailureModeArg::FailFirstK => FailureMode::FailFirstK { k: args.k },
                    FailureModeArg::FailRate => FailureMode::FailRate { p: args.p },
                    FailureModeArg::AlwaysFail => FailureMode::AlwaysFail,
                    FailureModeArg::BlackHole => FailureMode::BlackHole,
                };
                taskq::consumer::run(
                    &args.listen,
                    ConsumerScript {
                        latency_ms: args.latency_ms,
                        failure_mode,
                        status_on_fail: args.status_on_fail,
                    },
                )
                .await?;
                Ok(())
            }
            Command::Bench { command } => bench_main(command).await,
        }
    })
}

async fn bench_main(command: BenchCommand) -> Result<(), Box<dyn std::error::Error>> {
    match command {
        BenchCommand::Run(args) => {
            let config = load_config(&args)?;
            let report = harness::run_bench(&config).await?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(path) = args.csv {
                std::fs::write(path, harness::bench_csv(&report))?;
            }
        }
        BenchCommand::CompareStores(args) => {
            let config = load_config(&args)?;
            let report = harness::compare_stores(&config).await?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(path) = args.csv {
                std::fs::write(path, harness::compare_csv(&report))?;
            }
        }
    }
    Ok(())
}

fn load_config(args: &BenchArgs) -> Result<BenchConfig, Box<dyn std::error::Error>> {
    let bytes = std::fs::read(&args.config)?;
    let mut config: BenchConfig = serde_json::from_slice(&bytes)?;
    if let Some(deadline) = args.deadline_s {
        config.deadline_s = deadline;
    }
    Ok(config)
}
