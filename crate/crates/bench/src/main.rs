use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use bytes::Bytes;
use clap::{Args, Parser, Subcommand, ValueEnum};
use kvflow_bench::fastpath::{run_fastpath_bench, FastpathBenchConfig};
use kvflow_bench::pipeline::{run_pipeline_bench, PipelineBenchConfig};
use kvflow_bench::put::{run_put_bench, run_rate_sweep, OpType, PutBenchConfig};
use kvflow_bench::BenchReport;
use kvflow_core::dfg::PutType;
use kvflow_core::fastpath::DispatchPolicy;
use kvflow_core::{Persistence, Result};
use kvflow_node::{Client, Node, NodeOptions, ServiceConfig};

#[derive(Parser)]
#[command(
    name = "kvflow",
    version,
    about = "Run a kvflow node, talk to a cluster, or benchmark one"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Node daemon.
    Node {
        #[command(subcommand)]
        cmd: NodeCmd,
    },
    /// Store an object and print its version.
    Put {
        #[command(flatten)]
        at: Target,
        key: String,
        value: String,
    },
    /// Fetch the current object, or a past one.
    Get {
        #[command(flatten)]
        at: Target,
        key: String,
        #[arg(long, conflicts_with = "time")]
        version: Option<u64>,
        /// Microseconds since the Unix epoch.
        #[arg(long)]
        time: Option<u64>,
    },
    /// Hand an object to the lambdas at its key without storing it.
    Trigput {
        #[command(flatten)]
        at: Target,
        key: String,
        value: String,
    },
    /// Print messages published to a topic until interrupted.
    Sub {
        #[command(flatten)]
        at: Target,
        topic: String,
    },
    /// Publish one message to a topic.
    Pub {
        #[command(flatten)]
        at: Target,
        topic: String,
        message: String,
        #[arg(long)]
        persistent: bool,
    },
    /// Microbenchmarks.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
}

#[derive(Subcommand)]
enum NodeCmd {
    /// Start a node and serve until killed.
    Start {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct Target {
    /// Any node of the cluster.
    #[arg(long, default_value = "127.0.0.1:7000")]
    addr: SocketAddr,
}

#[derive(Args)]
struct Output {
    /// Raw samples.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// One row per configuration.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Op {
    Trig,
    Vola,
    Pers,
}

#[derive(Clone, Copy, ValueEnum)]
enum Edge {
    Trigger,
    Volatile,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    RoundRobin,
    FifoByKey,
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Open-loop puts against a running cluster.
    Put {
        #[command(flatten)]
        at: Target,
        #[arg(long, value_enum, default_value = "vola")]
        op: Op,
        #[arg(long, default_value_t = 10 * 1024)]
        size: usize,
        /// Offered ops per second; repeat or comma-separate to sweep.
        #[arg(long, value_delimiter = ',', default_value = "100")]
        rate: Vec<f64>,
        /// Seconds per rate.
        #[arg(long, default_value_t = 5.0)]
        duration: f64,
        #[arg(long, default_value_t = 1)]
        clients: usize,
        #[arg(long, default_value = "/vola")]
        vola_pool: String,
        #[arg(long, default_value = "/pers")]
        pers_pool: String,
        #[arg(long, default_value = "/vola")]
        trig_pool: String,
        /// Skip the light-load run used to flag saturation.
        #[arg(long)]
        no_saturation_check: bool,
        #[command(flatten)]
        out: Output,
    },
    /// The k-stage no-op pipeline on an in-process loopback cluster.
    Pipeline {
        /// Stage counts to run.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
        stages: Vec<usize>,
        #[arg(long, value_enum, default_value = "trigger")]
        edge: Edge,
        #[arg(long, default_value_t = 1024)]
        size: usize,
        /// Ops per second in the latency phase.
        #[arg(long, default_value_t = 200.0)]
        rate: f64,
        #[arg(long, default_value_t = 400)]
        latency_ops: u64,
        #[arg(long, default_value_t = 2000)]
        throughput_ops: u64,
        #[arg(long, default_value_t = 3)]
        nodes: u32,
        #[command(flatten)]
        out: Output,
    },
    /// Enqueue and dequeue costs and per-level trie cost, in process.
    Fastpath {
        /// Object sizes in bytes.
        #[arg(long, value_delimiter = ',', default_value = "10240,1048576")]
        size: Vec<usize>,
        #[arg(long, value_enum, default_value = "round-robin")]
        policy: Policy,
        #[arg(long, default_value_t = 2000)]
        events: u64,
        #[command(flatten)]
        out: Output,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Node {
            cmd: NodeCmd::Start { config },
        } => {
            let cfg = ServiceConfig::load(&config)?;
            let node = Node::start(cfg, NodeOptions::default())?;
            log::info!("node {} serving on {}", node.id(), node.addr());
            loop {
                std::thread::park();
            }
        }
        Cmd::Put { at, key, value } => {
            let r = Client::connect(at.addr)?.put(&key, Bytes::from(value))?;
            println!("{:?}", r.version);
        }
        Cmd::Get {
            at,
            key,
            version,
            time,
        } => {
            let c = Client::connect(at.addr)?;
            let o = match (version, time) {
                (Some(v), _) => c.get_by_version(&key, v)?,
                (_, Some(t)) => c.get_by_time(&key, t)?,
                _ => c.get(&key)?,
            };
            println!("{} {:?}", o.key, o.version);
            println!("{}", String::from_utf8_lossy(&o.payload));
        }
        Cmd::Trigput { at, key, value } => {
            Client::connect(at.addr)?.trigger_put(&key, Bytes::from(value))?;
        }
        Cmd::Sub { at, topic } => {
            let c = Client::connect(at.addr)?;
            let mut sub = c.subscribe(&topic)?;
            while let Some(n) = sub.recv() {
                println!(
                    "{} {} {}",
                    n.topic,
                    n.seq,
                    String::from_utf8_lossy(&n.payload)
                );
            }
        }
        Cmd::Pub {
            at,
            topic,
            message,
            persistent,
        } => {
            let p = if persistent {
                Persistence::Persistent
            } else {
                Persistence::Volatile
            };
            let r = Client::connect(at.addr)?.publish(&topic, p, Bytes::from(message))?;
            println!("{:?}", r.version);
        }
        Cmd::Bench { cmd } => bench(cmd)?,
    }
    Ok(())
}

fn bench(cmd: BenchCmd) -> Result<()> {
    match cmd {
        BenchCmd::Put {
            at,
            op,
            size,
            rate,
            duration,
            clients,
            vola_pool,
            pers_pool,
            trig_pool,
            no_saturation_check,
            out,
        } => {
            let op = match op {
                Op::Trig => OpType::Trig,
                Op::Vola => OpType::Vola,
                Op::Pers => OpType::Pers,
            };
            let mut cfg = PutBenchConfig::new(op, size, rate[0], Duration::from_secs_f64(duration));
            cfg.clients = clients;
            cfg.vola_pool = vola_pool;
            cfg.pers_pool = pers_pool;
            cfg.trig_pool = trig_pool;
            cfg.skip_saturation_check = no_saturation_check;
            let report = if rate.len() > 1 && !no_saturation_check {
                run_rate_sweep(at.addr, &cfg, &rate)?
            } else {
                let mut all = BenchReport::default();
                for r in rate {
                    all.merge(run_put_bench(
                        at.addr,
                        &PutBenchConfig {
                            rate: r,
                            ..cfg.clone()
                        },
                    )?);
                }
                all
            };
            emit(&report, &out)
        }
        BenchCmd::Pipeline {
            stages,
            edge,
            size,
            rate,
            latency_ops,
            throughput_ops,
            nodes,
            out,
        } => {
            let mut all = BenchReport::default();
            for k in stages {
                let edge = match edge {
                    Edge::Trigger => PutType::Trigger,
                    Edge::Volatile => PutType::Volatile,
                };
                let cfg = PipelineBenchConfig {
                    object_size: size,
                    rate,
                    latency_ops,
                    throughput_ops,
                    nodes,
                    ..PipelineBenchConfig::new(k, edge)
                };
                all.merge(run_pipeline_bench(&cfg)?.report);
            }
            emit(&all, &out)
        }
        BenchCmd::Fastpath {
            size,
            policy,
            events,
            out,
        } => {
            let policy = match policy {
                Policy::RoundRobin => DispatchPolicy::RoundRobin,
                Policy::FifoByKey => DispatchPolicy::FifoByKey,
            };
            let mut all = BenchReport::default();
            for s in size {
                let cfg = FastpathBenchConfig {
                    events,
                    ..FastpathBenchConfig::new(s, policy)
                };
                all.merge(run_fastpath_bench(&cfg)?.report);
            }
            emit(&all, &out)
        }
    }
}

fn emit(report: &BenchReport, out: &Output) -> Result<()> {
    let csv_err = |e: csv::Error| kvflow_core::Error::Io(std::io::Error::other(e));
    if let Some(p) = &out.csv {
        report
            .write_samples(std::fs::File::create(p)?)
            .map_err(csv_err)?;
    }
    match &out.summary {
        Some(p) => report
            .write_summary(std::fs::File::create(p)?)
            .map_err(csv_err)?,
        None => report
            .write_summary(std::io::stdout().lock())
            .map_err(csv_err)?,
    }
    Ok(())
}
