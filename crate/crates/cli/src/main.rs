use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use splitlearn::harness::{split_location_sweep, summary_table, Fidelity, LinkModel};
use splitlearn::runtime::{load_dataset, run_training, DataSource, SessionConfig, SessionRole, TrainingOutcome};
use splitlearn::{HyperParams, SplitMode, SplitPlan};

#[derive(Parser)]
#[command(name = "splitlearn", version, about = "Split-learning client, server and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Host the middle segment and wait for one client.
    Server {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train against a running server.
    Client {
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Train the unsplit network in one process.
    Oracle {
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Run client and server in one process over a modeled link.
    Simulate {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        link: LinkArgs,
        /// Push every message through the 32-bit wire encoding.
        #[arg(long)]
        wire32: bool,
    },
    /// Time a few steps at each candidate first cut.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        link: LinkArgs,
        /// Comma-separated first-cut positions.
        #[arg(long, value_delimiter = ',', required = true)]
        cuts: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        steps: usize,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    plan: PathBuf,
    /// `synthetic[:N]` or `idx:IMAGES,LABELS`.
    #[arg(long, default_value = "synthetic")]
    data: String,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Double)]
    mode: Mode,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct LinkArgs {
    #[arg(long, default_value_t = 0.0)]
    latency_ms: f64,
    /// Omit for unlimited bandwidth.
    #[arg(long)]
    bandwidth_mbps: Option<f64>,
}

impl LinkArgs {
    fn model(&self) -> Result<LinkModel> {
        match self.bandwidth_mbps {
            Some(mbps) if mbps.is_nan() || mbps <= 0.0 => bail!("--bandwidth-mbps must be positive, got {mbps}"),
            Some(mbps) => Ok(LinkModel::from_ms_mbps(self.latency_ms, mbps)?),
            None => Ok(LinkModel::from_ms_mbps(self.latency_ms, 0.0)?),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Single,
    Double,
}

impl From<Mode> for SplitMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Single => SplitMode::SingleSplit,
            Mode::Double => SplitMode::DoubleSplit,
        }
    }
}

fn session(role: SessionRole, t: &TrainArgs) -> Result<SessionConfig> {
    let mut cfg = SessionConfig::new(role, &t.plan);
    cfg.mode = t.mode.into();
    cfg.lr = t.lr;
    cfg.batch_size = t.batch_size;
    cfg.epochs = t.epochs;
    cfg.seed = t.seed;
    cfg.data = t.data.parse::<DataSource>()?;
    cfg.report = t.report.clone();
    Ok(cfg)
}

fn print_outcome(out: &TrainingOutcome) {
    let s = &out.summary;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.6}"));
    println!(
        "{} {}: {} steps, final loss {}, final accuracy {}, mean step {:.3} ms, {} bytes sent, {} received",
        s.role,
        s.plan,
        s.steps,
        fmt(s.final_loss),
        fmt(s.final_accuracy),
        s.mean_total_ns / 1e6,
        s.bytes_sent,
        s.bytes_received
    );
}

fn run(cli: Cli) -> Result<()> {
    let out = match cli.command {
        Command::Server {
            listen,
            plan,
            seed,
            report,
        } => {
            let mut cfg = SessionConfig::new(SessionRole::Server, plan);
            cfg.address = Some(listen);
            cfg.seed = seed;
            cfg.report = report;
            run_training(&cfg)?
        }
        Command::Client { connect, train } => {
            let mut cfg = session(SessionRole::Client, &train)?;
            cfg.address = Some(connect);
            run_training(&cfg)?
        }
        Command::Oracle { train } => run_training(&session(SessionRole::Oracle, &train)?)?,
        Command::Simulate { train, link, wire32 } => {
            let mut cfg = session(SessionRole::Simulate, &train)?;
            cfg.link = link.model()?;
            cfg.fidelity = if wire32 { Fidelity::Wire32 } else { Fidelity::Exact64 };
            run_training(&cfg)?
        }
        Command::Sweep {
            train,
            link,
            cuts,
            steps,
        } => {
            if train.report.is_some() {
                bail!("sweep prints a table and does not write a report");
            }
            let plan = SplitPlan::load(&train.plan).with_context(|| format!("loading {}", train.plan.display()))?;
            let vp = plan.validate()?;
            let data = load_dataset(&train.data.parse()?, &vp, train.seed)?;
            let hp = HyperParams::new(train.lr, train.batch_size)?;
            let rows = split_location_sweep(&plan, &cuts, link.model()?, &data, &hp, train.seed, steps)?;
            if rows.is_empty() {
                bail!("none of the cuts {cuts:?} is valid for {}", plan.name);
            }
            print!("{}", summary_table(&rows));
            return Ok(());
        }
    };
    print_outcome(&out);
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
