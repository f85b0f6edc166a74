//! Top-level entry points: one function per process role.

use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use super::report::{hex, write_report, Summary};
use super::session::{
    monolithic_step, run_client, server_session, ClientOptions, ClientOutcome, ServerConfig, ServerOutcome,
};
use super::state::{ParamSnapshot, TrainState};
use crate::error::{Error, Result};
use crate::harness::data::{gen_synthetic, Dataset};
use crate::harness::idx::load_idx;
use crate::harness::link::LinkModel;
use crate::harness::loopback::{loopback_transport, Fidelity};
use crate::plan::{SplitMode, SplitPlan, ValidatedPlan};
use crate::segment::{HyperParams, Role, Segment};
use crate::transport::TcpTransport;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionRole {
    Server,
    Client,
    Simulate,
    Oracle,
}

/// Where training samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Gaussian blobs shaped to the plan's input, `n` samples.
    Synthetic { n: usize },
    Idx { images: PathBuf, labels: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic { n: 512 }
    }
}

impl FromStr for DataSource {
    type Err = Error;

    /// `synthetic`, `synthetic:N` or `idx:IMAGES,LABELS`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "synthetic" {
            return Ok(DataSource::default());
        }
        if let Some(n) = s.strip_prefix("synthetic:") {
            let n = n
                .parse()
                .map_err(|_| Error::Config(format!("bad sample count in `{s}`")))?;
            return Ok(DataSource::Synthetic { n });
        }
        if let Some(rest) = s.strip_prefix("idx:") {
            let (images, labels) = rest
                .split_once(',')
                .ok_or_else(|| Error::Config(format!("expected `idx:IMAGES,LABELS`, got `{s}`")))?;
            return Ok(DataSource::Idx {
                images: images.into(),
                labels: labels.into(),
            });
        }
        Err(Error::Config(format!(
            "unknown data source `{s}` (use `synthetic[:N]` or `idx:IMAGES,LABELS`)"
        )))
    }
}

/// Loads the data and fits it to the plan: samples are reshaped to the input
/// shape and labels are checked against the output width.
pub fn load_dataset(src: &DataSource, plan: &ValidatedPlan, seed: u64) -> Result<Dataset> {
    let classes = plan.output_classes();
    let d = match src {
        DataSource::Synthetic { n } => gen_synthetic(seed, *n, &plan.plan.input_shape, classes)?,
        DataSource::Idx { images, labels } => load_idx(images, labels)?,
    };
    if d.n_classes > classes {
        return Err(Error::Dataset(format!(
            "dataset has {} classes but the network outputs {classes}",
            d.n_classes
        )));
    }
    let mut d = if d.sample_shape() == plan.plan.input_shape {
        d
    } else {
        d.reshape_samples(&plan.plan.input_shape)?
    };
    d.n_classes = classes;
    Ok(d)
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub role: SessionRole,
    pub plan: PathBuf,
    /// Split used by client and simulate roles. The server learns it at HELLO.
    pub mode: SplitMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub data: DataSource,
    /// Listen address (server) or peer address (client).
    pub address: Option<String>,
    pub report: Option<PathBuf>,
    /// Simulate only.
    pub link: LinkModel,
    pub fidelity: Fidelity,
}

impl SessionConfig {
    pub fn new(role: SessionRole, plan: impl Into<PathBuf>) -> Self {
        Self {
            role,
            plan: plan.into(),
            mode: SplitMode::DoubleSplit,
            lr: 0.05,
            batch_size: 16,
            epochs: 1,
            seed: 0,
            data: DataSource::default(),
            address: None,
            report: None,
            link: LinkModel::ideal(),
            fidelity: Fidelity::Exact64,
        }
    }
}

#[derive(Debug)]
pub struct TrainingOutcome {
    /// Client view (server view for the server role). In simulate mode the
    /// server's compute, serialization and loss are folded in.
    pub state: TrainState,
    /// The server's own state, when it ran in this process.
    pub server: Option<TrainState>,
    pub summary: Summary,
}

/// Runs client and server over an in-process loopback, each on its own thread.
pub fn simulate_session(
    plan: &ValidatedPlan,
    dataset: &Dataset,
    opts: &ClientOptions,
    link: LinkModel,
    fidelity: Fidelity,
) -> Result<(ClientOutcome, ServerOutcome)> {
    let (mut client_end, mut server_end) = loopback_transport(link, fidelity);
    let server_cfg = ServerConfig {
        plan: plan.plan.clone(),
        seed: opts.seed,
        record_weights: opts.record_weights,
    };
    let (client, server) = std::thread::scope(|s| {
        let server = s.spawn(move || server_session(&mut server_end, &server_cfg));
        let client = run_client(&mut client_end, plan, dataset, opts);
        // Unblocks the server if the client died without a goodbye.
        drop(client_end);
        (client, server.join().expect("server thread panicked"))
    });
    match (client, server) {
        (Ok(c), Ok(s)) => Ok((c, s)),
        (Err(c), Err(s)) if matches!(c.cause, Error::Remote(_) | Error::Disconnected) => Err(s.cause),
        (Err(c), _) => Err(c.cause),
        (Ok(_), Err(s)) => Err(s.cause),
    }
}

/// Client state with the server's per-step compute, serialization and loss folded in.
pub fn merge_server(client: &TrainState, server: &TrainState) -> TrainState {
    let mut merged = client.clone();
    for (c, s) in merged.steps.iter_mut().zip(&server.steps) {
        debug_assert_eq!(c.timing.step_id, s.timing.step_id);
        c.timing.absorb_peer(&s.timing);
        c.loss = c.loss.or(s.loss);
        c.accuracy = c.accuracy.or(s.accuracy);
    }
    merged
}

/// Plain SGD on the unsplit network for `steps` steps.
pub fn run_monolithic(
    plan: &SplitPlan,
    dataset: &Dataset,
    hp: &HyperParams,
    seed: u64,
    steps: usize,
    record_weights: bool,
) -> Result<(TrainState, Segment)> {
    let vp = plan.with_cuts(&[]).validate()?;
    let mut seg = vp
        .segment(Role::Monolithic)
        .expect("an unsplit plan has one segment")
        .build(seed)?;
    let per_epoch = dataset.steps_per_epoch(hp.batch_size);
    let mut state = TrainState {
        mode: Some(SplitMode::NoSplit),
        ..Default::default()
    };
    if record_weights {
        state.weights.push(ParamSnapshot::of(&[&seg]));
    }
    for i in 0..steps {
        let batch = dataset.step_batch(i, hp.batch_size)?;
        let mut log = monolithic_step(&mut seg, i as u64 + 1, &batch, plan.loss, hp)?;
        log.epoch = i / per_epoch;
        state.epoch = log.epoch;
        state.steps.push(log);
        state.step = i as u64 + 1;
        if record_weights {
            state.weights.push(ParamSnapshot::of(&[&seg]));
        }
    }
    Ok((state, seg))
}

fn connect_with_retry(addr: &str, patience: Duration) -> Result<TcpStream> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if start.elapsed() < patience => {
                log::debug!("connect to {addr} failed ({e}), retrying");
                std::thread::sleep(Duration::from_millis(100));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

/// Runs one role end to end and writes the report, if one was requested.
/// Plan, dataset and hyperparameter errors surface before any network activity.
pub fn run_training(cfg: &SessionConfig) -> Result<TrainingOutcome> {
    let base = SplitPlan::load(&cfg.plan)?;
    base.validate()?;

    if cfg.role == SessionRole::Server {
        let addr = cfg
            .address
            .as_deref()
            .ok_or_else(|| Error::Config("server needs a listen address".into()))?;
        let listener = TcpListener::bind(addr)?;
        log::info!("listening on {}", listener.local_addr()?);
        let (stream, peer) = listener.accept()?;
        log::info!("client connected from {peer}");
        let mut conn = TcpTransport::tcp(stream)?;
        let out = server_session(
            &mut conn,
            &ServerConfig {
                plan: base.clone(),
                seed: cfg.seed,
                record_weights: false,
            },
        )?;
        let plan = base.for_mode(out.hello.mode)?;
        let mut summary = Summary::from_state(&out.state);
        summary.role = "server".into();
        summary.plan = plan.name.clone();
        summary.plan_hash = hex(&plan.hash());
        summary.seed = out.hello.seed;
        summary.lr = out.hello.lr;
        summary.batch_size = out.hello.batch_size as usize;
        if let Some(path) = &cfg.report {
            write_report(path, &out.state, &summary)?;
        }
        return Ok(TrainingOutcome {
            state: out.state,
            server: None,
            summary,
        });
    }

    let mode = if cfg.role == SessionRole::Oracle { SplitMode::NoSplit } else { cfg.mode };
    let plan = base.for_mode(mode)?.validate()?;
    let dataset = load_dataset(&cfg.data, &plan, cfg.seed)?;
    let hp = HyperParams::new(cfg.lr, cfg.batch_size)?;
    let steps = cfg.epochs * dataset.steps_per_epoch(hp.batch_size);
    if steps == 0 {
        return Err(Error::Config(format!(
            "{} epoch(s) over {} samples at batch size {} is zero steps",
            cfg.epochs,
            dataset.len(),
            hp.batch_size
        )));
    }
    let opts = ClientOptions {
        hp,
        seed: cfg.seed,
        steps,
        record_weights: false,
    };

    let (state, server) = match cfg.role {
        SessionRole::Oracle => (run_monolithic(&plan.plan, &dataset, &hp, cfg.seed, steps, false)?.0, None),
        SessionRole::Simulate => {
            let (c, s) = simulate_session(&plan, &dataset, &opts, cfg.link, cfg.fidelity)?;
            (merge_server(&c.state, &s.state), Some(s.state))
        }
        SessionRole::Client => {
            let addr = cfg
                .address
                .as_deref()
                .ok_or_else(|| Error::Config("client needs a server address".into()))?;
            let mut conn = TcpTransport::tcp(connect_with_retry(addr, Duration::from_secs(10))?)?;
            (run_client(&mut conn, &plan, &dataset, &opts)?.state, None)
        }
        SessionRole::Server => unreachable!("handled above"),
    };

    let mut summary = Summary::from_state(&state);
    summary.role = match cfg.role {
        SessionRole::Oracle => "oracle",
        SessionRole::Simulate => "simulate",
        _ => "client",
    }
    .into();
    summary.plan = plan.plan.name.clone();
    summary.plan_hash = hex(&plan.plan.hash());
    summary.dataset = dataset.source.clone();
    summary.seed = cfg.seed;
    summary.lr = hp.lr;
    summary.batch_size = hp.batch_size;
    summary.epochs = cfg.epochs;
    if let Some(path) = &cfg.report {
        write_report(path, &state, &summary)?;
    }
    Ok(TrainingOutcome { state, server, summary })
}
