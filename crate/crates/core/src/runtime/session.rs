//! The lockstep session between the client (segments A and C, data, labels)
//! and the server (segment B).
//!
//! Double split, one step `s`:
//!
//! ```text
//! client                          server
//!   A.forward
//!   ACT_AB(s)  ------------------>  B.forward
//!              <------------------  ACT_BC(s)
//!   C.forward, loss, C.backward, C.sgd
//!   GRAD_CB(s) ------------------>  auxiliary backward on B, B.sgd
//!              <------------------  GRAD_BA(s)
//!   auxiliary backward on A, A.sgd
//! ```
//!
//! Single split replaces the middle exchange with a LABELS frame: the server
//! holds the label-side segment and computes the loss.

use std::time::Instant;

use super::state::{ParamSnapshot, SessionAbort, StepLog, TimingRecord, TrainState};
use crate::bridge::{auxiliary_backward, BoundaryGradient};
use crate::error::{Error, Result};
use crate::harness::data::{Batch, Dataset};
use crate::loss::{accuracy, loss_and_grad, LossKind};
use crate::plan::{SplitMode, SplitPlan, ValidatedPlan};
use crate::segment::{HyperParams, Role, Segment};
use crate::tensor::Tensor;
use crate::transport::Transport;
use crate::wire::{Hello, MsgType, Payload, WireMessage};

/// Receives the next frame and insists it is `kind` for step `step`.
fn expect<T: Transport + ?Sized>(conn: &mut T, kind: MsgType, step: u64) -> Result<Tensor> {
    let m = conn.recv()?;
    if m.kind == kind && m.step_id == step {
        return m.into_tensor();
    }
    Err(unexpected(m, kind, step))
}

fn unexpected(m: WireMessage, want: MsgType, step: u64) -> Error {
    match (m.kind, m.payload) {
        (MsgType::Error, Payload::Control(text)) => Error::Remote(String::from_utf8_lossy(&text).into_owned()),
        (MsgType::Bye, _) => Error::Desync(format!(
            "peer sent BYE at step {step} while {want:?} was expected; the step was left unfinished"
        )),
        (kind, _) => Error::Desync(format!(
            "expected {want:?} for step {step}, got {kind:?} for step {}",
            m.step_id
        )),
    }
}

fn check_shape(t: &Tensor, batch: usize, sample: &[usize], what: MsgType) -> Result<()> {
    let mut want = vec![batch];
    want.extend_from_slice(sample);
    if t.shape() != want {
        return Err(Error::Desync(format!(
            "{what:?} tensor has shape {:?}, expected {want:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        })
        .collect()
}

/// Times the closures passed to it.
#[derive(Default)]
struct Stopwatch(u64);

impl Stopwatch {
    fn time<R>(&mut self, f: impl FnOnce() -> R) -> R {
        let t0 = Instant::now();
        let r = f();
        self.0 += t0.elapsed().as_nanos() as u64;
        r
    }
}

/// One double-split step on the client. Sends ACT_AB and GRAD_CB, receives
/// ACT_BC and GRAD_BA, and updates both client segments.
pub fn client_step_double<T: Transport + ?Sized>(
    conn: &mut T,
    step_id: u64,
    batch: &Batch,
    seg_a: &mut Segment,
    seg_c: &mut Segment,
    loss: LossKind,
    hp: &HyperParams,
) -> Result<StepLog> {
    let before = conn.counters();
    let mut sw = Stopwatch::default();
    let b = batch.inputs.batch();

    let (a_out, mut a_cache) = sw.time(|| seg_a.forward(&batch.inputs))?;
    conn.send(WireMessage::tensor(MsgType::ActAB, step_id, a_out))?;

    let b_out = expect(conn, MsgType::ActBC, step_id)?;
    check_shape(&b_out, b, seg_c.input_shape(), MsgType::ActBC)?;
    let (l, acc, grad_cb) = sw.time(|| -> Result<_> {
        let (y, mut cache) = seg_c.forward(&b_out)?;
        let (l, dy) = loss_and_grad(loss, &y, &batch.targets)?;
        let (grads, grad_in) = seg_c.backward_from_loss(&mut cache, &dy)?;
        seg_c.sgd_step(&grads, hp)?;
        Ok((l, accuracy(&y, &batch.labels), grad_in))
    })?;
    conn.send(WireMessage::tensor(MsgType::GradCB, step_id, grad_cb))?;

    let g = expect(conn, MsgType::GradBA, step_id)?;
    check_shape(&g, b, seg_a.output_shape(), MsgType::GradBA)?;
    sw.time(|| -> Result<()> {
        let (grads, _) = auxiliary_backward(seg_a, &mut a_cache, &BoundaryGradient::new(g, step_id))?;
        seg_a.sgd_step(&grads, hp)
    })?;

    let link = conn.counters().since(&before);
    Ok(StepLog {
        epoch: 0,
        loss: Some(l),
        accuracy: Some(acc),
        timing: TimingRecord::from_link(step_id, sw.0, &link),
        link,
    })
}

/// One single-split step on the client: ACT_AB and LABELS out, GRAD_BA back.
/// The loss is computed on the server, so the returned log has none.
pub fn client_step_single<T: Transport + ?Sized>(
    conn: &mut T,
    step_id: u64,
    batch: &Batch,
    seg_a: &mut Segment,
    hp: &HyperParams,
) -> Result<StepLog> {
    let before = conn.counters();
    let mut sw = Stopwatch::default();

    let (a_out, mut a_cache) = sw.time(|| seg_a.forward(&batch.inputs))?;
    conn.send(WireMessage::tensor(MsgType::ActAB, step_id, a_out))?;
    conn.send(WireMessage::tensor(MsgType::Labels, step_id, batch.targets.clone()))?;

    let g = expect(conn, MsgType::GradBA, step_id)?;
    check_shape(&g, batch.inputs.batch(), seg_a.output_shape(), MsgType::GradBA)?;
    sw.time(|| -> Result<()> {
        let (grads, _) = auxiliary_backward(seg_a, &mut a_cache, &BoundaryGradient::new(g, step_id))?;
        seg_a.sgd_step(&grads, hp)
    })?;

    let link = conn.counters().since(&before);
    Ok(StepLog {
        epoch: 0,
        loss: None,
        accuracy: None,
        timing: TimingRecord::from_link(step_id, sw.0, &link),
        link,
    })
}

/// One plain SGD step on the unsplit network.
pub fn monolithic_step(
    seg: &mut Segment,
    step_id: u64,
    batch: &Batch,
    loss: LossKind,
    hp: &HyperParams,
) -> Result<StepLog> {
    let t0 = Instant::now();
    let (y, mut cache) = seg.forward(&batch.inputs)?;
    let (l, dy) = loss_and_grad(loss, &y, &batch.targets)?;
    let (grads, _) = seg.backward_from_loss(&mut cache, &dy)?;
    seg.sgd_step(&grads, hp)?;
    let compute_ns = t0.elapsed().as_nanos() as u64;
    Ok(StepLog {
        epoch: 0,
        loss: Some(l),
        accuracy: Some(accuracy(&y, &batch.labels)),
        timing: TimingRecord {
            step_id,
            compute_ns,
            total_ns: compute_ns,
            ..Default::default()
        },
        link: Default::default(),
    })
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub hp: HyperParams,
    pub seed: u64,
    /// Total steps; batches cycle through the dataset.
    pub steps: usize,
    pub record_weights: bool,
}

#[derive(Debug)]
pub struct ClientOutcome {
    pub state: TrainState,
    pub seg_a: Segment,
    /// Present in double-split mode.
    pub seg_c: Option<Segment>,
}

impl ClientOutcome {
    pub fn snapshot(&self) -> ParamSnapshot {
        let mut segs = vec![&self.seg_a];
        segs.extend(self.seg_c.as_ref());
        ParamSnapshot::of(&segs)
    }
}

/// Sends an ERROR frame unless the peer is the one that failed.
fn report_error<T: Transport + ?Sized>(conn: &mut T, step: u64, e: &Error) {
    if !matches!(e, Error::Remote(_) | Error::Disconnected) {
        let _ = conn.send(WireMessage::error(step, &e.to_string()));
    }
}

/// Full client session: handshake, `opts.steps` steps starting at step id 1,
/// then BYE.
pub fn run_client<T: Transport + ?Sized>(
    conn: &mut T,
    plan: &ValidatedPlan,
    dataset: &Dataset,
    opts: &ClientOptions,
) -> std::result::Result<ClientOutcome, SessionAbort> {
    let early = |cause| SessionAbort {
        state: Box::default(),
        segments: Vec::new(),
        cause,
    };
    let mode = plan.mode;
    if mode == SplitMode::NoSplit {
        return Err(early(Error::Config("a client session needs at least one cut".into())));
    }
    if dataset.sample_shape() != plan.plan.input_shape {
        return Err(early(Error::Dataset(format!(
            "samples have shape {:?}, the plan expects {:?}",
            dataset.sample_shape(),
            plan.plan.input_shape
        ))));
    }
    let per_epoch = dataset.steps_per_epoch(opts.hp.batch_size);
    if per_epoch == 0 {
        return Err(early(Error::Dataset(format!(
            "{} samples cannot fill one batch of {}",
            dataset.len(),
            opts.hp.batch_size
        ))));
    }
    let build = |role| {
        plan.segment(role)
            .ok_or_else(|| Error::Plan(format!("plan has no segment {role}")))
            .and_then(|s| s.build(opts.seed))
    };
    let mut seg_a = build(Role::A).map_err(early)?;
    let mut seg_c = match mode {
        SplitMode::DoubleSplit => Some(build(Role::C).map_err(early)?),
        _ => None,
    };

    let mut state = TrainState {
        mode: Some(mode),
        ..Default::default()
    };
    if opts.record_weights {
        let mut segs = vec![&seg_a];
        segs.extend(seg_c.as_ref());
        state.weights.push(ParamSnapshot::of(&segs));
    }

    let hello = Hello {
        plan_hash: plan.plan.hash(),
        mode,
        seed: opts.seed,
        lr: opts.hp.lr,
        batch_size: opts.hp.batch_size as u32,
    };
    let mut step_id = 0;
    let result = (|| -> Result<()> {
        conn.send(WireMessage {
            kind: MsgType::Hello,
            step_id: 0,
            payload: Payload::Control(hello.encode()),
        })?;
        let ack = conn.recv()?;
        if ack.kind != MsgType::PlanAck || ack.step_id != 0 {
            return Err(unexpected(ack, MsgType::PlanAck, 0));
        }
        for i in 0..opts.steps {
            step_id = i as u64 + 1;
            let epoch = i / per_epoch;
            let batch = dataset.step_batch(i, opts.hp.batch_size)?;
            let mut log = match seg_c.as_mut() {
                Some(c) => client_step_double(conn, step_id, &batch, &mut seg_a, c, plan.plan.loss, &opts.hp)?,
                None => client_step_single(conn, step_id, &batch, &mut seg_a, &opts.hp)?,
            };
            log.epoch = epoch;
            log::debug!("client step {step_id}: loss {:?}", log.loss);
            state.steps.push(log);
            state.step = step_id;
            state.epoch = epoch;
            if opts.record_weights {
                let mut segs = vec![&seg_a];
                segs.extend(seg_c.as_ref());
                state.weights.push(ParamSnapshot::of(&segs));
            }
        }
        step_id += 1;
        conn.send(WireMessage::control(MsgType::Bye, step_id))
    })();
    state.link = conn.counters();
    match result {
        Ok(()) => Ok(ClientOutcome { state, seg_a, seg_c }),
        Err(cause) => {
            report_error(conn, step_id, &cause);
            let mut segments = vec![seg_a];
            segments.extend(seg_c);
            Err(SessionAbort {
                state: Box::new(state),
                segments,
                cause,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub plan: SplitPlan,
    pub seed: u64,
    pub record_weights: bool,
}

#[derive(Debug)]
pub struct ServerOutcome {
    pub state: TrainState,
    pub segment: Segment,
    pub hello: Hello,
}

struct ServerSetup {
    hello: Hello,
    segment: Segment,
    loss: LossKind,
    hp: HyperParams,
}

fn server_handshake<T: Transport + ?Sized>(conn: &mut T, cfg: &ServerConfig) -> Result<ServerSetup> {
    let m = conn.recv()?;
    let hello = match (&m.kind, &m.payload, m.step_id) {
        (MsgType::Hello, Payload::Control(bytes), 0) => Hello::decode(bytes)?,
        _ => return Err(unexpected(m, MsgType::Hello, 0)),
    };
    let plan = cfg.plan.for_mode(hello.mode)?;
    if plan.hash() != hello.plan_hash {
        return Err(Error::Config(format!(
            "plan hash mismatch: client runs a different plan than `{}` in {:?} mode",
            plan.name, hello.mode
        )));
    }
    if hello.seed != cfg.seed {
        return Err(Error::Config(format!(
            "seed mismatch: client {} vs server {}",
            hello.seed, cfg.seed
        )));
    }
    let hp = HyperParams::new(hello.lr, hello.batch_size as usize)?;
    let vp = plan.validate()?;
    let role = match hello.mode {
        SplitMode::DoubleSplit => Role::B,
        SplitMode::SingleSplit => Role::C,
        SplitMode::NoSplit => return Err(Error::Config("unsplit plans have no server segment".into())),
    };
    let segment = vp
        .segment(role)
        .ok_or_else(|| Error::Plan(format!("plan has no segment {role}")))?
        .build(cfg.seed)?;
    conn.send(WireMessage::control(MsgType::PlanAck, 0))?;
    log::info!(
        "session agreed: plan `{}`, {:?}, batch {}, lr {}",
        plan.name,
        hello.mode,
        hp.batch_size,
        hp.lr
    );
    Ok(ServerSetup {
        hello,
        segment,
        loss: plan.loss,
        hp,
    })
}

/// Serves one client until BYE. On any failure an ERROR frame is sent before
/// returning.
pub fn server_session<T: Transport + ?Sized>(
    conn: &mut T,
    cfg: &ServerConfig,
) -> std::result::Result<ServerOutcome, SessionAbort> {
    let ServerSetup {
        hello,
        mut segment,
        loss,
        hp,
    } = match server_handshake(conn, cfg) {
        Ok(s) => s,
        Err(cause) => {
            report_error(conn, 0, &cause);
            return Err(SessionAbort {
                state: Box::default(),
                segments: Vec::new(),
                cause,
            });
        }
    };
    let mut state = TrainState {
        mode: Some(hello.mode),
        ..Default::default()
    };
    if cfg.record_weights {
        state.weights.push(ParamSnapshot::of(&[&segment]));
    }
    let b = hp.batch_size;
    let mut step: u64 = 1;
    let result = (|| -> Result<()> {
        loop {
            let before = conn.counters();
            let m = conn.recv()?;
            match m.kind {
                MsgType::Bye if m.step_id == step => return Ok(()),
                MsgType::ActAB if m.step_id == step => {}
                _ => return Err(unexpected(m, MsgType::ActAB, step)),
            }
            let x = m.into_tensor()?;
            check_shape(&x, b, segment.input_shape(), MsgType::ActAB)?;
            let mut sw = Stopwatch::default();
            let (loss_value, acc) = match hello.mode {
                SplitMode::DoubleSplit => {
                    let (y, mut cache) = sw.time(|| segment.forward(&x))?;
                    conn.send(WireMessage::tensor(MsgType::ActBC, step, y))?;
                    let g = expect(conn, MsgType::GradCB, step)?;
                    check_shape(&g, b, segment.output_shape(), MsgType::GradCB)?;
                    let dx = sw.time(|| -> Result<Tensor> {
                        let (grads, dx) = auxiliary_backward(&segment, &mut cache, &BoundaryGradient::new(g, step))?;
                        segment.sgd_step(&grads, &hp)?;
                        Ok(dx)
                    })?;
                    conn.send(WireMessage::tensor(MsgType::GradBA, step, dx))?;
                    (None, None)
                }
                _ => {
                    let targets = expect(conn, MsgType::Labels, step)?;
                    check_shape(&targets, b, segment.output_shape(), MsgType::Labels)?;
                    let (l, acc, dx) = sw.time(|| -> Result<_> {
                        let (y, mut cache) = segment.forward(&x)?;
                        let (l, dy) = loss_and_grad(loss, &y, &targets)?;
                        let (grads, dx) = segment.backward_from_loss(&mut cache, &dy)?;
                        segment.sgd_step(&grads, &hp)?;
                        Ok((l, accuracy(&y, &argmax_rows(&targets)), dx))
                    })?;
                    conn.send(WireMessage::tensor(MsgType::GradBA, step, dx))?;
                    (Some(l), Some(acc))
                }
            };
            let link = conn.counters().since(&before);
            state.steps.push(StepLog {
                epoch: 0,
                loss: loss_value,
                accuracy: acc,
                timing: TimingRecord::from_link(step, sw.0, &link),
                link,
            });
            state.step = step;
            if cfg.record_weights {
                state.weights.push(ParamSnapshot::of(&[&segment]));
            }
            step += 1;
        }
    })();
    state.link = conn.counters();
    match result {
        Ok(()) => Ok(ServerOutcome { state, segment, hello }),
        Err(cause) => {
            log::warn!("server session aborted at step {step}: {cause}");
            report_error(conn, step, &cause);
            Err(SessionAbort {
                state: Box::new(state),
                segments: vec![segment],
                cause,
            })
        }
    }
}
