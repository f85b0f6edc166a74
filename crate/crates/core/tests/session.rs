use std::sync::mpsc;
use std::time::Duration;

use splitlearn::harness::{gen_synthetic, loopback_transport, Dataset, Fidelity, LinkModel};
use splitlearn::runtime::{
    client_step_double, run_client, run_monolithic, server_session, simulate_session, ClientOptions, ParamSnapshot,
    ServerConfig,
};
use splitlearn::wire::{Hello, MsgType, Payload, WireMessage};
use splitlearn::{Error, HyperParams, LinkCounters, Role, SplitMode, SplitPlan, Tensor, Transport};

const MLP: &str = "name = mlp\ninput = 4\nloss = cross_entropy\ncuts = 1, 3\nlayers:\n\
    dense units=8 activation=relu\ndense units=8 activation=relu\n\
    dense units=8 activation=relu\ndense units=3 activation=softmax\n";

fn mlp() -> SplitPlan {
    SplitPlan::parse(MLP).unwrap()
}

fn blobs(n: usize) -> Dataset {
    gen_synthetic(4, n, &[4], 3).unwrap()
}

fn opts(steps: usize, batch: usize) -> ClientOptions {
    ClientOptions {
        hp: HyperParams::new(0.05, batch).unwrap(),
        seed: 9,
        steps,
        record_weights: false,
    }
}

/// Keeps a copy of every frame passing through.
struct Recorder<T> {
    inner: T,
    sent: Vec<WireMessage>,
    received: Vec<WireMessage>,
}

impl<T: Transport> Recorder<T> {
    fn new(inner: T) -> Self {
        Self {
            inner,
            sent: Vec::new(),
            received: Vec::new(),
        }
    }
}

impl<T: Transport> Transport for Recorder<T> {
    fn send(&mut self, msg: WireMessage) -> splitlearn::Result<()> {
        self.sent.push(msg.clone());
        self.inner.send(msg)
    }
    fn recv(&mut self) -> splitlearn::Result<WireMessage> {
        let m = self.inner.recv()?;
        self.received.push(m.clone());
        Ok(m)
    }
    fn counters(&self) -> LinkCounters {
        self.inner.counters()
    }
}

fn server_cfg(plan: &SplitPlan) -> ServerConfig {
    ServerConfig {
        plan: plan.clone(),
        seed: 9,
        record_weights: false,
    }
}

#[test]
fn double_split_step_is_two_sends_and_two_receives() {
    let plan = mlp().validate().unwrap();
    let (c, mut s) = loopback_transport(LinkModel::ideal(), Fidelity::Exact64);
    let cfg = server_cfg(&plan.plan);
    let server = std::thread::spawn(move || server_session(&mut s, &cfg).map(|o| o.state.steps.len()));
    let mut rec = Recorder::new(c);
    let out = run_client(&mut rec, &plan, &blobs(64), &opts(5, 8)).unwrap();
    assert_eq!(server.join().unwrap().unwrap(), 5);
    for log in &out.state.steps {
        let l = &log.link;
        assert_eq!((l.frames_sent, l.frames_received), (2, 2));
        assert_eq!((l.boundary_frames_sent, l.boundary_frames_received), (2, 2));
        // 8 samples × 8 units × 4 bytes, four times.
        assert_eq!(l.payload_bytes_sent + l.payload_bytes_received, 4 * 8 * 8 * 4);
    }
    let kinds: Vec<MsgType> = rec.sent.iter().map(|m| m.kind).collect();
    assert_eq!(kinds[0], MsgType::Hello);
    assert_eq!(kinds[1..3], [MsgType::ActAB, MsgType::GradCB]);
    assert_eq!(*kinds.last().unwrap(), MsgType::Bye);
    let step_ids: Vec<u64> = rec.received.iter().filter(|m| m.kind == MsgType::GradBA).map(|m| m.step_id).collect();
    assert_eq!(step_ids, vec![1, 2, 3, 4, 5]);
    assert_eq!(out.state.step, 5);
}

#[test]
fn single_split_step_ships_labels_once() {
    let plan = mlp().for_mode(SplitMode::SingleSplit).unwrap().validate().unwrap();
    let (c, s) = simulate_session(&plan, &blobs(64), &opts(4, 8), LinkModel::ideal(), Fidelity::Exact64).unwrap();
    for log in &c.state.steps {
        let l = &log.link;
        assert_eq!(l.boundary_frames_sent + l.boundary_frames_received, 2);
        assert_eq!(l.label_frames_sent, 1);
        assert_eq!(log.loss, None);
    }
    assert!(s.state.steps.iter().all(|l| l.loss.is_some()));
    assert_eq!(s.segment.role(), Role::C);
}

#[test]
fn identity_middle_segment_echoes_activations() {
    // Flatten on a flat input changes nothing.
    let plan = SplitPlan::parse(
        "name = echo\ninput = 4\nloss = mse\ncuts = 1, 2\nlayers:\n\
         dense units=5 activation=relu\nflatten\ndense units=3 activation=identity\n",
    )
    .unwrap()
    .validate()
    .unwrap();
    let (c, s) = loopback_transport(LinkModel::ideal(), Fidelity::Wire32);
    let cfg = server_cfg(&plan.plan);
    let server = std::thread::spawn(move || {
        let mut rec = Recorder::new(s);
        let r = server_session(&mut rec, &cfg).map(|_| ());
        (r, rec.sent, rec.received)
    });
    let d = gen_synthetic(1, 16, &[4], 3).unwrap();
    run_client(&mut { c }, &plan, &d, &opts(2, 4)).unwrap();
    let (r, sent, received) = server.join().unwrap();
    r.unwrap();
    let ab: Vec<_> = received.iter().filter(|m| m.kind == MsgType::ActAB).collect();
    let bc: Vec<_> = sent.iter().filter(|m| m.kind == MsgType::ActBC).collect();
    assert_eq!(ab.len(), 2);
    for (a, b) in ab.iter().zip(&bc) {
        assert_eq!(a.payload, b.payload);
    }
}

#[test]
fn identity_first_segment_sends_raw_inputs() {
    let plan = SplitPlan::parse(
        "name = raw\ninput = 4\nloss = cross_entropy\ncuts = 1\nlayers:\n\
         flatten\ndense units=3 activation=softmax\n",
    )
    .unwrap()
    .validate()
    .unwrap();
    let d = blobs(8);
    let (c, mut s) = loopback_transport(LinkModel::ideal(), Fidelity::Exact64);
    let cfg = server_cfg(&plan.plan);
    let server = std::thread::spawn(move || server_session(&mut s, &cfg).map(|_| ()));
    let mut rec = Recorder::new(c);
    run_client(&mut rec, &plan, &d, &opts(1, 8)).unwrap();
    server.join().unwrap().unwrap();
    let act = rec.sent.iter().find(|m| m.kind == MsgType::ActAB).unwrap();
    assert_eq!(act.payload, Payload::Tensor(d.inputs.clone()));
}

#[test]
fn zero_gradient_batch_changes_nothing() {
    let plan = SplitPlan::parse(
        "name = z\ninput = 4\nloss = mse\ncuts = 1, 2\nlayers:\n\
         dense units=5 activation=relu\ndense units=5 activation=relu\ndense units=3 activation=identity\n",
    )
    .unwrap()
    .validate()
    .unwrap();
    let d = blobs(4);
    let seg = |r| plan.segment(r).unwrap().build(9).unwrap();
    let (mut a, b, mut c) = (seg(Role::A), seg(Role::B), seg(Role::C));
    let pred = c.predict(&b.predict(&a.predict(&d.inputs).unwrap()).unwrap()).unwrap();
    let mut batch = d.step_batch(0, 4).unwrap();
    batch.targets = pred;
    let before = ParamSnapshot::of(&[&a, &c]);

    let (mut ce, mut se) = loopback_transport(LinkModel::ideal(), Fidelity::Exact64);
    let hp = HyperParams::new(0.5, 4).unwrap();
    let server = std::thread::spawn(move || {
        let mut b = b;
        let before = ParamSnapshot::of(&[&b]);
        // Play the server side by hand for one step.
        let x = se.recv().unwrap().into_tensor().unwrap();
        let (y, mut cache) = b.forward(&x).unwrap();
        se.send(WireMessage::tensor(MsgType::ActBC, 1, y)).unwrap();
        let g = se.recv().unwrap().into_tensor().unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let (grads, dx) =
            splitlearn::auxiliary_backward(&b, &mut cache, &splitlearn::BoundaryGradient::new(g, 1)).unwrap();
        b.sgd_step(&grads, &hp).unwrap();
        se.send(WireMessage::tensor(MsgType::GradBA, 1, dx)).unwrap();
        assert_eq!(before, ParamSnapshot::of(&[&b]));
    });
    let log = client_step_double(&mut ce, 1, &batch, &mut a, &mut c, plan.plan.loss, &hp).unwrap();
    server.join().unwrap();
    assert_eq!(log.loss, Some(0.0));
    assert_eq!(before, ParamSnapshot::of(&[&a, &c]));
}

/// Runs `f` on a thread and fails if it takes longer than `limit`.
fn within<R: Send + 'static>(limit: Duration, f: impl FnOnce() -> R + Send + 'static) -> R {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || tx.send(f()).unwrap());
    rx.recv_timeout(limit).expect("deadlocked")
}

#[test]
fn bye_mid_step_ends_server_with_diagnostic() {
    let plan = mlp();
    let err = within(Duration::from_secs(10), move || {
        let (mut c, mut s) = loopback_transport(LinkModel::ideal(), Fidelity::Exact64);
        let cfg = server_cfg(&plan);
        let server = std::thread::spawn(move || server_session(&mut s, &cfg));
        let hello = Hello {
            plan_hash: plan.hash(),
            mode: SplitMode::DoubleSplit,
            seed: 9,
            lr: 0.1,
            batch_size: 2,
        };
        c.send(WireMessage {
            kind: MsgType::Hello,
            step_id: 0,
            payload: Payload::Control(hello.encode()),
        })
        .unwrap();
        assert_eq!(c.recv().unwrap().kind, MsgType::PlanAck);
        c.send(WireMessage::tensor(MsgType::ActAB, 1, Tensor::zeros(&[2, 8]))).unwrap();
        assert_eq!(c.recv().unwrap().kind, MsgType::ActBC);
        c.send(WireMessage::control(MsgType::Bye, 1)).unwrap();
        let abort = server.join().unwrap().unwrap_err();
        // The server tells the client why before closing.
        assert_eq!(c.recv().unwrap().kind, MsgType::Error);
        abort
    });
    assert!(matches!(err.cause, Error::Desync(ref m) if m.contains("BYE")), "{err}");
    assert_eq!(err.state.step, 0);
    assert_eq!(err.segments.len(), 1);
}

#[test]
fn plan_mismatch_aborts_handshake() {
    let plan = mlp().validate().unwrap();
    let other = mlp().with_cuts(&[2, 3]);
    let (mut c, mut s) = loopback_transport(LinkModel::ideal(), Fidelity::Exact64);
    let cfg = server_cfg(&other);
    let server = std::thread::spawn(move || server_session(&mut s, &cfg));
    let client = run_client(&mut c, &plan, &blobs(16), &opts(1, 4)).unwrap_err();
    let server = server.join().unwrap().unwrap_err();
    assert!(server.cause.to_string().contains("hash"), "{}", server.cause);
    assert!(matches!(client.cause, Error::Remote(ref m) if m.contains("hash")), "{}", client.cause);
    assert_eq!(client.state.step, 0);
}

#[test]
fn seed_mismatch_aborts_handshake() {
    let plan = mlp().validate().unwrap();
    let (mut c, mut s) = loopback_transport(LinkModel::ideal(), Fidelity::Exact64);
    let mut cfg = server_cfg(&plan.plan);
    cfg.seed = 10;
    let server = std::thread::spawn(move || server_session(&mut s, &cfg));
    let client = run_client(&mut c, &plan, &blobs(16), &opts(1, 4)).unwrap_err();
    assert!(server.join().unwrap().is_err());
    assert!(client.cause.to_string().contains("seed"));
}

#[test]
fn skewed_step_id_is_a_desync() {
    let plan = mlp();
    let (mut c, mut s) = loopback_transport(LinkModel::ideal(), Fidelity::Exact64);
    let cfg = server_cfg(&plan);
    let server = std::thread::spawn(move || server_session(&mut s, &cfg));
    let hello = Hello {
        plan_hash: plan.hash(),
        mode: SplitMode::DoubleSplit,
        seed: 9,
        lr: 0.1,
        batch_size: 2,
    };
    c.send(WireMessage {
        kind: MsgType::Hello,
        step_id: 0,
        payload: Payload::Control(hello.encode()),
    })
    .unwrap();
    c.recv().unwrap();
    c.send(WireMessage::tensor(MsgType::ActAB, 2, Tensor::zeros(&[2, 8]))).unwrap();
    let abort = server.join().unwrap().unwrap_err();
    assert!(matches!(abort.cause, Error::Desync(_)), "{}", abort.cause);
}

#[test]
fn double_split_server_refuses_labels() {
    let plan = mlp();
    let (mut c, mut s) = loopback_transport(LinkModel::ideal(), Fidelity::Exact64);
    let cfg = server_cfg(&plan);
    let server = std::thread::spawn(move || server_session(&mut s, &cfg));
    let hello = Hello {
        plan_hash: plan.hash(),
        mode: SplitMode::DoubleSplit,
        seed: 9,
        lr: 0.1,
        batch_size: 2,
    };
    c.send(WireMessage {
        kind: MsgType::Hello,
        step_id: 0,
        payload: Payload::Control(hello.encode()),
    })
    .unwrap();
    c.recv().unwrap();
    c.send(WireMessage::tensor(MsgType::ActAB, 1, Tensor::zeros(&[2, 8]))).unwrap();
    c.recv().unwrap();
    c.send(WireMessage::tensor(MsgType::Labels, 1, Tensor::zeros(&[2, 3]))).unwrap();
    assert!(matches!(server.join().unwrap().unwrap_err().cause, Error::Desync(_)));
}

#[test]
fn wrong_boundary_shape_is_a_desync() {
    let plan = mlp();
    let (mut c, mut s) = loopback_transport(LinkModel::ideal(), Fidelity::Exact64);
    let cfg = server_cfg(&plan);
    let server = std::thread::spawn(move || server_session(&mut s, &cfg));
    let hello = Hello {
        plan_hash: plan.hash(),
        mode: SplitMode::DoubleSplit,
        seed: 9,
        lr: 0.1,
        batch_size: 2,
    };
    c.send(WireMessage {
        kind: MsgType::Hello,
        step_id: 0,
        payload: Payload::Control(hello.encode()),
    })
    .unwrap();
    c.recv().unwrap();
    c.send(WireMessage::tensor(MsgType::ActAB, 1, Tensor::zeros(&[2, 7]))).unwrap();
    let abort = server.join().unwrap().unwrap_err();
    assert!(abort.cause.to_string().contains("shape"));
}

#[test]
fn connection_loss_keeps_client_state() {
    let plan = mlp().validate().unwrap();
    let (mut c, mut s) = loopback_transport(LinkModel::ideal(), Fidelity::Exact64);
    let cfg = server_cfg(&plan.plan);
    // A server that serves the handshake and two steps, then vanishes.
    let server = std::thread::spawn(move || {
        let m = s.recv().unwrap();
        assert_eq!(m.kind, MsgType::Hello);
        let vp = cfg.plan.validate().unwrap();
        let mut b = vp.segment(Role::B).unwrap().build(9).unwrap();
        s.send(WireMessage::control(MsgType::PlanAck, 0)).unwrap();
        let hp = HyperParams::new(0.05, 4).unwrap();
        for step in 1..=2 {
            let x = s.recv().unwrap().into_tensor().unwrap();
            let (y, mut cache) = b.forward(&x).unwrap();
            s.send(WireMessage::tensor(MsgType::ActBC, step, y)).unwrap();
            let g = s.recv().unwrap().into_tensor().unwrap();
            let (grads, dx) =
                splitlearn::auxiliary_backward(&b, &mut cache, &splitlearn::BoundaryGradient::new(g, step)).unwrap();
            b.sgd_step(&grads, &hp).unwrap();
            s.send(WireMessage::tensor(MsgType::GradBA, step, dx)).unwrap();
        }
        let _ = s.recv();
    });
    let abort = within(Duration::from_secs(10), move || {
        run_client(&mut c, &plan, &blobs(64), &opts(10, 4)).unwrap_err()
    });
    server.join().unwrap();
    assert!(matches!(abort.cause, Error::Disconnected), "{}", abort.cause);
    assert_eq!(abort.state.step, 2);
    assert_eq!(abort.state.steps.len(), 2);
    assert_eq!(abort.segments.len(), 2);
}

#[test]
fn runs_are_bitwise_deterministic() {
    let plan = SplitPlan::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../plans/cnn6.plan"))
        .unwrap()
        .validate()
        .unwrap();
    let d = gen_synthetic(3, 32, &[8, 8, 1], 3).unwrap();
    let run = || {
        let mut o = opts(6, 8);
        o.record_weights = true;
        let (c, s) = simulate_session(&plan, &d, &o, LinkModel::wan(), Fidelity::Wire32).unwrap();
        let losses: Vec<_> = c.state.steps.iter().map(|l| l.loss).collect();
        let bytes: Vec<_> = c.state.steps.iter().map(|l| l.timing.bytes_sent).collect();
        (losses, bytes, c.state.weights, s.state.weights)
    };
    assert_eq!(run(), run());
}

#[test]
fn simulated_totals_add_up() {
    let plan = mlp().validate().unwrap();
    let link = LinkModel::from_ms_mbps(5.0, 10.0).unwrap();
    let (c, s) = simulate_session(&plan, &blobs(32), &opts(4, 8), link, Fidelity::Wire32).unwrap();
    let merged = splitlearn::runtime::merge_server(&c.state, &s.state);
    for log in &merged.steps {
        let t = &log.timing;
        assert_eq!(t.total_ns, t.compute_ns + t.serialize_ns + t.transfer_ns);
        // Four frames, 5 ms each, plus bytes over 10 Mbit/s.
        assert!(t.transfer_ns >= 20_000_000);
    }
}

#[test]
fn monolithic_loss_falls_on_separable_blobs() {
    let plan = mlp();
    let d = gen_synthetic_sep();
    let hp = HyperParams::new(0.02, 16).unwrap();
    let (state, _) = run_monolithic(&plan, &d, &hp, 1, 200, false).unwrap();
    let losses: Vec<f64> = state.steps.iter().map(|s| s.loss.unwrap()).collect();
    // Over the last 80% of steps, compare consecutive epoch means.
    let per_epoch = d.steps_per_epoch(16);
    let means: Vec<f64> = losses.chunks(per_epoch).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let warm = means.len() / 5;
    for w in means[warm..].windows(2) {
        assert!(w[1] <= w[0], "epoch mean loss rose: {means:?}");
    }
}

fn gen_synthetic_sep() -> Dataset {
    splitlearn::harness::gen_synthetic_with(8, 160, &[4], 3, 6.0).unwrap()
}
