//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits non-zero
//! if any fails. Criterion 3 trains four full-size models and dominates the runtime.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seer_core::dataset::{read_all, DatasetWriter, FeatureVariant, SequenceRecord, Split};
use seer_core::demo::{measure_throughput, run_demo, DemoConfig, Scenario};
use seer_core::eval::{binomial_err, clean, evaluate, Evaluation};
use seer_core::generate::{generate, GenerateConfig};
use seer_core::infer::{detect_conflicts, project_path, AgentPath, CellId, InferConfig, RiskFlag};
use seer_core::planner::{pid_steer, IntentionLabel, PidGains, PidState, PlannerConfig};
use seer_core::rnn::{self, loss, read_model, write_model, CellKind, CellState, RnnConfig, RnnModel};
use seer_core::stream::{connect, FrameMessage, Server, ServerConfig};
use seer_core::vehicle::VehicleState;
use seer_core::world::{World, WorldConfig};
use seer_core::{Error, RoadModel};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------------------

fn perturbed(cell: CellKind, seed: u64) -> RnnModel {
    let cfg = RnnConfig { cell, input_dim: 3, embed_dim: 5, hidden_dim: 8, classes: 5, seq_len: 6, seed, ..RnnConfig::default() };
    let mut m = RnnModel::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    for g in m.params.groups_mut() {
        g.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    m
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let xs: Vec<Array2<f64>> = (0..6).map(|_| Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0))).collect();
    let ys: Vec<Vec<usize>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(0..5)).collect()).collect();
    let mut worst_all = 0.0f64;
    for cell in [CellKind::Lstm, CellKind::Gru] {
        let mut m = perturbed(cell, 5);
        let (_, grads, _) = m.backward(&xs, &ys).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = grads.groups().into_iter().map(|(n, g)| (n, g.to_vec())).collect();
        for (gi, (name, a)) in analytic.iter().enumerate() {
            let mut worst = 0.0f64;
            for (k, &ak) in a.iter().enumerate() {
                let orig = m.params.groups_mut()[gi][k];
                let eps = 1e-5;
                m.params.groups_mut()[gi][k] = orig + eps;
                let lp = m.loss(&xs, &ys).unwrap();
                m.params.groups_mut()[gi][k] = orig - eps;
                let lm = m.loss(&xs, &ys).unwrap();
                m.params.groups_mut()[gi][k] = orig;
                let num = (lp - lm) / (2.0 * eps);
                worst = worst.max((ak - num).abs() / ak.abs().max(num.abs()).max(1e-6));
            }
            if worst >= 1e-4 {
                return Err(format!("{} group {name}: relative error {worst:.2e}", cell.name()));
            }
            worst_all = worst_all.max(worst);
        }
    }
    let took = start.elapsed();
    check(took < Duration::from_secs(60), format!("max relative error {worst_all:.2e} over all groups, {:.1} s", took.as_secs_f64()))
}

fn cell_equations() -> Outcome {
    let cfg = RnnConfig { input_dim: 3, embed_dim: 5, hidden_dim: 4, classes: 5, seq_len: 6, ..RnnConfig::default() };
    let lstm = RnnModel::zeros(RnnConfig { cell: CellKind::Lstm, ..cfg.clone() }).unwrap();
    let prev = CellState::Lstm { h: Array1::zeros(4), c: Array1::ones(4) };
    let CellState::Lstm { h, .. } = lstm.lstm_step(&Array1::zeros(5), &prev).unwrap() else { unreachable!() };
    let want = 0.5 * 0.5f64.tanh();
    let lstm_ok = h.iter().all(|&v| (v - want).abs() < 1e-12 && (v - 0.231059).abs() < 1e-6);

    let gru = RnnModel::zeros(RnnConfig { cell: CellKind::Gru, ..cfg }).unwrap();
    let sp = Array1::from(vec![1.0, -0.4, 2.5, 0.0]);
    let CellState::Gru { s } = gru.gru_step(&Array1::zeros(5), &CellState::Gru { s: sp.clone() }).unwrap() else { unreachable!() };
    let gru_ok = s.iter().zip(&sp).all(|(a, b)| (a - 0.5 * b).abs() < 1e-12);

    let l = loss(&vec![Array2::zeros((3, 5)); 4], &vec![vec![0, 1, 4]; 4]).unwrap();
    let loss_ok = (l - 5f64.ln()).abs() < 1e-9;
    check(lstm_ok && gru_ok && loss_ok, format!("lstm h = {:.6}, gru s = 0.5 s_prev: {gru_ok}, uniform loss = {l:.9}", h[0]))
}

// ---------------------------------------------------------------------------------------

struct Trained {
    lstm_a3_t12: Arc<RnnModel>,
    lstm_a3_t6: Arc<RnnModel>,
}

fn split(records: &[SequenceRecord], split: Split) -> Vec<SequenceRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

fn generate_clean(seq_len: usize) -> (Vec<SequenceRecord>, Vec<SequenceRecord>, Vec<SequenceRecord>) {
    let cfg = GenerateConfig { seq_len, ..GenerateConfig::default() };
    let mut raw: Vec<SequenceRecord> = Vec::new();
    generate(&cfg, &mut raw).unwrap();
    let cleaned = clean(&raw);
    (split(&cleaned, Split::Train), split(&cleaned, Split::Test), raw)
}

fn train_view(cell: CellKind, variant: FeatureVariant, seq_len: usize, train: &[SequenceRecord]) -> RnnModel {
    let view: Vec<SequenceRecord> = train.iter().map(|r| r.project(variant).unwrap()).collect();
    let cfg = RnnConfig { cell, input_dim: variant.dim(), seq_len, epochs: 20, ..RnnConfig::default() };
    rnn::train(&view, &cfg).unwrap().0
}

fn errors_are_binomial(ev: &Evaluation) -> bool {
    ev.metrics.iter().flat_map(|m| [m.precision, m.recall]).flatten().all(|r| (r.err - binomial_err(r.value, r.n)).abs() < 1e-15 && r.n > 0)
}

fn table_trend(raw_out: &mut Vec<SequenceRecord>) -> (Outcome, Option<Trained>) {
    let start = Instant::now();
    let (train, test, raw) = generate_clean(12);
    let (n_train, n_test) = (train.len(), test.len());
    let mut lines = Vec::new();
    let mut ok = n_train == 5000 && n_test == 1000;
    let mut lstm_a3 = None;
    let lane_change_recall = |ev: &Evaluation| {
        let (tp, n) = [IntentionLabel::ChangeLaneRight, IntentionLabel::ChangeLaneLeft]
            .iter()
            .map(|l| (ev.matrix.counts[l.index()][l.index()], ev.matrix.truth_count(l.index())))
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        tp as f64 / n as f64
    };
    for cell in [CellKind::Lstm, CellKind::Gru] {
        let mut recall = [0.0; 2];
        for (vi, variant) in [FeatureVariant::A2, FeatureVariant::A3].into_iter().enumerate() {
            let model = train_view(cell, variant, 12, &train);
            let ev = evaluate(&model, &test).unwrap();
            let lk = &ev.metrics[IntentionLabel::LaneKeep.index()];
            let (p, r) = (lk.precision.unwrap(), lk.recall.unwrap());
            recall[vi] = lane_change_recall(&ev);
            ok &= p.value > 0.95 && r.value > 0.95 && errors_are_binomial(&ev);
            lines.push(format!(
                "{} {:?}: LK P {:.2}±{:.2} R {:.2}±{:.2}, lane-change R {:.2}",
                cell.name(),
                variant,
                100.0 * p.value,
                100.0 * p.err,
                100.0 * r.value,
                100.0 * r.err,
                100.0 * recall[vi]
            ));
            if cell == CellKind::Lstm && variant == FeatureVariant::A3 {
                lstm_a3 = Some(Arc::new(model));
            }
        }
        let gain = 100.0 * (recall[1] - recall[0]);
        ok &= gain >= 3.0;
        lines.push(format!("{} heading gain {gain:+.2} pp", cell.name()));
    }
    *raw_out = raw;
    let detail = format!("{n_train}/{n_test} sequences, {:.0} s; {}", start.elapsed().as_secs_f64(), lines.join("; "));

    let (train6, _, _) = generate_clean(6);
    let t6 = Arc::new(train_view(CellKind::Lstm, FeatureVariant::A3, 6, &train6));
    let trained = lstm_a3.map(|m| Trained { lstm_a3_t12: m, lstm_a3_t6: t6 });
    (check(ok, detail), trained)
}

fn transition_latency(t: Option<&Trained>) -> Outcome {
    let t = t.ok_or("no trained models")?;
    let cfg = DemoConfig::default();
    let run6 = run_demo(t.lstm_a3_t6.clone(), Scenario::LaneChange, &cfg).map_err(|e| e.to_string())?;
    let run12 = run_demo(t.lstm_a3_t12.clone(), Scenario::LaneChange, &cfg).map_err(|e| e.to_string())?;
    let ticks6 = run6.transition_ticks(IntentionLabel::ChangeLaneLeft, 200);
    let ticks12 = run12.transition_ticks(IntentionLabel::ChangeLaneLeft, 200);
    let before = run6.vote_before_onset();
    let manoeuvre = run6.manoeuvre_s();
    let ok =
        before == Some(IntentionLabel::LaneKeep) && ticks6.is_some_and(|k| k <= 5) && manoeuvre.is_some_and(|m| (3.0..=6.0).contains(&m));
    check(
        ok,
        format!("T=6 vote before onset {before:?}, LK->CLL after {ticks6:?} ticks, manoeuvre {manoeuvre:?} s; T=12 reference: {ticks12:?} ticks"),
    )
}

fn cleaning(raw: &[SequenceRecord], t: Option<&Trained>) -> Outcome {
    let dirty = raw.iter().filter(|r| r.labels().any(|l| l == IntentionLabel::CarFollow)).count();
    let cleaned = clean(raw);
    let leaked = cleaned.iter().filter(|r| r.labels().any(|l| l == IntentionLabel::CarFollow)).count();
    let frames: usize = cleaned.iter().map(|r| r.frames.len()).sum();
    // The evaluator must refuse uncleaned input outright.
    let refused = match (t, raw.iter().find(|r| r.labels().any(|l| l == IntentionLabel::CarFollow))) {
        (Some(t), Some(r)) => matches!(evaluate(&t.lstm_a3_t12, std::slice::from_ref(r)), Err(Error::Data(_))),
        _ => false,
    };
    check(
        dirty > 0 && leaked == 0 && refused,
        format!("{dirty} of {} raw sequences contain CarFollow; {leaked} survive cleaning ({frames} frames scanned); evaluator refuses raw input: {refused}", raw.len()),
    )
}

// ---------------------------------------------------------------------------------------

fn controller() -> Outcome {
    let zero = (0..100).all(|k| {
        let pid = PidState { integral: 0.0, prev_error: 0.0 };
        pid_steer(0.0, &PidGains::default(), &pid, 0.01 * (k + 1) as f64).0 == 0.0
    });

    let cfg = WorldConfig::default();
    let road = cfg.road;
    let mut w = World::empty(cfg, 1).unwrap();
    let lane = 0;
    let start = VehicleState { x: 100.0, y: road.lane_center_y(lane) + 1.0, v_lon: 13.0, ..VehicleState::default() };
    let id = w.add_agent(start, true).unwrap();
    let cte = |w: &World| {
        let s = w.agent(id).unwrap().state;
        road.to_lane_frame(s.x, s.y, s.heading).unwrap().d.abs()
    };
    let mut settled_at = None;
    let mut worst_after = 0.0f64;
    for k in 1..=800 {
        w.step().unwrap();
        let e = cte(&w);
        if settled_at.is_none() && e < 0.1 {
            settled_at = Some(k as f64 * 0.01);
        }
        if settled_at.is_some() {
            worst_after = worst_after.max(e);
        }
    }
    let ok = zero && settled_at.is_some_and(|t| t <= 6.0) && worst_after < 0.1;
    check(
        ok,
        format!("from 1 m offset |CTE| < 0.1 m after {settled_at:?} s, stays below (max {worst_after:.4} m, {:.4} m at 8 s); zero error gives zero output: {zero}", cte(&w)),
    )
}

// Independent enumeration: every cell of the road, geometric membership, all pairs.
fn brute_force(paths: &[AgentPath], road: &RoadModel, cfg: &InferConfig) -> Vec<RiskFlag> {
    let interval = |p: &AgentPath, lane: usize, bucket: i64| -> Option<(f64, f64)> {
        let (x0, x1) = (bucket as f64 * cfg.cell_length, (bucket + 1) as f64 * cfg.cell_length);
        let (y0, y1) = (lane as f64 * road.lane_width, (lane + 1) as f64 * road.lane_width);
        let len = p.path.length();
        let samples = (len / cfg.sample_step).ceil() as usize;
        let mut hit: Option<(f64, f64)> = None;
        for k in 0..=samples {
            let at = (k as f64 * cfg.sample_step).min(len);
            let wp = p.path.point_at(at);
            let in_lane = wp.y <= y1 && (wp.y > y0 || (lane == 0 && wp.y >= y0));
            if wp.x >= x0 && wp.x < x1 && in_lane && road.contains(wp.x, wp.y) {
                let t = if p.speed > 1e-6 { (at / p.speed, at / p.speed) } else { (0.0, cfg.horizon_s) };
                hit = Some(hit.map_or(t, |h| (h.0.min(t.0), h.1.max(t.1))));
            }
        }
        hit.map(|h| (h.0 - cfg.time_padding_s, h.1 + cfg.time_padding_s))
    };
    let buckets = (road.road_length / cfg.cell_length).ceil() as i64;
    let mut flags = Vec::new();
    for lane in 0..road.num_lanes() {
        for bucket in 0..=buckets {
            for a in paths {
                for b in paths {
                    if a.agent >= b.agent {
                        continue;
                    }
                    if let (Some(ia), Some(ib)) = (interval(a, lane, bucket), interval(b, lane, bucket)) {
                        let window = (ia.0.max(ib.0), ia.1.min(ib.1));
                        if window.0 <= window.1 {
                            flags.push(RiskFlag { cell: CellId { lane, bucket }, agents: (a.agent, b.agent), window });
                        }
                    }
                }
            }
        }
    }
    flags.sort_by(|x, y| (x.cell, x.agents).cmp(&(y.cell, y.agents)));
    flags
}

fn risk_oracle() -> Outcome {
    let road = RoadModel::default();
    let cfg = InferConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut equal, mut nonempty, mut total_flags) = (0, 0, 0);
    for _ in 0..100 {
        let scene: Vec<AgentPath> = (0..5)
            .map(|i| {
                let lane = rng.random_range(0..road.num_lanes());
                let heading = if road.is_forward(lane) { 0.0 } else { std::f64::consts::PI };
                let v = rng.random_range(0.0..25.0);
                let s = VehicleState {
                    x: rng.random_range(50.0..150.0),
                    y: road.lane_center_y(lane),
                    heading,
                    v_lon: v,
                    ..VehicleState::default()
                };
                let intention = IntentionLabel::from_index(rng.random_range(0..5)).unwrap();
                let p = project_path(intention, &s, &road, &PlannerConfig::default(), cfg.horizon_s).unwrap();
                AgentPath { agent: 10 + i, path: p.path, speed: v }
            })
            .collect();
        let fast = detect_conflicts(&scene, &road, &cfg);
        equal += usize::from(fast == brute_force(&scene, &road, &cfg));
        nonempty += usize::from(!fast.is_empty());
        total_flags += fast.len();
    }
    check(equal == 100 && nonempty > 10, format!("{equal}/100 scenes equal; {nonempty} scenes with flags, {total_flags} flags"))
}

// ---------------------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = GenerateConfig { seq_len: 6, train_sequences: 300, test_sequences: 60, ..GenerateConfig::default() };
    let write = |name: &str| -> Vec<u8> {
        let path = dir.path().join(name);
        let mut w = DatasetWriter::create(&path, cfg.manifest()).unwrap();
        generate(&cfg, &mut w).unwrap();
        w.finish().unwrap();
        std::fs::read(path).unwrap()
    };
    let (a, b) = (write("a.seerseq"), write("b.seerseq"));
    let data_same = a == b;

    let mut direct: Vec<SequenceRecord> = Vec::new();
    generate(&cfg, &mut direct).unwrap();
    let (_, back) = read_all(dir.path().join("a.seerseq")).unwrap();
    let data_roundtrip = back == direct;

    let train: Vec<SequenceRecord> = split(&clean(&direct), Split::Train);
    let rc = RnnConfig { seq_len: 6, hidden_dim: 16, epochs: 2, ..RnnConfig::default() };
    let bytes = |m: &RnnModel| {
        let mut v = Vec::new();
        write_model(m, &mut v).unwrap();
        v
    };
    let m1 = bytes(&rnn::train(&train, &rc).unwrap().0);
    let m2 = bytes(&rnn::train(&train, &rc).unwrap().0);
    let model_same = m1 == m2;
    let model_roundtrip = bytes(&read_model(&m1).unwrap()) == m1;

    let truncated = dir.path().join("t.seerseq");
    std::fs::write(&truncated, &a[..a.len() - 7]).unwrap();
    let mut flipped = a.clone();
    let n = flipped.len();
    flipped[n / 2] ^= 0x40;
    let corrupt = dir.path().join("c.seerseq");
    std::fs::write(&corrupt, &flipped).unwrap();
    let rejected = |r: seer_core::Result<_>| matches!(r, Err(Error::Format { .. } | Error::Data(_)));
    let data_rejected = rejected(read_all(&truncated).map(|_| ())) && rejected(read_all(&corrupt).map(|_| ()));
    let mut bad_model = m1.clone();
    let k = bad_model.len() / 2;
    bad_model[k] ^= 0x01;
    let model_rejected = rejected(read_model(&m1[..m1.len() - 3]).map(|_| ())) && rejected(read_model(&bad_model).map(|_| ()));

    check(
        data_same && data_roundtrip && model_same && model_roundtrip && data_rejected && model_rejected,
        format!(
            "dataset identical {data_same} ({} bytes), roundtrip {data_roundtrip}; model identical {model_same}, roundtrip {model_roundtrip}; corrupt dataset rejected {data_rejected}, corrupt model rejected {model_rejected}",
            a.len()
        ),
    )
}

fn streaming() -> Outcome {
    let cap = 32;
    let server = Server::bind("127.0.0.1:0", ServerConfig { backlog_cap: cap }).map_err(|e| e.to_string())?;
    let (_stalled, _c0) = connect(server.local_addr()).map_err(|e| e.to_string())?;
    let counters: Vec<Arc<AtomicUsize>> = (0..2).map(|_| Arc::new(AtomicUsize::new(0))).collect();
    let readers: Vec<_> = counters
        .iter()
        .map(|seen| {
            let (reader, ctl) = connect(server.local_addr()).unwrap();
            let seen = seen.clone();
            thread::spawn(move || {
                let _ctl = ctl;
                let mut got = Vec::new();
                for m in reader {
                    got.push(m.unwrap().encode());
                    seen.fetch_add(1, Ordering::SeqCst);
                }
                got
            })
        })
        .collect();
    let deadline = Instant::now() + Duration::from_secs(10);
    while server.stats().subscribers < 3 {
        if Instant::now() > deadline {
            return Err("subscribers did not register".into());
        }
        thread::sleep(Duration::from_millis(2));
    }

    let mut world = World::new(WorldConfig::default(), 77).unwrap();
    let mut published = 0usize;
    let mut extra = 0;
    // Keep publishing until the stalled client is dropped, then a little longer.
    while extra < 50 {
        if published > 200_000 {
            return Err("stalled subscriber never disconnected".into());
        }
        world.advance_frame().unwrap();
        server.publish(&FrameMessage::from_world(&world, published as u64));
        published += 1;
        if server.stats().disconnected_slow > 0 {
            extra += 1;
        }
        // Live readers share the core; pace on them so only the stalled one falls behind.
        if published % 8 == 0 {
            while counters.iter().any(|c| c.load(Ordering::SeqCst) < published) {
                if Instant::now() > deadline + Duration::from_secs(60) {
                    return Err("live subscriber stopped reading".into());
                }
                thread::yield_now();
            }
        }
    }
    let stats = server.stats();
    server.shutdown();
    let streams: Vec<Vec<String>> = readers.into_iter().map(|h| h.join().unwrap()).collect();
    let ticks: Vec<u64> = streams[0].iter().map(|l| FrameMessage::decode(l).unwrap().tick).collect();
    let monotone = ticks.windows(2).all(|w| w[1] > w[0]);
    let ok =
        streams[0] == streams[1] && streams[0].len() == published && monotone && stats.disconnected_slow == 1 && stats.max_backlog <= cap;
    check(
        ok,
        format!(
            "{published} frames published, live streams identical {} ({} frames), monotone {monotone}; stalled dropped {}, max backlog {} <= cap {cap}",
            streams[0] == streams[1],
            streams[0].len(),
            stats.disconnected_slow,
            stats.max_backlog
        ),
    )
}

fn throughput(t: Option<&Trained>) -> Outcome {
    let t = t.ok_or("no trained models")?;
    let stats = measure_throughput(t.lstm_a3_t12.clone(), &WorldConfig::default(), 10, 300, 11).map_err(|e| e.to_string())?;
    let mean = stats.mean().unwrap();
    let p95 = stats.percentile(0.95).unwrap();
    check(
        mean < Duration::from_millis(50),
        format!(
            "10 agents, T=12, {} ticks: mean {:.2} ms, p95 {:.2} ms, max {:.2} ms (GPU reference figure: < 10 ms)",
            stats.count(),
            mean.as_secs_f64() * 1e3,
            p95.as_secs_f64() * 1e3,
            stats.max().unwrap().as_secs_f64() * 1e3
        ),
    )
}

fn report(n: usize, name: &str, outcome: Outcome) -> bool {
    match &outcome {
        Ok(d) => println!("PASS {n:>2} {name}: {d}"),
        Err(d) => println!("FAIL {n:>2} {name}: {d}"),
    }
    outcome.is_ok()
}

fn main() {
    let mut ok = true;
    ok &= report(1, "gradient fidelity", gradients());
    ok &= report(2, "cell equations", cell_equations());
    let mut raw = Vec::new();
    let (trend, trained) = table_trend(&mut raw);
    ok &= report(3, "desk-scale accuracy trend", trend);
    ok &= report(4, "transition latency", transition_latency(trained.as_ref()));
    ok &= report(5, "cleaning", cleaning(&raw, trained.as_ref()));
    ok &= report(6, "controller step response", controller());
    ok &= report(7, "risk oracle equivalence", risk_oracle());
    ok &= report(8, "determinism and serialization", determinism());
    ok &= report(9, "streaming", streaming());
    ok &= report(10, "inference throughput", throughput(trained.as_ref()));
    if !ok {
        std::process::exit(1);
    }
}
