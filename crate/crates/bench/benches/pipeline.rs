use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use seer_core::demo::observe;
use seer_core::infer::{InferConfig, InferenceEngine};
use seer_core::rnn::{batch_steps, CellKind, RnnConfig, RnnModel};
use seer_core::vehicle::{step, Controls, VehiclePhysicsParams, VehicleState};
use seer_core::world::{World, WorldConfig};

fn model(cell: CellKind, seq_len: usize) -> RnnModel {
    RnnModel::new(RnnConfig { cell, seq_len, ..RnnConfig::default() }).unwrap()
}

fn simulation(c: &mut Criterion) {
    let p = VehiclePhysicsParams::default();
    let s = VehicleState { v_lon: 13.0, ..VehicleState::default() };
    let ctl = Controls { throttle: 0.4, steer: 0.05, ..Controls::default() };
    c.bench_function("vehicle_step", |b| b.iter(|| step(black_box(&s), &ctl, &p, 0.01)));

    c.bench_function("world_frame_10_agents", |b| {
        b.iter_batched_ref(
            || World::new(WorldConfig { num_agents: 10, ..WorldConfig::default() }, 7).unwrap(),
            |w| w.advance_frame().unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn recurrent(c: &mut Criterion) {
    let batch = 64;
    let seq_len = 12;
    let data: Vec<Vec<f64>> = (0..batch).map(|i| (0..seq_len * 3).map(|k| ((i * 31 + k) as f64 * 0.37).sin()).collect()).collect();
    let seqs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
    let xs = batch_steps(&seqs, seq_len, 3);
    let labels: Vec<Vec<usize>> = (0..seq_len).map(|t| (0..batch).map(|b| (t + b) % 5).collect()).collect();
    for cell in [CellKind::Lstm, CellKind::Gru] {
        let m = model(cell, seq_len);
        c.bench_function(&format!("{}_forward_b64_t12", cell.name()), |b| b.iter(|| m.predict(black_box(&xs)).unwrap()));
        c.bench_function(&format!("{}_backward_b64_t12", cell.name()), |b| b.iter(|| m.backward(black_box(&xs), &labels).unwrap()));
    }
}

fn inference(c: &mut Criterion) {
    let cfg = WorldConfig { num_agents: 10, ..WorldConfig::default() };
    let mut world = World::new(cfg.clone(), 3).unwrap();
    let mut ticks = Vec::new();
    for k in 0..40 {
        world.advance_frame().unwrap();
        ticks.push(observe(&world, k));
    }
    let m = Arc::new(model(CellKind::Lstm, 12));
    c.bench_function("inference_tick_10_agents", |b| {
        b.iter_batched_ref(
            || {
                let mut e = InferenceEngine::new(m.clone(), cfg.road, cfg.planner, InferConfig::default()).unwrap();
                for t in &ticks[..39] {
                    e.process(t).unwrap();
                }
                e
            },
            |e| e.process(&ticks[39]).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, simulation, recurrent, inference);
criterion_main!(benches);
