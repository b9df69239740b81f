//! Scripted live runs: a single lane change, a merge into an occupied lane, and a
//! throughput measurement over ordinary traffic.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{InferConfig, InferenceEngine, LatencyStats, Observation, TickInput, TickResult};
use crate::planner::IntentionLabel;
use crate::render::{render_svg, Snapshot, VehicleMark};
use crate::rnn::RnnModel;
use crate::vehicle::VehicleState;
use crate::world::{World, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// One agent keeps lane, then changes left.
    LaneChange,
    /// One agent changes left into a lane where a second agent drives alongside.
    Conflict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoConfig {
    pub world: WorldConfig,
    pub infer: InferConfig,
    pub speed: f64,
    /// Lane keeping before the manoeuvre is commanded.
    pub lead_s: f64,
    pub duration_s: f64,
    /// SVG frames to emit, evenly spaced over the run.
    pub snapshots: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        DemoConfig {
            world: WorldConfig::default(),
            infer: InferConfig::default(),
            speed: 13.0,
            lead_s: 4.0,
            duration_s: 12.0,
            snapshots: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoTick {
    pub time_ms: u64,
    /// Raw label of each agent, by id.
    pub truth: Vec<(u32, IntentionLabel)>,
    pub result: TickResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoRun {
    pub scenario: Scenario,
    /// Agent performing the lane change.
    pub actor: u32,
    pub onset_ms: u64,
    /// First time the actor is back to LaneKeep after the onset.
    pub completed_ms: Option<u64>,
    pub ticks: Vec<DemoTick>,
    pub svgs: Vec<String>,
}

impl DemoRun {
    /// First voted intention of the actor at or after the onset that differs from LaneKeep.
    pub fn transition(&self) -> Option<(u64, IntentionLabel)> {
        self.ticks.iter().filter(|t| t.time_ms > self.onset_ms).find_map(|t| {
            let p = t.result.predictions.iter().find(|p| p.agent == self.actor)?;
            let v = IntentionLabel::from_index(p.vote)?;
            (v != IntentionLabel::LaneKeep).then_some((t.time_ms, v))
        })
    }

    /// Readout ticks from the onset until the vote first becomes `label`.
    pub fn transition_ticks(&self, label: IntentionLabel, period_ms: u64) -> Option<u64> {
        self.ticks
            .iter()
            .filter(|t| t.time_ms > self.onset_ms)
            .find(|t| t.result.predictions.iter().any(|p| p.agent == self.actor && p.vote == label.index()))
            .map(|t| (t.time_ms - self.onset_ms) / period_ms)
    }

    /// Actor's vote just before the onset.
    pub fn vote_before_onset(&self) -> Option<IntentionLabel> {
        let t = self.ticks.iter().rev().find(|t| t.time_ms <= self.onset_ms)?;
        let p = t.result.predictions.iter().find(|p| p.agent == self.actor)?;
        IntentionLabel::from_index(p.vote)
    }

    pub fn manoeuvre_s(&self) -> Option<f64> {
        self.completed_ms.map(|c| (c - self.onset_ms) as f64 / 1000.0)
    }

    pub fn flag_count(&self) -> usize {
        self.ticks.iter().map(|t| t.result.flags.len()).sum()
    }

    /// One JSON object per tick.
    pub fn log_ndjson(&self) -> String {
        let mut out = String::new();
        for t in &self.ticks {
            out.push_str(&serde_json::to_string(t).expect("tick serialises"));
            out.push('\n');
        }
        out
    }
}

/// Snapshot of every agent in `world` as engine input.
pub fn observe(world: &World, tick: u64) -> TickInput {
    TickInput {
        tick,
        time_ms: world.time_ms(),
        observations: world.agents().iter().map(|a| Observation { agent: a.id, state: a.state }).collect(),
    }
}

pub fn run_demo(model: Arc<RnnModel>, scenario: Scenario, cfg: &DemoConfig) -> Result<DemoRun> {
    let road = cfg.world.road;
    let mut world = World::empty(cfg.world.clone(), 1)?;
    let at = |lane: usize, x: f64| VehicleState { x, y: road.lane_center_y(lane), v_lon: cfg.speed, ..VehicleState::default() };
    let actor = world.add_agent(at(0, 100.0), true)?;
    if scenario == Scenario::Conflict {
        // Alongside, slightly ahead, in the lane the actor will move into.
        world.add_agent(at(1, 105.0), true)?;
    }
    let mut engine = InferenceEngine::new(model, road, cfg.world.planner, cfg.infer)?;
    let period = cfg.world.frame_period_ms();
    let total = (cfg.duration_s * 1000.0 / period as f64).round() as u64;
    let lead = (cfg.lead_s * 1000.0 / period as f64).round() as u64;
    if lead >= total {
        return Err(Error::config("lead_s", "must be shorter than duration_s"));
    }
    let snap_every = if cfg.snapshots > 0 { (total / cfg.snapshots as u64).max(1) } else { u64::MAX };

    let mut ticks = Vec::with_capacity(total as usize);
    let mut svgs = Vec::new();
    let mut onset_ms = 0;
    let mut completed_ms = None;
    for k in 0..total {
        if k == lead {
            world.set_intention(actor, IntentionLabel::ChangeLaneLeft)?;
            onset_ms = world.time_ms();
        }
        world.advance_frame()?;
        let result = engine.process(&observe(&world, k))?;
        let truth: Vec<(u32, IntentionLabel)> = world.agents().iter().map(|a| (a.id, a.label)).collect();
        if k >= lead && completed_ms.is_none() {
            let label = world.agent(actor).map(|a| a.label);
            if label == Some(IntentionLabel::LaneKeep) {
                completed_ms = Some(world.time_ms());
            }
        }
        if svgs.len() < cfg.snapshots && k % snap_every == snap_every - 1 {
            let vehicles = world
                .agents()
                .iter()
                .map(|a| {
                    let p = result.predictions.iter().find(|p| p.agent == a.id);
                    VehicleMark {
                        id: a.id,
                        state: a.state,
                        vote: p.and_then(|p| IntentionLabel::from_index(p.vote)),
                        path: p.map(|p| p.path.clone()).unwrap_or_default(),
                    }
                })
                .collect();
            let x = world.agent(actor).map(|a| a.state.x).unwrap_or(0.0);
            let snap = Snapshot { time_ms: world.time_ms(), vehicles, flags: result.flags.clone() };
            svgs.push(render_svg(&road, &snap, x - 30.0, x + 120.0, cfg.infer.cell_length));
        }
        ticks.push(DemoTick { time_ms: world.time_ms(), truth, result });
    }
    Ok(DemoRun { scenario, actor, onset_ms, completed_ms, ticks, svgs })
}

/// Per-tick engine latency over ordinary traffic of `agents` vehicles.
pub fn measure_throughput(model: Arc<RnnModel>, world_cfg: &WorldConfig, agents: usize, ticks: u64, seed: u64) -> Result<LatencyStats> {
    let cfg = WorldConfig { num_agents: agents, ..world_cfg.clone() };
    let mut world = World::new(cfg.clone(), seed)?;
    let mut engine = InferenceEngine::new(model, cfg.road, cfg.planner, InferConfig::default())?;
    for k in 0..ticks {
        world.advance_frame()?;
        engine.process(&observe(&world, k))?;
    }
    Ok(engine.latency().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnn::{CellKind, RnnConfig};

    fn model() -> Arc<RnnModel> {
        let cfg =
            RnnConfig { cell: CellKind::Lstm, input_dim: 3, hidden_dim: 8, embed_dim: 4, seq_len: 6, seed: 1, ..RnnConfig::default() };
        Arc::new(RnnModel::new(cfg).unwrap())
    }

    #[test]
    fn lane_change_is_completed_and_logged() {
        let cfg = DemoConfig { snapshots: 4, ..DemoConfig::default() };
        let run = run_demo(model(), Scenario::LaneChange, &cfg).unwrap();
        assert_eq!(run.ticks.len(), 60);
        assert_eq!(run.svgs.len(), 4);
        assert_eq!(run.onset_ms, 4000);
        let m = run.manoeuvre_s().unwrap();
        assert!((3.0..=6.0).contains(&m), "{m}");
        assert!(run.ticks.iter().any(|t| t.truth[0].1 == IntentionLabel::ChangeLaneLeft));
        assert_eq!(run.log_ndjson().lines().count(), 60);
        // Warm-up: no prediction until the window is full.
        assert!(run.ticks[..5].iter().all(|t| t.result.predictions.is_empty()));
        assert!(run.ticks[5..].iter().all(|t| t.result.predictions.len() == 1));
    }

    #[test]
    fn conflict_scene_has_two_agents() {
        let run = run_demo(model(), Scenario::Conflict, &DemoConfig::default()).unwrap();
        assert!(run.ticks.iter().all(|t| t.truth.len() == 2));
    }

    #[test]
    fn throughput_is_recorded_per_tick() {
        let stats = measure_throughput(model(), &WorldConfig::default(), 10, 20, 3).unwrap();
        assert_eq!(stats.count(), 20);
    }
}
