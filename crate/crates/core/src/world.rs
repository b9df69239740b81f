//! Multi-agent traffic world: every agent runs the intention schedule, plans paths and
//! tracks them with the PID controller; the world samples labelled frames at the
//! readout rate.
//!
//! The simulation advances in integer ticks of `dt_ms` so timestamps never drift.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{extract_features, FeatureVariant, SimFrame, Split};
use crate::error::{Error, Result};
use crate::planner::{
    lead_vehicle, pid_control, plan_path_with_stop, stop_trigger, IntentionLabel, IntentionSchedule, LightState, Path, PidGains, PidState,
    PlannerConfig, Scene, ScheduleConfig, SpeedGains, TrafficLight,
};
use crate::road::RoadModel;
use crate::vehicle::{self, spawn_traffic, Controls, SpawnConfig, VehiclePhysicsParams, VehicleState};

/// Sensor noise on recorded features and process noise on steering.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation of the lateral position reading, metres.
    pub lateral_sd: f64,
    /// Standard deviation of the longitudinal position reading, metres.
    pub longitudinal_sd: f64,
    /// Standard deviation of the heading reading, radians.
    pub heading_sd: f64,
    /// Standard deviation of the steering command, in normalised steer units.
    pub steer_sd: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { lateral_sd: 0.0, longitudinal_sd: 0.0, heading_sd: 0.0, steer_sd: 0.0 }
    }
}

/// Fixed-time signal at `stop_line_s` of the forward lanes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LightCycle {
    pub stop_line_s: f64,
    pub green_s: f64,
    pub red_s: f64,
    pub offset_s: f64,
}

impl Default for LightCycle {
    fn default() -> Self {
        LightCycle { stop_line_s: 500.0, green_s: 25.0, red_s: 15.0, offset_s: 0.0 }
    }
}

impl LightCycle {
    pub fn state_at(&self, t_s: f64) -> LightState {
        let period = self.green_s + self.red_s;
        if (t_s + self.offset_s).rem_euclid(period) < self.green_s {
            LightState::Green
        } else {
            LightState::Red
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub scene: Scene,
    pub road: RoadModel,
    pub physics: VehiclePhysicsParams,
    pub planner: PlannerConfig,
    pub pid: PidGains,
    pub speed: SpeedGains,
    pub schedule: ScheduleConfig,
    pub spawn: SpawnConfig,
    pub num_agents: usize,
    pub dt_ms: u64,
    /// Readout period in units of 10 ms.
    pub log_frequency: u64,
    pub decision_period_ms: u64,
    pub replan_period_ms: u64,
    /// Decelerate events are skipped below this speed.
    pub min_cruise_speed: f64,
    /// Agents leave the world this far before the end of the road.
    pub exit_margin: f64,
    /// Free distance behind and ahead in the target lane required to start a lane change.
    pub lane_change_clearance: [f64; 2],
    /// Free distance ahead of the entrance required to spawn a replacement agent.
    pub entry_clearance: f64,
    pub light: Option<LightCycle>,
    pub noise: NoiseConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            scene: Scene::Highway,
            road: RoadModel::default(),
            physics: VehiclePhysicsParams::default(),
            planner: PlannerConfig::default(),
            pid: PidGains::default(),
            speed: SpeedGains::default(),
            schedule: ScheduleConfig { mean_dwell_s: 15.0, weights: [0.48, 0.48, 0.02, 0.02], ..ScheduleConfig::default() },
            spawn: SpawnConfig { speed_min: 12.0, speed_max: 14.0, ..SpawnConfig::default() },
            num_agents: 8,
            dt_ms: 10,
            log_frequency: 20,
            decision_period_ms: 100,
            replan_period_ms: 500,
            min_cruise_speed: 8.0,
            exit_margin: 40.0,
            lane_change_clearance: [15.0, 25.0],
            entry_clearance: 40.0,
            light: None,
            noise: NoiseConfig::default(),
        }
    }
}

impl WorldConfig {
    /// Two lanes each way with a signalised stop line half-way.
    pub fn urban() -> Self {
        WorldConfig {
            scene: Scene::Urban,
            road: RoadModel { num_lanes_right: 2, num_lanes_left: 2, ..RoadModel::default() },
            light: Some(LightCycle::default()),
            num_agents: 6,
            ..WorldConfig::default()
        }
    }

    pub fn for_scene(scene: Scene) -> Self {
        match scene {
            Scene::Highway => WorldConfig::default(),
            Scene::Urban => WorldConfig::urban(),
        }
    }

    pub fn frame_period_ms(&self) -> u64 {
        self.log_frequency * 10
    }

    pub fn validate(&self) -> Result<()> {
        self.road.validate()?;
        self.physics.validate()?;
        self.pid.validate()?;
        if self.num_agents == 0 {
            return Err(Error::config("num_agents", "must be at least 1"));
        }
        if self.dt_ms == 0 || self.dt_ms > 100 {
            return Err(Error::config("dt_ms", "must be in 1..=100"));
        }
        if self.log_frequency == 0 || self.frame_period_ms() % self.dt_ms != 0 {
            return Err(Error::config("log_frequency", "readout period must be a positive multiple of the sim step"));
        }
        for (name, v) in [("decision_period_ms", self.decision_period_ms), ("replan_period_ms", self.replan_period_ms)] {
            if v == 0 || v % self.dt_ms != 0 {
                return Err(Error::config(name, "must be a positive multiple of dt_ms"));
            }
        }
        if let Some(l) = &self.light {
            if !(l.green_s > 0.0 && l.red_s > 0.0) || !(0.0..=self.road.road_length).contains(&l.stop_line_s) {
                return Err(Error::config("light", "needs positive phases and a stop line on the road"));
            }
        }
        let n = self.noise;
        for (name, v) in
            [("lateral_sd", n.lateral_sd), ("longitudinal_sd", n.longitudinal_sd), ("heading_sd", n.heading_sd), ("steer_sd", n.steer_sd)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub id: u32,
    pub state: VehicleState,
    /// Raw label: the intention the agent is executing right now.
    pub label: IntentionLabel,
    pub path: Path,
    /// Lane a lane change is heading for.
    pub target_lane: Option<usize>,
    /// Speed the agent returns to after an interruption.
    pub cruise_speed: f64,
    /// Scripted agents only change intention on command.
    pub scripted: bool,
    scheduled: IntentionLabel,
    scheduled_until_ms: u64,
    started_ms: u64,
    override_label: Option<IntentionLabel>,
    stop_s: Option<f64>,
    recovering: bool,
    pid: PidState,
    last_plan_ms: u64,
    schedule: IntentionSchedule,
    /// Externally supplied controls replacing the path tracker.
    manual: Option<Controls>,
}

impl Agent {
    /// Time the current scheduled intention became active.
    pub fn intention_started_ms(&self) -> u64 {
        self.started_ms
    }
}

/// Frames sampled at one readout tick and the agents that left since the previous one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameBatch {
    pub time_ms: u64,
    pub frames: Vec<SimFrame>,
    pub ended: Vec<u32>,
}

pub struct World {
    cfg: WorldConfig,
    seed: u64,
    split: Split,
    ticks: u64,
    agents: Vec<Agent>,
    ended: Vec<u32>,
    next_id: u32,
    rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
}

fn lane_frame(road: &RoadModel, s: &VehicleState) -> Option<crate::road::LaneFrame> {
    road.to_lane_frame(s.x, s.y, s.heading).ok()
}

impl World {
    /// A world populated by `spawn_traffic`.
    pub fn new(cfg: WorldConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let states = spawn_traffic(&cfg.road, cfg.num_agents, seed, &cfg.spawn)?;
        let mut w = World::empty(cfg, seed)?;
        for s in states {
            w.add_agent(s, false)?;
        }
        Ok(w)
    }

    /// A world with no agents; agents are added explicitly and not respawned.
    pub fn empty(cfg: WorldConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x77);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(0x4E);
        Ok(World { cfg, seed, split: Split::Train, ticks: 0, agents: Vec::new(), ended: Vec::new(), next_id: 0, rng, noise_rng })
    }

    pub fn set_split(&mut self, split: Split) {
        self.split = split;
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn agent(&self, id: u32) -> Option<&Agent> {
        self.agents.iter().find(|a| a.id == id)
    }

    pub fn time_ms(&self) -> u64 {
        self.ticks * self.cfg.dt_ms
    }

    pub fn traffic_light(&self) -> Option<TrafficLight> {
        self.cfg.light.map(|l| TrafficLight { stop_line_s: l.stop_line_s, state: l.state_at(self.time_ms() as f64 / 1000.0) })
    }

    /// Adds an agent at `state`, lane keeping at its current speed. Returns its id.
    pub fn add_agent(&mut self, state: VehicleState, scripted: bool) -> Result<u32> {
        if lane_frame(&self.cfg.road, &state).is_none() {
            return Err(Error::OutOfBounds(format!("agent at ({}, {}) is off the road", state.x, state.y)));
        }
        let id = self.next_id;
        self.next_id += 1;
        let mut schedule = IntentionSchedule::new(self.seed ^ ((id as u64 + 1) << 32), self.cfg.scene, self.cfg.schedule);
        let now = self.time_ms();
        let dwell = schedule.next_dwell();
        let path = plan_path_with_stop(IntentionLabel::LaneKeep, &state, &self.cfg.road, &[], None, &self.cfg.planner)?;
        self.agents.push(Agent {
            id,
            state,
            label: IntentionLabel::LaneKeep,
            path,
            target_lane: None,
            cruise_speed: state.v_lon,
            scripted,
            scheduled: IntentionLabel::LaneKeep,
            scheduled_until_ms: now + (dwell * 1000.0) as u64,
            started_ms: now,
            override_label: None,
            stop_s: None,
            recovering: false,
            pid: PidState::default(),
            last_plan_ms: now,
            schedule,
            manual: None,
        });
        Ok(id)
    }

    /// Starts `intention` for agent `id` immediately, bypassing the schedule and the
    /// lane-change clearance check.
    pub fn set_intention(&mut self, id: u32, intention: IntentionLabel) -> Result<()> {
        let idx = self.agents.iter().position(|a| a.id == id).ok_or_else(|| Error::Contract(format!("no agent with id {id}")))?;
        if !intention.is_trainable() {
            return Err(Error::Contract(format!("{intention} cannot be commanded")));
        }
        let now = self.time_ms();
        let road = self.cfg.road;
        let a = &mut self.agents[idx];
        let lf = lane_frame(&road, &a.state).ok_or_else(|| Error::OutOfBounds("agent is off the road".into()))?;
        a.target_lane = match intention {
            IntentionLabel::ChangeLaneLeft => Some(
                road.left_of(lf.lane_index)
                    .ok_or_else(|| Error::InfeasibleIntention(format!("no lane to the left of lane {}", lf.lane_index)))?,
            ),
            IntentionLabel::ChangeLaneRight => Some(
                road.right_of(lf.lane_index)
                    .ok_or_else(|| Error::InfeasibleIntention(format!("no lane to the right of lane {}", lf.lane_index)))?,
            ),
            _ => None,
        };
        a.scheduled = intention;
        a.started_ms = now;
        a.scheduled_until_ms = match intention {
            IntentionLabel::Accelerate | IntentionLabel::Decelerate => now + (a.schedule.next_speed_event_duration() * 1000.0) as u64,
            IntentionLabel::LaneKeep => u64::MAX,
            _ => now + (self.cfg.schedule.lane_change_timeout_s * 1000.0) as u64,
        };
        if intention == IntentionLabel::LaneKeep {
            a.cruise_speed = a.state.v_lon;
        }
        a.override_label = None;
        a.recovering = false;
        self.refresh_label(idx, true)
    }

    /// Drives agent `id` with fixed controls until cleared with `None`.
    pub fn set_controls(&mut self, id: u32, controls: Option<Controls>) -> Result<()> {
        let a = self.agents.iter_mut().find(|a| a.id == id).ok_or_else(|| Error::Contract(format!("no agent with id {id}")))?;
        a.manual = controls.map(|c| c.clamped().0);
        Ok(())
    }

    /// Advances one simulation tick.
    pub fn step(&mut self) -> Result<()> {
        let now = self.time_ms();
        if now % self.cfg.decision_period_ms == 0 {
            self.decide(now)?;
        }
        let dt = self.cfg.dt_ms as f64 / 1000.0;
        let steer_noise = Normal::new(0.0, self.cfg.noise.steer_sd).map_err(|e| Error::config("steer_sd", e.to_string()))?;
        for a in self.agents.iter_mut() {
            let (mut controls, pid) = pid_control(&a.path, &a.state, &self.cfg.pid, &a.pid, dt, &self.cfg.speed);
            if self.cfg.noise.steer_sd > 0.0 {
                controls.steer = (controls.steer + steer_noise.sample(&mut self.noise_rng)).clamp(-1.0, 1.0);
            }
            a.pid = pid;
            if let Some(m) = a.manual {
                controls = m;
            }
            a.state = vehicle::step(&a.state, &controls, &self.cfg.physics, dt);
        }
        self.ticks += 1;
        self.retire_agents();
        Ok(())
    }

    /// Runs until the next readout tick and samples one frame per agent.
    pub fn advance_frame(&mut self) -> Result<FrameBatch> {
        let period = self.cfg.frame_period_ms();
        loop {
            self.step()?;
            if self.time_ms() % period == 0 {
                break;
            }
        }
        let frames = self.sample_frames()?;
        Ok(FrameBatch { time_ms: self.time_ms(), frames, ended: std::mem::take(&mut self.ended) })
    }

    /// Labelled, noise-corrupted A3 features of every agent at the current instant.
    pub fn sample_frames(&mut self) -> Result<Vec<SimFrame>> {
        let n = self.cfg.noise;
        let road = self.cfg.road;
        let mut out = Vec::with_capacity(self.agents.len());
        for a in &self.agents {
            let mut fv = extract_features(&a.state, &road, FeatureVariant::A3)?;
            let mut draw =
                |sd: f64| if sd > 0.0 { Normal::new(0.0, sd).map(|d| d.sample(&mut self.noise_rng)).unwrap_or(0.0) } else { 0.0 };
            fv.values[0] += draw(n.lateral_sd) / road.lane_width;
            fv.values[1] += draw(n.longitudinal_sd) / road.road_length;
            fv.values[2] += draw(n.heading_sd) / std::f64::consts::PI;
            out.push(SimFrame {
                agent_id: a.id,
                scene: self.cfg.scene,
                split: self.split,
                timestamp_ms: self.time_ms(),
                features: fv,
                label: a.label,
            });
        }
        Ok(out)
    }

    fn retire_agents(&mut self) {
        let road = self.cfg.road;
        let margin = self.cfg.exit_margin;
        let ended = &mut self.ended;
        self.agents.retain(|a| {
            let keep = lane_frame(&road, &a.state).is_some_and(|lf| lf.s < road.road_length - margin);
            if !keep {
                ended.push(a.id);
            }
            keep
        });
    }

    fn try_respawn(&mut self) -> Result<()> {
        if self.agents.len() >= self.cfg.num_agents || self.agents.iter().any(|a| a.scripted) {
            return Ok(());
        }
        let road = self.cfg.road;
        let lane = self.rng.random_range(0..road.num_lanes_right);
        let speed = if self.cfg.spawn.speed_max > self.cfg.spawn.speed_min {
            self.rng.random_range(self.cfg.spawn.speed_min..self.cfg.spawn.speed_max)
        } else {
            self.cfg.spawn.speed_min
        };
        let clear = self
            .agents
            .iter()
            .all(|a| lane_frame(&road, &a.state).is_none_or(|lf| lf.lane_index != lane || lf.s > self.cfg.entry_clearance));
        if clear {
            let state = VehicleState { x: 0.0, y: road.lane_center_y(lane), v_lon: speed, ..Default::default() };
            self.add_agent(state, false)?;
        }
        Ok(())
    }

    fn lane_clear(&self, idx: usize, target: usize) -> bool {
        let road = &self.cfg.road;
        let Some(me) = lane_frame(road, &self.agents[idx].state) else { return false };
        let [behind, ahead] = self.cfg.lane_change_clearance;
        self.agents.iter().enumerate().all(|(j, o)| {
            j == idx
                || lane_frame(road, &o.state).is_none_or(|lf| {
                    // Agents already heading into the target lane count as occupying it.
                    let occupies = lf.lane_index == target || o.target_lane == Some(target);
                    !(occupies && lf.s > me.s - behind && lf.s < me.s + ahead)
                })
        })
    }

    fn decide(&mut self, now: u64) -> Result<()> {
        self.try_respawn()?;
        for idx in 0..self.agents.len() {
            self.decide_agent(idx, now)?;
        }
        Ok(())
    }

    fn decide_agent(&mut self, idx: usize, now: u64) -> Result<()> {
        let road = self.cfg.road;
        let planner = self.cfg.planner;
        let light = self.traffic_light();
        let Some(lf) = lane_frame(&road, &self.agents[idx].state) else { return Ok(()) };

        // Lane changes run to capture or timeout and are never interrupted.
        if let Some(target) = self.agents[idx].target_lane {
            let a = &mut self.agents[idx];
            let captured = lf.lane_index == target && lf.d.abs() < self.cfg.schedule.capture_tolerance;
            if captured || now >= a.scheduled_until_ms {
                if !captured {
                    log::debug!("agent {}: lane change timed out", a.id);
                }
                a.target_lane = None;
                a.scheduled = IntentionLabel::LaneKeep;
                a.started_ms = now;
                a.scheduled_until_ms = now + (a.schedule.next_dwell() * 1000.0) as u64;
            }
            return self.refresh_label(idx, false);
        }

        // Obstacles and signals ahead override the schedule.
        let others: Vec<VehicleState> = self.agents.iter().enumerate().filter(|(j, _)| *j != idx).map(|(_, o)| o.state).collect();
        let a = &self.agents[idx];
        let v = a.state.v_lon;
        let mut override_label = None;
        let mut stop_s = None;
        if let Some(l) = light {
            let to_line = l.stop_line_s - lf.s;
            let can_stop = to_line > v * v / (2.0 * self.cfg.physics.max_brake_decel()) + 1.0;
            let sees = to_line > 0.0 && to_line <= planner.lookahead.max(v * v / (2.0 * planner.stop_decel) + 10.0);
            let holding = a.override_label == Some(IntentionLabel::Stop) && a.stop_s == Some(l.stop_line_s);
            if road.is_forward(lf.lane_index) && l.state == LightState::Red && sees && (can_stop || holding) {
                override_label = Some(IntentionLabel::Stop);
                stop_s = Some(l.stop_line_s);
            }
        }
        if override_label.is_none() && stop_trigger(&a.state, &a.path, &others, None, &road, &planner) {
            let moving = lead_vehicle(&road, &a.state, &others).is_none_or(|(_, lead_v)| lead_v > 0.5);
            override_label = Some(if moving { IntentionLabel::CarFollow } else { IntentionLabel::Stop });
        }
        let a = &mut self.agents[idx];
        if a.override_label.is_some() && override_label.is_none() && a.state.v_lon < a.cruise_speed - 1.5 {
            a.recovering = true;
        }
        if override_label.is_some() || a.state.v_lon >= a.cruise_speed - 0.3 {
            a.recovering = false;
        }
        a.override_label = override_label;
        a.stop_s = stop_s;

        // Scheduled events start only from undisturbed lane keeping.
        if !a.scripted && override_label.is_none() && !a.recovering && now >= a.scheduled_until_ms {
            if a.scheduled == IntentionLabel::LaneKeep {
                let next = a.schedule.next_intention();
                self.start_event(idx, next, lf.lane_index, now);
            } else {
                let a = &mut self.agents[idx];
                a.scheduled = IntentionLabel::LaneKeep;
                a.cruise_speed = a.state.v_lon;
                a.started_ms = now;
                a.scheduled_until_ms = now + (a.schedule.next_dwell() * 1000.0) as u64;
            }
        }
        self.refresh_label(idx, false)
    }

    fn start_event(&mut self, idx: usize, next: IntentionLabel, lane: usize, now: u64) {
        let road = self.cfg.road;
        let v = self.agents[idx].state.v_lon;
        let target = match next {
            IntentionLabel::ChangeLaneLeft => road.left_of(lane),
            IntentionLabel::ChangeLaneRight => road.right_of(lane),
            _ => None,
        };
        let feasible = match next {
            IntentionLabel::ChangeLaneLeft | IntentionLabel::ChangeLaneRight => target.is_some_and(|t| self.lane_clear(idx, t)),
            IntentionLabel::Decelerate => v > self.cfg.min_cruise_speed + 2.0,
            IntentionLabel::Accelerate => v < self.cfg.planner.max_cruise_speed - 2.0,
            _ => false,
        };
        let a = &mut self.agents[idx];
        if !feasible {
            a.scheduled_until_ms = now + (self.cfg.schedule.min_dwell_s * 1000.0) as u64;
            return;
        }
        a.scheduled = next;
        a.started_ms = now;
        a.target_lane = target;
        a.scheduled_until_ms = if target.is_some() {
            now + (self.cfg.schedule.lane_change_timeout_s * 1000.0) as u64
        } else {
            now + (a.schedule.next_speed_event_duration() * 1000.0) as u64
        };
    }

    /// Recomputes the raw label and replans when it changed, the path runs short, or the
    /// replan period elapsed.
    fn refresh_label(&mut self, idx: usize, force: bool) -> Result<()> {
        let now = self.time_ms();
        let road = self.cfg.road;
        let planner = self.cfg.planner;
        let a = &self.agents[idx];
        let label = a.override_label.unwrap_or(if a.recovering { IntentionLabel::Accelerate } else { a.scheduled });
        let (i, u, _) = a.path.project(a.state.x, a.state.y);
        let remaining = a.path.length() - a.path.arc_length_at(i, u);
        let in_target = a.target_lane.is_some_and(|t| lane_frame(&road, &a.state).is_some_and(|lf| lf.lane_index == t));
        let replan = force
            || label != a.label
            || remaining < (a.state.v_lon * 1.0).max(8.0)
            || (a.target_lane.is_none() && now.saturating_sub(a.last_plan_ms) >= self.cfg.replan_period_ms);
        if !replan {
            self.agents[idx].label = label;
            return Ok(());
        }
        let others: Vec<VehicleState> = self.agents.iter().enumerate().filter(|(j, _)| *j != idx).map(|(_, o)| o.state).collect();
        let a = &self.agents[idx];
        // Once the vehicle is inside the target lane the remainder of a lane change is
        // plain lane keeping on the new centre line.
        let geometry = match label {
            IntentionLabel::ChangeLaneLeft | IntentionLabel::ChangeLaneRight if in_target => IntentionLabel::LaneKeep,
            IntentionLabel::Accelerate if a.recovering => IntentionLabel::Accelerate,
            other => other,
        };
        let mut path = match plan_path_with_stop(geometry, &a.state, &road, &others, a.stop_s, &planner) {
            Ok(p) => p,
            Err(Error::InfeasibleIntention(_)) => plan_path_with_stop(IntentionLabel::LaneKeep, &a.state, &road, &others, None, &planner)?,
            Err(e) => return Err(e),
        };
        if geometry == IntentionLabel::LaneKeep && !label.is_lane_change() {
            let cruise = if a.recovering { a.cruise_speed } else { a.state.v_lon };
            path.waypoints.iter_mut().for_each(|w| w.target_speed = cruise);
        }
        if a.recovering {
            let cruise = a.cruise_speed;
            path.waypoints.iter_mut().for_each(|w| w.target_speed = w.target_speed.min(cruise));
        }
        path.intention = label;
        let a = &mut self.agents[idx];
        a.path = path;
        a.label = label;
        a.last_plan_ms = now;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lone_agent(lane: usize, speed: f64) -> World {
        let cfg = WorldConfig { num_agents: 1, ..WorldConfig::default() };
        let mut w = World::empty(cfg, 1).unwrap();
        let y = w.config().road.lane_center_y(lane);
        w.add_agent(VehicleState { x: 50.0, y, v_lon: speed, ..Default::default() }, true).unwrap();
        w
    }

    #[test]
    fn readout_is_every_200ms() {
        let mut w = World::new(WorldConfig::default(), 3).unwrap();
        let a = w.advance_frame().unwrap();
        let b = w.advance_frame().unwrap();
        assert_eq!(a.time_ms, 200);
        assert_eq!(b.time_ms - a.time_ms, 200);
        assert_eq!(a.frames.len(), 8);
    }

    #[test]
    fn same_seed_same_world() {
        let run = |seed| {
            let mut w = World::new(WorldConfig::default(), seed).unwrap();
            (0..300).map(|_| w.advance_frame().unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn scripted_lane_change_is_captured() {
        let mut w = lone_agent(0, 13.0);
        for _ in 0..10 {
            w.advance_frame().unwrap();
        }
        w.set_intention(0, IntentionLabel::ChangeLaneLeft).unwrap();
        let t0 = w.time_ms();
        let mut end = None;
        for _ in 0..60 {
            let b = w.advance_frame().unwrap();
            if b.frames[0].label == IntentionLabel::LaneKeep {
                end = Some(b.time_ms);
                break;
            }
            assert_eq!(b.frames[0].label, IntentionLabel::ChangeLaneLeft);
        }
        let secs = (end.expect("lane change completes") - t0) as f64 / 1000.0;
        assert!((3.0..=6.0).contains(&secs), "took {secs} s");
        let lf = w.config().road.to_lane_frame(w.agents()[0].state.x, w.agents()[0].state.y, 0.0).unwrap();
        assert_eq!(lf.lane_index, 1);
    }

    #[test]
    fn lane_change_from_leftmost_is_infeasible() {
        let mut w = lone_agent(2, 13.0);
        assert!(matches!(w.set_intention(0, IntentionLabel::ChangeLaneLeft), Err(Error::InfeasibleIntention(_))));
        assert!(w.set_intention(0, IntentionLabel::Stop).is_err());
        assert!(w.set_intention(9, IntentionLabel::LaneKeep).is_err());
    }

    #[test]
    fn left_change_lateral_offset_is_monotone() {
        let mut w = lone_agent(0, 15.0);
        w.set_intention(0, IntentionLabel::ChangeLaneLeft).unwrap();
        let mut prev = w.agents()[0].state.y;
        while w.agents()[0].label == IntentionLabel::ChangeLaneLeft {
            w.step().unwrap();
            let y = w.agents()[0].state.y;
            assert!(y >= prev - 0.05);
            prev = prev.max(y);
        }
    }

    #[test]
    fn slow_leader_causes_car_follow() {
        let cfg = WorldConfig { num_agents: 2, ..WorldConfig::default() };
        let mut w = World::empty(cfg, 2).unwrap();
        let y = w.config().road.lane_center_y(0);
        w.add_agent(VehicleState { x: 100.0, y, v_lon: 8.0, ..Default::default() }, true).unwrap();
        w.add_agent(VehicleState { x: 60.0, y, v_lon: 16.0, ..Default::default() }, true).unwrap();
        let mut seen = false;
        for _ in 0..50 {
            let b = w.advance_frame().unwrap();
            seen |= b.frames.iter().any(|f| f.label == IntentionLabel::CarFollow);
        }
        assert!(seen);
        let (a, b) = (&w.agents()[0].state, &w.agents()[1].state);
        assert!(a.x - b.x > 4.5, "vehicles collided");
    }

    #[test]
    fn red_light_stops_traffic() {
        let cfg = WorldConfig {
            light: Some(LightCycle { stop_line_s: 150.0, green_s: 1.0, red_s: 100.0, offset_s: 1.0 }),
            ..WorldConfig::urban()
        };
        let mut w = World::empty(cfg, 2).unwrap();
        let y = w.config().road.lane_center_y(0);
        w.add_agent(VehicleState { x: 60.0, y, v_lon: 12.0, ..Default::default() }, true).unwrap();
        let mut labels = Vec::new();
        for _ in 0..150 {
            labels.push(w.advance_frame().unwrap().frames[0].label);
        }
        assert!(labels.contains(&IntentionLabel::Stop));
        let s = &w.agents()[0].state;
        assert!(s.v_lon < 0.2 && s.x < 150.0 && s.x > 140.0, "{s:?}");
    }

    #[test]
    fn agents_exit_and_respawn() {
        let cfg = WorldConfig { road: RoadModel { road_length: 300.0, ..RoadModel::default() }, num_agents: 4, ..WorldConfig::default() };
        let mut w = World::new(cfg, 8).unwrap();
        let mut ended = 0;
        for _ in 0..400 {
            ended += w.advance_frame().unwrap().ended.len();
        }
        assert!(ended >= 4);
        assert!(!w.agents().is_empty());
        assert!(w.agents().iter().any(|a| a.id >= 4));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = WorldConfig { log_frequency: 0, ..WorldConfig::default() };
        assert!(matches!(World::new(cfg, 1), Err(Error::Config { .. })));
        let cfg = WorldConfig { num_agents: 0, ..WorldConfig::default() };
        assert!(World::new(cfg, 1).is_err());
    }
}
