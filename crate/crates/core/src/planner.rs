//! Intention-labelled path generation and cross-track PID tracking.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::road::RoadModel;
use crate::vehicle::{Controls, VehicleState, VEHICLE_LENGTH, VEHICLE_WIDTH};

/// Number of classes a model is trained on.
pub const NUM_TRAINABLE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum IntentionLabel {
    LaneKeep = 0,
    ChangeLaneRight = 1,
    ChangeLaneLeft = 2,
    Decelerate = 3,
    Accelerate = 4,
    /// Raw-only; dropped by cleaning.
    CarFollow = 5,
    /// Raw-only; dropped by cleaning.
    Stop = 6,
}

impl IntentionLabel {
    pub const ALL: [IntentionLabel; 7] = [
        IntentionLabel::LaneKeep,
        IntentionLabel::ChangeLaneRight,
        IntentionLabel::ChangeLaneLeft,
        IntentionLabel::Decelerate,
        IntentionLabel::Accelerate,
        IntentionLabel::CarFollow,
        IntentionLabel::Stop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_trainable(self) -> bool {
        self.index() < NUM_TRAINABLE
    }

    pub fn is_lane_change(self) -> bool {
        matches!(self, IntentionLabel::ChangeLaneLeft | IntentionLabel::ChangeLaneRight)
    }

    pub fn name(self) -> &'static str {
        match self {
            IntentionLabel::LaneKeep => "lane_keep",
            IntentionLabel::ChangeLaneRight => "change_lane_right",
            IntentionLabel::ChangeLaneLeft => "change_lane_left",
            IntentionLabel::Decelerate => "decelerate",
            IntentionLabel::Accelerate => "accelerate",
            IntentionLabel::CarFollow => "car_follow",
            IntentionLabel::Stop => "stop",
        }
    }
}

impl fmt::Display for IntentionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub target_speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    pub waypoints: Vec<Waypoint>,
    pub intention: IntentionLabel,
}

impl Path {
    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (w[1].x - w[0].x).hypot(w[1].y - w[0].y)).sum()
    }

    /// Nearest segment to `(x, y)`: index, clamped projection parameter, signed lateral
    /// offset of the point (left of the path positive).
    pub fn project(&self, x: f64, y: f64) -> (usize, f64, f64) {
        let mut best = (0usize, 0.0f64, f64::INFINITY);
        for (i, w) in self.waypoints.windows(2).enumerate() {
            let (dx, dy) = (w[1].x - w[0].x, w[1].y - w[0].y);
            let len2 = dx * dx + dy * dy;
            let u = if len2 > 0.0 { (((x - w[0].x) * dx + (y - w[0].y) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (px, py) = (w[0].x + u * dx, w[0].y + u * dy);
            let dist = (x - px).hypot(y - py);
            if dist < best.2 {
                best = (i, u, dist);
            }
        }
        let (i, u, _) = best;
        let (a, b) = (self.waypoints[i], self.waypoints[i + 1]);
        let (dx, dy) = (b.x - a.x, b.y - a.y);
        let len = dx.hypot(dy).max(f64::MIN_POSITIVE);
        let lateral = (dx * (y - a.y) - dy * (x - a.x)) / len;
        (i, u, lateral)
    }

    /// Arc length from the start of the path to parameter `u` on segment `i`.
    pub fn arc_length_at(&self, i: usize, u: f64) -> f64 {
        let seg = |k: usize| {
            let (a, b) = (self.waypoints[k], self.waypoints[k + 1]);
            (b.x - a.x).hypot(b.y - a.y)
        };
        (0..i).map(seg).sum::<f64>() + u * seg(i)
    }

    /// Waypoint interpolated at arc length `at`, clamped to the path ends.
    pub fn point_at(&self, at: f64) -> Waypoint {
        let mut remaining = at.max(0.0);
        for w in self.waypoints.windows(2) {
            let len = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
            if remaining <= len && len > 0.0 {
                let u = remaining / len;
                return Waypoint {
                    x: w[0].x + u * (w[1].x - w[0].x),
                    y: w[0].y + u * (w[1].y - w[0].y),
                    target_speed: w[0].target_speed + u * (w[1].target_speed - w[0].target_speed),
                };
            }
            remaining -= len;
        }
        *self.waypoints.last().expect("path has waypoints")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub waypoint_spacing: f64,
    /// Minimum length of the lateral blend of a lane change.
    pub lane_change_distance: f64,
    /// Lateral blend duration at the current speed; the blend spans
    /// `max(lane_change_distance, v * lane_change_time_s)`.
    pub lane_change_time_s: f64,
    pub accel: f64,
    pub follow_gap: f64,
    /// Proportional gain from gap error to speed offset while following.
    pub follow_gain: f64,
    pub stop_decel: f64,
    pub stop_margin: f64,
    pub lookahead: f64,
    /// Path length in seconds of travel at current speed.
    pub horizon_s: f64,
    pub min_path_length: f64,
    pub max_cruise_speed: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            waypoint_spacing: 2.0,
            lane_change_distance: 30.0,
            lane_change_time_s: 4.5,
            accel: 2.0,
            follow_gap: 20.0,
            follow_gain: 0.3,
            stop_decel: 3.0,
            stop_margin: 2.0,
            lookahead: 30.0,
            horizon_s: 3.0,
            min_path_length: 20.0,
            max_cruise_speed: 25.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightState {
    Green,
    Red,
}

/// A signal controlling all forward lanes at `stop_line_s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficLight {
    pub stop_line_s: f64,
    pub state: LightState,
}

/// Travel direction sign and lane of `state` on `road`.
fn lane_of(road: &RoadModel, state: &VehicleState) -> Result<(usize, f64)> {
    let lf = road.to_lane_frame(state.x, state.y, state.heading)?;
    Ok((lf.lane_index, lf.s))
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Plans a path realising `intention` from `state`.
///
/// Waypoints are generated in the lane frame of the current lane and mapped to the world.
pub fn plan_path(
    intention: IntentionLabel,
    state: &VehicleState,
    road: &RoadModel,
    traffic: &[VehicleState],
    cfg: &PlannerConfig,
) -> Result<Path> {
    plan_path_with_stop(intention, state, road, traffic, None, cfg)
}

/// Like [`plan_path`], with an explicit stop position (lane-frame `s`) for `Stop`.
pub fn plan_path_with_stop(
    intention: IntentionLabel,
    state: &VehicleState,
    road: &RoadModel,
    traffic: &[VehicleState],
    stop_s: Option<f64>,
    cfg: &PlannerConfig,
) -> Result<Path> {
    let (lane, s0) = lane_of(road, state)?;
    let v0 = state.v_lon.max(0.0);
    let base_len = (v0 * cfg.horizon_s).max(cfg.min_path_length);

    let target_lane = match intention {
        IntentionLabel::ChangeLaneLeft => {
            Some(road.left_of(lane).ok_or_else(|| Error::InfeasibleIntention(format!("no lane to the left of lane {lane}")))?)
        }
        IntentionLabel::ChangeLaneRight => {
            Some(road.right_of(lane).ok_or_else(|| Error::InfeasibleIntention(format!("no lane to the right of lane {lane}")))?)
        }
        _ => None,
    };
    let blend = cfg.lane_change_distance.max(v0 * cfg.lane_change_time_s);
    let length = if target_lane.is_some() { base_len.max(blend + cfg.min_path_length) } else { base_len };

    let speed_at = |ds: f64| -> f64 {
        match intention {
            IntentionLabel::Accelerate => (v0 * v0 + 2.0 * cfg.accel * ds).sqrt().min(cfg.max_cruise_speed.max(v0)),
            IntentionLabel::Decelerate => (v0 * v0 - 2.0 * cfg.accel * ds).max(0.0).sqrt(),
            IntentionLabel::CarFollow => match lead_vehicle(road, state, traffic) {
                Some((gap, lead_v)) => (lead_v + cfg.follow_gain * (gap - cfg.follow_gap)).clamp(0.0, cfg.max_cruise_speed),
                None => v0,
            },
            IntentionLabel::Stop => {
                let stop_at = stop_s.or_else(|| lead_vehicle(road, state, traffic).map(|(gap, _)| s0 + gap)).unwrap_or(s0 + cfg.lookahead)
                    - cfg.stop_margin;
                let remaining = (stop_at - (s0 + ds)).max(0.0);
                (2.0 * cfg.stop_decel * remaining).sqrt().min(v0)
            }
            _ => v0,
        }
    };

    let dir = if road.is_forward(lane) { 1.0 } else { -1.0 };
    let center = road.lane_center_y(lane);
    let lateral_shift = target_lane.map(|t| road.lane_center_y(t) - center).unwrap_or(0.0);

    // Keep at least two waypoints even at the very end of the road.
    let s_end = (s0 + length).min(road.road_length);
    let s_start = s0.min(s_end - cfg.waypoint_spacing).max(0.0);
    let n = (((s_end - s_start) / cfg.waypoint_spacing).ceil() as usize).max(1);
    let step = (s_end - s_start) / n as f64;

    let mut waypoints = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let s = s_start + k as f64 * step;
        let ds = (s - s0).max(0.0);
        let offset = lateral_shift * smoothstep(ds / blend);
        let x = if dir > 0.0 { s } else { road.road_length - s };
        waypoints.push(Waypoint { x, y: center + offset, target_speed: speed_at(ds) });
    }
    Ok(Path { waypoints, intention })
}

/// Gap to and speed of the nearest same-lane vehicle ahead, bumper to bumper.
pub fn lead_vehicle(road: &RoadModel, state: &VehicleState, traffic: &[VehicleState]) -> Option<(f64, f64)> {
    let (lane, s0) = lane_of(road, state).ok()?;
    traffic
        .iter()
        .filter_map(|o| {
            let (l, s) = lane_of(road, o).ok()?;
            (l == lane && s > s0).then(|| (s - s0 - VEHICLE_LENGTH, o.v_lon))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Corners of a vehicle footprint rectangle centred on its reference point.
pub fn footprint(v: &VehicleState) -> [(f64, f64); 4] {
    let (c, s) = (v.heading.cos(), v.heading.sin());
    let (hl, hw) = (VEHICLE_LENGTH / 2.0, VEHICLE_WIDTH / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| (v.x + a * c - b * s, v.y + a * s + b * c))
}

fn project_onto(poly: &[(f64, f64)], axis: (f64, f64)) -> (f64, f64) {
    poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.0 * axis.0 + p.1 * axis.1;
        (lo.min(d), hi.max(d))
    })
}

/// Separating-axis overlap test for two convex polygons.
pub fn convex_overlap(a: &[(f64, f64)], b: &[(f64, f64)]) -> bool {
    for poly in [a, b] {
        for i in 0..poly.len() {
            let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
            let axis = (q.1 - p.1, p.0 - q.0);
            let (a0, a1) = project_onto(a, axis);
            let (b0, b1) = project_onto(b, axis);
            if a1 < b0 || b1 < a0 {
                return false;
            }
        }
    }
    true
}

/// True when an obstacle's footprint intersects the path corridor within `lookahead`
/// metres ahead of the vehicle, or a red light's stop line lies within that range.
pub fn stop_trigger(
    state: &VehicleState,
    path: &Path,
    traffic: &[VehicleState],
    light: Option<&TrafficLight>,
    road: &RoadModel,
    cfg: &PlannerConfig,
) -> bool {
    if let Some(l) = light {
        if l.state == LightState::Red {
            if let Ok((lane, s0)) = lane_of(road, state) {
                if road.is_forward(lane) && l.stop_line_s >= s0 && l.stop_line_s - s0 <= cfg.lookahead {
                    return true;
                }
            }
        }
    }
    let corridors = path_corridor(state, path, cfg.lookahead, VEHICLE_WIDTH / 2.0);
    traffic.iter().any(|o| {
        let fp = footprint(o);
        corridors.iter().any(|c| convex_overlap(&fp, c))
    })
}

/// Rectangles covering the path from the vehicle's projection to `lookahead` metres ahead.
pub fn path_corridor(state: &VehicleState, path: &Path, lookahead: f64, half_width: f64) -> Vec<[(f64, f64); 4]> {
    let (i0, u0, _) = path.project(state.x, state.y);
    let start = path.arc_length_at(i0, u0);
    let step = 2.0f64;
    let mut out = Vec::new();
    let mut a = start;
    while a < start + lookahead - 1e-9 {
        let b = (a + step).min(start + lookahead);
        let (p, q) = (path.point_at(a), path.point_at(b));
        let (dx, dy) = (q.x - p.x, q.y - p.y);
        let len = dx.hypot(dy);
        if len <= 1e-9 {
            break;
        }
        let (nx, ny) = (-dy / len * half_width, dx / len * half_width);
        out.push([(p.x + nx, p.y + ny), (q.x + nx, q.y + ny), (q.x - nx, q.y - ny), (p.x - nx, p.y - ny)]);
        a = b;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidGains {
    pub k_p: f64,
    pub k_i: f64,
    pub k_d: f64,
    pub integral_clamp: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        PidGains { k_p: 0.6, k_i: 0.01, k_d: 1.2, integral_clamp: 5.0 }
    }
}

impl PidGains {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("k_p", self.k_p), ("k_i", self.k_i), ("k_d", self.k_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        if !(self.integral_clamp > 0.0) {
            return Err(Error::config("integral_clamp", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: f64,
}

/// Proportional longitudinal law on the speed error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeedGains {
    pub k_throttle: f64,
    pub k_brake: f64,
    /// Distance ahead, in seconds of travel, at which the target speed is read.
    pub preview_s: f64,
}

impl Default for SpeedGains {
    fn default() -> Self {
        SpeedGains { k_throttle: 0.5, k_brake: 0.02, preview_s: 0.5 }
    }
}

/// Steering from the PID law on cross-track error; throttle and brake from [`SpeedGains`].
///
/// `e` is positive when the path lies to the left of the vehicle, so positive steer
/// reduces it.
pub fn pid_control(
    path: &Path,
    state: &VehicleState,
    gains: &PidGains,
    pid: &PidState,
    dt: f64,
    speed: &SpeedGains,
) -> (Controls, PidState) {
    let (i, u, lateral) = path.project(state.x, state.y);
    let e = -lateral;
    let steer = pid_steer(e, gains, pid, dt);

    let at = path.arc_length_at(i, u) + (state.v_lon * speed.preview_s).max(1.0);
    let target = path.point_at(at).target_speed;
    let dv = target - state.v_lon;
    let (throttle, brake) =
        if dv >= 0.0 { ((speed.k_throttle * dv).clamp(0.0, 1.0), 0.0) } else { (0.0, (speed.k_brake * -dv).clamp(0.0, 1.0)) };
    let controls = Controls {
        throttle,
        brake,
        hand_brake: 0.0,
        steer: steer.0,
        signal_left: path.intention == IntentionLabel::ChangeLaneLeft,
        signal_right: path.intention == IntentionLabel::ChangeLaneRight,
    };
    (controls, steer.1)
}

/// One PID update: rectangle-rule integral with anti-windup clamp, backward-difference derivative.
pub fn pid_steer(e: f64, gains: &PidGains, pid: &PidState, dt: f64) -> (f64, PidState) {
    let integral = (pid.integral + e * dt).clamp(-gains.integral_clamp, gains.integral_clamp);
    let derivative = (e - pid.prev_error) / dt;
    let c = gains.k_p * e + gains.k_i * integral + gains.k_d * derivative;
    (c.clamp(-1.0, 1.0), PidState { integral, prev_error: e })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scene {
    Highway,
    Urban,
}

impl Scene {
    pub fn tag(self) -> u8 {
        match self {
            Scene::Highway => 0,
            Scene::Urban => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Scene::Highway),
            1 => Some(Scene::Urban),
            _ => None,
        }
    }
}

/// Rates and durations of the seeded intention schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Mean lane-keep dwell between intention changes.
    pub mean_dwell_s: f64,
    pub min_dwell_s: f64,
    /// Relative weights of [change right, change left, decelerate, accelerate].
    pub weights: [f64; 4],
    pub speed_event_min_s: f64,
    pub speed_event_max_s: f64,
    /// Lane-change duration assumed by [`scenario_policy`], which does not simulate capture.
    pub nominal_lane_change_s: f64,
    /// Lateral offset in the target lane at which a lane change is complete.
    pub capture_tolerance: f64,
    pub lane_change_timeout_s: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            mean_dwell_s: 12.0,
            min_dwell_s: 3.0,
            weights: [0.45, 0.45, 0.05, 0.05],
            speed_event_min_s: 1.5,
            speed_event_max_s: 3.0,
            nominal_lane_change_s: 4.5,
            capture_tolerance: 0.2,
            lane_change_timeout_s: 10.0,
        }
    }
}

/// Seeded stream of lane-keep dwell times and the intentions that follow them.
#[derive(Debug, Clone)]
pub struct IntentionSchedule {
    rng: ChaCha8Rng,
    cfg: ScheduleConfig,
}

impl IntentionSchedule {
    pub fn new(seed: u64, scene: Scene, cfg: ScheduleConfig) -> Self {
        let stream = match scene {
            Scene::Highway => 0x4857,
            Scene::Urban => 0x5552,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        IntentionSchedule { rng, cfg }
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.cfg
    }

    /// Lane-keep dwell: `min_dwell + Exp(mean_dwell - min_dwell)`.
    pub fn next_dwell(&mut self) -> f64 {
        let extra = (self.cfg.mean_dwell_s - self.cfg.min_dwell_s).max(0.0);
        let u: f64 = self.rng.random::<f64>();
        self.cfg.min_dwell_s - extra * (1.0 - u).ln()
    }

    pub fn next_intention(&mut self) -> IntentionLabel {
        let total: f64 = self.cfg.weights.iter().sum();
        let mut r = self.rng.random::<f64>() * total;
        let options =
            [IntentionLabel::ChangeLaneRight, IntentionLabel::ChangeLaneLeft, IntentionLabel::Decelerate, IntentionLabel::Accelerate];
        for (w, o) in self.cfg.weights.iter().zip(options) {
            if r < *w {
                return o;
            }
            r -= w;
        }
        IntentionLabel::LaneKeep
    }

    pub fn next_speed_event_duration(&mut self) -> f64 {
        let (lo, hi) = (self.cfg.speed_event_min_s, self.cfg.speed_event_max_s);
        if hi > lo {
            self.rng.random_range(lo..hi)
        } else {
            lo
        }
    }
}

/// Raw intention at time `t` of the nominal schedule for `seed`: lane keep for a seeded
/// dwell, then a seeded intention, lane changes lasting the nominal lane-change time.
pub fn scenario_policy(seed: u64, scene: Scene, t: f64, cfg: &ScheduleConfig) -> IntentionLabel {
    let mut schedule = IntentionSchedule::new(seed, scene, *cfg);
    let mut clock = 0.0;
    loop {
        clock += schedule.next_dwell();
        if t < clock {
            return IntentionLabel::LaneKeep;
        }
        let next = schedule.next_intention();
        let duration = if next.is_lane_change() { cfg.nominal_lane_change_s } else { schedule.next_speed_event_duration() };
        clock += duration;
        if t < clock {
            return next;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road::RoadModel;

    fn road() -> RoadModel {
        RoadModel::default()
    }

    fn on_lane(lane: usize, x: f64, v: f64) -> VehicleState {
        VehicleState { x, y: road().lane_center_y(lane), v_lon: v, ..Default::default() }
    }

    #[test]
    fn trainable_indices() {
        let trainable: Vec<usize> = IntentionLabel::ALL.iter().filter(|l| l.is_trainable()).map(|l| l.index()).collect();
        assert_eq!(trainable, vec![0, 1, 2, 3, 4]);
        assert!(!IntentionLabel::CarFollow.is_trainable());
        assert!(!IntentionLabel::Stop.is_trainable());
        assert_eq!(IntentionLabel::from_index(2), Some(IntentionLabel::ChangeLaneLeft));
        assert_eq!(IntentionLabel::from_index(7), None);
    }

    #[test]
    fn lane_keep_stays_centered() {
        let r = road();
        let p = plan_path(IntentionLabel::LaneKeep, &on_lane(1, 100.0, 15.0), &r, &[], &PlannerConfig::default()).unwrap();
        assert!(p.waypoints.len() >= 2);
        for w in &p.waypoints {
            let lf = r.to_lane_frame(w.x, w.y, 0.0).unwrap();
            assert_eq!(lf.d, 0.0);
            assert_eq!(lf.lane_index, 1);
            assert_eq!(w.target_speed, 15.0);
        }
        for w in p.waypoints.windows(2) {
            let gap = (w[1].x - w[0].x).hypot(w[1].y - w[0].y);
            assert!(gap > 0.0 && gap <= 5.0);
        }
    }

    #[test]
    fn change_left_ends_on_left_center_monotonically() {
        let r = road();
        let p = plan_path(IntentionLabel::ChangeLaneLeft, &on_lane(0, 50.0, 12.0), &r, &[], &PlannerConfig::default()).unwrap();
        let last = p.waypoints.last().unwrap();
        assert!((last.y - r.lane_center_y(1)).abs() < 1e-12);
        for w in p.waypoints.windows(2) {
            assert!(w[1].y >= w[0].y);
        }
    }

    #[test]
    fn change_left_from_leftmost_is_infeasible() {
        let r = road();
        let err = plan_path(IntentionLabel::ChangeLaneLeft, &on_lane(2, 50.0, 12.0), &r, &[], &PlannerConfig::default());
        assert!(matches!(err, Err(Error::InfeasibleIntention(_))));
        let err = plan_path(IntentionLabel::ChangeLaneRight, &on_lane(0, 50.0, 12.0), &r, &[], &PlannerConfig::default());
        assert!(matches!(err, Err(Error::InfeasibleIntention(_))));
    }

    #[test]
    fn speed_profiles() {
        let r = road();
        let cfg = PlannerConfig::default();
        let acc = plan_path(IntentionLabel::Accelerate, &on_lane(0, 50.0, 10.0), &r, &[], &cfg).unwrap();
        let dec = plan_path(IntentionLabel::Decelerate, &on_lane(0, 50.0, 10.0), &r, &[], &cfg).unwrap();
        assert!(acc.waypoints.last().unwrap().target_speed > 10.0);
        assert!(dec.waypoints.last().unwrap().target_speed < 10.0);
        let stop = plan_path_with_stop(IntentionLabel::Stop, &on_lane(0, 50.0, 10.0), &r, &[], Some(70.0), &cfg).unwrap();
        let beyond = stop.waypoints.iter().filter(|w| w.x >= 68.0);
        for w in beyond {
            assert_eq!(w.target_speed, 0.0);
        }
    }

    #[test]
    fn path_near_road_end_stays_in_bounds() {
        let r = road();
        let p = plan_path(IntentionLabel::LaneKeep, &on_lane(0, 999.5, 15.0), &r, &[], &PlannerConfig::default()).unwrap();
        assert!(p.waypoints.len() >= 2);
        assert!(p.waypoints.iter().all(|w| r.contains(w.x, w.y)));
    }

    #[test]
    fn stop_trigger_cases() {
        let r = road();
        let cfg = PlannerConfig::default();
        let ego = on_lane(1, 100.0, 12.0);
        let path = plan_path(IntentionLabel::LaneKeep, &ego, &r, &[], &cfg).unwrap();
        let green = TrafficLight { stop_line_s: 120.0, state: LightState::Green };
        assert!(!stop_trigger(&ego, &path, &[], Some(&green), &r, &cfg));
        let red = TrafficLight { state: LightState::Red, ..green };
        assert!(stop_trigger(&ego, &path, &[], Some(&red), &r, &cfg));
        assert!(stop_trigger(&ego, &path, &[on_lane(1, 110.0, 5.0)], None, &r, &cfg));
        assert!(!stop_trigger(&ego, &path, &[on_lane(2, 110.0, 5.0)], None, &r, &cfg));
        assert!(!stop_trigger(&ego, &path, &[on_lane(1, 140.0, 5.0)], None, &r, &cfg));
    }

    #[test]
    fn pid_zero_error_gives_zero_steer() {
        let g = PidGains::default();
        let mut st = PidState::default();
        for _ in 0..100 {
            let (c, next) = pid_steer(0.0, &g, &st, 0.01);
            assert_eq!(c, 0.0);
            st = next;
        }
    }

    #[test]
    fn pid_proportional_only() {
        let g = PidGains { k_p: 1.0, k_i: 0.0, k_d: 0.0, integral_clamp: 5.0 };
        let (c, _) = pid_steer(0.5, &g, &PidState { integral: 0.0, prev_error: 0.5 }, 0.01);
        assert_eq!(c, 0.5);
        for e in [-0.7, -0.2, 0.1, 0.3] {
            let (c, _) = pid_steer(e, &g, &PidState::default(), 0.01);
            assert_eq!(c, e);
        }
    }

    #[test]
    fn pid_derivative_vanishes_for_constant_error() {
        let g = PidGains { k_p: 0.0, k_i: 0.0, k_d: 1.0, integral_clamp: 5.0 };
        let (first, st) = pid_steer(0.2, &g, &PidState::default(), 0.01);
        assert!(first > 0.0);
        let (second, _) = pid_steer(0.2, &g, &st, 0.01);
        assert_eq!(second, 0.0);
    }

    #[test]
    fn pid_integral_is_clamped() {
        let g = PidGains { k_p: 0.0, k_i: 1.0, k_d: 0.0, integral_clamp: 0.5 };
        let mut st = PidState::default();
        for _ in 0..1000 {
            st = pid_steer(3.0, &g, &st, 0.01).1;
            assert!(st.integral.abs() <= 0.5);
        }
        assert_eq!(st.integral, 0.5);
    }

    #[test]
    fn cte_sign_convention() {
        let r = road();
        let path = plan_path(IntentionLabel::LaneKeep, &on_lane(1, 100.0, 10.0), &r, &[], &PlannerConfig::default()).unwrap();
        // Vehicle left of the path: path lies to its right, error negative, steer right.
        let left = VehicleState { y: r.lane_center_y(1) + 1.0, ..on_lane(1, 100.0, 10.0) };
        let (c, st) = pid_control(&path, &left, &PidGains::default(), &PidState::default(), 0.01, &SpeedGains::default());
        assert!(st.prev_error < 0.0);
        assert!(c.steer < 0.0);
    }

    #[test]
    fn schedule_is_deterministic() {
        let cfg = ScheduleConfig::default();
        let a: Vec<_> = (0..2000).map(|k| scenario_policy(3, Scene::Highway, k as f64 * 0.2, &cfg)).collect();
        let b: Vec<_> = (0..2000).map(|k| scenario_policy(3, Scene::Highway, k as f64 * 0.2, &cfg)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_transition_rate() {
        // Expected transitions out of lane keep per second: 1 / (mean dwell + mean event length).
        let cfg = ScheduleConfig::default();
        let dt = 0.2;
        let steps = 10_000;
        let labels: Vec<_> = (0..steps).map(|k| scenario_policy(9, Scene::Highway, k as f64 * dt, &cfg)).collect();
        let onsets = labels.windows(2).filter(|w| w[0] == IntentionLabel::LaneKeep && w[1] != IntentionLabel::LaneKeep).count();
        let minutes = steps as f64 * dt / 60.0;
        assert!(onsets as f64 / minutes >= 1.0, "{onsets} transitions in {minutes} min");
        let w = cfg.weights;
        let mean_event = (w[0] + w[1]) * cfg.nominal_lane_change_s + (w[2] + w[3]) * 0.5 * (cfg.speed_event_min_s + cfg.speed_event_max_s);
        let expected = minutes * 60.0 / (cfg.mean_dwell_s + mean_event / w.iter().sum::<f64>());
        assert!((onsets as f64 - expected).abs() < 0.25 * expected, "{onsets} vs {expected}");
    }
}
