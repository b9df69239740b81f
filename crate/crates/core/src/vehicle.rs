//! Kinematic bicycle with force-capped longitudinal dynamics.
//!
//! The reference point is the rear axle. One step of length `dt`:
//!
//! * drive acceleration `throttle * traction * min(F_engine, F_slip) / mass * (1 - v / max_speed)`,
//!   with `F_engine = engine_torque * drive_force_per_torque` and
//!   `F_slip = forward_slip_limit * slip_stiffness * mass * g`;
//! * braking deceleration `(brake + 3 * hand_brake) * braking_force / mass`, capped at
//!   `traction * g`, never reversing the sign of `v_lon`;
//! * yaw rate `v_lon * tan(tire_angle) / wheelbase`, capped so the lateral acceleration stays
//!   below `traction * sideway_slip_limit * slip_stiffness * g`;
//! * explicit Euler on speed, then pose integrated with the updated speed.
//!
//! `v_lat` is the kinematic side-slip speed at the vehicle midpoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::road::RoadModel;

pub const GRAVITY: f64 = 9.81;

/// Nominal body length used for footprints.
pub const VEHICLE_LENGTH: f64 = 4.5;
pub const VEHICLE_WIDTH: f64 = 1.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VehiclePhysicsParams {
    pub engine_torque: f64,
    pub brake_torque: f64,
    pub braking_force: f64,
    pub mass: f64,
    pub forward_slip_limit: f64,
    pub sideway_slip_limit: f64,
    pub traction: f64,
    pub max_speed: f64,
    pub wheelbase: f64,
    pub max_steer: f64,
    /// Newtons of drive force per unit of engine torque.
    pub drive_force_per_torque: f64,
    pub slip_stiffness: f64,
}

impl Default for VehiclePhysicsParams {
    fn default() -> Self {
        VehiclePhysicsParams {
            engine_torque: 590.0,
            brake_torque: 1475.0,
            braking_force: 15_000.0,
            mass: 50.0,
            forward_slip_limit: 0.1,
            sideway_slip_limit: 0.1,
            traction: 0.5,
            max_speed: 30.0,
            wheelbase: 2.7,
            max_steer: 0.6,
            drive_force_per_torque: 0.5,
            slip_stiffness: 12.0,
        }
    }
}

impl VehiclePhysicsParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("engine_torque", self.engine_torque),
            ("brake_torque", self.brake_torque),
            ("braking_force", self.braking_force),
            ("mass", self.mass),
            ("traction", self.traction),
            ("max_speed", self.max_speed),
            ("wheelbase", self.wheelbase),
            ("max_steer", self.max_steer),
            ("drive_force_per_torque", self.drive_force_per_torque),
            ("slip_stiffness", self.slip_stiffness),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        for (name, v) in
            [("forward_slip_limit", self.forward_slip_limit), ("sideway_slip_limit", self.sideway_slip_limit), ("traction", self.traction)]
        {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::config(name, "must be in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Full-throttle acceleration at standstill.
    pub fn peak_drive_accel(&self) -> f64 {
        let engine = self.engine_torque * self.drive_force_per_torque;
        let slip = self.forward_slip_limit * self.slip_stiffness * self.mass * GRAVITY;
        self.traction * engine.min(slip) / self.mass
    }

    pub fn max_brake_decel(&self) -> f64 {
        self.traction * GRAVITY
    }

    pub fn max_lateral_accel(&self) -> f64 {
        self.traction * self.sideway_slip_limit * self.slip_stiffness * GRAVITY
    }

    /// Upper bound on the magnitude of longitudinal acceleration.
    pub fn max_accel(&self) -> f64 {
        self.peak_drive_accel().max(self.max_brake_decel())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v_lon: f64,
    pub v_lat: f64,
    pub tire_angle: f64,
    pub signal_left: bool,
    pub signal_right: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Controls {
    pub throttle: f64,
    pub brake: f64,
    pub hand_brake: f64,
    pub steer: f64,
    #[serde(default)]
    pub signal_left: bool,
    #[serde(default)]
    pub signal_right: bool,
}

impl Controls {
    /// Returns the controls clamped to their valid ranges and whether anything changed.
    /// NaN inputs are treated as zero.
    pub fn clamped(&self) -> (Controls, bool) {
        fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
            if v.is_nan() {
                0.0
            } else {
                v.clamp(lo, hi)
            }
        }
        let c = Controls {
            throttle: clamp(self.throttle, 0.0, 1.0),
            brake: clamp(self.brake, 0.0, 1.0),
            hand_brake: clamp(self.hand_brake, 0.0, 1.0),
            steer: clamp(self.steer, -1.0, 1.0),
            ..*self
        };
        let changed = c.throttle.to_bits() != self.throttle.to_bits()
            || c.brake.to_bits() != self.brake.to_bits()
            || c.hand_brake.to_bits() != self.hand_brake.to_bits()
            || c.steer.to_bits() != self.steer.to_bits();
        (c, changed)
    }
}

/// Advances `state` by `dt` seconds.
pub fn step(state: &VehicleState, controls: &Controls, params: &VehiclePhysicsParams, dt: f64) -> VehicleState {
    let (c, changed) = controls.clamped();
    if changed {
        log::debug!("controls clamped: {controls:?} -> {c:?}");
    }
    let dt = dt.clamp(f64::MIN_POSITIVE, 0.1);

    let v = state.v_lon;
    let drive = c.throttle * params.peak_drive_accel() * (1.0 - v / params.max_speed);
    let brake_force = (c.brake + 3.0 * c.hand_brake) * params.braking_force;
    let brake = (brake_force / params.mass).min(params.max_brake_decel());
    let v_new = (v + (drive - brake) * dt).clamp(0.0, params.max_speed);

    let tire_angle = c.steer * params.max_steer;
    let mut yaw_rate = v_new * tire_angle.tan() / params.wheelbase;
    let lat_cap = params.max_lateral_accel();
    if (v_new * yaw_rate).abs() > lat_cap {
        yaw_rate = yaw_rate.signum() * lat_cap / v_new;
    }
    let heading = state.heading + yaw_rate * dt;

    VehicleState {
        x: state.x + v_new * heading.cos() * dt,
        y: state.y + v_new * heading.sin() * dt,
        heading,
        v_lon: v_new,
        v_lat: v_new * (0.5 * tire_angle.tan()),
        tire_angle,
        signal_left: c.signal_left,
        signal_right: c.signal_right,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpawnConfig {
    pub speed_min: f64,
    pub speed_max: f64,
    /// Minimum longitudinal gap between same-lane vehicles.
    pub min_gap: f64,
    /// Length of road, from `s = 0`, over which vehicles are placed. `None` uses the full road.
    pub extent: Option<f64>,
}

impl Default for SpawnConfig {
    fn default() -> Self {
        SpawnConfig { speed_min: 11.0, speed_max: 15.0, min_gap: 10.0, extent: None }
    }
}

/// Places `n` vehicles on forward-lane centers with same-lane gaps of at least `min_gap`.
pub fn spawn_traffic(road: &RoadModel, n: usize, seed: u64, cfg: &SpawnConfig) -> Result<Vec<VehicleState>> {
    if n == 0 {
        return Err(Error::config("agents", "need at least one vehicle"));
    }
    let extent = cfg.extent.unwrap_or(road.road_length).min(road.road_length);
    let per_lane = (extent / cfg.min_gap).floor() as usize + 1;
    let lanes = road.num_lanes_right;
    if n > per_lane * lanes {
        return Err(Error::Capacity(format!("{n} vehicles do not fit in {lanes} lanes of {extent} m with {} m gaps", cfg.min_gap)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Spread vehicles over lanes as evenly as possible, then shuffle the lane order.
    let mut counts = vec![n / lanes; lanes];
    for c in counts.iter_mut().take(n % lanes) {
        *c += 1;
    }
    for i in (1..lanes).rev() {
        let j = rng.random_range(0..=i);
        counts.swap(i, j);
    }

    let mut out = Vec::with_capacity(n);
    for (lane, &m) in counts.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let slack = extent - (m - 1) as f64 * cfg.min_gap;
        let mut u: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * slack).collect();
        u.sort_by(f64::total_cmp);
        for (i, ui) in u.into_iter().enumerate() {
            let speed = if cfg.speed_max > cfg.speed_min { rng.random_range(cfg.speed_min..cfg.speed_max) } else { cfg.speed_min };
            out.push(VehicleState { x: ui + i as f64 * cfg.min_gap, y: road.lane_center_y(lane), v_lon: speed, ..Default::default() });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DT: f64 = 0.01;

    #[test]
    fn rest_stays_at_rest() {
        let p = VehiclePhysicsParams::default();
        let s = VehicleState { x: 5.0, y: 3.25, ..Default::default() };
        let next = step(&s, &Controls::default(), &p, DT);
        assert_eq!(next, s);
    }

    #[test]
    fn braking_is_monotone_and_non_negative() {
        let p = VehiclePhysicsParams::default();
        let mut s = VehicleState { v_lon: 10.0, ..Default::default() };
        let c = Controls { brake: 1.0, ..Default::default() };
        let mut steps = 0;
        while s.v_lon > 0.0 {
            let next = step(&s, &c, &p, DT);
            assert!(next.v_lon < s.v_lon);
            assert!(next.v_lon >= 0.0);
            s = next;
            steps += 1;
            assert!(steps < 10_000);
        }
        for _ in 0..100 {
            s = step(&s, &c, &p, DT);
            assert_eq!(s.v_lon, 0.0);
        }
    }

    #[test]
    fn full_throttle_matches_discrete_closed_form() {
        // Euler on v' = a0 (1 - v / vmax) from v0 = 0 gives v_n = vmax (1 - (1 - dt a0 / vmax)^n).
        let p = VehiclePhysicsParams::default();
        let a0 = 0.5 * (590.0f64 * 0.5).min(0.1 * 12.0 * 50.0 * GRAVITY) / 50.0;
        assert!((p.peak_drive_accel() - a0).abs() < 1e-12);
        let c = Controls { throttle: 1.0, ..Default::default() };
        let mut s = VehicleState { y: 3.25, ..Default::default() };
        let mut prev = 0.0;
        for n in 1..=1000 {
            s = step(&s, &c, &p, DT);
            let expected = p.max_speed * (1.0 - (1.0 - DT * a0 / p.max_speed).powi(n));
            assert!((s.v_lon - expected).abs() < 1e-9, "step {n}: {} vs {expected}", s.v_lon);
            assert!(s.v_lon > prev && s.v_lon <= p.max_speed);
            prev = s.v_lon;
            assert_eq!(s.y, 3.25);
            assert_eq!(s.heading, 0.0);
        }
    }

    #[test]
    fn controls_are_clamped() {
        let (c, changed) = Controls { throttle: 2.0, steer: -3.0, brake: f64::NAN, ..Default::default() }.clamped();
        assert!(changed);
        assert_eq!((c.throttle, c.steer, c.brake), (1.0, -1.0, 0.0));
        let (_, changed) = Controls { throttle: 0.5, ..Default::default() }.clamped();
        assert!(!changed);
    }

    #[test]
    fn lateral_acceleration_is_capped() {
        let p = VehiclePhysicsParams::default();
        let s = VehicleState { v_lon: 20.0, ..Default::default() };
        let next = step(&s, &Controls { steer: 1.0, ..Default::default() }, &p, DT);
        let yaw_rate = next.heading / DT;
        assert!((next.v_lon * yaw_rate).abs() <= p.max_lateral_accel() + 1e-9);
        assert!(next.tire_angle.abs() <= p.max_steer);
    }

    #[test]
    fn spawn_is_deterministic() {
        let road = RoadModel::default();
        let cfg = SpawnConfig::default();
        assert_eq!(spawn_traffic(&road, 1, 7, &cfg).unwrap(), spawn_traffic(&road, 1, 7, &cfg).unwrap());
    }

    #[test]
    fn spawn_respects_gaps() {
        let road = RoadModel::default();
        let cfg = SpawnConfig::default();
        for seed in 0..20 {
            let v = spawn_traffic(&road, 10, seed, &cfg).unwrap();
            assert_eq!(v.len(), 10);
            for (i, a) in v.iter().enumerate() {
                assert!(a.v_lon >= cfg.speed_min && a.v_lon <= cfg.speed_max);
                for b in &v[i + 1..] {
                    if a.y == b.y {
                        assert!((a.x - b.x).abs() >= 10.0 - 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn spawn_capacity_error() {
        let road = RoadModel::build_straight_highway(3, 3, 6.5, 100.0).unwrap();
        let err = spawn_traffic(&road, 50, 1, &SpawnConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    #[test]
    fn default_params_validate() {
        VehiclePhysicsParams::default().validate().unwrap();
        let bad = VehiclePhysicsParams { traction: 1.5, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
