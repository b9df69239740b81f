//! Straight multi-lane road and lane-frame (Frenet) conversion.
//!
//! World frame: `x` runs along the road from 0 to `road_length`, `y` is
//! measured leftwards from the rightmost road boundary. Lanes are indexed
//! from the right: indices `0..num_lanes_right` carry traffic in `+x`,
//! the following `num_lanes_left` lanes carry oncoming traffic in `-x`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadModel {
    pub num_lanes_right: usize,
    pub num_lanes_left: usize,
    pub lane_width: f64,
    pub road_length: f64,
}

/// Position of a vehicle relative to the lane it is closest to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaneFrame {
    pub s: f64,
    pub d: f64,
    pub lane_index: usize,
    pub heading_rel: f64,
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

impl Default for RoadModel {
    fn default() -> Self {
        RoadModel { num_lanes_right: 3, num_lanes_left: 3, lane_width: 6.5, road_length: 1000.0 }
    }
}

impl RoadModel {
    pub fn build_straight_highway(num_lanes_right: usize, num_lanes_left: usize, lane_width: f64, road_length: f64) -> Result<Self> {
        let road = RoadModel { num_lanes_right, num_lanes_left, lane_width, road_length };
        road.validate()?;
        Ok(road)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_lanes_right < 1 {
            return Err(Error::config("num_lane_right", "must be at least 1"));
        }
        if !(self.lane_width > 0.0 && self.lane_width.is_finite()) {
            return Err(Error::config("lane_width", "must be positive"));
        }
        if !(self.road_length > 0.0 && self.road_length.is_finite()) {
            return Err(Error::config("road_length", "must be positive"));
        }
        Ok(())
    }

    pub fn num_lanes(&self) -> usize {
        self.num_lanes_right + self.num_lanes_left
    }

    pub fn width(&self) -> f64 {
        self.num_lanes() as f64 * self.lane_width
    }

    /// Lateral offset of the center of `lane` from the rightmost boundary.
    pub fn lane_center_y(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    pub fn is_forward(&self, lane: usize) -> bool {
        lane < self.num_lanes_right
    }

    /// Direction of travel of `lane` in the world frame.
    pub fn lane_heading(&self, lane: usize) -> f64 {
        if self.is_forward(lane) {
            0.0
        } else {
            PI
        }
    }

    /// Same-direction neighbour on the driver's left, if any.
    pub fn left_of(&self, lane: usize) -> Option<usize> {
        if self.is_forward(lane) {
            (lane + 1 < self.num_lanes_right).then_some(lane + 1)
        } else {
            (lane > self.num_lanes_right).then(|| lane - 1)
        }
    }

    /// Same-direction neighbour on the driver's right, if any.
    pub fn right_of(&self, lane: usize) -> Option<usize> {
        if self.is_forward(lane) {
            (lane > 0).then(|| lane - 1)
        } else {
            (lane + 1 < self.num_lanes()).then_some(lane + 1)
        }
    }

    /// Index of the lane whose center is nearest to `y`; boundary ties go to the lower index.
    pub fn nearest_lane(&self, y: f64) -> usize {
        let f = y / self.lane_width - 0.5;
        let k = (f - 0.5).ceil();
        k.clamp(0.0, (self.num_lanes() - 1) as f64) as usize
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.road_length).contains(&x) && (0.0..=self.width()).contains(&y)
    }

    pub fn to_lane_frame(&self, x: f64, y: f64, heading: f64) -> Result<LaneFrame> {
        if !self.contains(x, y) {
            return Err(Error::OutOfBounds(format!(
                "point ({x:.3}, {y:.3}) outside road corridor [0, {}] x [0, {}]",
                self.road_length,
                self.width()
            )));
        }
        let lane = self.nearest_lane(y);
        let offset = y - self.lane_center_y(lane);
        let (s, d) = if self.is_forward(lane) { (x, offset) } else { (self.road_length - x, -offset) };
        Ok(LaneFrame { s, d, lane_index: lane, heading_rel: wrap_angle(heading - self.lane_heading(lane)) })
    }

    pub fn from_lane_frame(&self, lf: &LaneFrame) -> (f64, f64, f64) {
        let center = self.lane_center_y(lf.lane_index);
        let (x, y) = if self.is_forward(lf.lane_index) { (lf.s, center + lf.d) } else { (self.road_length - lf.s, center - lf.d) };
        (x, y, wrap_angle(lf.heading_rel + self.lane_heading(lf.lane_index)))
    }
}
