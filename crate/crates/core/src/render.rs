//! Static SVG snapshots: lanes, vehicles, projected paths and flagged risk cells.

use std::fmt::Write;

use crate::infer::RiskFlag;
use crate::planner::IntentionLabel;
use crate::road::RoadModel;
use crate::vehicle::{VehicleState, VEHICLE_LENGTH, VEHICLE_WIDTH};

const PX_PER_M: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleMark {
    pub id: u32,
    pub state: VehicleState,
    pub vote: Option<IntentionLabel>,
    pub path: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub time_ms: u64,
    pub vehicles: Vec<VehicleMark>,
    pub flags: Vec<RiskFlag>,
}

fn color(label: Option<IntentionLabel>) -> &'static str {
    match label {
        None => "#9e9e9e",
        Some(IntentionLabel::LaneKeep) => "#1e88e5",
        Some(IntentionLabel::ChangeLaneRight) => "#8e24aa",
        Some(IntentionLabel::ChangeLaneLeft) => "#e53935",
        Some(IntentionLabel::Decelerate) => "#fb8c00",
        Some(IntentionLabel::Accelerate) => "#43a047",
        Some(_) => "#000000",
    }
}

/// Renders the road section `[x0, x1]`. World `y` grows upwards on screen.
pub fn render_svg(road: &RoadModel, snap: &Snapshot, x0: f64, x1: f64, cell_length: f64) -> String {
    let (w, h) = ((x1 - x0) * PX_PER_M, road.width() * PX_PER_M);
    let sx = |x: f64| (x - x0) * PX_PER_M;
    let sy = |y: f64| h - y * PX_PER_M;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{:.0}" viewBox="0 0 {w:.1} {:.1}">"#,
        h + 20.0,
        h + 20.0
    );
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{w:.1}" height="{h:.1}" fill="#424242"/>"##);
    for k in 1..road.num_lanes() {
        let y = sy(k as f64 * road.lane_width);
        let dash = if k == road.num_lanes_right { "" } else { r#" stroke-dasharray="12 10""# };
        let _ = writeln!(s, r##"<line x1="0" y1="{y:.1}" x2="{w:.1}" y2="{y:.1}" stroke="#fafafa" stroke-width="1.5"{dash}/>"##);
    }
    for f in &snap.flags {
        let bx = f.cell.bucket as f64 * cell_length;
        let ly = (f.cell.lane + 1) as f64 * road.lane_width;
        let _ = writeln!(
            s,
            r##"<rect class="risk" x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="#ffeb3b" fill-opacity="0.45"/>"##,
            sx(bx),
            sy(ly),
            cell_length * PX_PER_M,
            road.lane_width * PX_PER_M
        );
    }
    for v in &snap.vehicles {
        if v.path.len() >= 2 {
            let pts: Vec<String> = v.path.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2" stroke-opacity="0.8"/>"#,
                pts.join(" "),
                color(v.vote)
            );
        }
        let (cx, cy) = (sx(v.state.x), sy(v.state.y));
        let deg = -v.state.heading.to_degrees();
        let (lw, lh) = (VEHICLE_LENGTH * PX_PER_M, VEHICLE_WIDTH * PX_PER_M);
        let _ = writeln!(
            s,
            r#"<g transform="translate({cx:.1},{cy:.1}) rotate({deg:.2})"><rect class="vehicle" x="{:.1}" y="{:.1}" width="{lw:.1}" height="{lh:.1}" fill="{}"/></g>"#,
            -lw / 2.0,
            -lh / 2.0,
            color(v.vote)
        );
        let label = v.vote.map(|l| l.name()).unwrap_or("warming up");
        let _ = writeln!(
            s,
            r##"<text x="{cx:.1}" y="{:.1}" font-size="10" fill="#ffffff" text-anchor="middle">{} {}</text>"##,
            cy - lh,
            v.id,
            label
        );
    }
    let _ = writeln!(s, r#"<text x="4" y="{:.1}" font-size="12">t = {:.1} s</text>"#, h + 15.0, snap.time_ms as f64 / 1000.0);
    s.push_str("</svg>\n");
    s
}
