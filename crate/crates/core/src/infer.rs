//! Live intention inference: per-agent sliding windows, majority vote, intention-driven
//! path projection and spot-conflict detection.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::mpsc::{Receiver, SyncSender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dataset::{extract_features, FeatureVariant};
use crate::error::{Error, Result};
use crate::planner::{plan_path, IntentionLabel, Path, PlannerConfig, NUM_TRAINABLE};
use crate::rnn::{batch_steps, RnnModel};
use crate::road::RoadModel;
use crate::vehicle::VehicleState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Seconds of travel covered by a projected path.
    pub horizon_s: f64,
    /// Longitudinal size of a risk cell, metres.
    pub cell_length: f64,
    /// Added to both ends of every occupancy interval, seconds.
    pub time_padding_s: f64,
    /// Arc-length spacing of occupancy samples along a path, metres.
    pub sample_step: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig { horizon_s: 3.0, cell_length: 5.0, time_padding_s: 0.5, sample_step: 0.5 }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("horizon_s", self.horizon_s), ("cell_length", self.cell_length), ("sample_step", self.sample_step)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !(self.time_padding_s >= 0.0 && self.time_padding_s.is_finite()) {
            return Err(Error::config("time_padding_s", "must be non-negative"));
        }
        Ok(())
    }
}

/// Modal class; ties go to whichever tied class appears latest.
pub fn vote(predictions: &[usize]) -> Result<usize> {
    if predictions.is_empty() {
        return Err(Error::Contract("vote over an empty prediction list".into()));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &p in predictions {
        *counts.entry(p).or_default() += 1;
    }
    let top = *counts.values().max().unwrap();
    let winner = predictions.iter().rev().find(|p| counts[p] == top).unwrap();
    Ok(*winner)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub path: Path,
    /// The requested intention was infeasible and LaneKeep was projected instead.
    pub fallback: bool,
}

/// Path the agent is expected to follow under `intention`, ignoring other traffic.
pub fn project_path(
    intention: IntentionLabel,
    state: &VehicleState,
    road: &RoadModel,
    planner: &PlannerConfig,
    horizon_s: f64,
) -> Result<Projection> {
    let cfg = PlannerConfig { horizon_s, ..*planner };
    match plan_path(intention, state, road, &[], &cfg) {
        Ok(path) => Ok(Projection { path, fallback: false }),
        Err(Error::InfeasibleIntention(_)) => {
            Ok(Projection { path: plan_path(IntentionLabel::LaneKeep, state, road, &[], &cfg)?, fallback: true })
        }
        Err(e) => Err(e),
    }
}

/// Lane index and longitudinal bucket of a risk cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellId {
    pub lane: usize,
    pub bucket: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskFlag {
    pub cell: CellId,
    /// Lower id first.
    pub agents: (u32, u32),
    /// Intersection of the two padded occupancy intervals, seconds from now.
    pub window: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentPath {
    pub agent: u32,
    pub path: Path,
    pub speed: f64,
}

/// Padded time interval during which each cell is occupied by the agent's reference point.
///
/// A stationary agent holds its cells for the whole horizon.
pub fn occupancy(p: &AgentPath, road: &RoadModel, cfg: &InferConfig) -> BTreeMap<CellId, (f64, f64)> {
    let mut out: BTreeMap<CellId, (f64, f64)> = BTreeMap::new();
    let len = p.path.length();
    let n = (len / cfg.sample_step).ceil() as usize;
    for k in 0..=n {
        let at = (k as f64 * cfg.sample_step).min(len);
        let w = p.path.point_at(at);
        if !road.contains(w.x, w.y) {
            continue;
        }
        let cell = CellId { lane: road.nearest_lane(w.y), bucket: (w.x / cfg.cell_length).floor() as i64 };
        let (t0, t1) = if p.speed > 1e-6 { (at / p.speed, at / p.speed) } else { (0.0, cfg.horizon_s) };
        let e = out.entry(cell).or_insert((t0, t1));
        e.0 = e.0.min(t0);
        e.1 = e.1.max(t1);
    }
    for iv in out.values_mut() {
        iv.0 -= cfg.time_padding_s;
        iv.1 += cfg.time_padding_s;
    }
    out
}

/// Every cell claimed by two agents over intersecting intervals, sorted by cell then pair.
pub fn detect_conflicts(paths: &[AgentPath], road: &RoadModel, cfg: &InferConfig) -> Vec<RiskFlag> {
    let mut by_cell: BTreeMap<CellId, Vec<(u32, (f64, f64))>> = BTreeMap::new();
    for p in paths {
        for (cell, iv) in occupancy(p, road, cfg) {
            by_cell.entry(cell).or_default().push((p.agent, iv));
        }
    }
    let mut flags = Vec::new();
    for (cell, mut claims) in by_cell {
        claims.sort_by_key(|c| c.0);
        for i in 0..claims.len() {
            for j in i + 1..claims.len() {
                let ((a, ia), (b, ib)) = (claims[i], claims[j]);
                let (lo, hi) = (ia.0.max(ib.0), ia.1.min(ib.1));
                if a != b && lo <= hi {
                    flags.push(RiskFlag { cell, agents: (a, b), window: (lo, hi) });
                }
            }
        }
    }
    flags
}

/// Sliding window of one agent.
#[derive(Debug, Clone)]
pub struct PredictionWindow {
    features: VecDeque<[f64; 3]>,
    /// Per-step predictions over the current window.
    pub predictions: Vec<usize>,
    pub vote: Option<usize>,
    pub counts: Vec<u32>,
}

impl PredictionWindow {
    fn new(classes: usize) -> Self {
        PredictionWindow { features: VecDeque::new(), predictions: Vec::new(), vote: None, counts: vec![0; classes] }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub agent: u32,
    pub state: VehicleState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TickInput {
    pub tick: u64,
    pub time_ms: u64,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPrediction {
    pub agent: u32,
    /// Prediction at the newest frame.
    pub step: usize,
    pub vote: usize,
    pub counts: Vec<u32>,
    /// The voted intention was infeasible here; LaneKeep was projected.
    pub fallback: bool,
    /// Projected path as `(x, y)` points.
    pub path: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickResult {
    pub tick: u64,
    pub time_ms: u64,
    /// Agents with a full window, by id.
    pub predictions: Vec<AgentPrediction>,
    pub flags: Vec<RiskFlag>,
    pub latency_us: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyStats {
    samples: Vec<Duration>,
}

impl LatencyStats {
    pub fn record(&mut self, d: Duration) {
        self.samples.push(d);
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }

    pub fn mean(&self) -> Option<Duration> {
        (!self.samples.is_empty()).then(|| self.samples.iter().sum::<Duration>() / self.samples.len() as u32)
    }

    pub fn max(&self) -> Option<Duration> {
        self.samples.iter().max().copied()
    }

    /// Nearest-rank percentile, `q` in `[0, 1]`.
    pub fn percentile(&self, q: f64) -> Option<Duration> {
        if self.samples.is_empty() {
            return None;
        }
        let mut s = self.samples.clone();
        s.sort();
        let rank = ((q.clamp(0.0, 1.0) * s.len() as f64).ceil() as usize).clamp(1, s.len());
        Some(s[rank - 1])
    }
}

/// Owns every agent window; feed it one [`TickInput`] per readout tick.
pub struct InferenceEngine {
    model: Arc<RnnModel>,
    variant: FeatureVariant,
    road: RoadModel,
    planner: PlannerConfig,
    cfg: InferConfig,
    windows: BTreeMap<u32, PredictionWindow>,
    latency: LatencyStats,
}

impl InferenceEngine {
    pub fn new(model: Arc<RnnModel>, road: RoadModel, planner: PlannerConfig, cfg: InferConfig) -> Result<Self> {
        cfg.validate()?;
        let variant = FeatureVariant::from_dim(model.config.input_dim)
            .ok_or_else(|| Error::Shape(format!("model takes {} features; live frames provide 2 or 3", model.config.input_dim)))?;
        if model.config.classes != NUM_TRAINABLE {
            return Err(Error::Shape(format!("model has {} classes, intentions have {NUM_TRAINABLE}", model.config.classes)));
        }
        Ok(InferenceEngine { model, variant, road, planner, cfg, windows: BTreeMap::new(), latency: LatencyStats::default() })
    }

    pub fn seq_len(&self) -> usize {
        self.model.config.seq_len
    }

    pub fn window(&self, agent: u32) -> Option<&PredictionWindow> {
        self.windows.get(&agent)
    }

    pub fn latency(&self) -> &LatencyStats {
        &self.latency
    }

    /// Agents missing from `input` lose their window.
    pub fn process(&mut self, input: &TickInput) -> Result<TickResult> {
        let start = Instant::now();
        let t_len = self.seq_len();
        let dim = self.variant.dim();
        let classes = self.model.config.classes;

        let mut states = BTreeMap::new();
        for o in &input.observations {
            if states.insert(o.agent, o.state).is_some() {
                return Err(Error::protocol("id", format!("agent {} observed twice in one tick", o.agent)));
            }
        }
        self.windows.retain(|id, _| states.contains_key(id));
        for (&id, state) in &states {
            let fv = extract_features(state, &self.road, self.variant)?;
            let w = self.windows.entry(id).or_insert_with(|| PredictionWindow::new(classes));
            w.features.push_back(fv.values);
            if w.features.len() > t_len {
                w.features.pop_front();
            }
        }

        let full: Vec<u32> = self.windows.iter().filter(|(_, w)| w.len() == t_len).map(|(&id, _)| id).collect();
        if !full.is_empty() {
            let flat: Vec<Vec<f64>> =
                full.iter().map(|id| self.windows[id].features.iter().flat_map(|f| f[..dim].iter().copied()).collect()).collect();
            let seqs: Vec<&[f64]> = flat.iter().map(|f| f.as_slice()).collect();
            let preds = self.model.predict(&batch_steps(&seqs, t_len, dim))?;
            for (b, id) in full.iter().enumerate() {
                let w = self.windows.get_mut(id).unwrap();
                w.predictions = (0..t_len).map(|t| preds[t][b]).collect();
                w.counts = vec![0; classes];
                for &p in &w.predictions {
                    w.counts[p] += 1;
                }
                w.vote = Some(vote(&w.predictions)?);
            }
        }

        let mut predictions = Vec::with_capacity(full.len());
        let mut paths = Vec::with_capacity(full.len());
        for id in &full {
            let w = &self.windows[id];
            let v = w.vote.expect("full windows are voted");
            let intention = IntentionLabel::from_index(v).expect("model classes are intentions");
            let state = states[id];
            let proj = project_path(intention, &state, &self.road, &self.planner, self.cfg.horizon_s)?;
            predictions.push(AgentPrediction {
                agent: *id,
                step: *w.predictions.last().unwrap(),
                vote: v,
                counts: w.counts.clone(),
                fallback: proj.fallback,
                path: proj.path.waypoints.iter().map(|p| (p.x, p.y)).collect(),
            });
            paths.push(AgentPath { agent: *id, path: proj.path, speed: state.v_lon.max(0.0) });
        }
        let flags = if paths.len() >= 2 { detect_conflicts(&paths, &self.road, &self.cfg) } else { Vec::new() };

        let elapsed = start.elapsed();
        self.latency.record(elapsed);
        Ok(TickResult { tick: input.tick, time_ms: input.time_ms, predictions, flags, latency_us: elapsed.as_micros() as u64 })
    }
}

/// Drains `frames` until the sender hangs up. Ticks without agents produce no output.
pub fn run_inference_loop(
    engine: &mut InferenceEngine,
    frames: Receiver<TickInput>,
    results: SyncSender<TickResult>,
) -> Result<LatencyStats> {
    for input in frames {
        if input.observations.is_empty() {
            engine.windows.clear();
            continue;
        }
        let out = engine.process(&input)?;
        if results.send(out).is_err() {
            break;
        }
    }
    Ok(engine.latency.clone())
}
