//! Short-term driving-intention prediction: a desk-scale traffic simulator that records
//! intention-labelled trajectory sequences, LSTM/GRU per-timestep classifiers trained by
//! backpropagation through time, per-timestep precision/recall evaluation, and a live
//! inference loop with majority voting and risk-spot detection.

pub mod config;
pub mod dataset;
pub mod demo;
pub mod error;
pub mod eval;
pub mod generate;
pub mod infer;
pub mod planner;
pub mod render;
pub mod rnn;
pub mod road;
pub mod stream;
pub mod vehicle;
pub mod world;

pub use error::{Error, Result};
pub use planner::{IntentionLabel, Path, PidGains, PidState, PlannerConfig, Scene};
pub use road::{LaneFrame, RoadModel};
pub use vehicle::{Controls, VehiclePhysicsParams, VehicleState};
