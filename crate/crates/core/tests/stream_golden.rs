use std::fs::File;
use std::io::BufReader;

use seer_core::stream::{FrameMessage, FrameReader};
use seer_core::world::{World, WorldConfig};

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/golden_100.ndjson");

#[test]
fn golden_capture_parses_to_100_frames() {
    let frames: Vec<FrameMessage> = FrameReader::new(BufReader::new(File::open(GOLDEN).unwrap())).map(|m| m.unwrap()).collect();
    assert_eq!(frames.len(), 100);
    assert!(frames.iter().enumerate().all(|(k, f)| f.tick == k as u64));
    assert!(frames.windows(2).all(|w| w[1].time_ms == w[0].time_ms + 200));
}

#[test]
fn golden_capture_reencodes_byte_for_byte() {
    let text = std::fs::read_to_string(GOLDEN).unwrap();
    for line in text.lines() {
        assert_eq!(FrameMessage::decode(line).unwrap().encode(), line);
    }
}

// The capture was recorded from a default world with seed 2024.
#[test]
fn golden_capture_matches_the_simulator() {
    let text = std::fs::read_to_string(GOLDEN).unwrap();
    let mut w = World::new(WorldConfig::default(), 2024).unwrap();
    for (k, line) in text.lines().enumerate() {
        w.advance_frame().unwrap();
        assert_eq!(FrameMessage::from_world(&w, k as u64).encode(), line, "frame {k}");
    }
}
