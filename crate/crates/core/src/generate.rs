//! Dataset generation: a simulation thread produces labelled frames into a bounded FIFO,
//! the calling thread windows them into sequences and hands them to a sink.
//!
//! Train and test data come from disjoint episode seeds. The producer mirrors the
//! consumer's windowing so it can stop exactly when each split holds the requested
//! number of clean sequences.

use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{record_stream, DatasetManifest, FeatureVariant, RecordStats, SequenceSink, Split, StreamItem, Windower};
use crate::error::{Error, Result};
use crate::world::{World, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub world: WorldConfig,
    pub seq_len: usize,
    /// Clean sequences to produce per split.
    pub train_sequences: u64,
    pub test_sequences: u64,
    pub train_seed: u64,
    pub test_seed: u64,
    pub episode_s: f64,
    pub fifo_capacity: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            world: WorldConfig::default(),
            seq_len: 12,
            train_sequences: 5000,
            test_sequences: 1000,
            train_seed: 1,
            test_seed: 2,
            episode_s: 300.0,
            fifo_capacity: 1024,
        }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if !matches!(self.seq_len, 6 | 12) {
            return Err(Error::config("seq_len", "must be 6 or 12"));
        }
        if self.world.frame_period_ms() != crate::dataset::FRAME_PERIOD_MS {
            return Err(Error::config("log_frequency", "recorded datasets use a 200 ms readout (log_frequency 20)"));
        }
        if self.train_seed == self.test_seed {
            return Err(Error::config("test_seed", "must differ from train_seed"));
        }
        if !(self.episode_s > 0.0) {
            return Err(Error::config("episode_s", "must be positive"));
        }
        if self.fifo_capacity == 0 {
            return Err(Error::config("fifo_capacity", "must be at least 1"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest::new(FeatureVariant::A3, self.seq_len, self.world.scene, self.train_seed, self.hash())
    }
}

/// Seed of episode `k` of a split.
pub fn episode_seed(split_seed: u64, k: u64) -> u64 {
    let mut z = split_seed ^ k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenerateStats {
    pub train: RecordStats,
    pub test: RecordStats,
    pub episodes: u64,
}

/// Produces one split into `tx`; returns the producer-side windowing stats.
fn produce_split(cfg: &GenerateConfig, split: Split, tx: &SyncSender<StreamItem>) -> Result<(RecordStats, u64)> {
    let (seed, target) = match split {
        Split::Train => (cfg.train_seed, cfg.train_sequences),
        Split::Test => (cfg.test_seed, cfg.test_sequences),
    };
    let mut mirror = Windower::new(cfg.seq_len);
    let frames_per_episode = (cfg.episode_s * 1000.0 / cfg.world.frame_period_ms() as f64).ceil() as u64;
    let hang_up = |_| Error::Contract("recorder hung up".into());
    let mut episodes = 0;
    while mirror.stats().clean_sequences < target {
        let mut world = World::new(cfg.world.clone(), episode_seed(seed, episodes))?;
        world.set_split(split);
        episodes += 1;
        let mut produced_any = false;
        'episode: for _ in 0..frames_per_episode {
            let batch = world.advance_frame()?;
            for id in batch.ended {
                mirror.end_agent(id);
                tx.send(StreamItem::AgentEnd(id)).map_err(hang_up)?;
            }
            for f in batch.frames {
                produced_any = true;
                mirror.push(&f);
                tx.send(StreamItem::Frame(f)).map_err(hang_up)?;
                if mirror.stats().clean_sequences >= target {
                    break 'episode;
                }
            }
        }
        // Agent ids restart every episode; flush every open window.
        for a in world.agents() {
            mirror.end_agent(a.id);
            tx.send(StreamItem::AgentEnd(a.id)).map_err(hang_up)?;
        }
        if !produced_any {
            return Err(Error::Data("episode produced no frames".into()));
        }
    }
    Ok((mirror.stats(), episodes))
}

/// Runs the simulation until both splits hold their clean-sequence quota, writing every
/// completed sequence (clean or not) to `sink`, train split first.
pub fn generate(cfg: &GenerateConfig, sink: &mut dyn SequenceSink) -> Result<GenerateStats> {
    cfg.validate()?;
    let (tx, rx) = sync_channel(cfg.fifo_capacity);
    let producer_cfg = cfg.clone();
    let producer = thread::spawn(move || -> Result<GenerateStats> {
        let (train, e1) = produce_split(&producer_cfg, Split::Train, &tx)?;
        let (test, e2) = produce_split(&producer_cfg, Split::Test, &tx)?;
        Ok(GenerateStats { train, test, episodes: e1 + e2 })
    });
    let consumed = record_stream(rx, cfg.seq_len, sink);
    let produced = producer.join().map_err(|_| Error::Contract("producer thread panicked".into()))?;
    let consumed = consumed?;
    let stats = produced?;
    debug_assert_eq!(consumed.sequences, stats.train.sequences + stats.test.sequences);
    Ok(stats)
}
