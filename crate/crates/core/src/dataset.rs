//! Feature extraction, per-agent windowing into fixed-length labelled sequences, and the
//! `SEERSEQ1` dataset container.
//!
//! # File layout
//!
//! All integers little-endian.
//!
//! ```text
//! magic            8 bytes  "SEERSEQ1"
//! manifest_len     u32
//! manifest         manifest_len bytes of UTF-8 JSON (DatasetManifest)
//! record*          u32 payload_len | payload | u32 crc32(payload)
//! ```
//!
//! Record payload:
//!
//! ```text
//! sequence_id u64 | agent_id u32 | scene u8 | split u8 | feature_dim u8 | frames u16
//! frames × ( feature_dim × f32 | raw_label u8 | timestamp_ms u64 )
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path as FsPath, PathBuf};
use std::sync::mpsc::Receiver;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::planner::{IntentionLabel, Scene};
use crate::road::RoadModel;
use crate::vehicle::VehicleState;

pub const DATASET_MAGIC: &[u8; 8] = b"SEERSEQ1";
pub const FORMAT_VERSION: u32 = 1;
pub const FRAME_PERIOD_MS: u64 = 200;
/// Allowed deviation of consecutive frame timestamps from the frame period.
pub const PERIOD_TOLERANCE_MS: u64 = 1;

const MAX_RECORD_LEN: u32 = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureVariant {
    /// Lateral and longitudinal lane-frame position.
    A2,
    /// Position plus heading relative to the lane.
    A3,
}

impl FeatureVariant {
    pub fn dim(self) -> usize {
        match self {
            FeatureVariant::A2 => 2,
            FeatureVariant::A3 => 3,
        }
    }

    pub fn from_dim(dim: usize) -> Option<Self> {
        match dim {
            2 => Some(FeatureVariant::A2),
            3 => Some(FeatureVariant::A3),
            _ => None,
        }
    }
}

/// Normalised lane-frame features: `d / lane_width`, `s / road_length`, `heading_rel / pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub variant: FeatureVariant,
    pub values: [f64; 3],
}

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.values[..self.variant.dim()]
    }

    pub fn to_f32(&self) -> [f32; 3] {
        self.values.map(|v| v as f32)
    }

    /// Lateral offset, arc position and relative heading in SI units.
    pub fn denormalize(&self, road: &RoadModel) -> (f64, f64, f64) {
        (self.values[0] * road.lane_width, self.values[1] * road.road_length, self.values[2] * std::f64::consts::PI)
    }
}

pub fn extract_features(state: &VehicleState, road: &RoadModel, variant: FeatureVariant) -> Result<FeatureVector> {
    let lf = road.to_lane_frame(state.x, state.y, state.heading)?;
    let heading = match variant {
        FeatureVariant::A2 => 0.0,
        FeatureVariant::A3 => lf.heading_rel / std::f64::consts::PI,
    };
    Ok(FeatureVector { variant, values: [lf.d / road.lane_width, lf.s / road.road_length, heading] })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    /// Only the first `variant.dim()` entries are meaningful; the rest are zero.
    pub features: [f32; 3],
    pub label: IntentionLabel,
    pub timestamp_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub sequence_id: u64,
    pub agent_id: u32,
    pub scene: Scene,
    pub split: Split,
    pub variant: FeatureVariant,
    pub frames: Vec<Frame>,
}

impl SequenceRecord {
    pub fn labels(&self) -> impl Iterator<Item = IntentionLabel> + '_ {
        self.frames.iter().map(|f| f.label)
    }

    pub fn is_clean(&self) -> bool {
        self.labels().all(IntentionLabel::is_trainable)
    }

    /// The same sequence seen through a narrower feature variant (A3 to A2 drops heading).
    pub fn project(&self, variant: FeatureVariant) -> Result<SequenceRecord> {
        if variant.dim() > self.variant.dim() {
            return Err(Error::Data(format!("cannot widen {:?} features to {:?}", self.variant, variant)));
        }
        let mut out = self.clone();
        out.variant = variant;
        for f in &mut out.frames {
            for v in &mut f.features[variant.dim()..] {
                *v = 0.0;
            }
        }
        Ok(out)
    }

    fn validate(&self, seq_len: usize) -> Result<()> {
        if self.frames.len() != seq_len {
            return Err(Error::Data(format!("sequence has {} frames, expected {seq_len}", self.frames.len())));
        }
        for w in self.frames.windows(2) {
            let dt = w[1].timestamp_ms.checked_sub(w[0].timestamp_ms).unwrap_or(0);
            if dt.abs_diff(FRAME_PERIOD_MS) > PERIOD_TOLERANCE_MS {
                return Err(Error::Data(format!("frame spacing {dt} ms, expected {FRAME_PERIOD_MS}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub feature_variant: FeatureVariant,
    pub seq_len: usize,
    pub frame_period_ms: u64,
    pub class_count: usize,
    pub scene: Scene,
    /// Records per split.
    pub counts: BTreeMap<Split, u64>,
    /// Frames per raw label, indexed by label.
    pub label_frame_counts: Vec<u64>,
    pub seed: u64,
    pub config_hash: String,
}

impl DatasetManifest {
    pub fn new(variant: FeatureVariant, seq_len: usize, scene: Scene, seed: u64, config_hash: String) -> Self {
        DatasetManifest {
            version: FORMAT_VERSION,
            feature_variant: variant,
            seq_len,
            frame_period_ms: FRAME_PERIOD_MS,
            class_count: crate::planner::NUM_TRAINABLE,
            scene,
            counts: BTreeMap::from([(Split::Train, 0), (Split::Test, 0)]),
            label_frame_counts: vec![0; IntentionLabel::ALL.len()],
            seed,
            config_hash,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    fn account(&mut self, rec: &SequenceRecord) {
        *self.counts.entry(rec.split).or_default() += 1;
        for l in rec.labels() {
            self.label_frame_counts[l.index()] += 1;
        }
    }
}

pub fn encode_record(rec: &SequenceRecord) -> Vec<u8> {
    let dim = rec.variant.dim();
    let mut buf = Vec::with_capacity(17 + rec.frames.len() * (4 * dim + 9));
    buf.extend_from_slice(&rec.sequence_id.to_le_bytes());
    buf.extend_from_slice(&rec.agent_id.to_le_bytes());
    buf.push(rec.scene.tag());
    buf.push(rec.split.tag());
    buf.push(dim as u8);
    buf.extend_from_slice(&(rec.frames.len() as u16).to_le_bytes());
    for f in &rec.frames {
        for v in &f.features[..dim] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(f.label as u8);
        buf.extend_from_slice(&f.timestamp_ms.to_le_bytes());
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: u64,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.base + self.pos as u64, "record payload too short"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes one record payload; `offset` is used in error messages.
pub fn decode_record(bytes: &[u8], offset: u64) -> Result<SequenceRecord> {
    let mut c = Cursor { bytes, pos: 0, base: offset };
    let sequence_id = c.u64()?;
    let agent_id = c.u32()?;
    let scene = Scene::from_tag(c.u8()?).ok_or_else(|| Error::format(offset + 12, "unknown scene tag"))?;
    let split = Split::from_tag(c.u8()?).ok_or_else(|| Error::format(offset + 13, "unknown split tag"))?;
    let dim = c.u8()? as usize;
    let variant = FeatureVariant::from_dim(dim).ok_or_else(|| Error::format(offset + 14, format!("feature dim {dim}")))?;
    let n = c.u16()? as usize;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let mut features = [0f32; 3];
        for v in features.iter_mut().take(dim) {
            *v = c.f32()?;
        }
        let at = offset + c.pos as u64;
        let label = IntentionLabel::from_index(c.u8()? as usize).ok_or_else(|| Error::format(at, "unknown label"))?;
        frames.push(Frame { features, label, timestamp_ms: c.u64()? });
    }
    if c.pos != bytes.len() {
        return Err(Error::format(offset + c.pos as u64, "trailing bytes in record payload"));
    }
    Ok(SequenceRecord { sequence_id, agent_id, scene, split, variant, frames })
}

/// Destination for completed sequences.
pub trait SequenceSink {
    fn write(&mut self, rec: &SequenceRecord) -> Result<()>;
}

impl SequenceSink for Vec<SequenceRecord> {
    fn write(&mut self, rec: &SequenceRecord) -> Result<()> {
        self.push(rec.clone());
        Ok(())
    }
}

/// Streams records to `<path>.partial`; [`DatasetWriter::finish`] assembles the final file.
/// Dropping an unfinished writer removes the partial file.
pub struct DatasetWriter {
    path: PathBuf,
    partial: PathBuf,
    out: Option<BufWriter<File>>,
    manifest: DatasetManifest,
}

impl DatasetWriter {
    pub fn create(path: impl AsRef<FsPath>, manifest: DatasetManifest) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut partial = path.clone().into_os_string();
        partial.push(".partial");
        let partial = PathBuf::from(partial);
        let out = BufWriter::new(File::create(&partial)?);
        Ok(DatasetWriter { path, partial, out: Some(out), manifest })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn finish(mut self) -> Result<DatasetManifest> {
        let result = self.assemble();
        if result.is_err() {
            let _ = fs::remove_file(&self.path);
        }
        result
    }

    fn assemble(&mut self) -> Result<DatasetManifest> {
        let mut out = self.out.take().expect("writer not finished twice");
        out.flush()?;
        drop(out);
        let json = serde_json::to_vec(&self.manifest).map_err(|e| Error::Data(e.to_string()))?;
        let mut dst = BufWriter::new(File::create(&self.path)?);
        dst.write_all(DATASET_MAGIC)?;
        dst.write_all(&(json.len() as u32).to_le_bytes())?;
        dst.write_all(&json)?;
        let mut src = File::open(&self.partial)?;
        std::io::copy(&mut src, &mut dst)?;
        dst.flush()?;
        fs::remove_file(&self.partial)?;
        Ok(self.manifest.clone())
    }
}

impl SequenceSink for DatasetWriter {
    fn write(&mut self, rec: &SequenceRecord) -> Result<()> {
        if rec.variant != self.manifest.feature_variant {
            return Err(Error::Data(format!(
                "record variant {:?} does not match dataset variant {:?}",
                rec.variant, self.manifest.feature_variant
            )));
        }
        rec.validate(self.manifest.seq_len)?;
        let payload = encode_record(rec);
        let out = self.out.as_mut().expect("writer is open");
        out.write_all(&(payload.len() as u32).to_le_bytes())?;
        out.write_all(&payload)?;
        out.write_all(&crc32fast::hash(&payload).to_le_bytes())?;
        self.manifest.account(rec);
        Ok(())
    }
}

impl Drop for DatasetWriter {
    fn drop(&mut self) {
        if self.out.is_some() || self.partial.exists() {
            self.out = None;
            let _ = fs::remove_file(&self.partial);
        }
    }
}

/// Iterator over the records of a dataset file.
///
/// Yields an error, then stops, on the first malformed record. After the last record the
/// per-split counts are checked against the manifest.
pub struct DatasetReader<R> {
    input: R,
    offset: u64,
    manifest: DatasetManifest,
    seen: BTreeMap<Split, u64>,
    done: bool,
}

pub fn read_dataset(path: impl AsRef<FsPath>) -> Result<(DatasetManifest, DatasetReader<BufReader<File>>)> {
    let file = BufReader::new(File::open(path)?);
    DatasetReader::new(file)
}

/// Reads a whole dataset file into memory.
pub fn read_all(path: impl AsRef<FsPath>) -> Result<(DatasetManifest, Vec<SequenceRecord>)> {
    let (manifest, reader) = read_dataset(path)?;
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut input: R) -> Result<(DatasetManifest, Self)> {
        let mut magic = [0u8; 8];
        if read_exact_or_eof(&mut input, &mut magic)? != 8 || &magic != DATASET_MAGIC {
            return Err(Error::format(0, "bad magic, not a SEERSEQ1 dataset"));
        }
        let mut len = [0u8; 4];
        if read_exact_or_eof(&mut input, &mut len)? != 4 {
            return Err(Error::format(8, "truncated manifest length"));
        }
        let len = u32::from_le_bytes(len);
        if len > MAX_RECORD_LEN {
            return Err(Error::format(8, "manifest length out of range"));
        }
        let mut json = vec![0u8; len as usize];
        if read_exact_or_eof(&mut input, &mut json)? != json.len() {
            return Err(Error::format(12, "truncated manifest"));
        }
        let manifest: DatasetManifest = serde_json::from_slice(&json).map_err(|e| Error::format(12, format!("manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::format(12, format!("unsupported version {}", manifest.version)));
        }
        let reader = DatasetReader { input, offset: 12 + len as u64, manifest: manifest.clone(), seen: BTreeMap::new(), done: false };
        Ok((manifest, reader))
    }

    fn next_record(&mut self) -> Result<Option<SequenceRecord>> {
        let start = self.offset;
        let mut len = [0u8; 4];
        match read_exact_or_eof(&mut self.input, &mut len)? {
            0 => {
                for (split, &expected) in &self.manifest.counts {
                    let got = self.seen.get(split).copied().unwrap_or(0);
                    if got != expected {
                        return Err(Error::format(start, format!("manifest lists {expected} {} records, file has {got}", split.name())));
                    }
                }
                return Ok(None);
            }
            4 => {}
            _ => return Err(Error::format(start, "truncated record length")),
        }
        let len = u32::from_le_bytes(len);
        if len > MAX_RECORD_LEN {
            return Err(Error::format(start, format!("record length {len} out of range")));
        }
        let mut payload = vec![0u8; len as usize + 4];
        if read_exact_or_eof(&mut self.input, &mut payload)? != payload.len() {
            return Err(Error::format(start + 4, "truncated record"));
        }
        let crc = u32::from_le_bytes(payload[len as usize..].try_into().unwrap());
        payload.truncate(len as usize);
        if crc32fast::hash(&payload) != crc {
            return Err(Error::format(start, "record checksum mismatch"));
        }
        let rec = decode_record(&payload, start + 4)?;
        if rec.frames.len() != self.manifest.seq_len || rec.variant != self.manifest.feature_variant {
            return Err(Error::format(start, "record shape does not match manifest"));
        }
        self.offset = start + 8 + len as u64;
        *self.seen.entry(rec.split).or_default() += 1;
        Ok(Some(rec))
    }
}

impl<R: Read> Iterator for DatasetReader<R> {
    type Item = Result<SequenceRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// One recorded observation of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub agent_id: u32,
    pub scene: Scene,
    pub split: Split,
    pub timestamp_ms: u64,
    pub features: FeatureVector,
    pub label: IntentionLabel,
}

/// Items carried by the recording FIFO.
#[derive(Debug, Clone, PartialEq)]
pub enum StreamItem {
    Frame(SimFrame),
    /// The agent will send no more frames; its partial window is discarded.
    AgentEnd(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordStats {
    pub frames: u64,
    pub sequences: u64,
    pub clean_sequences: u64,
    /// Frames left over in partial windows.
    pub remainder: u64,
}

struct AgentBuffer {
    frames: Vec<Frame>,
    scene: Scene,
    split: Split,
    variant: FeatureVariant,
}

/// Groups frames per agent into consecutive non-overlapping windows of `seq_len`.
pub struct Windower {
    seq_len: usize,
    next_id: u64,
    buffers: HashMap<u32, AgentBuffer>,
    stats: RecordStats,
}

impl Windower {
    pub fn new(seq_len: usize) -> Self {
        Windower { seq_len, next_id: 0, buffers: HashMap::new(), stats: RecordStats::default() }
    }

    pub fn stats(&self) -> RecordStats {
        let pending: u64 = self.buffers.values().map(|b| b.frames.len() as u64).sum();
        RecordStats { remainder: self.stats.remainder + pending, ..self.stats }
    }

    /// Adds a frame and returns the completed sequence, if any.
    pub fn push(&mut self, f: &SimFrame) -> Option<SequenceRecord> {
        self.stats.frames += 1;
        let frame = Frame { features: f.features.to_f32(), label: f.label, timestamp_ms: f.timestamp_ms };
        let buf = self.buffers.entry(f.agent_id).or_insert_with(|| AgentBuffer {
            frames: Vec::with_capacity(self.seq_len),
            scene: f.scene,
            split: f.split,
            variant: f.features.variant,
        });
        if let Some(last) = buf.frames.last() {
            let dt = f.timestamp_ms.checked_sub(last.timestamp_ms);
            if dt.is_none_or(|dt| dt.abs_diff(FRAME_PERIOD_MS) > PERIOD_TOLERANCE_MS) {
                log::warn!("agent {}: frame gap at {} ms, restarting window", f.agent_id, f.timestamp_ms);
                self.stats.remainder += buf.frames.len() as u64;
                buf.frames.clear();
            }
        }
        buf.frames.push(frame);
        if buf.frames.len() < self.seq_len {
            return None;
        }
        let rec = SequenceRecord {
            sequence_id: self.next_id,
            agent_id: f.agent_id,
            scene: buf.scene,
            split: buf.split,
            variant: buf.variant,
            frames: std::mem::replace(&mut buf.frames, Vec::with_capacity(self.seq_len)),
        };
        self.next_id += 1;
        self.stats.sequences += 1;
        if rec.is_clean() {
            self.stats.clean_sequences += 1;
        }
        Some(rec)
    }

    pub fn end_agent(&mut self, agent_id: u32) {
        if let Some(buf) = self.buffers.remove(&agent_id) {
            self.stats.remainder += buf.frames.len() as u64;
        }
    }
}

/// Consumer side of the recording pipeline: drains the FIFO until the producer hangs up,
/// windowing frames into sequences written to `sink`.
pub fn record_stream(rx: Receiver<StreamItem>, seq_len: usize, sink: &mut dyn SequenceSink) -> Result<RecordStats> {
    if !matches!(seq_len, 6 | 12) {
        return Err(Error::config("seq_len", "must be 6 or 12"));
    }
    let mut windower = Windower::new(seq_len);
    for item in rx {
        match item {
            StreamItem::Frame(f) => {
                if let Some(rec) = windower.push(&f) {
                    sink.write(&rec)?;
                }
            }
            StreamItem::AgentEnd(id) => windower.end_agent(id),
        }
    }
    Ok(windower.stats())
}

/// Seeded shuffle split; `round(test_fraction * n)` records go to the test side.
pub fn split_train_test<T: Clone>(records: &[T], test_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config("test_fraction", "must be in (0, 1)"));
    }
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (test_fraction * records.len() as f64).round() as usize;
    let (test, train) = idx.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train.iter().map(|&i| records[i].clone()).collect(), test.iter().map(|&i| records[i].clone()).collect()))
}
