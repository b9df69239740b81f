//! Scenario file: one TOML document holding every setting a pipeline run needs.
//!
//! Missing sections and keys take their defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureVariant;
use crate::demo::{DemoConfig, Scenario};
use crate::error::{Error, Result};
use crate::generate::GenerateConfig;
use crate::infer::InferConfig;
use crate::rnn::RnnConfig;
use crate::stream::DEFAULT_BACKLOG_CAP;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSettings {
    pub scenarios: Vec<Scenario>,
    pub speed: f64,
    pub lead_s: f64,
    pub duration_s: f64,
    pub snapshots: usize,
}

impl Default for DemoSettings {
    fn default() -> Self {
        let d = DemoConfig::default();
        DemoSettings {
            scenarios: vec![Scenario::LaneChange, Scenario::Conflict],
            speed: d.speed,
            lead_s: d.lead_s,
            duration_s: d.duration_s,
            snapshots: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSettings {
    pub host: String,
    /// Frame stream port; 0 picks a free port.
    pub log_port: u16,
    /// Separate control-only port; control messages are also accepted on the log port.
    pub control_port: Option<u16>,
    pub backlog_cap: usize,
    /// Frames to publish before exiting; 0 runs until interrupted.
    pub frames: u64,
    /// Publish as fast as possible instead of at the readout rate.
    pub batchmode: bool,
}

impl Default for ServeSettings {
    fn default() -> Self {
        ServeSettings {
            host: "127.0.0.1".into(),
            log_port: 0,
            control_port: None,
            backlog_cap: DEFAULT_BACKLOG_CAP,
            frames: 0,
            batchmode: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    pub model: PathBuf,
    /// JSON evaluation report.
    pub report: Option<PathBuf>,
    /// Demo logs and SVG frames.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: PathBuf::from("seer-data.seerseq"),
            model: PathBuf::from("seer-model.seernet"),
            report: None,
            out_dir: PathBuf::from("seer-demo"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Feature variant the model is trained on; datasets always record A3.
    pub variant: FeatureVariant,
    pub generate: GenerateConfig,
    /// `input_dim` and `seq_len` are taken from `variant` and `generate.seq_len`.
    pub rnn: RnnConfig,
    pub infer: InferConfig,
    pub demo: DemoSettings,
    pub serve: ServeSettings,
    pub paths: Paths,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let mut c = ScenarioConfig {
            variant: FeatureVariant::A3,
            generate: GenerateConfig::default(),
            rnn: RnnConfig::default(),
            infer: InferConfig::default(),
            demo: DemoSettings::default(),
            serve: ServeSettings::default(),
            paths: Paths::default(),
        };
        c.sync();
        c
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: ScenarioConfig = toml::from_str(text).map_err(|e| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, e.to_string().replace('\n', " "))
        })?;
        c.sync();
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Derives the model input shape from the data settings.
    pub fn sync(&mut self) {
        self.rnn.input_dim = self.variant.dim();
        self.rnn.seq_len = self.generate.seq_len;
    }

    pub fn validate(&self) -> Result<()> {
        self.generate.validate()?;
        self.rnn.validate()?;
        self.infer.validate()?;
        if self.rnn.input_dim != self.variant.dim() || self.rnn.seq_len != self.generate.seq_len {
            return Err(Error::config("rnn", "input shape must follow variant and generate.seq_len"));
        }
        let d = &self.demo;
        if !(d.speed > 0.0 && d.lead_s > 0.0 && d.duration_s > d.lead_s) {
            return Err(Error::config("demo", "need positive speed and 0 < lead_s < duration_s"));
        }
        if self.serve.backlog_cap == 0 {
            return Err(Error::config("backlog_cap", "must be at least 1"));
        }
        Ok(())
    }

    pub fn demo_config(&self) -> DemoConfig {
        DemoConfig {
            world: self.generate.world.clone(),
            infer: self.infer,
            speed: self.demo.speed,
            lead_s: self.demo.lead_s,
            duration_s: self.demo.duration_s,
            snapshots: self.demo.snapshots,
        }
    }
}
