//! One JSON file configures every command; flags override it.

use std::fs;
use std::path::Path;

use lip2speech::data::CorpusConfig;
use lip2speech::dsp::AudioConfig;
use lip2speech::model::ModelConfig;
use lip2speech::speaker::{SpeakerModelConfig, SpeakerTrainConfig};
use lip2speech::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::failure::{CliResult, Failure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Stop-gate threshold.
    pub threshold: f32,
    /// Longer inputs are split into chunks of this length.
    pub chunk_seconds: f64,
    /// Griffin-Lim iterations.
    pub iterations: usize,
    /// Seed of the inference-time prenet dropout.
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            chunk_seconds: 2.0,
            iterations: lip2speech::dsp::griffin_lim::DEFAULT_ITERATIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub audio: AudioConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub speaker: SpeakerModelConfig,
    pub speaker_train: SpeakerTrainConfig,
    pub corpus: CorpusConfig,
    pub infer: InferConfig,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub threshold: Option<f32>,
    pub chunk_seconds: Option<f64>,
    pub max_steps: Option<usize>,
}

impl CliConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| Failure::config(e.to_string()))
    }

    /// Reads `path` if given, otherwise starts from defaults. Overrides are
    /// applied before validation.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Failure::from(e).at(p))?;
                Self::from_json(&text).map_err(|e| e.at(p))?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.model.seed = seed;
            self.train.seed = seed;
            self.speaker.seed = seed;
            self.speaker_train.seed = seed;
            self.corpus.seed = seed;
            self.infer.seed = seed;
        }
        if let Some(n) = o.iterations {
            self.infer.iterations = n;
        }
        if let Some(t) = o.threshold {
            self.infer.threshold = t;
        }
        if let Some(c) = o.chunk_seconds {
            self.infer.chunk_seconds = c;
        }
        if let Some(m) = o.max_steps {
            self.model.decoder.max_steps = m;
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        self.audio.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.speaker_train.validate()?;
        self.corpus.validate()?;
        let n_mels = self.audio.n_mels;
        if self.model.decoder.n_mels != n_mels || self.speaker.n_mels != n_mels {
            return Err(Failure::config(format!(
                "n_mels disagree: audio {n_mels}, decoder {}, speaker {}",
                self.model.decoder.n_mels, self.speaker.n_mels
            )));
        }
        if self.corpus.sample_rate_hz != self.audio.sample_rate_hz {
            return Err(Failure::config(format!(
                "corpus sample rate {} differs from audio {}",
                self.corpus.sample_rate_hz, self.audio.sample_rate_hz
            )));
        }
        let i = &self.infer;
        if !(i.threshold > 0.0 && i.threshold < 1.0) {
            return Err(Failure::config(format!("threshold must lie in (0, 1), got {}", i.threshold)));
        }
        if !(i.chunk_seconds > 0.0 && i.chunk_seconds.is_finite()) {
            return Err(Failure::config(format!("chunk_seconds must be positive, got {}", i.chunk_seconds)));
        }
        if i.iterations == 0 {
            return Err(Failure::config("Griffin-Lim needs at least one iteration"));
        }
        Ok(())
    }
}
