//! The full lip-to-speech network: video encoder, speaker fusion and mel
//! decoder over one parameter store.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, Generation, MelDecoder};
use crate::dsp::AudioConfig;
use crate::error::Result;
use crate::nn::{checkpoint, Graph, ParamStore, Tensor, Var};
use crate::speaker::{SpeakerEmbedding, EMBED_DIM};
use crate::video::{fuse, LipRoiSequence, VideoEncoder, VideoEncoderConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub video: VideoEncoderConfig,
    pub decoder: DecoderConfig,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.video.validate()?;
        self.decoder.validate()
    }

    pub fn visual_dim(&self) -> usize {
        self.video.feature_dim() + EMBED_DIM
    }
}

#[derive(Debug, Clone)]
pub struct Lip2Speech {
    pub store: ParamStore,
    pub video: VideoEncoder,
    pub decoder: MelDecoder,
    pub config: ModelConfig,
}

impl Lip2Speech {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let video = VideoEncoder::new(&mut store, "video", &config.video, &mut rng)?;
        let decoder = MelDecoder::new(&mut store, "decoder", &config.decoder, config.visual_dim(), &mut rng)?;
        Ok(Self {
            store,
            video,
            decoder,
            config: config.clone(),
        })
    }

    /// Per-frame lip features with the speaker embedding appended: `[N, D_v]`.
    pub fn visual_features(&self, g: &mut Graph, lips: &LipRoiSequence, speaker: &SpeakerEmbedding) -> Result<Var> {
        let x = g.constant(VideoEncoder::input(lips));
        let feats = self.video.forward(g, x)?;
        let s = g.constant(Tensor::row(speaker.values().to_vec()));
        fuse(g, feats, s)
    }

    pub fn visual_tensor(&self, lips: &LipRoiSequence, speaker: &SpeakerEmbedding) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let v = self.visual_features(&mut g, lips, speaker)?;
        g.check_finite()?;
        Ok(g.tensor(v))
    }

    pub fn generate(
        &self,
        lips: &LipRoiSequence,
        speaker: &SpeakerEmbedding,
        threshold: f32,
        max_steps: usize,
        seed: u64,
        audio: &AudioConfig,
    ) -> Result<Generation> {
        let vf = self.visual_tensor(lips, speaker)?;
        self.decoder.generate(&self.store, &vf, threshold, max_steps, seed, audio)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    /// Builds the architecture from `config` and overwrites it with the
    /// checkpoint at `path`.
    pub fn load(config: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut m = Self::new(config)?;
        checkpoint::load_into(&mut m.store, path)?;
        Ok(m)
    }
}
