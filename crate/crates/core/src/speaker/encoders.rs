use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SpeakerEmbedding, EMBED_DIM, FACE_SIZE};
use crate::dsp::Melspectrogram;
use crate::error::{Error, Result};
use crate::img::Image;
use crate::nn::{Conv3d, Conv3dGeometry, Graph, Linear, Lstm, ParamId, ParamStore, Tensor, Var};

const FACE_BLOCKS: usize = 5;
const SPEECH_SEED_SALT: u64 = 0x5bd1_e995;

/// Five stride-2 3×3 conv blocks, global average pooling, a linear head to
/// `EMBED_DIM` and L2 normalisation. The first `frozen_prefix` blocks never
/// receive updates.
#[derive(Debug, Clone)]
pub struct FaceEncoder {
    pub blocks: Vec<Conv3d>,
    pub head: Linear,
    pub frozen_prefix: usize,
    prefix: String,
}

impl FaceEncoder {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        prefix: &str,
        base_channels: usize,
        frozen_prefix: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if base_channels == 0 || frozen_prefix > FACE_BLOCKS {
            return Err(Error::Config(format!(
                "face encoder: base_channels {base_channels}, frozen_prefix {frozen_prefix} (max {FACE_BLOCKS})"
            )));
        }
        let mut blocks = Vec::with_capacity(FACE_BLOCKS);
        let mut cin = 3;
        let mut cout = base_channels;
        for b in 0..FACE_BLOCKS {
            blocks.push(Conv3d::new(
                store,
                &format!("{prefix}.block{b}"),
                cin,
                cout,
                [1, 3, 3],
                Conv3dGeometry::new([1, 2, 2], [0, 1, 1]),
                rng,
            )?);
            cin = cout;
            cout *= 2;
        }
        let head = Linear::new(store, &format!("{prefix}.head"), cin, EMBED_DIM, true, rng)?;
        for b in 0..frozen_prefix {
            store.set_trainable_prefix(&format!("{prefix}.block{b}."), false);
        }
        Ok(Self {
            blocks,
            head,
            frozen_prefix,
            prefix: prefix.to_string(),
        })
    }

    /// Parameter-name prefixes of the frozen blocks.
    pub fn frozen_prefixes(&self) -> Vec<String> {
        (0..self.frozen_prefix).map(|b| format!("{}.block{b}.", self.prefix)).collect()
    }

    /// `[B, 3, 1, 64, 64] → [B, EMBED_DIM]`, rows unit-norm.
    pub fn forward(&self, g: &mut Graph, faces: Var) -> Result<Var> {
        let mut x = faces;
        for b in &self.blocks {
            x = b.forward(g, x)?;
            x = g.relu(x);
        }
        let pooled = g.spatial_mean_pool(x)?;
        let y = self.head.forward(g, pooled)?;
        g.l2_normalize_rows(y)
    }

    /// Stacks RGB `64×64` faces into the `[B, 3, 1, 64, 64]` input layout.
    pub fn batch(faces: &[Image]) -> Result<Tensor> {
        if faces.is_empty() {
            return Err(Error::invalid("empty face batch"));
        }
        let mut data = Vec::with_capacity(faces.len() * 3 * FACE_SIZE * FACE_SIZE);
        for f in faces {
            if f.width != FACE_SIZE || f.height != FACE_SIZE || f.channels != 3 {
                return Err(Error::shape(
                    "face_encode",
                    format!("expected {FACE_SIZE}×{FACE_SIZE}×3, got {}×{}×{}", f.height, f.width, f.channels),
                ));
            }
            if !f.in_unit_range() {
                return Err(Error::invalid("face pixels must lie in [0, 1]"));
            }
            data.extend(f.to_planar());
        }
        Tensor::new(vec![faces.len(), 3, 1, FACE_SIZE, FACE_SIZE], data)
    }
}

/// Fixed, seeded recurrent encoder over log-mel frames: per-band
/// standardisation, an LSTM, time-mean pooling, a projection to
/// `EMBED_DIM`, centring and L2 normalisation. Every parameter is frozen.
#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    pub lstm: Lstm,
    pub proj: Linear,
    pub in_offset: ParamId,
    pub in_scale: ParamId,
    pub out_center: ParamId,
    pub n_mels: usize,
}

impl SpeechEncoder {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        prefix: &str,
        n_mels: usize,
        hidden: usize,
        layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let lstm = Lstm::new(store, &format!("{prefix}.lstm"), n_mels, hidden, layers, false, rng)?;
        let proj = Linear::new(store, &format!("{prefix}.proj"), hidden, EMBED_DIM, false, rng)?;
        let in_offset = store.insert(format!("{prefix}.in_offset"), Tensor::zeros(&[n_mels]))?;
        let in_scale = store.insert(format!("{prefix}.in_scale"), Tensor::filled(&[n_mels], 1.0))?;
        let out_center = store.insert(format!("{prefix}.out_center"), Tensor::zeros(&[EMBED_DIM]))?;
        store.set_trainable_prefix(&format!("{prefix}."), false);
        Ok(Self {
            lstm,
            proj,
            in_offset,
            in_scale,
            out_center,
            n_mels,
        })
    }

    fn standardized(&self, store: &ParamStore, mel: &Melspectrogram) -> Result<Tensor> {
        if mel.frames() == 0 {
            return Err(Error::invalid("speech encoder needs at least one mel frame"));
        }
        if mel.n_mels() != self.n_mels {
            return Err(Error::shape("speech_encode", format!("{} mel bands, encoder expects {}", mel.n_mels(), self.n_mels)));
        }
        let off = store.get(self.in_offset).data();
        let sc = store.get(self.in_scale).data();
        let data = mel
            .rows()
            .flat_map(|r| r.iter().zip(off).zip(sc).map(|((x, o), s)| (x - o) * s))
            .collect();
        Tensor::new(vec![mel.frames(), self.n_mels], data)
    }

    /// Projection output before centring.
    fn raw(&self, store: &ParamStore, mel: &Melspectrogram) -> Result<Vec<f32>> {
        let x = self.standardized(store, mel)?;
        let t = x.dim(0);
        let mut g = Graph::new(store);
        let xs = g.constant(x);
        let (out, _) = self.lstm.forward(&mut g, xs, None)?;
        let avg = g.constant(Tensor::filled(&[1, t], 1.0 / t as f32));
        let pooled = g.matmul(avg, out)?;
        let y = self.proj.forward(&mut g, pooled)?;
        g.check_finite()?;
        Ok(g.value(y).to_vec())
    }

    pub fn encode(&self, store: &ParamStore, mel: &Melspectrogram) -> Result<SpeakerEmbedding> {
        let mut y = self.raw(store, mel)?;
        for (v, c) in y.iter_mut().zip(store.get(self.out_center).data()) {
            *v -= c;
        }
        let n = super::l2(&y).max(1e-12);
        y.iter_mut().for_each(|v| *v /= n);
        SpeakerEmbedding::new(y)
    }

    /// Fits the input standardisation to the frames of `mels` and then the
    /// output centre to their mean projection. Runs once, before any
    /// training; afterwards the encoder is fixed.
    pub fn calibrate(&self, store: &mut ParamStore, mels: &[Melspectrogram]) -> Result<()> {
        let frames: usize = mels.iter().map(Melspectrogram::frames).sum();
        if frames < 2 {
            return Err(Error::invalid("calibration needs at least two mel frames"));
        }
        let mut mean = vec![0.0f64; self.n_mels];
        let mut sq = vec![0.0f64; self.n_mels];
        for row in mels.iter().flat_map(Melspectrogram::rows) {
            for (k, &v) in row.iter().enumerate() {
                mean[k] += v as f64;
                sq[k] += (v as f64).powi(2);
            }
        }
        let n = frames as f64;
        let off: Vec<f32> = mean.iter().map(|m| (m / n) as f32).collect();
        let scale: Vec<f32> = mean
            .iter()
            .zip(&sq)
            .map(|(m, s)| {
                let var = (s / n - (m / n).powi(2)).max(0.0);
                (1.0 / var.sqrt().max(1e-3)) as f32
            })
            .collect();
        store.get_mut(self.in_offset).data_mut().copy_from_slice(&off);
        store.get_mut(self.in_scale).data_mut().copy_from_slice(&scale);
        let mut center = vec![0.0f32; EMBED_DIM];
        for m in mels {
            let y = self.raw(store, m)?;
            center.iter_mut().zip(&y).for_each(|(c, v)| *c += v / mels.len() as f32);
        }
        store.get_mut(self.out_center).data_mut().copy_from_slice(&center);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerModelConfig {
    pub face_channels: usize,
    pub frozen_blocks: usize,
    pub speech_hidden: usize,
    pub speech_layers: usize,
    pub n_mels: usize,
    pub seed: u64,
}

impl Default for SpeakerModelConfig {
    fn default() -> Self {
        Self {
            face_channels: 8,
            frozen_blocks: 3,
            speech_hidden: 64,
            speech_layers: 1,
            n_mels: 80,
            seed: 0,
        }
    }
}

/// Face and speech encoders sharing one parameter store.
#[derive(Debug, Clone)]
pub struct SpeakerModel {
    pub store: ParamStore,
    pub face: FaceEncoder,
    pub speech: SpeechEncoder,
    pub config: SpeakerModelConfig,
}

impl SpeakerModel {
    pub fn new(config: &SpeakerModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let face = FaceEncoder::new(&mut store, "face", config.face_channels, config.frozen_blocks, &mut rng)?;
        let mut speech_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SPEECH_SEED_SALT);
        let speech = SpeechEncoder::new(
            &mut store,
            "speech",
            config.n_mels,
            config.speech_hidden,
            config.speech_layers,
            &mut speech_rng,
        )?;
        Ok(Self {
            store,
            face,
            speech,
            config: config.clone(),
        })
    }

    pub fn face_encode_batch(&self, faces: &[Image]) -> Result<Vec<SpeakerEmbedding>> {
        let x = FaceEncoder::batch(faces)?;
        let mut g = Graph::new(&self.store);
        let xv = g.constant(x);
        let y = self.face.forward(&mut g, xv)?;
        g.check_finite()?;
        g.value(y).chunks(EMBED_DIM).map(|r| SpeakerEmbedding::new(r.to_vec())).collect()
    }

    pub fn face_encode(&self, face: &Image) -> Result<SpeakerEmbedding> {
        Ok(self.face_encode_batch(std::slice::from_ref(face))?.remove(0))
    }

    pub fn speech_encode(&self, mel: &Melspectrogram) -> Result<SpeakerEmbedding> {
        self.speech.encode(&self.store, mel)
    }

    pub fn calibrate_speech(&mut self, mels: &[Melspectrogram]) -> Result<()> {
        self.speech.calibrate(&mut self.store, mels)
    }

    /// Hash of every parameter that must never change during training.
    pub fn frozen_fingerprint(&self) -> u64 {
        let frozen = self.face.frozen_prefixes();
        self.store
            .fingerprint(|n| n.starts_with("speech.") || frozen.iter().any(|p| n.starts_with(p.as_str())))
    }

    pub fn speech_fingerprint(&self) -> u64 {
        self.store.fingerprint(|n| n.starts_with("speech."))
    }
}
