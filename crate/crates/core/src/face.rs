//! Speaker embedding → face image probe. A DCGAN-style generator trained
//! with a plain per-pixel L2 loss on precomputed embeddings.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::nn::{adam_step, checkpoint, AdamConfig, AdamState, ConvTranspose2d, ConvTranspose2dGeometry, Graph, Linear, ParamStore, Tensor, Var};
use crate::speaker::{SpeakerEmbedding, EMBED_DIM, FACE_SIZE};

/// Side of the projected seed map.
pub const SEED_SIZE: usize = 4;
const UPSAMPLE_BLOCKS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaceDecoderConfig {
    /// Channels of the 4×4 seed map; each upsampling block halves them.
    pub seed_channels: usize,
    pub seed: u64,
}

impl Default for FaceDecoderConfig {
    fn default() -> Self {
        Self {
            seed_channels: 128,
            seed: 0,
        }
    }
}

impl FaceDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seed_channels < 1 << (UPSAMPLE_BLOCKS - 1) {
            return Err(Error::Config(format!(
                "face decoder needs at least {} seed channels, got {}",
                1 << (UPSAMPLE_BLOCKS - 1),
                self.seed_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FaceDecoder {
    pub store: ParamStore,
    pub project: Linear,
    pub upsample: Vec<ConvTranspose2d>,
    pub config: FaceDecoderConfig,
}

impl FaceDecoder {
    pub fn new(config: &FaceDecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.seed_channels;
        let project = Linear::new(&mut store, "face.project", EMBED_DIM, c * SEED_SIZE * SEED_SIZE, true, &mut rng)?;
        let geometry = ConvTranspose2dGeometry { stride: 2, padding: 1 };
        let mut upsample = Vec::with_capacity(UPSAMPLE_BLOCKS);
        let mut ch = c;
        for b in 0..UPSAMPLE_BLOCKS {
            let out = if b + 1 == UPSAMPLE_BLOCKS { 3 } else { ch / 2 };
            upsample.push(ConvTranspose2d::new(&mut store, &format!("face.up{b}"), ch, out, 4, geometry, &mut rng)?);
            ch = out;
        }
        Ok(Self {
            store,
            project,
            upsample,
            config: config.clone(),
        })
    }

    /// `[B, 256]` embeddings → `[B, 3, 64, 64]` planar images in `[0, 1]`.
    pub fn forward(&self, g: &mut Graph, emb: Var) -> Result<Var> {
        let b = g.shape(emb)[0];
        let x = self.project.forward(g, emb)?;
        let x = g.relu(x);
        let mut x = g.reshape(x, &[b, self.config.seed_channels, SEED_SIZE, SEED_SIZE])?;
        for (i, up) in self.upsample.iter().enumerate() {
            x = up.forward(g, x)?;
            x = if i + 1 == self.upsample.len() { g.tanh(x) } else { g.relu(x) };
        }
        let x = g.add_scalar(x, 1.0);
        Ok(g.scale(x, 0.5))
    }

    pub fn decode_batch(&self, embs: &[SpeakerEmbedding]) -> Result<Vec<Image>> {
        if embs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.store);
        let e = g.constant(embedding_batch(embs)?);
        let y = self.forward(&mut g, e)?;
        g.check_finite()?;
        let px = 3 * FACE_SIZE * FACE_SIZE;
        g.value(y)
            .chunks(px)
            .map(|p| Image::from_planar(FACE_SIZE, FACE_SIZE, 3, p))
            .collect()
    }

    pub fn decode_face(&self, emb: &SpeakerEmbedding) -> Result<Image> {
        Ok(self.decode_batch(std::slice::from_ref(emb))?.remove(0))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    pub fn load(config: &FaceDecoderConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut d = Self::new(config)?;
        checkpoint::load_into(&mut d.store, path)?;
        Ok(d)
    }
}

fn embedding_batch(embs: &[SpeakerEmbedding]) -> Result<Tensor> {
    if let Some(e) = embs.iter().find(|e| e.values().len() != EMBED_DIM) {
        return Err(Error::shape("face_decoder", format!("embedding of length {}", e.values().len())));
    }
    Tensor::new(vec![embs.len(), EMBED_DIM], embs.iter().flat_map(|e| e.values().iter().copied()).collect())
}

fn image_batch(faces: &[&Image]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(faces.len() * 3 * FACE_SIZE * FACE_SIZE);
    for f in faces {
        if f.width != FACE_SIZE || f.height != FACE_SIZE || f.channels != 3 {
            return Err(Error::shape(
                "face_decoder",
                format!("target {}×{}×{}, expected {FACE_SIZE}×{FACE_SIZE}×3", f.height, f.width, f.channels),
            ));
        }
        data.extend(f.to_planar());
    }
    Tensor::new(vec![faces.len(), 3, FACE_SIZE, FACE_SIZE], data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaceTrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub steps: usize,
    /// Stop once the mean of the last ten step losses is below this.
    pub target_loss: f32,
    pub seed: u64,
}

impl Default for FaceTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            steps: 2000,
            target_loss: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceTrainReport {
    /// Full-set loss before the first update.
    pub initial_loss: f32,
    /// Mini-batch loss at every step.
    pub step_losses: Vec<f32>,
    /// Full-set loss after the last update.
    pub final_loss: f32,
}

/// Mean per-pixel squared error of the decoder over every pair.
pub fn reconstruction_loss(decoder: &FaceDecoder, pairs: &[(SpeakerEmbedding, Image)]) -> Result<f32> {
    if pairs.is_empty() {
        return Err(Error::invalid("no face pairs"));
    }
    let mut total = 0.0f64;
    for chunk in pairs.chunks(16) {
        let mut g = Graph::new(&decoder.store);
        let embs: Vec<SpeakerEmbedding> = chunk.iter().map(|p| p.0.clone()).collect();
        let faces: Vec<&Image> = chunk.iter().map(|p| &p.1).collect();
        let e = g.constant(embedding_batch(&embs)?);
        let y = decoder.forward(&mut g, e)?;
        let t = g.constant(image_batch(&faces)?);
        let l = g.mse(y, t)?;
        total += g.scalar(l) as f64 * chunk.len() as f64;
    }
    Ok((total / pairs.len() as f64) as f32)
}

/// Adam on mean squared pixel error over shuffled mini-batches. The
/// embeddings are fixed inputs.
pub fn train_face_decoder(
    decoder: &mut FaceDecoder,
    pairs: &[(SpeakerEmbedding, Image)],
    cfg: &FaceTrainConfig,
) -> Result<FaceTrainReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("face decoder training needs at least one pair"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("invalid face training settings {cfg:?}")));
    }
    let embs = pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>();
    embedding_batch(&embs)?;
    image_batch(&pairs.iter().map(|p| &p.1).collect::<Vec<_>>())?;

    let initial_loss = reconstruction_loss(decoder, pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut step_losses = Vec::with_capacity(cfg.steps);
    decoder.store.zero_grad();
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size.min(pairs.len()));
        while batch.len() < cfg.batch_size.min(pairs.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let grads = {
            let mut g = Graph::new(&decoder.store);
            let be: Vec<SpeakerEmbedding> = batch.iter().map(|&i| pairs[i].0.clone()).collect();
            let bf: Vec<&Image> = batch.iter().map(|&i| &pairs[i].1).collect();
            let e = g.constant(embedding_batch(&be)?);
            let y = decoder.forward(&mut g, e)?;
            let t = g.constant(image_batch(&bf)?);
            let l = g.mse(y, t)?;
            g.check_finite()?;
            step_losses.push(g.scalar(l));
            g.backward(l)?
        };
        grads.accumulate_into(&mut decoder.store, 1.0)?;
        adam_step(&mut decoder.store, &mut adam)?;
        decoder.store.zero_grad();
        let recent = &step_losses[step_losses.len().saturating_sub(10)..];
        if recent.len() == 10 && recent.iter().sum::<f32>() / 10.0 < cfg.target_loss {
            break;
        }
    }
    let final_loss = reconstruction_loss(decoder, pairs)?;
    Ok(FaceTrainReport {
        initial_loss,
        step_losses,
        final_loss,
    })
}
