use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{contrastive_loss, contrastive_loss_var, stack, FaceEncoder, SpeakerEmbedding, SpeakerModel};
use crate::data::SyntheticSample;
use crate::dsp::{wav_to_mel, AudioConfig, Melspectrogram, Waveform};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, ParamStore};

/// Face frames and the pooled log-mel of one identity's speech.
#[derive(Debug, Clone)]
pub struct SpeakerIdentity {
    pub id: String,
    pub faces: Vec<Image>,
    pub mel: Melspectrogram,
}

#[derive(Debug, Clone)]
pub struct SpeakerDataset {
    pub identities: Vec<SpeakerIdentity>,
}

impl SpeakerDataset {
    /// Groups samples by identity; each identity's audio is concatenated in
    /// sample order before analysis.
    pub fn from_samples(samples: &[&SyntheticSample], audio: &AudioConfig) -> Result<Self> {
        let mut groups: BTreeMap<&str, (Vec<Image>, Vec<f32>)> = BTreeMap::new();
        for s in samples {
            let e = groups.entry(&s.identity).or_default();
            e.0.extend(s.frames.iter().cloned());
            e.1.extend_from_slice(&s.audio.samples);
        }
        let identities = groups
            .into_iter()
            .map(|(id, (faces, pcm))| {
                let mel = wav_to_mel(&Waveform::new(pcm, audio.sample_rate_hz), audio)?;
                Ok(SpeakerIdentity {
                    id: id.to_string(),
                    faces,
                    mel,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { identities })
    }

    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeakerTrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub temperature: f32,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub window_min_s: f64,
    pub window_max_s: f64,
    pub val_rounds: usize,
    pub seed: u64,
}

impl Default for SpeakerTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            temperature: super::DEFAULT_TEMPERATURE,
            max_steps: 2000,
            eval_every: 10,
            patience: 10,
            window_min_s: 1.0,
            window_max_s: 3.0,
            val_rounds: 4,
            seed: 0,
        }
    }
}

impl SpeakerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.batch_size >= 2
            && self.temperature > 0.0
            && self.max_steps >= 1
            && self.eval_every >= 1
            && self.patience >= 1
            && self.window_min_s > 0.0
            && self.window_max_s >= self.window_min_s
            && self.val_rounds >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid speaker training settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEval {
    pub step: usize,
    pub train_loss: f32,
    pub val_loss: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerTrainReport {
    pub initial_val_loss: f32,
    pub best_val_loss: f32,
    pub evaluations: Vec<SpeakerEval>,
    pub steps: usize,
    pub stop_reason: String,
}

/// Audio window length in seconds, uniform in `[min_s, max_s]`.
pub fn sample_window_seconds<R: Rng>(rng: &mut R, min_s: f64, max_s: f64) -> f64 {
    rng.gen_range(min_s..=max_s)
}

struct Pair {
    face: Image,
    speech: SpeakerEmbedding,
}

fn draw_pair<R: Rng>(model: &SpeakerModel, ident: &SpeakerIdentity, cfg: &SpeakerTrainConfig, rng: &mut R) -> Result<Pair> {
    let face = ident.faces[rng.gen_range(0..ident.faces.len())].clone();
    let secs = sample_window_seconds(rng, cfg.window_min_s, cfg.window_max_s);
    let rate = ident.mel.sample_rate_hz as f64 / ident.mel.hop as f64;
    let len = ((secs * rate).round() as usize).clamp(1, ident.mel.frames());
    let start = rng.gen_range(0..=ident.mel.frames() - len);
    let speech = model.speech_encode(&ident.mel.slice_frames(start, len)?)?;
    Ok(Pair { face, speech })
}

fn batch_loss(model: &SpeakerModel, pairs: &[Pair], temperature: f32) -> Result<f32> {
    let faces: Vec<Image> = pairs.iter().map(|p| p.face.clone()).collect();
    let f = stack(&model.face_encode_batch(&faces)?)?;
    let s = stack(&pairs.iter().map(|p| p.speech.clone()).collect::<Vec<_>>())?;
    contrastive_loss(&f, &s, temperature)
}

fn check(ds: &SpeakerDataset, what: &str) -> Result<()> {
    if ds.len() < 2 {
        return Err(Error::invalid(format!("{what} set needs at least two identities, got {}", ds.len())));
    }
    if ds.identities.iter().any(|i| i.faces.is_empty() || i.mel.frames() == 0) {
        return Err(Error::invalid(format!("{what} set has an identity without faces or audio")));
    }
    Ok(())
}

/// Contrastive training of the face encoder's unfrozen blocks against the
/// fixed speech encoder. Each step uses distinct identities; validation
/// loss is tracked every `eval_every` steps and training stops after
/// `patience` evaluations without improvement. The best parameters are
/// restored before returning.
pub fn train_speaker_encoder(
    model: &mut SpeakerModel,
    train: &SpeakerDataset,
    val: &SpeakerDataset,
    cfg: &SpeakerTrainConfig,
) -> Result<SpeakerTrainReport> {
    cfg.validate()?;
    check(train, "training")?;
    check(val, "validation")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut val_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7661_6c00);
    let val_batches: Vec<Vec<Pair>> = (0..cfg.val_rounds)
        .map(|_| {
            val.identities
                .iter()
                .map(|ident| draw_pair(model, ident, cfg, &mut val_rng))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let val_loss = |model: &SpeakerModel| -> Result<f32> {
        let mut total = 0.0;
        for b in &val_batches {
            total += batch_loss(model, b, cfg.temperature)?;
        }
        Ok(total / val_batches.len() as f32)
    };

    let initial = val_loss(model)?;
    let mut best = initial;
    let mut best_store: ParamStore = model.store.clone();
    let mut stale = 0;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut evaluations = Vec::new();
    let mut running = 0.0f32;
    let mut since = 0usize;
    let mut stop_reason = "max_steps".to_string();
    let b = cfg.batch_size.min(train.len());
    let mut steps = 0;

    for step in 1..=cfg.max_steps {
        steps = step;
        let chosen = sample(&mut rng, train.len(), b).into_vec();
        let pairs: Vec<Pair> = chosen
            .iter()
            .map(|&i| draw_pair(model, &train.identities[i], cfg, &mut rng))
            .collect::<Result<_>>()?;
        let faces: Vec<Image> = pairs.iter().map(|p| p.face.clone()).collect();
        let x = FaceEncoder::batch(&faces)?;
        let s = stack(&pairs.iter().map(|p| p.speech.clone()).collect::<Vec<_>>())?;
        let grads = {
            let mut g = Graph::new(&model.store);
            let xv = g.constant(x);
            let sv = g.constant(s);
            let f = model.face.forward(&mut g, xv)?;
            let loss = contrastive_loss_var(&mut g, f, sv, cfg.temperature)?;
            g.check_finite()?;
            running += g.scalar(loss);
            since += 1;
            g.backward(loss)?
        };
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store, 1.0)?;
        adam_step(&mut model.store, &mut adam)?;

        if step % cfg.eval_every == 0 {
            let v = val_loss(model)?;
            evaluations.push(SpeakerEval {
                step,
                train_loss: running / since as f32,
                val_loss: v,
            });
            running = 0.0;
            since = 0;
            if v < best {
                best = v;
                best_store = model.store.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    stop_reason = "patience".to_string();
                    break;
                }
            }
        }
    }
    model.store = best_store;
    model.store.zero_grad();
    Ok(SpeakerTrainReport {
        initial_val_loss: initial,
        best_val_loss: best,
        evaluations,
        steps,
        stop_reason,
    })
}
