//! Training of the lip-to-speech network: losses, teacher-forcing
//! annealing, flip augmentation and early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::split_indices;
use crate::dsp::Melspectrogram;
use crate::error::{Error, Result};
use crate::model::Lip2Speech;
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::speaker::SpeakerEmbedding;
use crate::video::LipRoiSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub tf_start: f64,
    pub tf_anneal_every: usize,
    pub tf_anneal_delta: f64,
    pub tf_floor: f64,
    pub early_stop_patience: usize,
    pub flip_prob: f64,
    pub gate_pos_weight: f32,
    pub val_fraction: f64,
    /// Global gradient-norm clip per batch; `0` disables it.
    pub grad_clip: f32,
    /// Learning-rate multiplier for the video encoder's convolutions; `0`
    /// keeps them fixed.
    pub video_lr_scale: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 300,
            tf_start: 1.0,
            tf_anneal_every: 10,
            tf_anneal_delta: 0.1,
            tf_floor: 0.2,
            early_stop_patience: 10,
            flip_prob: 0.5,
            gate_pos_weight: 5.0,
            val_fraction: 0.1,
            grad_clip: 1.0,
            video_lr_scale: VIDEO_LR_SCALE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Batch size used in the original full-scale runs.
    pub const PAPER_BATCH_SIZE: usize = 84;

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = self.lr > 0.0
            && self.batch_size >= 1
            && self.max_epochs >= 1
            && unit(self.tf_start)
            && self.tf_anneal_every >= 1
            && self.tf_anneal_delta >= 0.0
            && unit(self.tf_floor)
            && self.early_stop_patience >= 1
            && unit(self.flip_prob)
            && self.gate_pos_weight > 0.0
            && (0.0..1.0).contains(&self.val_fraction)
            && self.grad_clip >= 0.0
            && self.video_lr_scale >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training settings {self:?}")))
        }
    }
}

/// Validation dropout seed is `cfg.seed ^ EVAL_SALT`.
pub const EVAL_SALT: u64 = 0x6576_616c;

/// Default [`TrainConfig::video_lr_scale`].
pub const VIDEO_LR_SCALE: f32 = 0.01;

/// `max(tf_floor, tf_start − tf_anneal_delta · ⌊epoch / tf_anneal_every⌋)`.
pub fn tf_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let steps = (epoch / cfg.tf_anneal_every) as f64;
    (cfg.tf_start - cfg.tf_anneal_delta * steps).max(cfg.tf_floor)
}

/// Mirrors the whole sequence with probability `prob`.
pub fn augment_flip<R: Rng>(seq: &LipRoiSequence, prob: f64, rng: &mut R) -> (LipRoiSequence, bool) {
    if rng.gen_bool(prob) {
        (seq.flipped(), true)
    } else {
        (seq.clone(), false)
    }
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub lips: LipRoiSequence,
    pub speaker: SpeakerEmbedding,
    pub target: Melspectrogram,
}

/// Gate targets: 1 on the last frame, 0 elsewhere.
pub fn gate_targets(frames: usize) -> Vec<f32> {
    (0..frames).map(|t| if t + 1 == frames { 1.0 } else { 0.0 }).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub gate: Var,
}

/// Mel MSE plus weighted gate cross-entropy; both terms are kept.
pub fn loss(g: &mut Graph, frames: Var, gate_logits: Var, target: &Melspectrogram, pos_weight: f32) -> Result<LossTerms> {
    let shape = g.shape(frames).to_vec();
    if shape != [target.frames(), target.n_mels()] {
        return Err(Error::shape(
            "loss",
            format!("prediction {shape:?} vs target [{}, {}]", target.frames(), target.n_mels()),
        ));
    }
    let t = g.constant(Tensor::new(vec![target.frames(), target.n_mels()], target.data().to_vec())?);
    let mse = g.mse(frames, t)?;
    let gate = g.bce_with_logits(gate_logits, &gate_targets(target.frames()), pos_weight)?;
    let total = g.add(mse, gate)?;
    Ok(LossTerms { total, mse, gate })
}

/// Value form of [`loss`]: `(mse, gate_bce)`.
pub fn loss_values(pred: &Tensor, gate_logits: &[f32], target: &Melspectrogram, pos_weight: f32) -> Result<(f32, f32)> {
    let mut g = Graph::detached();
    let p = g.constant(pred.clone());
    let gl = g.constant(Tensor::new(vec![gate_logits.len().max(1), 1], gate_logits.to_vec())?);
    let terms = loss(&mut g, p, gl, target, pos_weight)?;
    Ok((g.scalar(terms.mse), g.scalar(terms.gate)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub train_mse: f32,
    pub train_gate: f32,
    pub val_loss: f32,
    pub val_mse: f32,
    pub tf_ratio: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f32,
    pub stop_reason: String,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl TrainReport {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Observation points inside [`train_with`].
pub trait TrainHooks {
    /// May replace the measured validation loss of `epoch`.
    fn validation_loss(&mut self, _epoch: usize, measured: f32) -> f32 {
        measured
    }

    fn epoch_end(&mut self, _record: &EpochRecord) {}
}

pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Per-band mean and standard deviation over every frame of `mels`.
pub fn mel_statistics(mels: &[&Melspectrogram]) -> Result<(Vec<f32>, Vec<f32>)> {
    let n_mels = mels.first().map(|m| m.n_mels()).ok_or_else(|| Error::invalid("no mels"))?;
    let mut sum = vec![0.0f64; n_mels];
    let mut sq = vec![0.0f64; n_mels];
    let mut count = 0usize;
    for m in mels {
        for row in m.rows() {
            for (k, &v) in row.iter().enumerate() {
                sum[k] += v as f64;
                sq[k] += (v as f64).powi(2);
            }
            count += 1;
        }
    }
    let n = count as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
    let std = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| ((q / n - (s / n).powi(2)).max(0.0).sqrt().max(1e-2)) as f32)
        .collect();
    Ok((mean, std))
}

struct StepLoss {
    total: f32,
    mse: f32,
    gate: f32,
}

fn forward(
    model: &Lip2Speech,
    g: &mut Graph,
    lips: &LipRoiSequence,
    ex: &TrainingExample,
    tf_ratio: f32,
    seed: u64,
    pos_weight: f32,
) -> Result<LossTerms> {
    let vf = model.visual_features(g, lips, &ex.speaker)?;
    let out = model.decoder.teacher_forced_forward(g, vf, &ex.target, tf_ratio, seed)?;
    loss(g, out.frames, out.gate_logits, &ex.target, pos_weight)
}

/// Teacher-forced (ratio 1) loss under a fixed dropout seed, unflipped.
pub fn evaluate(model: &Lip2Speech, examples: &[&TrainingExample], pos_weight: f32, seed: u64) -> Result<(f32, f32)> {
    let mut total = 0.0;
    let mut mse = 0.0;
    for ex in examples {
        let mut g = Graph::new(&model.store);
        let terms = forward(model, &mut g, &ex.lips, ex, 1.0, seed, pos_weight)?;
        g.check_finite()?;
        total += g.scalar(terms.total);
        mse += g.scalar(terms.mse);
    }
    let n = examples.len().max(1) as f32;
    Ok((total / n, mse / n))
}

fn clip_gradients(model: &mut Lip2Speech, max_norm: f32) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = model.store.grad_norm();
    if norm > max_norm {
        model.store.scale_grads(max_norm / norm);
    }
}

pub fn train(model: &mut Lip2Speech, data: &[TrainingExample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, &mut NoHooks)
}

/// Adam over every trainable parameter. The split is a seeded 90/10 over
/// `data`; with a single example it is used for both roles. Stops at
/// `max_epochs` or after `early_stop_patience` epochs without a new best
/// validation loss, and leaves the best-validation parameters in `model`.
pub fn train_with(model: &mut Lip2Speech, data: &[TrainingExample], cfg: &TrainConfig, hooks: &mut dyn TrainHooks) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training needs at least one example"));
    }
    let (train_idx, mut val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let targets: Vec<&Melspectrogram> = train_idx.iter().map(|&i| &data[i].target).collect();
    let (mean, std) = mel_statistics(&targets)?;
    model.decoder.set_normalization(&mut model.store, &mean, &std)?;
    let lips: Vec<&LipRoiSequence> = train_idx.iter().map(|&i| &data[i].lips).collect();
    model.video.calibrate(&mut model.store, &lips)?;

    let val: Vec<&TrainingExample> = val_idx.iter().map(|&i| &data[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let video_ids: Vec<_> = model.store.ids().filter(|&id| model.store.name(id).starts_with("video.")).collect();
    let video_trainable: Vec<bool> = video_ids.iter().map(|&id| model.store.is_trainable(id)).collect();
    for &id in &video_ids {
        if cfg.video_lr_scale == 0.0 {
            model.store.set_trainable(id, false);
        }
        adam.set_lr_scale(id, cfg.video_lr_scale);
    }
    let eval_seed = cfg.seed ^ EVAL_SALT;
    let mut best = f32::INFINITY;
    let mut best_epoch = 0;
    let mut best_store = model.store.clone();
    let mut stale = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = "max_epochs".to_string();
    let start = Instant::now();
    let mut order = train_idx.clone();
    model.store.zero_grad();

    for epoch in 0..cfg.max_epochs {
        let tf = tf_schedule(epoch, cfg);
        order.shuffle(&mut rng);
        let mut sums = StepLoss {
            total: 0.0,
            mse: 0.0,
            gate: 0.0,
        };
        for batch in order.chunks(cfg.batch_size) {
            for &i in batch {
                let ex = &data[i];
                let (lips, _) = augment_flip(&ex.lips, cfg.flip_prob, &mut rng);
                let seed: u64 = rng.gen();
                let grads = {
                    let mut g = Graph::new(&model.store);
                    let terms = forward(model, &mut g, &lips, ex, tf as f32, seed, cfg.gate_pos_weight)?;
                    g.check_finite()?;
                    sums.total += g.scalar(terms.total);
                    sums.mse += g.scalar(terms.mse);
                    sums.gate += g.scalar(terms.gate);
                    g.backward(terms.total)?
                };
                grads.accumulate_into(&mut model.store, 1.0 / batch.len() as f32)?;
            }
            clip_gradients(model, cfg.grad_clip);
            adam_step(&mut model.store, &mut adam)?;
            model.store.zero_grad();
        }
        let n = order.len() as f32;
        let (val_loss, val_mse) = evaluate(model, &val, cfg.gate_pos_weight, eval_seed)?;
        let val_loss = hooks.validation_loss(epoch, val_loss);
        let record = EpochRecord {
            epoch,
            train_loss: sums.total / n,
            train_mse: sums.mse / n,
            train_gate: sums.gate / n,
            val_loss,
            val_mse,
            tf_ratio: tf,
            wall_s: start.elapsed().as_secs_f64(),
        };
        hooks.epoch_end(&record);
        epochs.push(record);
        if val_loss < best {
            best = val_loss;
            best_epoch = epoch;
            best_store = model.store.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                stop_reason = "early_stop".to_string();
                break;
            }
        }
    }
    model.store = best_store;
    for (&id, &t) in video_ids.iter().zip(&video_trainable) {
        model.store.set_trainable(id, t);
    }
    model.store.zero_grad();
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val_loss: best,
        stop_reason,
        train_indices: train_idx,
        val_indices: val_idx,
    })
}
