//! Template-matching word recogniser over fixed-length word slots.
//!
//! Stands in for an ASR system when scoring generated audio: the utterance is
//! cut into equal slots of the training word length, each slot is reduced to
//! a loudness-normalised spectral profile, and the nearest token template by
//! cosine similarity wins.

use crate::dsp::Melspectrogram;
use crate::error::{Error, Result};

const FIRST_COEFF: usize = 2;
const COEFFS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct TokenClassifier {
    /// Mel frames per word slot.
    pub slot_frames: f64,
    pub templates: Vec<(String, Vec<f32>)>,
}

/// Energy-weighted mean of the rows, with the band mean removed.
fn profile(mel: &Melspectrogram, start: usize, end: usize) -> Vec<f32> {
    let n = mel.n_mels();
    let rows: Vec<&[f32]> = (start..end).map(|t| mel.row(t)).collect();
    let levels: Vec<f32> = rows.iter().map(|r| r.iter().sum::<f32>() / n as f32).collect();
    let top = levels.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let weights: Vec<f32> = levels.iter().map(|l| (l - top).exp()).collect();
    let total: f32 = weights.iter().sum();
    let mut p = vec![0.0f32; n];
    for (r, w) in rows.iter().zip(&weights) {
        for (acc, v) in p.iter_mut().zip(r.iter()) {
            *acc += w * v / total;
        }
    }
    cepstrum(&p)
}

/// DCT-II coefficients `FIRST_COEFF..FIRST_COEFF + COEFFS` of a log profile:
/// drops overall level and tilt and smooths away harmonic ripple.
fn cepstrum(p: &[f32]) -> Vec<f32> {
    let n = p.len() as f32;
    (FIRST_COEFF..FIRST_COEFF + COEFFS)
        .map(|k| {
            p.iter()
                .enumerate()
                .map(|(i, v)| v * (std::f32::consts::PI * k as f32 * (i as f32 + 0.5) / n).cos())
                .sum()
        })
        .collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn slot_bounds(frames: usize, slots: usize, j: usize) -> (usize, usize) {
    let a = j * frames / slots;
    let b = ((j + 1) * frames / slots).max(a + 1);
    (a, b.min(frames))
}

impl TokenClassifier {
    /// Builds one template per token from labelled utterances whose words
    /// are evenly spaced in time.
    pub fn fit<S: AsRef<str>>(examples: &[(&Melspectrogram, &[S])]) -> Result<Self> {
        let mut sums: Vec<(String, Vec<f32>, usize)> = Vec::new();
        let mut frames_per_word = 0.0;
        let mut words = 0usize;
        for (mel, tokens) in examples {
            if tokens.is_empty() || mel.frames() < tokens.len() {
                return Err(Error::invalid("each example needs ≥ 1 token and ≥ 1 frame per token"));
            }
            frames_per_word += mel.frames() as f64;
            words += tokens.len();
            for (j, tok) in tokens.iter().enumerate() {
                let (a, b) = slot_bounds(mel.frames(), tokens.len(), j);
                let p = profile(mel, a, b);
                match sums.iter_mut().find(|(name, _, _)| name == tok.as_ref()) {
                    Some((_, acc, count)) => {
                        acc.iter_mut().zip(&p).for_each(|(x, y)| *x += y);
                        *count += 1;
                    }
                    None => sums.push((tok.as_ref().to_string(), p, 1)),
                }
            }
        }
        if sums.is_empty() {
            return Err(Error::invalid("no training examples for the token classifier"));
        }
        sums.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self {
            slot_frames: frames_per_word / words as f64,
            templates: sums
                .into_iter()
                .map(|(name, acc, count)| (name, acc.into_iter().map(|v| v / count as f32).collect()))
                .collect(),
        })
    }

    pub fn slots_for(&self, frames: usize) -> usize {
        ((frames as f64 / self.slot_frames).round() as usize).max(1).min(frames.max(1))
    }

    pub fn classify(&self, mel: &Melspectrogram) -> Vec<String> {
        let slots = self.slots_for(mel.frames());
        (0..slots)
            .map(|j| {
                let (a, b) = slot_bounds(mel.frames(), slots, j);
                let p = profile(mel, a, b);
                self.templates
                    .iter()
                    .max_by(|x, y| cosine(&x.1, &p).total_cmp(&cosine(&y.1, &p)))
                    .map(|t| t.0.clone())
                    .unwrap_or_default()
            })
            .collect()
    }
}
