//! Intelligibility, transcript and spectral-fidelity measures.

mod classifier;
mod stoi;

pub use classifier::TokenClassifier;
pub use stoi::{estoi, stoi};

use serde::{Deserialize, Serialize};

use crate::dsp::griffin_lim::{spectral_convergence, Magnitude};
use crate::dsp::{stft, AudioConfig, Melspectrogram, Waveform};
use crate::error::{Error, Result};

/// Word error rate: Levenshtein distance over tokens (unit costs) divided by
/// the reference length.
pub fn wer<S: AsRef<str>, T: AsRef<str>>(reference: &[S], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("WER needs a non-empty reference"));
    }
    let fold = |s: &str| s.to_lowercase();
    let r: Vec<String> = reference.iter().map(|s| fold(s.as_ref())).collect();
    let h: Vec<String> = hypothesis.iter().map(|s| fold(s.as_ref())).collect();
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    for (i, rw) in r.iter().enumerate() {
        let mut cur = vec![i + 1; h.len() + 1];
        for (j, hw) in h.iter().enumerate() {
            let sub = prev[j] + usize::from(rw != hw);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    Ok(prev[h.len()] as f64 / r.len() as f64)
}

/// Mean squared difference over the common leading frames.
pub fn mel_mse(a: &Melspectrogram, b: &Melspectrogram) -> Result<f64> {
    if a.n_mels() != b.n_mels() {
        return Err(Error::invalid(format!("n_mels differ: {} vs {}", a.n_mels(), b.n_mels())));
    }
    let frames = a.frames().min(b.frames());
    let n = frames * a.n_mels();
    let sum: f64 = a.data()[..n]
        .iter()
        .zip(&b.data()[..n])
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum();
    Ok(sum / n as f64)
}

/// Spectral convergence of `degraded` against `clean` STFT magnitudes,
/// both trimmed to the shorter signal.
pub fn waveform_spectral_convergence(clean: &Waveform, degraded: &Waveform, cfg: &AudioConfig) -> Result<f64> {
    let len = clean.len().min(degraded.len());
    let cut = |w: &Waveform| Waveform::new(w.samples[..len].to_vec(), w.sample_rate_hz);
    let a = Magnitude::of(&stft(&cut(clean), cfg)?);
    let b = Magnitude::of(&stft(&cut(degraded), cfg)?);
    spectral_convergence(&b, &a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub stoi: f64,
    pub estoi: f64,
    pub mel_mse: f64,
    pub spectral_convergence: f64,
    pub wer: Option<f64>,
    /// PESQ is not computed; always `"unavailable"`.
    pub pesq: String,
}

impl MetricReport {
    /// Every audio metric for one (clean, degraded) pair. `wer` is filled in
    /// separately when transcripts are available.
    pub fn evaluate(clean: &Waveform, degraded: &Waveform, cfg: &AudioConfig) -> Result<Self> {
        let mel_a = crate::dsp::wav_to_mel(clean, cfg)?;
        let mel_b = crate::dsp::wav_to_mel(degraded, cfg)?;
        Ok(Self {
            stoi: stoi(clean, degraded)?,
            estoi: estoi(clean, degraded)?,
            mel_mse: mel_mse(&mel_a, &mel_b)?,
            spectral_convergence: waveform_spectral_convergence(clean, degraded, cfg)?,
            wer: None,
            pesq: "unavailable".to_string(),
        })
    }
}
